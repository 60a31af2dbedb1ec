//! End-to-end experiment pipelines over the synthetic world.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use bap_core::alignment::{self, AlignConfig, EvalSet, TrainLog};
use bap_core::anchors::{self, AnchorSet};
use bap_core::encoders::{planted_teacher, Arch, EncoderModel, InputDims, PlantedConfig};
use bap_core::evaluation::{
    self, bsi_protocol, group_metrics, prototype_predict, train_probe, GroupMetrics, MetricsRow, ProbeHead,
};
use bap_core::numerics::Tensor;
use bap_core::scene::{
    build_grouped_dataset, split_ids, CompositeParams, DatasetSpec, Degradation, GroupedDataset, PreparedForeground,
    Raster, World,
};
use bap_core::seed::derive;

use crate::config::{ExperimentConfig, TeacherMode};

/// World, teacher and configuration shared by every run.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub world: World,
    pub teacher: EncoderModel,
}

/// Train/test partitions of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    /// Indexed by world class.
    pub train_fgs: BTreeMap<usize, Vec<u64>>,
    pub test_fgs: BTreeMap<usize, Vec<u64>>,
    /// Indexed by world group.
    pub train_bgs: BTreeMap<usize, Vec<u64>>,
    pub test_bgs: BTreeMap<usize, Vec<u64>>,
    /// Generic backgrounds for anchors and alignment.
    pub pool: Vec<u64>,
}

/// A rendered grouped task.
pub struct Task {
    pub train: GroupedDataset,
    pub test: GroupedDataset,
    pub train_x: Vec<Raster>,
    pub test_x: Vec<Raster>,
}

impl Task {
    pub fn eval_set(&self) -> (Vec<usize>, Vec<usize>) {
        (self.test.labels(), self.test.groups())
    }
}

/// Students trained for one run; each is independent of ρ.
#[derive(Default)]
pub struct Students {
    pub anchors: Option<AnchorSet>,
    pub bap: Option<(EncoderModel, TrainLog)>,
    pub control: Option<(EncoderModel, TrainLog)>,
    pub ortho: Option<(EncoderModel, TrainLog)>,
}

/// One evaluated (method, ρ, run) cell.
#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: String,
    pub rho: f64,
    pub metrics: GroupMetrics,
    pub bsi: f64,
    /// Which encoder produced the embeddings behind `bsi`.
    pub bsi_encoder: String,
    pub ties: usize,
    pub finetune_trace: Vec<(f64, f64)>,
}

impl MethodResult {
    pub fn row(&self, run_id: &str, seed: u64) -> MetricsRow {
        MetricsRow::new(run_id, &self.method, self.rho, &self.metrics, self.bsi, seed)
    }
}

pub fn prepare_all(world: &World, ids: &[u64], mode: Degradation) -> Result<Vec<PreparedForeground>> {
    use rayon::prelude::*;
    ids.par_iter()
        .map(|&i| Ok(PreparedForeground::new(&world.foreground(i)?, mode)?))
        .collect()
}

fn encode_all(enc: &EncoderModel, xs: &[Raster]) -> Result<Tensor> {
    Ok(enc.encode_batch(&xs.iter().collect::<Vec<_>>())?)
}

/// The frozen teacher named by the config. Learned teachers see a fixed,
/// teacher-seeded subset of every class on pool backgrounds.
pub fn build_teacher(cfg: &ExperimentConfig, world: &World) -> Result<EncoderModel> {
    let t = &cfg.teacher;
    let dims = InputDims::rgb(cfg.world.height, cfg.world.width);
    match t.mode {
        TeacherMode::Planted => Ok(planted_teacher(&PlantedConfig::new(t.seed, t.alpha, dims, t.embed_dim))?),
        TeacherMode::Learned => {
            let classes: Vec<usize> = (0..cfg.world.num_classes).collect();
            let mut ids = Vec::new();
            for &c in &classes {
                ids.extend(anchors::subsample(&world.fg_ids_of_class(c), t.learned.per_class, derive(t.seed, &[0x7e, c as u64])));
            }
            let fgs = prepare_all(world, &ids, Degradation::Perfect)?;
            let pool: Vec<u64> = cfg.bap.pool_groups.iter().flat_map(|&g| world.bg_ids_of_group(g)).collect();
            let train = AlignConfig { seed: t.seed, ..t.learned.train };
            let (enc, _) =
                alignment::pretrain_teacher(Arch::Mlp, dims, t.embed_dim, world, &fgs, &pool, &classes, &train)?;
            Ok(enc)
        }
    }
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> Result<Lab> {
        cfg.validate()?;
        let world = World::new(cfg.world, cfg.world_seed)?;
        let teacher = build_teacher(&cfg, &world)?;
        Ok(Lab { cfg, world, teacher })
    }

    pub fn splits(&self, run_seed: u64) -> Splits {
        let c = &self.cfg;
        let mut s = Splits {
            train_fgs: BTreeMap::new(),
            test_fgs: BTreeMap::new(),
            train_bgs: BTreeMap::new(),
            test_bgs: BTreeMap::new(),
            pool: Vec::new(),
        };
        for class in 0..c.world.num_classes {
            let (tr, te) = split_ids(&self.world.fg_ids_of_class(class), c.data.fg_train_frac, derive(run_seed, &[0xf6, class as u64]));
            s.train_fgs.insert(class, tr);
            s.test_fgs.insert(class, te);
        }
        for g in 0..c.world.num_bg_groups {
            let ids = self.world.bg_ids_of_group(g);
            if c.bap.pool_groups.contains(&g) {
                s.pool.extend(ids);
            } else {
                let (tr, te) = split_ids(&ids, c.data.bg_train_frac, derive(run_seed, &[0xb6, g as u64]));
                s.train_bgs.insert(g, tr);
                s.test_bgs.insert(g, te);
            }
        }
        s
    }

    /// Grouped task over world `classes` on the downstream groups at `rho`.
    pub fn task(&self, splits: &Splits, classes: [usize; 2], rho: f64, run_seed: u64) -> Result<Task> {
        let d = &self.cfg.data;
        let get = |m: &BTreeMap<usize, Vec<u64>>, k: usize| m.get(&k).cloned().context("missing split");
        let spec = DatasetSpec {
            classes,
            groups: d.groups,
            train_fgs: [get(&splits.train_fgs, classes[0])?, get(&splits.train_fgs, classes[1])?],
            test_fgs: [get(&splits.test_fgs, classes[0])?, get(&splits.test_fgs, classes[1])?],
            train_bgs: [get(&splits.train_bgs, d.groups[0])?, get(&splits.train_bgs, d.groups[1])?],
            test_bgs: [get(&splits.test_bgs, d.groups[0])?, get(&splits.test_bgs, d.groups[1])?],
            rho,
            train_per_class: d.train_per_class,
            test_per_cell: d.test_per_cell,
        };
        let (train, test) = build_grouped_dataset(&spec, derive(run_seed, &[0xda7a, classes[0] as u64, classes[1] as u64]))?;
        bap_core::scene::dataset::leakage_check(&train, &test)?;
        let params = CompositeParams::waterbirds(Degradation::Perfect);
        let train_x = train.render(&self.world, &params)?.into_iter().map(|r| r.raster).collect();
        let test_x = test.render(&self.world, &params)?.into_iter().map(|r| r.raster).collect();
        Ok(Task { train, test, train_x, test_x })
    }

    /// `n` training foregrounds split evenly over `classes`.
    pub fn bap_foreground_ids(&self, splits: &Splits, classes: &[usize], n: usize, run_seed: u64) -> Result<Vec<u64>> {
        let per = n / classes.len();
        let mut out = Vec::with_capacity(n);
        for (i, &c) in classes.iter().enumerate() {
            let pool = &splits.train_fgs[&c];
            let take = if i == 0 { n - per * (classes.len() - 1) } else { per };
            if take > pool.len() {
                bail!("requested {take} foregrounds of class {c}, only {} available", pool.len());
            }
            out.extend(anchors::subsample(pool, take, derive(run_seed, &[0xbf, c as u64])));
        }
        Ok(out)
    }

    pub fn align_cfg(&self, run_seed: u64) -> AlignConfig {
        AlignConfig { seed: derive(run_seed, &[0xa1]), ..self.cfg.bap.align }
    }

    pub fn extract_anchors(&self, fgs: &[PreparedForeground], pool: &[u64], k: usize, run_seed: u64) -> Result<AnchorSet> {
        Ok(anchors::extract_anchors(&self.teacher, &self.world, fgs, pool, k, "pool", derive(run_seed, &[0xac]))?)
    }

    /// BAP student for the given variant of N, M, K and mask quality.
    pub fn train_bap_variant(
        &self,
        splits: &Splits,
        n: usize,
        m: usize,
        k: usize,
        mode: Degradation,
        run_seed: u64,
    ) -> Result<(EncoderModel, TrainLog, AnchorSet)> {
        let ids = self.bap_foreground_ids(splits, &self.cfg.data.classes, n, run_seed)?;
        let fgs = prepare_all(&self.world, &ids, mode)?;
        let anchors = self.extract_anchors(&fgs, &splits.pool, k, run_seed)?;
        let mut cfg = self.align_cfg(run_seed);
        cfg.m_per_fg = m;
        cfg.params.degradation = mode;
        let (student, log) = alignment::train_bap(&self.teacher, &self.world, &fgs, &splits.pool, &anchors, &cfg)?;
        Ok((student, log, anchors))
    }

    /// Trains the students that `methods` need.
    pub fn train_students(&self, splits: &Splits, methods: &[String], run_seed: u64) -> Result<Students> {
        let needs = |m: &str| methods.iter().any(|x| x == m);
        let b = &self.cfg.bap;
        let ids = self.bap_foreground_ids(splits, &self.cfg.data.classes, b.n_foregrounds, run_seed)?;
        let fgs = prepare_all(&self.world, &ids, b.degradation)?;
        let cfg = AlignConfig { params: CompositeParams { degradation: b.degradation, ..b.align.params }, ..self.align_cfg(run_seed) };
        let mut out = Students::default();
        if needs("bap-lp") || needs("bap-zs") {
            let anchors = self.extract_anchors(&fgs, &splits.pool, b.k, run_seed)?;
            out.bap = Some(alignment::train_bap(&self.teacher, &self.world, &fgs, &splits.pool, &anchors, &cfg)?);
            out.anchors = Some(anchors);
        }
        if needs("control") {
            let (enc, _head, log) = alignment::train_control(
                &self.teacher,
                &self.world,
                &fgs,
                &splits.pool,
                &self.cfg.data.classes,
                &cfg,
                &self.cfg.control,
            )?;
            out.control = Some((enc, log));
        }
        if needs("ortho") {
            let targets = anchors::orthogonal_targets(self.teacher.embed_dim(), 2, self.cfg.ortho.target_seed)?;
            let map: BTreeMap<usize, Tensor> = self.cfg.data.classes.iter().copied().zip(targets).collect();
            out.ortho = Some(alignment::train_orthogonal(&self.teacher, &self.world, &fgs, &splits.pool, &map, &cfg)?);
        }
        Ok(out)
    }

    /// Teacher class prototypes from isolated training exemplars.
    pub fn prototypes(&self, splits: &Splits, classes: [usize; 2], run_seed: u64) -> Result<Vec<Tensor>> {
        let j = self.cfg.data.prototype_exemplars;
        let ex: Vec<Vec<u64>> = classes
            .iter()
            .map(|c| anchors::subsample(&splits.train_fgs[c], j, derive(run_seed, &[0x9e, *c as u64])))
            .collect();
        Ok(anchors::class_prototypes(&self.teacher, &self.world, &ex)?)
    }

    pub fn bsi(&self, enc: &EncoderModel, splits: &Splits, classes: [usize; 2], run_seed: u64) -> Result<f64> {
        let per_class: Vec<Vec<PreparedForeground>> = classes
            .iter()
            .map(|c| prepare_all(&self.world, &splits.test_fgs[c], Degradation::Perfect))
            .collect::<Result<_>>()?;
        let g = self.cfg.data.groups;
        let rep = bsi_protocol(
            enc,
            &self.world,
            &per_class,
            [&splits.test_bgs[&g[0]], &splits.test_bgs[&g[1]]],
            &CompositeParams::waterbirds(Degradation::Perfect),
            derive(run_seed, &[0xb51]),
        )?;
        Ok(rep.mean)
    }

    pub fn probe_cfg(&self, run_seed: u64) -> evaluation::ProbeConfig {
        evaluation::ProbeConfig { seed: derive(run_seed, &[0x9b]), ..self.cfg.probe }
    }

    /// Linear probe on frozen `enc` embeddings of the task.
    pub fn probe(&self, enc: &EncoderModel, task: &Task, run_seed: u64) -> Result<(GroupMetrics, ProbeHead)> {
        let etr = encode_all(enc, &task.train_x)?;
        let head = train_probe(&etr, &task.train.labels(), 2, &self.probe_cfg(run_seed))?;
        let ete = encode_all(enc, &task.test_x)?;
        let (ys, gs) = task.eval_set();
        Ok((group_metrics(&head.predict(&ete)?, &ys, &gs, 2, 2)?, head))
    }

    pub fn finetune(&self, enc: &EncoderModel, head: &ProbeHead, task: &Task, run_seed: u64) -> Result<(EncoderModel, ProbeHead, Vec<(f64, f64)>)> {
        let (ys, gs) = task.eval_set();
        let eval = EvalSet { images: &task.test_x, ys: &ys, gs: &gs };
        let cfg = bap_core::alignment::FinetuneConfig { seed: derive(run_seed, &[0xf1]), ..self.cfg.finetune };
        Ok(alignment::finetune(enc, head, &task.train_x, &task.train.labels(), &eval, &cfg)?)
    }

    /// Evaluates one method on a rendered task.
    pub fn evaluate_method(
        &self,
        method: &str,
        rho: f64,
        splits: &Splits,
        students: &Students,
        task: &Task,
        run_seed: u64,
    ) -> Result<MethodResult> {
        let classes = self.cfg.data.classes;
        let student = |s: &Option<(EncoderModel, TrainLog)>| -> Result<EncoderModel> {
            Ok(s.as_ref().with_context(|| format!("{method} needs a trained student"))?.0.clone())
        };
        let (ys, gs) = task.eval_set();
        let mut ties = 0;
        let mut trace = Vec::new();
        let (metrics, enc, tag) = match method {
            "native-zs" | "bap-zs" => {
                let protos = self.prototypes(splits, classes, run_seed)?;
                let enc = if method == "bap-zs" { student(&students.bap)? } else { self.teacher.clone() };
                let (pred, t) = prototype_predict(&encode_all(&enc, &task.test_x)?, &protos)?;
                ties = t;
                let tag = if method == "bap-zs" { "bap-student" } else { "teacher" };
                (group_metrics(&pred, &ys, &gs, 2, 2)?, enc, tag)
            }
            "native-lp" => (self.probe(&self.teacher, task, run_seed)?.0, self.teacher.clone(), "teacher"),
            "lp-ft" => {
                let (_, head) = self.probe(&self.teacher, task, run_seed)?;
                let (enc, head, t) = self.finetune(&self.teacher, &head, task, run_seed)?;
                trace = t;
                let pred = head.predict(&encode_all(&enc, &task.test_x)?)?;
                (group_metrics(&pred, &ys, &gs, 2, 2)?, enc, "fine-tuned-teacher")
            }
            "control" => {
                let enc = student(&students.control)?;
                (self.probe(&enc, task, run_seed)?.0, enc, "control-encoder")
            }
            "bap-lp" => {
                let enc = student(&students.bap)?;
                (self.probe(&enc, task, run_seed)?.0, enc, "bap-student")
            }
            "ortho" => {
                let enc = student(&students.ortho)?;
                (self.probe(&enc, task, run_seed)?.0, enc, "ortho-student")
            }
            other => bail!("unknown method `{other}`"),
        };
        let bsi = self.bsi(&enc, splits, classes, run_seed)?;
        Ok(MethodResult {
            method: method.to_string(),
            rho,
            metrics,
            bsi,
            bsi_encoder: tag.to_string(),
            ties,
            finetune_trace: trace,
        })
    }
}

/// Per-foreground total variance of embeddings over `n_bgs` fresh
/// backgrounds, for two encoders on identical composites.
pub fn contraction(
    lab: &Lab,
    before: &EncoderModel,
    after: &EncoderModel,
    fgs: &[PreparedForeground],
    pool: &[u64],
    n_bgs: usize,
    seed_value: u64,
) -> Result<Vec<(f64, f64)>> {
    use rayon::prelude::*;
    let params = CompositeParams::waterbirds(Degradation::Perfect);
    fgs.par_iter()
        .map(|fg| {
            let ids = anchors::subsample(pool, n_bgs, derive(seed_value, &[0xc0, fg.id]));
            let xs: Vec<Raster> = ids
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    let bg = lab.world.background(b)?;
                    let s = bap_core::scene::item_seed(seed_value, fg.id, b, i as u64);
                    Ok(bap_core::scene::composite_with(fg, &bg, &params, s)?.raster)
                })
                .collect::<Result<_>>()?;
            let v = |e: &EncoderModel| -> Result<f64> { Ok(total_variance(&encode_all(e, &xs)?)) };
            Ok((v(before)?, v(after)?))
        })
        .collect()
}

/// Mean squared distance of rows to their centroid.
pub fn total_variance(e: &Tensor) -> f64 {
    let n = e.rows() as f64;
    let mut mu = vec![0.0f64; e.cols()];
    for i in 0..e.rows() {
        for (m, v) in mu.iter_mut().zip(e.row(i)) {
            *m += f64::from(*v) / n;
        }
    }
    (0..e.rows())
        .map(|i| e.row(i).iter().zip(&mu).map(|(v, m)| (f64::from(*v) - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Background-group probe accuracy before and after, over every world group.
pub fn retention(
    lab: &Lab,
    before: &EncoderModel,
    after: &EncoderModel,
    per_group: usize,
    probe: &evaluation::ProbeConfig,
    seed_value: u64,
) -> Result<(f64, f64)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let groups = lab.cfg.world.num_bg_groups;
    for g in 0..groups {
        let ids = anchors::subsample(&lab.world.bg_ids_of_group(g), per_group, derive(seed_value, &[0x7e, g as u64]));
        let (tr, te) = split_ids(&ids, 0.8, derive(seed_value, &[0x7f, g as u64]));
        train.extend(tr.into_iter().map(|b| (b, g)));
        test.extend(te.into_iter().map(|b| (b, g)));
    }
    let cfg = evaluation::ProbeConfig { seed: derive(seed_value, &[0x7d]), ..*probe };
    Ok(evaluation::retention_eval(before, after, &lab.world, &train, &test, groups, &cfg)?)
}

/// Mean accuracy over the minority cells `(0, 1)` and `(1, 0)`.
pub fn minority_accuracy(m: &GroupMetrics) -> f64 {
    let a = m.accuracy(0, 1).unwrap_or(f64::NAN);
    let b = m.accuracy(1, 0).unwrap_or(f64::NAN);
    (a + b) / 2.0
}
