//! The subcommands. Each returns its in-memory results and writes its
//! artifacts under the output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bap_core::additivity::{self, AdditivityReport};
use bap_core::anchors::{self, KSweepReport, SweepInputs};
use bap_core::encoders::{planted_teacher, InputDims, PlantedConfig};
use bap_core::evaluation::MetricsRow;
use bap_core::scene::dataset::{write_manifest, ManifestHeader};
use bap_core::scene::{CompositeParams, Degradation, GroupedDataset};
use bap_core::seed::derive;

use crate::config::ExperimentConfig;
use crate::pipeline::{prepare_all, Lab};
use crate::record::{ResultRecord, RunRecord, TrainSummary, CODE_HASH};

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// Writes the resolved configuration next to the outputs.
fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Builds the grouped datasets for every ρ and writes their manifests.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(GroupedDataset, GroupedDataset)>> {
    let lab = Lab::new(cfg.clone())?;
    let seed = cfg.run_seed(0);
    let splits = lab.splits(seed);
    let dir = out.join("data");
    ensure_dir(&dir)?;
    write_config(cfg, out)?;
    let mut sets = Vec::new();
    for &rho in &cfg.rhos {
        let spec_seed = derive(seed, &[0xda7a, cfg.data.classes[0] as u64, cfg.data.classes[1] as u64]);
        let spec = bap_core::scene::DatasetSpec {
            classes: cfg.data.classes,
            groups: cfg.data.groups,
            train_fgs: cfg.data.classes.map(|c| splits.train_fgs[&c].clone()),
            test_fgs: cfg.data.classes.map(|c| splits.test_fgs[&c].clone()),
            train_bgs: cfg.data.groups.map(|g| splits.train_bgs[&g].clone()),
            test_bgs: cfg.data.groups.map(|g| splits.test_bgs[&g].clone()),
            rho,
            train_per_class: cfg.data.train_per_class,
            test_per_cell: cfg.data.test_per_cell,
        };
        let (train, test) = bap_core::scene::build_grouped_dataset(&spec, spec_seed)?;
        bap_core::scene::dataset::leakage_check(&train, &test)?;
        let header = ManifestHeader {
            world_seed: cfg.world_seed,
            world: cfg.world,
            params: CompositeParams::waterbirds(Degradation::Perfect),
            classes: cfg.data.classes,
            groups: cfg.data.groups,
            rho,
        };
        let path = dir.join(format!("manifest_rho{rho}.jsonl"));
        let mut w = BufWriter::new(fs::File::create(&path)?);
        write_manifest(&mut w, &header, &[&train, &test])?;
        sets.push((train, test));
    }
    Ok(sets)
}

/// Additivity scores of planted teachers over the configured α values.
pub fn probe_additivity(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(f32, AdditivityReport)>> {
    let lab = Lab::new(cfg.clone())?;
    let seed = cfg.run_seed(0);
    let a = &cfg.additivity;
    let fgs: Vec<u64> = (0..lab.world.num_foregrounds()).collect();
    let bgs: Vec<u64> = (0..lab.world.num_backgrounds()).collect();
    let pairs = additivity::draw_pairs(&fgs, &bgs, a.n, seed);
    let params = CompositeParams::waterbirds(Degradation::Perfect);
    let standard = match a.mode.as_str() {
        "standard" => Some(additivity::standard_triples(&lab.world, &pairs, &params, seed)?),
        "disjoint" => None,
        other => bail!("unknown additivity mode `{other}`"),
    };
    let dims = InputDims::rgb(cfg.world.height, cfg.world.width);
    let mut rows = Vec::new();
    let mut csv = String::from(AdditivityReport::CSV_HEADER);
    csv.push('\n');
    for &alpha in &a.alphas {
        let teacher = planted_teacher(&PlantedConfig::new(cfg.teacher.seed, alpha, dims, cfg.teacher.embed_dim))?;
        let triples = match &standard {
            Some(t) => t.clone(),
            None => additivity::disjoint_triples(&lab.world, &teacher, &pairs)?,
        };
        let rep = additivity::batch_additivity(&teacher, &triples)?;
        writeln!(csv, "{}", rep.csv_row(alpha))?;
        rows.push((alpha, rep));
    }
    ensure_dir(out)?;
    fs::write(out.join("additivity.csv"), csv)?;
    Ok(rows)
}

/// K sweep of anchor quality plus the residual-variance law.
pub struct KAblation {
    pub report: KSweepReport,
    pub slope: f64,
}

pub fn k_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<KAblation> {
    let lab = Lab::new(cfg.clone())?;
    let seed = cfg.run_seed(0);
    let splits = lab.splits(seed);
    let k = &cfg.k_ablation;
    let ids = lab.bap_foreground_ids(&splits, &cfg.data.classes, k.n_foregrounds, seed)?;
    let fgs = prepare_all(&lab.world, &ids, Degradation::Perfect)?;
    let all_classes: Vec<Vec<u64>> = (0..cfg.world.num_classes)
        .map(|c| anchors::subsample(&splits.train_fgs[&c], cfg.data.prototype_exemplars, derive(seed, &[0x9e, c as u64])))
        .collect();
    let class_protos = anchors::class_prototypes(&lab.teacher, &lab.world, &all_classes)?;
    let groups: Vec<Vec<u64>> = (0..cfg.world.num_bg_groups)
        .map(|g| anchors::subsample(&lab.world.bg_ids_of_group(g), 100, derive(seed, &[0x6e, g as u64])))
        .collect();
    let group_protos = anchors::group_prototypes(&lab.teacher, &lab.world, &groups)?;
    let mu_ids = anchors::subsample(&splits.pool, k.mu_backgrounds, derive(seed, &[0x3b]));
    if mu_ids.len() < k.mu_backgrounds {
        bail!("background pool holds {} images, {} requested for the mean", mu_ids.len(), k.mu_backgrounds);
    }
    let bg_embeddings = anchors::encode_backgrounds(&lab.teacher, &lab.world, &mu_ids)?;
    let mu = anchors::mean_of_rows(&bg_embeddings)?;
    let inputs = SweepInputs {
        teacher: &lab.teacher,
        world: &lab.world,
        foregrounds: &fgs,
        bg_pool: &splits.pool,
        class_protos: &class_protos,
        group_protos: &group_protos,
        bg_embeddings: &bg_embeddings,
        mu: &mu,
        var_trials: k.var_trials,
    };
    let report = anchors::k_sweep(&inputs, &k.ks, seed)?;
    let xs: Vec<f64> = report.ks.iter().map(|&v| v as f64).collect();
    let slope = anchors::loglog_slope(&xs, &report.var_eps)?;
    let mut csv = format!("{},slope\n", KSweepReport::CSV_HEADER);
    for row in report.csv_rows() {
        writeln!(csv, "{row},{slope:.6}")?;
    }
    ensure_dir(out)?;
    fs::write(out.join("k_ablation.csv"), csv)?;
    Ok(KAblation { report, slope })
}

/// Output of the run matrix.
pub struct Matrix {
    pub records: Vec<RunRecord>,
    pub rows: Vec<MetricsRow>,
}

fn fmt_mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() < 2 { 0.0 } else { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    (m, s)
}

/// Mean ± std per (method, ρ) over runs.
pub fn summarize(rows: &[MetricsRow]) -> String {
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), format!("{}", r.rho))).or_default().push(r);
    }
    let mut s = String::from("method,rho,n,avg_mean,avg_std,wga_mean,wga_std,bsi_mean,bsi_std\n");
    for ((m, rho), rs) in groups {
        let (am, asd) = fmt_mean_std(&rs.iter().map(|r| r.avg).collect::<Vec<_>>());
        let (wm, wsd) = fmt_mean_std(&rs.iter().map(|r| r.wga).collect::<Vec<_>>());
        let (bm, bsd) = fmt_mean_std(&rs.iter().map(|r| r.bsi).collect::<Vec<_>>());
        let _ = writeln!(s, "{m},{rho},{},{am:.6},{asd:.6},{wm:.6},{wsd:.6},{bm:.6},{bsd:.6}", rs.len());
    }
    s
}

/// Every method over every ρ and run.
pub fn run_matrix(cfg: &ExperimentConfig, out: &Path) -> Result<Matrix> {
    let lab = Lab::new(cfg.clone())?;
    write_config(cfg, out)?;
    ensure_dir(&out.join("runs"))?;
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for index in 0..cfg.runs {
        let t0 = Instant::now();
        let seed = cfg.run_seed(index);
        let run_id = format!("run{index}");
        let splits = lab.splits(seed);
        let students = lab.train_students(&splits, &cfg.methods, seed)?;
        let mut train = BTreeMap::new();
        for (name, s) in [("bap", &students.bap), ("control", &students.control), ("ortho", &students.ortho)] {
            if let Some((_, log)) = s {
                train.insert(name.to_string(), TrainSummary::from_log(log, cfg.bap.align.lr));
            }
        }
        let dir = out.join("models").join(&run_id);
        ensure_dir(&dir)?;
        for (name, s) in [("bap", &students.bap), ("control", &students.control), ("ortho", &students.ortho)] {
            if let Some((student, _)) = s {
                student.save(&dir.join(format!("{name}_student")))?;
            }
        }
        if let Some(anchors) = &students.anchors {
            anchors.save(&dir.join("anchors"))?;
        }
        let mut results = Vec::new();
        let mut bap_finetune_trace = Vec::new();
        for &rho in &cfg.rhos {
            let task = lab.task(&splits, cfg.data.classes, rho, seed)?;
            for method in &cfg.methods {
                let r = lab.evaluate_method(method, rho, &splits, &students, &task, seed)?;
                if let Some(flag) = r.metrics.flag() {
                    eprintln!("warning: {run_id} {method} rho={rho}: {flag}");
                }
                let rec = ResultRecord::new(&r, &run_id, seed);
                rows.push(rec.row.clone());
                results.push(rec);
            }
            if rho == 1.0 {
                if let Some((student, _)) = &students.bap {
                    let (_, head) = lab.probe(student, &task, seed)?;
                    bap_finetune_trace = lab.finetune(student, &head, &task, seed)?.2;
                }
            }
        }
        let rec = RunRecord {
            run_id: run_id.clone(),
            run_index: index,
            seed,
            code_hash: CODE_HASH.to_string(),
            config: cfg.clone(),
            train,
            results,
            bap_finetune_trace,
            wall_ms: t0.elapsed().as_millis(),
        };
        rec.save(&out.join("runs").join(format!("{run_id}.json")))?;
        records.push(rec);
    }
    let mut csv = format!("{}\n", MetricsRow::CSV_HEADER);
    for r in &rows {
        writeln!(csv, "{}", r.csv())?;
    }
    fs::write(out.join("metrics.csv"), csv)?;
    fs::write(out.join("summary.csv"), summarize(&rows))?;
    Ok(Matrix { records, rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Seg,
    NSweep,
    MSweep,
    KTrainSweep,
}

impl std::str::FromStr for Ablation {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "seg" => Ablation::Seg,
            "n_sweep" | "n-sweep" => Ablation::NSweep,
            "m_sweep" | "m-sweep" => Ablation::MSweep,
            "k_train_sweep" | "k-train-sweep" => Ablation::KTrainSweep,
            other => bail!("unknown ablation `{other}` (seg, n_sweep, m_sweep, k_train_sweep)"),
        })
    }
}

impl Ablation {
    pub fn file_stem(self) -> &'static str {
        match self {
            Ablation::Seg => "ablate_seg",
            Ablation::NSweep => "ablate_n_sweep",
            Ablation::MSweep => "ablate_m_sweep",
            Ablation::KTrainSweep => "ablate_k_train_sweep",
        }
    }
}

/// One ablation row: BAP probe metrics at ρ = 1 for a setting.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub avg: f64,
    pub wga: f64,
}

pub fn ablate(cfg: &ExperimentConfig, which: Ablation, out: &Path) -> Result<Vec<AblationRow>> {
    let lab = Lab::new(cfg.clone())?;
    let seed = cfg.run_seed(0);
    let splits = lab.splits(seed);
    let task = lab.task(&splits, cfg.data.classes, 1.0, seed)?;
    let b = &cfg.bap;
    let m0 = b.align.m_per_fg;
    let mut plan: Vec<(String, usize, usize, usize, Degradation)> = Vec::new();
    let a = &cfg.ablate;
    match which {
        Ablation::Seg => {
            for &mode in &a.seg_modes {
                plan.push((mode.to_string(), b.n_foregrounds, m0, b.k, mode));
            }
        }
        Ablation::NSweep => {
            for &n in &a.n_sweep {
                plan.push((format!("N={n}"), n, m0, b.k, b.degradation));
            }
        }
        Ablation::MSweep => {
            for &n in &a.m_sweep_n {
                for &m in &a.m_sweep_m {
                    plan.push((format!("N={n},M={m}"), n, m, b.k, b.degradation));
                }
            }
        }
        Ablation::KTrainSweep => {
            for &k in &a.k_train_sweep {
                plan.push((format!("K={k}"), b.n_foregrounds, m0, k, b.degradation));
            }
        }
    }
    let mut rows = Vec::new();
    if which == Ablation::Seg {
        let (m, _) = lab.probe(&lab.teacher, &task, seed)?;
        rows.push(AblationRow { setting: "native-lp".into(), n: 0, m: 0, k: 0, avg: m.avg, wga: m.wga });
    }
    for (setting, n, m, k, mode) in plan {
        let (student, _, _) = lab.train_bap_variant(&splits, n, m, k, mode, seed)?;
        let (metrics, _) = lab.probe(&student, &task, seed)?;
        rows.push(AblationRow { setting, n, m, k, avg: metrics.avg, wga: metrics.wga });
    }
    let mut csv = String::from("setting,N,M,K,avg,wga\n");
    for r in &rows {
        writeln!(csv, "\"{}\",{},{},{},{:.6},{:.6}", r.setting, r.n, r.m, r.k, r.avg, r.wga)?;
    }
    ensure_dir(out)?;
    fs::write(out.join(format!("{}.csv", which.file_stem())), csv)?;
    Ok(rows)
}

/// Consolidated summary of an output directory.
pub struct Report {
    pub summary: String,
    pub missing: Vec<String>,
    pub plot_files: Vec<PathBuf>,
}

/// Rebuilds the summary from the run records alone and writes one plot-data
/// file per figure analog.
pub fn report(dir: &Path) -> Result<Report> {
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))
        .with_context(|| format!("{} holds no config.toml; run a command first", dir.display()))?;
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    let mut finetune_csv = String::from("run_id,epoch,avg,wga\n");
    for index in 0..cfg.runs {
        let path = dir.join("runs").join(format!("run{index}.json"));
        if !path.exists() {
            missing.push(format!("run{index}"));
            continue;
        }
        let rec = RunRecord::load(&path)?;
        for method in &cfg.methods {
            for rho in &cfg.rhos {
                if !rec.results.iter().any(|r| &r.row.method == method && r.row.rho == *rho) {
                    missing.push(format!("run{index}/{method}/rho={rho}"));
                }
            }
        }
        rows.extend(rec.results.iter().map(|r| r.row.clone()));
        for (e, (avg, wga)) in rec.bap_finetune_trace.iter().enumerate() {
            writeln!(finetune_csv, "{},{e},{avg:.6},{wga:.6}", rec.run_id)?;
        }
    }
    let mut plot_files = Vec::new();
    let mut copy_plot = |src: &str, dst: &str, missing: &mut Vec<String>| -> Result<()> {
        let s = dir.join(src);
        if s.exists() {
            let d = dir.join(dst);
            fs::copy(&s, &d)?;
            plot_files.push(d);
        } else {
            missing.push(src.to_string());
        }
        Ok(())
    };
    copy_plot("k_ablation.csv", "plot_k_sweep.csv", &mut missing)?;
    copy_plot("ablate_n_sweep.csv", "plot_n_sweep.csv", &mut missing)?;
    copy_plot("ablate_m_sweep.csv", "plot_m_sweep.csv", &mut missing)?;
    let f6 = dir.join("plot_finetune.csv");
    fs::write(&f6, finetune_csv)?;
    plot_files.push(f6);
    let mut summary = summarize(&rows);
    if !missing.is_empty() {
        summary.push_str("# missing:");
        for m in &missing {
            summary.push(' ');
            summary.push_str(m);
        }
        summary.push('\n');
    }
    fs::write(dir.join("report.csv"), &summary)?;
    Ok(Report { summary, missing, plot_files })
}
