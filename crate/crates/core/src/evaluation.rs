//! Linear probes, prototype classification, group metrics and the
//! background-sensitivity index.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;

use crate::encoders::EncoderModel;
use crate::error::{BapError, Result};
use crate::numerics::tensor::{cosine_slices, Tensor};
use crate::numerics::{LrSchedule, OptimizerState, Tape};
use crate::scene::{composite_with, item_seed, BackgroundImage, CompositeParams, PreparedForeground, Raster, World};
use crate::seed::{self, stream};

pub const BSI_EPS: f64 = 1e-8;
/// Logit scale used to turn prototype cosines into a softmax margin.
pub const MARGIN_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 30, lr: 5e-4, weight_decay: 0.01, batch_size: 128, warmup_frac: 0.1, seed: 0 }
    }
}

/// Linear classifier over frozen embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    pub w: Tensor,
    pub b: Tensor,
    pub cfg: ProbeConfig,
}

impl ProbeHead {
    pub fn zeros(d: usize, classes: usize, cfg: ProbeConfig) -> Self {
        ProbeHead { w: Tensor::zeros(&[d, classes]), b: Tensor::zeros(&[classes]), cfg }
    }

    pub fn num_classes(&self) -> usize {
        self.b.len()
    }

    pub fn predict(&self, emb: &Tensor) -> Result<Vec<usize>> {
        let logits = crate::numerics::matmul(emb, &self.w)?;
        let c = self.num_classes();
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                argmax((0..c).map(|j| f64::from(row[j]) + f64::from(self.b.data()[j]))).0
            })
            .collect())
    }
}

/// Index of the largest value; ties go to the lowest index and are flagged.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, bool) {
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut tie = false;
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
            tie = false;
        } else if v == best.1 {
            tie = true;
        }
    }
    (best.0, tie)
}

/// Weights proportional to inverse class frequency, scaled so a balanced set
/// gets weight 1 everywhere.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f32>> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(BapError::Config(format!("label {y} with {num_classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(BapError::Config(format!("class {c} has no training samples")));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&k| (n / (num_classes as f64 * k as f64)) as f32).collect())
}

/// Gathers rows `idx` of `t`.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let cols = t.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), cols, data)
}

/// Trains a class-weighted softmax probe with AdamW under the warmup+cosine
/// schedule. `head` may carry a warm start.
pub fn fit_head(head: &mut ProbeHead, emb: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<Vec<f64>> {
    if emb.rows() != labels.len() || labels.is_empty() {
        return Err(BapError::dim("train_probe", format!("{} embeddings, {} labels", emb.rows(), labels.len())));
    }
    let weights = class_weights(labels, head.num_classes())?;
    let n = labels.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs).max(1) as u64;
    let sched = LrSchedule::new(cfg.lr, cfg.warmup_frac, total, cfg.lr / 10.0)?;
    let mut opt = OptimizerState::new(&[&head.w, &head.b], cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &[stream::PROBE, epoch as u64]));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            opt.lr = sched.lr_at(step)?;
            let x = gather_rows(emb, chunk)?;
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let ws: Vec<f32> = ys.iter().map(|&y| weights[y]).collect();
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let wv = tape.param("probe.w", head.w.clone());
            let bv = tape.param("probe.b", head.b.clone());
            let logits = tape.matmul(xv, wv)?;
            let logits = tape.add_bias(logits, bv)?;
            let loss = tape.softmax_xent(logits, &ys, &ws)?;
            sum += f64::from(tape.value(loss).item()?) * chunk.len() as f64;
            let mut g = tape.backward(loss)?;
            let gw = g.take(wv).unwrap_or_else(|| Tensor::zeros(head.w.shape()));
            let gb = g.take(bv).unwrap_or_else(|| Tensor::zeros(head.b.shape()));
            opt.step(&mut [&mut head.w, &mut head.b], &[&gw, &gb], &["probe.w", "probe.b"])?;
        }
        losses.push(sum / n as f64);
    }
    Ok(losses)
}

pub fn train_probe(emb: &Tensor, labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<ProbeHead> {
    let mut head = ProbeHead::zeros(emb.cols(), num_classes, *cfg);
    fit_head(&mut head, emb, labels, cfg)?;
    Ok(head)
}

/// Argmax of cosine to each prototype; ties resolve to the lowest index.
pub fn prototype_classify(embedding: &[f32], prototypes: &[Tensor]) -> Result<(usize, bool)> {
    if prototypes.len() < 2 {
        return Err(BapError::Config("prototype classification needs >= 2 prototypes".into()));
    }
    let sims: Vec<f64> = prototypes.iter().map(|p| cosine_slices(embedding, p.data())).collect::<Result<_>>()?;
    Ok(argmax(sims.into_iter()))
}

/// Predictions for every row plus the number of ties.
pub fn prototype_predict(emb: &Tensor, prototypes: &[Tensor]) -> Result<(Vec<usize>, usize)> {
    let out: Vec<(usize, bool)> = (0..emb.rows()).map(|i| prototype_classify(emb.row(i), prototypes)).collect::<Result<_>>()?;
    let ties = out.iter().filter(|x| x.1).count();
    Ok((out.into_iter().map(|x| x.0).collect(), ties))
}

/// Softmax margin (top minus runner-up) of scaled prototype cosines.
pub fn prototype_margins(emb: &Tensor, prototypes: &[Tensor]) -> Result<Vec<f64>> {
    (0..emb.rows())
        .map(|i| {
            let s: Vec<f64> = prototypes
                .iter()
                .map(|p| cosine_slices(emb.row(i), p.data()).map(|c| c * MARGIN_LOGIT_SCALE))
                .collect::<Result<_>>()?;
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            let mut p: Vec<f64> = s.iter().map(|v| (v - mx).exp() / z).collect();
            p.sort_by(|a, b| b.total_cmp(a));
            Ok(p[0] - p.get(1).copied().unwrap_or(0.0))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupMetrics {
    /// `(y, g) → (correct, total)`.
    pub cells: BTreeMap<(usize, usize), (usize, usize)>,
    pub avg: f64,
    pub wga: f64,
    /// Expected cells with no samples; excluded from WGA.
    pub empty_groups: Vec<(usize, usize)>,
}

impl GroupMetrics {
    pub fn accuracy(&self, y: usize, g: usize) -> Option<f64> {
        self.cells.get(&(y, g)).filter(|c| c.1 > 0).map(|&(c, t)| c as f64 / t as f64)
    }

    /// Loud marker for reports when any expected cell was empty.
    pub fn flag(&self) -> Option<String> {
        (!self.empty_groups.is_empty()).then(|| format!("EMPTY GROUPS {:?} excluded from WGA", self.empty_groups))
    }
}

/// Per-cell accuracy over the `num_classes × num_groups` grid.
pub fn group_metrics(preds: &[usize], ys: &[usize], gs: &[usize], num_classes: usize, num_groups: usize) -> Result<GroupMetrics> {
    if preds.len() != ys.len() || ys.len() != gs.len() || preds.is_empty() {
        return Err(BapError::dim("group_metrics", format!("{} / {} / {}", preds.len(), ys.len(), gs.len())));
    }
    let mut cells = BTreeMap::new();
    for y in 0..num_classes {
        for g in 0..num_groups {
            cells.insert((y, g), (0usize, 0usize));
        }
    }
    for ((&p, &y), &g) in preds.iter().zip(ys).zip(gs) {
        let c = cells.entry((y, g)).or_insert((0, 0));
        c.1 += 1;
        c.0 += usize::from(p == y);
    }
    let correct: usize = cells.values().map(|c| c.0).sum();
    let avg = correct as f64 / preds.len() as f64;
    let empty_groups: Vec<_> = cells.iter().filter(|(_, c)| c.1 == 0).map(|(k, _)| *k).collect();
    let wga = cells
        .values()
        .filter(|c| c.1 > 0)
        .map(|&(c, t)| c as f64 / t as f64)
        .fold(f64::INFINITY, f64::min);
    Ok(GroupMetrics { cells, avg, wga, empty_groups })
}

fn centroid_and_var(e: &Tensor) -> (Vec<f64>, f64) {
    let n = e.rows() as f64;
    let mut mu = vec![0.0f64; e.cols()];
    for i in 0..e.rows() {
        for (m, v) in mu.iter_mut().zip(e.row(i)) {
            *m += f64::from(*v) / n;
        }
    }
    let var = (0..e.rows())
        .map(|i| e.row(i).iter().zip(&mu).map(|(v, m)| (f64::from(*v) - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    (mu, var)
}

/// `‖μ_A − μ_B‖ / sqrt(σ_A² + σ_B²)` with σ² the mean squared distance to the
/// centroid; the denominator is floored at `BSI_EPS`.
pub fn bsi(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.rows() < 2 || b.rows() < 2 {
        return Err(BapError::Config("bsi needs two sets of at least two vectors".into()));
    }
    if a.cols() != b.cols() {
        return Err(BapError::dim("bsi", format!("{} vs {} columns", a.cols(), b.cols())));
    }
    let (ma, va) = centroid_and_var(a);
    let (mb, vb) = centroid_and_var(b);
    let dist = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    Ok(dist / (va + vb).sqrt().max(BSI_EPS))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BsiReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub eps: f64,
}

/// Each instance is composited twice with identical geometry, once on a
/// group-0 and once on a group-1 background; BSI per class, then averaged.
pub fn bsi_protocol(
    encoder: &EncoderModel,
    world: &World,
    per_class: &[Vec<PreparedForeground>],
    groups: [&[u64]; 2],
    params: &CompositeParams,
    seed_value: u64,
) -> Result<BsiReport> {
    if groups.iter().any(|g| g.is_empty()) {
        return Err(BapError::Config("bsi_protocol needs backgrounds in both groups".into()));
    }
    let mut values = Vec::new();
    for fgs in per_class {
        let pairs: Vec<(Raster, Raster)> = fgs
            .par_iter()
            .enumerate()
            .map(|(i, fg)| {
                let mut rng = seed::rng(seed_value, &[stream::EVAL, fg.id, i as u64]);
                let b0 = *groups[0].choose(&mut rng).expect("non-empty");
                let b1 = *groups[1].choose(&mut rng).expect("non-empty");
                let s = item_seed(seed_value, fg.id, 0, i as u64);
                let a = composite_with(fg, &world.background(b0)?, params, s)?.raster;
                let b = composite_with(fg, &world.background(b1)?, params, s)?.raster;
                Ok((a, b))
            })
            .collect::<Result<_>>()?;
        let ea = encoder.encode_batch(&pairs.iter().map(|p| &p.0).collect::<Vec<_>>())?;
        let eb = encoder.encode_batch(&pairs.iter().map(|p| &p.1).collect::<Vec<_>>())?;
        values.push(bsi(&ea, &eb)?);
    }
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    Ok(BsiReport { per_class: values, mean, eps: BSI_EPS })
}

/// Background-group probe accuracy for one encoder: train on `train`, test on
/// `test`; both are `(id, group)` lists.
pub fn background_probe_accuracy(
    encoder: &EncoderModel,
    world: &World,
    train: &[(u64, usize)],
    test: &[(u64, usize)],
    num_groups: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let render = |ids: &[(u64, usize)]| -> Result<Tensor> {
        let r: Vec<BackgroundImage> = ids.par_iter().map(|&(b, _)| world.background(b)).collect::<Result<_>>()?;
        encoder.encode_batch(&r.iter().map(|b| &b.raster).collect::<Vec<_>>())
    };
    let etr = render(train)?;
    let ete = render(test)?;
    let ytr: Vec<usize> = train.iter().map(|x| x.1).collect();
    let head = train_probe(&etr, &ytr, num_groups, cfg)?;
    let pred = head.predict(&ete)?;
    let ok = pred.iter().zip(test).filter(|(p, t)| **p == t.1).count();
    Ok(ok as f64 / test.len().max(1) as f64)
}

/// `(before, after)` background-group probe accuracy.
pub fn retention_eval(
    before: &EncoderModel,
    after: &EncoderModel,
    world: &World,
    train: &[(u64, usize)],
    test: &[(u64, usize)],
    num_groups: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    if num_groups < 2 {
        return Err(BapError::Config("retention needs >= 2 background groups".into()));
    }
    Ok((
        background_probe_accuracy(before, world, train, test, num_groups, cfg)?,
        background_probe_accuracy(after, world, train, test, num_groups, cfg)?,
    ))
}

/// One-sided sign test: `P(X ≥ wins)` for `X ~ Bin(wins + losses, 1/2)`.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    // log-space binomial tail
    let ln_fact = |k: usize| (1..=k).map(|i| (i as f64).ln()).sum::<f64>();
    let lnf_n = ln_fact(n);
    (wins..=n)
        .map(|k| (lnf_n - ln_fact(k) - ln_fact(n - k) - n as f64 * std::f64::consts::LN_2).exp())
        .sum::<f64>()
        .min(1.0)
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub rho: f64,
    pub avg: f64,
    pub wga: f64,
    pub acc_00: f64,
    pub acc_01: f64,
    pub acc_10: f64,
    pub acc_11: f64,
    pub bsi: f64,
    pub seed: u64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "run_id,method,rho,avg,wga,acc_00,acc_01,acc_10,acc_11,bsi,seed";

    pub fn new(run_id: &str, method: &str, rho: f64, m: &GroupMetrics, bsi: f64, seed_value: u64) -> Self {
        let a = |y, g| m.accuracy(y, g).unwrap_or(f64::NAN);
        MetricsRow {
            run_id: run_id.into(),
            method: method.into(),
            rho,
            avg: m.avg,
            wga: m.wga,
            acc_00: a(0, 0),
            acc_01: a(0, 1),
            acc_10: a(1, 0),
            acc_11: a(1, 1),
            bsi,
            seed: seed_value,
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.run_id, self.method, self.rho, self.avg, self.wga, self.acc_00, self.acc_01, self.acc_10, self.acc_11, self.bsi, self.seed
        )
    }
}
