//! Student training: anchor alignment, the supervised control, orthogonal
//! targets, and full fine-tuning of an encoder plus probe head.
//!
//! All composite-stream trainers share one data stream: for every epoch and
//! foreground, `m_per_fg` composites on backgrounds drawn from the pool. Two
//! runs with the same seed, foregrounds and pool consume identical
//! `(fg, bg, seed)` sequences regardless of the objective.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;

use crate::anchors::AnchorSet;
use crate::encoders::EncoderModel;
use crate::error::{BapError, Result};
use crate::evaluation::{class_weights, gather_rows, group_metrics, ProbeHead};
use crate::numerics::{LrSchedule, OptimizerState, Tape, Tensor};
use crate::scene::{composite_with, item_seed, CompositeParams, Degradation, PreparedForeground, Raster, World};
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Cosine floor as a fraction of `lr`.
    pub floor_frac: f64,
    pub m_per_fg: usize,
    /// Draw fresh backgrounds every epoch; otherwise epoch 0's draw repeats.
    pub regenerate_per_epoch: bool,
    /// Stop after this many epochs without a relative loss improvement of 1e-3.
    pub early_stopping: Option<usize>,
    pub seed: u64,
    pub params: CompositeParams,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_frac: 0.1,
            floor_frac: 0.1,
            m_per_fg: 5,
            regenerate_per_epoch: true,
            early_stopping: None,
            seed: 0,
            params: CompositeParams::waterbirds(Degradation::Perfect),
        }
    }
}

/// Extra settings for the supervised control.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    /// Leading epochs that train only the head.
    pub head_epochs: usize,
    pub head_lr: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig { head_epochs: 10, head_lr: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Learning rate at the epoch's last step.
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Encoder learning rate at every optimisation step.
    pub lr_trace: Vec<f64>,
    /// Parameter checksum of the final encoder.
    pub checksum: u64,
    pub early_stopped: bool,
    /// `(fg_id, bg_id, item_seed)` in consumption order.
    pub consumed: Vec<(u64, u64, u64)>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,lr,wall_ms";

    pub fn csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        for e in &self.epochs {
            s.push_str(&format!("\n{},{:.8},{:.8e},{}", e.epoch, e.loss, e.lr, e.wall_ms));
        }
        s.push('\n');
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// One planned composite of the training stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamItem {
    /// Index into the foreground slice.
    pub fg: usize,
    pub bg_id: u64,
    pub seed: u64,
}

/// The shuffled composite plan for `epoch`.
pub fn epoch_stream(fgs: &[PreparedForeground], bg_pool: &[u64], cfg: &AlignConfig, epoch: usize) -> Result<Vec<StreamItem>> {
    if bg_pool.is_empty() || fgs.is_empty() || cfg.m_per_fg == 0 {
        return Err(BapError::Config("training stream needs foregrounds, backgrounds and m_per_fg > 0".into()));
    }
    let e = if cfg.regenerate_per_epoch { epoch as u64 } else { 0 };
    let mut items = Vec::with_capacity(fgs.len() * cfg.m_per_fg);
    for (i, fg) in fgs.iter().enumerate() {
        for m in 0..cfg.m_per_fg as u64 {
            let mut rng = seed::rng(cfg.seed, &[stream::ALIGN, e, fg.id, m]);
            let bg_id = *bg_pool.choose(&mut rng).expect("non-empty pool");
            items.push(StreamItem { fg: i, bg_id, seed: item_seed(cfg.seed, fg.id, bg_id, e * cfg.m_per_fg as u64 + m) });
        }
    }
    items.shuffle(&mut seed::rng(cfg.seed, &[stream::ALIGN, u64::MAX, epoch as u64]));
    Ok(items)
}

fn render_batch(world: &World, fgs: &[PreparedForeground], batch: &[StreamItem], params: &CompositeParams) -> Result<Vec<Raster>> {
    batch
        .par_iter()
        .map(|it| Ok(composite_with(&fgs[it.fg], &world.background(it.bg_id)?, params, it.seed)?.raster))
        .collect()
}

/// What one step optimises.
pub enum StepTarget<'a> {
    /// Per-row unit targets; loss `1 − mean cos`.
    Vectors(&'a Tensor),
    /// Class labels with per-row weights; weighted cross-entropy.
    Labels { ys: &'a [usize], weights: &'a [f32] },
}

/// Mean `1 − cos(z_i, t_i)` over rows of two `[B × d]` tensors.
pub fn align_loss(z: &Tensor, targets: &Tensor) -> Result<f64> {
    if z.shape() != targets.shape() || z.rank() != 2 {
        return Err(BapError::dim("align_loss", format!("{:?} vs {:?}", z.shape(), targets.shape())));
    }
    let mut sum = 0.0;
    for i in 0..z.rows() {
        sum += 1.0 - crate::numerics::tensor::cosine_slices(z.row(i), targets.row(i))?;
    }
    Ok(sum / z.rows() as f64)
}

/// Optimiser handles for one step; `None` holds that part fixed.
pub struct StepParts<'a> {
    pub encoder: Option<&'a mut OptimizerState>,
    pub head: Option<(&'a mut ProbeHead, &'a mut OptimizerState)>,
}

/// One optimisation step on a stacked `[B × HWC]` batch. Returns the loss.
pub fn train_step(enc: &mut EncoderModel, x: Tensor, target: &StepTarget<'_>, parts: StepParts<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (z, enc_vars) = enc.record_as(&mut tape, xv, parts.encoder.is_some())?;
    let mut head_vars = None;
    let (loss, offset) = match target {
        StepTarget::Vectors(t) => {
            let tv = tape.leaf((*t).clone());
            let rd = tape.row_dot(z, tv)?;
            let m = tape.mean(rd)?;
            (tape.scale(m, -1.0)?, 1.0)
        }
        StepTarget::Labels { ys, weights } => {
            let (head, _) = parts
                .head
                .as_ref()
                .ok_or_else(|| BapError::Config("label targets need a head".into()))?;
            let wv = tape.param("head.w", head.w.clone());
            let bv = tape.param("head.b", head.b.clone());
            head_vars = Some((wv, bv));
            let logits = tape.matmul(z, wv)?;
            let logits = tape.add_bias(logits, bv)?;
            (tape.softmax_xent(logits, ys, weights)?, 0.0)
        }
    };
    let value = f64::from(tape.value(loss).item()?) + offset;
    let mut grads = tape.backward(loss)?;
    if let Some(opt) = parts.encoder {
        let g: Vec<Tensor> = enc_vars
            .iter()
            .zip(enc.params())
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let names: Vec<String> = enc.param_names().to_vec();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut ps: Vec<&mut Tensor> = enc.params_mut().iter_mut().collect();
        opt.step(&mut ps, &g.iter().collect::<Vec<_>>(), &names)?;
    }
    if let (Some((head, opt)), Some((wv, bv))) = (parts.head, head_vars) {
        let gw = grads.take(wv).unwrap_or_else(|| Tensor::zeros(head.w.shape()));
        let gb = grads.take(bv).unwrap_or_else(|| Tensor::zeros(head.b.shape()));
        opt.step(&mut [&mut head.w, &mut head.b], &[&gw, &gb], &["head.w", "head.b"])?;
    }
    Ok(value)
}

fn stop_early(history: &[f64], patience: Option<usize>) -> bool {
    let Some(p) = patience else { return false };
    if history.len() <= p {
        return false;
    }
    let best_before = history[..history.len() - p].iter().cloned().fold(f64::INFINITY, f64::min);
    let recent = history[history.len() - p..].iter().cloned().fold(f64::INFINITY, f64::min);
    recent > best_before - 1e-3 * best_before.abs()
}

fn steps_per_epoch(fgs: &[PreparedForeground], cfg: &AlignConfig) -> usize {
    (fgs.len() * cfg.m_per_fg).div_ceil(cfg.batch_size)
}

fn check_cfg(cfg: &AlignConfig) -> Result<()> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(BapError::Config("epochs and batch_size must be positive".into()));
    }
    Ok(())
}

/// Composite-stream trainer toward fixed per-foreground target vectors.
fn train_to_vectors(
    init: &EncoderModel,
    world: &World,
    fgs: &[PreparedForeground],
    bg_pool: &[u64],
    targets: &[&Tensor],
    cfg: &AlignConfig,
) -> Result<(EncoderModel, TrainLog)> {
    check_cfg(cfg)?;
    let mut enc = init.clone_unfrozen();
    let d = enc.embed_dim();
    if let Some(t) = targets.iter().find(|t| t.len() != d) {
        return Err(BapError::dim("align targets", format!("target of length {} for embed_dim {d}", t.len())));
    }
    let total = (steps_per_epoch(fgs, cfg) * cfg.epochs) as u64;
    let sched = LrSchedule::new(cfg.lr, cfg.warmup_frac, total, cfg.lr * cfg.floor_frac)?;
    let mut opt = OptimizerState::new(&enc.params().iter().collect::<Vec<_>>(), cfg.lr, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let items = epoch_stream(fgs, bg_pool, cfg, epoch)?;
        let mut sum = 0.0;
        for batch in items.chunks(cfg.batch_size) {
            step += 1;
            opt.lr = sched.lr_at(step)?;
            log.lr_trace.push(opt.lr);
            let rasters = render_batch(world, fgs, batch, &cfg.params)?;
            let x = enc.stack(&rasters.iter().collect::<Vec<_>>())?;
            let mut t = Vec::with_capacity(batch.len() * d);
            for it in batch {
                t.extend_from_slice(targets[it.fg].data());
                log.consumed.push((fgs[it.fg].id, it.bg_id, it.seed));
            }
            let t = Tensor::matrix(batch.len(), d, t)?;
            let parts = StepParts { encoder: Some(&mut opt), head: None };
            sum += train_step(&mut enc, x, &StepTarget::Vectors(&t), parts)? * batch.len() as f64;
        }
        let loss = sum / items.len() as f64;
        history.push(loss);
        log.epochs.push(EpochLog { epoch, loss, lr: opt.lr, wall_ms: t0.elapsed().as_millis() });
        if stop_early(&history, cfg.early_stopping) {
            log.early_stopped = true;
            break;
        }
    }
    log.checksum = enc.checksum();
    Ok((enc, log))
}

/// Aligns a trainable copy of `init` to the anchors of `fgs`.
pub fn train_bap(
    init: &EncoderModel,
    world: &World,
    fgs: &[PreparedForeground],
    bg_pool: &[u64],
    anchors: &AnchorSet,
    cfg: &AlignConfig,
) -> Result<(EncoderModel, TrainLog)> {
    let targets: Vec<&Tensor> = fgs.iter().map(|f| anchors.get(f.id)).collect::<Result<_>>()?;
    train_to_vectors(init, world, fgs, bg_pool, &targets, cfg)
}

/// Same loop with one fixed target per class instead of anchors.
pub fn train_orthogonal(
    init: &EncoderModel,
    world: &World,
    fgs: &[PreparedForeground],
    bg_pool: &[u64],
    class_targets: &BTreeMap<usize, Tensor>,
    cfg: &AlignConfig,
) -> Result<(EncoderModel, TrainLog)> {
    let targets: Vec<&Tensor> = fgs
        .iter()
        .map(|f| {
            class_targets
                .get(&f.class)
                .ok_or_else(|| BapError::Manifest(format!("no target for class {} (foreground {})", f.class, f.id)))
        })
        .collect::<Result<_>>()?;
    train_to_vectors(init, world, fgs, bg_pool, &targets, cfg)
}

/// Supervised control on the same composite stream: a head-only warm-up,
/// then joint cross-entropy training of encoder and head. `classes` maps
/// world classes to head outputs.
pub fn train_control(
    init: &EncoderModel,
    world: &World,
    fgs: &[PreparedForeground],
    bg_pool: &[u64],
    classes: &[usize],
    cfg: &AlignConfig,
    ctl: &ControlConfig,
) -> Result<(EncoderModel, ProbeHead, TrainLog)> {
    check_cfg(cfg)?;
    let label = |c: usize| {
        classes
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| BapError::Manifest(format!("class {c} is not among the control classes {classes:?}")))
    };
    let labels: Vec<usize> = fgs.iter().map(|f| label(f.class)).collect::<Result<_>>()?;
    let weights = class_weights(&labels, classes.len())?;
    let mut enc = init.clone_unfrozen();
    let mut head = ProbeHead::zeros(enc.embed_dim(), classes.len(), Default::default());
    let head_epochs = ctl.head_epochs.min(cfg.epochs);
    let spe = steps_per_epoch(fgs, cfg) as u64;
    let joint_total = (spe * (cfg.epochs - head_epochs) as u64).max(1);
    let sched = LrSchedule::new(cfg.lr, cfg.warmup_frac, joint_total, cfg.lr * cfg.floor_frac)?;
    let mut enc_opt = OptimizerState::new(&enc.params().iter().collect::<Vec<_>>(), cfg.lr, cfg.weight_decay);
    let mut head_opt = OptimizerState::new(&[&head.w, &head.b], ctl.head_lr, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut history = Vec::new();
    let mut joint_step = 0u64;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let joint = epoch >= head_epochs;
        let items = epoch_stream(fgs, bg_pool, cfg, epoch)?;
        let mut sum = 0.0;
        for batch in items.chunks(cfg.batch_size) {
            if joint {
                joint_step += 1;
                enc_opt.lr = sched.lr_at(joint_step)?;
                head_opt.lr = enc_opt.lr;
                log.lr_trace.push(enc_opt.lr);
            } else {
                log.lr_trace.push(0.0);
            }
            let rasters = render_batch(world, fgs, batch, &cfg.params)?;
            let x = enc.stack(&rasters.iter().collect::<Vec<_>>())?;
            let ys: Vec<usize> = batch.iter().map(|it| labels[it.fg]).collect();
            let ws: Vec<f32> = ys.iter().map(|&y| weights[y]).collect();
            log.consumed.extend(batch.iter().map(|it| (fgs[it.fg].id, it.bg_id, it.seed)));
            let parts = StepParts { encoder: joint.then_some(&mut enc_opt), head: Some((&mut head, &mut head_opt)) };
            sum += train_step(&mut enc, x, &StepTarget::Labels { ys: &ys, weights: &ws }, parts)? * batch.len() as f64;
        }
        let loss = sum / items.len() as f64;
        history.push(loss);
        log.epochs.push(EpochLog { epoch, loss, lr: if joint { enc_opt.lr } else { 0.0 }, wall_ms: t0.elapsed().as_millis() });
        if joint && stop_early(&history[head_epochs..], cfg.early_stopping) {
            log.early_stopped = true;
            break;
        }
    }
    log.checksum = enc.checksum();
    Ok((enc, head, log))
}

/// Learned-teacher mode: a fresh `arch` encoder trained with class-balanced
/// cross-entropy on composites over randomly drawn backgrounds, then frozen.
/// `fgs` should cover every class in `classes`.
pub fn pretrain_teacher(
    arch: crate::encoders::Arch,
    dims: crate::encoders::InputDims,
    embed_dim: usize,
    world: &World,
    fgs: &[PreparedForeground],
    bg_pool: &[u64],
    classes: &[usize],
    cfg: &AlignConfig,
) -> Result<(EncoderModel, TrainLog)> {
    let init = EncoderModel::new_student(arch, dims, embed_dim, cfg.seed)?;
    let ctl = ControlConfig { head_epochs: 0, head_lr: cfg.lr };
    let (mut enc, _, log) = train_control(&init, world, fgs, bg_pool, classes, cfg, &ctl)?;
    enc.freeze();
    Ok((enc, log))
}

/// Settings for full fine-tuning on rendered, labelled images.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: 10, batch_size: 128, lr: 1e-3, weight_decay: 0.01, warmup_frac: 0.1, seed: 0 }
    }
}

/// Labelled evaluation images for per-epoch group metrics.
pub struct EvalSet<'a> {
    pub images: &'a [Raster],
    pub ys: &'a [usize],
    pub gs: &'a [usize],
}

/// Fine-tunes encoder and head jointly with class-weighted cross-entropy.
/// `trace[0]` is `(avg, wga)` before any update, then one entry per epoch.
pub fn finetune(
    encoder: &EncoderModel,
    head: &ProbeHead,
    images: &[Raster],
    ys: &[usize],
    eval: &EvalSet<'_>,
    cfg: &FinetuneConfig,
) -> Result<(EncoderModel, ProbeHead, Vec<(f64, f64)>)> {
    if images.len() != ys.len() || images.is_empty() || cfg.batch_size == 0 {
        return Err(BapError::dim("finetune", format!("{} images, {} labels", images.len(), ys.len())));
    }
    let mut enc = encoder.clone_unfrozen();
    let mut head = head.clone();
    let c = head.num_classes();
    let weights = class_weights(ys, c)?;
    let total = (images.len().div_ceil(cfg.batch_size) * cfg.epochs).max(1) as u64;
    let sched = LrSchedule::new(cfg.lr, cfg.warmup_frac, total, cfg.lr / 10.0)?;
    let mut enc_opt = OptimizerState::new(&enc.params().iter().collect::<Vec<_>>(), cfg.lr, cfg.weight_decay);
    let mut head_opt = OptimizerState::new(&[&head.w, &head.b], cfg.lr, cfg.weight_decay);
    let evaluate = |enc: &EncoderModel, head: &ProbeHead| -> Result<(f64, f64)> {
        let e = enc.encode_batch(&eval.images.iter().collect::<Vec<_>>())?;
        let m = group_metrics(&head.predict(&e)?, eval.ys, eval.gs, c, 2)?;
        Ok((m.avg, m.wga))
    };
    let mut trace = vec![evaluate(&enc, &head)?];
    let all = enc.stack(&images.iter().collect::<Vec<_>>())?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &[stream::ALIGN, 0xf7, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            enc_opt.lr = sched.lr_at(step)?;
            head_opt.lr = enc_opt.lr;
            let x = gather_rows(&all, chunk)?;
            let by: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let bw: Vec<f32> = by.iter().map(|&y| weights[y]).collect();
            let parts = StepParts { encoder: Some(&mut enc_opt), head: Some((&mut head, &mut head_opt)) };
            train_step(&mut enc, x, &StepTarget::Labels { ys: &by, weights: &bw }, parts)?;
        }
        trace.push(evaluate(&enc, &head)?);
    }
    Ok((enc, head, trace))
}
