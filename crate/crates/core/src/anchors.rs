//! Anchor extraction and the background-mean diagnostics.
//!
//! An anchor is the normalised mean of a frozen teacher's embeddings of one
//! foreground composited onto `K` random backgrounds. Writing each
//! composite embedding as foreground part + `μ_bg` + residual, the residual
//! of a `K`-mean has variance falling as `1/K`; the helpers here measure
//! exactly that.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::encoders::EncoderModel;
use crate::error::{BapError, Result};
use crate::numerics::io::{read_all, write_all};
use crate::numerics::tensor::{cosine_slices, Tensor, NORM_FLOOR};
use crate::scene::{composite_with, isolate_like, item_seed, CompositeParams, PreparedForeground, Raster, World};
use crate::seed::{self, stream};

/// Default number of backgrounds per anchor.
pub const DEFAULT_K: usize = 10;
/// Default K grid of the sweep.
pub const K_GRID: [usize; 10] = [1, 2, 3, 5, 8, 10, 15, 20, 30, 40];

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub anchors: BTreeMap<u64, Tensor>,
    pub k: usize,
    pub teacher_tag: String,
    pub pool_id: String,
    /// Foregrounds whose backgrounds had to be drawn with replacement.
    pub with_replacement: usize,
}

impl AnchorSet {
    pub fn get(&self, fg_id: u64) -> Result<&Tensor> {
        self.anchors
            .get(&fg_id)
            .ok_or_else(|| BapError::Manifest(format!("no anchor for foreground {fg_id}")))
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Writes `<stem>.bapt` (anchors in id order) and `<stem>.jsonl`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut t = BufWriter::new(std::fs::File::create(stem.with_extension("bapt"))?);
        write_all(&mut t, &self.anchors.values().collect::<Vec<_>>())?;
        t.flush()?;
        let mut m = BufWriter::new(std::fs::File::create(stem.with_extension("jsonl"))?);
        for id in self.anchors.keys() {
            let line = serde_json::json!({
                "fg_id": id, "K": self.k, "teacher_tag": self.teacher_tag, "pool_id": self.pool_id,
            });
            writeln!(m, "{line}")?;
        }
        m.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<AnchorSet> {
        let tensors = read_all(&mut BufReader::new(std::fs::File::open(stem.with_extension("bapt"))?))?;
        let lines = BufReader::new(std::fs::File::open(stem.with_extension("jsonl"))?);
        let mut anchors = BTreeMap::new();
        let mut meta = (0usize, String::new(), String::new());
        let mut it = tensors.into_iter();
        for line in lines.lines() {
            let v: serde_json::Value =
                serde_json::from_str(&line?).map_err(|e| BapError::Manifest(format!("anchor manifest: {e}")))?;
            let field = |k: &str| v.get(k).ok_or_else(|| BapError::Manifest(format!("anchor line lacks `{k}`")));
            let id = field("fg_id")?.as_u64().ok_or_else(|| BapError::Manifest("fg_id".into()))?;
            meta = (
                field("K")?.as_u64().unwrap_or(0) as usize,
                field("teacher_tag")?.as_str().unwrap_or_default().to_string(),
                field("pool_id")?.as_str().unwrap_or_default().to_string(),
            );
            let t = it.next().ok_or_else(|| BapError::Manifest("fewer anchors than manifest lines".into()))?;
            anchors.insert(id, t);
        }
        if it.next().is_some() {
            return Err(BapError::Manifest("more anchors than manifest lines".into()));
        }
        Ok(AnchorSet { anchors, k: meta.0, teacher_tag: meta.1, pool_id: meta.2, with_replacement: 0 })
    }
}

/// Normalised mean of the given rows (64-bit accumulation).
pub fn anchor_from_embeddings(rows: &[&[f32]]) -> Result<Tensor> {
    let Some(first) = rows.first() else {
        return Err(BapError::degenerate("anchor", "no embeddings"));
    };
    let mut acc = vec![0.0f64; first.len()];
    for r in rows {
        if r.len() != acc.len() {
            return Err(BapError::dim("anchor", format!("{} vs {}", r.len(), acc.len())));
        }
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += f64::from(*v);
        }
    }
    let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n / (rows.len() as f64) < NORM_FLOOR {
        return Err(BapError::degenerate("anchor", "mean embedding vanishes"));
    }
    Tensor::vector(acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// `k` background ids: without replacement when the pool allows.
/// Returns the ids and whether replacement was needed.
pub fn sample_backgrounds(pool: &[u64], k: usize, rng: &mut seed::Rng) -> Result<(Vec<u64>, bool)> {
    if pool.is_empty() || k == 0 {
        return Err(BapError::Config(format!("cannot draw {k} backgrounds from a pool of {}", pool.len())));
    }
    if pool.len() >= k {
        Ok((pool.choose_multiple(rng, k).copied().collect(), false))
    } else {
        Ok(((0..k).map(|_| *pool.choose(rng).expect("non-empty")).collect(), true))
    }
}

/// The `K` composite rasters behind one anchor.
pub fn anchor_composites(
    world: &World,
    fg: &PreparedForeground,
    bg_ids: &[u64],
    params: &CompositeParams,
    seed_value: u64,
) -> Result<Vec<Raster>> {
    bg_ids
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let bg = world.background(b)?;
            Ok(composite_with(fg, &bg, params, item_seed(seed_value, fg.id, b, k as u64))?.raster)
        })
        .collect()
}

/// `normalize(mean_k teacher(C(fg, b_k)))`. The flag reports sampling with
/// replacement.
pub fn extract_anchor(
    teacher: &EncoderModel,
    world: &World,
    fg: &PreparedForeground,
    bg_pool: &[u64],
    k: usize,
    seed_value: u64,
) -> Result<(Tensor, bool)> {
    let mut rng = seed::rng(seed_value, &[stream::ANCHOR, fg.id]);
    let (ids, replaced) = sample_backgrounds(bg_pool, k, &mut rng)?;
    let rasters = anchor_composites(world, fg, &ids, &CompositeParams::anchor(fg.degradation), seed_value)?;
    let e = teacher.encode_batch(&rasters.iter().collect::<Vec<_>>())?;
    let rows: Vec<&[f32]> = (0..e.rows()).map(|i| e.row(i)).collect();
    Ok((anchor_from_embeddings(&rows)?, replaced))
}

pub fn extract_anchors(
    teacher: &EncoderModel,
    world: &World,
    fgs: &[PreparedForeground],
    bg_pool: &[u64],
    k: usize,
    pool_id: &str,
    seed_value: u64,
) -> Result<AnchorSet> {
    let out: Vec<(u64, Tensor, bool)> = fgs
        .par_iter()
        .map(|fg| extract_anchor(teacher, world, fg, bg_pool, k, seed_value).map(|(a, r)| (fg.id, a, r)))
        .collect::<Result<_>>()?;
    let with_replacement = out.iter().filter(|x| x.2).count();
    Ok(AnchorSet {
        anchors: out.into_iter().map(|(id, a, _)| (id, a)).collect(),
        k,
        teacher_tag: teacher.tag(),
        pool_id: pool_id.to_string(),
        with_replacement,
    })
}

/// Unnormalised mean of unit-norm background embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundMean {
    pub mu: Vec<f64>,
    pub count: usize,
}

impl BackgroundMean {
    pub fn norm(&self) -> f64 {
        self.mu.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn mean_of_rows(e: &Tensor) -> Result<BackgroundMean> {
    if e.rank() != 2 || e.rows() == 0 {
        return Err(BapError::dim("mean_of_rows", format!("{:?}", e.shape())));
    }
    let mut acc = vec![0.0f64; e.cols()];
    for i in 0..e.rows() {
        for (a, v) in acc.iter_mut().zip(e.row(i)) {
            *a += f64::from(*v);
        }
    }
    let n = e.rows() as f64;
    Ok(BackgroundMean { mu: acc.into_iter().map(|v| v / n).collect(), count: e.rows() })
}

/// Teacher embeddings of pure backgrounds, one row per id.
pub fn encode_backgrounds(teacher: &EncoderModel, world: &World, ids: &[u64]) -> Result<Tensor> {
    let rasters: Vec<Raster> =
        ids.par_iter().map(|&b| world.background(b).map(|x| x.raster)).collect::<Result<_>>()?;
    teacher.encode_batch(&rasters.iter().collect::<Vec<_>>())
}

pub fn estimate_mu_bg(teacher: &EncoderModel, world: &World, bg_pool: &[u64], n: usize, seed_value: u64) -> Result<BackgroundMean> {
    if n == 0 {
        return Err(BapError::Config("estimate_mu_bg needs n >= 1".into()));
    }
    let mut rng = seed::rng(seed_value, &[stream::ANCHOR, 0xb9]);
    let (ids, _) = sample_backgrounds(bg_pool, n, &mut rng)?;
    mean_of_rows(&encode_backgrounds(teacher, world, &ids)?)
}

/// Mean over `trials` of `‖mean_K(v_bg) − μ_bg‖²`, drawing `K` rows of
/// `embeddings` per trial (without replacement unless `K` exceeds the rows
/// and `allow_replacement` is set).
pub fn residual_variance(
    embeddings: &Tensor,
    k: usize,
    trials: usize,
    mu: &BackgroundMean,
    allow_replacement: bool,
    seed_value: u64,
) -> Result<f64> {
    if trials < 2 {
        return Err(BapError::Config("residual_variance needs >= 2 trials".into()));
    }
    if k > embeddings.rows() && !allow_replacement {
        return Err(BapError::Config(format!("K = {k} exceeds the pool of {} without replacement", embeddings.rows())));
    }
    if mu.mu.len() != embeddings.cols() {
        return Err(BapError::dim("residual_variance", "mu and embeddings differ in width"));
    }
    let idx: Vec<u64> = (0..embeddings.rows() as u64).collect();
    let total: f64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed_value, &[stream::ANCHOR, k as u64, t as u64]);
            let (pick, _) = sample_backgrounds(&idx, k, &mut rng).expect("validated above");
            let mut acc = vec![0.0f64; mu.mu.len()];
            for &i in &pick {
                for (a, v) in acc.iter_mut().zip(embeddings.row(i as usize)) {
                    *a += f64::from(*v);
                }
            }
            acc.iter().zip(&mu.mu).map(|(a, m)| (a / k as f64 - m).powi(2)).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(total / trials as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| *v <= 0.0) {
        return Err(BapError::Config("log-log fit needs >= 2 positive points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Normalised mean teacher embedding of each class's objects, isolated on the
/// neutral canvas with anchor geometry.
pub fn class_prototypes(teacher: &EncoderModel, world: &World, exemplars: &[Vec<u64>]) -> Result<Vec<Tensor>> {
    let params = CompositeParams::anchor(crate::scene::Degradation::Perfect);
    exemplars
        .iter()
        .map(|ids| {
            let rasters: Vec<Raster> = ids
                .par_iter()
                .map(|&f| {
                    let fg = PreparedForeground::new(&world.foreground(f)?, params.degradation)?;
                    let canvas = crate::scene::BackgroundImage {
                        id: u64::MAX,
                        group: 0,
                        raster: Raster::filled(world.config().height, world.config().width, crate::scene::NEUTRAL_GRAY),
                    };
                    let rec = composite_with(&fg, &canvas, &params, 0)?;
                    isolate_like(&fg, &rec)
                })
                .collect::<Result<_>>()?;
            let e = teacher.encode_batch(&rasters.iter().collect::<Vec<_>>())?;
            let rows: Vec<&[f32]> = (0..e.rows()).map(|i| e.row(i)).collect();
            anchor_from_embeddings(&rows)
        })
        .collect()
}

/// Normalised mean teacher embedding of each group's pure backgrounds.
pub fn group_prototypes(teacher: &EncoderModel, world: &World, groups: &[Vec<u64>]) -> Result<Vec<Tensor>> {
    groups
        .iter()
        .map(|ids| {
            let e = encode_backgrounds(teacher, world, ids)?;
            let rows: Vec<&[f32]> = (0..e.rows()).map(|i| e.row(i)).collect();
            anchor_from_embeddings(&rows)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KSweepReport {
    pub ks: Vec<usize>,
    /// Mean over foregrounds of cos(anchor, own class prototype).
    pub fg_sim: Vec<f64>,
    /// Mean over foregrounds of the max cos(anchor, group prototype).
    pub bg_sim_max: Vec<f64>,
    pub var_eps: Vec<f64>,
    /// Per-foreground values, indexed `[k][foreground]`, for paired tests.
    pub fg_sim_each: Vec<Vec<f64>>,
    pub bg_sim_each: Vec<Vec<f64>>,
}

impl KSweepReport {
    pub const CSV_HEADER: &'static str = "K,fg_sim,bg_sim_max,var_eps";

    pub fn csv_rows(&self) -> Vec<String> {
        (0..self.ks.len())
            .map(|i| format!("{},{:.6},{:.6},{:.8}", self.ks[i], self.fg_sim[i], self.bg_sim_max[i], self.var_eps[i]))
            .collect()
    }
}

/// Inputs of [`k_sweep`] that do not change across K.
pub struct SweepInputs<'a> {
    pub teacher: &'a EncoderModel,
    pub world: &'a World,
    pub foregrounds: &'a [PreparedForeground],
    pub bg_pool: &'a [u64],
    pub class_protos: &'a [Tensor],
    pub group_protos: &'a [Tensor],
    /// Background embeddings and their mean, for Var(ε).
    pub bg_embeddings: &'a Tensor,
    pub mu: &'a BackgroundMean,
    pub var_trials: usize,
}

/// Anchors for all K are prefixes of one background sequence per foreground,
/// so per-foreground comparisons across K are paired.
pub fn k_sweep(inp: &SweepInputs<'_>, ks: &[usize], seed_value: u64) -> Result<KSweepReport> {
    if ks.is_empty() {
        return Err(BapError::Config("empty K grid".into()));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(BapError::Config("K grid must be ascending and positive".into()));
    }
    if inp.group_protos.is_empty() {
        return Err(BapError::Config("k_sweep needs background-group prototypes".into()));
    }
    let kmax = *ks.last().expect("non-empty");
    let params = CompositeParams::anchor(crate::scene::Degradation::Perfect);
    let per_fg: Vec<(Vec<f64>, Vec<f64>)> = inp
        .foregrounds
        .par_iter()
        .map(|fg| {
            let proto = inp
                .class_protos
                .get(fg.class)
                .ok_or_else(|| BapError::Config(format!("no prototype for class {}", fg.class)))?;
            let mut rng = seed::rng(seed_value, &[stream::ANCHOR, fg.id, 0x5e]);
            let (ids, _) = sample_backgrounds(inp.bg_pool, kmax, &mut rng)?;
            let rasters = anchor_composites(inp.world, fg, &ids, &CompositeParams { degradation: fg.degradation, ..params }, seed_value)?;
            let e = inp.teacher.encode_batch(&rasters.iter().collect::<Vec<_>>())?;
            let mut fs = Vec::with_capacity(ks.len());
            let mut bs = Vec::with_capacity(ks.len());
            for &k in ks {
                let rows: Vec<&[f32]> = (0..k).map(|i| e.row(i)).collect();
                let a = anchor_from_embeddings(&rows)?;
                fs.push(cosine_slices(a.data(), proto.data())?);
                let mut best = f64::NEG_INFINITY;
                for g in inp.group_protos {
                    best = best.max(cosine_slices(a.data(), g.data())?);
                }
                bs.push(best);
            }
            Ok((fs, bs))
        })
        .collect::<Result<_>>()?;
    let n = per_fg.len().max(1) as f64;
    let mut rep = KSweepReport {
        ks: ks.to_vec(),
        fg_sim: Vec::new(),
        bg_sim_max: Vec::new(),
        var_eps: Vec::new(),
        fg_sim_each: Vec::new(),
        bg_sim_each: Vec::new(),
    };
    for (i, &k) in ks.iter().enumerate() {
        let f: Vec<f64> = per_fg.iter().map(|p| p.0[i]).collect();
        let b: Vec<f64> = per_fg.iter().map(|p| p.1[i]).collect();
        rep.fg_sim.push(f.iter().sum::<f64>() / n);
        rep.bg_sim_max.push(b.iter().sum::<f64>() / n);
        rep.fg_sim_each.push(f);
        rep.bg_sim_each.push(b);
        rep.var_eps.push(residual_variance(inp.bg_embeddings, k, inp.var_trials, inp.mu, true, seed_value)?);
    }
    Ok(rep)
}

/// `n` orthonormal vectors in `R^d` by Gram–Schmidt over Gaussian draws.
pub fn orthogonal_targets(d: usize, n: usize, seed_value: u64) -> Result<Vec<Tensor>> {
    if n > d {
        return Err(BapError::dim("orthogonal_targets", format!("{n} targets in dimension {d}")));
    }
    let mut rng = seed::rng(seed_value, &[stream::ANCHOR, 0x0f]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        // two passes keep the result orthogonal to 64-bit precision
        for _ in 0..2 {
            for u in &basis {
                let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    basis.into_iter().map(|v| Tensor::vector(v.into_iter().map(|x| x as f32).collect())).collect()
}

/// Shuffled copy of `ids` restricted to the first `n`.
pub fn subsample(ids: &[u64], n: usize, seed_value: u64) -> Vec<u64> {
    let mut v = ids.to_vec();
    v.shuffle(&mut seed::rng(seed_value, &[stream::ANCHOR, 0x55]));
    v.truncate(n);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::dot64;
    use proptest::prelude::*;

    #[test]
    fn anchor_of_two_orthogonal_embeddings() {
        let a = anchor_from_embeddings(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        for v in a.data() {
            assert!((v - 0.707_106_78).abs() < 1e-7);
        }
        let single = anchor_from_embeddings(&[&[0.6, 0.8]]).unwrap();
        assert_eq!(single.data(), &[0.6, 0.8]);
        assert!(anchor_from_embeddings(&[&[1.0, 0.0], &[-1.0, 0.0]]).is_err());
    }

    #[test]
    fn background_mean_examples() {
        let one = Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap();
        let m = mean_of_rows(&one).unwrap();
        assert!((m.norm() - 1.0).abs() < 1e-7);
        let anti = Tensor::matrix(2, 2, vec![0.6, 0.8, -0.6, -0.8]).unwrap();
        assert_eq!(mean_of_rows(&anti).unwrap().norm(), 0.0);
    }

    #[test]
    fn identical_backgrounds_have_no_residual() {
        let e = Tensor::matrix(10, 2, [0.6f32, 0.8].repeat(10)).unwrap();
        let mu = mean_of_rows(&e).unwrap();
        for k in [1, 2, 5] {
            assert!(residual_variance(&e, k, 5, &mu, false, 1).unwrap() < 1e-12);
        }
    }

    #[test]
    fn k1_residual_is_population_spread() {
        let e = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mu = mean_of_rows(&e).unwrap();
        // each row sits at squared distance 0.5 from the mean
        assert!((residual_variance(&e, 1, 50, &mu, false, 3).unwrap() - 0.5).abs() < 1e-12);
        assert!(residual_variance(&e, 3, 50, &mu, false, 3).is_err());
        assert!(residual_variance(&e, 1, 1, &mu, false, 3).is_err());
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 / x).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_target_examples() {
        let t = orthogonal_targets(64, 2, 7).unwrap();
        assert!((t[0].l2_norm() - 1.0).abs() < 1e-6 && (t[1].l2_norm() - 1.0).abs() < 1e-6);
        assert!(dot64(t[0].data(), t[1].data()).abs() < 1e-6);
        assert_eq!(t, orthogonal_targets(64, 2, 7).unwrap());
        let full = orthogonal_targets(8, 8, 1).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot64(full[i].data(), full[j].data()) - want).abs() < 1e-6);
            }
        }
        assert!(matches!(orthogonal_targets(4, 5, 0), Err(BapError::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn anchor_ignores_background_order(rows in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 2..12), s in any::<u64>()) {
            let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
            if let Ok(a) = anchor_from_embeddings(&refs) {
                let mut perm = refs.clone();
                perm.shuffle(&mut seed::rng(s, &[]));
                let b = anchor_from_embeddings(&perm).unwrap();
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }
}
