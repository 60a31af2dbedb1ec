//! Linear-additivity probe: `S = cos(v_ab, v_a + v_b)`.
//!
//! The score works on any embedding triple. The helpers below build image
//! triples from the synthetic world in two modes:
//!
//! * standard: `I_a` is the object on the neutral canvas, `I_b` the raw
//!   background, `I_ab` their composite;
//! * disjoint: hard-masked object on black, background with the object
//!   region blacked out, and their exact pixel sum, with the two parts
//!   rescaled so their pre-normalisation embeddings have equal norm.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::encoders::EncoderModel;
use crate::error::{BapError, Result};
use crate::numerics::tensor::{cosine_slices, norm64, Tensor, NORM_FLOOR};
use crate::scene::mask::threshold;
use crate::scene::{composite_with, isolate_like, CompositeParams, PreparedForeground, Raster, World};
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct AdditivityTriple {
    pub v_a: Tensor,
    pub v_b: Tensor,
    pub v_ab: Tensor,
    pub fg_id: u64,
    pub bg_id: u64,
}

/// Image triple `(I_a, I_b, I_ab)` with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTriple {
    pub object: Raster,
    pub background: Raster,
    pub scene: Raster,
    pub fg_id: u64,
    pub bg_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdditivityReport {
    pub encoder: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Triples dropped because `v_a + v_b` vanished or an encoding failed.
    pub excluded: usize,
}

impl AdditivityReport {
    pub fn from_scores(encoder: impl Into<String>, scores: Vec<f64>, excluded: usize) -> Self {
        let n = scores.len();
        let mean = if n == 0 { f64::NAN } else { scores.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        AdditivityReport { encoder: encoder.into(), scores, mean, std, n, excluded }
    }

    pub const CSV_HEADER: &'static str = "encoder,alpha,n,mean_S,std_S";

    pub fn csv_row(&self, alpha: f32) -> String {
        format!("{},{},{},{:.6},{:.6}", self.encoder, alpha, self.n, self.mean, self.std)
    }
}

/// `cos(v_ab, v_a + v_b)`.
pub fn additivity_score(v_a: &[f32], v_b: &[f32], v_ab: &[f32]) -> Result<f64> {
    if v_a.len() != v_b.len() || v_a.len() != v_ab.len() {
        return Err(BapError::dim("additivity_score", format!("{} / {} / {}", v_a.len(), v_b.len(), v_ab.len())));
    }
    let sum: Vec<f32> = v_a.iter().zip(v_b).map(|(a, b)| a + b).collect();
    if norm64(&sum) < NORM_FLOOR {
        return Err(BapError::degenerate("additivity_score", "v_a + v_b vanishes"));
    }
    cosine_slices(v_ab, &sum)
}

pub fn triple_score(t: &AdditivityTriple) -> Result<f64> {
    additivity_score(t.v_a.data(), t.v_b.data(), t.v_ab.data())
}

/// Encodes every triple and summarises the scores. Degenerate triples are
/// counted in `excluded` instead of failing the batch.
pub fn batch_additivity(encoder: &EncoderModel, triples: &[ImageTriple]) -> Result<AdditivityReport> {
    if triples.is_empty() {
        return Err(BapError::Config("batch_additivity needs at least one triple".into()));
    }
    let scored: Vec<Option<f64>> = triples
        .par_iter()
        .map(|t| {
            let e = encoder.encode_batch(&[&t.object, &t.background, &t.scene]).ok()?;
            additivity_score(e.row(0), e.row(1), e.row(2)).ok()
        })
        .collect();
    let excluded = scored.iter().filter(|s| s.is_none()).count();
    let scores: Vec<f64> = scored.into_iter().flatten().collect();
    Ok(AdditivityReport::from_scores(encoder.tag(), scores, excluded))
}

/// `n` (foreground, background) pairs, each drawn without replacement from
/// its pool; a pool is reshuffled only once exhausted.
pub fn draw_pairs(fgs: &[u64], bgs: &[u64], n: usize, seed_value: u64) -> Vec<(u64, u64)> {
    let mut rng = seed::rng(seed_value, &[stream::EVAL, 0xadd]);
    let draw = |pool: &[u64], rng: &mut seed::Rng| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut p = pool.to_vec();
            p.shuffle(rng);
            out.extend(p.into_iter().take(n - out.len()));
        }
        out
    };
    let f = draw(fgs, &mut rng);
    let b = draw(bgs, &mut rng);
    f.into_iter().zip(b).collect()
}

/// Standard-mode triples built with the composite pipeline.
pub fn standard_triples(world: &World, pairs: &[(u64, u64)], params: &CompositeParams, seed_value: u64) -> Result<Vec<ImageTriple>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, &(f, b))| {
            let fg = PreparedForeground::new(&world.foreground(f)?, params.degradation)?;
            let bg = world.background(b)?;
            let rec = composite_with(&fg, &bg, params, crate::scene::item_seed(seed_value, f, b, i as u64))?;
            Ok(ImageTriple { object: isolate_like(&fg, &rec)?, background: bg.raster, scene: rec.raster, fg_id: f, bg_id: b })
        })
        .collect()
}

/// Disjoint-support, norm-equalised triples for `encoder`.
pub fn disjoint_triples(world: &World, encoder: &EncoderModel, pairs: &[(u64, u64)]) -> Result<Vec<ImageTriple>> {
    pairs
        .par_iter()
        .map(|&(f, b)| {
            let fg = world.foreground(f)?;
            let bg = world.background(b)?;
            let hard = threshold(&fg.mask);
            let (h, w) = (fg.raster.height(), fg.raster.width());
            let mut obj = vec![0.0f32; h * w * 3];
            let mut back = bg.raster.data().to_vec();
            for (p, &m) in hard.data().iter().enumerate() {
                if m > 0 {
                    obj[p * 3..p * 3 + 3].copy_from_slice(&fg.raster.data()[p * 3..p * 3 + 3]);
                    back[p * 3..p * 3 + 3].fill(0.0);
                }
            }
            let obj = Raster::new(h, w, obj)?;
            let back = Raster::new(h, w, back)?;
            let raw = encoder.embed_raw_batch(&[&obj, &back])?;
            let (na, nb) = (norm64(raw.row(0)), norm64(raw.row(1)));
            if na < NORM_FLOOR || nb < NORM_FLOOR {
                return Err(BapError::degenerate("disjoint_triples", format!("zero part embedding for ({f}, {b})")));
            }
            // shrink the larger part; a linear map scales its embedding likewise
            let (obj, back) = if na > nb {
                (obj.scaled((nb / na) as f32), back)
            } else {
                (obj, back.scaled((na / nb) as f32))
            };
            let scene: Vec<f32> = obj.data().iter().zip(back.data()).map(|(a, b)| (a + b).min(1.0)).collect();
            Ok(ImageTriple { scene: Raster::new(h, w, scene)?, object: obj, background: back, fg_id: f, bg_id: b })
        })
        .collect()
}
