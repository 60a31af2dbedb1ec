//! Margin-bounded flattened sampling: equal-width bins over a margin range,
//! drained by randomised round-robin.

use rand::seq::SliceRandom;

use crate::error::{BapError, Result};
use crate::seed::{self, stream};

pub const DEFAULT_BOUNDS: (f64, f64) = (0.20, 0.99);
pub const DEFAULT_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct FlatSample {
    /// Indices into the input pool, in draw order.
    pub indices: Vec<usize>,
    /// Items drawn from each bin.
    pub per_bin: Vec<usize>,
    /// Items whose |margin| fell outside the bounds.
    pub excluded: usize,
    /// `target − drawn` when the bounded pool ran out.
    pub shortfall: usize,
}

pub fn flattened_margin_sample(margins: &[f64], bounds: (f64, f64), bins: usize, target: usize, seed_value: u64) -> Result<FlatSample> {
    let (lo, hi) = bounds;
    if !(lo < hi) || bins == 0 {
        return Err(BapError::Config(format!("bad sampler bounds [{lo}, {hi}] with {bins} bins")));
    }
    let width = (hi - lo) / bins as f64;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); bins];
    let mut excluded = 0;
    for (i, m) in margins.iter().enumerate() {
        let a = m.abs();
        if !(lo..=hi).contains(&a) {
            excluded += 1;
            continue;
        }
        let b = (((a - lo) / width) as usize).min(bins - 1);
        buckets[b].push(i);
    }
    if buckets.iter().all(Vec::is_empty) {
        return Err(BapError::Sampling(format!("no item has |margin| in [{lo}, {hi}]")));
    }
    let mut rng = seed::rng(seed_value, &[stream::SAMPLER]);
    for b in &mut buckets {
        b.shuffle(&mut rng);
    }
    let mut per_bin = vec![0; bins];
    let mut indices = Vec::with_capacity(target);
    let mut order: Vec<usize> = (0..bins).collect();
    'outer: while indices.len() < target {
        order.shuffle(&mut rng);
        let mut progressed = false;
        for &b in &order {
            if indices.len() == target {
                break 'outer;
            }
            if let Some(i) = buckets[b].pop() {
                indices.push(i);
                per_bin[b] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let shortfall = target - indices.len();
    Ok(FlatSample { indices, per_bin, excluded, shortfall })
}
