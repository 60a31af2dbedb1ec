//! Grouped spurious-correlation datasets and their JSONL manifests.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{BapError, Result};
use crate::scene::composite::{item_seed, regenerate, CompositeParams, CompositeRecord};
use crate::scene::mask::Degradation;
use crate::scene::world::{World, WorldConfig};
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One manifest row. `y` and `g` are benchmark-local (0 or 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GroupedItem {
    pub composite_id: u64,
    pub fg_id: u64,
    pub bg_id: u64,
    pub y: usize,
    pub g: usize,
    pub split: Split,
    pub degradation: Degradation,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    pub items: Vec<GroupedItem>,
    pub rho: f64,
    pub split: Split,
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.y).collect()
    }

    pub fn groups(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.g).collect()
    }

    /// Counts per `(y, g)` cell, indexed `[y][g]`.
    pub fn cell_counts(&self) -> [[usize; 2]; 2] {
        let mut c = [[0; 2]; 2];
        for i in &self.items {
            c[i.y][i.g] += 1;
        }
        c
    }

    /// Fraction of items whose group matches their class.
    pub fn majority_fraction(&self) -> f64 {
        let m = self.items.iter().filter(|i| i.y == i.g).count();
        m as f64 / self.items.len().max(1) as f64
    }

    pub fn bg_ids(&self) -> BTreeSet<u64> {
        self.items.iter().map(|i| i.bg_id).collect()
    }

    /// Renders every composite (parallel, order preserving).
    pub fn render(&self, world: &World, params: &CompositeParams) -> Result<Vec<CompositeRecord>> {
        use rayon::prelude::*;
        self.items
            .par_iter()
            .map(|i| regenerate(world, i.fg_id, i.bg_id, &CompositeParams { degradation: i.degradation, ..*params }, i.seed))
            .collect()
    }
}

/// Everything needed to build one train/test pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// World classes playing benchmark labels 0 and 1.
    pub classes: [usize; 2],
    /// World groups playing benchmark groups 0 and 1; class `classes[i]` is
    /// correlated with group `groups[i]`.
    pub groups: [usize; 2],
    pub train_fgs: [Vec<u64>; 2],
    pub test_fgs: [Vec<u64>; 2],
    pub train_bgs: [Vec<u64>; 2],
    pub test_bgs: [Vec<u64>; 2],
    pub rho: f64,
    pub train_per_class: usize,
    pub test_per_cell: usize,
}

/// Deterministic shuffled split of `ids` into `(train, test)` with
/// `train_frac` of the items in train.
pub fn split_ids(ids: &[u64], train_frac: f64, seed_value: u64) -> (Vec<u64>, Vec<u64>) {
    let mut v = ids.to_vec();
    v.shuffle(&mut seed::rng(seed_value, &[stream::DATASET, 0x5911]));
    let cut = ((v.len() as f64) * train_frac).round() as usize;
    let test = v.split_off(cut.min(v.len()));
    (v, test)
}

fn check_disjoint(a: &[u64], b: &[u64], what: &str) -> Result<()> {
    let sa: BTreeSet<_> = a.iter().collect();
    if let Some(x) = b.iter().find(|x| sa.contains(x)) {
        return Err(BapError::Config(format!("{what} id {x} appears in both train and test")));
    }
    Ok(())
}

/// Builds the correlated training split and the balanced test split.
pub fn build_grouped_dataset(spec: &DatasetSpec, seed_value: u64) -> Result<(GroupedDataset, GroupedDataset)> {
    if !(0.5..=1.0).contains(&spec.rho) {
        return Err(BapError::Config(format!("rho {} outside [0.5, 1]", spec.rho)));
    }
    for k in 0..2 {
        if spec.train_bgs[k].is_empty() || spec.test_bgs[k].is_empty() {
            return Err(BapError::Config(format!("group {k} lacks backgrounds for a disjoint train/test split")));
        }
        if spec.train_fgs[k].is_empty() || spec.test_fgs[k].is_empty() {
            return Err(BapError::Config(format!("class {k} lacks foregrounds")));
        }
        check_disjoint(&spec.train_bgs[k], &spec.test_bgs[k], "background")?;
        check_disjoint(&spec.train_bgs[k], &spec.test_bgs[1 - k], "background")?;
    }
    let mut rng = seed::rng(seed_value, &[stream::DATASET]);
    let mut next_id = 0u64;
    let mut make = |rng: &mut seed::Rng, y: usize, g: usize, split: Split, fgs: &[u64], bgs: &[u64]| {
        let fg_id = fgs[rng.random_range(0..fgs.len())];
        let bg_id = bgs[rng.random_range(0..bgs.len())];
        let item = GroupedItem {
            composite_id: next_id,
            fg_id,
            bg_id,
            y,
            g,
            split,
            degradation: Degradation::Perfect,
            seed: item_seed(seed_value, fg_id, bg_id, next_id),
        };
        next_id += 1;
        item
    };

    let mut train = Vec::new();
    for y in 0..2 {
        let majority = (spec.rho * spec.train_per_class as f64).round() as usize;
        for i in 0..spec.train_per_class {
            let g = if i < majority { y } else { 1 - y };
            train.push(make(&mut rng, y, g, Split::Train, &spec.train_fgs[y], &spec.train_bgs[g]));
        }
    }
    let mut test = Vec::new();
    for y in 0..2 {
        for g in 0..2 {
            for _ in 0..spec.test_per_cell {
                test.push(make(&mut rng, y, g, Split::Test, &spec.test_fgs[y], &spec.test_bgs[g]));
            }
        }
    }
    let train = GroupedDataset { items: train, rho: spec.rho, split: Split::Train };
    let test = GroupedDataset { items: test, rho: spec.rho, split: Split::Test };
    leakage_check(&train, &test)?;
    Ok((train, test))
}

/// Hard failure if any background id is shared between splits.
pub fn leakage_check(train: &GroupedDataset, test: &GroupedDataset) -> Result<()> {
    let shared: Vec<_> = train.bg_ids().intersection(&test.bg_ids()).copied().collect();
    if !shared.is_empty() {
        return Err(BapError::Manifest(format!("background leakage across splits: {:?}", &shared[..shared.len().min(8)])));
    }
    Ok(())
}

/// First manifest line: enough to rebuild every raster.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestHeader {
    pub world_seed: u64,
    pub world: WorldConfig,
    pub params: CompositeParams,
    pub classes: [usize; 2],
    pub groups: [usize; 2],
    pub rho: f64,
}

pub fn write_manifest<W: Write>(w: &mut W, header: &ManifestHeader, sets: &[&GroupedDataset]) -> Result<()> {
    let line = serde_json::to_string(header).map_err(|e| BapError::Manifest(e.to_string()))?;
    writeln!(w, "{line}")?;
    for set in sets {
        for item in &set.items {
            let line = serde_json::to_string(item).map_err(|e| BapError::Manifest(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<(ManifestHeader, GroupedDataset, GroupedDataset)> {
    let mut lines = r.lines();
    let head = lines.next().ok_or_else(|| BapError::Manifest("empty manifest".into()))??;
    let header: ManifestHeader = serde_json::from_str(&head).map_err(|e| BapError::Manifest(format!("header: {e}")))?;
    let mut train = GroupedDataset { items: Vec::new(), rho: header.rho, split: Split::Train };
    let mut test = GroupedDataset { items: Vec::new(), rho: header.rho, split: Split::Test };
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: GroupedItem =
            serde_json::from_str(&line).map_err(|e| BapError::Manifest(format!("line {}: {e}", n + 2)))?;
        match item.split {
            Split::Train => train.items.push(item),
            Split::Test => test.items.push(item),
        }
    }
    leakage_check(&train, &test)?;
    Ok((header, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rho: f64, n: usize) -> DatasetSpec {
        let bgs0: Vec<u64> = (0..20).collect();
        let bgs1: Vec<u64> = (100..120).collect();
        let (tr0, te0) = split_ids(&bgs0, 0.8, 1);
        let (tr1, te1) = split_ids(&bgs1, 0.8, 1);
        DatasetSpec {
            classes: [0, 1],
            groups: [0, 1],
            train_fgs: [vec![0, 1, 2], vec![10, 11, 12]],
            test_fgs: [vec![3, 4], vec![13, 14]],
            train_bgs: [tr0, tr1],
            test_bgs: [te0, te1],
            rho,
            train_per_class: n,
            test_per_cell: 40,
        }
    }

    #[test]
    fn rho_controls_minority_counts() {
        let (train, test) = build_grouped_dataset(&spec(1.0, 100), 3).unwrap();
        assert_eq!(train.cell_counts(), [[100, 0], [0, 100]]);
        let (train, _) = build_grouped_dataset(&spec(0.95, 100), 3).unwrap();
        assert_eq!(train.cell_counts(), [[95, 5], [5, 95]]);
        assert_eq!(test.cell_counts(), [[40, 40], [40, 40]]);
    }

    #[test]
    fn splits_never_share_backgrounds() {
        let (train, test) = build_grouped_dataset(&spec(0.9, 50), 8).unwrap();
        assert!(train.bg_ids().is_disjoint(&test.bg_ids()));
        let mut bad = spec(0.9, 10);
        bad.test_bgs[0].push(bad.train_bgs[0][0]);
        assert!(matches!(build_grouped_dataset(&bad, 1), Err(BapError::Config(_))));
        let mut empty = spec(0.9, 10);
        empty.test_bgs[1].clear();
        assert!(build_grouped_dataset(&empty, 1).is_err());
    }

    #[test]
    fn rho_bounds() {
        assert!(build_grouped_dataset(&spec(0.4, 10), 1).is_err());
        assert!(build_grouped_dataset(&spec(1.01, 10), 1).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let (train, test) = build_grouped_dataset(&spec(0.95, 20), 2).unwrap();
        let header = ManifestHeader {
            world_seed: 4,
            world: WorldConfig::default(),
            params: CompositeParams::waterbirds(Degradation::Perfect),
            classes: [0, 1],
            groups: [0, 1],
            rho: 0.95,
        };
        let mut buf = Vec::new();
        write_manifest(&mut buf, &header, &[&train, &test]).unwrap();
        let (h2, tr2, te2) = read_manifest(buf.as_slice()).unwrap();
        assert_eq!((h2, tr2, te2), (header, train, test));
    }

    #[test]
    fn split_ids_partitions() {
        let ids: Vec<u64> = (0..50).collect();
        let (a, b) = split_ids(&ids, 0.8, 9);
        assert_eq!((a.len(), b.len()), (40, 10));
        let mut all: Vec<u64> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
    }
}
