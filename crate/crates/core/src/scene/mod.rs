//! Synthetic world, compositing pipeline, grouped datasets and sampling.

pub mod composite;
pub mod dataset;
pub mod mask;
pub mod raster;
pub mod resample;
pub mod sampling;
pub mod world;

pub use composite::{
    composite, composite_prepared, composite_with, isolate_like, item_seed, regenerate, CompositeParams,
    CompositeRecord, Placement, PreparedForeground, ScaleSpec,
};
pub use dataset::{build_grouped_dataset, split_ids, DatasetSpec, GroupedDataset, GroupedItem, Split};
pub use mask::{degrade_mask, refine_mask, Degradation};
pub use raster::{BBox, MaskGray, Raster, NEUTRAL_GRAY};
pub use sampling::{flattened_margin_sample, FlatSample};
pub use world::{gen_world, BackgroundImage, ForegroundInstance, Palette, World, WorldConfig};
