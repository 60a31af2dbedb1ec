//! Alpha compositing of isolated foregrounds onto backgrounds.

use rand::Rng;

use crate::error::{BapError, Result};
use crate::scene::mask::{degrade_mask, refine_mask, threshold, Degradation};
use crate::scene::raster::{crop_rgb, BBox, Raster, CHANNELS, NEUTRAL_GRAY};
use crate::scene::resample::resize;
use crate::scene::world::{BackgroundImage, ForegroundInstance, World};
use crate::seed::{self, stream};

/// Scale range of the random-placement protocol.
pub const WATERBIRDS_SCALE: (f32, f32) = (0.6, 0.8);
/// Fixed scale used when generating anchor composites.
pub const ANCHOR_SCALE: f32 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    Center,
    Random,
    At { y: usize, x: usize },
}

/// How the scale factor of a composite is chosen.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleSpec {
    Fixed(f32),
    Uniform(f32, f32),
}

/// Generator settings shared by every composite of a stream.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompositeParams {
    pub scale: ScaleSpec,
    pub placement: Placement,
    pub degradation: Degradation,
}

impl CompositeParams {
    /// Random placement, scale uniform in `[0.6, 0.8]`.
    pub fn waterbirds(degradation: Degradation) -> Self {
        CompositeParams {
            scale: ScaleSpec::Uniform(WATERBIRDS_SCALE.0, WATERBIRDS_SCALE.1),
            placement: Placement::Random,
            degradation,
        }
    }

    /// Centred at 80% of the canvas.
    pub fn anchor(degradation: Degradation) -> Self {
        CompositeParams { scale: ScaleSpec::Fixed(ANCHOR_SCALE), placement: Placement::Center, degradation }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeRecord {
    pub raster: Raster,
    pub fg_id: u64,
    pub bg_id: u64,
    pub scale: f32,
    /// Top-left corner of the pasted foreground.
    pub offset: (usize, usize),
    pub degradation: Degradation,
    pub seed: u64,
}

/// A foreground cut out by its (possibly degraded) refined mask and cropped
/// to the alpha support. Reusable across composites.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedForeground {
    pub id: u64,
    pub class: usize,
    pub degradation: Degradation,
    pub height: usize,
    pub width: usize,
    rgb: Vec<f32>,
    alpha: Vec<f32>,
}

impl PreparedForeground {
    pub fn new(fg: &ForegroundInstance, degradation: Degradation) -> Result<Self> {
        let h = fg.raster.height();
        let binary = threshold(&fg.mask);
        let degraded = degrade_mask(&binary, degradation, degradation.default_radius(h), fg.id)?;
        let alpha = refine_mask(&degraded);
        let b = alpha
            .bbox()
            .ok_or(BapError::DegenerateMask { fg_id: fg.id, mode: degradation.to_string() })?;
        let a = alpha.crop(b);
        Ok(PreparedForeground {
            id: fg.id,
            class: fg.class,
            degradation,
            height: b.height(),
            width: b.width(),
            rgb: crop_rgb(&fg.raster, b),
            alpha: a.data().iter().map(|&v| f32::from(v) / 255.0).collect(),
        })
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    pub fn rgb(&self) -> &[f32] {
        &self.rgb
    }

    /// Resized copy whose longest side is `scale` times the canvas height.
    fn scaled(&self, scale: f32, canvas: (usize, usize)) -> (usize, usize, Vec<f32>, Vec<f32>) {
        let target = scale as f64 * canvas.0.min(canvas.1) as f64;
        let f = target / self.height.max(self.width) as f64;
        let oh = ((self.height as f64 * f).round() as usize).max(1);
        let ow = ((self.width as f64 * f).round() as usize).max(1);
        let rgb = resize(&self.rgb, self.height, self.width, CHANNELS, oh, ow, 0.0, 1.0);
        let alpha = resize(&self.alpha, self.height, self.width, 1, oh, ow, 0.0, 1.0);
        (oh, ow, rgb, alpha)
    }
}

/// Per-item seed: stable in (global seed, foreground, background, repetition).
pub fn item_seed(global: u64, fg_id: u64, bg_id: u64, rep: u64) -> u64 {
    seed::derive(global, &[stream::COMPOSITE, fg_id, bg_id, rep])
}

/// `out = α·fg + (1−α)·bg` with `fg` pasted at `offset`.
fn blend(bg: &Raster, fg_rgb: &[f32], alpha: &[f32], size: (usize, usize), offset: (usize, usize)) -> Result<Raster> {
    let (h, w) = (bg.height(), bg.width());
    let mut data = bg.data().to_vec();
    for y in 0..size.0 {
        for x in 0..size.1 {
            let a = alpha[y * size.1 + x];
            if a == 0.0 {
                continue;
            }
            let d = ((offset.0 + y) * w + offset.1 + x) * CHANNELS;
            let s = (y * size.1 + x) * CHANNELS;
            for c in 0..CHANNELS {
                data[d + c] = a * fg_rgb[s + c] + (1.0 - a) * data[d + c];
            }
        }
    }
    Raster::new(h, w, data)
}

fn offset_for(placement: Placement, size: (usize, usize), canvas: (usize, usize), rng: &mut seed::Rng) -> Result<(usize, usize)> {
    if size.0 > canvas.0 || size.1 > canvas.1 {
        return Err(BapError::Placement(format!("foreground {size:?} exceeds canvas {canvas:?}")));
    }
    let (sy, sx) = (canvas.0 - size.0, canvas.1 - size.1);
    match placement {
        Placement::Center => Ok((sy / 2, sx / 2)),
        Placement::Random => Ok((rng.random_range(0..=sy), rng.random_range(0..=sx))),
        Placement::At { y, x } if y <= sy && x <= sx => Ok((y, x)),
        Placement::At { y, x } => Err(BapError::Placement(format!(
            "offset ({y}, {x}) puts a {size:?} foreground outside the {canvas:?} canvas"
        ))),
    }
}

/// Composites a prepared foreground at an explicit scale.
pub fn composite_prepared(
    fg: &PreparedForeground,
    bg: &BackgroundImage,
    scale: f32,
    placement: Placement,
    seed_value: u64,
) -> Result<CompositeRecord> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(BapError::Config(format!("scale {scale} outside (0, 1]")));
    }
    let canvas = (bg.raster.height(), bg.raster.width());
    let (oh, ow, rgb, alpha) = fg.scaled(scale, canvas);
    let mut rng = seed::rng(seed_value, &[0]);
    let offset = offset_for(placement, (oh, ow), canvas, &mut rng)?;
    Ok(CompositeRecord {
        raster: blend(&bg.raster, &rgb, &alpha, (oh, ow), offset)?,
        fg_id: fg.id,
        bg_id: bg.id,
        scale,
        offset,
        degradation: fg.degradation,
        seed: seed_value,
    })
}

pub fn composite(
    fg: &ForegroundInstance,
    bg: &BackgroundImage,
    scale: f32,
    placement: Placement,
    degradation: Degradation,
    seed_value: u64,
) -> Result<CompositeRecord> {
    composite_prepared(&PreparedForeground::new(fg, degradation)?, bg, scale, placement, seed_value)
}

/// Draws the scale from `params` with the item seed, then composites.
pub fn composite_with(
    fg: &PreparedForeground,
    bg: &BackgroundImage,
    params: &CompositeParams,
    seed_value: u64,
) -> Result<CompositeRecord> {
    let scale = match params.scale {
        ScaleSpec::Fixed(s) => s,
        ScaleSpec::Uniform(lo, hi) => {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(BapError::Config(format!("scale range [{lo}, {hi}] invalid")));
            }
            let mut rng = seed::rng(seed_value, &[1]);
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
    };
    composite_prepared(fg, bg, scale, params.placement, seed_value)
}

/// The object placed on the neutral canvas with the same geometry as a
/// composite: the isolated-object image `I_a`.
pub fn isolate_like(fg: &PreparedForeground, rec: &CompositeRecord) -> Result<Raster> {
    let (h, w) = (rec.raster.height(), rec.raster.width());
    let canvas = BackgroundImage { id: u64::MAX, group: 0, raster: Raster::filled(h, w, NEUTRAL_GRAY) };
    let at = Placement::At { y: rec.offset.0, x: rec.offset.1 };
    Ok(composite_prepared(fg, &canvas, rec.scale, at, rec.seed)?.raster)
}

/// Regenerates a composite from ids and seed alone.
pub fn regenerate(
    world: &World,
    fg_id: u64,
    bg_id: u64,
    params: &CompositeParams,
    seed_value: u64,
) -> Result<CompositeRecord> {
    let fg = PreparedForeground::new(&world.foreground(fg_id)?, params.degradation)?;
    composite_with(&fg, &world.background(bg_id)?, params, seed_value)
}

/// Bounding box of a pasted foreground inside its composite.
pub fn placed_box(fg: &PreparedForeground, rec: &CompositeRecord) -> BBox {
    let (oh, ow, _, _) = fg.scaled(rec.scale, (rec.raster.height(), rec.raster.width()));
    BBox { y0: rec.offset.0, x0: rec.offset.1, y1: rec.offset.0 + oh, x1: rec.offset.1 + ow }
}

/// Alpha of a composite, full canvas, in `[0, 1]`.
pub fn placed_alpha(fg: &PreparedForeground, rec: &CompositeRecord) -> Vec<f32> {
    let (h, w) = (rec.raster.height(), rec.raster.width());
    let (oh, ow, _, alpha) = fg.scaled(rec.scale, (h, w));
    let mut out = vec![0.0f32; h * w];
    for y in 0..oh {
        for x in 0..ow {
            out[(rec.offset.0 + y) * w + rec.offset.1 + x] = alpha[y * ow + x];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::world::WorldConfig;
    use proptest::prelude::*;

    fn world() -> World {
        World::new(WorldConfig { fg_per_class: 8, bg_per_group: 8, ..WorldConfig::default() }, 11).unwrap()
    }

    #[test]
    fn transparent_alpha_returns_background() {
        let w = world();
        let bg = w.background(3).unwrap();
        let out = blend(&bg.raster, &[0.2; 12], &[0.0; 4], (2, 2), (5, 5)).unwrap();
        assert_eq!(out, bg.raster);
    }

    #[test]
    fn opaque_alpha_returns_foreground() {
        let w = world();
        let bg = w.background(3).unwrap();
        let fg_rgb: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        let out = blend(&bg.raster, &fg_rgb, &[1.0; 4], (2, 2), (5, 7)).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let s = (y * 2 + x) * 3;
                assert_eq!(out.pixel(5 + y, 7 + x), [fg_rgb[s], fg_rgb[s + 1], fg_rgb[s + 2]]);
            }
        }
    }

    #[test]
    fn waterbirds_scale_is_in_range_and_regenerates() {
        let w = world();
        let params = CompositeParams::waterbirds(Degradation::Perfect);
        for rep in 0..20 {
            let s = item_seed(5, 1, 2, rep);
            let a = regenerate(&w, 1, 2, &params, s).unwrap();
            assert!((0.6..=0.8).contains(&a.scale));
            assert_eq!(a, regenerate(&w, 1, 2, &params, s).unwrap());
        }
    }

    #[test]
    fn bad_scale_and_offset_are_rejected() {
        let w = world();
        let fg = w.foreground(0).unwrap();
        let bg = w.background(0).unwrap();
        assert!(composite(&fg, &bg, 0.0, Placement::Center, Degradation::Perfect, 1).is_err());
        assert!(composite(&fg, &bg, 1.2, Placement::Center, Degradation::Perfect, 1).is_err());
        let e = composite(&fg, &bg, 0.8, Placement::At { y: 60, x: 0 }, Degradation::Perfect, 1).unwrap_err();
        assert!(matches!(e, BapError::Placement(_)));
    }

    #[test]
    fn isolated_object_matches_geometry() {
        let w = world();
        let fg = PreparedForeground::new(&w.foreground(2).unwrap(), Degradation::Perfect).unwrap();
        let rec = composite_with(&fg, &w.background(9).unwrap(), &CompositeParams::waterbirds(Degradation::Perfect), 4).unwrap();
        let iso = isolate_like(&fg, &rec).unwrap();
        let alpha = placed_alpha(&fg, &rec);
        for (i, a) in alpha.iter().enumerate() {
            if *a == 1.0 {
                for c in 0..3 {
                    assert_eq!(iso.data()[i * 3 + c], rec.raster.data()[i * 3 + c]);
                }
            }
            if *a == 0.0 {
                assert_eq!(iso.data()[i * 3], NEUTRAL_GRAY);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn compositing_is_convex(fg_id in 0u64..32, bg_id in 0u64..64, seed_value in any::<u64>(), deg in 0usize..4) {
            let w = world();
            let fg = match PreparedForeground::new(&w.foreground(fg_id).unwrap(), Degradation::ALL[deg]) {
                Ok(f) => f,
                Err(BapError::DegenerateMask { .. }) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            let bg = w.background(bg_id).unwrap();
            let rec = composite_with(&fg, &bg, &CompositeParams::waterbirds(fg.degradation), seed_value).unwrap();
            let iso = isolate_like(&fg, &rec).unwrap();
            let alpha = placed_alpha(&fg, &rec);
            for (i, &a) in alpha.iter().enumerate() {
                for c in 0..3 {
                    let j = i * 3 + c;
                    let (o, b) = (rec.raster.data()[j], bg.raster.data()[j]);
                    prop_assert!((0.0..=1.0).contains(&o));
                    if a == 0.0 {
                        prop_assert_eq!(o, b);
                    } else {
                        // recover the pasted foreground value from the gray-canvas render
                        let f = (iso.data()[j] - (1.0 - a) * NEUTRAL_GRAY) / a;
                        let (lo, hi) = (f.min(b), f.max(b));
                        prop_assert!(o >= lo - 1e-4 && o <= hi + 1e-4, "{} not in [{}, {}]", o, lo, hi);
                    }
                }
            }
        }
    }
}
