//! Procedural foreground/background world.
//!
//! Foregrounds are anti-aliased parametric shapes on the neutral canvas.
//! Each class owns a colour signature and a shape family. Backgrounds are
//! textured fields whose base colour identifies their group.
//!
//! Colours live in an opponent basis around mid-gray: luminance
//! `(1,1,1)/√3`, yellow-blue `(1,1,-2)/√6` and red-green `(1,-1,0)/√2`.
//! Background groups sit on a circle in the luminance / yellow-blue plane
//! and never carry red-green content, so the red-green axis is purely
//! a foreground cue. Classes 0 and 1 differ along red-green; classes 2 and 3
//! differ in yellow-blue tint and shape family.
//!
//! Everything is rendered on demand from `(seed, id)`, so arbitrarily large
//! background pools cost no memory.

use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{BapError, Result};
use crate::scene::raster::{BBox, MaskGray, Raster, CHANNELS, NEUTRAL_GRAY};
use crate::seed::{self, stream};

const LUM: [f32; 3] = [0.577_350_3, 0.577_350_3, 0.577_350_3];
const YB: [f32; 3] = [0.408_248_3, 0.408_248_3, -0.816_496_6];
const RG: [f32; 3] = [0.707_106_8, -0.707_106_8, 0.0];

/// Supersampling factor per axis used to anti-alias shape masks.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 6] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring, Shape::Diamond];

    /// Membership test in the unit box `[-1, 1]²`.
    pub fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.9 && v.abs() <= 0.9,
            Shape::Triangle => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.16..=1.0).contains(&r2)
            }
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

/// Per-class colour signature and shape family.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStyle {
    /// Offset from mid-gray in (luminance, yellow-blue, red-green).
    pub tint: [f32; 3],
    pub shapes: Vec<Shape>,
}

/// Colour and texture amplitudes of the world.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Palette {
    /// Yellow-blue offset magnitude shared by every background group.
    pub bg_yb: f32,
    /// Red-green step separating background groups beyond the first two.
    pub bg_rg_step: f32,
    /// Per-image jitter of the background base colour.
    pub bg_jitter: f32,
    /// Amplitude of the luminance texture on backgrounds.
    pub bg_texture: f32,
    /// Red-green offset separating classes 0 and 1.
    pub fg_class_shift: f32,
    /// Yellow-blue offset separating classes 2 and 3.
    pub fg_aux_shift: f32,
    /// Per-instance jitter of the foreground colour.
    pub fg_jitter: f32,
    /// Amplitude of the luminance pattern inside foregrounds.
    pub fg_texture: f32,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            bg_yb: 0.2,
            bg_rg_step: 0.1,
            bg_jitter: 0.03,
            bg_texture: 0.06,
            fg_class_shift: 0.10,
            fg_aux_shift: 0.08,
            fg_jitter: 0.04,
            fg_texture: 0.05,
        }
    }
}

impl Palette {
    pub fn class_styles(&self) -> Vec<ClassStyle> {
        let s = self.fg_class_shift;
        let a = self.fg_aux_shift;
        let all = Shape::ALL.to_vec();
        vec![
            ClassStyle { tint: [0.0, 0.0, s], shapes: all.clone() },
            ClassStyle { tint: [0.0, 0.0, -s], shapes: all },
            ClassStyle { tint: [0.0, a, 0.0], shapes: vec![Shape::Disk, Shape::Ring] },
            ClassStyle { tint: [0.0, -a, 0.0], shapes: vec![Shape::Square, Shape::Cross] },
            ClassStyle { tint: [a, 0.0, s], shapes: vec![Shape::Triangle, Shape::Diamond] },
            ClassStyle { tint: [-a, 0.0, -s], shapes: vec![Shape::Triangle, Shape::Diamond] },
        ]
    }

    /// Base colour of background group `g` out of `n`. Groups 0 and 1 sit at
    /// opposite ends of the yellow-blue axis.
    pub fn group_color(&self, g: usize, n: usize) -> [f32; 3] {
        let (yb, rg) = self.group_offset(g, n);
        opponent(0.0, yb, rg)
    }

    /// `(yellow-blue, red-green)` offset of group `g`. Every group has the
    /// same yellow-blue magnitude. Groups from 2 on come in antipodal pairs
    /// with growing red-green offsets, so they average to neutral.
    pub fn group_offset(&self, g: usize, n: usize) -> (f32, f32) {
        debug_assert!(g < n);
        match g {
            0 => (self.bg_yb, 0.0),
            1 => (-self.bg_yb, 0.0),
            _ => {
                let k = g - 2;
                let p = k / 2;
                let step = (p / 2 + 1) as f32 * if p % 2 == 0 { 1.0 } else { -1.0 };
                let (yb, rg) = (self.bg_yb, self.bg_rg_step * step);
                if k % 2 == 0 {
                    (yb, rg)
                } else {
                    (-yb, -rg)
                }
            }
        }
    }
}

fn opponent(lum: f32, yb: f32, rg: f32) -> [f32; 3] {
    let mut c = [NEUTRAL_GRAY; 3];
    for i in 0..3 {
        c[i] += lum * LUM[i] + yb * YB[i] + rg * RG[i];
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_bg_groups: usize,
    pub fg_per_class: usize,
    pub bg_per_group: usize,
    pub palette: Palette,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 64,
            width: 64,
            num_classes: 4,
            num_bg_groups: 8,
            fg_per_class: 400,
            bg_per_group: 3500,
            palette: Palette::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundInstance {
    pub id: u64,
    pub class: usize,
    pub shape: Shape,
    /// Object on the neutral canvas.
    pub raster: Raster,
    /// Raw anti-aliased segmentation mask.
    pub mask: MaskGray,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundImage {
    pub id: u64,
    pub group: usize,
    pub raster: Raster,
}

/// A seeded world. Ids are dense: foreground `id` has class
/// `id / fg_per_class`, background `id` has group `id / bg_per_group`.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    cfg: WorldConfig,
    seed: u64,
    styles: Vec<ClassStyle>,
}

impl World {
    pub fn new(cfg: WorldConfig, seed: u64) -> Result<World> {
        let styles = cfg.palette.class_styles();
        if cfg.num_classes == 0 || cfg.num_bg_groups == 0 || cfg.fg_per_class == 0 || cfg.bg_per_group == 0 {
            return Err(BapError::Config(format!("world counts must be >= 1: {cfg:?}")));
        }
        if cfg.num_classes > styles.len() {
            return Err(BapError::Config(format!(
                "{} classes requested, only {} shape/colour styles available",
                cfg.num_classes,
                styles.len()
            )));
        }
        if cfg.height < 8 || cfg.width < 8 {
            return Err(BapError::Config("canvas extents must be >= 8".into()));
        }
        Ok(World { cfg, seed, styles })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_foregrounds(&self) -> u64 {
        (self.cfg.num_classes * self.cfg.fg_per_class) as u64
    }

    pub fn num_backgrounds(&self) -> u64 {
        (self.cfg.num_bg_groups * self.cfg.bg_per_group) as u64
    }

    pub fn fg_class(&self, id: u64) -> usize {
        id as usize / self.cfg.fg_per_class
    }

    pub fn bg_group(&self, id: u64) -> usize {
        id as usize / self.cfg.bg_per_group
    }

    pub fn fg_ids_of_class(&self, class: usize) -> Vec<u64> {
        let n = self.cfg.fg_per_class as u64;
        (class as u64 * n..(class as u64 + 1) * n).collect()
    }

    pub fn bg_ids_of_group(&self, group: usize) -> Vec<u64> {
        let n = self.cfg.bg_per_group as u64;
        (group as u64 * n..(group as u64 + 1) * n).collect()
    }

    pub fn foreground(&self, id: u64) -> Result<ForegroundInstance> {
        if id >= self.num_foregrounds() {
            return Err(BapError::Manifest(format!("foreground id {id} out of range")));
        }
        let class = self.fg_class(id);
        let style = &self.styles[class];
        let p = &self.cfg.palette;
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut rng = seed::rng(self.seed, &[stream::WORLD_FG, id]);
        let shape = style.shapes[rng.random_range(0..style.shapes.len())];
        // half extents in pixels; the box never exceeds 80% of the canvas
        let side = rng.random_range(0.5f32..0.8);
        let (ry, rx) = (side * h as f32 / 2.0, side * w as f32 / 2.0);
        let cy = h as f32 / 2.0 + rng.random_range(-1.0f32..1.0) * (0.8 * h as f32 / 2.0 - ry);
        let cx = w as f32 / 2.0 + rng.random_range(-1.0f32..1.0) * (0.8 * w as f32 / 2.0 - rx);
        let turn = rng.random_range(0..4usize);
        let jitter = Normal::new(0.0f32, p.fg_jitter.max(1e-9)).expect("valid normal");
        let base = opponent(
            style.tint[0] + jitter.sample(&mut rng),
            style.tint[1] + jitter.sample(&mut rng),
            style.tint[2] + jitter.sample(&mut rng),
        );
        let freq = rng.random_range(0.15f32..0.35);
        let phase = rng.random_range(0.0f32..2.0 * PI);
        let pattern_angle = rng.random_range(0.0f32..PI);

        let sub = SUPERSAMPLE as f32;
        let mut cover = vec![0u8; h * w];
        let mut data = vec![NEUTRAL_GRAY; h * w * CHANNELS];
        for y in 0..h {
            for x in 0..w {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = (y as f32 + (sy as f32 + 0.5) / sub - cy) / ry;
                        let px = (x as f32 + (sx as f32 + 0.5) / sub - cx) / rx;
                        let (u, v) = quarter_turn(px, py, turn);
                        hits += usize::from(shape.contains(u, v));
                    }
                }
                let a = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                cover[y * w + x] = (a * 255.0).round() as u8;
                if a > 0.0 {
                    let t = (x as f32 * pattern_angle.cos() + y as f32 * pattern_angle.sin()) * freq + phase;
                    let lum = p.fg_texture * (t * 2.0 * PI).sin();
                    for c in 0..CHANNELS {
                        let fg = (base[c] + lum * LUM[c]).clamp(0.0, 1.0);
                        let i = (y * w + x) * CHANNELS + c;
                        data[i] = a * fg + (1.0 - a) * NEUTRAL_GRAY;
                    }
                }
            }
        }
        let mask = MaskGray::new(h, w, cover)?;
        let bbox = mask
            .bbox()
            .ok_or_else(|| BapError::Config(format!("foreground {id} rendered with empty support")))?;
        Ok(ForegroundInstance { id, class, shape, raster: Raster::new(h, w, data)?, mask, bbox })
    }

    pub fn background(&self, id: u64) -> Result<BackgroundImage> {
        if id >= self.num_backgrounds() {
            return Err(BapError::Manifest(format!("background id {id} out of range")));
        }
        let group = self.bg_group(id);
        let p = &self.cfg.palette;
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut rng = seed::rng(self.seed, &[stream::WORLD_BG, id]);
        let (yb0, rg0) = p.group_offset(group, self.cfg.num_bg_groups);
        let jitter = Normal::new(0.0f32, p.bg_jitter.max(1e-9)).expect("valid normal");
        let base = opponent(jitter.sample(&mut rng), yb0 + jitter.sample(&mut rng), rg0);
        // texture family cycles with the group: stripes, checker, smooth noise
        let family = group % 3;
        let orient = rng.random_range(0.0f32..PI);
        let freq = rng.random_range(0.05f32..0.2);
        let phase = rng.random_range(0.0f32..2.0 * PI);
        let blobs: Vec<(f32, f32, f32, f32)> = (0..6)
            .map(|_| {
                (
                    rng.random_range(0.0..h as f32),
                    rng.random_range(0.0..w as f32),
                    rng.random_range(4.0f32..14.0),
                    rng.random_range(-1.0f32..1.0),
                )
            })
            .collect();
        let grain = Normal::new(0.0f32, 0.25).expect("valid normal");
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f32, x as f32);
                let t = match family {
                    0 => ((xf * orient.cos() + yf * orient.sin()) * freq * 2.0 * PI + phase).sin(),
                    1 => {
                        let a = ((xf * orient.cos() + yf * orient.sin()) * freq * PI + phase).sin();
                        let b = ((-xf * orient.sin() + yf * orient.cos()) * freq * PI + phase).sin();
                        (a * b).signum()
                    }
                    _ => blobs
                        .iter()
                        .map(|&(by, bx, r, s)| s * (-((yf - by).powi(2) + (xf - bx).powi(2)) / (2.0 * r * r)).exp())
                        .sum::<f32>()
                        .clamp(-1.0, 1.0),
                };
                let lum = p.bg_texture * (t + grain.sample(&mut rng));
                for c in 0..CHANNELS {
                    data.push((base[c] + lum * LUM[c]).clamp(0.0, 1.0));
                }
            }
        }
        Ok(BackgroundImage { id, group, raster: Raster::new(h, w, data)? })
    }
}

fn quarter_turn(u: f32, v: f32, turn: usize) -> (f32, f32) {
    match turn % 4 {
        0 => (u, v),
        1 => (-v, u),
        2 => (-u, -v),
        _ => (v, -u),
    }
}

/// Builds a world and materialises every instance.
pub fn gen_world(
    seed_value: u64,
    num_classes: usize,
    num_bg_groups: usize,
    counts: (usize, usize),
) -> Result<(Vec<ForegroundInstance>, Vec<BackgroundImage>)> {
    let cfg = WorldConfig {
        num_classes,
        num_bg_groups,
        fg_per_class: counts.0,
        bg_per_group: counts.1,
        ..WorldConfig::default()
    };
    let world = World::new(cfg, seed_value)?;
    let fgs = (0..world.num_foregrounds()).map(|i| world.foreground(i)).collect::<Result<_>>()?;
    let bgs = (0..world.num_backgrounds()).map(|i| world.background(i)).collect::<Result<_>>()?;
    Ok((fgs, bgs))
}
