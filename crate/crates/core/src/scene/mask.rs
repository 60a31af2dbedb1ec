//! Mask refinement and degradation.

use std::fmt;
use std::str::FromStr;

use crate::error::{BapError, Result};
use crate::scene::raster::MaskGray;

/// Values strictly above this become opaque during refinement.
pub const THRESHOLD: u8 = 100;
pub const BLUR_SIGMA: f64 = 1.0;

/// Segmentation quality applied to a foreground mask before blending.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degradation {
    Perfect,
    Noisy,
    Botched,
    #[serde(rename = "bbox")]
    BBox,
}

impl Degradation {
    pub const ALL: [Degradation; 4] = [Degradation::Perfect, Degradation::Noisy, Degradation::Botched, Degradation::BBox];

    /// Default structuring radius at canvas height `h`: 15 px (dilation) and
    /// 21 px (erosion) at 224, scaled linearly.
    pub fn default_radius(self, h: usize) -> usize {
        let base = match self {
            Degradation::Noisy => 15.0,
            Degradation::Botched => 21.0,
            Degradation::Perfect | Degradation::BBox => return 0,
        };
        (base * h as f64 / 224.0).round() as usize
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Degradation::Perfect => "perfect",
            Degradation::Noisy => "noisy",
            Degradation::Botched => "botched",
            Degradation::BBox => "bbox",
        })
    }
}

impl FromStr for Degradation {
    type Err = BapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(Degradation::Perfect),
            "noisy" => Ok(Degradation::Noisy),
            "botched" => Ok(Degradation::Botched),
            "bbox" => Ok(Degradation::BBox),
            other => Err(BapError::Config(format!("unknown degradation `{other}`"))),
        }
    }
}

/// `> 100 → 255`, otherwise `0`.
pub fn threshold(m: &MaskGray) -> MaskGray {
    MaskGray::from_fn(m.height(), m.width(), |y, x| if m.get(y, x) > THRESHOLD { 255 } else { 0 })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur (σ = 1, truncated at 3σ, renormalised, edge
/// clamped).
pub fn blur(m: &MaskGray) -> MaskGray {
    let k = gaussian_kernel(BLUR_SIGMA);
    let r = (k.len() / 2) as i64;
    let (h, w) = (m.height(), m.width());
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * f64::from(m.get(y, clamp(x as i64 + i as i64 - r, w))))
                .sum();
        }
    }
    MaskGray::from_fn(h, w, |y, x| {
        let v: f64 = k.iter().enumerate().map(|(i, kv)| kv * tmp[clamp(y as i64 + i as i64 - r, h) * w + x]).sum();
        v.round().clamp(0.0, 255.0) as u8
    })
}

/// Threshold then blur.
pub fn refine_mask(m: &MaskGray) -> MaskGray {
    blur(&threshold(m))
}

fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn morph(m: &MaskGray, radius: usize, dilate: bool) -> MaskGray {
    let offs = disk_offsets(radius);
    let (h, w) = (m.height() as i64, m.width() as i64);
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize) > 0;
    MaskGray::from_fn(m.height(), m.width(), |y, x| {
        let (y, x) = (y as i64, x as i64);
        let hit = if dilate {
            offs.iter().any(|&(dy, dx)| on(y + dy, x + dx))
        } else {
            offs.iter().all(|&(dy, dx)| on(y + dy, x + dx))
        };
        if hit {
            255
        } else {
            0
        }
    })
}

/// Binary dilation by a Euclidean disk (offset kept iff `dy² + dx² ≤ r²`).
pub fn dilate(m: &MaskGray, radius: usize) -> MaskGray {
    morph(m, radius, true)
}

/// Binary erosion by a Euclidean disk. Pixels outside the canvas count as
/// background.
pub fn erode(m: &MaskGray, radius: usize) -> MaskGray {
    morph(m, radius, false)
}

/// Filled tight bounding rectangle of the support.
pub fn bbox_fill(m: &MaskGray) -> MaskGray {
    match m.bbox() {
        None => MaskGray::zeros(m.height(), m.width()),
        Some(b) => MaskGray::from_fn(m.height(), m.width(), |y, x| if b.contains(y, x) { 255 } else { 0 }),
    }
}

/// Applies `mode` to a binary mask. `fg_id` only labels the error raised when
/// the result is empty.
pub fn degrade_mask(m: &MaskGray, mode: Degradation, radius: usize, fg_id: u64) -> Result<MaskGray> {
    let out = match mode {
        Degradation::Perfect => m.clone(),
        Degradation::Noisy => dilate(m, radius),
        Degradation::Botched => erode(m, radius),
        Degradation::BBox => bbox_fill(m),
    };
    if out.support() == 0 {
        return Err(BapError::DegenerateMask { fg_id, mode: mode.to_string() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn point(n: usize, y: usize, x: usize) -> MaskGray {
        MaskGray::from_fn(n, n, |yy, xx| if (yy, xx) == (y, x) { 255 } else { 0 })
    }

    /// Brute-force oracle: distance from every pixel to every support pixel.
    fn oracle(m: &MaskGray, r: usize, dilate: bool) -> MaskGray {
        let r2 = (r * r) as i64;
        let (h, w) = (m.height() as i64, m.width() as i64);
        MaskGray::from_fn(m.height(), m.width(), |y, x| {
            let (y, x) = (y as i64, x as i64);
            let v = if dilate {
                (0..h).any(|yy| (0..w).any(|xx| m.get(yy as usize, xx as usize) > 0 && (yy - y).pow(2) + (xx - x).pow(2) <= r2))
            } else {
                let mut ok = true;
                for yy in y - r as i64..=y + r as i64 {
                    for xx in x - r as i64..=x + r as i64 {
                        if (yy - y).pow(2) + (xx - x).pow(2) <= r2 {
                            let inside = yy >= 0 && xx >= 0 && yy < h && xx < w && m.get(yy as usize, xx as usize) > 0;
                            ok &= inside;
                        }
                    }
                }
                ok
            };
            if v {
                255
            } else {
                0
            }
        })
    }

    #[test]
    fn threshold_boundary() {
        let m = MaskGray::new(1, 4, vec![0, 100, 101, 255]).unwrap();
        assert_eq!(threshold(&m).data(), &[0, 0, 255, 255]);
    }

    #[test]
    fn blur_keeps_constant_fields() {
        let full = MaskGray::from_fn(9, 9, |_, _| 255);
        assert_eq!(blur(&full), full);
        let empty = MaskGray::zeros(9, 9);
        assert_eq!(blur(&empty), empty);
    }

    #[test]
    fn blur_softens_edges_symmetrically() {
        let m = MaskGray::from_fn(1, 12, |_, x| if x < 6 { 255 } else { 0 });
        let b = blur(&m);
        assert!(b.get(0, 5) > 128 && b.get(0, 5) < 255);
        assert_eq!(u16::from(b.get(0, 5)) + u16::from(b.get(0, 6)), 255);
    }

    #[test]
    fn dilating_a_point_gives_a_plus() {
        let d = dilate(&point(7, 3, 3), 1);
        assert_eq!(d.support(), 5);
        for (y, x) in [(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)] {
            assert_eq!(d.get(y, x), 255);
        }
        assert_eq!(d, oracle(&point(7, 3, 3), 1, true));
    }

    #[test]
    fn eroding_a_rectangle_shrinks_each_side() {
        let rect = MaskGray::from_fn(7, 7, |y, x| if (1..6).contains(&y) && (1..6).contains(&x) { 255 } else { 0 });
        let e = erode(&rect, 1);
        let want = MaskGray::from_fn(7, 7, |y, x| if (2..5).contains(&y) && (2..5).contains(&x) { 255 } else { 0 });
        assert_eq!(e, want);
    }

    #[test]
    fn bbox_mode_fills_the_l() {
        let l = MaskGray::from_fn(7, 7, |y, x| if (x == 1 && (1..6).contains(&y)) || (y == 5 && (1..5).contains(&x)) { 255 } else { 0 });
        let b = degrade_mask(&l, Degradation::BBox, 0, 0).unwrap();
        let want = MaskGray::from_fn(7, 7, |y, x| if (1..6).contains(&y) && (1..5).contains(&x) { 255 } else { 0 });
        assert_eq!(b, want);
    }

    #[test]
    fn emptied_mask_is_reported() {
        let err = degrade_mask(&point(7, 3, 3), Degradation::Botched, 1, 42).unwrap_err();
        assert!(matches!(err, BapError::DegenerateMask { fg_id: 42, .. }));
    }

    #[test]
    fn default_radii_scale_with_height() {
        assert_eq!(Degradation::Noisy.default_radius(224), 15);
        assert_eq!(Degradation::Botched.default_radius(224), 21);
        assert_eq!(Degradation::Noisy.default_radius(64), 4);
        assert_eq!(Degradation::Botched.default_radius(64), 6);
    }

    fn mask_7x7() -> impl Strategy<Value = MaskGray> {
        prop::collection::vec(prop::bool::weighted(0.4), 49)
            .prop_map(|bits| MaskGray::new(7, 7, bits.into_iter().map(|b| if b { 255 } else { 0 }).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn morphology_matches_oracle(m in mask_7x7(), r in 0usize..4) {
            prop_assert_eq!(dilate(&m, r), oracle(&m, r, true));
            prop_assert_eq!(erode(&m, r), oracle(&m, r, false));
        }

        #[test]
        fn erosion_original_dilation_sandwich(m in mask_7x7(), r in 0usize..4) {
            let (e, d) = (erode(&m, r), dilate(&m, r));
            for i in 0..49 {
                prop_assert!(e.data()[i] <= m.data()[i] && m.data()[i] <= d.data()[i]);
            }
        }
    }
}
