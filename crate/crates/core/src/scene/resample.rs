//! Separable 3-lobe Lanczos resampling with edge clamping.

use std::f64::consts::PI;

pub const LOBES: f64 = 3.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

pub fn lanczos3(x: f64) -> f64 {
    if x.abs() >= LOBES {
        0.0
    } else {
        sinc(x) * sinc(x / LOBES)
    }
}

/// Per output index: first source index and normalised tap weights.
fn taps(src: usize, dst: usize) -> Vec<(i64, Vec<f64>)> {
    let ratio = src as f64 / dst as f64;
    // widen the kernel when shrinking so it acts as a low-pass filter
    let support = ratio.max(1.0);
    let reach = (LOBES * support).ceil() as i64;
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * ratio - 0.5;
            let first = center.floor() as i64 - reach + 1;
            let mut w: Vec<f64> = (0..2 * reach)
                .map(|t| lanczos3(((first + t) as f64 - center) / support))
                .collect();
            let s: f64 = w.iter().sum();
            for v in &mut w {
                *v /= s;
            }
            (first, w)
        })
        .collect()
}

/// Resamples an `h×w×c` interleaved buffer to `oh×ow×c`. Output values are
/// clamped to `[lo, hi]` to remove ringing overshoot.
pub fn resize(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize, lo: f32, hi: f32) -> Vec<f32> {
    debug_assert_eq!(src.len(), h * w * c);
    if (oh, ow) == (h, w) {
        return src.to_vec();
    }
    let tx = taps(w, ow);
    let ty = taps(h, oh);
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut mid = vec![0.0f64; h * ow * c];
    for y in 0..h {
        for (x, (first, wts)) in tx.iter().enumerate() {
            for (t, wt) in wts.iter().enumerate() {
                let sx = clamp(first + t as i64, w);
                let s = (y * w + sx) * c;
                let d = (y * ow + x) * c;
                for ch in 0..c {
                    mid[d + ch] += wt * f64::from(src[s + ch]);
                }
            }
        }
    }
    let mut out = vec![0.0f32; oh * ow * c];
    for (y, (first, wts)) in ty.iter().enumerate() {
        for x in 0..ow {
            let d = (y * ow + x) * c;
            for ch in 0..c {
                let v: f64 = wts
                    .iter()
                    .enumerate()
                    .map(|(t, wt)| wt * mid[(clamp(first + t as i64, h) * ow + x) * c + ch])
                    .sum();
                out[d + ch] = (v as f32).clamp(lo, hi);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_shape() {
        assert_eq!(lanczos3(0.0), 1.0);
        for k in 1..3 {
            assert!(lanczos3(k as f64).abs() < 1e-12);
        }
        assert_eq!(lanczos3(3.0), 0.0);
        assert!(lanczos3(1.5) < 0.0);
    }

    #[test]
    fn identity_size_is_a_copy() {
        let v: Vec<f32> = (0..48).map(|i| i as f32 / 48.0).collect();
        assert_eq!(resize(&v, 4, 4, 3, 4, 4, 0.0, 1.0), v);
    }

    #[test]
    fn upsampling_a_ramp_stays_monotone_in_the_interior() {
        let v: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        let out = resize(&v, 1, 16, 1, 1, 32, 0.0, 1.0);
        for i in 4..27 {
            assert!(out[i + 1] >= out[i] - 1e-6, "{i}: {} {}", out[i], out[i + 1]);
        }
    }

    proptest! {
        #[test]
        fn constant_images_stay_constant(v in 0.0f32..1.0, h in 2usize..20, w in 2usize..20, oh in 1usize..30, ow in 1usize..30) {
            let src = vec![v; h * w * 3];
            for o in resize(&src, h, w, 3, oh, ow, 0.0, 1.0) {
                prop_assert!((o - v).abs() < 1e-5);
            }
        }

        #[test]
        fn output_respects_clamp(src in prop::collection::vec(0.0f32..1.0, 64), oh in 1usize..20, ow in 1usize..20) {
            for o in resize(&src, 8, 8, 1, oh, ow, 0.0, 1.0) {
                prop_assert!((0.0..=1.0).contains(&o));
            }
        }
    }
}
