//! AdamW with decoupled weight decay, and the warmup + cosine schedule used
//! by every training loop.

use std::f64::consts::PI;

use crate::error::{BapError, Result};
use crate::numerics::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[&Tensor], lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
            step: 0,
            lr,
            weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update in place. `names` identifies parameters in errors.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], names: &[&str]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != params.len() {
            return Err(BapError::dim(
                "opt_step",
                format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.shapes.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.shapes[i].as_slice() || g.shape() != p.shape() {
                return Err(BapError::dim(
                    "opt_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                let param = names.get(i).map_or_else(|| format!("#{i}"), |s| s.to_string());
                return Err(BapError::NonFiniteGradient { param });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = f64::from(gj);
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let updated = f64::from(*w) * decay - self.lr * mhat / (vhat.sqrt() + EPS);
                *w = updated as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup from zero to `base` over the first `warmup_frac` of
/// `total_steps`, then cosine decay from `base` to `floor`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
    pub floor: f64,
}

impl LrSchedule {
    pub fn new(base: f64, warmup_frac: f64, total_steps: u64, floor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&warmup_frac) || floor < 0.0 || floor > base || total_steps == 0 {
            return Err(BapError::Config(format!(
                "bad schedule: base {base}, warmup {warmup_frac}, total {total_steps}, floor {floor}"
            )));
        }
        Ok(LrSchedule { base, warmup_frac, total_steps, floor })
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64).round() as u64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(BapError::Contract(format!(
                "lr_at({step}) beyond total {}",
                self.total_steps
            )));
        }
        let warm = self.warmup_steps();
        if step < warm {
            return Ok(self.base * step as f64 / warm as f64);
        }
        let span = self.total_steps - warm;
        if span == 0 {
            return Ok(self.base);
        }
        let progress = (step - warm) as f64 / span as f64;
        Ok(self.floor + (self.base - self.floor) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_quadratic(steps: usize, lr: f64) -> Vec<f32> {
        // f(w) = sum_i c_i (w_i - t_i)^2, minimiser t.
        let target = [0.5f32, -1.25, 2.0];
        let curv = [1.0f32, 3.0, 0.5];
        let mut w = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap();
        let mut st = OptimizerState::new(&[&w], lr, 0.0);
        let sched = LrSchedule::new(lr, 0.0, steps as u64, lr * 0.01).unwrap();
        for s in 0..steps {
            st.lr = sched.lr_at(s as u64 + 1).unwrap();
            let g: Vec<f32> = (0..3).map(|i| 2.0 * curv[i] * (w.data()[i] - target[i])).collect();
            let g = Tensor::vector(g).unwrap();
            st.step(&mut [&mut w], &[&g], &["w"]).unwrap();
        }
        w.data().iter().zip(target).map(|(a, b)| a - b).collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let before = w.clone();
        let mut st = OptimizerState::new(&[&w], 0.1, 0.0);
        let g = Tensor::zeros(&[2]);
        st.step(&mut [&mut w], &[&g], &["w"]).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn one_step_descends() {
        let mut w = Tensor::vector(vec![1.0]).unwrap();
        let mut st = OptimizerState::new(&[&w], 0.01, 0.0);
        let g = Tensor::vector(vec![2.0]).unwrap();
        st.step(&mut [&mut w], &[&g], &["w"]).unwrap();
        assert!(w.data()[0].abs() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let err = run_quadratic(200, 0.1);
        let dist = err.iter().map(|e| f64::from(*e).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-3, "distance to minimiser {dist}");
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut w = Tensor::vector(vec![1.0]).unwrap();
        let mut st = OptimizerState::new(&[&w], 0.01, 0.0);
        // Tensor::new refuses NaN, so build the gradient through a clone of w.
        let mut g = w.clone();
        g.data_mut()[0] = f32::NAN;
        let err = st.step(&mut [&mut w], &[&g], &["head.weight"]).unwrap_err();
        assert!(matches!(err, BapError::NonFiniteGradient { ref param } if param == "head.weight"));
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-3, 0.1, 100, 1e-4).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(10).unwrap() - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(100).unwrap() - 1e-4).abs() < 1e-15);
        assert!(s.lr_at(101).is_err());
    }

    #[test]
    fn schedule_respects_floor_after_warmup_and_is_continuous() {
        let s = LrSchedule::new(2e-3, 0.1, 250, 2e-4).unwrap();
        let w = s.warmup_steps();
        for step in w..=250 {
            assert!(s.lr_at(step).unwrap() >= 2e-4 - 1e-15);
        }
        let before = s.lr_at(w - 1).unwrap();
        let at = s.lr_at(w).unwrap();
        assert!((at - before) <= 2e-3 / w as f64 + 1e-15);
        assert!(s.lr_at(0).unwrap() <= s.base);
    }
}
