//! Dense row-major `f32` tensors and the handful of vector primitives the
//! rest of the crate is written against.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{BapError, Result};

/// Norms below this are treated as zero by normalization and cosine routines.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` matches `data` and every value
    /// is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(BapError::dim("Tensor::new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(BapError::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(BapError::degenerate("Tensor::new", format!("non-finite value at {i}")));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    /// Internal constructor for values produced by already-validated kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, requires_grad: false }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f32) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(BapError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(BapError::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone(), requires_grad: self.requires_grad })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn l2_norm(&self) -> f64 {
        norm64(&self.data)
    }

    /// Order-sensitive FNV-1a digest of the raw bit patterns; used as a
    /// parameter checksum in run logs.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub(crate) fn norm64(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

/// Standard matrix product of `[m×k]` and `[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(BapError::dim(
            "matmul",
            format!("expected matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(BapError::dim(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0f32; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c (+)= op(a) · op(b)` for row-major buffers, where `op` optionally
/// transposes. `a` is logically `[m×k]`, `b` is `[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the checked slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unit-L2 rescaling of a vector. Zero (or numerically zero) input is an
/// error rather than a silent zero output.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let n = v.l2_norm();
    if n < NORM_FLOOR {
        return Err(BapError::degenerate("l2_normalize", format!("norm {n:e}")));
    }
    let data = v.data.iter().map(|&x| (f64::from(x) / n) as f32).collect();
    Ok(Tensor::from_parts(v.shape.clone(), data))
}

pub fn cosine_sim(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.len() != v.len() {
        return Err(BapError::dim(
            "cosine_sim",
            format!("{:?} vs {:?}", u.shape(), v.shape()),
        ));
    }
    cosine_slices(u.data(), v.data())
}

pub(crate) fn cosine_slices(u: &[f32], v: &[f32]) -> Result<f64> {
    let nu = norm64(u);
    let nv = norm64(v);
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(BapError::degenerate("cosine_sim", format!("norms {nu:e}, {nv:e}")));
    }
    Ok((dot64(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += f64::from(a.data()[i * k + p]) * f64::from(b.data()[p * n + j]);
                }
                out[i * n + j] = s as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let col = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &col).unwrap().data(), &[3.0, 4.0]);

        let row = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_extent() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(BapError::Dimension { .. })));
    }

    #[test]
    fn normalize_examples() {
        let v = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&v).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-7 && (n.data()[1] - 0.8).abs() < 1e-7);
        let again = l2_normalize(&n).unwrap();
        assert_eq!(n.data(), again.data());
        let z = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert!(matches!(l2_normalize(&z), Err(BapError::DegenerateInput { .. })));
    }

    #[test]
    fn cosine_examples() {
        let e1 = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let d = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(cosine_sim(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine_sim(&e1, &e2).unwrap(), 0.0);
        assert!((cosine_sim(&e1, &d).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        let z = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert!(cosine_sim(&e1, &z).is_err());
    }

    #[test]
    fn construction_rejects_non_finite_and_bad_shape() {
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn nonzero_vec() -> impl Strategy<Value = Vec<f32>> {
            prop::collection::vec(-10.0f32..10.0, 2..16)
                .prop_filter("non-degenerate", |v| norm64(v) > 1e-3)
        }

        proptest! {
            #[test]
            fn normalize_is_idempotent(v in nonzero_vec()) {
                let t = Tensor::vector(v).unwrap();
                let a = l2_normalize(&t).unwrap();
                let b = l2_normalize(&a).unwrap();
                prop_assert!((a.l2_norm() - 1.0).abs() < 1e-6);
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }

            #[test]
            fn cosine_symmetric_and_scale_invariant(
                (u, v) in (2usize..12).prop_flat_map(|d| (
                    prop::collection::vec(-5.0f32..5.0, d),
                    prop::collection::vec(-5.0f32..5.0, d),
                )).prop_filter("non-degenerate", |(u, v)| norm64(u) > 1e-2 && norm64(v) > 1e-2),
                alpha in 0.01f32..100.0,
                beta in 0.01f32..100.0,
            ) {
                let c = cosine_slices(&u, &v).unwrap();
                prop_assert!((c - cosine_slices(&v, &u).unwrap()).abs() < 1e-12);
                let su: Vec<f32> = u.iter().map(|x| x * alpha).collect();
                let sv: Vec<f32> = v.iter().map(|x| x * beta).collect();
                prop_assert!((c - cosine_slices(&su, &sv).unwrap()).abs() < 1e-6);
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }
    }
}
