//! Differentiable encoders from rasters to unit-norm embeddings.
//!
//! Four architectures share one parameter container:
//!
//! * `planted`: a fixed random linear map plus an optional non-additive
//!   term `alpha * P * (avgpool4(x) - 0.5)^2`, centred on the neutral
//!   canvas value. With `alpha = 0` the
//!   pre-normalisation map is exactly linear, so foreground/background
//!   additivity can be dialled in analytically.
//! * `linear`: a trainable `d × HWC` map.
//! * `mlp`: two layers, hidden width 256, GELU.
//! * `cnn`: three stride-2 3×3 conv blocks with GELU, then a linear head.
//!
//! Every forward pass ends in row-wise L2 normalisation.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{BapError, Result};
use crate::numerics::io::{read_all, write_all};
use crate::numerics::{ConvGeom, Tape, Tensor, Var};
use crate::scene::Raster;
use crate::seed;

pub const MLP_HIDDEN: usize = 256;
pub const CNN_CHANNELS: [usize; 3] = [8, 16, 32];
pub const PLANTED_POOL: usize = 4;
/// Gain of the non-additive projection relative to the linear map.
pub const PHI_GAIN: f32 = 8.0;
const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    PlantedLinear,
    Linear,
    Mlp,
    Cnn,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::PlantedLinear => "planted-linear",
            Arch::Linear => "linear",
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
        })
    }
}

impl FromStr for Arch {
    type Err = BapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted-linear" | "planted" => Ok(Arch::PlantedLinear),
            "linear" => Ok(Arch::Linear),
            "mlp" => Ok(Arch::Mlp),
            "cnn" => Ok(Arch::Cnn),
            other => Err(BapError::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InputDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputDims {
    pub fn rgb(height: usize, width: usize) -> Self {
        InputDims { height, width, channels: 3 }
    }

    pub fn flat(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    /// 4×4 average-pooled patches, centred at mid-gray, squared, projected
    /// to `d`.
    PoolSquare,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlantedConfig {
    pub seed: u64,
    pub alpha: f32,
    pub nonlinearity: Nonlinearity,
    pub dims: InputDims,
    pub embed_dim: usize,
}

impl PlantedConfig {
    pub fn new(seed: u64, alpha: f32, dims: InputDims, embed_dim: usize) -> Self {
        PlantedConfig { seed, alpha, nonlinearity: Nonlinearity::PoolSquare, dims, embed_dim }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    arch: Arch,
    dims: InputDims,
    embed_dim: usize,
    alpha: f32,
    seed: u64,
    frozen: bool,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// The frozen, analytically controlled teacher.
pub fn planted_teacher(cfg: &PlantedConfig) -> Result<EncoderModel> {
    if !(cfg.alpha >= 0.0 && cfg.alpha.is_finite()) {
        return Err(BapError::Config(format!("planted alpha must be >= 0, got {}", cfg.alpha)));
    }
    check_dims(cfg.dims, cfg.embed_dim)?;
    if cfg.dims.height % PLANTED_POOL != 0 || cfg.dims.width % PLANTED_POOL != 0 {
        return Err(BapError::Config(format!("planted encoder needs extents divisible by {PLANTED_POOL}")));
    }
    let mut rng = seed::rng(cfg.seed, &[seed::stream::TEACHER]);
    let flat = cfg.dims.flat();
    let pooled = flat / (PLANTED_POOL * PLANTED_POOL);
    let w = Tensor::randn(&[flat, cfg.embed_dim], (1.0 / flat as f32).sqrt(), &mut rng);
    let p = Tensor::randn(&[pooled, cfg.embed_dim], PHI_GAIN / (pooled as f32).sqrt(), &mut rng);
    Ok(EncoderModel {
        arch: Arch::PlantedLinear,
        dims: cfg.dims,
        embed_dim: cfg.embed_dim,
        alpha: cfg.alpha,
        seed: cfg.seed,
        frozen: true,
        names: vec!["w".into(), "phi".into()],
        params: vec![w, p],
    })
}

fn check_dims(dims: InputDims, embed_dim: usize) -> Result<()> {
    if dims.height == 0 || dims.width == 0 || dims.channels == 0 || embed_dim == 0 {
        return Err(BapError::Config(format!("bad encoder dims {dims:?}, d={embed_dim}")));
    }
    Ok(())
}

impl EncoderModel {
    /// A freshly initialised trainable encoder.
    pub fn new_student(arch: Arch, dims: InputDims, embed_dim: usize, seed_value: u64) -> Result<Self> {
        check_dims(dims, embed_dim)?;
        let mut rng = seed::rng(seed_value, &[seed::stream::TEACHER, arch as u64]);
        let flat = dims.flat();
        let he = |fan_in: usize| (2.0 / fan_in as f32).sqrt();
        let (names, params): (Vec<&str>, Vec<Tensor>) = match arch {
            Arch::PlantedLinear => {
                return Err(BapError::Config("planted encoders are built with planted_teacher".into()))
            }
            Arch::Linear => (vec!["w"], vec![Tensor::randn(&[flat, embed_dim], (1.0 / flat as f32).sqrt(), &mut rng)]),
            Arch::Mlp => (
                vec!["w1", "b1", "w2", "b2"],
                vec![
                    Tensor::randn(&[flat, MLP_HIDDEN], he(flat), &mut rng),
                    Tensor::zeros(&[MLP_HIDDEN]),
                    Tensor::randn(&[MLP_HIDDEN, embed_dim], (1.0 / MLP_HIDDEN as f32).sqrt(), &mut rng),
                    Tensor::zeros(&[embed_dim]),
                ],
            ),
            Arch::Cnn => {
                if dims.height % 8 != 0 || dims.width % 8 != 0 {
                    return Err(BapError::Config("cnn encoder needs extents divisible by 8".into()));
                }
                let [c1, c2, c3] = CNN_CHANNELS;
                let head_in = (dims.height / 8) * (dims.width / 8) * c3;
                (
                    vec!["conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "head.w", "head.b"],
                    vec![
                        Tensor::randn(&[9 * dims.channels, c1], he(9 * dims.channels), &mut rng),
                        Tensor::zeros(&[c1]),
                        Tensor::randn(&[9 * c1, c2], he(9 * c1), &mut rng),
                        Tensor::zeros(&[c2]),
                        Tensor::randn(&[9 * c2, c3], he(9 * c2), &mut rng),
                        Tensor::zeros(&[c3]),
                        Tensor::randn(&[head_in, embed_dim], (1.0 / head_in as f32).sqrt(), &mut rng),
                        Tensor::zeros(&[embed_dim]),
                    ],
                )
            }
        };
        Ok(EncoderModel {
            arch,
            dims,
            embed_dim,
            alpha: 0.0,
            seed: seed_value,
            frozen: false,
            names: names.into_iter().map(String::from).collect(),
            params,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn dims(&self) -> InputDims {
        self.dims
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn tag(&self) -> String {
        match self.arch {
            Arch::PlantedLinear => format!("planted-linear(alpha={})", self.alpha),
            a => a.to_string(),
        }
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0u64, |h, p| seed::derive(h, &[p.checksum()]))
    }

    /// Parameter-identical trainable copy. A planted teacher with
    /// `alpha = 0` becomes a plain trainable linear map.
    pub fn clone_unfrozen(&self) -> EncoderModel {
        let mut m = self.clone();
        m.frozen = false;
        if m.arch == Arch::PlantedLinear && m.alpha == 0.0 {
            m.arch = Arch::Linear;
            m.names.truncate(1);
            m.params.truncate(1);
        }
        m
    }

    /// Records the forward pass of a `[B × HWC]` input on `tape`. Returns the
    /// normalised embeddings and the parameter handles (empty when frozen).
    pub fn record(&self, tape: &mut Tape, input: Var) -> Result<(Var, Vec<Var>)> {
        let (pre, params) = self.record_raw(tape, input)?;
        Ok((tape.normalize_rows(pre)?, params))
    }

    /// Like [`record`](Self::record) but stops before normalisation.
    pub fn record_raw(&self, tape: &mut Tape, input: Var) -> Result<(Var, Vec<Var>)> {
        self.record_impl(tape, input, !self.frozen)
    }

    /// Normalised forward pass with parameters registered only when
    /// `trainable`; lets a trainer hold the encoder fixed for some steps.
    pub(crate) fn record_as(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let (pre, params) = self.record_impl(tape, input, trainable)?;
        Ok((tape.normalize_rows(pre)?, params))
    }

    fn record_impl(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dims.flat() {
            return Err(BapError::dim(
                "encode",
                format!("input {shape:?}, encoder expects [B, {}]", self.dims.flat()),
            ));
        }
        let batch = shape[0];
        let vars: Vec<Var> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| if trainable { tape.param(n, p.clone()) } else { tape.leaf(p.clone()) })
            .collect();
        let out = match self.arch {
            Arch::PlantedLinear => {
                let lin = tape.matmul(input, vars[0])?;
                if self.alpha == 0.0 {
                    lin
                } else {
                    let d = self.dims;
                    let pooled = tape.avg_pool(input, [batch, d.height, d.width, d.channels], PLANTED_POOL)?;
                    let flat = d.flat() / (PLANTED_POOL * PLANTED_POOL);
                    let pooled = tape.reshape(pooled, &[batch, flat])?;
                    let center = tape.leaf(Tensor::filled(&[flat], -crate::scene::NEUTRAL_GRAY));
                    let pooled = tape.add_bias(pooled, center)?;
                    let sq = tape.square(pooled)?;
                    let phi = tape.matmul(sq, vars[1])?;
                    let phi = tape.scale(phi, self.alpha)?;
                    tape.add(lin, phi)?
                }
            }
            Arch::Linear => tape.matmul(input, vars[0])?,
            Arch::Mlp => {
                let h = tape.matmul(input, vars[0])?;
                let h = tape.add_bias(h, vars[1])?;
                let h = tape.gelu(h)?;
                let o = tape.matmul(h, vars[2])?;
                tape.add_bias(o, vars[3])?
            }
            Arch::Cnn => {
                let mut x = input;
                let (mut h, mut w, mut c) = (self.dims.height, self.dims.width, self.dims.channels);
                for (layer, &co) in CNN_CHANNELS.iter().enumerate() {
                    let geom = ConvGeom {
                        batch,
                        height: h,
                        width: w,
                        in_channels: c,
                        out_channels: co,
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    };
                    x = tape.conv2d(x, vars[2 * layer], vars[2 * layer + 1], geom)?;
                    x = tape.gelu(x)?;
                    h = geom.out_height();
                    w = geom.out_width();
                    c = co;
                }
                let x = tape.reshape(x, &[batch, h * w * c])?;
                let o = tape.matmul(x, vars[6])?;
                tape.add_bias(o, vars[7])?
            }
        };
        let params = if trainable { vars } else { Vec::new() };
        Ok((out, params))
    }

    fn check_raster(&self, r: &Raster) -> Result<()> {
        if r.height() != self.dims.height || r.width() != self.dims.width || r.channels() != self.dims.channels {
            return Err(BapError::dim(
                "encode",
                format!(
                    "raster {}x{}x{}, encoder expects {}x{}x{}",
                    r.height(),
                    r.width(),
                    r.channels(),
                    self.dims.height,
                    self.dims.width,
                    self.dims.channels
                ),
            ));
        }
        Ok(())
    }

    /// Stacks rasters into a `[B × HWC]` tensor.
    pub fn stack(&self, rasters: &[&Raster]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rasters.len() * self.dims.flat());
        for r in rasters {
            self.check_raster(r)?;
            data.extend_from_slice(r.data());
        }
        Tensor::matrix(rasters.len(), self.dims.flat(), data)
    }

    fn forward_chunk(&self, rasters: &[&Raster], normalize: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(self.stack(rasters)?);
        let (mut out, _) = self.record_impl(&mut tape, x, false)?;
        if normalize {
            out = tape.normalize_rows(out)?;
        }
        Ok(tape.value(out).clone())
    }

    fn forward_batched(&self, rasters: &[&Raster], normalize: bool) -> Result<Tensor> {
        if rasters.is_empty() {
            return Err(BapError::dim("encode_batch", "empty batch"));
        }
        let chunks: Vec<Tensor> = rasters
            .par_chunks(ENCODE_CHUNK)
            .map(|c| self.forward_chunk(c, normalize))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(rasters.len() * self.embed_dim);
        for c in chunks {
            data.extend(c.into_data());
        }
        Tensor::matrix(rasters.len(), self.embed_dim, data)
    }

    /// Unit-norm embedding of one raster.
    pub fn encode(&self, r: &Raster) -> Result<Tensor> {
        let t = self.forward_chunk(&[r], true)?;
        t.reshape(&[self.embed_dim])
    }

    /// `[B × d]` unit-norm embeddings; chunked and parallel, with results
    /// independent of thread scheduling.
    pub fn encode_batch(&self, rasters: &[&Raster]) -> Result<Tensor> {
        self.forward_batched(rasters, true)
    }

    /// Pre-normalisation outputs.
    pub fn embed_raw_batch(&self, rasters: &[&Raster]) -> Result<Tensor> {
        self.forward_batched(rasters, false)
    }

    /// Writes `<stem>.toml` (header) and `<stem>.bapt` (parameters).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut head = std::fs::File::create(stem.with_extension("toml"))?;
        writeln!(head, "arch = \"{}\"", self.arch)?;
        writeln!(head, "embed_dim = {}", self.embed_dim)?;
        writeln!(head, "seed = {}", self.seed)?;
        writeln!(head, "alpha = {:?}", self.alpha)?;
        writeln!(head, "height = {}", self.dims.height)?;
        writeln!(head, "width = {}", self.dims.width)?;
        writeln!(head, "channels = {}", self.dims.channels)?;
        writeln!(head, "frozen = {}", self.frozen)?;
        let quoted: Vec<String> = self.names.iter().map(|n| format!("\"{n}\"")).collect();
        writeln!(head, "params = [{}]", quoted.join(", "))?;
        let mut body = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("bapt"))?);
        write_all(&mut body, &self.params.iter().collect::<Vec<_>>())?;
        body.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<EncoderModel> {
        let head = BufReader::new(std::fs::File::open(stem.with_extension("toml"))?);
        let mut fields = std::collections::HashMap::new();
        for line in head.lines() {
            let line = line?;
            if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| BapError::Format(format!("missing header field `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| BapError::Format(format!("header `{k}`: {e}")))
        };
        let arch: Arch = get("arch")?.trim_matches('"').parse()?;
        let names: Vec<String> = get("params")?
            .trim_matches(|c| c == '[' || c == ']')
            .split(',')
            .map(|s| s.trim().trim_matches('"').to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let params = read_all(&mut BufReader::new(std::fs::File::open(stem.with_extension("bapt"))?))?;
        if params.len() != names.len() {
            return Err(BapError::Format(format!("{} names for {} tensors", names.len(), params.len())));
        }
        Ok(EncoderModel {
            arch,
            dims: InputDims { height: num("height")?, width: num("width")?, channels: num("channels")? },
            embed_dim: num("embed_dim")?,
            alpha: get("alpha")?.parse().map_err(|e| BapError::Format(format!("alpha: {e}")))?,
            seed: get("seed")?.parse().map_err(|e| BapError::Format(format!("seed: {e}")))?,
            frozen: get("frozen")? == "true",
            names,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::{cosine_slices, norm64};
    use rand::Rng;

    fn dims() -> InputDims {
        InputDims::rgb(16, 16)
    }

    fn random_raster(seed_value: u64) -> Raster {
        let mut rng = seed::rng(seed_value, &[]);
        let d = dims();
        Raster::new(d.height, d.width, (0..d.flat()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn planted_zero_image_is_degenerate() {
        let t = planted_teacher(&PlantedConfig::new(1, 0.0, dims(), 8)).unwrap();
        let zero = Raster::filled(16, 16, 0.0);
        assert!(matches!(t.encode(&zero), Err(BapError::DegenerateInput { .. })));
    }

    #[test]
    fn planted_linear_is_scale_invariant() {
        let t = planted_teacher(&PlantedConfig::new(1, 0.0, dims(), 8)).unwrap();
        let x = random_raster(3).scaled(0.5);
        let x2 = Raster::new(16, 16, x.data().iter().map(|v| v * 2.0).collect()).unwrap();
        let c = cosine_slices(t.encode(&x).unwrap().data(), t.encode(&x2).unwrap().data()).unwrap();
        assert!((c - 1.0).abs() < 1e-6);
    }

    #[test]
    fn negative_alpha_rejected() {
        assert!(planted_teacher(&PlantedConfig::new(1, -0.1, dims(), 8)).is_err());
    }

    #[test]
    fn extent_mismatch_is_dimension_error() {
        let t = planted_teacher(&PlantedConfig::new(1, 0.0, dims(), 8)).unwrap();
        let r = Raster::filled(8, 8, 0.5);
        assert!(matches!(t.encode(&r), Err(BapError::Dimension { .. })));
    }

    /// Straightforward re-implementation of the MLP forward pass.
    fn mlp_oracle(m: &EncoderModel, x: &[f32]) -> Vec<f64> {
        let p = m.params();
        let (w1, b1, w2, b2) = (p[0].data(), p[1].data(), p[2].data(), p[3].data());
        let flat = x.len();
        let d = m.embed_dim();
        let mut h = vec![0.0f64; MLP_HIDDEN];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = f64::from(b1[j]);
            for i in 0..flat {
                s += f64::from(x[i]) * f64::from(w1[i * MLP_HIDDEN + j]);
            }
            let c = (2.0 / std::f64::consts::PI).sqrt();
            *hj = 0.5 * s * (1.0 + (c * (s + 0.044715 * s.powi(3))).tanh());
        }
        let mut o = vec![0.0f64; d];
        for (k, ok) in o.iter_mut().enumerate() {
            *ok = f64::from(b2[k]) + h.iter().enumerate().map(|(j, hj)| hj * f64::from(w2[j * d + k])).sum::<f64>();
        }
        let n = o.iter().map(|v| v * v).sum::<f64>().sqrt();
        o.iter().map(|v| v / n).collect()
    }

    #[test]
    fn mlp_matches_oracle_forward() {
        let m = EncoderModel::new_student(Arch::Mlp, dims(), 12, 9).unwrap();
        let x = random_raster(4);
        let got = m.encode(&x).unwrap();
        for (a, b) in got.data().iter().zip(mlp_oracle(&m, x.data())) {
            assert!((f64::from(*a) - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn all_architectures_emit_unit_norm() {
        let t = planted_teacher(&PlantedConfig::new(2, 1.0, dims(), 8)).unwrap();
        let models = [
            t.clone(),
            t.clone_unfrozen(),
            EncoderModel::new_student(Arch::Linear, dims(), 8, 1).unwrap(),
            EncoderModel::new_student(Arch::Mlp, dims(), 8, 1).unwrap(),
            EncoderModel::new_student(Arch::Cnn, dims(), 8, 1).unwrap(),
        ];
        let rs: Vec<Raster> = (0..5).map(random_raster).collect();
        let refs: Vec<&Raster> = rs.iter().collect();
        for m in &models {
            let e = m.encode_batch(&refs).unwrap();
            for i in 0..5 {
                assert!((norm64(e.row(i)) - 1.0).abs() < 1e-5, "{}", m.tag());
            }
        }
    }

    #[test]
    fn clone_semantics() {
        let t = planted_teacher(&PlantedConfig::new(2, 0.0, dims(), 8)).unwrap();
        let c = t.clone_unfrozen();
        let cc = c.clone_unfrozen();
        assert!(!c.is_frozen() && t.is_frozen());
        assert_eq!(c.arch(), Arch::Linear);
        for s in 0..3 {
            let x = random_raster(s);
            assert_eq!(t.encode(&x).unwrap(), c.encode(&x).unwrap());
            assert_eq!(t.encode(&x).unwrap(), cc.encode(&x).unwrap());
        }
    }

    #[test]
    fn frozen_model_registers_no_parameters() {
        let t = planted_teacher(&PlantedConfig::new(2, 0.5, dims(), 8)).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(t.stack(&[&random_raster(1)]).unwrap());
        let (_, params) = t.record(&mut tape, x).unwrap();
        assert!(params.is_empty());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("bap-enc-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for m in [
            planted_teacher(&PlantedConfig::new(5, 0.5, dims(), 8)).unwrap(),
            EncoderModel::new_student(Arch::Cnn, dims(), 8, 3).unwrap(),
        ] {
            let stem = dir.join(m.arch().to_string());
            m.save(&stem).unwrap();
            assert_eq!(EncoderModel::load(&stem).unwrap(), m);
        }
        std::fs::remove_dir_all(dir).ok();
    }
}
