//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its output value; nodes are only
//! ever appended, so construction order is a valid topological order and the
//! backward sweep is a single reverse pass over the node list.

use crate::error::{BapError, Result};
use crate::numerics::tensor::{gemm, Tensor, NORM_FLOOR};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// NHWC convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn out_pixels(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    NormalizeRows(Var),
    RowDot(Var, Var),
    SoftmaxXent { logits: Var, targets: Vec<usize>, weights: Vec<f32>, probs: Vec<f32> },
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    AvgPool { input: Var, batch: usize, height: usize, width: usize, channels: usize, k: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// Gradients produced by [`Tape::backward`], indexed by the [`Var`] of each
/// leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input. Gradients flow to it only if the tensor
    /// itself has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: needs, name: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a named trainable parameter.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true, name: Some(name.to_string()) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].name.as_deref()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, needs_grad: bool) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(BapError::degenerate(op, "produced a non-finite value"));
        }
        self.nodes.push(Node { value, op: node_op, needs_grad, name: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(BapError::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), needs)
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sx.last().unwrap_or(&0);
        if sb.iter().product::<usize>() != n {
            return Err(BapError::dim("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let bias = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let shape = sx.to_vec();
        let needs = self.needs(x) || self.needs(b);
        self.push("add_bias", Tensor::from_parts(shape, out), Op::AddBias(x, b), needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(BapError::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, Tensor::from_parts(shape, out), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let out: Vec<f32> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(name, Tensor::from_parts(shape, out), op, needs)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, Op::Gelu(a), gelu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().map(|&x| f64::from(x)).sum();
        let needs = self.needs(a);
        self.push("sum", Tensor::from_parts(vec![1], vec![s as f32]), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().map(|&x| f64::from(x)).sum();
        let needs = self.needs(a);
        self.push("mean", Tensor::from_parts(vec![1], vec![(s / n) as f32]), Op::Mean(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        self.push("reshape", t, Op::Reshape(a), needs)
    }

    /// Rescales every row (last axis) to unit L2 norm. A row with norm below
    /// the floor is a hard error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for (i, row) in out.chunks_mut(cols).enumerate() {
            let n = crate::numerics::tensor::norm64(row);
            if n < NORM_FLOOR {
                return Err(BapError::degenerate("normalize_rows", format!("row {i} has norm {n:e}")));
            }
            for x in row.iter_mut() {
                *x = (f64::from(*x) / n) as f32;
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(a);
        self.push("normalize_rows", Tensor::from_parts(shape, out), Op::NormalizeRows(a), needs)
    }

    /// Per-row dot product of two `[m×n]` matrices, giving `[m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let t = self.value(a);
        let cols = t.cols();
        let rows = t.rows();
        let out: Vec<f32> = self
            .data(a)
            .chunks(cols)
            .zip(self.data(b).chunks(cols))
            .map(|(x, y)| crate::numerics::tensor::dot64(x, y) as f32)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push("row_dot", Tensor::from_parts(vec![rows], out), Op::RowDot(a, b), needs)
    }

    /// Weighted mean softmax cross-entropy of `[m×c]` logits against integer
    /// targets; `weights` are per-row and need not sum to one.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], weights: &[f32]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 {
            return Err(BapError::dim("softmax_xent", format!("logits shape {:?}", t.shape())));
        }
        let (m, c) = (t.shape()[0], t.shape()[1]);
        if targets.len() != m || weights.len() != m {
            return Err(BapError::dim("softmax_xent", format!("{m} rows, {} targets, {} weights", targets.len(), weights.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(BapError::dim("softmax_xent", format!("target {bad} with {c} classes")));
        }
        let wsum: f64 = weights.iter().map(|&w| f64::from(w)).sum();
        if wsum <= 0.0 {
            return Err(BapError::degenerate("softmax_xent", "weights sum to zero"));
        }
        let mut probs = vec![0.0f32; m * c];
        let mut loss = 0.0f64;
        for i in 0..m {
            let row = &t.data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&x| f64::from(x - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (f64::from(row[j] - mx).exp() / z) as f32;
            }
            let logp = f64::from(row[targets[i]] - mx) - z.ln();
            loss -= f64::from(weights[i]) * logp;
        }
        let value = Tensor::from_parts(vec![1], vec![(loss / wsum) as f32]);
        let needs = self.needs(logits);
        let op = Op::SoftmaxXent { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        self.push("softmax_xent", value, op, needs)
    }

    /// NHWC convolution. `weight` is `[k·k·c_in × c_out]`, `bias` is `[c_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        let expect_in = geom.batch * geom.height * geom.width * geom.in_channels;
        if self.data(input).len() != expect_in
            || self.shape(weight) != [geom.patch_len(), geom.out_channels]
            || self.data(bias).len() != geom.out_channels
            || geom.height + 2 * geom.pad < geom.kernel
            || geom.width + 2 * geom.pad < geom.kernel
        {
            return Err(BapError::dim(
                "conv2d",
                format!("input {:?}, weight {:?}, geometry {geom:?}", self.shape(input), self.shape(weight)),
            ));
        }
        let cols = im2col(self.data(input), &geom);
        let rows = geom.out_pixels();
        let mut out = vec![0.0; rows * geom.out_channels];
        gemm(rows, geom.patch_len(), geom.out_channels, &cols, false, self.data(weight), false, &mut out, false);
        let b = self.data(bias).to_vec();
        for row in out.chunks_mut(geom.out_channels) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let shape = vec![geom.batch, geom.out_height(), geom.out_width(), geom.out_channels];
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push("conv2d", Tensor::from_parts(shape, out), Op::Conv2d { input, weight, bias, geom }, needs)
    }

    /// Non-overlapping `k×k` average pooling of an NHWC tensor.
    pub fn avg_pool(&mut self, input: Var, dims: [usize; 4], k: usize) -> Result<Var> {
        let [batch, height, width, channels] = dims;
        if self.data(input).len() != batch * height * width * channels || k == 0 || height % k != 0 || width % k != 0 {
            return Err(BapError::dim("avg_pool", format!("{dims:?} with window {k}")));
        }
        let (ho, wo) = (height / k, width / k);
        let x = self.data(input);
        let mut out = vec![0.0f32; batch * ho * wo * channels];
        let inv = 1.0 / (k * k) as f32;
        for b in 0..batch {
            for y in 0..height {
                for xx in 0..width {
                    let src = ((b * height + y) * width + xx) * channels;
                    let dst = ((b * ho + y / k) * wo + xx / k) * channels;
                    for c in 0..channels {
                        out[dst + c] += x[src + c] * inv;
                    }
                }
            }
        }
        let needs = self.needs(input);
        let op = Op::AvgPool { input, batch, height, width, channels, k };
        self.push("avg_pool", Tensor::from_parts(vec![batch, ho, wo, channels], out), op, needs)
    }

    /// Consumes the tape and returns d`loss`/d`leaf` for every leaf that
    /// requires a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(BapError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let nn = self.shape(*b)[1];
                    if self.needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, nn, k, &g, false, self.data(*b), true, &mut ga, false);
                        accumulate(&mut grads, *a, &ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; k * nn];
                        gemm(k, m, nn, self.data(*a), true, &g, false, &mut gb, false);
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let cols = self.data(*b).len();
                        let mut gb = vec![0.0f32; cols];
                        for row in g.chunks(cols) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, &gb);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, &g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.needs(*b) {
                        let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                        accumulate(&mut grads, *b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga: Vec<f32> = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, &ga);
                    }
                    if self.needs(*b) {
                        let gb: Vec<f32> = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Scale(a, s) => {
                    let ga: Vec<f32> = g.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Gelu(a) => {
                    let ga: Vec<f32> = g.iter().zip(self.data(*a)).map(|(v, &x)| v * gelu_grad(x)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Square(a) => {
                    let ga: Vec<f32> = g.iter().zip(self.data(*a)).map(|(v, &x)| 2.0 * v * x).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.data(*a).len()];
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Mean(a) => {
                    let len = self.data(*a).len();
                    let ga = vec![g[0] / len as f32; len];
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, *a, &g);
                }
                Op::NormalizeRows(a) => {
                    let x = self.data(*a);
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let mut ga = vec![0.0f32; x.len()];
                    for r in 0..x.len() / cols {
                        let span = r * cols..(r + 1) * cols;
                        let xr = &x[span.clone()];
                        let yr = &y[span.clone()];
                        let gr = &g[span.clone()];
                        let norm = crate::numerics::tensor::norm64(xr);
                        let yg = crate::numerics::tensor::dot64(yr, gr);
                        for ((out, &yy), &gg) in ga[span].iter_mut().zip(yr).zip(gr) {
                            *out = ((f64::from(gg) - f64::from(yy) * yg) / norm) as f32;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::RowDot(a, b) => {
                    let cols = self.value(*a).cols();
                    if self.needs(*a) {
                        let ga: Vec<f32> = self
                            .data(*b)
                            .iter()
                            .enumerate()
                            .map(|(i, &y)| y * g[i / cols])
                            .collect();
                        accumulate(&mut grads, *a, &ga);
                    }
                    if self.needs(*b) {
                        let gb: Vec<f32> = self
                            .data(*a)
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| x * g[i / cols])
                            .collect();
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::SoftmaxXent { logits, targets, weights, probs } => {
                    let c = self.shape(*logits)[1];
                    let wsum: f64 = weights.iter().map(|&w| f64::from(w)).sum();
                    let mut gl = probs.clone();
                    for (i, &y) in targets.iter().enumerate() {
                        gl[i * c + y] -= 1.0;
                        let s = (f64::from(weights[i]) / wsum) as f32 * g[0];
                        for v in &mut gl[i * c..(i + 1) * c] {
                            *v *= s;
                        }
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::Conv2d { input, weight, bias, geom } => {
                    let rows = geom.out_pixels();
                    let (pl, co) = (geom.patch_len(), geom.out_channels);
                    if self.needs(*bias) {
                        let mut gb = vec![0.0f32; co];
                        for row in g.chunks(co) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *bias, &gb);
                    }
                    if self.needs(*weight) {
                        let cols = im2col(self.data(*input), geom);
                        let mut gw = vec![0.0; pl * co];
                        gemm(pl, rows, co, &cols, true, &g, false, &mut gw, false);
                        accumulate(&mut grads, *weight, &gw);
                    }
                    if self.needs(*input) {
                        let mut gcols = vec![0.0; rows * pl];
                        gemm(rows, co, pl, &g, false, self.data(*weight), true, &mut gcols, false);
                        let gi = col2im(&gcols, geom);
                        accumulate(&mut grads, *input, &gi);
                    }
                }
                Op::AvgPool { input, batch, height, width, channels, k } => {
                    let (ho, wo) = (height / k, width / k);
                    let inv = 1.0 / (k * k) as f32;
                    let mut gi = vec![0.0f32; batch * height * width * channels];
                    for b in 0..*batch {
                        for y in 0..*height {
                            for x in 0..*width {
                                let dst = ((b * height + y) * width + x) * channels;
                                let src = ((b * ho + y / k) * wo + x / k) * channels;
                                for c in 0..*channels {
                                    gi[dst + c] = g[src + c] * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, &gi);
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
    let mut cols = vec![0.0f32; g.out_pixels() * pl];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_channels;
                        let dst = row + (ky * g.kernel + kx) * g.in_channels;
                        cols[dst..dst + g.in_channels].copy_from_slice(&input[src..src + g.in_channels]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
    let mut out = vec![0.0f32; g.batch * g.height * g.width * g.in_channels];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_channels;
                        let src = row + (ky * g.kernel + kx) * g.in_channels;
                        for c in 0..g.in_channels {
                            out[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squared_norm_gradient_is_twice_w() {
        let w = Tensor::vector(vec![1.5, -2.0, 0.25]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param("w", w.clone());
        let sq = tape.square(wv).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        let gw = g.get(wv).unwrap();
        for (gi, wi) in gw.data().iter().zip(w.data()) {
            assert!((gi - 2.0 * wi).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let zero = tape.scale(w, 0.0).unwrap();
        let loss = tape.sum(zero).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = tape.square(w).unwrap();
        assert!(matches!(tape.backward(y), Err(BapError::Contract(_))));
    }

    #[test]
    fn normalize_rows_rejects_zero_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        assert!(matches!(tape.normalize_rows(x), Err(BapError::DegenerateInput { .. })));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = ConvGeom { batch: 2, height: 5, width: 4, in_channels: 2, out_channels: 3, kernel: 3, stride: 2, pad: 1 };
        let x = Tensor::randn(&[2, 5, 4, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[18, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv2d(xv, wv, bv, geom).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 3, 2, 3]);
        for bb in 0..2 {
            for oy in 0..3 {
                for ox in 0..2 {
                    for co in 0..3 {
                        let mut s = f64::from(b.data()[co]);
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                                    continue;
                                }
                                for ci in 0..2 {
                                    let xi = ((bb * 5 + iy as usize) * 4 + ix as usize) * 2 + ci;
                                    let wi = ((ky * 3 + kx) * 2 + ci) * 3 + co;
                                    s += f64::from(x.data()[xi]) * f64::from(w.data()[wi]);
                                }
                            }
                        }
                        let got = out.data()[((bb * 3 + oy) * 2 + ox) * 3 + co];
                        assert!((f64::from(got) - s).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
