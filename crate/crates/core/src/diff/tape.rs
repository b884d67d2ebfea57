//! Reverse-mode tape with one record per matrix-level operation.

use crate::error::{Error, Result};
use crate::linalg::{self, EigResult, QRResult};
use crate::tensor::Tensor;

use super::structured::{backward_eig_with, backward_qr, EigKernelOrientation};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias { x: Var, bias: Var },
    Abs(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    LeadingCols(Var),
    ConcatRows(Vec<Var>),
    PermuteRows { x: Var, perm: Vec<usize> },
    SoftmaxRows(Var),
    LayerNorm { x: Var, scale: Var, bias: Var, eps: f64 },
    Conv2d { x: Var, kernels: Var, bias: Var },
    AvgPool2(Var),
    PadReplicate(Var),
    CropBorder(Var),
    Sobel(Var),
    ValidFilter { x: Var, window: Tensor },
    ChannelCov(Var),
    EigVectors { x: Var, ctx: EigResult },
    EigValues { x: Var, ctx: EigResult },
    QrQ { x: Var, ctx: QRResult },
    CmsMask(Var),
    Symmetrize(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Forward-pass telemetry gathered while recording.
#[derive(Clone, Debug)]
pub struct Diagnostics {
    /// Smallest `σ_q − σ_{q+1}` seen by a truncating eigen-map.
    pub min_eigengap: f64,
    /// Number of eigengaps below `1e-6`.
    pub small_gaps: usize,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Diagnostics {
            min_eigengap: f64::INFINITY,
            small_gaps: 0,
        }
    }
}

/// Gradients of a scalar with respect to every tracked leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    /// Near-degenerate eigenvalue pairs clamped during the backward sweep.
    pub clamped_pairs: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Branch choices of the piecewise-linear ops (abs, rectifiers, Sobel
/// magnitude), one sign vector per op in recording order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchPattern {
    signs: Vec<Vec<f64>>,
}

impl BranchPattern {
    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }
}

#[derive(Default)]
enum Branching {
    #[default]
    Free,
    Record(BranchPattern),
    /// Compare against a recorded pattern; `enforce` replays it instead of
    /// following the natural branches.
    Replay { pattern: BranchPattern, cursor: usize, enforce: bool, flips: usize, diverged: bool },
}

/// Single-owner recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    eig_orientation: EigKernelOrientation,
    diagnostics: Diagnostics,
    branching: Branching,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose eigen-backward uses the given kernel orientation.
    pub fn with_eig_orientation(orientation: EigKernelOrientation) -> Self {
        Tape {
            eig_orientation: orientation,
            ..Self::default()
        }
    }

    /// Remembers the branch taken by every piecewise-linear op.
    pub fn recording_branches(mut self) -> Self {
        self.branching = Branching::Record(BranchPattern::default());
        self
    }

    /// Checks branches against `pattern`; with `enforce`, the recorded branches
    /// are used instead of the natural ones, so the tape evaluates the smooth
    /// piece active when the pattern was recorded.
    pub fn replaying_branches(mut self, pattern: BranchPattern, enforce: bool) -> Self {
        self.branching = Branching::Replay { pattern, cursor: 0, enforce, flips: 0, diverged: false };
        self
    }

    pub fn branch_pattern(&self) -> Option<&BranchPattern> {
        match &self.branching {
            Branching::Record(p) => Some(p),
            _ => None,
        }
    }

    /// Elements whose natural branch differed from the replayed pattern.
    pub fn branch_flips(&self) -> usize {
        match self.branching {
            Branching::Replay { flips, .. } => flips,
            _ => 0,
        }
    }

    /// True when the replayed graph did not match the recorded one.
    pub fn branch_diverged(&self) -> bool {
        match &self.branching {
            Branching::Replay { pattern, cursor, diverged, .. } => *diverged || *cursor != pattern.len(),
            _ => false,
        }
    }

    fn branch(&mut self, natural: Vec<f64>) -> Vec<f64> {
        match &mut self.branching {
            Branching::Free => natural,
            Branching::Record(p) => {
                p.signs.push(natural.clone());
                natural
            }
            Branching::Replay { pattern, cursor, enforce, flips, diverged } => {
                let Some(stored) = pattern.signs.get(*cursor).filter(|s| s.len() == natural.len()) else {
                    *diverged = true;
                    return natural;
                };
                *cursor += 1;
                *flips += stored.iter().zip(&natural).filter(|(a, b)| a != b).count();
                if *enforce { stored.clone() } else { natural }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn note_eigengap(&mut self, gap: f64) {
        if gap < self.diagnostics.min_eigengap {
            self.diagnostics.min_eigengap = gap;
        }
        if gap < super::structured::EIGENGAP_FLOOR {
            self.diagnostics.small_gaps += 1;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push_raw(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, false, b, false)
    }

    /// `aᵀ b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, true, b, false)
    }

    /// `a bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, false, b, true)
    }

    pub fn gemm(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let v = linalg::gemm(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != d {
            return Err(Error::dim(format!("row bias of {} for width {d}", b.len())));
        }
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (a, c) in row.iter_mut().zip(self.nodes[bias.0].value.data()) {
                *a += c;
            }
        }
        Ok(self.push(v, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let signs = self.branch(self.value(a).data().iter().map(|&x| sign(x)).collect());
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().zip(&signs).for_each(|(x, s)| *x *= s);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let on = self.branch(self.value(a).data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect());
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().zip(&on).for_each(|(x, &o)| {
            if o == 0.0 {
                *x *= slope
            }
        });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `x·σ(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, count)?;
        Ok(self.push(v, Op::SliceRows { x, start }, &[x]))
    }

    pub fn leading_cols(&mut self, x: Var, q: usize) -> Result<Var> {
        let v = self.value(x).leading_cols(q)?;
        Ok(self.push(v, Op::LeadingCols(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Output row `i` is input row `perm[i]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let r = src.rows();
        if perm.len() != r {
            return Err(Error::dim(format!("permutation of length {} for {r} rows", perm.len())));
        }
        let stride = src.len() / r;
        let mut data = Vec::with_capacity(src.len());
        for &p in perm {
            data.extend_from_slice(&src.data()[p * stride..(p + 1) * stride]);
        }
        let v = Tensor::new(src.shape(), data)?;
        Ok(self.push(v, Op::PermuteRows { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for a in row.iter_mut() {
                *a = (*a - m).exp();
                s += *a;
            }
            for a in row.iter_mut() {
                *a /= s;
            }
        }
        Ok(self.push(v, Op::SoftmaxRows(x), &[x]))
    }

    /// Per-row normalization to zero mean and unit variance, then `scale·x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, bias: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        if self.value(scale).len() != d || self.value(bias).len() != d {
            return Err(Error::dim(format!("layer norm parameters must have {d} entries")));
        }
        let g = self.value(scale).data();
        let b = self.value(bias).data();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            let (mean, rstd) = row_stats(row, eps);
            for (k, a) in row.iter_mut().enumerate() {
                *a = (*a - mean) * rstd * g[k] + b[k];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, scale, bias, eps }, &[x, scale, bias]))
    }

    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let v = linalg::conv2d(self.value(x), self.value(kernels), Some(self.value(bias)))?;
        Ok(self.push(v, Op::Conv2d { x, kernels, bias }, &[x, kernels, bias]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let v = linalg::avg_pool2(self.value(x))?;
        Ok(self.push(v, Op::AvgPool2(x), &[x]))
    }

    pub fn pad_replicate(&mut self, x: Var) -> Result<Var> {
        let v = linalg::pad_replicate(self.value(x))?;
        Ok(self.push(v, Op::PadReplicate(x), &[x]))
    }

    pub fn crop_border(&mut self, x: Var) -> Result<Var> {
        let v = linalg::crop_border(self.value(x))?;
        Ok(self.push(v, Op::CropBorder(x), &[x]))
    }

    pub fn sobel_mag(&mut self, x: Var) -> Result<Var> {
        let (gx, gy) = linalg::sobel_responses(self.value(x))?;
        let signs = self.branch(gx.iter().chain(&gy).map(|&r| sign(r)).collect());
        let (sx, sy) = signs.split_at(gx.len());
        let mag = (0..gx.len()).map(|i| sx[i] * gx[i] + sy[i] * gy[i]).collect();
        let v = Tensor::new(self.value(x).shape(), mag)?;
        Ok(self.push(v, Op::Sobel(x), &[x]))
    }

    pub fn valid_filter(&mut self, x: Var, window: &Tensor) -> Result<Var> {
        let v = linalg::valid_filter(self.value(x), window)?;
        Ok(self.push(v, Op::ValidFilter { x, window: window.clone() }, &[x]))
    }

    /// Channel covariance of a `c×h×w` map, positions as samples.
    pub fn channel_covariance(&mut self, x: Var) -> Result<Var> {
        let (c, n, centered) = centered_channels(self.value(x))?;
        let cov = linalg::matmul_nt(&centered, &centered)?.scale(1.0 / (n as f64 - 1.0));
        debug_assert_eq!(cov.shape(), &[c, c]);
        Ok(self.push(cov, Op::ChannelCov(x), &[x]))
    }

    /// Eigenvectors (columns, descending eigenvalue order) of the symmetrized input.
    pub fn eig_vectors(&mut self, x: Var) -> Result<(Var, EigResult)> {
        let ctx = linalg::sym_eig(self.value(x))?;
        let v = ctx.u.clone();
        let out = self.push(v, Op::EigVectors { x, ctx: ctx.clone() }, &[x]);
        Ok((out, ctx))
    }

    pub fn eig_values(&mut self, x: Var) -> Result<Var> {
        let ctx = linalg::sym_eig(self.value(x))?;
        let n = ctx.n();
        let v = Tensor::new(&[n], ctx.sigma.clone())?;
        Ok(self.push(v, Op::EigValues { x, ctx }, &[x]))
    }

    /// Orthonormal factor of the thin QR decomposition.
    pub fn qr_q(&mut self, x: Var) -> Result<Var> {
        let ctx = linalg::thin_qr(self.value(x))?;
        let v = ctx.q.clone();
        Ok(self.push(v, Op::QrQ { x, ctx }, &[x]))
    }

    /// Keeps the diagonal and negates every off-diagonal entry.
    pub fn cms_mask(&mut self, x: Var) -> Result<Var> {
        let v = crate::attention::apply_cms_mask(self.value(x))?;
        Ok(self.push(v, Op::CmsMask(x), &[x]))
    }

    /// `(x + xᵀ)/2`, exactly symmetric.
    pub fn symmetrize(&mut self, x: Var) -> Result<Var> {
        let v = linalg::symmetrize(self.value(x))?;
        Ok(self.push(v, Op::Symmetrize(x), &[x]))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        let mut clamped_pairs = 0;

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, t: Tensor| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            let tracked = |v: Var| self.nodes[v.0].tracked;

            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::MatMul { a, b, ta, tb } => {
                    if tracked(a) {
                        let ga = match (ta, tb) {
                            (false, false) => linalg::gemm(&g, false, val(b), true)?,
                            (false, true) => linalg::gemm(&g, false, val(b), false)?,
                            (true, false) => linalg::gemm(val(b), false, &g, true)?,
                            (true, true) => linalg::gemm(val(b), true, &g, true)?,
                        };
                        acc(a, ga);
                    }
                    if tracked(b) {
                        let gb = match (ta, tb) {
                            (false, false) => linalg::gemm(val(a), true, &g, false)?,
                            (false, true) => linalg::gemm(&g, true, val(a), false)?,
                            (true, false) => linalg::gemm(val(a), false, &g, false)?,
                            (true, true) => linalg::gemm(&g, true, val(a), true)?,
                        };
                        acc(b, gb);
                    }
                }
                &Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                &Op::Sub(a, b) => {
                    acc(b, g.scale(-1.0));
                    acc(a, g);
                }
                &Op::Mul(a, b) => {
                    if tracked(a) {
                        acc(a, g.zip_map(val(b), |x, y| x * y)?);
                    }
                    if tracked(b) {
                        acc(b, g.zip_map(val(a), |x, y| x * y)?);
                    }
                }
                &Op::Div(a, b) => {
                    if tracked(a) {
                        acc(a, g.zip_map(val(b), |x, y| x / y)?);
                    }
                    if tracked(b) {
                        // -g·a/b² = -g·out/b
                        let t = g.zip_map(&node.value, |x, y| x * y)?;
                        acc(b, t.zip_map(val(b), |x, y| -x / y)?);
                    }
                }
                &Op::Scale(a, s) => acc(a, g.scale(s)),
                &Op::AddScalar(a) => acc(a, g),
                &Op::AddRowBias { x, bias } => {
                    if tracked(bias) {
                        let d = val(bias).len();
                        let mut gb = vec![0.0; d];
                        for row in g.data().chunks(d) {
                            for (s, r) in gb.iter_mut().zip(row) {
                                *s += r;
                            }
                        }
                        acc(bias, Tensor::new(val(bias).shape(), gb)?);
                    }
                    acc(x, g);
                }
                &Op::Abs(a) => acc(a, g.zip_map(val(a), |x, y| x * sign(y))?),
                &Op::LeakyRelu(a, slope) => {
                    acc(a, g.zip_map(val(a), |x, y| if y > 0.0 { x } else { slope * x })?)
                }
                &Op::Sigmoid(a) => acc(a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))?),
                &Op::Silu(a) => acc(
                    a,
                    g.zip_map(val(a), |x, y| {
                        let s = sigmoid(y);
                        x * s * (1.0 + y * (1.0 - s))
                    })?,
                ),
                &Op::Sum(a) => acc(a, Tensor::full(val(a).shape(), g.item())),
                &Op::Mean(a) => {
                    let n = val(a).len() as f64;
                    acc(a, Tensor::full(val(a).shape(), g.item() / n))
                }
                &Op::Transpose(a) => acc(a, g.transpose()?),
                &Op::Reshape(a) => acc(a, g.reshape(val(a).shape())?),
                &Op::SliceRows { x, start } => {
                    let src = val(x);
                    let stride = src.len() / src.rows();
                    let mut gx = Tensor::zeros(src.shape());
                    gx.data_mut()[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                    acc(x, gx);
                }
                &Op::LeadingCols(x) => {
                    let (r, c) = val(x).dims2()?;
                    let q = g.cols();
                    let mut gx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        gx.data_mut()[i * c..i * c + q].copy_from_slice(&g.data()[i * q..(i + 1) * q]);
                    }
                    acc(x, gx);
                }
                Op::ConcatRows(parts) => {
                    let stride = g.len() / g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if tracked(p) {
                            let t = Tensor::new(val(p).shape(), g.data()[offset..offset + n].to_vec())?;
                            acc(p, t);
                        }
                        offset += n;
                    }
                    debug_assert_eq!(offset % stride, 0);
                }
                Op::PermuteRows { x, perm } => {
                    let stride = g.len() / g.rows();
                    let mut gx = Tensor::zeros(val(*x).shape());
                    for (i, &p) in perm.iter().enumerate() {
                        gx.data_mut()[p * stride..(p + 1) * stride]
                            .copy_from_slice(&g.data()[i * stride..(i + 1) * stride]);
                    }
                    acc(*x, gx);
                }
                &Op::SoftmaxRows(x) => {
                    let c = g.cols();
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (a, y) in grow.iter_mut().zip(yrow) {
                            *a = y * (*a - dot);
                        }
                    }
                    acc(x, gx);
                }
                &Op::LayerNorm { x, scale, bias, eps } => {
                    let d = val(scale).len();
                    let gamma = val(scale).data();
                    let mut gx = Tensor::zeros(val(x).shape());
                    let mut gs = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for ((xrow, grow), gxrow) in val(x)
                        .data()
                        .chunks(d)
                        .zip(g.data().chunks(d))
                        .zip(gx.data_mut().chunks_mut(d))
                    {
                        let (mean, rstd) = row_stats(xrow, eps);
                        let mut sum_gh = 0.0;
                        let mut sum_gh_xh = 0.0;
                        for k in 0..d {
                            let xh = (xrow[k] - mean) * rstd;
                            let gh = grow[k] * gamma[k];
                            gs[k] += grow[k] * xh;
                            gb[k] += grow[k];
                            sum_gh += gh;
                            sum_gh_xh += gh * xh;
                        }
                        let dn = d as f64;
                        for k in 0..d {
                            let xh = (xrow[k] - mean) * rstd;
                            let gh = grow[k] * gamma[k];
                            gxrow[k] = rstd / dn * (dn * gh - sum_gh - xh * sum_gh_xh);
                        }
                    }
                    acc(scale, Tensor::new(val(scale).shape(), gs)?);
                    acc(bias, Tensor::new(val(bias).shape(), gb)?);
                    acc(x, gx);
                }
                &Op::Conv2d { x, kernels, bias } => {
                    let cg = linalg::conv2d_backward(val(x), val(kernels), &g)?;
                    acc(x, cg.input);
                    acc(kernels, cg.kernels);
                    acc(bias, cg.bias);
                }
                &Op::AvgPool2(x) => acc(x, linalg::avg_pool2_backward(val(x).shape(), &g)?),
                &Op::PadReplicate(x) => acc(x, linalg::pad_replicate_backward(val(x).shape(), &g)?),
                &Op::CropBorder(x) => acc(x, linalg::crop_border_backward(val(x).shape(), &g)?),
                &Op::Sobel(x) => acc(x, linalg::sobel_mag_backward(val(x), &g)?),
                Op::ValidFilter { x, window } => {
                    acc(*x, linalg::valid_filter_backward(val(*x).shape(), window, &g)?)
                }
                &Op::ChannelCov(x) => {
                    let (_, n, centered) = centered_channels(val(x))?;
                    let gs = g.zip_map(&g.transpose()?, |a, b| a + b)?;
                    let mut gf = linalg::matmul(&gs, &centered)?.scale(1.0 / (n as f64 - 1.0));
                    for row in gf.data_mut().chunks_mut(n) {
                        let m = row.iter().sum::<f64>() / n as f64;
                        for a in row.iter_mut() {
                            *a -= m;
                        }
                    }
                    acc(x, gf.reshape(val(x).shape())?);
                }
                Op::EigVectors { x, ctx } => {
                    let b = backward_eig_with(ctx, &g, &vec![0.0; ctx.n()], self.eig_orientation)?;
                    clamped_pairs += b.clamped_pairs;
                    acc(*x, b.grad);
                }
                Op::EigValues { x, ctx } => {
                    let n = ctx.n();
                    let b = backward_eig_with(ctx, &Tensor::zeros(&[n, n]), g.data(), self.eig_orientation)?;
                    clamped_pairs += b.clamped_pairs;
                    acc(*x, b.grad);
                }
                Op::QrQ { x, ctx } => {
                    let q = ctx.r.rows();
                    acc(*x, backward_qr(ctx, &g, &Tensor::zeros(&[q, q]))?);
                }
                &Op::CmsMask(x) => acc(x, crate::attention::apply_cms_mask(&g)?),
                &Op::Symmetrize(x) => acc(x, linalg::symmetrize(&g)?),
            }
        }
        Ok(Gradients {
            grads,
            clamped_pairs,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `(channels, samples, centered c×n matrix)` of a `c×h×w` map.
fn centered_channels(x: &Tensor) -> Result<(usize, usize, Tensor)> {
    let (c, h, w) = x.dims3()?;
    let n = h * w;
    if n < 2 {
        return Err(Error::Dimension(format!(
            "covariance needs at least two samples, got a {h}×{w} map"
        )));
    }
    let mut centered = x.clone().reshape(&[c, n])?;
    for row in centered.data_mut().chunks_mut(n) {
        let m = row.iter().sum::<f64>() / n as f64;
        for a in row.iter_mut() {
            *a -= m;
        }
    }
    Ok((c, n, centered))
}
