//! The detail-semantic complementary loss and its components.
//!
//! Every component has a tape form (`*_on`, differentiable in the fused image)
//! and a plain form on tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, gaussian_window};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Weights of the total loss: `L_int + α·L_grad + β·L_cov + γ·L_ssim`, with
/// `δ` balancing the two SSIM terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 2.0, gamma: 10.0, delta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::arg(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Frozen, seeded convolutional stack standing in for a pretrained feature
/// network. Each block is conv → rectifier → conv → rectifier, followed by a
/// 2×2 average pool before the next block; convolutions pad by edge
/// replication so constant images map to constant features.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateExtractor {
    pub seed: u64,
    pub rectified: bool,
    /// `(kernel, bias)` pairs, two per block.
    convs: Vec<(Tensor, Tensor)>,
}

pub const EXTRACTOR_CHANNELS: [usize; 5] = [1, 16, 32, 64, 64];
pub const EXTRACTOR_SEED: u64 = 0x6772_666f;
/// Blocks whose covariances enter `L_cov` (1-based).
pub const COV_BLOCKS: [usize; 2] = [3, 4];
pub const MIN_COV_SIDE: usize = 16;

impl SurrogateExtractor {
    pub fn new(seed: u64) -> Self {
        Self::build(seed, true)
    }

    /// Rectifier-free variant: a linear map, used to test shift invariance.
    pub fn linear(seed: u64) -> Self {
        Self::build(seed, false)
    }

    fn build(seed: u64, rectified: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        for pair in EXTRACTOR_CHANNELS.windows(2) {
            for (c_in, c_out) in [(pair[0], pair[1]), (pair[1], pair[1])] {
                let a = (6.0 / (9 * c_in) as f64).sqrt();
                let n = c_out * c_in * 9;
                let k = Tensor::new(&[c_out, c_in, 3, 3], (0..n).map(|_| rng.gen_range(-a..=a)).collect())
                    .expect("kernel shape");
                let b = Tensor::new(&[c_out], (0..c_out).map(|_| rng.gen_range(-0.05..=0.05)).collect())
                    .expect("bias shape");
                convs.push((k, b));
            }
        }
        SurrogateExtractor { seed, rectified, convs }
    }

    pub fn blocks(&self) -> usize {
        self.convs.len() / 2
    }

    fn conv(&self, tape: &mut Tape, i: usize, x: Var) -> Result<Var> {
        let (k, b) = &self.convs[i];
        let (k, b) = (tape.constant(k.clone()), tape.constant(b.clone()));
        let padded = tape.pad_replicate(x)?;
        let y = tape.conv2d(padded, k, b)?;
        let y = tape.crop_border(y)?;
        Ok(if self.rectified { tape.relu(y) } else { y })
    }

    /// Feature maps of blocks `1..=upto` for an `h×w` image.
    pub fn features_on(&self, tape: &mut Tape, img: Var, upto: usize) -> Result<Vec<Var>> {
        let (h, w) = tape.value(img).dims2()?;
        if upto > self.blocks() {
            return Err(Error::arg(format!("extractor has {} blocks", self.blocks())));
        }
        let mut x = tape.reshape(img, &[1, h, w])?;
        let mut out = Vec::with_capacity(upto);
        for blk in 0..upto {
            if blk > 0 {
                x = tape.avg_pool2(x)?;
            }
            x = self.conv(tape, 2 * blk, x)?;
            x = self.conv(tape, 2 * blk + 1, x)?;
            out.push(x);
        }
        Ok(out)
    }

    pub fn features(&self, img: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let vars = self.features_on(&mut tape, x, upto)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

impl Default for SurrogateExtractor {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

fn check_triple(f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<()> {
    f.dims2()?;
    f.check_same_shape(ir)?;
    f.check_same_shape(vi)
}

fn eval<F>(f: &Tensor, body: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let out = body(&mut tape, fv)?;
    Ok(tape.value(out).item())
}

/// `mean |f − max(ir, vi)|`.
pub fn l_int_on(tape: &mut Tape, f: Var, ir: &Tensor, vi: &Tensor) -> Result<Var> {
    check_triple(tape.value(f), ir, vi)?;
    let target = tape.constant(ir.zip_map(vi, f64::max)?);
    let d = tape.sub(f, target)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

pub fn l_int(f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<f64> {
    eval(f, |t, fv| l_int_on(t, fv, ir, vi))
}

/// `mean | |∇f| − max(|∇ir|, |∇vi|) |` with Sobel magnitudes.
pub fn l_grad_on(tape: &mut Tape, f: Var, ir: &Tensor, vi: &Tensor) -> Result<Var> {
    check_triple(tape.value(f), ir, vi)?;
    let target = linalg::sobel_mag(ir)?.zip_map(&linalg::sobel_mag(vi)?, f64::max)?;
    let target = tape.constant(target);
    let gf = tape.sobel_mag(f)?;
    let d = tape.sub(gf, target)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

pub fn l_grad(f: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<f64> {
    eval(f, |t, fv| l_grad_on(t, fv, ir, vi))
}

/// Channels as variables, positions as samples, unbiased normalization.
pub fn channel_covariance(feat: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(feat.clone());
    let c = tape.channel_covariance(x)?;
    Ok(tape.value(c).clone())
}

/// `Σ_k ‖Cov(Φ_k(f)) − Cov(Φ_k(ir))‖₁` over the deep extractor blocks.
pub fn l_cov_on(tape: &mut Tape, f: Var, ir: &Tensor, ext: &SurrogateExtractor) -> Result<Var> {
    let (h, w) = tape.value(f).dims2()?;
    tape.value(f).check_same_shape(ir)?;
    if h < MIN_COV_SIDE || w < MIN_COV_SIDE {
        return Err(Error::dim(format!(
            "covariance loss needs at least {MIN_COV_SIDE}×{MIN_COV_SIDE} images, got {h}×{w}"
        )));
    }
    let upto = COV_BLOCKS[COV_BLOCKS.len() - 1];
    let target = ext.features(ir, upto)?;
    let feats = ext.features_on(tape, f, upto)?;
    let mut total: Option<Var> = None;
    for k in COV_BLOCKS {
        let cf = tape.channel_covariance(feats[k - 1])?;
        let ct = tape.constant(channel_covariance(&target[k - 1])?);
        let d = tape.sub(cf, ct)?;
        let d = tape.abs(d);
        let s = tape.sum(d);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one covariance block"))
}

pub fn l_cov(f: &Tensor, ir: &Tensor, ext: &SurrogateExtractor) -> Result<f64> {
    eval(f, |t, fv| l_cov_on(t, fv, ir, ext))
}

fn ssim_window() -> Tensor {
    gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
}

/// Mean local SSIM between `x` (on the tape) and the constant `y`.
pub fn ssim_on(tape: &mut Tape, x: Var, y: &Tensor) -> Result<Var> {
    let (h, w) = tape.value(x).dims2()?;
    tape.value(x).check_same_shape(y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} images")));
    }
    let win = ssim_window();
    let mu_y = linalg::valid_filter(y, &win)?;
    let yy = linalg::valid_filter(&y.map(|v| v * v), &win)?;
    let var_y = yy.zip_map(&mu_y, |e, m| e - m * m)?;

    let mu_x = tape.valid_filter(x, &win)?;
    let x2 = tape.mul(x, x)?;
    let xx = tape.valid_filter(x2, &win)?;
    let yc = tape.constant(y.clone());
    let xy = tape.mul(x, yc)?;
    let xy = tape.valid_filter(xy, &win)?;

    let mu_y = tape.constant(mu_y);
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let var_x = tape.sub(xx, mu_xx)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let cov = tape.sub(xy, mu_xy)?;

    let l_num = tape.scale(mu_xy, 2.0);
    let l_num = tape.add_scalar(l_num, SSIM_C1);
    let c_num = tape.scale(cov, 2.0);
    let c_num = tape.add_scalar(c_num, SSIM_C2);
    let num = tape.mul(l_num, c_num)?;

    let mu_yy = tape.mul(mu_y, mu_y)?;
    let l_den = tape.add(mu_xx, mu_yy)?;
    let l_den = tape.add_scalar(l_den, SSIM_C1);
    let var_y = tape.constant(var_y);
    let c_den = tape.add(var_x, var_y)?;
    let c_den = tape.add_scalar(c_den, SSIM_C2);
    let den = tape.mul(l_den, c_den)?;

    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    eval(x, |t, xv| ssim_on(t, xv, y))
}

/// `(1 − SSIM(f, vi)) + δ·(1 − SSIM(f, ir))`.
pub fn l_ssim_on(tape: &mut Tape, f: Var, ir: &Tensor, vi: &Tensor, delta: f64) -> Result<Var> {
    check_triple(tape.value(f), ir, vi)?;
    let s_vi = ssim_on(tape, f, vi)?;
    let s_ir = ssim_on(tape, f, ir)?;
    let a = tape.scale(s_vi, -1.0);
    let a = tape.add_scalar(a, 1.0);
    let b = tape.scale(s_ir, -delta);
    let b = tape.add_scalar(b, delta);
    tape.add(a, b)
}

pub fn l_ssim(f: &Tensor, ir: &Tensor, vi: &Tensor, delta: f64) -> Result<f64> {
    eval(f, |t, fv| l_ssim_on(t, fv, ir, vi, delta))
}

/// The four components and their weighted total, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub int: Var,
    pub grad: Var,
    pub cov: Var,
    pub ssim: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub int: f64,
    pub grad: f64,
    pub cov: f64,
    pub ssim: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).item(),
            int: tape.value(self.int).item(),
            grad: tape.value(self.grad).item(),
            cov: tape.value(self.cov).item(),
            ssim: tape.value(self.ssim).item(),
        }
    }
}

pub fn l_total_on(
    tape: &mut Tape,
    f: Var,
    ir: &Tensor,
    vi: &Tensor,
    weights: &LossWeights,
    ext: &SurrogateExtractor,
) -> Result<LossVars> {
    weights.validate()?;
    let int = l_int_on(tape, f, ir, vi)?;
    let grad = l_grad_on(tape, f, ir, vi)?;
    let cov = l_cov_on(tape, f, ir, ext)?;
    let ssim = l_ssim_on(tape, f, ir, vi, weights.delta)?;
    let mut total = int;
    for (v, w) in [(grad, weights.alpha), (cov, weights.beta), (ssim, weights.gamma)] {
        let term = tape.scale(v, w);
        total = tape.add(total, term)?;
    }
    Ok(LossVars { total, int, grad, cov, ssim })
}

pub fn l_total(
    f: &Tensor,
    ir: &Tensor,
    vi: &Tensor,
    weights: &LossWeights,
    ext: &SurrogateExtractor,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    Ok(l_total_on(&mut tape, fv, ir, vi, weights, ext)?.values(&tape))
}
