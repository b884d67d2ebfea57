//! GrFormer end to end: two convolutional encoders, four parallel Grassmann
//! transformer branches, channel concatenation and a convolutional decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    transformer_block, AttentionBlockParams, AttentionMode, BlockKind, BlockSettings, BlockVars,
};
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub d_model: usize,
    pub encoder_hidden: usize,
    pub channel_subspaces: Vec<usize>,
    /// Requested spatial subspace; clamped to the tokens per block.
    pub spatial_subspace: usize,
    pub block_side: usize,
    pub decoder_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            d_model: 64,
            encoder_hidden: 32,
            channel_subspaces: vec![2, 3, 4, 5],
            spatial_subspace: 100,
            block_side: 8,
            decoder_hidden: vec![192, 128, 64],
        }
    }
}

/// The four parallel branches, in concatenation order.
pub const BRANCHES: [(&str, BlockKind, AttentionMode); 4] = [
    ("gssm_c", BlockKind::SelfModal, AttentionMode::Channel),
    ("gssm_s", BlockKind::SelfModal, AttentionMode::Spatial),
    ("gscm_c", BlockKind::CrossModal, AttentionMode::Channel),
    ("gscm_s", BlockKind::CrossModal, AttentionMode::Spatial),
];

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.d_model == 0 || self.encoder_hidden == 0 || self.block_side == 0 {
            return bad("network widths and block side must be positive".into());
        }
        if self.spatial_subspace == 0 {
            return bad("spatial subspace must be positive".into());
        }
        if self.channel_subspaces.is_empty() {
            return bad("at least one channel subspace is required".into());
        }
        if let Some(&q) = self.channel_subspaces.iter().find(|&&q| q == 0 || q > self.d_model) {
            return bad(format!("channel subspace {q} outside 1..={}", self.d_model));
        }
        let mut seen = self.channel_subspaces.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.channel_subspaces.len() {
            return bad("channel subspaces must be distinct".into());
        }
        if self.decoder_hidden.contains(&0) {
            return bad("decoder widths must be positive".into());
        }
        Ok(())
    }

    pub fn tokens_per_block(&self) -> usize {
        self.block_side * self.block_side
    }

    pub fn effective_spatial_subspace(&self) -> usize {
        self.spatial_subspace.min(self.tokens_per_block())
    }

    pub fn decoder_input(&self) -> usize {
        BRANCHES.len() * self.d_model
    }

    /// Subspace list and attention-matrix side for a branch mode.
    pub fn subspaces(&self, mode: AttentionMode) -> (Vec<usize>, usize) {
        match mode {
            AttentionMode::Channel => (self.channel_subspaces.clone(), self.d_model),
            AttentionMode::Spatial => (vec![self.effective_spatial_subspace()], self.tokens_per_block()),
        }
    }

    pub fn block_settings(&self) -> BlockSettings {
        BlockSettings { d_inp: self.d_model, block_side: self.block_side }
    }

    fn decoder_widths(&self) -> Vec<(usize, usize)> {
        let mut chans = vec![self.decoder_input()];
        chans.extend(&self.decoder_hidden);
        chans.push(1);
        chans.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub ir: Tensor,
    pub vi: Tensor,
}

impl ImagePair {
    pub fn new(ir: Tensor, vi: Tensor) -> Result<Self> {
        let (h, w) = ir.dims2()?;
        if vi.shape() != [h, w] {
            return Err(Error::arg(format!(
                "modalities differ in size: {:?} vs {:?}",
                ir.shape(),
                vi.shape()
            )));
        }
        for (name, t) in [("infrared", &ir), ("visible", &vi)] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::arg(format!("{name} image has values outside [0,1]")));
            }
        }
        Ok(ImagePair { ir, vi })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.ir.rows(), self.ir.cols())
    }
}

fn conv_kernel<R: Rng>(c_out: usize, c_in: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (9 * (c_in + c_out)) as f64).sqrt();
    let n = c_out * c_in * 9;
    Tensor::new(&[c_out, c_in, 3, 3], (0..n).map(|_| rng.gen_range(-a..=a)).collect())
        .expect("kernel shape")
}

fn insert_conv<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<()> {
    store.insert(format!("{name}.w"), conv_kernel(c_out, c_in, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]))
}

/// Seeded initialization of every learnable tensor.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for enc in ["enc_ir", "enc_vi"] {
        insert_conv(&mut store, &format!("{enc}.conv1"), 1, cfg.encoder_hidden, &mut rng)?;
        insert_conv(&mut store, &format!("{enc}.conv2"), cfg.encoder_hidden, cfg.d_model, &mut rng)?;
    }
    for (name, _, mode) in BRANCHES {
        let (subspaces, side) = cfg.subspaces(mode);
        AttentionBlockParams::init(cfg.d_model, side, &subspaces, &mut rng)?.insert_into(&mut store, name)?;
    }
    for (i, (c_in, c_out)) in cfg.decoder_widths().into_iter().enumerate() {
        insert_conv(&mut store, &format!("dec.conv{}", i + 1), c_in, c_out, &mut rng)?;
    }
    Ok(store)
}

fn conv_layer(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let (w, b) = (bound.get(&format!("{name}.w"))?, bound.get(&format!("{name}.b"))?);
    tape.conv2d(x, w, b)
}

/// `c×h×w` feature map → `hw×c` tokens.
fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3()?;
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose(flat)
}

/// Encoder for one modality (`prefix` is `enc_ir` or `enc_vi`); `img` is `h×w`.
pub fn encode_on(tape: &mut Tape, bound: &Bound, prefix: &str, img: Var) -> Result<Var> {
    let (h, w) = tape.value(img).dims2()?;
    let x = tape.reshape(img, &[1, h, w])?;
    let x = conv_layer(tape, bound, &format!("{prefix}.conv1"), x)?;
    let x = tape.leaky_relu(x, LEAKY_SLOPE);
    let x = conv_layer(tape, bound, &format!("{prefix}.conv2"), x)?;
    let x = tape.leaky_relu(x, LEAKY_SLOPE);
    to_tokens(tape, x)
}

/// Decoder from `c×h×w` features to an `h×w` image in (0,1).
pub fn decode_on(tape: &mut Tape, bound: &Bound, cfg: &NetworkConfig, features: Var) -> Result<Var> {
    let (c, h, w) = tape.value(features).dims3()?;
    if c != cfg.decoder_input() {
        return Err(Error::dim(format!("decoder expects {} channels, got {c}", cfg.decoder_input())));
    }
    let layers = cfg.decoder_widths().len();
    let mut x = features;
    for i in 1..=layers {
        x = conv_layer(tape, bound, &format!("dec.conv{i}"), x)?;
        if i < layers {
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    let x = tape.sigmoid(x);
    tape.reshape(x, &[h, w])
}

/// One branch over both modality streams; the two stream outputs are averaged.
fn branch_on(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &NetworkConfig,
    (name, kind, mode): (&str, BlockKind, AttentionMode),
    t_ir: Var,
    t_vi: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let (subspaces, _) = cfg.subspaces(mode);
    let p = BlockVars::bind(bound, name, &subspaces)?;
    let s = cfg.block_settings();
    let a = transformer_block(tape, t_ir, Some(t_vi), grid, &p, kind, mode, s)?;
    let b = transformer_block(tape, t_vi, Some(t_ir), grid, &p, kind, mode, s)?;
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, 0.5))
}

/// Full forward pass recorded on `tape`; `ir` and `vi` are `h×w` images.
pub fn fuse_forward_on(tape: &mut Tape, bound: &Bound, cfg: &NetworkConfig, ir: Var, vi: Var) -> Result<Var> {
    let (h, w) = tape.value(ir).dims2()?;
    if tape.value(vi).shape() != [h, w] {
        return Err(Error::arg("modalities differ in size"));
    }
    if h % cfg.block_side != 0 || w % cfg.block_side != 0 {
        return Err(Error::dim(format!("{h}×{w} is not divisible by block side {}", cfg.block_side)));
    }
    let t_ir = encode_on(tape, bound, "enc_ir", ir)?;
    let t_vi = encode_on(tape, bound, "enc_vi", vi)?;
    let mut channels = Vec::with_capacity(BRANCHES.len());
    for branch in BRANCHES {
        let out = branch_on(tape, bound, cfg, branch, t_ir, t_vi, (h, w))?;
        channels.push(tape.transpose(out)?);
    }
    let stacked = tape.concat_rows(&channels)?;
    let features = tape.reshape(stacked, &[cfg.decoder_input(), h, w])?;
    decode_on(tape, bound, cfg, features)
}

/// Inference: fused image for a pair.
pub fn fuse_forward(pair: &ImagePair, params: &ParamStore, cfg: &NetworkConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let ir = tape.constant(pair.ir.clone());
    let vi = tape.constant(pair.vi.clone());
    let out = fuse_forward_on(&mut tape, &bound, cfg, ir, vi)?;
    let f = tape.value(out).clone();
    f.ensure_finite("fused image")?;
    Ok(f)
}

pub fn encode(img: &Tensor, params: &ParamStore, prefix: &str) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(img.clone());
    let t = encode_on(&mut tape, &bound, prefix, x)?;
    Ok(tape.value(t).clone())
}

pub fn decode(features: &Tensor, params: &ParamStore, cfg: &NetworkConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(features.clone());
    let t = decode_on(&mut tape, &bound, cfg, x)?;
    Ok(tape.value(t).clone())
}
