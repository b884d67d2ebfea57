//! Grassmann-embedded attention blocks.
//!
//! Self-attention (GSSM) draws queries, keys and values from one modality;
//! cross-attention (GSCM) takes its queries from the other modality and masks
//! the attention matrices with the cross-modal mask before the softmax. Both
//! come in a channel variant (a d×d attention matrix over feature channels)
//! and a spatial variant (an n×n matrix over the tokens of each b×b block).
//!
//! For every subspace dimension `q` the attention matrix is
//! `A'_q = Proj(ReOrth(FRMap_q(OrthMap_q(S Sᵀ))))`, with `S = QᵀK` (channel)
//! or `S = Q_b K_bᵀ` (spatial). The block output averages
//! `softmax(A'_q / √d)` applied to `V` over all `q`.

use rand::Rng;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::manifold::{self, FRMapWeight, OrthoBasis};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// GSSM: queries, keys and values from the same modality.
    SelfModal,
    /// GSCM: queries from the other modality, mask applied.
    CrossModal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Channel,
    Spatial,
}

/// Per-token features of an `h×w` grid, tokens in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, h: usize, w: usize) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if n != h * w {
            return Err(Error::dim(format!("{n} tokens for a {h}×{w} grid")));
        }
        Ok(TokenGrid { tokens, h, w })
    }

    pub fn d(&self) -> usize {
        self.tokens.cols()
    }
}

/// The cross-modal mask: `+1` on the diagonal, `−1` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct CmsMask {
    pub m: Tensor,
}

impl CmsMask {
    pub fn new(n: usize) -> Self {
        let mut m = Tensor::full(&[n, n], -1.0);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        CmsMask { m }
    }
}

/// `M ⊙ Σ`: diagonal kept, off-diagonal entries negated (exact in floating point).
pub fn apply_cms_mask(sigma: &Tensor) -> Result<Tensor> {
    let (r, c) = sigma.dims2()?;
    if r != c {
        return Err(Error::dim(format!("mask needs a square matrix, got {r}×{c}")));
    }
    let mut out = sigma.map(|x| -x);
    for i in 0..r {
        out.set(i, i, sigma.at(i, i));
    }
    Ok(out)
}

/// Row permutation gathering each `b×b` block into a contiguous run of `b²`
/// tokens; `perm[new] = old`.
pub fn block_shuffle_perm(h: usize, w: usize, b: usize) -> Result<Vec<usize>> {
    if b == 0 || h % b != 0 || w % b != 0 {
        return Err(Error::dim(format!("block side {b} does not divide {h}×{w}")));
    }
    let bw = w / b;
    let mut perm = vec![0; h * w];
    for by in 0..h / b {
        for bx in 0..bw {
            for iy in 0..b {
                for ix in 0..b {
                    let new = (by * bw + bx) * b * b + iy * b + ix;
                    perm[new] = (by * b + iy) * w + bx * b + ix;
                }
            }
        }
    }
    Ok(perm)
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

fn permute(x: &TokenGrid, perm: &[usize]) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let v = tape.constant(x.tokens.clone());
    let out = tape.permute_rows(v, perm)?;
    TokenGrid::new(tape.value(out).clone(), x.h, x.w)
}

pub fn block_shuffle(x: &TokenGrid, b: usize) -> Result<TokenGrid> {
    permute(x, &block_shuffle_perm(x.h, x.w, b)?)
}

pub fn block_unshuffle(x: &TokenGrid, b: usize) -> Result<TokenGrid> {
    permute(x, &invert_perm(&block_shuffle_perm(x.h, x.w, b)?))
}

/// Learnable tensors of one transformer block.
#[derive(Clone, Debug)]
pub struct AttentionBlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// One FRMap weight per subspace dimension.
    pub frmaps: Vec<(usize, FRMapWeight)>,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub norm_scale: Tensor,
    pub norm_bias: Tensor,
}

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::new(&[rows, cols], data).expect("xavier shape")
}

impl AttentionBlockParams {
    /// `d` is the token width, `frmap_dim` the side of the attention matrix.
    pub fn init<R: Rng>(d: usize, frmap_dim: usize, subspaces: &[usize], rng: &mut R) -> Result<Self> {
        let w_q = xavier(d, d, rng);
        let w_k = xavier(d, d, rng);
        let w_v = xavier(d, d, rng);
        let frmaps = subspaces
            .iter()
            .map(|&q| Ok((q, FRMapWeight::init(frmap_dim, frmap_dim, rng)?)))
            .collect::<Result<_>>()?;
        Ok(AttentionBlockParams {
            w_q,
            w_k,
            w_v,
            frmaps,
            mlp_w1: xavier(d, 4 * d, rng),
            mlp_b1: Tensor::zeros(&[4 * d]),
            mlp_w2: xavier(4 * d, d, rng),
            mlp_b2: Tensor::zeros(&[d]),
            norm_scale: Tensor::full(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
        })
    }

    /// Zeroes the query/key/value projections and the MLP, leaving a pure residual.
    pub fn zero_attention_and_mlp(&mut self) {
        for t in [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ] {
            t.data_mut().fill(0.0);
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.w_q"), self.w_q.clone())?;
        store.insert(format!("{prefix}.w_k"), self.w_k.clone())?;
        store.insert(format!("{prefix}.w_v"), self.w_v.clone())?;
        for (q, w) in &self.frmaps {
            store.insert(format!("{prefix}.frmap.{q}"), w.as_tensor().clone())?;
        }
        store.insert(format!("{prefix}.mlp.w1"), self.mlp_w1.clone())?;
        store.insert(format!("{prefix}.mlp.b1"), self.mlp_b1.clone())?;
        store.insert(format!("{prefix}.mlp.w2"), self.mlp_w2.clone())?;
        store.insert(format!("{prefix}.mlp.b2"), self.mlp_b2.clone())?;
        store.insert(format!("{prefix}.norm.scale"), self.norm_scale.clone())?;
        store.insert(format!("{prefix}.norm.bias"), self.norm_bias.clone())?;
        Ok(())
    }

    pub fn to_store(&self, prefix: &str) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        self.insert_into(&mut s, prefix)?;
        Ok(s)
    }
}

/// Block parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub frmaps: Vec<(usize, Var)>,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub norm_scale: Var,
    pub norm_bias: Var,
}

impl BlockVars {
    pub fn bind(bound: &Bound, prefix: &str, subspaces: &[usize]) -> Result<Self> {
        let get = |s: &str| bound.get(&format!("{prefix}.{s}"));
        Ok(BlockVars {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            frmaps: subspaces
                .iter()
                .map(|&q| Ok((q, get(&format!("frmap.{q}"))?)))
                .collect::<Result<_>>()?,
            mlp_w1: get("mlp.w1")?,
            mlp_b1: get("mlp.b1")?,
            mlp_w2: get("mlp.w2")?,
            mlp_b2: get("mlp.b2")?,
            norm_scale: get("norm.scale")?,
            norm_bias: get("norm.bias")?,
        })
    }
}

/// `Q = X W_Q`, `K = X W_K`, `V = X W_V` on already-normalized tokens; `q_src`
/// supplies the queries (the other modality in cross-attention).
pub fn qkv_project(tape: &mut Tape, q_src: Var, x: Var, p: &BlockVars) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(q_src, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    Ok((q, k, v))
}

/// `S Sᵀ` with `S = QᵀK` (channel) or `S = QKᵀ` (spatial).
fn raw_projection(tape: &mut Tape, q: Var, k: Var, mode: AttentionMode) -> Result<Var> {
    let s = match mode {
        AttentionMode::Channel => tape.matmul_tn(q, k)?,
        AttentionMode::Spatial => tape.matmul_nt(q, k)?,
    };
    tape.matmul_nt(s, s)
}

/// `OrthMap(Proj(S), q)` as a tape recording.
pub fn grassmann_attention_matrix_on(
    tape: &mut Tape,
    q: Var,
    k: Var,
    mode: AttentionMode,
    q_coeff: usize,
) -> Result<Var> {
    let p = raw_projection(tape, q, k, mode)?;
    manifold::taped::orth_map(tape, p, q_coeff)
}

pub fn grassmann_attention_matrix(
    q: &Tensor,
    k: &Tensor,
    mode: AttentionMode,
    q_coeff: usize,
) -> Result<OrthoBasis> {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let a = grassmann_attention_matrix_on(&mut tape, qv, kv, mode, q_coeff)?;
    OrthoBasis::new(tape.value(a).clone())
}

/// `Proj(ReOrth(FRMap(A)))` as a tape recording.
pub fn subspace_transform_on(tape: &mut Tape, a: Var, w: Var) -> Result<Var> {
    let mapped = manifold::taped::fr_map(tape, w, a)?;
    let basis = manifold::taped::reorth(tape, mapped)?;
    manifold::taped::proj_map(tape, basis)
}

pub fn subspace_transform(a: &OrthoBasis, w: &FRMapWeight) -> Result<Tensor> {
    if w.d_in() != a.d() {
        return Err(Error::dim(format!("FRMap expects {} rows, basis has {}", w.d_in(), a.d())));
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.as_tensor().clone());
    let wv = tape.constant(w.as_tensor().clone());
    let p = subspace_transform_on(&mut tape, av, wv)?;
    Ok(tape.value(p).clone())
}

/// Mask (optionally), scale by `1/√d_inp`, row-softmax, and mix `V`.
fn attend_one(
    tape: &mut Tape,
    a_prime: Var,
    v: Var,
    d_inp: usize,
    masked: bool,
    mode: AttentionMode,
) -> Result<Var> {
    let a = if masked { tape.cms_mask(a_prime)? } else { a_prime };
    let logits = tape.scale(a, 1.0 / (d_inp as f64).sqrt());
    let weights = tape.softmax_rows(logits)?;
    match mode {
        AttentionMode::Channel => tape.matmul(v, weights),
        AttentionMode::Spatial => tape.matmul(weights, v),
    }
}

fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::arg("no subspace attention matrices"))?;
    let mut acc = first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    Ok(if parts.len() == 1 { acc } else { tape.scale(acc, 1.0 / parts.len() as f64) })
}

/// Applies every `A'_r` to `V` and averages the results.
pub fn attention_apply_on(
    tape: &mut Tape,
    a_primes: &[Var],
    v: Var,
    d_inp: usize,
    masked: bool,
    mode: AttentionMode,
) -> Result<Var> {
    if a_primes.is_empty() {
        return Err(Error::arg("no subspace attention matrices"));
    }
    let outs = a_primes
        .iter()
        .map(|&a| attend_one(tape, a, v, d_inp, masked, mode))
        .collect::<Result<Vec<_>>>()?;
    mean_of(tape, &outs)
}

pub fn attention_apply(
    a_primes: &[Tensor],
    v: &Tensor,
    d_inp: usize,
    masked: bool,
    mode: AttentionMode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let avs: Vec<Var> = a_primes.iter().map(|a| tape.constant(a.clone())).collect();
    let out = attention_apply_on(&mut tape, &avs, vv, d_inp, masked, mode)?;
    Ok(tape.value(out).clone())
}

/// Attention matrices `A'_q` for one (channel or block) attention problem.
fn subspace_attention_matrices(
    tape: &mut Tape,
    q: Var,
    k: Var,
    frmaps: &[(usize, Var)],
    mode: AttentionMode,
) -> Result<Vec<Var>> {
    let n = match mode {
        AttentionMode::Channel => tape.value(q).cols(),
        AttentionMode::Spatial => tape.value(q).rows(),
    };
    let mut out = Vec::with_capacity(frmaps.len());
    let mut eig = None;
    for &(qc, w) in frmaps {
        if qc == 0 || qc > n {
            return Err(Error::dim(format!("subspace coefficient {qc} exceeds attention size {n}")));
        }
        if qc == n {
            // the whole space: every orthonormal basis projects to the identity
            out.push(tape.constant(Tensor::eye(n)));
            continue;
        }
        let (u, ctx) = match &eig {
            Some(e) => e,
            None => {
                let p = raw_projection(tape, q, k, mode)?;
                eig.insert(tape.eig_vectors(p)?)
            }
        };
        let (u, ctx) = (*u, ctx.clone());
        let a = manifold::taped::truncate(tape, u, &ctx, qc)?;
        out.push(subspace_transform_on(tape, a, w)?);
    }
    Ok(out)
}

/// Static settings shared by every block of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSettings {
    /// Softmax temperature is `√d_inp`.
    pub d_inp: usize,
    /// Side of the square token blocks used by spatial attention.
    pub block_side: usize,
}

/// Residual attention followed by a residual MLP, sharing one layer norm.
///
/// `x` holds the `h·w` tokens of this modality; `x_other` is required for
/// cross-attention and ignored otherwise.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    x_other: Option<Var>,
    grid: (usize, usize),
    p: &BlockVars,
    kind: BlockKind,
    mode: AttentionMode,
    settings: BlockSettings,
) -> Result<Var> {
    let (h, w) = grid;
    let (n, _) = tape.value(x).dims2()?;
    if n != h * w {
        return Err(Error::dim(format!("{n} tokens for a {h}×{w} grid")));
    }
    let norm = |tape: &mut Tape, v: Var| tape.layer_norm(v, p.norm_scale, p.norm_bias, LAYER_NORM_EPS);

    let xn = norm(tape, x)?;
    let q_src = match kind {
        BlockKind::SelfModal => xn,
        BlockKind::CrossModal => {
            let other = x_other.ok_or_else(|| Error::arg("cross-modal block needs the other modality"))?;
            if tape.value(other).shape() != tape.value(x).shape() {
                return Err(Error::dim("modalities have different token grids"));
            }
            norm(tape, other)?
        }
    };
    let (q, k, v) = qkv_project(tape, q_src, xn, p)?;
    let masked = kind == BlockKind::CrossModal;

    let attended = match mode {
        AttentionMode::Channel => {
            let a_primes = subspace_attention_matrices(tape, q, k, &p.frmaps, mode)?;
            attention_apply_on(tape, &a_primes, v, settings.d_inp, masked, mode)?
        }
        AttentionMode::Spatial => {
            let b = settings.block_side;
            let perm = block_shuffle_perm(h, w, b)?;
            let (qs, ks, vs) = (
                tape.permute_rows(q, &perm)?,
                tape.permute_rows(k, &perm)?,
                tape.permute_rows(v, &perm)?,
            );
            let run = b * b;
            let mut blocks = Vec::with_capacity(n / run);
            for start in (0..n).step_by(run) {
                let qb = tape.slice_rows(qs, start, run)?;
                let kb = tape.slice_rows(ks, start, run)?;
                let vb = tape.slice_rows(vs, start, run)?;
                let a_primes = subspace_attention_matrices(tape, qb, kb, &p.frmaps, mode)?;
                blocks.push(attention_apply_on(tape, &a_primes, vb, settings.d_inp, masked, mode)?);
            }
            let joined = tape.concat_rows(&blocks)?;
            tape.permute_rows(joined, &invert_perm(&perm))?
        }
    };
    let x1 = tape.add(x, attended)?;

    let x1n = norm(tape, x1)?;
    let hidden = tape.matmul(x1n, p.mlp_w1)?;
    let hidden = tape.add_row_bias(hidden, p.mlp_b1)?;
    let hidden = tape.silu(hidden);
    let out = tape.matmul(hidden, p.mlp_w2)?;
    let out = tape.add_row_bias(out, p.mlp_b2)?;
    tape.add(x1, out)
}

/// Runs one block on plain tensors.
pub fn transformer_block_eval(
    x: &TokenGrid,
    x_other: Option<&TokenGrid>,
    params: &AttentionBlockParams,
    kind: BlockKind,
    mode: AttentionMode,
    settings: BlockSettings,
) -> Result<TokenGrid> {
    let store = params.to_store("block")?;
    let subspaces: Vec<usize> = params.frmaps.iter().map(|(q, _)| *q).collect();
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let vars = BlockVars::bind(&bound, "block", &subspaces)?;
    let xv = tape.constant(x.tokens.clone());
    let ov = x_other.map(|o| tape.constant(o.tokens.clone()));
    let out = transformer_block(&mut tape, xv, ov, (x.h, x.w), &vars, kind, mode, settings)?;
    TokenGrid::new(tape.value(out).clone(), x.h, x.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, matmul_nt};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    const SETTINGS: BlockSettings = BlockSettings { d_inp: 8, block_side: 2 };

    #[test]
    fn cms_mask_cases() {
        assert_eq!(apply_cms_mask(&Tensor::eye(3)).unwrap().data()[..4], [1.0, -0.0, -0.0, -0.0]);
        let ones = Tensor::full(&[3, 3], 1.0);
        assert_eq!(apply_cms_mask(&ones).unwrap(), CmsMask::new(3).m);
        assert!(matches!(apply_cms_mask(&Tensor::zeros(&[2, 3])), Err(Error::Dimension(_))));
    }

    #[test]
    fn shuffle_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = TokenGrid::new(random(&mut rng, 16, 3), 4, 4).unwrap();
        assert_eq!(block_shuffle(&g, 1).unwrap(), g);
        assert_eq!(block_shuffle(&g, 4).unwrap(), g);
        let s = block_shuffle(&g, 2).unwrap();
        assert_ne!(s, g);
        // first block is tokens (0,0),(0,1),(1,0),(1,1)
        assert_eq!(s.tokens.slice_rows(2, 1).unwrap(), g.tokens.slice_rows(4, 1).unwrap());
        assert_eq!(block_unshuffle(&s, 2).unwrap(), g);
        assert!(matches!(block_shuffle(&g, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_matrix_identity_input() {
        let b = grassmann_attention_matrix(&Tensor::eye(5), &Tensor::eye(5), AttentionMode::Channel, 2)
            .unwrap();
        assert_eq!(b.as_tensor(), &Tensor::eye(5).leading_cols(2).unwrap());
    }

    #[test]
    fn attention_matrix_rank_one() {
        // Q = e₁ uᵀ and K = e₁ vᵀ give S = QᵀK = u vᵀ
        let u = [0.0, -3.0, 4.0];
        let vv = [1.0, 2.0, 2.0];
        let mut q = Tensor::zeros(&[2, 3]);
        let mut k = Tensor::zeros(&[2, 3]);
        for j in 0..3 {
            q.set(0, j, u[j]);
            k.set(0, j, vv[j]);
        }
        let b = grassmann_attention_matrix(&q, &k, AttentionMode::Channel, 1).unwrap();
        let expect = Tensor::new(&[3, 1], vec![0.0, 0.6, -0.8]).unwrap();
        assert!(b.as_tensor().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn attention_matrix_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&mut rng, 64, 8);
        let k = random(&mut rng, 64, 8);
        let b = grassmann_attention_matrix(&q, &k, AttentionMode::Spatial, 3).unwrap();
        assert_eq!((b.d(), b.q()), (64, 3));
        assert!(matches!(
            grassmann_attention_matrix(&q, &k, AttentionMode::Channel, 9),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn subspace_transform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = manifold::reorth(&random(&mut rng, 10, 3)).unwrap();
        let id = FRMapWeight::new(Tensor::eye(10)).unwrap();
        let p = subspace_transform(&a, &id).unwrap();
        assert!(p.max_abs_diff(&manifold::proj_map(a.as_tensor()).unwrap()) < 1e-14);
        let w = FRMapWeight::init(10, 10, &mut rng).unwrap();
        let p = subspace_transform(&a, &w).unwrap();
        assert!((p.trace().unwrap() - 3.0).abs() <= 1e-12);
        assert!(matmul(&p, &p).unwrap().max_abs_diff(&p) <= 1e-12);
    }

    #[test]
    fn attention_apply_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random(&mut rng, 6, 4);
        let out = attention_apply(&[Tensor::zeros(&[4, 4])], &v, 4, false, AttentionMode::Channel).unwrap();
        let uniform = Tensor::full(&[4, 4], 0.25);
        assert!(out.max_abs_diff(&matmul(&v, &uniform).unwrap()) < 1e-15);

        let a = random(&mut rng, 4, 4);
        let one = attention_apply(std::slice::from_ref(&a), &v, 4, true, AttentionMode::Channel).unwrap();
        let two = attention_apply(&[a.clone(), a], &v, 4, true, AttentionMode::Channel).unwrap();
        assert_eq!(one, two);
        assert!(matches!(
            attention_apply(&[], &v, 4, false, AttentionMode::Channel),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let a = tape.constant(random(&mut rng, 7, 7).scale(10.0));
        let s = tape.softmax_rows(a).unwrap();
        for row in tape.value(s).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn block(rng: &mut ChaCha8Rng, mode: AttentionMode) -> AttentionBlockParams {
        match mode {
            AttentionMode::Channel => AttentionBlockParams::init(8, 8, &[2, 3], rng).unwrap(),
            AttentionMode::Spatial => AttentionBlockParams::init(8, 4, &[2], rng).unwrap(),
        }
    }

    #[test]
    fn residual_identity_with_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = TokenGrid::new(random(&mut rng, 16, 8), 4, 4).unwrap();
        let o = TokenGrid::new(random(&mut rng, 16, 8), 4, 4).unwrap();
        for mode in [AttentionMode::Channel, AttentionMode::Spatial] {
            for kind in [BlockKind::SelfModal, BlockKind::CrossModal] {
                let mut p = block(&mut rng, mode);
                p.zero_attention_and_mlp();
                let y = transformer_block_eval(&x, Some(&o), &p, kind, mode, SETTINGS).unwrap();
                assert_eq!(y, x);
            }
        }
    }

    #[test]
    fn shapes_and_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = TokenGrid::new(random(&mut rng, 16, 8), 4, 4).unwrap();
        let o = TokenGrid::new(random(&mut rng, 16, 8), 4, 4).unwrap();
        for mode in [AttentionMode::Channel, AttentionMode::Spatial] {
            let p = block(&mut rng, mode);
            for kind in [BlockKind::SelfModal, BlockKind::CrossModal] {
                let y = transformer_block_eval(&x, Some(&o), &p, kind, mode, SETTINGS).unwrap();
                assert_eq!(y.tokens.shape(), x.tokens.shape());
                assert!(y.tokens.is_finite());
            }
            let with = transformer_block_eval(&x, Some(&o), &p, BlockKind::SelfModal, mode, SETTINGS).unwrap();
            let without = transformer_block_eval(&x, None, &p, BlockKind::SelfModal, mode, SETTINGS).unwrap();
            assert_eq!(with, without);
            assert!(matches!(
                transformer_block_eval(&x, None, &p, BlockKind::CrossModal, mode, SETTINGS),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn full_subspace_projects_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = manifold::reorth(&random(&mut rng, 6, 6)).unwrap();
        let p = matmul_nt(y.as_tensor(), y.as_tensor()).unwrap();
        assert!(p.max_abs_diff(&Tensor::eye(6)) < 1e-14);
    }
}
