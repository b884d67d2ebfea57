//! Grassmann layers: OrthMap, FRMap, ReOrth and the projection map `Y ↦ YYᵀ`.
//!
//! A point on the Grassmann manifold 𝒢(q, d) is represented by a d×q matrix with
//! orthonormal columns. Any rotation `Y O` of the basis denotes the same point,
//! and the projector `YYᵀ` is the rotation-free representative.
//!
//! Each layer exists in two forms: a plain function on tensors, and a recorder
//! in [`taped`] that appends the operation to a [`Tape`] so its structured
//! backward rule runs during the reverse sweep.

use rand::Rng;

use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::linalg::{self, matmul, matmul_nt, matmul_tn};
use crate::tensor::Tensor;

/// Orthonormal d×q basis of a subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoBasis {
    y: Tensor,
}

/// Tolerance on `‖YᵀY − I‖_∞` accepted by [`OrthoBasis::new`].
pub const ORTHO_TOL: f64 = 1e-5;

impl OrthoBasis {
    pub fn new(y: Tensor) -> Result<Self> {
        let (d, q) = y.dims2()?;
        if q == 0 || q > d {
            return Err(Error::dim(format!("basis must satisfy 1 ≤ q ≤ d, got {d}×{q}")));
        }
        let err = orthonormality_error(&y)?;
        if !(err <= ORTHO_TOL) {
            return Err(Error::Numeric(format!("columns not orthonormal (‖YᵀY − I‖∞ = {err:.3e})")));
        }
        Ok(OrthoBasis { y })
    }

    pub fn d(&self) -> usize {
        self.y.rows()
    }

    pub fn q(&self) -> usize {
        self.y.cols()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.y
    }

    pub fn into_tensor(self) -> Tensor {
        self.y
    }
}

/// `‖YᵀY − I‖_∞`
pub fn orthonormality_error(y: &Tensor) -> Result<f64> {
    let q = y.cols();
    Ok(matmul_tn(y, y)?.max_abs_diff(&Tensor::eye(q)))
}

/// Learnable full-row-rank map `d_out×d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct FRMapWeight {
    w: Tensor,
}

/// Smallest singular value required of a freshly initialized FRMap weight.
pub const MIN_INIT_SINGULAR_VALUE: f64 = 1e-3;

impl FRMapWeight {
    /// Wraps `w` after asserting it is comfortably full rank.
    pub fn new(w: Tensor) -> Result<Self> {
        let (r, c) = w.dims2()?;
        if r > c {
            return Err(Error::dim(format!("FRMap weight {r}×{c} cannot have full row rank")));
        }
        let s = smallest_singular_value(&w)?;
        if !(s >= MIN_INIT_SINGULAR_VALUE) {
            return Err(Error::Rank(format!("FRMap weight smallest singular value {s:.3e}")));
        }
        Ok(FRMapWeight { w })
    }

    /// Uniform in `[−a, a]`, `a = √(6/(d_in + d_out))`, redrawn until full rank.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        for _ in 0..16 {
            let data = (0..d_in * d_out).map(|_| rng.gen_range(-a..=a)).collect();
            if let Ok(w) = Self::new(Tensor::new(&[d_out, d_in], data)?) {
                return Ok(w);
            }
        }
        Err(Error::Rank("could not draw a full-rank FRMap weight".into()))
    }

    /// Wraps `w` without the rank assertion (weights after optimizer updates).
    pub fn unchecked(w: Tensor) -> Self {
        FRMapWeight { w }
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.w
    }

    pub fn into_tensor(self) -> Tensor {
        self.w
    }
}

/// Smallest singular value of a wide or square matrix, via `λ_min(W Wᵀ)`.
pub fn smallest_singular_value(w: &Tensor) -> Result<f64> {
    let gram = matmul_nt(w, w)?;
    let e = linalg::sym_eig(&gram)?;
    Ok(e.sigma.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

/// Top-`q` eigenvectors of the symmetrized input.
pub fn orth_map(a: &Tensor, q: usize) -> Result<OrthoBasis> {
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let y = taped::orth_map(&mut tape, x, q)?;
    OrthoBasis::new(tape.value(y).clone())
}

/// `W·Y`; the result is generally no longer orthonormal.
pub fn fr_map(y: &OrthoBasis, w: &FRMapWeight) -> Result<Tensor> {
    if w.d_in() != y.d() {
        return Err(Error::dim(format!(
            "FRMap weight expects {} rows, basis has {}",
            w.d_in(),
            y.d()
        )));
    }
    matmul(&w.w, &y.y)
}

/// Orthonormal factor of the thin QR decomposition (`Y R⁻¹`).
pub fn reorth(a: &Tensor) -> Result<OrthoBasis> {
    OrthoBasis::new(linalg::thin_qr(a)?.q)
}

/// `Y Yᵀ`, exactly symmetric.
pub fn proj_map(y: &Tensor) -> Result<Tensor> {
    y.dims2()?;
    linalg::symmetrize(&matmul_nt(y, y)?)
}

/// Recorders that append the Grassmann layers to a tape.
pub mod taped {
    use crate::diff::{Tape, Var};
    use crate::error::{Error, Result};

    /// Top-`q` eigenvectors; the eigengap at `q` is reported to the tape.
    pub fn orth_map(tape: &mut Tape, a: Var, q: usize) -> Result<Var> {
        let (u, ctx) = tape.eig_vectors(a)?;
        truncate(tape, u, &ctx, q)
    }

    /// Keeps the leading `q` columns of an eigenvector matrix already on the tape.
    pub fn truncate(tape: &mut Tape, u: Var, ctx: &crate::linalg::EigResult, q: usize) -> Result<Var> {
        let n = ctx.n();
        if q == 0 || q > n {
            return Err(Error::dim(format!("subspace dimension {q} outside 1..={n}")));
        }
        if q < n {
            tape.note_eigengap(ctx.gap_at(q));
        }
        tape.leading_cols(u, q)
    }

    pub fn fr_map(tape: &mut Tape, w: Var, y: Var) -> Result<Var> {
        tape.matmul(w, y)
    }

    pub fn reorth(tape: &mut Tape, a: Var) -> Result<Var> {
        tape.qr_q(a)
    }

    pub fn proj_map(tape: &mut Tape, y: Var) -> Result<Var> {
        let p = tape.matmul_nt(y, y)?;
        tape.symmetrize(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_basis(rng: &mut ChaCha8Rng, d: usize, q: usize) -> OrthoBasis {
        reorth(&random(rng, d, q)).unwrap()
    }

    #[test]
    fn orth_map_diagonal() {
        let b = orth_map(&Tensor::diag(&[3.0, 2.0, 1.0]), 2).unwrap();
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(b.as_tensor(), &e);
    }

    #[test]
    fn orth_map_rank_one() {
        let v = Tensor::new(&[4, 1], vec![-0.5, 0.5, 0.5, 0.5]).unwrap();
        let a = matmul_nt(&v, &v).unwrap();
        let b = orth_map(&a, 1).unwrap();
        // sign convention makes the first entry positive
        assert!(b.as_tensor().max_abs_diff(&v.scale(-1.0)) < 1e-12);
    }

    #[test]
    fn orth_map_rejects_large_q() {
        assert!(matches!(orth_map(&Tensor::eye(3), 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn fr_map_identity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_basis(&mut rng, 5, 2);
        let id = FRMapWeight::new(Tensor::eye(5)).unwrap();
        assert_eq!(&fr_map(&y, &id).unwrap(), y.as_tensor());
        let two = FRMapWeight::new(Tensor::eye(5).scale(2.0)).unwrap();
        let out = fr_map(&y, &two).unwrap();
        for j in 0..2 {
            let n: f64 = (0..5).map(|i| out.at(i, j).powi(2)).sum::<f64>().sqrt();
            assert!((n - 2.0).abs() < 1e-12);
        }
        let bad = FRMapWeight::new(Tensor::eye(4)).unwrap();
        assert!(matches!(fr_map(&y, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn frmap_rank_assertion() {
        let mut w = Tensor::eye(3);
        w.set(2, 2, 0.0);
        assert!(matches!(FRMapWeight::new(w), Err(Error::Rank(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = FRMapWeight::init(64, 64, &mut rng).unwrap();
        assert!(smallest_singular_value(w.as_tensor()).unwrap() >= MIN_INIT_SINGULAR_VALUE);
        let a = (6.0f64 / 128.0).sqrt();
        assert!(w.as_tensor().max_abs() <= a);
    }

    #[test]
    fn reorth_cases() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let q = reorth(&a).unwrap();
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(q.as_tensor().max_abs_diff(&e) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random_basis(&mut rng, 6, 3);
        assert!(reorth(y.as_tensor()).unwrap().as_tensor().max_abs_diff(y.as_tensor()) < 1e-14);

        let w = FRMapWeight::init(6, 6, &mut rng).unwrap();
        let mapped = reorth(&fr_map(&y, &w).unwrap()).unwrap();
        assert!(orthonormality_error(mapped.as_tensor()).unwrap() <= 1e-12);
        let twice = reorth(mapped.as_tensor()).unwrap();
        assert!(twice.as_tensor().max_abs_diff(mapped.as_tensor()) < 1e-12);
    }

    #[test]
    fn proj_map_cases() {
        let e1 = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(proj_map(&e1).unwrap(), Tensor::diag(&[1.0, 0.0]));
        assert_eq!(proj_map(&Tensor::eye(4)).unwrap(), Tensor::eye(4));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_basis(&mut rng, 64, 4);
        let p = proj_map(y.as_tensor()).unwrap();
        let p2 = matmul(&p, &p).unwrap();
        assert!(p2.max_abs_diff(&p) <= 1e-12);
        assert_eq!(p, p.transpose().unwrap());
        assert!((p.trace().unwrap() - 4.0).abs() <= 1e-12);
    }

    #[test]
    fn orth_map_commutes_with_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = reorth(&random(&mut rng, 8, 8)).unwrap().into_tensor();
        let sigma = [5.0, 4.0, 3.0, 1.0, 0.5, 0.2, 0.1, 0.0];
        let a = matmul_nt(&matmul(&basis, &Tensor::diag(&sigma)).unwrap(), &basis).unwrap();
        let p = proj_map(orth_map(&a, 3).unwrap().as_tensor()).unwrap();
        let comm = matmul(&p, &a).unwrap().zip_map(&matmul(&a, &p).unwrap(), |x, y| x - y).unwrap();
        assert!(comm.max_abs() < 1e-10);
    }
}
