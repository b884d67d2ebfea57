//! Closed-form backward rules for the symmetric eigendecomposition and the thin QR
//! factorization.

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, solve_upper_right_transpose, EigResult, QRResult};
use crate::tensor::Tensor;

/// Eigengaps smaller than this are clamped when forming the kernel matrix.
pub const EIGENGAP_FLOOR: f64 = 1e-6;

/// `K̃_ij = 1/(σ_i − σ_j)` off the diagonal, zero on it.
///
/// Denominators are clamped to `sign(σ_i−σ_j)·max(|σ_i−σ_j|, 1e-6)`; the number of
/// clamped (unordered) pairs is kept so callers can surface it.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub ktilde: Tensor,
    pub clamped_pairs: usize,
}

impl KernelMatrix {
    pub fn from_eigenvalues(sigma: &[f64]) -> Self {
        let n = sigma.len();
        let mut k = Tensor::zeros(&[n, n]);
        let mut clamped = 0;
        for i in 0..n {
            for j in i + 1..n {
                let diff = sigma[i] - sigma[j];
                let denom = if diff.abs() < EIGENGAP_FLOOR {
                    clamped += 1;
                    // sorted descending, so an exact tie counts as positive
                    if diff < 0.0 { -EIGENGAP_FLOOR } else { EIGENGAP_FLOOR }
                } else {
                    diff
                };
                k.set(i, j, 1.0 / denom);
                k.set(j, i, -1.0 / denom);
            }
        }
        KernelMatrix {
            ktilde: k,
            clamped_pairs: clamped,
        }
    }
}

/// Which orientation of the kernel matrix multiplies `Uᵀ ∂L/∂U`.
///
/// `Transposed` is the correct rule: `(Uᵀ dU)_ij = (Uᵀ dY U)_ij / (σ_j − σ_i)`.
/// `Untransposed` applies `K̃` as-is; it is wrong in sign on the antisymmetric
/// part and exists only as a negative control for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EigKernelOrientation {
    #[default]
    Transposed,
    Untransposed,
}

#[derive(Clone, Debug)]
pub struct EigBackward {
    pub grad: Tensor,
    pub clamped_pairs: usize,
}

/// `∂L/∂Y = U [ (K̃ᵀ ∘ (Uᵀ ∂L/∂U)) + diag(∂L/∂σ) ] Uᵀ`, symmetrized.
pub fn backward_eig(ctx: &EigResult, grad_u: &Tensor, grad_sigma: &[f64]) -> Result<EigBackward> {
    backward_eig_with(ctx, grad_u, grad_sigma, EigKernelOrientation::Transposed)
}

pub fn backward_eig_with(
    ctx: &EigResult,
    grad_u: &Tensor,
    grad_sigma: &[f64],
    orientation: EigKernelOrientation,
) -> Result<EigBackward> {
    let n = ctx.n();
    if grad_u.dims2()? != (n, n) || grad_sigma.len() != n {
        return Err(Error::dim(format!(
            "eig backward: U is {n}×{n}, got grad_U {:?} and {} eigenvalue grads",
            grad_u.shape(),
            grad_sigma.len()
        )));
    }
    let kernel = KernelMatrix::from_eigenvalues(&ctx.sigma);
    let mut inner = matmul_tn(&ctx.u, grad_u)?;
    for i in 0..n {
        for j in 0..n {
            let k = match orientation {
                EigKernelOrientation::Transposed => kernel.ktilde.at(j, i),
                EigKernelOrientation::Untransposed => kernel.ktilde.at(i, j),
            };
            let v = if i == j { grad_sigma[i] } else { k * inner.at(i, j) };
            inner.set(i, j, v);
        }
    }
    let g = matmul_nt(&matmul(&ctx.u, &inner)?, &ctx.u)?;
    let grad = crate::linalg::symmetrize(&g)?;
    grad.ensure_finite("eig backward")?;
    Ok(EigBackward {
        grad,
        clamped_pairs: kernel.clamped_pairs,
    })
}

/// Ratio `max|R_ii| / min|R_ii|` used as a cheap condition estimate.
pub fn r_condition(r: &Tensor) -> f64 {
    let q = r.rows();
    let diag: Vec<f64> = (0..q).map(|i| r.at(i, i).abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

/// Thin-QR backward:
/// `M = R ∂Rᵀ − ∂Qᵀ Q`, `∂A = (∂Q + Q·copyltu(M)) R⁻ᵀ` where `copyltu`
/// mirrors the lower triangle of `M` onto the upper one.
pub fn backward_qr(ctx: &QRResult, grad_q: &Tensor, grad_r: &Tensor) -> Result<Tensor> {
    let (d, q) = ctx.q.dims2()?;
    if grad_q.dims2()? != (d, q) || grad_r.dims2()? != (q, q) {
        return Err(Error::dim(format!(
            "qr backward: Q is {d}×{q}, got grad_Q {:?} and grad_R {:?}",
            grad_q.shape(),
            grad_r.shape()
        )));
    }
    let cond = r_condition(&ctx.r);
    if !(cond <= 1e8) {
        return Err(Error::Numeric(format!("R is ill-conditioned (estimate {cond:.3e})")));
    }
    let m = matmul_nt(&ctx.r, grad_r)?.zip_map(&matmul_tn(grad_q, &ctx.q)?, |a, b| a - b)?;
    let mut sym = m.clone();
    for i in 0..q {
        for j in i + 1..q {
            sym.set(i, j, m.at(j, i));
        }
    }
    let mut b = matmul(&ctx.q, &sym)?;
    b.add_assign(grad_q);
    let grad = solve_upper_right_transpose(&b, &ctx.r)?;
    grad.ensure_finite("qr backward")?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sym_eig, thin_qr};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Symmetric matrix with prescribed, well separated spectrum.
    fn spaced_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let basis = thin_qr(&random(rng, n, n)).unwrap().q;
        let sigma: Vec<f64> = (0..n).map(|i| 2.0 - 0.3 * i as f64 + rng.gen_range(0.0..0.1)).collect();
        matmul_nt(&matmul(&basis, &Tensor::diag(&sigma)).unwrap(), &basis).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn kernel_matrix_antisymmetric() {
        let k = KernelMatrix::from_eigenvalues(&[3.0, 1.0, 0.5, 0.5]);
        for i in 0..4 {
            assert_eq!(k.ktilde.at(i, i), 0.0);
            for j in 0..4 {
                assert_eq!(k.ktilde.at(i, j), -k.ktilde.at(j, i));
            }
        }
        assert_eq!(k.ktilde.at(0, 1), 0.5);
        assert_eq!(k.clamped_pairs, 1);
        assert_eq!(k.ktilde.at(2, 3), 1e6);
    }

    #[test]
    fn eigenvalue_gradient_of_diagonal_is_eigenprojector() {
        let e = sym_eig(&Tensor::diag(&[3.0, 2.0, 1.0])).unwrap();
        let g = backward_eig(&e, &Tensor::zeros(&[3, 3]), &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.grad, Tensor::diag(&[1.0, 0.0, 0.0]));
        let z = backward_eig(&e, &Tensor::zeros(&[3, 3]), &[0.0; 3]).unwrap();
        assert!(z.grad.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn eig_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 8;
        let a = spaced_symmetric(&mut rng, n);
        let cu = random(&mut rng, n, n);
        let cs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |m: &Tensor| {
            let e = sym_eig(m).unwrap();
            dot(&e.u, &cu) + e.sigma.iter().zip(&cs).map(|(a, b)| a * b).sum::<f64>()
        };
        let e = sym_eig(&a).unwrap();
        let g = backward_eig(&e, &cu, &cs).unwrap();
        assert_eq!(g.clamped_pairs, 0);
        assert_eq!(g.grad, g.grad.transpose().unwrap());
        let h = 1e-5;
        for i in 0..n {
            for j in 0..=i {
                // perturb the symmetric pair together
                let mut ap = a.clone();
                let mut am = a.clone();
                for (r, c) in [(i, j), (j, i)] {
                    ap.set(r, c, a.at(r, c) + h);
                    am.set(r, c, a.at(r, c) - h);
                }
                let fd = (f(&ap) - f(&am)) / (2.0 * h);
                let ad = if i == j { g.grad.at(i, i) } else { 2.0 * g.grad.at(i, j) };
                assert!(rel_err(ad, fd) <= 1e-5, "({i},{j}) ad={ad} fd={fd}");
            }
        }
    }

    #[test]
    fn untransposed_kernel_flips_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 5;
        let a = spaced_symmetric(&mut rng, n);
        let cu = random(&mut rng, n, n);
        let e = sym_eig(&a).unwrap();
        let good = backward_eig(&e, &cu, &[0.0; 5]).unwrap().grad;
        let bad = backward_eig_with(&e, &cu, &[0.0; 5], EigKernelOrientation::Untransposed)
            .unwrap()
            .grad;
        assert!((good.zip_map(&bad, |x, y| x + y).unwrap()).max_abs() < 1e-12);
    }

    #[test]
    fn sign_flip_invariance() {
        // f(U) = Σ_j c_j (u_jᵀ B u_j) is sign invariant, so flipping a column of U
        // (and the matching cotangent column) leaves the gradient unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 6;
        let a = spaced_symmetric(&mut rng, n);
        let bm = crate::linalg::symmetrize(&random(&mut rng, n, n)).unwrap();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cot = |u: &Tensor| {
            let bu = matmul(&bm, u).unwrap();
            let mut g = bu.clone();
            for i in 0..n {
                for j in 0..n {
                    g.set(i, j, 2.0 * c[j] * bu.at(i, j));
                }
            }
            g
        };
        let e = sym_eig(&a).unwrap();
        let g1 = backward_eig(&e, &cot(&e.u), &[0.0; 6]).unwrap().grad;
        let mut flipped = e.clone();
        for i in 0..n {
            for j in [1, 4] {
                flipped.u.set(i, j, -e.u.at(i, j));
            }
        }
        let g2 = backward_eig(&flipped, &cot(&flipped.u), &[0.0; 6]).unwrap().grad;
        assert!(g1.max_abs_diff(&g2) <= 1e-12);
    }

    #[test]
    fn qr_backward_zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let f = thin_qr(&random(&mut rng, 6, 3)).unwrap();
        let g = backward_qr(&f, &Tensor::zeros(&[6, 3]), &Tensor::zeros(&[3, 3])).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    fn qr_fd_check(a: &Tensor, cq: &Tensor, cr: &Tensor) {
        let f = |m: &Tensor| {
            let qr = thin_qr(m).unwrap();
            dot(&qr.q, cq) + dot(&qr.r, cr)
        };
        let g = backward_qr(&thin_qr(a).unwrap(), cq, cr).unwrap();
        let h = 1e-5;
        for idx in 0..a.len() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data_mut()[idx] += h;
            am.data_mut()[idx] -= h;
            let fd = (f(&ap) - f(&am)) / (2.0 * h);
            let ad = g.data()[idx];
            assert!(rel_err(ad, fd) <= 1e-5, "entry {idx}: ad={ad} fd={fd}");
        }
    }

    #[test]
    fn qr_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let a = random(&mut rng, 6, 3);
        let cq = random(&mut rng, 6, 3);
        let mut cr = random(&mut rng, 3, 3);
        for i in 0..3 {
            for j in 0..i {
                cr.set(i, j, 0.0);
            }
        }
        qr_fd_check(&a, &cq, &cr);
    }

    #[test]
    fn qr_backward_on_orthonormal_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let y = thin_qr(&random(&mut rng, 6, 3)).unwrap().q;
        let cq = random(&mut rng, 6, 3);
        qr_fd_check(&y, &cq, &Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn qr_backward_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let a = random(&mut rng, 4, 4);
        let cq = random(&mut rng, 4, 4);
        qr_fd_check(&a, &cq, &Tensor::zeros(&[4, 4]));
    }
}
