use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Eigendecomposition `A = U diag(sigma) Uᵀ` of a symmetric matrix.
///
/// Eigenvalues are sorted in non-increasing order. Each eigenvector is
/// sign-normalized so that its first entry with magnitude above `1e-12` is
/// positive, which makes the result a deterministic function of the input.
#[derive(Clone, Debug)]
pub struct EigResult {
    pub u: Tensor,
    pub sigma: Vec<f64>,
}

impl EigResult {
    pub fn n(&self) -> usize {
        self.sigma.len()
    }

    /// Gap `sigma[q-1] - sigma[q]` between the retained and discarded spectrum;
    /// infinite when nothing is discarded.
    pub fn gap_at(&self, q: usize) -> f64 {
        if q >= self.sigma.len() {
            f64::INFINITY
        } else {
            self.sigma[q - 1] - self.sigma[q]
        }
    }
}

const MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi eigensolver. The input is symmetrized as `(A + Aᵀ)/2` first.
pub fn sym_eig(a: &Tensor) -> Result<EigResult> {
    let (n, c) = a.dims2()?;
    if n != c {
        return Err(Error::dim(format!("sym_eig needs a square matrix, got {n}×{c}")));
    }
    a.ensure_finite("sym_eig input")?;

    let mut m = super::symmetrize(a)?.into_data();
    let mut v = Tensor::eye(n).into_data();
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                rotate(&mut m, n, p, q, cs, sn);
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Decomposition(format!(
            "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep their original column order
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));

    let mut u = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        let lead = (0..n)
            .map(|k| v[k * n + src])
            .find(|x| x.abs() > 1e-12)
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            u[k * n + col] = sign * v[k * n + src];
        }
    }
    let sigma = order.iter().map(|&i| diag[i]).collect();
    Ok(EigResult {
        u: Tensor::new(&[n, n], u)?,
        sigma,
    })
}

/// `m ← Jᵀ m J` for the plane rotation acting on coordinates `p`, `q`.
fn rotate(m: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let mkp = m[k * n + p];
        let mkq = m[k * n + q];
        m[k * n + p] = c * mkp - s * mkq;
        m[k * n + q] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[p * n + k];
        let mqk = m[q * n + k];
        m[p * n + k] = c * mpk - s * mqk;
        m[q * n + k] = s * mpk + c * mqk;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, matmul_nt, matmul_tn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(e: &EigResult) -> Tensor {
        let us = matmul(&e.u, &Tensor::diag(&e.sigma)).unwrap();
        matmul_nt(&us, &e.u).unwrap()
    }

    #[test]
    fn diagonal_input() {
        let e = sym_eig(&Tensor::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(e.sigma, vec![3.0, 2.0, 1.0]);
        assert_eq!(e.u, Tensor::eye(3));
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let e = sym_eig(&Tensor::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(e.sigma, vec![3.0, 2.0, 1.0]);
        assert_eq!(e.u.at(1, 0), 1.0);
        assert_eq!(e.u.at(2, 1), 1.0);
        assert_eq!(e.u.at(0, 2), 1.0);
    }

    #[test]
    fn symmetric_swap() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!((e.sigma[0] - 1.0).abs() < 1e-14 && (e.sigma[1] + 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.u.at(0, 0) - h).abs() < 1e-14 && (e.u.at(1, 0) - h).abs() < 1e-14);
        assert!((e.u.at(0, 1) - h).abs() < 1e-14 && (e.u.at(1, 1) + h).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix_gives_identity_basis() {
        let e = sym_eig(&Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(e.u, Tensor::eye(4));
        assert!(e.sigma.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 5, 8, 33] {
            let b = Tensor::new(&[n, n], (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let a = crate::linalg::symmetrize(&b).unwrap();
            let e = sym_eig(&a).unwrap();
            let rel = reconstruct(&e).zip_map(&a, |x, y| x - y).unwrap().frobenius() / a.frobenius();
            assert!(rel <= 1e-12, "n={n} rel={rel}");
            let utu = matmul_tn(&e.u, &e.u).unwrap();
            assert!(utu.max_abs_diff(&Tensor::eye(n)) <= 1e-10);
            assert!(e.sigma.windows(2).all(|w| w[0] >= w[1]));
            for j in 0..n {
                let lead = (0..n).map(|k| e.u.at(k, j)).find(|x| x.abs() > 1e-12).unwrap();
                assert!(lead > 0.0);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = Tensor::from_rows(&[
            vec![2.0, 0.3, -0.1],
            vec![0.3, 1.0, 0.4],
            vec![-0.1, 0.4, -0.5],
        ])
        .unwrap();
        let e1 = sym_eig(&a).unwrap();
        let e2 = sym_eig(&a).unwrap();
        assert_eq!(e1.u, e2.u);
        assert_eq!(e1.sigma, e2.sigma);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Tensor::eye(3);
        a.set(1, 1, f64::NAN);
        assert!(matches!(sym_eig(&a), Err(Error::Numeric(_))));
    }
}
