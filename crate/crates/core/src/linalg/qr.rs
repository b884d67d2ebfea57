use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thin factorization `A = Q R` with `Q` d×q orthonormal and `R` q×q upper
/// triangular with a strictly positive diagonal.
#[derive(Clone, Debug)]
pub struct QRResult {
    pub q: Tensor,
    pub r: Tensor,
}

/// Householder thin QR, sign-normalized so that `R_ii > 0`.
pub fn thin_qr(a: &Tensor) -> Result<QRResult> {
    let (d, q) = a.dims2()?;
    if d < q {
        return Err(Error::dim(format!("thin_qr needs rows ≥ cols, got {d}×{q}")));
    }
    a.ensure_finite("thin_qr input")?;
    let norm = a.frobenius();

    let mut w = a.data().to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(q);
    for k in 0..q {
        let mut v: Vec<f64> = (k..d).map(|i| w[i * q + k]).collect();
        let xnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if xnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -xnorm } else { xnorm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= vnorm;
        }
        for j in k..q {
            let dot: f64 = (k..d).map(|i| v[i - k] * w[i * q + j]).sum();
            for i in k..d {
                w[i * q + j] -= 2.0 * v[i - k] * dot;
            }
        }
        reflectors.push(v);
    }

    let mut r = vec![0.0; q * q];
    for i in 0..q {
        for j in i..q {
            r[i * q + j] = w[i * q + j];
        }
    }

    let mut qm = vec![0.0; d * q];
    for i in 0..q {
        qm[i * q + i] = 1.0;
    }
    for k in (0..q).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..q {
            let dot: f64 = (k..d).map(|i| v[i - k] * qm[i * q + j]).sum();
            for i in k..d {
                qm[i * q + j] -= 2.0 * v[i - k] * dot;
            }
        }
    }

    for k in 0..q {
        let rkk = r[k * q + k];
        if rkk.abs() < 1e-10 * norm || rkk == 0.0 {
            return Err(Error::Rank(format!(
                "|R[{k},{k}]| = {:.3e} below 1e-10·‖A‖ = {:.3e}",
                rkk.abs(),
                1e-10 * norm
            )));
        }
        if rkk < 0.0 {
            for j in k..q {
                r[k * q + j] = -r[k * q + j];
            }
            for i in 0..d {
                qm[i * q + k] = -qm[i * q + k];
            }
        }
    }

    Ok(QRResult {
        q: Tensor::new(&[d, q], qm)?,
        r: Tensor::new(&[q, q], r)?,
    })
}

/// Solves `X Rᵀ = B` for `X`, with `R` upper triangular (q×q) and `B` n×q.
pub fn solve_upper_right_transpose(b: &Tensor, r: &Tensor) -> Result<Tensor> {
    let (n, q) = b.dims2()?;
    if r.dims2()? != (q, q) {
        return Err(Error::dim(format!(
            "triangular solve: B is {n}×{q} but R is {:?}",
            r.shape()
        )));
    }
    let mut x = vec![0.0; n * q];
    for row in 0..n {
        // Σ_{k≥j} R_jk x_k = b_j, back-substituted from the last column
        for j in (0..q).rev() {
            let mut s = b.at(row, j);
            for k in j + 1..q {
                s -= r.at(j, k) * x[row * q + k];
            }
            x[row * q + j] = s / r.at(j, j);
        }
    }
    Tensor::new(&[n, q], x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, matmul_nt, matmul_tn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check(a: &Tensor, f: &QRResult) {
        let q = a.cols();
        let qtq = matmul_tn(&f.q, &f.q).unwrap();
        assert!(qtq.max_abs_diff(&Tensor::eye(q)) <= 1e-12);
        for i in 0..q {
            assert!(f.r.at(i, i) > 0.0);
            for j in 0..i {
                assert_eq!(f.r.at(i, j), 0.0);
            }
        }
        let rec = matmul(&f.q, &f.r).unwrap();
        let rel = rec.zip_map(a, |x, y| x - y).unwrap().frobenius() / a.frobenius();
        assert!(rel <= 1e-12, "rel={rel}");
    }

    #[test]
    fn scaled_axes() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let f = thin_qr(&a).unwrap();
        let expect_q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(f.q.max_abs_diff(&expect_q) <= 1e-15);
        assert!(f.r.max_abs_diff(&Tensor::diag(&[2.0, 3.0])) <= 1e-15);
    }

    #[test]
    fn orthonormal_input_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::new(&[6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = thin_qr(&a).unwrap().q;
        let f = thin_qr(&y).unwrap();
        assert!(f.q.max_abs_diff(&y) <= 1e-14);
        assert!(f.r.max_abs_diff(&Tensor::eye(3)) <= 1e-14);
    }

    #[test]
    fn random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (d, q) in [(6, 3), (8, 8), (64, 5), (3, 1)] {
            let a = Tensor::new(&[d, q], (0..d * q).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            check(&a, &thin_qr(&a).unwrap());
        }
    }

    #[test]
    fn rank_deficient() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(thin_qr(&a), Err(Error::Rank(_))));
        let z = Tensor::zeros(&[3, 2]);
        assert!(matches!(thin_qr(&z), Err(Error::Rank(_))));
    }

    #[test]
    fn wide_input_rejected() {
        assert!(matches!(thin_qr(&Tensor::zeros(&[2, 3])), Err(Error::Dimension(_))));
    }

    #[test]
    fn triangular_solve() {
        let r = Tensor::from_rows(&[vec![2.0, 1.0, -1.0], vec![0.0, 3.0, 0.5], vec![0.0, 0.0, 1.5]])
            .unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]]).unwrap();
        let x = solve_upper_right_transpose(&b, &r).unwrap();
        assert!(matmul_nt(&x, &r).unwrap().max_abs_diff(&b) <= 1e-14);
    }
}
