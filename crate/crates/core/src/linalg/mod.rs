//! Dense kernels shared by every layer: products, symmetric eigendecomposition,
//! thin QR, and the 3×3 image filters.

mod conv;
mod eig;
mod qr;

pub use conv::{
    avg_pool2, avg_pool2_backward, conv2d, conv2d_backward, crop_border, crop_border_backward,
    gaussian_window, pad_replicate, pad_replicate_backward, sobel_mag, sobel_mag_backward, sobel_responses,
    valid_filter, valid_filter_backward, ConvGrads,
};
pub use eig::{sym_eig, EigResult};
pub use qr::{solve_upper_right_transpose, thin_qr, QRResult};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `op(a) · op(b)` where `op` optionally transposes a matrix.
pub fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k, rsa, csa) = if trans_a { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (kb, n, rsb, csb) = if trans_b { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    if k != kb {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?}{} · {:?}{}",
            a.shape(),
            if trans_a { "ᵀ" } else { "" },
            b.shape(),
            if trans_b { "ᵀ" } else { "" },
        )));
    }
    let mut out = vec![0.0; m * n];
    // SAFETY: the pointers cover m×k, k×n and m×n elements with the strides given.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa as isize,
            csa as isize,
            b.data().as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(&[m, n], out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, false)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, true, b, false)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, true)
}

/// `(a + aᵀ) / 2`
pub fn symmetrize(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    if r != c {
        return Err(Error::dim(format!("expected a square matrix, got {r}×{c}")));
    }
    let mut out = a.clone();
    for i in 0..r {
        for j in 0..i {
            let v = 0.5 * (a.at(i, j) + a.at(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}
