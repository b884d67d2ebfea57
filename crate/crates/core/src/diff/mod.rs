//! Reverse-mode differentiation over whole-matrix operations.

pub mod gradcheck;
pub mod structured;
mod tape;

pub use gradcheck::{grad_check, grad_check_on, relative_error, Differencing, GradCheckReport, Probe};
pub use structured::{backward_eig, backward_qr, EigBackward, EigKernelOrientation, KernelMatrix};
pub use tape::{BranchPattern, Diagnostics, Gradients, Tape, Var};
