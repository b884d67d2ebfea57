//! Finite-difference self-check of the whole backward pass: isolated
//! Grassmann layers at a tight tolerance, then the full loss through the
//! network on a small pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::gradcheck::{LAYER_STEP, NETWORK_STEP};
use crate::diff::{grad_check_on, Differencing, EigKernelOrientation, GradCheckReport, Tape, Var};
use crate::error::Result;
use crate::linalg::{matmul, matmul_nt, thin_qr};
use crate::loss::{l_total_on, LossWeights, SurrogateExtractor};
use crate::manifold::taped;
use crate::network::{fuse_forward_on, init_params, NetworkConfig};
use crate::params::{Bound, ParamStore};
use crate::synth::synthetic_pair;
use crate::tensor::Tensor;

pub const LAYER_TOL: f64 = 1e-5;
pub const NETWORK_TOL: f64 = 1e-2;
pub const NETWORK_SIDE: usize = 16;
pub const MIN_NETWORK_PROBES: usize = 100;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tol)
    }
}

#[derive(Clone, Debug)]
pub struct SelfCheck {
    pub checks: Vec<CheckResult>,
}

impl SelfCheck {
    pub fn passes(&self) -> bool {
        self.checks.iter().all(CheckResult::passes)
    }

    pub fn probes(&self) -> usize {
        self.checks.iter().map(|c| c.report.probes.len()).sum()
    }

    /// One summary line per check, plus one line per failing probe.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out += &format!(
                "{}: probes={} max_rel_error={:.3e} tol={:.0e} kinks_crossed={} {}\n",
                c.name,
                c.report.probes.len(),
                c.report.max_rel_error(),
                c.tol,
                c.report.probes.iter().map(|p| p.kinks).sum::<usize>(),
                if c.passes() { "ok" } else { "FAIL" }
            );
            for p in c.report.failures(c.tol) {
                out += &format!(
                    "  {}[{}]: analytic={:.6e} numeric={:.6e} rel={:.3e}\n",
                    p.name, p.index, p.analytic, p.numeric, p.rel_error
                );
            }
        }
        out
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Symmetric matrix with prescribed, well separated eigenvalues.
pub fn separated_symmetric(rng: &mut ChaCha8Rng, eigenvalues: &[f64]) -> Result<Tensor> {
    let n = eigenvalues.len();
    let q = thin_qr(&random(rng, n, n))?.q;
    let qd = matmul(&q, &Tensor::diag(eigenvalues))?;
    matmul_nt(&qd, &q)
}

fn weighted_sum(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// Runs every check. `orientation` selects the eigen-backward kernel for the
/// analytic pass; anything but the default is a deliberately broken backward.
pub fn run(seed: u64, network_probes: usize, orientation: EigKernelOrientation) -> Result<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let new_tape = || Tape::with_eig_orientation(orientation);
    let mut checks = Vec::new();

    // eigenvectors of an 8×8 input with gaps of 0.5
    let eig: Vec<f64> = (0..8).map(|k| 4.0 - 0.5 * k as f64).collect();
    let mut eig_store = ParamStore::new();
    eig_store.insert("a", separated_symmetric(&mut rng, &eig)?)?;
    let w_u = random(&mut rng, 8, 8);
    let report = grad_check_on(
        new_tape,
        |tape: &mut Tape, b: &Bound| {
            let a = tape.symmetrize(b.get("a")?)?;
            let (u, _) = tape.eig_vectors(a)?;
            weighted_sum(tape, u, &w_u)
        },
        &eig_store,
        usize::MAX,
        LAYER_STEP,
        seed,
        Differencing::Plain,
    )?;
    checks.push(CheckResult { name: "eig_vectors", tol: LAYER_TOL, report });

    // OrthMap followed by the projector, q = 3
    let w_p = random(&mut rng, 8, 8);
    let report = grad_check_on(
        new_tape,
        |tape: &mut Tape, b: &Bound| {
            let a = tape.symmetrize(b.get("a")?)?;
            let y = taped::orth_map(tape, a, 3)?;
            let p = taped::proj_map(tape, y)?;
            weighted_sum(tape, p, &w_p)
        },
        &eig_store,
        usize::MAX,
        LAYER_STEP,
        seed,
        Differencing::Plain,
    )?;
    checks.push(CheckResult { name: "orth_map", tol: LAYER_TOL, report });

    // ReOrth on a 6×3 full-rank input
    let mut qr_store = ParamStore::new();
    qr_store.insert("b", random(&mut rng, 6, 3))?;
    let w_q = random(&mut rng, 6, 3);
    let report = grad_check_on(
        new_tape,
        |tape: &mut Tape, b: &Bound| {
            let q = taped::reorth(tape, b.get("b")?)?;
            weighted_sum(tape, q, &w_q)
        },
        &qr_store,
        usize::MAX,
        LAYER_STEP,
        seed,
        Differencing::Plain,
    )?;
    checks.push(CheckResult { name: "reorth", tol: LAYER_TOL, report });

    // full loss through the default network on a small synthetic pair
    let net = NetworkConfig::default();
    let params = init_params(&net, seed)?;
    let pair = synthetic_pair(NETWORK_SIDE, seed)?.pair;
    let ext = SurrogateExtractor::default();
    let weights = LossWeights::default();
    let report = grad_check_on(
        new_tape,
        |tape: &mut Tape, b: &Bound| {
            let ir = tape.constant(pair.ir.clone());
            let vi = tape.constant(pair.vi.clone());
            let f = fuse_forward_on(tape, b, &net, ir, vi)?;
            Ok(l_total_on(tape, f, &pair.ir, &pair.vi, &weights, &ext)?.total)
        },
        &params,
        network_probes.max(MIN_NETWORK_PROBES),
        NETWORK_STEP,
        seed,
        Differencing::FrozenBranches,
    )?;
    checks.push(CheckResult { name: "network", tol: NETWORK_TOL, report });

    Ok(SelfCheck { checks })
}
