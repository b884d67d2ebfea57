//! Central finite-difference comparison against reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

use super::tape::{Tape, Var};

/// Step for checks on a single layer.
pub const LAYER_STEP: f64 = 1e-5;
/// Step for checks through the whole network.
pub const NETWORK_STEP: f64 = 1e-4;

/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Elements of abs/rectifier/Sobel ops whose branch differs between the
    /// evaluation point and the two shifted evaluations.
    pub kinks: usize,
}

/// How the shifted evaluations treat piecewise-linear ops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Differencing {
    /// Plain central differences; kink crossings are only counted.
    #[default]
    Plain,
    /// Both shifted evaluations reuse the branches taken at the evaluation
    /// point, so the difference sees the same smooth piece as the backward
    /// pass. Needed when a step is large enough to cross kinks.
    FrozenBranches,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self, tol: f64) -> Vec<&Probe> {
        self.probes.iter().filter(|p| !(p.rel_error <= tol)).collect()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.failures(tol).is_empty()
    }
}

/// Picks `(tensor, entry)` pairs: a tensor uniformly, then an entry uniformly, so
/// small tensors are not drowned out by large ones. Probes everything when
/// `n_probes` covers all scalars.
pub fn select_probes(params: &ParamStore, n_probes: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = params.total_scalars();
    if n_probes >= total {
        return params
            .iter()
            .enumerate()
            .flat_map(|(t, (_, v))| (0..v.len()).map(move |i| (t, i)))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    while chosen.len() < n_probes {
        let t = rng.gen_range(0..params.len());
        let i = rng.gen_range(0..params.value_at(t).len());
        chosen.insert((t, i));
    }
    chosen.into_iter().collect()
}

/// Compares reverse-mode gradients of the scalar `f` with central differences
/// at `n_probes` parameter entries.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore,
    n_probes: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    grad_check_on(Tape::new, f, params, n_probes, step, seed, Differencing::Plain)
}

/// As [`grad_check`], with a caller-supplied tape constructor for the
/// analytic pass and a choice of differencing.
pub fn grad_check_on<F, T>(
    new_tape: T,
    f: F,
    params: &ParamStore,
    n_probes: usize,
    step: f64,
    seed: u64,
    differencing: Differencing,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
    T: Fn() -> Tape,
{
    let mut tape = new_tape().recording_branches();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let pattern = tape.branch_pattern().cloned().unwrap_or_default();
    let enforce = differencing == Differencing::FrozenBranches;

    let eval = |store: &ParamStore| -> Result<(f64, usize)> {
        let mut t = Tape::new().replaying_branches(pattern.clone(), enforce);
        let b = store.bind(&mut t);
        let v = f(&mut t, &b)?;
        if t.branch_diverged() {
            return Err(Error::Numeric("shifted evaluation recorded a different graph".into()));
        }
        Ok((t.value(v).item(), t.branch_flips()))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (t, i) in select_probes(params, n_probes, seed) {
        let name = params.name_at(t).to_string();
        let analytic = grads.get(bound.var_at(t)).map_or(0.0, |g| g.data()[i]);
        if !analytic.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}[{i}]")));
        }
        let orig = params.value_at(t).data()[i];
        work.value_at_mut(t).data_mut()[i] = orig + step;
        let (fp, kp) = eval(&work)?;
        work.value_at_mut(t).data_mut()[i] = orig - step;
        let (fm, km) = eval(&work)?;
        work.value_at_mut(t).data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        report.probes.push(Probe {
            name,
            index: i,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
            kinks: kp + km,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn near_kinks() -> ParamStore {
        let mut store = ParamStore::new();
        // first two entries sit closer to a kink than the step
        store.insert("x", Tensor::new(&[1, 4], vec![3e-5, -2e-5, 0.5, -0.7]).unwrap()).unwrap();
        store
    }

    fn piecewise(tape: &mut Tape, b: &Bound) -> Result<Var> {
        let x = b.get("x")?;
        let a = tape.abs(x);
        let r = tape.leaky_relu(x, 0.2);
        let s = tape.add(a, r)?;
        Ok(tape.sum(s))
    }

    #[test]
    fn plain_differences_cross_kinks() {
        let r = grad_check_on(Tape::new, piecewise, &near_kinks(), 4, 1e-4, 0, Differencing::Plain).unwrap();
        assert_eq!(r.probes.iter().map(|p| p.kinks).collect::<Vec<_>>(), vec![2, 2, 0, 0]);
        assert!(!r.passes(1e-2));
        assert!(r.probes[2].rel_error < 1e-10 && r.probes[3].rel_error < 1e-10);
    }

    #[test]
    fn frozen_branches_follow_the_local_piece() {
        let r = grad_check_on(Tape::new, piecewise, &near_kinks(), 4, 1e-4, 0, Differencing::FrozenBranches)
            .unwrap();
        assert!(r.max_rel_error() < 1e-10, "{r:?}");
        assert_eq!(r.probes[0].analytic, 2.0);
        assert_eq!(r.probes[1].analytic, -0.8);
    }
}
