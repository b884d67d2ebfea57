//! Single-pair Adam training with per-step loss telemetry.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::RunConfig;
use crate::io::pgm::load_pgm;
use crate::loss::{l_total_on, LossBreakdown, LossWeights, SurrogateExtractor};
use crate::network::{fuse_forward_on, init_params, ImagePair, NetworkConfig};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Losses kept in the ring buffer of a [`TrainState`].
pub const HISTORY: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub loss: LossBreakdown,
    pub min_eigengap: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,loss_total,loss_int,loss_grad,loss_cov,loss_ssim,min_eigengap";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, l.total, l.int, l.grad, l.cov, l.ssim, self.min_eigengap
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    pub step: usize,
    pub history: VecDeque<f64>,
}

pub struct Trainer {
    pub net: NetworkConfig,
    pub weights: LossWeights,
    pub extractor: SurrogateExtractor,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.network();
        let params = init_params(&net, cfg.seed)?;
        let adam = Adam::new(cfg.adam(), &params)?;
        Ok(Trainer {
            net,
            weights: cfg.loss_weights(),
            extractor: SurrogateExtractor::new(cfg.extractor_seed),
            state: TrainState { params, adam, step: 0, history: VecDeque::with_capacity(HISTORY) },
        })
    }

    /// One forward/backward/update on a single pair.
    pub fn step(&mut self, pair: &ImagePair) -> Result<StepRecord> {
        let st = &mut self.state;
        let mut tape = Tape::new();
        let bound = st.params.bind(&mut tape);
        let (ir, vi) = (tape.constant(pair.ir.clone()), tape.constant(pair.vi.clone()));
        let f = fuse_forward_on(&mut tape, &bound, &self.net, ir, vi)?;
        let lv = l_total_on(&mut tape, f, &pair.ir, &pair.vi, &self.weights, &self.extractor)?;
        let loss = lv.values(&tape);
        let step = st.step + 1;
        if ![loss.total, loss.int, loss.grad, loss.cov, loss.ssim].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let grads = tape.backward(lv.total)?;
        let list: Vec<Option<&Tensor>> = bound.vars().iter().map(|&v| grads.get(v)).collect();
        if let Some(i) = list.iter().position(|g| g.is_some_and(|g| !g.is_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {} at step {step}",
                st.params.name_at(i)
            )));
        }
        let min_eigengap = tape.diagnostics().min_eigengap;
        drop(bound);
        st.adam.step(&mut st.params, &list)?;
        st.step = step;
        if st.history.len() == HISTORY {
            st.history.pop_front();
        }
        st.history.push_back(loss.total);
        Ok(StepRecord { step, loss, min_eigengap })
    }

    pub fn checkpoint(&self, extractor_seed: u64) -> Checkpoint {
        Checkpoint { net: self.net.clone(), extractor_seed, params: self.state.params.clone() }
    }
}

/// Square crop of `size` at a random offset; pairs already at `size` pass through.
pub fn random_crop<R: Rng>(pair: &ImagePair, size: usize, rng: &mut R) -> Result<ImagePair> {
    let (h, w) = pair.dims();
    if h < size || w < size {
        return Err(Error::Data(format!("{h}×{w} pair is smaller than the {size}×{size} crop")));
    }
    if h == size && w == size {
        return Ok(pair.clone());
    }
    let (y0, x0) = (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size));
    let crop = |t: &Tensor| {
        let data = (0..size)
            .flat_map(|i| t.data()[(y0 + i) * w + x0..][..size].iter().copied())
            .collect();
        Tensor::new(&[size, size], data)
    };
    ImagePair::new(crop(&pair.ir)?, crop(&pair.vi)?)
}

/// Runs `cfg.steps` steps round-robin over `pairs`, reporting every step.
pub fn train(
    cfg: &RunConfig,
    pairs: &[ImagePair],
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Trainer> {
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let mut trainer = Trainer::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    for k in 0..cfg.steps {
        let pair = random_crop(&pairs[k % pairs.len()], cfg.image_size, &mut rng)?;
        let rec = trainer.step(&pair)?;
        on_step(&rec)?;
    }
    Ok(trainer)
}

/// Mean of the `window` values ending at 1-based `step`.
pub fn moving_average(values: &[f64], window: usize, step: usize) -> Option<f64> {
    if window == 0 || step < window || step > values.len() {
        return None;
    }
    let slice = &values[step - window..step];
    Some(slice.iter().sum::<f64>() / window as f64)
}

/// Finds `<name>_ir.pgm` / `<name>_vi.pgm` pairs, sorted by name.
pub fn find_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_ir.pgm")).map(String::from))
        .collect();
    names.sort();
    let pairs: Vec<_> = names
        .into_iter()
        .filter_map(|n| {
            let vi = dir.join(format!("{n}_vi.pgm"));
            vi.is_file().then(|| (n.clone(), dir.join(format!("{n}_ir.pgm")), vi))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!("no <name>_ir.pgm/<name>_vi.pgm pairs in {}", dir.display())));
    }
    Ok(pairs)
}

pub fn load_pairs(dir: &Path) -> Result<Vec<ImagePair>> {
    find_pairs(dir)?
        .into_iter()
        .map(|(name, ir, vi)| {
            ImagePair::new(load_pgm(&ir)?, load_pgm(&vi)?)
                .map_err(|e| Error::Data(format!("pair {name}: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_windows() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(moving_average(&v, 2, 2), Some(1.5));
        assert_eq!(moving_average(&v, 4, 10), Some(8.5));
        assert_eq!(moving_average(&v, 4, 3), None);
        assert_eq!(moving_average(&v, 4, 11), None);
    }

    #[test]
    fn crop_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ir = Tensor::new(&[6, 7], (0..42).map(|k| k as f64 / 42.0).collect()).unwrap();
        let pair = ImagePair::new(ir.clone(), ir).unwrap();
        let c = random_crop(&pair, 4, &mut rng).unwrap();
        assert_eq!(c.dims(), (4, 4));
        assert_eq!(c.ir, c.vi);
        let row0 = &c.ir.data()[..4];
        assert!(row0.windows(2).all(|w| (w[1] - w[0] - 1.0 / 42.0).abs() < 1e-12));
        assert!(matches!(random_crop(&pair, 8, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn csv_row_shape() {
        let r = StepRecord {
            step: 3,
            loss: LossBreakdown { total: 1.0, int: 0.1, grad: 0.2, cov: 0.3, ssim: 0.4 },
            min_eigengap: f64::INFINITY,
        };
        assert_eq!(r.csv_row().split(',').count(), StepRecord::CSV_HEADER.split(',').count());
    }
}
