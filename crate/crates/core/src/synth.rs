//! Seeded synthetic infrared/visible pairs: a bright disc on a dim, noisy
//! infrared background, and a visible image carrying an oriented grating with
//! the disc barely visible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::ImagePair;
use crate::tensor::Tensor;

pub const DISC_INTENSITY: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Disc {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

impl Disc {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let (dy, dx) = (i as f64 + 0.5 - self.cy, j as f64 + 0.5 - self.cx);
        dy * dy + dx * dx <= self.radius * self.radius
    }

    pub fn mask(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|k| self.contains(k / w, k % w)).collect()
    }

    /// Mean of `img` over the disc pixels.
    pub fn mean_inside(&self, img: &Tensor) -> Result<f64> {
        let (h, w) = img.dims2()?;
        let (mut s, mut n) = (0.0, 0usize);
        for (k, inside) in self.mask(h, w).into_iter().enumerate() {
            if inside {
                s += img.data()[k];
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("disc covers no pixels".into()));
        }
        Ok(s / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub pair: ImagePair,
    pub disc: Disc,
    pub disc_intensity: f64,
}

pub fn synthetic_pair(size: usize, seed: u64) -> Result<SyntheticPair> {
    if size < 8 {
        return Err(Error::arg(format!("synthetic images need size ≥ 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let radius = rng.gen_range(0.12..0.2) * s;
    let disc = Disc {
        cy: rng.gen_range(radius + 1.0..s - radius - 1.0),
        cx: rng.gen_range(radius + 1.0..s - radius - 1.0),
        radius,
    };
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let period = rng.gen_range(4.0..9.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());

    let n = size * size;
    let mut ir = Vec::with_capacity(n);
    let mut vi = Vec::with_capacity(n);
    for k in 0..n {
        let (i, j) = (k / size, k % size);
        let inside = disc.contains(i, j);
        let bg = 0.15 + rng.gen_range(-0.04..0.04);
        ir.push(if inside { DISC_INTENSITY } else { bg });
        let u = (i as f64 * st + j as f64 * ct) * std::f64::consts::TAU / period + phase;
        let grating = 0.5 + 0.3 * u.sin() + rng.gen_range(-0.03..0.03);
        vi.push((if inside { grating * 0.6 + 0.1 } else { grating }).clamp(0.0, 1.0));
    }
    Ok(SyntheticPair {
        pair: ImagePair::new(Tensor::new(&[size, size], ir)?, Tensor::new(&[size, size], vi)?)?,
        disc,
        disc_intensity: DISC_INTENSITY,
    })
}

/// `count` pairs with seeds derived from `seed`.
pub fn synthetic_set(count: usize, size: usize, seed: u64) -> Result<Vec<SyntheticPair>> {
    (0..count as u64)
        .map(|k| synthetic_pair(size, seed.wrapping_mul(1_000_003).wrapping_add(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::average_gradient;

    #[test]
    fn seeded_and_in_range() {
        let a = synthetic_pair(32, 3).unwrap();
        assert_eq!(a, synthetic_pair(32, 3).unwrap());
        assert_ne!(a, synthetic_pair(32, 4).unwrap());
        let ir = &a.pair.ir;
        assert!(ir.data().iter().chain(a.pair.vi.data()).all(|v| (0.0..=1.0).contains(v)));
        assert!((a.disc.mean_inside(ir).unwrap() - DISC_INTENSITY).abs() < 1e-12);
        assert!(average_gradient(&a.pair.vi).unwrap() > average_gradient(ir).unwrap());
    }

    #[test]
    fn set_has_distinct_pairs() {
        let set = synthetic_set(8, 16, 0).unwrap();
        assert_eq!(set.len(), 8);
        assert_ne!(set[0].pair, set[1].pair);
    }
}
