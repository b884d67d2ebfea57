//! Fusion quality metrics: mutual information, spatial frequency, average
//! gradient and SSIM.

use crate::error::Result;
use crate::loss;
use crate::tensor::Tensor;

pub const MI_BINS: usize = 256;

/// Bin index of an intensity; values are clamped into [0,1] first.
pub fn mi_bin(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.999).floor() as usize
}

fn histogram(x: &Tensor) -> Vec<f64> {
    let mut h = vec![0.0; MI_BINS];
    for &v in x.data() {
        h[mi_bin(v)] += 1.0;
    }
    h
}

/// Shannon entropy (bits) of the 256-bin histogram.
pub fn entropy(x: &Tensor) -> f64 {
    let n = x.len() as f64;
    histogram(x)
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.log2()
        })
        .sum()
}

/// `Σ p(a,b)·log₂(p(a,b) / (p(a)p(b)))` over the joint 256-bin histogram.
pub fn mutual_information(f: &Tensor, src: &Tensor) -> Result<f64> {
    f.check_same_shape(src)?;
    let n = f.len() as f64;
    let mut joint = vec![0.0; MI_BINS * MI_BINS];
    for (&a, &b) in f.data().iter().zip(src.data()) {
        joint[mi_bin(a) * MI_BINS + mi_bin(b)] += 1.0;
    }
    let (pa, pb) = (histogram(f), histogram(src));
    let mut mi = 0.0;
    for a in 0..MI_BINS {
        if pa[a] == 0.0 {
            continue;
        }
        for b in 0..MI_BINS {
            let c = joint[a * MI_BINS + b];
            if c > 0.0 {
                // p(a,b)/(p(a)p(b)) = c·n/(|a|·|b|)
                mi += c / n * (c * n / (pa[a] * pb[b])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

fn rms(sum_sq: f64, count: usize) -> f64 {
    if count == 0 { 0.0 } else { (sum_sq / count as f64).sqrt() }
}

/// `√(RF² + CF²)` from horizontal (RF) and vertical (CF) first differences.
pub fn spatial_frequency(f: &Tensor) -> Result<f64> {
    let (h, w) = f.dims2()?;
    let (mut rf, mut cf) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                rf += (f.at(i, j + 1) - f.at(i, j)).powi(2);
            }
            if i + 1 < h {
                cf += (f.at(i + 1, j) - f.at(i, j)).powi(2);
            }
        }
    }
    let (rf, cf) = (rms(rf, h * (w.saturating_sub(1))), rms(cf, (h.saturating_sub(1)) * w));
    Ok((rf * rf + cf * cf).sqrt())
}

/// Mean of `√((dx² + dy²)/2)` over pixels with both forward differences.
pub fn average_gradient(f: &Tensor) -> Result<f64> {
    let (h, w) = f.dims2()?;
    if h < 2 || w < 2 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let dx = f.at(i, j + 1) - f.at(i, j);
            let dy = f.at(i + 1, j) - f.at(i, j);
            s += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(s / ((h - 1) * (w - 1)) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// `MI(f, ir) + MI(f, vi)`.
    pub mi: f64,
    pub sf: f64,
    pub ag: f64,
    pub ssim_ir: f64,
    pub ssim_vi: f64,
}

impl MetricReport {
    pub fn compute(fused: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<Self> {
        fused.dims2()?;
        fused.check_same_shape(ir)?;
        fused.check_same_shape(vi)?;
        Ok(MetricReport {
            mi: mutual_information(fused, ir)? + mutual_information(fused, vi)?,
            sf: spatial_frequency(fused)?,
            ag: average_gradient(fused)?,
            ssim_ir: loss::ssim(fused, ir)?,
            ssim_vi: loss::ssim(fused, vi)?,
        })
    }

    pub fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("mi", self.mi),
            ("sf", self.sf),
            ("ag", self.ag),
            ("ssim_ir", self.ssim_ir),
            ("ssim_vi", self.ssim_vi),
        ]
    }

    /// `key=value` lines, six significant digits.
    pub fn to_lines(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={}\n", format_sig6(*v)))
            .collect()
    }
}

/// Six significant digits, fixed-point unless the magnitude is extreme.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0.00000".to_string() } else { v.to_string() };
    }
    // round first so a carry (9.999996 → 10.0000) picks the right exponent
    let rounded: f64 = format!("{v:.5e}").parse().expect("float round trip");
    let mag = rounded.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - mag) as usize;
    format!("{rounded:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn mi_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let n = a.len() as f64;
        let bin = |v: f64| (v.clamp(0.0, 1.0) * 255.999).floor() as usize;
        let mut mi = 0.0;
        for x in 0..256 {
            for y in 0..256 {
                let (mut cj, mut ca, mut cb) = (0.0, 0.0, 0.0);
                for k in 0..a.len() {
                    let (ba, bb) = (bin(a.data()[k]), bin(b.data()[k]));
                    if ba == x { ca += 1.0; }
                    if bb == y { cb += 1.0; }
                    if ba == x && bb == y { cj += 1.0; }
                }
                if cj > 0.0 {
                    let (pj, pa, pb) = (cj / n, ca / n, cb / n);
                    mi += pj * (pj / (pa * pb)).log2();
                }
            }
        }
        mi
    }

    #[test]
    fn mi_cases() {
        let x = image(1, 16, 16);
        assert!((mutual_information(&x, &x).unwrap() - entropy(&x)).abs() < 1e-10);
        assert_eq!(mutual_information(&x, &Tensor::full(&[16, 16], 0.3)).unwrap(), 0.0);
        let y = image(2, 16, 16);
        assert!((mutual_information(&x, &y).unwrap() - mi_oracle(&x, &y)).abs() < 1e-10);
        assert_eq!(mi_bin(1.0), 255);
        assert_eq!(mi_bin(-0.1), 0);
        assert_eq!(mi_bin(0.5), 127);
    }

    #[test]
    fn sf_ag_cases() {
        let c = Tensor::full(&[8, 8], 0.7);
        assert_eq!(spatial_frequency(&c).unwrap(), 0.0);
        assert_eq!(average_gradient(&c).unwrap(), 0.0);
        let comb = Tensor::new(&[6, 8], (0..48).map(|k| (k % 2) as f64).collect()).unwrap();
        assert_eq!(spatial_frequency(&comb).unwrap(), 1.0);
        let w = 10;
        let ramp = Tensor::new(&[5, w], (0..5 * w).map(|k| (k % w) as f64 / w as f64).collect()).unwrap();
        let expect = ((1.0 / w as f64).powi(2) / 2.0).sqrt();
        assert!((average_gradient(&ramp).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn sf_ag_match_loop_oracles() {
        let x = image(3, 16, 16);
        let (mut rf, mut cf, mut ag) = (0.0, 0.0, 0.0);
        for i in 0..16 {
            for j in 0..15 {
                rf += (x.at(i, j + 1) - x.at(i, j)).powi(2);
                cf += (x.at(j + 1, i) - x.at(j, i)).powi(2);
            }
        }
        for i in 0..15 {
            for j in 0..15 {
                let (dx, dy) = (x.at(i, j + 1) - x.at(i, j), x.at(i + 1, j) - x.at(i, j));
                ag += ((dx * dx + dy * dy) / 2.0).sqrt();
            }
        }
        let sf = (rf / 240.0 + cf / 240.0).sqrt();
        assert!((spatial_frequency(&x).unwrap() - sf).abs() < 1e-12);
        assert!((average_gradient(&x).unwrap() - ag / 225.0).abs() < 1e-12);
    }

    #[test]
    fn intensity_shift_invariance() {
        let x = image(4, 12, 12);
        let y = x.map(|v| v + 0.37);
        assert!((spatial_frequency(&x).unwrap() - spatial_frequency(&y).unwrap()).abs() < 1e-12);
        assert!((average_gradient(&x).unwrap() - average_gradient(&y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_lines() {
        let x = image(5, 16, 16);
        let r = MetricReport::compute(&x, &x, &x).unwrap();
        let text = r.to_lines();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[3], "ssim_ir=1.00000");
        assert_eq!(lines[4], "ssim_vi=1.00000");
        for l in lines {
            let (k, v) = l.split_once('=').unwrap();
            assert!(!k.is_empty());
            v.parse::<f64>().unwrap();
        }
        let c = Tensor::full(&[16, 16], 0.5);
        let r = MetricReport::compute(&c, &x, &x).unwrap();
        assert_eq!((r.mi, r.sf, r.ag), (0.0, 0.0, 0.0));
        assert!(MetricReport::compute(&c, &Tensor::zeros(&[16, 15]), &x).is_err());
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig6(1.0), "1.00000");
        assert_eq!(format_sig6(4.0234567), "4.02346");
        assert_eq!(format_sig6(11.1), "11.1000");
        assert_eq!(format_sig6(0.0123456789), "0.0123457");
        assert_eq!(format_sig6(9.9999996), "10.0000");
        assert_eq!(format_sig6(-0.5), "-0.500000");
        assert_eq!(format_sig6(0.0), "0.00000");
        assert_eq!(format_sig6(1.5e-7), "1.50000e-7");
    }
}
