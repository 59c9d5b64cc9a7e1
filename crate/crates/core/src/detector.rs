//! Onset detector for initial discontinuities, based on sudden jumps of the
//! mean high-frequency spectral magnitude across short overlapping blocks.

use nalgebra::ComplexField;
use rustfft::num_complex::Complex;
use rustfft::{FftNum, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::Signal;

/// Below this the median-excess sequence is treated as identically zero.
pub const NO_EVIDENCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Block length in samples (power of two).
    #[serde(rename = "L")]
    pub l: usize,
    pub xi: f64,
    /// Median window length (odd).
    pub c: usize,
    pub f_co_hz: f64,
    /// Divide the median excess by its maximum before thresholding.
    pub normalize: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            l: 16,
            xi: 0.3,
            c: 5,
            f_co_hz: 3000.0,
            normalize: true,
        }
    }
}

impl DetectorConfig {
    pub fn hop(&self) -> usize {
        self.l / 2
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.l < 2 || !self.l.is_power_of_two() {
            return Err(Error::Config(format!("L = {} must be a power of two >= 2", self.l)));
        }
        if !(16..=64).contains(&self.l) {
            log::warn!("L = {} outside the recommended range 16..=64", self.l);
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(Error::Config(format!("xi = {} must lie in (0, 1]", self.xi)));
        }
        if self.c == 0 || self.c.is_multiple_of(2) {
            return Err(Error::Config(format!("median window c = {} must be odd", self.c)));
        }
        let nyq = sample_rate as f64 / 2.0;
        if !(self.f_co_hz >= 0.0 && self.f_co_hz < nyq) {
            return Err(Error::Config(format!(
                "cutoff {} Hz must lie in [0, {nyq})",
                self.f_co_hz
            )));
        }
        Ok(())
    }

    /// First bin included in the high-band mean.
    pub fn cutoff_bin(&self, sample_rate: u32) -> Result<usize> {
        let a = (self.f_co_hz * self.l as f64 / sample_rate as f64).round() as usize;
        if a > self.l / 2 {
            return Err(Error::Config(format!(
                "cutoff bin {a} exceeds the last non-negative bin {}",
                self.l / 2
            )));
        }
        Ok(a)
    }
}

/// One candidate discontinuity. `n0` is 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub n0: usize,
    pub m: usize,
    pub score: f64,
}

/// Intermediate sequences, one entry per block.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrace<T> {
    pub mu: Vec<T>,
    pub mu_median: Vec<T>,
    pub delta: Vec<T>,
}

/// Mean DFT magnitude over bins `alpha_co..=L/2` for blocks of length `L`
/// and hop `L/2` (rectangular window).
pub fn high_band_mean<T: Scalar + FftNum>(signal: &Signal<T>, cfg: &DetectorConfig) -> Result<Vec<T>> {
    cfg.validate(signal.sample_rate_hz())?;
    let alpha = cfg.cutoff_bin(signal.sample_rate_hz())?;
    let x = signal.samples();
    let l = cfg.l;
    if x.len() < l {
        return Err(Error::Context(format!(
            "signal has {} samples, detector block needs {l}",
            x.len()
        )));
    }
    let hop = cfg.hop();
    let blocks = (x.len() - l) / hop + 1;
    let beta = l / 2;
    let count = T::from_usize_lossy(beta - alpha + 1);
    let fft = FftPlanner::<T>::new().plan_fft_forward(l);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); l];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    let mut mu = Vec::with_capacity(blocks);
    for b in 0..blocks {
        for (dst, &s) in buf.iter_mut().zip(&x[b * hop..b * hop + l]) {
            *dst = Complex::new(s, T::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let sum = buf[alpha..=beta]
            .iter()
            .fold(T::zero(), |acc, z| acc + ComplexField::sqrt(z.re * z.re + z.im * z.im));
        mu.push(sum / count);
    }
    Ok(mu)
}

/// Running median over a centred window of odd length `c`, padding both
/// ends with `c / 2` zeros.
pub fn median_filter<T: Scalar>(seq: &[T], c: usize) -> Result<Vec<T>> {
    if c == 0 || c.is_multiple_of(2) {
        return Err(Error::Config(format!("median window c = {c} must be odd")));
    }
    let h = c / 2;
    let mut window = Vec::with_capacity(c);
    Ok((0..seq.len())
        .map(|i| {
            window.clear();
            window.extend((0..c).map(|k| {
                let j = (i + k).wrapping_sub(h);
                if i + k < h || j >= seq.len() {
                    T::zero()
                } else {
                    seq[j]
                }
            }));
            window.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            window[h]
        })
        .collect())
}

/// Runs the detector and returns its intermediate sequences as well.
pub fn detect_pulses_traced<T: Scalar + FftNum>(
    signal: &Signal<T>,
    cfg: &DetectorConfig,
) -> Result<(Vec<Detection>, DetectorTrace<T>)> {
    let mu = high_band_mean(signal, cfg)?;
    let mu_median = median_filter(&mu, cfg.c)?;
    let excess: Vec<T> = mu.iter().zip(&mu_median).map(|(&a, &b)| a - b).collect();
    let max = excess
        .iter()
        .copied()
        .fold(T::lit(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
    let delta: Vec<T> = if cfg.normalize {
        if !(max.as_f64() > NO_EVIDENCE_EPS) {
            return Err(Error::NoPulseEvidence {
                max_excess: max.as_f64(),
            });
        }
        excess.iter().map(|&e| e / max).collect()
    } else {
        excess
    };
    let detections = group_blocks(&delta, cfg);
    Ok((detections, DetectorTrace { mu, mu_median, delta }))
}

pub fn detect_pulses<T: Scalar + FftNum>(signal: &Signal<T>, cfg: &DetectorConfig) -> Result<Vec<Detection>> {
    detect_pulses_traced(signal, cfg).map(|(d, _)| d)
}

struct Group {
    first: usize,
    last: usize,
    score: f64,
    positive: bool,
}

fn group_blocks<T: Scalar>(delta: &[T], cfg: &DetectorConfig) -> Vec<Detection> {
    let mut groups: Vec<Group> = Vec::new();
    let mut current: Option<Group> = None;
    for (b, d) in delta.iter().map(|d| d.as_f64()).enumerate() {
        if d.abs() >= cfg.xi {
            let g = current.get_or_insert(Group {
                first: b,
                last: b,
                score: 0.0,
                positive: false,
            });
            g.last = b;
            g.score = g.score.max(d.abs());
            g.positive |= d > 0.0;
        } else if let Some(g) = current.take() {
            groups.push(g);
        }
    }
    groups.extend(current);

    // A dip on its own is not an onset. Fold it into the positive group just
    // before it when the two are within one median window; drop it otherwise.
    let mut kept: Vec<Group> = Vec::new();
    for g in groups {
        if g.positive {
            kept.push(g);
            continue;
        }
        match kept.last_mut() {
            Some(prev) if g.first - prev.last <= cfg.c => {
                prev.last = g.last;
                prev.score = prev.score.max(g.score);
            }
            _ => log::debug!("ignoring negative-only block group {}..={}", g.first, g.last),
        }
    }
    let hop = cfg.hop();
    kept.into_iter()
        .map(|g| Detection {
            n0: g.first * hop,
            m: (g.last - g.first) * hop + cfg.l,
            score: g.score,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sig(x: Vec<f64>) -> Signal<f64> {
        Signal::new(x, 44100).unwrap()
    }

    #[test]
    fn zero_signal() {
        let s = sig(vec![0.0; 256]);
        let mu = high_band_mean(&s, &DetectorConfig::default()).unwrap();
        assert_eq!(mu.len(), (256 - 16) / 8 + 1);
        assert!(mu.iter().all(|v| *v == 0.0));
        assert!(matches!(
            detect_pulses(&s, &DetectorConfig::default()),
            Err(Error::NoPulseEvidence { .. })
        ));
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = vec![0.0; 64];
        x[36] = 1.0;
        let cfg = DetectorConfig {
            f_co_hz: 0.0,
            ..Default::default()
        };
        let mu = high_band_mean(&sig(x), &cfg).unwrap();
        // Blocks 3 and 4 cover sample 36.
        assert!((mu[3] - 1.0).abs() < 1e-12);
        assert!((mu[4] - 1.0).abs() < 1e-12);
        assert_eq!(mu[0], 0.0);
    }

    #[test]
    fn tone_below_cutoff_matches_naive_dft() {
        let fs = 44100.0;
        let x: Vec<f64> = (0..512)
            .map(|n| (2.0 * std::f64::consts::PI * 300.0 * n as f64 / fs).sin())
            .collect();
        let cfg = DetectorConfig::default();
        let mu = high_band_mean(&sig(x.clone()), &cfg).unwrap();
        let alpha = cfg.cutoff_bin(44100).unwrap();
        for (b, &m) in mu.iter().enumerate() {
            let blk = &x[b * 8..b * 8 + 16];
            let mut acc = 0.0;
            for k in alpha..=8 {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in blk.iter().enumerate() {
                    let w = -2.0 * std::f64::consts::PI * (k * n) as f64 / 16.0;
                    re += v * w.cos();
                    im += v * w.sin();
                }
                acc += (re * re + im * im).sqrt();
            }
            assert!((m - acc / (9 - alpha) as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn cutoff_too_high() {
        let cfg = DetectorConfig {
            f_co_hz: 30000.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(44100), Err(Error::Config(_))));
        assert!(matches!(cfg.cutoff_bin(44100), Err(Error::Config(_))));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_filter(&[1.0, 9.0, 1.0], 3).unwrap(), vec![1.0, 1.0, 1.0]);
        let s = [3.0, -1.0, 4.0, 1.0];
        assert_eq!(median_filter(&s, 1).unwrap(), s.to_vec());
        assert_eq!(median_filter(&[5.0, 7.0], 5).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(median_filter(&s, 4), Err(Error::Config(_))));
    }

    fn noisy(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn single_burst() {
        let mut x = noisy(20000, 1);
        for v in &mut x[10000..10010] {
            *v = 1.0;
        }
        let d = detect_pulses(&sig(x), &DetectorConfig::default()).unwrap();
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].n0 >= 10000 - 16 && d[0].n0 <= 10000);
        assert!(d[0].n0 + d[0].m >= 10009);
    }

    #[test]
    fn two_bursts_in_order() {
        let mut x = noisy(20000, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for start in [5000usize, 12000] {
            for v in &mut x[start..start + 10] {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let d = detect_pulses(&sig(x), &DetectorConfig::default()).unwrap();
        assert_eq!(d.len(), 2, "{d:?}");
        assert!(d[0].n0 < d[1].n0);
        assert!(d[0].n0.abs_diff(5000) <= 16 && d[1].n0.abs_diff(12000) <= 16);
    }

    #[test]
    fn trace_is_normalized() {
        let mut x = noisy(4000, 3);
        x[2000] = 0.8;
        let (_, t) = detect_pulses_traced(&sig(x), &DetectorConfig::default()).unwrap();
        let max = t.delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((max - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_group_merges_into_previous() {
        let cfg = DetectorConfig::default();
        let delta = [0.0, 1.0, 0.5, 0.0, -0.4, 0.0, 0.0];
        let d = group_blocks(&delta, &cfg);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].n0, 8);
        assert_eq!(d[0].m, 3 * 8 + 16);
        let lonely = [-0.6, 0.0, 0.0];
        assert!(group_blocks(&lonely, &cfg).is_empty());
    }
}
