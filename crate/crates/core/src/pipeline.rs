//! End-to-end restoration: per-pulse excerpts, model pre-fits, sampling,
//! tail subtraction and re-insertion. Also the synthetic degradation used
//! to build test material and the SNR metric used to score it.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::ar::estimate_ar_covariance;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::inference::{BlockLikelihood, GpTailSolver};
use crate::partition::SegmentPartition;
use crate::pulse::{fit_gp_hyperparams, synth_shape_tail, GpFitOptions, ShapeTailParams};
use crate::sampler::{
    chain_estimate, run_gibbs, AcceptanceRates, Chain, ChainState, ParamSummary, PointEstimate, SamplerConfig,
    SamplerContext, TailModelKind, TailState,
};
use crate::scalar::Scalar;
use crate::signal::{extract_excerpt, Excerpt, Signal};

/// One synthetic pulse. `n0` is 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedPulse<T> {
    pub n0: usize,
    pub m: usize,
    pub sigma_d2: T,
    pub tail: ShapeTailParams<T>,
    pub tail_len: usize,
}

impl<T> InjectedPulse<T> {
    pub fn end(&self) -> usize {
        self.n0 + self.m + self.tail_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSpec<T> {
    pub pulses: Vec<InjectedPulse<T>>,
    pub seed: u64,
}

impl<T: Scalar> InjectionSpec<T> {
    /// `count` copies of `template`, the i-th starting at
    /// `(i + 1/2) * len / count` so that they are evenly spread.
    pub fn uniform(signal_len: usize, count: usize, template: &InjectedPulse<T>, seed: u64) -> Result<Self> {
        if count == 0 {
            return Ok(InjectionSpec { pulses: vec![], seed });
        }
        let spacing = signal_len / count;
        let pulses = (0..count)
            .map(|i| InjectedPulse {
                n0: i * spacing + spacing / 2,
                ..template.clone()
            })
            .collect();
        let spec = InjectionSpec { pulses, seed };
        spec.validate(signal_len)?;
        Ok(spec)
    }

    pub fn validate(&self, signal_len: usize) -> Result<()> {
        let mut order: Vec<&InjectedPulse<T>> = self.pulses.iter().collect();
        order.sort_by_key(|p| p.n0);
        for p in &order {
            if p.m == 0 {
                return Err(Error::Spec(format!("pulse at {} has an empty burst", p.n0)));
            }
            if p.end() > signal_len {
                return Err(Error::Spec(format!(
                    "pulse at {} ends at {} beyond signal length {signal_len}",
                    p.n0,
                    p.end()
                )));
            }
            if !(p.sigma_d2 >= T::zero()) {
                return Err(Error::Spec(format!("pulse at {} has negative burst variance", p.n0)));
            }
            p.tail.validate().map_err(|e| Error::Spec(e.to_string()))?;
        }
        for w in order.windows(2) {
            if w[0].end() > w[1].n0 {
                return Err(Error::Spec(format!("pulses at {} and {} overlap", w[0].n0, w[1].n0)));
            }
        }
        Ok(())
    }
}

/// Adds a white Gaussian burst and a damped-chirp tail per pulse.
pub fn inject_pulse<T: Scalar>(clean: &Signal<T>, spec: &InjectionSpec<T>) -> Result<Signal<T>> {
    spec.validate(clean.len())?;
    let mut x = clean.samples().to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let fs = T::from_usize_lossy(clean.sample_rate_hz() as usize);
    for p in &spec.pulses {
        let sd = p.sigma_d2.sqrt();
        for v in &mut x[p.n0..p.n0 + p.m] {
            *v += sd * T::lit(rng.sample::<f64, _>(StandardNormal));
        }
        let tail = synth_shape_tail(&p.tail, p.tail_len, fs)?;
        for (v, t) in x[p.n0 + p.m..].iter_mut().zip(tail) {
            *v += t;
        }
    }
    clean.with_samples(x)
}

/// Multiplies the last `n_fade` samples by a ramp ending at exactly zero.
pub fn fade_out_tail<T: Scalar>(v_t: &[T], n_fade: usize) -> Vec<T> {
    let mut out = v_t.to_vec();
    let n = n_fade.min(out.len());
    let start = out.len() - n;
    let nf = T::from_usize_lossy(n);
    for (k, v) in out[start..].iter_mut().enumerate() {
        *v *= (nf - T::from_usize_lossy(k + 1)) / nf;
    }
    out
}

/// Reference-to-error power ratio in dB, capped at 300 for identical input.
pub fn snr_db<T: Scalar>(reference: &Signal<T>, test: &Signal<T>) -> Result<f64> {
    snr_db_slices(reference.samples(), test.samples())
}

pub const SNR_CAP_DB: f64 = 300.0;

pub fn snr_db_slices<T: Scalar>(reference: &[T], test: &[T]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::Dimension(format!(
            "reference has {} samples, test has {}",
            reference.len(),
            test.len()
        )));
    }
    let ps: f64 = reference.iter().map(|v| v.as_f64().powi(2)).sum();
    let pe: f64 = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    if pe == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (ps / pe).log10()).min(SNR_CAP_DB))
}

/// Settings of the per-pulse restoration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreConfig {
    pub model: TailModelKind,
    pub excerpt_len: usize,
    /// Position of the detected burst start inside the excerpt.
    pub n0_in_excerpt: usize,
    pub ar_order: usize,
    /// Leading excerpt samples used for the AR fit.
    pub ar_fit_len: usize,
    /// Tail fade length; `None` means 1000 for the GP model and 0 otherwise.
    pub fade_len: Option<usize>,
    /// Samples of the initial tail used for the GP hyperparameter fit.
    pub gp_fit_window: usize,
    pub point: PointEstimateName,
    pub sampler: SamplerConfig,
}

/// Serializable name of [`PointEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointEstimateName {
    #[default]
    Mean,
    Median,
}

impl From<PointEstimateName> for PointEstimate {
    fn from(p: PointEstimateName) -> Self {
        match p {
            PointEstimateName::Mean => PointEstimate::Mean,
            PointEstimateName::Median => PointEstimate::Median,
        }
    }
}

impl Default for RestoreConfig {
    fn default() -> Self {
        RestoreConfig::for_model(TailModelKind::Gp)
    }
}

impl RestoreConfig {
    pub fn for_model(model: TailModelKind) -> Self {
        RestoreConfig {
            model,
            excerpt_len: 8000,
            n0_in_excerpt: 500,
            ar_order: 40,
            ar_fit_len: 450,
            fade_len: None,
            gp_fit_window: GpFitOptions::default().window,
            point: PointEstimateName::Mean,
            sampler: SamplerConfig::protocol(model),
        }
    }

    pub fn effective_fade(&self) -> usize {
        self.fade_len.unwrap_or(match self.model {
            TailModelKind::Gp => 1000,
            TailModelKind::Shape => 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.ar_order == 0 {
            return Err(Error::Config("AR order must be at least 1".into()));
        }
        if self.ar_fit_len < 2 * self.ar_order + 1 {
            return Err(Error::Config(format!(
                "AR fit length {} too short for order {}",
                self.ar_fit_len, self.ar_order
            )));
        }
        if self.n0_in_excerpt < self.ar_fit_len {
            return Err(Error::Config(format!(
                "burst position {} leaves less than the AR fit length {} of context",
                self.n0_in_excerpt, self.ar_fit_len
            )));
        }
        if self.excerpt_len <= self.n0_in_excerpt + 1 {
            return Err(Error::Config("excerpt too short for the burst position".into()));
        }
        Ok(())
    }
}

/// Outcome of one processed pulse. Indices are 0-based and absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseReport {
    pub detection: Detection,
    pub excerpt_start: usize,
    pub n0: usize,
    pub m: usize,
    pub params: Vec<ParamSummary>,
    pub acceptance: AcceptanceRates,
    pub ar_sigma_e2: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseOutcome {
    pub index: usize,
    pub detection: Detection,
    pub result: std::result::Result<PulseReport, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RestorationReport {
    pub pulses: Vec<PulseOutcome>,
    pub snr_before_db: Option<f64>,
    pub snr_after_db: Option<f64>,
}

impl RestorationReport {
    pub fn failures(&self) -> usize {
        self.pulses.iter().filter(|p| p.result.is_err()).count()
    }
}

/// Restored excerpt plus everything needed to audit it.
#[derive(Debug, Clone)]
pub struct ExcerptRestoration<T> {
    pub samples: Vec<T>,
    pub chain: Chain<T>,
    /// First sample that differs from the input.
    pub first_modified: usize,
    pub report: PulseReport,
}

/// Restores one excerpt given a detection in excerpt coordinates.
pub fn restore_excerpt<T: Scalar, R: Rng + ?Sized>(
    excerpt: &Excerpt<T>,
    detection: Detection,
    sample_rate: u32,
    cfg: &RestoreConfig,
    rng: &mut R,
) -> Result<ExcerptRestoration<T>> {
    let clock = Instant::now();
    cfg.validate()?;
    let y = &excerpt.samples;
    let n = y.len();
    let (n0, m) = (detection.n0, detection.m.max(1));
    let guard = cfg.ar_fit_len.max(cfg.ar_order);
    if n0 < guard {
        return Err(Error::Context(format!(
            "burst starts at {n0}, needs at least {guard} samples of clean context"
        )));
    }
    if n0 + m >= n {
        return Err(Error::Context(format!(
            "burst [{n0}, {}) leaves no tail inside an excerpt of {n}",
            n0 + m
        )));
    }
    let model = estimate_ar_covariance(&y[..cfg.ar_fit_len], cfg.ar_order)?;
    let part = SegmentPartition::new(n0, m, n)?;
    let y1 = &y[part.i1()];
    let ms = y1.iter().fold(T::zero(), |a, &v| a + v * v) / T::from_usize_lossy(m);
    let floor = model.sigma_e2;
    let sigma_d2 = if ms > floor { ms } else { floor };
    let fs = T::from_usize_lossy(sample_rate as usize);

    let (tail, gp) = match cfg.model {
        TailModelKind::Shape => (
            TailState::Shape(ShapeTailParams::from_array(cfg.sampler.shape_init.map(T::lit))),
            None,
        ),
        TailModelKind::Gp => {
            let opts = GpFitOptions {
                window: cfg.gp_fit_window,
                ..GpFitOptions::default()
            };
            let fit = fit_gp_hyperparams(&y[part.i2()], &opts)?;
            log::debug!(
                "GP fit: sigma_f2 = {:e}, sigma_l2 = {:e}, sigma_n2 = {:e}",
                fit.tail.hyper.sigma_f2.as_f64(),
                fit.tail.hyper.sigma_l2.as_f64(),
                fit.tail.hyper.sigma_n2.as_f64()
            );
            let hyper = fit.tail.hyper;
            (
                TailState::Gp {
                    tail: fit.tail,
                    start: part.tail_start(),
                },
                Some(GpTailSolver::new(&model, y, hyper)),
            )
        }
    };
    let init = ChainState {
        n0,
        m,
        sigma_d2,
        tail,
        x1: vec![T::zero(); m],
    };
    let mut ctx = SamplerContext {
        lik: BlockLikelihood::new(&model, y),
        sample_rate: fs,
        min_n0: guard,
        gp,
    };
    let chain = run_gibbs(init, &mut ctx, &cfg.sampler, rng)?;
    let est = chain_estimate(&chain, y, fs, cfg.sampler.burn_in, cfg.sampler.thin, cfg.point.into())?;

    let epart = est.partition()?;
    let mut out = y.clone();
    out[epart.i1()].copy_from_slice(&est.x1());
    let v = fade_out_tail(&est.v_t(), cfg.effective_fade());
    for (o, (&yy, vv)) in out[epart.i2()].iter_mut().zip(y[epart.i2()].iter().zip(v)) {
        *o = yy - vv;
    }
    let report = PulseReport {
        detection: Detection {
            n0: detection.n0 + excerpt.start,
            ..detection
        },
        excerpt_start: excerpt.start,
        n0: est.n0 + excerpt.start,
        m: est.m,
        params: est.params.clone(),
        acceptance: chain.acceptance(),
        ar_sigma_e2: model.sigma_e2.as_f64(),
        seconds: clock.elapsed().as_secs_f64(),
    };
    Ok(ExcerptRestoration {
        samples: out,
        chain,
        first_modified: epart.n0,
        report,
    })
}

/// Excerpt start that puts `n0` at the configured offset, shifted to stay
/// inside the signal.
pub fn excerpt_start(signal_len: usize, n0: usize, cfg: &RestoreConfig) -> (usize, usize) {
    let len = cfg.excerpt_len.min(signal_len);
    let start = n0.saturating_sub(cfg.n0_in_excerpt).min(signal_len - len);
    (start, len)
}

/// Independent random stream for pulse `index`.
pub fn pulse_rng(seed: u64, index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Per-pulse result of [`restore_signal_with_chains`].
pub type PulseRun<T> = (usize, usize, Result<ExcerptRestoration<T>>);

/// Chain of each pulse with its excerpt start; `None` where the pulse failed.
pub type PulseChains<T> = Vec<Option<(usize, Chain<T>)>>;

/// Restores every detection in parallel and re-inserts the results in
/// detection order. Failed pulses leave the signal untouched.
pub fn restore_signal<T: Scalar>(
    signal: &Signal<T>,
    detections: &[Detection],
    cfg: &RestoreConfig,
) -> Result<(Signal<T>, RestorationReport)> {
    restore_signal_with_chains(signal, detections, cfg).map(|(s, r, _)| (s, r))
}

pub fn restore_signal_with_chains<T: Scalar>(
    signal: &Signal<T>,
    detections: &[Detection],
    cfg: &RestoreConfig,
) -> Result<(Signal<T>, RestorationReport, PulseChains<T>)> {
    cfg.validate()?;
    let runs: Vec<PulseRun<T>> = detections
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let (start, len) = excerpt_start(signal.len(), d.n0, cfg);
            let res = extract_excerpt(signal, start, len).and_then(|ex| {
                let local = Detection { n0: d.n0 - start, ..*d };
                let mut rng = pulse_rng(cfg.sampler.seed, i);
                restore_excerpt(&ex, local, signal.sample_rate_hz(), cfg, &mut rng)
            });
            (i, start, res)
        })
        .collect();

    let mut samples = signal.samples().to_vec();
    let mut report = RestorationReport::default();
    let mut chains = Vec::with_capacity(runs.len());
    for (i, start, res) in runs {
        let det = detections[i];
        match res {
            Ok(r) => {
                let a = start + r.first_modified;
                samples[a..start + r.samples.len()].copy_from_slice(&r.samples[r.first_modified..]);
                report.pulses.push(PulseOutcome {
                    index: i,
                    detection: det,
                    result: Ok(r.report),
                });
                chains.push(Some((start, r.chain)));
            }
            Err(e) => {
                log::warn!("pulse {} at sample {} not restored: {e}", i + 1, det.n0 + 1);
                report.pulses.push(PulseOutcome {
                    index: i,
                    detection: det,
                    result: Err(e.to_string()),
                });
                chains.push(None);
            }
        }
    }
    Ok((signal.with_samples(samples)?, report, chains))
}
