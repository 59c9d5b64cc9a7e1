//! Pulse tail models: a damped chirp with decaying frequency, and a
//! squared-exponential Gaussian process.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::ToeplitzInverse;
use crate::scalar::Scalar;

/// Parameters of the damped-chirp tail. Times are in seconds, frequencies
/// in Hz, the phase in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeTailParams<T> {
    pub v_t: T,
    pub tau_m: T,
    pub tau_f: T,
    pub f_max: T,
    pub f_min: T,
    pub phi: T,
}

impl<T: Scalar> ShapeTailParams<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("tau_m", self.tau_m),
            ("tau_f", self.tau_f),
            ("f_max", self.f_max),
            ("f_min", self.f_min),
        ];
        for (name, v) in pos {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.v_t.is_finite() || !self.phi.is_finite() {
            return Err(Error::Config("tail amplitude and phase must be finite".into()));
        }
        if self.f_max < self.f_min {
            log::warn!("f_max {} below f_min {}", self.f_max, self.f_min);
        }
        Ok(())
    }

    /// Parameters as `[V_t, tau_m, tau_f, f_max, f_min, phi]`.
    pub fn to_array(&self) -> [T; 6] {
        [self.v_t, self.tau_m, self.tau_f, self.f_max, self.f_min, self.phi]
    }

    pub fn from_array(a: [T; 6]) -> Self {
        ShapeTailParams {
            v_t: a[0],
            tau_m: a[1],
            tau_f: a[2],
            f_max: a[3],
            f_min: a[4],
            phi: a[5],
        }
    }

    /// Instantaneous frequency at tail offset `m`.
    pub fn frequency_at(&self, m: usize, sample_rate: T) -> T {
        let t = T::from_usize_lossy(m) / sample_rate;
        (self.f_max - self.f_min) * (-t / self.tau_f).exp() + self.f_min
    }
}

/// Tail samples for offsets `0..tail_len`, time measured from the first tail
/// sample.
pub fn synth_shape_tail<T: Scalar>(params: &ShapeTailParams<T>, tail_len: usize, sample_rate: T) -> Result<Vec<T>> {
    if !(sample_rate > T::zero()) {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    Ok(shape_unit(params, tail_len, sample_rate)
        .into_iter()
        .map(|g| params.v_t * g)
        .collect())
}

/// Tail shape with unit amplitude; the tail is linear in `V_t`.
pub(crate) fn shape_unit<T: Scalar>(params: &ShapeTailParams<T>, len: usize, fs: T) -> Vec<T> {
    let two_pi = T::two_pi();
    (0..len)
        .map(|m| {
            let t = T::from_usize_lossy(m) / fs;
            let fm = params.frequency_at(m, fs);
            (-t / params.tau_m).exp() * (two_pi * t * fm + params.phi).sin()
        })
        .collect()
}

/// Squared-exponential kernel hyperparameters. The length scale is in
/// samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpHyper<T> {
    pub sigma_f2: T,
    pub sigma_l2: T,
    pub sigma_n2: T,
}

impl<T: Scalar> GpHyper<T> {
    pub fn new(sigma_f2: T, sigma_l2: T, sigma_n2: T) -> Result<Self> {
        for (name, v) in [("sigma_f2", sigma_f2), ("sigma_l2", sigma_l2), ("sigma_n2", sigma_n2)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(GpHyper {
            sigma_f2,
            sigma_l2,
            sigma_n2,
        })
    }

    /// First row of the (Toeplitz) Gram matrix on `n` evenly spaced samples.
    pub fn kernel_row(&self, n: usize) -> Vec<T> {
        (0..n).map(|k| se_kernel(T::from_usize_lossy(k), self)).collect()
    }
}

/// A GP-modelled tail: its sample values and the fixed hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GpTail<T> {
    pub v_t: Vec<T>,
    pub hyper: GpHyper<T>,
}

pub fn se_kernel<T: Scalar>(dt: T, hyper: &GpHyper<T>) -> T {
    hyper.sigma_f2 * (-(dt * dt) / (T::lit(2.0) * hyper.sigma_l2)).exp()
}

pub fn gram_matrix<T: Scalar>(n_points: usize, hyper: &GpHyper<T>, jitter: T) -> DMatrix<T> {
    let row = hyper.kernel_row(n_points);
    DMatrix::from_fn(n_points, n_points, |i, j| {
        row[i.abs_diff(j)] + if i == j { jitter } else { T::zero() }
    })
}

/// Default Cholesky jitter relative to the signal variance.
pub const GRAM_JITTER: f64 = 1e-8;

/// Options for the maximum-likelihood hyperparameter fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GpFitOptions {
    /// Only the first `window` samples enter the likelihood; the posterior
    /// mean is still computed over the whole input.
    pub window: usize,
    /// Initial length scales in samples (one local ascent per entry).
    pub length_inits: Vec<f64>,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions {
            window: 1024,
            length_inits: vec![4.0, 16.0, 64.0, 256.0],
            max_iters: 200,
            rel_tol: 1e-6,
        }
    }
}

/// Fitted tail with fit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GpFit<T> {
    pub tail: GpTail<T>,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub evaluations: usize,
}

const MIN_FIT_LEN: usize = 16;

/// Log evidence of `y ~ N(0, C + sigma_n2 I)` and its gradient with
/// respect to the log hyperparameters.
pub fn gp_log_evidence<T: Scalar>(y: &[T], hyper: &GpHyper<T>) -> Result<(f64, [f64; 3])> {
    let n = y.len();
    let krow = hyper.kernel_row(n);
    let mut trow = krow.clone();
    trow[0] += hyper.sigma_n2;
    let tinv = ToeplitzInverse::new(&trow)?;
    let alpha = tinv.solve(y);
    let quad = y.iter().zip(&alpha).fold(T::zero(), |a, (&u, &v)| a + u * v);
    let nf = T::from_usize_lossy(n);
    let ll = -(quad + tinv.logdet() + nf * T::two_pi().ln()) / T::lit(2.0);

    // tr(K^-1 D) and alpha^T D alpha for Toeplitz D, through diagonal sums.
    let s = tinv.diagonal_sums();
    let auto: Vec<T> = (0..n)
        .map(|k| {
            alpha[..n - k]
                .iter()
                .zip(&alpha[k..])
                .fold(T::zero(), |a, (&p, &q)| a + p * q)
        })
        .collect();
    let two = T::lit(2.0);
    let contract = |d: &dyn Fn(usize) -> T| {
        let mut g = T::zero();
        for k in 0..n {
            let w = if k == 0 { T::one() } else { two };
            g += w * d(k) * (auto[k] - s[k]);
        }
        g / two
    };
    let g_f = contract(&|k| krow[k]);
    let g_l = contract(&|k| {
        let kk = T::from_usize_lossy(k);
        krow[k] * kk * kk / (two * hyper.sigma_l2)
    });
    let g_n = (auto[0] - s[0]) * hyper.sigma_n2 / two;
    let v = ll.as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite GP evidence".into()));
    }
    Ok((v, [g_f.as_f64(), g_l.as_f64(), g_n.as_f64()]))
}

/// Posterior mean of the tail under `y = v + noise`: `y - sigma_n2 (C + sigma_n2 I)^-1 y`.
pub fn gp_smooth<T: Scalar>(y: &[T], hyper: &GpHyper<T>) -> Result<Vec<T>> {
    let mut row = hyper.kernel_row(y.len());
    row[0] += hyper.sigma_n2;
    let alpha = ToeplitzInverse::new(&row)?.solve(y);
    Ok(y.iter().zip(&alpha).map(|(&u, &a)| u - hyper.sigma_n2 * a).collect())
}

/// Maximum-likelihood SE hyperparameters for `y2 = v_t + white noise`,
/// returning the posterior-mean tail under the fit.
pub fn fit_gp_hyperparams<T: Scalar>(y2: &[T], opts: &GpFitOptions) -> Result<GpFit<T>> {
    if y2.len() < MIN_FIT_LEN {
        return Err(Error::DegenerateFit(format!(
            "need at least {MIN_FIT_LEN} tail samples, got {}",
            y2.len()
        )));
    }
    if y2.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateFit("tail contains non-finite samples".into()));
    }
    let win = &y2[..opts.window.max(MIN_FIT_LEN).min(y2.len())];
    let n = win.len();
    let var = win.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return Err(Error::DegenerateFit("tail excerpt has zero energy".into()));
    }
    // Keep the noise from collapsing, which would make the Gram matrix singular.
    let bounds = [
        ((var * 1e-6).ln(), (var * 1e3).ln()),
        (0.0, ((n * n) as f64).ln()),
        ((var * 1e-7).ln(), (var * 10.0).ln()),
    ];
    let to_hyper = |th: &[f64; 3]| GpHyper {
        sigma_f2: T::lit(th[0].exp()),
        sigma_l2: T::lit(th[1].exp()),
        sigma_n2: T::lit(th[2].exp()),
    };
    let mut evals = 0usize;
    let mut eval = |th: &[f64; 3]| {
        evals += 1;
        gp_log_evidence(win, &to_hyper(th))
    };

    let mut best: Option<([f64; 3], f64)> = None;
    let mut first_ll = f64::NEG_INFINITY;
    for (i, &ell) in opts.length_inits.iter().enumerate() {
        let init = [
            (0.9 * var).ln(),
            (ell * ell).ln().clamp(bounds[1].0, bounds[1].1),
            (0.1 * var).ln(),
        ];
        let (th, ll) = match ascend(init, &bounds, opts, &mut eval) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("GP fit start {ell} failed: {e}");
                continue;
            }
        };
        if i == 0 {
            first_ll = eval(&init).map(|r| r.0).unwrap_or(f64::NEG_INFINITY);
        }
        if best.is_none_or(|(_, b)| ll > b) {
            best = Some((th, ll));
        }
    }
    let (th, ll) = best.ok_or_else(|| {
        Error::DegenerateFit(format!(
            "all {} optimizer starts failed (n = {n}, mean square = {var:e})",
            opts.length_inits.len()
        ))
    })?;
    let hyper = to_hyper(&th);
    log::debug!(
        "GP fit: sigma_f2 = {:e}, sigma_l2 = {:e}, sigma_n2 = {:e}, loglik = {ll:.3}",
        th[0].exp(),
        th[1].exp(),
        th[2].exp()
    );
    let v_t = gp_smooth(y2, &hyper)?;
    Ok(GpFit {
        tail: GpTail { v_t, hyper },
        loglik: ll,
        initial_loglik: first_ll,
        evaluations: evals,
    })
}

/// Projected gradient ascent with backtracking on a box in log space.
fn ascend(
    mut th: [f64; 3],
    bounds: &[(f64, f64); 3],
    opts: &GpFitOptions,
    eval: &mut impl FnMut(&[f64; 3]) -> Result<(f64, [f64; 3])>,
) -> Result<([f64; 3], f64)> {
    let project = |mut t: [f64; 3]| {
        for (v, &(lo, hi)) in t.iter_mut().zip(bounds) {
            *v = v.clamp(lo, hi);
        }
        t
    };
    th = project(th);
    let (mut f, mut g) = eval(&th)?;
    let mut step = 1.0 / (g.iter().map(|v| v * v).sum::<f64>().sqrt() + 1.0);
    for _ in 0..opts.max_iters {
        let mut accepted = false;
        for _ in 0..40 {
            let cand = project([th[0] + step * g[0], th[1] + step * g[1], th[2] + step * g[2]]);
            let moved: f64 = cand.iter().zip(&th).map(|(a, b)| (a - b).abs()).sum();
            if moved < 1e-12 {
                break;
            }
            if let Ok((fc, gc)) = eval(&cand) {
                let gain: f64 = g
                    .iter()
                    .zip(cand.iter().zip(&th))
                    .map(|(gi, (a, b))| gi * (a - b))
                    .sum();
                if fc >= f + 1e-4 * gain {
                    let rel = (fc - f).abs() / f.abs().max(1.0);
                    th = cand;
                    f = fc;
                    g = gc;
                    step *= 2.0;
                    accepted = true;
                    if rel < opts.rel_tol {
                        return Ok((th, f));
                    }
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((th, f))
}
