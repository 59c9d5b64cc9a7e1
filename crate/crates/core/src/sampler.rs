//! Gibbs sampler over burst location, burst variance, tail and the
//! destroyed samples, with Metropolis-Hastings moves where the conditionals
//! are not standard.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::inference::{sigma_d2_posterior_params, BlockLikelihood, GpTailSolver, LikelihoodTerms};
use crate::partition::SegmentPartition;
use crate::pulse::{shape_unit, synth_shape_tail, GpTail, ShapeTailParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailModelKind {
    Shape,
    Gp,
}

impl std::fmt::Display for TailModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TailModelKind::Shape => "shape",
            TailModelKind::Gp => "gp",
        })
    }
}

impl std::str::FromStr for TailModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(TailModelKind::Shape),
            "gp" => Ok(TailModelKind::Gp),
            other => Err(Error::Config(format!("unknown model '{other}', expected shape or gp"))),
        }
    }
}

/// Proposal variances for `(tau_m, tau_f, f_max, f_min, phi)`.
pub const DEFAULT_SHAPE_PROPOSAL_VARS: [f64; 5] = [1.5e-5, 5e-7, 6.0, 0.6, 1e-2];
/// Starting tail parameters `(V_t, tau_m, tau_f, f_max, f_min, phi)`.
pub const DEFAULT_SHAPE_INIT: [f64; 6] = [0.1, 0.1, 0.19, 50.0, 30.0, 0.5];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Total length of the discrete uniform location proposal.
    pub loc_proposal_width: usize,
    pub shape_proposal_vars: [f64; 5],
    pub shape_init: [f64; 6],
    /// Update the five shape parameters one at a time (each with its own
    /// accept/reject) instead of with one joint proposal.
    pub sequential_shape: bool,
    /// Integrate the tail amplitude out of the shape acceptance ratio
    /// instead of conditioning on its current value.
    pub collapse_amplitude: bool,
    pub alpha_d: f64,
    pub beta_d: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 200,
            burn_in: 150,
            thin: 1,
            loc_proposal_width: 10,
            shape_proposal_vars: DEFAULT_SHAPE_PROPOSAL_VARS,
            shape_init: DEFAULT_SHAPE_INIT,
            sequential_shape: true,
            collapse_amplitude: true,
            alpha_d: 1e-4,
            beta_d: 1e-4,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Iteration counts used for each tail model unless overridden.
    pub fn protocol(kind: TailModelKind) -> Self {
        match kind {
            TailModelKind::Gp => SamplerConfig::default(),
            TailModelKind::Shape => SamplerConfig {
                iterations: 1000,
                burn_in: 500,
                ..SamplerConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be >= 1".into()));
        }
        if self.loc_proposal_width == 0 {
            return Err(Error::Config("location proposal width must be positive".into()));
        }
        if self.shape_proposal_vars.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("shape proposal variances must be finite and >= 0".into()));
        }
        if !(self.alpha_d > 0.0 && self.beta_d > 0.0) {
            return Err(Error::Config("inverse-gamma prior parameters must be positive".into()));
        }
        ShapeTailParams::from_array(self.shape_init).validate()
    }
}

/// Current tail of one chain state.
#[derive(Debug, Clone, PartialEq)]
pub enum TailState<T> {
    Shape(ShapeTailParams<T>),
    /// GP tail values, the first one at absolute block index `start`.
    Gp {
        tail: GpTail<T>,
        start: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState<T> {
    pub n0: usize,
    pub m: usize,
    pub sigma_d2: T,
    pub tail: TailState<T>,
    pub x1: Vec<T>,
}

impl<T: Scalar> ChainState<T> {
    pub fn partition(&self, n: usize) -> Result<SegmentPartition> {
        SegmentPartition::new(self.n0, self.m, n)
    }

    /// Tail values over the tail of `part`.
    pub fn tail_values(&self, part: &SegmentPartition, sample_rate: T) -> Result<Vec<T>> {
        match &self.tail {
            TailState::Shape(p) => synth_shape_tail(p, part.tail_len(), sample_rate),
            TailState::Gp { tail, start } => Ok(reindex_tail(&tail.v_t, *start, part)),
        }
    }
}

/// Maps an absolutely indexed tail onto a new tail range, holding the first
/// value for samples before the old start.
fn reindex_tail<T: Scalar>(v: &[T], start: usize, part: &SegmentPartition) -> Vec<T> {
    let first = v.first().copied().unwrap_or_else(T::zero);
    part.i2()
        .map(|i| {
            if i < start {
                first
            } else {
                v.get(i - start).copied().unwrap_or_else(T::zero)
            }
        })
        .collect()
}

/// Everything the sampler needs about one block.
pub struct SamplerContext<'a, T: Scalar> {
    pub lik: BlockLikelihood<'a, T>,
    pub sample_rate: T,
    /// Smallest admissible burst start (pre-context guard).
    pub min_n0: usize,
    pub gp: Option<GpTailSolver<'a, T>>,
}

impl<'a, T: Scalar> SamplerContext<'a, T> {
    pub fn n(&self) -> usize {
        self.lik.y.len()
    }

    fn in_bounds(&self, n0: i64, m: i64) -> bool {
        n0 >= self.min_n0 as i64 && m >= 1 && n0 + m < self.n() as i64
    }

    fn terms(&self, state: &ChainState<T>, part: SegmentPartition) -> Result<LikelihoodTerms<T>> {
        let v = state.tail_values(&part, self.sample_rate)?;
        self.lik.terms(part, state.sigma_d2, &v)
    }
}

fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

/// Outcome of one location move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationMove {
    pub accepted: bool,
    pub in_bounds: bool,
}

/// Joint random-walk move on `(n0, M)` against the likelihood with x1
/// integrated out. `target` overrides the log target for testing.
pub fn mh_location_step<T: Scalar, R: Rng + ?Sized>(
    state: &mut ChainState<T>,
    ctx: &SamplerContext<'_, T>,
    width: usize,
    rng: &mut R,
    target: Option<&dyn Fn(SegmentPartition) -> Result<T>>,
) -> Result<LocationMove> {
    let half = (width / 2) as i64;
    let lo = -half;
    let hi = width as i64 - half;
    let n0p = state.n0 as i64 + rng.random_range(lo..=hi);
    let mp = state.m as i64 + rng.random_range(lo..=hi);
    if !ctx.in_bounds(n0p, mp) {
        return Ok(LocationMove {
            accepted: false,
            in_bounds: false,
        });
    }
    let n = ctx.n();
    let cur = state.partition(n)?;
    let prop = SegmentPartition::new(n0p as usize, mp as usize, n)?;
    let eval = |p: SegmentPartition| -> Result<T> {
        match target {
            Some(f) => f(p),
            None => ctx.terms(state, p).map(|t| t.loglik),
        }
    };
    let log_ratio = eval(prop)? - eval(cur)?;
    let u: f64 = rng.random();
    let accepted = u.ln() < log_ratio.as_f64();
    if accepted {
        resize_x1(state, prop);
    }
    Ok(LocationMove {
        accepted,
        in_bounds: true,
    })
}

/// Keeps x1 aligned with absolute indices; new positions start at zero.
fn resize_x1<T: Scalar>(state: &mut ChainState<T>, part: SegmentPartition) {
    let old_start = state.n0;
    let old = std::mem::take(&mut state.x1);
    state.x1 = part
        .i1()
        .map(|i| {
            i.checked_sub(old_start)
                .and_then(|k| old.get(k).copied())
                .unwrap_or_else(T::zero)
        })
        .collect();
    state.n0 = part.n0;
    state.m = part.m;
}

fn draw_x1<T: Scalar, R: Rng + ?Sized>(terms: &LikelihoodTerms<T>, rng: &mut R) -> Vec<T> {
    let z = DVector::from_fn(terms.theta.len(), |_, _| normal::<T, R>(rng));
    terms.x1_draw(&z).iter().copied().collect()
}

fn shape_admissible<T: Scalar>(p: &ShapeTailParams<T>) -> bool {
    [p.tau_m, p.tau_f, p.f_max, p.f_min]
        .iter()
        .all(|v| *v > T::zero() && v.is_finite())
        && p.phi.is_finite()
}

/// Names of the shape parameters moved by Metropolis-Hastings.
pub const SHAPE_MH_NAMES: [&str; 5] = ["tau_m", "tau_f", "f_max", "f_min", "phi"];

/// MH move on the shape parameters, exact draw of the amplitude, then a
/// draw of x1. Returns the acceptance flag of each of the five parameters;
/// a joint move reports the same flag five times.
pub fn shape_tail_block_step<T: Scalar, R: Rng + ?Sized>(
    state: &mut ChainState<T>,
    ctx: &SamplerContext<'_, T>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<[bool; 5]> {
    let TailState::Shape(current) = state.tail else {
        return Err(Error::Config("shape step called on a GP chain".into()));
    };
    let part = state.partition(ctx.n())?;
    let fs = ctx.sample_rate;
    let amp = ctx.lik.amplitude_solver(part, state.sigma_d2)?;
    let loglik = |p: &ShapeTailParams<T>| -> Result<T> {
        if cfg.collapse_amplitude {
            amp.conditional(&shape_unit(p, part.tail_len(), fs))
                .map(|c| c.log_marginal)
        } else {
            let v = synth_shape_tail(p, part.tail_len(), fs)?;
            ctx.lik.loglik(part, state.sigma_d2, &v)
        }
    };
    let sd: Vec<T> = cfg.shape_proposal_vars.iter().map(|v| T::lit(v.sqrt())).collect();
    let mut params = current;
    let mut cur_ll = loglik(&params)?;
    let mut accepted = [false; 5];
    let groups: Vec<Vec<usize>> = if cfg.sequential_shape {
        (0..5).map(|i| vec![i]).collect()
    } else {
        vec![(0..5).collect()]
    };
    for group in groups {
        let mut arr = params.to_array();
        for &i in &group {
            arr[i + 1] += sd[i] * normal::<T, R>(rng);
        }
        let prop = ShapeTailParams::from_array(arr);
        // Draw the uniform even when rejecting early so the stream stays aligned.
        let u: f64 = rng.random();
        if !shape_admissible(&prop) {
            continue;
        }
        let prop_ll = loglik(&prop)?;
        if u.ln() < (prop_ll - cur_ll).as_f64() {
            params = prop;
            cur_ll = prop_ll;
            for &i in &group {
                accepted[i] = true;
            }
        }
    }
    let c = amp.conditional(&shape_unit(&params, part.tail_len(), fs))?;
    params.v_t = c.mean + c.variance.sqrt() * normal::<T, R>(rng);
    state.tail = TailState::Shape(params);
    let terms = ctx.terms(state, part)?;
    state.x1 = draw_x1(&terms, rng);
    Ok(accepted)
}

/// Sets the GP tail to its conditional posterior mean for the current
/// partition, then draws x1.
pub fn gp_tail_block_step<T: Scalar, R: Rng + ?Sized>(
    state: &mut ChainState<T>,
    ctx: &mut SamplerContext<'_, T>,
    rng: &mut R,
) -> Result<()> {
    let part = state.partition(ctx.n())?;
    let solver = ctx
        .gp
        .as_mut()
        .ok_or_else(|| Error::Config("GP step called without a GP solver".into()))?;
    let TailState::Gp { tail, .. } = &state.tail else {
        return Err(Error::Config("GP step called on a shape chain".into()));
    };
    let hyper = tail.hyper;
    let v_t = solver.mean(part)?;
    state.tail = TailState::Gp {
        tail: GpTail { v_t, hyper },
        start: part.tail_start(),
    };
    let terms = ctx.terms(state, part)?;
    state.x1 = draw_x1(&terms, rng);
    Ok(())
}

/// Conjugate inverse-gamma draw of the burst variance given x1.
pub fn sigma_d2_step<T: Scalar, R: Rng + ?Sized>(
    state: &mut ChainState<T>,
    y1: &[T],
    alpha_d: f64,
    beta_d: f64,
    rng: &mut R,
) -> Result<T> {
    let v_d: Vec<f64> = y1.iter().zip(&state.x1).map(|(&a, &b)| (a - b).as_f64()).collect();
    let (alpha, beta) = sigma_d2_posterior_params(&v_d, alpha_d, beta_d);
    let gamma =
        Gamma::new(alpha, 1.0 / beta).map_err(|e| Error::Numeric(format!("inverse-gamma({alpha}, {beta}): {e}")))?;
    let draw = 1.0 / gamma.sample(rng);
    if !(draw > 0.0 && draw.is_finite()) {
        return Err(Error::Numeric(format!("burst variance draw {draw} is not usable")));
    }
    state.sigma_d2 = T::lit(draw);
    Ok(state.sigma_d2)
}

/// Recorded chain with per-iteration acceptance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain<T> {
    pub kind: TailModelKind,
    pub states: Vec<ChainState<T>>,
    pub loc_accepted: Vec<bool>,
    pub loc_in_bounds: Vec<bool>,
    /// Per-parameter shape outcome; `None` for the deterministic GP step.
    pub tail_accepted: Vec<Option<[bool; 5]>>,
    pub config: SamplerConfig,
    pub block_len: usize,
}

/// Acceptance rates over the whole chain and after burn-in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceRates {
    pub location: f64,
    pub location_post_burn_in: f64,
    /// Shape acceptance averaged over the five parameters.
    pub tail: Option<f64>,
    pub tail_post_burn_in: Option<f64>,
    /// Whole-chain shape acceptance per parameter, ordered as
    /// [`SHAPE_MH_NAMES`].
    pub tail_per_param: Option<[f64; 5]>,
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    let (mut k, mut n) = (0usize, 0usize);
    for f in flags {
        n += 1;
        k += f as usize;
    }
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

impl<T> Chain<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn acceptance(&self) -> AcceptanceRates {
        let b = self.config.burn_in.min(self.len());
        let has_tail = self.tail_accepted.iter().any(Option::is_some);
        let flags = |skip: usize| self.tail_accepted.iter().skip(skip).map(|f| f.unwrap_or([false; 5]));
        let tail_rate = |skip: usize| has_tail.then(|| rate(flags(skip).flatten()));
        let per_param = has_tail.then(|| std::array::from_fn(|i| rate(flags(0).map(|f| f[i]))));
        AcceptanceRates {
            location: rate(self.loc_accepted.iter().copied()),
            location_post_burn_in: rate(self.loc_accepted.iter().skip(b).copied()),
            tail: tail_rate(0),
            tail_post_burn_in: tail_rate(b),
            tail_per_param: per_param,
        }
    }
}

/// Runs the sampler from `init` for `cfg.iterations` sweeps.
pub fn run_gibbs<T: Scalar, R: Rng + ?Sized>(
    init: ChainState<T>,
    ctx: &mut SamplerContext<'_, T>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Chain<T>> {
    cfg.validate()?;
    let n = ctx.n();
    let kind = match init.tail {
        TailState::Shape(_) => TailModelKind::Shape,
        TailState::Gp { .. } => TailModelKind::Gp,
    };
    if kind == TailModelKind::Gp && ctx.gp.is_none() {
        return Err(Error::Config("GP chain needs a GP solver".into()));
    }
    let mut state = init;
    if !ctx.in_bounds(state.n0 as i64, state.m as i64) {
        return Err(Error::Context(format!(
            "initial burst (n0 = {}, M = {}) is outside the admissible range [{}, {n})",
            state.n0, state.m, ctx.min_n0
        )));
    }
    if state.x1.len() != state.m {
        state.x1 = vec![T::zero(); state.m];
    }
    let mut chain = Chain {
        kind,
        states: Vec::with_capacity(cfg.iterations),
        loc_accepted: Vec::with_capacity(cfg.iterations),
        loc_in_bounds: Vec::with_capacity(cfg.iterations),
        tail_accepted: Vec::with_capacity(cfg.iterations),
        config: cfg.clone(),
        block_len: n,
    };
    for it in 0..cfg.iterations {
        let wrap = |e: Error| Error::Sampler {
            iteration: it,
            source: Box::new(e),
        };
        let mv = mh_location_step(&mut state, ctx, cfg.loc_proposal_width, rng, None).map_err(wrap)?;
        let tail_flag = match kind {
            TailModelKind::Shape => Some(shape_tail_block_step(&mut state, ctx, cfg, rng).map_err(wrap)?),
            TailModelKind::Gp => {
                gp_tail_block_step(&mut state, ctx, rng).map_err(wrap)?;
                None
            }
        };
        let y1 = &ctx.lik.y[state.n0..state.n0 + state.m];
        sigma_d2_step(&mut state, y1, cfg.alpha_d, cfg.beta_d, rng).map_err(wrap)?;
        chain.states.push(state.clone());
        chain.loc_accepted.push(mv.accepted);
        chain.loc_in_bounds.push(mv.in_bounds);
        chain.tail_accepted.push(tail_flag);
    }
    Ok(chain)
}

/// Point summary used for the estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PointEstimate {
    #[default]
    Mean,
    Median,
}

/// Point value and 95% credible interval of one scalar parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ParamSummary {
    pub fn covers(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Linearly interpolated empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(name: &str, values: &[f64], point: PointEstimate) -> ParamSummary {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let p = match point {
        PointEstimate::Mean => s.iter().sum::<f64>() / s.len() as f64,
        PointEstimate::Median => quantile_sorted(&s, 0.5),
    };
    let out = ParamSummary {
        name: name.to_string(),
        point: p,
        lower: quantile_sorted(&s, 0.025),
        upper: quantile_sorted(&s, 0.975),
    };
    if !(out.lower <= out.point && out.point <= out.upper) {
        log::warn!("{name}: point estimate {p} outside its credible interval");
    }
    out
}

/// Posterior summaries of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate<T> {
    pub params: Vec<ParamSummary>,
    pub n0: usize,
    pub m: usize,
    /// Mean tail over the whole block (zero where a state has no tail).
    pub v_full: Vec<T>,
    /// Mean reconstructed clean block.
    pub x_full: Vec<T>,
    pub retained: usize,
}

impl<T: Scalar> PosteriorEstimate<T> {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn partition(&self) -> Result<SegmentPartition> {
        SegmentPartition::new(self.n0, self.m, self.v_full.len())
    }

    /// Estimated tail over the estimated tail range.
    pub fn v_t(&self) -> Vec<T> {
        self.v_full[self.n0 + self.m..].to_vec()
    }

    /// Estimated destroyed samples over the estimated burst range.
    pub fn x1(&self) -> Vec<T> {
        self.x_full[self.n0..self.n0 + self.m].to_vec()
    }
}

pub const SHAPE_PARAM_NAMES: [&str; 6] = ["V_t", "tau_m", "tau_f", "f_max", "f_min", "phi"];

/// Means (or medians) and 2.5/97.5% quantiles over the states kept after
/// `burn_in` with step `thin`.
pub fn chain_estimate<T: Scalar>(
    chain: &Chain<T>,
    y: &[T],
    sample_rate: T,
    burn_in: usize,
    thin: usize,
    point: PointEstimate,
) -> Result<PosteriorEstimate<T>> {
    if thin == 0 {
        return Err(Error::Config("thin must be >= 1".into()));
    }
    let kept: Vec<&ChainState<T>> = chain.states.iter().skip(burn_in).step_by(thin).collect();
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no samples retained (chain length {}, burn-in {burn_in})",
            chain.len()
        )));
    }
    if y.len() != chain.block_len {
        return Err(Error::Dimension("block does not match chain".into()));
    }
    let n = y.len();
    let col = |f: &dyn Fn(&ChainState<T>) -> f64| kept.iter().map(|s| f(s)).collect::<Vec<f64>>();
    let mut params = vec![
        summarize("n0", &col(&|s| s.n0 as f64), point),
        summarize("M", &col(&|s| s.m as f64), point),
        summarize("sigma_d2", &col(&|s| s.sigma_d2.as_f64()), point),
    ];
    if chain.kind == TailModelKind::Shape {
        for (i, name) in SHAPE_PARAM_NAMES.iter().enumerate() {
            params.push(summarize(
                name,
                &col(&|s| match &s.tail {
                    TailState::Shape(p) => p.to_array()[i].as_f64(),
                    TailState::Gp { .. } => f64::NAN,
                }),
                point,
            ));
        }
    }
    let mut v_full = vec![T::zero(); n];
    let mut x_full = vec![T::zero(); n];
    for s in &kept {
        let part = s.partition(n)?;
        let v = s.tail_values(&part, sample_rate)?;
        for (i, &vi) in part.i2().zip(&v) {
            v_full[i] += vi;
        }
        for (k, &yk) in y.iter().enumerate() {
            x_full[k] += if k < part.n0 {
                yk
            } else if k < part.tail_start() {
                s.x1[k - part.n0]
            } else {
                yk - v[k - part.tail_start()]
            };
        }
    }
    let cnt = T::from_usize_lossy(kept.len());
    v_full.iter_mut().for_each(|v| *v /= cnt);
    x_full.iter_mut().for_each(|v| *v /= cnt);
    let n0 = params[0].point.round() as usize;
    let m = (params[1].point.round() as usize).max(1);
    Ok(PosteriorEstimate {
        params,
        n0,
        m: m.min(n - n0 - 1),
        v_full,
        x_full,
        retained: kept.len(),
    })
}

/// Column names of the chain CSV for a given tail model.
pub fn chain_csv_header(kind: TailModelKind) -> Vec<&'static str> {
    let mut h = vec!["iteration", "n0", "M", "sigma_d2"];
    match kind {
        TailModelKind::Shape => h.extend(SHAPE_PARAM_NAMES),
        TailModelKind::Gp => h.extend(["vt_norm", "sigma_f2", "sigma_l2"]),
    }
    h.push("loc_accepted");
    if kind == TailModelKind::Shape {
        h.extend(["acc_tau_m", "acc_tau_f", "acc_f_max", "acc_f_min", "acc_phi"]);
    }
    h
}

/// Writes one row per iteration. `n0_offset` is added to every burst start
/// (for example the excerpt start plus one for 1-based output).
pub fn write_chain_csv<T: Scalar, W: Write>(
    chain: &Chain<T>,
    mut out: W,
    comment: &str,
    n0_offset: usize,
) -> Result<()> {
    let io = |e: std::io::Error| Error::Csv(e.to_string());
    writeln!(out, "# {comment}").map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(chain_csv_header(chain.kind)).map_err(csv_err)?;
    for (i, s) in chain.states.iter().enumerate() {
        let mut rec = vec![
            (i + 1).to_string(),
            (s.n0 + n0_offset).to_string(),
            s.m.to_string(),
            format!("{:e}", s.sigma_d2.as_f64()),
        ];
        match &s.tail {
            TailState::Shape(p) => rec.extend(p.to_array().iter().map(|v| format!("{:e}", v.as_f64()))),
            TailState::Gp { tail, .. } => {
                let norm = tail.v_t.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                rec.extend([
                    format!("{norm:e}"),
                    format!("{:e}", tail.hyper.sigma_f2.as_f64()),
                    format!("{:e}", tail.hyper.sigma_l2.as_f64()),
                ]);
            }
        }
        rec.push((chain.loc_accepted[i] as u8).to_string());
        if let Some(flags) = chain.tail_accepted[i] {
            rec.extend(flags.iter().map(|&a| (a as u8).to_string()));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

/// A chain CSV read back as numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTable {
    pub columns: Vec<String>,
    /// Column-major values; empty cells become NaN.
    pub values: Vec<Vec<f64>>,
}

impl ChainTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|i| self.values[i].as_slice())
    }

    pub fn rows(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

pub fn read_chain_csv<R: BufRead>(input: R) -> Result<ChainTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(input);
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.first().map(String::as_str) != Some("iteration") {
        return Err(Error::Csv("first column must be 'iteration'".into()));
    }
    let mut values = vec![Vec::new(); columns.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(format!("row {}: {e}", r + 1)))?;
        if rec.len() != columns.len() {
            return Err(Error::Csv(format!(
                "row {} has {} fields, expected {}",
                r + 1,
                rec.len(),
                columns.len()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            let v = if field.is_empty() {
                f64::NAN
            } else {
                field.trim().parse::<f64>().map_err(|_| {
                    Error::Csv(format!(
                        "row {}, column '{}': '{field}' is not a number",
                        r + 1,
                        columns[c]
                    ))
                })?
            };
            values[c].push(v);
        }
    }
    if values[0].is_empty() {
        return Err(Error::Csv("chain has no rows".into()));
    }
    Ok(ChainTable { columns, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::ArModel;
    use crate::pulse::GpHyper;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn fixture(n: usize, seed: u64) -> (ArModel<f64>, Vec<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let model = ArModel::new(vec![0.5, -0.2], 0.01).unwrap();
        let mut y = vec![0.0; n];
        for t in 2..n {
            y[t] = 0.5 * y[t - 1] - 0.2 * y[t - 2] + 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        (model, y)
    }

    fn shape_state() -> ChainState<f64> {
        ChainState {
            n0: 40,
            m: 5,
            sigma_d2: 0.3,
            tail: TailState::Shape(ShapeTailParams::from_array(DEFAULT_SHAPE_INIT)),
            x1: vec![0.0; 5],
        }
    }

    #[test]
    fn flat_target_accepts_every_in_bounds_proposal() {
        let (model, y) = fixture(80, 1);
        let ctx = SamplerContext {
            lik: BlockLikelihood::new(&model, &y),
            sample_rate: 44100.0,
            min_n0: 35,
            gp: None,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let flat = |_: SegmentPartition| -> Result<f64> { Ok(0.0) };
        let mut state = shape_state();
        let (mut acc, mut inb) = (0, 0);
        for _ in 0..5000 {
            let mv = mh_location_step(&mut state, &ctx, 10, &mut rng, Some(&flat)).unwrap();
            acc += mv.accepted as usize;
            inb += mv.in_bounds as usize;
            assert!(state.n0 >= 35 && state.m >= 1 && state.n0 + state.m < 80);
            assert_eq!(state.x1.len(), state.m);
        }
        assert_eq!(acc, inb);
        assert!(inb < 5000);
    }

    #[test]
    fn location_proposal_is_symmetric() {
        let (model, y) = fixture(400, 1);
        let ctx = SamplerContext {
            lik: BlockLikelihood::new(&model, &y),
            sample_rate: 44100.0,
            min_n0: 0,
            gp: None,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let flat = |_: SegmentPartition| -> Result<f64> { Ok(0.0) };
        let mut counts = [0usize; 11];
        for _ in 0..22000 {
            let mut s = ChainState {
                n0: 200,
                m: 50,
                ..shape_state()
            };
            s.x1 = vec![0.0; 50];
            mh_location_step(&mut s, &ctx, 10, &mut rng, Some(&flat)).unwrap();
            counts[(s.n0 as isize - 195) as usize] += 1;
        }
        for c in counts {
            assert!((1700..2300).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn zero_proposal_variance_freezes_shape() {
        let (model, y) = fixture(120, 4);
        let ctx = SamplerContext {
            lik: BlockLikelihood::new(&model, &y),
            sample_rate: 44100.0,
            min_n0: 10,
            gp: None,
        };
        let cfg = SamplerConfig {
            shape_proposal_vars: [0.0; 5],
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut state = shape_state();
        let before = DEFAULT_SHAPE_INIT;
        for _ in 0..20 {
            shape_tail_block_step(&mut state, &ctx, &cfg, &mut rng).unwrap();
            let TailState::Shape(p) = state.tail else {
                unreachable!()
            };
            assert_eq!(p.to_array()[1..], before[1..]);
        }
        let TailState::Shape(p) = state.tail else {
            unreachable!()
        };
        assert_ne!(p.v_t, before[0]);
    }

    #[test]
    fn amplitude_draws_match_conditional() {
        let (model, mut y) = fixture(200, 6);
        let truth = ShapeTailParams {
            v_t: 0.3,
            ..ShapeTailParams::from_array(DEFAULT_SHAPE_INIT)
        };
        let tail = synth_shape_tail(&truth, 150, 44100.0).unwrap();
        for (yv, t) in y[50..].iter_mut().zip(&tail) {
            *yv += t;
        }
        let ctx = SamplerContext {
            lik: BlockLikelihood::new(&model, &y),
            sample_rate: 44100.0,
            min_n0: 10,
            gp: None,
        };
        let cfg = SamplerConfig {
            shape_proposal_vars: [0.0; 5],
            ..SamplerConfig::default()
        };
        let part = SegmentPartition::new(45, 5, 200).unwrap();
        let g = shape_unit(&truth, 150, 44100.0);
        let (mean, var) = ctx.lik.amplitude_conditional(part, 0.3, &g).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut state = ChainState {
            n0: 45,
            tail: TailState::Shape(truth),
            ..shape_state()
        };
        let k = 4000;
        let mut sum = 0.0;
        for _ in 0..k {
            state.sigma_d2 = 0.3;
            shape_tail_block_step(&mut state, &ctx, &cfg, &mut rng).unwrap();
            let TailState::Shape(p) = state.tail else {
                unreachable!()
            };
            sum += p.v_t;
        }
        let se = (var / k as f64).sqrt();
        assert!((sum / k as f64 - mean).abs() < 3.0 * se);
        assert!((mean - 0.3).abs() < 0.05);
    }

    #[test]
    fn gp_step_is_deterministic_and_keeps_hyper() {
        let (model, y) = fixture(100, 8);
        let hyper = GpHyper::new(0.01, 100.0, 1e-3).unwrap();
        let mut ctx = SamplerContext {
            lik: BlockLikelihood::new(&model, &y),
            sample_rate: 44100.0,
            min_n0: 10,
            gp: Some(GpTailSolver::new(&model, &y, hyper)),
        };
        let mut state = ChainState {
            n0: 30,
            m: 4,
            sigma_d2: 0.2,
            tail: TailState::Gp {
                tail: GpTail {
                    v_t: vec![0.0; 66],
                    hyper,
                },
                start: 34,
            },
            x1: vec![0.0; 4],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        gp_tail_block_step(&mut state, &mut ctx, &mut rng).unwrap();
        let first = state.tail.clone();
        gp_tail_block_step(&mut state, &mut ctx, &mut rng).unwrap();
        assert_eq!(first, state.tail);
        let TailState::Gp { tail, .. } = &state.tail else {
            unreachable!()
        };
        assert_eq!(tail.hyper, hyper);
    }

    #[test]
    fn reindex_holds_first_value() {
        let part = SegmentPartition::new(2, 1, 8).unwrap();
        let v = reindex_tail(&[1.0, 2.0, 3.0, 4.0], 4, &part);
        assert_eq!(v, vec![1.0, 1.0, 2.0, 3.0, 4.0]);
        let part = SegmentPartition::new(4, 2, 8).unwrap();
        assert_eq!(reindex_tail(&[1.0, 2.0, 3.0, 4.0], 4, &part), vec![3.0, 4.0]);
    }

    #[test]
    fn sigma_d2_prior_only_update() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let mut state = ChainState {
            m: 2,
            x1: vec![1.0, -1.0],
            ..shape_state()
        };
        let mut acc = 0.0;
        let k = 100_000;
        // alpha = 3, beta = 2 + 1 = 3 gives mean beta / (alpha - 1) = 1.5.
        for _ in 0..k {
            acc += sigma_d2_step(&mut state, &[2.0, -2.0], 2.0, 2.0, &mut rng).unwrap();
        }
        assert!((acc / k as f64 / 1.5 - 1.0).abs() < 0.01);
    }

    #[test]
    fn quantiles_match_sort_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..401).map(|_| rng.random::<f64>()).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let p = summarize("x", &v, PointEstimate::Mean);
        assert_eq!(p.lower, s[10]);
        assert_eq!(p.upper, s[390]);
        let c = summarize("c", &[2.5; 7], PointEstimate::Median);
        assert_eq!((c.lower, c.point, c.upper), (2.5, 2.5, 2.5));
    }

    fn short_chain(seed: u64) -> (Chain<f64>, Vec<f64>) {
        let (model, y) = fixture(150, 12);
        let mut ctx = SamplerContext {
            lik: BlockLikelihood::new(&model, &y),
            sample_rate: 44100.0,
            min_n0: 20,
            gp: None,
        };
        let cfg = SamplerConfig {
            iterations: 30,
            burn_in: 10,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (run_gibbs(shape_state(), &mut ctx, &cfg, &mut rng).unwrap(), y)
    }

    #[test]
    fn chain_is_reproducible() {
        let (a, _) = short_chain(13);
        let (b, _) = short_chain(13);
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        let r = a.acceptance();
        assert!((0.0..=1.0).contains(&r.location) && r.tail.is_some());
    }

    #[test]
    fn single_retained_state_is_the_estimate() {
        let (chain, y) = short_chain(14);
        let est = chain_estimate(&chain, &y, 44100.0, 29, 1, PointEstimate::Mean).unwrap();
        let last = chain.states.last().unwrap();
        assert_eq!(est.retained, 1);
        assert_eq!((est.n0, est.m), (last.n0, last.m));
        assert_eq!(est.x1(), last.x1);
        let s = est.param("sigma_d2").unwrap();
        assert_eq!(
            (s.lower, s.point, s.upper),
            (last.sigma_d2, last.sigma_d2, last.sigma_d2)
        );
        assert!(chain_estimate(&chain, &y, 44100.0, 30, 1, PointEstimate::Mean).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (chain, _) = short_chain(15);
        let mut buf = Vec::new();
        write_chain_csv(&chain, &mut buf, "test seed=15", 1).unwrap();
        let table = read_chain_csv(buf.as_slice()).unwrap();
        assert_eq!(table.rows(), 30);
        let n0 = table.column("n0").unwrap();
        for (s, v) in chain.states.iter().zip(n0) {
            assert_eq!(s.n0 as f64 + 1.0, *v);
        }
        assert!(read_chain_csv("iteration,n0\n1,x\n".as_bytes()).is_err());
        assert!(read_chain_csv("foo\n1\n".as_bytes()).is_err());
    }
}
