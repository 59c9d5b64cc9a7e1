//! Closed-form Gaussian computations: marginal likelihood with the destroyed
//! samples integrated out, their posterior, the large-burst-variance
//! simplification, the GP tail posterior and the conjugate burst-variance
//! update.
//!
//! Every function has a dense form that follows the matrix algebra
//! literally and, where it matters for speed, a banded form that never
//! builds an N x N object.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::ar::{ArModel, BandedPredictor, PartitionedPredictor};
use crate::error::{Error, Result};
use crate::linalg::{chol_inverse, chol_logdet, cholesky_jitter, dvec, symmetrize, ToeplitzInverse};
use crate::partition::SegmentPartition;
use crate::pulse::GpHyper;
use crate::scalar::Scalar;

/// Burst location and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscontinuityParams<T> {
    pub n0: usize,
    pub m: usize,
    pub sigma_d2: T,
}

impl<T: Scalar> DiscontinuityParams<T> {
    pub fn new(n0: usize, m: usize, sigma_d2: T) -> Result<Self> {
        if m == 0 {
            return Err(Error::Partition("burst length must be >= 1".into()));
        }
        if !(sigma_d2 > T::zero()) || !sigma_d2.is_finite() {
            return Err(Error::Config(format!(
                "burst variance must be positive, got {sigma_d2}"
            )));
        }
        Ok(DiscontinuityParams { n0, m, sigma_d2 })
    }

    pub fn partition(&self, n: usize) -> Result<SegmentPartition> {
        SegmentPartition::new(self.n0, self.m, n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<T: Scalar> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn new(mean: DVector<T>, covariance: DMatrix<T>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "mean has {} entries, covariance is {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(GaussianParams { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Parameters of the normalized product of two Gaussian densities in the
/// same variable. Uses `S1 (S1 + S2)^-1 S2` so a near-flat factor does not
/// lose precision.
pub fn gaussian_product_params<T: Scalar>(g1: &GaussianParams<T>, g2: &GaussianParams<T>) -> Result<GaussianParams<T>> {
    if g1.dim() != g2.dim() {
        return Err(Error::Dimension(format!(
            "cannot multiply Gaussians of dimension {} and {}",
            g1.dim(),
            g2.dim()
        )));
    }
    let sum = &g1.covariance + &g2.covariance;
    let (chol, _) = cholesky_jitter(&sum)?;
    let mut cov = &g1.covariance * chol.solve(&g2.covariance);
    symmetrize(&mut cov);
    let mean = &g2.covariance * chol.solve(&g1.mean) + &g1.covariance * chol.solve(&g2.mean);
    Ok(GaussianParams { mean, covariance: cov })
}

/// `ln of the integral of exp(-(x^T C x + b^T x + a) / 2)` over R^D.
pub fn quadratic_exp_integral<T: Scalar>(a: T, b: &DVector<T>, c: &DMatrix<T>) -> Result<T> {
    if c.nrows() != b.len() || c.ncols() != b.len() {
        return Err(Error::Dimension("quadratic form and linear term disagree".into()));
    }
    let chol = c
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("quadratic form is not positive definite".into()))?;
    let d = T::from_usize_lossy(b.len());
    let two = T::lit(2.0);
    let quad = b.dot(&chol.solve(b)) / T::lit(4.0);
    Ok(d / two * T::two_pi().ln() - chol_logdet(&chol) / two - (a - quad) / two)
}

/// Which normalizing constant the marginal likelihood carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalizer {
    /// `lambda^(M/2) / det(Phi)^(1/2)`, the value of the Gaussian integral.
    #[default]
    Derived,
    /// `lambda^M / det(Phi)`, kept for comparison only.
    Printed,
}

/// Intermediate quantities of one likelihood evaluation.
#[derive(Debug, Clone)]
pub struct LikelihoodTerms<T: Scalar> {
    pub loglik: T,
    pub lambda: T,
    pub e_min: T,
    pub theta: DVector<T>,
    pub phi: Cholesky<T, Dyn>,
    pub sigma_e2: T,
}

impl<T: Scalar> LikelihoodTerms<T> {
    /// Interpolated samples `Phi^-1 Theta`.
    pub fn x1_map(&self) -> DVector<T> {
        self.phi.solve(&self.theta)
    }

    /// `N(Phi^-1 Theta, sigma_e2 Phi^-1)`.
    pub fn x1_posterior(&self) -> GaussianParams<T> {
        let mut cov = chol_inverse(&self.phi) * self.sigma_e2;
        symmetrize(&mut cov);
        GaussianParams {
            mean: self.x1_map(),
            covariance: cov,
        }
    }

    /// One draw from the x1 posterior given standard normal noise `z`.
    pub fn x1_draw(&self, z: &DVector<T>) -> DVector<T> {
        let mut w = z.clone();
        self.phi.l_dirty().tr_solve_lower_triangular_mut(&mut w);
        self.x1_map() + w * self.sigma_e2.sqrt()
    }
}

/// Shared tail of both likelihood paths.
///
/// `b` is the prediction-error vector with x1 set to zero, `a1t_b = A1^T b`
/// and `gram = A1^T A1`.
fn assemble<T: Scalar>(
    b: &DVector<T>,
    a1t_b: &DVector<T>,
    gram: &DMatrix<T>,
    y1: &[T],
    sigma_d2: T,
    sigma_e2: T,
    norm: Normalizer,
) -> Result<LikelihoodTerms<T>> {
    if !(sigma_d2 > T::zero()) || !(sigma_e2 > T::zero()) {
        return Err(Error::Numeric("variances must be positive".into()));
    }
    let m = y1.len();
    let rows = T::from_usize_lossy(b.len());
    let mf = T::from_usize_lossy(m);
    let lambda = sigma_e2 / sigma_d2;
    let y1v = dvec(y1);
    let mut phi = gram.clone();
    for i in 0..m {
        phi[(i, i)] += lambda;
    }
    let (chol, _) = cholesky_jitter(&phi)?;
    let theta = &y1v * lambda - a1t_b;
    let e_min = b.norm_squared() + y1v.norm_squared() * lambda - theta.dot(&chol.solve(&theta));
    let two = T::lit(2.0);
    let logdet = chol_logdet(&chol);
    let (lam_term, det_term) = match norm {
        Normalizer::Derived => (mf / two * lambda.ln(), logdet / two),
        Normalizer::Printed => (mf * lambda.ln(), logdet),
    };
    let loglik = -rows / two * (T::two_pi() * sigma_e2).ln() + lam_term - det_term - e_min / (two * sigma_e2);
    if !loglik.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite marginal likelihood (E_min = {e_min}, lambda = {lambda})"
        )));
    }
    Ok(LikelihoodTerms {
        loglik,
        lambda,
        e_min,
        theta,
        phi: chol,
        sigma_e2,
    })
}

fn check_lengths<T>(part: &SegmentPartition, y: &[T], v_t: &[T]) -> Result<()> {
    if y.len() != part.n {
        return Err(Error::Dimension(format!(
            "block has {} samples, partition expects {}",
            y.len(),
            part.n
        )));
    }
    if v_t.len() != part.tail_len() {
        return Err(Error::Dimension(format!(
            "tail has {} samples, partition expects {}",
            v_t.len(),
            part.tail_len()
        )));
    }
    Ok(())
}

fn check_params<T: Scalar>(part: &SegmentPartition, dp: &DiscontinuityParams<T>) -> Result<()> {
    if part.n0 != dp.n0 || part.m != dp.m {
        return Err(Error::Partition(format!(
            "predictor built for (n0 = {}, M = {}), parameters say (n0 = {}, M = {})",
            part.n0, part.m, dp.n0, dp.m
        )));
    }
    Ok(())
}

/// Dense likelihood terms from an explicitly partitioned predictor.
pub fn likelihood_terms_dense<T: Scalar>(
    y: &[T],
    pp: &PartitionedPredictor<T>,
    dp: &DiscontinuityParams<T>,
    v_t: &[T],
    sigma_e2: T,
    norm: Normalizer,
) -> Result<LikelihoodTerms<T>> {
    let part = pp.partition;
    check_params(&part, dp)?;
    check_lengths(&part, y, v_t)?;
    let (y0, y1, y2) = part.split(y);
    let x2: Vec<T> = y2.iter().zip(v_t).map(|(&a, &b)| a - b).collect();
    let b = &pp.a0 * dvec(y0) + &pp.a2 * dvec(&x2);
    let a1t_b = pp.a1.transpose() * &b;
    let gram = pp.a1.transpose() * &pp.a1;
    assemble(&b, &a1t_b, &gram, y1, dp.sigma_d2, sigma_e2, norm)
}

/// Log marginal likelihood of the block with x1 integrated out.
pub fn marginal_loglik_full<T: Scalar>(
    y: &[T],
    pp: &PartitionedPredictor<T>,
    dp: &DiscontinuityParams<T>,
    v_t: &[T],
    sigma_e2: T,
) -> Result<T> {
    likelihood_terms_dense(y, pp, dp, v_t, sigma_e2, Normalizer::Derived).map(|t| t.loglik)
}

/// Posterior of the destroyed samples given everything else.
pub fn x1_posterior<T: Scalar>(
    y: &[T],
    pp: &PartitionedPredictor<T>,
    dp: &DiscontinuityParams<T>,
    v_t: &[T],
    sigma_e2: T,
) -> Result<GaussianParams<T>> {
    likelihood_terms_dense(y, pp, dp, v_t, sigma_e2, Normalizer::Derived).map(|t| t.x1_posterior())
}

/// Banded likelihood evaluator for one block and AR model.
#[derive(Debug, Clone, Copy)]
pub struct BlockLikelihood<'a, T> {
    pub model: &'a ArModel<T>,
    pub y: &'a [T],
    pub norm: Normalizer,
}

impl<'a, T: Scalar> BlockLikelihood<'a, T> {
    pub fn new(model: &'a ArModel<T>, y: &'a [T]) -> Self {
        BlockLikelihood {
            model,
            y,
            norm: Normalizer::Derived,
        }
    }

    /// Full block with x1 zeroed and the tail replaced by `y2 - v_t`.
    fn zero_filled(&self, part: &SegmentPartition, v_t: &[T]) -> Vec<T> {
        let mut x = self.y.to_vec();
        for v in &mut x[part.i1()] {
            *v = T::zero();
        }
        for (xv, &t) in x[part.i2()].iter_mut().zip(v_t) {
            *xv -= t;
        }
        x
    }

    pub fn terms(&self, part: SegmentPartition, sigma_d2: T, v_t: &[T]) -> Result<LikelihoodTerms<T>> {
        check_lengths(&part, self.y, v_t)?;
        let band = BandedPredictor::new(self.model, part)?;
        let b = band.apply(&self.zero_filled(&part, v_t));
        let a1t_b = DVector::from_vec(band.a1_transpose_apply(&b));
        let gram = band.a1_gram();
        let y1 = &self.y[part.i1()];
        assemble(
            &DVector::from_vec(b),
            &a1t_b,
            &gram,
            y1,
            sigma_d2,
            self.model.sigma_e2,
            self.norm,
        )
    }

    pub fn loglik(&self, part: SegmentPartition, sigma_d2: T, v_t: &[T]) -> Result<T> {
        self.terms(part, sigma_d2, v_t).map(|t| t.loglik)
    }

    /// Gaussian conditional of a tail amplitude `V` when the tail is
    /// `V * g` and x1 is integrated out. Returns `(mean, variance)`.
    pub fn amplitude_conditional(&self, part: SegmentPartition, sigma_d2: T, g: &[T]) -> Result<(T, T)> {
        let c = self.amplitude_solver(part, sigma_d2)?.conditional(g)?;
        Ok((c.mean, c.variance))
    }

    /// Precomputes everything about the amplitude conditional that does not
    /// depend on the tail shape.
    pub fn amplitude_solver(&self, part: SegmentPartition, sigma_d2: T) -> Result<AmplitudeSolver<'a, T>> {
        let zeros = vec![T::zero(); part.tail_len()];
        let t0 = self.terms(part, sigma_d2, &zeros)?;
        let band = BandedPredictor::new(self.model, part)?;
        let b0 = band.apply(&self.zero_filled(&part, &zeros));
        Ok(AmplitudeSolver { band, t0, b0 })
    }
}

/// Amplitude conditional for a fixed partition and burst variance.
pub struct AmplitudeSolver<'a, T: Scalar> {
    band: BandedPredictor<'a, T>,
    t0: LikelihoodTerms<T>,
    b0: Vec<T>,
}

/// Gaussian conditional of the tail amplitude plus the log-likelihood with
/// the amplitude integrated out under a flat prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplitudeConditional<T> {
    pub mean: T,
    pub variance: T,
    pub log_marginal: T,
}

impl<T: Scalar> AmplitudeSolver<'_, T> {
    pub fn conditional(&self, g: &[T]) -> Result<AmplitudeConditional<T>> {
        let part = self.band.partition();
        if g.len() != part.tail_len() {
            return Err(Error::Dimension(format!(
                "tail shape has {} samples, tail has {}",
                g.len(),
                part.tail_len()
            )));
        }
        let mut shape = vec![T::zero(); part.n];
        shape[part.i2()].copy_from_slice(g);
        let h = self.band.apply(&shape);
        let a1t_h = DVector::from_vec(self.band.a1_transpose_apply(&h));
        let phi_a1t_h = self.t0.phi.solve(&a1t_h);
        let hh = h.iter().fold(T::zero(), |a, &v| a + v * v);
        let alpha = hh - a1t_h.dot(&phi_a1t_h);
        // b = b0 - V h; the V-linear part of Theta is +V A1^T h.
        let hb0 = h.iter().zip(&self.b0).fold(T::zero(), |a, (&p, &q)| a + p * q);
        let beta = hb0 + phi_a1t_h.dot(&self.t0.theta);
        if !(alpha > T::zero()) {
            return Err(Error::Numeric(format!(
                "tail amplitude is not identifiable (curvature {alpha})"
            )));
        }
        let s2 = self.t0.sigma_e2;
        let variance = s2 / alpha;
        let log_marginal =
            self.t0.loglik + beta * beta / (T::lit(2.0) * s2 * alpha) + T::lit(0.5) * (T::two_pi() * variance).ln();
        Ok(AmplitudeConditional {
            mean: beta / alpha,
            variance,
            log_marginal,
        })
    }
}

/// Projector and quadratic form of the large-burst-variance limit.
#[derive(Debug, Clone)]
pub struct SimplifiedOperators<T: Scalar> {
    /// Orthogonal projector onto the complement of range(A1).
    pub s: DMatrix<T>,
    /// `(1/sigma_e2) [A0 A2]^T S [A0 A2]`, indexed by `[y0; y2 - v_t]`.
    pub r: DMatrix<T>,
    pub n0: usize,
}

/// Blocks of `R` split at the clean/tail boundary.
#[derive(Debug, Clone)]
pub struct RBlocks<T: Scalar> {
    pub r11: DMatrix<T>,
    pub r12: DMatrix<T>,
    pub r21: DMatrix<T>,
    pub r22: DMatrix<T>,
}

impl<T: Scalar> SimplifiedOperators<T> {
    pub fn blocks(&self) -> RBlocks<T> {
        let n0 = self.n0;
        let k = self.r.nrows() - n0;
        RBlocks {
            r11: self.r.view((0, 0), (n0, n0)).into_owned(),
            r12: self.r.view((0, n0), (n0, k)).into_owned(),
            r21: self.r.view((n0, 0), (k, n0)).into_owned(),
            r22: self.r.view((n0, n0), (k, k)).into_owned(),
        }
    }
}

pub fn simplified_operators<T: Scalar>(pp: &PartitionedPredictor<T>, sigma_e2: T) -> Result<SimplifiedOperators<T>> {
    let rows = pp.a0.nrows();
    let mut s = DMatrix::identity(rows, rows);
    if pp.a1.ncols() > 0 {
        let gram = pp.a1.transpose() * &pp.a1;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numeric("A1^T A1 is singular; burst too long for the block".into()))?;
        let proj = &pp.a1 * chol.solve(&pp.a1.transpose());
        s -= proj;
        symmetrize(&mut s);
    }
    let b = pp.known_columns();
    let mut r = b.transpose() * &s * &b / sigma_e2;
    symmetrize(&mut r);
    Ok(SimplifiedOperators {
        s,
        r,
        n0: pp.a0.ncols(),
    })
}

/// `-z^T R z / 2` with `z = [y0; y2 - v_t]`; proportional to the log
/// likelihood only.
pub fn marginal_loglik_simplified<T: Scalar>(
    y: &[T],
    pp: &PartitionedPredictor<T>,
    sigma_e2: T,
    v_t: &[T],
) -> Result<T> {
    let part = pp.partition;
    check_lengths(&part, y, v_t)?;
    let ops = simplified_operators(pp, sigma_e2)?;
    let (y0, _, y2) = part.split(y);
    let z: Vec<T> = y0
        .iter()
        .copied()
        .chain(y2.iter().zip(v_t).map(|(&a, &b)| a - b))
        .collect();
    let z = dvec(&z);
    Ok(-(z.dot(&(&ops.r * &z))) / T::lit(2.0))
}

/// GP tail posterior under the simplified likelihood and prior `N(0, C)`.
pub fn gp_tail_posterior<T: Scalar>(r: &RBlocks<T>, c: &DMatrix<T>, y0: &[T], y2: &[T]) -> Result<GaussianParams<T>> {
    let k = y2.len();
    if r.r22.nrows() != k || c.nrows() != k || r.r21.ncols() != y0.len() {
        return Err(Error::Dimension("R blocks, Gram matrix and data disagree".into()));
    }
    // (R22 + C^-1)^-1 = (I + C R22)^-1 C, which never inverts the Gram
    // matrix; SE Gram matrices are numerically singular for long length
    // scales. R22 is symmetrized, so the factor two of the completed square
    // cancels.
    let half = T::lit(0.5);
    let r22 = (&r.r22 + r.r22.transpose()) * half;
    let lu = (DMatrix::identity(k, k) + c * &r22).lu();
    let mut cov = lu
        .solve(c)
        .ok_or_else(|| Error::Numeric("GP posterior precision is singular".into()))?;
    symmetrize(&mut cov);
    cholesky_jitter(&cov)?;
    let rhs = (r.r12.transpose() + &r.r21) * dvec(y0) * half + &r22 * dvec(y2);
    let mean = &cov * rhs;
    Ok(GaussianParams { mean, covariance: cov })
}

/// Structured solver for the GP tail posterior mean.
///
/// With the tail rows of the prediction matrix reduced to an identity, the
/// precision splits into a Toeplitz part and a rank-`P` correction, which
/// a Woodbury step handles. Results are memoized per partition and the
/// Toeplitz factorization per tail length.
pub struct GpTailSolver<'a, T: Scalar> {
    model: &'a ArModel<T>,
    y: &'a [T],
    hyper: GpHyper<T>,
    toeplitz: HashMap<usize, (ToeplitzInverse<T>, DMatrix<T>)>,
    memo: HashMap<(usize, usize), Vec<T>>,
}

impl<'a, T: Scalar> GpTailSolver<'a, T> {
    pub fn new(model: &'a ArModel<T>, y: &'a [T], hyper: GpHyper<T>) -> Self {
        GpTailSolver {
            model,
            y,
            hyper,
            toeplitz: HashMap::new(),
            memo: HashMap::new(),
        }
    }

    pub fn hyper(&self) -> &GpHyper<T> {
        &self.hyper
    }

    pub fn mean(&mut self, part: SegmentPartition) -> Result<Vec<T>> {
        if let Some(v) = self.memo.get(&(part.n0, part.m)) {
            return Ok(v.clone());
        }
        let v = self.solve(part)?;
        self.memo.insert((part.n0, part.m), v.clone());
        Ok(v)
    }

    fn solve(&mut self, part: SegmentPartition) -> Result<Vec<T>> {
        let p = self.model.order();
        if part.n != self.y.len() {
            return Err(Error::Dimension("partition does not match block".into()));
        }
        if part.tail_start() < p {
            return Err(Error::Context(format!(
                "tail starts at {} before AR order {p}",
                part.tail_start()
            )));
        }
        let l = part.tail_len();
        if l == 0 {
            return Ok(Vec::new());
        }
        let s2 = self.model.sigma_e2;
        let band = BandedPredictor::new(self.model, part)?;
        let rows = band.rows();
        let tail_row0 = rows - l;
        let fr = p.min(l);

        let gram = band.a1_gram();
        let (gchol, _) = cholesky_jitter(&gram)?;
        // F: A1 restricted to the tail rows, non-zero only in the first P.
        let f_top = band.a1_rows(tail_row0, tail_row0 + fr);
        let head = band.a1_rows(0, tail_row0);
        let g_head = head.transpose() * &head;

        let (tinv, lead) = match self.toeplitz.remove(&l) {
            Some(e) => e,
            None => {
                let mut row = self.hyper.kernel_row(l);
                row[0] += s2;
                let t = ToeplitzInverse::new(&row)?;
                let lead = t.leading_columns(fr);
                (t, lead)
            }
        };

        // Right-hand side: sigma_e2 (R21 y0 + R22 y2) = [u - A1 G^-1 A1^T u]_tail
        // with u = A0 y0 + A2 y2.
        let mut x = self.y.to_vec();
        for v in &mut x[part.i1()] {
            *v = T::zero();
        }
        let u = band.apply(&x);
        let a1t_u = DVector::from_vec(band.a1_transpose_apply(&u));
        let corr = &f_top * gchol.solve(&a1t_u);
        let mut h: Vec<T> = u[tail_row0..].to_vec();
        for i in 0..fr {
            h[i] -= corr[i];
        }
        let hs: Vec<T> = h.iter().map(|&v| v / s2).collect();

        // D^-1 w = s2 (w - s2 T^-1 w), D = I/s2 + C^-1.
        let dinv = |w: &[T]| -> Vec<T> {
            let tw = tinv.solve(w);
            w.iter().zip(&tw).map(|(&a, &b)| s2 * (a - s2 * b)).collect()
        };
        let d_h = dinv(&hs);
        // Woodbury with U U^T = F G^-1 F^T / s2.
        // inner = s2 (G - F^T F + s2 F^T T^-1 F) = s2 (G_head + s2 F^T T^-1 F)
        let tf = lead.rows(0, fr).into_owned() * &f_top;
        let mut inner = (&g_head + f_top.transpose() * &tf * s2) * s2;
        symmetrize(&mut inner);
        let (ichol, _) = cholesky_jitter(&inner)?;
        let ft_dh = f_top.transpose() * DVector::from_row_slice(&d_h[..fr]);
        let coef = ichol.solve(&ft_dh);
        let f_coef = &f_top * coef;
        let mut w = vec![T::zero(); l];
        w[..fr].copy_from_slice(f_coef.as_slice());
        let d_w = dinv(&w);
        let mean: Vec<T> = d_h.iter().zip(&d_w).map(|(&a, &b)| a + b).collect();
        self.toeplitz.insert(l, (tinv, lead));
        Ok(mean)
    }
}

/// Inverse-Gamma posterior parameters of the burst variance.
pub fn sigma_d2_posterior_params<T: Scalar>(v_d: &[T], alpha_d: T, beta_d: T) -> (T, T) {
    let half = T::lit(0.5);
    let ss = v_d.iter().fold(T::zero(), |a, &v| a + v * v);
    (alpha_d + T::from_usize_lossy(v_d.len()) * half, beta_d + half * ss)
}
