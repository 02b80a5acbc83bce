//! Closed-form bounds on the augmentation factor and the perturbation,
//! usable as preflight checks or as test oracles.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::augmentation::PerturbationSample;
use crate::error::{Error, Result};
use crate::mdp::BellmanOperator;
use crate::scalar::Real;

/// Entries with magnitude at or below this count as structural zeros.
pub const NONZERO_THRESHOLD: f64 = 1e-15;

/// Largest dimension handled by a dense eigen-solver; beyond it the spectral
/// radius falls back to a Gelfand-formula estimate.
pub const DENSE_EIGEN_LIMIT: usize = 256;

fn ratio_sq<T: Real>(gamma: T) -> T {
    let r = gamma / (T::one() - gamma);
    r * r
}

fn check_gamma<T: Real>(gamma: T) -> Result<()> {
    if !(gamma >= T::zero() && gamma < T::one()) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(())
}

/// Sample-size thresholds of the positivity and upper-bound statements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasicBounds<T> {
    /// `8γ²/(1−γ)²`: above it `θ > 0`.
    pub n_positive_threshold: T,
    /// `16γ²/(1−γ)²`: above it `θ ≤ upper_bound`.
    pub n_upper_threshold: T,
    /// `1 + 8γ²/((1−γ)²n)`.
    pub upper_bound: T,
    pub positivity_holds: bool,
    pub upper_holds: bool,
}

pub fn basic_bounds<T: Real>(gamma: T, n: u64) -> Result<BasicBounds<T>> {
    check_gamma(gamma)?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    let base = ratio_sq(gamma) * T::lit(8.0);
    let nf = T::lit(n as f64);
    let upper = base * T::lit(2.0);
    Ok(BasicBounds {
        n_positive_threshold: base,
        n_upper_threshold: upper,
        upper_bound: T::one() + base / nf,
        positivity_holds: nf >= base,
        upper_holds: nf >= upper,
    })
}

/// Bound that improves on the basic one when no transition dominates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadBound<T> {
    pub p_max: T,
    pub b_max: T,
    /// `(p_M/n)(γ²/(1−γ)²)((1−γ) + γ√|S| b_M/‖b‖₂)²`.
    pub condition: T,
    /// Whether `condition ≤ 1/2`.
    pub applicable: bool,
    /// `1 + condition`.
    pub upper_bound: T,
}

pub fn spread_bound<T: Real>(p: &DMatrix<T>, b: &DVector<T>, gamma: T, n: u64) -> Result<SpreadBound<T>> {
    check_gamma(gamma)?;
    if !p.is_square() || p.nrows() != b.len() {
        return Err(Error::Shape("P and b disagree in size".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    let b_norm = b.norm();
    if b_norm == T::zero() {
        return Err(Error::ZeroReward);
    }
    let p_max = p.iter().fold(T::zero(), |acc, &x| acc.max(x));
    let b_max = b.amax();
    let states = T::lit(b.len() as f64);
    let spread = (T::one() - gamma) + gamma * states.sqrt() * b_max / b_norm;
    let condition = p_max / T::lit(n as f64) * ratio_sq(gamma) * spread * spread;
    Ok(SpreadBound {
        p_max,
        b_max,
        condition,
        applicable: condition <= T::lit(0.5),
        upper_bound: T::one() + condition,
    })
}

/// `b + γ/(1−γ)·min(b)·1 ≤ (I − γP)⁻¹b ≤ b + γ/(1−γ)·max(b)·1`.
pub fn value_envelope<T: Real>(b: &DVector<T>, gamma: T) -> Result<(DVector<T>, DVector<T>)> {
    check_gamma(gamma)?;
    if b.is_empty() {
        return Err(Error::Shape("empty reward vector".into()));
    }
    let r = gamma / (T::one() - gamma);
    let lo = b.min() * r;
    let hi = b.max() * r;
    Ok((b.add_scalar(lo), b.add_scalar(hi)))
}

/// Whether `|A⁻¹b| ≤ A⁻¹|b|` entrywise, up to `tol` relative to `‖A⁻¹|b|‖∞`.
pub fn abs_dominance_check<T: Real>(p: &DMatrix<T>, b: &DVector<T>, gamma: T, tol: T) -> Result<bool> {
    let op = BellmanOperator::new(p, gamma)?;
    let v = op.solve(b)?;
    let dominant = op.solve(&b.abs())?;
    let slack = tol * dominant.amax().max(T::one());
    Ok(v.iter().zip(dominant.iter()).all(|(&x, &d)| x.abs() <= d + slack))
}

/// `κ`: largest number of structurally nonzero entries in a row.
pub fn kappa<T: Real>(p: &DMatrix<T>) -> usize {
    let threshold = T::lit(NONZERO_THRESHOLD);
    p.row_iter()
        .map(|r| r.iter().filter(|&&x| x.abs() > threshold).count())
        .max()
        .unwrap_or(0)
}

/// Samples per state after which `P[ρ(Ŷ) < 1/C] ≥ 1 − |S|^{1−q}`:
/// `⌈2C²γ²κ/(1−γ)² · ln(2|S|^q)⌉`.
pub fn neumann_requirement<T: Real>(kappa: usize, states: usize, gamma: T, c: T, q: u32) -> Result<u64> {
    check_gamma(gamma)?;
    if !(c > T::zero()) {
        return Err(Error::InvalidArgument("C must be positive".into()));
    }
    if q < 2 || states == 0 || kappa == 0 {
        return Err(Error::InvalidArgument("need q ≥ 2 and a nonempty state space".into()));
    }
    let log_term = std::f64::consts::LN_2 + q as f64 * (states as f64).ln();
    let factor = (T::lit(2.0) * c * c * ratio_sq(gamma) * T::lit(kappa as f64)).as_f64();
    Ok((factor * log_term).ceil() as u64)
}

/// Spectral radius of `Ŷ` with the proof-chain upper bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralReport<T> {
    pub spectral_radius: T,
    /// `(γ/(1−γ))‖P − P̂‖∞`.
    pub inf_norm_bound: T,
    /// `2γ/(1−γ)`, valid for every stochastic `P̂`.
    pub universal_bound: T,
}

pub fn spectral_radius_yhat<T: Real>(sample: &PerturbationSample<T>) -> Result<SpectralReport<T>> {
    let gamma = sample.discount;
    check_gamma(gamma)?;
    let r = gamma / (T::one() - gamma);
    Ok(SpectralReport {
        spectral_radius: spectral_radius(&sample.y_hat)?,
        inf_norm_bound: r * sample.transition_error_inf(),
        universal_bound: r * T::lit(2.0),
    })
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> Result<T> {
    if !m.is_square() {
        return Err(Error::Shape("spectral radius needs a square matrix".into()));
    }
    if m.is_empty() || m.iter().all(|&x| x == T::zero()) {
        return Ok(T::zero());
    }
    if m.nrows() <= DENSE_EIGEN_LIMIT {
        if let Some(schur) = Schur::try_new(m.clone(), T::default_epsilon(), 10_000) {
            let eig = schur.complex_eigenvalues();
            return Ok(eig.iter().map(|z| (z.re * z.re + z.im * z.im).sqrt()).fold(T::zero(), |a, x| a.max(x)));
        }
    }
    gelfand_radius(m)
}

/// `ρ ≈ ‖M^{2^k}‖^{1/2^k}` by rescaled repeated squaring.
fn gelfand_radius<T: Real>(m: &DMatrix<T>) -> Result<T> {
    let mut power = m.clone();
    let mut log_scale = 0.0f64;
    let mut exponent = 1.0f64;
    let mut estimate = f64::NAN;
    for _ in 0..40 {
        let norm = power.norm().as_f64();
        if norm == 0.0 {
            return Ok(T::zero());
        }
        if !norm.is_finite() {
            return Err(Error::EigenFailure);
        }
        power /= T::lit(norm);
        log_scale += norm.ln();
        let next = (log_scale / exponent).exp();
        if (next - estimate).abs() <= 1e-12 * next {
            return Ok(T::lit(next));
        }
        estimate = next;
        power = &power * &power;
        log_scale *= 2.0;
        exponent *= 2.0;
    }
    Ok(T::lit(estimate))
}

/// `‖Ŷ² + (Ŷᵀ)²‖₂` and the `n`-free bound `8γ²/(1−γ)²` it never exceeds.
pub fn h_perturbation_norm<T: Real>(sample: &PerturbationSample<T>) -> (T, T) {
    let y2 = &sample.y_hat * &sample.y_hat;
    let sym = &y2 + y2.transpose();
    let eig = SymmetricEigen::new(sym);
    let norm = eig.eigenvalues.iter().fold(T::zero(), |a, &x| a.max(x.abs()));
    (norm, ratio_sq(sample.discount) * T::lit(8.0))
}

/// Everything the bound checkers can say about one `(P, b, γ, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport<T> {
    pub basic: BasicBounds<T>,
    /// `None` when `b = 0`.
    pub spread: Option<SpreadBound<T>>,
    pub kappa: usize,
    /// Requirement for `C = 1`, `q = 2`.
    pub neumann_n_required: u64,
    pub spectral: Option<SpectralReport<T>>,
}

pub fn bounds_report<T: Real>(
    p: &DMatrix<T>,
    b: &DVector<T>,
    gamma: T,
    n: u64,
    sample: Option<&PerturbationSample<T>>,
) -> Result<BoundsReport<T>> {
    let spread = match spread_bound(p, b, gamma, n) {
        Ok(s) => Some(s),
        Err(Error::ZeroReward) => None,
        Err(e) => return Err(e),
    };
    let k = kappa(p);
    Ok(BoundsReport {
        basic: basic_bounds(gamma, n)?,
        spread,
        kappa: k,
        neumann_n_required: neumann_requirement(k.max(1), p.nrows(), gamma, T::one(), 2)?,
        spectral: sample.map(spectral_radius_yhat).transpose()?,
    })
}
