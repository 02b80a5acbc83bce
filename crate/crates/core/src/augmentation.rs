//! Second-order moments of the model perturbation and the shrinkage factor
//! built from them.
//!
//! With `Ŷ = γ(P − P̂)A⁻¹` and row covariances `B_i = (diag p_i − p_i p_iᵀ)/n_i`,
//!
//! ```text
//! G = E[ŶᵀMŶ]            = γ² A⁻ᵀ (Σ_i M_ii B_i) A⁻¹
//! C = E[(Ŷᵀ)²]           = γ² Σ_i A⁻ᵀ B_i A⁻¹ diag(e_i)
//! H = E[(Ŷᵀ)²M + MŶ²]    = C M + M Cᵀ
//! θ(b, P) = bᵀ(M + H/2)b / (bᵀ(M + G + H)b + tr(cov[b̂](M + G + H)))
//! ```
//!
//! Every column of `A⁻¹ diag(e_i)` but the `i`-th vanishes, so `C` costs one
//! `O(|S|)` covariance product per state plus a single dense multiply.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{BellmanOperator, NormKind, NormSpec};
use crate::sampling::{sample_transition, EstimatedModel, RandomStream, SampleSizes};
use crate::scalar::Real;

fn check_probability_vector<T: Real>(p: &[T]) -> Result<()> {
    if p.iter().any(|&x| !(x >= T::zero())) {
        return Err(Error::InvalidArgument("probability vector has a negative entry".into()));
    }
    let sum = p.iter().fold(T::zero(), |acc, &x| acc + x);
    if (sum - T::one()).abs() > T::renormalize_tol() {
        return Err(Error::InvalidArgument(format!("probability vector sums to {sum}")));
    }
    Ok(())
}

/// Covariance of one empirical transition row: `(diag p − p pᵀ) / n`.
pub fn row_covariance<T: Real>(p: &[T], n: u64) -> Result<DMatrix<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    check_probability_vector(p)?;
    let k = p.len();
    let scale = T::one() / T::lit(n as f64);
    Ok(DMatrix::from_fn(k, k, |i, j| {
        let diag = if i == j { p[i] } else { T::zero() };
        (diag - p[i] * p[j]) * scale
    }))
}

/// `B_i x` without materializing `B_i`.
fn row_covariance_apply<T: Real>(p: &[T], n: u64, x: &[T]) -> Vec<T> {
    let scale = T::one() / T::lit(n as f64);
    let px = p.iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    p.iter()
        .zip(x)
        .map(|(&pi, &xi)| (pi * xi - pi * px) * scale)
        .collect()
}

/// Moments `G`, `H` and the scalars `g`, `h`, `t` for one `(P, b, cov[b̂], n, M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationMoments<T: Real> {
    transition: DMatrix<T>,
    sample_sizes: SampleSizes,
    pub m_matrix: DMatrix<T>,
    pub g_matrix: DMatrix<T>,
    /// `E[(Ŷᵀ)²]`.
    pub c_matrix: DMatrix<T>,
    pub h_matrix: DMatrix<T>,
    /// `bᵀMb`, the squared norm of the exact value.
    pub b_norm_sq: T,
    pub g_scalar: T,
    pub h_scalar: T,
    pub t_scalar: T,
}

impl<T: Real> AugmentationMoments<T> {
    /// `B_i`, rebuilt on demand so that large state spaces do not store `|S|³` entries.
    pub fn row_covariance(&self, i: usize) -> DMatrix<T> {
        let row: Vec<T> = self.transition.row(i).iter().copied().collect();
        row_covariance(&row, self.sample_sizes.get(i)).expect("validated when the moments were built")
    }

    pub fn num_states(&self) -> usize {
        self.transition.nrows()
    }

    /// Numerator and denominator of `θ`.
    pub fn factor_terms(&self) -> (T, T) {
        let two = T::lit(2.0);
        (
            self.b_norm_sq + self.h_scalar / two,
            self.b_norm_sq + self.g_scalar + self.h_scalar + self.t_scalar,
        )
    }
}

fn check_inputs<T: Real>(
    p: &DMatrix<T>,
    b: &DVector<T>,
    reward_cov: &DVector<T>,
    n: &SampleSizes,
) -> Result<()> {
    let states = p.nrows();
    if p.ncols() != states || b.len() != states || reward_cov.len() != states {
        return Err(Error::Shape(format!(
            "P is {}x{}, b has {} entries, cov has {}",
            p.nrows(),
            p.ncols(),
            b.len(),
            reward_cov.len()
        )));
    }
    n.validate(states)?;
    if reward_cov.iter().any(|&c| !(c >= T::zero())) {
        return Err(Error::InvalidArgument("reward covariance must be nonnegative".into()));
    }
    for i in 0..states {
        let row: Vec<T> = p.row(i).iter().copied().collect();
        check_probability_vector(&row).map_err(|e| Error::InvalidDistribution {
            row: i,
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

/// `bᵀXb` and `Σ_i cov_i X_ii`.
fn quad_and_trace<T: Real>(x: &DMatrix<T>, b: &DVector<T>, cov: &DVector<T>) -> (T, T) {
    let quad = b.dot(&(x * b));
    let trace = cov
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (i, &c)| acc + c * x[(i, i)]);
    (quad, trace)
}

fn assemble<T: Real>(
    transition: &DMatrix<T>,
    sample_sizes: &SampleSizes,
    m: DMatrix<T>,
    g: DMatrix<T>,
    c: DMatrix<T>,
    b: &DVector<T>,
    reward_cov: &DVector<T>,
) -> AugmentationMoments<T> {
    let h = &c * &m + &m * c.transpose();
    let b_norm_sq = b.dot(&(&m * b));
    let g_scalar = b.dot(&(&g * b));
    let h_scalar = b.dot(&(&h * b));
    let k = &m + &g + &h;
    let (_, t_scalar) = quad_and_trace(&k, b, reward_cov);
    AugmentationMoments {
        transition: transition.clone(),
        sample_sizes: sample_sizes.clone(),
        m_matrix: m,
        g_matrix: g,
        c_matrix: c,
        h_matrix: h,
        b_norm_sq,
        g_scalar,
        h_scalar,
        t_scalar,
    }
}

/// Closed-form moments under multinomial row sampling.
pub fn compute_moments<T: Real>(
    p: &DMatrix<T>,
    b: &DVector<T>,
    reward_cov: &DVector<T>,
    n: &SampleSizes,
    gamma: T,
    norm: &NormSpec<T>,
) -> Result<AugmentationMoments<T>> {
    check_inputs(p, b, reward_cov, n)?;
    let op = BellmanOperator::new(p, gamma)?;
    let m = norm.matrix(&op)?;
    let inv = op.inverse();
    let states = p.nrows();
    let gamma_sq = gamma * gamma;

    // Σ_i (M_ii / n_i)(diag p_i − p_i p_iᵀ) = diag(Pᵀw) − Pᵀ diag(w) P.
    let weights = DVector::from_fn(states, |i, _| m[(i, i)] / T::lit(n.get(i) as f64));
    let pt = p.transpose();
    let mut weighted = p.clone();
    for i in 0..states {
        weighted.row_mut(i).scale_mut(weights[i]);
    }
    let mut d = -(&pt * &weighted);
    let diag = &pt * &weights;
    for j in 0..states {
        d[(j, j)] += diag[j];
    }
    let inv_t = inv.transpose();
    let g = (&inv_t * d * &inv) * gamma_sq;

    // Column i of Σ_i B_i A⁻¹ diag(e_i) is B_i (A⁻¹ e_i).
    let mut cols = DMatrix::zeros(states, states);
    for i in 0..states {
        let row: Vec<T> = p.row(i).iter().copied().collect();
        let x: Vec<T> = inv.column(i).iter().copied().collect();
        let bx = row_covariance_apply(&row, n.get(i), &x);
        for (k, v) in bx.into_iter().enumerate() {
            cols[(k, i)] = v;
        }
    }
    let c = (&inv_t * cols) * gamma_sq;
    Ok(assemble(p, n, m, g, c, b, reward_cov))
}

/// Divides the factor terms, rejecting zero rewards and vanishing denominators.
fn factor_from_moments<T: Real>(moments: &AugmentationMoments<T>, b: &DVector<T>) -> Result<(T, T, T)> {
    if b.iter().all(|&x| x == T::zero()) {
        return Err(Error::ZeroReward);
    }
    let (num, den) = moments.factor_terms();
    if !(den > T::degeneracy_tol() * moments.b_norm_sq) {
        return Err(Error::Degenerate {
            denominator: den.as_f64(),
            g: moments.g_scalar.as_f64(),
            h: moments.h_scalar.as_f64(),
            t: moments.t_scalar.as_f64(),
        });
    }
    Ok((num / den, num, den))
}

/// Second-order optimal augmentation factor `θ(b, P)`.
pub fn theta<T: Real>(
    p: &DMatrix<T>,
    b: &DVector<T>,
    reward_cov: &DVector<T>,
    n: &SampleSizes,
    gamma: T,
    norm: &NormSpec<T>,
) -> Result<T> {
    let moments = compute_moments(p, b, reward_cov, n, gamma, norm)?;
    factor_from_moments(&moments, b).map(|(eps, _, _)| eps)
}

/// `Ẑ = γ(P − P̂)` and `Ŷ = ẐA⁻¹` for one draw of `P̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSample<T: Real> {
    pub z_hat: DMatrix<T>,
    pub y_hat: DMatrix<T>,
    pub discount: T,
}

impl<T: Real> PerturbationSample<T> {
    pub fn new(p: &DMatrix<T>, p_hat: &DMatrix<T>, op: &BellmanOperator<T>) -> Result<Self> {
        if p.shape() != p_hat.shape() || p.nrows() != op.dim() {
            return Err(Error::Shape("P, P̂ and A disagree in size".into()));
        }
        let z_hat = (p - p_hat) * op.discount();
        let y_hat = &z_hat * op.inverse();
        Ok(Self {
            z_hat,
            y_hat,
            discount: op.discount(),
        })
    }

    /// `‖P − P̂‖∞`.
    pub fn transition_error_inf(&self) -> T {
        let scale = if self.discount > T::zero() {
            T::one() / self.discount
        } else {
            T::zero()
        };
        max_abs_row_sum(&self.z_hat) * scale
    }
}

pub(crate) fn max_abs_row_sum<T: Real>(m: &DMatrix<T>) -> T {
    m.row_iter()
        .map(|r| r.iter().fold(T::zero(), |acc, &x| acc + x.abs()))
        .fold(T::zero(), |acc, x| acc.max(x))
}

/// Factors computed for one estimated model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorReport<T: Real> {
    /// `θ(b, P)` with oracle access to the truth, when available.
    pub epsilon_circ: Option<T>,
    /// Plug-in `θ(b̂, P̂)`.
    pub epsilon_tilde: T,
    pub epsilon_boot: Option<T>,
    pub norm_kind: NormKind,
    pub numerator: T,
    pub denominator: T,
    pub moments: AugmentationMoments<T>,
}

/// Plug-in factor `ε̃° = θ(b̂, P̂)`; for the l2 norms `M` is built from `Â`.
pub fn plugin_factor<T: Real>(est: &EstimatedModel<T>, norm: &NormSpec<T>) -> Result<FactorReport<T>> {
    let moments = compute_moments(
        est.transition_hat(),
        est.reward_hat(),
        est.reward_cov_hat(),
        est.samples_per_state(),
        est.discount(),
        norm,
    )?;
    let (eps, numerator, denominator) = factor_from_moments(&moments, est.reward_hat())?;
    Ok(FactorReport {
        epsilon_circ: None,
        epsilon_tilde: eps,
        epsilon_boot: None,
        norm_kind: norm.kind(),
        numerator,
        denominator,
        moments,
    })
}

/// `ε Â⁻¹ b̂`.
pub fn augmented_value<T: Real>(est: &EstimatedModel<T>, epsilon: T) -> Result<DVector<T>> {
    let op = BellmanOperator::new(est.transition_hat(), est.discount())?;
    Ok(op.solve(est.reward_hat())? * epsilon)
}

/// Bootstrap approximation of `ε°`: `G̃`, `H̃` are empirical means over `l`
/// resamples `P̃ ~ M_n(P̂)` of `Ỹ = γ(P̂ − P̃)Â⁻¹`.
pub fn bootstrap_factor<T: Real>(
    est: &EstimatedModel<T>,
    l: usize,
    norm: &NormSpec<T>,
    stream: RandomStream,
) -> Result<T> {
    if l == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one resample".into()));
    }
    let p_hat = est.transition_hat();
    let op = BellmanOperator::new(p_hat, est.discount())?;
    let m = norm.matrix(&op)?;
    let inv = op.inverse();
    let states = est.num_states();
    let mut g = DMatrix::zeros(states, states);
    let mut c = DMatrix::zeros(states, states);
    let mut rng = stream.rng();
    for _ in 0..l {
        let resample = sample_transition(p_hat, est.samples_per_state(), &mut rng);
        let y = (p_hat - resample) * est.discount() * &inv;
        let yt = y.transpose();
        g += &yt * &m * &y;
        c += &yt * &yt;
    }
    let inv_l = T::one() / T::lit(l as f64);
    let moments = assemble(
        p_hat,
        est.samples_per_state(),
        m,
        g * inv_l,
        c * inv_l,
        est.reward_hat(),
        est.reward_cov_hat(),
    );
    factor_from_moments(&moments, est.reward_hat()).map(|(eps, _, _)| eps)
}
