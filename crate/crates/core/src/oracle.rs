//! Ground-truth references for the augmentation factor.
//!
//! Every draw of `P̂` reduces to two sufficient statistics,
//! `num = bᵀMAv̂` and `den = E_b̂[v̂ᵀAᵀMAv̂]`, because
//! `‖v − εv̂‖²_M = bᵀMb − 2ε·num + ε²·den` is exactly quadratic in `ε`.
//! Exhaustive enumeration and Monte Carlo both produce the same
//! [`MseStatistics`], from which `ε*`, the MSE curve and `η` follow.

use nalgebra::{DMatrix, DVector};

use crate::augmentation::AugmentationMoments;
use crate::error::{Error, Result};
use crate::mdp::{BellmanOperator, InducedModel, NormKind, NormSpec};
use crate::sampling::{sample_rewards, sample_transition, RandomStream, RewardCovMode, SampleSizes};
use crate::scalar::Real;

/// Upper limit on the number of joint multinomial outcomes enumerated.
pub const MAX_OUTCOMES: u64 = 1_000_000;

/// How reward noise enters the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardTreatment {
    /// `E_b̂` in closed form: `bᵀQb + tr(cov[b̂] Q)` with `Q = Â⁻ᵀAᵀMAÂ⁻¹`.
    #[default]
    Decomposition,
    /// Draw `b̂` alongside `P̂` in every trial.
    Sampled,
}

/// Moments of `(num, den)` over the law of `P̂` (and `b̂` when sampled).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseStatistics<T> {
    pub b_norm_sq: T,
    pub mean_num: T,
    pub mean_den: T,
    pub var_num: T,
    pub var_den: T,
    pub cov_num_den: T,
    /// Monte-Carlo sample count; `None` for exact enumeration.
    pub samples: Option<usize>,
}

impl<T: Real> MseStatistics<T> {
    /// `ε* = E[num] / E[den]`.
    pub fn epsilon_star(&self) -> Result<T> {
        if !(self.mean_den > T::zero()) {
            return Err(Error::Degenerate {
                denominator: self.mean_den.as_f64(),
                g: f64::NAN,
                h: f64::NAN,
                t: f64::NAN,
            });
        }
        Ok(self.mean_num / self.mean_den)
    }

    /// Delta-method standard error of the ratio estimate of `ε*`.
    pub fn epsilon_star_std_error(&self) -> T {
        let Some(samples) = self.samples else {
            return T::zero();
        };
        let d = self.mean_den;
        let r = self.mean_num / d;
        let var = (self.var_num - r * self.cov_num_den * T::lit(2.0) + r * r * self.var_den) / (d * d);
        (var.max(T::zero()) / T::lit(samples as f64)).sqrt()
    }

    /// `MSE(ε)`.
    pub fn mse(&self, epsilon: T) -> T {
        self.b_norm_sq - self.mean_num * epsilon * T::lit(2.0) + self.mean_den * epsilon * epsilon
    }

    /// Standard error of the Monte-Carlo estimate of `MSE(ε)`.
    pub fn mse_std_error(&self, epsilon: T) -> T {
        let Some(samples) = self.samples else {
            return T::zero();
        };
        let e = epsilon;
        let four = T::lit(4.0);
        let var = four * e * e * self.var_num + e * e * e * e * self.var_den
            - four * e * e * e * self.cov_num_den;
        (var.max(T::zero()) / T::lit(samples as f64)).sqrt()
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<T> {
    pub value: T,
    pub std_error: T,
}

/// Scores draws of `P̂` against a fixed ground truth.
#[derive(Debug, Clone)]
pub struct DrawEvaluator<T: Real> {
    model: InducedModel<T>,
    sizes: SampleSizes,
    gram: DMatrix<T>,
    gram_is_identity: bool,
    /// `AᵀMA v = AᵀMb`.
    weighted_value: DVector<T>,
    b_norm_sq: T,
    reward_cov: DVector<T>,
    treatment: RewardTreatment,
}

impl<T: Real> DrawEvaluator<T> {
    pub fn new(
        model: &InducedModel<T>,
        n: &SampleSizes,
        norm: &NormSpec<T>,
        treatment: RewardTreatment,
    ) -> Result<Self> {
        n.validate(model.num_states())?;
        let op = BellmanOperator::new(model.transition(), model.discount())?;
        let eval_norm = norm.evaluation();
        let gram = eval_norm.gram(&op)?;
        let v = op.solve(model.reward())?;
        let weighted_value = &gram * &v;
        let b_norm_sq = v.dot(&weighted_value);
        Ok(Self {
            gram_is_identity: matches!(eval_norm.kind(), NormKind::L2Exact),
            model: model.clone(),
            sizes: n.clone(),
            gram,
            weighted_value,
            b_norm_sq,
            reward_cov: model.reward_cov(n),
            treatment,
        })
    }

    pub fn b_norm_sq(&self) -> T {
        self.b_norm_sq
    }

    /// `(num, den)` for one estimated transition matrix, with `b̂` either
    /// integrated out or given explicitly.
    pub fn evaluate(&self, p_hat: &DMatrix<T>, reward_hat: Option<&DVector<T>>) -> Result<(T, T)> {
        let op_hat = BellmanOperator::new(p_hat, self.model.discount())?;
        let rhs = reward_hat.unwrap_or(self.model.reward());
        let v_hat = op_hat.solve(rhs)?;
        let num = self.weighted_value.dot(&v_hat);
        let mut den = if self.gram_is_identity {
            v_hat.norm_squared()
        } else {
            v_hat.dot(&(&self.gram * &v_hat))
        };
        if reward_hat.is_none() && self.reward_cov.iter().any(|&c| c != T::zero()) {
            let inv = op_hat.inverse();
            let weighted = if self.gram_is_identity { inv.clone() } else { &self.gram * &inv };
            for (i, &c) in self.reward_cov.iter().enumerate() {
                if c != T::zero() {
                    den += c * inv.column(i).dot(&weighted.column(i));
                }
            }
        }
        Ok((num, den))
    }

    /// Draws one `P̂` (and `b̂` in [`RewardTreatment::Sampled`]) from `stream` and scores it.
    pub fn sample(&self, stream: RandomStream) -> Result<(T, T)> {
        let mut rng = stream.rng();
        let p_hat = sample_transition(self.model.transition(), &self.sizes, &mut rng);
        match self.treatment {
            RewardTreatment::Decomposition => self.evaluate(&p_hat, None),
            RewardTreatment::Sampled => {
                let (b_hat, _) = sample_rewards(&self.model, &self.sizes, RewardCovMode::Oracle, &mut rng)?;
                self.evaluate(&p_hat, Some(&b_hat))
            }
        }
    }
}

/// Sum in a fixed binary-tree order, independent of how the terms were produced.
pub fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    if xs.len() <= 8 {
        return xs.iter().fold(T::zero(), |acc, &x| acc + x);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample moments of per-trial statistics.
pub fn statistics_from_draws<T: Real>(b_norm_sq: T, draws: &[(T, T)]) -> Result<MseStatistics<T>> {
    if draws.len() < 2 {
        return Err(Error::InvalidArgument("at least two trials are required".into()));
    }
    let count = T::lit(draws.len() as f64);
    let nums: Vec<T> = draws.iter().map(|d| d.0).collect();
    let dens: Vec<T> = draws.iter().map(|d| d.1).collect();
    let mean_num = pairwise_sum(&nums) / count;
    let mean_den = pairwise_sum(&dens) / count;
    let dn: Vec<T> = nums.iter().map(|&x| (x - mean_num) * (x - mean_num)).collect();
    let dd: Vec<T> = dens.iter().map(|&x| (x - mean_den) * (x - mean_den)).collect();
    let dc: Vec<T> = draws
        .iter()
        .map(|&(a, b)| (a - mean_num) * (b - mean_den))
        .collect();
    let dof = count - T::one();
    Ok(MseStatistics {
        b_norm_sq,
        mean_num,
        mean_den,
        var_num: pairwise_sum(&dn) / dof,
        var_den: pairwise_sum(&dd) / dof,
        cov_num_den: pairwise_sum(&dc) / dof,
        samples: Some(draws.len()),
    })
}

/// Monte-Carlo statistics over `trials` independent draws; trial `k` uses
/// `stream.substream(k)`.
pub fn mc_statistics<T: Real>(
    model: &InducedModel<T>,
    n: &SampleSizes,
    trials: usize,
    norm: &NormSpec<T>,
    treatment: RewardTreatment,
    stream: RandomStream,
) -> Result<MseStatistics<T>> {
    if trials < 2 {
        return Err(Error::InvalidArgument("at least two trials are required".into()));
    }
    let eval = DrawEvaluator::new(model, n, norm, treatment)?;
    let draws = (0..trials)
        .map(|k| eval.sample(stream.substream(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    statistics_from_draws(eval.b_norm_sq(), &draws)
}

/// Monte-Carlo `ε*` with a delta-method standard error.
pub fn mc_epsilon_star<T: Real>(
    model: &InducedModel<T>,
    n: &SampleSizes,
    trials: usize,
    norm: &NormSpec<T>,
    stream: RandomStream,
) -> Result<Estimate<T>> {
    let stats = mc_statistics(model, n, trials, norm, RewardTreatment::Decomposition, stream)?;
    Ok(Estimate {
        value: stats.epsilon_star()?,
        std_error: stats.epsilon_star_std_error(),
    })
}

/// All count vectors of `n` over `k` cells, lexicographically descending in the first cell.
fn compositions(n: u64, k: usize) -> Vec<Vec<u64>> {
    fn rec(n: u64, k: usize, prefix: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if k == 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=n).rev() {
            prefix.push(first);
            rec(n - first, k - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

fn ln_factorial(k: u64) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// `C(n + k − 1, k − 1)` in floating point.
fn composition_count(n: u64, k: usize) -> f64 {
    let k = k as u64;
    (ln_factorial(n + k - 1) - ln_factorial(n) - ln_factorial(k - 1)).exp().round()
}

/// Possible values of one empirical row with their probabilities.
fn row_outcomes<T: Real>(p: &[T], n: u64) -> Vec<(Vec<T>, f64)> {
    let support: Vec<usize> = (0..p.len()).filter(|&j| p[j] > T::zero()).collect();
    let ln_n = ln_factorial(n);
    compositions(n, support.len())
        .into_iter()
        .map(|counts| {
            let mut row = vec![T::zero(); p.len()];
            let mut ln_prob = ln_n;
            for (&j, &c) in support.iter().zip(&counts) {
                row[j] = T::lit(c as f64) / T::lit(n as f64);
                ln_prob += c as f64 * p[j].as_f64().ln() - ln_factorial(c);
            }
            (row, ln_prob.exp())
        })
        .collect()
}

/// Visits every joint outcome of `P̂` with its probability, rows varying as
/// an odometer whose last row turns fastest.
///
/// Zero-probability entries of `P` are never populated, so the outcome count
/// is `Π_i C(n_i + k_i − 1, k_i − 1)` with `k_i` the support size of row `i`.
pub fn for_each_outcome<T: Real, F>(p: &DMatrix<T>, n: &SampleSizes, mut visit: F) -> Result<()>
where
    F: FnMut(&DMatrix<T>, f64) -> Result<()>,
{
    let states = p.nrows();
    n.validate(states)?;
    let mut total = 1.0f64;
    for i in 0..states {
        let support = p.row(i).iter().filter(|&&x| x > T::zero()).count();
        total *= composition_count(n.get(i), support);
    }
    if total > MAX_OUTCOMES as f64 {
        return Err(Error::TooManyOutcomes {
            outcomes: total,
            limit: MAX_OUTCOMES,
        });
    }
    let per_row: Vec<Vec<(Vec<T>, f64)>> = (0..states)
        .map(|i| {
            let row: Vec<T> = p.row(i).iter().copied().collect();
            row_outcomes(&row, n.get(i))
        })
        .collect();
    let mut index = vec![0usize; states];
    let mut p_hat = DMatrix::zeros(states, states);
    loop {
        let mut prob = 1.0;
        for (i, &k) in index.iter().enumerate() {
            let (row, pr) = &per_row[i][k];
            prob *= pr;
            for (j, &x) in row.iter().enumerate() {
                p_hat[(i, j)] = x;
            }
        }
        visit(&p_hat, prob)?;
        let mut r = states;
        loop {
            if r == 0 {
                return Ok(());
            }
            r -= 1;
            index[r] += 1;
            if index[r] < per_row[r].len() {
                break;
            }
            index[r] = 0;
        }
    }
}

/// Exact statistics by enumerating every multinomial outcome of `P̂`; reward
/// noise is integrated out in closed form.
pub fn exhaustive_statistics<T: Real>(
    model: &InducedModel<T>,
    n: &SampleSizes,
    norm: &NormSpec<T>,
) -> Result<MseStatistics<T>> {
    let eval = DrawEvaluator::new(model, n, norm, RewardTreatment::Decomposition)?;
    let mut draws: Vec<(T, T, f64)> = Vec::new();
    for_each_outcome(model.transition(), n, |p_hat, prob| {
        let (a, b) = eval.evaluate(p_hat, None)?;
        draws.push((a, b, prob));
        Ok(())
    })?;
    let total: f64 = draws.iter().map(|d| d.2).sum();
    let w = |p: f64| T::lit(p / total);
    let terms = |f: &dyn Fn(&(T, T, f64)) -> T| -> T {
        let xs: Vec<T> = draws.iter().map(|d| f(d) * w(d.2)).collect();
        pairwise_sum(&xs)
    };
    let mean_num = terms(&|d| d.0);
    let mean_den = terms(&|d| d.1);
    Ok(MseStatistics {
        b_norm_sq: eval.b_norm_sq(),
        mean_num,
        mean_den,
        var_num: terms(&|d| (d.0 - mean_num) * (d.0 - mean_num)),
        var_den: terms(&|d| (d.1 - mean_den) * (d.1 - mean_den)),
        cov_num_den: terms(&|d| (d.0 - mean_num) * (d.1 - mean_den)),
        samples: None,
    })
}

pub fn exhaustive_epsilon_star<T: Real>(
    model: &InducedModel<T>,
    n: &SampleSizes,
    norm: &NormSpec<T>,
) -> Result<T> {
    exhaustive_statistics(model, n, norm)?.epsilon_star()
}

/// `MSE(ε) = E‖v − εv̂‖²_M` sampled on a grid of factors.
#[derive(Debug, Clone, PartialEq)]
pub struct MseCurve<T> {
    pub epsilons: Vec<T>,
    pub mse_values: Vec<T>,
    pub std_errors: Vec<T>,
    /// `(a₂, a₁, a₀)` of `MSE(ε) = a₂ε² + a₁ε + a₀`.
    pub quad_coeffs: (T, T, T),
    pub statistics: MseStatistics<T>,
}

impl<T: Real> MseCurve<T> {
    pub fn from_statistics(statistics: MseStatistics<T>, epsilons: &[T]) -> Self {
        let two = T::lit(2.0);
        Self {
            epsilons: epsilons.to_vec(),
            mse_values: epsilons.iter().map(|&e| statistics.mse(e)).collect(),
            std_errors: epsilons.iter().map(|&e| statistics.mse_std_error(e)).collect(),
            quad_coeffs: (statistics.mean_den, -two * statistics.mean_num, statistics.b_norm_sq),
            statistics,
        }
    }

    /// The fitted quadratic at `ε`.
    pub fn evaluate(&self, epsilon: T) -> T {
        let (a2, a1, a0) = self.quad_coeffs;
        (a2 * epsilon + a1) * epsilon + a0
    }

    /// Minimizer of the quadratic, i.e. the estimated `ε*`.
    pub fn minimizer(&self) -> Result<T> {
        self.statistics.epsilon_star()
    }
}

pub fn mse_curve<T: Real>(
    model: &InducedModel<T>,
    n: &SampleSizes,
    epsilons: &[T],
    trials: usize,
    norm: &NormSpec<T>,
    stream: RandomStream,
) -> Result<MseCurve<T>> {
    let stats = mc_statistics(model, n, trials, norm, RewardTreatment::Decomposition, stream)?;
    Ok(MseCurve::from_statistics(stats, epsilons))
}

/// Second-order surrogate `(1 − ε)²‖b‖²_M + (g + h + t)ε² − hε`, minimized at `ε°`.
pub fn surrogate_mse<T: Real>(moments: &AugmentationMoments<T>, b_norm_sq: T, epsilon: T) -> T {
    let g = moments.g_scalar;
    let h = moments.h_scalar;
    let t = moments.t_scalar;
    let shrink = T::one() - epsilon;
    shrink * shrink * b_norm_sq + (g + h + t) * epsilon * epsilon - h * epsilon
}

/// Relative error reduction of one factor against the naive estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionReport<T> {
    pub mse_naive: T,
    pub mse_augmented: T,
    pub eta: T,
}

/// `η = (MSE(1) − MSE(ε)) / MSE(1)` from the fitted quadratic.
pub fn error_reduction<T: Real>(curve: &MseCurve<T>, epsilon: T) -> Result<ReductionReport<T>> {
    let mse_naive = curve.evaluate(T::one());
    let b_sq = curve.statistics.b_norm_sq;
    let scale = if b_sq > T::zero() { b_sq } else { T::one() };
    if !(mse_naive > T::degeneracy_tol() * scale) {
        return Err(Error::ZeroNaiveError(mse_naive.as_f64()));
    }
    let mse_augmented = curve.evaluate(epsilon);
    Ok(ReductionReport {
        mse_naive,
        mse_augmented,
        eta: (mse_naive - mse_augmented) / mse_naive,
    })
}
