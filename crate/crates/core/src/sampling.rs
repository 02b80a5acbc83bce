//! Seeded multinomial sampling of the empirical model `(P̂, b̂, Σ̃)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mdp::{check_discount, is_row_stochastic, InducedModel, RewardNoise};
use crate::scalar::Real;

/// Reproducible source of randomness addressed by `(seed, stream_id)`.
///
/// Streams are independent ChaCha8 sequences, so per-trial work can be
/// scheduled in any order without changing the draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Child stream for work item `index`; the same `(self, index)` always
    /// names the same child.
    pub fn substream(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x6a09_e667))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Number of observed transitions per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleSizes {
    Uniform(u64),
    PerState(Vec<u64>),
}

impl SampleSizes {
    pub fn get(&self, state: usize) -> u64 {
        match self {
            Self::Uniform(n) => *n,
            Self::PerState(ns) => ns[state],
        }
    }

    pub fn validate(&self, states: usize) -> Result<()> {
        match self {
            Self::Uniform(0) => Err(Error::InvalidArgument("sample size must be positive".into())),
            Self::Uniform(_) => Ok(()),
            Self::PerState(ns) if ns.len() != states => Err(Error::Shape(format!(
                "{} sample sizes for {states} states",
                ns.len()
            ))),
            Self::PerState(ns) if ns.contains(&0) => {
                Err(Error::InvalidArgument("sample sizes must be positive".into()))
            }
            Self::PerState(_) => Ok(()),
        }
    }

    pub fn to_vec(&self, states: usize) -> Vec<u64> {
        (0..states).map(|i| self.get(i)).collect()
    }

    /// The same sizes multiplied by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        match self {
            Self::Uniform(n) => Self::Uniform(n * k),
            Self::PerState(ns) => Self::PerState(ns.iter().map(|n| n * k).collect()),
        }
    }
}

impl From<u64> for SampleSizes {
    fn from(n: u64) -> Self {
        Self::Uniform(n)
    }
}

/// Where `Σ̃` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardCovMode {
    /// Ground-truth per-sample variance divided by `n_i`.
    #[default]
    Oracle,
    /// Unbiased sample variance of the `n_i` reward draws, divided by `n_i`.
    SampleVariance,
}

/// Empirical model drawn under the row-wise multinomial sampling scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedModel<T: Real> {
    transition_hat: DMatrix<T>,
    reward_hat: DVector<T>,
    reward_cov_hat: DVector<T>,
    samples_per_state: SampleSizes,
    discount: T,
}

impl<T: Real> EstimatedModel<T> {
    /// Assembles an estimate from given parts, e.g. a synthetic `P̂ = P`.
    pub fn from_parts(
        transition_hat: DMatrix<T>,
        reward_hat: DVector<T>,
        reward_cov_hat: DVector<T>,
        samples_per_state: SampleSizes,
        discount: T,
    ) -> Result<Self> {
        let states = transition_hat.nrows();
        if transition_hat.ncols() != states
            || reward_hat.len() != states
            || reward_cov_hat.len() != states
        {
            return Err(Error::Shape("estimated model parts disagree in size".into()));
        }
        samples_per_state.validate(states)?;
        check_discount(discount)?;
        if !is_row_stochastic(&transition_hat) {
            return Err(Error::InvalidArgument("P̂ is not row-stochastic".into()));
        }
        if reward_cov_hat.iter().any(|&c| !(c >= T::zero())) {
            return Err(Error::InvalidArgument("Σ̃ must be nonnegative".into()));
        }
        Ok(Self {
            transition_hat,
            reward_hat,
            reward_cov_hat,
            samples_per_state,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.reward_hat.len()
    }

    pub fn transition_hat(&self) -> &DMatrix<T> {
        &self.transition_hat
    }

    pub fn reward_hat(&self) -> &DVector<T> {
        &self.reward_hat
    }

    /// Diagonal of `Σ̃`.
    pub fn reward_cov_hat(&self) -> &DVector<T> {
        &self.reward_cov_hat
    }

    pub fn samples_per_state(&self) -> &SampleSizes {
        &self.samples_per_state
    }

    pub fn discount(&self) -> T {
        self.discount
    }
}

/// Draws `multinomial(n, p) / n` into `out` by sequential binomial conditioning.
pub(crate) fn sample_multinomial_row<T: Real, R: Rng + ?Sized>(
    p: impl Iterator<Item = T>,
    n: u64,
    rng: &mut R,
    out: &mut [T],
) {
    let probs: Vec<f64> = p.map(|x| x.as_f64()).collect();
    let mut suffix = vec![0.0; probs.len() + 1];
    for j in (0..probs.len()).rev() {
        suffix[j] = suffix[j + 1] + probs[j];
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut remaining = n;
    for (j, slot) in out.iter_mut().enumerate() {
        let count = if remaining == 0 || probs[j] == 0.0 {
            0
        } else if suffix[j + 1] == 0.0 {
            remaining
        } else {
            let q = (probs[j] / suffix[j]).clamp(0.0, 1.0);
            Binomial::new(remaining, q)
                .expect("conditional probability clamped to [0, 1]")
                .sample(rng)
        };
        remaining -= count;
        *slot = T::lit(count as f64) * inv_n;
    }
}

/// Resamples every row of `p` with the per-state sizes `n`.
pub(crate) fn sample_transition<T: Real, R: Rng + ?Sized>(
    p: &DMatrix<T>,
    n: &SampleSizes,
    rng: &mut R,
) -> DMatrix<T> {
    let states = p.nrows();
    let mut out = DMatrix::zeros(states, states);
    let mut row = vec![T::zero(); states];
    for i in 0..states {
        sample_multinomial_row(p.row(i).iter().copied(), n.get(i), rng, &mut row);
        for (j, &x) in row.iter().enumerate() {
            out[(i, j)] = x;
        }
    }
    out
}

/// One reward observation at `state`.
fn draw_reward<T: Real, R: Rng + ?Sized>(model: &InducedModel<T>, state: usize, rng: &mut R) -> f64 {
    let mean = model.reward()[state].as_f64();
    match model.reward_noise() {
        RewardNoise::None => mean,
        RewardNoise::Gaussian => {
            let z: f64 = StandardNormal.sample(rng);
            mean + model.reward_variance()[state].as_f64().sqrt() * z
        }
        RewardNoise::Mixture(components) => {
            let branches = &components[state];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = branches.last().expect("mixture has a branch per state");
            for c in branches {
                acc += c.weight.as_f64();
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            let z: f64 = StandardNormal.sample(rng);
            chosen.mean.as_f64() + chosen.std.as_f64() * z
        }
    }
}

/// Draws `(b̂, Σ̃)` given the per-state sample sizes.
pub(crate) fn sample_rewards<T: Real, R: Rng + ?Sized>(
    model: &InducedModel<T>,
    n: &SampleSizes,
    cov_mode: RewardCovMode,
    rng: &mut R,
) -> Result<(DVector<T>, DVector<T>)> {
    let states = model.num_states();
    if cov_mode == RewardCovMode::SampleVariance && (0..states).any(|i| n.get(i) < 2) {
        return Err(Error::InvalidArgument(
            "sample-variance estimate of Σ̃ needs at least two draws per state".into(),
        ));
    }
    let mut reward_hat = DVector::zeros(states);
    let mut cov_hat = model.reward_cov(n);
    if matches!(model.reward_noise(), RewardNoise::None) {
        reward_hat.copy_from(model.reward());
        if cov_mode == RewardCovMode::SampleVariance {
            cov_hat.fill(T::zero());
        }
        return Ok((reward_hat, cov_hat));
    }
    for i in 0..states {
        let ni = n.get(i);
        // Welford accumulation keeps the sample variance stable for large n.
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for k in 1..=ni {
            let x = draw_reward(model, i, rng);
            let delta = x - mean;
            mean += delta / k as f64;
            m2 += delta * (x - mean);
        }
        reward_hat[i] = T::lit(mean);
        if cov_mode == RewardCovMode::SampleVariance {
            cov_hat[i] = T::lit(m2 / (ni - 1) as f64 / ni as f64);
        }
    }
    Ok((reward_hat, cov_hat))
}

/// Samples the empirical model: row `i` of `P̂` is `multinomial(n_i, p_i) / n_i`
/// and `b̂_i` averages `n_i` reward observations, independently of `P̂`.
pub fn sample_estimated_model<T: Real>(
    model: &InducedModel<T>,
    n: &SampleSizes,
    cov_mode: RewardCovMode,
    stream: RandomStream,
) -> Result<EstimatedModel<T>> {
    n.validate(model.num_states())?;
    let mut rng = stream.rng();
    let transition_hat = sample_transition(model.transition(), n, &mut rng);
    let (reward_hat, reward_cov_hat) = sample_rewards(model, n, cov_mode, &mut rng)?;
    Ok(EstimatedModel {
        transition_hat,
        reward_hat,
        reward_cov_hat,
        samples_per_state: n.clone(),
        discount: model.discount(),
    })
}

/// Entrywise mean of the sampled `P̂`.
pub fn empirical_mean_transition<T: Real>(models: &[EstimatedModel<T>]) -> Result<DMatrix<T>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no estimated models given".into()))?;
    let shape = first.transition_hat.shape();
    let mut acc = DMatrix::zeros(shape.0, shape.1);
    for m in models {
        if m.transition_hat.shape() != shape {
            return Err(Error::Shape("estimated models differ in size".into()));
        }
        acc += &m.transition_hat;
    }
    Ok(acc / T::lit(models.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> InducedModel<f64> {
        InducedModel::new(
            DMatrix::from_element(2, 2, 0.5),
            DVector::from_vec(vec![1.0, 0.0]),
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn point_mass_rows_are_reproduced() {
        let p = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let model = InducedModel::new(p.clone(), DVector::from_vec(vec![1.0, 2.0, 3.0]), 0.9).unwrap();
        for seed in 0..20 {
            let est = sample_estimated_model(&model, &SampleSizes::Uniform(7), RewardCovMode::Oracle, RandomStream::new(seed)).unwrap();
            assert_eq!(est.transition_hat(), &p);
            assert_eq!(est.reward_hat(), model.reward());
            assert!(est.reward_cov_hat().iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn rows_are_count_valued() {
        let model = two_state();
        let n = 13;
        let est = sample_estimated_model(&model, &SampleSizes::Uniform(n), RewardCovMode::Oracle, RandomStream::new(3)).unwrap();
        for x in est.transition_hat().iter() {
            let count = x * n as f64;
            assert!((count - count.round()).abs() < 1e-12);
        }
        for row in est.transition_hat().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_samples_rejected() {
        let model = two_state();
        let err = sample_estimated_model(&model, &SampleSizes::Uniform(0), RewardCovMode::Oracle, RandomStream::new(0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = sample_estimated_model(&model, &SampleSizes::PerState(vec![1, 0]), RewardCovMode::Oracle, RandomStream::new(0));
        assert!(err.is_err());
    }

    #[test]
    fn sample_variance_needs_two_draws() {
        let model = InducedModel::with_reward_variance(
            DMatrix::from_element(2, 2, 0.5f64),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.04, 0.04]),
            0.5,
        )
        .unwrap();
        let err = sample_estimated_model(&model, &SampleSizes::Uniform(1), RewardCovMode::SampleVariance, RandomStream::new(0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let est = sample_estimated_model(&model, &SampleSizes::Uniform(50), RewardCovMode::SampleVariance, RandomStream::new(0)).unwrap();
        for &c in est.reward_cov_hat().iter() {
            assert!(c > 0.0 && (c - 0.04 / 50.0).abs() < 0.5 * 0.04 / 50.0);
        }
    }

    #[test]
    fn reproducible_streams() {
        let model = two_state();
        let s = RandomStream::with_stream(11, 4);
        let a = sample_estimated_model(&model, &SampleSizes::Uniform(5), RewardCovMode::Oracle, s).unwrap();
        let b = sample_estimated_model(&model, &SampleSizes::Uniform(5), RewardCovMode::Oracle, s).unwrap();
        assert_eq!(a, b);
        assert_ne!(s.substream(0), s.substream(1));
        assert_eq!(s.substream(9), s.substream(9));
    }

    #[test]
    fn one_sample_two_state_outcomes_are_equiprobable() {
        // Exact law: each row independently one-hot on either state, so the
        // four matrices carry probability 1/4 each.
        let model = two_state();
        let draws = 100_000u64;
        let mut counts = [0u64; 4];
        let root = RandomStream::new(2024);
        for t in 0..draws {
            let est = sample_estimated_model(&model, &SampleSizes::Uniform(1), RewardCovMode::Oracle, root.substream(t)).unwrap();
            let p = est.transition_hat();
            let code = (p[(0, 0)] as usize) * 2 + p[(1, 0)] as usize;
            counts[code] += 1;
        }
        let sd = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 0.25 * draws as f64).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn empirical_mean_helpers() {
        let model = two_state();
        let est = sample_estimated_model(&model, &SampleSizes::Uniform(1), RewardCovMode::Oracle, RandomStream::new(1)).unwrap();
        assert_eq!(empirical_mean_transition(std::slice::from_ref(&est)).unwrap(), *est.transition_hat());
        let mirror_p = model.transition() * 2.0 - est.transition_hat();
        let mirror = EstimatedModel::from_parts(
            mirror_p,
            est.reward_hat().clone(),
            est.reward_cov_hat().clone(),
            SampleSizes::Uniform(1),
            0.5,
        )
        .unwrap();
        assert_eq!(empirical_mean_transition(&[est, mirror]).unwrap(), *model.transition());
        assert!(empirical_mean_transition::<f64>(&[]).is_err());
    }
}
