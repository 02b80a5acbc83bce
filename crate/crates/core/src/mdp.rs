//! Ground-truth environments, policy induction and the Bellman operator.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::sampling::SampleSizes;
use crate::scalar::Real;

/// Validates a probability row and renormalizes it in place when its mass is
/// off by less than [`Real::renormalize_tol`].
pub(crate) fn normalize_row<T: Real>(row: &mut [T], index: usize) -> Result<()> {
    let mut sum = T::zero();
    for &x in row.iter() {
        if !x.is_finite() {
            return Err(Error::InvalidDistribution {
                row: index,
                reason: "non-finite entry".into(),
            });
        }
        if x < T::zero() {
            return Err(Error::InvalidDistribution {
                row: index,
                reason: format!("negative entry {x:e}"),
            });
        }
        sum += x;
    }
    let deviation = (sum - T::one()).abs();
    if deviation > T::renormalize_tol() {
        return Err(Error::InvalidDistribution {
            row: index,
            reason: format!("mass {sum} differs from one"),
        });
    }
    if deviation > T::zero() {
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(())
}

pub(crate) fn normalize_rows<T: Real>(m: &mut DMatrix<T>) -> Result<()> {
    for i in 0..m.nrows() {
        let mut row: Vec<T> = m.row(i).iter().copied().collect();
        normalize_row(&mut row, i)?;
        for (j, x) in row.into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(())
}

/// Checks that every row of `m` is a distribution within [`Real::stochastic_tol`].
pub fn is_row_stochastic<T: Real>(m: &DMatrix<T>) -> bool {
    m.row_iter().all(|row| {
        row.iter().all(|&x| x >= T::zero())
            && (row.iter().fold(T::zero(), |acc, &x| acc + x) - T::one()).abs()
                <= T::stochastic_tol()
    })
}

fn check_square<T: Real>(m: &DMatrix<T>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Shape(format!(
            "{what} must be a nonempty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

pub(crate) fn check_discount<T: Real>(gamma: T) -> Result<()> {
    if !(gamma >= T::zero() && gamma < T::one()) {
        return Err(Error::InvalidArgument(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    Ok(())
}

/// Discounted MDP with finitely many states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp<T: Real> {
    transition: Vec<DMatrix<T>>,
    reward_mean: DMatrix<T>,
    reward_noise_std: DMatrix<T>,
    discount: T,
}

impl<T: Real> TabularMdp<T> {
    /// `transition[a]` is the `|S| x |S|` kernel of action `a`; reward tables are `|S| x |A|`.
    pub fn new(
        mut transition: Vec<DMatrix<T>>,
        reward_mean: DMatrix<T>,
        reward_noise_std: DMatrix<T>,
        discount: T,
    ) -> Result<Self> {
        if transition.is_empty() {
            return Err(Error::Shape("at least one action is required".into()));
        }
        let states = check_square(&transition[0], "transition kernel")?;
        let actions = transition.len();
        for (a, kernel) in transition.iter_mut().enumerate() {
            if kernel.shape() != (states, states) {
                return Err(Error::Shape(format!(
                    "kernel of action {a} is {}x{}, expected {states}x{states}",
                    kernel.nrows(),
                    kernel.ncols()
                )));
            }
            normalize_rows(kernel)?;
        }
        for (name, table) in [("reward_mean", &reward_mean), ("reward_noise_std", &reward_noise_std)] {
            if table.shape() != (states, actions) {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {states}x{actions}",
                    table.nrows(),
                    table.ncols()
                )));
            }
        }
        if reward_noise_std.iter().any(|&d| !(d >= T::zero())) {
            return Err(Error::InvalidArgument("reward noise must be nonnegative".into()));
        }
        if !(discount > T::zero() && discount < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie strictly inside (0, 1), got {discount}"
            )));
        }
        Ok(Self {
            transition,
            reward_mean,
            reward_noise_std,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.reward_mean.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self, action: usize) -> &DMatrix<T> {
        &self.transition[action]
    }

    pub fn reward_mean(&self) -> &DMatrix<T> {
        &self.reward_mean
    }

    pub fn reward_noise_std(&self) -> &DMatrix<T> {
        &self.reward_noise_std
    }

    pub fn discount(&self) -> T {
        self.discount
    }
}

/// Stochastic policy, one distribution over actions per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T: Real> {
    probs: DMatrix<T>,
}

impl<T: Real> Policy<T> {
    pub fn new(mut probs: DMatrix<T>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::Shape("policy table must be nonempty".into()));
        }
        normalize_rows(&mut probs)?;
        Ok(Self { probs })
    }

    /// Always picks `action`.
    pub fn deterministic(states: usize, actions: usize, action: usize) -> Result<Self> {
        if action >= actions {
            return Err(Error::Shape(format!("action {action} out of range {actions}")));
        }
        let mut probs = DMatrix::zeros(states, actions);
        probs.column_mut(action).fill(T::one());
        Self::new(probs)
    }

    pub fn probs(&self) -> &DMatrix<T> {
        &self.probs
    }
}

/// One branch of the reward observed at a state: the action is drawn with
/// probability `weight`, then the reward is Gaussian with the given moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardComponent<T> {
    pub weight: T,
    pub mean: T,
    pub std: T,
}

/// How a single reward observation at each state is generated.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardNoise<T> {
    /// Rewards are observed exactly.
    None,
    /// Gaussian observation noise with the model's per-sample variance.
    Gaussian,
    /// Action mixture induced by a policy over a [`TabularMdp`].
    Mixture(Vec<Vec<RewardComponent<T>>>),
}

/// Policy-induced pair `(P, b)` together with the per-sample reward variance.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedModel<T: Real> {
    transition: DMatrix<T>,
    reward: DVector<T>,
    reward_var: DVector<T>,
    noise: RewardNoise<T>,
    discount: T,
}

impl<T: Real> InducedModel<T> {
    /// Model with exactly observed rewards.
    pub fn new(transition: DMatrix<T>, reward: DVector<T>, discount: T) -> Result<Self> {
        let states = reward.len();
        Self::with_reward_variance(transition, reward, DVector::zeros(states), discount)
    }

    /// Model whose single reward observations carry Gaussian noise of variance `reward_var`.
    pub fn with_reward_variance(
        mut transition: DMatrix<T>,
        reward: DVector<T>,
        reward_var: DVector<T>,
        discount: T,
    ) -> Result<Self> {
        let states = check_square(&transition, "transition")?;
        if reward.len() != states || reward_var.len() != states {
            return Err(Error::Shape(format!(
                "reward vectors must have length {states}"
            )));
        }
        if reward_var.iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::InvalidArgument("reward variance must be nonnegative".into()));
        }
        check_discount(discount)?;
        normalize_rows(&mut transition)?;
        let noise = if reward_var.iter().all(|&v| v == T::zero()) {
            RewardNoise::None
        } else {
            RewardNoise::Gaussian
        };
        Ok(Self {
            transition,
            reward,
            reward_var,
            noise,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.reward.len()
    }

    pub fn transition(&self) -> &DMatrix<T> {
        &self.transition
    }

    pub fn reward(&self) -> &DVector<T> {
        &self.reward
    }

    /// Variance of one reward observation per state.
    pub fn reward_variance(&self) -> &DVector<T> {
        &self.reward_var
    }

    pub fn reward_noise(&self) -> &RewardNoise<T> {
        &self.noise
    }

    pub fn discount(&self) -> T {
        self.discount
    }

    /// Diagonal of `cov[b̂]` when state `i` averages `n_i` observations.
    pub fn reward_cov(&self, n: &SampleSizes) -> DVector<T> {
        DVector::from_fn(self.num_states(), |i, _| {
            self.reward_var[i] / T::lit(n.get(i) as f64)
        })
    }

    /// Replaces the discount, keeping dynamics and rewards.
    pub fn with_discount(mut self, discount: T) -> Result<Self> {
        check_discount(discount)?;
        self.discount = discount;
        Ok(self)
    }
}

/// Mixes the per-action kernels and rewards of `mdp` with `policy`.
///
/// The per-sample reward variance at `s` is the law-of-total-variance split
/// `Var_a[r(s, a)] + E_a[δ(s, a)²]` over `a ~ π(·|s)`.
pub fn induce_policy_model<T: Real>(mdp: &TabularMdp<T>, policy: &Policy<T>) -> Result<InducedModel<T>> {
    let states = mdp.num_states();
    let actions = mdp.num_actions();
    if policy.probs.shape() != (states, actions) {
        return Err(Error::Shape(format!(
            "policy is {}x{}, MDP has {states} states and {actions} actions",
            policy.probs.nrows(),
            policy.probs.ncols()
        )));
    }
    let mut transition = DMatrix::zeros(states, states);
    let mut reward = DVector::zeros(states);
    let mut reward_var = DVector::zeros(states);
    let mut mixture = Vec::with_capacity(states);
    for s in 0..states {
        let mut components = Vec::with_capacity(actions);
        for a in 0..actions {
            let w = policy.probs[(s, a)];
            if w == T::zero() {
                continue;
            }
            let kernel = &mdp.transition[a];
            for t in 0..states {
                transition[(s, t)] += w * kernel[(s, t)];
            }
            reward[s] += w * mdp.reward_mean[(s, a)];
            components.push(RewardComponent {
                weight: w,
                mean: mdp.reward_mean[(s, a)],
                std: mdp.reward_noise_std[(s, a)],
            });
        }
        let var = components.iter().fold(T::zero(), |acc, c| {
            let d = c.mean - reward[s];
            acc + c.weight * (d * d + c.std * c.std)
        });
        reward_var[s] = var;
        mixture.push(components);
    }
    normalize_rows(&mut transition)?;
    let noise = if reward_var.iter().all(|&v| v == T::zero()) {
        RewardNoise::None
    } else {
        RewardNoise::Mixture(mixture)
    };
    Ok(InducedModel {
        transition,
        reward,
        reward_var,
        noise,
        discount: mdp.discount,
    })
}

/// Factorized `A = I − γP`, reusable for solves with `A` and `Aᵀ`.
#[derive(Debug, Clone)]
pub struct BellmanOperator<T: Real> {
    a: DMatrix<T>,
    discount: T,
    lu: LU<T, Dyn, Dyn>,
    lower: DMatrix<T>,
    upper: DMatrix<T>,
}

impl<T: Real> BellmanOperator<T> {
    pub fn new(transition: &DMatrix<T>, discount: T) -> Result<Self> {
        let states = check_square(transition, "transition")?;
        check_discount(discount)?;
        let a = DMatrix::identity(states, states) - transition * discount;
        let lu = a.clone().lu();
        let upper = lu.u();
        let tiny = T::default_epsilon() * T::lit(states as f64);
        if upper.diagonal().iter().any(|&d| d.abs() <= tiny) {
            return Err(Error::Singular);
        }
        let lower = lu.l();
        Ok(Self {
            a,
            discount,
            lu,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a_matrix(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn discount(&self) -> T {
        self.discount
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Shape(format!(
                "vector of length {len} against operator of size {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// `A x`.
    pub fn apply(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check_len(x.len())?;
        Ok(&self.a * x)
    }

    /// Solves `A x = y`.
    pub fn solve(&self, y: &DVector<T>) -> Result<DVector<T>> {
        self.check_len(y.len())?;
        self.lu.solve(y).ok_or(Error::Singular)
    }

    /// Solves `A X = Y` column by column.
    pub fn solve_matrix(&self, y: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.check_len(y.nrows())?;
        self.lu.solve(y).ok_or(Error::Singular)
    }

    /// Solves `Aᵀ x = y` with the stored factors: `PA = LU` gives `Aᵀ = UᵀLᵀP`.
    pub fn solve_transpose(&self, y: &DVector<T>) -> Result<DVector<T>> {
        self.check_len(y.len())?;
        let z = self
            .upper
            .tr_solve_upper_triangular(y)
            .ok_or(Error::Singular)?;
        let mut w = self
            .lower
            .tr_solve_lower_triangular(&z)
            .ok_or(Error::Singular)?;
        self.lu.p().inv_permute_rows(&mut w);
        Ok(w)
    }

    /// Explicit `A⁻¹`.
    pub fn inverse(&self) -> DMatrix<T> {
        let n = self.dim();
        self.lu
            .solve(&DMatrix::identity(n, n))
            .expect("factorization checked nonsingular at construction")
    }
}

pub fn bellman_operator<T: Real>(model: &InducedModel<T>) -> Result<BellmanOperator<T>> {
    BellmanOperator::new(&model.transition, model.discount)
}

/// Value of the policy: the solution of `(I − γP) v = b`.
pub fn solve_value<T: Real>(op: &BellmanOperator<T>, b: &DVector<T>) -> Result<DVector<T>> {
    op.solve(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// `M = I`.
    Residual,
    /// `M = A⁻ᵀA⁻¹`, i.e. the plain Euclidean error.
    L2Exact,
    /// `M = Â⁻ᵀÂ⁻¹` built from the estimated operator.
    L2PlugIn,
    CustomM,
}

/// Symmetric positive-definite weight matrix of a [`NormSpec::Custom`] norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix<T: Real>(DMatrix<T>);

impl<T: Real> SpdMatrix<T> {
    pub fn new(m: DMatrix<T>) -> Result<Self> {
        check_square(&m, "norm matrix")?;
        let scale = m.iter().fold(T::one(), |acc, &x| acc.max(x.abs()));
        let tol = T::symmetry_tol() * scale;
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(Error::InvalidNorm(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        if Cholesky::new(m.clone()).is_none() {
            return Err(Error::InvalidNorm("not positive definite".into()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }
}

/// Weighted error norm `‖x‖²_M = xᵀAᵀMAx`.
///
/// The two l2 variants resolve `M` against whichever operator they are
/// evaluated with: the truth when measuring errors, the estimate inside the
/// plug-in factor.
#[derive(Debug, Clone, PartialEq)]
pub enum NormSpec<T: Real> {
    Residual,
    L2Exact,
    L2PlugIn,
    Custom(SpdMatrix<T>),
}

impl<T: Real> NormSpec<T> {
    pub fn custom(m: DMatrix<T>) -> Result<Self> {
        SpdMatrix::new(m).map(Self::Custom)
    }

    pub fn kind(&self) -> NormKind {
        match self {
            Self::Residual => NormKind::Residual,
            Self::L2Exact => NormKind::L2Exact,
            Self::L2PlugIn => NormKind::L2PlugIn,
            Self::Custom(_) => NormKind::CustomM,
        }
    }

    /// Norm used to score estimates against the truth.
    pub fn evaluation(&self) -> Self {
        match self {
            Self::L2PlugIn => Self::L2Exact,
            other => other.clone(),
        }
    }

    /// Materializes `M` against `op`.
    pub fn matrix(&self, op: &BellmanOperator<T>) -> Result<DMatrix<T>> {
        let n = op.dim();
        match self {
            Self::Residual => Ok(DMatrix::identity(n, n)),
            Self::L2Exact | Self::L2PlugIn => {
                let inv = op.inverse();
                Ok(inv.transpose() * inv)
            }
            Self::Custom(m) => {
                if m.0.nrows() != n {
                    return Err(Error::Shape(format!(
                        "norm matrix has size {}, operator has size {n}",
                        m.0.nrows()
                    )));
                }
                Ok(m.0.clone())
            }
        }
    }

    /// `AᵀMA`, the Gram matrix of `x ↦ ‖x‖²_M`.
    pub fn gram(&self, op: &BellmanOperator<T>) -> Result<DMatrix<T>> {
        let n = op.dim();
        let a = op.a_matrix();
        match self {
            Self::Residual => Ok(a.transpose() * a),
            Self::L2Exact | Self::L2PlugIn => Ok(DMatrix::identity(n, n)),
            Self::Custom(_) => {
                let m = self.matrix(op)?;
                Ok(a.transpose() * m * a)
            }
        }
    }
}

/// `xᵀAᵀMAx`.
pub fn m_norm_sq<T: Real>(x: &DVector<T>, norm: &NormSpec<T>, op: &BellmanOperator<T>) -> Result<T> {
    let ax = op.apply(x)?;
    match norm {
        NormSpec::Residual => Ok(ax.norm_squared()),
        NormSpec::L2Exact | NormSpec::L2PlugIn => Ok(x.norm_squared()),
        NormSpec::Custom(_) => {
            let m = norm.matrix(op)?;
            Ok(ax.dot(&(m * &ax)))
        }
    }
}
