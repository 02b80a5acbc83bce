//! Sweep, scatter, bound-check and single-instance runs over a [`Config`].
//!
//! Random streams are addressed as `seed → cell → realization → purpose`, so
//! each record depends only on its own coordinates and the output is the same
//! under any worker count.

use opaug::augmentation::{
    bootstrap_factor, compute_moments, plugin_factor, theta, PerturbationSample,
};
use opaug::bounds::{
    basic_bounds, kappa, neumann_requirement, spectral_radius_yhat, spread_bound, BasicBounds,
    SpectralReport, SpreadBound,
};
use opaug::oracle::{
    error_reduction, exhaustive_statistics, mc_statistics, MseCurve, MseStatistics, RewardTreatment,
};
use opaug::sampling::{sample_estimated_model, RandomStream, SampleSizes};
use opaug::{BellmanOperator, Error, InducedModel};
use rayon::prelude::*;

use crate::config::{CellSpec, Config, Environment, NormChoice};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(#[from] Error),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Offsets of the per-realization child streams.
const STREAM_ESTIMATE: u64 = 0;
const STREAM_BOOTSTRAP: u64 = 1;
const STREAM_TRIALS: u64 = 2;
const STREAM_PERTURBATION: u64 = 3;

fn error_tag(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::InvalidDistribution { .. } => "invalid_distribution",
        Error::InvalidNorm(_) => "invalid_norm",
        Error::ZeroReward => "zero_reward",
        Error::Degenerate { .. } => "degenerate",
        Error::ZeroNaiveError(_) => "zero_naive_error",
        Error::Singular => "singular",
        Error::TooManyOutcomes { .. } => "too_many_outcomes",
        Error::EigenFailure => "eigen_failure",
    }
}

/// Environment coordinates shared by every output table.
#[derive(Debug, Clone, PartialEq)]
pub struct CellInfo {
    pub cell: usize,
    pub family: &'static str,
    pub size: usize,
    pub states: usize,
    pub sigma: Option<usize>,
    pub delta: Option<f64>,
    pub gamma: f64,
    pub graph_seed: Option<u64>,
    pub n: u64,
}

impl CellInfo {
    fn new(cell: usize, spec: &CellSpec, states: usize) -> Self {
        let (size, sigma, delta, graph_seed) = match &spec.env {
            Environment::Family(c) => {
                let geometric = matches!(c.family, opaug::Family::Circle | opaug::Family::Torus);
                (
                    c.size,
                    geometric.then_some(c.sigma),
                    geometric.then_some(c.delta),
                    (!geometric).then_some(c.seed),
                )
            }
            Environment::Explicit { .. } => (states, None, None, None),
        };
        Self {
            cell,
            family: spec.env.family_name(),
            size,
            states,
            sigma,
            delta,
            gamma: spec.env.gamma(),
            graph_seed,
            n: spec.n,
        }
    }
}

/// Per-cell quantities that do not depend on the realization.
struct CellContext {
    info: CellInfo,
    model: InducedModel,
    sizes: SampleSizes,
    epsilon_circ: Result<f64, Error>,
    basic: BasicBounds<f64>,
    spread: Option<SpreadBound<f64>>,
}

fn cell_context(cfg: &Config, index: usize, spec: &CellSpec) -> Result<CellContext, RunError> {
    let model = spec.env.build()?;
    let sizes = SampleSizes::Uniform(spec.n);
    let epsilon_circ = theta(
        model.transition(),
        model.reward(),
        &model.reward_cov(&sizes),
        &sizes,
        model.discount(),
        &cfg.norm.spec(),
    );
    let spread = match spread_bound(model.transition(), model.reward(), model.discount(), spec.n) {
        Ok(s) => Some(s),
        Err(Error::ZeroReward) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(CellContext {
        info: CellInfo::new(index, spec, model.num_states()),
        basic: basic_bounds(model.discount(), spec.n)?,
        spread,
        model,
        sizes,
        epsilon_circ,
    })
}

fn contexts(cfg: &Config) -> Result<Vec<CellContext>, RunError> {
    cfg.cells()
        .par_iter()
        .enumerate()
        .map(|(i, spec)| cell_context(cfg, i, spec))
        .collect()
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub info: CellInfo,
    pub realization: usize,
    pub stream_id: u64,
    pub epsilon_circ: Option<f64>,
    pub epsilon_tilde: Option<f64>,
    pub epsilon_star: Option<f64>,
    pub epsilon_star_se: Option<f64>,
    pub epsilon_boot: Option<f64>,
    pub b_norm_sq: f64,
    pub mse_naive: f64,
    pub mse_naive_se: f64,
    pub mse_tilde: Option<f64>,
    pub mse_circ: Option<f64>,
    pub mse_star: Option<f64>,
    pub mse_boot: Option<f64>,
    pub eta_tilde: Option<f64>,
    pub eta_circ: Option<f64>,
    pub eta_star: Option<f64>,
    pub eta_boot: Option<f64>,
    pub basic_upper: f64,
    pub basic_upper_holds: bool,
    pub basic_positivity_holds: bool,
    pub spread_condition: Option<f64>,
    pub spread_applicable: Option<bool>,
    pub spread_upper: Option<f64>,
    /// Set when `ε̃°` leaves a range whose hypotheses hold.
    pub bound_violation: bool,
    pub notes: Vec<String>,
}

impl SweepRecord {
    /// `None` when the reward has zero norm.
    pub fn nmse_naive(&self) -> Option<f64> {
        (self.b_norm_sq > 0.0).then(|| self.mse_naive / self.b_norm_sq)
    }

    pub fn nmse_tilde(&self) -> Option<f64> {
        self.mse_tilde.filter(|_| self.b_norm_sq > 0.0).map(|m| m / self.b_norm_sq)
    }
}

fn realization_stream(seed: u64, cell: usize, realization: usize) -> RandomStream {
    RandomStream::new(seed).substream(cell as u64).substream(realization as u64)
}

fn run_realization(cfg: &Config, ctx: &CellContext, realization: usize) -> Result<SweepRecord, RunError> {
    let stream = realization_stream(cfg.seed, ctx.info.cell, realization);
    let norm = cfg.norm.spec();
    let mut notes = Vec::new();
    let mut note = |what: &str, e: &Error| notes.push(format!("{what}:{}", error_tag(e)));

    let est = sample_estimated_model(&ctx.model, &ctx.sizes, cfg.reward_cov, stream.substream(STREAM_ESTIMATE))?;
    let epsilon_tilde = if cfg.modes.plugin {
        match plugin_factor(&est, &norm) {
            Ok(r) => Some(r.epsilon_tilde),
            Err(e) => {
                note("plugin", &e);
                None
            }
        }
    } else {
        None
    };
    let epsilon_boot = if cfg.modes.bootstrap {
        match bootstrap_factor(&est, cfg.bootstrap_resamples, &norm, stream.substream(STREAM_BOOTSTRAP)) {
            Ok(x) => Some(x),
            Err(e) => {
                note("bootstrap", &e);
                None
            }
        }
    } else {
        None
    };
    let epsilon_circ = if cfg.modes.oracle_circ {
        match &ctx.epsilon_circ {
            Ok(x) => Some(*x),
            Err(e) => {
                note("oracle_circ", e);
                None
            }
        }
    } else {
        None
    };

    let stats = mc_statistics(
        &ctx.model,
        &ctx.sizes,
        cfg.trials,
        &norm,
        RewardTreatment::Decomposition,
        stream.substream(STREAM_TRIALS),
    )?;
    let (epsilon_star, epsilon_star_se) = if cfg.modes.oracle_star {
        match stats.epsilon_star() {
            Ok(x) => (Some(x), Some(stats.epsilon_star_std_error())),
            Err(e) => {
                note("oracle_star", &e);
                (None, None)
            }
        }
    } else {
        (None, None)
    };
    let curve = MseCurve::from_statistics(stats, &[]);
    let mut eta = |what: &str, eps: Option<f64>| -> (Option<f64>, Option<f64>) {
        let Some(e) = eps else { return (None, None) };
        let mse = curve.evaluate(e);
        match error_reduction(&curve, e) {
            Ok(r) => (Some(mse), Some(r.eta)),
            Err(err) => {
                notes.push(format!("eta_{what}:{}", error_tag(&err)));
                (Some(mse), None)
            }
        }
    };
    let (mse_tilde, eta_tilde) = eta("tilde", epsilon_tilde);
    let (mse_circ, eta_circ) = eta("circ", epsilon_circ);
    let (mse_star, eta_star) = eta("star", epsilon_star);
    let (mse_boot, eta_boot) = eta("boot", epsilon_boot);

    let bound_violation = epsilon_tilde.is_some_and(|e| {
        (ctx.basic.positivity_holds && e <= 0.0)
            || (ctx.basic.upper_holds && e > ctx.basic.upper_bound)
    });
    Ok(SweepRecord {
        info: ctx.info.clone(),
        realization,
        stream_id: stream.stream_id,
        epsilon_circ,
        epsilon_tilde,
        epsilon_star,
        epsilon_star_se,
        epsilon_boot,
        b_norm_sq: curve.statistics.b_norm_sq,
        mse_naive: curve.evaluate(1.0),
        mse_naive_se: curve.statistics.mse_std_error(1.0),
        mse_tilde,
        mse_circ,
        mse_star,
        mse_boot,
        eta_tilde,
        eta_circ,
        eta_star,
        eta_boot,
        basic_upper: ctx.basic.upper_bound,
        basic_upper_holds: ctx.basic.upper_holds,
        basic_positivity_holds: ctx.basic.positivity_holds,
        spread_condition: ctx.spread.map(|s| s.condition),
        spread_applicable: ctx.spread.map(|s| s.applicable),
        spread_upper: ctx.spread.map(|s| s.upper_bound),
        bound_violation,
        notes,
    })
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, RunError> {
    match threads {
        None => Ok(f()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| RunError::Config(format!("cannot start {k} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Every `(cell, realization)` record, in grid order.
pub fn run_sweep(cfg: &Config) -> Result<Vec<SweepRecord>, RunError> {
    let ctxs = contexts(cfg)?;
    let jobs: Vec<(usize, usize)> = (0..ctxs.len())
        .flat_map(|c| (0..cfg.realizations).map(move |r| (c, r)))
        .collect();
    jobs.par_iter()
        .map(|&(c, r)| run_realization(cfg, &ctxs[c], r))
        .collect()
}

/// Realization-averaged normalized errors of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub info: CellInfo,
    pub realizations: usize,
    pub nmse_naive: f64,
    pub nmse_augmented: f64,
}

impl ScatterPoint {
    pub fn below_diagonal(&self) -> bool {
        self.nmse_augmented < self.nmse_naive
    }
}

/// Groups sweep records by cell; cells with zero naive error or no plug-in
/// factor are left out.
pub fn scatter_points(records: &[SweepRecord]) -> Vec<ScatterPoint> {
    let mut points: Vec<ScatterPoint> = Vec::new();
    let mut start = 0;
    while start < records.len() {
        let cell = records[start].info.cell;
        let end = start + records[start..].iter().take_while(|r| r.info.cell == cell).count();
        let group = &records[start..end];
        let usable: Vec<(f64, f64)> = group
            .iter()
            .filter(|r| r.mse_naive > 0.0 && r.eta_tilde.is_some())
            .filter_map(|r| Some((r.nmse_naive()?, r.nmse_tilde()?)))
            .collect();
        if !usable.is_empty() {
            let k = usable.len() as f64;
            points.push(ScatterPoint {
                info: group[0].info.clone(),
                realizations: usable.len(),
                nmse_naive: usable.iter().map(|u| u.0).sum::<f64>() / k,
                nmse_augmented: usable.iter().map(|u| u.1).sum::<f64>() / k,
            });
        }
        start = end;
    }
    points
}

pub fn run_scatter(cfg: &Config) -> Result<Vec<ScatterPoint>, RunError> {
    Ok(scatter_points(&run_sweep(cfg)?))
}

/// Bound checks of one cell, evaluated on the true model.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsRecord {
    pub info: CellInfo,
    pub basic: BasicBounds<f64>,
    pub spread: Option<SpreadBound<f64>>,
    pub kappa: usize,
    pub neumann_n_required: u64,
    pub theta: Option<f64>,
    pub spectral: SpectralReport<f64>,
    pub violations: Vec<&'static str>,
}

fn bounds_for(cfg: &Config, ctx: &CellContext) -> Result<BoundsRecord, RunError> {
    let p = ctx.model.transition();
    let k = kappa(p);
    let gamma = ctx.model.discount();
    let op = BellmanOperator::new(p, gamma)?;
    let stream = realization_stream(cfg.seed, ctx.info.cell, 0).substream(STREAM_PERTURBATION);
    let est = sample_estimated_model(&ctx.model, &ctx.sizes, cfg.reward_cov, stream)?;
    let sample = PerturbationSample::new(p, est.transition_hat(), &op)?;
    let spectral = spectral_radius_yhat(&sample)?;
    let theta = ctx.epsilon_circ.clone().ok();
    let mut violations = Vec::new();
    if let Some(t) = theta {
        if ctx.basic.positivity_holds && t <= 0.0 {
            violations.push("positivity");
        }
        if ctx.basic.upper_holds && t > ctx.basic.upper_bound {
            violations.push("basic_upper");
        }
        if ctx.spread.is_some_and(|s| s.applicable && t > s.upper_bound) {
            violations.push("spread_upper");
        }
    }
    if spectral.spectral_radius > spectral.inf_norm_bound * (1.0 + 1e-9) + 1e-12 {
        violations.push("spectral_radius");
    }
    Ok(BoundsRecord {
        info: ctx.info.clone(),
        basic: ctx.basic,
        spread: ctx.spread,
        kappa: k,
        neumann_n_required: neumann_requirement(k.max(1), p.nrows(), gamma, 1.0, 2)?,
        theta,
        spectral,
        violations,
    })
}

pub fn run_bounds(cfg: &Config) -> Result<Vec<BoundsRecord>, RunError> {
    let ctxs = contexts(cfg)?;
    ctxs.par_iter().map(|c| bounds_for(cfg, c)).collect()
}

/// Every quantity the library computes for a single instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub info: CellInfo,
    pub norm: NormChoice,
    pub epsilon_circ: f64,
    pub g: f64,
    pub h: f64,
    pub t: f64,
    pub b_norm_sq: f64,
    pub epsilon_tilde: Option<f64>,
    pub epsilon_star: f64,
    /// `true` when `ε*` came from exact enumeration.
    pub epsilon_star_exact: bool,
    pub epsilon_star_se: f64,
    pub mse_naive: f64,
    pub mse_circ: f64,
    pub mse_star: f64,
    pub eta_circ: Option<f64>,
    pub bounds: BoundsRecord,
    pub g_matrix: nalgebra::DMatrix<f64>,
    pub h_matrix: nalgebra::DMatrix<f64>,
}

impl Diagnosis {
    /// Whether `ε°` satisfies every bound whose hypotheses hold.
    pub fn consistent(&self) -> bool {
        self.bounds.violations.is_empty()
    }
}

/// Runs every module on the config's single cell. A factor that cannot be
/// formed on the true model is fatal here.
pub fn diagnose(cfg: &Config) -> Result<Diagnosis, RunError> {
    let cells = cfg.cells();
    if cells.len() != 1 {
        return Err(RunError::Config(format!(
            "diagnose needs exactly one configuration cell, the config expands to {}",
            cells.len()
        )));
    }
    let ctx = cell_context(cfg, 0, &cells[0])?;
    let norm = cfg.norm.spec();
    let model = &ctx.model;
    let epsilon_circ = ctx.epsilon_circ.clone()?;
    let moments = compute_moments(
        model.transition(),
        model.reward(),
        &model.reward_cov(&ctx.sizes),
        &ctx.sizes,
        model.discount(),
        &norm,
    )?;
    let stream = realization_stream(cfg.seed, 0, 0);
    let est = sample_estimated_model(model, &ctx.sizes, cfg.reward_cov, stream.substream(STREAM_ESTIMATE))?;
    let epsilon_tilde = plugin_factor(&est, &norm).ok().map(|r| r.epsilon_tilde);
    let (stats, exact): (MseStatistics<f64>, bool) = match exhaustive_statistics(model, &ctx.sizes, &norm) {
        Ok(s) => (s, true),
        Err(Error::TooManyOutcomes { .. }) => (
            mc_statistics(model, &ctx.sizes, cfg.trials, &norm, RewardTreatment::Decomposition, stream.substream(STREAM_TRIALS))?,
            false,
        ),
        Err(e) => return Err(e.into()),
    };
    let epsilon_star = stats.epsilon_star()?;
    let curve = MseCurve::from_statistics(stats, &[]);
    let bounds = bounds_for(cfg, &ctx)?;
    Ok(Diagnosis {
        info: ctx.info.clone(),
        norm: cfg.norm,
        epsilon_circ,
        g: moments.g_scalar,
        h: moments.h_scalar,
        t: moments.t_scalar,
        b_norm_sq: moments.b_norm_sq,
        epsilon_tilde,
        epsilon_star,
        epsilon_star_exact: exact,
        epsilon_star_se: curve.statistics.epsilon_star_std_error(),
        mse_naive: curve.evaluate(1.0),
        mse_circ: curve.evaluate(epsilon_circ),
        mse_star: curve.evaluate(epsilon_star),
        eta_circ: error_reduction(&curve, epsilon_circ).ok().map(|r| r.eta),
        bounds,
        g_matrix: moments.g_matrix.clone(),
        h_matrix: moments.h_matrix.clone(),
    })
}
