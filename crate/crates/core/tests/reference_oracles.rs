//! Library results against brute-force references written independently here.

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use opaug::augmentation::{bootstrap_factor, compute_moments, plugin_factor, theta};
use opaug::mdp::NormSpec;
use opaug::{EstimatedModel, InducedModel};
use opaug::oracle::{
    exhaustive_statistics, mc_statistics, mse_curve, surrogate_mse, RewardTreatment,
};
use opaug::sampling::{
    empirical_mean_transition, sample_estimated_model, RandomStream, RewardCovMode, SampleSizes,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn factorial(k: u64) -> f64 {
    (1..=k).map(|x| x as f64).product()
}

/// Every way to place `n` balls in `k` cells.
fn count_vectors(n: u64, k: usize) -> Vec<Vec<u64>> {
    if k == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for c in 0..=n {
        for mut rest in count_vectors(n - c, k - 1) {
            rest.insert(0, c);
            out.push(rest);
        }
    }
    out
}

/// `(P̂, probability)` over the full joint law, zero-probability cells included.
fn joint_outcomes(p: &DMatrix<f64>, n: u64) -> Vec<(DMatrix<f64>, f64)> {
    let s = p.nrows();
    let mut acc = vec![(DMatrix::zeros(s, s), 1.0)];
    for i in 0..s {
        let mut next = Vec::new();
        for counts in count_vectors(n, s) {
            let mut prob = factorial(n);
            for (j, &c) in counts.iter().enumerate() {
                prob *= p[(i, j)].powi(c as i32) / factorial(c);
            }
            if prob == 0.0 {
                continue;
            }
            for (m, w) in &acc {
                let mut m = m.clone();
                for (j, &c) in counts.iter().enumerate() {
                    m[(i, j)] = c as f64 / n as f64;
                }
                next.push((m, w * prob));
            }
        }
        acc = next;
    }
    acc
}

fn random_instance(rng: &mut ChaCha8Rng, s: usize) -> (DMatrix<f64>, DVector<f64>, f64, DMatrix<f64>) {
    let mut p = DMatrix::from_fn(s, s, |_, _| if rng.random_bool(0.25) { 0.0 } else { rng.random::<f64>() });
    for i in 0..s {
        p[(i, i)] += 0.05;
        let t = p.row(i).sum();
        p.row_mut(i).unscale_mut(t);
    }
    let b = DVector::from_fn(s, |_, _| rng.random_range(-1.0..1.0));
    let l = DMatrix::from_fn(s, s, |_, _| rng.random_range(-1.0..1.0));
    let m = &l * l.transpose() + DMatrix::identity(s, s) * 0.2;
    (p, b, rng.random_range(0.1..0.95), m)
}

#[test]
fn moments_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let s = 2 + case % 2;
        let n = 1 + (case as u64 % 3);
        let (p, b, gamma, m) = random_instance(&mut rng, s);
        let a = DMatrix::identity(s, s) - &p * gamma;
        let a_inv = a.clone().try_inverse().unwrap();
        let mut g = DMatrix::zeros(s, s);
        let mut h = DMatrix::zeros(s, s);
        for (p_hat, w) in joint_outcomes(&p, n) {
            let y = (&p - &p_hat) * gamma * &a_inv;
            g += (y.transpose() * &m * &y) * w;
            h += (&m * &y * &y + y.transpose() * y.transpose() * &m) * w;
        }
        let norm = NormSpec::custom(m).unwrap();
        let mom = compute_moments(&p, &b, &DVector::zeros(s), &SampleSizes::Uniform(n), gamma, &norm).unwrap();
        assert!((&mom.g_matrix - &g).amax() <= 1e-10, "case {case}: G off by {}", (&mom.g_matrix - &g).amax());
        assert!((&mom.h_matrix - &h).amax() <= 1e-10, "case {case}: H off by {}", (&mom.h_matrix - &h).amax());
    }
}

#[test]
fn exhaustive_statistics_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..10 {
        let s = 2 + case % 2;
        let n = 1 + (case as u64 % 3);
        let (p, b, gamma, _) = random_instance(&mut rng, s);
        let var = DVector::from_fn(s, |_, _| rng.random_range(0.0..0.3));
        let model = InducedModel::with_reward_variance(p.clone(), b.clone(), var.clone(), gamma).unwrap();
        let a = DMatrix::identity(s, s) - &p * gamma;
        let (mut num, mut den) = (0.0, 0.0);
        for (p_hat, w) in joint_outcomes(&p, n) {
            let a_hat = DMatrix::identity(s, s) - &p_hat * gamma;
            let x = a_hat.try_inverse().unwrap();
            let av = &a * &x * &b;
            num += w * b.dot(&av);
            // E over b̂ with cov = var/n: bᵀQb + Σ cov_i Q_ii, Q = (AX)ᵀ(AX).
            let ax = &a * &x;
            let q = ax.transpose() * &ax;
            den += w * (av.norm_squared() + (0..s).map(|i| var[i] / n as f64 * q[(i, i)]).sum::<f64>());
        }
        let stats = exhaustive_statistics(&model, &SampleSizes::Uniform(n), &NormSpec::Residual).unwrap();
        assert_relative_eq!(stats.mean_num, num, epsilon = 1e-12, max_relative = 1e-12);
        assert_relative_eq!(stats.mean_den, den, epsilon = 1e-12, max_relative = 1e-12);
    }
}

#[test]
fn sampling_is_unbiased_with_independent_rows() {
    let p = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.0, 0.4, 0.6]);
    let model = InducedModel::new(p.clone(), DVector::from_vec(vec![1.0, 0.0, -1.0]), 0.7).unwrap();
    let n = 3u64;
    let draws = 100_000;
    let root = RandomStream::new(2024);
    let samples: Vec<EstimatedModel> = (0..draws)
        .map(|k| sample_estimated_model(&model, &SampleSizes::Uniform(n), RewardCovMode::Oracle, root.substream(k)).unwrap())
        .collect();
    let mean = empirical_mean_transition(&samples).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let se = (p[(i, j)] * (1.0 - p[(i, j)]) / n as f64 / draws as f64).sqrt();
            assert!((mean[(i, j)] - p[(i, j)]).abs() <= 4.0 * se + 1e-15, "entry ({i},{j})");
        }
    }
    // Correlation between (0,0) and (1,0) errors, and between (0,1) and (2,2).
    for ((i1, j1), (i2, j2)) in [((0, 0), (1, 0)), ((0, 1), (2, 2))] {
        let x: Vec<f64> = samples.iter().map(|e| e.transition_hat()[(i1, j1)] - p[(i1, j1)]).collect();
        let y: Vec<f64> = samples.iter().map(|e| e.transition_hat()[(i2, j2)] - p[(i2, j2)]).collect();
        let mx = x.iter().sum::<f64>() / draws as f64;
        let my = y.iter().sum::<f64>() / draws as f64;
        let cxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let cxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let cyy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let corr = cxy / (cxx * cyy).sqrt();
        assert!(corr.abs() <= 4.0 / (draws as f64).sqrt(), "corr {corr}");
    }
}

#[test]
fn two_state_empirical_mean() {
    let model = InducedModel::new(DMatrix::from_element(2, 2, 0.5), DVector::from_vec(vec![1.0, 0.0]), 0.5).unwrap();
    let root = RandomStream::new(77);
    let samples: Vec<_> = (0..100_000)
        .map(|k| sample_estimated_model(&model, &SampleSizes::Uniform(1), RewardCovMode::Oracle, root.substream(k)).unwrap())
        .collect();
    let mean = empirical_mean_transition(&samples).unwrap();
    assert!(mean.iter().all(|&x| (x - 0.5).abs() <= 0.005));
}

#[test]
fn monte_carlo_agrees_with_enumeration() {
    let model = InducedModel::with_reward_variance(
        DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]),
        DVector::from_vec(vec![1.0, -0.5]),
        DVector::from_vec(vec![0.2, 0.1]),
        0.6,
    )
    .unwrap();
    let n = SampleSizes::Uniform(2);
    let exact = exhaustive_statistics(&model, &n, &NormSpec::Residual).unwrap();
    for treatment in [RewardTreatment::Decomposition, RewardTreatment::Sampled] {
        let mc = mc_statistics(&model, &n, 100_000, &NormSpec::Residual, treatment, RandomStream::new(5)).unwrap();
        let se = mc.epsilon_star_std_error();
        let diff = (mc.epsilon_star().unwrap() - exact.epsilon_star().unwrap()).abs();
        assert!(diff <= 4.0 * se, "{treatment:?}: diff {diff} vs se {se}");
    }
}

#[test]
fn mse_curve_is_quadratic_and_optimal() {
    let model = InducedModel::new(
        DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.1, 0.4, 0.5]),
        DVector::from_vec(vec![1.0, 0.2, -0.4]),
        0.8,
    )
    .unwrap();
    let n = SampleSizes::Uniform(4);
    let eps = [0.6, 0.8, 0.9, 1.0];
    let curve = mse_curve(&model, &n, &eps, 20_000, &NormSpec::Residual, RandomStream::new(9)).unwrap();
    assert!(curve.mse_values.iter().all(|&m| m >= 0.0));
    // Interpolate through the first three points, predict the fourth.
    let (x, y) = (&eps[..3], &curve.mse_values[..3]);
    let lagrange = |t: f64| {
        (0..3)
            .map(|i| {
                let mut w = y[i];
                for j in 0..3 {
                    if j != i {
                        w *= (t - x[j]) / (x[i] - x[j]);
                    }
                }
                w
            })
            .sum::<f64>()
    };
    let se: f64 = curve.std_errors.iter().map(|s| s * s).sum::<f64>().sqrt();
    assert!((lagrange(eps[3]) - curve.mse_values[3]).abs() <= 4.0 * se + 1e-12);
    for (&e, &m) in eps.iter().zip(&curve.mse_values) {
        assert!((curve.evaluate(e) - m).abs() <= 1e-12);
    }
    let star = curve.minimizer().unwrap();
    let independent = mc_statistics(&model, &n, 20_000, &NormSpec::Residual, RewardTreatment::Decomposition, RandomStream::new(10)).unwrap();
    let combined = (curve.statistics.epsilon_star_std_error().powi(2) + independent.epsilon_star_std_error().powi(2)).sqrt();
    assert!((star - independent.epsilon_star().unwrap()).abs() <= 3.0 * combined);
    assert!(curve.evaluate(star) <= curve.evaluate(1.0));
}

#[test]
fn surrogate_gap_shrinks_faster_than_one_over_n() {
    let model = InducedModel::new(DMatrix::from_element(2, 2, 0.5), DVector::from_vec(vec![1.0, 0.0]), 0.5).unwrap();
    let ns = [1u64, 2, 4, 8];
    for eps in [0.8, 0.9, 1.0] {
        let gaps: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let sizes = SampleSizes::Uniform(n);
                let exact = exhaustive_statistics(&model, &sizes, &NormSpec::Residual).unwrap();
                let mom = compute_moments(model.transition(), model.reward(), &DVector::zeros(2), &sizes, 0.5, &NormSpec::Residual).unwrap();
                (surrogate_mse(&mom, exact.b_norm_sq, eps) - exact.mse(eps)).abs()
            })
            .collect();
        let slope = log_log_slope(&ns.map(|n| n as f64), &gaps);
        assert!(slope <= -1.4 + 0.5, "eps {eps}: slope {slope}, gaps {gaps:?}");
    }
}

fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn plugin_on_truth_and_bootstrap_limit() {
    let p = DMatrix::from_element(2, 2, 0.5f64);
    let b = DVector::from_vec(vec![1.0, 0.0]);
    let est = EstimatedModel::from_parts(p.clone(), b.clone(), DVector::zeros(2), SampleSizes::Uniform(1), 0.5).unwrap();
    let plug = plugin_factor(&est, &NormSpec::Residual).unwrap();
    let oracle = theta(&p, &b, &DVector::zeros(2), &SampleSizes::Uniform(1), 0.5, &NormSpec::Residual).unwrap();
    assert_relative_eq!(plug.epsilon_tilde, oracle, epsilon = 1e-15);
    assert_relative_eq!(oracle, 0.85, epsilon = 1e-12);
    let boot = bootstrap_factor(&est, 10_000, &NormSpec::Residual, RandomStream::new(3)).unwrap();
    assert!((boot - plug.epsilon_tilde).abs() <= 0.02, "bootstrap {boot}");
}
