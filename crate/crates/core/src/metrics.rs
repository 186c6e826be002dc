//! Distance reports, transport maps, and moment-matching diagnostics built on
//! a fitted potential.
//!
//! The squared restricted distance is
//! `W2F^2 = 0.5 E_mu||X||^2 + 0.5 E_nu||Y||^2 - J(theta_bar)` where `J` is the
//! dual objective; plugging in any feasible (non-optimal) theta can only
//! shrink the value, so every report is a lower bound on the exact squared
//! distance up to inner-solver slack. The transport map from `nu` to `mu` is
//! the conjugate gradient `y -> grad f*(y; theta_bar)`, evaluated row by row.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::conjugate::{conjugate_batch, ConjugateConfig};
use crate::distributions::{empirical_moments, GaussianSpec, SampleSet};
use crate::linalg;
use crate::potentials::PotentialParams;
use crate::solver::{
    estimate_objective, fit, fit_ball_linear_closed_form, fit_quadratic_closed_form, ClassSpec,
    TrainConfig,
};
use crate::{Bounds, Error, Result};

/// Threshold below which a negative squared estimate is treated as solver
/// noise rather than a quality problem.
const NEGATIVE_NOISE_FLOOR: f64 = -1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct W2fReport {
    pub w2f_squared: f64,
    /// sqrt of the squared value clamped at zero.
    pub w2f: f64,
    /// 0.5 * mean ||x||^2 over the mu samples.
    pub self_term_mu: f64,
    /// 0.5 * mean ||y||^2 over the nu samples.
    pub self_term_nu: f64,
    /// The dual objective J(theta_bar) that produced the estimate.
    pub objective: f64,
    /// Set when w2f_squared is negative beyond the noise floor, which points
    /// at an under-solved inner loop or an infeasible potential.
    pub quality_warning: bool,
}

/// Assemble a report from an already-computed dual objective value.
pub fn report_from_objective(objective: f64, s_mu: &SampleSet, s_nu: &SampleSet) -> W2fReport {
    let self_mu = s_mu.half_second_moment();
    let self_nu = s_nu.half_second_moment();
    let sq = self_mu + self_nu - objective;
    W2fReport {
        w2f_squared: sq,
        w2f: sq.max(0.0).sqrt(),
        self_term_mu: self_mu,
        self_term_nu: self_nu,
        objective,
        quality_warning: sq < NEGATIVE_NOISE_FLOOR,
    }
}

/// Squared restricted distance under the fitted potential.
pub fn w2f_squared(
    theta_bar: &PotentialParams,
    s_mu: &SampleSet,
    s_nu: &SampleSet,
    inner: &ConjugateConfig,
    search_box: Option<&Bounds>,
) -> Result<W2fReport> {
    theta_bar.validate()?;
    let objective = estimate_objective(theta_bar, s_mu, s_nu, inner, search_box)?;
    Ok(report_from_objective(objective, s_mu, s_nu))
}

/// Closed-form quadratic-class report (exact minimizer, exact conjugates).
pub fn quadratic_w2f(s_mu: &SampleSet, s_nu: &SampleSet) -> Result<W2fReport> {
    let qf = fit_quadratic_closed_form(s_mu, s_nu)?;
    Ok(report_from_objective(qf.min_value, s_mu, s_nu))
}

/// Closed-form ball-linear report. The fitted weight is the mean gap
/// projected onto the radius ball and the squared value reduces to
/// `0.5||m||^2 - 0.5||m - w||^2`.
pub fn ball_linear_w2f(s_mu: &SampleSet, s_nu: &SampleSet, radius: f64) -> Result<W2fReport> {
    fit_ball_linear_closed_form(s_mu, s_nu, radius)?; // validates inputs
    let (m_mu, _) = empirical_moments(s_mu);
    let (m_nu, _) = empirical_moments(s_nu);
    let m = &m_nu - &m_mu;
    let sq = ball_linear_w2f_squared_from_mean_gap(&m, radius);
    let self_mu = s_mu.half_second_moment();
    let self_nu = s_nu.half_second_moment();
    Ok(W2fReport {
        w2f_squared: sq,
        w2f: sq.max(0.0).sqrt(),
        self_term_mu: self_mu,
        self_term_nu: self_nu,
        objective: self_mu + self_nu - sq,
        quality_warning: sq < NEGATIVE_NOISE_FLOOR,
    })
}

/// `0.5||m||^2 - 0.5||m - Proj(m)||^2` for a mean gap `m`; the population
/// version of the ball-linear closed form.
pub fn ball_linear_w2f_squared_from_mean_gap(m: &Array1<f64>, radius: f64) -> f64 {
    let norm = m.dot(m).sqrt();
    let w = if norm > radius {
        m * (radius / norm)
    } else {
        m.clone()
    };
    let resid = m - &w;
    0.5 * m.dot(m) - 0.5 * resid.dot(&resid)
}

/// Fit both directions and return `W2F(mu, nu) + W2F(nu, mu)`. Classes with a
/// closed-form minimizer (quadratic, ball-linear) use it; the rest run SGD.
pub fn w2f_symmetric(
    class: &ClassSpec,
    s_mu: &SampleSet,
    s_nu: &SampleSet,
    config: &TrainConfig,
) -> Result<f64> {
    let forward = w2f_one_direction(class, s_mu, s_nu, config)?;
    let backward = w2f_one_direction(class, s_nu, s_mu, config)?;
    Ok(forward.w2f + backward.w2f)
}

fn w2f_one_direction(
    class: &ClassSpec,
    s_mu: &SampleSet,
    s_nu: &SampleSet,
    config: &TrainConfig,
) -> Result<W2fReport> {
    match class {
        ClassSpec::Quadratic => quadratic_w2f(s_mu, s_nu),
        ClassSpec::BallLinear { radius } => ball_linear_w2f(s_mu, s_nu, *radius),
        _ => {
            let res = fit(class, s_mu, s_nu, config)?;
            w2f_squared(
                &res.theta_bar,
                s_mu,
                s_nu,
                &config.inner,
                config.search_box.as_ref(),
            )
        }
    }
}

/// The transport map applied to every nu sample, with per-row solver
/// telemetry.
#[derive(Debug, Clone)]
pub struct TransportMap {
    /// Row j is `grad f*(y_j; theta_bar)`.
    pub samples: SampleSet,
    /// Rows whose inner solve ended above the gradient tolerance.
    pub non_converged_rows: usize,
    pub total_inner_iterations: u64,
}

/// Push every `nu` sample through `y -> grad f*(y; theta_bar)`.
pub fn transport_map(
    theta_bar: &PotentialParams,
    s_nu: &SampleSet,
    inner: &ConjugateConfig,
    search_box: Option<&Bounds>,
) -> Result<TransportMap> {
    theta_bar.validate()?;
    let sols = conjugate_batch(theta_bar, s_nu.points(), inner, search_box, None, None)?;
    let d = s_nu.dim();
    let mut pts = Array2::<f64>::zeros((s_nu.count(), d));
    let mut non_converged = 0usize;
    let mut iters = 0u64;
    for (j, sol) in sols.iter().enumerate() {
        for c in 0..d {
            pts[[j, c]] = sol.x_hat[c];
        }
        if !sol.converged {
            non_converged += 1;
        }
        iters += sol.iters as u64;
    }
    Ok(TransportMap {
        samples: SampleSet::new(pts)?,
        non_converged_rows: non_converged,
        total_inner_iterations: iters,
    })
}

/// One matched statistic: its mean under the mu samples, its mean under the
/// pushforward of the nu samples, and the absolute residual.
#[derive(Debug, Clone, Serialize)]
pub struct MomentStat {
    pub statistic: String,
    pub mu_value: f64,
    pub push_value: f64,
    pub residual: f64,
}

/// Compare class-appropriate statistics between the mu samples and the
/// pushforward `T # nu`. Quadratic, PLQ, and ICNN classes report first and
/// second moments (PLQ/ICNN as proxy diagnostics); ball-linear reports first
/// moments; conic combinations report their basis-function expectations,
/// which are exactly the statistics matched at an interior optimum.
pub fn moment_match_report(
    theta_bar: &PotentialParams,
    s_mu: &SampleSet,
    s_nu: &SampleSet,
    inner: &ConjugateConfig,
    search_box: Option<&Bounds>,
) -> Result<Vec<MomentStat>> {
    let push = transport_map(theta_bar, s_nu, inner, search_box)?.samples;
    let d = s_mu.dim();
    let mut stats: Vec<(String, Box<dyn Fn(&Array1<f64>) -> f64>)> = Vec::new();
    match theta_bar {
        PotentialParams::ConeCombo(c) => {
            for (m, f) in c.basis.iter().enumerate() {
                let f = f.clone();
                stats.push((
                    format!("basis{m}"),
                    Box::new(move |x: &Array1<f64>| f.eval(x)),
                ));
            }
        }
        PotentialParams::BallLinear(_) => {
            for i in 0..d {
                stats.push((format!("x{i}"), Box::new(move |x: &Array1<f64>| x[i])));
            }
        }
        _ => {
            for i in 0..d {
                stats.push((format!("x{i}"), Box::new(move |x: &Array1<f64>| x[i])));
            }
            for i in 0..d {
                for j in i..d {
                    stats.push((
                        format!("x{i}*x{j}"),
                        Box::new(move |x: &Array1<f64>| x[i] * x[j]),
                    ));
                }
            }
        }
    }

    let mean_of = |s: &SampleSet, f: &dyn Fn(&Array1<f64>) -> f64| -> f64 {
        (0..s.count()).map(|r| f(&s.row(r))).sum::<f64>() / s.count() as f64
    };
    Ok(stats
        .into_iter()
        .map(|(name, f)| {
            let mu_value = mean_of(s_mu, f.as_ref());
            let push_value = mean_of(&push, f.as_ref());
            MomentStat {
                statistic: name,
                mu_value,
                push_value,
                residual: (mu_value - push_value).abs(),
            }
        })
        .collect())
}

/// Closed-form distance between Gaussians under the half-quadratic cost:
/// `sqrt(0.5 [ ||m1 - m2||^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}) ])`.
pub fn gaussian_w2_closed_form(spec_mu: &GaussianSpec, spec_nu: &GaussianSpec) -> Result<f64> {
    if spec_mu.dim() != spec_nu.dim() {
        return Err(Error::invalid("gaussian distance: dimension mismatch"));
    }
    let s1_half = linalg::spd_sqrt(&spec_mu.covariance);
    let middle = s1_half.dot(&spec_nu.covariance).dot(&s1_half);
    let cross = linalg::spd_sqrt(&middle);
    let d = spec_mu.dim();
    let mut trace = 0.0;
    for i in 0..d {
        trace += spec_mu.covariance[[i, i]] + spec_nu.covariance[[i, i]] - 2.0 * cross[[i, i]];
    }
    let dm = &spec_mu.mean - &spec_nu.mean;
    let sq = 0.5 * (dm.dot(&dm) + trace);
    Ok(sq.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::sample_gaussian;
    use crate::potentials::{icnn_identity_potential, QuadraticParams};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    /// Samples whose empirical moments are exactly m=0, var=1 and m=2, var=4.
    fn exact_moment_fixture() -> (SampleSet, SampleSet) {
        let s_mu = SampleSet::new(array![[-1.0], [1.0]]).unwrap();
        let s_nu = SampleSet::new(array![[0.0], [4.0]]).unwrap();
        (s_mu, s_nu)
    }

    #[test]
    fn fixture_report_is_two_point_five() {
        let (s_mu, s_nu) = exact_moment_fixture();
        let report = quadratic_w2f(&s_mu, &s_nu).unwrap();
        assert_abs_diff_eq!(report.w2f_squared, 2.5, epsilon = 1e-10);
        assert_abs_diff_eq!(report.w2f, 2.5f64.sqrt(), epsilon = 1e-10);
        assert!(!report.quality_warning);
    }

    #[test]
    fn identical_samples_with_identity_potential_give_zero() {
        let s = sample_gaussian(&GaussianSpec::standard(2), 64, 3).unwrap();
        let theta = PotentialParams::Quadratic(QuadraticParams::identity(2));
        let report =
            w2f_squared(&theta, &s, &s, &ConjugateConfig::default(), None).unwrap();
        assert!(report.w2f_squared.abs() <= 1e-10, "{}", report.w2f_squared);
    }

    #[test]
    fn feasible_theta_lower_bounds_the_fitted_value() {
        // any feasible theta gives a value at most the optimal one
        let s_mu = sample_gaussian(&GaussianSpec::standard(2), 300, 1).unwrap();
        let spec_nu = GaussianSpec::new(array![1.0, -0.5], array![[2.0, 0.3], [0.3, 1.0]])
            .unwrap();
        let s_nu = sample_gaussian(&spec_nu, 300, 2).unwrap();
        let optimal = quadratic_w2f(&s_mu, &s_nu).unwrap();
        let cfg = ConjugateConfig::default();
        for scale in [0.5, 1.0, 2.0, 5.0] {
            let theta = PotentialParams::Quadratic(QuadraticParams::new(
                scale * Array2::eye(2),
                array![0.1, 0.1],
            ));
            let plugin = w2f_squared(&theta, &s_mu, &s_nu, &cfg, None).unwrap();
            assert!(
                plugin.w2f_squared <= optimal.w2f_squared + 1e-9,
                "plug-in {} beat optimum {}",
                plugin.w2f_squared,
                optimal.w2f_squared
            );
        }
    }

    #[test]
    fn transport_map_on_one_dimensional_fixture() {
        // theta = (2, 2): T(y) = (y - 2) / 2
        let theta =
            PotentialParams::Quadratic(QuadraticParams::new(array![[2.0]], array![2.0]));
        let s_nu = SampleSet::new(array![[2.0], [6.0]]).unwrap();
        let map = transport_map(&theta, &s_nu, &ConjugateConfig::default(), None).unwrap();
        assert_abs_diff_eq!(map.samples.points()[[0, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(map.samples.points()[[1, 0]], 2.0, epsilon = 1e-12);
        assert_eq!(map.non_converged_rows, 0);
    }

    #[test]
    fn identity_potential_maps_identically() {
        let theta = PotentialParams::Icnn(icnn_identity_potential(2, 0.0));
        let s_nu = sample_gaussian(&GaussianSpec::standard(2), 32, 5).unwrap();
        let cfg = ConjugateConfig {
            max_iter: 500,
            grad_tol: 1e-10,
            ..ConjugateConfig::default()
        };
        let map = transport_map(&theta, &s_nu, &cfg, Some(&Bounds::cube(2, 12.0))).unwrap();
        let err = crate::oracle::map_error(&map.samples, &s_nu).unwrap();
        assert!(err <= 1e-6, "identity map error {err}");
    }

    #[test]
    fn fixture_pushforward_standardizes_gaussian() {
        // T(y) = (y - 2)/2 sends N(2, 4) to N(0, 1)
        let spec = GaussianSpec::new(array![2.0], array![[4.0]]).unwrap();
        let s_nu = sample_gaussian(&spec, 10_000, 8).unwrap();
        let theta =
            PotentialParams::Quadratic(QuadraticParams::new(array![[2.0]], array![2.0]));
        let map = transport_map(&theta, &s_nu, &ConjugateConfig::default(), None).unwrap();
        let (mean, cov) = empirical_moments(&map.samples);
        assert!(mean[0].abs() < 0.05, "mean {}", mean[0]);
        assert!((cov[[0, 0]] - 1.0).abs() < 0.1, "var {}", cov[[0, 0]]);
    }

    #[test]
    fn closed_form_fit_matches_moments_exactly() {
        let s_mu = sample_gaussian(&GaussianSpec::standard(2), 500, 21).unwrap();
        let spec_nu =
            GaussianSpec::new(array![1.0, 2.0], array![[1.5, -0.2], [-0.2, 0.7]]).unwrap();
        let s_nu = sample_gaussian(&spec_nu, 500, 22).unwrap();
        let theta = fit_quadratic_closed_form(&s_mu, &s_nu).unwrap().params();
        let report =
            moment_match_report(&theta, &s_mu, &s_nu, &ConjugateConfig::default(), None)
                .unwrap();
        for stat in &report {
            assert!(
                stat.residual <= 1e-8,
                "{}: residual {}",
                stat.statistic,
                stat.residual
            );
        }
    }

    #[test]
    fn random_feasible_theta_leaves_residuals() {
        let s_mu = sample_gaussian(&GaussianSpec::standard(2), 200, 31).unwrap();
        let spec_nu = GaussianSpec::new(array![2.0, 0.0], array![[1.0, 0.0], [0.0, 1.0]])
            .unwrap();
        let s_nu = sample_gaussian(&spec_nu, 200, 32).unwrap();
        let theta = PotentialParams::Quadratic(QuadraticParams::new(
            array![[3.0, 0.0], [0.0, 0.5]],
            array![1.0, -1.0],
        ));
        let report =
            moment_match_report(&theta, &s_mu, &s_nu, &ConjugateConfig::default(), None)
                .unwrap();
        let worst = report.iter().map(|s| s.residual).fold(0.0f64, f64::max);
        assert!(worst > 1e-3, "expected visible residuals, worst {worst}");
    }

    #[test]
    fn gaussian_closed_form_hand_values() {
        let a = GaussianSpec::standard(1);
        assert_abs_diff_eq!(gaussian_w2_closed_form(&a, &a).unwrap(), 0.0);

        let b = GaussianSpec::new(array![2.0], array![[4.0]]).unwrap();
        assert_abs_diff_eq!(
            gaussian_w2_closed_form(&a, &b).unwrap(),
            2.5f64.sqrt(),
            epsilon = 1e-12
        );

        // commuting diagonal case with equal means
        let c = GaussianSpec::new(array![0.0, 0.0], Array2::eye(2)).unwrap();
        let d = GaussianSpec::new(array![0.0, 0.0], array![[4.0, 0.0], [0.0, 9.0]]).unwrap();
        assert_abs_diff_eq!(
            gaussian_w2_closed_form(&c, &d).unwrap(),
            2.5f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn symmetric_sum_is_twice_bures_for_quadratic_class() {
        let s_mu = sample_gaussian(&GaussianSpec::standard(2), 400, 41).unwrap();
        let spec_nu =
            GaussianSpec::new(array![1.0, -1.0], array![[2.0, 0.5], [0.5, 1.0]]).unwrap();
        let s_nu = sample_gaussian(&spec_nu, 400, 42).unwrap();
        let total = w2f_symmetric(
            &ClassSpec::Quadratic,
            &s_mu,
            &s_nu,
            &TrainConfig::default(),
        )
        .unwrap();
        // both directions equal the Bures distance of the empirical moments
        let (m1, c1) = empirical_moments(&s_mu);
        let (m2, c2) = empirical_moments(&s_nu);
        let g1 = GaussianSpec::new(m1, linalg::symmetrize(&c1)).unwrap();
        let g2 = GaussianSpec::new(m2, linalg::symmetrize(&c2)).unwrap();
        let bures = gaussian_w2_closed_form(&g1, &g2).unwrap();
        assert_abs_diff_eq!(total, 2.0 * bures, epsilon = 1e-6);
    }

    #[test]
    fn symmetric_sum_vanishes_on_identical_samples() {
        let s = sample_gaussian(&GaussianSpec::standard(2), 200, 51).unwrap();
        let total =
            w2f_symmetric(&ClassSpec::Quadratic, &s, &s, &TrainConfig::default()).unwrap();
        assert!(total.abs() <= 1e-6, "symmetric sum {total}");
    }
}
