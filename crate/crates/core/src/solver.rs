//! Outer loop: projected stochastic gradient descent on the dual objective,
//! plus exact closed-form fitters for the classes that admit them.
//!
//! The empirical objective for potentials `f(.; theta)` is
//! `J(theta) = (1/N) sum_i f(x_i) + (1/N') sum_j f*(y_j)`, with conjugates
//! from the [`crate::conjugate`] module. Each epoch draws one batch per
//! marginal, forms the unbiased gradient estimate
//! `u = (1/M) sum_i [grad_theta f(X_i) - grad_theta f(Xhat_i)]` where
//! `Xhat_i = grad f*(Y_i)`, and applies `theta <- Proj(theta - eta_k u)`.
//! The gradient is averaged rather than summed so step sizes do not depend
//! on the batch size.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

use crate::conjugate::{conjugate_batch, ConjugateConfig, WarmStartCache};
use crate::distributions::{empirical_moments, stream_rng, SampleSet};
use crate::exec;
use crate::linalg;
use crate::potentials::{
    Activation, BasisFunction, IcnnLayer, IcnnParams, IcnnReadout, ParamGradient, PlqParams,
    PlqPiece, PotentialParams, QuadraticParams,
};
use crate::potentials::BallLinearParams;
use crate::{Bounds, Error, Result};

/// Random-stream ids private to training.
const INIT_STREAM: u64 = 5;
const BATCH_STREAM: u64 = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    /// Explicit per-epoch steps; the last entry repeats if epochs exceed it.
    PerEpoch(Vec<f64>),
    /// eta_0 / sqrt(k + 1).
    InvSqrt { eta0: f64 },
}

impl StepSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match self {
            StepSchedule::Constant(eta) => *eta,
            StepSchedule::PerEpoch(list) => *list
                .get(epoch)
                .or_else(|| list.last())
                .expect("step schedule must be nonempty"),
            StepSchedule::InvSqrt { eta0 } => eta0 / ((epoch + 1) as f64).sqrt(),
        }
    }

    fn validate(&self, epochs: usize) -> Result<()> {
        let bad = match self {
            StepSchedule::Constant(eta) => !(eta > &0.0),
            StepSchedule::PerEpoch(list) => {
                list.is_empty() || (0..epochs).any(|k| !(self.at(k) > 0.0))
            }
            StepSchedule::InvSqrt { eta0 } => !(eta0 > &0.0),
        };
        if bad {
            return Err(Error::invalid("train: every step size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSchedule {
    Constant(usize),
    PerEpoch(Vec<usize>),
}

impl BatchSchedule {
    pub fn at(&self, epoch: usize) -> usize {
        match self {
            BatchSchedule::Constant(m) => *m,
            BatchSchedule::PerEpoch(list) => *list
                .get(epoch)
                .or_else(|| list.last())
                .expect("batch schedule must be nonempty"),
        }
    }

    fn validate(&self, epochs: usize) -> Result<()> {
        let bad = match self {
            BatchSchedule::Constant(m) => *m == 0,
            BatchSchedule::PerEpoch(list) => {
                list.is_empty() || (0..epochs).any(|k| self.at(k) == 0)
            }
        };
        if bad {
            return Err(Error::invalid("train: every batch size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of projected-SGD updates (one batch per epoch).
    pub epochs: usize,
    pub step: StepSchedule,
    pub batch: BatchSchedule,
    pub inner: ConjugateConfig,
    pub seed: u64,
    /// Record the full objective every this many epochs (0 = final only).
    pub eval_every: usize,
    /// Required when the class has zero strong-convexity modulus.
    pub search_box: Option<Bounds>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            step: StepSchedule::Constant(1e-3),
            batch: BatchSchedule::Constant(64),
            inner: ConjugateConfig::default(),
            seed: 0,
            eval_every: 50,
            search_box: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train: epochs must be >= 1"));
        }
        self.step.validate(self.epochs)?;
        self.batch.validate(self.epochs)?;
        self.inner.validate()
    }
}

/// Which potential class to fit, with enough structure to build a feasible
/// starting point at any data dimension.
#[derive(Debug, Clone)]
pub enum ClassSpec {
    Quadratic,
    BallLinear { radius: f64 },
    ConeCombo { basis: Vec<BasisFunction> },
    /// `pieces` quadratic pieces, initialized at identity with scattered
    /// linear terms so the maximum is not degenerate.
    Plq { pieces: usize },
    Icnn(IcnnSpec),
}

#[derive(Debug, Clone)]
pub struct IcnnSpec {
    pub widths: Vec<usize>,
    /// One activation per hidden layer; defaults to squared ReLU on the
    /// first layer and ReLU afterwards.
    pub activations: Option<Vec<Activation>>,
    pub eta: f64,
}

impl IcnnSpec {
    pub fn new(widths: Vec<usize>, eta: f64) -> Self {
        IcnnSpec {
            widths,
            activations: None,
            eta,
        }
    }

    fn resolved_activations(&self) -> Vec<Activation> {
        match &self.activations {
            Some(list) => list.clone(),
            None => (0..self.widths.len())
                .map(|l| {
                    if l == 0 {
                        Activation::ReluSquared
                    } else {
                        Activation::Relu
                    }
                })
                .collect(),
        }
    }
}

impl ClassSpec {
    /// Deterministic feasible starting point at dimension `d`.
    ///
    /// Quadratic starts at the identity potential (A, b) = (I, 0); ball-linear
    /// at w = 0; conic combinations at alpha = 1/M; PLQ pieces at identity
    /// curvature with linear terms drawn uniformly from [-1/2, 1/2]; ICNN skip
    /// weights uniform in [-1/sqrt(d), 1/sqrt(d)], hidden weights uniform in
    /// [0, 1/prev_width], readout uniform in [0, 1/width_L], zero biases.
    pub fn initial_params(&self, d: usize, seed: u64) -> Result<PotentialParams> {
        if d == 0 {
            return Err(Error::invalid("class init: dimension must be >= 1"));
        }
        let mut rng = stream_rng(seed, INIT_STREAM);
        let theta = match self {
            ClassSpec::Quadratic => {
                PotentialParams::Quadratic(QuadraticParams::identity(d))
            }
            ClassSpec::BallLinear { radius } => {
                if !(radius > &0.0) {
                    return Err(Error::invalid("ball-linear radius must be positive"));
                }
                PotentialParams::BallLinear(BallLinearParams::new(Array1::zeros(d), *radius))
            }
            ClassSpec::ConeCombo { basis } => {
                if basis.is_empty() {
                    return Err(Error::invalid("cone-combo basis must be nonempty"));
                }
                let m = basis.len();
                PotentialParams::ConeCombo(crate::potentials::ConeComboParams::new(
                    Array1::from_elem(m, 1.0 / m as f64),
                    basis.clone(),
                ))
            }
            ClassSpec::Plq { pieces } => {
                if *pieces == 0 {
                    return Err(Error::invalid("plq needs at least one piece"));
                }
                let mut ps = Vec::with_capacity(*pieces);
                for m in 0..*pieces {
                    let b = if m == 0 {
                        Array1::zeros(d)
                    } else {
                        (0..d).map(|_| rng.random::<f64>() - 0.5).collect()
                    };
                    ps.push(PlqPiece {
                        a: Array2::eye(d),
                        b,
                        c: 0.0,
                    });
                }
                PotentialParams::Plq(PlqParams::new(ps))
            }
            ClassSpec::Icnn(spec) => {
                if spec.widths.is_empty() {
                    return Err(Error::invalid("icnn needs at least one hidden layer"));
                }
                let acts = spec.resolved_activations();
                if acts.len() != spec.widths.len() {
                    return Err(Error::invalid(
                        "icnn: one activation per hidden layer required",
                    ));
                }
                let skip_scale = 1.0 / (d as f64).sqrt();
                let mut layers = Vec::with_capacity(spec.widths.len());
                let mut prev = 0usize;
                for (l, (&width, &act)) in spec.widths.iter().zip(acts.iter()).enumerate() {
                    let a = Array2::from_shape_fn((width, d), |_| {
                        (rng.random::<f64>() * 2.0 - 1.0) * skip_scale
                    });
                    let w = if l == 0 {
                        None
                    } else {
                        let hidden_scale = 1.0 / prev as f64;
                        Some(Array2::from_shape_fn((width, prev), |_| {
                            rng.random::<f64>() * hidden_scale
                        }))
                    };
                    layers.push(IcnnLayer {
                        w,
                        a,
                        b: Array1::zeros(width),
                        activation: act,
                    });
                    prev = width;
                }
                let readout_scale = 1.0 / prev as f64;
                let readout = IcnnReadout {
                    w: (0..prev).map(|_| rng.random::<f64>() * readout_scale).collect(),
                    a: Array1::zeros(d),
                    b: 0.0,
                };
                PotentialParams::Icnn(IcnnParams {
                    layers,
                    readout,
                    eta: spec.eta,
                })
            }
        };
        theta.validate()?;
        Ok(theta)
    }
}

/// Telemetry from the conjugate solves inside one gradient estimate.
#[derive(Debug, Clone, Copy, Default)]
pub struct InnerStats {
    pub iterations: u64,
    pub non_converged: u64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_bar: PotentialParams,
    /// (epoch, objective estimate) pairs at the eval cadence plus the end.
    pub objective_history: Vec<(usize, f64)>,
    pub grad_norm_history: Vec<f64>,
    pub wall_time_seconds: f64,
    pub inner_iteration_totals: u64,
    pub inner_non_converged: u64,
}

/// Empirical dual objective `mean f(x_i) + mean f*(y_j)`.
pub fn estimate_objective(
    theta: &PotentialParams,
    s_mu: &SampleSet,
    s_nu: &SampleSet,
    inner: &ConjugateConfig,
    search_box: Option<&Bounds>,
) -> Result<f64> {
    if s_mu.dim() != s_nu.dim() || s_mu.dim() != theta.dim() {
        return Err(Error::invalid("objective: dimension mismatch"));
    }
    let n_mu = s_mu.count();
    let f_vals = exec::map_indices(n_mu, |i| theta.eval(&s_mu.row(i)));
    let term_mu = f_vals.iter().sum::<f64>() / n_mu as f64;
    let sols = conjugate_batch(theta, s_nu.points(), inner, search_box, None, None)?;
    let term_nu = sols.iter().map(|s| s.value).sum::<f64>() / s_nu.count() as f64;
    Ok(term_mu + term_nu)
}

/// Batch gradient estimate of the objective: averaged difference of parameter
/// gradients at the mu-batch points and at the conjugate maximizers of the
/// nu-batch points.
pub fn stochastic_gradient(
    theta: &PotentialParams,
    batch_x: &Array2<f64>,
    batch_y: &Array2<f64>,
    inner: &ConjugateConfig,
    search_box: Option<&Bounds>,
    y_indices: Option<&[usize]>,
    cache: Option<&mut WarmStartCache>,
) -> Result<(ParamGradient, InnerStats)> {
    let m = batch_x.nrows();
    if m == 0 || batch_y.nrows() == 0 {
        return Err(Error::invalid("gradient: batches must be nonempty"));
    }
    if batch_y.nrows() != m {
        return Err(Error::invalid("gradient: batches must have equal size"));
    }
    let sols = conjugate_batch(theta, batch_y, inner, search_box, y_indices, cache)?;
    let stats = InnerStats {
        iterations: sols.iter().map(|s| s.iters as u64).sum(),
        non_converged: sols.iter().filter(|s| !s.converged).count() as u64,
    };

    let contribs: Vec<Vec<f64>> = exec::map_indices(m, |i| {
        let gx = theta.grad_params(&batch_x.row(i).to_owned()).flatten();
        let gh = theta.grad_params(&sols[i].x_hat).flatten();
        gx.iter().zip(gh.iter()).map(|(a, b)| a - b).collect()
    });
    let p = contribs[0].len();
    let mut acc = vec![0.0f64; p];
    for c in &contribs {
        for (a, v) in acc.iter_mut().zip(c.iter()) {
            *a += v;
        }
    }
    let scale = 1.0 / m as f64;
    for a in acc.iter_mut() {
        *a *= scale;
    }
    // shape the flat accumulator like a gradient of this class
    let template = theta.grad_params(&batch_x.row(0).to_owned());
    Ok((template.with_flat(&acc), stats))
}

/// Run projected SGD from the class's documented starting point.
pub fn fit(
    class: &ClassSpec,
    s_mu: &SampleSet,
    s_nu: &SampleSet,
    config: &TrainConfig,
) -> Result<FitResult> {
    let theta0 = class.initial_params(s_mu.dim(), config.seed)?;
    fit_from(theta0, s_mu, s_nu, config)
}

/// Run projected SGD from an explicit (e.g. checkpointed) starting point.
pub fn fit_from(
    theta0: PotentialParams,
    s_mu: &SampleSet,
    s_nu: &SampleSet,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    theta0.validate()?;
    if s_mu.dim() != s_nu.dim() || s_mu.dim() != theta0.dim() {
        return Err(Error::invalid("fit: dimension mismatch"));
    }
    if theta0.strong_convexity_modulus() <= 0.0 && config.search_box.is_none() {
        return Err(Error::invalid(
            "fit: class has zero strong convexity; config.search_box is required",
        ));
    }

    let start = Instant::now();
    let mut theta = theta0;
    let mut cache = WarmStartCache::new(s_nu.count());
    let mut rng = stream_rng(config.seed, BATCH_STREAM);
    let mut objective_history = Vec::new();
    let mut grad_norm_history = Vec::with_capacity(config.epochs);
    let mut inner_iters = 0u64;
    let mut inner_nc = 0u64;
    let n_mu = s_mu.count();
    let n_nu = s_nu.count();
    let search_box = config.search_box.as_ref();

    for epoch in 0..config.epochs {
        let m = config.batch.at(epoch);
        let eta = config.step.at(epoch);
        let xi: Vec<usize> = (0..m).map(|_| rng.random_range(0..n_mu)).collect();
        let yi: Vec<usize> = (0..m).map(|_| rng.random_range(0..n_nu)).collect();
        let bx = rows(s_mu, &xi);
        let by = rows(s_nu, &yi);
        let (grad, stats) = stochastic_gradient(
            &theta,
            &bx,
            &by,
            &config.inner,
            search_box,
            Some(&yi),
            Some(&mut cache),
        )?;
        inner_iters += stats.iterations;
        inner_nc += stats.non_converged;
        if !grad.is_finite() {
            return Err(Error::FitDiverged {
                epoch,
                last_good: Box::new(theta),
            });
        }
        let next = theta.step(&grad, eta);
        grad_norm_history.push(grad.norm());
        theta = next;

        let record = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        if record || epoch + 1 == config.epochs {
            let j = estimate_objective(&theta, s_mu, s_nu, &config.inner, search_box)?;
            if !j.is_finite() {
                return Err(Error::FitDiverged {
                    epoch,
                    last_good: Box::new(theta),
                });
            }
            objective_history.push((epoch + 1, j));
        }
    }

    Ok(FitResult {
        theta_bar: theta,
        objective_history,
        grad_norm_history,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        inner_iteration_totals: inner_iters,
        inner_non_converged: inner_nc,
    })
}

fn rows(s: &SampleSet, indices: &[usize]) -> Array2<f64> {
    let d = s.dim();
    let mut out = Array2::<f64>::zeros((indices.len(), d));
    for (r, &i) in indices.iter().enumerate() {
        for c in 0..d {
            out[[r, c]] = s.points()[[i, c]];
        }
    }
    out
}

/// The unique quadratic-class minimizer computed from empirical moments.
#[derive(Debug, Clone)]
pub struct QuadraticFit {
    pub a_bar: Array2<f64>,
    pub b_bar: Array1<f64>,
    /// Minimum of the dual objective: m_X . m_Y + tr((S_X^1/2 S_Y S_X^1/2)^1/2).
    pub min_value: f64,
}

impl QuadraticFit {
    pub fn params(&self) -> PotentialParams {
        PotentialParams::Quadratic(QuadraticParams::new(self.a_bar.clone(), self.b_bar.clone()))
    }
}

/// Closed-form quadratic fit:
/// `A = S_X^{-1/2} (S_X^{1/2} S_Y S_X^{1/2})^{1/2} S_X^{-1/2}`,
/// `b = m_Y - A m_X`, evaluated on empirical moments. Covariances whose
/// smallest eigenvalue falls below the SPD floor are eigen-clamped first
/// (with a warning).
pub fn fit_quadratic_closed_form(s_mu: &SampleSet, s_nu: &SampleSet) -> Result<QuadraticFit> {
    if s_mu.dim() != s_nu.dim() {
        return Err(Error::invalid("quadratic fit: dimension mismatch"));
    }
    let (m_x, cov_x_raw) = empirical_moments(s_mu);
    let (m_y, cov_y_raw) = empirical_moments(s_nu);
    let floor = crate::potentials::DEFAULT_EPS_SPD;
    let cov_x = clamp_if_needed(cov_x_raw, floor, "mu");
    let cov_y = clamp_if_needed(cov_y_raw, floor, "nu");

    let sx_half = linalg::spd_sqrt(&cov_x);
    let sx_inv_half = linalg::spd_inv_sqrt(&cov_x)?;
    let middle = sx_half.dot(&cov_y).dot(&sx_half);
    let middle_half = linalg::spd_sqrt(&middle);
    let a_bar = linalg::symmetrize(&sx_inv_half.dot(&middle_half).dot(&sx_inv_half));
    let b_bar = &m_y - &a_bar.dot(&m_x);
    let trace: f64 = (0..middle_half.nrows()).map(|i| middle_half[[i, i]]).sum();
    let min_value = m_x.dot(&m_y) + trace;
    Ok(QuadraticFit {
        a_bar,
        b_bar,
        min_value,
    })
}

fn clamp_if_needed(cov: Array2<f64>, floor: f64, side: &str) -> Array2<f64> {
    if linalg::min_eigenvalue(&cov) < floor {
        log::warn!("{side} covariance nearly singular; eigen-clamping at {floor:.1e}");
        linalg::clamp_eigenvalues(&cov, floor)
    } else {
        cov
    }
}

/// Closed-form ball-linear fit: the mean gap `m = m_nu - m_mu` projected onto
/// the radius-`L` ball.
pub fn fit_ball_linear_closed_form(
    s_mu: &SampleSet,
    s_nu: &SampleSet,
    radius: f64,
) -> Result<Array1<f64>> {
    if !(radius > 0.0) {
        return Err(Error::invalid("ball-linear fit: radius must be positive"));
    }
    if s_mu.dim() != s_nu.dim() {
        return Err(Error::invalid("ball-linear fit: dimension mismatch"));
    }
    let (m_mu, _) = empirical_moments(s_mu);
    let (m_nu, _) = empirical_moments(s_nu);
    let m = &m_nu - &m_mu;
    let norm = m.dot(&m).sqrt();
    Ok(if norm > radius { m * (radius / norm) } else { m })
}

pub fn save_checkpoint(theta: &PotentialParams, path: &Path) -> Result<()> {
    std::fs::write(path, theta.to_checkpoint_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PotentialParams> {
    let text = std::fs::read_to_string(path)?;
    PotentialParams::from_checkpoint_json(&text)
}
