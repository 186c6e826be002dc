//! Approximate 2-Wasserstein distances and transport maps by optimizing the
//! dual Kantorovich objective over parametrized classes of convex potentials.
//!
//! The dual objective for quadratic cost, after the usual change of variables,
//! is `J(f) = E_mu[f(X)] + E_nu[f*(Y)]` over convex `f`, where `f*` is the
//! convex conjugate. Restricting `f` to a parametrized class (quadratics,
//! ball-constrained linear-plus-identity potentials, conic combinations,
//! piecewise-linear-quadratic maxima, or input-convex neural networks) turns
//! the problem into finite-dimensional projected SGD with a conjugate oracle
//! in the inner loop. The squared distance estimate is
//! `0.5*E_mu||X||^2 + 0.5*E_nu||Y||^2 - min_theta J(theta)` and the transport
//! map sending `nu` to `mu` is `y -> grad f*(y; theta)`.
//!
//! Modules:
//! - [`distributions`]: sample sets, synthetic generators, CSV I/O
//! - [`potentials`]: the convex potential classes and their calculus
//! - [`conjugate`]: numerical convex conjugates (inner loop)
//! - [`solver`]: projected SGD and closed-form fitters (outer loop)
//! - [`metrics`]: distance reports, transport maps, moment diagnostics
//! - [`oracle`]: exact assignment, Sinkhorn, and barycentric baselines
//!
//! Batch-level loops (per-sample conjugate solves, Sinkhorn sweeps, map
//! evaluation) run on rayon when the default `parallel` feature is enabled
//! and fall back to sequential iteration otherwise.

pub mod conjugate;
pub mod distributions;
mod exec;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod potentials;
pub mod solver;

use ndarray::Array1;

/// Errors produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input violated a documented precondition (shape, positivity, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// CSV parse failure with a 1-based line number.
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    /// The inner conjugate ascent produced non-finite iterates.
    #[error("conjugate solve diverged for class `{class}` at y = {y:?}")]
    ConjugateDiverged { class: &'static str, y: Vec<f64> },

    /// Training hit a non-finite objective or gradient; the last finite
    /// parameters are carried so callers can checkpoint them.
    #[error("fit diverged at epoch {epoch}; last good parameters retained")]
    FitDiverged {
        epoch: usize,
        last_good: Box<potentials::PotentialParams>,
    },

    /// Dense N x N work was refused because it would exceed the memory guard.
    #[error("refusing dense {n} x {n} problem (limit {limit})")]
    TooLarge { n: usize, limit: usize },

    /// Checkpoint or report (de)serialization failure.
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

/// An axis-aligned compact search region used when the inner maximization
/// could otherwise be unbounded (potentials with zero strong convexity).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::invalid("bounds lo/hi length mismatch"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::invalid("bounds must satisfy lo < hi"));
        }
        Ok(Bounds { lo, hi })
    }

    /// Symmetric cube [-r, r]^d.
    pub fn cube(dim: usize, r: f64) -> Self {
        Bounds {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Project a point onto the box, coordinate-wise.
    pub fn clamp(&self, x: &mut Array1<f64>) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = xi.clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn contains(&self, x: &Array1<f64>) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &xi)| self.lo[i] <= xi && xi <= self.hi[i])
    }
}
