//! Parametrized classes of convex potentials.
//!
//! Every class keeps `f(.; theta)` convex in the input by construction:
//!
//! - `Quadratic`: f(x) = 0.5 x^T A x + b^T x with A symmetric, eigenvalues
//!   bounded below by `eps_spd`.
//! - `BallLinear`: f(x) = 0.5 ||x||^2 + w^T x with ||w||_2 <= radius.
//! - `ConeCombo`: nonnegative combinations of a fixed basis of convex
//!   functions (each a quadratic or PLQ value), always including whatever the
//!   caller puts in the basis.
//! - `Plq`: f(x) = max_m 0.5 x^T A_m x + b_m^T x + c_m over SPD pieces.
//! - `Icnn`: an input-convex network, h_{l+1} = act(W_l h_l + b_l + A_l x)
//!   with entrywise-nonnegative W and a nonnegative linear readout, plus an
//!   optional eta/2 ||x||^2 term that makes the potential strongly convex.
//!
//! All parameter derivatives are exact reverse-mode accumulations; at ReLU and
//! PLQ kinks the subgradient of the lowest-index active piece is returned, so
//! training is deterministic.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::stream_rng;
use crate::linalg;
use crate::{Bounds, Error, Result};

/// Default eigenvalue floor that keeps quadratic pieces invertible.
pub const DEFAULT_EPS_SPD: f64 = 1e-6;

/// Random-stream id for the convexity probe.
const PROBE_STREAM: u64 = 4;

/// Relative slack accepted by feasibility checks, so that projection output
/// (which clamps at the exact bound) always validates.
const FEAS_SLACK: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Activations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    ReluSquared,
    Softplus,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::ReluSquared => {
                let p = z.max(0.0);
                p * p
            }
            // max(z,0) + ln(1 + exp(-|z|)) is overflow-free
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// One-sided derivative; at the ReLU kink the flat (lowest-index) piece
    /// wins, so d/dz at 0 is 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::ReluSquared => 2.0 * z.max(0.0),
            Activation::Softplus => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Per-class parameter structs

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticParams {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub eps_spd: f64,
}

impl QuadraticParams {
    pub fn new(a: Array2<f64>, b: Array1<f64>) -> Self {
        QuadraticParams {
            a,
            b,
            eps_spd: DEFAULT_EPS_SPD,
        }
    }

    /// The identity potential 0.5 ||x||^2, i.e. (A, b) = (I, 0).
    pub fn identity(d: usize) -> Self {
        QuadraticParams::new(Array2::eye(d), Array1::zeros(d))
    }

    fn validate(&self) -> Result<()> {
        let d = self.b.len();
        if self.a.nrows() != d || self.a.ncols() != d {
            return Err(Error::invalid("quadratic: A shape must match b length"));
        }
        if self.eps_spd <= 0.0 {
            return Err(Error::invalid("quadratic: eps_spd must be positive"));
        }
        if self.a.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("quadratic: non-finite parameters"));
        }
        if linalg::max_abs_asymmetry(&self.a) > 1e-9 {
            return Err(Error::invalid("quadratic: A must be symmetric"));
        }
        let wmin = linalg::min_eigenvalue(&self.a);
        if wmin < self.eps_spd * (1.0 - FEAS_SLACK) - 1e-15 {
            return Err(Error::invalid(format!(
                "quadratic: min eigenvalue {wmin:.3e} below floor {:.3e}",
                self.eps_spd
            )));
        }
        Ok(())
    }

    fn eval(&self, x: &Array1<f64>) -> f64 {
        let ax = self.a.dot(x);
        0.5 * x.dot(&ax) + self.b.dot(x)
    }

    fn grad_x(&self, x: &Array1<f64>) -> Array1<f64> {
        // exact gradient of the stored form; equals A x + b once A is symmetric
        0.5 * (self.a.dot(x) + self.a.t().dot(x)) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallLinearParams {
    pub w: Array1<f64>,
    pub radius: f64,
}

impl BallLinearParams {
    pub fn new(w: Array1<f64>, radius: f64) -> Self {
        BallLinearParams { w, radius }
    }

    fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 {
            return Err(Error::invalid("ball-linear: radius must be positive"));
        }
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ball-linear: non-finite weights"));
        }
        let norm = self.w.dot(&self.w).sqrt();
        if norm > self.radius * (1.0 + FEAS_SLACK) {
            return Err(Error::invalid(format!(
                "ball-linear: ||w|| = {norm:.6e} exceeds radius {}",
                self.radius
            )));
        }
        Ok(())
    }

    fn eval(&self, x: &Array1<f64>) -> f64 {
        0.5 * x.dot(x) + self.w.dot(x)
    }

    fn grad_x(&self, x: &Array1<f64>) -> Array1<f64> {
        x + &self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlqPiece {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlqParams {
    pub pieces: Vec<PlqPiece>,
    pub eps_spd: f64,
}

impl PlqParams {
    pub fn new(pieces: Vec<PlqPiece>) -> Self {
        PlqParams {
            pieces,
            eps_spd: DEFAULT_EPS_SPD,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.pieces.is_empty() {
            return Err(Error::invalid("plq: needs at least one piece"));
        }
        let d = self.pieces[0].b.len();
        for (m, p) in self.pieces.iter().enumerate() {
            if p.b.len() != d || p.a.nrows() != d || p.a.ncols() != d {
                return Err(Error::invalid(format!("plq: piece {m} shape mismatch")));
            }
            if !p.c.is_finite()
                || p.a.iter().chain(p.b.iter()).any(|v| !v.is_finite())
            {
                return Err(Error::invalid(format!("plq: piece {m} non-finite")));
            }
            if linalg::max_abs_asymmetry(&p.a) > 1e-9 {
                return Err(Error::invalid(format!("plq: piece {m} A not symmetric")));
            }
            let wmin = linalg::min_eigenvalue(&p.a);
            if wmin < self.eps_spd * (1.0 - FEAS_SLACK) - 1e-15 {
                return Err(Error::invalid(format!(
                    "plq: piece {m} min eigenvalue {wmin:.3e} below floor"
                )));
            }
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        self.pieces[0].b.len()
    }

    /// Index of the first piece attaining the maximum (the tie-break).
    fn active_piece(&self, x: &Array1<f64>) -> (usize, f64) {
        let mut best = f64::NEG_INFINITY;
        let mut idx = 0;
        for (m, p) in self.pieces.iter().enumerate() {
            let v = 0.5 * x.dot(&p.a.dot(x)) + p.b.dot(x) + p.c;
            if v > best {
                best = v;
                idx = m;
            }
        }
        (idx, best)
    }

    fn eval(&self, x: &Array1<f64>) -> f64 {
        self.active_piece(x).1
    }

    fn grad_x(&self, x: &Array1<f64>) -> Array1<f64> {
        let (m, _) = self.active_piece(x);
        let p = &self.pieces[m];
        0.5 * (p.a.dot(x) + p.a.t().dot(x)) + &p.b
    }
}

/// A fixed basis element for conic combinations.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisFunction {
    Quadratic(QuadraticParams),
    Plq(PlqParams),
}

impl BasisFunction {
    pub fn eval(&self, x: &Array1<f64>) -> f64 {
        match self {
            BasisFunction::Quadratic(q) => q.eval(x),
            BasisFunction::Plq(p) => p.eval(x),
        }
    }

    pub fn grad_x(&self, x: &Array1<f64>) -> Array1<f64> {
        match self {
            BasisFunction::Quadratic(q) => q.grad_x(x),
            BasisFunction::Plq(p) => p.grad_x(x),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            BasisFunction::Quadratic(q) => q.validate(),
            BasisFunction::Plq(p) => p.validate(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            BasisFunction::Quadratic(q) => q.b.len(),
            BasisFunction::Plq(p) => p.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeComboParams {
    pub alphas: Array1<f64>,
    pub basis: Vec<BasisFunction>,
}

impl ConeComboParams {
    pub fn new(alphas: Array1<f64>, basis: Vec<BasisFunction>) -> Self {
        ConeComboParams { alphas, basis }
    }

    fn validate(&self) -> Result<()> {
        if self.basis.is_empty() {
            return Err(Error::invalid("cone-combo: basis must be nonempty"));
        }
        if self.alphas.len() != self.basis.len() {
            return Err(Error::invalid(
                "cone-combo: one coefficient per basis function required",
            ));
        }
        if self.alphas.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("cone-combo: coefficients must be >= 0"));
        }
        let d = self.basis[0].dim();
        for f in &self.basis {
            f.validate()?;
            if f.dim() != d {
                return Err(Error::invalid("cone-combo: basis dimension mismatch"));
            }
        }
        Ok(())
    }

    fn eval(&self, x: &Array1<f64>) -> f64 {
        self.basis
            .iter()
            .zip(self.alphas.iter())
            .map(|(f, &a)| a * f.eval(x))
            .sum()
    }

    fn grad_x(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut g = Array1::<f64>::zeros(x.len());
        for (f, &a) in self.basis.iter().zip(self.alphas.iter()) {
            if a != 0.0 {
                g = g + a * f.grad_x(x);
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnLayer {
    /// Hidden-to-hidden weights; `None` on the first layer, entrywise
    /// nonnegative everywhere else.
    pub w: Option<Array2<f64>>,
    /// Input skip connection, unconstrained.
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnReadout {
    /// Nonnegative combination of the last hidden layer.
    pub w: Array1<f64>,
    /// Final input skip, unconstrained.
    pub a: Array1<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnParams {
    pub layers: Vec<IcnnLayer>,
    pub readout: IcnnReadout,
    /// Adds eta/2 ||x||^2; eta > 0 makes the potential strongly convex and
    /// the conjugate maximizer unique.
    pub eta: f64,
}

struct IcnnTrace {
    pre: Vec<Array1<f64>>,
    post: Vec<Array1<f64>>,
}

impl IcnnParams {
    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("icnn: needs at least one hidden layer"));
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::invalid("icnn: eta must be finite and >= 0"));
        }
        let d = self.layers[0].a.ncols();
        let mut prev_width = 0usize;
        for (l, layer) in self.layers.iter().enumerate() {
            let width = layer.b.len();
            if layer.a.nrows() != width || layer.a.ncols() != d {
                return Err(Error::invalid(format!("icnn: layer {l} skip shape mismatch")));
            }
            match (&layer.w, l) {
                (Some(_), 0) => {
                    return Err(Error::invalid("icnn: first layer must not have W"));
                }
                (None, 0) => {}
                (None, _) => {
                    return Err(Error::invalid(format!("icnn: layer {l} missing W")));
                }
                (Some(w), _) => {
                    if w.nrows() != width || w.ncols() != prev_width {
                        return Err(Error::invalid(format!("icnn: layer {l} W shape mismatch")));
                    }
                    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(Error::invalid(format!(
                            "icnn: layer {l} W has negative or non-finite entries"
                        )));
                    }
                }
            }
            if layer.a.iter().chain(layer.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("icnn: layer {l} non-finite")));
            }
            prev_width = width;
        }
        if self.readout.w.len() != prev_width {
            return Err(Error::invalid("icnn: readout width mismatch"));
        }
        if self.readout.w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "icnn: readout weights must be nonnegative and finite",
            ));
        }
        if self.readout.a.len() != d {
            return Err(Error::invalid("icnn: readout skip dimension mismatch"));
        }
        if self.readout.a.iter().any(|v| !v.is_finite()) || !self.readout.b.is_finite() {
            return Err(Error::invalid("icnn: readout non-finite"));
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        self.layers[0].a.ncols()
    }

    fn forward(&self, x: &Array1<f64>) -> (f64, IcnnTrace) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut h: Array1<f64> = Array1::zeros(0);
        for layer in &self.layers {
            let mut z = layer.a.dot(x) + &layer.b;
            if let Some(w) = &layer.w {
                z = z + w.dot(&h);
            }
            let hn = z.mapv(|v| layer.activation.apply(v));
            pre.push(z);
            post.push(hn.clone());
            h = hn;
        }
        let value = self.readout.w.dot(&h)
            + self.readout.a.dot(x)
            + self.readout.b
            + 0.5 * self.eta * x.dot(x);
        (value, IcnnTrace { pre, post })
    }

    fn eval(&self, x: &Array1<f64>) -> f64 {
        self.forward(x).0
    }

    /// Reverse accumulation through the recursion; `g_z[l]` is the adjoint of
    /// layer l's pre-activation.
    fn backward_adjoints(&self, trace: &IcnnTrace) -> Vec<Array1<f64>> {
        let levels = self.layers.len();
        let mut g_z = vec![Array1::<f64>::zeros(0); levels];
        let mut g_h = self.readout.w.clone();
        for l in (0..levels).rev() {
            let layer = &self.layers[l];
            let gz: Array1<f64> = trace.pre[l]
                .iter()
                .zip(g_h.iter())
                .map(|(&z, &gh)| gh * layer.activation.derivative(z))
                .collect();
            if l > 0 {
                if let Some(w) = &layer.w {
                    g_h = w.t().dot(&gz);
                }
            }
            g_z[l] = gz;
        }
        g_z
    }

    fn grad_x(&self, x: &Array1<f64>) -> Array1<f64> {
        let (_, trace) = self.forward(x);
        let g_z = self.backward_adjoints(&trace);
        let mut dx = &self.readout.a + &(self.eta * x);
        for (layer, gz) in self.layers.iter().zip(g_z.iter()) {
            dx = dx + layer.a.t().dot(gz);
        }
        dx
    }

    fn grad_params(&self, x: &Array1<f64>) -> IcnnGradient {
        let (_, trace) = self.forward(x);
        let g_z = self.backward_adjoints(&trace);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, (layer, gz)) in self.layers.iter().zip(g_z.iter()).enumerate() {
            let w = if layer.w.is_some() {
                let prev = &trace.post[l - 1];
                let mut dw = Array2::<f64>::zeros((gz.len(), prev.len()));
                for i in 0..gz.len() {
                    for j in 0..prev.len() {
                        dw[[i, j]] = gz[i] * prev[j];
                    }
                }
                Some(dw)
            } else {
                None
            };
            let mut da = Array2::<f64>::zeros((gz.len(), x.len()));
            for i in 0..gz.len() {
                for j in 0..x.len() {
                    da[[i, j]] = gz[i] * x[j];
                }
            }
            layers.push(IcnnLayerGradient {
                w,
                a: da,
                b: gz.clone(),
            });
        }
        IcnnGradient {
            layers,
            readout_w: trace.post.last().unwrap().clone(),
            readout_a: x.clone(),
            readout_b: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// The tagged union and its gradient mirror

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialParams {
    Quadratic(QuadraticParams),
    BallLinear(BallLinearParams),
    ConeCombo(ConeComboParams),
    Plq(PlqParams),
    Icnn(IcnnParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnLayerGradient {
    pub w: Option<Array2<f64>>,
    pub a: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnGradient {
    pub layers: Vec<IcnnLayerGradient>,
    pub readout_w: Array1<f64>,
    pub readout_a: Array1<f64>,
    pub readout_b: f64,
}

/// Derivative of `f(x; theta)` with respect to theta, shaped like the
/// trainable parameters of the class it came from.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGradient {
    Quadratic { a: Array2<f64>, b: Array1<f64> },
    BallLinear { w: Array1<f64> },
    ConeCombo { alphas: Array1<f64> },
    Plq { pieces: Vec<(Array2<f64>, Array1<f64>, f64)> },
    Icnn(IcnnGradient),
}

impl ParamGradient {
    /// Flatten in the same documented order as [`PotentialParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            ParamGradient::Quadratic { a, b } => {
                out.extend(a.iter());
                out.extend(b.iter());
            }
            ParamGradient::BallLinear { w } => out.extend(w.iter()),
            ParamGradient::ConeCombo { alphas } => out.extend(alphas.iter()),
            ParamGradient::Plq { pieces } => {
                for (a, b, c) in pieces {
                    out.extend(a.iter());
                    out.extend(b.iter());
                    out.push(*c);
                }
            }
            ParamGradient::Icnn(g) => {
                for layer in &g.layers {
                    if let Some(w) = &layer.w {
                        out.extend(w.iter());
                    }
                    out.extend(layer.a.iter());
                    out.extend(layer.b.iter());
                }
                out.extend(g.readout_w.iter());
                out.extend(g.readout_a.iter());
                out.push(g.readout_b);
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// `self + scale * other`, used to average batch gradients.
    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        let mut flat = self.flatten();
        let of = other.flatten();
        assert_eq!(flat.len(), of.len(), "gradient shape mismatch");
        for (a, b) in flat.iter_mut().zip(of.iter()) {
            *a += scale * b;
        }
        *self = self.with_flat(&flat);
    }

    pub fn scale(&mut self, s: f64) {
        let flat: Vec<f64> = self.flatten().iter().map(|v| v * s).collect();
        *self = self.with_flat(&flat);
    }

    /// Rebuild a gradient from flat coordinates, using `self` as the shape
    /// template (inverse of [`ParamGradient::flatten`]).
    pub fn with_flat(&self, flat: &[f64]) -> ParamGradient {
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| {
            let s = &flat[*cursor..*cursor + n];
            *cursor += n;
            s.to_vec()
        };
        let out = match self {
            ParamGradient::Quadratic { a, b } => {
                let av = take(&mut cursor, a.len());
                let bv = take(&mut cursor, b.len());
                ParamGradient::Quadratic {
                    a: Array2::from_shape_vec(a.raw_dim(), av).unwrap(),
                    b: Array1::from_vec(bv),
                }
            }
            ParamGradient::BallLinear { w } => ParamGradient::BallLinear {
                w: Array1::from_vec(take(&mut cursor, w.len())),
            },
            ParamGradient::ConeCombo { alphas } => ParamGradient::ConeCombo {
                alphas: Array1::from_vec(take(&mut cursor, alphas.len())),
            },
            ParamGradient::Plq { pieces } => ParamGradient::Plq {
                pieces: pieces
                    .iter()
                    .map(|(a, b, _)| {
                        let av = take(&mut cursor, a.len());
                        let bv = take(&mut cursor, b.len());
                        let c = take(&mut cursor, 1)[0];
                        (
                            Array2::from_shape_vec(a.raw_dim(), av).unwrap(),
                            Array1::from_vec(bv),
                            c,
                        )
                    })
                    .collect(),
            },
            ParamGradient::Icnn(g) => {
                let layers = g
                    .layers
                    .iter()
                    .map(|layer| IcnnLayerGradient {
                        w: layer.w.as_ref().map(|w| {
                            Array2::from_shape_vec(w.raw_dim(), take(&mut cursor, w.len()))
                                .unwrap()
                        }),
                        a: Array2::from_shape_vec(
                            layer.a.raw_dim(),
                            take(&mut cursor, layer.a.len()),
                        )
                        .unwrap(),
                        b: Array1::from_vec(take(&mut cursor, layer.b.len())),
                    })
                    .collect();
                let readout_w = Array1::from_vec(take(&mut cursor, g.readout_w.len()));
                let readout_a = Array1::from_vec(take(&mut cursor, g.readout_a.len()));
                let readout_b = take(&mut cursor, 1)[0];
                ParamGradient::Icnn(IcnnGradient {
                    layers,
                    readout_w,
                    readout_a,
                    readout_b,
                })
            }
        };
        assert_eq!(cursor, flat.len(), "gradient flatten length mismatch");
        out
    }
}

impl PotentialParams {
    pub fn class_tag(&self) -> &'static str {
        match self {
            PotentialParams::Quadratic(_) => "quadratic",
            PotentialParams::BallLinear(_) => "ball_linear",
            PotentialParams::ConeCombo(_) => "cone_combo",
            PotentialParams::Plq(_) => "plq",
            PotentialParams::Icnn(_) => "icnn",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PotentialParams::Quadratic(q) => q.b.len(),
            PotentialParams::BallLinear(b) => b.w.len(),
            PotentialParams::ConeCombo(c) => c.basis[0].dim(),
            PotentialParams::Plq(p) => p.dim(),
            PotentialParams::Icnn(i) => i.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PotentialParams::Quadratic(q) => q.validate(),
            PotentialParams::BallLinear(b) => b.validate(),
            PotentialParams::ConeCombo(c) => c.validate(),
            PotentialParams::Plq(p) => p.validate(),
            PotentialParams::Icnn(i) => i.validate(),
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.validate().is_ok()
    }

    /// `f(x; theta)`.
    pub fn eval(&self, x: &Array1<f64>) -> f64 {
        match self {
            PotentialParams::Quadratic(q) => q.eval(x),
            PotentialParams::BallLinear(b) => b.eval(x),
            PotentialParams::ConeCombo(c) => c.eval(x),
            PotentialParams::Plq(p) => p.eval(x),
            PotentialParams::Icnn(i) => i.eval(x),
        }
    }

    /// Spatial (sub)gradient of `f` at `x`.
    pub fn grad_x(&self, x: &Array1<f64>) -> Array1<f64> {
        match self {
            PotentialParams::Quadratic(q) => q.grad_x(x),
            PotentialParams::BallLinear(b) => b.grad_x(x),
            PotentialParams::ConeCombo(c) => c.grad_x(x),
            PotentialParams::Plq(p) => p.grad_x(x),
            PotentialParams::Icnn(i) => i.grad_x(x),
        }
    }

    /// Derivative of `f(x; .)` with respect to the trainable parameters.
    pub fn grad_params(&self, x: &Array1<f64>) -> ParamGradient {
        match self {
            PotentialParams::Quadratic(q) => {
                let d = x.len();
                let mut da = Array2::<f64>::zeros((d, d));
                for i in 0..d {
                    for j in 0..d {
                        da[[i, j]] = 0.5 * x[i] * x[j];
                    }
                }
                let _ = q;
                ParamGradient::Quadratic { a: da, b: x.clone() }
            }
            PotentialParams::BallLinear(_) => ParamGradient::BallLinear { w: x.clone() },
            PotentialParams::ConeCombo(c) => ParamGradient::ConeCombo {
                alphas: c.basis.iter().map(|f| f.eval(x)).collect(),
            },
            PotentialParams::Plq(p) => {
                let (active, _) = p.active_piece(x);
                let d = x.len();
                let pieces = p
                    .pieces
                    .iter()
                    .enumerate()
                    .map(|(m, _)| {
                        if m == active {
                            let mut da = Array2::<f64>::zeros((d, d));
                            for i in 0..d {
                                for j in 0..d {
                                    da[[i, j]] = 0.5 * x[i] * x[j];
                                }
                            }
                            (da, x.clone(), 1.0)
                        } else {
                            (Array2::zeros((d, d)), Array1::zeros(d), 0.0)
                        }
                    })
                    .collect();
                ParamGradient::Plq { pieces }
            }
            PotentialParams::Icnn(i) => ParamGradient::Icnn(i.grad_params(x)),
        }
    }

    /// Project onto the feasible set; feasible input is returned unchanged,
    /// so the map is idempotent.
    pub fn project_feasible(&self) -> PotentialParams {
        if self.is_feasible() {
            return self.clone();
        }
        match self {
            PotentialParams::Quadratic(q) => PotentialParams::Quadratic(QuadraticParams {
                a: linalg::clamp_eigenvalues(&q.a, q.eps_spd),
                b: q.b.clone(),
                eps_spd: q.eps_spd,
            }),
            PotentialParams::BallLinear(b) => {
                let norm = b.w.dot(&b.w).sqrt();
                let w = if norm > b.radius {
                    &b.w * (b.radius / norm)
                } else {
                    b.w.clone()
                };
                PotentialParams::BallLinear(BallLinearParams {
                    w,
                    radius: b.radius,
                })
            }
            PotentialParams::ConeCombo(c) => PotentialParams::ConeCombo(ConeComboParams {
                alphas: c.alphas.mapv(|a| a.max(0.0)),
                basis: c.basis.clone(),
            }),
            PotentialParams::Plq(p) => PotentialParams::Plq(PlqParams {
                pieces: p
                    .pieces
                    .iter()
                    .map(|piece| PlqPiece {
                        a: linalg::clamp_eigenvalues(&piece.a, p.eps_spd),
                        b: piece.b.clone(),
                        c: piece.c,
                    })
                    .collect(),
                eps_spd: p.eps_spd,
            }),
            PotentialParams::Icnn(i) => {
                let layers = i
                    .layers
                    .iter()
                    .map(|layer| IcnnLayer {
                        w: layer.w.as_ref().map(|w| w.mapv(|v| v.max(0.0))),
                        a: layer.a.clone(),
                        b: layer.b.clone(),
                        activation: layer.activation,
                    })
                    .collect();
                PotentialParams::Icnn(IcnnParams {
                    layers,
                    readout: IcnnReadout {
                        w: i.readout.w.mapv(|v| v.max(0.0)),
                        a: i.readout.a.clone(),
                        b: i.readout.b,
                    },
                    eta: i.eta,
                })
            }
        }
    }

    /// Lower bound on the strong-convexity modulus of `f`.
    pub fn strong_convexity_modulus(&self) -> f64 {
        match self {
            PotentialParams::Quadratic(q) => linalg::min_eigenvalue(&q.a),
            PotentialParams::BallLinear(_) => 1.0,
            PotentialParams::ConeCombo(_) => 0.0,
            PotentialParams::Plq(p) => p
                .pieces
                .iter()
                .map(|piece| linalg::min_eigenvalue(&piece.a))
                .fold(f64::INFINITY, f64::min),
            PotentialParams::Icnn(i) => i.eta,
        }
    }

    /// Exact conjugate value and maximizer where a closed form exists
    /// (quadratic and ball-linear); `None` for the other classes.
    pub fn conjugate_closed_form(&self, y: &Array1<f64>) -> Option<(f64, Array1<f64>)> {
        match self {
            PotentialParams::Quadratic(q) => {
                let rhs = y - &q.b;
                let x_hat = linalg::solve_spd(&q.a, &rhs).ok()?;
                let value = 0.5 * rhs.dot(&x_hat);
                Some((value, x_hat))
            }
            PotentialParams::BallLinear(b) => {
                let x_hat = y - &b.w;
                let value = 0.5 * x_hat.dot(&x_hat);
                Some((value, x_hat))
            }
            _ => None,
        }
    }

    /// Trainable parameters in documented flat order (row-major matrices):
    /// quadratic `A,b`; ball-linear `w`; cone-combo `alphas`; plq per piece
    /// `A,b,c`; icnn per layer `W,A,b` then readout `w,a,b`.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            PotentialParams::Quadratic(q) => {
                let mut v: Vec<f64> = q.a.iter().copied().collect();
                v.extend(q.b.iter());
                v
            }
            PotentialParams::BallLinear(b) => b.w.to_vec(),
            PotentialParams::ConeCombo(c) => c.alphas.to_vec(),
            PotentialParams::Plq(p) => {
                let mut v = Vec::new();
                for piece in &p.pieces {
                    v.extend(piece.a.iter());
                    v.extend(piece.b.iter());
                    v.push(piece.c);
                }
                v
            }
            PotentialParams::Icnn(i) => {
                let mut v = Vec::new();
                for layer in &i.layers {
                    if let Some(w) = &layer.w {
                        v.extend(w.iter());
                    }
                    v.extend(layer.a.iter());
                    v.extend(layer.b.iter());
                }
                v.extend(i.readout.w.iter());
                v.extend(i.readout.a.iter());
                v.push(i.readout.b);
                v
            }
        }
    }

    /// Rebuild parameters from a flat vector, using `self` as the structural
    /// template (shapes, activations, radii, eta, basis stay fixed).
    pub fn with_flat(&self, flat: &[f64]) -> PotentialParams {
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| {
            let s = &flat[*cursor..*cursor + n];
            *cursor += n;
            s.to_vec()
        };
        let out = match self {
            PotentialParams::Quadratic(q) => {
                let a = Array2::from_shape_vec(q.a.raw_dim(), take(&mut cursor, q.a.len()))
                    .unwrap();
                let b = Array1::from_vec(take(&mut cursor, q.b.len()));
                PotentialParams::Quadratic(QuadraticParams {
                    a,
                    b,
                    eps_spd: q.eps_spd,
                })
            }
            PotentialParams::BallLinear(b) => PotentialParams::BallLinear(BallLinearParams {
                w: Array1::from_vec(take(&mut cursor, b.w.len())),
                radius: b.radius,
            }),
            PotentialParams::ConeCombo(c) => PotentialParams::ConeCombo(ConeComboParams {
                alphas: Array1::from_vec(take(&mut cursor, c.alphas.len())),
                basis: c.basis.clone(),
            }),
            PotentialParams::Plq(p) => PotentialParams::Plq(PlqParams {
                pieces: p
                    .pieces
                    .iter()
                    .map(|piece| PlqPiece {
                        a: Array2::from_shape_vec(
                            piece.a.raw_dim(),
                            take(&mut cursor, piece.a.len()),
                        )
                        .unwrap(),
                        b: Array1::from_vec(take(&mut cursor, piece.b.len())),
                        c: take(&mut cursor, 1)[0],
                    })
                    .collect(),
                eps_spd: p.eps_spd,
            }),
            PotentialParams::Icnn(i) => {
                let layers = i
                    .layers
                    .iter()
                    .map(|layer| IcnnLayer {
                        w: layer.w.as_ref().map(|w| {
                            Array2::from_shape_vec(w.raw_dim(), take(&mut cursor, w.len()))
                                .unwrap()
                        }),
                        a: Array2::from_shape_vec(
                            layer.a.raw_dim(),
                            take(&mut cursor, layer.a.len()),
                        )
                        .unwrap(),
                        b: Array1::from_vec(take(&mut cursor, layer.b.len())),
                        activation: layer.activation,
                    })
                    .collect();
                let readout_w = Array1::from_vec(take(&mut cursor, i.readout.w.len()));
                let readout_a = Array1::from_vec(take(&mut cursor, i.readout.a.len()));
                let readout_b = take(&mut cursor, 1)[0];
                PotentialParams::Icnn(IcnnParams {
                    layers,
                    readout: IcnnReadout {
                        w: readout_w,
                        a: readout_a,
                        b: readout_b,
                    },
                    eta: i.eta,
                })
            }
        };
        assert_eq!(cursor, flat.len(), "flat parameter length mismatch");
        out
    }

    /// One projected step: `Proj(theta - step * grad)`.
    pub fn step(&self, grad: &ParamGradient, step: f64) -> PotentialParams {
        let mut flat = self.flatten();
        let g = grad.flatten();
        assert_eq!(flat.len(), g.len(), "gradient/parameter shape mismatch");
        for (p, gi) in flat.iter_mut().zip(g.iter()) {
            *p -= step * gi;
        }
        self.with_flat(&flat).project_feasible()
    }
}

/// Worst convexity violation `f(lerp) - lerp(f)` over random segment triples
/// drawn inside `probe_box`; feasible parameters stay at or below rounding
/// noise (<= 1e-9 on the scales exercised here).
pub fn convexity_probe(
    theta: &PotentialParams,
    seed: u64,
    trials: usize,
    probe_box: &Bounds,
) -> f64 {
    let d = theta.dim();
    assert_eq!(probe_box.dim(), d, "probe box dimension mismatch");
    let mut rng = stream_rng(seed, PROBE_STREAM);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Array1<f64> {
        (0..d)
            .map(|i| {
                let u: f64 = rng.random();
                probe_box.lo[i] + u * (probe_box.hi[i] - probe_box.lo[i])
            })
            .collect()
    };
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials.max(1) {
        let x1 = draw(&mut rng);
        let x2 = draw(&mut rng);
        let lam: f64 = rng.random();
        let mid: Array1<f64> = &x1 * lam + &x2 * (1.0 - lam);
        let gap = theta.eval(&mid) - lam * theta.eval(&x1) - (1.0 - lam) * theta.eval(&x2);
        worst = worst.max(gap);
    }
    worst
}

// ---------------------------------------------------------------------------
// Checkpoint schema (JSON, documented in the README)

#[derive(Serialize, Deserialize)]
struct QuadRepr {
    dim: usize,
    /// Row-major d*d entries.
    a: Vec<f64>,
    b: Vec<f64>,
    eps_spd: f64,
}

#[derive(Serialize, Deserialize)]
struct BallRepr {
    dim: usize,
    w: Vec<f64>,
    radius: f64,
}

#[derive(Serialize, Deserialize)]
struct PieceRepr {
    a: Vec<f64>,
    b: Vec<f64>,
    c: f64,
}

#[derive(Serialize, Deserialize)]
struct PlqRepr {
    dim: usize,
    eps_spd: f64,
    pieces: Vec<PieceRepr>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "class_tag", rename_all = "snake_case")]
enum BasisRepr {
    Quadratic(QuadRepr),
    Plq(PlqRepr),
}

#[derive(Serialize, Deserialize)]
struct ConeRepr {
    alphas: Vec<f64>,
    basis: Vec<BasisRepr>,
}

#[derive(Serialize, Deserialize)]
struct IcnnLayerRepr {
    /// Row-major width x prev_width entries; absent on the first layer.
    w: Option<Vec<f64>>,
    /// Row-major width x dim entries.
    a: Vec<f64>,
    b: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct IcnnRepr {
    dim: usize,
    widths: Vec<usize>,
    eta: f64,
    layers: Vec<IcnnLayerRepr>,
    readout_w: Vec<f64>,
    readout_a: Vec<f64>,
    readout_b: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "class_tag", rename_all = "snake_case")]
enum CheckpointRepr {
    Quadratic(QuadRepr),
    BallLinear(BallRepr),
    ConeCombo(ConeRepr),
    Plq(PlqRepr),
    Icnn(IcnnRepr),
}

fn quad_to_repr(q: &QuadraticParams) -> QuadRepr {
    QuadRepr {
        dim: q.b.len(),
        a: q.a.iter().copied().collect(),
        b: q.b.to_vec(),
        eps_spd: q.eps_spd,
    }
}

fn quad_from_repr(r: &QuadRepr) -> Result<QuadraticParams> {
    if r.a.len() != r.dim * r.dim || r.b.len() != r.dim {
        return Err(Error::invalid("checkpoint: quadratic shape mismatch"));
    }
    Ok(QuadraticParams {
        a: Array2::from_shape_vec((r.dim, r.dim), r.a.clone()).unwrap(),
        b: Array1::from_vec(r.b.clone()),
        eps_spd: r.eps_spd,
    })
}

fn plq_to_repr(p: &PlqParams) -> PlqRepr {
    PlqRepr {
        dim: p.dim(),
        eps_spd: p.eps_spd,
        pieces: p
            .pieces
            .iter()
            .map(|piece| PieceRepr {
                a: piece.a.iter().copied().collect(),
                b: piece.b.to_vec(),
                c: piece.c,
            })
            .collect(),
    }
}

fn plq_from_repr(r: &PlqRepr) -> Result<PlqParams> {
    let mut pieces = Vec::with_capacity(r.pieces.len());
    for piece in &r.pieces {
        if piece.a.len() != r.dim * r.dim || piece.b.len() != r.dim {
            return Err(Error::invalid("checkpoint: plq piece shape mismatch"));
        }
        pieces.push(PlqPiece {
            a: Array2::from_shape_vec((r.dim, r.dim), piece.a.clone()).unwrap(),
            b: Array1::from_vec(piece.b.clone()),
            c: piece.c,
        });
    }
    Ok(PlqParams {
        pieces,
        eps_spd: r.eps_spd,
    })
}

impl PotentialParams {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let repr = match self {
            PotentialParams::Quadratic(q) => CheckpointRepr::Quadratic(quad_to_repr(q)),
            PotentialParams::BallLinear(b) => CheckpointRepr::BallLinear(BallRepr {
                dim: b.w.len(),
                w: b.w.to_vec(),
                radius: b.radius,
            }),
            PotentialParams::ConeCombo(c) => CheckpointRepr::ConeCombo(ConeRepr {
                alphas: c.alphas.to_vec(),
                basis: c
                    .basis
                    .iter()
                    .map(|f| match f {
                        BasisFunction::Quadratic(q) => BasisRepr::Quadratic(quad_to_repr(q)),
                        BasisFunction::Plq(p) => BasisRepr::Plq(plq_to_repr(p)),
                    })
                    .collect(),
            }),
            PotentialParams::Plq(p) => CheckpointRepr::Plq(plq_to_repr(p)),
            PotentialParams::Icnn(i) => {
                let widths: Vec<usize> = i.layers.iter().map(|l| l.b.len()).collect();
                CheckpointRepr::Icnn(IcnnRepr {
                    dim: i.dim(),
                    widths,
                    eta: i.eta,
                    layers: i
                        .layers
                        .iter()
                        .map(|l| IcnnLayerRepr {
                            w: l.w.as_ref().map(|w| w.iter().copied().collect()),
                            a: l.a.iter().copied().collect(),
                            b: l.b.to_vec(),
                            activation: l.activation,
                        })
                        .collect(),
                    readout_w: i.readout.w.to_vec(),
                    readout_a: i.readout.a.to_vec(),
                    readout_b: i.readout.b,
                })
            }
        };
        Ok(serde_json::to_string_pretty(&repr)?)
    }

    pub fn from_checkpoint_json(json: &str) -> Result<PotentialParams> {
        let repr: CheckpointRepr = serde_json::from_str(json)?;
        let params = match repr {
            CheckpointRepr::Quadratic(q) => PotentialParams::Quadratic(quad_from_repr(&q)?),
            CheckpointRepr::BallLinear(b) => {
                if b.w.len() != b.dim {
                    return Err(Error::invalid("checkpoint: ball-linear shape mismatch"));
                }
                PotentialParams::BallLinear(BallLinearParams {
                    w: Array1::from_vec(b.w),
                    radius: b.radius,
                })
            }
            CheckpointRepr::ConeCombo(c) => {
                let basis = c
                    .basis
                    .iter()
                    .map(|b| match b {
                        BasisRepr::Quadratic(q) => quad_from_repr(q).map(BasisFunction::Quadratic),
                        BasisRepr::Plq(p) => plq_from_repr(p).map(BasisFunction::Plq),
                    })
                    .collect::<Result<Vec<_>>>()?;
                PotentialParams::ConeCombo(ConeComboParams {
                    alphas: Array1::from_vec(c.alphas),
                    basis,
                })
            }
            CheckpointRepr::Plq(p) => PotentialParams::Plq(plq_from_repr(&p)?),
            CheckpointRepr::Icnn(i) => {
                let mut layers = Vec::with_capacity(i.layers.len());
                let mut prev = 0usize;
                for (l, layer) in i.layers.iter().enumerate() {
                    let width = *i
                        .widths
                        .get(l)
                        .ok_or_else(|| Error::invalid("checkpoint: icnn widths mismatch"))?;
                    if layer.b.len() != width || layer.a.len() != width * i.dim {
                        return Err(Error::invalid("checkpoint: icnn layer shape mismatch"));
                    }
                    let w = match &layer.w {
                        None => None,
                        Some(flat) => {
                            if flat.len() != width * prev {
                                return Err(Error::invalid(
                                    "checkpoint: icnn hidden weight shape mismatch",
                                ));
                            }
                            Some(Array2::from_shape_vec((width, prev), flat.clone()).unwrap())
                        }
                    };
                    layers.push(IcnnLayer {
                        w,
                        a: Array2::from_shape_vec((width, i.dim), layer.a.clone()).unwrap(),
                        b: Array1::from_vec(layer.b.clone()),
                        activation: layer.activation,
                    });
                    prev = width;
                }
                if i.readout_w.len() != prev || i.readout_a.len() != i.dim {
                    return Err(Error::invalid("checkpoint: icnn readout shape mismatch"));
                }
                PotentialParams::Icnn(IcnnParams {
                    layers,
                    readout: IcnnReadout {
                        w: Array1::from_vec(i.readout_w),
                        a: Array1::from_vec(i.readout_a),
                        b: i.readout_b,
                    },
                    eta: i.eta,
                })
            }
        };
        params.validate()?;
        Ok(params)
    }
}

/// Single-hidden-layer network computing exactly 0.5 ||x||^2: paired +/- unit
/// rows through squared ReLU with readout weight 1/2 on each.
pub fn icnn_identity_potential(d: usize, eta: f64) -> IcnnParams {
    let mut a = Array2::<f64>::zeros((2 * d, d));
    for i in 0..d {
        a[[i, i]] = 1.0;
        a[[d + i, i]] = -1.0;
    }
    IcnnParams {
        layers: vec![IcnnLayer {
            w: None,
            a,
            b: Array1::zeros(2 * d),
            activation: Activation::ReluSquared,
        }],
        readout: IcnnReadout {
            w: Array1::from_elem(2 * d, 0.5 * (1.0 - eta)),
            a: Array1::zeros(d),
            b: 0.0,
        },
        eta,
    }
}
