//! Empirical sample sets, synthetic generators, and CSV I/O.
//!
//! A [`SampleSet`] is an N x d matrix of points carrying the uniform empirical
//! measure (weight 1/N per row, never stored). All generators draw from a
//! `ChaCha8Rng` seeded with the caller's seed and a fixed per-operation stream
//! id, so the same `(spec, n, seed)` triple reproduces the same bits on every
//! platform and independent operations never share a random stream.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::linalg;
use crate::{Error, Result};

/// Random-stream ids, one per sampling operation.
mod stream {
    pub const GAUSSIAN: u64 = 1;
    pub const MIXTURE: u64 = 2;
    pub const TWO_POINT: u64 = 3;
}

/// Seeded generator for operation `stream`; see the module docs.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// N samples in d dimensions under the uniform empirical measure.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Array2<f64>,
}

impl SampleSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::invalid("sample set must have N >= 1 and d >= 1"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sample set contains non-finite entries"));
        }
        Ok(SampleSet { points })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn row(&self, i: usize) -> Array1<f64> {
        self.points.row(i).to_owned()
    }

    /// Mean of 0.5*||x||^2 over the samples; the self-term of the squared
    /// distance estimate.
    pub fn half_second_moment(&self) -> f64 {
        let n = self.count() as f64;
        self.points.iter().map(|v| 0.5 * v * v).sum::<f64>() / n
    }
}

/// Mean vector plus symmetric positive-definite covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Array1<f64>, covariance: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::invalid("gaussian covariance shape mismatch"));
        }
        if linalg::max_abs_asymmetry(&covariance) > 1e-12 {
            return Err(Error::invalid("gaussian covariance must be symmetric"));
        }
        let wmin = linalg::min_eigenvalue(&covariance);
        if wmin <= 0.0 {
            return Err(Error::invalid(format!(
                "gaussian covariance must be positive definite (min eigenvalue {wmin:.3e})"
            )));
        }
        Ok(GaussianSpec { mean, covariance })
    }

    /// Standard normal in d dimensions.
    pub fn standard(d: usize) -> Self {
        GaussianSpec {
            mean: Array1::zeros(d),
            covariance: Array2::eye(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Finite mixture of Gaussians with weights summing to one.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub components: Vec<(f64, GaussianSpec)>,
}

impl MixtureSpec {
    pub fn new(components: Vec<(f64, GaussianSpec)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let d = components[0].1.dim();
        if components.iter().any(|(_, g)| g.dim() != d) {
            return Err(Error::invalid("mixture components disagree on dimension"));
        }
        if components.iter().any(|(w, _)| *w < 0.0) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "mixture weights must sum to 1 (got {total})"
            )));
        }
        Ok(MixtureSpec { components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    /// Population mean.
    pub fn mean(&self) -> Array1<f64> {
        let mut m = Array1::zeros(self.dim());
        for (w, g) in &self.components {
            m = m + *w * &g.mean;
        }
        m
    }

    /// Population second central moment.
    pub fn covariance(&self) -> Array2<f64> {
        let m = self.mean();
        let d = self.dim();
        let mut cov = Array2::zeros((d, d));
        for (w, g) in &self.components {
            let delta = &g.mean - &m;
            for i in 0..d {
                for j in 0..d {
                    cov[[i, j]] += w * (g.covariance[[i, j]] + delta[i] * delta[j]);
                }
            }
        }
        cov
    }
}

/// Draw `n` i.i.d. samples from `spec`: standard normals through the
/// lower-triangular Cholesky factor, filled row by row.
pub fn sample_gaussian(spec: &GaussianSpec, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let chol = linalg::cholesky_lower(&spec.covariance)?;
    let mut rng = stream_rng(seed, stream::GAUSSIAN);
    Ok(gaussian_rows(spec, &chol, n, &mut rng))
}

fn gaussian_rows(
    spec: &GaussianSpec,
    chol: &Array2<f64>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> SampleSet {
    let d = spec.dim();
    let mut pts = Array2::<f64>::zeros((n, d));
    let mut z = Array1::<f64>::zeros(d);
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for r in 0..d {
            let mut acc = spec.mean[r];
            for c in 0..=r {
                acc += chol[[r, c]] * z[c];
            }
            pts[[i, r]] = acc;
        }
    }
    SampleSet { points: pts }
}

/// Draw `n` samples from a Gaussian mixture: one uniform picks the component,
/// then a Gaussian draw, per sample.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let chols: Vec<Array2<f64>> = spec
        .components
        .iter()
        .map(|(_, g)| linalg::cholesky_lower(&g.covariance))
        .collect::<Result<_>>()?;
    let mut rng = stream_rng(seed, stream::MIXTURE);
    let d = spec.dim();
    let mut pts = Array2::<f64>::zeros((n, d));
    let mut z = Array1::<f64>::zeros(d);
    for i in 0..n {
        let u: f64 = rng.random();
        let mut k = spec.components.len() - 1;
        let mut acc = 0.0;
        for (idx, (w, _)) in spec.components.iter().enumerate() {
            acc += w;
            if u < acc {
                k = idx;
                break;
            }
        }
        let (_, g) = &spec.components[k];
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for r in 0..d {
            let mut v = g.mean[r];
            for c in 0..=r {
                v += chols[k][[r, c]] * z[c];
            }
            pts[[i, r]] = v;
        }
    }
    SampleSet::new(pts)
}

/// 1-D two-point law: -v with probability 1/2 - alpha, +v with probability
/// 1/2 + alpha.
pub fn sample_two_point(v: f64, alpha: f64, n: usize, seed: u64) -> Result<SampleSet> {
    if !(alpha.abs() <= 0.5) {
        return Err(Error::invalid(format!(
            "two-point alpha must lie in [-1/2, 1/2] (got {alpha})"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    if !v.is_finite() {
        return Err(Error::invalid("two-point v must be finite"));
    }
    let mut rng = stream_rng(seed, stream::TWO_POINT);
    let mut pts = Array2::<f64>::zeros((n, 1));
    for i in 0..n {
        let u: f64 = rng.random();
        pts[[i, 0]] = if u < 0.5 + alpha { v } else { -v };
    }
    Ok(SampleSet { points: pts })
}

/// Column mean and population covariance (divide by N, matching the uniform
/// empirical measure).
pub fn empirical_moments(s: &SampleSet) -> (Array1<f64>, Array2<f64>) {
    let n = s.count();
    let d = s.dim();
    let nf = n as f64;
    let mut mean = Array1::<f64>::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mean[j] += s.points[[i, j]];
        }
    }
    mean.mapv_inplace(|v| v / nf);
    let mut cov = Array2::<f64>::zeros((d, d));
    for i in 0..n {
        for r in 0..d {
            let dr = s.points[[i, r]] - mean[r];
            for c in 0..=r {
                cov[[r, c]] += dr * (s.points[[i, c]] - mean[c]);
            }
        }
    }
    for r in 0..d {
        for c in 0..=r {
            let v = cov[[r, c]] / nf;
            cov[[r, c]] = v;
            cov[[c, r]] = v;
        }
    }
    (mean, cov)
}

/// Map every row through `x -> a x + b`.
pub fn affine_pushforward(s: &SampleSet, a: &Array2<f64>, b: &Array1<f64>) -> Result<SampleSet> {
    let d = s.dim();
    if a.ncols() != d || a.nrows() != b.len() {
        return Err(Error::invalid(format!(
            "affine map shapes ({}x{}, {}) do not fit samples of dimension {}",
            a.nrows(),
            a.ncols(),
            b.len(),
            d
        )));
    }
    let out_d = a.nrows();
    let n = s.count();
    let mut pts = Array2::<f64>::zeros((n, out_d));
    for i in 0..n {
        for r in 0..out_d {
            let mut acc = b[r];
            for c in 0..d {
                acc += a[[r, c]] * s.points[[i, c]];
            }
            pts[[i, r]] = acc;
        }
    }
    SampleSet::new(pts)
}

/// Format a float with 17 significant digits; round-trips every finite f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write samples as CSV: one row per sample, `\n` line endings, no header
/// unless `header` is set (then `x0,x1,...`).
pub fn save_csv(s: &SampleSet, path: &Path, header: bool) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write_csv(s, &mut w, header)
}

/// Same as [`save_csv`] but to any writer; the CLI uses this to prepend
/// provenance comments.
pub fn write_csv(s: &SampleSet, w: &mut impl Write, header: bool) -> Result<()> {
    if header {
        let names: Vec<String> = (0..s.dim()).map(|j| format!("x{j}")).collect();
        writeln!(w, "{}", names.join(","))?;
    }
    for i in 0..s.count() {
        let row: Vec<String> = (0..s.dim()).map(|j| fmt_f64(s.points[[i, j]])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Read samples back. Lines starting with `#` are comments; a non-numeric
/// first row is treated as a header. Ragged rows fail with their line number.
pub fn load_csv(path: &Path) -> Result<SampleSet> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    let mut saw_data_row = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.trim().parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(e) => {
                // Allow one header row before any data.
                if !saw_data_row && fields.iter().all(|f| f.trim().parse::<f64>().is_err()) {
                    continue;
                }
                return Err(Error::Csv {
                    line: lineno,
                    msg: format!("unparsable field: {e}"),
                });
            }
        };
        if let Some(wd) = width {
            if values.len() != wd {
                return Err(Error::Csv {
                    line: lineno,
                    msg: format!("expected {wd} columns, found {}", values.len()),
                });
            }
        } else {
            width = Some(values.len());
        }
        saw_data_row = true;
        rows.push(values);
    }
    let d = width.ok_or_else(|| Error::invalid("csv contains no sample rows (N >= 1 required)"))?;
    let n = rows.len();
    let mut pts = Array2::<f64>::zeros((n, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            pts[[i, j]] = *v;
        }
    }
    SampleSet::new(pts)
}
