//! Noise transition matrices, the instance-dependent single-to-multiple
//! matrix, the composition laws linking clean, noisy, and part-level
//! posteriors, and anchor-based estimation of the noise matrix.
//!
//! Orientation convention, fixed here once for the whole crate:
//! `T[i][j] = P(noisy = j | clean = i, x)` with rows indexed by the
//! clean class. Posterior vectors are columns, so every application
//! multiplies by the transpose: `p_noisy = T^t p_clean`. Likewise
//! `U[i][j] = P(part_j = 1 | noisy = i, x)` and `q = U^t p_noisy`;
//! rows of U need not sum to one (multi-label semantics).

use serde::{Deserialize, Serialize};

use crate::data::ImageGrid;
use crate::error::{PlmError, Result};
use crate::linalg;
use crate::nn::MlpModel;

const ROW_SUM_TOL: f64 = 1e-8;
const SIMPLEX_TOL: f64 = 1e-6;

/// Row-stochastic c x c matrix with rows indexed by the clean class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_entries(classes: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != classes * classes {
            return Err(PlmError::Shape(format!(
                "{} entries for a {classes}x{classes} matrix",
                entries.len()
            )));
        }
        for (i, row) in entries.chunks(classes).enumerate() {
            if row.iter().any(|&v| v < 0.0) {
                return Err(PlmError::Domain(format!(
                    "transition row {i} has a negative entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(PlmError::Domain(format!(
                    "transition row {i} sums to {s}, not 1"
                )));
            }
        }
        Ok(TransitionMatrix { classes, entries })
    }

    pub fn identity(classes: usize) -> Self {
        let mut entries = vec![0.0; classes * classes];
        for i in 0..classes {
            entries[i * classes + i] = 1.0;
        }
        TransitionMatrix { classes, entries }
    }

    /// Diagonal 1 - rate, off-diagonal rate / (c - 1).
    pub fn symmetric(classes: usize, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(PlmError::Domain(format!("rate {rate} outside [0, 1)")));
        }
        if classes < 2 {
            return Err(PlmError::Domain("need at least two classes".into()));
        }
        let off = rate / (classes - 1) as f64;
        let mut entries = vec![off; classes * classes];
        for i in 0..classes {
            entries[i * classes + i] = 1.0 - rate;
        }
        Ok(TransitionMatrix { classes, entries })
    }

    /// Diagonal 1 - rate, rate at the next class in ascending cyclic order.
    pub fn pair(classes: usize, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(PlmError::Domain(format!("rate {rate} outside [0, 1)")));
        }
        if classes < 2 {
            return Err(PlmError::Domain("need at least two classes".into()));
        }
        let mut entries = vec![0.0; classes * classes];
        for i in 0..classes {
            entries[i * classes + i] = 1.0 - rate;
            entries[i * classes + (i + 1) % classes] = rate;
        }
        Ok(TransitionMatrix { classes, entries })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.classes..(i + 1) * self.classes]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.classes + j]
    }

    /// CSV export, row-major, header listing the class indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.classes).map(|j| j.to_string()).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.classes {
            let cells: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
            rows.push(row.map_err(|e| PlmError::Format(format!("bad matrix row: {e}")))?);
        }
        let classes = rows.len();
        Self::from_entries(classes, rows.into_iter().flatten().collect())
    }
}

/// Instance-level single-to-multiple matrix; entries in [0, 1], rows not
/// required to sum to 1.
#[derive(Debug, Clone)]
pub struct S2mMatrix {
    classes: usize,
    entries: Vec<f64>,
}

impl S2mMatrix {
    pub fn from_entries(classes: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != classes * classes {
            return Err(PlmError::Shape(format!(
                "{} entries for a {classes}x{classes} matrix",
                entries.len()
            )));
        }
        if entries.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(PlmError::Domain(
                "single-to-multiple entries must lie in [0, 1]".into(),
            ));
        }
        Ok(S2mMatrix { classes, entries })
    }

    pub fn identity(classes: usize) -> Self {
        let mut entries = vec![0.0; classes * classes];
        for i in 0..classes {
            entries[i * classes + i] = 1.0;
        }
        S2mMatrix { classes, entries }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.classes..(i + 1) * self.classes]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.classes + j]
    }
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| v < 0.0) {
        return Err(PlmError::Domain(format!("{what} has a negative entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(PlmError::Domain(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// p_noisy[j] = sum_i T[i][j] p_clean[i]
pub fn apply_t(t: &TransitionMatrix, p_clean: &[f64]) -> Result<Vec<f64>> {
    if p_clean.len() != t.classes() {
        return Err(PlmError::Shape(format!(
            "posterior of length {} for {} classes",
            p_clean.len(),
            t.classes()
        )));
    }
    check_simplex(p_clean, "clean posterior")?;
    let c = t.classes();
    let mut out = vec![0.0; c];
    for i in 0..c {
        let pi = p_clean[i];
        for (o, &tij) in out.iter_mut().zip(t.row(i)) {
            *o += tij * pi;
        }
    }
    Ok(out)
}

/// q[j] = sum_i U[i][j] p_noisy[i]; a convex combination of [0,1] entries.
pub fn apply_u(u: &S2mMatrix, p_noisy: &[f64]) -> Result<Vec<f64>> {
    if p_noisy.len() != u.classes() {
        return Err(PlmError::Shape(format!(
            "posterior of length {} for {} classes",
            p_noisy.len(),
            u.classes()
        )));
    }
    check_simplex(p_noisy, "noisy posterior")?;
    let c = u.classes();
    let mut out = vec![0.0; c];
    for i in 0..c {
        let pi = p_noisy[i];
        for (o, &uij) in out.iter_mut().zip(u.row(i)) {
            *o += uij * pi;
        }
    }
    Ok(out)
}

/// Part-level probabilities from the clean posterior: U^t (T^t p).
pub fn compose_ut(u: &S2mMatrix, t: &TransitionMatrix, p_clean: &[f64]) -> Result<Vec<f64>> {
    apply_u(u, &apply_t(t, p_clean)?)
}

/// Run the matrix-estimation network on one instance: raw outputs
/// reshaped to c x c and squashed through the logistic function.
pub fn u_forward(g_u: &MlpModel, x: &ImageGrid) -> Result<S2mMatrix> {
    let cc = g_u.output_dim();
    let c = (cc as f64).sqrt().round() as usize;
    if c * c != cc {
        return Err(PlmError::Shape(format!(
            "matrix network output width {cc} is not a perfect square"
        )));
    }
    let raw = g_u.logits(1, &x.pixels)?;
    let entries: Vec<f64> = raw.iter().map(|&z| linalg::sigmoid_scalar(z)).collect();
    S2mMatrix::from_entries(c, entries)
}

/// Anchor-based estimate from precomputed posterior rows (n x c,
/// row-major). Row i of the estimate is the mean posterior of the
/// n_anchors instances most confident in noisy class i; ties resolve by
/// instance index, and rows are renormalized to sum exactly to one.
pub fn estimate_t_from_posteriors(
    posteriors: &[f64],
    n: usize,
    classes: usize,
    n_anchors: usize,
) -> Result<TransitionMatrix> {
    if posteriors.len() != n * classes {
        return Err(PlmError::Shape(format!(
            "{} posterior entries for {n} instances of {classes} classes",
            posteriors.len()
        )));
    }
    if n_anchors == 0 {
        return Err(PlmError::Config("anchor count must be at least 1".into()));
    }
    if n < n_anchors {
        return Err(PlmError::Config(format!(
            "{n} candidates cannot supply {n_anchors} anchors"
        )));
    }
    let mut entries = vec![0.0; classes * classes];
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..classes {
        order.sort_by(|&a, &b| {
            let (pa, pb) = (posteriors[a * classes + i], posteriors[b * classes + i]);
            pb.total_cmp(&pa).then(a.cmp(&b))
        });
        let row = &mut entries[i * classes..(i + 1) * classes];
        for &idx in order.iter().take(n_anchors) {
            for (r, &p) in row.iter_mut().zip(&posteriors[idx * classes..(idx + 1) * classes]) {
                *r += p;
            }
        }
        let s: f64 = row.iter().sum();
        for r in row.iter_mut() {
            *r /= s;
        }
    }
    TransitionMatrix::from_entries(classes, entries)
}

/// Anchor-based noise-matrix estimate from a trained noisy-posterior
/// network, following the highest-predicted-probability anchor rule.
pub fn estimate_t_anchor(
    g_e: &MlpModel,
    images: &[ImageGrid],
    n_anchors: usize,
) -> Result<TransitionMatrix> {
    let c = g_e.output_dim();
    let n = images.len();
    if n == 0 {
        return Err(PlmError::Config("no instances to estimate anchors from".into()));
    }
    let dim = g_e.input_dim();
    let mut feats = Vec::with_capacity(n * dim);
    for im in images {
        feats.extend_from_slice(&im.pixels);
    }
    let posteriors = g_e.posteriors(n, &feats)?;
    estimate_t_from_posteriors(&posteriors, n, c, n_anchors)
}
