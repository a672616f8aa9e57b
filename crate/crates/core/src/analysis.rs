//! Numerical checks of the smoothing theory behind propagation regularization.
//!
//! - [`theorem1_residual`]: squared-error P-reg against the quadratic form `½⟨Z, Δ̃ᵀΔ̃Z⟩`
//! - [`infinite_gcn`]: repeated propagation `Z ← ÂZ` until all rows agree
//! - [`minimize_preg_descent`]: plain gradient descent on `φ(Z, ÂZ)` over `Z`
//! - [`intra_class_distance`]: ω, the mean distance of outputs to their class centroid

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, normalized_laplacian, spmm, spmm_transpose, Graph, Normalization};
use crate::matrix::{softmax_rows, DenseMatrix};
use crate::reg::{phi, Phi};

pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-8;

/// Largest difference between two rows in any column: `max_{i,j} ‖Z_i − Z_j‖∞`.
pub fn row_dispersion(z: &DenseMatrix) -> f64 {
    if z.rows() == 0 {
        return 0.0;
    }
    let mut lo = z.row(0).to_vec();
    let mut hi = lo.clone();
    for row in z.row_iter().skip(1) {
        for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
            *l = l.min(v);
            *h = h.max(v);
        }
    }
    lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max)
}

/// One row of an iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: usize,
    pub value: f64,
    pub dispersion: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub dispersion: f64,
    pub converged: bool,
    pub limit: DenseMatrix,
    pub warnings: Vec<String>,
    /// `value` is `φ_SE(Z, ÂZ)` of the iterate.
    pub trace: Vec<TracePoint>,
}

fn se_value(a: &crate::graph::SparseOperator, z: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let az = spmm(a, z)?;
    let v = 0.5 * az.sub(z)?.frobenius_sq();
    Ok((v, az))
}

/// Applies row-normalized propagation until the rows agree to `tol` or `max_iter` is hit.
///
/// Needs a connected graph. Without self-loops on every node the run still
/// happens but a warning is recorded, since bipartite structure makes the
/// iteration oscillate.
pub fn infinite_gcn(g: &Graph, z: &DenseMatrix, tol: f64, max_iter: usize) -> Result<ConvergenceReport> {
    if !g.is_connected() {
        return Err(Error::Analysis("infinite propagation needs a connected graph".into()));
    }
    if z.rows() != g.num_nodes() {
        return Err(Error::shape("infinite_gcn", g.num_nodes(), z.rows()));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("input to infinite_gcn".into()));
    }
    let mut warnings = Vec::new();
    if !g.has_self_loops() {
        warnings.push("graph lacks self-loops on some nodes; propagation may oscillate".to_string());
    }
    let a = normalize_adjacency(g, Normalization::Row);
    let mut cur = z.clone();
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let dispersion = row_dispersion(&cur);
        let (value, next) = se_value(&a, &cur)?;
        trace.push(TracePoint {
            step: iterations,
            value,
            dispersion,
        });
        if dispersion < tol {
            return Ok(ConvergenceReport {
                iterations,
                dispersion,
                converged: true,
                limit: cur,
                warnings,
                trace,
            });
        }
        if iterations == max_iter {
            return Ok(ConvergenceReport {
                iterations,
                dispersion,
                converged: false,
                limit: cur,
                warnings,
                trace,
            });
        }
        cur = next;
        iterations += 1;
    }
}

/// `φ_SE(Z, ÂZ)` and `½⟨Z, Δ̃ᵀΔ̃Z⟩`, computed independently.
pub fn theorem1_sides(g: &Graph, z: &DenseMatrix) -> Result<(f64, f64)> {
    let a = normalize_adjacency(g, Normalization::Row);
    let lhs = phi(Phi::SquaredError, z, &spmm(&a, z)?)?.value;
    let lap = normalized_laplacian(g);
    let lz = spmm(&lap, z)?;
    let rhs = 0.5 * z.inner(&spmm_transpose(&lap, &lz)?)?;
    Ok((lhs, rhs))
}

/// `|φ_SE(Z, ÂZ) − ½⟨Z, Δ̃ᵀΔ̃Z⟩|`.
pub fn theorem1_residual(g: &Graph, z: &DenseMatrix) -> Result<f64> {
    let (lhs, rhs) = theorem1_sides(g, z)?;
    Ok((lhs - rhs).abs())
}

#[derive(Debug, Clone)]
pub struct DescentResult {
    pub z: DenseMatrix,
    /// Entry `k` describes the iterate after `k` steps (entry 0 is the start).
    pub trace: Vec<TracePoint>,
}

impl DescentResult {
    pub fn final_dispersion(&self) -> f64 {
        self.trace.last().map_or(0.0, |t| t.dispersion)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.trace.iter().map(|t| t.value)
    }
}

/// Dispersion in the space `φ` compares: logits for squared error,
/// softmax probabilities for cross entropy and KL (both ignore per-row shifts).
pub fn descent_dispersion(variant: Phi, z: &DenseMatrix) -> f64 {
    match variant {
        Phi::SquaredError => row_dispersion(z),
        Phi::CrossEntropy | Phi::KlDivergence => row_dispersion(&softmax_rows(z)),
    }
}

/// Fixed-step gradient descent on `φ(Z, ÂZ)` with `Z` as the free variable,
/// differentiating through both arguments.
pub fn minimize_preg_descent(
    g: &Graph,
    z0: &DenseMatrix,
    variant: Phi,
    lr: f64,
    steps: usize,
) -> Result<DescentResult> {
    if !g.is_connected() {
        return Err(Error::Analysis("P-reg descent check needs a connected graph".into()));
    }
    if z0.rows() != g.num_nodes() {
        return Err(Error::shape("minimize_preg_descent", g.num_nodes(), z0.rows()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    let a = normalize_adjacency(g, Normalization::Row);
    let mut z = z0.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let out = phi(variant, &z, &spmm(&a, &z)?)?;
        let dispersion = descent_dispersion(variant, &z);
        if !out.value.is_finite() || !z.is_finite() {
            return Err(Error::Analysis(format!(
                "descent diverged at step {step}; try a smaller learning rate than {lr}"
            )));
        }
        trace.push(TracePoint {
            step,
            value: out.value,
            dispersion,
        });
        if step == steps {
            break;
        }
        let mut grad = out.dz;
        grad.add_assign(&spmm_transpose(&a, &out.dzprop)?)?;
        z.axpy(-lr, &grad)?;
    }
    Ok(DescentResult { z, trace })
}

/// ω = (1/N) Σ_k Σ_{i∈S_k} ‖z_i − c_k‖₂ with `c_k` the mean output of class `k`.
pub fn intra_class_distance(z: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != z.rows() {
        return Err(Error::shape("intra_class_distance", z.rows(), labels.len()));
    }
    if z.rows() == 0 {
        return Ok(0.0);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let c = z.cols();
    let mut centroids = vec![vec![0.0; c]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &l) in z.row_iter().zip(labels) {
        counts[l] += 1;
        for (acc, &v) in centroids[l].iter_mut().zip(row) {
            *acc += v;
        }
    }
    for (cent, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            cent.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let total: f64 = z
        .row_iter()
        .zip(labels)
        .map(|(row, &l)| {
            row.iter()
                .zip(&centroids[l])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / z.rows() as f64)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Analysis("spearman needs two equally long series of length >= 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Analysis("spearman undefined for a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
