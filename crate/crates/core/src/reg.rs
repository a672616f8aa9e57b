//! Regularizers on model outputs.
//!
//! Propagation regularization compares each node's logits with the average of
//! its neighbors' logits, `φ(Z, ÂZ)`, and differentiates through both
//! arguments. The baselines (Laplacian smoothing, label smoothing, confidence
//! penalty) live here too so every regularizer shares one calling convention:
//! a value plus a gradient with respect to `Z`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{spmm, spmm_transpose, Graph, SparseOperator};
use crate::matrix::{softmax_backward, softmax_rows, DenseMatrix};

/// Floor applied inside every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phi {
    #[serde(rename = "se")]
    SquaredError,
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "kl")]
    KlDivergence,
}

impl Phi {
    pub const ALL: [Phi; 3] = [Phi::SquaredError, Phi::CrossEntropy, Phi::KlDivergence];

    pub fn short_name(self) -> &'static str {
        match self {
            Phi::SquaredError => "se",
            Phi::CrossEntropy => "ce",
            Phi::KlDivergence => "kl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    None,
    Preg,
    Laplacian,
    LabelSmoothing,
    ConfidencePenalty,
}

impl RegKind {
    pub const ALL: [RegKind; 5] = [
        RegKind::None,
        RegKind::Preg,
        RegKind::Laplacian,
        RegKind::LabelSmoothing,
        RegKind::ConfidencePenalty,
    ];
}

/// Full description of the regularization term of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegSpec {
    pub kind: RegKind,
    pub phi: Phi,
    /// Weight of the regularizer (P-reg and Laplacian).
    pub mu: f64,
    /// Fraction of nodes on which P-reg is evaluated.
    pub unmask_ratio: f64,
    /// Use `mu^(1/epoch)` instead of `mu`.
    pub anneal: bool,
    /// Hinge threshold on the P-reg value.
    pub threshold: Option<f64>,
    pub ls_alpha: f64,
    pub cp_beta: f64,
}

impl Default for RegSpec {
    fn default() -> Self {
        Self {
            kind: RegKind::None,
            phi: Phi::CrossEntropy,
            mu: 0.0,
            unmask_ratio: 1.0,
            anneal: false,
            threshold: None,
            ls_alpha: 0.1,
            cp_beta: 0.1,
        }
    }
}

impl RegSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn preg(phi: Phi, mu: f64) -> Self {
        Self {
            kind: RegKind::Preg,
            phi,
            mu,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be a finite value >= 0, got {}", self.mu)));
        }
        if !(0.0..=1.0).contains(&self.unmask_ratio) {
            return Err(Error::Config(format!(
                "unmask ratio must lie in [0, 1], got {}",
                self.unmask_ratio
            )));
        }
        if let Some(tau) = self.threshold {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("threshold must be >= 0, got {tau}")));
            }
        }
        if !(0.0..1.0).contains(&self.ls_alpha) {
            return Err(Error::Config(format!(
                "label smoothing alpha must lie in [0, 1), got {}",
                self.ls_alpha
            )));
        }
        if !(self.cp_beta >= 0.0 && self.cp_beta.is_finite()) {
            return Err(Error::Config(format!("confidence penalty beta must be >= 0, got {}", self.cp_beta)));
        }
        if self.anneal && self.kind == RegKind::Preg && !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::Config(format!(
                "annealing needs 0 < mu < 1, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// Value of `φ` and its gradients with respect to both arguments.
#[derive(Debug, Clone)]
pub struct PhiOutput {
    pub value: f64,
    pub dz: DenseMatrix,
    pub dzprop: DenseMatrix,
}

#[inline]
fn clamped_log(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

/// `d/dv log(max(v, floor))`
#[inline]
fn clamped_log_grad(v: f64) -> f64 {
    if v > LOG_FLOOR {
        1.0 / v
    } else {
        0.0
    }
}

/// `φ(Z, Zprop)` summed over all rows.
pub fn phi(variant: Phi, z: &DenseMatrix, zprop: &DenseMatrix) -> Result<PhiOutput> {
    let all: Vec<usize> = (0..z.rows()).collect();
    phi_rows(variant, z, zprop, &all)
}

/// `φ` restricted to the listed rows; other rows get zero gradient.
///
/// Rows are summed in the order given.
pub fn phi_rows(variant: Phi, z: &DenseMatrix, zprop: &DenseMatrix, rows: &[usize]) -> Result<PhiOutput> {
    if !z.same_shape(zprop) {
        return Err(Error::shape(
            "phi",
            format!("{}x{}", z.rows(), z.cols()),
            format!("{}x{}", zprop.rows(), zprop.cols()),
        ));
    }
    let (n, c) = z.shape();
    let mut dz = DenseMatrix::zeros(n, c);
    let mut dzprop = DenseMatrix::zeros(n, c);
    let mut value = 0.0;
    match variant {
        Phi::SquaredError => {
            for &i in rows {
                let mut row_sum = 0.0;
                for j in 0..c {
                    let diff = zprop.get(i, j) - z.get(i, j);
                    row_sum += diff * diff;
                    dz.set(i, j, -diff);
                    dzprop.set(i, j, diff);
                }
                value += 0.5 * row_sum;
            }
        }
        Phi::CrossEntropy | Phi::KlDivergence => {
            let p = softmax_rows(z);
            let q = softmax_rows(zprop);
            let mut dp = DenseMatrix::zeros(n, c);
            let mut dq = DenseMatrix::zeros(n, c);
            for &i in rows {
                let mut row_sum = 0.0;
                for j in 0..c {
                    let (pv, qv) = (p.get(i, j), q.get(i, j));
                    let log_q = clamped_log(qv);
                    if variant == Phi::CrossEntropy {
                        row_sum -= pv * log_q;
                        dp.set(i, j, -log_q);
                    } else {
                        let log_p = clamped_log(pv);
                        row_sum += pv * (log_p - log_q);
                        let self_term = if pv > LOG_FLOOR { 1.0 } else { 0.0 };
                        dp.set(i, j, log_p + self_term - log_q);
                    }
                    dq.set(i, j, -pv * clamped_log_grad(qv));
                }
                value += row_sum;
            }
            dz = softmax_backward(&p, &dp);
            dzprop = softmax_backward(&q, &dq);
        }
    }
    Ok(PhiOutput { value, dz, dzprop })
}

/// Nodes with at least one neighbor under `op`; only these have a propagation target.
pub fn eligible_nodes(op: &SparseOperator) -> Vec<usize> {
    (0..op.dim()).filter(|&i| op.row(i).next().is_some()).collect()
}

/// Draws `round(ratio · N)` nodes uniformly without replacement, keeps the
/// eligible ones, and returns them sorted.
pub fn sample_unmask_set<R: Rng + ?Sized>(op: &SparseOperator, ratio: f64, rng: &mut R) -> Vec<usize> {
    let n = op.dim();
    let eligible = eligible_nodes(op);
    let count = ((ratio * n as f64).round() as usize).min(n);
    if count == n {
        return eligible;
    }
    let mut chosen: Vec<usize> = sample(rng, n, count)
        .into_iter()
        .filter(|&i| eligible.binary_search(&i).is_ok())
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Propagation regularization averaged over `unmask`:
/// `(1/|S|) Σ_{i∈S} φ(Z_i, (op·Z)_i)`.
///
/// The gradient flows through both arguments: `dZ = ∂φ/∂Z + opᵀ · ∂φ/∂(opZ)`.
/// An empty set yields zero value and zero gradient.
pub fn preg_loss(
    op: &SparseOperator,
    z: &DenseMatrix,
    variant: Phi,
    unmask: &[usize],
) -> Result<(f64, DenseMatrix)> {
    if z.rows() != op.dim() {
        return Err(Error::shape("preg_loss", format!("{} rows", op.dim()), z.rows()));
    }
    if unmask.is_empty() {
        return Ok((0.0, DenseMatrix::zeros(z.rows(), z.cols())));
    }
    if let Some(&bad) = unmask.iter().find(|&&i| i >= op.dim() || op.row(i).next().is_none()) {
        return Err(Error::Config(format!("node {bad} has no neighbors to propagate from")));
    }
    let zprop = spmm(op, z)?;
    let out = phi_rows(variant, z, &zprop, unmask)?;
    let scale = 1.0 / unmask.len() as f64;
    let mut dz = out.dz;
    dz.add_assign(&spmm_transpose(op, &out.dzprop)?)?;
    dz.scale(scale);
    Ok((out.value * scale, dz))
}

/// Edge-centric Laplacian regularizer `Σ_{(i,j)∈E} ‖Z_i − Z_j‖²`, each undirected edge once.
pub fn laplacian_reg(g: &Graph, z: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    if z.rows() != g.num_nodes() {
        return Err(Error::shape("laplacian_reg", g.num_nodes(), z.rows()));
    }
    let c = z.cols();
    let mut value = 0.0;
    let mut dz = DenseMatrix::zeros(z.rows(), c);
    let mut diff = vec![0.0; c];
    for (i, j) in g.undirected_edges().filter(|(i, j)| i != j) {
        for (k, d) in diff.iter_mut().enumerate() {
            *d = z.get(i, k) - z.get(j, k);
            value += *d * *d;
        }
        for (k, &d) in diff.iter().enumerate() {
            dz.set(i, k, dz.get(i, k) + 2.0 * d);
            dz.set(j, k, dz.get(j, k) - 2.0 * d);
        }
    }
    Ok((value, dz))
}

pub fn one_hot(labels: &[usize], classes: usize) -> DenseMatrix {
    DenseMatrix::from_fn(labels.len(), classes, |i, j| if labels[i] == j { 1.0 } else { 0.0 })
}

/// Label smoothing: `(1 − α) y + α / C` per row.
pub fn smooth_labels(y: &DenseMatrix, alpha: f64) -> Result<DenseMatrix> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("label smoothing alpha must lie in [0, 1), got {alpha}")));
    }
    let uniform = alpha / y.cols() as f64;
    Ok(y.map(|v| (1.0 - alpha) * v + uniform))
}

/// Negative entropy `Σ_{i∈rows} Σ_j P_ij log P_ij` of `P = softmax(Z)`, with gradient in `Z`.
pub fn confidence_penalty(z: &DenseMatrix, rows: &[usize]) -> Result<(f64, DenseMatrix)> {
    let p = softmax_rows(z);
    let mut dp = DenseMatrix::zeros(z.rows(), z.cols());
    let mut value = 0.0;
    for &i in rows {
        if i >= z.rows() {
            return Err(Error::shape("confidence_penalty", format!("row < {}", z.rows()), i));
        }
        for j in 0..z.cols() {
            let pv = p.get(i, j);
            let lp = clamped_log(pv);
            value += pv * lp;
            dp.set(i, j, lp + if pv > LOG_FLOOR { 1.0 } else { 0.0 });
        }
    }
    Ok((value, softmax_backward(&p, &dp)))
}

/// `mu^(1/epoch)`.
pub fn anneal_mu(mu: f64, epoch: usize) -> Result<f64> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Config(format!("annealing needs 0 < mu < 1, got {mu}")));
    }
    if epoch == 0 {
        return Err(Error::Config("epochs are counted from 1".into()));
    }
    Ok(mu.powf(1.0 / epoch as f64))
}

/// Hinge `max(0, value − τ)` and the factor to apply to the gradient (0 at or below the kink).
pub fn threshold_hinge(value: f64, tau: f64) -> (f64, f64) {
    if value > tau {
        (value - tau, 1.0)
    } else {
        (0.0, 0.0)
    }
}
