//! Two-layer GCN and MLP with hand-written forward and backward passes.
//!
//! GCN: `Z = op · dropout(ReLU(op · X · W0)) · W1`
//! MLP: `Z = dropout(ReLU(X · W0)) · W1`
//!
//! `op` is whatever propagation operator the caller supplies (by default the
//! symmetric renormalized adjacency). The backward pass routes gradients
//! through both occurrences of `op`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{spmm, spmm_transpose, SparseOperator};
use crate::matrix::DenseMatrix;

pub const GCN_HIDDEN: usize = 64;
pub const MLP_HIDDEN: usize = 16;
pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gcn,
    Mlp,
}

impl ModelKind {
    pub fn default_hidden(self) -> usize {
        match self {
            ModelKind::Gcn => GCN_HIDDEN,
            ModelKind::Mlp => MLP_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub w0: DenseMatrix,
    pub w1: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dw0: DenseMatrix,
    pub dw1: DenseMatrix,
}

/// Uniform Glorot initialization in `±sqrt(6 / (rows + cols))`.
pub fn glorot_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        kind: ModelKind,
        features: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let w0 = glorot_init(features, hidden, rng);
        let w1 = glorot_init(hidden, classes, rng);
        Self { kind, w0, w1 }
    }

    pub fn features(&self) -> usize {
        self.w0.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w0.cols()
    }

    pub fn classes(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w0.data().len() + self.w1.data().len()
    }

    /// `W0` entries followed by `W1` entries.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w0.data().to_vec();
        v.extend_from_slice(self.w1.data());
        v
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        let n0 = self.w0.data().len();
        if flat.len() != self.num_params() {
            return Err(Error::shape("ModelParams::with_flat", self.num_params(), flat.len()));
        }
        Ok(ModelParams {
            kind: self.kind,
            w0: DenseMatrix::new(self.w0.rows(), self.w0.cols(), flat[..n0].to_vec())?,
            w1: DenseMatrix::new(self.w1.rows(), self.w1.cols(), flat[n0..].to_vec())?,
        })
    }
}

impl Gradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            dw0: DenseMatrix::zeros(p.w0.rows(), p.w0.cols()),
            dw1: DenseMatrix::zeros(p.w1.rows(), p.w1.cols()),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.dw0.data().to_vec();
        v.extend_from_slice(self.dw1.data());
        v
    }
}

/// Dropout settings for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub training: bool,
}

impl Dropout {
    pub const OFF: Dropout = Dropout {
        p: 0.0,
        training: false,
    };

    pub fn train(p: f64) -> Self {
        Dropout { p, training: true }
    }

    fn active(&self) -> bool {
        self.training && self.p > 0.0
    }
}

/// Inverted dropout mask with entries in `{0, 1/(1-p)}`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> DenseMatrix {
    let keep = 1.0 / (1.0 - p);
    DenseMatrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    })
}

/// Intermediates saved by [`model_forward`] for [`model_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    kind: ModelKind,
    /// `op · X` for GCN, `X` for MLP.
    input: DenseMatrix,
    /// `input · W0`
    pre_activation: DenseMatrix,
    /// dropout(ReLU(pre_activation))
    hidden: DenseMatrix,
    mask: Option<DenseMatrix>,
    op: Option<SparseOperator>,
}

impl ForwardCache {
    pub fn hidden(&self) -> &DenseMatrix {
        &self.hidden
    }

    pub fn mask(&self) -> Option<&DenseMatrix> {
        self.mask.as_ref()
    }
}

/// Model input with the first propagation already applied.
///
/// For GCN this is `op · X`, which does not change during training.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    kind: ModelKind,
    input: DenseMatrix,
}

impl PreparedInput {
    pub fn new(kind: ModelKind, x: &DenseMatrix, op: &SparseOperator) -> Result<Self> {
        let input = match kind {
            ModelKind::Gcn => spmm(op, x)?,
            ModelKind::Mlp => x.clone(),
        };
        Ok(Self { kind, input })
    }
}

/// Runs the model on raw features `x`. `op` is ignored for MLP.
pub fn model_forward<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &DenseMatrix,
    op: &SparseOperator,
    dropout: Dropout,
    rng: &mut R,
) -> Result<(DenseMatrix, ForwardCache)> {
    let prepared = PreparedInput::new(params.kind, x, op)?;
    forward_prepared(params, &prepared, op, dropout, rng)
}

/// [`model_forward`] on a cached [`PreparedInput`].
pub fn forward_prepared<R: Rng + ?Sized>(
    params: &ModelParams,
    prepared: &PreparedInput,
    op: &SparseOperator,
    dropout: Dropout,
    rng: &mut R,
) -> Result<(DenseMatrix, ForwardCache)> {
    if prepared.kind != params.kind {
        return Err(Error::Config(format!(
            "input prepared for {:?} used with {:?} parameters",
            prepared.kind, params.kind
        )));
    }
    if prepared.input.cols() != params.features() {
        return Err(Error::shape(
            "model_forward",
            format!("{} feature columns", params.features()),
            prepared.input.cols(),
        ));
    }
    if params.w1.rows() != params.hidden() {
        return Err(Error::shape("model_forward", params.hidden(), params.w1.rows()));
    }
    if params.kind == ModelKind::Gcn && op.dim() != prepared.input.rows() {
        return Err(Error::shape("model_forward", prepared.input.rows(), op.dim()));
    }

    let pre_activation = prepared.input.matmul(&params.w0)?;
    let mut hidden = pre_activation.map(|v| v.max(0.0));
    let mask = if dropout.active() {
        let m = dropout_mask(hidden.rows(), hidden.cols(), dropout.p, rng);
        hidden.hadamard_assign(&m)?;
        Some(m)
    } else {
        None
    };
    let out = hidden.matmul(&params.w1)?;
    let (z, op) = match params.kind {
        ModelKind::Gcn => (spmm(op, &out)?, Some(op.clone())),
        ModelKind::Mlp => (out, None),
    };
    let cache = ForwardCache {
        kind: params.kind,
        input: prepared.input.clone(),
        pre_activation,
        hidden,
        mask,
        op,
    };
    Ok((z, cache))
}

/// Reverse-mode gradients of a scalar loss with respect to `W0` and `W1`,
/// given `dZ = ∂loss/∂Z`.
pub fn model_backward(
    cache: &ForwardCache,
    params: &ModelParams,
    dz: &DenseMatrix,
) -> Result<Gradients> {
    if cache.kind != params.kind
        || cache.pre_activation.cols() != params.hidden()
        || cache.input.cols() != params.features()
    {
        return Err(Error::shape(
            "model_backward",
            format!("cache for {}x{} W0", params.features(), params.hidden()),
            format!("{}x{}", cache.input.cols(), cache.pre_activation.cols()),
        ));
    }
    if dz.rows() != cache.hidden.rows() || dz.cols() != params.classes() {
        return Err(Error::shape(
            "model_backward",
            format!("{}x{} dZ", cache.hidden.rows(), params.classes()),
            format!("{}x{}", dz.rows(), dz.cols()),
        ));
    }
    let d_out = match &cache.op {
        Some(op) => spmm_transpose(op, dz)?,
        None => dz.clone(),
    };
    let dw1 = cache.hidden.t_matmul(&d_out)?;
    let mut d_hidden = d_out.matmul_t(&params.w1)?;
    if let Some(mask) = &cache.mask {
        d_hidden.hadamard_assign(mask)?;
    }
    for (d, &pre) in d_hidden.data_mut().iter_mut().zip(cache.pre_activation.data()) {
        if pre <= 0.0 {
            *d = 0.0;
        }
    }
    let dw0 = cache.input.t_matmul(&d_hidden)?;
    Ok(Gradients { dw0, dw1 })
}

/// Largest relative error between analytic and central-difference gradients.
///
/// `f` maps a flat parameter vector to `(loss, analytic gradient)`. When
/// `max_coords` is set and smaller than the parameter count, a deterministic
/// subsample of that many coordinates is checked. Relative error uses the
/// denominator `max(|a|, |b|, 1e-8)`.
pub fn finite_diff_gradcheck_flat<F>(
    mut f: F,
    theta: &[f64],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let (value, grad) = f(theta)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss at base point is {value}")));
    }
    if grad.len() != theta.len() {
        return Err(Error::shape("gradcheck", theta.len(), grad.len()));
    }
    let coords: Vec<usize> = match max_coords {
        Some(k) if k < theta.len() => {
            // evenly strided, always covering first and last
            (0..k).map(|i| i * (theta.len() - 1) / (k - 1).max(1)).collect()
        }
        _ => (0..theta.len()).collect(),
    };
    let mut work = theta.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = work[i];
        let (hi, lo) = (orig + eps, orig - eps);
        work[i] = hi;
        let (plus, _) = f(&work)?;
        work[i] = lo;
        let (minus, _) = f(&work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i} perturbation")));
        }
        // divide by the step actually taken after rounding
        let numeric = (plus - minus) / (hi - lo);
        let analytic = grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

/// [`finite_diff_gradcheck_flat`] over the entries of `W0` and `W1`.
pub fn finite_diff_gradcheck<F>(
    mut loss: F,
    params: &ModelParams,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: FnMut(&ModelParams) -> Result<(f64, Gradients)>,
{
    let theta = params.flatten();
    finite_diff_gradcheck_flat(
        |flat| {
            let p = params.with_flat(flat)?;
            let (v, g) = loss(&p)?;
            Ok((v, g.flatten()))
        },
        &theta,
        eps,
        max_coords,
    )
}
