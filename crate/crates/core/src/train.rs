//! Full-batch training: composite loss, Adam, early stopping, splits and μ search.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::intra_class_distance;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph, Normalization, SparseOperator};
use crate::matrix::{softmax_in_place, DenseMatrix};
use crate::nn::{forward_prepared, model_backward, Dropout, ModelKind, ModelParams, PreparedInput};
use crate::reg::{
    anneal_mu, confidence_penalty, laplacian_reg, one_hot, preg_loss, sample_unmask_set,
    smooth_labels, threshold_hinge, RegKind, RegSpec,
};

/// Seed offset for the P-reg unmask draw, kept apart from the dropout stream.
const UNMASK_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// Checks disjointness, bounds and that every class appears in `train`.
    pub fn validate(&self, labels: &[usize], num_classes: usize) -> Result<()> {
        let n = labels.len();
        let mut seen = vec![false; n];
        for (name, idx) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in idx {
                if i >= n {
                    return Err(Error::Config(format!("{name} index {i} out of range for {n} nodes")));
                }
                if seen[i] {
                    return Err(Error::Config(format!("node {i} appears in more than one split")));
                }
                seen[i] = true;
            }
        }
        let mut present = vec![false; num_classes];
        for &i in &self.train {
            present[labels[i]] = true;
        }
        if let Some(k) = present.iter().position(|p| !p) {
            return Err(Error::Config(format!("class {k} has no training node")));
        }
        Ok(())
    }
}

/// Per-class random split: `per_class_train` / `per_class_val` / the rest.
pub fn random_split<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    per_class_train: usize,
    per_class_val: usize,
    rng: &mut R,
) -> Result<SplitSpec> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Config(format!("label {l} of node {i} >= {num_classes}")));
        }
        by_class[l].push(i);
    }
    let mut split = SplitSpec {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (k, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class_train + per_class_val || per_class_train == 0 || per_class_val == 0 {
            return Err(Error::Config(format!(
                "class {k} has {} nodes; need {per_class_train} train + {per_class_val} val (both > 0)",
                members.len()
            )));
        }
        members.shuffle(rng);
        split.train.extend_from_slice(&members[..per_class_train]);
        split.val.extend_from_slice(&members[per_class_train..per_class_train + per_class_val]);
        split.test.extend_from_slice(&members[per_class_train + per_class_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Fraction of `idx` whose row argmax (ties to the lowest class) equals the label.
pub fn evaluate_accuracy(z: &DenseMatrix, labels: &[usize], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Config("accuracy over an empty node set".into()));
    }
    let correct = idx.iter().filter(|&&i| z.argmax_row(i) == labels[i]).count();
    Ok(correct as f64 / idx.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: added to the raw gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First and second moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grad.len() != theta.len() || state.m.len() != theta.len() {
        return Err(Error::shape("adam_step", theta.len(), grad.len()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((w, &g), m), v) in theta
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g + cfg.weight_decay * *w;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Everything the composite loss needs besides the logits.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub reg: RegSpec,
    pub train_idx: Vec<usize>,
    /// Row `i` is the classification target of node `i` (only train rows are read).
    pub targets: DenseMatrix,
    pub graph: Graph,
    pub preg_op: SparseOperator,
    pub unmask: Vec<usize>,
}

impl LossContext {
    /// Builds the context for one run; the unmask set is drawn from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &RegSpec,
        graph: &Graph,
        labels: &[usize],
        num_classes: usize,
        train_idx: &[usize],
        preg_norm: Normalization,
        preg_self_loops: bool,
        seed: u64,
    ) -> Result<Self> {
        reg.validate()?;
        if train_idx.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let y = one_hot(labels, num_classes);
        let targets = if reg.kind == RegKind::LabelSmoothing {
            smooth_labels(&y, reg.ls_alpha)?
        } else {
            y
        };
        let preg_graph = if preg_self_loops {
            graph.with_self_loops()
        } else {
            graph.clone()
        };
        let preg_op = normalize_adjacency(&preg_graph, preg_norm);
        let unmask = if reg.kind == RegKind::Preg {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ UNMASK_STREAM);
            sample_unmask_set(&preg_op, reg.unmask_ratio, &mut rng)
        } else {
            Vec::new()
        };
        Ok(Self {
            reg: reg.clone(),
            train_idx: train_idx.to_vec(),
            targets,
            graph: graph.clone(),
            preg_op,
            unmask,
        })
    }
}

/// Components of the composite loss at one evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean cross entropy over training nodes (against smoothed targets under label smoothing).
    pub cls: f64,
    /// Regularizer value before weighting (after thresholding for P-reg).
    pub reg: f64,
    /// Weight actually applied to `reg` (after annealing).
    pub weight: f64,
    pub dz: DenseMatrix,
}

/// `L = L_cls + weight · L_reg` and `∂L/∂Z`; `epoch` (from 1) drives annealing.
pub fn composite_loss(z: &DenseMatrix, ctx: &LossContext, epoch: usize) -> Result<LossBreakdown> {
    if ctx.train_idx.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if z.rows() != ctx.targets.rows() || z.cols() != ctx.targets.cols() {
        return Err(Error::shape(
            "composite_loss",
            format!("{}x{}", ctx.targets.rows(), ctx.targets.cols()),
            format!("{}x{}", z.rows(), z.cols()),
        ));
    }
    let m = ctx.train_idx.len() as f64;
    let mut dz = DenseMatrix::zeros(z.rows(), z.cols());
    let mut cls = 0.0;
    let mut p = vec![0.0; z.cols()];
    for &i in &ctx.train_idx {
        let row = z.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        p.copy_from_slice(row);
        softmax_in_place(&mut p);
        let target = ctx.targets.row(i);
        for (j, (&zij, &t)) in row.iter().zip(target).enumerate() {
            cls -= t * (zij - lse);
            dz.set(i, j, (p[j] - t) / m);
        }
    }
    cls /= m;

    let reg = &ctx.reg;
    let (reg_value, weight, reg_dz) = match reg.kind {
        RegKind::None | RegKind::LabelSmoothing => (0.0, 0.0, None),
        RegKind::Preg => {
            let (value, mut rdz) = preg_loss(&ctx.preg_op, z, reg.phi, &ctx.unmask)?;
            let value = match reg.threshold {
                Some(tau) => {
                    let (v, factor) = threshold_hinge(value, tau);
                    rdz.scale(factor);
                    v
                }
                None => value,
            };
            let weight = if reg.anneal { anneal_mu(reg.mu, epoch)? } else { reg.mu };
            (value, weight, Some(rdz))
        }
        RegKind::Laplacian => {
            let n = z.rows() as f64;
            let (value, mut rdz) = laplacian_reg(&ctx.graph, z)?;
            rdz.scale(1.0 / n);
            (value / n, reg.mu, Some(rdz))
        }
        RegKind::ConfidencePenalty => {
            let (value, mut rdz) = confidence_penalty(z, &ctx.train_idx)?;
            rdz.scale(1.0 / m);
            (value / m, reg.cp_beta, Some(rdz))
        }
    };
    let mut total = cls;
    if weight != 0.0 {
        if let Some(rdz) = reg_dz {
            total += weight * reg_value;
            dz.axpy(weight, &rdz)?;
        }
    }
    Ok(LossBreakdown {
        total,
        cls,
        reg: reg_value,
        weight,
        dz,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Hidden width; `None` picks 64 for GCN and 16 for MLP.
    pub hidden: Option<usize>,
    pub reg: RegSpec,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub model_norm: Normalization,
    pub preg_norm: Normalization,
    pub preg_self_loops: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Gcn,
            hidden: None,
            reg: RegSpec::none(),
            adam: AdamConfig::default(),
            dropout: crate::nn::DEFAULT_DROPOUT,
            max_epochs: 2000,
            patience: 200,
            seed: 0,
            model_norm: Normalization::Symmetric,
            preg_norm: Normalization::Row,
            preg_self_loops: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.adam.lr)));
        }
        if !self.adam.weight_decay.is_finite() || self.adam.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs < self.patience {
            return Err(Error::Config(format!(
                "max epochs ({}) must be >= patience ({})",
                self.max_epochs, self.patience
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden.unwrap_or_else(|| self.model.default_hidden())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub cls: f64,
    pub preg: f64,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: ModelKind,
    pub reg: RegKind,
    pub mu: f64,
    pub phi: String,
    pub seed: u64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub omega: f64,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub loss_curve: Vec<EpochLoss>,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Per-epoch view passed to [`train_with_observer`]: the training-mode logits and the loss breakdown.
pub struct EpochView<'a> {
    pub epoch: usize,
    pub z: &'a DenseMatrix,
    pub loss: &'a LossBreakdown,
    pub val_acc: f64,
}

pub fn train(cfg: &TrainConfig, data: &Dataset, split: &SplitSpec) -> Result<(ModelParams, Metrics)> {
    train_with_observer(cfg, data, split, |_| {})
}

/// Adam on the composite loss with early stopping on validation accuracy.
///
/// The parameters with the best validation accuracy (earliest on ties) are
/// restored at the end and all reported metrics refer to them.
pub fn train_with_observer(
    cfg: &TrainConfig,
    data: &Dataset,
    split: &SplitSpec,
    mut observe: impl FnMut(&EpochView<'_>),
) -> Result<(ModelParams, Metrics)> {
    cfg.validate()?;
    split.validate(&data.labels, data.num_classes())?;
    if split.val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(
        cfg.model,
        data.num_features(),
        cfg.hidden_size(),
        data.num_classes(),
        &mut rng,
    );
    let model_op = normalize_adjacency(&data.graph, cfg.model_norm);
    let input = PreparedInput::new(cfg.model, &data.features, &model_op)?;
    let ctx = LossContext::new(
        &cfg.reg,
        &data.graph,
        &data.labels,
        data.num_classes(),
        &split.train,
        cfg.preg_norm,
        cfg.preg_self_loops,
        cfg.seed,
    )?;

    let mut adam = AdamState::new(params.num_params());
    let mut flat = params.flatten();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut since_best = 0;
    let mut curve = Vec::new();
    let mut stopped = cfg.max_epochs;

    for epoch in 1..=cfg.max_epochs {
        let (z, cache) = forward_prepared(&params, &input, &model_op, Dropout::train(cfg.dropout), &mut rng)?;
        let loss = composite_loss(&z, &ctx, epoch)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: loss.total,
            });
        }
        let grads = model_backward(&cache, &params, &loss.dz)?;
        adam_step(&mut flat, &grads.flatten(), &mut adam, &cfg.adam)?;
        params = params.with_flat(&flat)?;
        curve.push(EpochLoss {
            epoch,
            cls: loss.cls,
            preg: loss.reg,
        });

        let (z_eval, _) = forward_prepared(&params, &input, &model_op, Dropout::OFF, &mut rng)?;
        let val_acc = evaluate_accuracy(&z_eval, &data.labels, &split.val)?;
        observe(&EpochView {
            epoch,
            z: &z,
            loss: &loss,
            val_acc,
        });
        if val_acc > best.0 {
            best = (val_acc, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped = epoch;
                break;
            }
        }
    }

    let (_, best_epoch, best_params) = best;
    let (z, _) = forward_prepared(&best_params, &input, &model_op, Dropout::OFF, &mut rng)?;
    let test_acc = if split.test.is_empty() {
        f64::NAN
    } else {
        evaluate_accuracy(&z, &data.labels, &split.test)?
    };
    let metrics = Metrics {
        model: cfg.model,
        reg: cfg.reg.kind,
        mu: cfg.reg.mu,
        phi: cfg.reg.phi.short_name().to_string(),
        seed: cfg.seed,
        train_acc: evaluate_accuracy(&z, &data.labels, &split.train)?,
        val_acc: evaluate_accuracy(&z, &data.labels, &split.val)?,
        test_acc,
        omega: intra_class_distance(&z, &data.labels)?,
        stopped_epoch: stopped,
        best_epoch,
        loss_curve: curve,
    };
    Ok((best_params, metrics))
}

/// Evaluation-mode logits of a trained model on a dataset.
pub fn predict(params: &ModelParams, data: &Dataset, model_norm: Normalization) -> Result<DenseMatrix> {
    let op = normalize_adjacency(&data.graph, model_norm);
    let input = PreparedInput::new(params.kind, &data.features, &op)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(forward_prepared(params, &input, &op, Dropout::OFF, &mut rng)?.0)
}

/// `{0.05 k : k = 1..20}`.
pub fn default_mu_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 20.0).collect()
}

/// μ with the highest score; ties go to the smaller μ.
pub fn select_mu(scores: &[(f64, f64)]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(mu, score) in scores {
        best = match best {
            None => Some((mu, score)),
            Some((bm, bs)) if score > bs || (score == bs && mu < bm) => Some((mu, score)),
            keep => keep,
        };
    }
    best.map(|(mu, _)| mu)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearch {
    pub best_mu: f64,
    pub runs: Vec<Metrics>,
}

/// One run per μ (in parallel), selected by validation accuracy.
pub fn grid_search_mu(
    template: &TrainConfig,
    values: &[f64],
    data: &Dataset,
    split: &SplitSpec,
) -> Result<GridSearch> {
    if values.is_empty() {
        return Err(Error::Config("empty μ grid".into()));
    }
    let runs = values
        .par_iter()
        .map(|&mu| {
            let mut cfg = template.clone();
            cfg.reg.mu = mu;
            train(&cfg, data, split).map(|(_, m)| m)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<(f64, f64)> = values.iter().copied().zip(runs.iter().map(|m| m.val_acc)).collect();
    Ok(GridSearch {
        best_mu: select_mu(&scores).expect("non-empty grid"),
        runs,
    })
}

/// All runs for one μ across splits and seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MuCell {
    pub mu: f64,
    /// `runs[s][k]`: split `s`, seed `k`.
    pub runs: Vec<Vec<Metrics>>,
}

impl MuCell {
    pub fn mean_val(&self) -> f64 {
        mean(self.runs.iter().flatten().map(|m| m.val_acc))
    }

    pub fn mean_test(&self) -> f64 {
        mean(self.runs.iter().flatten().map(|m| m.test_acc))
    }

    pub fn split_mean_test(&self, s: usize) -> f64 {
        mean(self.runs[s].iter().map(|m| m.test_acc))
    }

    pub fn mean_omega(&self) -> f64 {
        mean(self.runs.iter().flatten().map(|m| m.omega))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatedGridSearch {
    pub best_mu: f64,
    pub cells: Vec<MuCell>,
}

/// Grid search where each μ is scored by mean validation accuracy over
/// every (split, seed) pair, so one μ serves the whole experiment.
pub fn grid_search_mu_repeated(
    template: &TrainConfig,
    values: &[f64],
    data: &Dataset,
    splits: &[SplitSpec],
    seeds: &[u64],
) -> Result<RepeatedGridSearch> {
    if values.is_empty() || splits.is_empty() || seeds.is_empty() {
        return Err(Error::Config("grid search needs μ values, splits and seeds".into()));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..values.len())
        .flat_map(|v| (0..splits.len()).flat_map(move |s| (0..seeds.len()).map(move |k| (v, s, k))))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(v, s, k)| {
            let mut cfg = template.clone();
            cfg.reg.mu = values[v];
            cfg.seed = seeds[k];
            train(&cfg, data, &splits[s]).map(|(_, m)| m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = results.into_iter();
    let cells: Vec<MuCell> = values
        .iter()
        .map(|&mu| MuCell {
            mu,
            runs: (0..splits.len())
                .map(|_| it.by_ref().take(seeds.len()).collect())
                .collect(),
        })
        .collect();
    let scores: Vec<(f64, f64)> = cells.iter().map(|c| (c.mu, c.mean_val())).collect();
    Ok(RepeatedGridSearch {
        best_mu: select_mu(&scores).expect("non-empty grid"),
        cells,
    })
}
