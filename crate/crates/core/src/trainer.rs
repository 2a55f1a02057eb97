//! A small two-layer model trained on the joint BCE + contrastive objective
//! with AdamW, a mixed-modality batch sampler, early stopping, and a
//! synthetic cross-modal feature generator.

use std::io::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmsupcon::{self, BatchFeatures, JointLoss, LossConfig, LossError, LossVariant};
use crate::data::{Label, Modality};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("input dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("shape mismatch in {0}")]
    ShapeMismatch(&'static str),
    #[error("both sample pools are empty")]
    BothPoolsEmpty,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: bce={bce}, cm={cm}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        bce: f64,
        cm: f64,
    },
    #[error("{0}")]
    Loss(#[from] LossError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which activations feed the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    /// `z = h·W_p`.
    #[default]
    Projection,
    /// `z = h`.
    Hidden,
}

/// Model parameters; also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub wp: Matrix,
    pub wc: Vec<f64>,
    pub bc: f64,
}

impl Params {
    pub fn zeros(d_in: usize, d_h: usize, d_z: usize) -> Self {
        Self {
            w1: Matrix::zeros(d_in, d_h),
            b1: vec![0.0; d_h],
            wp: Matrix::zeros(d_h, d_z),
            wc: vec![0.0; d_h],
            bc: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.w1.rows(), self.w1.cols(), self.wp.cols())
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.wp.as_slice(),
            &self.wc,
            std::slice::from_ref(&self.bc),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.wp.as_mut_slice(),
            &mut self.wc,
            std::slice::from_mut(&mut self.bc),
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 5] = ["w1", "b1", "wp", "wc", "bc"];

    pub fn same_shape(&self, other: &Params) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .all(|(a, b)| a.len() == b.len())
            && self.w1.rows() == other.w1.rows()
            && self.wp.cols() == other.wp.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub params: Params,
    pub feature_layer: FeatureLayer,
}

impl ToyModel {
    /// He-initialized first layer, scaled-normal heads, zero biases.
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_h: usize,
        d_z: usize,
        feature_layer: FeatureLayer,
        rng: &mut R,
    ) -> Self {
        let mut p = Params::zeros(d_in, d_h, d_z);
        let n1 = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (1.0 / d_h as f64).sqrt()).expect("positive std");
        p.w1.as_mut_slice().iter_mut().for_each(|v| *v = n1.sample(rng));
        p.wp.as_mut_slice().iter_mut().for_each(|v| *v = n2.sample(rng));
        p.wc.iter_mut().for_each(|v| *v = n2.sample(rng));
        Self {
            params: p,
            feature_layer,
        }
    }

    pub fn d_in(&self) -> usize {
        self.params.w1.rows()
    }

    pub fn d_h(&self) -> usize {
        self.params.w1.cols()
    }

    pub fn d_z(&self) -> usize {
        match self.feature_layer {
            FeatureLayer::Projection => self.params.wp.cols(),
            FeatureLayer::Hidden => self.d_h(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Contrastive features, before normalization.
    pub z: Matrix,
    pub pre_activation: Matrix,
    pub hidden: Matrix,
}

pub fn forward(model: &ToyModel, x: &Matrix) -> Result<ForwardOutput, TrainError> {
    if x.cols() != model.d_in() {
        return Err(TrainError::DimMismatch {
            expected: model.d_in(),
            found: x.cols(),
        });
    }
    let p = &model.params;
    let mut a = x.matmul(&p.w1);
    for i in 0..a.rows() {
        for (v, b) in a.row_mut(i).iter_mut().zip(&p.b1) {
            *v += b;
        }
    }
    let mut h = a.clone();
    h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let logits = (0..h.rows()).map(|i| dot(h.row(i), &p.wc) + p.bc).collect();
    let z = match model.feature_layer {
        FeatureLayer::Projection => h.matmul(&p.wp),
        FeatureLayer::Hidden => h.clone(),
    };
    Ok(ForwardOutput {
        logits,
        z,
        pre_activation: a,
        hidden: h,
    })
}

/// Contrastive loss and gradient over the rows of `z` that can be
/// normalized; rows with (numerically) zero norm get zero gradient.
fn contrastive_term(
    z: &Matrix,
    labels: &[Label],
    modalities: &[Modality],
    cfg: &LossConfig,
) -> Result<(f64, Matrix), LossError> {
    let keep: Vec<usize> = (0..z.rows())
        .filter(|&i| dot(z.row(i), z.row(i)).sqrt() > 1e-12)
        .collect();
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    if keep.is_empty() {
        return Ok((0.0, grad));
    }
    let batch = BatchFeatures::new(
        z.select_rows(&keep),
        keep.iter().map(|&i| labels[i]).collect(),
        keep.iter().map(|&i| modalities[i]).collect(),
    )?;
    let (loss, g) = cmsupcon::supcon_loss_and_grad(&batch, cfg)?;
    for (r, &i) in keep.iter().enumerate() {
        grad.row_mut(i).copy_from_slice(g.row(r));
    }
    Ok((loss.loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardOutput {
    pub loss: JointLoss,
    pub grads: Params,
    pub logits: Vec<f64>,
}

/// Joint loss `bce + λ·contrastive` and its exact gradient for every
/// parameter. The contrastive path is skipped entirely when `lambda == 0`.
pub fn backward(
    model: &ToyModel,
    x: &Matrix,
    targets: &[Label],
    modalities: &[Modality],
    lambda: f64,
    cfg: &LossConfig,
) -> Result<BackwardOutput, TrainError> {
    let n = x.rows();
    if targets.len() != n || modalities.len() != n {
        return Err(TrainError::ShapeMismatch("targets/modalities"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LossError::InvalidLambda(lambda).into());
    }
    let fw = forward(model, x)?;
    let p = &model.params;
    let (bce, dlogit) = cmsupcon::bce_with_logits(&fw.logits, targets)?;
    let (cm, dz) = if lambda > 0.0 {
        let (cm, mut g) = contrastive_term(&fw.z, targets, modalities, cfg)?;
        g.as_mut_slice().iter_mut().for_each(|v| *v *= lambda);
        (cm, Some(g))
    } else {
        (0.0, None)
    };

    let mut grads = model.params.zeros_like();
    let mut dh = Matrix::zeros(n, model.d_h());
    for i in 0..n {
        for (d, w) in dh.row_mut(i).iter_mut().zip(&p.wc) {
            *d = dlogit[i] * w;
        }
    }
    if let Some(dz) = &dz {
        match model.feature_layer {
            FeatureLayer::Projection => {
                grads.wp = fw.hidden.t_matmul(dz);
                let back = dz.matmul_t(&p.wp);
                dh.as_mut_slice()
                    .iter_mut()
                    .zip(back.as_slice())
                    .for_each(|(a, b)| *a += b);
            }
            FeatureLayer::Hidden => {
                dh.as_mut_slice()
                    .iter_mut()
                    .zip(dz.as_slice())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
    for i in 0..n {
        for (g, h) in grads.wc.iter_mut().zip(fw.hidden.row(i)) {
            *g += dlogit[i] * h;
        }
    }
    grads.bc = dlogit.iter().sum();
    let mut da = dh;
    da.as_mut_slice()
        .iter_mut()
        .zip(fw.pre_activation.as_slice())
        .for_each(|(d, a)| {
            if *a <= 0.0 {
                *d = 0.0;
            }
        });
    grads.w1 = x.t_matmul(&da);
    for i in 0..n {
        for (g, d) in grads.b1.iter_mut().zip(da.row(i)) {
            *g += d;
        }
    }
    let total = if lambda > 0.0 { bce + lambda * cm } else { bce };
    Ok(BackwardOutput {
        loss: JointLoss { bce, cm, total },
        grads,
        logits: fw.logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && [self.lr, self.eps, self.weight_decay].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl OptimState {
    pub fn new(params: &Params, config: AdamWConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        })
    }
}

/// One AdamW step: decoupled decay `p ← p·(1 − lr·wd)`, then the
/// bias-corrected adaptive update.
pub fn optimizer_step(params: &mut Params, grads: &Params, state: &mut OptimState) -> Result<(), TrainError> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(TrainError::ShapeMismatch("optimizer tensors"));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.lr * c.weight_decay;
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = m[i] / bias1;
            let vh = v[i] / bias2;
            p[i] = p[i] * decay - c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// How batches mix the two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixPolicy {
    /// Probability that a slot is filled from the video pool.
    pub video_fraction: f64,
    /// Put at least one sample of each modality in every batch when both
    /// pools are non-empty, reusing samples of an exhausted pool if needed.
    pub guarantee_both: bool,
}

impl Default for MixPolicy {
    fn default() -> Self {
        Self {
            video_fraction: 0.5,
            guarantee_both: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Index batches for one epoch. Each pool is visited without replacement
/// in shuffled order until both are exhausted; the last batch may be short.
pub fn mixed_batch_sampler<R: Rng + ?Sized>(
    image_pool: &[usize],
    video_pool: &[usize],
    batch_size: usize,
    policy: &MixPolicy,
    rng: &mut R,
) -> Result<EpochPlan, TrainError> {
    if batch_size < 2 {
        return Err(TrainError::InvalidConfig("batch_size must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&policy.video_fraction) {
        return Err(TrainError::InvalidConfig("video_fraction must lie in [0, 1]".into()));
    }
    if image_pool.is_empty() && video_pool.is_empty() {
        return Err(TrainError::BothPoolsEmpty);
    }
    let mut warnings = Vec::new();
    for (pool, name) in [(image_pool, "image"), (video_pool, "video")] {
        if pool.is_empty() {
            let msg = format!("{name} pool is empty; the cross-modal contrastive term will be inert");
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    let mut images = image_pool.to_vec();
    let mut videos = video_pool.to_vec();
    images.shuffle(rng);
    videos.shuffle(rng);
    images.reverse();
    videos.reverse();
    let guarantee = policy.guarantee_both && !image_pool.is_empty() && !video_pool.is_empty();

    let mut batches = Vec::new();
    while !images.is_empty() || !videos.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        if guarantee {
            for (queue, pool) in [(&mut images, image_pool), (&mut videos, video_pool)] {
                let idx = queue.pop().unwrap_or_else(|| pool[rng.random_range(0..pool.len())]);
                batch.push(idx);
            }
        }
        while batch.len() < batch_size && (!images.is_empty() || !videos.is_empty()) {
            let take_video = match (images.is_empty(), videos.is_empty()) {
                (false, false) => rng.random_bool(policy.video_fraction),
                (true, _) => true,
                (_, true) => false,
            };
            let q = if take_video { &mut videos } else { &mut images };
            batch.push(q.pop().expect("non-empty queue"));
        }
        batches.push(batch);
    }
    Ok(EpochPlan { batches, warnings })
}

/// Feature vectors with ground truth, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub x: Matrix,
    pub labels: Vec<Label>,
    pub modalities: Vec<Modality>,
    pub subsets: Vec<String>,
}

/// One line of a feature JSON-Lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    pub feature: Vec<f64>,
    pub label: Label,
    pub modality: Modality,
    #[serde(default = "default_subset")]
    pub subset: String,
}

fn default_subset() -> String {
    "default".into()
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn from_records(records: &[FeatureRecord]) -> Result<Self, TrainError> {
        let first = records
            .first()
            .ok_or_else(|| TrainError::InvalidConfig("empty feature set".into()))?;
        let d = first.feature.len();
        let mut data = Vec::with_capacity(records.len() * d);
        for r in records {
            if r.feature.len() != d {
                return Err(TrainError::DimMismatch {
                    expected: d,
                    found: r.feature.len(),
                });
            }
            data.extend_from_slice(&r.feature);
        }
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            x: Matrix::from_vec(records.len(), d, data),
            labels: records.iter().map(|r| r.label).collect(),
            modalities: records.iter().map(|r| r.modality).collect(),
            subsets: records.iter().map(|r| r.subset.clone()).collect(),
        })
    }

    pub fn records(&self) -> Vec<FeatureRecord> {
        (0..self.len())
            .map(|i| FeatureRecord {
                id: self.ids[i].clone(),
                feature: self.x.row(i).to_vec(),
                label: self.labels[i],
                modality: self.modalities[i],
                subset: self.subsets[i].clone(),
            })
            .collect()
    }

    pub fn subset_where(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            x: self.x.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            modalities: idx.iter().map(|&i| self.modalities[i]).collect(),
            subsets: idx.iter().map(|&i| self.subsets[i].clone()).collect(),
        }
    }

    pub fn only(&self, modality: Modality) -> Self {
        self.subset_where(|i| self.modalities[i] == modality)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, TrainError> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: FeatureRecord = serde_json::from_str(line)
                .map_err(|e| TrainError::InvalidConfig(format!("feature line {}: {e}", n + 1)))?;
            records.push(r);
        }
        Self::from_records(&records)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse_jsonl(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau: f64,
    pub variant: LossVariant,
    pub seed: u64,
    pub early_stopping: Option<EarlyStopping>,
    pub mix: MixPolicy,
    pub feature_layer: FeatureLayer,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lambda: cmsupcon::DEFAULT_LAMBDA,
            tau: cmsupcon::DEFAULT_TAU,
            variant: LossVariant::CrossModal,
            seed: 0,
            early_stopping: Some(EarlyStopping { patience: 10 }),
            mix: MixPolicy::default(),
            feature_layer: FeatureLayer::Projection,
            hidden_dim: 32,
            proj_dim: 16,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.hidden_dim == 0 || self.proj_dim < 2 {
            return bad("hidden_dim must be positive and proj_dim at least 2");
        }
        if self.feature_layer == FeatureLayer::Hidden && self.hidden_dim < 2 {
            return bad("hidden features need hidden_dim of at least 2");
        }
        self.optimizer.validate()
    }

    pub fn init_model(&self, d_in: usize) -> ToyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        ToyModel::init(d_in, self.hidden_dim, self.proj_dim, self.feature_layer, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bce: f64,
    pub train_cm: f64,
    pub train_total: f64,
    pub val_total: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: ToyModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_bce,train_cm,train_total,val_total,train_acc,val_acc\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.train_bce, r.train_cm, r.train_total, r.val_total, r.train_acc, r.val_acc
        ));
    }
    s
}

fn fraction_correct(logits: &[f64], labels: &[Label]) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(&l, y)| (l >= 0.0) == y.is_fake())
        .count();
    hits as f64 / logits.len().max(1) as f64
}

/// Joint loss and accuracy over a whole feature set, evaluated as one batch.
pub fn evaluate_loss(
    model: &ToyModel,
    set: &FeatureSet,
    lambda: f64,
    cfg: &LossConfig,
) -> Result<(JointLoss, f64), TrainError> {
    let fw = forward(model, &set.x)?;
    let (bce, _) = cmsupcon::bce_with_logits(&fw.logits, &set.labels)?;
    let cm = if lambda > 0.0 {
        contrastive_term(&fw.z, &set.labels, &set.modalities, cfg)?.0
    } else {
        0.0
    };
    let total = if lambda > 0.0 { bce + lambda * cm } else { bce };
    Ok((JointLoss { bce, cm, total }, fraction_correct(&fw.logits, &set.labels)))
}

/// Accuracy (logit ≥ 0 means Fake) of the model on a feature set.
pub fn accuracy_on(model: &ToyModel, set: &FeatureSet) -> Result<f64, TrainError> {
    Ok(fraction_correct(&forward(model, &set.x)?.logits, &set.labels))
}

/// Fake probabilities for every sample.
pub fn predict_proba(model: &ToyModel, x: &Matrix) -> Result<Vec<f64>, TrainError> {
    Ok(forward(model, x)?.logits.into_iter().map(cmsupcon::sigmoid).collect())
}

/// Trains with AdamW and returns the checkpoint with the lowest validation
/// loss. Stops after `patience + 1` consecutive epochs without improvement.
pub fn train(
    model: ToyModel,
    train_set: &FeatureSet,
    val_set: &FeatureSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(TrainError::InvalidConfig("validation set is empty".into()));
    }
    if train_set.is_empty() {
        return Err(TrainError::BothPoolsEmpty);
    }
    for set in [train_set, val_set] {
        if set.dim() != model.d_in() {
            return Err(TrainError::DimMismatch {
                expected: model.d_in(),
                found: set.dim(),
            });
        }
    }
    let loss_cfg = cfg.loss_config();
    let image_pool: Vec<usize> = (0..train_set.len())
        .filter(|&i| train_set.modalities[i] == Modality::Image)
        .collect();
    let video_pool: Vec<usize> = (0..train_set.len())
        .filter(|&i| train_set.modalities[i] == Modality::Video)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut model = model;
    let mut state = OptimState::new(&model.params, cfg.optimizer)?;
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let plan = mixed_batch_sampler(&image_pool, &video_pool, cfg.batch_size, &cfg.mix, &mut rng)?;
        if epoch == 0 {
            warnings = plan.warnings.clone();
        }
        let (mut sb, mut sc, mut st, mut hits, mut seen) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for (b, idx) in plan.batches.iter().enumerate() {
            let x = train_set.x.select_rows(idx);
            let y: Vec<Label> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let m: Vec<Modality> = idx.iter().map(|&i| train_set.modalities[i]).collect();
            let out = backward(&model, &x, &y, &m, cfg.lambda, &loss_cfg)?;
            if !out.loss.total.is_finite() || !out.grads.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    bce: out.loss.bce,
                    cm: out.loss.cm,
                });
            }
            sb += out.loss.bce;
            sc += out.loss.cm;
            st += out.loss.total;
            hits += fraction_correct(&out.logits, &y) * idx.len() as f64;
            seen += idx.len();
            optimizer_step(&mut model.params, &out.grads, &mut state)?;
        }
        let nb = plan.batches.len() as f64;
        let (val, val_acc) = evaluate_loss(&model, val_set, cfg.lambda, &loss_cfg)?;
        if !val.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: plan.batches.len(),
                bce: val.bce,
                cm: val.cm,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_bce: sb / nb,
            train_cm: sc / nb,
            train_total: st / nb,
            val_total: val.total,
            train_acc: hits / seen as f64,
            val_acc,
        });
        if val.total < best.0 {
            best = (val.total, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if let Some(es) = cfg.early_stopping {
                if stale > es.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model: best.1,
        best_epoch: best.2,
        history,
        warnings,
    })
}

/// Versioned JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ToyModel,
    pub config: TrainConfig,
    pub best_epoch: usize,
}

pub const CHECKPOINT_FORMAT: &str = "xmodal-toy-model";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: ToyModel, config: TrainConfig, best_epoch: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model,
            config,
            best_epoch,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let p = &c.model.params;
        let consistent = p.b1.len() == p.w1.cols()
            && p.wp.rows() == p.w1.cols()
            && p.wc.len() == p.w1.cols()
            && p.w1.as_slice().len() == p.w1.rows() * p.w1.cols()
            && p.wp.as_slice().len() == p.wp.rows() * p.wp.cols()
            && p.is_finite();
        if !consistent {
            return Err(TrainError::Checkpoint("inconsistent parameter shapes".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Number of samples per (label, modality) group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCounts {
    pub real_image: usize,
    pub fake_image: usize,
    pub real_video: usize,
    pub fake_video: usize,
}

impl GroupCounts {
    pub fn uniform(n: usize) -> Self {
        Self {
            real_image: n,
            fake_image: n,
            real_video: n,
            fake_video: n,
        }
    }

    pub fn total(&self) -> usize {
        self.real_image + self.fake_image + self.real_video + self.fake_video
    }

    fn groups(&self) -> [(Label, Modality, usize); 4] {
        [
            (Label::Real, Modality::Image, self.real_image),
            (Label::Fake, Modality::Image, self.fake_image),
            (Label::Real, Modality::Video, self.real_video),
            (Label::Fake, Modality::Video, self.fake_video),
        ]
    }
}

/// A coordinate that carries the label in images and is random in videos.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shortcut {
    pub strength: f64,
    pub noise: f64,
}

/// Gaussian clusters per (label, modality) with diagonal covariance.
/// Video clusters are the image clusters translated by `video_shift`; the
/// optional shortcut coordinate is appended last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub real_mean: Vec<f64>,
    pub fake_mean: Vec<f64>,
    pub std: Vec<f64>,
    pub video_shift: Vec<f64>,
    pub shortcut: Option<Shortcut>,
    pub train: GroupCounts,
    pub val: GroupCounts,
    pub test: GroupCounts,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            real_mean: vec![-1.5, -1.5, 0.0, 0.0, 0.0, 0.0],
            fake_mean: vec![1.5, 1.5, 0.0, 0.0, 0.0, 0.0],
            std: vec![1.0; 6],
            video_shift: vec![2.5, 2.5, 4.0, 0.0, 0.0, 0.0],
            shortcut: Some(Shortcut {
                strength: 2.0,
                noise: 0.3,
            }),
            train: GroupCounts::uniform(200),
            val: GroupCounts::uniform(50),
            test: GroupCounts::uniform(200),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: FeatureSet,
    pub val: FeatureSet,
    pub test: FeatureSet,
}

impl SyntheticSpec {
    pub fn dim(&self) -> usize {
        self.real_mean.len() + usize::from(self.shortcut.is_some())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let d = self.real_mean.len();
        let bad = |m: String| Err(TrainError::InvalidSpec(m));
        if d == 0 {
            return bad("empty mean vector".into());
        }
        for (name, v) in [
            ("fake_mean", &self.fake_mean),
            ("std", &self.std),
            ("video_shift", &self.video_shift),
        ] {
            if v.len() != d {
                return bad(format!("{name} has {} entries, expected {d}", v.len()));
            }
        }
        let all = self
            .real_mean
            .iter()
            .chain(&self.fake_mean)
            .chain(&self.std)
            .chain(&self.video_shift);
        if all.clone().any(|v| !v.is_finite()) || self.std.iter().any(|&s| s < 0.0) {
            return bad("means must be finite and std non-negative".into());
        }
        if let Some(s) = self.shortcut {
            if !(s.strength.is_finite() && s.noise.is_finite() && s.noise >= 0.0) {
                return bad("invalid shortcut".into());
            }
        }
        if self.dim() < 2 {
            return bad("feature dimension must be at least 2".into());
        }
        Ok(())
    }
}

fn generate_split(spec: &SyntheticSpec, counts: &GroupCounts, split: &str, stream: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let d = spec.dim();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut records = Vec::with_capacity(counts.total());
    for (label, modality, n) in counts.groups() {
        let base = if label.is_fake() {
            &spec.fake_mean
        } else {
            &spec.real_mean
        };
        for _ in 0..n {
            let mut f = Vec::with_capacity(d);
            for k in 0..base.len() {
                let shift = if modality == Modality::Video {
                    spec.video_shift[k]
                } else {
                    0.0
                };
                f.push(base[k] + shift + spec.std[k] * std_normal.sample(&mut rng));
            }
            if let Some(s) = spec.shortcut {
                let sign = match modality {
                    Modality::Image => {
                        if label.is_fake() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    Modality::Video => {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                };
                f.push(sign * s.strength + s.noise * std_normal.sample(&mut rng));
            }
            let id = format!("{split}-{:06}", records.len());
            records.push(FeatureRecord {
                id,
                feature: f,
                label,
                modality,
                subset: modality.as_str().to_string(),
            });
        }
    }
    FeatureSet::from_records(&records).expect("consistent synthetic records")
}

/// Deterministic train/val/test draws; every split uses its own stream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, TrainError> {
    spec.validate()?;
    for (name, c) in [("train", spec.train), ("val", spec.val), ("test", spec.test)] {
        if c.total() == 0 {
            return Err(TrainError::InvalidSpec(format!("{name} split is empty")));
        }
    }
    Ok(SyntheticData {
        train: generate_split(spec, &spec.train, "train", 1),
        val: generate_split(spec, &spec.val, "val", 2),
        test: generate_split(spec, &spec.test, "test", 3),
    })
}
