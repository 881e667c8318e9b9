//! Multi-objective training: composite loss over fused plus per-modality
//! logits, per-group learning rates, plateau scheduling on validation
//! accuracy, and per-epoch tracking of losses, accuracies, and fusion
//! weights. Runs are seed-deterministic end to end.

use crate::data::{preprocess_image, stratified_split, DataError, DatasetManifest, Preprocess};
use crate::features::{extract_features, FeatureError, FeatureNormalizer, FeatureVector, FEATURE_DIM};
use crate::model::{predict, FreezeOutcome, Mode, SurformerModel};
use crate::rng::{derive_seed, rng_from, rng_from_indexed};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, TensorError, TensorResult, ValueId};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            patience: 5,
            factor: 0.5,
            min_lr: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_vision: f64,
    pub lr_tactile: f64,
    pub lr_fusion: f64,
    /// Weight of each per-modality auxiliary loss.
    pub aux_weight: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub scheduler: SchedulerConfig,
    /// Stratified share of the training split carved off for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_vision: 5e-7,
            lr_tactile: 1.5e-4,
            lr_fusion: 5e-7,
            aux_weight: 0.3,
            batch_size: 32,
            max_epochs: 50,
            scheduler: SchedulerConfig::default(),
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0 < self.scheduler.factor && self.scheduler.factor < 1.0) {
            return Err(TrainError::Config(format!(
                "scheduler factor {} outside (0, 1)",
                self.scheduler.factor
            )));
        }
        if self.scheduler.patience == 0 {
            return Err(TrainError::Config("scheduler patience must be >= 1".into()));
        }
        if self.aux_weight < 0.0 {
            return Err(TrainError::Config(format!(
                "auxiliary weight {} must be >= 0",
                self.aux_weight
            )));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch size and epoch count must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    Data(DataError),
    Feature(FeatureError),
    Tensor(TensorError),
    /// Loss went non-finite.
    Numeric(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "configuration error: {m}"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Feature(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<FeatureError> for TrainError {
    fn from(e: FeatureError) -> Self {
        TrainError::Feature(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

// ----- plateau scheduler ------------------------------------------------

/// Improvement threshold for the monitored metric (validation accuracy,
/// mode max).
pub const IMPROVEMENT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub best_metric: Option<f64>,
    pub epochs_since_improvement: usize,
    /// Per-group learning rates: vision, tactile, fusion.
    pub lrs: [f64; 3],
}

impl SchedulerState {
    pub fn new(lrs: [f64; 3]) -> Self {
        SchedulerState {
            best_metric: None,
            epochs_since_improvement: 0,
            lrs,
        }
    }
}

/// One scheduler update: improvement resets the counter; once the counter
/// exceeds `patience`, every group rate is multiplied by `factor` (floored
/// at `min_lr`) and the counter resets.
pub fn plateau_step(state: &SchedulerState, metric: f64, cfg: &SchedulerConfig) -> SchedulerState {
    let improved = match state.best_metric {
        None => true,
        Some(best) => metric > best + IMPROVEMENT_EPS,
    };
    let mut next = state.clone();
    if improved {
        next.best_metric = Some(metric);
        next.epochs_since_improvement = 0;
        return next;
    }
    next.epochs_since_improvement += 1;
    if next.epochs_since_improvement > cfg.patience {
        for lr in next.lrs.iter_mut() {
            *lr = (*lr * cfg.factor).max(cfg.min_lr);
        }
        next.epochs_since_improvement = 0;
    }
    next
}

// ----- composite loss ----------------------------------------------------

pub struct CompositeLoss {
    pub total: ValueId,
    pub main: ValueId,
    pub aux_vision: ValueId,
    pub aux_tactile: ValueId,
}

/// `total = CE(fused) + λ·CE(vision) + λ·CE(tactile)`, all four returned
/// for logging. A single backward pass from `total` trains everything.
pub fn composite_loss<S: Scalar>(
    tape: &mut Tape<S>,
    fused: ValueId,
    vision: ValueId,
    tactile: ValueId,
    targets: &[usize],
    aux_weight: f64,
) -> TensorResult<CompositeLoss> {
    let main = tape.cross_entropy(fused, targets)?;
    let aux_vision = tape.cross_entropy(vision, targets)?;
    let aux_tactile = tape.cross_entropy(tactile, targets)?;
    let lambda = S::from_f64(aux_weight);
    let sv = tape.scale(aux_vision, lambda);
    let st = tape.scale(aux_tactile, lambda);
    let partial = tape.add(main, sv)?;
    let total = tape.add(partial, st)?;
    Ok(CompositeLoss {
        total,
        main,
        aux_vision,
        aux_tactile,
    })
}

// ----- optimizer ----------------------------------------------------------

/// The three optimizer groups. Contains trainable parameters only; frozen
/// tensors belong to no group.
#[derive(Debug, Clone)]
pub struct ParamGroups {
    pub vision: Vec<ParamId>,
    pub tactile: Vec<ParamId>,
    pub fusion: Vec<ParamId>,
}

pub fn make_param_groups<S: Scalar>(model: &SurformerModel<S>) -> TensorResult<ParamGroups> {
    let trainable = |ids: Vec<ParamId>| -> Vec<ParamId> {
        ids.into_iter()
            .filter(|&id| model.store.get(id).trainable)
            .collect()
    };
    let groups = ParamGroups {
        vision: trainable(model.vision_param_ids()),
        tactile: trainable(model.tactile_param_ids()),
        fusion: trainable(vec![model.fusion_param_id()]),
    };
    model
        .store
        .validate_partition(&[&groups.vision, &groups.tactile, &groups.fusion])?;
    Ok(groups)
}

/// Adaptive moment estimation with decay constants (0.9, 0.999) and
/// eps 1e-8; per-group learning rates are supplied each step.
pub struct Adam<S: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    moments: HashMap<usize, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    /// Apply one update to every grouped parameter that has a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        groups: &ParamGroups,
        lrs: [f64; 3],
    ) {
        self.step_count += 1;
        let t = self.step_count;
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for (group, lr) in [&groups.vision, &groups.tactile, &groups.fusion]
            .into_iter()
            .zip(lrs)
        {
            let lr = S::from_f64(lr);
            let b1 = S::from_f64(self.beta1);
            let b2 = S::from_f64(self.beta2);
            let one_m_b1 = S::from_f64(1.0 - self.beta1);
            let one_m_b2 = S::from_f64(1.0 - self.beta2);
            let c1 = S::from_f64(c1);
            let c2 = S::from_f64(c2);
            let eps = S::from_f64(self.eps);
            for &pid in group {
                let param = store.get_mut(pid);
                if !param.trainable {
                    continue;
                }
                let Some(grad) = param.tensor.grad.clone() else {
                    continue;
                };
                let n = grad.len();
                let (m, v) = self
                    .moments
                    .entry(pid.index())
                    .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
                let data = param.tensor.data_mut();
                for i in 0..n {
                    let g = grad[i];
                    m[i] = b1 * m[i] + one_m_b1 * g;
                    v[i] = b2 * v[i] + one_m_b2 * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

// ----- train log -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub main: f64,
    pub aux_v: f64,
    pub aux_t: f64,
    pub acc_fused: f64,
    pub acc_v: f64,
    pub acc_t: f64,
    pub alpha_v: f64,
    pub alpha_t: f64,
    pub lr_v: f64,
    pub lr_t: f64,
    pub lr_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

pub const TRAINLOG_CSV_HEADER: &str =
    "epoch,total,main,aux_v,aux_t,acc_fused,acc_v,acc_t,alpha_v,alpha_t,lr_v,lr_t,lr_f";

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRAINLOG_CSV_HEADER}")?;
        for r in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.total,
                r.main,
                r.aux_v,
                r.aux_t,
                r.acc_fused,
                r.acc_v,
                r.acc_t,
                r.alpha_v,
                r.alpha_t,
                r.lr_v,
                r.lr_t,
                r.lr_f
            )?;
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("train log serializes")
    }
}

// ----- fit -----------------------------------------------------------------

pub struct FitResult {
    pub log: TrainLog,
    pub normalizer: FeatureNormalizer,
    pub freeze: FreezeOutcome,
}

struct LoadedSplit<S: Scalar> {
    images: Vec<Tensor<S>>,
    features: Vec<FeatureVector>,
    labels: Vec<usize>,
}

fn load_split<S: Scalar>(
    manifest: &DatasetManifest,
    pp: &Preprocess,
) -> Result<LoadedSplit<S>, TrainError> {
    let mut images = Vec::with_capacity(manifest.samples.len());
    let mut features = Vec::with_capacity(manifest.samples.len());
    let mut labels = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let vision = s.vision.load()?;
        images.push(preprocess_image::<S>(&vision, pp));
        let gray = s.tactile.load()?.to_gray()?;
        features.push(extract_features(&gray)?);
        labels.push(s.label);
    }
    Ok(LoadedSplit {
        images,
        features,
        labels,
    })
}

fn batch_tensors<S: Scalar>(
    split: &LoadedSplit<S>,
    normalizer: &FeatureNormalizer,
    indices: &[usize],
    input_hw: usize,
) -> (Tensor<S>, Tensor<S>, Vec<usize>) {
    let b = indices.len();
    let img_len = 3 * input_hw * input_hw;
    let mut images = vec![S::zero(); b * img_len];
    let mut feats = vec![S::zero(); b * FEATURE_DIM];
    let mut targets = Vec::with_capacity(b);
    for (row, &i) in indices.iter().enumerate() {
        images[row * img_len..(row + 1) * img_len].copy_from_slice(split.images[i].data());
        let z = normalizer.normalize(&split.features[i]);
        for (j, v) in z.0.iter().enumerate() {
            feats[row * FEATURE_DIM + j] = S::from_f64(*v);
        }
        targets.push(split.labels[i]);
    }
    (
        Tensor::new(vec![b, 3, input_hw, input_hw], images).expect("batch image shape"),
        Tensor::new(vec![b, FEATURE_DIM], feats).expect("batch feature shape"),
        targets,
    )
}

/// Per-branch accuracies over a split in eval mode.
fn evaluate_split<S: Scalar>(
    model: &SurformerModel<S>,
    split: &LoadedSplit<S>,
    normalizer: &FeatureNormalizer,
    batch_size: usize,
) -> Result<(f64, f64, f64), TrainError> {
    let input_hw = model.vision_cfg.input_hw;
    let n = split.labels.len();
    let mut correct = [0usize; 3];
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(batch_size) {
        let (images, feats, targets) = batch_tensors(split, normalizer, chunk, input_hw);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &images, &feats, &mut Mode::Eval)?;
        for (slot, id) in [(0, out.fused), (1, out.vision), (2, out.tactile)] {
            let pred = predict(tape.value(id))?;
            correct[slot] += pred
                .classes
                .iter()
                .zip(&targets)
                .filter(|(p, t)| p == t)
                .count();
        }
    }
    Ok((
        correct[0] as f64 / n as f64,
        correct[1] as f64 / n as f64,
        correct[2] as f64 / n as f64,
    ))
}

/// Train on `train_set`, carving a stratified validation share out of it.
/// The tactile normalizer is fitted on the optimization portion only; test
/// data never reaches the scheduler. Returns the best-validation snapshot.
pub fn fit<S: Scalar>(
    model: &mut SurformerModel<S>,
    train_set: &DatasetManifest,
    cfg: &TrainConfig,
    pp: &Preprocess,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if train_set.samples.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if pp.size != model.vision_cfg.input_hw {
        return Err(TrainError::Config(format!(
            "preprocess size {} does not match vision input {}",
            pp.size, model.vision_cfg.input_hw
        )));
    }

    let (train_part, val_part) = stratified_split(
        train_set,
        1.0 - cfg.val_fraction,
        derive_seed(cfg.seed, "val-carve"),
    )?;
    if val_part.samples.is_empty() {
        return Err(TrainError::Config(
            "validation carve is empty; provide more samples or a larger fraction".into(),
        ));
    }

    let train_data: LoadedSplit<S> = load_split(&train_part, pp)?;
    let val_data: LoadedSplit<S> = load_split(&val_part, pp)?;

    let normalizer = FeatureNormalizer::fit_from_features(&train_data.features, 1000, cfg.seed)?;

    let freeze = model.apply_freeze_policy(model.vision_cfg.n_unfrozen_tensors);
    let groups = make_param_groups(model)?;
    let mut adam = Adam::new();
    let mut sched = SchedulerState::new([cfg.lr_vision, cfg.lr_tactile, cfg.lr_fusion]);
    let mut dropout_rng = rng_from(cfg.seed, "dropout");

    let n_train = train_data.labels.len();
    let input_hw = model.vision_cfg.input_hw;
    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.max_epochs),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
    };
    let mut best_snapshot = model.store.snapshot();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng = rng_from_indexed(cfg.seed, "epoch-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut sums = [0.0f64; 4]; // total, main, aux_v, aux_t
        for chunk in order.chunks(cfg.batch_size) {
            let (images, feats, targets) =
                batch_tensors(&train_data, &normalizer, chunk, input_hw);
            model.store.zero_grads();
            let mut tape = Tape::new();
            let out = {
                let mut mode = Mode::Train(&mut dropout_rng);
                model.forward(&mut tape, &images, &feats, &mut mode)?
            };
            let loss = composite_loss(
                &mut tape,
                out.fused,
                out.vision,
                out.tactile,
                &targets,
                cfg.aux_weight,
            )?;
            let values = [
                tape.value(loss.total).data()[0].as_f64(),
                tape.value(loss.main).data()[0].as_f64(),
                tape.value(loss.aux_vision).data()[0].as_f64(),
                tape.value(loss.aux_tactile).data()[0].as_f64(),
            ];
            if !values[0].is_finite() {
                return Err(TrainError::Numeric(format!(
                    "loss became non-finite at epoch {epoch}"
                )));
            }
            tape.backward(loss.total)?;
            tape.accumulate_param_grads(&mut model.store);
            adam.step(&mut model.store, &groups, sched.lrs);
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * w;
            }
        }

        let (acc_fused, acc_v, acc_t) =
            evaluate_split(model, &val_data, &normalizer, cfg.batch_size)?;
        let (alpha_v, alpha_t) = model.alpha();
        log.epochs.push(EpochRecord {
            epoch,
            total: sums[0] / n_train as f64,
            main: sums[1] / n_train as f64,
            aux_v: sums[2] / n_train as f64,
            aux_t: sums[3] / n_train as f64,
            acc_fused,
            acc_v,
            acc_t,
            alpha_v,
            alpha_t,
            lr_v: sched.lrs[0],
            lr_t: sched.lrs[1],
            lr_f: sched.lrs[2],
        });

        if acc_fused > log.best_val_accuracy {
            log.best_val_accuracy = acc_fused;
            log.best_epoch = epoch;
            best_snapshot = model.store.snapshot();
        }
        sched = plateau_step(&sched, acc_fused, &cfg.scheduler);
    }

    model.store.restore(&best_snapshot)?;
    Ok(FitResult {
        log,
        normalizer,
        freeze,
    })
}
