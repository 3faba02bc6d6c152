//! Two-stage training: the imaging network alone first, then the network
//! jointly with the rule parameters and the balance weight.
//!
//! Everything downstream of the seed is deterministic — the train/validation
//! split hashes record ids, epoch shuffles draw from per-(stage, epoch) RNG
//! streams, and checkpoints print floats in shortest round-trip form — so a
//! rerun reproduces checkpoints and metrics byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{sigmoid, ParameterStore, StoreError};
use crate::data::{simulate_cohort, Cohort, DataError, SimManifest, SimSpec};
use crate::dsl::RuleSet;
use crate::optim::{AdamState, OptimError};
use crate::perception::{
    ce_grad_logits, class_weights, cross_entropy, softmax, MlpModel, PatientSample,
};
use crate::reasoner::{adjust, adjust_with_grad, register_balance};
use crate::stats::{auc, confusion_metrics, SeedMetrics, StatsError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sample `{0}` has no label")]
    MissingLabel(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint line {line}: {reason}")]
    CheckpointFormat { line: usize, reason: String },
    #[error("checkpoint is stage {found}, expected stage {expected}")]
    StageMismatch { expected: u8, found: u8 },
    #[error("checkpoint parameter `{0}` does not exist in this configuration")]
    UnknownCheckpointParam(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Learning-rate multiplier applied every `lr_step_epochs`.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    /// Weight the loss by inverse class frequency of the training split.
    pub class_weighting: bool,
    /// Keep the balance weight at its initial value during stage 2.
    pub freeze_balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr_stage1: 1e-4,
            lr_stage2: 1e-5,
            lr_decay: 0.5,
            lr_step_epochs: 10,
            class_weighting: true,
            freeze_balance: false,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic ~80/20 split keyed on record ids, so membership survives
/// reordering, resimulation, and round trips through disk.
pub fn split_cohort(cohort: &Cohort) -> (Vec<&PatientSample>, Vec<&PatientSample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for sample in &cohort.samples {
        if fnv1a_64(sample.record.id.as_bytes()) % 5 == 0 {
            val.push(sample);
        } else {
            train.push(sample);
        }
    }
    (train, val)
}

fn epoch_rng(seed: u64, stage: u8, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 48) | (epoch as u64 + 1));
    rng
}

fn required_labels(samples: &[&PatientSample]) -> Result<Vec<u8>, TrainError> {
    samples
        .iter()
        .map(|s| s.record.label.ok_or_else(|| TrainError::MissingLabel(s.record.id.clone())))
        .collect()
}

pub const CHECKPOINT_HEADER: &str = "nsad-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub value: f64,
    pub bounds: Option<(f64, f64)>,
    pub frozen: bool,
}

/// Plain-text snapshot of every parameter after a training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub stage: u8,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store(seed: u64, stage: u8, store: &ParameterStore) -> Self {
        let mut entries: Vec<CheckpointEntry> = store
            .iter()
            .map(|(name, e)| CheckpointEntry {
                name: name.to_string(),
                value: e.value,
                bounds: e.bounds,
                frozen: e.frozen,
            })
            .collect();
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        Checkpoint { seed, stage, entries }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_HEADER}\nseed {}\nstage {}\n", self.seed, self.stage);
        for e in &self.entries {
            out.push_str(&format!("param {} {}", e.name, e.value));
            if let Some((lo, hi)) = e.bounds {
                out.push_str(&format!(" {lo} {hi}"));
            }
            if e.frozen {
                out.push_str(" frozen");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let bad = |line: usize, reason: String| TrainError::CheckpointFormat { line, reason };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (n, header) = lines.next().ok_or_else(|| bad(1, "empty file".to_string()))?;
        if header.trim_end() != CHECKPOINT_HEADER {
            return Err(bad(n, format!("unsupported header `{header}`")));
        }
        let (n, seed_line) = lines.next().ok_or_else(|| bad(2, "missing seed".to_string()))?;
        let seed = seed_line
            .strip_prefix("seed ")
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| bad(n, format!("expected `seed <n>`, got `{seed_line}`")))?;
        let (n, stage_line) = lines.next().ok_or_else(|| bad(3, "missing stage".to_string()))?;
        let stage = match stage_line.strip_prefix("stage ").map(str::trim) {
            Some("1") => 1,
            Some("2") => 2,
            _ => return Err(bad(n, format!("expected `stage <1|2>`, got `{stage_line}`"))),
        };
        let mut entries = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.first() != Some(&"param") || tokens.len() < 3 {
                return Err(bad(n, format!("expected `param <name> <value> ...`, got `{line}`")));
            }
            let name = tokens[1].to_string();
            let frozen = tokens.last() == Some(&"frozen");
            let numbers = &tokens[2..tokens.len() - usize::from(frozen)];
            let parse_num = |s: &str| {
                s.parse::<f64>().map_err(|_| bad(n, format!("`{s}` is not a number")))
            };
            let (value, bounds) = match numbers {
                [v] => (parse_num(v)?, None),
                [v, lo, hi] => (parse_num(v)?, Some((parse_num(lo)?, parse_num(hi)?))),
                _ => return Err(bad(n, format!("wrong number of fields in `{line}`"))),
            };
            if !value.is_finite() {
                return Err(bad(n, format!("non-finite value for `{name}`")));
            }
            entries.push(CheckpointEntry { name, value, bounds, frozen });
        }
        Ok(Checkpoint { seed, stage, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Writes the stored values into `store`. Every checkpoint entry must
    /// name an existing parameter; store parameters the checkpoint does not
    /// mention keep their current values.
    pub fn restore(&self, store: &mut ParameterStore) -> Result<(), TrainError> {
        for e in &self.entries {
            if store.get(&e.name).is_none() {
                return Err(TrainError::UnknownCheckpointParam(e.name.clone()));
            }
        }
        for e in &self.entries {
            store.set(&e.name, e.value)?;
        }
        Ok(())
    }
}

/// Outcome of one training stage.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Mean weighted cross-entropy over the training split, per epoch.
    pub epoch_losses: Vec<f64>,
    pub store: ParameterStore,
    pub model: MlpModel,
}

/// Mean weighted loss over `samples` and its gradient for every unfrozen
/// parameter the batch touches. With `rules` present the loss is taken on
/// the adjusted logits; the adjustment is identity in the raw logits, so the
/// network gradient is the same chain either way.
fn batch_gradients(
    model: &MlpModel,
    rules: Option<&RuleSet>,
    samples: &[&PatientSample],
    labels: &[u8],
    store: &ParameterStore,
    cw: (f64, f64),
) -> (f64, BTreeMap<String, f64>) {
    let weights = model.snapshot(store);
    let mut dense = model.zero_grads();
    let mut grads: BTreeMap<String, f64> = BTreeMap::new();
    let mut outputs = Vec::with_capacity(samples.len());
    let inv = 1.0 / samples.len() as f64;
    for (sample, &label) in samples.iter().zip(labels) {
        let trace = model.forward_trace(&weights, &sample.imaging_features);
        let y = trace.logits();
        let out = match rules {
            Some(rs) => {
                let (adjustment, sym_grads) = adjust_with_grad(rs, &sample.record, y, store);
                let o = adjustment.output_logits;
                let w_lab = if label == 0 { cw.0 } else { cw.1 };
                let (d_cn, d_ad) = ce_grad_logits(o, label, w_lab);
                let (d_cn, d_ad) = (d_cn * inv, d_ad * inv);
                for (name, (g_cn, g_ad)) in &sym_grads {
                    *grads.entry(name.clone()).or_insert(0.0) += d_cn * g_cn + d_ad * g_ad;
                }
                model.backward_trace(&weights, &trace, (d_cn, d_ad), &mut dense);
                o
            }
            None => {
                let w_lab = if label == 0 { cw.0 } else { cw.1 };
                let (d_cn, d_ad) = ce_grad_logits(y, label, w_lab);
                model.backward_trace(&weights, &trace, (d_cn * inv, d_ad * inv), &mut dense);
                y
            }
        };
        outputs.push((softmax(out), label));
    }
    let loss = cross_entropy(&outputs, cw);
    model.grads_to_map(&dense, &mut grads);
    (loss, grads)
}

fn run_stage(
    model: &MlpModel,
    rules: Option<&RuleSet>,
    train: &[&PatientSample],
    labels: &[u8],
    store: &mut ParameterStore,
    config: &TrainConfig,
    seed: u64,
    stage: u8,
    lr0: f64,
) -> Result<Vec<f64>, TrainError> {
    let cw = if config.class_weighting {
        class_weights(labels.iter().copied())
    } else {
        (1.0, 1.0)
    };
    let mut adam = AdamState::new(lr0, config.lr_decay, config.lr_step_epochs);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = adam.scheduled_lr(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(seed, stage, epoch));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PatientSample> = chunk.iter().map(|&i| train[i]).collect();
            let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = batch_gradients(model, rules, &batch, &batch_labels, store, cw);
            total += loss * chunk.len() as f64;
            adam.adam_step(&grads, store, lr)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    Ok(epoch_losses)
}

/// Stage 1: fits the imaging network alone on the training split.
pub fn pretrain(cohort: &Cohort, config: &TrainConfig, seed: u64) -> Result<TrainRun, TrainError> {
    let (train, _) = split_cohort(cohort);
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    let labels = required_labels(&train)?;
    let model = MlpModel::default_for_input(cohort.imaging_dim());
    let mut store = ParameterStore::new();
    model.register_params(&mut store, seed)?;
    let epoch_losses =
        run_stage(&model, None, &train, &labels, &mut store, config, seed, 1, config.lr_stage1)?;
    Ok(TrainRun { checkpoint: Checkpoint::from_store(seed, 1, &store), epoch_losses, store, model })
}

/// Stage 2: restores a stage-1 checkpoint, then trains the network, rule
/// parameters, and balance weight jointly at the lower learning rate.
pub fn train_joint(
    cohort: &Cohort,
    rules: &RuleSet,
    config: &TrainConfig,
    seed: u64,
    base: &Checkpoint,
) -> Result<TrainRun, TrainError> {
    if base.stage != 1 {
        return Err(TrainError::StageMismatch { expected: 1, found: base.stage });
    }
    let (train, _) = split_cohort(cohort);
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    let labels = required_labels(&train)?;
    let model = MlpModel::default_for_input(cohort.imaging_dim());
    let mut store = ParameterStore::new();
    model.register_params(&mut store, seed)?;
    store.register_rule_params(rules)?;
    register_balance(&mut store, config.freeze_balance)?;
    base.restore(&mut store)?;
    let epoch_losses = run_stage(
        &model,
        Some(rules),
        &train,
        &labels,
        &mut store,
        config,
        seed,
        2,
        config.lr_stage2,
    )?;
    Ok(TrainRun { checkpoint: Checkpoint::from_store(seed, 2, &store), epoch_losses, store, model })
}

/// Predictions, labels, and disease-probability scores for a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub preds: Vec<u8>,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

/// Scores samples with the network, optionally refined by the rules. The
/// prediction is the adjusted argmax (ties resolve to the normal class);
/// the score is the disease-class probability.
pub fn evaluate_samples(
    model: &MlpModel,
    rules: Option<&RuleSet>,
    samples: &[&PatientSample],
    store: &ParameterStore,
) -> Result<EvalOutcome, TrainError> {
    let weights = model.snapshot(store);
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len());
    for sample in samples {
        let label = sample
            .record
            .label
            .ok_or_else(|| TrainError::MissingLabel(sample.record.id.clone()))?;
        let y = model.forward_dense(&weights, &sample.imaging_features);
        let out = match rules {
            Some(rs) => adjust(rs, &sample.record, y, store).output_logits,
            None => y,
        };
        preds.push((out.ad > out.cn) as u8);
        labels.push(label);
        scores.push(sigmoid(out.ad - out.cn));
    }
    Ok(EvalOutcome { preds, labels, scores })
}

pub fn outcome_metrics(seed: u64, outcome: &EvalOutcome) -> Result<SeedMetrics, StatsError> {
    let cm = confusion_metrics(&outcome.preds, &outcome.labels)?;
    Ok(SeedMetrics {
        seed,
        accuracy: cm.accuracy,
        precision: cm.precision,
        recall: cm.recall,
        f1: cm.f1,
        auc: auc(&outcome.scores, &outcome.labels)?,
    })
}

/// One seed of the simulate → pretrain → joint-train pipeline: held-out
/// metrics for the stage-1 network alone (`base`) and the full model
/// (`ours`), evaluated on the same validation split.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub manifest: SimManifest,
    pub base: SeedMetrics,
    pub ours: SeedMetrics,
}

pub fn seed_family_comparison(
    spec: &SimSpec,
    rules: &RuleSet,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<SeedRun>, TrainError> {
    seeds
        .iter()
        .map(|&seed| {
            let (cohort, manifest) = simulate_cohort(spec, rules, seed)?;
            let (_, val) = split_cohort(&cohort);
            if val.is_empty() {
                return Err(TrainError::EmptySplit("validation"));
            }
            let stage1 = pretrain(&cohort, config, seed)?;
            let base =
                outcome_metrics(seed, &evaluate_samples(&stage1.model, None, &val, &stage1.store)?)?;
            let stage2 = train_joint(&cohort, rules, config, seed, &stage1.checkpoint)?;
            let ours = outcome_metrics(
                seed,
                &evaluate_samples(&stage2.model, Some(rules), &val, &stage2.store)?,
            )?;
            Ok(SeedRun { seed, manifest, base, ours })
        })
        .collect()
}
