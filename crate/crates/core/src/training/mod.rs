//! Optimization loops: training from scratch, masked pretraining, and
//! transfer by linear probing followed by fine-tuning.

mod adam;
mod checkpoint;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{clip_grad_norm, Adam};
pub use checkpoint::{params_hash, Checkpoint, Stage, BLOB_FILE, MANIFEST_FILE};

use crate::baselines::Baseline;
use crate::dataset::{fit_norm, Batch, NormStats, WindowIndex, WindowSource};
use crate::error::{FdnError, Result};
use crate::model::{FdnModel, Loss, ModelConfig, MODALITIES, Q0_ENCODER};
use crate::tape::{Graph, ParamStore};

/// Default iteration budget of masked pretraining.
pub const PRETRAIN_STEPS: usize = 100_000;
/// Default window stride over the pretraining corpus.
pub const PRETRAIN_STRIDE: usize = 10;

/// Name prefixes of the parameters carried over from pretraining.
pub fn transferred_prefixes() -> Vec<String> {
    MODALITIES[..3]
        .iter()
        .map(|m| format!("{m}."))
        .chain(std::iter::once(format!("{Q0_ENCODER}.")))
        .collect()
}

fn is_transferred(name: &str) -> bool {
    transferred_prefixes().iter().any(|p| name.starts_with(p.as_str()))
}

/// A model the training loop can optimize.
pub trait Trainable {
    /// `fdn` or the baseline name, as written to checkpoints.
    fn kind(&self) -> String;
    fn model_config(&self) -> &ModelConfig;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn norm(&self) -> &NormStats;
    fn set_norm(&mut self, norm: NormStats);
    fn batch_loss(&self, g: &mut Graph, batch: &Batch) -> Result<Loss>;

    fn checkpoint(&self, stage: Stage, seed: u64, steps: usize) -> Checkpoint {
        Checkpoint::new(&self.kind(), stage, seed, steps, self.model_config(), self.norm(), self.store())
    }
}

impl Trainable for FdnModel {
    fn kind(&self) -> String {
        "fdn".into()
    }
    fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn norm(&self) -> &NormStats {
        &self.norm
    }
    fn set_norm(&mut self, norm: NormStats) {
        self.norm = norm;
    }
    fn batch_loss(&self, g: &mut Graph, batch: &Batch) -> Result<Loss> {
        FdnModel::batch_loss(self, g, batch)
    }
}

impl Trainable for Baseline {
    fn kind(&self) -> String {
        self.kind.name().into()
    }
    fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn norm(&self) -> &NormStats {
        &self.norm
    }
    fn set_norm(&mut self, norm: NormStats) {
        self.norm = norm;
    }
    fn batch_loss(&self, g: &mut Graph, batch: &Batch) -> Result<Loss> {
        Baseline::batch_loss(self, g, batch)
    }
}

impl Checkpoint {
    /// Fails unless the stored configuration equals `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if &self.cfg != cfg {
            let ours: Vec<_> = self.cfg.to_pairs();
            let diff: Vec<String> = cfg
                .to_pairs()
                .into_iter()
                .zip(ours)
                .filter(|(a, b)| a != b)
                .map(|((k, want), (_, have))| format!("{k}: checkpoint {have}, requested {want}"))
                .collect();
            return Err(FdnError::Checkpoint(format!("config mismatch ({})", diff.join("; "))));
        }
        Ok(())
    }

    /// Rebuilds the main network stored in this checkpoint.
    pub fn to_fdn(&self) -> Result<FdnModel> {
        if self.kind != "fdn" {
            return Err(FdnError::Checkpoint(format!("checkpoint holds `{}`, not `fdn`", self.kind)));
        }
        let mut m = FdnModel::new(self.cfg.clone(), self.seed)?;
        self.restore_into(&mut m.store)?;
        m.norm = self.norm.clone();
        Ok(m)
    }

    /// Rebuilds the baseline stored in this checkpoint.
    pub fn to_baseline(&self) -> Result<Baseline> {
        let kind = self.kind.parse()?;
        let mut m = Baseline::new(kind, self.cfg.clone(), self.seed)?;
        self.restore_into(&mut m.store)?;
        m.norm = self.norm.clone();
        Ok(m)
    }
}

/// Optimization settings of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub stage: Stage,
    /// Fixed iteration budget; overrides `epochs` when set.
    pub max_steps: Option<usize>,
    /// Gradient-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, epochs: 5, lr: 1e-3, seed: 0, stage: Stage::Scratch, max_steps: None, clip: Some(5.0) }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FdnError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FdnError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(FdnError::Config(format!("clip threshold must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Total optimizer steps over `windows` training windows.
    pub fn total_steps(&self, windows: usize) -> usize {
        self.max_steps.unwrap_or_else(|| self.epochs * windows.div_ceil(self.batch_size))
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub trend: f64,
    pub res: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.history.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.total)
    }

    /// Mean total loss over the last `k` steps.
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let k = k.min(self.history.len());
        (k > 0).then(|| self.history[self.history.len() - k..].iter().map(|r| r.total).sum::<f64>() / k as f64)
    }
}

struct StepLog(Option<std::fs::File>);

impl StepLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self(None)) };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if f.metadata()?.len() == 0 {
            writeln!(f, "step,total,trend,res,wall_s")?;
        }
        Ok(Self(Some(f)))
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        if let Some(f) = &mut self.0 {
            writeln!(f, "{},{},{},{},{:.6}", r.step, r.total, r.trend, r.res, r.wall_s)?;
        }
        Ok(())
    }
}

/// Optimizes `model` with Adam on the given windows, normalized with the
/// model's statistics. Batches are drawn from a seed-determined reshuffle of
/// the windows every pass. On a non-finite loss the update is skipped and the
/// error returned, so the parameters stay at the last good step. Each step is
/// appended to `log` as CSV when given.
pub fn train<M: Trainable>(
    model: &mut M,
    source: &WindowSource,
    indices: &[WindowIndex],
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let total = cfg.total_steps(indices.len());
    let mut report = TrainReport::default();
    if total == 0 {
        return Ok(report);
    }
    if indices.is_empty() {
        return Err(FdnError::Invalid("no training windows".into()));
    }
    let mut out = StepLog::open(log)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = indices.to_vec();
    let mut cursor = order.len();
    let mut adam = Adam::new(model.store(), cfg.lr);
    let start = Instant::now();
    for step in 0..total {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = source.batch(&order[cursor..end], model.norm());
        cursor = end;

        let mut grads = {
            let mut g = Graph::new(model.store());
            let loss = model.batch_loss(&mut g, &batch)?;
            loss.check(step)?;
            let grads = g.backward(loss.total).into_param_grads();
            let rec =
                StepRecord { step, total: loss.value(), trend: loss.trend, res: loss.res, wall_s: start.elapsed().as_secs_f64() };
            out.write(&rec)?;
            report.history.push(rec);
            grads
        };
        if let Some(max) = cfg.clip {
            let norm = clip_grad_norm(&mut grads, max);
            if !norm.is_finite() {
                return Err(FdnError::NonFiniteLoss { step, component: "gradient" });
            }
        }
        adam.step(model.store_mut(), &grads);
    }
    log::info!(
        "{} {}: {} steps, final loss {:.5}",
        model.kind(),
        cfg.stage,
        report.steps(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    Ok(report)
}

/// Mean loss over windows without updating anything, weighted by batch size.
pub fn mean_loss<M: Trainable>(model: &M, source: &WindowSource, indices: &[WindowIndex], batch_size: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(FdnError::Invalid("no validation windows".into()));
    }
    let mut sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = source.batch(chunk, model.norm());
        let mut g = Graph::new(model.store());
        sum += model.batch_loss(&mut g, &batch)?.value() * chunk.len() as f64;
    }
    Ok(sum / indices.len() as f64)
}

/// Keeps the windows of the first `percent`% of episodes (at least one) in a
/// seed-determined episode order.
pub fn data_subset(indices: &[WindowIndex], percent: f64, seed: u64) -> Result<Vec<WindowIndex>> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(FdnError::Config(format!("data utilization must be in (0, 100], got {percent}")));
    }
    let mut episodes: Vec<usize> = indices.iter().map(|w| w.episode).collect();
    episodes.sort_unstable();
    episodes.dedup();
    episodes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((episodes.len() as f64 * percent / 100.0).round() as usize).clamp(1, episodes.len().max(1));
    let kept: std::collections::HashSet<usize> = episodes[..keep.min(episodes.len())].iter().copied().collect();
    Ok(indices.iter().filter(|w| kept.contains(&w.episode)).copied().collect())
}

/// Fits statistics on the training windows, then trains a fresh model.
pub fn train_scratch(
    model_cfg: &ModelConfig,
    source: &WindowSource,
    indices: &[WindowIndex],
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<(FdnModel, TrainReport)> {
    let mut model = FdnModel::new(model_cfg.clone(), cfg.seed)?;
    model.norm = fit_norm(source, indices, model_cfg.mask_u)?;
    let report = train(&mut model, source, indices, cfg, log)?;
    Ok((model, report))
}

/// Masked pretraining on a surrogate corpus: the actuation rows are hidden
/// and their encoder frozen. `model_cfg.mask_u` must be set.
pub fn pretrain(
    model_cfg: &ModelConfig,
    source: &WindowSource,
    indices: &[WindowIndex],
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<(FdnModel, TrainReport)> {
    if !model_cfg.mask_u {
        return Err(FdnError::Config("pretraining requires mask_u".into()));
    }
    if indices.is_empty() {
        return Err(FdnError::Invalid("pretraining corpus has no windows".into()));
    }
    let cfg = TrainConfig { stage: Stage::Pretrain, ..cfg.clone() };
    train_scratch(model_cfg, source, indices, &cfg, log)
}

/// Result of a transfer run: the linear-probe model and the fine-tuned model
/// that continued from it.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub probe: FdnModel,
    pub probe_report: TrainReport,
    pub fine: FdnModel,
    pub fine_report: TrainReport,
}

/// Initializes a downstream model from a pretraining checkpoint, trains it
/// with the transferred joint encoders and `q0` encoder frozen, then unfreezes
/// everything and keeps training. `model_cfg` is the downstream configuration
/// and must agree with the pretraining one except for `mask_u`.
pub fn transfer(
    pretrained: &Checkpoint,
    model_cfg: &ModelConfig,
    source: &WindowSource,
    indices: &[WindowIndex],
    probe_cfg: &TrainConfig,
    fine_cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<TransferOutcome> {
    if pretrained.stage != Stage::Pretrain {
        return Err(FdnError::Checkpoint(format!("transfer needs a pretraining checkpoint, got stage {}", pretrained.stage)));
    }
    if pretrained.kind != "fdn" {
        return Err(FdnError::Checkpoint(format!("transfer needs an fdn checkpoint, got `{}`", pretrained.kind)));
    }
    pretrained.check_config(&ModelConfig { mask_u: true, ..model_cfg.clone() })?;
    let mut probe = FdnModel::new(model_cfg.clone(), probe_cfg.seed)?;
    let copied = pretrained.copy_matching(&mut probe.store, is_transferred)?;
    if copied == 0 {
        return Err(FdnError::Checkpoint("pretraining checkpoint has no transferable parameters".into()));
    }
    probe.norm = NormStats::for_transfer(&pretrained.norm, &fit_norm(source, indices, false)?)?;

    let prefixes = transferred_prefixes();
    let prefixes: Vec<&str> = prefixes.iter().map(String::as_str).collect();
    probe.store.set_trainable_prefix(&prefixes, false);
    let probe_cfg = TrainConfig { stage: Stage::LinearProbe, ..probe_cfg.clone() };
    let probe_report = train(&mut probe, source, indices, &probe_cfg, log)?;

    let mut fine = probe.clone();
    fine.store.set_all_trainable(true);
    let fine_cfg = TrainConfig { stage: Stage::FineTune, ..fine_cfg.clone() };
    let fine_report = train(&mut fine, source, indices, &fine_cfg, log)?;
    Ok(TransferOutcome { probe, probe_report, fine, fine_report })
}

#[cfg(test)]
mod tests;
