//! Per-role optimisation with Adam and teacher forcing, validation-based
//! model selection and versioned checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintConfig;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::nn::{clip_grad_norm, mix_seed, Adam, Ctx, RowNoise};
use crate::observation::GateMode;
use crate::policy::{self, LossReport, ModelConfig, PolicyModel, RolloutOptions, Scaler};
use crate::tape::Graph;
use crate::trajectory::{PlaySequence, DEFAULT_BURN_IN, DEFAULT_HORIZON};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Criterion used to pick the best epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMetric {
    /// Mean position L2 of validation rollouts.
    #[default]
    PositionL2,
    /// Teacher-forced validation loss per window.
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub burn_in: usize,
    pub horizon: usize,
    pub select_metric: SelectMetric,
    /// Rollout samples per validation window for [`SelectMetric::PositionL2`].
    pub val_samples: usize,
    pub constraints: ConstraintConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            clip_norm: 10.0,
            seed: 0,
            burn_in: DEFAULT_BURN_IN,
            horizon: DEFAULT_HORIZON,
            select_metric: SelectMetric::PositionL2,
            val_samples: 3,
            constraints: ConstraintConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_samples == 0 {
            return Err(Error::Config("epochs, batch_size and val_samples must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning_rate and clip_norm must be positive".into()));
        }
        self.constraints.validate()?;
        self.model.validate()
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub term: String,
    pub value: f64,
}

/// Snapshot after one epoch. All training randomness is derived from
/// `seed`, `epoch` and window ids, so `(seed, epoch)` is the random state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub model: PolicyModel,
    pub optimizer: Adam,
    pub validation_score: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION || ck.model.version != policy::MODEL_VERSION {
            return Err(Error::Version(ck.version));
        }
        Ok(ck)
    }
}

pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<MetricRow>,
    /// Index into `checkpoints` of the selected epoch.
    pub best: usize,
}

impl TrainOutcome {
    pub fn best_model(&self) -> &PolicyModel {
        &self.checkpoints[self.best].model
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("epoch,split,term,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.term, r.value));
    }
    out
}

fn report_rows(epoch: usize, split: &str, report: &LossReport) -> Vec<MetricRow> {
    report
        .mean()
        .terms()
        .into_iter()
        .map(|(term, value)| MetricRow { epoch, split: split.into(), term, value })
        .collect()
}

/// Teacher-forced loss per window over `windows`, in evaluation mode.
pub fn validation_loss(model: &PolicyModel, windows: &[PlaySequence], constraints: &ConstraintConfig, batch_size: usize, seed: u64) -> Result<LossReport> {
    let mut total = LossReport::default();
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&PlaySequence> = chunk.iter().collect();
        total.add(&model.evaluate_loss(&model.batch(&refs)?, constraints, seed)?);
    }
    Ok(total)
}

/// Mean position L2 of single-role rollouts (other agents replayed).
pub fn validation_l2(model: &PolicyModel, windows: &[PlaySequence], burn_in: usize, horizon: usize, samples: usize, seed: u64) -> Result<f64> {
    let mut sum = 0.0;
    for w in windows {
        let options = RolloutOptions { burn_in, horizon, samples, seed, ..Default::default() };
        let result = policy::rollout(std::slice::from_ref(model), w, &options)?;
        sum += evaluation::rollout_l2(&result, w)?.mean[0];
    }
    Ok(sum / windows.len().max(1) as f64)
}

fn score(model: &PolicyModel, config: &TrainConfig, val: &[PlaySequence], metric: SelectMetric) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    Ok(Some(match metric {
        SelectMetric::PositionL2 => validation_l2(model, val, config.burn_in, config.horizon, config.val_samples, config.seed)?,
        SelectMetric::Loss => {
            let r = validation_loss(model, val, &config.constraints, config.batch_size, config.seed)?;
            r.total / r.rows.max(1) as f64
        }
    }))
}

/// Index of the checkpoint with the lowest score on `val`; ties go to the
/// earliest epoch.
pub fn select_best(checkpoints: &[Checkpoint], val: &[PlaySequence], metric: SelectMetric) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::arg("no checkpoints to select from"));
    }
    let mut best = (0, f64::INFINITY);
    for (i, ck) in checkpoints.iter().enumerate() {
        let s = score(&ck.model, &ck.config, val, metric)?.or(ck.validation_score).unwrap_or(f64::INFINITY);
        if s < best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Earliest index of the minimum of `scores`.
pub fn argmin_earliest(scores: &[f64]) -> Option<usize> {
    scores.iter().enumerate().fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
        Some((_, b)) if s >= b => best,
        _ => Some((i, s)),
    }).map(|b| b.0)
}

/// Trains the policy of defender `role`. Windows must share one length and
/// agent layout. With an empty validation set the last epoch is selected.
pub fn train_policy(config: &TrainConfig, role: usize, train: &[PlaySequence], val: &[PlaySequence]) -> Result<TrainOutcome> {
    config.validate()?;
    let template = train.first().ok_or_else(|| Error::arg("empty training set"))?;
    let scaler = Scaler::fit(train);
    let mut model = PolicyModel::new(config.model.clone(), template, role, scaler, config.seed)?;
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut scores = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_report = LossReport::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&PlaySequence> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = model.batch(&refs)?;
            let keys: Vec<u64> = batch.keys.iter().map(|&k| mix_seed(k, epoch as u64)).collect();
            let g = Graph::new();
            let p = model.params.bind(&g);
            let mut buffers = std::mem::take(&mut model.buffers);
            let mut noise = RowNoise::from_keys(config.seed, &keys);
            let mut cx = Ctx { g: &g, p: &p, train: true, dropout: model.config.dropout, buffers: &mut buffers, noise: &mut noise };
            let loss = model.loss(&mut cx, &batch, &config.constraints, GateMode::Relaxed);
            model.buffers = buffers;
            let loss = loss?;
            if !loss.report.total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    diagnostic: format!("windows {:?}, terms {:?}", batch.ids, loss.report.terms()),
                });
            }
            let residual = loss.report.residual(&config.constraints);
            debug_assert!(residual.abs() <= 1e-6 * loss.report.total.abs().max(1.0), "loss decomposition residual {residual}");
            let scaled = g.scale(loss.total, 1.0 / batch.rows() as f64);
            let grads = g.backward(scaled);
            let mut grads = model.params.grads(&p, &grads);
            clip_grad_norm(&mut grads, config.clip_norm);
            adam.update(&mut model.params, &grads);
            epoch_report.add(&loss.report);
        }
        metrics.extend(report_rows(epoch, "train", &epoch_report));
        if !val.is_empty() {
            let vr = validation_loss(&model, val, &config.constraints, config.batch_size, config.seed)?;
            metrics.extend(report_rows(epoch, "val", &vr));
        }
        let validation_score = score(&model, config, val, config.select_metric)?;
        if let Some(s) = validation_score {
            metrics.push(MetricRow { epoch, split: "val".into(), term: "select_score".into(), value: s });
        }
        log::info!("role {role} epoch {epoch}: train loss {:.4}", epoch_report.total / epoch_report.rows.max(1) as f64);
        scores.push(validation_score.unwrap_or(-(epoch as f64)));
        checkpoints.push(Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch,
            seed: config.seed,
            config: config.clone(),
            model: model.clone(),
            optimizer: adam.clone(),
            validation_score,
        });
    }
    let best = argmin_earliest(&scores).expect("at least one epoch");
    Ok(TrainOutcome { checkpoints, metrics, best })
}

/// Trains every role in `roles`, optionally on parallel threads. Results
/// are returned in `roles` order and do not depend on parallelism.
pub fn train_team(config: &TrainConfig, roles: &[usize], train: &[PlaySequence], val: &[PlaySequence], parallel: bool) -> Result<Vec<TrainOutcome>> {
    if !parallel {
        return roles.iter().map(|&r| train_policy(config, r, train, val)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = roles.iter().map(|&r| s.spawn(move || train_policy(config, r, train, val))).collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn earliest_minimum() {
        assert_eq!(argmin_earliest(&[3.0]), Some(0));
        assert_eq!(argmin_earliest(&[3.0, 2.0, 1.0]), Some(2));
        assert_eq!(argmin_earliest(&[2.0, 1.0, 1.0, 4.0]), Some(1));
        assert_eq!(argmin_earliest(&[]), None);
    }

    #[test]
    fn select_best_rejects_empty() {
        assert!(select_best(&[], &[], SelectMetric::Loss).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.constraints.lambda_pos = -1.0;
        assert!(bad.validate().is_err());
    }
}
