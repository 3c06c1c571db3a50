//! Mini-batch SGD with exponential learning-rate decay and early stopping,
//! and the R-AED localization metric.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{axis_loss, LossConfig};
use crate::net::{self, HeadOutput, NetConfig, NetParams};
use crate::seeding::derive_seed;
use crate::synth::{CoordLabel, Sample};

/// Initial learning rate for the small backbone in [`crate::net`].
///
/// `TrainConfig::default()` keeps 0.01, which diverges here: sum-reduced
/// logits grow with the image side, so the effective step is far larger
/// than on a normalized backbone.
pub const DESK_LR0: f64 = 1e-4;

/// Which loss early stopping watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    Val,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Seeds parameter initialization and per-epoch shuffling.
    pub seed: u64,
    /// Fraction of the dataset (taken from the end) held out for validation.
    pub val_fraction: f64,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::sce(),
            batch_size: 8,
            lr0: 0.01,
            decay_steps: 400,
            decay_rate: 0.9,
            max_epochs: 1000,
            patience: 100,
            seed: 0,
            val_fraction: 0.2,
            monitor: Monitor::Val,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.loss.validate()?;
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad(format!(
                "patience {} must lie in [1, max epochs {}]",
                self.patience, self.max_epochs
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!(
                "validation fraction {} must lie in (0, 1)",
                self.val_fraction
            ));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad(format!("learning rate {} must be non-negative", self.lr0));
        }
        if self.decay_steps == 0 || !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!(
                "decay steps {} / rate {} invalid",
                self.decay_steps, self.decay_rate
            ));
        }
        Ok(())
    }
}

/// `lr0 * rate^(step / decay_steps)` with a continuous exponent.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_rate.powf(step as f64 / cfg.decay_steps as f64)
}

fn distance(p: (f64, f64), q: (f64, f64)) -> f64 {
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Reciprocal of the average Euclidean distance plus 0.1.
pub fn r_aed(preds: &[(f64, f64)], gts: &[(f64, f64)]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions"));
    }
    let total: f64 = preds.iter().zip(gts).map(|(&p, &q)| distance(p, q)).sum();
    Ok(1.0 / (total / preds.len() as f64 + 0.1))
}

/// Tracks the best monitored loss and how long it has gone unimproved.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    stale: usize,
}

/// Outcome of feeding one epoch's loss to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Only a strictly lower loss counts as an improvement.
    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_r_aed: Option<f64>,
    /// Learning rate for the next step after this epoch.
    pub lr: f64,
}

/// Training telemetry. Equality ignores `wall_time_secs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub test_r_aed: Option<f64>,
    pub wall_time_secs: f64,
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.stopped_early == other.stopped_early
            && self.test_r_aed == other.test_r_aed
    }
}

impl RunRecord {
    pub fn last_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Per-epoch table; missing validation values are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["epoch", "train_loss", "val_loss", "val_r_aed", "lr"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                opt(e.val_loss),
                opt(e.val_r_aed),
                e.lr.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

fn head_of(params: &NetParams, featmap: &crate::tensor::Tensor) -> Result<HeadOutput> {
    let h = &params.config.head;
    net::head(featmap, h.pool, h.reduce, h.scales)
}

/// Total loss of one sample (x-axis plus y-axis) and its parameter gradient.
pub fn sample_loss_grad(
    params: &NetParams,
    sample: &Sample,
    loss: &LossConfig,
) -> Result<(f64, NetParams)> {
    let (featmap, cache) = net::forward(params, &sample.image)?;
    let out = head_of(params, &featmap)?;
    let s = params.config.input_size;
    let lx = axis_loss(loss, &out.x, sample.label.class_x(s))?;
    let ly = axis_loss(loss, &out.y, sample.label.class_y(s))?;
    let upstream = HeadOutput {
        x: lx.grads,
        y: ly.grads,
    };
    let grads = net::backward(params, &cache, &upstream)?;
    Ok((lx.loss + ly.loss, grads))
}

/// Total loss and normalized prediction for one sample, without gradients.
pub fn sample_loss(
    params: &NetParams,
    sample: &Sample,
    loss: &LossConfig,
) -> Result<(f64, (f64, f64))> {
    let (featmap, _) = net::forward(params, &sample.image)?;
    let out = head_of(params, &featmap)?;
    let s = params.config.input_size;
    let lx = axis_loss(loss, &out.x, sample.label.class_x(s))?.loss;
    let ly = axis_loss(loss, &out.y, sample.label.class_y(s))?.loss;
    Ok((lx + ly, net::predict(&out)?))
}

fn label_pair(l: &CoordLabel) -> (f64, f64) {
    (l.x, l.y)
}

/// Mean loss and R-AED over `samples`.
fn validate_split(params: &NetParams, samples: &[Sample], loss: &LossConfig) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let (l, p) = sample_loss(params, s, loss)?;
        total += l;
        preds.push(p);
    }
    let gts: Vec<_> = samples.iter().map(|s| label_pair(&s.label)).collect();
    Ok((total / samples.len() as f64, r_aed(&preds, &gts)?))
}

fn check_compatible(net_cfg: &NetConfig, cfg: &TrainConfig, samples: &[Sample]) -> Result<()> {
    net_cfg.validate()?;
    cfg.validate()?;
    if net_cfg.head.scales < cfg.loss.scales() {
        return Err(Error::InvalidConfig(format!(
            "loss needs {} scales, head has {}",
            cfg.loss.scales(),
            net_cfg.head.scales
        )));
    }
    let s = net_cfg.input_size;
    if let Some(bad) = samples
        .iter()
        .find(|x| x.image.shape() != [net_cfg.in_channels, s, s])
    {
        return Err(Error::Shape(format!(
            "sample image {:?} does not fit a {s}px network",
            bad.image.shape()
        )));
    }
    Ok(())
}

/// [`train_with`] without a progress callback.
pub fn train(
    samples: &[Sample],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<(NetParams, RunRecord)> {
    train_with(samples, net_cfg, cfg, |_| {})
}

/// Trains a freshly initialized network on `samples`.
///
/// The last `floor(N * val_fraction)` samples form the validation split.
/// When that split is empty the training loss is monitored instead. The
/// returned parameters are those of the best monitored epoch.
pub fn train_with(
    samples: &[Sample],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NetParams, RunRecord)> {
    check_compatible(net_cfg, cfg, samples)?;
    if samples.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "{} samples are fewer than batch size {}",
            samples.len(),
            cfg.batch_size
        )));
    }
    let started = Instant::now();
    let n_val = (samples.len() as f64 * cfg.val_fraction).floor() as usize;
    let (train_set, val_set) = samples.split_at(samples.len() - n_val);
    let monitor = if val_set.is_empty() {
        Monitor::Train
    } else {
        cfg.monitor
    };

    let mut params = net::init(net_cfg, cfg.seed)?;
    let mut best = params.clone();
    let mut stopping = EarlyStopping::new(cfg.patience);
    let mut stopped_early = false;
    let mut step: u64 = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = SplitMix64::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (l, g) = sample_loss_grad(&params, &train_set[i], &cfg.loss)?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: step as usize,
                        loss: l,
                    });
                }
                batch_loss += l;
                grad.axpy(1.0, &g)?;
            }
            epoch_loss += batch_loss;
            let lr = lr_at(step, cfg);
            params.axpy(-lr / batch.len() as f64, &grad)?;
            step += 1;
        }
        let train_loss = epoch_loss / train_set.len() as f64;

        let (val_loss, val_r_aed) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, r) = validate_split(&params, val_set, &cfg.loss)?;
            (Some(l), Some(r))
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_r_aed,
            lr: lr_at(step, cfg),
        };
        on_epoch(&record);
        epochs.push(record);

        let watched = match monitor {
            Monitor::Val => val_loss.expect("validation split is non-empty"),
            Monitor::Train => train_loss,
        };
        if !watched.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                loss: watched,
            });
        }
        match stopping.update(epoch, watched) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    let record = RunRecord {
        epochs,
        best_epoch: stopping.best_epoch(),
        stopped_early,
        test_r_aed: None,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub r_aed: f64,
    pub predictions: Vec<(f64, f64)>,
    pub distances: Vec<f64>,
}

/// Predicts every sample and scores the predictions with [`r_aed`].
pub fn evaluate(params: &NetParams, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty"));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut distances = Vec::with_capacity(samples.len());
    for s in samples {
        let (featmap, _) = net::forward(params, &s.image)?;
        let p = net::predict(&head_of(params, &featmap)?)?;
        distances.push(distance(p, label_pair(&s.label)));
        predictions.push(p);
    }
    let gts: Vec<_> = samples.iter().map(|s| label_pair(&s.label)).collect();
    Ok(Evaluation {
        r_aed: r_aed(&predictions, &gts)?,
        predictions,
        distances,
    })
}
