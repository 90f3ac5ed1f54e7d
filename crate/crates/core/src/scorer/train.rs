use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{EncodedExample, ModelConfig, Params, ScorerModel};
use crate::baselines::ScoreVector;
use crate::binning::{BinMode, StreamBinning, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::records::{Dataset, StreamMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub k: usize,
    pub bin_mode: BinMode,
    /// One set of quantile bins for all streams instead of one per stream.
    pub shared_bins: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Adam,
            k: DEFAULT_BINS,
            bin_mode: BinMode::Quantile,
            shared_bins: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

impl ScorerModel {
    /// Fits the binning and vocabulary on `train` and initializes the
    /// parameters from `cfg.seed`.
    pub fn build(train: &Dataset, mask: StreamMask, cfg: &TrainConfig) -> Result<Self> {
        let bins = StreamBinning::fit(train, cfg.k, cfg.bin_mode, cfg.shared_bins)?;
        Self::with_bins(train, bins, mask, cfg.model.clone(), cfg.seed)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Params,
    v: Params,
    step: i32,
}

impl Adam {
    fn new(params: &Params) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Params, grad: &Params, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auroc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned (1-based).
    pub best_epoch: Option<usize>,
    pub skipped_train: Vec<String>,
    pub skipped_val: Vec<String>,
}

/// Encodes every labeled record the model can read; the rest are returned
/// as skipped ids.
pub fn encode_dataset(
    model: &ScorerModel,
    d: &Dataset,
) -> Result<(Vec<EncodedExample>, Vec<String>)> {
    let encoded: Vec<(String, Result<Option<EncodedExample>>)> = d
        .records
        .par_iter()
        .map(|rec| {
            let res = match rec.resolved_label() {
                Some(label) => model.encode_record(rec, label).map(Some),
                None => Ok(None),
            };
            (rec.id.clone(), res)
        })
        .collect();
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (id, res) in encoded {
        match res {
            Ok(Some(ex)) => out.push(ex),
            Ok(None) => skipped.push(id),
            Err(e @ (Error::Missing { .. } | Error::Validation { .. })) => {
                log::debug!("skipping record: {e}");
                skipped.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}

fn validation_metrics(
    model: &ScorerModel,
    val: &[EncodedExample],
) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let loss = model.loss(val)?;
    let scores: Vec<f64> = val
        .par_iter()
        .map(|ex| model.logit_ids(&ex.ids))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = val.iter().map(|ex| ex.label).collect();
    let auc = match auroc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedAuroc(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((Some(loss), auc))
}

/// Mini-batch training on binary cross-entropy. Returns the parameters of
/// the epoch with the best validation AUROC (falling back to validation
/// loss, then to the last epoch) together with the per-epoch log.
pub fn train(
    mut model: ScorerModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ScorerModel, TrainingLog)> {
    cfg.validate()?;
    let (train_ex, skipped_train) = encode_dataset(&model, train)?;
    let (val_ex, skipped_val) = encode_dataset(&model, val)?;
    let mut log = TrainingLog {
        skipped_train,
        skipped_val,
        ..TrainingLog::default()
    };
    if train_ex.is_empty() {
        return Err(Error::invalid("no labeled training records"));
    }
    let positives = train_ex.iter().filter(|e| e.label == 1).count();
    if positives == 0 || positives == train_ex.len() {
        log::warn!(
            "training labels are all {}; validation AUROC is undefined",
            train_ex[0].label
        );
    }
    if cfg.epochs == 0 {
        return Ok((model, log));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut best: Option<(f64, f64, Params, usize)> = None;
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_ex[i].clone()));
            let (loss, grad) = model.loss_and_gradient(&batch)?;
            loss_sum += loss * batch.len() as f64;
            match cfg.optimizer {
                Optimizer::Adam => adam.update(&mut model.params, &grad, cfg.lr),
                Optimizer::Sgd => {
                    for (p, g) in model.params.tensors_mut().into_iter().zip(grad.tensors()) {
                        p.scaled_add(-cfg.lr, g);
                    }
                }
            }
        }
        let (val_loss, val_auroc) = validation_metrics(&model, &val_ex)?;
        log::info!(
            "epoch {epoch}: train loss {:.5}, val loss {:?}, val AUROC {:?}",
            loss_sum / train_ex.len() as f64,
            val_loss,
            val_auroc
        );
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_ex.len() as f64,
            val_loss,
            val_auroc,
        });

        // Rank by AUROC, then by lower loss; earlier epochs win ties.
        let key = (
            val_auroc.unwrap_or(f64::NEG_INFINITY),
            -val_loss.unwrap_or(0.0),
        );
        let better = match &best {
            None => true,
            Some((a, l, _, _)) => key.0 > *a || (key.0 == *a && key.1 > *l),
        };
        if better {
            best = Some((key.0, key.1, model.params.clone(), epoch));
        }
    }

    if let Some((_, _, params, epoch)) = best {
        model.params = params;
        log.best_epoch = Some(epoch);
    }
    Ok((model, log))
}

/// Scores every record with the model. Records that lack a masked-in
/// stream, or whose response does not fit, are listed as skipped.
pub fn score_dataset(model: &ScorerModel, d: &Dataset) -> Result<ScoreVector> {
    let results: Vec<(String, Result<f64>)> = d
        .records
        .par_iter()
        .map(|rec| {
            (
                rec.id.clone(),
                model.input_for(rec).and_then(|seq| model.forward(&seq)),
            )
        })
        .collect();
    let mut out = ScoreVector::new(model.name.clone());
    for (id, res) in results {
        match res {
            Ok(s) => out.scores.push((id, s)),
            Err(e @ (Error::Missing { .. } | Error::Validation { .. })) => {
                log::debug!("{}: {e}; skipped", model.name);
                out.skipped.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
