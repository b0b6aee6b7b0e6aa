//! Optimisation loop: Adam with an inverse-sqrt schedule, per-epoch
//! checkpoints and an NDJSON step log.

mod checkpoint;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Graph;
use crate::data::{derive_seed, epoch_batches, Batch, CurriculumDirection, DataConfig, DataError, EncodedCorpus, ParallelCorpus};
use crate::losses::{label_smoothed_nll, total_loss, LossBreakdown, LossConfig, LossError};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::{Scalar, TensorError};
use crate::tokenizer::{TokenizerError, Vocabulary};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use optim::{adam_step, grad_norm, lr_at, AdamHyper, AdamState};

const INIT_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;

pub const LOG_FILE: &str = "train.log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite gradient in {param} at element {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("non-finite loss at step {step} ({direction})")]
    NonFiniteLoss { step: u64, direction: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    /// Padded source tokens per batch (rows × longest framed source).
    pub max_tokens: usize,
    pub n_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when unset.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            warmup_steps: 4000,
            weight_decay: 1e-4,
            dropout_p: 0.3,
            max_tokens: 4096,
            n_epochs: 20,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One NDJSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: usize,
    pub direction: String,
    pub total: f64,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    /// Source plus target tokens, padding excluded.
    pub tokens: usize,
    pub wall_secs: f64,
    pub tokens_per_sec: f64,
}

impl TrainRecord {
    /// The record with its wall-clock fields zeroed; equal across identical runs.
    pub fn without_timing(&self) -> TrainRecord {
        TrainRecord {
            wall_secs: 0.0,
            tokens_per_sec: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub tokens: usize,
    pub wall_secs: f64,
}

/// Model plus optimizer state bound to an encoded training corpus.
pub struct Trainer {
    model: Model<f32>,
    adam: AdamState<f32>,
    meta: CheckpointMeta,
    corpus: EncodedCorpus,
    curriculum: Vec<CurriculumDirection>,
}

fn prepare(corpus: &ParallelCorpus, data: &DataConfig, vocab: &Vocabulary) -> Result<(EncodedCorpus, Vec<CurriculumDirection>), TrainError> {
    let langs = data.select_languages(corpus.languages())?;
    let curriculum = data.curriculum(&langs)?;
    let selected = corpus.select(&langs)?;
    Ok((EncodedCorpus::new(&selected, vocab), curriculum))
}

impl Trainer {
    /// Fresh model. `vocab_size`, `n_languages` and `dropout` of `model` are
    /// taken from the vocabulary, the selected languages and `train.dropout_p`.
    pub fn new(
        model: ModelConfig,
        train: TrainConfig,
        loss: LossConfig,
        data: DataConfig,
        corpus: &ParallelCorpus,
        vocab: &Vocabulary,
    ) -> Result<Self, TrainError> {
        train.validate()?;
        loss.validate()?;
        let (encoded, curriculum) = prepare(corpus, &data, vocab)?;
        let mut model = model;
        model.vocab_size = vocab.len();
        model.n_languages = encoded.languages.len();
        model.dropout = train.dropout_p;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, &[INIT_STREAM]));
        let net = Model::new(model.clone(), &mut rng)?;
        let adam = AdamState::new(net.params());
        let meta = CheckpointMeta {
            step: 0,
            epoch: 0,
            model,
            train,
            loss,
            data,
            languages: encoded.languages.clone(),
            vocab: vocab.to_file_string(),
        };
        Ok(Trainer {
            model: net,
            adam,
            meta,
            corpus: encoded,
            curriculum,
        })
    }

    pub fn resume(ckpt: Checkpoint, corpus: &ParallelCorpus) -> Result<Self, TrainError> {
        let vocab = Vocabulary::parse(&ckpt.meta.vocab)?;
        let (encoded, curriculum) = prepare(corpus, &ckpt.meta.data, &vocab)?;
        if encoded.languages != ckpt.meta.languages {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint languages {:?} differ from corpus selection {:?}",
                ckpt.meta.languages, encoded.languages
            )));
        }
        let model = Model::from_params(ckpt.meta.model.clone(), ckpt.params)?;
        Ok(Trainer {
            model,
            adam: ckpt.adam,
            meta: ckpt.meta,
            corpus: encoded,
            curriculum,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn curriculum(&self) -> &[CurriculumDirection] {
        &self.curriculum
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.meta.clone(),
            params: self.model.params().clone(),
            adam: self.adam.clone(),
        }
    }

    /// Runs one epoch, passing each step's record to `sink`.
    pub fn run_epoch(
        &mut self,
        sink: &mut dyn FnMut(&TrainRecord) -> Result<(), TrainError>,
    ) -> Result<EpochSummary, TrainError> {
        let epoch = self.meta.epoch + 1;
        let started = Instant::now();
        let batches = epoch_batches(
            &self.corpus,
            &self.curriculum,
            self.meta.train.max_tokens,
            derive_seed(self.meta.train.seed, &[BATCH_STREAM]),
            epoch,
            self.meta.loss.n_neg,
        )?;
        let mut sum = 0.0;
        let mut tokens = 0;
        for batch in &batches {
            let rec = self.train_step(batch, epoch)?;
            sum += rec.total;
            tokens += rec.tokens;
            sink(&rec)?;
        }
        self.meta.epoch = epoch;
        Ok(EpochSummary {
            epoch,
            steps: batches.len(),
            mean_loss: sum / batches.len().max(1) as f64,
            tokens,
            wall_secs: started.elapsed().as_secs_f64(),
        })
    }

    fn train_step(&mut self, b: &Batch, epoch: usize) -> Result<TrainRecord, TrainError> {
        let started = Instant::now();
        let step = self.meta.step + 1;
        let cfg = &self.meta.train;
        let loss_cfg = &self.meta.loss;
        let mut drng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[DROPOUT_STREAM, step]));
        let dropout_on = cfg.dropout_p > 0.0;
        let mut g = Graph::<f32>::new();
        let langs = vec![b.tgt_lang; b.rows()];
        let (logits, pa) = self.model.translate_forward(
            &mut g,
            &b.src,
            &b.tgt_in,
            &langs,
            dropout_on.then_some(&mut drng as &mut (dyn RngCore + 'static)),
        )?;
        let l_mt = label_smoothed_nll(&mut g, logits, &b.tgt_out, loss_cfg.label_smoothing)?;
        let (loss, breakdown) = if loss_cfg.constrained() {
            let pb = self
                .model
                .encode(&mut g, &b.tgt_framed, dropout_on.then_some(&mut drng as &mut (dyn RngCore + 'static)))?
                .p;
            let per_batch = LossConfig {
                n_neg: b.neg_ab.k(),
                ..loss_cfg.clone()
            };
            total_loss(&mut g, l_mt, pa, pb, &b.neg_ab, &b.neg_ba, &per_batch)?
        } else {
            let l = g.value(l_mt).item().to_f64_lossy();
            let total = g.scale(l_mt, 0.5);
            let bd = LossBreakdown {
                l_mt: l,
                l_mt_ab: l,
                total: g.value(total).item().to_f64_lossy(),
                ..Default::default()
            };
            (total, bd)
        };
        let total = breakdown.total;
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                direction: b.direction.to_string(),
            });
        }
        let grads = g.backward(loss)?;
        let lr = lr_at(step, cfg.base_lr, cfg.warmup_steps);
        let scale = match cfg.clip_norm {
            Some(c) => {
                let n = grad_norm(&grads);
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, &cfg.adam(), scale)?;
        self.meta.step = step;
        let tokens = b.token_count();
        let wall = started.elapsed().as_secs_f64();
        Ok(TrainRecord {
            step,
            epoch,
            direction: b.direction.to_string(),
            total,
            breakdown,
            lr,
            tokens,
            wall_secs: wall,
            tokens_per_sec: tokens as f64 / wall.max(1e-9),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: Vec<EpochSummary>,
}

/// Trains until `meta.train.n_epochs` epochs are done, checkpointing each
/// epoch into `out_dir` and appending step records to its log.
pub fn train(trainer: &mut Trainer, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| TrainError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    if trainer.meta.epoch == 0 {
        trainer.checkpoint().save(&out_dir.join(epoch_checkpoint_name(0)))?;
    }
    let mut epochs = Vec::new();
    while trainer.meta.epoch < trainer.meta.train.n_epochs {
        let mut sink = |r: &TrainRecord| -> Result<(), TrainError> {
            let line = serde_json::to_string(r).map_err(|e| TrainError::Config(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| TrainError::io(&log_path, e))
        };
        let summary = trainer.run_epoch(&mut sink)?;
        log.flush().map_err(|e| TrainError::io(&log_path, e))?;
        log::info!(
            "epoch {} steps {} mean loss {:.4} ({:.0} tok/s)",
            summary.epoch,
            summary.steps,
            summary.mean_loss,
            summary.tokens as f64 / summary.wall_secs.max(1e-9)
        );
        trainer.checkpoint().save(&out_dir.join(epoch_checkpoint_name(summary.epoch)))?;
        epochs.push(summary);
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        log: log_path,
        epochs,
    })
}

/// Reads a training log back into records.
pub fn read_log(path: &Path) -> Result<Vec<TrainRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| TrainError::Checkpoint(format!("log line {}: {e}", i + 1))))
        .collect()
}
