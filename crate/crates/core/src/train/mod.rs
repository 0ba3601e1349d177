//! Optimization, checkpointing, decoding and desk-scale metrics.

mod decode;
mod metrics;
mod optim;

pub use decode::{beam_search, decode_all, greedy, DecodeConfig};
pub use metrics::{avg_output_length, corpus_bleu, strip_eos};
pub use optim::{inverse_sqrt_lr, Adam};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{token_batches, Batch, Example, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use crate::transformer::checkpoint::{model_from_checkpoint, model_to_checkpoint, Checkpoint};
use crate::transformer::Seq2Seq;

/// Random stream offsets; streams 0 and 1 initialize the model.
const DROPOUT_STREAM: u64 = 1 << 32;
const BATCH_STREAM: u64 = 2 << 32;

fn default_lr() -> f64 {
    1e-3
}
fn default_warmup() -> u64 {
    400
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-9
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_max_tokens() -> usize {
    512
}
fn default_eval_interval() -> u64 {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Padded tokens per batch and side.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Peak learning rate, reached after `warmup` steps.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Global gradient norm limit.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(steps: u64) -> Self {
        Self {
            steps,
            max_tokens: default_max_tokens(),
            lr: default_lr(),
            warmup: default_warmup(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            label_smoothing: default_smoothing(),
            seed: 0,
            eval_interval: default_eval_interval(),
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: String| {
            Err(Error::Config {
                path: format!("train.{path}"),
                message,
            })
        };
        if self.warmup < 1 {
            return fail("warmup", "must be at least 1".into());
        }
        if !(0.0..=0.3).contains(&self.label_smoothing) {
            return fail("label_smoothing", format!("{} not in [0, 0.3]", self.label_smoothing));
        }
        if !(self.lr > 0.0) {
            return fail("lr", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1", "Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return fail("eps", "must be positive".into());
        }
        if self.max_tokens == 0 {
            return fail("max_tokens", "must be positive".into());
        }
        if self.eval_interval == 0 {
            return fail("eval_interval", "must be positive".into());
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return fail("clip_norm", "must be positive".into());
        }
        Ok(())
    }
}

/// Loss and accuracy of a set of predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Eval {
    /// Mean negative log-score per target token (no label smoothing).
    pub loss: f64,
    /// Fraction of target tokens whose highest score is the gold token.
    pub token_acc: f64,
    pub tokens: usize,
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    /// Mean training loss since the previous row.
    pub loss: f64,
    /// Training token accuracy since the previous row.
    pub token_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Count of non-pad rows whose argmax equals the target.
fn correct_tokens(scores: &Tensor, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| t != PAD && argmax(scores.row(r)) == t)
        .count()
}

/// Teacher-forced loss and token accuracy over `examples`.
pub fn evaluate(model: &Seq2Seq, examples: &[Example], max_tokens: usize) -> Result<Eval> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut total = 0.0;
    let (mut tokens, mut correct) = (0, 0);
    for idx in token_batches(examples, max_tokens, None)? {
        let refs: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let batch = Batch::new(&refs)?;
        let mut g = Graph::inference();
        let mut rng = Rng::new(0);
        let out = model.forward(&mut g, &batch.src, &batch.tgt_in, false, &mut rng)?;
        let loss = g.cross_entropy(out.scores, &batch.tgt_out, Some(PAD), 0.0)?;
        let n = batch.target_tokens();
        total += g.value(loss).item() * n as f64;
        tokens += n;
        correct += correct_tokens(g.value(out.scores), &batch.tgt_out);
    }
    Ok(Eval {
        loss: total / tokens as f64,
        token_acc: correct as f64 / tokens as f64,
        tokens,
    })
}

/// Statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
    pub lr: f64,
}

/// Result of [`Trainer::run`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Training loss of every step taken in this run.
    pub step_losses: Vec<f64>,
    pub log: Vec<LogRow>,
    pub best_val_loss: Option<f64>,
    pub final_eval: Option<Eval>,
}

/// Files written by a training run.
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_LOG: &str = "metrics.csv";

/// The model together with its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Seq2Seq,
    pub optim: Adam,
    pub config: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub best_val_loss: Option<f64>,
}

impl Trainer {
    pub fn new(model: Seq2Seq, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optim = Adam::new(&model.store, config.beta1, config.beta2, config.eps);
        Ok(Self {
            model,
            optim,
            config,
            step: 0,
            best_val_loss: None,
        })
    }

    /// Restores model, optimizer and step counter from a checkpoint written
    /// by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let mut trainer = Self::new(model, config)?;
        trainer.optim.load_from(&trainer.model.store, ck)?;
        trainer.step = trainer.optim.step;
        if let Ok(&[bits]) = ck.u64s("train.best_val_loss") {
            trainer.best_val_loss = Some(f64::from_bits(bits));
        }
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = model_to_checkpoint(&self.model);
        self.optim.save_into(&self.model.store, &mut ck);
        if let Some(b) = self.best_val_loss {
            ck.push(
                "train.best_val_loss",
                crate::transformer::checkpoint::Record::U64(vec![b.to_bits()]),
            );
        }
        ck
    }

    /// One forward/backward pass and parameter update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let step = self.step + 1;
        let mut rng = Rng::derive(self.config.seed, DROPOUT_STREAM + step);
        let at_step = |e: Error| match e {
            Error::NonFinite { op, .. } => Error::NonFinite { op, step: Some(step) },
            other => other,
        };
        let mut g = Graph::new();
        let out = self
            .model
            .forward(&mut g, &batch.src, &batch.tgt_in, true, &mut rng)
            .map_err(at_step)?;
        let loss = g.cross_entropy(out.scores, &batch.tgt_out, Some(PAD), self.config.label_smoothing)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: g.first_non_finite().unwrap_or("cross_entropy").to_string(),
                step: Some(step),
            });
        }
        let grads = g.backward(loss).map_err(at_step)?;
        self.model.store.zero_grads();
        grads.accumulate_into(&g, &mut self.model.store);
        if let Some(limit) = self.config.clip_norm {
            let norm = self.model.store.grad_norm();
            if norm > limit {
                let factor = limit / norm;
                let ids: Vec<_> = self.model.store.ids().collect();
                for id in ids {
                    self.model.store.param_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= factor);
                }
            }
        }
        let lr = inverse_sqrt_lr(step, self.config.lr, self.config.warmup);
        self.optim.update(&mut self.model.store, lr);
        self.step = step;
        Ok(StepStats {
            loss: value,
            tokens: batch.target_tokens(),
            correct: correct_tokens(g.value(out.scores), &batch.tgt_out),
            lr,
        })
    }

    /// Batches of epoch `epoch`; fixed by the seed so that a resumed run
    /// sees the same sequence as an uninterrupted one.
    fn epoch_batches(&self, data: &[Example], epoch: u64) -> Result<Vec<Vec<usize>>> {
        let mut rng = Rng::derive(self.config.seed, BATCH_STREAM + epoch);
        token_batches(data, self.config.max_tokens, Some(&mut rng))
    }

    /// Trains until `config.steps`, evaluating on `valid` every
    /// `eval_interval` steps and at the end. With `out_dir`, appends rows to
    /// the metrics CSV and keeps the best-by-validation and the last
    /// checkpoint there.
    pub fn run(&mut self, train: &[Example], valid: &[Example], out_dir: Option<&Path>) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let mut log_writer = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(METRICS_LOG);
                let fresh = self.step == 0 || !path.exists();
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)?;
                Some(
                    csv::WriterBuilder::new()
                        .has_headers(fresh)
                        .from_writer(file),
                )
            }
            None => None,
        };
        let mut report = TrainReport {
            step_losses: Vec::new(),
            log: Vec::new(),
            best_val_loss: self.best_val_loss,
            final_eval: None,
        };
        let mut epoch_cache: Option<(u64, Vec<Vec<usize>>)> = None;
        let per_epoch = self.epoch_batches(train, 0)?.len() as u64;
        let (mut window_loss, mut window_tokens, mut window_correct) = (0.0, 0usize, 0usize);
        while self.step < self.config.steps {
            let (epoch, pos) = (self.step / per_epoch, (self.step % per_epoch) as usize);
            if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                epoch_cache = Some((epoch, self.epoch_batches(train, epoch)?));
            }
            let idx = &epoch_cache.as_ref().unwrap().1[pos];
            let refs: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let stats = self.train_step(&Batch::new(&refs)?)?;
            report.step_losses.push(stats.loss);
            window_loss += stats.loss * stats.tokens as f64;
            window_tokens += stats.tokens;
            window_correct += stats.correct;

            if self.step.is_multiple_of(self.config.eval_interval) || self.step == self.config.steps {
                let val = if valid.is_empty() {
                    Eval {
                        loss: f64::NAN,
                        token_acc: f64::NAN,
                        tokens: 0,
                    }
                } else {
                    evaluate(&self.model, valid, self.config.max_tokens)?
                };
                let row = LogRow {
                    step: self.step,
                    loss: window_loss / window_tokens as f64,
                    token_acc: window_correct as f64 / window_tokens as f64,
                    val_loss: val.loss,
                    val_acc: val.token_acc,
                };
                (window_loss, window_tokens, window_correct) = (0.0, 0, 0);
                let improved = !valid.is_empty() && self.best_val_loss.is_none_or(|b| val.loss < b);
                if improved {
                    self.best_val_loss = Some(val.loss);
                    report.best_val_loss = Some(val.loss);
                }
                if let Some(dir) = out_dir {
                    let w = log_writer.as_mut().unwrap();
                    w.serialize(&row).map_err(csv_error)?;
                    w.flush()?;
                    if improved {
                        self.checkpoint().save(dir.join(BEST_CHECKPOINT))?;
                    }
                    self.checkpoint().save(dir.join(LAST_CHECKPOINT))?;
                }
                report.final_eval = Some(val);
                report.log.push(row);
            }
        }
        Ok(report)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads a metrics CSV written by [`Trainer::run`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    reader
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

/// Paths of the checkpoints of a run directory.
pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(BEST_CHECKPOINT), dir.join(LAST_CHECKPOINT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_copy;
    use crate::surface_fusion::{FusionConfig, FusionMode};
    use crate::transformer::ModelConfig;

    fn tiny(mode: FusionMode) -> Seq2Seq {
        let config = ModelConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            src_vocab: 12,
            tgt_vocab: 12,
            tie_embeddings: true,
            dropout: 0.1,
            max_len: 12,
        };
        Seq2Seq::new(config, FusionConfig::new(mode), 3).unwrap()
    }

    fn data(n: usize, seed: u64) -> Vec<Example> {
        gen_copy(n, 2, 5, 8, &mut Rng::new(seed)).unwrap()
    }

    fn config(steps: u64) -> TrainConfig {
        TrainConfig {
            max_tokens: 64,
            warmup: 10,
            eval_interval: 10,
            lr: 3e-3,
            ..TrainConfig::new(steps)
        }
    }

    #[test]
    fn config_validation() {
        assert!(config(1).validate().is_ok());
        let bad = TrainConfig { warmup: 0, ..config(1) };
        assert!(matches!(bad.validate(), Err(Error::Config { path, .. }) if path == "train.warmup"));
        let bad = TrainConfig { label_smoothing: 0.5, ..config(1) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let model = tiny(FusionMode::None);
        let e = evaluate(&model, &data(50, 1), 256).unwrap();
        assert!((e.loss - 12f64.ln()).abs() < 0.2, "{}", e.loss);
    }

    #[test]
    fn loss_decreases_and_log_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny(FusionMode::Fine), config(60)).unwrap();
        let report = t.run(&data(200, 2), &data(30, 3), Some(dir.path())).unwrap();
        assert_eq!(report.step_losses.len(), 60);
        let first: f64 = report.step_losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = report.step_losses[50..].iter().sum::<f64>() / 10.0;
        assert!(last < first);
        let log = read_log(dir.path().join(METRICS_LOG)).unwrap();
        assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30, 40, 50, 60]);
        assert_eq!(log, report.log);
        let best = model_from_checkpoint(&Checkpoint::load(dir.path().join(BEST_CHECKPOINT)).unwrap()).unwrap();
        let last_model = model_from_checkpoint(&Checkpoint::load(dir.path().join(LAST_CHECKPOINT)).unwrap()).unwrap();
        let valid = data(30, 3);
        let eb = evaluate(&best, &valid, 64).unwrap();
        let el = evaluate(&last_model, &valid, 64).unwrap();
        assert!(eb.loss <= el.loss);
    }

    #[test]
    fn fusion_weights_receive_gradient() {
        let mut t = Trainer::new(tiny(FusionMode::Fine), config(1)).unwrap();
        let examples = data(8, 4);
        let refs: Vec<&Example> = examples.iter().collect();
        let before = t.model.layer_weights().unwrap();
        t.train_step(&Batch::new(&refs).unwrap()).unwrap();
        let id = t.model.store.id("fusion.weights").unwrap();
        assert!(t.model.store.grad(id).data().iter().map(|g| g * g).sum::<f64>() > 0.0);
        assert_ne!(before, t.model.layer_weights().unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (train, valid) = (data(100, 5), data(20, 6));
        let mut full = Trainer::new(tiny(FusionMode::SurfaceSoft), config(30)).unwrap();
        let full_report = full.run(&train, &valid, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(tiny(FusionMode::SurfaceSoft), config(20)).unwrap();
        first.run(&train, &valid, Some(dir.path())).unwrap();
        let ck = Checkpoint::load(dir.path().join(LAST_CHECKPOINT)).unwrap();
        let mut second = Trainer::resume(&ck, config(30)).unwrap();
        assert_eq!(second.step, 20);
        let rest = second.run(&train, &valid, Some(dir.path())).unwrap();
        assert_eq!(rest.step_losses, full_report.step_losses[20..].to_vec());
        let log = read_log(dir.path().join(METRICS_LOG)).unwrap();
        assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert_eq!(log, full_report.log);
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let mut t = Trainer::new(tiny(FusionMode::None), config(5)).unwrap();
        let id = t.model.store.id("embed").unwrap();
        t.model.store.value_mut(id).data_mut().fill(f64::NAN);
        let err = t.run(&data(20, 7), &[], None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: Some(1), .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
