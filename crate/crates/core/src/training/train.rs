use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{make_batches, source_ids, target_io, ParallelBatch};
use super::corpus::Corpus;
use super::decode::{argmax_token, greedy_decode};
use super::loss::weighted_cross_entropy;
use super::optim::{adam_step, clip_gradients, AdamConfig, AdamState, LrSchedule};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::nn::ForwardCtx;
use crate::tensor::{Scalar, Tape, TensorError, Var};

/// Optimization and logging settings of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub steps: usize,
    /// Budget of `sentences × longest side` per batch.
    pub batch_tokens: usize,
    pub lr: f64,
    pub warmup: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub label_smoothing: f64,
    pub log_every: usize,
    pub seed: u64,
    /// Stop at the first log step whose validation accuracy reaches this.
    pub target_accuracy: Option<f64>,
    /// Validation sentences greedily decoded for the length ratio.
    pub decode_samples: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_tokens: 1024,
            lr: 7e-4,
            warmup: 4000,
            adam: AdamConfig::default(),
            clip_norm: None,
            label_smoothing: 0.0,
            log_every: 100,
            seed: 1,
            target_accuracy: None,
            decode_samples: 32,
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.log_every == 0 || self.batch_tokens == 0 {
            return Err(Error::Config("steps, log_every and batch_tokens must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss (nats/token) since the previous record.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub token_accuracy: f64,
    pub length_ratio: f64,
    /// Seconds since the start of training.
    pub wall_time: f64,
}

impl MetricsRecord {
    /// One `key=value` line. Wall time is left out when `with_time` is false
    /// so that reruns can be compared byte for byte.
    pub fn to_line(&self, with_time: bool) -> String {
        let mut line = format!(
            "step={} train_loss={:.6} valid_loss={:.6} token_accuracy={:.6} length_ratio={:.6}",
            self.step, self.train_loss, self.valid_loss, self.token_accuracy, self.length_ratio
        );
        if with_time {
            line.push_str(&format!(" wall_time={:.3}", self.wall_time));
        }
        line
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen at a log step.
    pub best: Model<f32>,
    pub best_step: usize,
    pub best_valid_loss: f64,
    pub last: Model<f32>,
    pub steps_run: usize,
    pub metrics: Vec<MetricsRecord>,
    pub reached_target: bool,
}

/// Teacher-forced validation statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherForced {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

/// Mean loss and next-token accuracy over every target token (EOS
/// included) of `corpus`, in evaluation mode.
pub fn teacher_forced<F: Scalar>(model: &Model<F>, corpus: &Corpus) -> Result<TeacherForced> {
    let (mut loss, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    for (src, tgt) in corpus.src.iter().zip(&corpus.tgt) {
        let (input, output) = target_io(tgt);
        let logits = model.logits(&source_ids(src), &input)?;
        let v = model.config.tgt_vocab;
        for (row, &gold) in logits.data().chunks(v).zip(&output) {
            let lp = super::decode::log_softmax(row);
            loss -= lp[gold];
            correct += (argmax_token(row) == gold) as usize;
        }
        tokens += output.len();
    }
    if tokens == 0 {
        return Err(Error::Invalid("validation corpus is empty".into()));
    }
    Ok(TeacherForced {
        loss: loss / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

/// Length ratio of greedy outputs on the first `n` sentences.
pub fn sample_length_ratio<F: Scalar>(model: &Model<F>, corpus: &Corpus, n: usize) -> Result<f64> {
    let (mut hyp, mut reference) = (0usize, 0usize);
    for (src, tgt) in corpus.src.iter().zip(&corpus.tgt).take(n) {
        hyp += greedy_decode(model, src, 2 * src.len() + 10)?.len();
        reference += tgt.len();
    }
    Ok(if reference == 0 { 0.0 } else { hyp as f64 / reference as f64 })
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged {
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Summed training objective of one batch on `tape`, normalized by the
/// batch's target token count.
pub fn batch_loss<'t>(
    model: &Model<f32>,
    arch: &crate::models::Architecture<Var<'t, f32>>,
    batch: &ParallelBatch,
    smoothing: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Var<'t, f32>> {
    let weight = 1.0 / batch.target_tokens() as f32;
    let mut total: Option<Var<'t, f32>> = None;
    for i in 0..batch.len() {
        let (src, input, output) = batch.row(i);
        let logits = model.forward(arch, &src, &input, &mut ForwardCtx::train(rng))?;
        let ce = weighted_cross_entropy(logits, &output, &vec![weight; output.len()], smoothing)?;
        total = Some(match total {
            Some(t) => t.add(ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::Invalid("empty batch".into()))
}

/// Trains a fresh model. Deterministic for a fixed `spec.seed`; calls
/// `on_record` for every metrics record as it is produced.
pub fn train(
    config: &ModelConfig,
    train_set: &Corpus,
    valid_set: &Corpus,
    spec: &RunSpec,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    spec.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Invalid("training and validation corpora must be non-empty".into()));
    }
    let started = Instant::now();
    let mut model = Model::<f32>::init(config.clone(), spec.seed)?;
    let mut adam = AdamState::new(&model.params);
    let schedule = LrSchedule {
        peak: spec.lr,
        warmup: spec.warmup,
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));

    let mut batches = Vec::new().into_iter();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let (mut loss_sum, mut loss_steps) = (0.0, 0usize);
    let mut reached_target = false;
    let mut steps_run = 0;

    for step in 1..=spec.steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                batches = make_batches(train_set, spec.batch_tokens, &mut batch_rng)?.into_iter();
                batches.next().expect("non-empty corpus yields a batch")
            }
        };
        let grads = {
            let tape = Tape::new();
            let (arch, leaves) = model.bind(&tape)?;
            let loss = batch_loss(&model, &arch, &batch, spec.label_smoothing as f32, &mut dropout_rng)
                .map_err(diverged(step))?;
            let value = loss.value().item()? as f64;
            loss_sum += value;
            loss_steps += 1;
            let g = tape.backward(loss).map_err(|e| diverged(step)(e.into()))?;
            leaves.iter().map(|v| g.wrt(*v)).collect::<Vec<_>>()
        };
        let mut grads = grads;
        if let Some(max) = spec.clip_norm {
            clip_gradients(&mut grads, max)?;
        }
        adam_step(&mut model.params, &grads, &mut adam, schedule.at(step), spec.adam)?;
        steps_run = step;

        if step % spec.log_every == 0 || step == spec.steps {
            let tf = teacher_forced(&model, valid_set).map_err(diverged(step))?;
            let record = MetricsRecord {
                step,
                train_loss: loss_sum / loss_steps.max(1) as f64,
                valid_loss: tf.loss,
                token_accuracy: tf.accuracy,
                length_ratio: sample_length_ratio(&model, valid_set, spec.decode_samples)?,
                wall_time: started.elapsed().as_secs_f64(),
            };
            (loss_sum, loss_steps) = (0.0, 0);
            on_record(&record);
            if best.as_ref().is_none_or(|(l, _, _)| tf.loss < *l) {
                best = Some((tf.loss, step, model.clone()));
            }
            metrics.push(record);
            if spec.target_accuracy.is_some_and(|t| tf.accuracy >= t) {
                reached_target = true;
                break;
            }
        }
    }
    let (best_valid_loss, best_step, best_model) = best.expect("the final step always logs");
    Ok(TrainOutcome {
        best: best_model,
        best_step,
        best_valid_loss,
        last: model,
        steps_run,
        metrics,
        reached_target,
    })
}
