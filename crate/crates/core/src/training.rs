//! Training and evaluation loop, perplexity, the transition-gain index and run
//! artifacts.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use ketlab_autodiff::{clip_grad_norm, AdamW, AdamWConfig, AutodiffError, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, sequential_batches, shuffle_targets, Batch, Corpus};
use crate::error::{KetError, Result};
use crate::models::{regime_of, ForwardOptions, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub eval_every: usize,
    pub report_every: usize,
    /// Maximum number of held-out batches per evaluation.
    pub eval_cap: Option<usize>,
    /// Seed of the data order, target shuffles and block sampling.
    pub seed: u64,
    /// Train and evaluate against within-batch shuffled targets.
    pub shuffle_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 500,
            batch_size: 16,
            clip: 1.0,
            eval_every: 1000,
            report_every: 100,
            eval_cap: None,
            seed: 7,
            shuffle_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(KetError::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.report_every == 0 {
            return Err(KetError::InvalidConfig("steps, batch size and cadences must be positive".into()));
        }
        if !(self.clip > 0.0) || self.weight_decay < 0.0 {
            return Err(KetError::InvalidConfig("clip must be positive and weight decay nonnegative".into()));
        }
        if self.eval_cap == Some(0) {
            return Err(KetError::InvalidConfig("evaluation cap must be at least one batch".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub ppl: f64,
    pub wall_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub regime: Option<String>,
    pub dataset: String,
    pub final_train_loss: f64,
    pub val_ppl: f64,
    pub test_ppl: f64,
    pub steps: usize,
    pub wall_seconds: f64,
    pub iters_per_sec: f64,
    pub seed: u64,
    pub num_params: usize,
    pub eval_windows: String,
    pub ppl_weighting: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub summary: RunSummary,
    pub metrics: Vec<MetricsRow>,
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Mean next-token loss of `batch` and per-parameter gradients in store order.
pub fn lm_loss_and_grads(model: &Model, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward_lm_graph(&mut g, &p, batch, model.default_hint(batch), ForwardOptions::default())?;
    let loss = g.cross_entropy(out.logits, &batch.targets)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss);
    Ok((value, p.grads(&grads)))
}

/// Mean next-token loss of `batch` without a backward pass.
pub fn lm_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward_lm_graph(&mut g, &p, batch, model.default_hint(batch), ForwardOptions::default())?;
    let loss = g.cross_entropy(out.logits, &batch.targets)?;
    Ok(g.value(loss).item())
}

/// Token-weighted mean NLL over non-overlapping windows of `stream`, using at
/// most `cap` batches. With `shuffle_seed`, batch `i` has its targets shuffled
/// with seed `shuffle_seed + i`.
pub fn evaluate_nll(
    model: &Model,
    stream: &[usize],
    batch_size: usize,
    cap: Option<usize>,
    shuffle_seed: Option<u64>,
) -> Result<f64> {
    if stream.is_empty() {
        return Err(KetError::StreamTooShort { needed: model.cfg.seq_len + 1, got: 0 });
    }
    let batches = sequential_batches(stream, model.cfg.seq_len, batch_size)?;
    let take = cap.unwrap_or(usize::MAX).min(batches.len());
    let (mut total, mut tokens) = (0.0, 0usize);
    for (i, batch) in batches.iter().take(take).enumerate() {
        let loss = match shuffle_seed {
            Some(seed) => lm_loss(model, &shuffle_targets(batch, seed.wrapping_add(i as u64)))?,
            None => lm_loss(model, batch)?,
        };
        total += loss * batch.num_tokens() as f64;
        tokens += batch.num_tokens();
    }
    Ok(total / tokens as f64)
}

pub fn evaluate_ppl(model: &Model, stream: &[usize], batch_size: usize, cap: Option<usize>) -> Result<f64> {
    Ok(perplexity(evaluate_nll(model, stream, batch_size, cap, None)?))
}

/// Fixed shuffle seed for held-out batches so every evaluation sees the same
/// permutation.
const EVAL_SHUFFLE_SEED: u64 = 0x5eed;

/// Endless supply of training batches: every pass reshuffles the window order.
pub struct BatchStream<'a> {
    stream: &'a [usize],
    seq_len: usize,
    batch_size: usize,
    queue: VecDeque<Batch>,
}

impl<'a> BatchStream<'a> {
    pub fn new(stream: &'a [usize], seq_len: usize, batch_size: usize) -> Self {
        Self { stream, seq_len, batch_size, queue: VecDeque::new() }
    }

    pub fn next(&mut self, rng: &mut ChaCha8Rng) -> Result<Batch> {
        if self.queue.is_empty() {
            self.queue = make_batches(self.stream, self.seq_len, self.batch_size, rng.random())?.into();
        }
        Ok(self.queue.pop_front().expect("make_batches yields at least one batch"))
    }
}

/// Forward, loss, backward, clip and AdamW for `cfg.steps` steps, with
/// periodic reporting and evaluation.
pub fn train(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.vocab.len() != model.cfg.vocab_size {
        return Err(KetError::InvalidConfig(format!(
            "corpus vocabulary {} differs from model vocabulary {}",
            corpus.vocab.len(),
            model.cfg.vocab_size
        )));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer(), model.params.tensors());
    let mut batches = BatchStream::new(&corpus.train, model.cfg.seq_len, cfg.batch_size);
    let eval_shuffle = cfg.shuffle_targets.then_some(EVAL_SHUFFLE_SEED);
    let mut metrics = Vec::new();
    let mut last_loss = f64::NAN;

    let eval_row = |model: &Model, split: &str, stream: &[usize], step: usize| -> Result<MetricsRow> {
        let loss = evaluate_nll(model, stream, cfg.batch_size, cfg.eval_cap, eval_shuffle)?;
        Ok(MetricsRow { step, split: split.into(), loss, ppl: perplexity(loss), wall_sec: start.elapsed().as_secs_f64() })
    };

    for step in 1..=cfg.steps {
        let mut batch = batches.next(&mut rng)?;
        if cfg.shuffle_targets {
            batch = shuffle_targets(&batch, rng.random());
        }
        let (loss, mut grads) = match lm_loss_and_grads(model, &batch) {
            Err(KetError::Autodiff(AutodiffError::NonFinite { .. })) => return Err(KetError::Divergence { step }),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(KetError::Divergence { step });
        }
        clip_grad_norm(&mut grads, cfg.clip);
        opt.step(model.params.tensors_mut(), &grads);
        last_loss = loss;
        if step == 1 || step % cfg.report_every == 0 || step == cfg.steps {
            metrics.push(MetricsRow {
                step,
                split: "train".into(),
                loss,
                ppl: perplexity(loss),
                wall_sec: start.elapsed().as_secs_f64(),
            });
        }
        if step % cfg.eval_every == 0 && step != cfg.steps {
            metrics.push(eval_row(model, "valid", &corpus.valid, step)?);
        }
    }
    let train_wall = start.elapsed().as_secs_f64();
    let val = eval_row(model, "valid", &corpus.valid, cfg.steps)?;
    let test = eval_row(model, "test", &corpus.test, cfg.steps)?;
    let summary = RunSummary {
        variant: model.cfg.variant.to_string(),
        regime: regime_of(model.cfg.variant).ok().map(|r| r.to_string()),
        dataset: corpus.name.clone(),
        final_train_loss: last_loss,
        val_ppl: val.ppl,
        test_ppl: test.ppl,
        steps: cfg.steps,
        wall_seconds: train_wall,
        iters_per_sec: cfg.steps as f64 / train_wall,
        seed: cfg.seed,
        num_params: model.num_params(),
        eval_windows: "non-overlapping".into(),
        ppl_weighting: "token".into(),
        model: model.cfg.clone(),
        train: cfg.clone(),
    };
    metrics.push(val);
    metrics.push(test);
    Ok(TrainOutcome { summary, metrics })
}

/// `(causal_best - pred_next) / (causal_best - aug_best)`.
pub fn transition_gain(causal_best: f64, pred_next: f64, aug_best: f64) -> Result<f64> {
    if ![causal_best, pred_next, aug_best].iter().all(|x| x.is_finite()) {
        return Err(KetError::OutOfRange("perplexities must be finite".into()));
    }
    let denom = causal_best - aug_best;
    if denom <= f64::EPSILON * causal_best.abs().max(1.0) {
        return Err(KetError::DegenerateDenominator { causal_best, aug_best });
    }
    Ok((causal_best - pred_next) / denom)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_cases() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(4f64.ln()) - 4.0).abs() < 1e-12);
        assert!((perplexity(50f64.ln()) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn transition_gain_cases() {
        assert_eq!(transition_gain(10.0, 10.0, 2.0).unwrap(), 0.0);
        assert!(matches!(transition_gain(2.0, 1.0, 2.0), Err(KetError::DegenerateDenominator { .. })));
        assert!(transition_gain(1.0, 1.0, 3.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
    }
}
