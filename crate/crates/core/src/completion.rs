//! Block completion: direct prediction of the next `Bk` tokens from a causal
//! prefix, and denoising reconstruction of a corrupted future block under the
//! 8-step corruption schedule.

use std::time::Instant;

use ketlab_autodiff::{clip_grad_norm, AdamW, AutodiffError, Bound, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sequential_batches, Batch, Corpus};
use crate::error::{KetError, Result};
use crate::models::{Head, Model, ModelConfig, NOISE_STEPS};
use crate::training::{perplexity, BatchStream, TrainConfig};

/// `p(s) = 0.05 + 0.45 (s - 1) / 7` for `s` in `1..=8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSchedule;

impl CorruptionSchedule {
    pub const STEPS: usize = NOISE_STEPS;

    pub fn rate(self, step: usize) -> Result<f64> {
        corruption_rate(step)
    }
}

pub fn corruption_rate(step: usize) -> Result<f64> {
    if !(1..=CorruptionSchedule::STEPS).contains(&step) {
        return Err(KetError::OutOfRange(format!("schedule step {step} outside 1..={}", CorruptionSchedule::STEPS)));
    }
    Ok(0.05 + 0.45 * (step - 1) as f64 / 7.0)
}

/// Uniform draw from the schedule steps.
pub fn sample_step<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(1..=CorruptionSchedule::STEPS)
}

/// Flips each position independently with probability `p` to a uniformly
/// drawn different id. Returns the corrupted ids and the flip flags.
pub fn corrupt_block<R: Rng + ?Sized>(
    gold: &[usize],
    p: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(KetError::OutOfRange(format!("corruption probability {p} outside [0, 1]")));
    }
    if vocab_size < 2 && p > 0.0 {
        return Err(KetError::OutOfRange("corruption needs a vocabulary of at least 2".into()));
    }
    let mut out = Vec::with_capacity(gold.len());
    let mut flags = Vec::with_capacity(gold.len());
    for &g in gold {
        let flip = p > 0.0 && rng.random::<f64>() < p;
        if flip {
            let r = rng.random_range(0..vocab_size - 1);
            out.push(if r >= g { r + 1 } else { r });
        } else {
            out.push(g);
        }
        flags.push(flip);
    }
    Ok((out, flags))
}

/// Windows with a split point per row: row `i` reads `context[.. splits[i]]`
/// and must produce `gold` = the `Bk` tokens after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub block_size: usize,
    pub context: Vec<usize>,
    pub splits: Vec<usize>,
    pub gold: Vec<usize>,
    pub corrupted: Vec<usize>,
    pub flags: Vec<bool>,
    pub step: usize,
}

/// Draws a split `c` uniformly from `1..=S-Bk` per row, takes the gold block
/// `x[c..c+Bk]` and corrupts it at rate `p(step)`.
pub fn make_block_batch<R: Rng + ?Sized>(
    window: &Batch,
    block_size: usize,
    step: usize,
    vocab_size: usize,
    rng: &mut R,
) -> Result<BlockBatch> {
    let s = window.seq_len;
    if block_size == 0 || block_size >= s {
        return Err(KetError::InvalidConfig(format!("block size {block_size} must lie in 1..{s}")));
    }
    let p = corruption_rate(step)?;
    let mut splits = Vec::with_capacity(window.batch_size);
    let mut gold = Vec::with_capacity(window.batch_size * block_size);
    for b in 0..window.batch_size {
        let c = rng.random_range(1..=s - block_size);
        splits.push(c);
        gold.extend_from_slice(&window.row(b)[c..c + block_size]);
    }
    let (corrupted, flags) = corrupt_block(&gold, p, vocab_size, rng)?;
    Ok(BlockBatch {
        batch_size: window.batch_size,
        seq_len: s,
        block_size,
        context: window.inputs.clone(),
        splits,
        gold,
        corrupted,
        flags,
        step,
    })
}

pub fn block_forward_direct(model: &Model, g: &mut Graph, p: &Bound, bb: &BlockBatch) -> Result<Var> {
    check_block(model, bb)?;
    model.forward_block_direct_graph(g, p, &bb.context, bb.seq_len, &bb.splits)
}

pub fn block_forward_denoise(model: &Model, g: &mut Graph, p: &Bound, bb: &BlockBatch) -> Result<Var> {
    check_block(model, bb)?;
    model.forward_block_denoise_graph(g, p, &bb.context, bb.seq_len, &bb.splits, &bb.corrupted, bb.step)
}

fn check_block(model: &Model, bb: &BlockBatch) -> Result<()> {
    if bb.block_size != model.cfg.block_size {
        return Err(KetError::InvalidConfig(format!(
            "batch block size {} differs from the model's {}",
            bb.block_size, model.cfg.block_size
        )));
    }
    Ok(())
}

/// Block logits `[B, Bk, V]` for either objective.
pub fn block_logits_graph(model: &Model, g: &mut Graph, p: &Bound, bb: &BlockBatch) -> Result<Var> {
    match model.cfg.variant.head() {
        Head::Direct => block_forward_direct(model, g, p, bb),
        Head::Denoise => block_forward_denoise(model, g, p, bb),
        Head::Lm => Err(KetError::WrongVariant { op: "block_logits", variant: model.cfg.variant.to_string() }),
    }
}

pub fn block_logits(model: &Model, bb: &BlockBatch) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = block_logits_graph(model, &mut g, &p, bb)?;
    Ok(g.value(out).clone())
}

/// Mean block cross-entropy and per-parameter gradients in store order.
pub fn block_loss_and_grads(model: &Model, bb: &BlockBatch) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let logits = block_logits_graph(model, &mut g, &p, bb)?;
    let loss = g.cross_entropy(logits, &bb.gold)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss);
    Ok((value, p.grads(&grads)))
}

/// Per-offset NLLs of `logits[B, Bk, V]` against `gold[B * Bk]`, row-major.
fn block_nlls(logits: &Tensor, gold: &[usize]) -> Result<Vec<f64>> {
    let v = logits.last_dim();
    if logits.rank() != 3 || logits.rows() != gold.len() {
        return Err(KetError::InvalidConfig(format!(
            "logits {:?} do not match {} gold tokens",
            logits.shape(),
            gold.len()
        )));
    }
    logits
        .data()
        .chunks(v)
        .zip(gold)
        .map(|(row, &t)| {
            if t >= v {
                return Err(KetError::OutOfRange(format!("gold id {t} outside vocabulary of {v}")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            Ok(lse - row[t])
        })
        .collect()
}

/// `exp` of the mean NLL at the first block offset.
pub fn first_token_ppl(logits: &Tensor, gold: &[usize]) -> Result<f64> {
    let bk = logits.shape().get(1).copied().unwrap_or(1);
    let nll = block_nlls(logits, gold)?;
    let first: Vec<f64> = nll.iter().step_by(bk).copied().collect();
    Ok(perplexity(first.iter().sum::<f64>() / first.len() as f64))
}

/// `exp` of the mean NLL pooled over every block offset.
pub fn block_ppl(logits: &Tensor, gold: &[usize]) -> Result<f64> {
    let nll = block_nlls(logits, gold)?;
    Ok(perplexity(nll.iter().sum::<f64>() / nll.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEval {
    pub first_ppl: f64,
    pub block_ppl: f64,
}

const BLOCK_EVAL_SEED: u64 = 0xb10c;

/// Held-out block metrics over non-overlapping windows. Splits and corruption
/// come from a fixed seed and batch `i` uses schedule step `i mod 8 + 1`, so
/// repeated evaluations see identical inputs.
pub fn evaluate_block(model: &Model, stream: &[usize], batch_size: usize, cap: Option<usize>) -> Result<BlockEval> {
    let batches = sequential_batches(stream, model.cfg.seq_len, batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(BLOCK_EVAL_SEED);
    let bk = model.cfg.block_size;
    let (mut first, mut all, mut n_first, mut n_all) = (0.0, 0.0, 0usize, 0usize);
    for (i, window) in batches.iter().take(cap.unwrap_or(usize::MAX)).enumerate() {
        let bb = make_block_batch(window, bk, i % CorruptionSchedule::STEPS + 1, model.cfg.vocab_size, &mut rng)?;
        let logits = block_logits(model, &bb)?;
        let nll = block_nlls(&logits, &bb.gold)?;
        first += nll.iter().step_by(bk).sum::<f64>();
        n_first += bb.batch_size;
        all += nll.iter().sum::<f64>();
        n_all += nll.len();
    }
    Ok(BlockEval { first_ppl: perplexity(first / n_first as f64), block_ppl: perplexity(all / n_all as f64) })
}

/// One row of the block-run table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRow {
    pub dataset: String,
    pub model: String,
    #[serde(rename = "L")]
    pub layers: usize,
    pub seed: u64,
    pub step: usize,
    pub first_ppl: f64,
    pub block_ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRunSummary {
    pub model: String,
    pub dataset: String,
    pub layers: usize,
    pub seed: u64,
    pub steps: usize,
    pub final_train_loss: f64,
    pub first_ppl: f64,
    pub block_ppl: f64,
    pub wall_seconds: f64,
    pub iters_per_sec: f64,
    pub num_params: usize,
    pub model_config: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct BlockOutcome {
    pub summary: BlockRunSummary,
    pub rows: Vec<BlockRow>,
}

/// Trains a block model. Every batch draws its own schedule step and per-row
/// split points; evaluation uses the held-out test split.
pub fn train_block(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<BlockOutcome> {
    cfg.validate()?;
    if model.cfg.variant.head() == Head::Lm {
        return Err(KetError::WrongVariant { op: "train_block", variant: model.cfg.variant.to_string() });
    }
    if corpus.vocab.len() != model.cfg.vocab_size {
        return Err(KetError::InvalidConfig("corpus and model vocabularies differ".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer(), model.params.tensors());
    let mut batches = BatchStream::new(&corpus.train, model.cfg.seq_len, cfg.batch_size);
    let mut rows = Vec::new();
    let mut last_loss = f64::NAN;
    let row = |model: &Model, step: usize, e: BlockEval| BlockRow {
        dataset: corpus.name.clone(),
        model: model.cfg.variant.to_string(),
        layers: model.cfg.layers,
        seed: cfg.seed,
        step,
        first_ppl: e.first_ppl,
        block_ppl: e.block_ppl,
    };
    for step in 1..=cfg.steps {
        let window = batches.next(&mut rng)?;
        let s = sample_step(&mut rng);
        let bb = make_block_batch(&window, model.cfg.block_size, s, model.cfg.vocab_size, &mut rng)?;
        let (loss, mut grads) = match block_loss_and_grads(model, &bb) {
            Err(KetError::Autodiff(AutodiffError::NonFinite { .. })) => {
                return Err(KetError::Divergence { step })
            }
            other => other?,
        };
        if !loss.is_finite() {
            return Err(KetError::Divergence { step });
        }
        clip_grad_norm(&mut grads, cfg.clip);
        opt.step(model.params.tensors_mut(), &grads);
        last_loss = loss;
        if step % cfg.eval_every == 0 && step != cfg.steps {
            let e = evaluate_block(model, &corpus.test, cfg.batch_size, cfg.eval_cap)?;
            rows.push(row(model, step, e));
        }
    }
    let wall = start.elapsed().as_secs_f64();
    let e = evaluate_block(model, &corpus.test, cfg.batch_size, cfg.eval_cap)?;
    rows.push(row(model, cfg.steps, e));
    let summary = BlockRunSummary {
        model: model.cfg.variant.to_string(),
        dataset: corpus.name.clone(),
        layers: model.cfg.layers,
        seed: cfg.seed,
        steps: cfg.steps,
        final_train_loss: last_loss,
        first_ppl: e.first_ppl,
        block_ppl: e.block_ppl,
        wall_seconds: wall,
        iters_per_sec: cfg.steps as f64 / wall,
        num_params: model.num_params(),
        model_config: model.cfg.clone(),
        train: cfg.clone(),
    };
    Ok(BlockOutcome { summary, rows })
}
