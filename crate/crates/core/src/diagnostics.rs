//! Behavioral checks of information regimes: the bit-exact causality probe,
//! the shuffled-target leakage test, the carrier gradient audit and the
//! quadratic-versus-incidence timing fit.

use std::path::Path;
use std::time::Instant;

use ketlab_autodiff::{Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::{ket_incidence_block, ket_quadratic_block, KetInc, KetQuad};
use crate::corpus::{Batch, Corpus};
use crate::error::{KetError, Result};
use crate::init::Init;
use crate::models::{build_model, regime_of, ForwardOptions, Model, ModelConfig, VariantId};
use crate::neighborhoods::build_edge_simplices;
use crate::training::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeVerdict {
    Causal,
    FutureSensitive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub t: usize,
    pub s: usize,
    pub max_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub variant: String,
    pub regime: Option<String>,
    pub entries: Vec<ProbeEntry>,
    pub verdict: ProbeVerdict,
}

/// Copy of `batch` whose input at position `s` of every row is replaced by
/// `(id + 1) mod V`; the target at `s - 1` follows so gold hints stay aligned.
fn perturb(batch: &Batch, s: usize, vocab: usize) -> Batch {
    let mut out = batch.clone();
    for b in 0..batch.batch_size {
        let i = b * batch.seq_len + s;
        out.inputs[i] = (out.inputs[i] + 1) % vocab;
        if s > 0 {
            out.targets[i - 1] = out.inputs[i];
        }
    }
    out
}

/// Per-position maximum absolute logit change after perturbing position `s`.
fn position_deltas(model: &Model, batch: &Batch, s: usize, base: &Tensor) -> Result<Vec<f64>> {
    let moved = perturb(batch, s, model.cfg.vocab_size);
    let logits = model.forward_lm(&moved, model.default_hint(&moved))?;
    let v = model.cfg.vocab_size;
    let mut per_pos = vec![0.0f64; batch.seq_len];
    for (r, (a, b)) in base.data().chunks(v).zip(logits.data().chunks(v)).enumerate() {
        let delta = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let t = r % batch.seq_len;
        per_pos[t] = per_pos[t].max(delta);
    }
    Ok(per_pos)
}

/// `max |logits'_{<=t} - logits_{<=t}|` after perturbing the input at `s > t`.
pub fn causality_probe(model: &Model, batch: &Batch, t: usize, s: usize) -> Result<f64> {
    if s <= t {
        return Err(KetError::OutOfRange(format!("probe needs s > t, got t={t}, s={s}")));
    }
    if s >= batch.seq_len {
        return Err(KetError::OutOfRange(format!("position {s} outside a window of {}", batch.seq_len)));
    }
    let base = model.forward_lm(batch, model.default_hint(batch))?;
    let per_pos = position_deltas(model, batch, s, &base)?;
    Ok(per_pos[..=t].iter().copied().fold(0.0, f64::max))
}

/// Probes every pair `t < s` of the window (one perturbed forward per `s`).
pub fn probe_report(model: &Model, batch: &Batch) -> Result<ProbeReport> {
    let base = model.forward_lm(batch, model.default_hint(batch))?;
    let mut entries = Vec::new();
    for s in 1..batch.seq_len {
        let per_pos = position_deltas(model, batch, s, &base)?;
        let mut running = 0.0f64;
        for (t, d) in per_pos[..s].iter().enumerate() {
            running = running.max(*d);
            entries.push(ProbeEntry { t, s, max_delta: running });
        }
    }
    let verdict = if entries.iter().all(|e| e.max_delta == 0.0) {
        ProbeVerdict::Causal
    } else {
        ProbeVerdict::FutureSensitive
    };
    Ok(ProbeReport {
        variant: model.cfg.variant.to_string(),
        regime: regime_of(model.cfg.variant).ok().map(|r| r.to_string()),
        entries,
        verdict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub variant: String,
    pub carrier_detached: bool,
    /// Largest gradient entry reaching `W_out` through the carrier path.
    pub carrier_w_out_grad: f64,
    /// Largest gradient entry reaching `E` through the carrier path.
    pub carrier_emb_grad: f64,
    /// Gradient norm of `W_out` through the ordinary LM head.
    pub head_w_out_grad_norm: f64,
    /// Gradient norm of `E` through the ordinary input lookup.
    pub input_emb_grad_norm: f64,
    pub passed: bool,
}

/// Gives the carriers private leaf copies of `W_out` and `E`, backpropagates
/// the LM loss and checks that nothing reaches them while the shared head and
/// embedding still receive gradient.
pub fn detach_gradient_audit(model: &Model, batch: &Batch) -> Result<AuditReport> {
    if !model.cfg.variant.uses_carrier() {
        return Err(KetError::WrongVariant { op: "detach_gradient_audit", variant: model.cfg.variant.to_string() });
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward_lm_graph(&mut g, &p, batch, model.default_hint(batch), ForwardOptions { split_carrier_params: true })?;
    let loss = g.cross_entropy(out.logits, &batch.targets)?;
    let grads = g.backward(loss);
    let (w_leaf, e_leaf) = out.carrier_leaves.expect("carrier variants expose split leaves");
    let head = model.lm_head().expect("carrier variants own an LM head");
    let carrier_w_out_grad = grads.get_or_zeros(w_leaf).max_abs();
    let carrier_emb_grad = grads.get_or_zeros(e_leaf).max_abs();
    let head_w_out_grad_norm = grads.get_or_zeros(p[head]).norm_sq().sqrt();
    let input_emb_grad_norm = grads.get_or_zeros(p[model.token_embedding()]).norm_sq().sqrt();
    Ok(AuditReport {
        variant: model.cfg.variant.to_string(),
        carrier_detached: model.cfg.carrier_detach,
        carrier_w_out_grad,
        carrier_emb_grad,
        head_w_out_grad_norm,
        input_emb_grad_norm,
        passed: carrier_w_out_grad == 0.0 && carrier_emb_grad == 0.0 && head_w_out_grad_norm > 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeakageVerdict {
    Leaking,
    NotLeaking,
}

/// Shuffled-target PPL below this fraction of the causal baseline counts as
/// leakage.
pub const LEAKAGE_RATIO: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub variant: String,
    pub true_ppl: f64,
    pub shuffled_ppl: f64,
    pub baseline_variant: String,
    pub baseline_ppl: f64,
    pub threshold_ratio: f64,
    pub verdict: LeakageVerdict,
}

/// Trains `cfg.variant` on true and on within-batch shuffled targets. The
/// verdict compares the shuffled test PPL with `baseline_ppl`, the true-target
/// PPL of a strictly causal transformer under the same schedule; it is trained
/// here when not supplied.
pub fn leakage_shuffle_test(
    cfg: &ModelConfig,
    corpus: &Corpus,
    train_cfg: &TrainConfig,
    baseline_ppl: Option<f64>,
) -> Result<LeakageReport> {
    let run = |variant: VariantId, shuffle: bool| -> Result<f64> {
        let mut model = build_model(&ModelConfig { variant, ..cfg.clone() })?;
        let tc = TrainConfig { shuffle_targets: shuffle, ..train_cfg.clone() };
        Ok(train(&mut model, corpus, &tc)?.summary.test_ppl)
    };
    let baseline_variant = VariantId::TransformerCausal;
    let baseline_ppl = match baseline_ppl {
        Some(p) => p,
        None => run(baseline_variant, false)?,
    };
    let true_ppl = run(cfg.variant, false)?;
    let shuffled_ppl = run(cfg.variant, true)?;
    let verdict = if shuffled_ppl < LEAKAGE_RATIO * baseline_ppl {
        LeakageVerdict::Leaking
    } else {
        LeakageVerdict::NotLeaking
    };
    Ok(LeakageReport {
        variant: cfg.variant.to_string(),
        true_ppl,
        shuffled_ppl,
        baseline_variant: baseline_variant.to_string(),
        baseline_ppl,
        threshold_ratio: LEAKAGE_RATIO,
        verdict,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    KetQuadratic,
    KetIncidence,
}

impl std::str::FromStr for BlockKind {
    type Err = KetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ket_quadratic" => Ok(Self::KetQuadratic),
            "ket_incidence" => Ok(Self::KetIncidence),
            _ => Err(KetError::InvalidConfig(format!("unknown block kind `{s}` (ket_quadratic, ket_incidence)"))),
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::KetQuadratic => "ket_quadratic",
            Self::KetIncidence => "ket_incidence",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    #[serde(rename = "S")]
    pub seq_len: usize,
    pub seconds: f64,
    pub kind: BlockKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub kind: BlockKind,
    pub d_model: usize,
    pub points: Vec<ScalingPoint>,
    pub exponent: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(KetError::InvalidConfig(format!("a growth fit needs at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(KetError::OutOfRange("growth fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(KetError::InvalidConfig("growth fit needs distinct lengths".into()));
    }
    Ok(sxy / sxx)
}

/// Minimum over trials of the mean single-forward time of one block on a
/// `[1, S, d]` input, each trial repeating until at least 20 ms elapse.
fn time_block(kind: BlockKind, seq_len: usize, d: usize, seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let quad = KetQuad::new(&mut store, &mut init, "quad", d);
    let inc = KetInc::new(&mut store, &mut init, "inc", d);
    let h = init.uniform(&[1, seq_len, d], 1);
    let v = init.uniform(&[1, seq_len, d], 1);
    let simplices = build_edge_simplices(seq_len)?;
    let once = || -> Result<()> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (hv, vv) = (g.constant(h.clone()), g.constant(v.clone()));
        match kind {
            BlockKind::KetQuadratic => ket_quadratic_block(&mut g, &p, &quad, hv, vv, &simplices, true)?,
            BlockKind::KetIncidence => ket_incidence_block(&mut g, &p, &inc, hv, vv, false)?,
        };
        Ok(())
    };
    once()?;
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let start = Instant::now();
        let mut reps = 0u32;
        while reps == 0 || start.elapsed().as_secs_f64() < 0.02 {
            once()?;
            reps += 1;
        }
        best = best.min(start.elapsed().as_secs_f64() / f64::from(reps));
    }
    Ok(best)
}

/// Forward wall time of one block at each length and the fitted log-log
/// growth exponent.
pub fn scaling_measurement(kind: BlockKind, seq_lens: &[usize], d: usize, seed: u64) -> Result<ScalingReport> {
    if seq_lens.len() < 3 {
        return Err(KetError::InvalidConfig(format!("scaling needs at least 3 lengths, got {}", seq_lens.len())));
    }
    let points = seq_lens
        .iter()
        .map(|&s| Ok(ScalingPoint { seq_len: s, seconds: time_block(kind, s, d, seed)?, kind }))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.seq_len as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds).collect();
    Ok(ScalingReport { kind, d_model: d, exponent: fit_loglog_slope(&xs, &ys)?, points })
}

pub fn write_scaling_csv(path: &Path, points: &[ScalingPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
