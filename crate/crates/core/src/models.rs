//! Variant registry, model assembly and checkpoints.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ketlab_autodiff::{Bound, ConvMode, Graph, Mask, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    causal_self_attention, future_hint_inject, geo_mixer, ket_incidence_block, ket_quadratic_block,
    predictive_carrier, topocoend_block, Attention, CarrierConfig, CarrierSource, FeedForward, GeoMixer, Hint,
    KetInc, KetQuad, Linear, Norm, Topo,
};
use crate::corpus::Batch;
use crate::error::{KetError, Result};
use crate::init::Init;
use crate::neighborhoods::build_edge_simplices;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    TransformerCausal,
    TransformerFutureHint,
    GtCausal,
    GtNoncausal,
    GtPredNextDetach,
    GtPredPrevCausalDetach,
    KetQuadCausal,
    KetQuadPd,
    KetIncCausal,
    KetIncPd,
    TopocoendCausal,
    TopocoendPd,
    TfBlock,
    KetBlock,
    TfDenoise,
    KetDenoise,
}

impl VariantId {
    pub const LM: [VariantId; 12] = [
        VariantId::TransformerCausal,
        VariantId::TransformerFutureHint,
        VariantId::GtCausal,
        VariantId::GtNoncausal,
        VariantId::GtPredNextDetach,
        VariantId::GtPredPrevCausalDetach,
        VariantId::KetQuadCausal,
        VariantId::KetQuadPd,
        VariantId::KetIncCausal,
        VariantId::KetIncPd,
        VariantId::TopocoendCausal,
        VariantId::TopocoendPd,
    ];
    pub const BLOCK: [VariantId; 4] = [VariantId::TfBlock, VariantId::KetBlock, VariantId::TfDenoise, VariantId::KetDenoise];

    pub fn all() -> impl Iterator<Item = VariantId> {
        Self::LM.into_iter().chain(Self::BLOCK)
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantId::TransformerCausal => "transformer_causal",
            VariantId::TransformerFutureHint => "transformer_future_hint",
            VariantId::GtCausal => "gt_causal",
            VariantId::GtNoncausal => "gt_noncausal",
            VariantId::GtPredNextDetach => "gt_pred_next_detach",
            VariantId::GtPredPrevCausalDetach => "gt_pred_prev_causal_detach",
            VariantId::KetQuadCausal => "ket_quad_causal",
            VariantId::KetQuadPd => "ket_quad_pd",
            VariantId::KetIncCausal => "ket_inc_causal",
            VariantId::KetIncPd => "ket_inc_pd",
            VariantId::TopocoendCausal => "topocoend_causal",
            VariantId::TopocoendPd => "topocoend_pd",
            VariantId::TfBlock => "tf_block",
            VariantId::KetBlock => "ket_block",
            VariantId::TfDenoise => "tf_denoise",
            VariantId::KetDenoise => "ket_denoise",
        }
    }

    pub fn is_lm(self) -> bool {
        Self::LM.contains(&self)
    }

    pub fn valid_names() -> String {
        Self::all().map(VariantId::name).collect::<Vec<_>>().join(", ")
    }

    /// True when some layer reads a predictive carrier.
    pub fn uses_carrier(self) -> bool {
        matches!(wiring(self).branch, Some((_, Source::Carrier(_))))
    }

    pub fn head(self) -> Head {
        match self {
            VariantId::TfBlock | VariantId::KetBlock => Head::Direct,
            VariantId::TfDenoise | VariantId::KetDenoise => Head::Denoise,
            _ => Head::Lm,
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantId {
    type Err = KetError;

    fn from_str(s: &str) -> Result<Self> {
        Self::all()
            .find(|v| v.name() == s)
            .ok_or_else(|| KetError::UnknownVariant { name: s.to_string(), valid: Self::valid_names() })
    }
}

/// Information regime of an LM variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Strict-causal: every path factors through the prefix.
    C,
    /// Endogenous self-conditioning through detached carriers.
    E,
    /// Augmented context: an exogenous future-informative channel.
    A,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::C => "C",
            Regime::E => "E",
            Regime::A => "A",
        })
    }
}

pub fn regime_of(variant: VariantId) -> Result<Regime> {
    use VariantId::*;
    Ok(match variant {
        TransformerCausal | GtCausal | GtPredPrevCausalDetach | KetQuadCausal | KetIncCausal | TopocoendCausal => Regime::C,
        GtPredNextDetach | KetQuadPd | KetIncPd | TopocoendPd => Regime::E,
        GtNoncausal | TransformerFutureHint => Regime::A,
        TfBlock | KetBlock | TfDenoise | KetDenoise => {
            return Err(KetError::WrongVariant { op: "regime_of", variant: variant.to_string() })
        }
    })
}

/// Output read-out of a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Lm,
    Direct,
    Denoise,
}

/// What a layer's variant branch aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Hidden,
    Carrier(CarrierSource),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Geo(ConvMode),
    KetQuad { causal: bool },
    KetInc { causal: bool },
    Topo { causal: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wiring {
    pub branch: Option<(BranchKind, Source)>,
    pub hint: bool,
}

pub fn wiring(variant: VariantId) -> Wiring {
    use BranchKind::*;
    use VariantId::*;
    let next = Source::Carrier(CarrierSource::PredNext);
    let branch = match variant {
        TransformerCausal | TransformerFutureHint | TfBlock | TfDenoise => None,
        GtCausal => Some((Geo(ConvMode::Causal), Source::Hidden)),
        GtNoncausal => Some((Geo(ConvMode::Symmetric), Source::Hidden)),
        GtPredNextDetach => Some((Geo(ConvMode::Symmetric), next)),
        GtPredPrevCausalDetach => Some((Geo(ConvMode::Causal), Source::Carrier(CarrierSource::PredPrev))),
        KetQuadCausal => Some((KetQuad { causal: true }, Source::Hidden)),
        KetQuadPd => Some((KetQuad { causal: false }, next)),
        KetIncCausal | KetBlock | KetDenoise => Some((KetInc { causal: true }, Source::Hidden)),
        KetIncPd => Some((KetInc { causal: false }, next)),
        TopocoendCausal => Some((Topo { causal: true }, Source::Hidden)),
        TopocoendPd => Some((Topo { causal: false }, next)),
    };
    Wiring { branch, hint: variant == TransformerFutureHint }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantId,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub topo_k: usize,
    pub topo_dim: usize,
    pub topo_tau: f64,
    pub carrier_temperature: f64,
    pub block_size: usize,
    pub conv_kernel: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    /// Negative-control switch for the gradient audit; true for every real model.
    pub carrier_detach: bool,
}

impl ModelConfig {
    pub fn new(variant: VariantId, vocab_size: usize) -> Self {
        Self {
            variant,
            layers: 2,
            d_model: 64,
            heads: 4,
            seq_len: 64,
            vocab_size,
            topo_k: 16,
            topo_dim: 16,
            topo_tau: 1.0,
            carrier_temperature: 1.0,
            block_size: 4,
            conv_kernel: 3,
            ffn_mult: 4,
            seed: 7,
            carrier_detach: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KetError::InvalidConfig(m));
        if self.layers == 0 || self.d_model == 0 || self.ffn_mult == 0 || self.topo_dim == 0 {
            return bad("layers, d_model, ffn_mult and topo_dim must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.seq_len < 2 {
            return bad(format!("context length must be at least 2, got {}", self.seq_len));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocabulary must hold at least 2 tokens, got {}", self.vocab_size));
        }
        if self.topo_k == 0 || !(self.topo_tau > 0.0) || !(self.carrier_temperature > 0.0) {
            return bad("topo_k, topo_tau and carrier_temperature must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv kernel must be odd, got {}", self.conv_kernel));
        }
        if !self.variant.is_lm() && (self.block_size == 0 || self.block_size >= self.seq_len) {
            return bad(format!("block size {} must lie in 1..{}", self.block_size, self.seq_len));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Branch {
    Geo(GeoMixer, ConvMode),
    Quad(KetQuad, bool),
    Inc(KetInc, bool),
    Topo(Topo, bool),
}

#[derive(Clone, Debug)]
struct Layer {
    attn: Attention,
    ln1: Norm,
    ffn: FeedForward,
    ln2: Norm,
    branch: Option<(Branch, Source)>,
}

#[derive(Clone, Debug)]
struct Net {
    tok_emb: ParamId,
    pos_emb: ParamId,
    hint: Option<Hint>,
    noise_emb: Option<ParamId>,
    layers: Vec<Layer>,
    lm_head: Option<ParamId>,
    block_heads: Vec<Linear>,
}

/// Number of noise-step embeddings in denoising models.
pub const NOISE_STEPS: usize = 8;

/// A built model: configuration, parameters and the PRNG stream that drives
/// its training.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub rng: ChaCha8Rng,
    net: Net,
}

/// Extra switches for [`Model::forward_lm_graph`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Give the carrier its own leaf copies of `W_out` and `E` so the gradient
    /// reaching the carrier path can be read separately.
    pub split_carrier_params: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// `(W_out, E)` leaves used by the carriers when split.
    pub carrier_leaves: Option<(Var, Var)>,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let (d, v, s) = (cfg.d_model, cfg.vocab_size, cfg.seq_len);
    let mut store = ParamStore::new();
    let mut init = Init::new(cfg.seed);
    let w = wiring(cfg.variant);
    let head = cfg.variant.head();

    let tok_emb = store.add("tok_emb", init.normal(&[v, d], 0.02));
    let pos_emb = store.add("pos_emb", init.normal(&[s, d], 0.02));
    let hint = w.hint.then(|| Hint::new(&mut store, &mut init, "hint", d));
    let noise_emb = (head == Head::Denoise).then(|| store.add("noise_emb", init.normal(&[NOISE_STEPS, d], 0.02)));

    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let name = format!("layer{l}");
        let attn = Attention::new(&mut store, &mut init, &format!("{name}.attn"), d, cfg.heads)?;
        let ln1 = Norm::new(&mut store, &format!("{name}.ln1"), d);
        let bname = format!("{name}.branch");
        let branch = w.branch.map(|(kind, src)| {
            let b = match kind {
                BranchKind::Geo(mode) => Branch::Geo(GeoMixer::new(&mut store, &mut init, &bname, d, cfg.conv_kernel), mode),
                BranchKind::KetQuad { causal } => Branch::Quad(KetQuad::new(&mut store, &mut init, &bname, d), causal),
                BranchKind::KetInc { causal } => Branch::Inc(KetInc::new(&mut store, &mut init, &bname, d), causal),
                BranchKind::Topo { causal } => {
                    let k = cfg.topo_k.min(s);
                    Branch::Topo(Topo::new(&mut store, &mut init, &bname, d, cfg.topo_dim, k, cfg.topo_tau), causal)
                }
            };
            (b, src)
        });
        let ffn = FeedForward::new(&mut store, &mut init, &format!("{name}.ffn"), d, cfg.ffn_mult * d);
        let ln2 = Norm::new(&mut store, &format!("{name}.ln2"), d);
        layers.push(Layer { attn, ln1, ffn, ln2, branch });
    }

    let lm_head = (head != Head::Direct).then(|| store.add("lm_head.w", init.uniform(&[d, v], d)));
    let block_heads = if head == Head::Direct {
        (0..cfg.block_size)
            .map(|j| Linear::new(&mut store, &mut init, &format!("block_head{j}"), d, v, true))
            .collect()
    } else {
        Vec::new()
    };

    Ok(Model {
        cfg: cfg.clone(),
        params: store,
        rng: init.into_rng(),
        net: Net { tok_emb, pos_emb, hint, noise_emb, layers, lm_head, block_heads },
    })
}

impl Model {
    pub fn variant(&self) -> VariantId {
        self.cfg.variant
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g)
    }

    pub fn token_embedding(&self) -> ParamId {
        self.net.tok_emb
    }

    pub fn lm_head(&self) -> Option<ParamId> {
        self.net.lm_head
    }

    pub fn noise_embedding(&self) -> Option<ParamId> {
        self.net.noise_emb
    }

    /// Embeddings plus layers; returns `[B, S, d]` hidden states.
    #[allow(clippy::too_many_arguments)]
    fn trunk(
        &self,
        g: &mut Graph,
        p: &Bound,
        ids: &[usize],
        b: usize,
        s: usize,
        hint: Option<&[usize]>,
        extra: Option<Var>,
        carrier_params: Option<(Var, Var)>,
    ) -> Result<Var> {
        if s > self.cfg.seq_len || s == 0 || ids.len() != b * s {
            return Err(KetError::InvalidConfig(format!(
                "{} ids do not form {b} rows of length {s} (max {})",
                ids.len(),
                self.cfg.seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(KetError::OutOfRange(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let net = &self.net;
        let emb = p[net.tok_emb];
        let mut x = g.embedding(emb, ids, &[b, s])?;
        let positions: Vec<usize> = (0..s).collect();
        let pos = g.embedding(p[net.pos_emb], &positions, &[s])?;
        x = g.add_broadcast(x, pos)?;
        if let (Some(h), Some(gold)) = (&net.hint, hint) {
            x = future_hint_inject(g, p, h, x, gold, emb)?;
        }
        if let Some(e) = extra {
            x = g.add(x, e)?;
        }

        let mask = Mask::causal(s);
        let simplices = build_edge_simplices(s)?;
        let (w_out, e_car) = match (carrier_params, net.lm_head) {
            (Some(pair), _) => (Some(pair.0), pair.1),
            (None, Some(head)) => (Some(p[head]), emb),
            (None, None) => (None, emb),
        };
        for layer in &net.layers {
            let att = causal_self_attention(g, p, &layer.attn, x, &mask)?;
            let r = g.add(x, att)?;
            let a = layer.ln1.forward(g, p, r)?;
            let Some((branch, src)) = &layer.branch else {
                let f = layer.ffn.forward(g, p, a)?;
                let r = g.add(a, f)?;
                x = layer.ln2.forward(g, p, r)?;
                continue;
            };
            let v = match src {
                Source::Hidden => a,
                Source::Carrier(cs) => {
                    let w_out = w_out.ok_or_else(|| KetError::WrongVariant {
                        op: "predictive_carrier",
                        variant: self.cfg.variant.to_string(),
                    })?;
                    let cfg = CarrierConfig {
                        temperature: self.cfg.carrier_temperature,
                        source: *cs,
                        detach: self.cfg.carrier_detach,
                    };
                    predictive_carrier(g, a, w_out, e_car, &cfg)?
                }
            };
            x = match branch {
                Branch::Geo(mixer, mode) => {
                    let gb = geo_mixer(g, p, mixer, v, *mode)?;
                    let f = layer.ffn.forward(g, p, a)?;
                    let r = g.add(a, f)?;
                    let r = g.add(r, gb)?;
                    layer.ln2.forward(g, p, r)?
                }
                _ => {
                    let bo = match branch {
                        Branch::Quad(blk, causal) => ket_quadratic_block(g, p, blk, a, v, &simplices, *causal)?,
                        Branch::Inc(blk, causal) => ket_incidence_block(g, p, blk, a, v, !causal)?,
                        Branch::Topo(blk, causal) => topocoend_block(g, p, blk, a, v, *causal)?,
                        Branch::Geo(..) => unreachable!("handled above"),
                    };
                    let f = layer.ffn.forward(g, p, bo)?;
                    let r = g.add(bo, f)?;
                    layer.ln2.forward(g, p, r)?
                }
            };
        }
        Ok(x)
    }

    /// Next-token logits `[B, S, V]` recorded on `g`. `hint` holds the gold
    /// next tokens and must be given exactly for the hint variant.
    pub fn forward_lm_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        hint: Option<&[usize]>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        if self.cfg.variant.head() != Head::Lm {
            return Err(KetError::WrongVariant { op: "forward_lm", variant: self.cfg.variant.to_string() });
        }
        let wants_hint = self.net.hint.is_some();
        match hint {
            None if wants_hint => {
                return Err(KetError::InvalidConfig(format!("{} needs the gold next-token hint", self.cfg.variant)))
            }
            Some(_) if !wants_hint => {
                return Err(KetError::InvalidConfig(format!("{} takes no hint", self.cfg.variant)))
            }
            Some(h) if h.len() != batch.inputs.len() => {
                return Err(KetError::InvalidConfig("hint length differs from the batch".into()))
            }
            _ => {}
        }
        let head = self.net.lm_head.expect("LM variants own an output head");
        let carrier_leaves = (opts.split_carrier_params && self.cfg.variant.uses_carrier()).then(|| {
            let w = g.param(self.params.get(head).clone());
            let e = g.param(self.params.get(self.net.tok_emb).clone());
            (w, e)
        });
        let h = self.trunk(g, p, &batch.inputs, batch.batch_size, batch.seq_len, hint, None, carrier_leaves)?;
        let logits = g.matmul(h, p[head])?;
        Ok(ForwardOutput { logits, carrier_leaves })
    }

    /// Hint for `batch` when the variant takes one: its targets.
    pub fn default_hint<'a>(&self, batch: &'a Batch) -> Option<&'a [usize]> {
        self.net.hint.is_some().then_some(batch.targets.as_slice())
    }

    /// Logits without gradient bookkeeping beyond the tape itself.
    pub fn forward_lm(&self, batch: &Batch, hint: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let out = self.forward_lm_graph(&mut g, &p, batch, hint, ForwardOptions::default())?;
        Ok(g.value(out.logits).clone())
    }

    /// Direct block logits `[B, Bk, V]` from the state at `split - 1` of each
    /// row; only the first `split` tokens of each row are read.
    pub fn forward_block_direct_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        context: &[usize],
        seq_len: usize,
        splits: &[usize],
    ) -> Result<Var> {
        if self.cfg.variant.head() != Head::Direct {
            return Err(KetError::WrongVariant { op: "block_forward_direct", variant: self.cfg.variant.to_string() });
        }
        let b = splits.len();
        let mut ids = context.to_vec();
        check_splits(splits, seq_len, 0, ids.len())?;
        for (row, &c) in splits.iter().enumerate() {
            ids[row * seq_len + c..(row + 1) * seq_len].fill(0);
        }
        let h = self.trunk(g, p, &ids, b, seq_len, None, None, None)?;
        let last: Vec<usize> = splits.iter().map(|&c| c - 1).collect();
        let state = g.select_rows(h, &last)?;
        let mut out = self.net.block_heads[0].forward(g, p, state)?;
        for head in &self.net.block_heads[1..] {
            let l = head.forward(g, p, state)?;
            out = g.concat_seq(out, l)?;
        }
        Ok(out)
    }

    /// Denoising logits `[B, Bk, V]`. Row `i` holds gold context before
    /// `splits[i]` and the corrupted block after it; the block positions also
    /// receive the embedding of noise step `step`. The logit row for offset
    /// `j` is read at the position holding the corrupted token `j`.
    pub fn forward_block_denoise_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        context: &[usize],
        seq_len: usize,
        splits: &[usize],
        corrupted: &[usize],
        step: usize,
    ) -> Result<Var> {
        if self.cfg.variant.head() != Head::Denoise {
            return Err(KetError::WrongVariant { op: "block_forward_denoise", variant: self.cfg.variant.to_string() });
        }
        if !(1..=NOISE_STEPS).contains(&step) {
            return Err(KetError::OutOfRange(format!("noise step {step} outside 1..={NOISE_STEPS}")));
        }
        let bk = self.cfg.block_size;
        let b = splits.len();
        check_splits(splits, seq_len, bk, context.len())?;
        if corrupted.len() != b * bk {
            return Err(KetError::InvalidConfig("corrupted block has the wrong length".into()));
        }
        let d = self.cfg.d_model;
        let mut ids = context.to_vec();
        let mut noise_mask = vec![0.0; b * seq_len * d];
        let mut read = Vec::with_capacity(b * bk);
        for (row, &c) in splits.iter().enumerate() {
            let base = row * seq_len;
            ids[base + c..base + c + bk].copy_from_slice(&corrupted[row * bk..(row + 1) * bk]);
            ids[base + c + bk..base + seq_len].fill(0);
            noise_mask[(base + c) * d..(base + c + bk) * d].fill(1.0);
            read.extend(c..c + bk);
        }
        let noise_id = self.net.noise_emb.expect("denoise variants own noise embeddings");
        let steps = vec![step - 1; b * seq_len];
        let noise = g.embedding(p[noise_id], &steps, &[b, seq_len])?;
        let gate = g.constant(Tensor::new(vec![b, seq_len, d], noise_mask)?);
        let noise = g.mul(noise, gate)?;
        let h = self.trunk(g, p, &ids, b, seq_len, None, Some(noise), None)?;
        let rows = g.select_rows(h, &read)?;
        let head = self.net.lm_head.expect("denoise variants own an output head");
        Ok(g.matmul(rows, p[head])?)
    }
}

fn check_splits(splits: &[usize], seq_len: usize, block: usize, ids: usize) -> Result<()> {
    if splits.is_empty() || ids != splits.len() * seq_len {
        return Err(KetError::InvalidConfig(format!("{ids} ids do not form {} rows of {seq_len}", splits.len())));
    }
    if let Some(&c) = splits.iter().find(|&&c| c == 0 || c + block > seq_len) {
        return Err(KetError::OutOfRange(format!("split {c} leaves no room in a window of {seq_len}")));
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"KETLABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u64(w: &mut impl Write, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_f64(w: &mut impl Write, x: f64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| KetError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn take_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(take::<8>(r)?))
}

fn take_usize(r: &mut impl Read) -> Result<usize> {
    usize::try_from(take_u64(r)?).map_err(|_| KetError::Checkpoint("size field overflows".into()))
}

fn take_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(take::<8>(r)?))
}

impl Model {
    /// Little-endian layout: magic, version (u32), variant name (u64 length +
    /// UTF-8), the numeric config fields, parameter count and values (f64),
    /// then the PRNG seed (32 bytes), stream (u64) and word position (u128).
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.cfg;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let name = c.variant.name().as_bytes();
        put_u64(w, name.len() as u64)?;
        w.write_all(name)?;
        for x in [c.layers, c.d_model, c.heads, c.seq_len, c.vocab_size, c.topo_k, c.topo_dim] {
            put_u64(w, x as u64)?;
        }
        put_f64(w, c.topo_tau)?;
        put_f64(w, c.carrier_temperature)?;
        for x in [c.block_size, c.conv_kernel, c.ffn_mult] {
            put_u64(w, x as u64)?;
        }
        put_u64(w, c.seed)?;
        w.write_all(&[u8::from(c.carrier_detach)])?;
        let flat = self.params.to_flat();
        put_u64(w, flat.len() as u64)?;
        for x in flat {
            put_f64(w, x)?;
        }
        w.write_all(&self.rng.get_seed())?;
        put_u64(w, self.rng.get_stream())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        if &take::<8>(r)? != MAGIC {
            return Err(KetError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take::<4>(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(KetError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = take_usize(r)?;
        if len > 256 {
            return Err(KetError::Checkpoint("variant name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| KetError::Checkpoint(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|_| KetError::Checkpoint("variant name is not UTF-8".into()))?;
        let variant: VariantId = name.parse()?;
        let mut cfg = ModelConfig::new(variant, 2);
        cfg.layers = take_usize(r)?;
        cfg.d_model = take_usize(r)?;
        cfg.heads = take_usize(r)?;
        cfg.seq_len = take_usize(r)?;
        cfg.vocab_size = take_usize(r)?;
        cfg.topo_k = take_usize(r)?;
        cfg.topo_dim = take_usize(r)?;
        cfg.topo_tau = take_f64(r)?;
        cfg.carrier_temperature = take_f64(r)?;
        cfg.block_size = take_usize(r)?;
        cfg.conv_kernel = take_usize(r)?;
        cfg.ffn_mult = take_usize(r)?;
        cfg.seed = take_u64(r)?;
        cfg.carrier_detach = take::<1>(r)?[0] != 0;
        let mut model = build_model(&cfg)?;
        let n = take_usize(r)?;
        if n != model.params.num_scalars() {
            return Err(KetError::Checkpoint(format!(
                "{n} parameters stored but the configuration needs {}",
                model.params.num_scalars()
            )));
        }
        let flat = (0..n).map(|_| take_f64(r)).collect::<Result<Vec<f64>>>()?;
        model.params.load_flat(&flat)?;
        let seed = take::<32>(r)?;
        let stream = take_u64(r)?;
        let word_pos = u128::from_le_bytes(take::<16>(r)?);
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        model.rng = rng;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: VariantId) -> ModelConfig {
        ModelConfig { d_model: 8, heads: 2, seq_len: 6, layers: 1, topo_k: 3, topo_dim: 4, ..ModelConfig::new(variant, 11) }
    }

    #[test]
    fn names_round_trip() {
        for v in VariantId::all() {
            assert_eq!(v.name().parse::<VariantId>().unwrap(), v);
        }
        let err = "bogus".parse::<VariantId>().unwrap_err().to_string();
        assert!(err.contains("ket_inc_pd"));
    }

    #[test]
    fn regime_table() {
        assert_eq!(regime_of(VariantId::GtPredPrevCausalDetach).unwrap(), Regime::C);
        assert_eq!(regime_of(VariantId::GtPredNextDetach).unwrap(), Regime::E);
        assert_eq!(regime_of(VariantId::GtNoncausal).unwrap(), Regime::A);
        assert!(regime_of(VariantId::TfDenoise).is_err());
        let counts = VariantId::LM.iter().fold([0; 3], |mut acc, &v| {
            acc[regime_of(v).unwrap() as usize] += 1;
            acc
        });
        assert_eq!(counts, [6, 4, 2]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(&tiny(VariantId::KetQuadPd)).unwrap();
        let b = build_model(&tiny(VariantId::KetQuadPd)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.num_params(), b.num_params());
    }

    #[test]
    fn parameter_counts() {
        let (d, v, s, l) = (8, 11, 6, 1);
        let base = build_model(&tiny(VariantId::TransformerCausal)).unwrap();
        let layer = 4 * d * d + 2 * (2 * d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        assert_eq!(base.num_params(), v * d + s * d + l * layer + d * v);
        assert!(base.params.ids().all(|id| !base.params.name(id).contains("branch")));
        let quad = build_model(&tiny(VariantId::KetQuadCausal)).unwrap();
        let extra = 2 * d * d + 2 * d * d + (d * 2 * d + 2 * d) + (2 * d * d + d) + 2 * d;
        assert_eq!(quad.num_params(), base.num_params() + l * extra);
    }

    #[test]
    fn logits_shape_and_finiteness() {
        for v in VariantId::LM {
            let model = build_model(&tiny(v)).unwrap();
            let batch = Batch { batch_size: 1, seq_len: 2, inputs: vec![3, 4], targets: vec![4, 5] };
            let logits = model.forward_lm(&batch, model.default_hint(&batch)).unwrap();
            assert_eq!(logits.shape(), &[1, 2, 11]);
            assert!(logits.is_finite());
        }
    }

    #[test]
    fn hint_is_required_exactly_for_the_hint_variant() {
        let batch = Batch { batch_size: 1, seq_len: 2, inputs: vec![3, 4], targets: vec![4, 5] };
        let hinted = build_model(&tiny(VariantId::TransformerFutureHint)).unwrap();
        assert!(hinted.forward_lm(&batch, None).is_err());
        let plain = build_model(&tiny(VariantId::TransformerCausal)).unwrap();
        assert!(plain.forward_lm(&batch, Some(&batch.targets)).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny(VariantId::TransformerCausal);
        cfg.heads = 3;
        assert!(build_model(&cfg).is_err());
        let mut cfg = tiny(VariantId::TransformerCausal);
        cfg.seq_len = 1;
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = build_model(&tiny(VariantId::TopocoendPd)).unwrap();
        rand::Rng::random::<u64>(&mut model.rng);
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        let back = Model::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.params, model.params);
        assert_eq!(back.rng, model.rng);
        buf[0] = b'X';
        assert!(Model::read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
