//! Layer-level pieces: attention, feed-forward, geometric mixer, predictive
//! carriers, the quadratic and incidence Kan blocks, TopoCoend aggregation and
//! the gold-future hint.
//!
//! Every function records onto a [`Graph`] using parameters bound through
//! [`Bound`]. Sequence tensors are `[B, S, d]`.

use ketlab_autodiff::{ConvMode, Graph, Mask, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use serde::{Deserialize, Serialize};

use crate::error::{KetError, Result};
use crate::init::Init;
use crate::neighborhoods::{knn_selection, SimplexSet};

pub use ketlab_autodiff::Bound;

/// `x W (+ b)` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.w"), init.uniform(&[d_in, d_out], d_in));
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        Ok(match self.bias {
            Some(b) => g.add_broadcast(y, p[b])?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gain], p[self.bias], LAYER_NORM_EPS)?)
    }
}

/// Multi-head self-attention with output projection; no residual.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(KetError::InvalidConfig(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            q: Linear::new(store, init, &format!("{name}.q"), d, d, false),
            k: Linear::new(store, init, &format!("{name}.k"), d, d, false),
            v: Linear::new(store, init, &format!("{name}.v"), d, d, false),
            o: Linear::new(store, init, &format!("{name}.o"), d, d, false),
        })
    }
}

/// Scaled dot-product attention restricted by `mask` (`[S, S]`, normally
/// causal), followed by the output projection.
pub fn causal_self_attention(g: &mut Graph, p: &Bound, attn: &Attention, h: Var, mask: &Mask) -> Result<Var> {
    let d = *g.shape(h).last().unwrap_or(&0);
    if attn.heads == 0 || !d.is_multiple_of(attn.heads) {
        return Err(KetError::InvalidConfig(format!("width {d} is not divisible by {} heads", attn.heads)));
    }
    let dh = d / attn.heads;
    let q = attn.q.forward(g, p, h)?;
    let k = attn.k.forward(g, p, h)?;
    let v = attn.v.forward(g, p, h)?;
    let q = g.split_heads(q, attn.heads)?;
    let k = g.split_heads(k, attn.heads)?;
    let v = g.split_heads(v, attn.heads)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let w = g.masked_softmax(scores, mask)?;
    let mixed = g.bmm(w, v, false)?;
    let merged = g.merge_heads(mixed, attn.heads)?;
    attn.o.forward(g, p, merged)
}

/// Position-wise `W2 gelu(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), d, hidden, true),
            down: Linear::new(store, init, &format!("{name}.down"), hidden, d, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let u = self.up.forward(g, p, x)?;
        let u = g.gelu(u);
        self.down.forward(g, p, u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarrierSource {
    /// Row `t` carries `p_t E`, the prediction made at `t` for token `t + 1`.
    PredNext,
    /// Row `t` carries `p_{t-1} E`; row 0 is zero.
    PredPrev,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarrierConfig {
    pub temperature: f64,
    pub source: CarrierSource,
    /// Always true in real models; false only to build the negative control
    /// of the gradient audit.
    pub detach: bool,
}

impl CarrierConfig {
    pub fn new(source: CarrierSource) -> Self {
        Self { temperature: 1.0, source, detach: true }
    }
}

/// `detach(softmax(h W_out / T) E)`, optionally shifted one step right.
pub fn predictive_carrier(g: &mut Graph, h: Var, w_out: Var, emb: Var, cfg: &CarrierConfig) -> Result<Var> {
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(KetError::OutOfRange(format!("carrier temperature must be positive, got {}", cfg.temperature)));
    }
    let logits = g.matmul(h, w_out)?;
    let logits = g.scale(logits, 1.0 / cfg.temperature);
    let probs = g.softmax(logits)?;
    let mut carrier = g.matmul(probs, emb)?;
    if cfg.source == CarrierSource::PredPrev {
        carrier = g.shift_seq(carrier, 1)?;
    }
    Ok(if cfg.detach { g.detach(carrier) } else { carrier })
}

/// Depthwise 1D convolution, pointwise linear map, GELU.
#[derive(Clone, Debug)]
pub struct GeoMixer {
    pub kernel: ParamId,
    pub proj: Linear,
}

impl GeoMixer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, kernel_size: usize) -> Self {
        Self {
            kernel: store.add(format!("{name}.kernel"), init.uniform(&[kernel_size, d], kernel_size)),
            proj: Linear::new(store, init, &format!("{name}.proj"), d, d, false),
        }
    }
}

pub fn geo_mixer(g: &mut Graph, p: &Bound, mixer: &GeoMixer, u: Var, mode: ConvMode) -> Result<Var> {
    let c = g.depthwise_conv1d(u, p[mixer.kernel], mode)?;
    let y = mixer.proj.forward(g, p, c)?;
    Ok(g.gelu(y))
}

/// Parameters of the quadratic Kan block.
#[derive(Clone, Debug)]
pub struct KetQuad {
    pub w_q: Linear,
    pub w_k: Linear,
    pub psi: Linear,
    pub mlp: FeedForward,
    pub norm: Norm,
}

impl KetQuad {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            w_q: Linear::new(store, init, &format!("{name}.wq"), d, d, false),
            w_k: Linear::new(store, init, &format!("{name}.wk"), d, d, false),
            psi: Linear::new(store, init, &format!("{name}.psi"), 2 * d, d, false),
            mlp: FeedForward::new(store, init, &format!("{name}.mlp"), d, 2 * d),
            norm: Norm::new(store, &format!("{name}.norm"), d),
        }
    }
}

/// `psi([v_{t-1}, v_t])` for every `t` (row 0 pairs with a zero vector).
fn edge_features(g: &mut Graph, p: &Bound, psi: &Linear, v: Var) -> Result<Var> {
    let prev = g.shift_seq(v, 1)?;
    let pair = g.concat_last(prev, v)?;
    psi.forward(g, p, pair)
}

fn seq_shape(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [b, s, d] => Ok((b, s, d)),
        ref other => Err(KetError::InvalidConfig(format!("expected [B, S, d], got {other:?}"))),
    }
}

/// Attention over token and edge simplices: keys `W_K V(sigma)`, weights
/// softmax over `I_t` (or all of `I`), message `sum w V(sigma)`, output
/// `LN(h + MLP(m))`.
pub fn ket_quadratic_block(
    g: &mut Graph,
    p: &Bound,
    blk: &KetQuad,
    h: Var,
    v: Var,
    simplices: &SimplexSet,
    causal: bool,
) -> Result<Var> {
    let (_, s, _) = seq_shape(g, h)?;
    if g.shape(v) != g.shape(h) {
        return Err(KetError::InvalidConfig("values and hidden states differ in shape".into()));
    }
    if simplices.seq_len() != s || !simplices.is_edge_layout() {
        return Err(KetError::InvalidConfig(format!("simplex set does not match the edge layout over {s} tokens")));
    }
    let v_sigma = if s > 1 {
        let e = edge_features(g, p, &blk.psi, v)?;
        let e = g.slice_seq(e, 1, s - 1)?;
        g.concat_seq(v, e)?
    } else {
        v
    };
    let keys = blk.w_k.forward(g, p, v_sigma)?;
    let queries = blk.w_q.forward(g, p, h)?;
    let scores = g.bmm(queries, keys, true)?;
    let w = g.masked_softmax(scores, &simplices.mask(causal))?;
    let m = g.bmm(w, v_sigma, false)?;
    let m = blk.mlp.forward(g, p, m)?;
    let r = g.add(h, m)?;
    blk.norm.forward(g, p, r)
}

/// Parameters of the incidence-restricted Kan block.
#[derive(Clone, Debug)]
pub struct KetInc {
    pub psi: Linear,
    pub phi: Linear,
    pub norm: Norm,
}

impl KetInc {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            psi: Linear::new(store, init, &format!("{name}.psi"), 2 * d, d, false),
            phi: Linear::new(store, init, &format!("{name}.phi"), d, d, false),
            norm: Norm::new(store, &format!("{name}.norm"), d),
        }
    }
}

/// `m_t = phi(e_t)[t >= 1] + phi(e_{t+1})[noncausal, t + 1 < S]` with
/// `e_t = psi([v_{t-1}, v_t])`; output `LN(h + m)`.
pub fn ket_incidence_block(g: &mut Graph, p: &Bound, blk: &KetInc, h: Var, v: Var, noncausal: bool) -> Result<Var> {
    let (b, s, d) = seq_shape(g, h)?;
    if g.shape(v) != g.shape(h) {
        return Err(KetError::InvalidConfig("values and hidden states differ in shape".into()));
    }
    if s == 1 {
        return blk.norm.forward(g, p, h);
    }
    let e = edge_features(g, p, &blk.psi, v)?;
    let msg = blk.phi.forward(g, p, e)?;
    let body = g.slice_seq(msg, 1, s - 1)?;
    let zero = g.constant(Tensor::zeros(&[b, 1, d]));
    let mut m = g.concat_seq(zero, body)?;
    if noncausal {
        let ahead = g.concat_seq(body, zero)?;
        m = g.add(m, ahead)?;
    }
    let r = g.add(h, m)?;
    blk.norm.forward(g, p, r)
}

/// TopoCoend parameters: latent projection `pi`, value map `W_V`, norm.
#[derive(Clone, Debug)]
pub struct Topo {
    pub pi: Linear,
    pub w_v: Linear,
    pub norm: Norm,
    pub k: usize,
    pub tau: f64,
}

impl Topo {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        topo_dim: usize,
        k: usize,
        tau: f64,
    ) -> Self {
        Self {
            pi: Linear::new(store, init, &format!("{name}.pi"), d, topo_dim, false),
            w_v: Linear::new(store, init, &format!("{name}.wv"), d, d, false),
            norm: Norm::new(store, &format!("{name}.norm"), d),
            k,
            tau,
        }
    }
}

/// `LN(h_t + sum_s w_topo(t, s) v_s W_V)` over the fuzzy kNN graph of
/// `z = v pi`.
pub fn topocoend_block(g: &mut Graph, p: &Bound, blk: &Topo, h: Var, v: Var, causal: bool) -> Result<Var> {
    let (b, s, _) = seq_shape(g, h)?;
    if !(blk.tau > 0.0) || blk.k == 0 {
        return Err(KetError::OutOfRange("TopoCoend needs k >= 1 and tau > 0".into()));
    }
    let z = blk.pi.forward(g, p, v)?;
    let dist = g.pairwise_sq_dist(z)?;
    let mut allowed = Vec::with_capacity(b * s * s);
    for rows in g.value(dist).data().chunks(s * s) {
        allowed.extend(knn_selection(rows, s, blk.k, causal));
    }
    let mask = Mask::new(vec![b, s, s], allowed)?;
    let logits = g.scale(dist, -1.0 / blk.tau);
    let w = g.masked_softmax(logits, &mask)?;
    let vals = blk.w_v.forward(g, p, v)?;
    let agg = g.bmm(w, vals, false)?;
    let r = g.add(h, agg)?;
    blk.norm.forward(g, p, r)
}

/// Projection applied to the embedding of the gold next token.
#[derive(Clone, Debug)]
pub struct Hint {
    pub proj: Linear,
}

impl Hint {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Self {
        Self { proj: Linear::new(store, init, &format!("{name}.proj"), d, d, false) }
    }
}

/// `h_t + E[gold_next_t] W_hint`; `gold_next` is `B x S` row-major.
pub fn future_hint_inject(g: &mut Graph, p: &Bound, hint: &Hint, h: Var, gold_next: &[usize], emb: Var) -> Result<Var> {
    let (b, s, _) = seq_shape(g, h)?;
    let looked = g.embedding(emb, gold_next, &[b, s])?;
    let injected = hint.proj.forward(g, p, looked)?;
    Ok(g.add(h, injected)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighborhoods::build_edge_simplices;

    fn setup(seed: u64) -> (ParamStore, Init) {
        (ParamStore::new(), Init::new(seed))
    }

    fn input(init: &mut Init, b: usize, s: usize, d: usize) -> Tensor {
        init.uniform(&[b, s, d], 1)
    }

    fn rows_equal(a: &Tensor, b: &Tensor, d: usize, upto: usize) -> bool {
        a.data()[..(upto + 1) * d] == b.data()[..(upto + 1) * d]
    }

    #[test]
    fn attention_single_position_and_uniform_case() {
        let (mut store, mut init) = setup(1);
        let attn = Attention::new(&mut store, &mut init, "a", 4, 2).unwrap();
        for lin in [&attn.q, &attn.k] {
            *store.get_mut(lin.weight) = Tensor::zeros(&[4, 4]);
        }
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        *store.get_mut(attn.v.weight) = eye.clone();
        *store.get_mut(attn.o.weight) = eye;
        let x = input(&mut init, 1, 3, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h = g.constant(x.clone());
        let y = causal_self_attention(&mut g, &p, &attn, h, &Mask::causal(3)).unwrap();
        let out = g.value(y).data();
        for t in 0..3 {
            for c in 0..4 {
                let mean = (0..=t).map(|s| x.data()[s * 4 + c]).sum::<f64>() / (t + 1) as f64;
                assert!((out[t * 4 + c] - mean).abs() < 1e-15);
            }
        }
        assert!(Attention::new(&mut store, &mut init, "bad", 6, 4).is_err());
    }

    #[test]
    fn carrier_shift_and_high_temperature_limit() {
        let mut init = Init::new(2);
        let h = input(&mut init, 1, 3, 4);
        let w_out = init.uniform(&[4, 5], 4);
        let emb = init.uniform(&[5, 4], 1);
        let run = |cfg: CarrierConfig| {
            let mut g = Graph::new();
            let (hv, wv, ev) = (g.constant(h.clone()), g.constant(w_out.clone()), g.constant(emb.clone()));
            let c = predictive_carrier(&mut g, hv, wv, ev, &cfg).unwrap();
            g.value(c).clone()
        };
        let next = run(CarrierConfig::new(CarrierSource::PredNext));
        let prev = run(CarrierConfig::new(CarrierSource::PredPrev));
        assert!(prev.data()[..4].iter().all(|&x| x == 0.0));
        assert_eq!(&prev.data()[4..], &next.data()[..8]);

        let hot = run(CarrierConfig { temperature: 1e12, ..CarrierConfig::new(CarrierSource::PredNext) });
        for c in 0..4 {
            let mean = (0..5).map(|r| emb.data()[r * 4 + c]).sum::<f64>() / 5.0;
            assert!((hot.data()[c] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn geo_mixer_modes() {
        let (mut store, mut init) = setup(3);
        let mixer = GeoMixer::new(&mut store, &mut init, "g", 4, 3);
        let x = input(&mut init, 1, 5, 4);
        let mut bumped = x.clone();
        bumped.data_mut()[3 * 4 + 1] += 0.5;
        let run = |store: &ParamStore, x: &Tensor, mode| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let u = g.constant(x.clone());
            let y = geo_mixer(&mut g, &p, &mixer, u, mode).unwrap();
            g.value(y).clone()
        };
        assert!(rows_equal(&run(&store, &x, ConvMode::Causal), &run(&store, &bumped, ConvMode::Causal), 4, 2));
        assert!(!rows_equal(&run(&store, &x, ConvMode::Symmetric), &run(&store, &bumped, ConvMode::Symmetric), 4, 2));
        *store.get_mut(mixer.kernel) = Tensor::zeros(&[3, 4]);
        assert!(run(&store, &x, ConvMode::Symmetric).is_zero());
    }

    #[test]
    fn quadratic_block_singleton_and_causality() {
        let (mut store, mut init) = setup(4);
        let blk = KetQuad::new(&mut store, &mut init, "q", 4);
        let run = |h: &Tensor, v: &Tensor, causal: bool| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let (hv, vv) = (g.constant(h.clone()), g.constant(v.clone()));
            let set = build_edge_simplices(g.shape(hv)[1]).unwrap();
            let y = ket_quadratic_block(&mut g, &p, &blk, hv, vv, &set, causal).unwrap();
            g.value(y).clone()
        };
        let h1 = input(&mut init, 1, 1, 4);
        let v1 = input(&mut init, 1, 1, 4);
        let single = run(&h1, &v1, true);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (hv, vv) = (g.constant(h1), g.constant(v1));
        let m = blk.mlp.forward(&mut g, &p, vv).unwrap();
        let r = g.add(hv, m).unwrap();
        let expect = blk.norm.forward(&mut g, &p, r).unwrap();
        assert_eq!(single.data(), g.value(expect).data());

        let h = input(&mut init, 2, 5, 4);
        let v = input(&mut init, 2, 5, 4);
        let mut v2 = v.clone();
        v2.data_mut()[3 * 4] += 1.0;
        assert!(rows_equal(&run(&h, &v, true), &run(&h, &v2, true), 4, 2));
        assert!(!rows_equal(&run(&h, &v, false), &run(&h, &v2, false), 4, 2));
    }

    #[test]
    fn incidence_block_guard_and_causality() {
        let (mut store, mut init) = setup(5);
        let blk = KetInc::new(&mut store, &mut init, "i", 4);
        let run = |h: &Tensor, v: &Tensor, noncausal: bool| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let (hv, vv) = (g.constant(h.clone()), g.constant(v.clone()));
            let y = ket_incidence_block(&mut g, &p, &blk, hv, vv, noncausal).unwrap();
            g.value(y).clone()
        };
        let h = input(&mut init, 1, 4, 4);
        let v = input(&mut init, 1, 4, 4);
        let out = run(&h, &v, false);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let hv = g.constant(h.clone());
        let ln = blk.norm.forward(&mut g, &p, hv).unwrap();
        assert_eq!(&out.data()[..4], &g.value(ln).data()[..4]);

        let mut v2 = v.clone();
        v2.data_mut()[2 * 4 + 1] -= 0.7;
        assert!(rows_equal(&out, &run(&h, &v2, false), 4, 1));
        assert!(!rows_equal(&run(&h, &v, true), &run(&h, &v2, true), 4, 1));
    }

    #[test]
    fn topocoend_cases() {
        let (mut store, mut init) = setup(6);
        let mut blk = Topo::new(&mut store, &mut init, "t", 4, 3, 1, 1.0);
        let h = input(&mut init, 1, 4, 4);
        let v = input(&mut init, 1, 4, 4);
        let run = |store: &ParamStore, blk: &Topo, v: &Tensor, causal: bool| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let (hv, vv) = (g.constant(h.clone()), g.constant(v.clone()));
            let y = topocoend_block(&mut g, &p, blk, hv, vv, causal).unwrap();
            g.value(y).clone()
        };
        let saved = store.get(blk.w_v.weight).clone();
        *store.get_mut(blk.w_v.weight) = Tensor::zeros(&[4, 4]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let hv = g.constant(h.clone());
        let ln = blk.norm.forward(&mut g, &p, hv).unwrap();
        assert_eq!(run(&store, &blk, &v, true).data(), g.value(ln).data());
        *store.get_mut(blk.w_v.weight) = saved;

        blk.k = 4;
        let mut v2 = v.clone();
        v2.data_mut()[3 * 4 + 2] += 1.0;
        assert!(rows_equal(&run(&store, &blk, &v, true), &run(&store, &blk, &v2, true), 4, 2));
        assert!(!rows_equal(&run(&store, &blk, &v, false), &run(&store, &blk, &v2, false), 4, 2));
    }

    #[test]
    fn hint_depends_on_gold_and_vanishes_at_zero() {
        let (mut store, mut init) = setup(7);
        let hint = Hint::new(&mut store, &mut init, "h", 4);
        let emb = init.normal(&[6, 4], 0.5);
        let h = input(&mut init, 1, 3, 4);
        let run = |store: &ParamStore, gold: &[usize]| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let (hv, ev) = (g.constant(h.clone()), g.constant(emb.clone()));
            let y = future_hint_inject(&mut g, &p, &hint, hv, gold, ev).unwrap();
            g.value(y).clone()
        };
        assert_ne!(run(&store, &[1, 2, 3]).data(), run(&store, &[4, 2, 3]).data());
        *store.get_mut(hint.proj.weight) = Tensor::zeros(&[4, 4]);
        assert_eq!(run(&store, &[1, 2, 3]).data(), h.data());
    }
}
