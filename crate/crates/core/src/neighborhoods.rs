//! Source neighborhood systems: the causal token mask, token/edge simplices
//! with causal filtering, and the fuzzy kNN graph used by TopoCoend.

use ketlab_autodiff::{Mask, Tensor};

use crate::error::{KetError, Result};

/// Strictly increasing tuple of token positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Simplex(Vec<usize>);

impl Simplex {
    pub fn new(vertices: Vec<usize>) -> Result<Self> {
        if vertices.is_empty() || vertices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(KetError::InvalidConfig(format!(
                "simplex vertices must be nonempty and strictly increasing: {vertices:?}"
            )));
        }
        Ok(Self(vertices))
    }

    pub fn vertices(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len() - 1
    }

    pub fn max_vertex(&self) -> usize {
        *self.0.last().expect("simplices are nonempty")
    }
}

/// Simplices over positions `0..seq_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimplexSet {
    seq_len: usize,
    simplices: Vec<Simplex>,
}

impl SimplexSet {
    pub fn new(seq_len: usize, simplices: Vec<Simplex>) -> Result<Self> {
        if let Some(bad) = simplices.iter().find(|s| s.max_vertex() >= seq_len) {
            return Err(KetError::OutOfRange(format!("simplex {:?} exceeds length {seq_len}", bad.0)));
        }
        Ok(Self { seq_len, simplices })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.simplices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.simplices.is_empty()
    }

    pub fn simplices(&self) -> &[Simplex] {
        &self.simplices
    }

    /// True for the layout produced by [`build_edge_simplices`]: all tokens in
    /// order, then the adjacent edges in order.
    pub fn is_edge_layout(&self) -> bool {
        let s = self.seq_len;
        self.simplices.len() == 2 * s - 1
            && self.simplices[..s].iter().enumerate().all(|(t, x)| x.0 == [t])
            && self.simplices[s..].iter().enumerate().all(|(i, x)| x.0 == [i, i + 1])
    }

    /// `[seq_len, |I|]` mask; row `t` allows `sigma` iff `max(sigma) <= t`, or
    /// everything when not causal.
    pub fn mask(&self, causal: bool) -> Mask {
        let n = self.simplices.len();
        let mut allowed = vec![true; self.seq_len * n];
        if causal {
            for t in 0..self.seq_len {
                for (j, s) in self.simplices.iter().enumerate() {
                    allowed[t * n + j] = s.max_vertex() <= t;
                }
            }
        }
        Mask::new(vec![self.seq_len, n], allowed).expect("shape matches by construction")
    }
}

/// Tokens `(0)..(S-1)` followed by edges `(t-1, t)` for `t >= 1`.
pub fn build_edge_simplices(seq_len: usize) -> Result<SimplexSet> {
    if seq_len == 0 {
        return Err(KetError::InvalidConfig("sequence length must be positive".into()));
    }
    let tokens = (0..seq_len).map(|t| Simplex(vec![t]));
    let edges = (1..seq_len).map(|t| Simplex(vec![t - 1, t]));
    SimplexSet::new(seq_len, tokens.chain(edges).collect())
}

/// Indices of the simplices whose largest vertex is at most `t`.
pub fn causal_filter(set: &SimplexSet, t: usize) -> Vec<usize> {
    set.simplices.iter().enumerate().filter(|(_, s)| s.max_vertex() <= t).map(|(i, _)| i).collect()
}

/// Lower-triangular `S x S` attention mask (source `<=` target).
pub fn causal_mask(seq_len: usize) -> Mask {
    Mask::causal(seq_len)
}

/// Per target, the retained `(source, weight)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

/// Row-major `S x S` selection: row `t` keeps the `min(k, candidates)` sources
/// closest under `dist` (ties to the lower index), restricted to `s <= t` when
/// causal.
pub fn knn_selection(dist: &[f64], seq_len: usize, k: usize, causal: bool) -> Vec<bool> {
    let mut keep = vec![false; seq_len * seq_len];
    let mut order: Vec<usize> = Vec::with_capacity(seq_len);
    for t in 0..seq_len {
        let row = &dist[t * seq_len..(t + 1) * seq_len];
        order.clear();
        order.extend(0..if causal { t + 1 } else { seq_len });
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        for &s in order.iter().take(k) {
            keep[t * seq_len + s] = true;
        }
    }
    keep
}

/// Fuzzy kNN in latent space: weights are `softmax(-|z_t - z_s|^2 / tau)` over
/// the retained sources of each target.
pub fn build_fuzzy_knn(z: &Tensor, k: usize, tau: f64, causal: bool) -> Result<KnnGraph> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(KetError::OutOfRange(format!("kNN temperature must be positive, got {tau}")));
    }
    if k == 0 {
        return Err(KetError::OutOfRange("kNN needs k >= 1".into()));
    }
    if z.rank() != 2 {
        return Err(KetError::InvalidConfig(format!("latent codes must be [S, dim], got {:?}", z.shape())));
    }
    let (s_len, dim) = (z.shape()[0], z.shape()[1]);
    let rows = z.data();
    let mut dist = vec![0.0; s_len * s_len];
    for t in 0..s_len {
        for s in 0..s_len {
            dist[t * s_len + s] = (0..dim).map(|c| (rows[t * dim + c] - rows[s * dim + c]).powi(2)).sum();
        }
    }
    let keep = knn_selection(&dist, s_len, k, causal);
    let neighbors = (0..s_len)
        .map(|t| {
            let kept: Vec<usize> = (0..s_len).filter(|&s| keep[t * s_len + s]).collect();
            let logits: Vec<f64> = kept.iter().map(|&s| -dist[t * s_len + s] / tau).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            kept.into_iter().zip(exps).map(|(s, e)| (s, e / total)).collect()
        })
        .collect();
    Ok(KnnGraph { neighbors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verts(set: &SimplexSet, idx: &[usize]) -> Vec<Vec<usize>> {
        idx.iter().map(|&i| set.simplices()[i].vertices().to_vec()).collect()
    }

    #[test]
    fn edge_simplices_enumeration() {
        let one = build_edge_simplices(1).unwrap();
        assert_eq!(verts(&one, &[0]), vec![vec![0]]);
        assert_eq!(one.len(), 1);
        let three = build_edge_simplices(3).unwrap();
        let all: Vec<usize> = (0..three.len()).collect();
        assert_eq!(verts(&three, &all), vec![vec![0], vec![1], vec![2], vec![0, 1], vec![1, 2]]);
        assert!(three.is_edge_layout());
        assert!(build_edge_simplices(0).is_err());
    }

    #[test]
    fn causal_filter_examples() {
        let set = build_edge_simplices(3).unwrap();
        assert_eq!(verts(&set, &causal_filter(&set, 0)), vec![vec![0]]);
        assert_eq!(verts(&set, &causal_filter(&set, 1)), vec![vec![0], vec![1], vec![0, 1]]);
        assert_eq!(causal_filter(&set, 2).len(), set.len());
    }

    #[test]
    fn mask_rows_match_filter() {
        let set = build_edge_simplices(4).unwrap();
        let m = set.mask(true);
        for t in 0..4 {
            let row: Vec<usize> = (0..set.len()).filter(|&j| m.allowed()[t * set.len() + j]).collect();
            assert_eq!(row, causal_filter(&set, t));
        }
        assert!(set.mask(false).allowed().iter().all(|&a| a));
    }

    #[test]
    fn knn_examples() {
        let same = Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap();
        let g = build_fuzzy_knn(&same, 2, 1.0, false).unwrap();
        assert_eq!(g.neighbors[2], vec![(0, 0.5), (1, 0.5)]);

        let z = Tensor::new(vec![3, 1], vec![0.0, 1.0, 10.0]).unwrap();
        let g1 = build_fuzzy_knn(&z, 1, 1.0, false).unwrap();
        for t in 0..3 {
            assert_eq!(g1.neighbors[t], vec![(t, 1.0)]);
        }
        let g2 = build_fuzzy_knn(&z, 2, 1.0, false).unwrap();
        let e = (-1.0f64).exp();
        let (w0, w1) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let row = &g2.neighbors[1];
        assert_eq!(row.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!((row[0].1 - w0).abs() < 1e-15 && (row[1].1 - w1).abs() < 1e-15);

        let causal = build_fuzzy_knn(&z, 2, 1.0, true).unwrap();
        assert_eq!(causal.neighbors[0], vec![(0, 1.0)]);
        assert!(build_fuzzy_knn(&z, 2, 0.0, true).is_err());
    }
}
