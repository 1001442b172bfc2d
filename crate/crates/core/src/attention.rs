//! Monotonic multi-head attention with context-aware distance decay and
//! relevance masking.
//!
//! For one head with projections `q`, `k` (`t x d_k`) and values `v`:
//!
//! ```text
//! gamma[t, u] = softmax over allowed u <= t of q_t . k_u / sqrt(d_k)
//! d[t, tau]   = (t - tau) * prod over allowed u in (tau, t] of gamma[t, u]
//! s[t, tau]   = exp(-theta * d[t, tau]) * q_t . k_tau / sqrt(d_k)
//! alpha[t, .] = softmax of s[t, .] over positions allowed by causality AND F
//! out_t       = sum_tau alpha[t, tau] * v_tau
//! ```
//!
//! The distance weights `gamma` use the inclusive causal mask intersected with
//! the relevance matrix, so a position never reads keys of unrelated positions
//! even through the decay term. With `F` all ones this is the plain causal
//! softmax over `1..=t`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::relevance::RelevanceMatrix;
use crate::tensor::{softplus, Tensor};
use rand::Rng;
use std::rc::Rc;

/// Which past positions a row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Causality {
    /// `tau <= t`
    Inclusive,
    /// `tau < t`
    Strict,
}

/// Allowed-position masks for one sequence length and causality role.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    n: usize,
    causality: Causality,
    scores: Rc<[bool]>,
    distance: Rc<[bool]>,
}

impl AttentionMask {
    /// Causal mask AND'ed with `relevance` when given.
    pub fn new(n: usize, causality: Causality, relevance: Option<&RelevanceMatrix>) -> Result<Self> {
        if let Some(f) = relevance {
            if f.len() != n {
                return Err(Error::shape("attention mask", &[n, n], &[f.len(), f.len()]));
            }
        }
        let related = |t: usize, tau: usize| relevance.map_or(true, |f| f.get(t, tau));
        let mut scores = vec![false; n * n];
        let mut distance = vec![false; n * n];
        for t in 0..n {
            for tau in 0..=t {
                let rel = related(t, tau);
                distance[t * n + tau] = rel;
                scores[t * n + tau] = rel && (tau < t || causality == Causality::Inclusive);
            }
        }
        Ok(AttentionMask {
            n,
            causality,
            scores: scores.into(),
            distance: distance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn causality(&self) -> Causality {
        self.causality
    }

    /// Whether row `t` may attend to `tau`.
    pub fn allows(&self, t: usize, tau: usize) -> bool {
        self.scores[t * self.n + tau]
    }

    pub(crate) fn score_mask(&self) -> Rc<[bool]> {
        self.scores.clone()
    }

    pub(crate) fn distance_mask(&self) -> Rc<[bool]> {
        self.distance.clone()
    }
}

/// Projection weights and decay rates of one multi-head attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// `1 x num_heads`; the decay rate of head `h` is `softplus(theta_raw[h])`.
    pub theta_raw: ParamId,
    pub num_heads: usize,
    pub d_k: usize,
}

impl AttentionParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Validation(format!(
                "dimension {dim} is not divisible into {num_heads} heads"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let w_q = store.add_uniform(format!("{prefix}.w_q"), &[dim, dim], bound, rng);
        let w_k = store.add_uniform(format!("{prefix}.w_k"), &[dim, dim], bound, rng);
        let w_v = store.add_uniform(format!("{prefix}.w_v"), &[dim, dim], bound, rng);
        let w_o = store.add_uniform(format!("{prefix}.w_o"), &[dim, dim], bound, rng);
        let theta_raw = store.add(format!("{prefix}.theta_raw"), Tensor::zeros(&[1, num_heads]));
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            theta_raw,
            num_heads,
            d_k: dim / num_heads,
        })
    }

    /// Current positive decay rate of every head.
    pub fn thetas(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.theta_raw).data().iter().map(|&r| softplus(r)).collect()
    }
}

/// Scaled dot products `q k^T / sqrt(d_k)`.
pub fn scaled_logits(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let d_k = *g.shape(q).last().expect("shape");
    let kt = g.transpose(k)?;
    let raw = g.matmul(q, kt)?;
    Ok(g.scale(raw, 1.0 / (d_k as f64).sqrt()))
}

/// Context-aware distance `d[t, tau]` for projections `q`, `k` (`t x d_k`).
pub fn context_distance(g: &mut Graph, q: Var, k: Var, mask: &AttentionMask) -> Result<Var> {
    let logits = scaled_logits(g, q, k)?;
    g.decay_distance(logits, mask.distance_mask())
}

/// `s[t, tau] = exp(-theta * dist[t, tau]) * q_t . k_tau / sqrt(d_k)`.
pub fn monotonic_scores(g: &mut Graph, q: Var, k: Var, dist: Var, theta: Var) -> Result<Var> {
    let logits = scaled_logits(g, q, k)?;
    g.decay_scores(logits, dist, theta)
}

/// Attention weights and the weighted sum of values.
#[derive(Clone, Copy, Debug)]
pub struct MaskedAttention {
    pub weights: Var,
    pub output: Var,
}

/// Normalises `scores` over allowed positions and mixes `values` with the
/// resulting weights. Rows with nothing allowed output zeros.
pub fn masked_attention(
    g: &mut Graph,
    values: Var,
    scores: Var,
    mask: &AttentionMask,
) -> Result<MaskedAttention> {
    let n = mask.len();
    if g.shape(scores) != [n, n] {
        return Err(Error::shape("masked_attention", g.shape(scores), &[n, n]));
    }
    if g.shape(values)[0] != n {
        return Err(Error::shape("masked_attention", g.shape(values), &[n, n]));
    }
    let weights = g.masked_softmax_bool(scores, mask.score_mask())?;
    let output = g.matmul(weights, values)?;
    Ok(MaskedAttention { weights, output })
}

/// Per-head intermediates retained for inspection.
#[derive(Clone, Debug)]
pub struct HeadProbe {
    pub head: usize,
    pub weights: Var,
    pub values: Var,
    pub output: Var,
    pub mask: AttentionMask,
}

/// Multi-head monotonic attention. Queries and keys are projected from
/// `queries`, values from `values` (pass the same var for self-attention).
pub fn multi_head_route_attention(
    g: &mut Graph,
    store: &ParamStore,
    params: &AttentionParams,
    queries: Var,
    values: Var,
    mask: &AttentionMask,
    mut probes: Option<&mut Vec<HeadProbe>>,
) -> Result<Var> {
    let n = mask.len();
    if g.shape(queries)[0] != n || g.shape(values) != g.shape(queries) {
        return Err(Error::shape(
            "multi_head_route_attention",
            g.shape(queries),
            g.shape(values),
        ));
    }
    let w_q = g.param(store, params.w_q);
    let w_k = g.param(store, params.w_k);
    let w_v = g.param(store, params.w_v);
    let w_o = g.param(store, params.w_o);
    let theta_raw = g.param(store, params.theta_raw);
    let q_all = g.matmul(queries, w_q)?;
    let k_all = g.matmul(queries, w_k)?;
    let v_all = g.matmul(values, w_v)?;
    let thetas = g.softplus(theta_raw);
    let d_k = params.d_k;
    let mut heads = Vec::with_capacity(params.num_heads);
    for h in 0..params.num_heads {
        let q = g.slice_cols(q_all, h * d_k, d_k)?;
        let k = g.slice_cols(k_all, h * d_k, d_k)?;
        let v = g.slice_cols(v_all, h * d_k, d_k)?;
        let theta = g.slice_cols(thetas, h, 1)?;
        let logits = scaled_logits(g, q, k)?;
        let dist = g.decay_distance(logits, mask.distance_mask())?;
        let scores = g.decay_scores(logits, dist, theta)?;
        let att = masked_attention(g, v, scores, mask)?;
        if let Some(p) = probes.as_deref_mut() {
            p.push(HeadProbe {
                head: h,
                weights: att.weights,
                values: v,
                output: att.output,
                mask: mask.clone(),
            });
        }
        heads.push(att.output);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads)?
    };
    g.matmul(merged, w_o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.constant(&Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn single_step_distance_is_zero() {
        let mut g = Graph::new();
        let q = leaf(&mut g, &[vec![0.3, -0.1]]);
        let mask = AttentionMask::new(1, Causality::Inclusive, None).unwrap();
        let d = context_distance(&mut g, q, q, &mask).unwrap();
        assert_eq!(g.value(d), &[0.0]);
    }

    #[test]
    fn uniform_logits_give_half_distance() {
        let mut g = Graph::new();
        let q = leaf(&mut g, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let mask = AttentionMask::new(2, Causality::Inclusive, None).unwrap();
        let d = context_distance(&mut g, q, q, &mask).unwrap();
        assert_eq!(g.value(d), &[0.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn decay_hand_arithmetic() {
        // q.k / sqrt(d_k) = 4 with d_k = 4: q = [2,2,2,2] / 2, k = [2,2,2,2]
        let mut g = Graph::new();
        let q = leaf(&mut g, &[vec![1.0; 4]]);
        let k = leaf(&mut g, &[vec![2.0; 4]]);
        let dist = leaf(&mut g, &[vec![1.0]]);
        let theta = g.constant(&Tensor::scalar(2f64.ln()));
        let s = monotonic_scores(&mut g, q, k, dist, theta).unwrap();
        assert!((g.value(s)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn allowed_singleton_takes_all_weight() {
        // t = 3 (index 2), equal scores, F row [1, 0, 1], strict past {0, 1}
        let f = RelevanceMatrix::from_rows(&[vec![1, 0, 1], vec![0, 1, 0], vec![1, 0, 1]]).unwrap();
        let mask = AttentionMask::new(3, Causality::Strict, Some(&f)).unwrap();
        let mut g = Graph::new();
        let scores = g.constant(&Tensor::zeros(&[3, 3]));
        let values = leaf(&mut g, &[vec![1.0], vec![2.0], vec![3.0]]);
        let att = masked_attention(&mut g, values, scores, &mask).unwrap();
        assert_eq!(&g.value(att.weights)[6..9], &[1.0, 0.0, 0.0]);
        assert_eq!(g.value(att.output)[2], 1.0);
        // rows 0 and 1 have no allowed past
        assert_eq!(g.value(att.output)[0], 0.0);
        assert_eq!(g.value(att.output)[1], 0.0);
        assert_eq!(g.diagnostics().fully_masked_rows, 2);
    }

    #[test]
    fn mask_shape_mismatch_is_reported() {
        let f = RelevanceMatrix::ones(3);
        assert!(matches!(
            AttentionMask::new(4, Causality::Strict, Some(&f)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        let mut rng = rand::thread_rng();
        assert!(AttentionParams::init(&mut store, "a", 6, 4, &mut rng).is_err());
        let p = AttentionParams::init(&mut store, "a", 8, 2, &mut rng).unwrap();
        assert_eq!(p.d_k, 4);
        assert!((p.thetas(&store)[0] - 2f64.ln()).abs() < 1e-15);
    }
}
