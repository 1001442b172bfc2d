//! Library results against independent scalar-loop and brute-force oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routekt_core::attention::{
    context_distance, monotonic_scores, multi_head_route_attention, AttentionMask, AttentionParams, Causality,
};
use routekt_core::graph::Graph;
use routekt_core::metrics::compute_auc;
use routekt_core::model::{bce_loss, forward, ModelConfig, ModelParams, SequenceInput};
use routekt_core::params::ParamStore;
use routekt_core::rasch::RaschParams;
use routekt_core::relevance::{
    build_relevance_matrix, relevance_stats, routes_related, KCRoute, QuestionId, RelevanceMatrix, RouteTable,
};
use routekt_core::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_route(r: &mut ChaCha8Rng, q: QuestionId, alphabet: u32, max_len: usize) -> KCRoute {
    let len = r.gen_range(1..=max_len);
    let mut ids: Vec<u32> = Vec::new();
    while ids.len() < len {
        let c = r.gen_range(0..alphabet);
        if !ids.contains(&c) {
            ids.push(c);
        }
    }
    KCRoute::new(q, ids).unwrap()
}

fn share_element(a: &[u32], b: &[u32]) -> bool {
    for x in a {
        for y in b {
            if x == y {
                return true;
            }
        }
    }
    false
}

#[test]
fn route_pairs_match_element_loops() {
    let mut r = rng(1);
    for _ in 0..50 {
        let a = random_route(&mut r, 0, 12, 6);
        let b = random_route(&mut r, 1, 12, 6);
        assert_eq!(routes_related(&a, &b), share_element(a.concepts(), b.concepts()));
    }
}

#[test]
fn sequence_matrix_matches_nested_loops() {
    let mut r = rng(2);
    for _ in 0..20 {
        let mut table = RouteTable::new();
        let mut raw: Vec<Vec<Vec<u32>>> = Vec::new();
        for q in 0..6u32 {
            let routes: Vec<KCRoute> = (0..r.gen_range(0..3)).map(|_| random_route(&mut r, q, 15, 4)).collect();
            raw.push(routes.iter().map(|x| x.concepts().to_vec()).collect());
            table.insert(q, routes);
        }
        let seq: Vec<QuestionId> = (0..8).map(|_| r.gen_range(0..6)).collect();
        let f = build_relevance_matrix(&seq, &table);
        for i in 0..8 {
            for j in 0..8 {
                let (qi, qj) = (seq[i] as usize, seq[j] as usize);
                let mut expect = qi == qj;
                for ri in &raw[qi] {
                    for rj in &raw[qj] {
                        expect |= share_element(ri, rj);
                    }
                }
                assert_eq!(f.get(i, j), expect, "{seq:?} ({i},{j})");
            }
        }
    }
}

#[test]
fn stats_match_hand_count() {
    // q1,q2 share concept 0; q3,q4 share concept 3; q5 stands alone.
    let mut t = RouteTable::new();
    for (q, r) in [(1, vec![0, 1]), (2, vec![0, 2]), (3, vec![3, 4]), (4, vec![3, 5]), (5, vec![6])] {
        t.insert(q, vec![KCRoute::new(q, r).unwrap()]);
    }
    let f = build_relevance_matrix(&[1, 2, 1, 3, 4, 2, 5, 3], &t);
    let s = relevance_stats(&f);
    // groups {0,1,2,5}, {3,4,7}, {6}: 4*3 + 3*2 off-diagonal ones out of 56
    assert_eq!(s.degrees, vec![3, 3, 3, 2, 2, 3, 0, 2]);
    assert_eq!(s.density, 18.0 / 56.0);
    assert_eq!(s.isolated, 1);
}

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn row(t: &Tensor, i: usize) -> Vec<f64> {
    let c = t.shape()[1];
    t.data()[i * c..(i + 1) * c].to_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// gamma over 1..=t, then d(t,tau) = |t - tau| * prod_{t'=tau+1}^{t} gamma.
fn distance_oracle(q: &Tensor, k: &Tensor, allowed: &dyn Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    let n = q.shape()[0];
    let dk = q.shape()[1] as f64;
    let mut d = vec![vec![0.0; n]; n];
    for t in 0..n {
        let logits: Vec<f64> = (0..n).map(|u| dot(&row(q, t), &row(k, u)) / dk.sqrt()).collect();
        let mut denom = 0.0;
        for u in 0..=t {
            if allowed(t, u) {
                denom += logits[u].exp();
            }
        }
        for tau in 0..t {
            let mut prod = 1.0;
            for u in tau + 1..=t {
                if allowed(t, u) {
                    prod *= logits[u].exp() / denom;
                }
            }
            d[t][tau] = (t - tau) as f64 * prod;
        }
    }
    d
}

fn assert_close(got: &[f64], expect: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), expect.len());
    for (i, (a, b)) in got.iter().zip(expect).enumerate() {
        assert!((a - b).abs() <= tol, "{what}[{i}]: {a} vs {b}");
    }
}

#[test]
fn context_distance_matches_loop_oracle() {
    let mut r = rng(3);
    for n in [4, 8] {
        for _ in 0..10 {
            let q = random_tensor(&mut r, n, 4);
            let k = random_tensor(&mut r, n, 4);
            let mut g = Graph::new();
            let (qv, kv) = (g.constant(&q), g.constant(&k));
            let mask = AttentionMask::new(n, Causality::Inclusive, None).unwrap();
            let d = context_distance(&mut g, qv, kv, &mask).unwrap();
            let expect: Vec<f64> = distance_oracle(&q, &k, &|_, _| true).concat();
            assert_close(g.value(d), &expect, 1e-12, "distance");
        }
    }
}

#[test]
fn masked_context_distance_restricts_the_product() {
    let mut r = rng(4);
    let n = 8;
    let rows: Vec<Vec<u8>> = (0..n)
        .map(|i| (0..n).map(|j| u8::from(i == j || (i * j + i + j) % 3 != 0)).collect())
        .collect();
    let f = RelevanceMatrix::from_rows(&rows).unwrap();
    let q = random_tensor(&mut r, n, 4);
    let k = random_tensor(&mut r, n, 4);
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(&q), g.constant(&k));
    let mask = AttentionMask::new(n, Causality::Inclusive, Some(&f)).unwrap();
    let d = context_distance(&mut g, qv, kv, &mask).unwrap();
    let expect: Vec<f64> = distance_oracle(&q, &k, &|t, u| f.get(t, u)).concat();
    assert_close(g.value(d), &expect, 1e-12, "masked distance");
}

#[test]
fn monotonic_scores_match_loop_oracle() {
    let mut r = rng(5);
    let n = 8;
    for _ in 0..10 {
        let q = random_tensor(&mut r, n, 4);
        let k = random_tensor(&mut r, n, 4);
        let theta: f64 = r.gen_range(0.05..2.0);
        let dist: Vec<Vec<f64>> = distance_oracle(&q, &k, &|_, _| true);
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(&q), g.constant(&k));
        let dv = g.constant(&Tensor::new(&[n, n], dist.concat()).unwrap());
        let th = g.constant(&Tensor::new(&[1, 1], vec![theta]).unwrap());
        let s = monotonic_scores(&mut g, qv, kv, dv, th).unwrap();
        let mut expect = Vec::new();
        for t in 0..n {
            for tau in 0..n {
                expect.push((-theta * dist[t][tau]).exp() * dot(&row(&q, t), &row(&k, tau)) / 2.0);
            }
        }
        assert_close(g.value(s), &expect, 1e-12, "scores");
    }
}

#[test]
fn scores_fall_as_distance_grows() {
    let mut r = rng(6);
    for _ in 0..50 {
        let logit: f64 = r.gen_range(0.1..5.0);
        let theta: f64 = r.gen_range(0.01..3.0);
        let mut dist: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..5.0)).collect();
        dist.sort_by(f64::total_cmp);
        dist.dedup();
        let n = dist.len();
        let mut g = Graph::new();
        let l = g.constant(&Tensor::new(&[1, n], vec![logit; n]).unwrap());
        let d = g.constant(&Tensor::new(&[1, n], dist).unwrap());
        let th = g.constant(&Tensor::new(&[1, 1], vec![theta]).unwrap());
        let s = g.decay_scores(l, d, th).unwrap();
        assert!(g.value(s).windows(2).all(|w| w[1] < w[0]), "{:?}", g.value(s));
    }
}

/// Full multi-head attention computed position by position.
fn attention_oracle(
    store: &ParamStore,
    p: &AttentionParams,
    x: &Tensor,
    y: &Tensor,
    mask: &AttentionMask,
) -> Vec<f64> {
    let n = x.shape()[0];
    let dim = x.shape()[1];
    let w = |id| store.get(id).clone();
    let project = |m: &Tensor, wt: &Tensor| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..dim).map(|j| (0..dim).map(|l| m.data()[i * dim + l] * wt.data()[l * dim + j]).sum()).collect())
            .collect()
    };
    let (q, k, v) = (project(x, &w(p.w_q)), project(x, &w(p.w_k)), project(y, &w(p.w_v)));
    let thetas: Vec<f64> = store.get(p.theta_raw).data().iter().map(|&t| (1.0 + t.exp()).ln()).collect();
    let dk = p.d_k;
    let mut merged = vec![vec![0.0; dim]; n];
    for h in 0..p.num_heads {
        let cols = h * dk..(h + 1) * dk;
        let qh: Vec<Vec<f64>> = q.iter().map(|r| r[cols.clone()].to_vec()).collect();
        let kh: Vec<Vec<f64>> = k.iter().map(|r| r[cols.clone()].to_vec()).collect();
        let qt = Tensor::from_rows(&qh).unwrap();
        let kt = Tensor::from_rows(&kh).unwrap();
        // the distance product always runs over the inclusive causal set
        let dist = distance_oracle(&qt, &kt, &|t, u| t == u || mask.allows(t, u));
        for t in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|tau| (-thetas[h] * dist[t][tau]).exp() * dot(&qh[t], &kh[tau]) / (dk as f64).sqrt())
                .collect();
            let allowed: Vec<usize> = (0..n).filter(|&tau| mask.allows(t, tau)).collect();
            if allowed.is_empty() {
                continue;
            }
            let m = allowed.iter().map(|&tau| s[tau]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = allowed.iter().map(|&tau| (s[tau] - m).exp()).sum();
            for &tau in &allowed {
                let a = (s[tau] - m).exp() / z;
                for (j, c) in cols.clone().enumerate() {
                    merged[t][c] += a * v[tau][h * dk + j];
                }
            }
        }
    }
    let wo = w(p.w_o);
    (0..n)
        .flat_map(|i| {
            let merged = &merged;
            let wo = &wo;
            (0..dim).map(move |j| (0..dim).map(|l| merged[i][l] * wo.data()[l * dim + j]).sum::<f64>())
        })
        .collect()
}

#[test]
fn multi_head_attention_matches_loop_oracle() {
    let mut r = rng(7);
    let n = 4;
    let f = RelevanceMatrix::from_rows(&[vec![1, 0, 1, 1], vec![0, 1, 0, 1], vec![1, 0, 1, 0], vec![1, 1, 0, 1]]).unwrap();
    for (relevance, causality) in [
        (None, Causality::Inclusive),
        (Some(&f), Causality::Inclusive),
        (Some(&f), Causality::Strict),
    ] {
        let mut store = ParamStore::new();
        let p = AttentionParams::init(&mut store, "a", 6, 2, &mut r).unwrap();
        store.get_mut(p.theta_raw).data_mut().copy_from_slice(&[0.7, -1.2]);
        let x = random_tensor(&mut r, n, 6);
        let y = random_tensor(&mut r, n, 6);
        let mask = AttentionMask::new(n, causality, relevance).unwrap();
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(&x), g.constant(&y));
        let out = multi_head_route_attention(&mut g, &store, &p, xv, yv, &mask, None).unwrap();
        assert_eq!(g.shape(out), &[n, 6]);
        let expect = attention_oracle(&store, &p, &x, &y, &mask);
        assert_close(g.value(out), &expect, 1e-12, "attention");
    }
}

#[test]
fn rasch_embeddings_match_table_lookup() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let p = RaschParams::init(&mut store, 5, 3, 4, &mut r);
    let mu: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
    store.get_mut(p.difficulty).data_mut().copy_from_slice(&mu);
    let qs = [4, 0, 2, 2, 1];
    let cs = [1, 0, 2, 1, 1];
    let rs = [1u8, 0, 0, 1, 1];
    let mut g = Graph::new();
    let x = p.question_embeddings(&mut g, &store, &qs, &cs).unwrap();
    let y = p.pair_embeddings(&mut g, &store, &qs, &cs, &rs).unwrap();
    let tab = |id, i: usize| row(store.get(id), i);
    let mut ex = Vec::new();
    let mut ey = Vec::new();
    for t in 0..5 {
        let (c, d) = (tab(p.concept_embed, cs[t]), tab(p.concept_variation, cs[t]));
        let (gr, fr) = (tab(p.response_embed, rs[t] as usize), tab(p.pair_variation, cs[t] * 2 + rs[t] as usize));
        for j in 0..4 {
            ex.push(c[j] + mu[qs[t]] * d[j]);
            ey.push(c[j] + gr[j] + mu[qs[t]] * fr[j]);
        }
    }
    assert_close(g.value(x), &ex, 0.0, "x");
    assert_close(g.value(y), &ey, 0.0, "y");
}

#[test]
fn question_embedding_gradient_in_difficulty_is_variation() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let p = RaschParams::init(&mut store, 3, 2, 4, &mut r);
    let h = 1e-5;
    let embed = |s: &ParamStore| -> Vec<f64> {
        let mut g = Graph::new();
        let x = p.question_embeddings(&mut g, s, &[1], &[0]).unwrap();
        g.value(x).to_vec()
    };
    let mut plus = store.clone();
    plus.get_mut(p.difficulty).data_mut()[1] += h;
    let mut minus = store.clone();
    minus.get_mut(p.difficulty).data_mut()[1] -= h;
    let (a, b) = (embed(&plus), embed(&minus));
    let d_c = row(store.get(p.concept_variation), 0);
    for j in 0..4 {
        let numeric = (a[j] - b[j]) / (2.0 * h);
        assert!((numeric - d_c[j]).abs() <= 1e-3 * d_c[j].abs() + 1e-8, "{numeric} vs {}", d_c[j]);
    }
}

#[test]
fn bce_matches_loop() {
    let mut r = rng(10);
    let p: Vec<f64> = (0..10).map(|_| r.gen_range(0.0..1.0)).collect();
    let y: Vec<u8> = (0..10).map(|_| r.gen_range(0..2)).collect();
    let valid: Vec<bool> = (0..10).map(|i| i != 3).collect();
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..10 {
        if !valid[i] {
            continue;
        }
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        total += if y[i] == 1 { -q.ln() } else { -(1.0 - q).ln() };
        count += 1.0;
    }
    let got = bce_loss(&p, &y, &valid).unwrap();
    assert!((got - total / count).abs() <= 1e-12, "{got} vs {}", total / count);
}

fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut r = rng(11);
    let n = 200;
    // coarse scores force ties
    let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0..20) as f64) / 20.0).collect();
    let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
    assert_eq!(compute_auc(&scores, &labels).unwrap(), auc_pairs(&scores, &labels));
}

#[test]
fn forward_is_bitwise_reproducible() {
    let cfg = ModelConfig::new(10, 5, 8, 2, 2);
    let input = SequenceInput {
        questions: vec![0, 3, 7, 3, 9, 1, 0, 2],
        concepts: vec![0, 1, 4, 1, 2, 3, 0, 2],
        responses: vec![1, 0, 1, 1, 0, 0, 1, 1],
    };
    let a = forward(&ModelParams::init(&cfg, 5).unwrap(), &input, None).unwrap();
    let b = forward(&ModelParams::init(&cfg, 5).unwrap(), &input, None).unwrap();
    assert_eq!(a, b);
}
