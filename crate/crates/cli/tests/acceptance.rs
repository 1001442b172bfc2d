//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routekt_core::attention::{context_distance, monotonic_scores, AttentionMask, Causality};
use routekt_core::data::{
    make_splits, preprocess, truncate_pad, Interaction, LoadReport, LoadedDataset, PreprocessConfig, StudentRecord,
    PAD,
};
use routekt_core::graph::Graph;
use routekt_core::metrics::{accuracy, compute_auc};
use routekt_core::model::{
    accumulate_sequence_grads, bce_on_graph, build_forward, forward, ModelConfig, ModelParams, SequenceInput,
};
use routekt_core::params::ParamGrads;
use routekt_core::relevance::{build_relevance_matrix, KCHierarchy, KCRoute, RelevanceMatrix, RouteTable};
use routekt_core::synth::{generate, SynthSpec};
use routekt_core::train::{train_fold, EpochRecord, FoldIndices, PreparedData, TrainConfig};
use routekt_core::Tensor;
use std::process::Command;
use std::time::{Duration, Instant};

type Check = Result<String, String>;
type Criterion = (&'static str, Duration, Box<dyn FnOnce(&mut Option<Synthetic>) -> Check>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random routes for `questions` questions; some questions get none.
fn random_routes(r: &mut ChaCha8Rng, questions: u32, max_route: usize) -> Vec<Vec<Vec<u32>>> {
    (0..questions)
        .map(|_| {
            (0..r.gen_range(0..=3))
                .map(|_| {
                    let len = r.gen_range(1..=max_route);
                    let mut route: Vec<u32> = Vec::new();
                    while route.len() < len {
                        let c = r.gen_range(0..14);
                        if !route.contains(&c) {
                            route.push(c);
                        }
                    }
                    route
                })
                .collect()
        })
        .collect()
}

fn table_of(routes: &[Vec<Vec<u32>>]) -> RouteTable {
    let mut t = RouteTable::new();
    for (q, rs) in routes.iter().enumerate() {
        t.insert(q as u32, rs.iter().map(|r| KCRoute::new(q as u32, r.clone()).unwrap()).collect());
    }
    t
}

fn c1_relevance_oracle() -> Check {
    let mut r = rng(101);
    let mut ones = 0usize;
    for case in 0..1000 {
        let routes = random_routes(&mut r, 10, 6);
        let table = table_of(&routes);
        let n = r.gen_range(1..=16);
        let seq: Vec<u32> = (0..n).map(|_| r.gen_range(0..10)).collect();
        let f = build_relevance_matrix(&seq, &table);
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (&routes[seq[i] as usize], &routes[seq[j] as usize]);
                let mut expect = seq[i] == seq[j];
                for ra in a {
                    for rb in b {
                        for x in ra {
                            for y in rb {
                                expect |= x == y;
                            }
                        }
                    }
                }
                ensure(f.get(i, j) == expect, || format!("case {case} entry ({i},{j})"))?;
                ones += usize::from(expect);
            }
        }
    }
    Ok(format!("1000 instances, {ones} related entries"))
}

fn random_input(r: &mut ChaCha8Rng, n: usize, nq: usize, nc: usize) -> SequenceInput {
    SequenceInput {
        questions: (0..n).map(|_| r.gen_range(0..nq)).collect(),
        concepts: (0..n).map(|_| r.gen_range(0..nc)).collect(),
        responses: (0..n).map(|_| r.gen_range(0..2)).collect(),
    }
}

fn relevance_for(r: &mut ChaCha8Rng, input: &SequenceInput, nq: usize) -> RelevanceMatrix {
    let table = table_of(&random_routes(r, nq as u32, 3));
    let qs: Vec<u32> = input.questions.iter().map(|&q| q as u32).collect();
    build_relevance_matrix(&qs, &table)
}

fn c2_zero_leakage() -> Check {
    let mut r = rng(202);
    let (nq, nc) = (8, 4);
    let mut masked_weights = 0usize;
    let mut masked_grads = 0usize;
    for inst in 0..100 {
        let params = ModelParams::init(&ModelConfig::new(nq, nc, 8, 2, 1), inst).unwrap();
        let n = r.gen_range(2..=12);
        let input = random_input(&mut r, n, nq, nc);
        let f = relevance_for(&mut r, &input, nq);
        let mut fg = build_forward(&params, &input, Some(&f), true).unwrap().unwrap();
        let valid = vec![true; n];
        let loss = bce_on_graph(&mut fg.graph, fg.probabilities, &input.responses, &valid).unwrap();
        let loss_grads = fg.graph.backward(loss).unwrap();
        for sp in fg.probes.clone() {
            let p = &sp.probe;
            let w = fg.graph.value(p.weights).to_vec();
            let dk = fg.graph.shape(p.values)[1];
            for t in 0..n {
                let row = &w[t * n..(t + 1) * n];
                let mut any = false;
                for tau in 0..n {
                    if p.mask.allows(t, tau) {
                        any = true;
                    } else {
                        ensure(row[tau] == 0.0, || format!("instance {inst}: weight ({t},{tau}) = {}", row[tau]))?;
                        masked_weights += 1;
                    }
                }
                let total: f64 = row.iter().sum();
                if any {
                    ensure((total - 1.0).abs() <= 1e-12, || format!("instance {inst}: row {t} sums to {total}"))?;
                } else {
                    ensure(total == 0.0, || format!("instance {inst}: empty row {t} sums to {total}"))?;
                }
                // gradient of this output row with respect to every value row
                let out_row = fg.graph.slice_rows(p.output, t, 1).unwrap();
                let root = fg.graph.sum(out_row);
                let g = fg.graph.backward(root).unwrap();
                let gv = g.get(p.values).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n * dk]);
                for tau in (0..n).filter(|&tau| !p.mask.allows(t, tau)) {
                    let gr = &gv[tau * dk..(tau + 1) * dk];
                    ensure(gr.iter().all(|&x| x == 0.0), || {
                        format!("instance {inst}: d out[{t}] / d value[{tau}] = {gr:?}")
                    })?;
                    masked_grads += 1;
                }
            }
            // value rows no query may read get no loss gradient through this head
            if let Some(gv) = loss_grads.get(p.values) {
                for tau in (0..n).filter(|&tau| (0..n).all(|t| !p.mask.allows(t, tau))) {
                    let gr = &gv[tau * dk..(tau + 1) * dk];
                    ensure(gr.iter().all(|&x| x == 0.0), || format!("instance {inst}: loss gradient at value {tau}"))?;
                }
            }
        }
    }
    Ok(format!("{masked_weights} masked weights, {masked_grads} masked value rows"))
}

fn c3_gradients() -> Check {
    let (nq, nc) = (7, 4);
    let mut params = ModelParams::init(&ModelConfig::new(nq, nc, 8, 2, 2), 33).unwrap();
    let mut r = rng(303);
    let mu = params.rasch.difficulty;
    for x in params.store.get_mut(mu).data_mut() {
        *x = r.gen_range(-0.5..0.5);
    }
    let input = random_input(&mut r, 6, nq, nc);
    let f = relevance_for(&mut r, &input, nq);
    let loss_of = |p: &ModelParams| {
        let mut sink = ParamGrads::zeros_like(&p.store);
        accumulate_sequence_grads(p, &input, Some(&f), 1.0, &mut sink).unwrap().loss
    };
    let mut analytic = ParamGrads::zeros_like(&params.store);
    accumulate_sequence_grads(&params, &input, Some(&f), 1.0, &mut analytic).unwrap();
    let h = 1e-5;
    let ids: Vec<_> = params.store.ids().collect();
    let mut scalars = 0usize;
    let mut worst = 0.0f64;
    for id in &ids {
        let name = params.store.name(*id).to_string();
        for j in 0..params.store.get(*id).numel() {
            let orig = params.store.get(*id).data()[j];
            params.store.get_mut(*id).data_mut()[j] = orig + h;
            let lp = loss_of(&params);
            params.store.get_mut(*id).data_mut()[j] = orig - h;
            let lm = loss_of(&params);
            params.store.get_mut(*id).data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.get(*id)[j];
            let scale = a.abs().max(numeric.abs());
            ensure((a - numeric).abs() <= 1e-3 * scale + 1e-8, || {
                format!("{name}[{j}]: analytic {a} numeric {numeric}")
            })?;
            if scale > 1e-6 {
                worst = worst.max((a - numeric).abs() / scale);
            }
            scalars += 1;
        }
    }
    Ok(format!("{} groups, {scalars} scalars, worst relative error {worst:.1e}", ids.len()))
}

fn c4_ablation_identity() -> Check {
    let mut r = rng(404);
    for inst in 0..20 {
        let params = ModelParams::init(&ModelConfig::new(9, 5, 16, 4, 2), inst).unwrap();
        let n = r.gen_range(1..=30);
        let input = random_input(&mut r, n, 9, 5);
        let masked = forward(&params, &input, Some(&RelevanceMatrix::ones(n))).unwrap();
        let open = forward(&params, &input, None).unwrap();
        let same = masked.probabilities.iter().zip(&open.probabilities).all(|(a, b)| a.to_bits() == b.to_bits())
            && masked.knowledge_states.iter().zip(&open.knowledge_states).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("instance {inst} differs"))?;
    }
    Ok("20 instances bitwise identical".into())
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let c = t.shape()[1];
    &t.data()[i * c..(i + 1) * c]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn c5_formulas() -> Check {
    let mut r = rng(505);
    let n = 8;
    let dk = 4;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let rand_t = |r: &mut ChaCha8Rng| {
            Tensor::new(&[n, dk], (0..n * dk).map(|_| r.gen_range(-1.5..1.5)).collect()).unwrap()
        };
        let (q, k) = (rand_t(&mut r), rand_t(&mut r));
        let theta: f64 = r.gen_range(0.01..3.0);
        // gamma_{t,t'} = exp(q_t.k_t'/sqrt dk) / sum_{tau' <= t} exp(q_t.k_tau'/sqrt dk)
        // d(t,tau) = |t - tau| prod_{t'=tau+1}^{t} gamma_{t,t'}
        // s_{t,tau} = exp(-theta d(t,tau)) q_t.k_tau / sqrt dk
        let mut d = vec![0.0; n * n];
        let mut s = vec![0.0; n * n];
        for t in 0..n {
            let denom: f64 = (0..=t).map(|u| (dot(row(&q, t), row(&k, u)) / (dk as f64).sqrt()).exp()).sum();
            for tau in 0..n {
                let mut prod = 1.0;
                for u in tau + 1..=t {
                    prod *= (dot(row(&q, t), row(&k, u)) / (dk as f64).sqrt()).exp() / denom;
                }
                d[t * n + tau] = if tau <= t { (t - tau) as f64 * prod } else { 0.0 };
                s[t * n + tau] = (-theta * d[t * n + tau]).exp() * dot(row(&q, t), row(&k, tau)) / (dk as f64).sqrt();
            }
        }
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(&q), g.constant(&k));
        let mask = AttentionMask::new(n, Causality::Inclusive, None).unwrap();
        let dv = context_distance(&mut g, qv, kv, &mask).unwrap();
        let th = g.constant(&Tensor::new(&[1, 1], vec![theta]).unwrap());
        let sv = monotonic_scores(&mut g, qv, kv, dv, th).unwrap();
        for (got, expect, what) in [(g.value(dv), &d, "distance"), (g.value(sv), &s, "score")] {
            for (i, (a, b)) in got.iter().zip(expect.iter()).enumerate() {
                worst = worst.max((a - b).abs());
                ensure((a - b).abs() <= 1e-12, || format!("{what}[{i}]: {a} vs {b}"))?;
            }
        }
    }
    Ok(format!("50 instances, max abs error {worst:.1e}"))
}

fn c6_metrics() -> Check {
    let mut r = rng(606);
    let mut checked = 0;
    for case in 0..1000 {
        let n = r.gen_range(2..=64);
        let levels = r.gen_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        match compute_auc(&scores, &labels) {
            Ok(a) => {
                ensure(a == wins / pairs, || format!("case {case}: {a} vs {}", wins / pairs))?;
                checked += 1;
            }
            Err(_) => ensure(pairs == 0.0, || format!("case {case}: AUC undefined with {pairs} pairs"))?,
        }
    }
    let fixtures: [(&[f64], &[u8], f64); 3] = [
        (&[0.9, 0.1, 0.5, 0.49], &[1, 0, 1, 0], 1.0),
        (&[0.9, 0.1, 0.5, 0.49], &[0, 1, 0, 1], 0.0),
        (&[0.7, 0.2, 0.5, 0.6, 0.3], &[1, 1, 0, 0, 0], 2.0 / 5.0),
    ];
    for (s, l, expect) in fixtures {
        let a = accuracy(s, l).map_err(|e| e.to_string())?;
        ensure(a == expect, || format!("accuracy {a} vs hand count {expect}"))?;
    }
    Ok(format!("{checked} defined AUC instances exact, 3 accuracy fixtures"))
}

fn student(id: &str, qs: &[u32]) -> StudentRecord {
    StudentRecord {
        student_id: id.into(),
        interactions: qs
            .iter()
            .enumerate()
            .map(|(t, &q)| Interaction {
                question_id: q,
                concept_id: 0,
                response: (t % 2) as u8,
                timestamp: t as i64,
            })
            .collect(),
        kc_expanded: false,
    }
}

fn c7_preprocessing() -> Check {
    let cfg = PreprocessConfig::default();
    ensure(cfg.min_interactions == 3 && cfg.max_len == 200 && PAD == -1, || format!("defaults {cfg:?}, pad {PAD}"))?;
    let mut routes = RouteTable::new();
    routes.insert(0, vec![KCRoute::new(0, vec![1, 2]).unwrap()]);
    routes.insert(
        1,
        vec![
            KCRoute::new(1, vec![1, 3]).unwrap(),
            KCRoute::new(1, vec![4, 5]).unwrap(),
            KCRoute::new(1, vec![4, 6]).unwrap(),
        ],
    );
    let long: Vec<u32> = (0..250).map(|_| 0).collect();
    let loaded = LoadedDataset {
        students: vec![
            student("two", &[0, 0]),
            student("three", &[0, 1, 0]),
            student("long", &long),
        ],
        routes,
        hierarchy: KCHierarchy::new(),
        report: LoadReport::default(),
    };
    let ds = preprocess(&loaded, cfg).map_err(|e| e.to_string())?;
    let ids: Vec<&str> = ds.sequences.iter().map(|s| s.student_id.as_str()).collect();
    ensure(ids == ["three", "long"], || format!("kept {ids:?}"))?;
    let three = &ds.sequences[0];
    // question 1 has three leaf concepts
    ensure(three.valid_len() == 5, || format!("expanded length {}", three.valid_len()))?;
    ensure(three.concept_ids[..5] == [2, 3, 5, 6, 2], || format!("expansion {:?}", &three.concept_ids[..5]))?;
    ensure(three.padded_len() == 200, || format!("padded to {}", three.padded_len()))?;
    let padded = three.question_ids[5..]
        .iter()
        .chain(&three.concept_ids[5..])
        .chain(&three.responses[5..])
        .all(|&x| x == -1);
    ensure(padded && three.valid_mask[5..].iter().all(|v| !v), || "padding is not -1".into())?;
    let long = &ds.sequences[1];
    ensure(long.valid_len() == 200 && long.padded_len() == 200, || format!("long kept {}", long.valid_len()))?;
    ensure(long.interactions[0].timestamp == 50, || "truncation did not keep the latest 200".into())?;
    let exact = truncate_pad(&student("x", &[0; 200]), 200);
    ensure(exact.valid_len() == 200 && exact.valid_mask.iter().all(|&v| v), || "200 entries were cut".into())?;

    let a = make_splits(100, 7).map_err(|e| e.to_string())?;
    let b = make_splits(100, 7).map_err(|e| e.to_string())?;
    ensure(a == b, || "split is not deterministic".into())?;
    ensure(a != make_splits(100, 8).unwrap(), || "split ignores the seed".into())?;
    ensure(a.test.len() == 20 && a.folds.len() == 5, || format!("{} test, {} folds", a.test.len(), a.folds.len()))?;
    ensure(a.folds.iter().all(|f| f.len() == 16), || "uneven folds".into())?;
    let mut all: Vec<usize> = a.test.iter().chain(a.folds.iter().flatten()).copied().collect();
    all.sort_unstable();
    ensure(all == (0..100).collect::<Vec<_>>(), || "split is not a partition".into())?;
    Ok("filter at 3, truncation at 200, pad -1, 1:3 expansion, 20% + 5 folds".into())
}

/// Settings shared by the synthetic training criteria.
fn synthetic_config(seed: u64, mask_enabled: bool) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        max_epochs: 30,
        patience: 5,
        dim: 64,
        heads: 4,
        blocks: 1,
        seed,
        mask_enabled,
        threads: 1,
    }
}

struct Synthetic {
    data: PreparedData,
    fold: FoldIndices,
    seed0_history: Option<Vec<EpochRecord>>,
}

fn synthetic_data() -> Result<(PreparedData, FoldIndices), String> {
    let spec = SynthSpec::default();
    let e = |e: routekt_core::Error| e.to_string();
    let ds = generate(&spec).map_err(e)?;
    ensure(
        spec.roots == 2 && spec.depth == 3 && ds.routes.len() == 200 && spec.students == 500 && spec.max_len == 100,
        || format!("synthetic spec {spec:?} gives {} questions", ds.routes.len()),
    )?;
    ensure((spec.gain, spec.guess, spec.slip) == (0.25, 0.2, 0.1), || format!("{spec:?}"))?;
    let (routes, hierarchy) = RouteTable::from_paths(&ds.routes).map_err(e)?;
    let loaded = LoadedDataset {
        students: ds.students,
        routes,
        hierarchy,
        report: LoadReport::default(),
    };
    let p = preprocess(&loaded, PreprocessConfig::default()).map_err(e)?;
    let data = PreparedData::from_dataset(&p, &p.route_table().map_err(e)?);
    let split = make_splits(data.len(), 0).map_err(e)?;
    let (train, val) = split.fold(0).map_err(e)?;
    Ok((
        data,
        FoldIndices {
            train,
            val,
            test: split.test,
        },
    ))
}

fn c8_synthetic(state: &mut Option<Synthetic>) -> Check {
    let (data, fold) = synthetic_data()?;
    let mut wins = 0;
    let mut margins = Vec::new();
    let mut reached = Vec::new();
    let mut seed0 = None;
    for seed in 0..5 {
        let mut test_auc = [0.0; 2];
        for (slot, mask) in [(0, true), (1, false)] {
            let out = train_fold(&synthetic_config(seed, mask), &data, &fold, None).map_err(|e| e.to_string())?;
            test_auc[slot] = out.test_report.and_then(|r| r.auc).ok_or("test AUC undefined")?;
            if mask {
                let first = out.history.iter().position(|h| h.val_auc.is_some_and(|a| a >= 0.70));
                reached.push(first.map(|i| i + 1));
                if seed == 0 {
                    seed0 = Some(out.history);
                }
            }
        }
        let margin = test_auc[0] - test_auc[1];
        wins += usize::from(margin > 0.0);
        margins.push(margin);
    }
    *state = Some(Synthetic {
        data,
        fold,
        seed0_history: seed0,
    });
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    let detail = format!(
        "first epoch with val AUC >= 0.70 per seed {reached:?}; test margins {}; {wins}/5 wins, mean {mean:+.4}",
        margins.iter().map(|m| format!("{m:+.4}")).collect::<Vec<_>>().join(" ")
    );
    ensure(reached.iter().all(Option::is_some), || format!("val AUC 0.70 not reached: {detail}"))?;
    ensure(wins >= 4 && mean > 0.0, || format!("sign test failed: {detail}"))?;
    Ok(detail)
}

fn c9_determinism(state: &Option<Synthetic>) -> Check {
    let s = state.as_ref().ok_or("criterion 8 produced no baseline run")?;
    let first = s.seed0_history.as_ref().ok_or("no seed-0 history")?;
    let again = train_fold(&synthetic_config(0, true), &s.data, &s.fold, None).map_err(|e| e.to_string())?;
    let same = first.len() == again.history.len()
        && first.iter().zip(&again.history).all(|(a, b)| {
            a.train_loss.to_bits() == b.train_loss.to_bits()
                && a.val_auc.map(f64::to_bits) == b.val_auc.map(f64::to_bits)
                && a == b
        });
    ensure(same, || "epoch logs differ".into())?;
    Ok(format!("{} epochs identical", first.len()))
}

fn routekt(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_routekt"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("routekt {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr))
    })
}

fn c10_protocol() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    routekt(&["synth", "--out", &p("raw"), "--students", "30", "--max-len", "12", "--branching", "2"])?;
    routekt(&[
        "preprocess",
        "--data",
        &p("raw/interactions.jsonl"),
        "--questions",
        &p("raw/questions.jsonl"),
        "--out",
        &p("data"),
    ])?;
    routekt(&["train", "--data", &p("data"), "--out", &p("run"), "--fold", "0"])?;
    let text = std::fs::read_to_string(dir.path().join("run/manifest.json")).map_err(|e| e.to_string())?;
    let m: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let train = &m["config"]["train"];
    let got = (
        train["lr"].as_f64(),
        train["batch_size"].as_u64(),
        train["max_epochs"].as_u64(),
        m["config"]["early_stopping"]["metric"].as_str(),
    );
    ensure(got == (Some(0.0001), Some(64), Some(200), Some("val_auc")), || format!("manifest has {got:?}"))?;
    ensure(m["subcommand"] == "train", || "wrong subcommand".into())?;
    Ok(format!(
        "lr {} batch {} epochs {} early stopping on {} (patience {})",
        train["lr"], train["batch_size"], train["max_epochs"], got.3.unwrap(), train["patience"]
    ))
}

fn main() {
    let mut synthetic = None;
    let criteria: Vec<Criterion> = vec![
        ("relevance matrix oracle", Duration::from_secs(10), Box::new(|_| c1_relevance_oracle())),
        ("zero leakage", Duration::from_secs(30), Box::new(|_| c2_zero_leakage())),
        ("gradient correctness", Duration::from_secs(60), Box::new(|_| c3_gradients())),
        ("ablation identity", Duration::from_secs(5), Box::new(|_| c4_ablation_identity())),
        ("monotonic attention formulas", Duration::from_secs(5), Box::new(|_| c5_formulas())),
        ("metric oracle", Duration::from_secs(10), Box::new(|_| c6_metrics())),
        ("preprocessing conformance", Duration::from_secs(5), Box::new(|_| c7_preprocessing())),
        ("synthetic learnability and mask benefit", Duration::from_secs(15 * 60), Box::new(c8_synthetic)),
        ("determinism", Duration::MAX, Box::new(|s| c9_determinism(s))),
        ("training protocol defaults", Duration::MAX, Box::new(|_| c10_protocol())),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = run(&mut synthetic);
        let elapsed = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if elapsed <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; took {elapsed:.1?}, budget {budget:?}")),
            Err(e) => ("FAIL", e),
        };
        failed += usize::from(status == "FAIL");
        println!("criterion {:>2} {status} {name} [{:.1}s]: {detail}", i + 1, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
