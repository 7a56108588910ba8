//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the PASS/FAIL lines always reach
//! stdout. Exits nonzero if any criterion fails other than the distance
//! bound, which is false as stated and is reported rather than asserted.

use std::process::ExitCode;
use std::time::Instant;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssm_compose::attribution::{leave_one_in, leave_one_out};
use ssm_compose::bench::{run_bench, BenchConfig};
use ssm_compose::compose::*;
use ssm_compose::corpus::{gen_corpus, sample_examples, CorpusRecord};
use ssm_compose::eval::{evaluate, retrieval_examples, EvalConfig, EvalMethod};
use ssm_compose::ssm::*;
use ssm_compose::store::{content_id, HashingEmbedder, StateStore, StoreEntry};
use ssm_compose::tensor::{max_rel_error, Matrix};
use ssm_compose::train::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_contexts(rng: &mut ChaCha8Rng, n: usize, m: usize, decay_lo: f64) -> Vec<ContextState> {
    (0..n)
        .map(|i| {
            let decay: Vec<f64> = (0..m).map(|_| rng.gen_range(decay_lo..1.0)).collect();
            ContextState {
                context_id: format!("c{i}"),
                token_count: 1,
                layers: vec![LayerContext {
                    x: (0..m).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
                    log_decay: decay.iter().map(|a| a.ln()).collect(),
                    decay,
                    conv_tail: Matrix::zeros(1, 1),
                }],
            }
        })
        .collect()
}

fn caso_mean(orders: impl Iterator<Item = Vec<ContextState>>) -> Vec<f64> {
    let xs: Vec<Vec<f64>> = orders.map(|o| compose_caso(&o).unwrap().layers[0].x.clone()).collect();
    (0..xs[0].len())
        .map(|k| ssm_compose::tensor::compensated_sum(xs.iter().map(|x| x[k])) / xs.len() as f64)
        .collect()
}

fn single_layer_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let m = rng.gen_range(1..=64);
        let d = rng.gen_range(2..=16);
        let cfg = ToyModelConfig::new(d, m, 1).with_conv_width(1);
        let params = ToyModelParams::init_with_scale(cfg, case, 0.5).unwrap();
        let n = rng.gen_range(1..=10);
        let segs: Vec<TokenSequence> = (0..n)
            .map(|_| {
                let len = rng.gen_range(1..=50);
                TokenSequence::new((0..len).map(|_| rng.gen_range(0..256)).collect())
            })
            .collect();
        let states: Vec<_> = segs.iter().map(|s| encode_context(s, &params, "seg").unwrap()).collect();
        let whole = encode_context(&TokenSequence::concat(&segs), &params, "all").unwrap();
        let caso = compose_caso(&states).unwrap();
        worst = worst.max(max_rel_error(&caso.layers[0].x, &whole.layers[0].x, 1e-12));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && secs < 10.0,
        format!("max rel err {worst:.2e} over 100 cases (conv width 1), {secs:.2} s"),
    )
}

fn symmetric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for n in 2..=6 {
        for _ in 0..50 {
            let c = random_contexts(&mut rng, n, 8, 0.0);
            let oracle = caso_mean(c.iter().cloned().permutations(n));
            let got = compose_picaso_s(&c).unwrap();
            worst = worst.max(max_rel_error(&got.layers[0].x, &oracle, 1e-12));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && secs < 60.0,
        format!("max rel err {worst:.2e} vs all n! orderings, n = 2..6, {secs:.2} s"),
    )
}

fn cyclic_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for n in [2, 4, 8, 16, 32, 64] {
        for _ in 0..20 {
            let c = random_contexts(&mut rng, n, 8, 0.0);
            let rots = (0..n).map(|r| (0..n).map(|i| c[(r + i) % n].clone()).collect());
            let oracle = caso_mean(rots);
            let got = compose_picaso_r(&c).unwrap();
            worst = worst.max(max_rel_error(&got.layers[0].x, &oracle, 1e-12));
        }
    }
    outcome(worst < 1e-9, format!("max rel err {worst:.2e} vs n rotations, n up to 64"))
}

fn esp_recurrence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for n in 1..=16 {
        for _ in 0..20 {
            let vars: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
            let tree = esp_balanced(&vars, 1).unwrap();
            let direct = esp_all(&vars).unwrap();
            for m in 0..=n {
                let (a, b) = (tree.value(m, 0), direct.value(m, 0));
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE));
            }
        }
    }
    outcome(worst < 1e-12, format!("max rel err {worst:.2e}, merge tree vs direct, n <= 16"))
}

fn complexity_scaling() -> Outcome {
    let cfg = BenchConfig {
        n_list: vec![4, 8, 16, 32],
        m: 16,
        layers: 1,
        repeats: 1,
        ..BenchConfig::default()
    };
    let report = run_bench(&cfg).unwrap();
    let slope = |m: Method| {
        report
            .slopes
            .iter()
            .find(|s| s.method == m)
            .and_then(|s| s.weight_ops_slope)
            .unwrap_or(f64::NAN)
    };
    let (r, s) = (slope(Method::PicasoR), slope(Method::PicasoS));
    let calls_ok = report.rows.iter().all(|row| {
        let expect = if row.method == Method::PiConcatR { row.n as u64 } else { 0 };
        row.model_calls == expect
    });
    outcome(
        (r - 1.0).abs() <= 0.3 && (s - 3.0).abs() <= 0.3 && calls_ok,
        format!(
            "op-count slopes picaso-r {r:.3}, picaso-s {s:.3}; model calls piconcat-r = n, others = 0: {calls_ok}"
        ),
    )
}

fn distance_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut violations, mut corrected_violations) = (0, 0);
    for _ in 0..1000 {
        let c = random_contexts(&mut rng, 2, 8, 0.0);
        let b = caso_distance_bound(&c[0], &c[1]).unwrap()[0];
        if b.lhs > b.rhs {
            violations += 1;
        }
        if b.lhs > 2.0 * b.rhs * (1.0 + 1e-12) {
            corrected_violations += 1;
        }
    }
    let mut id = random_contexts(&mut rng, 2, 8, 0.0);
    for c in &mut id {
        c.layers[0].decay.iter_mut().for_each(|a| *a = 1.0);
    }
    let ib = caso_distance_bound(&id[0], &id[1]).unwrap()[0];
    let identity_ok = ib.lhs == 0.0 && ib.rhs == 0.0;
    outcome(
        violations == 0 && identity_ok,
        format!(
            "{violations}/1000 pairs violate lhs <= rhs (the stated bound drops the cross term \
             2<(A_b - I)x_a, (I - A_a)x_b>); identity decay lhs = rhs = 0: {identity_ok}; \
             lhs <= 2 rhs: {corrected_violations} violations"
        ),
    )
}

fn gradient_checks() -> Outcome {
    let cfg = ToyModelConfig::new(8, 16, 1);
    let params = ToyModelParams::init_with_scale(cfg, 7, 0.3).unwrap();
    let docs = gen_corpus(7, 4).unwrap();
    let ex = TrainExample::new(
        docs[0].query_tokens(),
        docs[0].continuation_tokens(),
        docs[1..].iter().map(CorpusRecord::context_tokens).collect(),
    )
    .unwrap();
    let gc = GradCheckConfig::default();
    let bptc = gradient_check(&ex, &params, Objective::Bptc, &gc).unwrap().max_rel_error();
    let bp2c = gradient_check(&ex, &params, Objective::Bp2c, &gc).unwrap().max_rel_error();
    let (_, g) = loss_and_grad(&ex, &params, Objective::Bp2c).unwrap();
    let read_outside_contexts: Vec<u32> = ex
        .query
        .as_slice()
        .iter()
        .chain(ex.continuation.as_slice())
        .copied()
        .collect();
    let context_only: Vec<u32> = ex
        .contexts
        .iter()
        .flat_map(|c| c.as_slice().iter().copied())
        .filter(|t| !read_outside_contexts.contains(t))
        .unique()
        .collect();
    let zero = !context_only.is_empty()
        && context_only
            .iter()
            .all(|&t| g.embedding.row(t as usize).iter().all(|&v| v == 0.0));
    let frozen = composed_initial_state(&ex, &params).unwrap();
    let same = grad_from_state(&ex, &frozen, &params).unwrap().1 == g;
    outcome(
        bptc < 1e-4 && bp2c < 1e-4 && zero && same,
        format!(
            "max rel err bptc {bptc:.2e}, bp2c {bp2c:.2e}; context-only gradient exactly zero: {zero} \
             ({} tokens); bp2c equals frozen-state gradient: {same}",
            context_only.len()
        ),
    )
}

/// Model pretrained on the fact-recall task, shared by the last criteria.
struct Recall {
    params: ToyModelParams,
    train_docs: Vec<CorpusRecord>,
    eval_docs: Vec<CorpusRecord>,
    eval_store: StateStore,
}

fn build_store(docs: &[CorpusRecord], params: &ToyModelParams) -> StateStore {
    let mut store = StateStore::new(params);
    for d in docs {
        store.insert(&d.context_tokens(), params).unwrap();
    }
    store
}

fn pretrain() -> Recall {
    let train_docs = gen_corpus(100, 2000).unwrap();
    let eval_docs = gen_corpus(0, 1000).unwrap();
    let data = sample_examples(&train_docs, 20_000, 1, 6, 0.5, 1).unwrap();
    let cfg = ToyModelConfig::default().with_conv_width(1);
    let init = ToyModelParams::init_with_scale(cfg, 0, 0.3).unwrap().with_decay_bias(6.0);
    let tc = TrainConfig {
        steps: 6000,
        lr: 0.01,
        objective: Objective::Concat,
        seed: 0,
        batch_size: 16,
        optimizer: Optimizer::Adam,
    };
    let params = train(&data, &init, &tc).unwrap().params;
    let eval_store = build_store(&eval_docs, &params);
    Recall {
        params,
        train_docs,
        eval_docs,
        eval_store,
    }
}

fn eval_ordering(r: &Recall) -> Outcome {
    let cfg = EvalConfig {
        methods: vec![
            EvalMethod::Baseline,
            EvalMethod::Concat,
            EvalMethod::Soup,
            EvalMethod::PicasoR,
            EvalMethod::CasoWorst,
        ],
        k_max: 5,
        max_queries: Some(200),
    };
    let report = evaluate(&r.eval_store, &r.eval_docs, &r.params, &cfg).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (better, worse) in [
        (EvalMethod::Concat, EvalMethod::Baseline),
        (EvalMethod::PicasoR, EvalMethod::Soup),
        (EvalMethod::PicasoR, EvalMethod::CasoWorst),
    ] {
        let t = report.compare(5, better, worse).unwrap();
        pass &= t.p_value < 0.05;
        parts.push(format!("{better}<{worse} {}/{} p={:.1e}", t.wins, t.wins + t.losses, t.p_value));
    }
    let loss = |m| report.row(5, m).unwrap().mean_loss;
    outcome(
        pass,
        format!(
            "k=5, 200 queries: {}; mean loss concat {:.3}, picaso-r {:.3}, soup {:.3}, baseline {:.3}",
            parts.join(", "),
            loss(EvalMethod::Concat),
            loss(EvalMethod::PicasoR),
            loss(EvalMethod::Soup),
            loss(EvalMethod::Baseline)
        ),
    )
}

fn training_direction(r: &Recall) -> Outcome {
    let train_store = build_store(&r.train_docs, &r.params);
    let data = retrieval_examples(&train_store, &r.train_docs, 0, 10, 7).unwrap();
    let held_out = retrieval_examples(&r.eval_store, &r.eval_docs[..200], 5, 5, 0).unwrap();
    let gap = |p: &ToyModelParams| {
        held_out
            .iter()
            .map(|e| loss_bptc(e, p).unwrap() - loss_concat(e, p).unwrap())
            .sum::<f64>()
            / held_out.len() as f64
    };
    let g0 = gap(&r.params);
    let reduction = |objective| {
        let cfg = TrainConfig {
            steps: 500,
            lr: 0.05,
            objective,
            seed: 7,
            batch_size: 16,
            optimizer: Optimizer::Sgd,
        };
        g0 - gap(&train(&data, &r.params, &cfg).unwrap().params)
    };
    let (bptc, bp2c) = (reduction(Objective::Bptc), reduction(Objective::Bp2c));
    outcome(
        bptc > 0.0 && bp2c >= 0.5 * bptc,
        format!(
            "picaso-r minus concat gap {g0:.4} at step 0; reduction after 500 steps bptc {bptc:.4}, bp2c {bp2c:.4}"
        ),
    )
}

fn attribution_precision(r: &Recall) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut loi, mut loo_r, mut loo_soup) = (0, 0, 0);
    let docs = &r.eval_docs;
    for i in 0..200 {
        let mut picked = vec![i];
        while picked.len() < 5 {
            let j = rng.gen_range(0..docs.len());
            if !picked.contains(&j) {
                picked.push(j);
            }
        }
        picked.shuffle(&mut rng);
        let relevant = picked.iter().position(|&j| j == i).unwrap();
        let entries: Vec<StoreEntry> = picked
            .iter()
            .map(|&j| r.eval_store.entry(&content_id(&docs[j].context_tokens())).unwrap())
            .collect();
        let (q, a) = (docs[i].query_tokens(), docs[i].continuation_tokens());
        let hit = |sel: usize| usize::from(sel == relevant);
        loi += hit(leave_one_in(&q, &a, &entries, &r.params).unwrap().selected);
        loo_r += hit(leave_one_out(&q, &a, &entries, &r.params, Method::PicasoR).unwrap().selected);
        loo_soup += hit(leave_one_out(&q, &a, &entries, &r.params, Method::Soup).unwrap().selected);
    }
    outcome(
        loo_r >= loo_soup && loi as f64 / 200.0 > 0.8,
        format!("200 trials, 1 relevant + 4 distractors: LOO picaso-r {loo_r}, LOO soup {loo_soup}, LOI {loi}"),
    )
}

fn bits(s: &ContextState) -> Vec<u64> {
    s.layers
        .iter()
        .flat_map(|l| {
            l.x.iter()
                .chain(&l.decay)
                .chain(&l.log_decay)
                .chain(l.conv_tail.as_slice())
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn store_round_trip() -> Outcome {
    let params = ToyModelParams::init(ToyModelConfig::default(), 11).unwrap();
    let docs = gen_corpus(11, 1000).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roundtrip.ssdb");
    let mut store = StateStore::new(&params);
    let mut mismatches = 0;
    for (i, d) in docs.iter().enumerate() {
        let tokens = d.context_tokens();
        let id = store.insert(&tokens, &params).unwrap();
        let fresh = encode_context(&tokens, &params, id.clone()).unwrap();
        let e = store.entry(&id).unwrap();
        if bits(&e.state) != bits(&fresh) || e.tokens != tokens {
            mismatches += 1;
        }
        if (i + 1) % 100 == 0 {
            store.save(&path).unwrap();
            let reopened = StateStore::open(&path).unwrap();
            for prev in &docs[..=i] {
                let id = content_id(&prev.context_tokens());
                if bits(&reopened.entry(&id).unwrap().state) != bits(&store.entry(&id).unwrap().state) {
                    mismatches += 1;
                }
            }
            store = reopened;
        }
    }
    let ranking = |s: &StateStore| -> Vec<u8> {
        let all: Vec<_> = docs[..200].iter().map(|d| s.query(&d.query_tokens(), 10).unwrap()).collect();
        serde_json::to_vec(&all).unwrap()
    };
    let first = ranking(&store);
    let rebuilt = build_store(&docs, &params);
    let bytes_equal = rebuilt.to_bytes().unwrap() == store.to_bytes().unwrap();
    let reloaded = StateStore::from_bytes(&store.to_bytes().unwrap(), Box::new(HashingEmbedder::default())).unwrap();
    let deterministic = first == ranking(&rebuilt) && first == ranking(&reloaded);
    outcome(
        mismatches == 0 && deterministic && bytes_equal,
        format!(
            "1000 insert/load cycles, {mismatches} bit mismatches; rankings identical across runs: \
             {deterministic}; rebuilt store byte-identical: {bytes_equal}"
        ),
    )
}

fn main() -> ExitCode {
    // The distance bound omits a cross term and does not hold in general.
    const KNOWN_FALSE: usize = 6;
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id:>2}] {name}: {}", o.detail);
        if !o.pass {
            failed.push(id);
        }
    };
    let start = Instant::now();
    report(1, "single-layer exactness", single_layer_exactness());
    report(2, "picaso-s permutation oracle", symmetric_oracle());
    report(3, "picaso-r rotation oracle", cyclic_oracle());
    report(4, "esp merge recurrence", esp_recurrence());
    report(5, "complexity scaling", complexity_scaling());
    report(6, "caso distance bound", distance_bound());
    report(7, "gradient checks", gradient_checks());
    let recall = pretrain();
    report(8, "retrieval eval ordering", eval_ordering(&recall));
    report(9, "training direction", training_direction(&recall));
    report(10, "attribution precision", attribution_precision(&recall));
    report(11, "store round trip", store_round_trip());
    let unexpected: Vec<usize> = failed.iter().copied().filter(|&id| id != KNOWN_FALSE).collect();
    println!(
        "acceptance: {}/11 pass in {:.1} s; unexpected failures: {:?}",
        11 - failed.len(),
        start.elapsed().as_secs_f64(),
        unexpected
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
