//! Retrieval-conditioned evaluation.
//!
//! For every query the store returns its top `k_max` contexts. For each
//! `k ≤ k_max` the top `k` are arranged least relevant first, so the best
//! match sits next to the query, and the query is conditioned on them by each
//! method. The report records mean continuation loss and what the
//! conditioning cost: wall time, forward passes, tokens re-read and
//! elementwise operations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::compose::{
    compose_piconcat_r, compose_states, compose_states_counted, Method, OpCount,
};
use crate::corpus::CorpusRecord;
use crate::error::{Error, Result};
use crate::ssm::{
    continuation_loss, forward, forward_call_count, zero_states, LayerState, ToyModelParams,
    TokenSequence,
};
use crate::store::{StateStore, StoreEntry};
use crate::tensor::CompensatedSum;
use crate::train::{TrainExample, MAX_TRAIN_CONTEXTS};

pub const EVAL_SCHEMA: &str = "eval.v1";

/// Up to this many contexts the worst CASO ordering is found by trying all
/// of them; beyond it the reverse of the relevance order is used.
pub const CASO_WORST_EXHAUSTIVE_MAX: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMethod {
    Baseline,
    Concat,
    Soup,
    Caso,
    /// CASO under the ordering that maximizes the loss.
    CasoWorst,
    PicasoS,
    PicasoR,
    PiconcatR,
}

impl EvalMethod {
    pub const ALL: [EvalMethod; 8] = [
        EvalMethod::Baseline,
        EvalMethod::Concat,
        EvalMethod::Soup,
        EvalMethod::Caso,
        EvalMethod::CasoWorst,
        EvalMethod::PicasoS,
        EvalMethod::PicasoR,
        EvalMethod::PiconcatR,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EvalMethod::CasoWorst => "caso-worst",
            other => other.composition().expect("plain method").name(),
        }
    }

    pub fn composition(&self) -> Option<Method> {
        Some(match self {
            EvalMethod::Baseline => Method::Baseline,
            EvalMethod::Concat => Method::Concat,
            EvalMethod::Soup => Method::Soup,
            EvalMethod::Caso => Method::Caso,
            EvalMethod::CasoWorst => return None,
            EvalMethod::PicasoS => Method::PicasoS,
            EvalMethod::PicasoR => Method::PicasoR,
            EvalMethod::PiconcatR => Method::PiConcatR,
        })
    }
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        EvalMethod::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown evaluation method '{s}'")))
    }
}

/// Initial layer states for a query conditioned on `entries` (in reading
/// order) by `method`.
///
/// Concat starts from the stored state of the first entry and re-reads the
/// tokens of the others, one forward pass per segment.
pub fn conditioned_state(
    method: Method,
    entries: &[StoreEntry],
    params: &ToyModelParams,
) -> Result<Vec<LayerState>> {
    if entries.is_empty() || method == Method::Baseline {
        return Ok(zero_states(&params.config));
    }
    match method {
        Method::Concat => {
            let mut state = entries[0].state.to_layer_states();
            for e in &entries[1..] {
                state = forward(&e.tokens, &state, params)?.final_states;
            }
            Ok(state)
        }
        Method::PiConcatR => {
            let seqs: Vec<TokenSequence> = entries.iter().map(|e| e.tokens.clone()).collect();
            Ok(compose_piconcat_r(&seqs, params)?.to_layer_states())
        }
        other => Ok(compose_states(other, &StoreEntry::states(entries))?.to_layer_states()),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Measured {
    loss: f64,
    seconds: f64,
    model_calls: u64,
    tokens_scanned: u64,
    ops: u64,
}

fn measure_plain(
    method: Method,
    entries: &[StoreEntry],
    record: (&TokenSequence, &TokenSequence),
    params: &ToyModelParams,
) -> Result<Measured> {
    let mut ops = OpCount::default();
    let calls = forward_call_count();
    let start = Instant::now();
    let init = if entries.is_empty() || !method.is_state_only() || method == Method::Baseline {
        conditioned_state(method, entries, params)?
    } else {
        compose_states_counted(method, &StoreEntry::states(entries), &mut ops)?.to_layer_states()
    };
    let seconds = start.elapsed().as_secs_f64();
    let model_calls = forward_call_count() - calls;
    let tokens = |es: &[StoreEntry]| es.iter().map(|e| e.tokens.len() as u64).sum::<u64>();
    let tokens_scanned = match method {
        Method::Concat if !entries.is_empty() => tokens(&entries[1..]),
        Method::PiConcatR => entries.len() as u64 * tokens(entries),
        _ => 0,
    };
    Ok(Measured {
        loss: continuation_loss(record.0, record.1, &init, params)?,
        seconds,
        model_calls,
        tokens_scanned,
        ops: ops.get(),
    })
}

fn measure_caso_worst(
    entries: &[StoreEntry],
    record: (&TokenSequence, &TokenSequence),
    params: &ToyModelParams,
) -> Result<Measured> {
    if entries.is_empty() {
        return measure_plain(Method::Baseline, entries, record, params);
    }
    let states = StoreEntry::states(entries);
    let orders: Vec<Vec<usize>> = if entries.len() <= CASO_WORST_EXHAUSTIVE_MAX {
        (0..entries.len()).permutations(entries.len()).collect()
    } else {
        vec![(0..entries.len()).rev().collect()]
    };
    let mut worst = Measured {
        loss: f64::NEG_INFINITY,
        ..Measured::default()
    };
    for order in orders {
        let ordered: Vec<_> = order.iter().map(|&i| states[i].clone()).collect();
        let mut ops = OpCount::default();
        let start = Instant::now();
        let init = compose_states_counted(Method::Caso, &ordered, &mut ops)?.to_layer_states();
        worst.seconds += start.elapsed().as_secs_f64();
        worst.ops += ops.get();
        let loss = continuation_loss(record.0, record.1, &init, params)?;
        if loss > worst.loss {
            worst.loss = loss;
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub methods: Vec<EvalMethod>,
    pub k_max: usize,
    /// Evaluate only the first `max_queries` corpus records.
    pub max_queries: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: EvalMethod::ALL.to_vec(),
            k_max: 5,
            max_queries: None,
        }
    }
}

/// Means over queries for one `(k, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub k: usize,
    pub method: EvalMethod,
    pub queries: usize,
    pub mean_loss: f64,
    pub mean_compose_seconds: f64,
    pub model_calls: f64,
    pub tokens_scanned: f64,
    pub op_count: f64,
}

/// One-sided paired sign test of "`better` has lower loss than `worse`".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    /// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

pub fn paired_sign_test(better: &[f64], worse: &[f64]) -> Result<SignTest> {
    if better.len() != worse.len() {
        return Err(Error::invalid("sign test needs paired samples of equal length"));
    }
    let (mut wins, mut losses, mut ties) = (0u64, 0u64, 0u64);
    for (b, w) in better.iter().zip(worse) {
        match b.partial_cmp(w) {
            Some(std::cmp::Ordering::Less) => wins += 1,
            Some(std::cmp::Ordering::Greater) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = wins + losses;
    let p_value = if wins == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).map_err(|e| Error::invalid(e.to_string()))?;
        dist.sf(wins - 1)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k: usize,
    pub better: EvalMethod,
    pub worse: EvalMethod,
    #[serde(flatten)]
    pub test: SignTest,
}

/// Pairs compared at every `k ≥ 1` when both methods were evaluated.
pub const STANDARD_COMPARISONS: [(EvalMethod, EvalMethod); 6] = [
    (EvalMethod::Concat, EvalMethod::Baseline),
    (EvalMethod::Concat, EvalMethod::PicasoR),
    (EvalMethod::PicasoR, EvalMethod::Soup),
    (EvalMethod::PicasoR, EvalMethod::CasoWorst),
    (EvalMethod::Soup, EvalMethod::Baseline),
    (EvalMethod::PicasoR, EvalMethod::Baseline),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub k_max: usize,
    pub queries: usize,
    pub rows: Vec<EvalRow>,
    pub comparisons: Vec<Comparison>,
    #[serde(skip)]
    losses: BTreeMap<(usize, EvalMethod), Vec<f64>>,
}

pub const EVAL_CSV_COLUMNS: &str =
    "k,method,queries,mean_loss,mean_compose_seconds,model_calls,tokens_scanned,op_count";

impl EvalReport {
    /// Per-query losses in corpus order.
    pub fn losses(&self, k: usize, method: EvalMethod) -> Option<&[f64]> {
        self.losses.get(&(k, method)).map(Vec::as_slice)
    }

    pub fn row(&self, k: usize, method: EvalMethod) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.k == k && r.method == method)
    }

    pub fn compare(&self, k: usize, better: EvalMethod, worse: EvalMethod) -> Result<SignTest> {
        match (self.losses(k, better), self.losses(k, worse)) {
            (Some(b), Some(w)) => paired_sign_test(b, w),
            _ => Err(Error::invalid(format!(
                "report has no k={k} rows for both {better} and {worse}"
            ))),
        }
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# {EVAL_SCHEMA}")?;
        writeln!(w, "{EVAL_CSV_COLUMNS}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.9},{:.9},{},{},{}",
                r.k,
                r.method,
                r.queries,
                r.mean_loss,
                r.mean_compose_seconds,
                r.model_calls,
                r.tokens_scanned,
                r.op_count
            )?;
        }
        Ok(())
    }
}

fn check_config(cfg: &EvalConfig, store: &StateStore) -> Result<()> {
    if cfg.methods.is_empty() {
        return Err(Error::invalid("no evaluation methods selected"));
    }
    if cfg.k_max > store.len() {
        return Err(Error::invalid(format!(
            "k_max {} exceeds the {} contexts in the store",
            cfg.k_max,
            store.len()
        )));
    }
    Ok(())
}

pub fn evaluate(
    store: &StateStore,
    records: &[CorpusRecord],
    params: &ToyModelParams,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    store.check_params(params)?;
    check_config(cfg, store)?;
    let records = &records[..cfg.max_queries.unwrap_or(records.len()).min(records.len())];
    if records.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    let methods: Vec<EvalMethod> = cfg.methods.iter().copied().unique().collect();

    // [query][k][method]
    let per_query = records
        .par_iter()
        .map(|rec| {
            let (q, c) = (rec.query_tokens(), rec.continuation_tokens());
            let ranked = if cfg.k_max == 0 {
                Vec::new()
            } else {
                let ids: Vec<String> = store.query(&q, cfg.k_max)?.into_iter().map(|h| h.0).collect();
                store.load_entries(&ids)?
            };
            (0..=cfg.k_max)
                .map(|k| {
                    let subset: Vec<StoreEntry> = ranked[..k].iter().rev().cloned().collect();
                    methods
                        .iter()
                        .map(|&m| match m.composition() {
                            Some(plain) => measure_plain(plain, &subset, (&q, &c), params),
                            None => measure_caso_worst(&subset, (&q, &c), params),
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let nq = records.len();
    let mean = |f: &dyn Fn(&Measured) -> f64, k: usize, j: usize| {
        let mut acc = CompensatedSum::default();
        per_query.iter().for_each(|q| acc.add(f(&q[k][j])));
        acc.value() / nq as f64
    };
    let mut rows = Vec::new();
    let mut losses = BTreeMap::new();
    for k in 0..=cfg.k_max {
        for (j, &method) in methods.iter().enumerate() {
            let loss = mean(&|m| m.loss, k, j);
            if !loss.is_finite() {
                return Err(Error::NumericOverflow {
                    step: k,
                    detail: format!("mean loss of {method} at k={k} is not finite"),
                });
            }
            rows.push(EvalRow {
                k,
                method,
                queries: nq,
                mean_loss: loss,
                mean_compose_seconds: mean(&|m| m.seconds, k, j),
                model_calls: mean(&|m| m.model_calls as f64, k, j),
                tokens_scanned: mean(&|m| m.tokens_scanned as f64, k, j),
                op_count: mean(&|m| m.ops as f64, k, j),
            });
            losses.insert((k, method), per_query.iter().map(|q| q[k][j].loss).collect());
        }
    }
    let mut report = EvalReport {
        schema: EVAL_SCHEMA.to_string(),
        k_max: cfg.k_max,
        queries: nq,
        rows,
        comparisons: Vec::new(),
        losses,
    };
    for k in 1..=cfg.k_max {
        for (better, worse) in STANDARD_COMPARISONS {
            if let Ok(test) = report.compare(k, better, worse) {
                report.comparisons.push(Comparison {
                    k,
                    better,
                    worse,
                    test,
                });
            }
        }
    }
    Ok(report)
}

/// Training examples whose contexts come from the store: `k` uniform in
/// `min_k..=max_k` per record, least relevant first.
pub fn retrieval_examples(
    store: &StateStore,
    records: &[CorpusRecord],
    min_k: usize,
    max_k: usize,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    if min_k > max_k || max_k > MAX_TRAIN_CONTEXTS || max_k > store.len() {
        return Err(Error::invalid(format!(
            "context range {min_k}..={max_k} must lie within 0..={}",
            MAX_TRAIN_CONTEXTS.min(store.len())
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks: Vec<usize> = records.iter().map(|_| rng.gen_range(min_k..=max_k)).collect();
    records
        .par_iter()
        .zip(ks)
        .map(|(rec, k)| {
            let q = rec.query_tokens();
            let contexts = if k == 0 {
                Vec::new()
            } else {
                let ids: Vec<String> = store.query(&q, k)?.into_iter().map(|h| h.0).collect();
                let mut entries = store.load_entries(&ids)?;
                entries.reverse();
                entries.into_iter().map(|e| e.tokens).collect()
            };
            TrainExample::new(q, rec.continuation_tokens(), contexts)
        })
        .collect()
}
