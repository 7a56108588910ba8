//! Cost of composition as the number of contexts grows.
//!
//! Each method is run on seeded random contexts for every `n` in a list.
//! Rows record instrumented operation counts, forward passes and mean wall
//! time. A least-squares fit of `log cost` against `log n` gives each
//! method's empirical scaling exponent.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{
    compose_piconcat_r, compose_states_counted, picaso_r_weights_counted,
    picaso_s_weights_counted, Method, OpCount, MAX_BINOMIAL_N,
};
use crate::error::{Error, Result};
use crate::ssm::{
    forward_call_count, ContextState, LayerContext, ToyModelConfig, ToyModelParams, TokenSequence,
};
use crate::tensor::Matrix;

pub const BENCH_SCHEMA: &str = "bench.v1";
pub const BENCH_CSV_COLUMNS: &str =
    "method,n,m,layers,repeats,ops,weight_ops,model_calls,tokens_scanned,mean_seconds";
pub const SLOPE_CSV_COLUMNS: &str = "method,ops_slope,weight_ops_slope,seconds_slope";

/// Tokens per synthetic context in the PIConcat-R runs.
const BENCH_CONTEXT_TOKENS: usize = 16;
const BENCH_EMBED_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub m: usize,
    pub layers: usize,
    pub repeats: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_list: vec![4, 8, 16, 32],
            m: 64,
            layers: 1,
            repeats: 5,
            methods: vec![
                Method::Soup,
                Method::Caso,
                Method::PicasoS,
                Method::PicasoR,
                Method::PiConcatR,
            ],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub n: usize,
    /// Everything [`compose_states_counted`] counts, per run.
    pub ops: u64,
    /// Weight computation alone (PICASO methods), per run.
    pub weight_ops: u64,
    pub model_calls: u64,
    pub tokens_scanned: u64,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub method: Method,
    pub ops_slope: Option<f64>,
    pub weight_ops_slope: Option<f64>,
    pub seconds_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<Slope>,
}

/// Least-squares slope of `ln y` against `ln x`. `None` with fewer than two
/// points or any non-positive value.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| v.is_nan() || v <= 0.0) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Seeded contexts with decays in `[0.5, 1)` and states in `[-1, 1]`.
pub fn random_contexts(n: usize, m: usize, layers: usize, seed: u64) -> Vec<ContextState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| ContextState {
            context_id: format!("bench-{i}"),
            token_count: BENCH_CONTEXT_TOKENS,
            layers: (0..layers)
                .map(|_| {
                    let decay: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.0)).collect();
                    LayerContext {
                        x: (0..m).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
                        log_decay: decay.iter().map(|a| a.ln()).collect(),
                        decay,
                        conv_tail: Matrix::zeros(BENCH_EMBED_DIM, 1),
                    }
                })
                .collect(),
        })
        .collect()
}

fn check(cfg: &BenchConfig) -> Result<()> {
    if cfg.n_list.is_empty() || cfg.n_list.contains(&0) {
        return Err(Error::invalid("n-list must be non-empty and positive"));
    }
    if cfg.m == 0 || cfg.layers == 0 || cfg.repeats == 0 {
        return Err(Error::invalid("m, layers and repeats must be >= 1"));
    }
    if cfg.methods.is_empty() || cfg.methods.contains(&Method::Baseline) || cfg.methods.contains(&Method::Concat) {
        return Err(Error::invalid(
            "bench methods are soup, caso, picaso-s, picaso-r and piconcat-r",
        ));
    }
    let max_n = cfg.n_list.iter().copied().max().unwrap_or(0);
    if cfg.methods.contains(&Method::PicasoS) && max_n > MAX_BINOMIAL_N + 1 {
        return Err(Error::invalid(format!(
            "picaso-s supports at most {} contexts",
            MAX_BINOMIAL_N + 1
        )));
    }
    Ok(())
}

fn bench_one(method: Method, n: usize, cfg: &BenchConfig) -> Result<BenchRow> {
    let seed = cfg.seed.wrapping_add(n as u64);
    let contexts = random_contexts(n, cfg.m, cfg.layers, seed);
    let mut weight_ops = OpCount::default();
    match method {
        Method::PicasoS => drop(picaso_s_weights_counted(&contexts, &mut weight_ops)?),
        Method::PicasoR => drop(picaso_r_weights_counted(&contexts, &mut weight_ops)?),
        _ => {}
    }
    let model = if method == Method::PiConcatR {
        let mcfg = ToyModelConfig::new(BENCH_EMBED_DIM, cfg.m, cfg.layers).with_conv_width(1);
        let params = ToyModelParams::init(mcfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<TokenSequence> = (0..n)
            .map(|_| {
                TokenSequence::new((0..BENCH_CONTEXT_TOKENS).map(|_| rng.gen_range(0..256)).collect())
            })
            .collect();
        Some((params, seqs))
    } else {
        None
    };

    let mut ops = 0;
    let mut calls = 0;
    let mut total = 0.0;
    for _ in 0..cfg.repeats {
        let mut count = OpCount::default();
        let before = forward_call_count();
        let start = Instant::now();
        match &model {
            Some((params, seqs)) => drop(compose_piconcat_r(seqs, params)?),
            None => drop(compose_states_counted(method, &contexts, &mut count)?),
        }
        total += start.elapsed().as_secs_f64();
        calls = forward_call_count() - before;
        ops = count.get();
    }
    Ok(BenchRow {
        method,
        n,
        ops,
        weight_ops: weight_ops.get(),
        model_calls: calls,
        tokens_scanned: if model.is_some() { (n * n * BENCH_CONTEXT_TOKENS) as u64 } else { 0 },
        mean_seconds: total / cfg.repeats as f64,
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    check(cfg)?;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &n in &cfg.n_list {
            rows.push(bench_one(method, n, cfg)?);
        }
    }
    let slopes = cfg
        .methods
        .iter()
        .map(|&method| {
            let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.method == method).collect();
            let xs: Vec<f64> = mine.iter().map(|r| r.n as f64).collect();
            let fit = |f: fn(&BenchRow) -> f64| {
                loglog_slope(&xs, &mine.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            Slope {
                method,
                ops_slope: fit(|r| r.ops as f64),
                weight_ops_slope: fit(|r| r.weight_ops as f64),
                seconds_slope: fit(|r| r.mean_seconds),
            }
        })
        .collect();
    Ok(BenchReport {
        schema: BENCH_SCHEMA.to_string(),
        config: cfg.clone(),
        rows,
        slopes,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |s| format!("{s:.6}"))
}

impl BenchReport {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# {BENCH_SCHEMA}")?;
        writeln!(w, "{BENCH_CSV_COLUMNS}")?;
        let c = &self.config;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{:.9}",
                r.method,
                r.n,
                c.m,
                c.layers,
                c.repeats,
                r.ops,
                r.weight_ops,
                r.model_calls,
                r.tokens_scanned,
                r.mean_seconds
            )?;
        }
        Ok(())
    }

    pub fn write_slopes_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# {BENCH_SCHEMA}")?;
        writeln!(w, "{SLOPE_CSV_COLUMNS}")?;
        for s in &self.slopes {
            writeln!(
                w,
                "{},{},{},{}",
                s.method,
                opt(s.ops_slope),
                opt(s.weight_ops_slope),
                opt(s.seconds_slope)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let xs = [2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(2.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(loglog_slope(&[1.0], &[1.0]), None);
        assert_eq!(loglog_slope(&[1.0, 2.0], &[0.0, 1.0]), None);
    }

    #[test]
    fn weight_ops_scale_as_expected() {
        let cfg = BenchConfig {
            m: 4,
            repeats: 1,
            ..BenchConfig::default()
        };
        let report = run_bench(&cfg).unwrap();
        let slope = |m| report.slopes.iter().find(|s| s.method == m).unwrap().clone();
        let r = slope(Method::PicasoR).weight_ops_slope.unwrap();
        let s = slope(Method::PicasoS).weight_ops_slope.unwrap();
        assert!((r - 1.0).abs() < 0.3, "{r}");
        assert!((s - 3.0).abs() < 0.3, "{s}");
        for row in &report.rows {
            let expect = if row.method == Method::PiConcatR { row.n as u64 } else { 0 };
            assert_eq!(row.model_calls, expect);
        }
        assert!(run_bench(&BenchConfig { n_list: vec![], ..cfg.clone() }).is_err());
        assert!(run_bench(&BenchConfig { methods: vec![Method::Concat], ..cfg }).is_err());
    }
}
