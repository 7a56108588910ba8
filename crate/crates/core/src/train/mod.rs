//! Fine-tuning through and up to the PICASO-R composed state.
//!
//! Restricted to single-layer models, where every gradient is exact and
//! hand-written. Context scans are recomputed from tokens on every step, so
//! BPTC gradients flow through the composition weights and into each
//! context's scan. BP2C treats the composed state as a constant.

mod tape;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::{apply_weights, picaso_r_weights, Method};
use crate::error::{Error, Result};
use crate::ssm::{ContextState, LayerContext, LayerState, ToyModelParams, TokenSequence};
use crate::tensor::Matrix;

use tape::{backward, scan, FinalGrad, Scan};

/// Largest retrieved-context count a training example may carry.
pub const MAX_TRAIN_CONTEXTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub query: TokenSequence,
    pub continuation: TokenSequence,
    /// Retrieved contexts, in retrieval order (last = closest to the query).
    pub contexts: Vec<TokenSequence>,
}

impl TrainExample {
    pub fn new(
        query: TokenSequence,
        continuation: TokenSequence,
        contexts: Vec<TokenSequence>,
    ) -> Result<Self> {
        let ex = Self {
            query,
            continuation,
            contexts,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::invalid("query must contain at least one token"));
        }
        if self.continuation.is_empty() {
            return Err(Error::invalid("continuation must not be empty"));
        }
        if self.contexts.len() > MAX_TRAIN_CONTEXTS {
            return Err(Error::invalid(format!(
                "at most {MAX_TRAIN_CONTEXTS} contexts per example, got {}",
                self.contexts.len()
            )));
        }
        if let Some(i) = self.contexts.iter().position(TokenSequence::is_empty) {
            return Err(Error::invalid(format!("context {i} is empty")));
        }
        Ok(())
    }

    /// `query ++ continuation[..-1]` and the scored `(position, target)` pairs.
    fn scored_input(&self, prefix_len: usize) -> (Vec<u32>, Vec<(usize, usize)>) {
        let cont = self.continuation.as_slice();
        let mut input = self.query.as_slice().to_vec();
        input.extend_from_slice(&cont[..cont.len() - 1]);
        let offset = prefix_len + self.query.len() - 1;
        let targets = cont
            .iter()
            .enumerate()
            .map(|(j, &tok)| (offset + j, tok as usize))
            .collect();
        (input, targets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Loss from the PICASO-R state, differentiated through the composition.
    Bptc,
    /// Same loss with the composed state held constant.
    Bp2c,
    /// Loss after reading the contexts and query as one sequence.
    Concat,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Bptc => "bptc",
            Objective::Bp2c => "bp2c",
            Objective::Concat => "concat",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bptc" => Ok(Objective::Bptc),
            "bp2c" => Ok(Objective::Bp2c),
            "concat" => Ok(Objective::Concat),
            _ => Err(Error::invalid(format!("unknown objective '{s}'"))),
        }
    }
}

fn check_single_layer(params: &ToyModelParams) -> Result<()> {
    if params.config.num_layers != 1 {
        return Err(Error::UnsupportedConfig(format!(
            "training needs a single-layer model, got {} layers",
            params.config.num_layers
        )));
    }
    Ok(())
}

/// Forward pass of the composed-state objectives, kept for the reverse pass.
struct ComposedForward {
    contexts: Vec<Scan>,
    /// n × m PICASO-R weights; absent without contexts.
    weights: Option<Matrix>,
    query: Scan,
}

fn scan_contexts(ex: &TrainExample, params: &ToyModelParams) -> Result<Vec<Scan>> {
    let zero = LayerState::zeros(&params.config);
    ex.contexts
        .iter()
        .map(|c| scan(c.as_slice(), &zero.x, &zero.conv_window, params, &[]))
        .collect()
}

fn compose_scans(scans: &[Scan], params: &ToyModelParams) -> Result<(LayerState, Option<Matrix>)> {
    if scans.is_empty() {
        return Ok((LayerState::zeros(&params.config), None));
    }
    let states: Vec<ContextState> = scans
        .iter()
        .enumerate()
        .map(|(i, s)| ContextState {
            context_id: format!("ctx-{i}"),
            token_count: s.num_steps(),
            layers: vec![LayerContext {
                x: s.x.clone(),
                decay: s.decay.clone(),
                log_decay: s.log_decay.clone(),
                conv_tail: s.window.clone(),
            }],
        })
        .collect();
    let mut weights = picaso_r_weights(&states)?;
    let composed = apply_weights(Method::PicasoR, &states, &weights)?;
    let mut state = composed.to_layer_states();
    Ok((state.remove(0), Some(weights.layers.remove(0))))
}

/// The PICASO-R initial state for `ex`, or the zero state without contexts.
pub fn composed_initial_state(ex: &TrainExample, params: &ToyModelParams) -> Result<LayerState> {
    check_single_layer(params)?;
    ex.validate()?;
    Ok(compose_scans(&scan_contexts(ex, params)?, params)?.0)
}

fn forward_composed(ex: &TrainExample, params: &ToyModelParams) -> Result<ComposedForward> {
    check_single_layer(params)?;
    ex.validate()?;
    let contexts = scan_contexts(ex, params)?;
    let (init, weights) = compose_scans(&contexts, params)?;
    let (input, targets) = ex.scored_input(0);
    let query = scan(&input, &init.x, &init.conv_window, params, &targets)?;
    Ok(ComposedForward {
        contexts,
        weights,
        query,
    })
}

fn mean_loss(s: &Scan) -> f64 {
    s.nll_sum / s.num_scored() as f64
}

/// Continuation loss starting from the PICASO-R composition of the contexts.
pub fn loss_bptc(ex: &TrainExample, params: &ToyModelParams) -> Result<f64> {
    Ok(mean_loss(&forward_composed(ex, params)?.query))
}

/// Same value as [`loss_bptc`]; the objectives differ only in gradients.
pub fn loss_bp2c(ex: &TrainExample, params: &ToyModelParams) -> Result<f64> {
    loss_bptc(ex, params)
}

/// Continuation loss from a fixed initial state.
pub fn loss_from_state(
    ex: &TrainExample,
    init: &LayerState,
    params: &ToyModelParams,
) -> Result<f64> {
    check_single_layer(params)?;
    ex.validate()?;
    let (input, targets) = ex.scored_input(0);
    Ok(mean_loss(&scan(&input, &init.x, &init.conv_window, params, &targets)?))
}

fn concat_input(ex: &TrainExample) -> (Vec<u32>, Vec<(usize, usize)>) {
    let prefix: Vec<u32> = ex.contexts.iter().flat_map(|c| c.as_slice().iter().copied()).collect();
    let (tail, targets) = ex.scored_input(prefix.len());
    let mut input = prefix;
    input.extend(tail);
    (input, targets)
}

fn forward_concat(ex: &TrainExample, params: &ToyModelParams) -> Result<Scan> {
    check_single_layer(params)?;
    ex.validate()?;
    let (input, targets) = concat_input(ex);
    let zero = LayerState::zeros(&params.config);
    scan(&input, &zero.x, &zero.conv_window, params, &targets)
}

/// Continuation loss after scanning `contexts ++ query` from a zero state.
pub fn loss_concat(ex: &TrainExample, params: &ToyModelParams) -> Result<f64> {
    Ok(mean_loss(&forward_concat(ex, params)?))
}

pub fn loss(ex: &TrainExample, params: &ToyModelParams, objective: Objective) -> Result<f64> {
    match objective {
        Objective::Bptc => loss_bptc(ex, params),
        Objective::Bp2c => loss_bp2c(ex, params),
        Objective::Concat => loss_concat(ex, params),
    }
}

/// Vector-Jacobian product of the cyclic weights for one channel:
/// `g_A[j] = Σ_k g_W[k] ∂W_k/∂A_j`.
///
/// With `P_l = Π_{i=1}^{l} A_{(k+i) mod n}` and `n W_k = Σ_{l<n} P_l`, the
/// derivative with respect to `A_{(k+l) mod n}` is `P_{l-1} R_l` where
/// `R_l = 1 + A_{(k+l+1) mod n} R_{l+1}` and `R_{n-1} = 1`.
fn cyclic_weights_vjp(decays: &[f64], g_w: &[f64], g_a: &mut [f64]) {
    let n = decays.len();
    let inv_n = 1.0 / n as f64;
    let mut prefix = vec![0.0; n];
    for k in 0..n {
        if g_w[k] == 0.0 {
            continue;
        }
        prefix[0] = 1.0;
        for l in 1..n {
            prefix[l] = prefix[l - 1] * decays[(k + l) % n];
        }
        let mut r = 1.0;
        for l in (1..n).rev() {
            g_a[(k + l) % n] += g_w[k] * inv_n * prefix[l - 1] * r;
            r = 1.0 + decays[(k + l) % n] * r;
        }
    }
}

fn grad_composed(
    fwd: &ComposedForward,
    params: &ToyModelParams,
    through_composition: bool,
) -> ToyModelParams {
    let cfg = &params.config;
    let (d, m, w) = (cfg.embed_dim, cfg.state_dim, cfg.conv_width);
    let mut grads = params.zeros_like();
    let weight = 1.0 / fwd.query.num_scored() as f64;
    let (g_x0, g_win0) = backward(&fwd.query, params, weight, FinalGrad::zeros(m, d, w), &mut grads);
    let Some(weights) = fwd.weights.as_ref().filter(|_| through_composition) else {
        return grads;
    };
    let n = fwd.contexts.len();
    let mut upstream: Vec<FinalGrad> = (0..n).map(|_| FinalGrad::zeros(m, d, w)).collect();
    let inv_n = 1.0 / n as f64;
    let mut decays = vec![0.0; n];
    let mut g_w = vec![0.0; n];
    let mut g_a = vec![0.0; n];
    for c in 0..m {
        for (k, s) in fwd.contexts.iter().enumerate() {
            decays[k] = s.decay[c];
            g_w[k] = g_x0[c] * s.x[c];
            upstream[k].x[c] = weights[(k, c)] * g_x0[c];
        }
        g_a.iter_mut().for_each(|v| *v = 0.0);
        cyclic_weights_vjp(&decays, &g_w, &mut g_a);
        for (u, ga) in upstream.iter_mut().zip(&g_a) {
            u.decay[c] = *ga;
        }
    }
    for u in &mut upstream {
        for (g, g0) in u.window.as_mut_slice().iter_mut().zip(g_win0.as_slice()) {
            *g = g0 * inv_n;
        }
    }
    for (s, u) in fwd.contexts.iter().zip(upstream) {
        backward(s, params, 0.0, u, &mut grads);
    }
    grads
}

/// Loss and exact gradient of `objective` on one example.
pub fn loss_and_grad(
    ex: &TrainExample,
    params: &ToyModelParams,
    objective: Objective,
) -> Result<(f64, ToyModelParams)> {
    match objective {
        Objective::Bptc | Objective::Bp2c => {
            let fwd = forward_composed(ex, params)?;
            let grads = grad_composed(&fwd, params, objective == Objective::Bptc);
            Ok((mean_loss(&fwd.query), grads))
        }
        Objective::Concat => {
            let s = forward_concat(ex, params)?;
            let cfg = &params.config;
            let mut grads = params.zeros_like();
            let weight = 1.0 / s.num_scored() as f64;
            let zero = FinalGrad::zeros(cfg.state_dim, cfg.embed_dim, cfg.conv_width);
            backward(&s, params, weight, zero, &mut grads);
            Ok((mean_loss(&s), grads))
        }
    }
}

/// Gradient of the BP2C loss with the composed state pinned to `init`.
pub fn grad_from_state(
    ex: &TrainExample,
    init: &LayerState,
    params: &ToyModelParams,
) -> Result<(f64, ToyModelParams)> {
    check_single_layer(params)?;
    ex.validate()?;
    let (input, targets) = ex.scored_input(0);
    let s = scan(&input, &init.x, &init.conv_window, params, &targets)?;
    let cfg = &params.config;
    let mut grads = params.zeros_like();
    let zero = FinalGrad::zeros(cfg.state_dim, cfg.embed_dim, cfg.conv_width);
    backward(&s, params, 1.0 / s.num_scored() as f64, zero, &mut grads);
    Ok((mean_loss(&s), grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorGradCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

/// Analytic vs central finite-difference gradients, per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub objective: Objective,
    pub loss: f64,
    pub tensors: Vec<TensorGradCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.tensors.iter().all(|t| t.max_rel_error.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub coords_per_tensor: usize,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords_per_tensor: 20,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Checks `objective`'s analytic gradient at randomly drawn coordinates of
/// every tensor. Embedding coordinates are drawn from rows of tokens the
/// example actually reads; the other rows have zero gradient by construction.
/// BP2C is checked with the composed state frozen at `params`.
pub fn gradient_check(
    ex: &TrainExample,
    params: &ToyModelParams,
    objective: Objective,
    cfg: &GradCheckConfig,
) -> Result<GradReport> {
    let (loss0, grads) = loss_and_grad(ex, params, objective)?;
    let frozen = match objective {
        Objective::Bp2c => Some(composed_initial_state(ex, params)?),
        _ => None,
    };
    let eval = |p: &ToyModelParams| match &frozen {
        Some(init) => loss_from_state(ex, init, p),
        None => loss(ex, p, objective),
    };

    let d = params.config.embed_dim;
    let mut used: Vec<usize> = ex
        .contexts
        .iter()
        .chain([&ex.query, &ex.continuation])
        .flat_map(|s| s.as_slice().iter().map(|&t| t as usize))
        .collect();
    used.sort_unstable();
    used.dedup();
    let embedding_coords: Vec<usize> = used
        .iter()
        .flat_map(|&row| (0..d).map(move |j| row * d + j))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let analytic = grads.tensors();
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(analytic.len());
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let pool: Vec<usize> = if name == "embedding" {
            embedding_coords.clone()
        } else {
            (0..g.len()).collect()
        };
        let take = cfg.coords_per_tensor.min(pool.len());
        let mut worst: f64 = 0.0;
        for pick in sample(&mut rng, pool.len(), take) {
            let idx = pool[pick];
            let orig = work.tensors()[ti].1[idx];
            work.tensors_mut()[ti].1[idx] = orig + cfg.step;
            let up = eval(&work)?;
            work.tensors_mut()[ti].1[idx] = orig - cfg.step;
            let down = eval(&work)?;
            work.tensors_mut()[ti].1[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = g[idx];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        tensors.push(TensorGradCheck {
            name: name.clone(),
            coords_checked: take,
            max_rel_error: worst,
        });
    }
    Ok(GradReport {
        objective,
        loss: loss0,
        tensors,
    })
}

/// Update rule. Fine-tuning uses plain SGD; Adam is offered for pretraining
/// the toy model from scratch, where SGD crawls through the initial plateau.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::invalid(format!("unknown optimizer '{s}'"))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    m: ToyModelParams,
    v: ToyModelParams,
    t: i32,
}

impl AdamState {
    fn new(params: &ToyModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ToyModelParams, grad: &ToyModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let g = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(g).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub objective: Objective,
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.1,
            objective: Objective::Bptc,
            seed: 0,
            batch_size: 8,
            optimizer: Optimizer::Sgd,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ToyModelParams,
    /// Mean batch loss at each step, before that step's update.
    pub losses: Vec<f64>,
}

/// Minibatch training, plain SGD unless configured otherwise. Batches are drawn with replacement from a seeded
/// stream; per-example gradients are computed in parallel and summed in
/// batch order, so runs are reproducible regardless of thread count.
pub fn train(
    dataset: &[TrainExample],
    params: &ToyModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_single_layer(params)?;
    params.validate()?;
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", cfg.lr)));
    }
    for ex in dataset {
        ex.validate()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params.clone();
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| AdamState::new(&params));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..dataset.len()))
            .collect();
        let results: Vec<Result<(f64, ToyModelParams)>> = batch
            .par_iter()
            .map(|&i| loss_and_grad(&dataset[i], &params, cfg.objective))
            .collect();
        let inv_b = 1.0 / cfg.batch_size as f64;
        let mut total = params.zeros_like();
        let mut loss_sum = 0.0;
        for r in results {
            let (l, g) = r.map_err(|e| match e {
                Error::NumericOverflow { .. } => Error::TrainingDiverged { step, loss: f64::NAN },
                other => other,
            })?;
            loss_sum += l;
            total.axpy(inv_b, &g);
        }
        let batch_loss = loss_sum * inv_b;
        if !batch_loss.is_finite() || !total.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                loss: batch_loss,
            });
        }
        losses.push(batch_loss);
        if cfg.lr > 0.0 {
            match adam.as_mut() {
                Some(state) => state.step(&mut params, &total, cfg.lr),
                None => params.axpy(-cfg.lr, &total),
            }
            if !params.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    loss: batch_loss,
                });
            }
        }
    }
    Ok(TrainOutcome { params, losses })
}
