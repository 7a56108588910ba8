//! Toy linear input-varying state space language model.
//!
//! Block structure per layer: depthwise causal convolution over a sliding
//! window of the layer input, then a diagonal selective recurrence
//!
//! ```text
//! c_t = conv(window_t)
//! a_t = sigmoid(W_A c_t + b_A)
//! x_t = a_t ⊙ x_{t-1} + W_B c_t
//! y_t = W_C x_t + D c_t
//! ```
//!
//! and a residual connection `h_{l+1} = h_l + y`. Logits come from a linear
//! head on the last residual stream. Layer states carry the conv window so a
//! model started from `state_of(u)` continues exactly as if it had read `u`.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

pub const VOCAB_SIZE: usize = 256;

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of full-model forward passes issued on the current thread.
///
/// Composition over stored states never touches the model; tests and the
/// evaluation harness diff this counter around a call to verify that.
pub fn forward_call_count() -> u64 {
    FORWARD_CALLS.with(|c| c.get())
}

fn bump_forward_calls() {
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    /// Byte-level tokenization.
    pub fn from_text(text: &str) -> Self {
        Self {
            tokens: text.bytes().map(u32::from).collect(),
        }
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let mut tokens = Vec::new();
        for p in parts {
            tokens.extend_from_slice(&p.tokens);
        }
        Self { tokens }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.tokens.iter().position(|&t| t as usize >= vocab_size) {
            Some(pos) => Err(Error::invalid(format!(
                "token {} at position {pos} is outside the vocabulary (size {vocab_size})",
                self.tokens[pos]
            ))),
            None => Ok(()),
        }
    }

    /// Lossy text rendering, for logs and reports.
    pub fn to_text_lossy(&self) -> String {
        let bytes: Vec<u8> = self.tokens.iter().map(|&t| t.min(255) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

impl From<&str> for TokenSequence {
    fn from(s: &str) -> Self {
        Self::from_text(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub num_layers: usize,
    pub conv_width: usize,
    pub decay_floor: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            embed_dim: 16,
            state_dim: 32,
            num_layers: 1,
            conv_width: 4,
            decay_floor: 1e-30,
        }
    }
}

impl ToyModelConfig {
    pub fn new(embed_dim: usize, state_dim: usize, num_layers: usize) -> Self {
        Self {
            embed_dim,
            state_dim,
            num_layers,
            ..Self::default()
        }
    }

    pub fn with_conv_width(mut self, conv_width: usize) -> Self {
        self.conv_width = conv_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::invalid(format!(
                "vocab_size must be {VOCAB_SIZE}, got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.state_dim == 0 || self.num_layers == 0 {
            return Err(Error::invalid("embed_dim, state_dim and num_layers must be >= 1"));
        }
        if self.conv_width == 0 {
            return Err(Error::invalid("conv_width must be >= 1"));
        }
        if !(self.decay_floor > 0.0 && self.decay_floor.is_finite()) {
            return Err(Error::invalid("decay_floor must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `W_A`, m × d.
    pub decay_w: Matrix,
    /// `b_A`, length m.
    pub decay_b: Vec<f64>,
    /// `W_B`, m × d.
    pub input_w: Matrix,
    /// `W_C`, d × m.
    pub output_w: Matrix,
    /// `D`, d × d.
    pub passthrough: Matrix,
    /// Depthwise conv taps, d × conv_width, oldest tap first.
    pub conv_kernel: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    pub config: ToyModelConfig,
    /// vocab × d.
    pub embedding: Matrix,
    pub layers: Vec<LayerParams>,
    /// LM head, vocab × d.
    pub head: Matrix,
}

pub const DEFAULT_INIT_SCALE: f64 = 0.02;
pub const DEFAULT_DECAY_BIAS: f64 = 1.0;

impl ToyModelParams {
    /// Seeded initialization: uniform in `[-0.02, 0.02]`, `b_A = 1`, `D = I`.
    pub fn init(config: ToyModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_scale(config, seed, DEFAULT_INIT_SCALE)
    }

    pub fn init_with_scale(config: ToyModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale))
        };
        let (v, d, m, w) = (
            config.vocab_size,
            config.embed_dim,
            config.state_dim,
            config.conv_width,
        );
        let embedding = uniform(v, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                decay_w: uniform(m, d),
                decay_b: vec![DEFAULT_DECAY_BIAS; m],
                input_w: uniform(m, d),
                output_w: uniform(d, m),
                passthrough: Matrix::identity(d),
                conv_kernel: uniform(d, w),
            })
            .collect();
        let head = uniform(v, d);
        Ok(Self {
            config,
            embedding,
            layers,
            head,
        })
    }

    /// Sets every decay bias to `bias`; larger values start the recurrence
    /// with longer memory.
    pub fn with_decay_bias(mut self, bias: f64) -> Self {
        for layer in &mut self.layers {
            layer.decay_b.iter_mut().for_each(|b| *b = bias);
        }
        self
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("embedding".into(), self.embedding.as_slice())];
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.decay_w"), p.decay_w.as_slice()));
            out.push((format!("layer{l}.decay_b"), &p.decay_b));
            out.push((format!("layer{l}.input_w"), p.input_w.as_slice()));
            out.push((format!("layer{l}.output_w"), p.output_w.as_slice()));
            out.push((format!("layer{l}.passthrough"), p.passthrough.as_slice()));
            out.push((format!("layer{l}.conv_kernel"), p.conv_kernel.as_slice()));
        }
        out.push(("head".into(), self.head.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> =
            vec![("embedding".into(), self.embedding.as_mut_slice())];
        for (l, p) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.decay_w"), p.decay_w.as_mut_slice()));
            out.push((format!("layer{l}.decay_b"), &mut p.decay_b));
            out.push((format!("layer{l}.input_w"), p.input_w.as_mut_slice()));
            out.push((format!("layer{l}.output_w"), p.output_w.as_mut_slice()));
            out.push((format!("layer{l}.passthrough"), p.passthrough.as_mut_slice()));
            out.push((format!("layer{l}.conv_kernel"), p.conv_kernel.as_mut_slice()));
        }
        out.push(("head".into(), self.head.as_mut_slice()));
        out
    }

    /// `self += alpha * other`. Shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &ToyModelParams) {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += alpha * v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the little-endian bit patterns of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Identifies the model a stored state was produced with.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.checksum().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let (v, d, m, w) = (c.vocab_size, c.embed_dim, c.state_dim, c.conv_width);
        let shape_ok = |mat: &Matrix, r: usize, cols: usize| mat.rows() == r && mat.cols() == cols;
        let mut ok = shape_ok(&self.embedding, v, d)
            && shape_ok(&self.head, v, d)
            && self.layers.len() == c.num_layers;
        for p in &self.layers {
            ok &= shape_ok(&p.decay_w, m, d)
                && p.decay_b.len() == m
                && shape_ok(&p.input_w, m, d)
                && shape_ok(&p.output_w, d, m)
                && shape_ok(&p.passthrough, d, d)
                && shape_ok(&p.conv_kernel, d, w);
        }
        if !ok {
            return Err(Error::invalid("parameter shapes do not match the model config"));
        }
        if !self.is_finite() {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub x: Vec<f64>,
    /// d × conv_width, oldest input first.
    pub conv_window: Matrix,
}

impl LayerState {
    pub fn zeros(config: &ToyModelConfig) -> Self {
        Self {
            x: vec![0.0; config.state_dim],
            conv_window: Matrix::zeros(config.embed_dim, config.conv_width),
        }
    }
}

pub fn zero_states(config: &ToyModelConfig) -> Vec<LayerState> {
    (0..config.num_layers).map(|_| LayerState::zeros(config)).collect()
}

#[derive(Debug, Clone)]
pub struct ScanOutput {
    /// T × d layer outputs `y_t` (before the residual add).
    pub outputs: Matrix,
    pub final_state: LayerState,
    pub seg_decay: Vec<f64>,
    pub seg_log_decay: Vec<f64>,
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(z)`, accurate for large |z|.
#[inline]
pub(crate) fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn embed(seq: &TokenSequence, params: &ToyModelParams) -> Result<Matrix> {
    seq.validate(params.config.vocab_size)?;
    let d = params.config.embed_dim;
    let mut out = Matrix::zeros(seq.len(), d);
    for (t, &tok) in seq.as_slice().iter().enumerate() {
        out.row_mut(t)
            .copy_from_slice(params.embedding.row(tok as usize));
    }
    Ok(out)
}

/// Shifts the window one slot towards the past and writes `input` into the
/// newest slot.
#[inline]
pub(crate) fn push_window(window: &mut Matrix, input: &[f64]) {
    let w = window.cols();
    for (i, &v) in input.iter().enumerate() {
        let row = window.row_mut(i);
        row.copy_within(1..w, 0);
        row[w - 1] = v;
    }
}

#[inline]
pub(crate) fn depthwise_conv(window: &Matrix, kernel: &Matrix, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(window.row(i), kernel.row(i));
    }
}

/// Runs one layer over `inputs` starting from `init`.
pub fn layer_scan(
    inputs: &Matrix,
    init: &LayerState,
    layer: &LayerParams,
    config: &ToyModelConfig,
) -> Result<ScanOutput> {
    let (d, m) = (config.embed_dim, config.state_dim);
    if inputs.cols() != d {
        return Err(Error::invalid(format!(
            "layer input has {} columns, expected {d}",
            inputs.cols()
        )));
    }
    if init.x.len() != m
        || init.conv_window.rows() != d
        || init.conv_window.cols() != config.conv_width
    {
        return Err(Error::invalid("initial layer state has the wrong shape"));
    }
    if !init.x.iter().all(|v| v.is_finite()) || !init.conv_window.is_finite() {
        return Err(Error::invalid("initial layer state is not finite"));
    }

    let steps = inputs.rows();
    let mut outputs = Matrix::zeros(steps, d);
    let mut window = init.conv_window.clone();
    let mut x = init.x.clone();
    let mut decay = vec![1.0; m];
    let mut log_decay = vec![0.0; m];
    let mut conv = vec![0.0; d];
    let mut z = vec![0.0; m];
    let mut drive = vec![0.0; m];
    let mut y = vec![0.0; d];
    let mut pass = vec![0.0; d];

    for t in 0..steps {
        push_window(&mut window, inputs.row(t));
        depthwise_conv(&window, &layer.conv_kernel, &mut conv);
        layer.decay_w.matvec_into(&conv, &mut z);
        layer.input_w.matvec_into(&conv, &mut drive);
        for k in 0..m {
            let zk = z[k] + layer.decay_b[k];
            let a = sigmoid(zk);
            x[k] = a * x[k] + drive[k];
            decay[k] = (decay[k] * a).max(config.decay_floor);
            log_decay[k] += log_sigmoid(zk);
        }
        layer.output_w.matvec_into(&x, &mut y);
        layer.passthrough.matvec_into(&conv, &mut pass);
        for (yi, p) in y.iter_mut().zip(&pass) {
            *yi += p;
        }
        if !x.iter().chain(&y).all(|v| v.is_finite()) {
            return Err(Error::NumericOverflow {
                step: t,
                detail: "non-finite state or output".into(),
            });
        }
        outputs.row_mut(t).copy_from_slice(&y);
    }

    Ok(ScanOutput {
        outputs,
        final_state: LayerState {
            x,
            conv_window: window,
        },
        seg_decay: decay,
        seg_log_decay: log_decay,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// T × vocab.
    pub logits: Matrix,
    pub final_states: Vec<LayerState>,
    /// Per-layer accumulated decay over the sequence.
    pub seg_decays: Vec<Vec<f64>>,
    pub seg_log_decays: Vec<Vec<f64>>,
}

pub fn forward(
    seq: &TokenSequence,
    init: &[LayerState],
    params: &ToyModelParams,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if init.len() != cfg.num_layers {
        return Err(Error::invalid(format!(
            "expected {} initial layer states, got {}",
            cfg.num_layers,
            init.len()
        )));
    }
    bump_forward_calls();
    let mut stream = embed(seq, params)?;
    let mut final_states = Vec::with_capacity(cfg.num_layers);
    let mut seg_decays = Vec::with_capacity(cfg.num_layers);
    let mut seg_log_decays = Vec::with_capacity(cfg.num_layers);
    for (layer, state) in params.layers.iter().zip(init) {
        let out = layer_scan(&stream, state, layer, cfg)?;
        for (h, y) in stream.as_mut_slice().iter_mut().zip(out.outputs.as_slice()) {
            *h += y;
        }
        final_states.push(out.final_state);
        seg_decays.push(out.seg_decay);
        seg_log_decays.push(out.seg_log_decay);
    }
    let mut logits = Matrix::zeros(seq.len(), cfg.vocab_size);
    for t in 0..seq.len() {
        params.head.matvec_into(stream.row(t), logits.row_mut(t));
    }
    Ok(ForwardOutput {
        logits,
        final_states,
        seg_decays,
        seg_log_decays,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerContext {
    /// Accumulated state `x(u)` from a zero initial state.
    pub x: Vec<f64>,
    /// Accumulated decay, clamped below at the config's decay floor.
    pub decay: Vec<f64>,
    /// Unclamped sum of per-step log decays.
    pub log_decay: Vec<f64>,
    /// d × conv_width.
    pub conv_tail: Matrix,
}

/// Everything needed to resume the model after a context: the unit stored in
/// the database of states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub context_id: String,
    pub token_count: usize,
    pub layers: Vec<LayerContext>,
}

impl ContextState {
    pub fn to_layer_states(&self) -> Vec<LayerState> {
        self.layers
            .iter()
            .map(|l| LayerState {
                x: l.x.clone(),
                conv_window: l.conv_tail.clone(),
            })
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn state_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.x.len())
    }

    /// Shape check against a model config.
    pub fn matches(&self, config: &ToyModelConfig) -> bool {
        self.layers.len() == config.num_layers
            && self.layers.iter().all(|l| {
                l.x.len() == config.state_dim
                    && l.decay.len() == config.state_dim
                    && l.log_decay.len() == config.state_dim
                    && l.conv_tail.rows() == config.embed_dim
                    && l.conv_tail.cols() == config.conv_width
            })
    }
}

pub fn encode_context(
    seq: &TokenSequence,
    params: &ToyModelParams,
    context_id: impl Into<String>,
) -> Result<ContextState> {
    if seq.is_empty() {
        return Err(Error::invalid("cannot encode an empty context"));
    }
    let out = forward(seq, &zero_states(&params.config), params)?;
    let layers = out
        .final_states
        .into_iter()
        .zip(out.seg_decays)
        .zip(out.seg_log_decays)
        .map(|((s, decay), log_decay)| LayerContext {
            x: s.x,
            decay,
            log_decay,
            conv_tail: s.conv_window,
        })
        .collect();
    Ok(ContextState {
        context_id: context_id.into(),
        token_count: seq.len(),
        layers,
    })
}

/// `-log softmax(logits)[target]`
pub(crate) fn token_nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Mean next-token negative log-likelihood (nats/token) of `seq[1..]`.
pub fn cross_entropy(
    seq: &TokenSequence,
    init: &[LayerState],
    params: &ToyModelParams,
) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::invalid("cross entropy needs at least two tokens"));
    }
    let out = forward(seq, init, params)?;
    let toks = seq.as_slice();
    let total: f64 = (0..seq.len() - 1)
        .map(|t| token_nll(out.logits.row(t), toks[t + 1] as usize))
        .sum();
    Ok(total / (seq.len() - 1) as f64)
}

/// Mean NLL of `continuation` given `query`, starting from `init`. Only
/// continuation tokens are scored.
pub fn continuation_loss(
    query: &TokenSequence,
    continuation: &TokenSequence,
    init: &[LayerState],
    params: &ToyModelParams,
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::invalid("query must contain at least one token"));
    }
    if continuation.is_empty() {
        return Err(Error::invalid("continuation must not be empty"));
    }
    let full = TokenSequence::concat([query, continuation]);
    let input = TokenSequence::new(full.as_slice()[..full.len() - 1].to_vec());
    let out = forward(&input, init, params)?;
    let offset = query.len() - 1;
    let total: f64 = continuation
        .as_slice()
        .iter()
        .enumerate()
        .map(|(j, &tok)| token_nll(out.logits.row(offset + j), tok as usize))
        .sum();
    Ok(total / continuation.len() as f64)
}
