//! Recorded single-layer scan and its exact reverse pass.
//!
//! The forward replays `ssm::layer_scan` operation for operation (same
//! evaluation order, same helpers), so losses computed here are bit-identical
//! to `ssm::continuation_loss`. Logits are only formed at scored positions.

use crate::error::{Error, Result};
use crate::ssm::{depthwise_conv, log_sigmoid, push_window, sigmoid, token_nll, ToyModelParams};
use crate::tensor::Matrix;

struct Step {
    token: usize,
    x_prev: Vec<f64>,
    a: Vec<f64>,
    c: Vec<f64>,
    /// Window after pushing this step's input.
    window: Matrix,
    decay_prev: Vec<f64>,
    clamped: Vec<bool>,
    x: Vec<f64>,
}

struct Scored {
    t: usize,
    target: usize,
    h: Vec<f64>,
    probs: Vec<f64>,
}

pub(crate) struct Scan {
    steps: Vec<Step>,
    scored: Vec<Scored>,
    pub x: Vec<f64>,
    pub window: Matrix,
    pub decay: Vec<f64>,
    pub log_decay: Vec<f64>,
    /// Summed NLL over scored positions, in position order.
    pub nll_sum: f64,
}

impl Scan {
    pub fn num_scored(&self) -> usize {
        self.scored.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Runs the single layer over `tokens` from `(init_x, init_window)`.
/// `targets` lists `(position, next token)` pairs in increasing position.
pub(crate) fn scan(
    tokens: &[u32],
    init_x: &[f64],
    init_window: &Matrix,
    params: &ToyModelParams,
    targets: &[(usize, usize)],
) -> Result<Scan> {
    let cfg = &params.config;
    let layer = &params.layers[0];
    let (d, m) = (cfg.embed_dim, cfg.state_dim);
    let mut x = init_x.to_vec();
    let mut window = init_window.clone();
    let mut decay = vec![1.0; m];
    let mut log_decay = vec![0.0; m];
    let mut c = vec![0.0; d];
    let mut z = vec![0.0; m];
    let mut drive = vec![0.0; m];
    let mut y = vec![0.0; d];
    let mut pass = vec![0.0; d];
    let mut logits = vec![0.0; cfg.vocab_size];
    let mut steps = Vec::with_capacity(tokens.len());
    let mut scored = Vec::with_capacity(targets.len());
    let mut next_target = targets.iter().peekable();
    let mut nll_sum = 0.0;

    for (t, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        if tok >= cfg.vocab_size {
            return Err(Error::invalid(format!("token {tok} outside the vocabulary")));
        }
        let e = params.embedding.row(tok);
        push_window(&mut window, e);
        depthwise_conv(&window, &layer.conv_kernel, &mut c);
        layer.decay_w.matvec_into(&c, &mut z);
        layer.input_w.matvec_into(&c, &mut drive);
        let x_prev = x.clone();
        let decay_prev = decay.clone();
        let mut a = vec![0.0; m];
        let mut clamped = vec![false; m];
        for k in 0..m {
            let zk = z[k] + layer.decay_b[k];
            a[k] = sigmoid(zk);
            x[k] = a[k] * x[k] + drive[k];
            let next = decay[k] * a[k];
            clamped[k] = next < cfg.decay_floor;
            decay[k] = next.max(cfg.decay_floor);
            log_decay[k] += log_sigmoid(zk);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericOverflow {
                step: t,
                detail: "non-finite state".into(),
            });
        }
        if let Some(&&(pos, target)) = next_target.peek() {
            if pos == t {
                next_target.next();
                layer.output_w.matvec_into(&x, &mut y);
                layer.passthrough.matvec_into(&c, &mut pass);
                let h: Vec<f64> = e
                    .iter()
                    .zip(y.iter().zip(&pass))
                    .map(|(e, (y, p))| e + (y + p))
                    .collect();
                params.head.matvec_into(&h, &mut logits);
                nll_sum += token_nll(&logits, target);
                scored.push(Scored {
                    t,
                    target,
                    h,
                    probs: softmax(&logits),
                });
            }
        }
        steps.push(Step {
            token: tok,
            x_prev,
            a,
            c: c.clone(),
            window: window.clone(),
            decay_prev,
            clamped,
            x: x.clone(),
        });
    }
    if next_target.next().is_some() {
        return Err(Error::invalid("scored position beyond the end of the sequence"));
    }
    Ok(Scan {
        steps,
        scored,
        x,
        window,
        decay,
        log_decay,
        nll_sum,
    })
}

/// Upstream gradients arriving at the end of a scan.
pub(crate) struct FinalGrad {
    pub x: Vec<f64>,
    pub decay: Vec<f64>,
    pub window: Matrix,
}

impl FinalGrad {
    pub fn zeros(m: usize, d: usize, w: usize) -> Self {
        Self {
            x: vec![0.0; m],
            decay: vec![0.0; m],
            window: Matrix::zeros(d, w),
        }
    }
}

/// Accumulates parameter gradients of `loss_weight · nll_sum + <upstream,
/// final outputs>` into `grads` and returns the gradient with respect to the
/// initial `(x, window)`.
pub(crate) fn backward(
    scan: &Scan,
    params: &ToyModelParams,
    loss_weight: f64,
    upstream: FinalGrad,
    grads: &mut ToyModelParams,
) -> (Vec<f64>, Matrix) {
    let cfg = &params.config;
    let layer = &params.layers[0];
    let (d, m, w) = (cfg.embed_dim, cfg.state_dim, cfg.conv_width);
    let FinalGrad {
        x: mut g_x,
        decay: mut g_decay,
        window: mut g_win,
    } = upstream;
    let mut g_c = vec![0.0; d];
    let mut g_e = vec![0.0; d];
    let mut g_a = vec![0.0; m];
    let mut g_z = vec![0.0; m];
    let mut g_h = vec![0.0; d];
    let mut g_logits = vec![0.0; cfg.vocab_size];
    let mut scored = scan.scored.iter().rev().peekable();

    for (t, step) in scan.steps.iter().enumerate().rev() {
        g_c.iter_mut().for_each(|v| *v = 0.0);
        g_e.iter_mut().for_each(|v| *v = 0.0);

        if let Some(s) = scored.peek().filter(|s| s.t == t) {
            for (g, &p) in g_logits.iter_mut().zip(&s.probs) {
                *g = p * loss_weight;
            }
            g_logits[s.target] -= loss_weight;
            grads.head.add_outer(&g_logits, &s.h);
            g_h.iter_mut().for_each(|v| *v = 0.0);
            params.head.matvec_t_acc(&g_logits, &mut g_h);
            for (ge, gh) in g_e.iter_mut().zip(&g_h) {
                *ge += gh;
            }
            let gl = &mut grads.layers[0];
            gl.output_w.add_outer(&g_h, &step.x);
            layer.output_w.matvec_t_acc(&g_h, &mut g_x);
            gl.passthrough.add_outer(&g_h, &step.c);
            layer.passthrough.matvec_t_acc(&g_h, &mut g_c);
            scored.next();
        }

        let gl = &mut grads.layers[0];
        for k in 0..m {
            g_a[k] = g_x[k] * step.x_prev[k];
        }
        gl.input_w.add_outer(&g_x, &step.c);
        layer.input_w.matvec_t_acc(&g_x, &mut g_c);
        for k in 0..m {
            g_x[k] *= step.a[k];
            if step.clamped[k] {
                g_decay[k] = 0.0;
            } else {
                g_a[k] += g_decay[k] * step.decay_prev[k];
                g_decay[k] *= step.a[k];
            }
            g_z[k] = g_a[k] * step.a[k] * (1.0 - step.a[k]);
            gl.decay_b[k] += g_z[k];
        }
        gl.decay_w.add_outer(&g_z, &step.c);
        layer.decay_w.matvec_t_acc(&g_z, &mut g_c);

        for i in 0..d {
            let gc = g_c[i];
            let win = step.window.row(i);
            let ker = layer.conv_kernel.row(i);
            let gk = gl.conv_kernel.row_mut(i);
            for j in 0..w {
                gk[j] += gc * win[j];
            }
            let gw = g_win.row_mut(i);
            for j in 0..w {
                gw[j] += gc * ker[j];
            }
            // undo the shift: newest slot came from the input, slot j from
            // the previous window's slot j + 1
            g_e[i] += gw[w - 1];
            gw.copy_within(0..w - 1, 1);
            gw[0] = 0.0;
        }
        for (g, ge) in grads.embedding.row_mut(step.token).iter_mut().zip(&g_e) {
            *g += ge;
        }
    }
    (g_x, g_win)
}
