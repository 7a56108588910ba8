//! Composition of stored context states.
//!
//! For a single layer, the state after reading `u_1 · … · u_n` is
//! `x_n + Σ_{i<n} (A_n ⋯ A_{i+1}) x_i` (CASO). That expression depends on the
//! order of the contexts; averaging it over a permutation group removes the
//! dependence. Every method here applies the single-layer rule to each layer
//! independently, which is exact for one layer and an approximation for
//! stacked layers. Conv tails are always combined by arithmetic mean.
//!
//! Only [`compose_piconcat_r`] runs the model. All other methods are pure
//! elementwise arithmetic over stored states.

pub mod esp;
pub mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{encode_context, ContextState, LayerState, ToyModelParams, TokenSequence};
use crate::tensor::{CompensatedSum, Matrix};

pub use esp::{
    binomial_row, esp_all, esp_all_channels, esp_balanced, esp_merge, EspTable, MAX_BINOMIAL_N,
};
pub use weights::{
    cyclic_channel_weights, cyclic_channel_weights_direct, cyclic_channel_weights_stable,
    symmetric_channel_weights, CompositionWeights, GroupKind, OpCount, PermutationGroup,
    CYCLIC_LOG_DECAY_LIMIT,
};

/// How a query is conditioned on a set of retrieved contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// No context at all.
    Baseline,
    /// Re-scan the raw context tokens in order.
    Concat,
    Soup,
    Caso,
    PicasoS,
    PicasoR,
    #[serde(rename = "piconcat-r")]
    PiConcatR,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::Concat,
        Method::Soup,
        Method::Caso,
        Method::PicasoS,
        Method::PicasoR,
        Method::PiConcatR,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Concat => "concat",
            Method::Soup => "soup",
            Method::Caso => "caso",
            Method::PicasoS => "picaso-s",
            Method::PicasoR => "picaso-r",
            Method::PiConcatR => "piconcat-r",
        }
    }

    /// True for methods that combine stored states without any forward pass.
    pub fn is_state_only(&self) -> bool {
        matches!(
            self,
            Method::Baseline | Method::Soup | Method::Caso | Method::PicasoS | Method::PicasoR
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown composition method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedLayer {
    pub x: Vec<f64>,
    pub conv_tail: Matrix,
    /// Product of the context decays (what the concatenation would have
    /// accumulated for a single layer), kept strictly positive.
    pub decay: Vec<f64>,
    pub log_decay: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedState {
    pub method: Method,
    /// Context ids in the order they were supplied.
    pub provenance: Vec<String>,
    pub token_count: usize,
    pub layers: Vec<ComposedLayer>,
}

impl ComposedState {
    pub fn to_layer_states(&self) -> Vec<LayerState> {
        self.layers
            .iter()
            .map(|l| LayerState {
                x: l.x.clone(),
                conv_window: l.conv_tail.clone(),
            })
            .collect()
    }

    /// Repackages the composition as a storable context state.
    pub fn to_context_state(&self, context_id: impl Into<String>) -> ContextState {
        ContextState {
            context_id: context_id.into(),
            token_count: self.token_count,
            layers: self
                .layers
                .iter()
                .map(|l| crate::ssm::LayerContext {
                    x: l.x.clone(),
                    decay: l.decay.clone(),
                    log_decay: l.log_decay.clone(),
                    conv_tail: l.conv_tail.clone(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.x.iter().all(|v| v.is_finite()) && l.conv_tail.is_finite())
    }
}

fn check_contexts(contexts: &[ContextState]) -> Result<()> {
    let first = contexts
        .first()
        .ok_or_else(|| Error::invalid("composition needs at least one context"))?;
    let (layers, m) = (first.num_layers(), first.state_dim());
    let tail_shape = |c: &ContextState| {
        c.layers
            .iter()
            .map(|l| (l.conv_tail.rows(), l.conv_tail.cols()))
            .collect::<Vec<_>>()
    };
    let tails = tail_shape(first);
    for c in contexts {
        let consistent = c.num_layers() == layers
            && c.layers.iter().all(|l| {
                l.x.len() == m && l.decay.len() == m && l.log_decay.len() == m
            })
            && tail_shape(c) == tails;
        if !consistent {
            return Err(Error::invalid(format!(
                "context '{}' does not share the model config of '{}'",
                c.context_id, first.context_id
            )));
        }
        let finite = c.layers.iter().all(|l| {
            l.x.iter().chain(&l.decay).chain(&l.log_decay).all(|v| v.is_finite())
                && l.conv_tail.is_finite()
        });
        if !finite {
            return Err(Error::invalid(format!(
                "context '{}' contains non-finite values",
                c.context_id
            )));
        }
    }
    Ok(())
}

fn mean_conv_tail(contexts: &[ContextState], layer: usize) -> Matrix {
    let first = &contexts[0].layers[layer].conv_tail;
    let mut out = Matrix::zeros(first.rows(), first.cols());
    let inv_n = 1.0 / contexts.len() as f64;
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        let mut acc = CompensatedSum::default();
        for c in contexts {
            acc.add(c.layers[layer].conv_tail.as_slice()[i]);
        }
        *o = acc.value() * inv_n;
    }
    out
}

fn combined_decay(contexts: &[ContextState], layer: usize) -> (Vec<f64>, Vec<f64>) {
    let m = contexts[0].state_dim();
    let mut decay = vec![1.0; m];
    let mut log_decay = vec![0.0; m];
    for c in contexts {
        let l = &c.layers[layer];
        for k in 0..m {
            decay[k] = (decay[k] * l.decay[k]).max(f64::MIN_POSITIVE);
            log_decay[k] += l.log_decay[k];
        }
    }
    (decay, log_decay)
}

fn assemble(
    method: Method,
    contexts: &[ContextState],
    mut state_for_layer: impl FnMut(usize) -> Vec<f64>,
) -> ComposedState {
    let layers = (0..contexts[0].num_layers())
        .map(|l| {
            let (decay, log_decay) = combined_decay(contexts, l);
            ComposedLayer {
                x: state_for_layer(l),
                conv_tail: mean_conv_tail(contexts, l),
                decay,
                log_decay,
            }
        })
        .collect();
    ComposedState {
        method,
        provenance: contexts.iter().map(|c| c.context_id.clone()).collect(),
        token_count: contexts.iter().map(|c| c.token_count).sum(),
        layers,
    }
}

/// Order-dependent composition: the contexts are treated as if read in the
/// given order, last one closest to the query.
pub fn compose_caso(contexts: &[ContextState]) -> Result<ComposedState> {
    check_contexts(contexts)?;
    let n = contexts.len();
    Ok(assemble(Method::Caso, contexts, |l| {
        let m = contexts[0].state_dim();
        let mut acc = vec![CompensatedSum::default(); m];
        let mut running = vec![1.0; m];
        for i in (0..n).rev() {
            let layer = &contexts[i].layers[l];
            for k in 0..m {
                acc[k].add(running[k] * layer.x[k]);
                running[k] *= layer.decay[k];
            }
        }
        acc.iter().map(CompensatedSum::value).collect()
    }))
}

fn decays_per_layer(contexts: &[ContextState]) -> Vec<Vec<&[f64]>> {
    (0..contexts[0].num_layers())
        .map(|l| contexts.iter().map(|c| c.layers[l].decay.as_slice()).collect())
        .collect()
}

/// Symmetric-group weights with an operation counter.
pub fn picaso_s_weights_counted(
    contexts: &[ContextState],
    ops: &mut OpCount,
) -> Result<CompositionWeights> {
    check_contexts(contexts)?;
    let group = PermutationGroup::new(GroupKind::Symmetric, contexts.len())?;
    let layers = weights::weights_by_channel(&decays_per_layer(contexts), |col| {
        symmetric_channel_weights(col, ops)
    })?;
    Ok(CompositionWeights { group, layers })
}

pub fn picaso_s_weights(contexts: &[ContextState]) -> Result<CompositionWeights> {
    picaso_s_weights_counted(contexts, &mut OpCount::default())
}

/// Cyclic-group weights with an operation counter.
pub fn picaso_r_weights_counted(
    contexts: &[ContextState],
    ops: &mut OpCount,
) -> Result<CompositionWeights> {
    check_contexts(contexts)?;
    let group = PermutationGroup::new(GroupKind::Cyclic, contexts.len())?;
    let layers = weights::weights_by_channel(&decays_per_layer(contexts), |col| {
        cyclic_channel_weights(col, ops)
    })?;
    Ok(CompositionWeights { group, layers })
}

pub fn picaso_r_weights(contexts: &[ContextState]) -> Result<CompositionWeights> {
    picaso_r_weights_counted(contexts, &mut OpCount::default())
}

/// `x = Σ_k W_k ⊙ x_k`, summed in ascending context order with compensation.
pub fn apply_weights(
    method: Method,
    contexts: &[ContextState],
    weights: &CompositionWeights,
) -> Result<ComposedState> {
    check_contexts(contexts)?;
    if weights.layers.len() != contexts[0].num_layers()
        || weights
            .layers
            .iter()
            .any(|w| w.rows() != contexts.len() || w.cols() != contexts[0].state_dim())
    {
        return Err(Error::invalid("weights do not match the context list"));
    }
    Ok(assemble(method, contexts, |l| {
        let w = &weights.layers[l];
        (0..contexts[0].state_dim())
            .map(|c| {
                let mut acc = CompensatedSum::default();
                for (k, ctx) in contexts.iter().enumerate() {
                    acc.add(w[(k, c)] * ctx.layers[l].x[c]);
                }
                acc.value()
            })
            .collect()
    }))
}

/// Average of [`compose_caso`] over all `n!` orderings, in polynomial time.
pub fn compose_picaso_s(contexts: &[ContextState]) -> Result<ComposedState> {
    let w = picaso_s_weights(contexts)?;
    apply_weights(Method::PicasoS, contexts, &w)
}

/// Average of [`compose_caso`] over the `n` cyclic rotations, in linear time.
pub fn compose_picaso_r(contexts: &[ContextState]) -> Result<ComposedState> {
    let w = picaso_r_weights(contexts)?;
    apply_weights(Method::PicasoR, contexts, &w)
}

/// Plain mean of the context states.
pub fn compose_soup(contexts: &[ContextState]) -> Result<ComposedState> {
    check_contexts(contexts)?;
    let inv_n = 1.0 / contexts.len() as f64;
    Ok(assemble(Method::Soup, contexts, |l| {
        (0..contexts[0].state_dim())
            .map(|c| {
                let mut acc = CompensatedSum::default();
                for ctx in contexts {
                    acc.add(ctx.layers[l].x[c]);
                }
                acc.value() * inv_n
            })
            .collect()
    }))
}

/// Dispatches to the state-only composition for `method`.
pub fn compose_states(method: Method, contexts: &[ContextState]) -> Result<ComposedState> {
    match method {
        Method::Caso => compose_caso(contexts),
        Method::PicasoS => compose_picaso_s(contexts),
        Method::PicasoR => compose_picaso_r(contexts),
        Method::Soup => compose_soup(contexts),
        other => Err(Error::invalid(format!(
            "method '{other}' cannot be computed from stored states alone"
        ))),
    }
}

/// [`compose_states`] plus an instrumented count of the arithmetic it
/// performs: weight computation, then `2nm` multiply-adds per layer to apply
/// weights (CASO: `3nm`, with the running decay product; Soup: `nm + m`).
/// Conv-tail averaging is common to all methods and not counted.
pub fn compose_states_counted(
    method: Method,
    contexts: &[ContextState],
    ops: &mut OpCount,
) -> Result<ComposedState> {
    let out = match method {
        Method::PicasoS => {
            let w = picaso_s_weights_counted(contexts, ops)?;
            apply_weights(Method::PicasoS, contexts, &w)?
        }
        Method::PicasoR => {
            let w = picaso_r_weights_counted(contexts, ops)?;
            apply_weights(Method::PicasoR, contexts, &w)?
        }
        other => compose_states(other, contexts)?,
    };
    let (n, m, l) = (
        contexts.len() as u64,
        contexts[0].state_dim() as u64,
        contexts[0].num_layers() as u64,
    );
    ops.add(match method {
        Method::Caso => 3 * n * m * l,
        Method::Soup => (n + 1) * m * l,
        _ => 2 * n * m * l,
    });
    Ok(out)
}

/// Encodes each of the `n` cyclic rotations of the concatenated contexts from
/// a zero state and averages the resulting states and conv tails. Costs `n`
/// forward passes.
pub fn compose_piconcat_r(
    sequences: &[TokenSequence],
    params: &ToyModelParams,
) -> Result<ComposedState> {
    if sequences.is_empty() {
        return Err(Error::invalid("composition needs at least one context"));
    }
    if let Some(i) = sequences.iter().position(TokenSequence::is_empty) {
        return Err(Error::invalid(format!("context sequence {i} is empty")));
    }
    let n = sequences.len();
    let rotations = (0..n)
        .map(|r| {
            let order = (0..n).map(|i| &sequences[(r + i) % n]);
            encode_context(&TokenSequence::concat(order), params, format!("rotation-{r}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut composed = compose_soup(&rotations)?;
    // Every rotation reads the same tokens, so the decays agree up to
    // rounding; take the mean for a deterministic, order-free value.
    for (l, layer) in composed.layers.iter_mut().enumerate() {
        for k in 0..layer.decay.len() {
            let mut d = CompensatedSum::default();
            let mut ld = CompensatedSum::default();
            for rot in &rotations {
                d.add(rot.layers[l].decay[k]);
                ld.add(rot.layers[l].log_decay[k]);
            }
            layer.decay[k] = d.value() / n as f64;
            layer.log_decay[k] = ld.value() / n as f64;
        }
    }
    composed.method = Method::PiConcatR;
    composed.provenance = (0..n).map(|i| format!("seq-{i}")).collect();
    composed.token_count = sequences.iter().map(TokenSequence::len).sum();
    Ok(composed)
}

/// Squared distance between the two CASO orderings of a pair of contexts,
/// and its upper bound `‖(I - A_b) x_a‖² + ‖(I - A_a) x_b‖²`, per layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceBound {
    pub lhs: f64,
    pub rhs: f64,
}

pub fn caso_distance_bound(a: &ContextState, b: &ContextState) -> Result<Vec<DistanceBound>> {
    let pair = [a.clone(), b.clone()];
    check_contexts(&pair)?;
    let ab = compose_caso(&pair)?;
    let ba = compose_caso(&[b.clone(), a.clone()])?;
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .zip(ab.layers.iter().zip(&ba.layers))
        .map(|((la, lb), (xab, xba))| {
            let lhs = xab.x.iter().zip(&xba.x).map(|(p, q)| (p - q).powi(2)).sum();
            let rhs = (0..la.x.len())
                .map(|k| {
                    ((1.0 - lb.decay[k]) * la.x[k]).powi(2) + ((1.0 - la.decay[k]) * lb.x[k]).powi(2)
                })
                .sum();
            DistanceBound { lhs, rhs }
        })
        .collect())
}
