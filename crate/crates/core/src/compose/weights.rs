//! Per-context diagonal weights for the group-averaged compositions.
//!
//! Averaging the order-dependent composition over a permutation group `G`
//! collapses to `x = Σ_k W_k ⊙ x_k` with weights that depend only on the
//! accumulated decays. For the symmetric group the weights are normalized
//! leave-one-out elementary symmetric polynomials; for the cyclic group they
//! are averages of cyclic suffix products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::esp::{binomial_row, esp_scalar};

/// Counter for floating point additions, multiplications and divisions
/// performed by the weight kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount(pub u64);

impl OpCount {
    #[inline]
    pub fn add(&mut self, ops: u64) {
        self.0 += ops;
    }

    pub fn get(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    Symmetric,
    Cyclic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationGroup {
    pub kind: GroupKind,
    pub n: usize,
}

impl PermutationGroup {
    pub fn new(kind: GroupKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("a permutation group needs n >= 1"));
        }
        Ok(Self { kind, n })
    }

    /// Group order `|G|`, as a float since `n!` overflows integers quickly.
    pub fn order(&self) -> f64 {
        match self.kind {
            GroupKind::Symmetric => (1..=self.n).map(|k| k as f64).product(),
            GroupKind::Cyclic => self.n as f64,
        }
    }
}

/// Weights `W_k` for every context and channel, one n × m matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionWeights {
    pub group: PermutationGroup,
    pub layers: Vec<Matrix>,
}

impl CompositionWeights {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }
}

/// Symmetric-group weights for one channel.
///
/// For each `k` the ESPs of the other `n - 1` decays are recomputed from
/// scratch with the `O(n²)` recursion, then normalized by
/// `1 / (n · C(n-1, m))` and summed: `O(n³)` in total.
pub fn symmetric_channel_weights(decays: &[f64], ops: &mut OpCount) -> Result<Vec<f64>> {
    let n = decays.len();
    if n == 0 {
        return Err(Error::invalid("need at least one context"));
    }
    let binom = binomial_row(n - 1)?;
    let norm: Vec<f64> = binom.iter().map(|c| 1.0 / (n as f64 * c)).collect();
    let mut others = Vec::with_capacity(n - 1);
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        others.clear();
        others.extend(decays.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, &a)| a));
        let e = esp_scalar(&others, ops);
        let w: f64 = e.iter().zip(&norm).map(|(e, c)| e * c).sum();
        ops.add(2 * n as u64);
        weights.push(w);
    }
    Ok(weights)
}

/// Above this cumulative log-decay magnitude over one cycle, the
/// cumulative-product route loses more than ~1e-12 relative precision and
/// [`cyclic_channel_weights`] switches to the suffix recurrence.
pub const CYCLIC_LOG_DECAY_LIMIT: f64 = 6.0;

/// Cyclic-group weights for one channel in `O(n)`.
///
/// Well-conditioned channels use cumulative products and sums over the
/// doubled decay sequence `[A_0..A_{n-1}, A_0..A_{n-1}]`:
///
/// ```text
/// P = cumprod, S = cumsum(P)
/// W_k = ((S[n+k-1] - S[k]) / P[k] + 1) / n
/// ```
///
/// The subtraction cancels catastrophically once `P` spans many orders of
/// magnitude, so channels whose total log decay exceeds
/// [`CYCLIC_LOG_DECAY_LIMIT`] use [`cyclic_channel_weights_stable`] instead.
pub fn cyclic_channel_weights(decays: &[f64], ops: &mut OpCount) -> Result<Vec<f64>> {
    let n = decays.len();
    if n == 0 {
        return Err(Error::invalid("need at least one context"));
    }
    if let Some(a) = decays.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::invalid(format!(
            "cyclic weights need strictly positive finite decays, got {a}"
        )));
    }
    let log_total: f64 = decays.iter().map(|a| a.ln()).sum();
    ops.add(n as u64);
    if log_total.abs() > CYCLIC_LOG_DECAY_LIMIT {
        return Ok(cyclic_channel_weights_stable(decays, ops));
    }

    let mut prod = Vec::with_capacity(2 * n);
    let mut sums = Vec::with_capacity(2 * n);
    let (mut p, mut s) = (1.0, 0.0);
    for &a in decays.iter().chain(decays) {
        p *= a;
        s += p;
        prod.push(p);
        sums.push(s);
    }
    ops.add(4 * n as u64);
    let inv_n = 1.0 / n as f64;
    let weights = (0..n)
        .map(|k| ((sums[n + k - 1] - sums[k]) / prod[k] + 1.0) * inv_n)
        .collect();
    ops.add(4 * n as u64);
    Ok(weights)
}

/// Cyclic weights through the suffix recurrence
/// `S_k = (1 - Π A) + A_{k+1} S_{k+1}` where `n W_k = S_k`. Every term is
/// nonnegative, so there is no cancellation and no division.
pub fn cyclic_channel_weights_stable(decays: &[f64], ops: &mut OpCount) -> Vec<f64> {
    let n = decays.len();
    let total: f64 = decays.iter().product();
    // S_{n-1} = 1 + A_0 (1 + A_1 (1 + ... (1 + A_{n-2})))
    let mut s_last = 1.0;
    for &a in decays[..n - 1].iter().rev() {
        s_last = 1.0 + a * s_last;
    }
    ops.add(n as u64 + 2 * (n as u64 - 1));
    let gap = 1.0 - total;
    let mut s = vec![0.0; n];
    s[n - 1] = s_last;
    for k in (0..n - 1).rev() {
        s[k] = gap + decays[k + 1] * s[k + 1];
    }
    ops.add(2 * (n as u64 - 1));
    let inv_n = 1.0 / n as f64;
    ops.add(n as u64 + 1);
    s.into_iter().map(|v| v * inv_n).collect()
}

/// Cyclic weights straight from the suffix-product definition,
/// `W_k = (1/n) Σ_{m=0}^{n-1} Π_{l=1}^{m} A_{(k+l) mod n}`. `O(n²)`.
pub fn cyclic_channel_weights_direct(decays: &[f64]) -> Vec<f64> {
    let n = decays.len();
    (0..n)
        .map(|k| {
            let mut prod = 1.0;
            let mut sum = 1.0;
            for l in 1..n {
                prod *= decays[(k + l) % n];
                sum += prod;
            }
            sum / n as f64
        })
        .collect()
}

/// Applies a per-channel kernel to every layer of a context list.
pub(crate) fn weights_by_channel(
    decays_per_layer: &[Vec<&[f64]>],
    mut kernel: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<Matrix>> {
    let mut layers = Vec::with_capacity(decays_per_layer.len());
    for contexts in decays_per_layer {
        let n = contexts.len();
        let m = contexts.first().map_or(0, |d| d.len());
        let mut w = Matrix::zeros(n, m);
        let mut column = vec![0.0; n];
        for c in 0..m {
            for (v, d) in column.iter_mut().zip(contexts) {
                *v = d[c];
            }
            for (k, wk) in kernel(&column)?.into_iter().enumerate() {
                w[(k, c)] = wk;
            }
        }
        layers.push(w);
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_context_weights_are_one() {
        let mut ops = OpCount::default();
        assert_eq!(symmetric_channel_weights(&[0.3], &mut ops).unwrap(), vec![1.0]);
        assert_eq!(cyclic_channel_weights(&[0.3], &mut ops).unwrap(), vec![1.0]);
    }

    #[test]
    fn two_context_symmetric_hand_values() {
        let w = symmetric_channel_weights(&[0.25, 0.5], &mut OpCount::default()).unwrap();
        assert_eq!(w, vec![0.75, 0.625]);
    }

    #[test]
    fn identity_decays_give_unit_weights() {
        for n in 1..=12 {
            let ones = vec![1.0; n];
            let ws = symmetric_channel_weights(&ones, &mut OpCount::default()).unwrap();
            let wr = cyclic_channel_weights(&ones, &mut OpCount::default()).unwrap();
            for w in ws.iter().chain(&wr) {
                assert!((w - 1.0).abs() < 1e-14, "n={n} w={w}");
            }
        }
    }

    #[test]
    fn cyclic_equal_decays_hand_value() {
        let w = cyclic_channel_weights(&[0.5, 0.5, 0.5], &mut OpCount::default()).unwrap();
        for wk in w {
            assert!((wk - 1.75 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cyclic_routes_agree() {
        let decays = [0.9, 0.35, 0.72, 0.98, 0.6];
        let direct = cyclic_channel_weights_direct(&decays);
        let fast = cyclic_channel_weights(&decays, &mut OpCount::default()).unwrap();
        let stable = cyclic_channel_weights_stable(&decays, &mut OpCount::default());
        for ((d, f), s) in direct.iter().zip(&fast).zip(&stable) {
            assert!((d - f).abs() < 1e-14 && (d - s).abs() < 1e-14);
        }
    }

    #[test]
    fn stable_route_survives_tiny_decays() {
        let decays = [1e-30, 0.5, 1e-30, 0.25];
        let w = cyclic_channel_weights(&decays, &mut OpCount::default()).unwrap();
        let direct = cyclic_channel_weights_direct(&decays);
        for (a, b) in w.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn cyclic_rejects_nonpositive_decay() {
        assert!(cyclic_channel_weights(&[0.5, 0.0], &mut OpCount::default()).is_err());
        assert!(cyclic_channel_weights(&[0.5, -0.1], &mut OpCount::default()).is_err());
    }

    #[test]
    fn group_orders() {
        assert_eq!(PermutationGroup::new(GroupKind::Symmetric, 5).unwrap().order(), 120.0);
        assert_eq!(PermutationGroup::new(GroupKind::Cyclic, 5).unwrap().order(), 5.0);
        assert!(PermutationGroup::new(GroupKind::Cyclic, 0).is_err());
    }
}
