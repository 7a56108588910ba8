//! Elementary symmetric polynomials of diagonal decay matrices.
//!
//! Diagonal matrices commute, so every ESP is evaluated channel by channel.
//! Two evaluation routes exist: the one-variable-at-a-time recursion
//! `e_m(A_1..A_k) = A_k e_{m-1}(A_1..A_{k-1}) + e_m(A_1..A_{k-1})`, and a
//! split-and-merge convolution over an arbitrary partition of the variables.
//! The weight kernels use the former; the latter exists to cross-check it.

use crate::error::{Error, Result};

use super::weights::OpCount;

/// Largest context count for which binomial normalizers are computed.
pub const MAX_BINOMIAL_N: usize = 64;

/// `C(n, k)` for `k = 0..=n`, by the multiplicative recurrence in floating
/// point.
pub fn binomial_row(n: usize) -> Result<Vec<f64>> {
    if n > MAX_BINOMIAL_N {
        return Err(Error::invalid(format!(
            "binomial coefficients are only supported up to n = {MAX_BINOMIAL_N}, got {n}"
        )));
    }
    let mut row = Vec::with_capacity(n + 1);
    let mut c = 1.0f64;
    row.push(c);
    for k in 1..=n {
        c = c * (n - k + 1) as f64 / k as f64;
        row.push(c.round());
    }
    Ok(row)
}

/// ESP values `e_0..=e_p` over `p` variables for every channel.
///
/// Stored degree-major: `value(m, c)` is `e_m` on channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct EspTable {
    num_vars: usize,
    channels: usize,
    values: Vec<f64>,
}

impl EspTable {
    /// Table over zero variables: `e_0 = 1`.
    pub fn empty(channels: usize) -> Self {
        Self {
            num_vars: 0,
            channels,
            values: vec![1.0; channels],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn value(&self, degree: usize, channel: usize) -> f64 {
        self.values[degree * self.channels + channel]
    }

    /// `e_degree` for every channel.
    pub fn degree(&self, degree: usize) -> &[f64] {
        &self.values[degree * self.channels..(degree + 1) * self.channels]
    }
}

/// Single-channel ESPs `e_0..=e_p` via the `q = 1` recursion, updated in
/// place from the highest degree down.
pub fn esp_scalar(vars: &[f64], ops: &mut OpCount) -> Vec<f64> {
    let mut e = vec![0.0; vars.len() + 1];
    e[0] = 1.0;
    for (k, &a) in vars.iter().enumerate() {
        for m in (1..=k + 1).rev() {
            e[m] += a * e[m - 1];
        }
        ops.add(2 * (k as u64 + 1));
    }
    e
}

/// ESP table over a list of diagonal decays (each of the same length).
pub fn esp_all(decays: &[Vec<f64>]) -> Result<EspTable> {
    let channels = match decays.first() {
        Some(d) => d.len(),
        None => return Ok(EspTable::empty(0)),
    };
    esp_all_channels(decays, channels)
}

/// Like [`esp_all`] but with an explicit channel count, so that an empty
/// decay list still yields a table of the right width.
pub fn esp_all_channels(decays: &[Vec<f64>], channels: usize) -> Result<EspTable> {
    if decays.iter().any(|d| d.len() != channels) {
        return Err(Error::invalid("decay vectors must all have the same length"));
    }
    if decays.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("decays must be finite"));
    }
    let p = decays.len();
    let mut values = vec![0.0; (p + 1) * channels];
    let mut ops = OpCount::default();
    let mut vars = vec![0.0; p];
    for c in 0..channels {
        for (v, d) in vars.iter_mut().zip(decays) {
            *v = d[c];
        }
        for (m, e) in esp_scalar(&vars, &mut ops).into_iter().enumerate() {
            values[m * channels + c] = e;
        }
    }
    Ok(EspTable {
        num_vars: p,
        channels,
        values,
    })
}

/// Combines ESPs over two disjoint variable sets:
/// `e_m(L ∪ R) = Σ_j e_{m-j}(L) · e_j(R)` with `j` from `max(m - |L|, 0)` to
/// `min(m, |R|)`.
pub fn esp_merge(left: &EspTable, right: &EspTable) -> Result<EspTable> {
    if left.channels != right.channels {
        return Err(Error::invalid("ESP tables have different channel counts"));
    }
    let (p, q, channels) = (left.num_vars, right.num_vars, left.channels);
    let n = p + q;
    let mut values = vec![0.0; (n + 1) * channels];
    for m in 0..=n {
        let lo = m.saturating_sub(p);
        let hi = m.min(q);
        for c in 0..channels {
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += left.value(m - j, c) * right.value(j, c);
            }
            values[m * channels + c] = acc;
        }
    }
    Ok(EspTable {
        num_vars: n,
        channels,
        values,
    })
}

/// Evaluates the ESPs by splitting the variables in half recursively and
/// merging the halves: a balanced merge tree.
pub fn esp_balanced(decays: &[Vec<f64>], channels: usize) -> Result<EspTable> {
    if decays.len() <= 1 {
        return esp_all_channels(decays, channels);
    }
    let mid = decays.len() / 2;
    let left = esp_balanced(&decays[..mid], channels)?;
    let right = esp_balanced(&decays[mid..], channels)?;
    esp_merge(&left, &right)
}
