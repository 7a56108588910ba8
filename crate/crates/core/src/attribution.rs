//! Which retrieved context does an answer depend on?
//!
//! Leave-one-in conditions the question on each context alone and picks the
//! one that makes the answer most likely. Leave-one-out composes all contexts,
//! removes each in turn and picks the one whose removal hurts the most.
//! Losses are mean nats per answer token.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::Method;
use crate::error::{Error, Result};
use crate::eval::conditioned_state;
use crate::ssm::{continuation_loss, ToyModelParams, TokenSequence};
use crate::store::StoreEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionMode {
    LeaveOneIn,
    LeaveOneOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub mode: AttributionMode,
    /// Composition used for leave-one-out; `None` for leave-one-in.
    pub method: Option<Method>,
    pub scores: Vec<f64>,
    pub selected: usize,
}

/// First index of the smallest value.
fn argmin(v: &[f64]) -> usize {
    (1..v.len()).fold(0, |best, i| if v[i] < v[best] { i } else { best })
}

/// First index of the largest value.
fn argmax(v: &[f64]) -> usize {
    (1..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

fn check_qa(question: &TokenSequence, answer: &TokenSequence) -> Result<()> {
    if question.is_empty() {
        return Err(Error::invalid("question must not be empty"));
    }
    if answer.is_empty() {
        return Err(Error::invalid("answer must not be empty"));
    }
    Ok(())
}

fn finite_scores(scores: Vec<f64>) -> Result<Vec<f64>> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NumericOverflow {
            step: i,
            detail: format!("attribution score for context {i} is not finite"),
        });
    }
    Ok(scores)
}

pub fn leave_one_in(
    question: &TokenSequence,
    answer: &TokenSequence,
    contexts: &[StoreEntry],
    params: &ToyModelParams,
) -> Result<AttributionResult> {
    check_qa(question, answer)?;
    if contexts.is_empty() {
        return Err(Error::invalid("leave-one-in needs at least one context"));
    }
    let scores = contexts
        .par_iter()
        .map(|c| continuation_loss(question, answer, &c.state.to_layer_states(), params))
        .collect::<Result<Vec<_>>>()?;
    let scores = finite_scores(scores)?;
    Ok(AttributionResult {
        mode: AttributionMode::LeaveOneIn,
        method: None,
        selected: argmin(&scores),
        scores,
    })
}

pub fn leave_one_out(
    question: &TokenSequence,
    answer: &TokenSequence,
    contexts: &[StoreEntry],
    params: &ToyModelParams,
    method: Method,
) -> Result<AttributionResult> {
    check_qa(question, answer)?;
    if contexts.len() < 2 {
        return Err(Error::invalid("leave-one-out needs at least two contexts"));
    }
    if matches!(method, Method::Baseline | Method::PiConcatR) {
        return Err(Error::invalid(format!(
            "leave-one-out supports concat, soup, caso, picaso-r and picaso-s, not '{method}'"
        )));
    }
    let loss_of = |subset: &[StoreEntry]| -> Result<f64> {
        let init = conditioned_state(method, subset, params)?;
        continuation_loss(question, answer, &init, params)
    };
    let full = loss_of(contexts)?;
    let scores = (0..contexts.len())
        .into_par_iter()
        .map(|i| {
            let rest: Vec<StoreEntry> = contexts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, c)| c.clone())
                .collect();
            Ok(loss_of(&rest)? - full)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = finite_scores(scores)?;
    Ok(AttributionResult {
        mode: AttributionMode::LeaveOneOut,
        method: Some(method),
        selected: argmax(&scores),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{encode_context, ToyModelConfig};

    fn setup() -> (ToyModelParams, Vec<StoreEntry>) {
        let params = ToyModelParams::init_with_scale(ToyModelConfig::new(8, 16, 1), 4, 0.3).unwrap();
        let entries = ["the cat sat.", "a dog ran far.", "the cat sat.", "birds sing loud"]
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let tokens = TokenSequence::from_text(t);
                StoreEntry {
                    context_id: format!("c{i}"),
                    state: encode_context(&tokens, &params, format!("c{i}")).unwrap(),
                    tokens,
                }
            })
            .collect();
        (params, entries)
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        assert_eq!(argmin(&[1.0, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
        let (p, e) = setup();
        let (q, a) = (TokenSequence::from_text("q: "), TokenSequence::from_text("ab"));
        let dup = [e[0].clone(), e[2].clone()];
        let loi = leave_one_in(&q, &a, &dup, &p).unwrap();
        assert_eq!(loi.scores[0], loi.scores[1]);
        assert_eq!(loi.selected, 0);
        for m in [Method::Soup, Method::Caso, Method::PicasoR, Method::PicasoS, Method::Concat] {
            let loo = leave_one_out(&q, &a, &dup, &p, m).unwrap();
            assert_eq!(loo.scores[0], loo.scores[1], "{m}");
            assert_eq!(loo.selected, 0);
        }
        assert_eq!(leave_one_in(&q, &a, &e[1..2], &p).unwrap().selected, 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (p, e) = setup();
        let q = TokenSequence::from_text("q");
        let a = TokenSequence::from_text("a");
        assert!(leave_one_in(&q, &a, &[], &p).is_err());
        assert!(leave_one_out(&q, &a, &e[..1], &p, Method::Soup).is_err());
        assert!(leave_one_in(&q, &TokenSequence::default(), &e, &p).is_err());
        assert!(leave_one_out(&q, &a, &e, &p, Method::Baseline).is_err());
    }

    #[test]
    fn symmetric_and_cyclic_agree_for_two_contexts() {
        let (p, e) = setup();
        let (q, a) = (TokenSequence::from_text("where? "), TokenSequence::from_text("far"));
        let pair = [e[1].clone(), e[3].clone()];
        let s = leave_one_out(&q, &a, &pair, &p, Method::PicasoS).unwrap();
        let r = leave_one_out(&q, &a, &pair, &p, Method::PicasoR).unwrap();
        for (x, y) in s.scores.iter().zip(&r.scores) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn symmetric_scores_follow_a_permutation() {
        let (p, e) = setup();
        let (q, a) = (TokenSequence::from_text("cat? "), TokenSequence::from_text("sat"));
        let base = leave_one_out(&q, &a, &e, &p, Method::PicasoS).unwrap();
        let perm = [2, 0, 3, 1];
        let shuffled: Vec<_> = perm.iter().map(|&i| e[i].clone()).collect();
        let moved = leave_one_out(&q, &a, &shuffled, &p, Method::PicasoS).unwrap();
        for (pos, &orig) in perm.iter().enumerate() {
            let (x, y) = (base.scores[orig], moved.scores[pos]);
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-3), "{x} vs {y}");
        }
    }
}
