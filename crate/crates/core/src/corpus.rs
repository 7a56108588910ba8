//! Synthetic fact-recall corpus.
//!
//! Every document states one fact, `the <key> is <VALUE>.`, where keys are
//! random lowercase words and values are four distinct uppercase letters.
//! The matching query is `the <key> is ` and its continuation `<VALUE>.`.
//! Keys and values are unique across the corpus, so each answer occurs
//! verbatim in exactly one document.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::TokenSequence;
use crate::train::{TrainExample, MAX_TRAIN_CONTEXTS};

pub const KEY_LEN_MIN: usize = 5;
pub const KEY_LEN_MAX: usize = 7;
pub const VALUE_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub context_text: String,
    pub query: String,
    pub continuation: String,
}

impl CorpusRecord {
    pub fn context_tokens(&self) -> TokenSequence {
        TokenSequence::from_text(&self.context_text)
    }

    pub fn query_tokens(&self) -> TokenSequence {
        TokenSequence::from_text(&self.query)
    }

    pub fn continuation_tokens(&self) -> TokenSequence {
        TokenSequence::from_text(&self.continuation)
    }
}

/// Upper bound on distinct values (26·25·24·23); keys are far more plentiful.
pub const MAX_DOCS: usize = 358_800;

pub fn gen_corpus(seed: u64, num_docs: usize) -> Result<Vec<CorpusRecord>> {
    if num_docs == 0 {
        return Err(Error::invalid("num_docs must be >= 1"));
    }
    if num_docs > MAX_DOCS {
        return Err(Error::invalid(format!("num_docs must be <= {MAX_DOCS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lower: Vec<u8> = (b'a'..=b'z').collect();
    let upper: Vec<u8> = (b'A'..=b'Z').collect();
    let mut keys = HashSet::with_capacity(num_docs);
    let mut values = HashSet::with_capacity(num_docs);
    let mut out = Vec::with_capacity(num_docs);
    while out.len() < num_docs {
        let len = rng.gen_range(KEY_LEN_MIN..=KEY_LEN_MAX);
        let key: String = (0..len)
            .map(|_| *lower.choose(&mut rng).expect("alphabet") as char)
            .collect();
        let value: String = upper
            .choose_multiple(&mut rng, VALUE_LEN)
            .map(|&b| b as char)
            .collect();
        if !keys.insert(key.clone()) {
            continue;
        }
        if !values.insert(value.clone()) {
            keys.remove(&key);
            continue;
        }
        out.push(CorpusRecord {
            id: format!("doc-{:06}", out.len()),
            context_text: format!("the {key} is {value}."),
            query: format!("the {key} is "),
            continuation: format!("{value}."),
        });
    }
    Ok(out)
}

pub fn write_jsonl(mut w: impl Write, records: &[CorpusRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("corpus line {}: {e}", i + 1)))?;
        if rec.query.is_empty() || rec.continuation.is_empty() || rec.context_text.is_empty() {
            return Err(Error::invalid(format!("corpus line {} has an empty field", i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Builds `num_examples` training examples by cycling through `records`.
/// Each example carries the record's own document plus uniformly drawn
/// distractors, `k` contexts in total with `k` uniform in
/// `min_contexts..=max_contexts` (`k = 0` means no context at all). With
/// probability `shuffle_prob` the contexts are shuffled; otherwise the
/// relevant document is placed last, next to the query.
pub fn sample_examples(
    records: &[CorpusRecord],
    num_examples: usize,
    min_contexts: usize,
    max_contexts: usize,
    shuffle_prob: f64,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    if records.len() < 2 {
        return Err(Error::invalid("need at least two documents to draw distractors"));
    }
    if min_contexts > max_contexts || max_contexts > MAX_TRAIN_CONTEXTS {
        return Err(Error::invalid(format!(
            "context range {min_contexts}..={max_contexts} must lie within 0..={MAX_TRAIN_CONTEXTS}"
        )));
    }
    if !(0.0..=1.0).contains(&shuffle_prob) {
        return Err(Error::invalid("shuffle_prob must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_examples)
        .map(|n| {
            let i = n % records.len();
            let k = rng.gen_range(min_contexts..=max_contexts);
            let mut contexts = Vec::with_capacity(k);
            while contexts.len() + 1 < k {
                let j = rng.gen_range(0..records.len());
                if j != i {
                    contexts.push(records[j].context_tokens());
                }
            }
            if k > 0 {
                contexts.push(records[i].context_tokens());
            }
            if rng.gen_bool(shuffle_prob) {
                contexts.shuffle(&mut rng);
            }
            TrainExample::new(records[i].query_tokens(), records[i].continuation_tokens(), contexts)
        })
        .collect()
}
