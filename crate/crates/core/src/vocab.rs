//! Frequency-ranked activity vocabularies.
//!
//! Traces are treated like sentences: each distinct activity identifier gets
//! an integer id, ranked by training-set frequency. Id 0 is always the
//! reserved unknown id which absorbs every activity outside the retained set;
//! optional run truncation collapses consecutive unknowns to one occurrence.

use std::collections::HashMap;

use thiserror::Error;

use crate::eventlog::Trace;

/// Reserved id for out-of-vocabulary activities.
pub const UNK_ID: usize = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("vocabulary size limit must be at least 1")]
    ZeroMaxSize,
}

/// Immutable token-to-id map built from a training split.
///
/// Ids are contiguous `0..size()`; id 0 is the unknown and never maps to a
/// real activity. Higher training frequency means a lower id; ties are broken
/// by first occurrence in the training stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    max_size: Option<usize>,
}

impl Vocabulary {
    /// Ranks activities by frequency over the training traces and retains the
    /// `max_size` most common (all of them when unset).
    pub fn build(training: &[Trace], max_size: Option<usize>) -> Result<Vocabulary, VocabError> {
        if max_size == Some(0) {
            return Err(VocabError::ZeroMaxSize);
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        for trace in training {
            for token in &trace.activities {
                let entry = counts.entry(token.as_str()).or_insert_with(|| {
                    let slot = (0, order);
                    order += 1;
                    slot
                });
                entry.0 += 1;
            }
        }
        let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
        // Most frequent first; first occurrence breaks ties deterministically.
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        if let Some(limit) = max_size {
            ranked.truncate(limit);
        }

        Ok(Vocabulary::from_ranked_tokens(
            ranked.into_iter().map(|(t, _)| t.to_string()),
            max_size,
        ))
    }

    /// Rebuilds a vocabulary from an already-ranked token list (ids assigned
    /// as `position + 1`); used when loading persisted models.
    pub fn from_ranked_tokens(
        tokens: impl IntoIterator<Item = String>,
        max_size: Option<usize>,
    ) -> Vocabulary {
        let mut id_to_token = vec!["<unk>".to_string()];
        let mut token_to_id = HashMap::new();
        for token in tokens {
            token_to_id.insert(token.clone(), id_to_token.len());
            id_to_token.push(token);
        }
        Vocabulary {
            token_to_id,
            id_to_token,
            max_size,
        }
    }

    /// Total id count including the unknown id.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn max_size(&self) -> Option<usize> {
        self.max_size
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Real tokens in id order (id = position + 1).
    pub fn ranked_tokens(&self) -> &[String] {
        &self.id_to_token[1..]
    }

    /// Token for a retained id; `None` for the unknown id.
    pub fn token_of(&self, id: usize) -> Option<&str> {
        if id == UNK_ID {
            None
        } else {
            self.id_to_token.get(id).map(String::as_str)
        }
    }
}

/// A trace mapped to integer ids, ready for the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTrace {
    pub ids: Vec<usize>,
    /// 0 = false, 1 = true.
    pub label_id: u8,
}

/// Maps a trace's activities to ids. With `truncate_unk_runs`, each maximal
/// run of consecutive unknowns collapses to a single unknown; known ids are
/// never dropped.
pub fn encode(trace: &Trace, vocab: &Vocabulary, truncate_unk_runs: bool) -> EncodedTrace {
    assert!(!trace.activities.is_empty(), "cannot encode an empty trace");
    let mut ids = Vec::with_capacity(trace.activities.len());
    for token in &trace.activities {
        let id = vocab.id_of(token);
        if truncate_unk_runs && id == UNK_ID && ids.last() == Some(&UNK_ID) {
            continue;
        }
        ids.push(id);
    }
    EncodedTrace {
        ids,
        label_id: trace.label as u8,
    }
}

/// Inverse of `encode` for fully-known sequences; unknown ids come back as
/// `None`.
pub fn decode<'v>(ids: &[usize], vocab: &'v Vocabulary) -> Vec<Option<&'v str>> {
    ids.iter().map(|&id| vocab.token_of(id)).collect()
}

/// Unit basis vector of length `v` with a single 1.0 at `id`.
///
/// Out-of-range ids are a programming error: encoding already maps every
/// token into `[0, v)`.
pub fn one_hot(id: usize, v: usize) -> Vec<f64> {
    assert!(id < v, "one-hot id {id} out of range for vocabulary size {v}");
    let mut x = vec![0.0; v];
    x[id] = 1.0;
    x
}
