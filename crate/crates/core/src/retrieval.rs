//! Prompt embeddings and nearest-prompt retrieval.
//!
//! Prompts are embedded by feature hashing: word unigrams and character
//! trigrams of the normalized text are hashed with 64-bit FNV-1a into 256
//! count buckets, and the count vector is L2-normalized. Similarity is the
//! dot product of two embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Unit-norm hashed embedding of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding(Vec<f64>);

impl PromptEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Lowercases, maps every run of non-alphanumeric characters to a single
/// space and trims.
pub fn normalize_prompt(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for ch in lowered.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Word unigrams followed by character trigrams (spaces included).
pub fn prompt_features(normalized: &str) -> Vec<String> {
    let mut feats: Vec<String> = normalized.split_whitespace().map(str::to_owned).collect();
    let chars: Vec<char> = normalized.chars().collect();
    feats.extend(chars.windows(3).map(|w| w.iter().collect::<String>()));
    feats
}

pub fn embed_prompt(text: &str) -> Result<PromptEmbedding> {
    let normalized = normalize_prompt(text);
    if normalized.is_empty() {
        return Err(Error::invalid(format!(
            "prompt {text:?} has no alphanumeric content to embed"
        )));
    }
    let mut v = vec![0.0; EMBEDDING_DIM];
    for f in prompt_features(&normalized) {
        v[(fnv1a64(f.as_bytes()) % EMBEDDING_DIM as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok(PromptEmbedding(v))
}

pub fn similarity(a: &PromptEmbedding, b: &PromptEmbedding) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub prompt: String,
    pub embedding: PromptEmbedding,
    pub video_id: String,
    pub insertion_index: usize,
}

/// Persisted form of a store entry; embeddings are recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreRecord {
    pub prompt: String,
    pub video_id: String,
    pub insertion_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub video_id: String,
    pub prompt: String,
    pub insertion_index: usize,
    pub score: f64,
}

/// Append-only list of every prompt the model was trained on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptStore {
    entries: Vec<StoreEntry>,
}

impl PromptStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, prompt: &str, video_id: &str) -> Result<&StoreEntry> {
        let entry = StoreEntry {
            prompt: prompt.to_owned(),
            embedding: embed_prompt(prompt)?,
            video_id: video_id.to_owned(),
            insertion_index: self.entries.len(),
        };
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The most recently inserted entry.
    pub fn last(&self) -> Result<&StoreEntry> {
        self.entries.last().ok_or(Error::EmptyStore)
    }

    /// The store as it was after its first `n` insertions.
    pub fn prefix(&self, n: usize) -> PromptStore {
        PromptStore {
            entries: self.entries[..n.min(self.entries.len())].to_vec(),
        }
    }

    /// Entry with the highest similarity to the query; ties go to the
    /// earliest insertion.
    pub fn retrieve(&self, query: &str) -> Result<Retrieved> {
        if self.entries.is_empty() {
            return Err(Error::EmptyStore);
        }
        let q = embed_prompt(query)?;
        let mut best: Option<(&StoreEntry, f64)> = None;
        for e in &self.entries {
            let s = similarity(&q, &e.embedding);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((e, s));
            }
        }
        let (e, score) = best.expect("non-empty store");
        Ok(Retrieved {
            video_id: e.video_id.clone(),
            prompt: e.prompt.clone(),
            insertion_index: e.insertion_index,
            score,
        })
    }

    pub fn records(&self) -> Vec<StoreRecord> {
        self.entries
            .iter()
            .map(|e| StoreRecord {
                prompt: e.prompt.clone(),
                video_id: e.video_id.clone(),
                insertion_index: e.insertion_index,
            })
            .collect()
    }

    pub fn from_records(records: Vec<StoreRecord>) -> Result<Self> {
        let mut store = PromptStore::new();
        for (i, r) in records.into_iter().enumerate() {
            if r.insertion_index != i {
                return Err(Error::format(
                    "prompt store",
                    format!("insertion_index {} at position {i}", r.insertion_index),
                ));
            }
            store.push(&r.prompt, &r.video_id)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &self.records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        PromptStore::from_records(crate::io::read_json(path)?)
    }
}
