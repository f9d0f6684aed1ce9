//! Preference datasets: one prompt with `K >= 2` ranked responses.
//!
//! Responses are stored in ascending preference order, so `responses[K - 1]`
//! is the most preferred ("chosen") response and `responses[0]` the least
//! preferred. The pairwise `{"rejected", "chosen"}` JSONL form maps onto
//! indices 0 and 1.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Token id. Byte-tokenized text uses ids 0..=255.
pub type TokenId = u32;

/// Default vocabulary size: 256 byte tokens plus one spare id.
pub const DEFAULT_VOCAB_SIZE: usize = 257;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("example {id}: {message}")]
    Validation { id: String, message: String },
    #[error("dataset is empty")]
    Empty,
}

/// A single prompt with `K >= 2` responses in ascending preference order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub example_id: String,
    pub prompt: Vec<TokenId>,
    pub responses: Vec<Vec<TokenId>>,
}

impl PreferenceExample {
    /// Builds an example and checks the structural invariants (token ids are
    /// checked separately against a vocabulary with [`Self::validate_vocab`]).
    pub fn new(
        example_id: impl Into<String>,
        prompt: Vec<TokenId>,
        responses: Vec<Vec<TokenId>>,
    ) -> Result<Self, DatasetError> {
        let example = Self {
            example_id: example_id.into(),
            prompt,
            responses,
        };
        example.validate_structure()?;
        Ok(example)
    }

    pub fn num_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    pub fn response_lens(&self) -> Vec<usize> {
        self.responses.iter().map(Vec::len).collect()
    }

    pub fn max_response_len(&self) -> usize {
        self.responses.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn min_response_len(&self) -> usize {
        self.responses.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn sum_response_len(&self) -> usize {
        self.responses.iter().map(Vec::len).sum()
    }

    /// The most preferred response (last index).
    pub fn chosen(&self) -> &[TokenId] {
        &self.responses[self.responses.len() - 1]
    }

    /// The least preferred response (index 0).
    pub fn rejected(&self) -> &[TokenId] {
        &self.responses[0]
    }

    fn invalid(&self, message: impl Into<String>) -> DatasetError {
        DatasetError::Validation {
            id: self.example_id.clone(),
            message: message.into(),
        }
    }

    pub fn validate_structure(&self) -> Result<(), DatasetError> {
        if self.responses.len() < 2 {
            return Err(self.invalid(format!(
                "need at least 2 responses, got {}",
                self.responses.len()
            )));
        }
        if self.prompt.is_empty() {
            return Err(self.invalid("prompt is empty"));
        }
        if let Some(k) = self.responses.iter().position(Vec::is_empty) {
            return Err(self.invalid(format!("response {k} is empty")));
        }
        Ok(())
    }

    pub fn validate_vocab(&self, vocab_size: usize) -> Result<(), DatasetError> {
        let all = self.prompt.iter().chain(self.responses.iter().flatten());
        if let Some(&bad) = all.into_iter().find(|&&t| t as usize >= vocab_size) {
            return Err(self.invalid(format!(
                "token id {bad} out of range for vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }
}

/// Byte-level fallback tokenizer: each UTF-8 byte becomes its own token id.
pub fn tokenize_bytes(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Either a pre-tokenized id list or raw text to be byte-tokenized.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TokenField {
    Ids(Vec<i64>),
    Text(String),
}

impl TokenField {
    fn into_tokens(self, line: usize, field: &str) -> Result<Vec<TokenId>, DatasetError> {
        match self {
            TokenField::Text(s) => Ok(tokenize_bytes(&s)),
            TokenField::Ids(ids) => ids
                .into_iter()
                .map(|id| {
                    TokenId::try_from(id).map_err(|_| DatasetError::Parse {
                        line,
                        message: format!("{field}: token id {id} is not a valid non-negative id"),
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<String>,
    prompt: TokenField,
    responses: Option<Vec<TokenField>>,
    chosen: Option<TokenField>,
    rejected: Option<TokenField>,
}

fn parse_line(text: &str, line: usize) -> Result<PreferenceExample, DatasetError> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        line,
        message: e.to_string(),
    })?;
    let id = raw.id.unwrap_or_else(|| format!("line-{line}"));
    let prompt = raw.prompt.into_tokens(line, "prompt")?;
    let responses = match (raw.responses, raw.chosen, raw.rejected) {
        (Some(list), None, None) => list
            .into_iter()
            .enumerate()
            .map(|(k, r)| r.into_tokens(line, &format!("responses[{k}]")))
            .collect::<Result<Vec<_>, _>>()?,
        (None, Some(chosen), Some(rejected)) => vec![
            rejected.into_tokens(line, "rejected")?,
            chosen.into_tokens(line, "chosen")?,
        ],
        _ => {
            return Err(DatasetError::Parse {
                line,
                message: "expected either \"responses\" or both \"chosen\" and \"rejected\""
                    .to_string(),
            })
        }
    };
    PreferenceExample::new(id, prompt, responses)
}

/// Parses preference JSONL from any reader. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn parse_preference_jsonl<R: BufRead>(
    reader: R,
    vocab_size: usize,
) -> Result<Vec<PreferenceExample>, DatasetError> {
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let example = parse_line(&text, line_no)?;
        example.validate_vocab(vocab_size)?;
        examples.push(example);
    }
    Ok(examples)
}

/// Loads a preference JSONL file, preserving file order.
pub fn load_preference_jsonl(
    path: impl AsRef<Path>,
    vocab_size: usize,
) -> Result<Vec<PreferenceExample>, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_preference_jsonl(BufReader::new(file), vocab_size)
}

/// Serializes an example in the canonical `{"id","prompt","responses"}` form.
pub fn example_to_json(example: &PreferenceExample) -> serde_json::Value {
    serde_json::json!({
        "id": example.example_id,
        "prompt": example.prompt,
        "responses": example.responses,
    })
}

/// Per-dataset length statistics (arithmetic means of per-example values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_examples: usize,
    pub mean_input_len: f64,
    pub mean_max_resp_len: f64,
    pub mean_min_resp_len: f64,
    pub mean_sum_resp_len: f64,
    pub k_histogram: BTreeMap<usize, usize>,
}

impl DatasetStats {
    /// The single `K` shared by every example, if the dataset is homogeneous.
    pub fn uniform_k(&self) -> Option<usize> {
        match self.k_histogram.len() {
            1 => self.k_histogram.keys().next().copied(),
            _ => None,
        }
    }
}

pub fn compute_stats(examples: &[PreferenceExample]) -> Result<DatasetStats, DatasetError> {
    if examples.is_empty() {
        return Err(DatasetError::Empty);
    }
    // Integer sums are exact, which keeps the means independent of example order.
    let mut input = 0u128;
    let mut max_resp = 0u128;
    let mut min_resp = 0u128;
    let mut sum_resp = 0u128;
    let mut k_histogram = BTreeMap::new();
    for e in examples {
        input += e.prompt_len() as u128;
        max_resp += e.max_response_len() as u128;
        min_resp += e.min_response_len() as u128;
        sum_resp += e.sum_response_len() as u128;
        *k_histogram.entry(e.num_responses()).or_insert(0) += 1;
    }
    let n = examples.len() as f64;
    Ok(DatasetStats {
        n_examples: examples.len(),
        mean_input_len: input as f64 / n,
        mean_max_resp_len: max_resp as f64 / n,
        mean_min_resp_len: min_resp as f64 / n,
        mean_sum_resp_len: sum_resp as f64 / n,
        k_histogram,
    })
}

/// Statistics split by response count, one entry per distinct `K`.
pub fn compute_stats_by_k(
    examples: &[PreferenceExample],
) -> Result<BTreeMap<usize, DatasetStats>, DatasetError> {
    if examples.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut groups: BTreeMap<usize, Vec<PreferenceExample>> = BTreeMap::new();
    for e in examples {
        groups.entry(e.num_responses()).or_default().push(e.clone());
    }
    groups
        .into_iter()
        .map(|(k, group)| compute_stats(&group).map(|s| (k, s)))
        .collect()
}
