//! Preference packing: a prompt and its `K` responses laid out as one
//! sequence `prompt ++ r_0 ++ ... ++ r_{K-1}`.
//!
//! Every response restarts its position ids at the prompt length, and the
//! attention mask lets each response see the prompt and itself (causally) but
//! never a sibling response. The prompt never sees any response, so prompt
//! activations are identical to those of each unpacked `prompt ++ r_k` row.
//!
//! The mask is represented by the segment table and the [`mask_allows`]
//! predicate. [`render_dense_mask`] materializes the `L x L` matrix for
//! debugging and export only.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataset::{PreferenceExample, TokenId};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PackError {
    #[error("position {position} out of range for packed length {len}")]
    OutOfRange { position: usize, len: usize },
    #[error("corrupt layout {id}: {message}")]
    Corrupt { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Prompt,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Response index for response segments; 0 for the prompt.
    #[serde(rename = "index")]
    pub response_index: usize,
    pub start: usize,
    #[serde(rename = "len")]
    pub length: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.length
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// A packed preference example. Field names follow the layout JSON export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedLayout {
    #[serde(rename = "id")]
    pub example_id: String,
    pub tokens: Vec<TokenId>,
    pub position_ids: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl PackedLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.segments.first().map_or(0, |s| s.length)
    }

    pub fn num_responses(&self) -> usize {
        self.segments.len().saturating_sub(1)
    }

    pub fn response_segment(&self, k: usize) -> &Segment {
        &self.segments[k + 1]
    }

    /// Index into `segments` of the segment holding `position`.
    pub fn segment_index_of(&self, position: usize) -> Result<usize, PackError> {
        if position >= self.len() {
            return Err(PackError::OutOfRange {
                position,
                len: self.len(),
            });
        }
        Ok(self.segments.partition_point(|s| s.start <= position) - 1)
    }

    fn corrupt(&self, message: impl Into<String>) -> PackError {
        PackError::Corrupt {
            id: self.example_id.clone(),
            message: message.into(),
        }
    }

    /// Checks every layout invariant: contiguous tiling, a single prompt
    /// segment at 0, responses in index order, and reset position ids.
    pub fn validate(&self) -> Result<(), PackError> {
        let Some(prompt) = self.segments.first() else {
            return Err(self.corrupt("no segments"));
        };
        if prompt.kind != SegmentKind::Prompt || prompt.start != 0 {
            return Err(self.corrupt("first segment must be the prompt at offset 0"));
        }
        if self.segments.len() < 3 {
            return Err(self.corrupt("need at least two response segments"));
        }
        let mut cursor = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.length == 0 {
                return Err(self.corrupt(format!("segment {i} is empty")));
            }
            if seg.start != cursor {
                return Err(self.corrupt(format!(
                    "segment {i} starts at {} but previous segment ends at {cursor}",
                    seg.start
                )));
            }
            if i > 0 && (seg.kind != SegmentKind::Response || seg.response_index != i - 1) {
                return Err(self.corrupt(format!(
                    "segment {i} must be response {}, found {:?} {}",
                    i - 1,
                    seg.kind,
                    seg.response_index
                )));
            }
            cursor = seg.end();
        }
        if cursor != self.tokens.len() {
            return Err(self.corrupt(format!(
                "segments cover {cursor} tokens but layout has {}",
                self.tokens.len()
            )));
        }
        if self.position_ids.len() != self.tokens.len() {
            return Err(self.corrupt("position_ids length differs from tokens length"));
        }
        let l_in = prompt.length;
        for seg in &self.segments {
            let base = if seg.kind == SegmentKind::Prompt {
                0
            } else {
                l_in
            };
            let ok = seg
                .range()
                .zip(base..)
                .all(|(p, expected)| self.position_ids[p] == expected);
            if !ok {
                return Err(self.corrupt(format!(
                    "position ids of segment at {} do not restart at {base}",
                    seg.start
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("layout serializes")
    }

    /// Parses and validates a layout from its JSON export.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, PackError> {
        let layout: Self =
            serde_json::from_value(value.clone()).map_err(|e| PackError::Corrupt {
                id: value
                    .get("id")
                    .and_then(|v| v.as_str())
                    .unwrap_or("?")
                    .to_string(),
                message: e.to_string(),
            })?;
        layout.validate()?;
        Ok(layout)
    }
}

pub fn pack(example: &PreferenceExample) -> PackedLayout {
    let l_in = example.prompt_len();
    let total = l_in + example.sum_response_len();
    let mut tokens = Vec::with_capacity(total);
    let mut position_ids = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(example.num_responses() + 1);

    tokens.extend_from_slice(&example.prompt);
    position_ids.extend(0..l_in);
    segments.push(Segment {
        kind: SegmentKind::Prompt,
        response_index: 0,
        start: 0,
        length: l_in,
    });
    for (k, response) in example.responses.iter().enumerate() {
        segments.push(Segment {
            kind: SegmentKind::Response,
            response_index: k,
            start: tokens.len(),
            length: response.len(),
        });
        tokens.extend_from_slice(response);
        position_ids.extend(l_in..l_in + response.len());
    }
    PackedLayout {
        example_id: example.example_id.clone(),
        tokens,
        position_ids,
        segments,
    }
}

/// Whether query position `q` may attend to key position `k`.
pub fn mask_allows(layout: &PackedLayout, q: usize, k: usize) -> Result<bool, PackError> {
    let sq = layout.segment_index_of(q)?;
    let sk = layout.segment_index_of(k)?;
    Ok(k <= q && (layout.segments[sk].kind == SegmentKind::Prompt || sk == sq))
}

pub fn render_dense_mask(layout: &PackedLayout) -> Vec<Vec<bool>> {
    let n = layout.len();
    let seg_of: Vec<usize> = (0..n)
        .map(|p| layout.segment_index_of(p).expect("in range"))
        .collect();
    (0..n)
        .map(|q| {
            (0..n)
                .map(|k| k <= q && (seg_of[k] == 0 || seg_of[k] == seg_of[q]))
                .collect()
        })
        .collect()
}

/// Row-major `0`/`1` text grid, one row per line.
pub fn dense_mask_to_text(mask: &[Vec<bool>]) -> String {
    let mut out = String::with_capacity(mask.len() * (mask.len() + 1));
    for row in mask {
        out.extend(row.iter().map(|&b| if b { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

/// Closed-form number of allowed `(q, k)` pairs for a prompt of length `p`
/// and responses of lengths `r_k`: `p(p+1)/2 + sum_k (r_k p + r_k(r_k+1)/2)`.
pub fn allowed_pair_count(prompt_len: usize, response_lens: &[usize]) -> usize {
    let p = prompt_len;
    p * (p + 1) / 2
        + response_lens
            .iter()
            .map(|&r| r * p + r * (r + 1) / 2)
            .sum::<usize>()
}

/// Where response `k`'s log-probability is read from in packed logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseSlice {
    pub response_index: usize,
    /// Positions whose logits predict the targets, in target order.
    pub predict_positions: Vec<usize>,
    /// Positions of the target tokens in the packed sequence.
    pub target_positions: Range<usize>,
}

impl ResponseSlice {
    /// `(predict position, target position)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.predict_positions
            .iter()
            .copied()
            .zip(self.target_positions.clone())
    }
}

/// The last prompt position predicts every response's first token; later
/// tokens are predicted from the preceding position inside the same segment.
pub fn segment_logprob_slices(layout: &PackedLayout) -> Vec<ResponseSlice> {
    let last_prompt = layout.prompt_len() - 1;
    layout.segments[1..]
        .iter()
        .map(|seg| {
            let mut predict_positions = Vec::with_capacity(seg.length);
            predict_positions.push(last_prompt);
            predict_positions.extend(seg.start..seg.end() - 1);
            ResponseSlice {
                response_index: seg.response_index,
                predict_positions,
                target_positions: seg.range(),
            }
        })
        .collect()
}

pub fn unpack(layout: &PackedLayout) -> Result<PreferenceExample, PackError> {
    layout.validate()?;
    let prompt = layout.tokens[layout.segments[0].range()].to_vec();
    let responses = layout.segments[1..]
        .iter()
        .map(|s| layout.tokens[s.range()].to_vec())
        .collect();
    Ok(PreferenceExample {
        example_id: layout.example_id.clone(),
        prompt,
        responses,
    })
}
