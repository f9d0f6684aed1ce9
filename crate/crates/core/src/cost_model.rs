//! Closed-form attention cost model for preference packing.
//!
//! With prompt length `l_in` and response lengths `l_resp^k`:
//!
//! ```text
//! l_original = l_in + max_k l_resp^k        (per-pair length after padding)
//! l_pp       = l_in + sum_k l_resp^k        (packed length)
//! C_original = K * l_original^2
//! C_pp       = l_pp^2
//! compute ratio       = C_pp / C_original
//! flash memory ratio  = l_pp / (K * l_original)
//! ```
//!
//! Packing reduces attention compute iff `l_pp < sqrt(K) * l_original`.
//! All costs are in abstract attention units with constant factor 1; only
//! ratios carry meaning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetStats, PreferenceExample};
use crate::packer::allowed_pair_count;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CostError {
    #[error("invalid length profile: {0}")]
    InvalidProfile(String),
    #[error("dataset mixes response counts {0:?}; use per-K reports")]
    MixedK(Vec<usize>),
}

/// Prompt and response lengths for one example, or mean lengths for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthProfile {
    pub l_in: f64,
    pub l_resp: Vec<f64>,
}

impl LengthProfile {
    pub fn new(l_in: f64, l_resp: Vec<f64>) -> Result<Self, CostError> {
        if !(l_in.is_finite() && l_in >= 1.0) {
            return Err(CostError::InvalidProfile(format!(
                "l_in = {l_in} must be >= 1"
            )));
        }
        if l_resp.len() < 2 {
            return Err(CostError::InvalidProfile(format!(
                "need K >= 2 responses, got {}",
                l_resp.len()
            )));
        }
        if let Some(bad) = l_resp.iter().find(|r| !(r.is_finite() && **r >= 1.0)) {
            return Err(CostError::InvalidProfile(format!(
                "response length {bad} must be >= 1"
            )));
        }
        Ok(Self { l_in, l_resp })
    }

    /// Builds a profile without the `>= 1` checks, for limit cases such as an
    /// empty prompt.
    pub fn unchecked(l_in: f64, l_resp: Vec<f64>) -> Self {
        Self { l_in, l_resp }
    }

    pub fn from_example(example: &PreferenceExample) -> Self {
        Self {
            l_in: example.prompt_len() as f64,
            l_resp: example
                .response_lens()
                .into_iter()
                .map(|r| r as f64)
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.l_resp.len()
    }

    pub fn max_resp(&self) -> f64 {
        self.l_resp
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum_resp(&self) -> f64 {
        self.l_resp.iter().sum()
    }

    /// `l_in + max_k l_resp^k`: each unpacked row padded to the longest response.
    pub fn original_len(&self) -> f64 {
        self.l_in + self.max_resp()
    }

    /// `l_in + sum_k l_resp^k`.
    pub fn packed_len(&self) -> f64 {
        self.l_in + self.sum_resp()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            l_in: self.l_in * c,
            l_resp: self.l_resp.iter().map(|r| r * c).collect(),
        }
    }
}

pub fn compute_cost_original(p: &LengthProfile) -> f64 {
    let l = p.original_len();
    p.k() as f64 * l * l
}

pub fn compute_cost_packed(p: &LengthProfile) -> f64 {
    let l = p.packed_len();
    l * l
}

pub fn compute_ratio(p: &LengthProfile) -> f64 {
    compute_cost_packed(p) / compute_cost_original(p)
}

/// `l_pp < sqrt(K) * l_original`, evaluated in squared form so that it agrees
/// exactly with `compute_ratio(p) < 1` in floating point.
pub fn is_beneficial(p: &LengthProfile) -> bool {
    compute_cost_packed(p) < compute_cost_original(p)
}

/// Attention memory ratio when memory is linear in sequence length.
pub fn memory_ratio_flash(p: &LengthProfile) -> f64 {
    p.packed_len() / (p.k() as f64 * p.original_len())
}

/// Number of query/key pairs the block mask actually admits. Always at most
/// [`compute_cost_packed`], which charges the full `l_pp^2`.
pub fn masked_pair_count(p: &LengthProfile) -> f64 {
    let tri = |n: f64| n * (n + 1.0) / 2.0;
    tri(p.l_in) + p.l_resp.iter().map(|&r| r * p.l_in + tri(r)).sum::<f64>()
}

/// Integer version of [`masked_pair_count`] for token-exact layouts.
pub fn masked_pair_count_exact(example: &PreferenceExample) -> usize {
    allowed_pair_count(example.prompt_len(), &example.response_lens())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub compute_original: f64,
    pub compute_packed: f64,
    pub compute_ratio: f64,
    pub memory_ratio_flash: f64,
    pub beneficial: bool,
    /// Masked-entry count of the block mask (tight packed compute estimate).
    pub compute_packed_tight: f64,
    pub profile: LengthProfile,
}

impl CostReport {
    pub fn new(profile: LengthProfile) -> Self {
        Self {
            compute_original: compute_cost_original(&profile),
            compute_packed: compute_cost_packed(&profile),
            compute_ratio: compute_ratio(&profile),
            memory_ratio_flash: memory_ratio_flash(&profile),
            beneficial: is_beneficial(&profile),
            compute_packed_tight: masked_pair_count(&profile),
            profile,
        }
    }

    /// Model analogue of "effective time": compute ratio times memory ratio.
    pub fn effective_ratio(&self) -> f64 {
        self.compute_ratio * self.memory_ratio_flash
    }
}

/// Mean length profile for a single-K dataset: `[max, min]` for `K = 2`,
/// with the remaining `K - 2` responses set to the mean leftover length so
/// that the profile's sum matches `mean_sum_resp_len`.
pub fn mean_profile(stats: &DatasetStats) -> Result<LengthProfile, CostError> {
    let k = stats
        .uniform_k()
        .ok_or_else(|| CostError::MixedK(stats.k_histogram.keys().copied().collect()))?;
    let mut l_resp = vec![stats.mean_max_resp_len, stats.mean_min_resp_len];
    if k > 2 {
        let rest = (stats.mean_sum_resp_len - stats.mean_max_resp_len - stats.mean_min_resp_len)
            / (k - 2) as f64;
        l_resp.extend(std::iter::repeat_n(rest, k - 2));
    }
    LengthProfile::new(stats.mean_input_len, l_resp)
}

/// Dataset-level report evaluated at the mean length profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCostReport {
    pub k: usize,
    pub n_examples: usize,
    pub report: CostReport,
    /// `compute_ratio * memory_ratio_flash`, model-predicted.
    pub effective_ratio: f64,
    /// Per-example ratios averaged, present when examples were available.
    pub mean_example_compute_ratio: Option<f64>,
    pub mean_example_memory_ratio: Option<f64>,
    pub beneficial_fraction: Option<f64>,
}

pub fn dataset_cost_report(stats: &DatasetStats) -> Result<DatasetCostReport, CostError> {
    let profile = mean_profile(stats)?;
    let k = profile.k();
    let report = CostReport::new(profile);
    Ok(DatasetCostReport {
        k,
        n_examples: stats.n_examples,
        effective_ratio: report.effective_ratio(),
        report,
        mean_example_compute_ratio: None,
        mean_example_memory_ratio: None,
        beneficial_fraction: None,
    })
}

/// One report per distinct K, including per-example averaged ratios.
pub fn dataset_cost_reports(
    examples: &[PreferenceExample],
) -> Result<BTreeMap<usize, DatasetCostReport>, crate::dataset::DatasetError> {
    let by_k = crate::dataset::compute_stats_by_k(examples)?;
    let mut out = BTreeMap::new();
    for (k, stats) in by_k {
        let mut report = dataset_cost_report(&stats).expect("single-K stats");
        let group: Vec<LengthProfile> = examples
            .iter()
            .filter(|e| e.num_responses() == k)
            .map(LengthProfile::from_example)
            .collect();
        let n = group.len() as f64;
        report.mean_example_compute_ratio = Some(group.iter().map(compute_ratio).sum::<f64>() / n);
        report.mean_example_memory_ratio =
            Some(group.iter().map(memory_ratio_flash).sum::<f64>() / n);
        report.beneficial_fraction =
            Some(group.iter().filter(|p| is_beneficial(p)).count() as f64 / n);
        out.insert(k, report);
    }
    Ok(out)
}

/// Measured GPU ratios for the three public datasets, used only as
/// qualitative reference columns next to model predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasuredReference {
    pub name: &'static str,
    pub input_len: f64,
    pub max_resp_len: f64,
    pub min_resp_len: f64,
    pub peak_memory: f64,
    pub time: f64,
    pub effective_time: f64,
}

pub const MEASURED_REFERENCES: [MeasuredReference; 3] = [
    MeasuredReference {
        name: "Orca",
        input_len: 228.2,
        max_resp_len: 251.0,
        min_resp_len: 129.6,
        peak_memory: 0.671,
        time: 0.801,
        effective_time: 0.537,
    },
    MeasuredReference {
        name: "Capybara",
        input_len: 720.6,
        max_resp_len: 468.8,
        min_resp_len: 330.7,
        peak_memory: 0.802,
        time: 0.780,
        effective_time: 0.626,
    },
    MeasuredReference {
        name: "RLAIF-V",
        input_len: 599.8,
        max_resp_len: 109.6,
        min_resp_len: 89.7,
        peak_memory: 0.635,
        time: 0.798,
        effective_time: 0.507,
    },
];

impl MeasuredReference {
    pub fn profile(&self) -> LengthProfile {
        LengthProfile::new(self.input_len, vec![self.max_resp_len, self.min_resp_len])
            .expect("reference lengths are valid")
    }
}
