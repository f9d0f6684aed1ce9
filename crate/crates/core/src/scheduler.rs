//! Batch formation, batch sorting, padding accounting, and a data-parallel
//! step-time simulator.
//!
//! A batch holds `M` preference examples. Unpacked, each example contributes
//! `K` rows; packed, it contributes one row. Every row in a batch is padded to
//! the batch's longest row. Consecutive batches go round-robin to `n_ranks`
//! workers, and a step lasts as long as its slowest rank.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::cost_model::{compute_cost_original, compute_cost_packed, LengthProfile};
use crate::dataset::PreferenceExample;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SchedulerError {
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("n_ranks must be at least 1")]
    Ranks,
    #[error("invalid example {id}: {message}")]
    Example { id: String, message: String },
    #[error("invalid synthetic fixture: {0}")]
    Fixture(String),
}

/// Token lengths of one preference example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleLengths {
    pub id: String,
    pub prompt_len: usize,
    pub response_lens: Vec<usize>,
}

impl ExampleLengths {
    pub fn new(
        id: impl Into<String>,
        prompt_len: usize,
        response_lens: Vec<usize>,
    ) -> Result<Self, SchedulerError> {
        let e = Self {
            id: id.into(),
            prompt_len,
            response_lens,
        };
        if e.prompt_len == 0 || e.response_lens.len() < 2 || e.response_lens.contains(&0) {
            return Err(SchedulerError::Example {
                id: e.id,
                message: "need prompt length >= 1 and K >= 2 non-empty responses".into(),
            });
        }
        Ok(e)
    }

    pub fn from_example(example: &PreferenceExample) -> Self {
        Self {
            id: example.example_id.clone(),
            prompt_len: example.prompt_len(),
            response_lens: example.response_lens(),
        }
    }

    pub fn profile(&self) -> LengthProfile {
        LengthProfile::unchecked(
            self.prompt_len as f64,
            self.response_lens.iter().map(|&r| r as f64).collect(),
        )
    }

    /// `l_in + max_k l_resp^k`, the padded length of each unpacked row.
    pub fn unpacked_len(&self) -> usize {
        self.prompt_len + self.response_lens.iter().max().copied().unwrap_or(0)
    }

    /// `l_in + sum_k l_resp^k`.
    pub fn packed_len(&self) -> usize {
        self.prompt_len + self.response_lens.iter().sum::<usize>()
    }

    pub fn effective_len(&self, mode: PackingMode) -> usize {
        match mode {
            PackingMode::Unpacked => self.unpacked_len(),
            PackingMode::Packed => self.packed_len(),
        }
    }

    /// Attention cost of this example alone, straight from the cost model.
    pub fn standalone_cost(&self, mode: PackingMode) -> f64 {
        match mode {
            PackingMode::Unpacked => compute_cost_original(&self.profile()),
            PackingMode::Packed => compute_cost_packed(&self.profile()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackingMode {
    Unpacked,
    Packed,
}

/// One row fed to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDescriptor {
    pub id: String,
    /// Index of the source example in the input list.
    pub example_index: usize,
    /// Length in tokens before cross-example padding.
    pub length: usize,
    /// The source example's standalone attention cost, split evenly across
    /// its rows.
    pub cost_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub sequences: Vec<SequenceDescriptor>,
    pub n_examples: usize,
}

impl Batch {
    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(|s| s.length).max().unwrap_or(0)
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.length).sum()
    }

    pub fn padded_token_count(&self) -> usize {
        self.sequences.len() * self.max_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SortMode {
    None,
    /// Stable global sort by effective length, then chunk.
    Global,
    /// Global sort, then shuffle within buckets of `bucket_batches * M`
    /// examples before chunking.
    Bucketed {
        bucket_batches: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub mode: PackingMode,
    pub sorted: bool,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn n_examples(&self) -> usize {
        self.batches.iter().map(|b| b.n_examples).sum()
    }

    pub fn total_padding_tokens(&self) -> usize {
        self.batches
            .iter()
            .map(|b| b.padded_token_count() - b.token_count())
            .sum()
    }
}

/// Stable ascending permutation of `lengths`; ties keep input order.
pub fn sort_by_length(lengths: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    order
}

fn example_sequences(
    e: &ExampleLengths,
    index: usize,
    mode: PackingMode,
) -> Vec<SequenceDescriptor> {
    let cost = e.standalone_cost(mode);
    match mode {
        PackingMode::Packed => vec![SequenceDescriptor {
            id: e.id.clone(),
            example_index: index,
            length: e.packed_len(),
            cost_weight: cost,
        }],
        PackingMode::Unpacked => {
            let k = e.response_lens.len();
            e.response_lens
                .iter()
                .enumerate()
                .map(|(r, &len)| SequenceDescriptor {
                    id: format!("{}#{r}", e.id),
                    example_index: index,
                    length: e.prompt_len + len,
                    cost_weight: cost / k as f64,
                })
                .collect()
        }
    }
}

/// Groups examples into batches of `batch_size` examples (the last batch may
/// be smaller). Unpacked examples keep their `K` rows in the same batch.
pub fn form_batches(
    examples: &[ExampleLengths],
    batch_size: usize,
    mode: PackingMode,
    sort: SortMode,
) -> Result<BatchPlan, SchedulerError> {
    if batch_size < 1 {
        return Err(SchedulerError::BatchSize);
    }
    let order: Vec<usize> = match sort {
        SortMode::None => (0..examples.len()).collect(),
        SortMode::Global | SortMode::Bucketed { .. } => {
            let lengths: Vec<usize> = examples.iter().map(|e| e.effective_len(mode)).collect();
            let mut order = sort_by_length(&lengths);
            if let SortMode::Bucketed {
                bucket_batches,
                seed,
            } = sort
            {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bucket = (bucket_batches.max(1)) * batch_size;
                for chunk in order.chunks_mut(bucket) {
                    chunk.shuffle(&mut rng);
                }
            }
            order
        }
    };
    let batches = order
        .chunks(batch_size)
        .map(|chunk| Batch {
            sequences: chunk
                .iter()
                .flat_map(|&i| example_sequences(&examples[i], i, mode))
                .collect(),
            n_examples: chunk.len(),
        })
        .collect();
    Ok(BatchPlan {
        batches,
        mode,
        sorted: !matches!(sort, SortMode::None),
        batch_size,
    })
}

/// Fraction of token slots in a batch that hold padding.
pub fn padding_waste(batch: &Batch) -> f64 {
    let padded = batch.padded_token_count();
    if padded == 0 {
        return 0.0;
    }
    1.0 - batch.token_count() as f64 / padded as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CostFunction {
    /// Attention compute, quadratic in padded length.
    #[default]
    QuadraticAttention,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_ranks: usize,
    pub cost_function: CostFunction,
    /// Constant cost added to every step.
    pub step_overhead: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_ranks: 1,
            cost_function: CostFunction::QuadraticAttention,
            step_overhead: 0.0,
        }
    }
}

/// Cost of one batch: every row padded to the batch maximum.
pub fn batch_cost(batch: &Batch, cost: CostFunction) -> f64 {
    let rows = batch.sequences.len() as f64;
    let len = batch.max_len() as f64;
    match cost {
        CostFunction::QuadraticAttention => rows * len * len,
        CostFunction::Linear => rows * len,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub n_examples: usize,
    pub n_steps: usize,
    pub total_cost: f64,
    /// Rank-time spent waiting for the slowest rank, summed over steps.
    pub idle_cost: f64,
    /// Examples per cost unit.
    pub throughput: f64,
}

/// Runs the idle-wait model: step `s` takes batches `s*R .. s*R+R`, and its
/// cost is the largest of those batch costs plus the step overhead.
pub fn simulate(plan: &BatchPlan, sim: &SimConfig) -> Result<SimResult, SchedulerError> {
    if sim.n_ranks < 1 {
        return Err(SchedulerError::Ranks);
    }
    let mut total_cost = 0.0;
    let mut idle_cost = 0.0;
    let mut n_steps = 0;
    for step in plan.batches.chunks(sim.n_ranks) {
        let costs: Vec<f64> = step
            .iter()
            .map(|b| batch_cost(b, sim.cost_function))
            .collect();
        let slowest = costs.iter().copied().fold(0.0, f64::max);
        // Ranks without a batch in the final step also wait.
        idle_cost += costs.iter().map(|c| slowest - c).sum::<f64>()
            + (sim.n_ranks - costs.len()) as f64 * slowest;
        total_cost += slowest + sim.step_overhead;
        n_steps += 1;
    }
    let n_examples = plan.n_examples();
    Ok(SimResult {
        n_examples,
        n_steps,
        total_cost,
        idle_cost,
        throughput: if total_cost > 0.0 {
            n_examples as f64 / total_cost
        } else {
            0.0
        },
    })
}

/// Examples per cost unit for `plan`.
pub fn simulate_throughput(plan: &BatchPlan, sim: &SimConfig) -> Result<f64, SchedulerError> {
    Ok(simulate(plan, sim)?.throughput)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vanilla,
    Packing,
    Sorting,
    Both,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Vanilla,
        Strategy::Packing,
        Strategy::Sorting,
        Strategy::Both,
    ];

    pub fn mode(self) -> PackingMode {
        match self {
            Strategy::Vanilla | Strategy::Sorting => PackingMode::Unpacked,
            Strategy::Packing | Strategy::Both => PackingMode::Packed,
        }
    }

    pub fn sorted(self) -> bool {
        matches!(self, Strategy::Sorting | Strategy::Both)
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Packing => "w/ preference packing",
            Strategy::Sorting => "w/ batch sorting",
            Strategy::Both => "w/ both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub throughput: f64,
    /// Throughput relative to vanilla.
    pub relative: f64,
    pub n_steps: usize,
    pub idle_fraction: f64,
    pub padding_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub n_examples: usize,
    pub batch_size: usize,
    pub sim: SimConfig,
    pub rows: Vec<StrategyRow>,
}

impl StrategyReport {
    pub fn relative(&self, strategy: Strategy) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy)
            .map(|r| r.relative)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>12} {:>10} {:>8}",
            "strategy", "rel. thrpt", "idle", "steps"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>12.4} {:>9.1}% {:>8}",
                r.strategy.label(),
                r.relative,
                100.0 * r.idle_fraction,
                r.n_steps
            );
        }
        out
    }
}

/// Simulates each strategy and normalizes throughput to vanilla = 1.0. The
/// vanilla baseline is always computed, even when not listed.
pub fn strategy_report(
    examples: &[ExampleLengths],
    batch_size: usize,
    sim: &SimConfig,
    strategies: &[Strategy],
    sort: SortMode,
) -> Result<StrategyReport, SchedulerError> {
    let run = |s: Strategy| -> Result<(SimResult, usize), SchedulerError> {
        let mode = if s.sorted() { sort } else { SortMode::None };
        let plan = form_batches(examples, batch_size, s.mode(), mode)?;
        Ok((simulate(&plan, sim)?, plan.total_padding_tokens()))
    };
    let (baseline, _) = run(Strategy::Vanilla)?;
    let rows = strategies
        .iter()
        .map(|&s| {
            let (res, padding_tokens) = run(s)?;
            let busy = res.total_cost * sim.n_ranks as f64;
            Ok(StrategyRow {
                strategy: s,
                throughput: res.throughput,
                relative: if s == Strategy::Vanilla {
                    1.0
                } else {
                    res.throughput / baseline.throughput
                },
                n_steps: res.n_steps,
                idle_fraction: if busy > 0.0 {
                    res.idle_cost / busy
                } else {
                    0.0
                },
                padding_tokens,
            })
        })
        .collect::<Result<Vec<_>, SchedulerError>>()?;
    Ok(StrategyReport {
        n_examples: examples.len(),
        batch_size,
        sim: *sim,
        rows,
    })
}

/// Seeded heavy-tailed length fixture: lognormal prompt and response lengths
/// parameterized by their medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LognormalFixture {
    pub n_examples: usize,
    pub k: usize,
    pub median_prompt: f64,
    pub median_response: f64,
    pub sigma_prompt: f64,
    pub sigma_response: f64,
    pub max_len: usize,
}

impl Default for LognormalFixture {
    fn default() -> Self {
        Self {
            n_examples: 5000,
            k: 2,
            median_prompt: 400.0,
            median_response: 150.0,
            sigma_prompt: 1.0,
            sigma_response: 0.8,
            max_len: 16_384,
        }
    }
}

impl LognormalFixture {
    pub fn generate(&self, seed: u64) -> Result<Vec<ExampleLengths>, SchedulerError> {
        if self.k < 2 || self.median_prompt <= 0.0 || self.median_response <= 0.0 {
            return Err(SchedulerError::Fixture(
                "need k >= 2 and positive medians".into(),
            ));
        }
        let bad = |e: rand_distr::NormalError| SchedulerError::Fixture(e.to_string());
        let prompt = LogNormal::new(self.median_prompt.ln(), self.sigma_prompt).map_err(bad)?;
        let response =
            LogNormal::new(self.median_response.ln(), self.sigma_response).map_err(bad)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clamp = |v: f64| (v.round() as usize).clamp(1, self.max_len);
        Ok((0..self.n_examples)
            .map(|i| ExampleLengths {
                id: format!("syn-{i}"),
                prompt_len: clamp(prompt.sample(&mut rng)),
                response_lens: (0..self.k)
                    .map(|_| clamp(response.sample(&mut rng)))
                    .collect(),
            })
            .collect())
    }
}
