//! Preference packing for shared-prompt preference data.
//!
//! A preference example is one prompt with `K >= 2` ranked responses. Instead
//! of batching `K` rows that each repeat the prompt, the example is packed into
//! a single sequence `prompt ++ r_0 ++ ... ++ r_{K-1}` with a block attention
//! mask and position ids that restart at the prompt length for each response.
//!
//! - [`dataset`]: JSONL ingestion, byte tokenizer, length statistics.
//! - [`packer`]: packed layouts, the mask predicate, log-prob slices.
//! - [`cost_model`]: closed-form attention compute/memory ratios.
//! - [`refnet`]: a small transformer used to check packed == unpacked.
//! - [`scheduler`]: batch sorting and a data-parallel step-time simulator.
//! - [`cli`]: the `prefpack` command-line workflows.

pub mod cli;
pub mod cost_model;
pub mod dataset;
pub mod packer;
pub mod refnet;
pub mod scheduler;
