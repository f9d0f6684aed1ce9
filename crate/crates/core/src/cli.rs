//! The `prefpack` command line: `analyze`, `pack`, `verify` and `simulate`.
//!
//! Every command returns a [`CmdOutput`] instead of printing, so the binary
//! and the tests share one code path. Exit codes: 0 success, 1 verification
//! failure, 2 usage or I/O error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::{dataset_cost_reports, CostReport, DatasetCostReport, MEASURED_REFERENCES};
use crate::dataset::{
    compute_stats, load_preference_jsonl, DatasetError, DatasetStats, PreferenceExample, TokenId,
    DEFAULT_VOCAB_SIZE,
};
use crate::packer::{pack, unpack, PackedLayout};
use crate::refnet::{
    compare_example, init_params, ExampleEquivalence, PositionalScheme, Precision, RefNetConfig,
    RefNetError, RefNetParams, Tolerances,
};
use crate::scheduler::{
    strategy_report, CostFunction, ExampleLengths, LognormalFixture, SchedulerError, SimConfig,
    SortMode, Strategy, StrategyReport,
};

pub const DEFAULT_SEED: u64 = 1234;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    RefNet(#[from] RefNetError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("invalid scenario {path}: {message}")]
    Scenario { path: String, message: String },
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Captured result of one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmdOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CmdOutput {
    fn ok(stdout: String) -> Self {
        Self {
            code: EXIT_OK,
            stdout,
            stderr: String::new(),
        }
    }

    fn error(err: &CliError) -> Self {
        Self {
            code: EXIT_USAGE,
            stdout: String::new(),
            stderr: format!("error: {err}\n"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    Json,
    #[default]
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum PrecisionArg {
    Fp32,
    #[default]
    Fp64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Fp32 => Precision::Fp32,
            PrecisionArg::Fp64 => Precision::Fp64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PositionalArg {
    LearnedAbsolute,
    Rotary,
}

#[derive(Debug, Parser)]
#[command(name = "prefpack", version, about = "Preference packing toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Length statistics and model-predicted compute/memory ratios.
    Analyze(AnalyzeArgs),
    /// Write one packed layout per line.
    Pack(PackArgs),
    /// Check packed against unpacked computation on the reference network.
    Verify(VerifyArgs),
    /// Compare batching strategies in the step-time simulator.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Preference JSONL. Without it only the published reference profiles are reported.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Layout JSONL destination.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Sample examples from this JSONL instead of generating random ones.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub n_samples: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Fp64)]
    pub precision: PrecisionArg,
    /// DPO temperature.
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    /// Skip the gradient comparison.
    #[arg(long)]
    pub no_gradients: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long, value_enum)]
    pub positional: Option<PositionalArg>,
    /// Debug: replace the block mask with plain causal attention.
    #[arg(long, hide = true)]
    pub inject_leak: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the scenario's dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> CmdOutput
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                CmdOutput {
                    code: EXIT_USAGE,
                    stdout: String::new(),
                    stderr: text,
                }
            } else {
                CmdOutput::ok(text)
            }
        }
    }
}

pub fn run(cli: Cli) -> CmdOutput {
    match cli.command {
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Pack(a) => cmd_pack(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn check_input(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{} does not exist or is not a file",
            path.display()
        )))
    }
}

fn check_output(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CliError::Usage(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn load_nonempty(path: &Path, vocab_size: usize) -> Result<Vec<PreferenceExample>, CliError> {
    check_input(path)?;
    let examples = load_preference_jsonl(path, vocab_size)?;
    if examples.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    Ok(examples)
}

/// Sends `report` to `--out` or returns it as stdout.
fn emit(report: String, out: Option<&Path>) -> Result<String, CliError> {
    match out {
        Some(path) => {
            fs::write(path, &report).map_err(|e| CliError::io(path, e))?;
            Ok(String::new())
        }
        None => Ok(report),
    }
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, Serialize)]
pub struct MeasuredColumns {
    pub time: f64,
    pub peak_memory: f64,
    pub effective_time: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceRow {
    pub name: String,
    /// Model prediction at the published mean lengths.
    pub predicted: CostReport,
    pub predicted_effective_ratio: f64,
    /// Published GPU measurements, shown for comparison only.
    pub measured: MeasuredColumns,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetAnalysis {
    pub path: String,
    pub stats: DatasetStats,
    /// One report per distinct response count.
    pub reports: Vec<DatasetCostReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub dataset: Option<DatasetAnalysis>,
    pub references: Vec<ReferenceRow>,
}

pub fn analyze(dataset: Option<&Path>, vocab_size: usize) -> Result<AnalyzeReport, CliError> {
    let dataset = match dataset {
        Some(path) => {
            let examples = load_nonempty(path, vocab_size)?;
            Some(DatasetAnalysis {
                path: path.display().to_string(),
                stats: compute_stats(&examples)?,
                reports: dataset_cost_reports(&examples)?.into_values().collect(),
            })
        }
        None => None,
    };
    let references = MEASURED_REFERENCES
        .iter()
        .map(|m| {
            let predicted = CostReport::new(m.profile());
            ReferenceRow {
                name: m.name.to_string(),
                predicted_effective_ratio: predicted.effective_ratio(),
                predicted,
                measured: MeasuredColumns {
                    time: m.time,
                    peak_memory: m.peak_memory,
                    effective_time: m.effective_time,
                },
            }
        })
        .collect();
    Ok(AnalyzeReport {
        dataset,
        references,
    })
}

pub fn analyze_table(report: &AnalyzeReport) -> String {
    let mut out = String::new();
    let header = |out: &mut String| {
        let _ = writeln!(
            out,
            "{:<20} {:>2} {:>8} {:>8} {:>8} {:>8} | {:>9} {:>9} {:>9} {:>5}",
            "dataset", "K", "input", "max", "min", "n", "compute", "memory", "effective", "gain"
        );
    };
    if let Some(d) = &report.dataset {
        let _ = writeln!(out, "dataset {} (model-predicted, mean profile)", d.path);
        header(&mut out);
        for r in &d.reports {
            let p = &r.report.profile;
            let _ = writeln!(
                out,
                "{:<20} {:>2} {:>8.1} {:>8.1} {:>8.1} {:>8} | {:>9.4} {:>9.4} {:>9.4} {:>5}",
                "this dataset",
                r.k,
                p.l_in,
                p.max_resp(),
                p.l_resp.iter().copied().fold(f64::INFINITY, f64::min),
                r.n_examples,
                r.report.compute_ratio,
                r.report.memory_ratio_flash,
                r.effective_ratio,
                if r.report.beneficial { "yes" } else { "no" },
            );
            if let (Some(c), Some(m), Some(b)) = (
                r.mean_example_compute_ratio,
                r.mean_example_memory_ratio,
                r.beneficial_fraction,
            ) {
                let _ = writeln!(
                    out,
                    "  per-example mean: compute {c:.4}, memory {m:.4}, beneficial {:.1}%",
                    100.0 * b
                );
            }
        }
        out.push('\n');
    }
    let _ = writeln!(out, "reference profiles (model-predicted ratios)");
    header(&mut out);
    for r in &report.references {
        let p = &r.predicted.profile;
        let _ = writeln!(
            out,
            "{:<20} {:>2} {:>8.1} {:>8.1} {:>8.1} {:>8} | {:>9.4} {:>9.4} {:>9.4} {:>5}",
            r.name,
            p.k(),
            p.l_in,
            p.l_resp[0],
            p.l_resp[1],
            "-",
            r.predicted.compute_ratio,
            r.predicted.memory_ratio_flash,
            r.predicted_effective_ratio,
            if r.predicted.beneficial { "yes" } else { "no" },
        );
    }
    out.push('\n');
    let _ = writeln!(out, "measured on GPU (qualitative comparison only)");
    let _ = writeln!(
        out,
        "{:<20} {:>9} {:>9} {:>9}",
        "dataset", "time", "memory", "effective"
    );
    for r in &report.references {
        let _ = writeln!(
            out,
            "{:<20} {:>9.3} {:>9.3} {:>9.3}",
            r.name, r.measured.time, r.measured.peak_memory, r.measured.effective_time
        );
    }
    out
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CmdOutput {
    let run = || -> Result<String, CliError> {
        if let Some(out) = &args.common.out {
            check_output(out)?;
        }
        let report = analyze(args.dataset.as_deref(), args.common.vocab_size)?;
        let text = match args.common.format {
            Format::Json => to_json(&report),
            Format::Table => analyze_table(&report),
        };
        emit(text, args.common.out.as_deref())
    };
    match run() {
        Ok(s) => CmdOutput::ok(s),
        Err(e) => CmdOutput::error(&e),
    }
}

// ------------------------------------------------------------------- pack

#[derive(Debug, Clone, Serialize)]
pub struct PackSummary {
    pub n_examples: usize,
    pub out: String,
    pub total_packed_tokens: usize,
    pub total_unpacked_tokens: usize,
}

/// Packs every example and checks `unpack(pack(e)) == e` token-exactly.
pub fn pack_examples(examples: &[PreferenceExample]) -> Result<Vec<PackedLayout>, String> {
    examples
        .iter()
        .map(|e| {
            let layout = pack(e);
            let back = unpack(&layout).map_err(|err| format!("{}: {err}", e.example_id))?;
            if &back != e {
                return Err(format!("{}: unpack roundtrip mismatch", e.example_id));
            }
            Ok(layout)
        })
        .collect()
}

pub fn cmd_pack(args: &PackArgs) -> CmdOutput {
    let run = || -> Result<Result<PackSummary, String>, CliError> {
        check_output(&args.out)?;
        let examples = load_nonempty(&args.dataset, args.vocab_size)?;
        let layouts = match pack_examples(&examples) {
            Ok(l) => l,
            Err(msg) => return Ok(Err(msg)),
        };
        let mut text = String::new();
        for l in &layouts {
            text.push_str(&serde_json::to_string(&l.to_json()).expect("layout serializes"));
            text.push('\n');
        }
        fs::write(&args.out, text).map_err(|e| CliError::io(&args.out, e))?;
        Ok(Ok(PackSummary {
            n_examples: layouts.len(),
            out: args.out.display().to_string(),
            total_packed_tokens: layouts.iter().map(|l| l.len()).sum(),
            total_unpacked_tokens: examples
                .iter()
                .map(|e| e.num_responses() * e.prompt_len() + e.sum_response_len())
                .sum(),
        }))
    };
    match run() {
        Ok(Ok(summary)) => CmdOutput::ok(match args.format {
            Format::Json => to_json(&summary),
            Format::Table => format!(
                "packed {} examples into {} ({} tokens, {} unpacked)\n",
                summary.n_examples,
                summary.out,
                summary.total_packed_tokens,
                summary.total_unpacked_tokens
            ),
        }),
        Ok(Err(msg)) => CmdOutput {
            code: EXIT_VERIFY_FAILED,
            stdout: String::new(),
            stderr: format!("roundtrip failed: {msg}\n"),
        },
        Err(e) => CmdOutput::error(&e),
    }
}

// ----------------------------------------------------------------- verify

/// Seeded random examples: prompt 4..=64 tokens, responses 1..=64, K in 2..=4.
pub fn random_examples(n: usize, vocab_size: usize, seed: u64) -> Vec<PreferenceExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.saturating_sub(1).to_string().len();
    let tokens = |rng: &mut ChaCha8Rng, len: usize| -> Vec<TokenId> {
        (0..len)
            .map(|_| rng.random_range(0..vocab_size as TokenId))
            .collect()
    };
    (0..n)
        .map(|i| {
            let prompt_len = rng.random_range(4..=64);
            let prompt = tokens(&mut rng, prompt_len);
            let k = rng.random_range(2..=4);
            let responses = (0..k)
                .map(|_| {
                    let len = rng.random_range(1..=64);
                    tokens(&mut rng, len)
                })
                .collect();
            PreferenceExample::new(format!("rand-{i:0width$}"), prompt, responses)
                .expect("generated example is valid")
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub n_examples: usize,
    pub n_failed: usize,
    pub failed_ids: Vec<String>,
    pub max_logit_diff: f64,
    pub max_logprob_diff: f64,
    pub max_reward_diff: f64,
    pub max_rm_loss_diff: f64,
    pub max_dpo_loss_diff: f64,
    pub max_rm_grad_rel_diff: Option<f64>,
    pub max_dpo_grad_rel_diff: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub precision: Precision,
    pub beta: f64,
    pub leak_injected: bool,
    pub config: RefNetConfig,
    pub tolerances: Tolerances,
    pub summary: VerifySummary,
    pub examples: Vec<ExampleEquivalence>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub precision: Precision,
    pub beta: f64,
    pub with_gradients: bool,
    pub inject_leak: bool,
    pub config: RefNetConfig,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            precision: Precision::Fp64,
            beta: 0.1,
            with_gradients: true,
            inject_leak: false,
            config: RefNetConfig::default(),
        }
    }
}

fn fold_max(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

fn fold_max_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.fold(None, |acc, v| match (acc, v) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    })
}

fn compare_all<T: crate::refnet::Real>(
    policy: &RefNetParams<T>,
    reference: &RefNetParams<T>,
    examples: &[PreferenceExample],
    opts: &VerifyOptions,
) -> Result<Vec<ExampleEquivalence>, RefNetError> {
    examples
        .par_iter()
        .map(|e| {
            compare_example(
                policy,
                reference,
                e,
                opts.beta,
                opts.with_gradients,
                opts.inject_leak,
            )
        })
        .collect()
}

/// Runs the packed-vs-unpacked oracle. The policy network is initialized from
/// `seed + 1` and the reference network from `seed + 2`.
pub fn verify_examples(
    examples: &[PreferenceExample],
    opts: &VerifyOptions,
) -> Result<VerifyReport, CliError> {
    if examples.is_empty() {
        return Err(CliError::Usage("nothing to verify: n-samples is 0".into()));
    }
    let mut config = opts.config.clone();
    config.precision = opts.precision;
    let needed = examples
        .iter()
        .map(|e| e.prompt_len() + e.max_response_len())
        .max()
        .unwrap_or(0);
    config.max_position = config.max_position.max(needed);
    let policy = init_params(&config, opts.seed.wrapping_add(1))?;
    let reference = init_params(&config, opts.seed.wrapping_add(2))?;
    let mut results = match opts.precision {
        Precision::Fp64 => compare_all(&policy, &reference, examples, opts)?,
        Precision::Fp32 => compare_all(
            &policy.cast::<f32>(),
            &reference.cast::<f32>(),
            examples,
            opts,
        )?,
    };
    results.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let tolerances = Tolerances::for_precision(opts.precision);
    let failed_ids: Vec<String> = results
        .iter()
        .filter(|r| !r.passes(&tolerances))
        .map(|r| r.example_id.clone())
        .collect();
    let summary = VerifySummary {
        n_examples: results.len(),
        n_failed: failed_ids.len(),
        max_logit_diff: fold_max(results.iter().map(|r| r.max_logit_diff)),
        max_logprob_diff: fold_max(results.iter().map(|r| r.max_logprob_diff)),
        max_reward_diff: fold_max(results.iter().map(|r| r.max_reward_diff)),
        max_rm_loss_diff: fold_max(results.iter().map(|r| r.rm_loss_diff)),
        max_dpo_loss_diff: fold_max(results.iter().map(|r| r.dpo_loss_diff)),
        max_rm_grad_rel_diff: fold_max_opt(results.iter().map(|r| r.rm_grad_rel_diff)),
        max_dpo_grad_rel_diff: fold_max_opt(results.iter().map(|r| r.dpo_grad_rel_diff)),
        failed_ids,
    };
    Ok(VerifyReport {
        seed: opts.seed,
        precision: opts.precision,
        beta: opts.beta,
        leak_injected: opts.inject_leak,
        config,
        tolerances,
        passed: summary.n_failed == 0,
        summary,
        examples: results,
    })
}

fn opt_sci(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3e}"))
}

pub fn verify_table(report: &VerifyReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>2} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>6}",
        "id", "K", "len", "logit", "rm loss", "dpo loss", "rm grad", "dpo grad", "status"
    );
    for r in &report.examples {
        let _ = writeln!(
            out,
            "{:<12} {:>2} {:>5} {:>10.3e} {:>10.3e} {:>10.3e} {:>10} {:>10} {:>6}",
            r.example_id,
            r.k,
            r.packed_len,
            r.max_logit_diff,
            r.rm_loss_diff,
            r.dpo_loss_diff,
            opt_sci(r.rm_grad_rel_diff),
            opt_sci(r.dpo_grad_rel_diff),
            if r.passes(&report.tolerances) {
                "ok"
            } else {
                "FAIL"
            },
        );
    }
    let s = &report.summary;
    let t = &report.tolerances;
    let _ = writeln!(
        out,
        "\n{} examples, {:?}: max logit diff {:.3e} (tol {:.0e}), max loss diff {:.3e} (tol {:.0e}), max grad rel diff {} (tol {:.0e})",
        s.n_examples,
        report.precision,
        s.max_logit_diff,
        t.logit_abs,
        s.max_rm_loss_diff.max(s.max_dpo_loss_diff),
        t.loss_abs,
        opt_sci(fold_max_opt([s.max_rm_grad_rel_diff, s.max_dpo_grad_rel_diff].into_iter())),
        t.grad_rel,
    );
    if report.passed {
        let _ = writeln!(out, "PASS");
    } else {
        let _ = writeln!(out, "FAIL: {}", s.failed_ids.join(", "));
    }
    out
}

fn verify_options(args: &VerifyArgs) -> VerifyOptions {
    let mut config = RefNetConfig {
        vocab_size: args.common.vocab_size,
        ..RefNetConfig::default()
    };
    if let Some(v) = args.d_model {
        config.d_model = v;
    }
    if let Some(v) = args.n_heads {
        config.n_heads = v;
    }
    if let Some(v) = args.n_layers {
        config.n_layers = v;
    }
    if let Some(v) = args.d_ff {
        config.d_ff = v;
    }
    if let Some(p) = args.positional {
        config.positional_scheme = match p {
            PositionalArg::LearnedAbsolute => PositionalScheme::LearnedAbsolute,
            PositionalArg::Rotary => PositionalScheme::Rotary,
        };
    }
    VerifyOptions {
        seed: args.seed,
        precision: args.precision.into(),
        beta: args.beta,
        with_gradients: !args.no_gradients,
        inject_leak: args.inject_leak,
        config,
    }
}

pub fn cmd_verify(args: &VerifyArgs) -> CmdOutput {
    let run = || -> Result<VerifyReport, CliError> {
        if args.n_samples == 0 {
            return Err(CliError::Usage("nothing to verify: n-samples is 0".into()));
        }
        if !(args.beta > 0.0) {
            return Err(CliError::Usage("beta must be positive".into()));
        }
        if let Some(out) = &args.common.out {
            check_output(out)?;
        }
        let examples = match &args.dataset {
            Some(path) => {
                let all = load_nonempty(path, args.common.vocab_size)?;
                let n = args.n_samples.min(all.len());
                let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                let mut picked = sample(&mut rng, all.len(), n).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| all[i].clone()).collect()
            }
            None => random_examples(args.n_samples, args.common.vocab_size, args.seed),
        };
        verify_examples(&examples, &verify_options(args))
    };
    let report = match run() {
        Ok(r) => r,
        Err(e) => return CmdOutput::error(&e),
    };
    let text = match args.common.format {
        Format::Json => to_json(&report),
        Format::Table => verify_table(&report),
    };
    let stdout = match emit(text, args.common.out.as_deref()) {
        Ok(s) => s,
        Err(e) => return CmdOutput::error(&e),
    };
    if report.passed {
        CmdOutput::ok(stdout)
    } else {
        CmdOutput {
            code: EXIT_VERIFY_FAILED,
            stdout,
            stderr: format!(
                "verification failed for {}\n",
                report.summary.failed_ids.join(", ")
            ),
        }
    }
}

// --------------------------------------------------------------- simulate

/// Simulator scenario. Exactly one of `dataset` and `synthetic` must be set;
/// a relative `dataset` path is resolved against the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<LognormalFixture>,
    pub batch_size: usize,
    pub n_ranks: usize,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub cost_function: CostFunction,
    #[serde(default)]
    pub step_overhead: f64,
    /// Randomize order within buckets of this many batches after sorting.
    #[serde(default)]
    pub bucket_batches: Option<usize>,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB_SIZE
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        check_input(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut scenario: Scenario =
            serde_json::from_str(&text).map_err(|e| CliError::Scenario {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        if let Some(d) = &scenario.dataset {
            if d.is_relative() {
                if let Some(dir) = path.parent() {
                    scenario.dataset = Some(dir.join(d));
                }
            }
        }
        Ok(scenario)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutput {
    pub seed: u64,
    pub source: String,
    pub report: StrategyReport,
}

pub fn simulate_scenario(scenario: &Scenario, seed: u64) -> Result<SimulateOutput, CliError> {
    let (examples, source) = match (&scenario.dataset, &scenario.synthetic) {
        (Some(path), None) => {
            let ex = load_nonempty(path, scenario.vocab_size)?;
            (
                ex.iter()
                    .map(ExampleLengths::from_example)
                    .collect::<Vec<_>>(),
                path.display().to_string(),
            )
        }
        (None, Some(fixture)) => (
            fixture.generate(seed)?,
            format!("lognormal fixture ({} examples)", fixture.n_examples),
        ),
        _ => {
            return Err(CliError::Usage(
                "scenario needs exactly one of \"dataset\" and \"synthetic\"".into(),
            ))
        }
    };
    if scenario.strategies.is_empty() {
        return Err(CliError::Usage("scenario lists no strategies".into()));
    }
    let sim = SimConfig {
        n_ranks: scenario.n_ranks,
        cost_function: scenario.cost_function,
        step_overhead: scenario.step_overhead,
    };
    let sort = match scenario.bucket_batches {
        Some(bucket_batches) => SortMode::Bucketed {
            bucket_batches,
            seed,
        },
        None => SortMode::Global,
    };
    let report = strategy_report(
        &examples,
        scenario.batch_size,
        &sim,
        &scenario.strategies,
        sort,
    )?;
    Ok(SimulateOutput {
        seed,
        source,
        report,
    })
}

pub fn cmd_simulate(args: &SimulateArgs) -> CmdOutput {
    let run = || -> Result<String, CliError> {
        if let Some(out) = &args.common.out {
            check_output(out)?;
        }
        let mut scenario = Scenario::load(&args.scenario)?;
        if let Some(d) = &args.dataset {
            scenario.dataset = Some(d.clone());
            scenario.synthetic = None;
        }
        let seed = args.seed.or(scenario.seed).unwrap_or(DEFAULT_SEED);
        let result = simulate_scenario(&scenario, seed)?;
        let text = match args.common.format {
            Format::Json => to_json(&result),
            Format::Table => format!(
                "{} | M = {}, {} ranks, seed {}\n{}",
                result.source,
                result.report.batch_size,
                result.report.sim.n_ranks,
                result.seed,
                result.report.to_table()
            ),
        };
        emit(text, args.common.out.as_deref())
    };
    match run() {
        Ok(s) => CmdOutput::ok(s),
        Err(e) => CmdOutput::error(&e),
    }
}
