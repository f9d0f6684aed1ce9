//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

use std::process::Command;
use std::time::{Duration, Instant};

use prefpack::cli::{random_examples, verify_examples, VerifyOptions};
use prefpack::cost_model::{
    compute_ratio, is_beneficial, memory_ratio_flash, LengthProfile, MEASURED_REFERENCES,
};
use prefpack::dataset::{example_to_json, PreferenceExample};
use prefpack::packer::{allowed_pair_count, mask_allows, pack, render_dense_mask};
use prefpack::refnet::{
    dpo_loss, dpo_loss_and_grad, finite_difference_check, init_params, rm_loss, rm_loss_and_grad,
    sample_coordinates, LossOptions, Matrix, Pipeline, PositionalScheme, Precision, RefNetConfig,
};
use prefpack::scheduler::{
    strategy_report, ExampleLengths, LognormalFixture, SimConfig, SortMode, Strategy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn equivalence() -> Outcome {
    let start = Instant::now();
    let examples = random_examples(60, 257, 11);
    let fp64 = verify_examples(&examples, &VerifyOptions::default()).expect("fp64 run");
    let fp32 = verify_examples(
        &examples,
        &VerifyOptions {
            precision: Precision::Fp32,
            ..VerifyOptions::default()
        },
    )
    .expect("fp32 run");
    // Rotary positions exercise the position-id reset through a second path.
    let rotary_cfg = RefNetConfig {
        positional_scheme: PositionalScheme::Rotary,
        ..RefNetConfig::default()
    };
    let rotary = verify_examples(
        &examples[..12],
        &VerifyOptions {
            config: rotary_cfg,
            ..VerifyOptions::default()
        },
    )
    .expect("rotary run");
    let elapsed = start.elapsed();

    let s = &fp64.summary;
    let grad = s
        .max_rm_grad_rel_diff
        .unwrap_or(f64::INFINITY)
        .max(s.max_dpo_grad_rel_diff.unwrap_or(f64::INFINITY));
    let loss = s.max_rm_loss_diff.max(s.max_dpo_loss_diff);
    let k_seen: std::collections::BTreeSet<usize> =
        examples.iter().map(|e| e.num_responses()).collect();
    let pass = s.n_examples >= 50
        && k_seen.len() == 3
        && s.max_logit_diff <= 1e-9
        && loss <= 1e-9
        && grad <= 1e-8
        && fp32.summary.max_logit_diff <= 1e-4
        && fp64.passed
        && fp32.passed
        && rotary.passed
        && elapsed <= Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} examples (K in {:?}); fp64 logit {:.2e}, loss {:.2e}, grad rel {:.2e}; fp32 logit {:.2e}; rotary ok={}; {:.1}s",
            s.n_examples,
            k_seen,
            s.max_logit_diff,
            loss,
            grad,
            fp32.summary.max_logit_diff,
            rotary.passed,
            elapsed.as_secs_f64()
        ),
    )
}

fn mask_structure() -> Outcome {
    let mut layouts = 0usize;
    let mut checked = 0usize;
    let mut violations = 0usize;
    for l_in in 1..=4usize {
        for k in 2..=3usize {
            let n_combos = 3usize.pow(k as u32);
            for combo in 0..n_combos {
                let lens: Vec<usize> = (0..k)
                    .map(|i| combo / 3usize.pow(i as u32) % 3 + 1)
                    .collect();
                let mut tok = 0u32;
                let mut next = |n: usize| -> Vec<u32> {
                    (0..n)
                        .map(|_| {
                            tok += 1;
                            tok
                        })
                        .collect()
                };
                let prompt = next(l_in);
                let responses: Vec<Vec<u32>> = lens.iter().map(|&r| next(r)).collect();
                let e = PreferenceExample::new("m", prompt, responses).unwrap();
                let layout = pack(&e);
                // Segment label per position: 0 for the prompt, j + 1 for response j.
                let mut seg = vec![0usize; l_in];
                for (j, &r) in lens.iter().enumerate() {
                    seg.extend(std::iter::repeat_n(j + 1, r));
                }
                let dense = render_dense_mask(&layout);
                let n = seg.len();
                let mut true_count = 0usize;
                for q in 0..n {
                    for key in 0..n {
                        let rule = key <= q && (seg[key] == 0 || seg[key] == seg[q]);
                        if mask_allows(&layout, q, key).unwrap() != rule || dense[q][key] != rule {
                            violations += 1;
                        }
                        true_count += dense[q][key] as usize;
                        checked += 1;
                    }
                }
                let closed = l_in * (l_in + 1) / 2
                    + lens
                        .iter()
                        .map(|&r| r * l_in + r * (r + 1) / 2)
                        .sum::<usize>();
                if true_count != closed || allowed_pair_count(l_in, &lens) != closed {
                    violations += 1;
                }
                layouts += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("{layouts} layouts, {checked} (q, k) pairs, {violations} violations"),
    )
}

fn cost_sweep() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut disagreements = 0usize;
    let mut memory_violations = 0usize;
    let mut worst_scale = 0.0f64;
    let mut n_beneficial = 0usize;
    for i in 0..10_000 {
        let k = rng.random_range(2..=8);
        // Half integer-valued, half real-valued lengths.
        let mut draw = |hi: f64| {
            let v: f64 = rng.random_range(1.0..hi);
            if i % 2 == 0 {
                v.round()
            } else {
                v
            }
        };
        let l_in = draw(4000.0);
        let l_resp: Vec<f64> = (0..k).map(|_| draw(4000.0)).collect();
        let p = LengthProfile::new(l_in, l_resp).unwrap();
        let ratio = compute_ratio(&p);
        let b = is_beneficial(&p);
        n_beneficial += b as usize;
        if b != (ratio < 1.0) {
            disagreements += 1;
        }
        if memory_ratio_flash(&p) > 1.0 {
            memory_violations += 1;
        }
        let c = rng.random_range(0.01..100.0);
        let scaled = compute_ratio(&p.scaled(c));
        worst_scale = worst_scale.max(((scaled - ratio) / ratio).abs());
    }
    outcome(
        disagreements == 0 && memory_violations == 0 && worst_scale <= 1e-12,
        format!(
            "10000 profiles ({n_beneficial} beneficial): {disagreements} benefit/ratio disagreements, {memory_violations} memory > 1, worst scale drift {worst_scale:.2e}"
        ),
    )
}

fn table_one() -> Outcome {
    // Published mean lengths (input, max response, min response) and the
    // stated model predictions (compute, memory).
    let published = [
        ("Orca", 228.2, 251.0, 129.6, 0.807, 0.635),
        ("Capybara", 720.6, 468.8, 330.7, 0.817, 0.639),
        ("RLAIF-V", 599.8, 109.6, 89.7, 0.635, 0.563),
    ];
    let mut worst_hand = 0.0f64;
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for (m, (name, l_in, max, min, c_stated, m_stated)) in MEASURED_REFERENCES.iter().zip(published)
    {
        if (m.name, m.input_len, m.max_resp_len, m.min_resp_len) != (name, l_in, max, min) {
            return outcome(false, format!("reference table mismatch for {name}"));
        }
        // Hand arithmetic, K = 2.
        let orig = l_in + max;
        let packed = l_in + max + min;
        let c_hand = packed * packed / (2.0 * orig * orig);
        let m_hand = packed / (2.0 * orig);

        let p = LengthProfile::new(l_in, vec![max, min]).unwrap();
        let c = compute_ratio(&p);
        let mem = memory_ratio_flash(&p);
        for d in [c - c_hand, mem - m_hand] {
            worst_hand = worst_hand.max(d.abs());
        }
        for d in [c - c_stated, mem - m_stated] {
            worst = worst.max(d.abs());
        }
        rows.push(format!(
            "{} compute {c:.4} memory {mem:.4} (measured time {:.3}, memory {:.3})",
            m.name, m.time, m.peak_memory
        ));
    }
    outcome(
        worst_hand <= 1e-3 && worst <= 1e-3,
        format!(
            "vs hand arithmetic {worst_hand:.2e}, vs stated 3-digit values {worst:.2e}; {}",
            rows.join("; ")
        ),
    )
}

fn example_with_k(seed: u64, k: usize) -> PreferenceExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut toks = |n: usize| {
        (0..n)
            .map(|_| rng.random_range(0..257u32))
            .collect::<Vec<_>>()
    };
    let prompt = toks(9);
    let responses = (0..k).map(|i| toks(3 + 2 * i)).collect();
    PreferenceExample::new(format!("fd-{seed}"), prompt, responses).unwrap()
}

fn gradient_integrity() -> Outcome {
    let config = RefNetConfig {
        max_position: 64,
        ..RefNetConfig::default()
    };
    let policy = init_params(&config, 21).unwrap();
    let reference = init_params(&config, 22).unwrap();
    let mut dpo_samples = Vec::new();
    let mut rm_samples = Vec::new();
    for (seed, k) in [(1u64, 2usize), (2, 3)] {
        let e = example_with_k(seed, k);
        let coords = sample_coordinates(&policy, &e, seed);
        let opts = LossOptions::dpo(Pipeline::Packed);
        let g = dpo_loss_and_grad(&policy, &reference, &e, 0.5, opts).unwrap();
        dpo_samples.extend(
            finite_difference_check(&policy, &g.policy, &coords, 1e-6, |p| {
                dpo_loss(p, &reference, &e, 0.5, opts)
            })
            .unwrap(),
        );
        let opts = LossOptions::rm(Pipeline::Packed);
        let (_, g) = rm_loss_and_grad(&policy, &e, opts).unwrap();
        rm_samples.extend(
            finite_difference_check(&policy, &g, &coords, 1e-6, |p| rm_loss(p, &e, opts)).unwrap(),
        );
    }
    let worst =
        |s: &[prefpack::refnet::FdSample]| s.iter().map(|x| x.rel_error).fold(0.0, f64::max);
    let (wd, wr) = (worst(&dpo_samples), worst(&rm_samples));
    outcome(
        dpo_samples.len() >= 20 && rm_samples.len() >= 20 && wd <= 1e-5 && wr <= 1e-5,
        format!(
            "DPO {} coords, worst rel {wd:.2e}; RM {} coords, worst rel {wr:.2e}",
            dpo_samples.len(),
            rm_samples.len()
        ),
    )
}

fn identity_anchors() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let config = RefNetConfig {
        max_position: 64,
        ..RefNetConfig::default()
    };
    let policy = init_params(&config, 5).unwrap();
    let mut worst_dpo = 0.0f64;
    for (seed, k) in [(1u64, 2usize), (2, 3), (3, 4)] {
        let e = example_with_k(seed, k);
        for beta in [0.01, 0.1, 1.0, 5.0] {
            for pipeline in [Pipeline::Packed, Pipeline::Unpacked] {
                let l = dpo_loss(
                    &policy,
                    &policy.clone(),
                    &e,
                    beta,
                    LossOptions::dpo(pipeline),
                )
                .unwrap();
                worst_dpo = worst_dpo.max((l - ln2).abs());
            }
        }
    }
    // Equal rewards: identical responses, and separately a zeroed reward head.
    let mut worst_rm = 0.0f64;
    let twin = PreferenceExample::new("twin", vec![4, 8, 15, 16], vec![vec![23, 42]; 3]).unwrap();
    let mut zeroed = policy.clone();
    zeroed.tensors.reward_weight = Some(Matrix::zeros(config.d_model, 1));
    zeroed.tensors.reward_bias = Some(Matrix::zeros(1, 1));
    for pipeline in [Pipeline::Packed, Pipeline::Unpacked] {
        let l = rm_loss(&policy, &twin, LossOptions::rm(pipeline)).unwrap();
        worst_rm = worst_rm.max((l - ln2).abs());
        let l = rm_loss(&zeroed, &example_with_k(4, 3), LossOptions::rm(pipeline)).unwrap();
        worst_rm = worst_rm.max((l - ln2).abs());
    }
    outcome(
        worst_dpo <= 1e-12 && worst_rm <= 1e-12,
        format!("|dpo - ln 2| <= {worst_dpo:.2e}, |rm - ln 2| <= {worst_rm:.2e}"),
    )
}

fn scheduler_ordering() -> Outcome {
    let fixture = LognormalFixture::default();
    let examples = fixture.generate(2024).unwrap();
    let sim = SimConfig {
        n_ranks: 8,
        ..SimConfig::default()
    };
    let report = strategy_report(&examples, 8, &sim, &Strategy::ALL, SortMode::Global).unwrap();
    let r = |s| report.relative(s).unwrap();
    let (v, p, s, b) = (
        r(Strategy::Vanilla),
        r(Strategy::Packing),
        r(Strategy::Sorting),
        r(Strategy::Both),
    );
    outcome(
        fixture.n_examples == 5000 && b > s && s > p && p > v && b >= 1.1 * s,
        format!(
            "vanilla {v:.3}, packing {p:.3}, sorting {s:.3}, both {b:.3} (both/sorting {:.3})",
            b / s
        ),
    )
}

fn limitations_regime() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let examples: Vec<ExampleLengths> = (0..400)
        .map(|i| {
            ExampleLengths::new(
                format!("long-{i}"),
                rng.random_range(1..=16),
                (0..2).map(|_| rng.random_range(600..=1000)).collect(),
            )
            .unwrap()
        })
        .collect();
    let beneficial = examples
        .iter()
        .filter(|e| is_beneficial(&e.profile()))
        .count();
    let sim = SimConfig {
        n_ranks: 8,
        ..SimConfig::default()
    };
    let packing = strategy_report(&examples, 8, &sim, &[Strategy::Packing], SortMode::Global)
        .unwrap()
        .relative(Strategy::Packing)
        .unwrap();
    outcome(
        beneficial == 0 && packing < 1.0,
        format!("{beneficial}/400 beneficial, packing relative throughput {packing:.3}"),
    )
}

fn run_bin(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_prefpack"))
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    let data: String = random_examples(12, 257, 9)
        .iter()
        .map(|e| example_to_json(e).to_string() + "\n")
        .collect();
    std::fs::write(p("data.jsonl"), data).unwrap();
    std::fs::write(
        p("scenario.json"),
        r#"{"synthetic": {"n_examples": 2000, "k": 2, "median_prompt": 400, "median_response": 150, "sigma_prompt": 1.0, "sigma_response": 0.8, "max_len": 16384}, "batch_size": 8, "n_ranks": 8}"#,
    )
    .unwrap();
    let data_path = p("data.jsonl");
    let scenario = p("scenario.json");
    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "analyze",
            vec!["analyze".into(), "--dataset".into(), data_path.clone()],
        ),
        (
            "pack",
            vec![
                "pack".into(),
                "--dataset".into(),
                data_path.clone(),
                "--out".into(),
            ],
        ),
        (
            "verify",
            vec![
                "verify".into(),
                "--dataset".into(),
                data_path.clone(),
                "--n-samples".into(),
                "6".into(),
                "--seed".into(),
                "5".into(),
            ],
        ),
        (
            "simulate",
            vec![
                "simulate".into(),
                "--scenario".into(),
                scenario,
                "--seed".into(),
                "5".into(),
            ],
        ),
    ];
    let mut mismatches = Vec::new();
    for (name, base) in commands {
        let mut runs = Vec::new();
        for attempt in 0..2 {
            let mut args = base.clone();
            if name == "pack" {
                args.push(p(&format!("layouts{attempt}.jsonl")));
            }
            args.extend(["--format".into(), "json".into()]);
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            let (code, mut stdout) = run_bin(&argv);
            if name == "pack" {
                // The summary names its own output path; compare file bytes instead.
                stdout = std::fs::read(p(&format!("layouts{attempt}.jsonl"))).unwrap_or_default();
            }
            runs.push((code, stdout));
        }
        let valid_json =
            name == "pack" || serde_json::from_slice::<serde_json::Value>(&runs[0].1).is_ok();
        if runs[0] != runs[1] || runs[0].0 != 0 || runs[0].1.is_empty() || !valid_json {
            mismatches.push(name);
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "analyze, pack, verify, simulate: byte-identical JSON across two runs".to_string()
        } else {
            format!("nondeterministic or failing: {mismatches:?}")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("packed vs batched equivalence", equivalence),
        ("mask structure", mask_structure),
        ("cost model sweep", cost_sweep),
        ("mean-length compute/memory ratios", table_one),
        ("gradient integrity", gradient_integrity),
        ("identity anchors", identity_anchors),
        ("scheduler ordering", scheduler_ordering),
        ("limitations regime", limitations_regime),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += !o.pass as usize;
        println!(
            "criterion {} {:<36} {}  {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {}/{} passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
