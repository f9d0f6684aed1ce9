//! Packed-vs-unpacked comparisons and finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{dpo_loss_and_grad, response_scores, rm_loss_and_grad, LossOptions, Pipeline};
use super::model::{forward, forward_causal, ForwardRequest, LeakyPackedMask};
use super::params::{Gradients, Precision, RefNetParams};
use super::tensor::Real;
use super::RefNetError;
use crate::dataset::PreferenceExample;
use crate::packer::pack;

/// Agreement bounds between the packed and unpacked pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub logit_abs: f64,
    pub loss_abs: f64,
    pub grad_rel: f64,
}

impl Tolerances {
    pub fn for_precision(precision: Precision) -> Self {
        match precision {
            Precision::Fp64 => Self {
                logit_abs: 1e-9,
                loss_abs: 1e-9,
                grad_rel: 1e-8,
            },
            Precision::Fp32 => Self {
                logit_abs: 1e-4,
                loss_abs: 1e-4,
                grad_rel: 1e-3,
            },
        }
    }
}

/// Differences between the packed and unpacked pipelines on one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleEquivalence {
    pub example_id: String,
    pub k: usize,
    pub packed_len: usize,
    pub max_logit_diff: f64,
    pub max_logprob_diff: f64,
    pub max_reward_diff: f64,
    pub rm_loss: f64,
    pub rm_loss_diff: f64,
    pub dpo_loss: f64,
    pub dpo_loss_diff: f64,
    /// `max |g_packed - g_unpacked| / max |g_unpacked|`.
    pub rm_grad_rel_diff: Option<f64>,
    pub dpo_grad_rel_diff: Option<f64>,
}

impl ExampleEquivalence {
    pub fn passes(&self, tol: &Tolerances) -> bool {
        self.max_logit_diff <= tol.logit_abs
            && self.max_logprob_diff <= tol.loss_abs
            && self.max_reward_diff <= tol.loss_abs
            && self.rm_loss_diff <= tol.loss_abs
            && self.dpo_loss_diff <= tol.loss_abs
            && self.rm_grad_rel_diff.is_none_or(|d| d <= tol.grad_rel)
            && self.dpo_grad_rel_diff.is_none_or(|d| d <= tol.grad_rel)
    }
}

fn grad_rel_diff<T: Real>(packed: &Gradients<T>, unpacked: &Gradients<T>) -> f64 {
    let scale = unpacked.max_abs().as_f64();
    let diff = packed.max_abs_diff(unpacked).as_f64();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .fold(0.0, f64::max)
}

/// Runs both pipelines on `example`. `leaky` swaps the block mask for plain
/// causal attention over the packed sequence (negative control).
pub fn compare_example<T: Real>(
    policy: &RefNetParams<T>,
    reference: &RefNetParams<T>,
    example: &PreferenceExample,
    beta: f64,
    with_gradients: bool,
    leaky: bool,
) -> Result<ExampleEquivalence, RefNetError> {
    let layout = pack(example);
    let packed_pipeline = if leaky {
        Pipeline::LeakyPacked
    } else {
        Pipeline::Packed
    };
    let leaky_mask = LeakyPackedMask(&layout);
    let packed_req = ForwardRequest {
        tokens: &layout.tokens,
        position_ids: &layout.position_ids,
        mask: if leaky { &leaky_mask } else { &layout },
    };
    let packed = forward(policy, &packed_req)?;

    let l_in = example.prompt_len();
    let mut max_logit_diff = 0.0f64;
    for (k, response) in example.responses.iter().enumerate() {
        let mut row = example.prompt.clone();
        row.extend_from_slice(response);
        let unpacked = forward_causal(policy, &row)?;
        let seg = layout.response_segment(k);
        for pos in 0..row.len() {
            let packed_pos = if pos < l_in {
                pos
            } else {
                seg.start + pos - l_in
            };
            let d = max_abs_diff(unpacked.logits.row(pos), packed.logits.row(packed_pos));
            max_logit_diff = max_logit_diff.max(d);
        }
    }

    let (lp_p, rw_p) = response_scores(policy, example, packed_pipeline)?;
    let (lp_u, rw_u) = response_scores(policy, example, Pipeline::Unpacked)?;

    let beta_t = T::from_f64_lossy(beta);
    let dpo_p = dpo_loss_and_grad(
        policy,
        reference,
        example,
        beta_t,
        LossOptions::dpo(packed_pipeline),
    )?;
    let dpo_u = dpo_loss_and_grad(
        policy,
        reference,
        example,
        beta_t,
        LossOptions::dpo(Pipeline::Unpacked),
    )?;

    let has_reward = policy.tensors.reward_weight.is_some();
    let (rm_loss, rm_loss_diff, rm_grad_rel_diff) = if has_reward {
        let (lp, gp) = rm_loss_and_grad(policy, example, LossOptions::rm(packed_pipeline))?;
        let (lu, gu) = rm_loss_and_grad(policy, example, LossOptions::rm(Pipeline::Unpacked))?;
        (
            lp.as_f64(),
            (lp - lu).abs().as_f64(),
            with_gradients.then(|| grad_rel_diff(&gp, &gu)),
        )
    } else {
        (f64::NAN, 0.0, None)
    };

    Ok(ExampleEquivalence {
        example_id: example.example_id.clone(),
        k: example.num_responses(),
        packed_len: layout.len(),
        max_logit_diff,
        max_logprob_diff: max_abs_diff(&lp_p, &lp_u),
        max_reward_diff: max_abs_diff(&rw_p, &rw_u),
        rm_loss,
        rm_loss_diff,
        dpo_loss: dpo_p.loss.as_f64(),
        dpo_loss_diff: (dpo_p.loss - dpo_u.loss).abs().as_f64(),
        rm_grad_rel_diff,
        dpo_grad_rel_diff: with_gradients.then(|| grad_rel_diff(&dpo_p.policy, &dpo_u.policy)),
    })
}

/// One finite-difference probe of a single parameter coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Gradients below this magnitude are compared on an absolute scale, where
/// central differences are dominated by cancellation error.
pub const FD_REL_FLOOR: f64 = 1e-3;

/// One random coordinate per parameter tensor. Embedding rows are drawn from
/// the token ids and positions the example actually uses, so every probe has
/// a chance of a nonzero gradient.
pub fn sample_coordinates<T: Real>(
    params: &RefNetParams<T>,
    example: &PreferenceExample,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = pack(example);
    params
        .tensors
        .named()
        .iter()
        .enumerate()
        .map(|(t, (name, m))| {
            let row = match name.as_str() {
                "token_embedding" => layout.tokens[rng.random_range(0..layout.len())] as usize,
                "position_embedding" => layout.position_ids[rng.random_range(0..layout.len())],
                _ => rng.random_range(0..m.rows),
            };
            (t, row * m.cols + rng.random_range(0..m.cols))
        })
        .collect()
}

/// Central differences of `loss` at the given `(tensor, element)` coordinates.
pub fn finite_difference_check(
    params: &RefNetParams<f64>,
    analytic: &Gradients<f64>,
    coords: &[(usize, usize)],
    step: f64,
    loss: impl Fn(&RefNetParams<f64>) -> Result<f64, RefNetError> + Sync,
) -> Result<Vec<FdSample>, RefNetError> {
    use rayon::prelude::*;
    let names: Vec<String> = params.tensors.named().into_iter().map(|(n, _)| n).collect();
    let analytic_values: Vec<&super::tensor::Matrix<f64>> =
        analytic.named().into_iter().map(|(_, m)| m).collect();
    coords
        .par_iter()
        .map(|&(t, i)| {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut slots = p.tensors.named_mut();
                slots[t].1.data[i] += delta;
                drop(slots);
                loss(&p)
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = analytic_values[t].data[i];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_REL_FLOOR);
            Ok(FdSample {
                tensor: names[t].clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refnet::loss::{dpo_loss, rm_loss};
    use crate::refnet::params::{init_params, RefNetConfig};

    fn setup() -> (RefNetParams<f64>, RefNetParams<f64>, PreferenceExample) {
        let config = RefNetConfig {
            d_model: 16,
            d_ff: 32,
            max_position: 64,
            ..RefNetConfig::default()
        };
        let e = PreferenceExample::new(
            "eq",
            vec![3, 1, 4, 1, 5],
            vec![vec![9, 2, 6], vec![5, 3], vec![5, 8, 9, 7]],
        )
        .unwrap();
        (
            init_params(&config, 1).unwrap(),
            init_params(&config, 2).unwrap(),
            e,
        )
    }

    #[test]
    fn packed_matches_unpacked() {
        let (p, r, e) = setup();
        let eq = compare_example(&p, &r, &e, 0.1, true, false).unwrap();
        assert!(
            eq.passes(&Tolerances::for_precision(Precision::Fp64)),
            "{eq:?}"
        );
    }

    #[test]
    fn leaky_mask_breaks_equivalence() {
        let (p, r, e) = setup();
        let eq = compare_example(&p, &r, &e, 0.1, false, true).unwrap();
        assert!(!eq.passes(&Tolerances::for_precision(Precision::Fp64)));
        assert!(eq.max_logit_diff > 1e-6);
    }

    #[test]
    fn finite_differences_agree() {
        let (p, r, e) = setup();
        let opts = LossOptions::dpo(Pipeline::Packed);
        let grads = dpo_loss_and_grad(&p, &r, &e, 0.5, opts).unwrap();
        let coords = sample_coordinates(&p, &e, 3);
        let samples = finite_difference_check(&p, &grads.policy, &coords, 1e-6, |q| {
            dpo_loss(q, &r, &e, 0.5, opts)
        })
        .unwrap();
        for s in &samples {
            assert!(s.rel_error <= 1e-5, "{s:?}");
        }

        let opts = LossOptions::rm(Pipeline::Packed);
        let (_, grads) = rm_loss_and_grad(&p, &e, opts).unwrap();
        let samples =
            finite_difference_check(&p, &grads, &coords, 1e-6, |q| rm_loss(q, &e, opts)).unwrap();
        for s in &samples {
            assert!(s.rel_error <= 1e-5, "{s:?}");
        }
    }
}
