//! Response log-probabilities, rewards, and the reward-model and DPO losses,
//! evaluated either on the packed layout or on `K` unpacked causal rows.
//!
//! Both pipelines record onto the same autodiff tape, so gradients come from
//! one code path and only the data layout differs.

use serde::{Deserialize, Serialize};

use super::graph::{log_sigmoid, Graph, NodeId};
use super::model::{
    build_forward, load_params, AttentionMask, CausalMask, ForwardRequest, LeakyPackedMask,
};
use super::params::{Gradients, Params, RefNetParams};
use super::tensor::{Matrix, Real};
use super::RefNetError;
use crate::dataset::PreferenceExample;
use crate::packer::{pack, segment_logprob_slices, PackedLayout};

/// How a preference example is laid out for the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    /// One packed sequence with the block mask.
    Packed,
    /// `K` causal rows `prompt ++ response_k`.
    Unpacked,
    /// Packed sequence with plain causal attention (responses see siblings).
    /// Negative control only.
    LeakyPacked,
}

/// How `K > 2` ranked responses reduce to pairwise terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankReduction {
    /// Mean over every `(better, worse)` pair.
    AllPairs,
    /// Most preferred vs. least preferred only.
    BestVsWorst,
}

impl RankReduction {
    /// `(winner, loser)` response indices; responses ascend in preference.
    pub fn pairs(self, k: usize) -> Vec<(usize, usize)> {
        match self {
            RankReduction::BestVsWorst => vec![(k - 1, 0)],
            RankReduction::AllPairs => (0..k)
                .flat_map(|l| (l + 1..k).map(move |w| (w, l)))
                .collect(),
        }
    }
}

/// Graph nodes for one response.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ResponseNodes {
    pub logprob: NodeId,
    pub reward: Option<NodeId>,
}

fn reward_node<T: Real>(
    g: &mut Graph<T>,
    p: &Params<NodeId>,
    hidden: NodeId,
    row: usize,
) -> Result<NodeId, RefNetError> {
    let (Some(w), Some(b)) = (p.reward_weight, p.reward_bias) else {
        return Err(RefNetError::Config("reward head is disabled".into()));
    };
    let h = g.select_row(hidden, row);
    let r = g.matmul(h, w);
    Ok(g.add(r, b))
}

/// Records log-probabilities (and rewards, if requested) for every response.
pub(crate) fn build_response_nodes<T: Real>(
    g: &mut Graph<T>,
    p: &Params<NodeId>,
    params: &RefNetParams<T>,
    example: &PreferenceExample,
    pipeline: Pipeline,
    with_reward: bool,
) -> Result<Vec<ResponseNodes>, RefNetError> {
    let config = &params.config;
    match pipeline {
        Pipeline::Packed | Pipeline::LeakyPacked => {
            let layout = pack(example);
            let leaky = LeakyPackedMask(&layout);
            let mask: &dyn AttentionMask = match pipeline {
                Pipeline::LeakyPacked => &leaky,
                _ => &layout,
            };
            let req = ForwardRequest {
                tokens: &layout.tokens,
                position_ids: &layout.position_ids,
                mask,
            };
            let nodes = build_forward(g, p, config, &req)?;
            let logp = g.log_softmax(nodes.logits);
            segment_logprob_slices(&layout)
                .into_iter()
                .map(|slice| {
                    let picks = slice
                        .pairs()
                        .map(|(pred, tgt)| (pred, layout.tokens[tgt] as usize))
                        .collect();
                    let logprob = g.pick_sum(logp, picks);
                    let reward = if with_reward {
                        let last = slice.target_positions.end - 1;
                        Some(reward_node(g, p, nodes.hidden, last)?)
                    } else {
                        None
                    };
                    Ok(ResponseNodes { logprob, reward })
                })
                .collect()
        }
        Pipeline::Unpacked => {
            let l_in = example.prompt_len();
            example
                .responses
                .iter()
                .map(|response| {
                    let mut tokens = example.prompt.clone();
                    tokens.extend_from_slice(response);
                    let positions: Vec<usize> = (0..tokens.len()).collect();
                    let mask = CausalMask(tokens.len());
                    let req = ForwardRequest {
                        tokens: &tokens,
                        position_ids: &positions,
                        mask: &mask,
                    };
                    let nodes = build_forward(g, p, config, &req)?;
                    let logp = g.log_softmax(nodes.logits);
                    let picks = response
                        .iter()
                        .enumerate()
                        .map(|(j, &t)| (l_in - 1 + j, t as usize))
                        .collect();
                    let logprob = g.pick_sum(logp, picks);
                    let reward = if with_reward {
                        Some(reward_node(g, p, nodes.hidden, tokens.len() - 1)?)
                    } else {
                        None
                    };
                    Ok(ResponseNodes { logprob, reward })
                })
                .collect()
        }
    }
}

/// `log pi(y_k | x)` read from packed logits.
pub fn response_logprob<T: Real>(logits: &Matrix<T>, layout: &PackedLayout, k: usize) -> T {
    let slice = &segment_logprob_slices(layout)[k];
    slice
        .pairs()
        .map(|(pred, tgt)| {
            let row = logits.row(pred);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row[layout.tokens[tgt] as usize] - lse
        })
        .sum()
}

/// Reward head applied to the final hidden state of response `k`'s last token.
pub fn reward_score<T: Real>(
    hidden: &Matrix<T>,
    params: &RefNetParams<T>,
    layout: &PackedLayout,
    k: usize,
) -> Result<T, RefNetError> {
    let (Some(w), Some(b)) = (&params.tensors.reward_weight, &params.tensors.reward_bias) else {
        return Err(RefNetError::Config("reward head is disabled".into()));
    };
    let row = hidden.row(layout.response_segment(k).end() - 1);
    Ok(row.iter().zip(&w.data).map(|(&h, &wv)| h * wv).sum::<T>() + b.data[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    pub pipeline: Pipeline,
    pub reduction: RankReduction,
}

impl LossOptions {
    pub fn rm(pipeline: Pipeline) -> Self {
        Self {
            pipeline,
            reduction: RankReduction::AllPairs,
        }
    }

    pub fn dpo(pipeline: Pipeline) -> Self {
        Self {
            pipeline,
            reduction: RankReduction::BestVsWorst,
        }
    }
}

/// Mean of `-log sigmoid(margin)` over pairwise margins.
fn pairwise_loss<T: Real>(g: &mut Graph<T>, margins: &[NodeId]) -> NodeId {
    let terms: Vec<NodeId> = margins.iter().map(|&m| g.log_sigmoid(m)).collect();
    let total = g.sum_all(&terms);
    let n = T::from_usize(terms.len()).unwrap();
    g.scale(total, -T::one() / n)
}

fn build_rm_loss<T: Real>(
    g: &mut Graph<T>,
    p: &Params<NodeId>,
    params: &RefNetParams<T>,
    example: &PreferenceExample,
    opts: LossOptions,
) -> Result<NodeId, RefNetError> {
    let nodes = build_response_nodes(g, p, params, example, opts.pipeline, true)?;
    let margins: Vec<NodeId> = opts
        .reduction
        .pairs(nodes.len())
        .into_iter()
        .map(|(w, l)| g.sub(nodes[w].reward.unwrap(), nodes[l].reward.unwrap()))
        .collect();
    Ok(pairwise_loss(g, &margins))
}

fn build_dpo_loss<T: Real>(
    g: &mut Graph<T>,
    policy_ids: &Params<NodeId>,
    policy: &RefNetParams<T>,
    reference_ids: &Params<NodeId>,
    reference: &RefNetParams<T>,
    example: &PreferenceExample,
    beta: T,
    opts: LossOptions,
) -> Result<NodeId, RefNetError> {
    let pol = build_response_nodes(g, policy_ids, policy, example, opts.pipeline, false)?;
    let refs = build_response_nodes(g, reference_ids, reference, example, opts.pipeline, false)?;
    // The reference model is frozen.
    let ref_lp: Vec<NodeId> = refs.iter().map(|r| g.detach(r.logprob)).collect();
    let margins: Vec<NodeId> = opts
        .reduction
        .pairs(pol.len())
        .into_iter()
        .map(|(w, l)| {
            let ratio_w = g.sub(pol[w].logprob, ref_lp[w]);
            let ratio_l = g.sub(pol[l].logprob, ref_lp[l]);
            let diff = g.sub(ratio_w, ratio_l);
            g.scale(diff, beta)
        })
        .collect();
    Ok(pairwise_loss(g, &margins))
}

fn collect_grads<T: Real>(
    ids: &Params<NodeId>,
    grads: &[Option<Matrix<T>>],
    params: &RefNetParams<T>,
) -> Result<Gradients<T>, RefNetError> {
    // `map` visits tensors in the same order as `named`.
    let mut order = ids.named().into_iter().map(|(_, &id)| id);
    let mut non_finite = None;
    let out = params.tensors.map(|name, m| {
        let id = order.next().expect("same structure");
        let g = grads[id]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(m.rows, m.cols));
        if non_finite.is_none() && !g.all_finite() {
            non_finite = Some(name.to_string());
        }
        g
    });
    match non_finite {
        Some(tensor) => Err(RefNetError::NonFiniteGradient { tensor }),
        None => Ok(out),
    }
}

/// Loss value and gradient for any loss recorded by `build` on a fresh tape.
pub fn gradient<T: Real>(
    params: &RefNetParams<T>,
    build: impl FnOnce(&mut Graph<T>, &Params<NodeId>) -> Result<NodeId, RefNetError>,
) -> Result<(T, Gradients<T>), RefNetError> {
    let mut g = Graph::new();
    let ids = load_params(&mut g, params);
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss);
    Ok((g.scalar(loss), collect_grads(&ids, &grads, params)?))
}

pub fn rm_loss<T: Real>(
    params: &RefNetParams<T>,
    example: &PreferenceExample,
    opts: LossOptions,
) -> Result<T, RefNetError> {
    let mut g = Graph::new();
    let ids = load_params(&mut g, params);
    let loss = build_rm_loss(&mut g, &ids, params, example, opts)?;
    Ok(g.scalar(loss))
}

pub fn rm_loss_and_grad<T: Real>(
    params: &RefNetParams<T>,
    example: &PreferenceExample,
    opts: LossOptions,
) -> Result<(T, Gradients<T>), RefNetError> {
    gradient(params, |g, ids| {
        build_rm_loss(g, ids, params, example, opts)
    })
}

/// Standard log-ratio form:
/// `-log sigmoid(beta * ((log pi(y_w) - log pi_ref(y_w)) - (log pi(y_l) - log pi_ref(y_l))))`.
pub fn dpo_loss<T: Real>(
    policy: &RefNetParams<T>,
    reference: &RefNetParams<T>,
    example: &PreferenceExample,
    beta: T,
    opts: LossOptions,
) -> Result<T, RefNetError> {
    Ok(dpo_loss_and_grad(policy, reference, example, beta, opts)?.loss)
}

#[derive(Debug, Clone)]
pub struct DpoGradients<T> {
    pub loss: T,
    pub policy: Gradients<T>,
    /// Always zero: the reference enters through a stop-gradient.
    pub reference: Gradients<T>,
}

pub fn dpo_loss_and_grad<T: Real>(
    policy: &RefNetParams<T>,
    reference: &RefNetParams<T>,
    example: &PreferenceExample,
    beta: T,
    opts: LossOptions,
) -> Result<DpoGradients<T>, RefNetError> {
    if !(beta > T::zero()) {
        return Err(RefNetError::Config("beta must be positive".into()));
    }
    if policy.config != reference.config {
        return Err(RefNetError::Config(
            "policy and reference configs differ".into(),
        ));
    }
    let mut g = Graph::new();
    let pol_ids = load_params(&mut g, policy);
    let ref_ids = load_params(&mut g, reference);
    let loss = build_dpo_loss(
        &mut g, &pol_ids, policy, &ref_ids, reference, example, beta, opts,
    )?;
    let grads = g.backward(loss);
    Ok(DpoGradients {
        loss: g.scalar(loss),
        policy: collect_grads(&pol_ids, &grads, policy)?,
        reference: collect_grads(&ref_ids, &grads, reference)?,
    })
}

/// Per-response log-probabilities and rewards (rewards empty without a
/// reward head).
pub fn response_scores<T: Real>(
    params: &RefNetParams<T>,
    example: &PreferenceExample,
    pipeline: Pipeline,
) -> Result<(Vec<T>, Vec<T>), RefNetError> {
    let with_reward = params.tensors.reward_weight.is_some();
    let mut g = Graph::new();
    let ids = load_params(&mut g, params);
    let nodes = build_response_nodes(&mut g, &ids, params, example, pipeline, with_reward)?;
    let logprobs = nodes.iter().map(|n| g.scalar(n.logprob)).collect();
    let rewards = nodes
        .iter()
        .filter_map(|n| n.reward.map(|r| g.scalar(r)))
        .collect();
    Ok((logprobs, rewards))
}

/// Scalar `-log sigmoid(x)` without a tape.
pub fn neg_log_sigmoid<T: Real>(x: T) -> T {
    -log_sigmoid(x)
}
