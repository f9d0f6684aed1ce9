//! Decoder-only transformer forward pass with arbitrary boolean attention
//! masks and explicit position ids.
//!
//! Pre-norm blocks: `x += attn(ln1(x))`, `x += mlp(ln2(x))`, then a final
//! layer norm feeding the LM head and the optional scalar reward head.

use std::sync::Arc;

use super::graph::{Graph, NodeId};
use super::params::{Params, PositionalScheme, RefNetConfig, RefNetParams};
use super::tensor::{Matrix, Real};
use super::RefNetError;
use crate::dataset::TokenId;
use crate::packer::{render_dense_mask, PackedLayout};

/// Query/key admissibility for attention.
pub trait AttentionMask: Sync {
    fn len(&self) -> usize;

    fn allows(&self, q: usize, k: usize) -> bool;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major dense form.
    fn dense(&self) -> Vec<bool> {
        let n = self.len();
        (0..n * n).map(|i| self.allows(i / n, i % n)).collect()
    }
}

/// Standard lower-triangular causal mask.
#[derive(Debug, Clone, Copy)]
pub struct CausalMask(pub usize);

impl AttentionMask for CausalMask {
    fn len(&self) -> usize {
        self.0
    }

    fn allows(&self, q: usize, k: usize) -> bool {
        k <= q
    }
}

impl AttentionMask for PackedLayout {
    fn len(&self) -> usize {
        self.tokens.len()
    }

    fn allows(&self, q: usize, k: usize) -> bool {
        crate::packer::mask_allows(self, q, k).unwrap_or(false)
    }

    fn dense(&self) -> Vec<bool> {
        render_dense_mask(self).into_iter().flatten().collect()
    }
}

/// Arbitrary dense mask, `rows[q][k]`.
#[derive(Debug, Clone)]
pub struct DenseMask(pub Vec<Vec<bool>>);

impl AttentionMask for DenseMask {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn allows(&self, q: usize, k: usize) -> bool {
        self.0[q][k]
    }
}

/// Packed mask with cross-response leakage: plain causal attention over the
/// packed sequence. Used only as a negative control for verification.
#[derive(Debug, Clone, Copy)]
pub struct LeakyPackedMask<'a>(pub &'a PackedLayout);

impl AttentionMask for LeakyPackedMask<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn allows(&self, q: usize, k: usize) -> bool {
        k <= q
    }
}

pub struct ForwardRequest<'a> {
    pub tokens: &'a [TokenId],
    pub position_ids: &'a [usize],
    pub mask: &'a dyn AttentionMask,
}

impl<'a> ForwardRequest<'a> {
    pub fn packed(layout: &'a PackedLayout) -> Self {
        Self {
            tokens: &layout.tokens,
            position_ids: &layout.position_ids,
            mask: layout,
        }
    }

    fn validate(&self, config: &RefNetConfig) -> Result<(), RefNetError> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(RefNetError::Request("empty token sequence".into()));
        }
        if self.position_ids.len() != n {
            return Err(RefNetError::Request(format!(
                "{} position ids for {n} tokens",
                self.position_ids.len()
            )));
        }
        if self.mask.len() != n {
            return Err(RefNetError::Request(format!(
                "mask of size {} for {n} tokens",
                self.mask.len()
            )));
        }
        if let Some(&t) = self
            .tokens
            .iter()
            .find(|&&t| t as usize >= config.vocab_size)
        {
            return Err(RefNetError::Request(format!(
                "token {t} outside vocabulary"
            )));
        }
        if config.positional_scheme == PositionalScheme::LearnedAbsolute {
            if let Some(&p) = self
                .position_ids
                .iter()
                .find(|&&p| p >= config.max_position)
            {
                return Err(RefNetError::Request(format!(
                    "position {p} exceeds max_position {}",
                    config.max_position
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `n x vocab` logits.
    pub logits: Matrix<T>,
    /// `n x d_model` final (post-norm) hidden states.
    pub hidden: Matrix<T>,
}

pub(crate) struct ForwardNodes {
    pub hidden: NodeId,
    pub logits: NodeId,
}

fn rotary_tables<T: Real>(
    positions: &[usize],
    head_dim: usize,
    base: f64,
) -> (Matrix<T>, Matrix<T>) {
    let half = head_dim / 2;
    let mut cos = Matrix::zeros(positions.len(), half);
    let mut sin = Matrix::zeros(positions.len(), half);
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
            let angle = p as f64 * freq;
            *cos.at_mut(r, i) = T::from_f64_lossy(angle.cos());
            *sin.at_mut(r, i) = T::from_f64_lossy(angle.sin());
        }
    }
    (cos, sin)
}

fn check_finite<T: Real>(g: &Graph<T>, node: NodeId, layer: usize) -> Result<(), RefNetError> {
    if g.value(node).all_finite() {
        Ok(())
    } else {
        Err(RefNetError::NonFinite { layer })
    }
}

/// Records the forward pass on `g` using parameter leaves `p`.
pub(crate) fn build_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Params<NodeId>,
    config: &RefNetConfig,
    req: &ForwardRequest<'_>,
) -> Result<ForwardNodes, RefNetError> {
    req.validate(config)?;
    let hd = config.head_dim();
    let mask = Arc::new(req.mask.dense());
    if let Some(q) = (0..req.tokens.len()).find(|&q| !mask[q * req.tokens.len() + q]) {
        return Err(RefNetError::Request(format!(
            "mask row {q} is not reflexive"
        )));
    }
    let rows: Vec<usize> = req.tokens.iter().map(|&t| t as usize).collect();

    let mut x = g.gather(p.token_embedding, &rows);
    let rope = match (config.positional_scheme, p.position_embedding) {
        (PositionalScheme::LearnedAbsolute, Some(table)) => {
            let pos = g.gather(table, req.position_ids);
            x = g.add(x, pos);
            None
        }
        (PositionalScheme::Rotary, _) => {
            let (c, s) = rotary_tables::<T>(req.position_ids, hd, config.rope_base);
            Some((Arc::new(c), Arc::new(s)))
        }
        (PositionalScheme::LearnedAbsolute, None) => {
            return Err(RefNetError::Config("missing position embedding".into()))
        }
    };
    check_finite(g, x, 0)?;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();

    for (l, layer) in p.layers.iter().enumerate() {
        let h = g.layer_norm(x, layer.ln1_gamma, layer.ln1_beta);
        let project = |g: &mut Graph<T>, w: NodeId, b: NodeId| {
            let m = g.matmul(h, w);
            g.add_row(m, b)
        };
        let q = project(g, layer.wq, layer.bq);
        let k = project(g, layer.wk, layer.bk);
        let v = project(g, layer.wv, layer.bv);
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let mut qh = g.slice_cols(q, head * hd, hd);
            let mut kh = g.slice_cols(k, head * hd, hd);
            let vh = g.slice_cols(v, head * hd, hd);
            if let Some((cos, sin)) = &rope {
                qh = g.rotary(qh, cos.clone(), sin.clone());
                kh = g.rotary(kh, cos.clone(), sin.clone());
            }
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.masked_softmax(scores, mask.clone());
            heads.push(g.matmul(weights, vh));
        }
        let merged = g.concat_cols(&heads);
        let attn = g.matmul(merged, layer.wo);
        let attn = g.add_row(attn, layer.bo);
        x = g.add(x, attn);

        let h2 = g.layer_norm(x, layer.ln2_gamma, layer.ln2_beta);
        let up = g.matmul(h2, layer.w1);
        let up = g.add_row(up, layer.b1);
        let act = g.gelu(up);
        let down = g.matmul(act, layer.w2);
        let down = g.add_row(down, layer.b2);
        x = g.add(x, down);
        check_finite(g, x, l + 1)?;
    }

    let hidden = g.layer_norm(x, p.final_gamma, p.final_beta);
    let logits = g.matmul(hidden, p.lm_head);
    let logits = g.add_row(logits, p.lm_bias);
    check_finite(g, logits, config.n_layers + 1)?;
    Ok(ForwardNodes { hidden, logits })
}

/// Adds every parameter tensor to `g` as a leaf.
pub(crate) fn load_params<T: Real>(g: &mut Graph<T>, params: &RefNetParams<T>) -> Params<NodeId> {
    params.tensors.map(|_, m| g.leaf(m.clone()))
}

pub fn forward<T: Real>(
    params: &RefNetParams<T>,
    req: &ForwardRequest<'_>,
) -> Result<ForwardOutput<T>, RefNetError> {
    let mut g = Graph::new();
    let ids = load_params(&mut g, params);
    let nodes = build_forward(&mut g, &ids, &params.config, req)?;
    Ok(ForwardOutput {
        logits: g.value(nodes.logits).clone(),
        hidden: g.value(nodes.hidden).clone(),
    })
}

/// Causal forward of one unpacked `prompt ++ response` row.
pub fn forward_causal<T: Real>(
    params: &RefNetParams<T>,
    tokens: &[TokenId],
) -> Result<ForwardOutput<T>, RefNetError> {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mask = CausalMask(tokens.len());
    forward(
        params,
        &ForwardRequest {
            tokens,
            position_ids: &positions,
            mask: &mask,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PreferenceExample;
    use crate::packer::pack;
    use crate::refnet::params::init_params;

    fn small(scheme: PositionalScheme) -> RefNetParams<f64> {
        let config = RefNetConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            max_position: 64,
            positional_scheme: scheme,
            ..RefNetConfig::default()
        };
        init_params(&config, 11).unwrap()
    }

    fn row_equal(a: &Matrix<f64>, ra: usize, b: &Matrix<f64>, rb: usize) -> bool {
        a.row(ra) == b.row(rb)
    }

    #[test]
    fn causal_perturbation_only_affects_later_positions() {
        let p = small(PositionalScheme::LearnedAbsolute);
        let tokens: Vec<TokenId> = vec![3, 14, 15, 92, 65, 35];
        let base = forward_causal(&p, &tokens).unwrap();
        let mut perturbed = tokens.clone();
        perturbed[3] = 200;
        let out = forward_causal(&p, &perturbed).unwrap();
        for q in 0..tokens.len() {
            let same = row_equal(&base.logits, q, &out.logits, q);
            assert_eq!(same, q < 3, "position {q}");
        }
    }

    #[test]
    fn responses_are_isolated_in_packed_forward() {
        for scheme in [PositionalScheme::LearnedAbsolute, PositionalScheme::Rotary] {
            let p = small(scheme);
            let e =
                PreferenceExample::new("iso", vec![1, 2, 3, 4], vec![vec![5, 6, 7], vec![8, 9]])
                    .unwrap();
            let layout = pack(&e);
            let base = forward(&p, &ForwardRequest::packed(&layout)).unwrap();
            let mut tampered = layout.clone();
            tampered.tokens[5] = 250; // inside response 0
            let out = forward(&p, &ForwardRequest::packed(&tampered)).unwrap();
            for q in 0..layout.len() {
                let same = row_equal(&base.logits, q, &out.logits, q);
                let depends = layout.allows(q, 5);
                assert_eq!(same, !depends, "{scheme:?} position {q}");
            }
        }
    }

    #[test]
    fn shifting_positions_changes_learned_logits() {
        let p = small(PositionalScheme::LearnedAbsolute);
        let tokens: Vec<TokenId> = vec![7, 8, 9];
        let mask = CausalMask(3);
        let a = forward(
            &p,
            &ForwardRequest {
                tokens: &tokens,
                position_ids: &[0, 1, 2],
                mask: &mask,
            },
        )
        .unwrap();
        let b = forward(
            &p,
            &ForwardRequest {
                tokens: &tokens,
                position_ids: &[5, 6, 7],
                mask: &mask,
            },
        )
        .unwrap();
        assert_ne!(a.logits, b.logits);
    }

    #[test]
    fn identical_responses_get_identical_logits() {
        let p = small(PositionalScheme::Rotary);
        let e =
            PreferenceExample::new("same", vec![1, 2, 3], vec![vec![4, 5], vec![4, 5]]).unwrap();
        let layout = pack(&e);
        let out = forward(&p, &ForwardRequest::packed(&layout)).unwrap();
        assert!(row_equal(&out.logits, 3, &out.logits, 5));
        assert!(row_equal(&out.logits, 4, &out.logits, 6));
    }

    #[test]
    fn request_validation() {
        let p = small(PositionalScheme::LearnedAbsolute);
        let mask = CausalMask(2);
        let bad_len = ForwardRequest {
            tokens: &[1, 2],
            position_ids: &[0],
            mask: &mask,
        };
        assert!(matches!(
            forward(&p, &bad_len),
            Err(RefNetError::Request(_))
        ));
        let bad_pos = ForwardRequest {
            tokens: &[1, 2],
            position_ids: &[0, 64],
            mask: &mask,
        };
        assert!(forward(&p, &bad_pos).is_err());
        let bad_tok = ForwardRequest {
            tokens: &[1, 300],
            position_ids: &[0, 1],
            mask: &mask,
        };
        assert!(forward(&p, &bad_tok).is_err());
        let not_reflexive = DenseMask(vec![vec![true, false], vec![true, false]]);
        let req = ForwardRequest {
            tokens: &[1, 2],
            position_ids: &[0, 1],
            mask: &not_reflexive,
        };
        assert!(forward(&p, &req).is_err());
    }

    #[test]
    fn non_finite_weights_are_reported_with_layer() {
        let mut p = small(PositionalScheme::LearnedAbsolute);
        p.tensors.layers[1].b2.data[0] = f64::NAN;
        let err = forward_causal(&p, &[1, 2, 3]).unwrap_err();
        assert!(matches!(err, RefNetError::NonFinite { layer: 2 }), "{err}");
    }
}
