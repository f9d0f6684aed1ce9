//! Network configuration, parameter containers, initialization and
//! checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Matrix, Real};
use super::RefNetError;
use crate::dataset::DEFAULT_VOCAB_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    #[default]
    Fp64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    #[default]
    LearnedAbsolute,
    Rotary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefNetConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_position: usize,
    pub precision: Precision,
    pub positional_scheme: PositionalScheme,
    /// Adds the scalar reward head used by the reward-model loss.
    pub reward_head: bool,
    pub rope_base: f64,
}

impl Default for RefNetConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_position: 512,
            precision: Precision::Fp64,
            positional_scheme: PositionalScheme::LearnedAbsolute,
            reward_head: true,
            rope_base: 10_000.0,
        }
    }
}

impl RefNetConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), RefNetError> {
        let bad = |m: String| Err(RefNetError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("vocab_size, d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.positional_scheme == PositionalScheme::Rotary && !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "rotary needs an even head dim, got {}",
                self.head_dim()
            ));
        }
        if self.max_position == 0 {
            return bad("max_position must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count for this architecture.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let positions = match self.positional_scheme {
            PositionalScheme::LearnedAbsolute => self.max_position * d,
            PositionalScheme::Rotary => 0,
        };
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let reward = if self.reward_head { d + 1 } else { 0 };
        v * d + positions + self.n_layers * per_layer + 2 * d + (d * v + v) + reward
    }
}

/// Per-layer tensors, generic over the stored item so the same layout holds
/// weights (`Matrix<T>`), gradients, or graph node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<M> {
    pub ln1_gamma: M,
    pub ln1_beta: M,
    pub wq: M,
    pub bq: M,
    pub wk: M,
    pub bk: M,
    pub wv: M,
    pub bv: M,
    pub wo: M,
    pub bo: M,
    pub ln2_gamma: M,
    pub ln2_beta: M,
    pub w1: M,
    pub b1: M,
    pub w2: M,
    pub b2: M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<M> {
    pub token_embedding: M,
    pub position_embedding: Option<M>,
    pub layers: Vec<LayerParams<M>>,
    pub final_gamma: M,
    pub final_beta: M,
    pub lm_head: M,
    pub lm_bias: M,
    pub reward_weight: Option<M>,
    pub reward_bias: Option<M>,
}

/// Parameters with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RefNetParams<T> {
    pub config: RefNetConfig,
    pub tensors: Params<Matrix<T>>,
}

/// Parameter-shaped gradients.
pub type Gradients<T> = Params<Matrix<T>>;

impl<M> LayerParams<M> {
    fn named(&self) -> [(&'static str, &M); 16] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut M); 16] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("mlp.w1", &mut self.w1),
            ("mlp.b1", &mut self.b1),
            ("mlp.w2", &mut self.w2),
            ("mlp.b2", &mut self.b2),
        ]
    }

    fn map<N>(&self, f: &mut impl FnMut(&str, &M) -> N) -> LayerParams<N> {
        LayerParams {
            ln1_gamma: f("ln1.gamma", &self.ln1_gamma),
            ln1_beta: f("ln1.beta", &self.ln1_beta),
            wq: f("attn.wq", &self.wq),
            bq: f("attn.bq", &self.bq),
            wk: f("attn.wk", &self.wk),
            bk: f("attn.bk", &self.bk),
            wv: f("attn.wv", &self.wv),
            bv: f("attn.bv", &self.bv),
            wo: f("attn.wo", &self.wo),
            bo: f("attn.bo", &self.bo),
            ln2_gamma: f("ln2.gamma", &self.ln2_gamma),
            ln2_beta: f("ln2.beta", &self.ln2_beta),
            w1: f("mlp.w1", &self.w1),
            b1: f("mlp.b1", &self.b1),
            w2: f("mlp.w2", &self.w2),
            b2: f("mlp.b2", &self.b2),
        }
    }
}

impl<M> Params<M> {
    /// All tensors with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &M)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        if let Some(p) = &self.position_embedding {
            out.push(("position_embedding".into(), p));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .named()
                    .into_iter()
                    .map(|(n, m)| (format!("layers.{i}.{n}"), m)),
            );
        }
        out.push(("final_norm.gamma".into(), &self.final_gamma));
        out.push(("final_norm.beta".into(), &self.final_beta));
        out.push(("lm_head.weight".into(), &self.lm_head));
        out.push(("lm_head.bias".into(), &self.lm_bias));
        if let Some(w) = &self.reward_weight {
            out.push(("reward_head.weight".into(), w));
        }
        if let Some(b) = &self.reward_bias {
            out.push(("reward_head.bias".into(), b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut M)> {
        let mut out = vec![("token_embedding".to_string(), &mut self.token_embedding)];
        if let Some(p) = &mut self.position_embedding {
            out.push(("position_embedding".into(), p));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("layers.{i}.{n}"), m)),
            );
        }
        out.push(("final_norm.gamma".into(), &mut self.final_gamma));
        out.push(("final_norm.beta".into(), &mut self.final_beta));
        out.push(("lm_head.weight".into(), &mut self.lm_head));
        out.push(("lm_head.bias".into(), &mut self.lm_bias));
        if let Some(w) = &mut self.reward_weight {
            out.push(("reward_head.weight".into(), w));
        }
        if let Some(b) = &mut self.reward_bias {
            out.push(("reward_head.bias".into(), b));
        }
        out
    }

    /// Structure-preserving map; `f` receives each tensor's dotted name.
    pub fn map<N>(&self, mut f: impl FnMut(&str, &M) -> N) -> Params<N> {
        let token_embedding = f("token_embedding", &self.token_embedding);
        let position_embedding = self
            .position_embedding
            .as_ref()
            .map(|p| f("position_embedding", p));
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let prefix = format!("layers.{i}.");
                l.map(&mut |n, m| f(&format!("{prefix}{n}"), m))
            })
            .collect();
        Params {
            token_embedding,
            position_embedding,
            layers,
            final_gamma: f("final_norm.gamma", &self.final_gamma),
            final_beta: f("final_norm.beta", &self.final_beta),
            lm_head: f("lm_head.weight", &self.lm_head),
            lm_bias: f("lm_head.bias", &self.lm_bias),
            reward_weight: self
                .reward_weight
                .as_ref()
                .map(|w| f("reward_head.weight", w)),
            reward_bias: self.reward_bias.as_ref().map(|b| f("reward_head.bias", b)),
        }
    }
}

impl<T: Real> Params<Matrix<T>> {
    pub fn zeros_like(&self) -> Self {
        self.map(|_, m| Matrix::zeros(m.rows, m.cols))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn max_abs(&self) -> T {
        self.named()
            .iter()
            .fold(T::zero(), |acc, (_, m)| acc.max(m.max_abs()))
    }

    pub fn is_all_zero(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, m)| m.data.iter().all(|v| *v == T::zero()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        let others = other.named();
        for ((_, mine), (_, theirs)) in self.named_mut().into_iter().zip(others) {
            mine.add_assign(theirs);
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.named()
            .into_iter()
            .zip(other.named())
            .flat_map(|((_, a), (_, b))| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| (x - y).abs())
                    .collect::<Vec<_>>()
            })
            .fold(T::zero(), T::max)
    }
}

/// Sums gradients with pairwise reduction so the result does not depend on
/// accumulation order beyond pairwise rounding.
pub fn sum_gradients<T: Real>(grads: &[Gradients<T>]) -> Option<Gradients<T>> {
    match grads {
        [] => None,
        [only] => Some(only.clone()),
        _ => {
            let (left, right) = grads.split_at(grads.len() / 2);
            let mut l = sum_gradients(left)?;
            l.add_assign(&sum_gradients(right)?);
            Some(l)
        }
    }
}

impl<T: Real> RefNetParams<T> {
    pub fn cast<U: Real>(&self) -> RefNetParams<U> {
        RefNetParams {
            config: self.config.clone(),
            tensors: self.tensors.map(|_, m| m.cast()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.num_scalars()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.named().iter().all(|(_, m)| m.all_finite())
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix<f64> {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
}

/// Deterministic scaled-uniform initialization. Weights use
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; norm gains start near 1 and biases
/// near 0 with small jitter so every tensor carries gradient signal.
pub fn init_params(config: &RefNetConfig, seed: u64) -> Result<RefNetParams<f64>, RefNetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let wd = 1.0 / (d as f64).sqrt();
    let wf = 1.0 / (f as f64).sqrt();
    let gain = |rng: &mut ChaCha8Rng| uniform(rng, 1, d, 0.1).map(|x| 1.0 + x);
    let bias = |rng: &mut ChaCha8Rng, n: usize| uniform(rng, 1, n, 0.05);

    let token_embedding = uniform(&mut rng, v, d, 1.0);
    let position_embedding = match config.positional_scheme {
        PositionalScheme::LearnedAbsolute => Some(uniform(&mut rng, config.max_position, d, 0.5)),
        PositionalScheme::Rotary => None,
    };
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gamma: gain(&mut rng),
            ln1_beta: bias(&mut rng, d),
            wq: uniform(&mut rng, d, d, wd),
            bq: bias(&mut rng, d),
            wk: uniform(&mut rng, d, d, wd),
            bk: bias(&mut rng, d),
            wv: uniform(&mut rng, d, d, wd),
            bv: bias(&mut rng, d),
            wo: uniform(&mut rng, d, d, wd),
            bo: bias(&mut rng, d),
            ln2_gamma: gain(&mut rng),
            ln2_beta: bias(&mut rng, d),
            w1: uniform(&mut rng, d, f, wd),
            b1: bias(&mut rng, f),
            w2: uniform(&mut rng, f, d, wf),
            b2: bias(&mut rng, d),
        })
        .collect();
    let final_gamma = gain(&mut rng);
    let final_beta = bias(&mut rng, d);
    let lm_head = uniform(&mut rng, d, v, wd);
    let lm_bias = bias(&mut rng, v);
    let (reward_weight, reward_bias) = if config.reward_head {
        (Some(uniform(&mut rng, d, 1, wd)), Some(bias(&mut rng, 1)))
    } else {
        (None, None)
    };
    Ok(RefNetParams {
        config: config.clone(),
        tensors: Params {
            token_embedding,
            position_embedding,
            layers,
            final_gamma,
            final_beta,
            lm_head,
            lm_bias,
            reward_weight,
            reward_bias,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    config: RefNetConfig,
    tensors: Vec<TensorRecord>,
}

/// JSON checkpoint of named tensors with shapes.
pub fn params_to_json<T: Real>(params: &RefNetParams<T>) -> serde_json::Value {
    let tensors = params
        .tensors
        .named()
        .into_iter()
        .map(|(name, m)| TensorRecord {
            name,
            shape: [m.rows, m.cols],
            data: m.data.iter().map(|v| v.as_f64()).collect(),
        })
        .collect();
    serde_json::to_value(Checkpoint {
        config: params.config.clone(),
        tensors,
    })
    .expect("checkpoint serializes")
}

pub fn params_from_json(value: &serde_json::Value) -> Result<RefNetParams<f64>, RefNetError> {
    let ckpt: Checkpoint = serde_json::from_value(value.clone())
        .map_err(|e| RefNetError::Checkpoint(e.to_string()))?;
    // Build the expected structure, then fill it by name.
    let mut params = init_params(&ckpt.config, 0)?;
    let mut slots = params.tensors.named_mut();
    if slots.len() != ckpt.tensors.len() {
        return Err(RefNetError::Checkpoint(format!(
            "expected {} tensors, found {}",
            slots.len(),
            ckpt.tensors.len()
        )));
    }
    for ((name, slot), record) in slots.iter_mut().zip(ckpt.tensors) {
        if *name != record.name || [slot.rows, slot.cols] != record.shape {
            return Err(RefNetError::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                record.name,
                record.shape,
                [slot.rows, slot.cols]
            )));
        }
        if record.data.len() != slot.len() {
            return Err(RefNetError::Checkpoint(format!(
                "tensor {name} has {} values, expected {}",
                record.data.len(),
                slot.len()
            )));
        }
        slot.data = record.data;
    }
    drop(slots);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = RefNetConfig::default();
        assert_eq!(init_params(&c, 3).unwrap(), init_params(&c, 3).unwrap());
        assert_ne!(init_params(&c, 3).unwrap(), init_params(&c, 4).unwrap());
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        for scheme in [PositionalScheme::LearnedAbsolute, PositionalScheme::Rotary] {
            let c = RefNetConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 2,
                d_ff: 16,
                max_position: 40,
                positional_scheme: scheme,
                ..RefNetConfig::default()
            };
            let p = init_params(&c, 0).unwrap();
            assert_eq!(p.parameter_count(), c.parameter_count());
        }
        // Hand count for vocab 257, d 8, ff 16, 2 layers, 40 learned positions:
        // 2056 + 320 + 2 * 600 + 16 + 2313 + 9.
        let c = RefNetConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_position: 40,
            ..RefNetConfig::default()
        };
        assert_eq!(c.parameter_count(), 5914);
    }

    #[test]
    fn invalid_configs() {
        let c = RefNetConfig {
            d_model: 10,
            n_heads: 3,
            ..RefNetConfig::default()
        };
        assert!(matches!(init_params(&c, 0), Err(RefNetError::Config(_))));
        let c = RefNetConfig {
            d_model: 6,
            n_heads: 2,
            positional_scheme: PositionalScheme::Rotary,
            ..RefNetConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn reward_head_present_iff_enabled() {
        let mut c = RefNetConfig::default();
        assert!(init_params(&c, 0).unwrap().tensors.reward_weight.is_some());
        c.reward_head = false;
        let p = init_params(&c, 0).unwrap();
        assert!(p.tensors.reward_weight.is_none() && p.tensors.reward_bias.is_none());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = init_params(&RefNetConfig::default(), 9).unwrap();
        let json = params_to_json(&p);
        assert_eq!(params_from_json(&json).unwrap(), p);

        let mut broken = json.clone();
        broken["tensors"][0]["shape"] = serde_json::json!([1, 1]);
        assert!(params_from_json(&broken).is_err());
    }

    #[test]
    fn pairwise_gradient_sum() {
        let p = init_params(&RefNetConfig::default(), 1).unwrap().tensors;
        let total = sum_gradients(&[p.clone(), p.clone(), p.clone()]).unwrap();
        let expected = p.map(|_, m| m.map(|v| v + v + v));
        assert!(total.max_abs_diff(&expected) < 1e-12);
        assert!(sum_gradients::<f64>(&[]).is_none());
    }
}
