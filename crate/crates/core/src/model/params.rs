use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{CctError, Result};
use crate::numerics::{Element, Tape, Tensor, Var};
use crate::rng::RngStream;

use super::config::{CctConfig, Pooling, PositionalEmbedding, TokenizerKind};
use super::tokenizer::TokenizerPlan;

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Truncated normal, σ = 0.02, cut at ±2σ.
    TruncNormal,
    /// Normal with σ = √(2 / fan_in); used for the ReLU tokenizer kernels.
    KaimingNormal {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, init: InitKind) -> Self {
        ParamSpec { name: name.into(), shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub const INIT_STD: f64 = 0.02;

/// Every parameter tensor, in declaration order. Shapes depend only on the
/// config and its tokenizer plan.
pub fn param_specs(config: &CctConfig, plan: &TokenizerPlan) -> Vec<ParamSpec> {
    use InitKind::*;
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let mut out = Vec::new();
    match config.tokenizer {
        TokenizerKind::Convolutional => {
            let k = config.conv_kernel;
            for (i, s) in plan.stages.iter().enumerate() {
                let fan_in = s.in_channels * k * k;
                out.push(ParamSpec::new(
                    format!("tokenizer.stage{i}.kernel"),
                    vec![s.channels, s.in_channels, k, k],
                    KaimingNormal { fan_in },
                ));
                out.push(ParamSpec::new(format!("tokenizer.stage{i}.bias"), vec![s.channels], Zeros));
            }
        }
        TokenizerKind::Patch => {
            let p = config.patch_size;
            out.push(ParamSpec::new("tokenizer.patch.weight", vec![config.in_channels * p * p, d], TruncNormal));
            out.push(ParamSpec::new("tokenizer.patch.bias", vec![d], Zeros));
        }
    }
    let mut seq = plan.sequence_length;
    if config.pooling == Pooling::ClassToken {
        out.push(ParamSpec::new("class_token", vec![d], TruncNormal));
        seq += 1;
    }
    if config.positional_embedding == PositionalEmbedding::Learnable {
        out.push(ParamSpec::new("positional.embedding", vec![seq, d], TruncNormal));
    }
    for b in 0..config.encoder_depth {
        let pre = format!("encoder.block{b}");
        out.push(ParamSpec::new(format!("{pre}.norm1.gamma"), vec![d], Ones));
        out.push(ParamSpec::new(format!("{pre}.norm1.beta"), vec![d], Zeros));
        out.push(ParamSpec::new(format!("{pre}.attn.qkv.weight"), vec![d, 3 * d], TruncNormal));
        out.push(ParamSpec::new(format!("{pre}.attn.qkv.bias"), vec![3 * d], Zeros));
        out.push(ParamSpec::new(format!("{pre}.attn.proj.weight"), vec![d, d], TruncNormal));
        out.push(ParamSpec::new(format!("{pre}.attn.proj.bias"), vec![d], Zeros));
        out.push(ParamSpec::new(format!("{pre}.norm2.gamma"), vec![d], Ones));
        out.push(ParamSpec::new(format!("{pre}.norm2.beta"), vec![d], Zeros));
        out.push(ParamSpec::new(format!("{pre}.mlp.fc1.weight"), vec![d, hidden], TruncNormal));
        out.push(ParamSpec::new(format!("{pre}.mlp.fc1.bias"), vec![hidden], Zeros));
        out.push(ParamSpec::new(format!("{pre}.mlp.fc2.weight"), vec![hidden, d], TruncNormal));
        out.push(ParamSpec::new(format!("{pre}.mlp.fc2.bias"), vec![d], Zeros));
    }
    out.push(ParamSpec::new("encoder.norm.gamma", vec![d], Ones));
    out.push(ParamSpec::new("encoder.norm.beta", vec![d], Zeros));
    if config.pooling == Pooling::Seqpool {
        out.push(ParamSpec::new("seqpool.attention.weight", vec![d, 1], TruncNormal));
        out.push(ParamSpec::new("seqpool.attention.bias", vec![1], Zeros));
    }
    out.push(ParamSpec::new("head.weight", vec![d, config.num_classes], TruncNormal));
    out.push(ParamSpec::new("head.bias", vec![config.num_classes], Zeros));
    out
}

/// True for parameter elements whose gradient is identically zero: the key
/// slice of each QKV bias and the SeqPool bias both add a constant to every
/// logit of a softmax. Finite differences on these only measure roundoff.
pub fn has_zero_gradient(name: &str, element: usize, embed_dim: usize) -> bool {
    (name.ends_with(".attn.qkv.bias") && (embed_dim..2 * embed_dim).contains(&element)) || name == "seqpool.attention.bias"
}

/// Parameter count of one encoder block, by closed form.
pub fn block_param_count(d: usize, mlp_ratio: usize) -> usize {
    let h = d * mlp_ratio;
    let qkv = 3 * (d * d + d);
    let proj = d * d + d;
    let norms = 4 * d;
    let mlp = (d * h + h) + (h * d + d);
    qkv + proj + norms + mlp
}

/// Total number of scalar parameters, from config arithmetic alone.
pub fn count_params(config: &CctConfig) -> Result<usize> {
    let plan = config.validate()?;
    let d = config.embed_dim;
    let tokenizer = match config.tokenizer {
        TokenizerKind::Convolutional => {
            let kk = config.conv_kernel * config.conv_kernel;
            plan.stages.iter().map(|s| s.channels * s.in_channels * kk + s.channels).sum::<usize>()
        }
        TokenizerKind::Patch => config.in_channels * config.patch_size * config.patch_size * d + d,
    };
    let class_token = usize::from(config.pooling == Pooling::ClassToken);
    let positional = match config.positional_embedding {
        PositionalEmbedding::Learnable => (plan.sequence_length + class_token) * d,
        _ => 0,
    };
    let pool = if config.pooling == Pooling::Seqpool { d + 1 } else { 0 };
    Ok(tokenizer
        + class_token * d
        + positional
        + config.encoder_depth * block_param_count(d, config.mlp_ratio)
        + 2 * d
        + pool
        + d * config.num_classes
        + config.num_classes)
}

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Element = f64> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams { tensors: IndexMap::new() }
    }
}

impl<T: Element> ModelParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Fails with a usage error unless names, order, and shapes match the specs.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.tensors.len() != specs.len() {
            return Err(CctError::Usage(format!("parameter set has {} tensors but the config needs {}", self.tensors.len(), specs.len())));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.tensors) {
            if spec.name != *name || spec.shape != t.shape() {
                return Err(CctError::Usage(format!(
                    "parameter {name} {:?} does not match config tensor {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Record every tensor on the tape. With `trainable` they become
    /// gradient-tracking leaves.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let mut t = v.clone().with_requires_grad(trainable);
                t.zero_grad();
                (k.clone(), tape.leaf(t))
            })
            .collect();
        BoundParams { vars }
    }

    /// Copy gradients from a tape back into a gradient map in declaration
    /// order. Parameters that received no gradient get zeros.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &BoundParams) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .map(|(k, v)| {
                bound.vars.get(k).and_then(|&var| tape.grad(var)).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); v.numel()])
            })
            .collect()
    }
}

/// Tape handles for a bound parameter set.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Bind names to vars the caller has already placed on a tape.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| CctError::Usage(format!("missing parameter {name}")))
    }
}

/// Fresh parameters. One forked stream per tensor, so adding or removing a
/// tensor does not reshuffle the others.
pub fn init_params<T: Element>(config: &CctConfig, rng: &RngStream) -> Result<ModelParams<T>> {
    let plan = config.validate()?;
    let mut params = ModelParams::new();
    for (idx, spec) in param_specs(config, &plan).into_iter().enumerate() {
        let mut r = rng.fork(idx as u64);
        let n = spec.numel();
        let data: Vec<T> = match spec.init {
            InitKind::Zeros => vec![T::zero(); n],
            InitKind::Ones => vec![T::one(); n],
            InitKind::TruncNormal => (0..n).map(|_| T::from_f64(r.truncated_normal(INIT_STD))).collect(),
            InitKind::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::from_f64(std * r.standard_normal())).collect()
            }
        };
        params.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;

    #[test]
    fn toy_block_count() {
        assert_eq!(block_param_count(4, 2), 172);
    }

    #[test]
    fn count_matches_init_for_each_variant() {
        let base = CctConfig::tiny_test();
        for v in [Variant::Cct, Variant::Cvt, Variant::VitLite, Variant::ConvClassToken] {
            for pos in [PositionalEmbedding::Sinusoidal, PositionalEmbedding::Learnable, PositionalEmbedding::None] {
                let c = CctConfig { positional_embedding: pos, ..base.with_variant(v) };
                let p: ModelParams = init_params(&c, &RngStream::new(3)).unwrap();
                assert_eq!(p.total_elements(), count_params(&c).unwrap(), "{v:?} {pos:?}");
            }
        }
    }

    #[test]
    fn init_deterministic_and_biases_zero() {
        let c = CctConfig::tiny_test();
        let a: ModelParams = init_params(&c, &RngStream::new(11)).unwrap();
        let b: ModelParams = init_params(&c, &RngStream::new(11)).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
        let other: ModelParams = init_params(&c, &RngStream::new(12)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn check_against_rejects_foreign_params() {
        let small = CctConfig::tiny_test();
        let big = CctConfig { embed_dim: 32, ..small.clone() };
        let p: ModelParams = init_params(&small, &RngStream::new(1)).unwrap();
        let plan = big.validate().unwrap();
        assert!(matches!(p.check_against(&param_specs(&big, &plan)), Err(CctError::Usage(_))));
    }
}
