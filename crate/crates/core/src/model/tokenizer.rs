use serde::Serialize;

use crate::error::{CctError, Result, StagePhase};
use crate::numerics::{window_output_extent, Element, Tape, Var};

use super::config::{CctConfig, TokenizerKind};
use super::params::BoundParams;

/// Spatial bookkeeping for one conv → ReLU → pool stage. Extents are `(h, w)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageRecord {
    pub in_extent: (usize, usize),
    pub post_conv_extent: (usize, usize),
    pub post_pool_extent: (usize, usize),
    pub in_channels: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenizerPlan {
    pub kind: TokenizerKind,
    /// Empty for the patch tokenizer.
    pub stages: Vec<StageRecord>,
    /// Final spatial grid `(h, w)`; tokens are its cells in row-major order.
    pub grid: (usize, usize),
    pub sequence_length: usize,
    pub token_dim: usize,
}

impl TokenizerPlan {
    /// Height trace `H0→conv→pool→conv→…`, e.g. `256→254→126`.
    pub fn height_trace(&self) -> String {
        let mut parts = Vec::new();
        if let Some(first) = self.stages.first() {
            parts.push(first.in_extent.0.to_string());
        }
        for s in &self.stages {
            parts.push(s.post_conv_extent.0.to_string());
            parts.push(s.post_pool_extent.0.to_string());
        }
        parts.join("→")
    }
}

/// Output channels of each tokenizer stage: doubling up to `embed_dim` at the
/// last stage, starting from `embed_dim / 2^(stages-1)` clamped below by the
/// stem minimum (and above by `embed_dim`).
pub fn channel_schedule(config: &CctConfig) -> Vec<usize> {
    let stages = config.tokenizer_stages;
    let d = config.embed_dim;
    (0..stages)
        .map(|i| {
            if i + 1 == stages {
                d
            } else {
                let shift = (stages - 1 - i).min(usize::BITS as usize - 1);
                (d >> shift).max(config.min_stem_channels).min(d)
            }
        })
        .collect()
}

/// Run the conv-then-pool extent recurrence and report the first stage that
/// collapses.
pub fn plan_tokenizer(config: &CctConfig) -> Result<TokenizerPlan> {
    let [h0, w0] = config.image_size;
    if h0 == 0 || w0 == 0 {
        return Err(CctError::Parameter(format!("image_size {h0}x{w0} has a zero extent")));
    }
    match config.tokenizer {
        TokenizerKind::Patch => {
            let p = config.patch_size;
            if p == 0 || h0 % p != 0 || w0 % p != 0 {
                return Err(CctError::Parameter(format!("image {h0}x{w0} is not divisible into {p}x{p} patches")));
            }
            let grid = (h0 / p, w0 / p);
            Ok(TokenizerPlan {
                kind: TokenizerKind::Patch,
                stages: Vec::new(),
                grid,
                sequence_length: grid.0 * grid.1,
                token_dim: config.embed_dim,
            })
        }
        TokenizerKind::Convolutional => {
            if config.tokenizer_stages == 0 {
                return Err(CctError::Parameter("tokenizer_stages must be at least 1".into()));
            }
            if config.conv_kernel == 0 || config.conv_stride == 0 || config.pool_kernel == 0 || config.pool_stride == 0 {
                return Err(CctError::Parameter("kernel sizes and strides must be positive".into()));
            }
            if 2 * config.pool_padding > config.pool_kernel {
                return Err(CctError::Parameter(format!(
                    "pool_padding {} exceeds half of pool_kernel {}",
                    config.pool_padding, config.pool_kernel
                )));
            }
            let channels = channel_schedule(config);
            let mut stages = Vec::with_capacity(channels.len());
            let mut extent = (h0, w0);
            let mut trace = vec![h0.to_string()];
            let mut in_ch = config.in_channels;
            for (i, &out_ch) in channels.iter().enumerate() {
                let step =
                    |ext: (usize, usize), k: usize, s: usize, p: usize, phase: StagePhase, trace: &[String]| -> Result<(usize, usize)> {
                        let one = |len: usize, axis: &str| {
                            window_output_extent(len, k, s, p).ok_or_else(|| CctError::TokenizerGeometry {
                                stage: Some(i + 1),
                                phase,
                                detail: format!(
                                    "{axis} extent {len} + 2*{p} padding = {} is smaller than kernel {k} (stride {s}); heights so far {}",
                                    len + 2 * p,
                                    trace.join("→")
                                ),
                            })
                        };
                        Ok((one(ext.0, "height")?, one(ext.1, "width")?))
                    };
                let conv = step(extent, config.conv_kernel, config.conv_stride, config.conv_padding, StagePhase::Conv, &trace)?;
                trace.push(conv.0.to_string());
                let pool = step(conv, config.pool_kernel, config.pool_stride, config.pool_padding, StagePhase::Pool, &trace)?;
                trace.push(pool.0.to_string());
                stages.push(StageRecord {
                    in_extent: extent,
                    post_conv_extent: conv,
                    post_pool_extent: pool,
                    in_channels: in_ch,
                    channels: out_ch,
                });
                extent = pool;
                in_ch = out_ch;
            }
            Ok(TokenizerPlan {
                kind: TokenizerKind::Convolutional,
                stages,
                grid: extent,
                sequence_length: extent.0 * extent.1,
                token_dim: config.embed_dim,
            })
        }
    }
}

fn check_images<T: Element>(tape: &Tape<T>, images: Var, config: &CctConfig) -> Result<usize> {
    let shape = tape.shape(images);
    let expected = [config.in_channels, config.image_size[0], config.image_size[1]];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(CctError::Dimension { op: "images", lhs: shape.to_vec(), rhs: expected.to_vec() });
    }
    Ok(shape[0])
}

/// Convolutional tokenizer: `[N,C,H,W]` → `[N,n,d]`.
pub fn tokenize<T: Element>(
    tape: &mut Tape<T>,
    images: Var,
    params: &BoundParams,
    config: &CctConfig,
    plan: &TokenizerPlan,
) -> Result<Var> {
    let n = check_images(tape, images, config)?;
    let mut x = images;
    for (i, _) in plan.stages.iter().enumerate() {
        let k = params.get(&format!("tokenizer.stage{i}.kernel"))?;
        let b = params.get(&format!("tokenizer.stage{i}.bias"))?;
        x = tape.conv2d(x, k, Some(b), config.conv_stride, config.conv_padding)?;
        x = tape.relu(x);
        x = tape.maxpool2d(x, config.pool_kernel, config.pool_stride, config.pool_padding)?;
    }
    let d = config.embed_dim;
    let x = tape.reshape(x, &[n, d, plan.sequence_length])?;
    tape.permute(x, &[0, 2, 1])
}

/// Non-overlapping patches, flattened in `(channel, row, col)` order and
/// projected to `d`.
pub fn patch_embed<T: Element>(
    tape: &mut Tape<T>,
    images: Var,
    params: &BoundParams,
    config: &CctConfig,
    plan: &TokenizerPlan,
) -> Result<Var> {
    let n = check_images(tape, images, config)?;
    let p = config.patch_size;
    let c = config.in_channels;
    let (gh, gw) = plan.grid;
    if gh * p != config.image_size[0] || gw * p != config.image_size[1] {
        return Err(CctError::Parameter(format!(
            "image {}x{} is not divisible into {p}x{p} patches",
            config.image_size[0], config.image_size[1]
        )));
    }
    let x = tape.reshape(images, &[n, c, gh, p, gw, p])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    let x = tape.reshape(x, &[n, gh * gw, c * p * p])?;
    let w = params.get("tokenizer.patch.weight")?;
    let b = params.get("tokenizer.patch.bias")?;
    tape.linear(x, w, Some(b))
}
