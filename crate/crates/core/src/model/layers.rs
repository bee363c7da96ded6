use crate::error::{CctError, Result};
use crate::numerics::{Element, Tape, Tensor, Var};
use crate::rng::RngStream;

use super::config::{CctConfig, Pooling, PositionalEmbedding, TokenizerKind};
use super::params::BoundParams;
use super::tokenizer::{patch_embed, tokenize, TokenizerPlan};

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(…)`.
pub fn sinusoidal_positions<T: Element>(n: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(2) {
        return Err(CctError::Parameter(format!("sinusoidal positions need an even dimension, got {d}")));
    }
    Ok(Tensor::from_fn(&[n, d], |idx| {
        let (pos, col) = (idx / d, idx % d);
        let pair = (col / 2) * 2;
        let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
        T::from_f64(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Multi-head self-attention over `[N,n,d]`. Returns the projected output
/// and the post-softmax attention weights `[N,h,n,n]` (before dropout).
#[allow(clippy::too_many_arguments)]
pub fn mhsa<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    config: &CctConfig,
    rng: &mut RngStream,
    training: bool,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let (d, h) = (config.embed_dim, config.num_heads);
    if shape.len() != 3 || shape[2] != d || d % h != 0 {
        return Err(CctError::Dimension { op: "mhsa", lhs: shape, rhs: vec![d, h] });
    }
    let (n_batch, n) = (shape[0], shape[1]);
    let dh = d / h;
    let w_qkv = params.get(&format!("{prefix}.qkv.weight"))?;
    let b_qkv = params.get(&format!("{prefix}.qkv.bias"))?;
    let qkv = tape.linear(x, w_qkv, Some(b_qkv))?;
    let qkv = tape.reshape(qkv, &[n_batch, n, 3, h, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let part = |tape: &mut Tape<T>, i: usize| -> Result<Var> {
        let p = tape.narrow(qkv, 0, i, 1)?;
        tape.reshape(p, &[n_batch, h, n, dh])
    };
    let q = part(tape, 0)?;
    let k = part(tape, 1)?;
    let v = part(tape, 2)?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scores, 3)?;
    let dropped = tape.dropout(attn, config.attention_dropout_rate, rng, training)?;
    let ctx = tape.matmul(dropped, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n_batch, n, d])?;
    let w_o = params.get(&format!("{prefix}.proj.weight"))?;
    let b_o = params.get(&format!("{prefix}.proj.bias"))?;
    Ok((tape.linear(ctx, w_o, Some(b_o))?, attn))
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn encoder_block<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    params: &BoundParams,
    block: usize,
    config: &CctConfig,
    rng: &mut RngStream,
    training: bool,
) -> Result<Var> {
    let pre = format!("encoder.block{block}");
    let eps = config.layer_norm_eps;
    let g1 = params.get(&format!("{pre}.norm1.gamma"))?;
    let b1 = params.get(&format!("{pre}.norm1.beta"))?;
    let h = tape.layer_norm(x, g1, b1, eps)?;
    let (a, _) = mhsa(tape, h, params, &format!("{pre}.attn"), config, rng, training)?;
    let x = tape.add(x, a)?;

    let g2 = params.get(&format!("{pre}.norm2.gamma"))?;
    let b2 = params.get(&format!("{pre}.norm2.beta"))?;
    let h = tape.layer_norm(x, g2, b2, eps)?;
    let w1 = params.get(&format!("{pre}.mlp.fc1.weight"))?;
    let c1 = params.get(&format!("{pre}.mlp.fc1.bias"))?;
    let w2 = params.get(&format!("{pre}.mlp.fc2.weight"))?;
    let c2 = params.get(&format!("{pre}.mlp.fc2.bias"))?;
    let m = tape.linear(h, w1, Some(c1))?;
    let m = tape.gelu(m, config.gelu);
    let m = tape.dropout(m, config.dropout_rate, rng, training)?;
    let m = tape.linear(m, w2, Some(c2))?;
    let m = tape.dropout(m, config.dropout_rate, rng, training)?;
    tape.add(x, m)
}

/// Attention-weighted average over the sequence. Returns the pooled `[N,d]`
/// vectors and the pooling weights `[N,1,n]`.
pub fn seq_pool<T: Element>(tape: &mut Tape<T>, tokens: Var, params: &BoundParams) -> Result<(Var, Var)> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(CctError::Dimension { op: "seq_pool", lhs: shape, rhs: vec![3] });
    }
    let (n_batch, n, d) = (shape[0], shape[1], shape[2]);
    let w = params.get("seqpool.attention.weight")?;
    let b = params.get("seqpool.attention.bias")?;
    let logits = tape.linear(tokens, w, Some(b))?;
    let logits = tape.reshape(logits, &[n_batch, 1, n])?;
    let weights = tape.softmax(logits, 2)?;
    let pooled = tape.matmul(weights, tokens)?;
    Ok((tape.reshape(pooled, &[n_batch, d])?, weights))
}

/// Image batch → token sequence `[N,n,d]`, by whichever tokenizer the config names.
pub fn embed_tokens<T: Element>(
    tape: &mut Tape<T>,
    images: Var,
    params: &BoundParams,
    config: &CctConfig,
    plan: &TokenizerPlan,
) -> Result<Var> {
    match config.tokenizer {
        TokenizerKind::Convolutional => tokenize(tape, images, params, config, plan),
        TokenizerKind::Patch => patch_embed(tape, images, params, config, plan),
    }
}

/// Everything after tokenization: optional class token, positions, dropout,
/// encoder blocks, final norm, pooling, and the classifier head.
pub fn classify_tokens<T: Element>(
    tape: &mut Tape<T>,
    tokens: Var,
    params: &BoundParams,
    config: &CctConfig,
    rng: &mut RngStream,
    training: bool,
) -> Result<Var> {
    let mut x = tokens;
    if config.pooling == Pooling::ClassToken {
        let cls = params.get("class_token")?;
        x = tape.prepend_token(x, cls)?;
    }
    let seq = tape.shape(x)[1];
    x = match config.positional_embedding {
        PositionalEmbedding::Sinusoidal => {
            let pe = tape.constant(sinusoidal_positions(seq, config.embed_dim)?);
            tape.add_broadcast(x, pe)?
        }
        PositionalEmbedding::Learnable => {
            let pe = params.get("positional.embedding")?;
            tape.add_broadcast(x, pe)?
        }
        PositionalEmbedding::None => x,
    };
    x = tape.dropout(x, config.dropout_rate, rng, training)?;
    for b in 0..config.encoder_depth {
        x = encoder_block(tape, x, params, b, config, rng, training)?;
    }
    let g = params.get("encoder.norm.gamma")?;
    let beta = params.get("encoder.norm.beta")?;
    x = tape.layer_norm(x, g, beta, config.layer_norm_eps)?;
    let pooled = match config.pooling {
        Pooling::Seqpool => seq_pool(tape, x, params)?.0,
        Pooling::ClassToken => {
            let n_batch = tape.shape(x)[0];
            let first = tape.narrow(x, 1, 0, 1)?;
            tape.reshape(first, &[n_batch, config.embed_dim])?
        }
    };
    let w = params.get("head.weight")?;
    let b = params.get("head.bias")?;
    tape.linear(pooled, w, Some(b))
}

/// Full forward pass: `[N,C,H,W]` images → `[N,num_classes]` logits.
pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    images: Var,
    params: &BoundParams,
    config: &CctConfig,
    plan: &TokenizerPlan,
    rng: &mut RngStream,
    training: bool,
) -> Result<Var> {
    let tokens = embed_tokens(tape, images, params, config, plan)?;
    classify_tokens(tape, tokens, params, config, rng, training)
}
