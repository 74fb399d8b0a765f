//! The forecasting network: input encoders, stacked spatial/temporal
//! learning blocks, and the MLP predictor.
//!
//! Per block, the spatial stage mixes all lots (plus the virtual temporal
//! node) within each time step through the Graph Cosine Operator — DCT over
//! the node axis, a learned per-mode spectrum, inverse DCT, normalization,
//! and a channel MLP. The temporal stage splits the virtual node back off,
//! merges batch and node dims, and runs causal masked multi-head attention
//! over the step axis so no state ever looks at its future.

mod params;

pub use params::{
    Activation, AttnParams, BlockParams, LayerNormParams, Linear, ModelConfig, ModelParams, Mlp,
};

use crate::error::{Error, Result};
use crate::spectral;
use crate::tensor::{Tape, Tensor};

const LN_EPS: f64 = 1e-5;

fn annotate(e: Error, ctx: &str) -> Error {
    match e {
        Error::NonFinite(s) => Error::NonFinite(format!("{ctx}: {s}")),
        other => other,
    }
}

fn activate(tape: &Tape, act: Activation, x: &Tensor) -> Result<Tensor> {
    match act {
        Activation::Gelu => tape.gelu(x),
        Activation::Relu => tape.relu(x),
    }
}

fn mlp2(tape: &Tape, m: &Mlp, act: Activation, x: &Tensor) -> Result<Tensor> {
    let h = tape.linear(x, &m.w1, &m.b1)?;
    let h = activate(tape, act, &h)?;
    tape.linear(&h, &m.w2, &m.b2)
}

// ── encoders and fusion ─────────────────────────────────────────────

/// Maps raw inputs into hidden states: per-step PA value embedding, the
/// per-lot spatial encoding broadcast over batch and time, and the per-step
/// temporal encoding as a single virtual-node stream.
pub fn encode_inputs(
    tape: &Tape,
    cfg: &ModelConfig,
    p: &ModelParams,
    x: &Tensor,
    f_t: &Tensor,
    f_s: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, t, n) = match *x.shape() {
        [b, t, n] => (b, t, n),
        _ => {
            return Err(Error::invalid(format!(
                "encode_inputs: X must be rank 3, got {:?}",
                x.shape()
            )))
        }
    };
    if t != cfg.history || n != cfg.n_lots {
        return Err(Error::ShapeMismatch {
            op: "encode_inputs",
            lhs: x.shape().to_vec(),
            rhs: vec![b, cfg.history, cfg.n_lots],
        });
    }
    if f_t.shape() != [b, t, cfg.temporal_feature_dim] {
        return Err(Error::ShapeMismatch {
            op: "encode_inputs",
            lhs: f_t.shape().to_vec(),
            rhs: vec![b, t, cfg.temporal_feature_dim],
        });
    }
    if f_s.shape() != [n, cfg.spatial_feature_dim] {
        return Err(Error::ShapeMismatch {
            op: "encode_inputs",
            lhs: f_s.shape().to_vec(),
            rhs: vec![n, cfg.spatial_feature_dim],
        });
    }
    let c = cfg.hidden_pa;
    let x4 = tape.reshape(x, &[b, t, n, 1])?;
    let h_pa = tape.linear(&x4, &p.pa_encoder.w, &p.pa_encoder.b)?;
    let hs_lot = tape.linear(f_s, &p.spatial_encoder.w, &p.spatial_encoder.b)?;
    let h_s = tape.expand(&hs_lot, &[b, t, n, cfg.spatial_hidden])?;
    let ht_flat = tape.linear(f_t, &p.temporal_encoder.w, &p.temporal_encoder.b)?;
    let h_t = tape.reshape(&ht_flat, &[b, t, 1, c])?;
    Ok((h_pa, h_s, h_t))
}

/// `H = H_pa + concat(H_s, P_s)` along channels; with spatial info disabled
/// the PA stream passes through untouched.
pub fn fuse_spatial(
    tape: &Tape,
    cfg: &ModelConfig,
    h_pa: &Tensor,
    h_s: &Tensor,
    pos_spatial: &Tensor,
) -> Result<Tensor> {
    if !cfg.use_spatial_info {
        return Ok(h_pa.clone());
    }
    let [b, t, n, _c] = *h_pa.shape() else {
        return Err(Error::invalid("fuse_spatial: H_pa must be rank 4"));
    };
    let pe_width = cfg.hidden_pa - cfg.spatial_hidden;
    let ps = tape.expand(pos_spatial, &[b, t, n, pe_width])?;
    let spatial = tape.concat(&[h_s, &ps], 3)?;
    tape.add(h_pa, &spatial)
}

/// Appends the temporal stream as the last node and flattens batch x time,
/// so the spatial operator mixes only within a time step.
pub fn attach_virtual_node(
    tape: &Tape,
    cfg: &ModelConfig,
    h: &Tensor,
    h_t: &Tensor,
) -> Result<Tensor> {
    let [b, t, n, c] = *h.shape() else {
        return Err(Error::invalid("attach_virtual_node: H must be rank 4"));
    };
    if cfg.use_temporal_node {
        let joined = tape.concat(&[h, h_t], 2)?;
        tape.reshape(&joined, &[b * t, n + 1, c])
    } else {
        tape.reshape(h, &[b * t, n, c])
    }
}

// ── graph cosine operator ───────────────────────────────────────────

/// Which stages of the operator run; tests use this to reduce the operator
/// to its bare spectral core.
#[derive(Debug, Clone)]
pub struct GcoStages {
    pub k_modes: Option<usize>,
    pub normalize: bool,
    pub channel_mlp: bool,
    pub residual: bool,
    pub activation: Activation,
}

impl GcoStages {
    pub fn from_config(cfg: &ModelConfig) -> GcoStages {
        GcoStages {
            k_modes: cfg.k_modes,
            normalize: true,
            channel_mlp: true,
            residual: cfg.use_residual,
            activation: cfg.activation,
        }
    }

    /// Bare spectrum: transform, scale, inverse transform, nothing else.
    pub fn linear_probe() -> GcoStages {
        GcoStages {
            k_modes: None,
            normalize: false,
            channel_mlp: false,
            residual: false,
            activation: Activation::Gelu,
        }
    }
}

/// The spatial mixing operator on `(BT, nodes, C)`:
/// 1. project into the frequency domain (DCT over the node axis),
/// 2. apply the learned per-mode spectrum (after optional mode truncation),
/// 3. return to the spatial domain (inverse DCT),
/// 4. normalize over channels,
/// 5. apply the channel MLP,
/// with a residual connection around the whole operator.
pub fn gco(tape: &Tape, block: &BlockParams, x: &Tensor, stages: &GcoStages) -> Result<Tensor> {
    let n = match *x.shape() {
        [_bt, n, _c] => n,
        _ => return Err(Error::invalid("gco: input must be rank 3 (BT, nodes, C)")),
    };
    if block.freq_scale.shape() != [n, 1] {
        return Err(Error::ShapeMismatch {
            op: "gco",
            lhs: block.freq_scale.shape().to_vec(),
            rhs: vec![n, 1],
        });
    }
    let mut h = spectral::dct2(tape, x, 1).map_err(|e| annotate(e, "gco step 1 (dct)"))?;
    if let Some(k) = stages.k_modes {
        if k < n {
            h = spectral::truncate_modes(tape, &h, 1, k)
                .map_err(|e| annotate(e, "gco step 1 (truncate)"))?;
        }
    }
    h = tape
        .mul(&h, &block.freq_scale)
        .map_err(|e| annotate(e, "gco step 2 (spectrum)"))?;
    h = spectral::idct2(tape, &h, 1).map_err(|e| annotate(e, "gco step 3 (idct)"))?;
    if stages.normalize {
        h = tape
            .layer_norm(&h, &block.gco_ln.gain, &block.gco_ln.bias, LN_EPS)
            .map_err(|e| annotate(e, "gco step 4 (norm)"))?;
    }
    if stages.channel_mlp {
        h = mlp2(tape, &block.gco_mlp, stages.activation, &h)
            .map_err(|e| annotate(e, "gco step 5 (mlp)"))?;
    }
    if stages.residual {
        h = tape.add(x, &h)?;
    }
    Ok(h)
}

/// Spatial learning stage: the operator above, or — with the block ablated —
/// a per-node channel MLP that never mixes across nodes.
pub fn slblock(tape: &Tape, cfg: &ModelConfig, block: &BlockParams, x: &Tensor) -> Result<Tensor> {
    if cfg.use_slblock {
        gco(tape, block, x, &GcoStages::from_config(cfg))
    } else {
        let h = mlp2(tape, &block.gco_mlp, cfg.activation, x)?;
        tape.add(x, &h)
    }
}

// ── attention ───────────────────────────────────────────────────────

/// The (T, T) additive mask: 0 on and below the diagonal, -inf strictly
/// above it, so every state attends only to its prefix.
pub fn causal_mask(t_len: usize) -> Tensor {
    let mut data = vec![0.0; t_len * t_len];
    for i in 0..t_len {
        for j in (i + 1)..t_len {
            data[i * t_len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::from_vec(vec![t_len, t_len], data).expect("mask shape")
}

/// Multi-head self-attention over the step axis of `(B', T, C)`, returning
/// the projected output and the attention weights `(B', heads, T, T)`.
pub fn causal_msa_with_weights(
    tape: &Tape,
    cfg: &ModelConfig,
    attn: &AttnParams,
    x: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [bp, t, c] = *x.shape() else {
        return Err(Error::invalid("causal_msa: input must be rank 3 (B', T, C)"));
    };
    if t == 0 {
        return Err(Error::invalid("causal_msa: T must be >= 1"));
    }
    let heads = cfg.n_heads;
    let d = cfg.head_dim();
    let scale = if cfg.paper_literal_scale {
        1.0 / (heads as f64).sqrt()
    } else {
        1.0 / (d as f64).sqrt()
    };
    let split_heads = |y: &Tensor| -> Result<Tensor> {
        let r = tape.reshape(y, &[bp, t, heads, d])?;
        tape.permute(&r, &[0, 2, 1, 3]) // (B', heads, T, d)
    };
    let q = split_heads(&tape.linear(x, &attn.wq, &attn.bq)?)?;
    let k = split_heads(&tape.linear(x, &attn.wk, &attn.bk)?)?;
    let v = split_heads(&tape.linear(x, &attn.wv, &attn.bv)?)?;
    let kt = tape.permute(&k, &[0, 1, 3, 2])?;
    let mut scores = tape.matmul(&q, &kt)?;
    scores = tape.scale(&scores, scale)?;
    if cfg.causal_mask_on {
        scores = tape.add(&scores, &causal_mask(t))?;
    }
    let weights = tape.softmax(&scores, 3)?;
    let ctx = tape.matmul(&weights, &v)?;
    let merged = tape.permute(&ctx, &[0, 2, 1, 3])?;
    let merged = tape.reshape(&merged, &[bp, t, c])?;
    let out = tape.linear(&merged, &attn.wo, &attn.bo)?;
    Ok((out, weights))
}

pub fn causal_msa(
    tape: &Tape,
    cfg: &ModelConfig,
    attn: &AttnParams,
    x: &Tensor,
) -> Result<Tensor> {
    Ok(causal_msa_with_weights(tape, cfg, attn, x)?.0)
}

// ── temporal learning block ─────────────────────────────────────────

/// Temporal learning stage. Splits the virtual node back off, merges batch
/// and node dims so PA and temporal streams share one encoder, adds the
/// temporal position encoding, runs causal attention + FFN (each with a
/// residual and layer norm), then restores the `(B, T, N, C)` /
/// `(B, T, 1, C)` layout.
pub fn tlblock(
    tape: &Tape,
    cfg: &ModelConfig,
    block: &BlockParams,
    pos_temporal: &Tensor,
    mixed: &Tensor,
    h_t_prev: &Tensor,
    batch: usize,
) -> Result<(Tensor, Tensor)> {
    let [bt, nodes, c] = *mixed.shape() else {
        return Err(Error::invalid("tlblock: input must be rank 3 (BT, nodes, C)"));
    };
    let t = cfg.history;
    let n = cfg.n_lots;
    debug_assert_eq!(bt, batch * t);
    let (pa_bt, tmp_bt) = if cfg.use_temporal_node {
        debug_assert_eq!(nodes, n + 1);
        let parts = tape.split(mixed, &[n, 1], 1)?;
        (parts[0].clone(), Some(parts[1].clone()))
    } else {
        (mixed.clone(), None)
    };

    // (BT, N, C) -> (B, N, T, C) -> (B*N, T, C)
    let pa = tape.reshape(&pa_bt, &[batch, t, n, c])?;
    let pa = tape.permute(&pa, &[0, 2, 1, 3])?;
    let pa = tape.reshape(&pa, &[batch * n, t, c])?;

    let merged = match &tmp_bt {
        Some(tmp) => {
            let tmp_seq = tape.reshape(tmp, &[batch, t, c])?;
            tape.concat(&[&pa, &tmp_seq], 0)?
        }
        None => pa,
    };

    let mut h = if cfg.use_temporal_pe {
        tape.add(&merged, pos_temporal)?
    } else {
        merged
    };

    if cfg.use_tlblock {
        let a = causal_msa(tape, cfg, &block.attn, &h)?;
        let a = if cfg.use_residual { tape.add(&h, &a)? } else { a };
        h = tape.layer_norm(&a, &block.ln_attn.gain, &block.ln_attn.bias, LN_EPS)?;
        let f = mlp2(tape, &block.ffn, cfg.activation, &h)?;
        let f = if cfg.use_residual { tape.add(&h, &f)? } else { f };
        h = tape.layer_norm(&f, &block.ln_ffn.gain, &block.ln_ffn.bias, LN_EPS)?;
    } else {
        // ablation: per-step channel MLP, no mixing across steps
        let f = mlp2(tape, &block.ffn, cfg.activation, &h)?;
        h = tape.add(&h, &f)?;
    }

    let (pa_out, ht_out) = if cfg.use_temporal_node {
        let parts = tape.split(&h, &[batch * n, batch], 0)?;
        let ht = tape.reshape(&parts[1], &[batch, t, 1, c])?;
        (parts[0].clone(), ht)
    } else {
        (h, h_t_prev.clone())
    };
    let pa_out = tape.reshape(&pa_out, &[batch, n, t, c])?;
    let pa_out = tape.permute(&pa_out, &[0, 2, 1, 3])?;
    Ok((pa_out, ht_out))
}

// ── predictor and full forward ──────────────────────────────────────

/// Per lot, flattens the hidden history (all T steps, or just the last one)
/// and maps it to the tau future values.
pub fn predict(tape: &Tape, cfg: &ModelConfig, head: &Linear, h: &Tensor) -> Result<Tensor> {
    let [b, t, n, c] = *h.shape() else {
        return Err(Error::invalid("predict: input must be rank 4 (B, T, N, C)"));
    };
    let flat = if cfg.predictor_last_step_only {
        let parts = tape.split(h, &[t - 1, 1], 1)?;
        tape.reshape(&parts[1], &[b, n, c])?
    } else {
        let p = tape.permute(h, &[0, 2, 1, 3])?;
        tape.reshape(&p, &[b, n, t * c])?
    };
    let y = tape.linear(&flat, &head.w, &head.b)?;
    tape.permute(&y, &[0, 2, 1]) // (B, tau, N)
}

/// Post-block hidden states, for causality checks and diagnostics.
pub struct BlockTrace {
    pub pa: Tensor,
    pub temporal: Tensor,
}

/// Full forward pass: encode, fuse spatial context, run the stacked blocks,
/// and predict. Deterministic given parameters and inputs.
pub fn forward(
    tape: &Tape,
    cfg: &ModelConfig,
    p: &ModelParams,
    x: &Tensor,
    f_t: &Tensor,
    f_s: &Tensor,
) -> Result<Tensor> {
    Ok(forward_traced(tape, cfg, p, x, f_t, f_s)?.0)
}

pub fn forward_traced(
    tape: &Tape,
    cfg: &ModelConfig,
    p: &ModelParams,
    x: &Tensor,
    f_t: &Tensor,
    f_s: &Tensor,
) -> Result<(Tensor, Vec<BlockTrace>)> {
    cfg.validate()?;
    let batch = x.shape().first().copied().unwrap_or(0);
    let (h_pa, h_s, mut h_t) = encode_inputs(tape, cfg, p, x, f_t, f_s)?;
    let mut h = fuse_spatial(tape, cfg, &h_pa, &h_s, &p.pos_spatial)?;
    let mut traces = Vec::with_capacity(cfg.n_blocks);
    for (i, block) in p.blocks.iter().enumerate() {
        let ctx = format!("block {i}");
        let merged = attach_virtual_node(tape, cfg, &h, &h_t).map_err(|e| annotate(e, &ctx))?;
        let mixed = slblock(tape, cfg, block, &merged).map_err(|e| annotate(e, &ctx))?;
        let (h_next, h_t_next) = tlblock(tape, cfg, block, &p.pos_temporal, &mixed, &h_t, batch)
            .map_err(|e| annotate(e, &ctx))?;
        h = h_next;
        h_t = h_t_next;
        traces.push(BlockTrace {
            pa: h.clone(),
            temporal: h_t.clone(),
        });
    }
    let y = predict(tape, cfg, &p.predictor, &h)?;
    Ok((y, traces))
}
