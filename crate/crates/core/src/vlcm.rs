//! Vision-Language Calibration Module.
//!
//! Builds a shared gated context from both modalities, then calibrates each
//! modality by querying that context through its own cross-attention block
//! (residual + LayerNorm). The gate is a per-token scalar sigmoid
//! conditioned on the opposite modality's global summary. Ablation variants
//! share the interface: identity pass-through, single (text->vision)
//! cross-attention, and direct bidirectional cross-attention.

use serde::{Deserialize, Serialize};
use tgc_tensor::{Graph, NodeId, ParamStore, Real};

use crate::error::{CoreError, Result};
use crate::nn;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlcmVariant {
    /// No calibration; projected features pass through.
    None,
    /// Text-to-vision cross-attention only.
    Single,
    /// Two direct cross-attentions, no shared context.
    Bidirectional,
    /// Gated shared-context calibration.
    Gated,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VlcmConfig {
    pub dim: usize,
    pub heads: usize,
    pub variant: VlcmVariant,
}

impl Default for VlcmConfig {
    fn default() -> Self {
        VlcmConfig {
            dim: 128,
            heads: 4,
            variant: VlcmVariant::Gated,
        }
    }
}

/// Calibrated features plus inspection handles.
pub struct Calibrated {
    pub visual: NodeId,
    pub text: NodeId,
    pub context: Option<NodeId>,
    pub gates_visual: Option<NodeId>,
    pub gates_text: Option<NodeId>,
    pub attn_visual: Option<NodeId>,
    pub attn_text: Option<NodeId>,
}

pub fn init_vlcm<F: Real>(ps: &mut ParamStore<F>, rng: &mut Rng, cfg: &VlcmConfig, d_t: usize) {
    let mut r = rng.fork(0x1c);
    let d = cfg.dim;
    nn::init_linear(ps, &mut r, "train.vlcm.txt_in", d_t, d);
    match cfg.variant {
        VlcmVariant::None => {}
        VlcmVariant::Single => {
            nn::init_attention(ps, &mut r, "train.vlcm.attn_v", d);
            nn::init_layer_norm(ps, "train.vlcm.ln_v", d);
        }
        VlcmVariant::Bidirectional => {
            nn::init_attention(ps, &mut r, "train.vlcm.attn_v", d);
            nn::init_layer_norm(ps, "train.vlcm.ln_v", d);
            nn::init_attention(ps, &mut r, "train.vlcm.attn_t", d);
            nn::init_layer_norm(ps, "train.vlcm.ln_t", d);
        }
        VlcmVariant::Gated => {
            nn::init_linear(ps, &mut r, "train.vlcm.gate_v", 2 * d, 1);
            nn::init_linear(ps, &mut r, "train.vlcm.gate_t", 2 * d, 1);
            nn::init_attention(ps, &mut r, "train.vlcm.attn_v", d);
            nn::init_layer_norm(ps, "train.vlcm.ln_v", d);
            nn::init_attention(ps, &mut r, "train.vlcm.attn_t", d);
            nn::init_layer_norm(ps, "train.vlcm.ln_t", d);
        }
    }
}

/// Per-token sigmoid gates conditioned on the opposite modality's summary.
fn token_gates<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    name: &str,
    tokens: NodeId,
    other_summary: NodeId,
) -> Result<NodeId> {
    let n = g.shape(tokens)[0];
    let d = g.shape(tokens)[1];
    let s_row = g.reshape(other_summary, vec![1, d])?;
    let s_rep = g.repeat(s_row, 0, n)?;
    let joint = g.concat(&[tokens, s_rep], 1)?;
    let raw = nn::linear(g, ps, name, joint)?;
    Ok(g.sigmoid(raw))
}

fn apply_gates<F: Real>(g: &mut Graph<F>, tokens: NodeId, gates: NodeId) -> Result<NodeId> {
    let d = g.shape(tokens)[1];
    let rep = g.repeat(gates, 1, d)?;
    Ok(g.mul(tokens, rep)?)
}

fn residual_attention<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    attn_name: &str,
    ln_name: &str,
    heads: usize,
    queries: NodeId,
    kv: NodeId,
    key_bias: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let attn = nn::mha(g, ps, attn_name, heads, queries, kv, key_bias)?;
    let residual = g.add(queries, attn.out)?;
    let out = nn::layer_norm(g, ps, ln_name, residual)?;
    Ok((out, attn.weights))
}

/// Build the shared gated context `[N_v + L, dim]`.
pub fn gated_context<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    visual: NodeId,
    text: NodeId,
    text_mask: &[bool],
) -> Result<(NodeId, NodeId, NodeId)> {
    let s_v = g.mean_axis(visual, 0)?;
    let s_t = nn::masked_mean_rows(g, text, text_mask)?;
    let gates_v = token_gates(g, ps, "train.vlcm.gate_v", visual, s_t)?;
    let gates_t = token_gates(g, ps, "train.vlcm.gate_t", text, s_v)?;
    let gated_v = apply_gates(g, visual, gates_v)?;
    let gated_t = apply_gates(g, text, gates_t)?;
    let ctx = g.concat(&[gated_v, gated_t], 0)?;
    Ok((ctx, gates_v, gates_t))
}

/// Calibrate visual tokens `[N_v, dim]` and text tokens `[L, d_t]`
/// (projected to `dim` internally) under the configured variant.
pub fn calibrate<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &VlcmConfig,
    visual: NodeId,
    text: NodeId,
    text_mask: &[bool],
) -> Result<Calibrated> {
    if g.shape(visual)[1] != cfg.dim {
        return Err(CoreError::Config(format!(
            "visual tokens have dim {}, calibration dim is {}",
            g.shape(visual)[1],
            cfg.dim
        )));
    }
    if !text_mask.iter().any(|&m| m) {
        return Err(CoreError::DegenerateContext(
            "no non-PAD text tokens for the shared context".into(),
        ));
    }
    let t_in = nn::linear(g, ps, "train.vlcm.txt_in", text)?;
    match cfg.variant {
        VlcmVariant::None => Ok(Calibrated {
            visual,
            text: t_in,
            context: None,
            gates_visual: None,
            gates_text: None,
            attn_visual: None,
            attn_text: None,
        }),
        VlcmVariant::Single => {
            let bias = nn::key_bias_from_mask(g, text_mask)?;
            let (v_out, v_w) = residual_attention(
                g,
                ps,
                "train.vlcm.attn_v",
                "train.vlcm.ln_v",
                cfg.heads,
                visual,
                t_in,
                Some(bias),
            )?;
            Ok(Calibrated {
                visual: v_out,
                text: t_in,
                context: None,
                gates_visual: None,
                gates_text: None,
                attn_visual: Some(v_w),
                attn_text: None,
            })
        }
        VlcmVariant::Bidirectional => {
            let bias = nn::key_bias_from_mask(g, text_mask)?;
            let (v_out, v_w) = residual_attention(
                g,
                ps,
                "train.vlcm.attn_v",
                "train.vlcm.ln_v",
                cfg.heads,
                visual,
                t_in,
                Some(bias),
            )?;
            let (t_out, t_w) = residual_attention(
                g,
                ps,
                "train.vlcm.attn_t",
                "train.vlcm.ln_t",
                cfg.heads,
                t_in,
                visual,
                None,
            )?;
            Ok(Calibrated {
                visual: v_out,
                text: t_out,
                context: None,
                gates_visual: None,
                gates_text: None,
                attn_visual: Some(v_w),
                attn_text: Some(t_w),
            })
        }
        VlcmVariant::Gated => {
            let (ctx, gates_v, gates_t) = gated_context(g, ps, visual, t_in, text_mask)?;
            let (v_out, v_w) = residual_attention(
                g,
                ps,
                "train.vlcm.attn_v",
                "train.vlcm.ln_v",
                cfg.heads,
                visual,
                ctx,
                None,
            )?;
            let (t_out, t_w) = residual_attention(
                g,
                ps,
                "train.vlcm.attn_t",
                "train.vlcm.ln_t",
                cfg.heads,
                t_in,
                ctx,
                None,
            )?;
            Ok(Calibrated {
                visual: v_out,
                text: t_out,
                context: Some(ctx),
                gates_visual: Some(gates_v),
                gates_text: Some(gates_t),
                attn_visual: Some(v_w),
                attn_text: Some(t_w),
            })
        }
    }
}
