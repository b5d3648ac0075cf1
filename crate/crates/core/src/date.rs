//! Domain-Augmented Text Encoder.
//!
//! Cross-attention with the auxiliary prompt as Query and the primary prompt
//! as Key/Value, fused back into the primary features through a residual
//! LayerNorm. Both prompts share one fixed context length, which is what
//! makes the residual well-typed.

use serde::{Deserialize, Serialize};
use tgc_tensor::{Graph, NodeId, ParamStore, Real};

use crate::encoders::{self, TextConfig};
use crate::error::{CoreError, Result};
use crate::nn;
use crate::rng::Rng;
use crate::synth::PromptPair;
use crate::vocab::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateVariant {
    /// Auxiliary-prompt knowledge injected into the primary prompt.
    Inject,
    /// Primary prompt only.
    MainOnly,
    /// Auxiliary prompt only.
    AuxOnly,
    /// Primary and auxiliary concatenated before tokenization.
    Concat,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DateConfig {
    pub heads: usize,
    pub variant: DateVariant,
}

impl Default for DateConfig {
    fn default() -> Self {
        DateConfig {
            heads: 4,
            variant: DateVariant::Inject,
        }
    }
}

/// Text features plus the validity mask downstream consumers need.
pub struct TextFeatures {
    pub tokens: NodeId,
    pub mask: Vec<bool>,
    /// Cross-attention weights when the inject path ran.
    pub attn_weights: Option<NodeId>,
}

pub fn init_date<F: Real>(ps: &mut ParamStore<F>, rng: &mut Rng, d_t: usize) {
    let mut r = rng.fork(0xda7e);
    nn::init_attention(ps, &mut r, "train.date.attn", d_t);
    nn::init_layer_norm(ps, "train.date.ln", d_t);
}

/// Knowledge infusion on already-encoded prompt features:
/// `F_T = LayerNorm(F_p + CrossAttn(Q=F_a, K=F_p, V=F_p))`.
pub fn date_forward<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &DateConfig,
    f_primary: NodeId,
    f_auxiliary: NodeId,
    primary_mask: &[bool],
    auxiliary_mask: &[bool],
) -> Result<TextFeatures> {
    if !primary_mask.iter().any(|&m| m) {
        return Err(CoreError::DegenerateAttention(
            "primary prompt has no non-PAD tokens to attend to".into(),
        ));
    }
    let key_bias = nn::key_bias_from_mask(g, primary_mask)?;
    let attn = nn::mha(
        g,
        ps,
        "train.date.attn",
        cfg.heads,
        f_auxiliary,
        f_primary,
        Some(key_bias),
    )?;
    // PAD auxiliary queries must not inject noise into the residual
    let q_mask = nn::mask_column(g, auxiliary_mask)?;
    let d = g.shape(f_primary)[1];
    let q_mask_rep = g.repeat(q_mask, 1, d)?;
    let infused = g.mul(attn.out, q_mask_rep)?;
    let residual = g.add(f_primary, infused)?;
    let tokens = nn::layer_norm(g, ps, "train.date.ln", residual)?;
    Ok(TextFeatures {
        tokens,
        mask: primary_mask.to_vec(),
        attn_weights: Some(attn.weights),
    })
}

/// Full text path for a prompt pair under the configured variant.
pub fn encode_prompts<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &DateConfig,
    text_cfg: &TextConfig,
    tokenizer: &Tokenizer,
    prompts: &PromptPair,
) -> Result<TextFeatures> {
    match cfg.variant {
        DateVariant::MainOnly => {
            let tok = &prompts.primary_tok;
            let f = encoders::encode_text(g, ps, text_cfg, &tok.ids, &tok.mask)?;
            Ok(TextFeatures {
                tokens: f,
                mask: tok.mask.clone(),
                attn_weights: None,
            })
        }
        DateVariant::AuxOnly => {
            let tok = &prompts.auxiliary_tok;
            let f = encoders::encode_text(g, ps, text_cfg, &tok.ids, &tok.mask)?;
            Ok(TextFeatures {
                tokens: f,
                mask: tok.mask.clone(),
                attn_weights: None,
            })
        }
        DateVariant::Concat => {
            let joined = format!("{} {}", prompts.primary, prompts.auxiliary);
            let tok = tokenizer.encode(&joined);
            let f = encoders::encode_text(g, ps, text_cfg, &tok.ids, &tok.mask)?;
            Ok(TextFeatures {
                tokens: f,
                mask: tok.mask.clone(),
                attn_weights: None,
            })
        }
        DateVariant::Inject => {
            let p = &prompts.primary_tok;
            let a = &prompts.auxiliary_tok;
            let f_p = encoders::encode_text(g, ps, text_cfg, &p.ids, &p.mask)?;
            let f_a = encoders::encode_text(g, ps, text_cfg, &a.ids, &a.mask)?;
            date_forward(g, ps, cfg, f_p, f_a, &p.mask, &a.mask)
        }
    }
}
