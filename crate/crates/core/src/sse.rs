//! Semantic-Structural Synergy Encoder.
//!
//! Fuses frozen ViT patch semantics with the deepest CNN level (elementwise
//! add + LayerNorm), assembles the hybrid {1/8, 1/16, 1/32} pyramid, and
//! refines it with multi-scale deformable attention: each pyramid position
//! queries K learned sampling points per head on every level, with
//! per-head weights softmax-normalized over the level x point slots.

use serde::{Deserialize, Serialize};
use tgc_tensor::{Graph, NodeId, ParamStore, Real};

use crate::encoders::{self, CnnConfig, VitConfig};
use crate::error::{CoreError, Result};
use crate::nn;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SseConfig {
    pub fusion_dim: usize,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub layers: usize,
}

impl Default for SseConfig {
    fn default() -> Self {
        SseConfig {
            fusion_dim: 128,
            heads: 4,
            points: 4,
            levels: 3,
            layers: 2,
        }
    }
}

impl SseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "fusion_dim {} not divisible by heads {}",
                self.fusion_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// How the visual trunk is wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Fused ViT+CNN trunk with deformable refinement.
    #[default]
    Full,
    /// SSE disabled: projected ViT tokens as the 1/32 feature, raw CNN skips.
    VitOnly,
    /// No CLIP branch: the 1/32 feature comes from the CNN alone.
    CnnOnly,
}

/// Token-major feature pyramid; level l is `[side_l^2, d]`.
pub struct FeaturePyramid {
    pub tokens: Vec<NodeId>,
    pub sides: Vec<usize>,
}

/// Visual features handed to the calibration module and decoder.
pub struct VisualFeatures {
    /// 1/32-scale tokens `[g32^2, fusion_dim]`.
    pub v32: NodeId,
    pub side32: usize,
    /// Skip grids `[c, h, w]` at 1/16 and 1/8 scale.
    pub skip16: NodeId,
    pub skip8: NodeId,
}

/// Skip channel counts seen by the decoder: refined pyramid levels when the
/// module is on, raw CNN maps when routed around it.
pub fn skip_channels(variant: EncoderVariant, cfg: &SseConfig, cnn: &CnnConfig) -> (usize, usize) {
    match variant {
        EncoderVariant::Full | EncoderVariant::CnnOnly => (cfg.fusion_dim, cfg.fusion_dim),
        EncoderVariant::VitOnly => (cnn.c16, cnn.c8),
    }
}

pub fn init_sse<F: Real>(
    ps: &mut ParamStore<F>,
    rng: &mut Rng,
    cfg: &SseConfig,
    variant: EncoderVariant,
    d_v: usize,
    cnn: &CnnConfig,
) {
    let mut r = rng.fork(0x55e);
    let d = cfg.fusion_dim;
    if variant != EncoderVariant::CnnOnly {
        nn::init_linear(ps, &mut r, "train.sse.p_v", d_v, d);
    }
    if variant == EncoderVariant::VitOnly {
        return;
    }
    nn::init_linear(ps, &mut r, "train.sse.p_c", cnn.c32, d);
    nn::init_layer_norm(ps, "train.sse.fuse_ln", d);
    nn::init_linear(ps, &mut r, "train.sse.lvl8", cnn.c8, d);
    nn::init_linear(ps, &mut r, "train.sse.lvl16", cnn.c16, d);
    for lvl in 0..cfg.levels {
        // value projections shared across deformable layers
        nn::init_linear(ps, &mut r, &format!("train.sse.msda.val{lvl}"), d, d);
    }
    let slots = cfg.heads * cfg.levels * cfg.points;
    for i in 0..cfg.layers {
        let p = format!("train.sse.msda.layers.{i}");
        // offsets start at zero and weights start uniform
        nn::init_linear_zero(ps, &format!("{p}.off"), d, slots * 2);
        nn::init_linear_zero(ps, &format!("{p}.att"), d, slots);
        nn::init_linear(ps, &mut r, &format!("{p}.out"), d, d);
        nn::init_layer_norm(ps, &format!("{p}.ln"), d);
    }
}

/// Eq-1 style fusion: LayerNorm(P_V(F_clip) + P_C(F_cnn32)) over channels,
/// token-major output `[g^2, fusion_dim]`.
pub fn project_and_fuse<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    f_clip: Option<NodeId>,
    f_cnn32: NodeId,
) -> Result<NodeId> {
    let s32 = g.shape(f_cnn32).to_vec();
    let grid = s32[1];
    let cnn_tokens = nn::grid_to_tokens(g, f_cnn32)?;
    let pc = nn::linear(g, ps, "train.sse.p_c", cnn_tokens)?;
    let pre = match f_clip {
        Some(clip) => {
            let n_v = g.shape(clip)[0];
            if n_v != grid * grid {
                return Err(CoreError::Alignment(format!(
                    "ViT tokens {n_v} do not tile the {grid}x{grid} CNN grid"
                )));
            }
            let pv = nn::linear(g, ps, "train.sse.p_v", clip)?;
            g.add(pv, pc)?
        }
        None => pc,
    };
    Ok(nn::layer_norm(g, ps, "train.sse.fuse_ln", pre)?)
}

/// Per-layer deformable attention artifacts kept for invariant checks.
pub struct DeformLayerOut {
    pub refined: NodeId,
    /// Head-concatenated sampled aggregate before the output projection.
    pub aggregated: NodeId,
    /// Softmaxed sampling weights `[n_q, heads*levels*points]`.
    pub weights: NodeId,
    /// Raw offsets `[n_q, heads*levels*points*2]` (pre grid normalization).
    pub offsets: NodeId,
    /// Reference points `[n_q, 2]`.
    pub refs: NodeId,
}

/// Reference points: each query's own normalized cell center.
fn reference_points<F: Real>(g: &mut Graph<F>, sides: &[usize]) -> Result<NodeId> {
    let mut data = Vec::new();
    for &side in sides {
        for i in 0..side {
            for j in 0..side {
                data.push(F::from_f64((j as f64 + 0.5) / side as f64));
                data.push(F::from_f64((i as f64 + 0.5) / side as f64));
            }
        }
    }
    let n = data.len() / 2;
    Ok(g.constant(vec![n, 2], data)?)
}

/// One deformable attention layer over the concatenated pyramid tokens.
pub fn deform_attn_layer<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    name: &str,
    cfg: &SseConfig,
    x: NodeId,
    sides: &[usize],
    refs: NodeId,
) -> Result<DeformLayerOut> {
    let d = cfg.fusion_dim;
    let (heads, k_points) = (cfg.heads, cfg.points);
    let levels = sides.len();
    if levels != cfg.levels {
        return Err(CoreError::Config(format!(
            "pyramid depth {levels} != configured levels {}",
            cfg.levels
        )));
    }
    let dh = d / heads;
    let n_q = g.shape(x)[0];

    let offsets = nn::linear(g, ps, &format!("{name}.off"), x)?;
    let att_raw = nn::linear(g, ps, &format!("{name}.att"), x)?;
    let att_flat = g.reshape(att_raw, vec![n_q * heads, levels * k_points])?;
    let att_norm = g.softmax(att_flat, 1)?;
    let att = g.reshape(att_norm, vec![n_q, heads * levels * k_points])?;

    // shared per-level value projections, reshaped to [heads, n_l, dh]
    let mut level_offsets = Vec::with_capacity(levels);
    let mut acc = 0usize;
    for &side in sides {
        level_offsets.push(acc);
        acc += side * side;
    }
    let mut values = Vec::with_capacity(levels);
    for (l, &side) in sides.iter().enumerate() {
        let n_l = side * side;
        let x_l = g.slice(x, 0, level_offsets[l], n_l)?;
        let v_l = nn::linear(g, ps, &format!("train.sse.msda.val{l}"), x_l)?;
        let v_heads = g.reshape(v_l, vec![n_l, heads, dh])?;
        values.push(g.permute3(v_heads, [1, 0, 2])?);
    }
    let aggregated = g.deform_core(&values, sides, offsets, att, refs, heads, k_points)?;
    let projected = nn::linear(g, ps, &format!("{name}.out"), aggregated)?;
    let residual = g.add(x, projected)?;
    let refined = nn::layer_norm(g, ps, &format!("{name}.ln"), residual)?;
    Ok(DeformLayerOut {
        refined,
        aggregated,
        weights: att,
        offsets,
        refs,
    })
}

/// Refine the hybrid pyramid jointly across levels; returns the refined
/// pyramid and per-layer artifacts.
pub fn ms_deform_attn<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &SseConfig,
    pyramid: &FeaturePyramid,
) -> Result<(FeaturePyramid, Vec<DeformLayerOut>)> {
    let sides = pyramid.sides.clone();
    let mut x = g.concat(&pyramid.tokens, 0)?;
    let refs = reference_points(g, &sides)?;
    let mut artifacts = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let out = deform_attn_layer(
            g,
            ps,
            &format!("train.sse.msda.layers.{i}"),
            cfg,
            x,
            &sides,
            refs,
        )?;
        x = out.refined;
        artifacts.push(out);
    }
    let mut tokens = Vec::with_capacity(sides.len());
    let mut start = 0usize;
    for &side in &sides {
        let n_l = side * side;
        tokens.push(g.slice(x, 0, start, n_l)?);
        start += n_l;
    }
    Ok((
        FeaturePyramid {
            tokens,
            sides,
        },
        artifacts,
    ))
}

/// Full visual trunk: encoders + fusion + pyramid refinement, or the
/// ablation routings.
pub fn sse_forward<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &SseConfig,
    vit_cfg: &VitConfig,
    cnn_cfg: &CnnConfig,
    variant: EncoderVariant,
    image: NodeId,
) -> Result<VisualFeatures> {
    let cnn = encoders::encode_cnn(g, ps, cnn_cfg, image)?;
    match variant {
        EncoderVariant::VitOnly => {
            let clip = encoders::encode_image_vit(g, ps, vit_cfg, image)?;
            let v32 = nn::linear(g, ps, "train.sse.p_v", clip)?;
            Ok(VisualFeatures {
                v32,
                side32: cnn.side32,
                skip16: cnn.f16,
                skip8: cnn.f8,
            })
        }
        EncoderVariant::Full | EncoderVariant::CnnOnly => {
            let clip = if variant == EncoderVariant::Full {
                Some(encoders::encode_image_vit(g, ps, vit_cfg, image)?)
            } else {
                None
            };
            let fused32 = project_and_fuse(g, ps, clip, cnn.f32s)?;
            let t8_raw = nn::grid_to_tokens(g, cnn.f8)?;
            let t8 = nn::linear(g, ps, "train.sse.lvl8", t8_raw)?;
            let t16_raw = nn::grid_to_tokens(g, cnn.f16)?;
            let t16 = nn::linear(g, ps, "train.sse.lvl16", t16_raw)?;
            let pyramid = FeaturePyramid {
                tokens: vec![t8, t16, fused32],
                sides: vec![cnn.side8, cnn.side16, cnn.side32],
            };
            let (refined, _) = ms_deform_attn(g, ps, cfg, &pyramid)?;
            let skip8 = nn::tokens_to_grid(g, refined.tokens[0], cnn.side8, cnn.side8)?;
            let skip16 = nn::tokens_to_grid(g, refined.tokens[1], cnn.side16, cnn.side16)?;
            Ok(VisualFeatures {
                v32: refined.tokens[2],
                side32: cnn.side32,
                skip16,
                skip8,
            })
        }
    }
}
