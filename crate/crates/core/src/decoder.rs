//! Cost-Aggregating Decoder.
//!
//! Builds the pixel-text cosine cost volume from calibrated features,
//! refines it with alternating spatial (3x3 conv, replicate padding) and
//! token (self-attention over text slots) blocks, then upsamples through
//! the SSE skip features to full-resolution logits.

use serde::{Deserialize, Serialize};
use tgc_tensor::{Graph, NodeId, ParamStore, Real};

use crate::error::{CoreError, Result};
use crate::nn;
use crate::rng::Rng;

pub const COSINE_EPS: f64 = 1e-8;
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_agg: usize,
    pub blocks: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_agg: 64,
            blocks: 2,
        }
    }
}

pub fn init_decoder<F: Real>(
    ps: &mut ParamStore<F>,
    rng: &mut Rng,
    cfg: &DecoderConfig,
    d_c: usize,
    skip16_ch: usize,
    skip8_ch: usize,
) {
    let mut r = rng.fork(0xdec);
    let d = cfg.d_agg;
    nn::init_linear(ps, &mut r, "train.dec.cost_embed", 1, d);
    // cosine entries live in [-1,1]; a unit-scale embedding keeps the text
    // signal comparable to the guidance features from the first step
    if let Some(p) = ps.get_mut("train.dec.cost_embed.w") {
        for v in p.data.iter_mut() {
            *v = F::from_f64(v.to_f64() * 6.0);
        }
    }
    nn::init_linear(ps, &mut r, "train.dec.guid", d_c, d);
    nn::init_linear(ps, &mut r, "train.dec.fuse", 2 * d, d);
    for i in 0..cfg.blocks {
        let p = format!("train.dec.blocks.{i}");
        nn::init_conv(ps, &mut r, &format!("{p}.conv"), d, d, 3);
        nn::init_layer_norm(ps, &format!("{p}.ln_s"), d);
        for part in ["wq", "wk", "wv", "wo"] {
            nn::init_linear(ps, &mut r, &format!("{p}.attn.{part}"), d, d);
        }
        nn::init_layer_norm(ps, &format!("{p}.ln_t"), d);
    }
    nn::init_linear(ps, &mut r, "train.dec.skip16", skip16_ch, d);
    nn::init_linear(ps, &mut r, "train.dec.skip8", skip8_ch, d);
    nn::init_conv(ps, &mut r, "train.dec.up16", 2 * d, d, 3);
    nn::init_conv(ps, &mut r, "train.dec.up8", 2 * d, d, 3);
    nn::init_conv(ps, &mut r, "train.dec.head", d, 1, 1);
}

/// Cosine-similarity cost volume `[N_v, L_eff]` between visual tokens and
/// the non-PAD prefix of the text tokens. Returns the node and the count of
/// zero-norm rows that hit the epsilon floor (callers log nonzero counts).
pub fn cost_volume<F: Real>(
    g: &mut Graph<F>,
    visual: NodeId,
    text: NodeId,
    text_mask: &[bool],
) -> Result<(NodeId, usize)> {
    let l_eff = text_mask.iter().take_while(|&&m| m).count();
    if l_eff == 0 {
        return Err(CoreError::DegenerateContext(
            "cost volume needs at least one non-PAD text token".into(),
        ));
    }
    let text_eff = g.slice(text, 0, 0, l_eff)?;
    let mut floored = 0usize;
    for id in [visual, text_eff] {
        let d = g.shape(id)[1];
        for row in g.data(id).chunks(d) {
            let norm: f64 = row.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
            if norm <= COSINE_EPS {
                floored += 1;
            }
        }
    }
    let vn = g.normalize_rows(visual, COSINE_EPS)?;
    let tn = g.normalize_rows(text_eff, COSINE_EPS)?;
    let tt = g.transpose(tn)?;
    let cost = g.matmul(vn, tt)?;
    Ok((cost, floored))
}

pub struct AggregateOut {
    pub grid: NodeId,
    /// Token self-attention weights of the last block `[N_v, L_eff, L_eff]`.
    pub token_attn: Option<NodeId>,
}

/// Embed the cost volume, concatenate projected guidance, and refine with
/// alternating spatial and token blocks; mean over token slots yields a
/// `[d_agg, g, g]` map.
pub fn aggregate<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &DecoderConfig,
    cost: NodeId,
    guidance: NodeId,
    side: usize,
) -> Result<AggregateOut> {
    let n = g.shape(cost)[0];
    let l_eff = g.shape(cost)[1];
    let d = cfg.d_agg;
    if n != side * side {
        return Err(CoreError::Alignment(format!(
            "cost volume rows {n} do not tile a {side}x{side} grid"
        )));
    }
    let flat = g.reshape(cost, vec![n * l_eff, 1])?;
    let embedded = nn::linear(g, ps, "train.dec.cost_embed", flat)?;
    let guid = nn::linear(g, ps, "train.dec.guid", guidance)?;
    let guid_rows = g.reshape(guid, vec![n, 1, d])?;
    let guid_rep = g.repeat(guid_rows, 1, l_eff)?;
    let emb3 = g.reshape(embedded, vec![n, l_eff, d])?;
    let joint = g.concat(&[emb3, guid_rep], 2)?;
    let joint_flat = g.reshape(joint, vec![n * l_eff, 2 * d])?;
    let fused = nn::linear(g, ps, "train.dec.fuse", joint_flat)?;
    let mut h = g.reshape(fused, vec![n, l_eff, d])?;
    let mut token_attn = None;
    for i in 0..cfg.blocks {
        let p = format!("train.dec.blocks.{i}");
        // spatial 3x3 conv per token slot, replicate padding so a constant
        // volume stays constant
        let perm = g.permute3(h, [1, 2, 0])?; // [L, d, N]
        let grids = g.reshape(perm, vec![l_eff, d, side, side])?;
        let padded = g.pad_replicate2d(grids, 1)?;
        let wc = g.param(ps, &format!("{p}.conv.w"))?;
        let bc = g.param(ps, &format!("{p}.conv.b"))?;
        let conv = g.conv2d(padded, wc, Some(bc), 1, 0)?;
        let conv_flat = g.reshape(conv, vec![l_eff, d, n])?;
        let conv_tokens = g.permute3(conv_flat, [2, 0, 1])?; // [N, L, d]
        let res_s = g.add(h, conv_tokens)?;
        h = nn::layer_norm(g, ps, &format!("{p}.ln_s"), res_s)?;

        // token self-attention per spatial site (single head, batched)
        let q = nn::linear(g, ps, &format!("{p}.attn.wq"), h)?;
        let k = nn::linear(g, ps, &format!("{p}.attn.wk"), h)?;
        let v = nn::linear(g, ps, &format!("{p}.attn.wv"), h)?;
        let kt = g.permute3(k, [0, 2, 1])?;
        let scores_raw = g.matmul(q, kt)?;
        let scores = g.scale(scores_raw, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let ctx = g.matmul(attn, v)?;
        let out = nn::linear(g, ps, &format!("{p}.attn.wo"), ctx)?;
        let res_t = g.add(h, out)?;
        h = nn::layer_norm(g, ps, &format!("{p}.ln_t"), res_t)?;
        token_attn = Some(attn);
    }
    let pooled = g.mean_axis(h, 1)?; // [N, d]
    let grid = nn::tokens_to_grid(g, pooled, side, side)?;
    Ok(AggregateOut { grid, token_attn })
}

/// Two upsample+skip stages, then a final bilinear resize and 1x1 conv to
/// single-channel logits `[H, W]`.
pub fn upsample_decode<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    agg: NodeId,
    skip16: NodeId,
    skip8: NodeId,
    out_hw: (usize, usize),
) -> Result<NodeId> {
    let s = g.shape(agg).to_vec();
    let d = s[0];
    let mut x = g.reshape(agg, vec![1, d, s[1], s[2]])?;
    for (skip, name, conv) in [
        (skip16, "train.dec.skip16", "train.dec.up16"),
        (skip8, "train.dec.skip8", "train.dec.up8"),
    ] {
        let xs = g.shape(x).to_vec();
        let up = g.upsample_bilinear(x, xs[2] * 2, xs[3] * 2)?;
        let sk = g.shape(skip).to_vec();
        if sk[1] != xs[2] * 2 || sk[2] != xs[3] * 2 {
            return Err(CoreError::Tensor(tgc_tensor::TensorError::ShapeMismatch {
                op: "upsample_decode skip",
                lhs: vec![xs[2] * 2, xs[3] * 2],
                rhs: vec![sk[1], sk[2]],
            }));
        }
        let tokens = nn::grid_to_tokens(g, skip)?;
        let proj = nn::linear(g, ps, name, tokens)?;
        let proj_grid = nn::tokens_to_grid(g, proj, sk[1], sk[2])?;
        let proj_b = g.reshape(proj_grid, vec![1, d, sk[1], sk[2]])?;
        let cat = g.concat(&[up, proj_b], 1)?;
        let wc = g.param(ps, &format!("{conv}.w"))?;
        let bc = g.param(ps, &format!("{conv}.b"))?;
        let c = g.conv2d(cat, wc, Some(bc), 1, 1)?;
        x = g.relu(c);
    }
    let (h, w) = out_hw;
    let up_full = g.upsample_bilinear(x, h, w)?;
    let wh = g.param(ps, "train.dec.head.w")?;
    let bh = g.param(ps, "train.dec.head.b")?;
    let logits = g.conv2d(up_full, wh, Some(bh), 1, 0)?;
    Ok(g.reshape(logits, vec![h, w])?)
}

/// Sigmoid + 0.5 threshold; the tie (logit exactly 0) maps to foreground.
pub fn predict_mask<F: Real>(logits: &[F]) -> Vec<bool> {
    logits.iter().map(|z| z.to_f64() >= 0.0).collect()
}

/// Combined loss: 0.5 * Dice loss + 0.5 * pixelwise BCE.
pub fn segmentation_loss<F: Real>(
    g: &mut Graph<F>,
    logits: NodeId,
    target: &[bool],
) -> Result<NodeId> {
    let n = g.value(logits).numel();
    if target.len() != n {
        return Err(CoreError::Config(format!(
            "target has {} pixels, logits {n}",
            target.len()
        )));
    }
    let targets_f: Vec<f64> = target.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let bce = g.bce_with_logits_mean(logits, &targets_f)?;

    let flat = g.reshape(logits, vec![n])?;
    let probs = g.sigmoid(flat);
    let t_const = g.constant(
        vec![n],
        targets_f.iter().map(|&v| F::from_f64(v)).collect(),
    )?;
    let inter_el = g.mul(probs, t_const)?;
    let inter = g.sum_all(inter_el);
    let p_sum = g.sum_all(probs);
    let t_sum: f64 = targets_f.iter().sum();
    let num_raw = g.scale(inter, 2.0);
    let eps = g.scalar_const(F::from_f64(DICE_EPS));
    let num = g.add(num_raw, eps)?;
    let t_sum_node = g.scalar_const(F::from_f64(t_sum + DICE_EPS));
    let den_raw = g.add(p_sum, t_sum_node)?;
    let ratio = g.div(num, den_raw)?;
    let neg = g.scale(ratio, -1.0);
    let one = g.scalar_const(F::ONE);
    let dice = g.add(one, neg)?;

    let sum = g.add(dice, bce)?;
    Ok(g.scale(sum, 0.5))
}
