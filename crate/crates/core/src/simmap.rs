//! Text-image similarity heatmaps.
//!
//! Mean cost-volume slice over non-PAD tokens, reshaped to the 1/32 grid,
//! bilinearly upsampled to image resolution, min-max normalized to a PGM.
//! The raw variant computes the same map from the frozen encoders alone,
//! for the adapted-vs-raw comparison.

use tgc_tensor::{Graph, ParamStore};

use crate::decoder;
use crate::encoders;
use crate::error::{CoreError, Result};
use crate::model::{self, ModelConfig};
use crate::synth::SampleRecord;
use crate::vocab::Tokenizer;

/// Min-max normalize to u8; a zero range maps to mid-gray 128.
pub fn normalize_to_u8(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(hi - lo).is_finite() || hi - lo < 1e-12 {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

/// Heatmap at image resolution. `with_adapters` runs the full pipeline;
/// otherwise the cost volume comes straight from the frozen encoders.
pub fn similarity_heatmap(
    ps: &ParamStore<f32>,
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
    record: &SampleRecord,
    with_adapters: bool,
) -> Result<Vec<u8>> {
    let hw = cfg.vit.image_size;
    if record.height != hw || record.width != hw {
        return Err(CoreError::Config(format!(
            "record is {}x{}, model expects {hw}x{hw}",
            record.height, record.width
        )));
    }
    let mut g: Graph<f32> = Graph::new();
    let (cost, side) = if with_adapters {
        let art = model::forward(&mut g, ps, cfg, tokenizer, &record.image_f32(), &record.prompts)?;
        (art.cost, art.cost_side)
    } else {
        if cfg.vit.embed_dim != cfg.text.embed_dim {
            return Err(CoreError::Config(
                "raw similarity needs matching image/text embed dims".into(),
            ));
        }
        let img = g.constant(vec![1, hw, hw], record.image_f32())?;
        let clip = encoders::encode_image_vit(&mut g, ps, &cfg.vit, img)?;
        let tok = &record.prompts.primary_tok;
        let text = encoders::encode_text(&mut g, ps, &cfg.text, &tok.ids, &tok.mask)?;
        let (cost, _) = decoder::cost_volume(&mut g, clip, text, &tok.mask)?;
        (cost, cfg.vit.grid())
    };
    let mean = g.mean_axis(cost, 1)?; // [side^2]
    let grid = g.reshape(mean, vec![1, side, side])?;
    let up = g.upsample_bilinear(grid, hw, hw)?;
    Ok(normalize_to_u8(g.data(up)))
}

/// Mean heatmap intensity inside vs outside a mask.
pub fn mask_contrast(heatmap: &[u8], mask: &[bool]) -> (f64, f64) {
    let mut in_sum = 0f64;
    let mut in_n = 0usize;
    let mut out_sum = 0f64;
    let mut out_n = 0usize;
    for (&h, &m) in heatmap.iter().zip(mask) {
        if m {
            in_sum += h as f64;
            in_n += 1;
        } else {
            out_sum += h as f64;
            out_n += 1;
        }
    }
    (
        in_sum / in_n.max(1) as f64,
        out_sum / out_n.max(1) as f64,
    )
}
