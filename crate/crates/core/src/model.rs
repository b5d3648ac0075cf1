//! Full network assembly: encoders -> SSE -> DATE -> VLCM -> cost decoder.

use serde::{Deserialize, Serialize};
use tgc_tensor::{Graph, NodeId, ParamStore, Real, Tensor};

use crate::date::{self, DateConfig, DateVariant};
use crate::decoder::{self, DecoderConfig};
use crate::encoders::{self, CnnConfig, TextConfig, VitConfig};
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::sse::{self, EncoderVariant, SseConfig};
use crate::synth::PromptPair;
use crate::vlcm::{self, VlcmConfig, VlcmVariant};
use crate::vocab::Tokenizer;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub text: TextConfig,
    pub cnn: CnnConfig,
    pub sse: SseConfig,
    pub date: DateConfig,
    pub vlcm: VlcmConfig,
    pub decoder: DecoderConfig,
    pub encoder_variant: EncoderVariant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.text.validate()?;
        self.sse.validate()?;
        let g32 = self.vit.image_size / self.cnn.factor32();
        if self.vit.grid() != g32 {
            return Err(CoreError::Config(format!(
                "ViT grid {} must equal the 1/32 CNN grid {g32}",
                self.vit.grid()
            )));
        }
        if self.vlcm.dim != self.sse.fusion_dim {
            return Err(CoreError::Config(format!(
                "calibration dim {} must match fusion dim {}",
                self.vlcm.dim, self.sse.fusion_dim
            )));
        }
        if self.sse.levels != 3 {
            return Err(CoreError::Config(format!(
                "pyramid is three levels, config says {}",
                self.sse.levels
            )));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.text.context_length)
    }
}

/// Register every parameter the configured model needs. Deterministic for a
/// fixed `(config, seed)`.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut ps = ParamStore::new();
    let mut rng = Rng::new(seed);
    encoders::init_vit(&mut ps, &mut rng, &cfg.vit);
    encoders::init_text(&mut ps, &mut rng, &cfg.text);
    encoders::init_cnn(&mut ps, &mut rng, &cfg.cnn);
    sse::init_sse(
        &mut ps,
        &mut rng,
        &cfg.sse,
        cfg.encoder_variant,
        cfg.vit.embed_dim,
        &cfg.cnn,
    );
    if cfg.date.variant == DateVariant::Inject {
        date::init_date(&mut ps, &mut rng, cfg.text.embed_dim);
    }
    vlcm::init_vlcm(&mut ps, &mut rng, &cfg.vlcm, cfg.text.embed_dim);
    let (skip16_ch, skip8_ch) = sse::skip_channels(cfg.encoder_variant, &cfg.sse, &cfg.cnn);
    decoder::init_decoder(
        &mut ps,
        &mut rng,
        &cfg.decoder,
        cfg.vlcm.dim,
        skip16_ch,
        skip8_ch,
    );
    Ok(ps)
}

/// Everything a caller may want from one forward pass.
pub struct ForwardArtifacts {
    pub logits: NodeId,
    pub cost: NodeId,
    pub cost_side: usize,
    pub l_eff: usize,
    pub zero_norm_rows: usize,
}

/// Run the full pipeline on one image/prompt pair.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
    image: &[F],
    prompts: &PromptPair,
) -> Result<ForwardArtifacts> {
    let hw = cfg.vit.image_size;
    let image_node = g.leaf(Tensor::from_vec(vec![1, hw, hw], image.to_vec())?);
    let visual = sse::sse_forward(
        g,
        ps,
        &cfg.sse,
        &cfg.vit,
        &cfg.cnn,
        cfg.encoder_variant,
        image_node,
    )?;
    let text = date::encode_prompts(g, ps, &cfg.date, &cfg.text, tokenizer, prompts)?;
    let calibrated = vlcm::calibrate(g, ps, &cfg.vlcm, visual.v32, text.tokens, &text.mask)?;
    let (cost, zero_norm_rows) = decoder::cost_volume(g, calibrated.visual, calibrated.text, &text.mask)?;
    let l_eff = g.shape(cost)[1];
    let agg = decoder::aggregate(
        g,
        ps,
        &cfg.decoder,
        cost,
        calibrated.visual,
        visual.side32,
    )?;
    let logits = decoder::upsample_decode(g, ps, agg.grid, visual.skip16, visual.skip8, (hw, hw))?;
    Ok(ForwardArtifacts {
        logits,
        cost,
        cost_side: visual.side32,
        l_eff,
        zero_norm_rows,
    })
}

/// A small full-pipeline configuration for gradient checks and fast tests:
/// 16x16 images, 1/32-equivalent grid of 2x2.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        vit: VitConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            layers: 1,
            heads: 2,
        },
        text: TextConfig {
            vocab_size: 64,
            context_length: 24,
            embed_dim: 8,
            layers: 1,
            heads: 2,
        },
        cnn: CnnConfig {
            c8: 8,
            c16: 8,
            c32: 16,
            stem_blocks: 1,
        },
        sse: SseConfig {
            fusion_dim: 16,
            heads: 2,
            points: 2,
            levels: 3,
            layers: 1,
        },
        date: DateConfig {
            heads: 2,
            variant: DateVariant::Inject,
        },
        vlcm: VlcmConfig {
            dim: 16,
            heads: 2,
            variant: VlcmVariant::Gated,
        },
        decoder: DecoderConfig { d_agg: 8, blocks: 1 },
        encoder_variant: EncoderVariant::Full,
    }
}
