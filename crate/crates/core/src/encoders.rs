//! Toy stand-ins for the frozen CLIP image/text encoders and the trainable
//! CNN branch.
//!
//! The ViT keeps only patch tokens (no class token): downstream fusion needs
//! a grid-shaped feature map. Both encoders register their weights under the
//! `frozen.` prefix; whether the flag is actually frozen is decided by the
//! pre-alignment phase and the training protocol, not here.

use serde::{Deserialize, Serialize};
use tgc_tensor::{Graph, NodeId, ParamStore, Real};

use crate::error::{CoreError, Result};
use crate::nn;
use crate::rng::Rng;
use crate::vocab::Tokenizer;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 256,
            patch_size: 32,
            embed_dim: 64,
            layers: 4,
            heads: 4,
        }
    }
}

impl VitConfig {
    /// Patch-token grid side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(CoreError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "vit embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: 64,
            context_length: 32,
            embed_dim: 64,
            layers: 2,
            heads: 4,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < Tokenizer::vocab_size() {
            return Err(CoreError::Config(format!(
                "vocab_size {} smaller than grammar vocabulary {}",
                self.vocab_size,
                Tokenizer::vocab_size()
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "text embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub c8: usize,
    pub c16: usize,
    pub c32: usize,
    /// Number of 2x downsampling blocks before the first pyramid level;
    /// 3 puts the first level at 1/8 scale.
    pub stem_blocks: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            c8: 32,
            c16: 64,
            c32: 128,
            stem_blocks: 3,
        }
    }
}

impl CnnConfig {
    pub fn factor8(&self) -> usize {
        1 << self.stem_blocks
    }

    pub fn factor32(&self) -> usize {
        self.factor8() * 4
    }

    fn stem_channels(&self) -> Vec<usize> {
        (0..self.stem_blocks)
            .map(|i| (self.c8 >> (self.stem_blocks - 1 - i)).max(4))
            .collect()
    }
}

/// Three-level trainable feature pyramid.
pub struct CnnPyramid {
    pub f8: NodeId,
    pub f16: NodeId,
    pub f32s: NodeId,
    pub side8: usize,
    pub side16: usize,
    pub side32: usize,
}

// ── ViT image encoder ───────────────────────────────────────────────────

pub fn init_vit<F: Real>(ps: &mut ParamStore<F>, rng: &mut Rng, cfg: &VitConfig) {
    let patch_dim = cfg.patch_size * cfg.patch_size;
    let mut r = rng.fork(0x71);
    nn::init_linear(ps, &mut r, "frozen.vit.patch", patch_dim, cfg.embed_dim);
    nn::init_embedding(ps, &mut r, "frozen.vit.pos", cfg.tokens(), cfg.embed_dim);
    for i in 0..cfg.layers {
        nn::init_transformer_block(ps, &mut r, &format!("frozen.vit.blocks.{i}"), cfg.embed_dim, 4);
    }
    nn::init_layer_norm(ps, "frozen.vit.ln_f", cfg.embed_dim);
}

/// Patch-token features `[N_v, D_v]` for a `[1, H, W]` image.
pub fn encode_image_vit<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &VitConfig,
    image: NodeId,
) -> Result<NodeId> {
    let s = g.shape(image).to_vec();
    if s != [1, cfg.image_size, cfg.image_size] {
        return Err(CoreError::Config(format!(
            "vit expects [1, {0}, {0}] image, got {s:?}",
            cfg.image_size
        )));
    }
    let patches = g.patch_extract(image, cfg.patch_size)?;
    let embedded = nn::linear(g, ps, "frozen.vit.patch", patches)?;
    let pos = g.param(ps, "frozen.vit.pos")?;
    let mut x = g.add(embedded, pos)?;
    for i in 0..cfg.layers {
        x = nn::transformer_block(g, ps, &format!("frozen.vit.blocks.{i}"), cfg.heads, x, None)?;
    }
    Ok(nn::layer_norm(g, ps, "frozen.vit.ln_f", x)?)
}

// ── text encoder ────────────────────────────────────────────────────────

pub fn init_text<F: Real>(ps: &mut ParamStore<F>, rng: &mut Rng, cfg: &TextConfig) {
    let mut r = rng.fork(0x72);
    nn::init_embedding(ps, &mut r, "frozen.txt.tok", cfg.vocab_size, cfg.embed_dim);
    nn::init_embedding(ps, &mut r, "frozen.txt.pos", cfg.context_length, cfg.embed_dim);
    for i in 0..cfg.layers {
        nn::init_transformer_block(ps, &mut r, &format!("frozen.txt.blocks.{i}"), cfg.embed_dim, 4);
    }
    nn::init_layer_norm(ps, "frozen.txt.ln_f", cfg.embed_dim);
}

/// Per-token features `[L, D_t]`; PAD positions are masked out of attention
/// via the validity mask.
pub fn encode_text<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &TextConfig,
    ids: &[usize],
    mask: &[bool],
) -> Result<NodeId> {
    if ids.len() != cfg.context_length {
        return Err(CoreError::Config(format!(
            "token sequence length {} != context length {}",
            ids.len(),
            cfg.context_length
        )));
    }
    let table = g.param(ps, "frozen.txt.tok")?;
    let tok = g.embedding(table, ids)?;
    let pos = g.param(ps, "frozen.txt.pos")?;
    let mut x = g.add(tok, pos)?;
    let bias = nn::key_bias_from_mask(g, mask)?;
    for i in 0..cfg.layers {
        x = nn::transformer_block(
            g,
            ps,
            &format!("frozen.txt.blocks.{i}"),
            cfg.heads,
            x,
            Some(bias),
        )?;
    }
    Ok(nn::layer_norm(g, ps, "frozen.txt.ln_f", x)?)
}

// ── CNN branch ──────────────────────────────────────────────────────────

pub fn init_cnn<F: Real>(ps: &mut ParamStore<F>, rng: &mut Rng, cfg: &CnnConfig) {
    let mut r = rng.fork(0x73);
    let mut c_in = 1usize;
    for (i, c_out) in cfg.stem_channels().into_iter().enumerate() {
        init_down_block(ps, &mut r, &format!("train.cnn.stem{i}"), c_in, c_out);
        c_in = c_out;
    }
    init_down_block(ps, &mut r, "train.cnn.down16", cfg.c8, cfg.c16);
    init_down_block(ps, &mut r, "train.cnn.down32", cfg.c16, cfg.c32);
}

/// 2x downsampling block: 2x2 patch merge (linear) + 3x3 conv + relu.
/// Exact halving, since a strided odd-kernel conv cannot halve an even
/// extent under the integral-output rule.
fn init_down_block<F: Real>(
    ps: &mut ParamStore<F>,
    rng: &mut Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) {
    nn::init_linear(ps, rng, &format!("{name}.merge"), c_in * 4, c_out);
    nn::init_conv(ps, rng, &format!("{name}.conv"), c_out, c_out, 3);
}

fn down_block<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    name: &str,
    x: NodeId, // [c, h, w]
) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[1], s[2]);
    let merged = g.patch_extract(x, 2)?; // [(h/2)*(w/2), 4c]
    let projected = nn::linear(g, ps, &format!("{name}.merge"), merged)?;
    let c_out = g.shape(projected)[1];
    let grid = nn::tokens_to_grid(g, projected, h / 2, w / 2)?;
    let batched = g.reshape(grid, vec![1, c_out, h / 2, w / 2])?;
    let wn = g.param(ps, &format!("{name}.conv.w"))?;
    let bn = g.param(ps, &format!("{name}.conv.b"))?;
    let conv = g.conv2d(batched, wn, Some(bn), 1, 1)?;
    let act = g.relu(conv);
    Ok(g.reshape(act, vec![c_out, h / 2, w / 2])?)
}

/// Three-level pyramid from a `[1, H, W]` image; spatial dims halve exactly
/// between levels.
pub fn encode_cnn<F: Real>(
    g: &mut Graph<F>,
    ps: &ParamStore<F>,
    cfg: &CnnConfig,
    image: NodeId,
) -> Result<CnnPyramid> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != 1 {
        return Err(CoreError::Config(format!("cnn expects [1,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let f = cfg.factor32();
    if h % f != 0 || w % f != 0 || h != w {
        return Err(CoreError::Config(format!(
            "cnn image {h}x{w} not divisible by total stride {f}"
        )));
    }
    let mut x = image;
    for i in 0..cfg.stem_blocks {
        x = down_block(g, ps, &format!("train.cnn.stem{i}"), x)?;
    }
    let side8 = h / cfg.factor8();
    let f8 = x;
    let f16 = down_block(g, ps, "train.cnn.down16", f8)?;
    let f32s = down_block(g, ps, "train.cnn.down32", f16)?;
    Ok(CnnPyramid {
        f8,
        f16,
        f32s,
        side8,
        side16: side8 / 2,
        side32: side8 / 4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tgc_tensor::Tensor;

    fn image_leaf(g: &mut Graph<f32>, size: usize, seed: u64) -> NodeId {
        let mut rng = Rng::new(seed);
        let data: Vec<f32> = (0..size * size).map(|_| rng.uniform() as f32).collect();
        g.leaf(Tensor::from_vec(vec![1, size, size], data).unwrap())
    }

    fn small_vit() -> VitConfig {
        VitConfig {
            image_size: 64,
            patch_size: 16,
            embed_dim: 16,
            layers: 1,
            heads: 2,
        }
    }

    #[test]
    fn vit_output_shape_matches_config_arithmetic() {
        let cfg = VitConfig::default();
        assert_eq!(cfg.tokens(), 64);
        let small = small_vit();
        let mut ps = ParamStore::new();
        init_vit(&mut ps, &mut Rng::new(1), &small);
        let mut g: Graph<f32> = Graph::new();
        let img = image_leaf(&mut g, 64, 2);
        let out = encode_image_vit(&mut g, &ps, &small, img).unwrap();
        assert_eq!(g.shape(out), &[16, 16]);
    }

    #[test]
    fn vit_is_deterministic_and_input_sensitive() {
        let cfg = small_vit();
        let mut ps = ParamStore::new();
        init_vit(&mut ps, &mut Rng::new(1), &cfg);
        let run = |seed: u64| {
            let mut g: Graph<f32> = Graph::new();
            let img = image_leaf(&mut g, 64, seed);
            let out = encode_image_vit(&mut g, &ps, &cfg, img).unwrap();
            g.data(out).to_vec()
        };
        let a = run(2);
        let b = run(2);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = run(3);
        assert!(a.iter().zip(&c).any(|(x, y)| x != y), "two images collide");
    }

    #[test]
    fn vit_rejects_wrong_image_size() {
        let cfg = small_vit();
        let mut ps = ParamStore::new();
        init_vit(&mut ps, &mut Rng::new(1), &cfg);
        let mut g: Graph<f32> = Graph::new();
        let img = image_leaf(&mut g, 32, 2);
        assert!(encode_image_vit(&mut g, &ps, &cfg, img).is_err());
    }

    #[test]
    fn text_encoder_shape_determinism_and_position_sensitivity() {
        let cfg = TextConfig {
            embed_dim: 16,
            layers: 1,
            heads: 2,
            ..TextConfig::default()
        };
        let mut ps = ParamStore::new();
        init_text(&mut ps, &mut Rng::new(4), &cfg);
        let ids: Vec<usize> = (0..32).map(|i| if i < 6 { 4 + i } else { 0 }).collect();
        let mask: Vec<bool> = (0..32).map(|i| i < 6).collect();
        let run = |ids: &[usize]| {
            let mut g: Graph<f32> = Graph::new();
            let out = encode_text(&mut g, &ps, &cfg, ids, &mask).unwrap();
            assert_eq!(g.shape(out), &[32, 16]);
            g.data(out).to_vec()
        };
        let a = run(&ids);
        let b = run(&ids);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut swapped = ids.clone();
        swapped.swap(1, 2);
        let c = run(&swapped);
        assert!(a.iter().zip(&c).any(|(x, y)| x != y), "position-blind");
    }

    #[test]
    fn text_default_shape_is_32x64() {
        let cfg = TextConfig::default();
        let mut ps = ParamStore::new();
        init_text(&mut ps, &mut Rng::new(4), &cfg);
        let ids = vec![2; 32];
        let mask = vec![true; 32];
        let mut g: Graph<f32> = Graph::new();
        let out = encode_text(&mut g, &ps, &cfg, &ids, &mask).unwrap();
        assert_eq!(g.shape(out), &[32, 64]);
    }

    #[test]
    fn cnn_pyramid_dims_halve() {
        let cfg = CnnConfig::default();
        let mut ps = ParamStore::new();
        init_cnn(&mut ps, &mut Rng::new(5), &cfg);
        let mut g: Graph<f32> = Graph::new();
        let img = image_leaf(&mut g, 256, 6);
        let pyr = encode_cnn(&mut g, &ps, &cfg, img).unwrap();
        assert_eq!(g.shape(pyr.f8), &[32, 32, 32]);
        assert_eq!(g.shape(pyr.f16), &[64, 16, 16]);
        assert_eq!(g.shape(pyr.f32s), &[128, 8, 8]);
        assert_eq!(pyr.side8, 2 * pyr.side16);
        assert_eq!(pyr.side16, 2 * pyr.side32);
    }

    #[test]
    fn cnn_zero_image_is_finite() {
        let cfg = CnnConfig::default();
        let mut ps = ParamStore::new();
        init_cnn(&mut ps, &mut Rng::new(5), &cfg);
        let mut g: Graph<f32> = Graph::new();
        let img = g.constant(vec![1, 64, 64], vec![0.0; 64 * 64]).unwrap();
        let pyr = encode_cnn(&mut g, &ps, &cfg, img).unwrap();
        for id in [pyr.f8, pyr.f16, pyr.f32s] {
            assert!(g.value(id).all_finite());
        }
    }

    #[test]
    fn cnn_rejects_indivisible_size() {
        let cfg = CnnConfig::default();
        let mut ps = ParamStore::new();
        init_cnn(&mut ps, &mut Rng::new(5), &cfg);
        let mut g: Graph<f32> = Graph::new();
        let img = image_leaf(&mut g, 100, 6);
        assert!(encode_cnn(&mut g, &ps, &cfg, img).is_err());
    }
}
