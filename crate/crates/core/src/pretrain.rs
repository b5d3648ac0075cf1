//! Contrastive pre-alignment of the toy image/text encoders.
//!
//! Emulates the pre-aligned CLIP space the full-scale system inherits:
//! mean-pooled patch tokens and the EOS text token are trained with a
//! symmetric InfoNCE loss at fixed temperature, then both encoders are
//! frozen for good.

use std::collections::BTreeMap;

use rayon::prelude::*;
use tgc_tensor::{Graph, NodeId, ParamStore};

use crate::config::PretrainConfig;
use crate::encoders::{self, TextConfig, VitConfig};
use crate::error::{CoreError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::synth::SampleRecord;

/// Mean-pooled image embedding `[1, D]`.
fn image_embedding(
    g: &mut Graph<f32>,
    ps: &ParamStore<f32>,
    cfg: &VitConfig,
    record: &SampleRecord,
) -> Result<NodeId> {
    let image = record.image_f32();
    let img = g.constant(vec![1, record.height, record.width], image)?;
    let tokens = encoders::encode_image_vit(g, ps, cfg, img)?;
    let pooled = g.mean_axis(tokens, 0)?;
    let d = g.shape(pooled)[0];
    Ok(g.reshape(pooled, vec![1, d])?)
}

/// EOS-token text embedding `[1, D]` of the primary prompt.
fn text_embedding(
    g: &mut Graph<f32>,
    ps: &ParamStore<f32>,
    cfg: &TextConfig,
    record: &SampleRecord,
) -> Result<NodeId> {
    let tok = &record.prompts.primary_tok;
    let features = encoders::encode_text(g, ps, cfg, &tok.ids, &tok.mask)?;
    let eos_pos = tok.effective_len() - 1;
    Ok(g.slice(features, 0, eos_pos, 1)?)
}

/// Mean negative log-likelihood of the diagonal under row softmax.
fn nll_diagonal(g: &mut Graph<f32>, logits: NodeId) -> Result<NodeId> {
    let b = g.shape(logits)[0];
    let probs = g.softmax(logits, 1)?;
    let mut eye = vec![0f32; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye_node = g.constant(vec![b, b], eye)?;
    let masked = g.mul(probs, eye_node)?;
    let diag = g.sum_axis(masked, 1)?;
    let logp = g.ln(diag)?;
    let total = g.sum_all(logp);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Train the encoders contrastively, then freeze them. Deterministic for a
/// fixed `(store, config)`.
pub fn pretrain_align(
    store: &mut ParamStore<f32>,
    vit_cfg: &VitConfig,
    text_cfg: &TextConfig,
    records: &[SampleRecord],
    cfg: &PretrainConfig,
) -> Result<()> {
    if cfg.batch < 2 {
        return Err(CoreError::ContrastiveDegenerate(cfg.batch));
    }
    if records.len() < cfg.batch {
        return Err(CoreError::Config(format!(
            "pretraining needs at least {} samples, got {}",
            cfg.batch,
            records.len()
        )));
    }
    store.set_frozen_trainable(true);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = Rng::new(cfg.seed).fork(0xa116);
    let result = (|| -> Result<()> {
        for _step in 1..=cfg.steps {
            let batch: Vec<&SampleRecord> = (0..cfg.batch)
                .map(|_| &records[rng.below(records.len())])
                .collect();
            let mut g: Graph<f32> = Graph::new();
            let mut img_rows = Vec::with_capacity(cfg.batch);
            let mut txt_rows = Vec::with_capacity(cfg.batch);
            for r in &batch {
                img_rows.push(image_embedding(&mut g, store, vit_cfg, r)?);
                txt_rows.push(text_embedding(&mut g, store, text_cfg, r)?);
            }
            let img = g.concat(&img_rows, 0)?;
            let txt = g.concat(&txt_rows, 0)?;
            let img_n = g.normalize_rows(img, 1e-8)?;
            let txt_n = g.normalize_rows(txt, 1e-8)?;
            let txt_t = g.transpose(txt_n)?;
            let sim = g.matmul(img_n, txt_t)?;
            let logits = g.scale(sim, 1.0 / cfg.temperature);
            let loss_i = nll_diagonal(&mut g, logits)?;
            let logits_t = g.transpose(logits)?;
            let loss_t = nll_diagonal(&mut g, logits_t)?;
            let both = g.add(loss_i, loss_t)?;
            let loss = g.scale(both, 0.5);
            g.backward(loss)?;
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, id) in g.bound_params() {
                if let Some(grad) = g.grad(id) {
                    grads.insert(name.to_string(), grad.iter().map(|&v| v as f64).collect());
                }
            }
            adam.step(store, &grads);
        }
        Ok(())
    })();
    store.set_frozen_trainable(false);
    result
}

/// Mean cosine similarity of matched vs mismatched pairs on held-out
/// records (mismatched pairs shift the text index by one).
pub fn alignment_score(
    store: &ParamStore<f32>,
    vit_cfg: &VitConfig,
    text_cfg: &TextConfig,
    records: &[SampleRecord],
) -> Result<(f64, f64)> {
    let embeds: Vec<Result<(Vec<f32>, Vec<f32>)>> = records
        .par_iter()
        .map(|r| {
            let mut g: Graph<f32> = Graph::new();
            let img = image_embedding(&mut g, store, vit_cfg, r)?;
            let txt = text_embedding(&mut g, store, text_cfg, r)?;
            let img_n = g.normalize_rows(img, 1e-8)?;
            let txt_n = g.normalize_rows(txt, 1e-8)?;
            Ok((g.data(img_n).to_vec(), g.data(txt_n).to_vec()))
        })
        .collect();
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = embeds.into_iter().collect::<Result<_>>()?;
    let cos = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    };
    let n = pairs.len();
    let matched = (0..n).map(|i| cos(&pairs[i].0, &pairs[i].1)).sum::<f64>() / n as f64;
    let mismatched = (0..n)
        .map(|i| cos(&pairs[i].0, &pairs[(i + 1) % n].1))
        .sum::<f64>()
        / n as f64;
    Ok((matched, mismatched))
}
