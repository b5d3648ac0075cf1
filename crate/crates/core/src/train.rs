//! Training loop, evaluation, and parameter accounting.
//!
//! One optimizer step is a serial reduction over per-sample gradients that
//! are computed in parallel; the reduction always runs in batch-index order,
//! so results do not depend on thread count. Frozen weights are snapshotted
//! before training and verified bitwise afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use tgc_tensor::{checkpoint, is_frozen_name, Graph, ParamStore};

use crate::config::ExperimentConfig;
use crate::decoder;
use crate::error::{CoreError, Result};
use crate::metrics::{dice_iou, MetricsReport};
use crate::model::{self, ModelConfig};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::synth::{Dataset, SampleRecord};
use crate::vocab::Tokenizer;

// ── parameter accounting ────────────────────────────────────────────────

#[derive(Clone, Debug, Default, Serialize)]
pub struct ModuleCount {
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    pub by_module: BTreeMap<String, ModuleCount>,
}

/// Count parameters by name prefix. The frozen set must be exactly the two
/// encoder namespaces; anything unclassifiable is an accounting error.
pub fn count_params(store: &ParamStore<f32>) -> Result<ParamCounts> {
    let mut counts = ParamCounts {
        trainable: 0,
        frozen: 0,
        total: 0,
        by_module: BTreeMap::new(),
    };
    for (name, p) in store.iter() {
        let n = p.data.len();
        counts.total += n;
        let mut parts = name.split('.');
        let (kind, module) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        let key = format!("{kind}.{module}");
        let entry = counts.by_module.entry(key).or_default();
        match kind {
            "frozen" => {
                if module != "vit" && module != "txt" {
                    return Err(CoreError::Accounting(format!(
                        "frozen tensor '{name}' outside the encoder namespaces"
                    )));
                }
                if p.trainable {
                    return Err(CoreError::Accounting(format!(
                        "frozen tensor '{name}' is marked trainable"
                    )));
                }
                counts.frozen += n;
                entry.frozen += n;
            }
            "train" => {
                if !p.trainable {
                    return Err(CoreError::Accounting(format!(
                        "trainable tensor '{name}' is marked frozen"
                    )));
                }
                counts.trainable += n;
                entry.trainable += n;
            }
            _ => {
                return Err(CoreError::Accounting(format!(
                    "tensor '{name}' has no frozen./train. classification"
                )));
            }
        }
    }
    Ok(counts)
}

// ── evaluation ──────────────────────────────────────────────────────────

struct SampleEval {
    dice: f64,
    iou: f64,
    loss: f64,
}

fn eval_one(
    ps: &ParamStore<f32>,
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
    record: &SampleRecord,
) -> Result<SampleEval> {
    let mut g: Graph<f32> = Graph::new();
    let image = record.image_f32();
    let art = model::forward(&mut g, ps, cfg, tokenizer, &image, &record.prompts)?;
    let gt = record.mask_bits();
    let loss_node = decoder::segmentation_loss(&mut g, art.logits, &gt)?;
    let loss = g.data(loss_node)[0] as f64;
    let pred = decoder::predict_mask(g.data(art.logits));
    let (dice, iou) = dice_iou(&pred, &gt)?;
    Ok(SampleEval { dice, iou, loss })
}

/// Evaluate ordered indices of a dataset; parallel per sample, results
/// collected in index order.
pub fn evaluate(
    ps: &ParamStore<f32>,
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
    indices: &[usize],
    step: usize,
) -> Result<(MetricsReport, f64)> {
    let start = Instant::now();
    let evals: Vec<Result<SampleEval>> = indices
        .par_iter()
        .map(|&i| eval_one(ps, cfg, tokenizer, &dataset.records[i]))
        .collect();
    let mut per_sample = Vec::with_capacity(indices.len());
    let mut loss_sum = 0f64;
    for e in evals {
        let e = e?;
        per_sample.push((e.dice, e.iou));
        loss_sum += e.loss;
    }
    let mean_loss = loss_sum / indices.len().max(1) as f64;
    Ok((
        MetricsReport::from_samples(per_sample, step, start.elapsed().as_secs_f64()),
        mean_loss,
    ))
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct LogLine<'a> {
    step: usize,
    split: &'a str,
    #[serde(rename = "mDice")]
    m_dice: f64,
    #[serde(rename = "mIoU")]
    m_iou: f64,
    loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub best_dice: f64,
    pub best_step: usize,
    pub final_dice: f64,
    pub final_iou: f64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a ExperimentConfig,
    frozen_prefixes: [&'a str; 2],
    trainable_prefix: &'a str,
}

/// Write a checkpoint plus its JSON sidecar recording the config and the
/// frozen/trainable partition.
pub fn save_checkpoint(
    store: &ParamStore<f32>,
    exp: &ExperimentConfig,
    path: &Path,
) -> Result<()> {
    checkpoint::save(store, path)?;
    let sidecar = Sidecar {
        config: exp,
        frozen_prefixes: ["frozen.vit.", "frozen.txt."],
        trainable_prefix: "train.",
    };
    let side_path = path.with_extension("json");
    let body = serde_json::to_string_pretty(&sidecar).expect("sidecar serialize");
    fs::write(&side_path, body).map_err(|e| CoreError::io(&side_path, e))?;
    Ok(())
}

fn grads_of_sample(
    ps: &ParamStore<f32>,
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
    record: &SampleRecord,
) -> Result<(f64, Vec<(String, Vec<f32>)>)> {
    let mut g: Graph<f32> = Graph::new();
    let image = record.image_f32();
    let art = model::forward(&mut g, ps, cfg, tokenizer, &image, &record.prompts)?;
    let gt = record.mask_bits();
    let loss = decoder::segmentation_loss(&mut g, art.logits, &gt)?;
    let loss_val = g.data(loss)[0] as f64;
    g.backward(loss)?;
    let mut grads = Vec::new();
    for (name, id) in g.bound_params() {
        match g.grad(id) {
            Some(grad) => {
                if is_frozen_name(name) {
                    return Err(CoreError::FrozenMutation(format!(
                        "gradient populated on frozen tensor '{name}'"
                    )));
                }
                grads.push((name.to_string(), grad.to_vec()));
            }
            None => {}
        }
    }
    Ok((loss_val, grads))
}

/// Adapter/decoder training with Adam on the combined Dice+BCE loss.
/// Returns the outcome; writes `metrics.jsonl`, `best.tgcl`, `last.tgcl`
/// (plus sidecars) under `out_dir`.
pub fn train(
    exp: &ExperimentConfig,
    dataset: &Dataset,
    store: &mut ParamStore<f32>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let cfg = exp.resolved_model();
    cfg.validate()?;
    let tokenizer = cfg.tokenizer();
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let frozen_before = store.frozen_bytes();

    let log_path = out_dir.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| CoreError::io(&log_path, e))?;

    let val: Vec<usize> = dataset.val_indices().collect();
    let eval_count = if exp.train.eval_samples == 0 {
        val.len()
    } else {
        exp.train.eval_samples.min(val.len())
    };
    let eval_set = &val[..eval_count];

    let mut write_line = |line: &LogLine| -> Result<()> {
        let body = serde_json::to_string(line).expect("log line");
        writeln!(log, "{body}").map_err(|e| CoreError::io(&log_path, e))
    };

    let (report, loss) = evaluate(store, &cfg, &tokenizer, dataset, eval_set, 0)?;
    write_line(&LogLine {
        step: 0,
        split: "val",
        m_dice: report.m_dice,
        m_iou: report.m_iou,
        loss,
    })?;
    let mut best_dice = report.m_dice;
    let mut best_step = 0usize;
    let mut final_dice = report.m_dice;
    let mut final_iou = report.m_iou;
    save_checkpoint(store, exp, &out_dir.join("best.tgcl"))?;

    let train_idx: Vec<usize> = dataset.train_indices().collect();
    if train_idx.is_empty() && exp.train.steps > 0 {
        return Err(CoreError::Config("empty training split".into()));
    }
    let mut adam = Adam::new(exp.train.optimizer);
    let mut batch_rng = Rng::new(exp.train.seed).fork(0xba7c4);

    for step in 1..=exp.train.steps {
        let batch: Vec<usize> = (0..exp.train.batch)
            .map(|_| train_idx[batch_rng.below(train_idx.len())])
            .collect();
        let results: Vec<Result<(f64, Vec<(String, Vec<f32>)>)>> = batch
            .par_iter()
            .map(|&i| grads_of_sample(store, &cfg, &tokenizer, &dataset.records[i]))
            .collect();
        let mut loss_sum = 0f64;
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in results {
            let (loss_val, grads) = r?;
            loss_sum += loss_val;
            for (name, grad) in grads {
                let slot = acc.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
                for (a, g) in slot.iter_mut().zip(&grad) {
                    *a += *g as f64;
                }
            }
        }
        let mean_loss = loss_sum / exp.train.batch as f64;
        if !mean_loss.is_finite() {
            return Err(CoreError::NanLoss {
                step,
                seeds: batch.iter().map(|&i| dataset.records[i].seed).collect(),
            });
        }
        let scale = 1.0 / exp.train.batch as f64;
        for grad in acc.values_mut() {
            for v in grad.iter_mut() {
                *v *= scale;
            }
        }
        adam.step(store, &acc);

        if step % exp.train.eval_every == 0 || step == exp.train.steps {
            let (report, loss) = evaluate(store, &cfg, &tokenizer, dataset, eval_set, step)?;
            write_line(&LogLine {
                step,
                split: "val",
                m_dice: report.m_dice,
                m_iou: report.m_iou,
                loss,
            })?;
            final_dice = report.m_dice;
            final_iou = report.m_iou;
            if report.m_dice > best_dice {
                best_dice = report.m_dice;
                best_step = step;
                save_checkpoint(store, exp, &out_dir.join("best.tgcl"))?;
            }
        }
    }
    save_checkpoint(store, exp, &out_dir.join("last.tgcl"))?;

    if store.frozen_bytes() != frozen_before {
        return Err(CoreError::FrozenMutation(
            "frozen encoder bytes changed across the training run".into(),
        ));
    }
    Ok(TrainOutcome {
        steps_run: exp.train.steps,
        best_dice,
        best_step,
        final_dice,
        final_iou,
    })
}
