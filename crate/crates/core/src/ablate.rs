//! Ablation harness: the five-row core study plus the per-module variant
//! tables, each averaged over seeds with fresh initialization and training.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use tgc_tensor::ParamStore;

use crate::config::{ExperimentConfig, Toggles};
use crate::date::DateVariant;
use crate::error::Result;
use crate::model::init_params;
use crate::pretrain;
use crate::sse::EncoderVariant;
use crate::synth::Dataset;
use crate::train;
use crate::vlcm::VlcmVariant;

#[derive(Clone, Debug, Serialize)]
pub struct RowResult {
    pub id: String,
    pub sse: bool,
    pub date: bool,
    pub vlcm: bool,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub dice_mean: f64,
    pub dice_sd: f64,
    pub iou_mean: f64,
    pub iou_sd: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantRow {
    pub name: String,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub dice_mean: f64,
    pub dice_sd: f64,
    pub iou_mean: f64,
    pub iou_sd: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub core: Vec<RowResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_variants: Option<Vec<VariantRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub date_variants: Option<Vec<VariantRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vlcm_variants: Option<Vec<VariantRow>>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Runs every requested configuration over every seed (memoized on the
/// resolved config), training each from scratch and scoring on the test
/// split.
pub struct AblationHarness<'a> {
    base: ExperimentConfig,
    dataset: &'a Dataset,
    seeds: Vec<u64>,
    work_dir: std::path::PathBuf,
    frozen_cache: BTreeMap<u64, Vec<(String, Vec<f32>)>>,
    memo: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    run_counter: usize,
}

impl<'a> AblationHarness<'a> {
    pub fn new(
        base: &ExperimentConfig,
        dataset: &'a Dataset,
        seeds: &[u64],
        work_dir: &Path,
    ) -> Self {
        AblationHarness {
            base: base.clone(),
            dataset,
            seeds: seeds.to_vec(),
            work_dir: work_dir.to_path_buf(),
            frozen_cache: BTreeMap::new(),
            memo: BTreeMap::new(),
            run_counter: 0,
        }
    }

    /// Pretrained frozen-encoder weights for one init seed, shared across
    /// all rows so rows differ only in the trainable modules.
    fn frozen_for_seed(&mut self, seed: u64) -> Result<Vec<(String, Vec<f32>)>> {
        if let Some(hit) = self.frozen_cache.get(&seed) {
            return Ok(hit.clone());
        }
        let cfg = self.base.resolved_model();
        let mut store: ParamStore<f32> = init_params(&cfg, seed)?;
        if self.base.pretrain.enabled {
            let train_records: Vec<_> = self
                .dataset
                .train_indices()
                .map(|i| self.dataset.records[i].clone())
                .collect();
            pretrain::pretrain_align(
                &mut store,
                &cfg.vit,
                &cfg.text,
                &train_records,
                &self.base.pretrain,
            )?;
        }
        let frozen: Vec<(String, Vec<f32>)> = store
            .iter()
            .filter(|(name, _)| name.starts_with("frozen."))
            .map(|(name, p)| (name.clone(), p.data.clone()))
            .collect();
        self.frozen_cache.insert(seed, frozen.clone());
        Ok(frozen)
    }

    fn run_config(&mut self, exp: &ExperimentConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let key = serde_json::to_string(&exp.resolved_model()).expect("cfg key");
        if let Some(hit) = self.memo.get(&key) {
            return Ok(hit.clone());
        }
        let mut dices = Vec::new();
        let mut ious = Vec::new();
        let seeds = self.seeds.clone();
        for &seed in &seeds {
            let cfg = exp.resolved_model();
            let mut store: ParamStore<f32> = init_params(&cfg, seed)?;
            for (name, data) in self.frozen_for_seed(seed)? {
                if let Some(p) = store.get_mut(&name) {
                    p.data = data;
                }
            }
            let mut run_exp = exp.clone();
            run_exp.train.seed = seed;
            self.run_counter += 1;
            let run_dir = self.work_dir.join(format!("run{:03}", self.run_counter));
            train::train(&run_exp, self.dataset, &mut store, &run_dir)?;
            let tokenizer = cfg.tokenizer();
            let test: Vec<usize> = self.dataset.test_indices().collect();
            let (report, _) =
                train::evaluate(&store, &cfg, &tokenizer, self.dataset, &test, 0)?;
            dices.push(report.m_dice);
            ious.push(report.m_iou);
        }
        self.memo.insert(key, (dices.clone(), ious.clone()));
        Ok((dices, ious))
    }

    /// Table-3-shaped core study: rows (a) full .. (e) all off.
    pub fn core_rows(&mut self) -> Result<Vec<RowResult>> {
        let rows = [
            ("(a)", true, true, true),
            ("(b)", false, true, true),
            ("(c)", true, true, false),
            ("(d)", true, false, true),
            ("(e)", false, false, false),
        ];
        let mut out = Vec::new();
        for (id, sse, date, vlcm) in rows {
            let mut exp = self.base.clone();
            exp.toggles = Toggles { sse, date, vlcm };
            let (dice, iou) = self.run_config(&exp)?;
            let (dice_mean, dice_sd) = mean_sd(&dice);
            let (iou_mean, iou_sd) = mean_sd(&iou);
            out.push(RowResult {
                id: id.to_string(),
                sse,
                date,
                vlcm,
                dice,
                iou,
                dice_mean,
                dice_sd,
                iou_mean,
                iou_sd,
            });
        }
        Ok(out)
    }

    fn variant_row(&mut self, name: &str, exp: &ExperimentConfig) -> Result<VariantRow> {
        let (dice, iou) = self.run_config(exp)?;
        let (dice_mean, dice_sd) = mean_sd(&dice);
        let (iou_mean, iou_sd) = mean_sd(&iou);
        Ok(VariantRow {
            name: name.to_string(),
            dice,
            iou,
            dice_mean,
            dice_sd,
            iou_mean,
            iou_sd,
        })
    }

    pub fn encoder_variant_rows(&mut self) -> Result<Vec<VariantRow>> {
        let mut out = Vec::new();
        for (name, variant) in [
            ("full (sse)", EncoderVariant::Full),
            ("vit-only (no fuse)", EncoderVariant::VitOnly),
            ("cnn-only (no clip)", EncoderVariant::CnnOnly),
        ] {
            let mut exp = self.base.clone();
            exp.model.encoder_variant = variant;
            // the sse toggle would override the variant; route through it
            exp.toggles.sse = variant != EncoderVariant::VitOnly;
            out.push(self.variant_row(name, &exp)?);
        }
        Ok(out)
    }

    pub fn date_variant_rows(&mut self) -> Result<Vec<VariantRow>> {
        let mut out = Vec::new();
        for (name, variant) in [
            ("auxiliary injection", DateVariant::Inject),
            ("main text only", DateVariant::MainOnly),
            ("auxiliary text only", DateVariant::AuxOnly),
            ("expanded (concat)", DateVariant::Concat),
        ] {
            let mut exp = self.base.clone();
            exp.model.date.variant = variant;
            exp.toggles.date = variant != DateVariant::MainOnly;
            out.push(self.variant_row(name, &exp)?);
        }
        Ok(out)
    }

    pub fn vlcm_variant_rows(&mut self) -> Result<Vec<VariantRow>> {
        let mut out = Vec::new();
        for (name, variant) in [
            ("gated global alignment", VlcmVariant::Gated),
            ("no prior alignment", VlcmVariant::None),
            ("single cross-attention", VlcmVariant::Single),
            ("bidirectional cross-attention", VlcmVariant::Bidirectional),
        ] {
            let mut exp = self.base.clone();
            exp.model.vlcm.variant = variant;
            exp.toggles.vlcm = variant != VlcmVariant::None;
            out.push(self.variant_row(name, &exp)?);
        }
        Ok(out)
    }
}

/// Run the core study (and the variant tables when `full`).
pub fn run_ablation(
    base: &ExperimentConfig,
    dataset: &Dataset,
    seeds: &[u64],
    full: bool,
    work_dir: &Path,
) -> Result<AblationReport> {
    let mut harness = AblationHarness::new(base, dataset, seeds, work_dir);
    let core = harness.core_rows()?;
    let (encoder_variants, date_variants, vlcm_variants) = if full {
        (
            Some(harness.encoder_variant_rows()?),
            Some(harness.date_variant_rows()?),
            Some(harness.vlcm_variant_rows()?),
        )
    } else {
        (None, None, None)
    };
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        core,
        encoder_variants,
        date_variants,
        vlcm_variants,
    })
}

fn onoff(v: bool) -> &'static str {
    if v {
        "yes"
    } else {
        "no"
    }
}

/// Aligned text table mirroring the core-component study layout.
pub fn render_core_table(rows: &[RowResult]) -> String {
    let mut s = String::new();
    s.push_str("      SSE   DATE  VLCM   mDice              mIoU\n");
    for r in rows {
        s.push_str(&format!(
            "{:<5} {:<5} {:<5} {:<5}  {:.4} +/- {:.4}   {:.4} +/- {:.4}\n",
            r.id,
            onoff(r.sse),
            onoff(r.date),
            onoff(r.vlcm),
            r.dice_mean,
            r.dice_sd,
            r.iou_mean,
            r.iou_sd
        ));
    }
    s
}

pub fn render_variant_table(title: &str, rows: &[VariantRow]) -> String {
    let mut s = format!("{title}\n");
    for r in rows {
        s.push_str(&format!(
            "  {:<32} {:.4} +/- {:.4}   {:.4} +/- {:.4}\n",
            r.name, r.dice_mean, r.dice_sd, r.iou_mean, r.iou_sd
        ));
    }
    s
}
