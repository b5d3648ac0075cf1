//! Command-line front end.
//!
//! All relative paths in the config resolve against `--out`, so one
//! directory holds a whole experiment: dataset under `data/`, encoder
//! checkpoint, training logs/checkpoints, ablation tables, heatmaps.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 invariant breach
//! (frozen-weight mutation, accounting failure, non-finite loss).

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use tgc_core::ablate;
use tgc_core::config::{load_config, ExperimentConfig};
use tgc_core::error::{CoreError, Result};
use tgc_core::model::init_params;
use tgc_core::pgm;
use tgc_core::pretrain;
use tgc_core::simmap;
use tgc_core::synth::{self, SceneGeometry};
use tgc_core::train;
use tgc_tensor::{checkpoint, ParamStore};

#[derive(Parser)]
#[command(
    name = "tgc",
    about = "Text-guided segmentation on a synthetic referring benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. --set train.steps=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Experiment directory; outputs land here and relative config paths
    /// resolve against it.
    #[arg(long, default_value = "tgc-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset under <out>/<data.manifest dir>.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Sample count (overrides data.n).
        #[arg(long)]
        n: Option<usize>,
        /// Dataset seed (overrides data.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Contrastively pre-align the frozen encoders; writes encoders.tgcl.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train adapters and decoder; writes metrics.jsonl, best/last.tgcl.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (relative to --out), default best.tgcl.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Core-component ablation table; --full adds the per-module variant
    /// tables.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds per row.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        full: bool,
    },
    /// Parameter accounting for the configured model.
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Similarity heatmaps (adapted + raw) for one sample.
    Simmap {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (relative to --out), default best.tgcl.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset index to visualize (within the test split).
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_thread_pool();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invariant_breach() {
                2
            } else {
                1
            }
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("TGC_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let body = match &common.config {
        Some(path) => fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?,
        None => "{}".to_string(),
    };
    load_config(&body, &common.set)
}

fn manifest_path(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    let p = Path::new(&cfg.data.manifest);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        common.out.join(p)
    }
}

fn load_dataset(common: &Common, cfg: &ExperimentConfig) -> Result<synth::Dataset> {
    let tokenizer = cfg.resolved_model().tokenizer();
    synth::load_dataset(&manifest_path(common, cfg), &tokenizer)
}

/// Build the parameter store for training/eval: fresh init, with frozen
/// weights replaced from encoders.tgcl when pre-alignment is enabled.
fn build_store(common: &Common, cfg: &ExperimentConfig) -> Result<ParamStore<f32>> {
    let model = cfg.resolved_model();
    let mut store: ParamStore<f32> = init_params(&model, cfg.train.seed)?;
    if cfg.pretrain.enabled {
        let enc_path = common.out.join("encoders.tgcl");
        if !enc_path.exists() {
            return Err(CoreError::Config(format!(
                "pretrain.enabled is true but {} does not exist; run `tgc pretrain` first \
                 or set pretrain.enabled=false for random frozen encoders",
                enc_path.display()
            )));
        }
        let encoders = checkpoint::load(&enc_path)?;
        for (name, p) in encoders.iter() {
            if name.starts_with("frozen.") {
                match store.get_mut(name) {
                    Some(slot) if slot.shape == p.shape => slot.data = p.data.clone(),
                    _ => {
                        return Err(CoreError::Config(format!(
                            "encoder checkpoint tensor '{name}' does not match the model"
                        )))
                    }
                }
            }
        }
    }
    Ok(store)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { common, n, seed } => {
            let mut cfg = load(&common)?;
            if let Some(n) = n {
                cfg.data.n = n;
            }
            if let Some(seed) = seed {
                cfg.data.seed = seed;
            }
            let model = cfg.resolved_model();
            let geom = SceneGeometry {
                height: model.vit.image_size,
                width: model.vit.image_size,
            };
            let mpath = manifest_path(&common, &cfg);
            let dir = mpath.parent().unwrap_or(Path::new("."));
            let tokenizer = model.tokenizer();
            let manifest =
                synth::generate_dataset(cfg.data.n, cfg.data.seed, &geom, &tokenizer, dir)?;
            println!(
                "{}",
                serde_json::json!({
                    "manifest": mpath,
                    "count": manifest.count,
                    "split_sizes": manifest.split_sizes,
                })
            );
            Ok(())
        }
        Cmd::Pretrain { common } => {
            let cfg = load(&common)?;
            let model = cfg.resolved_model();
            let dataset = load_dataset(&common, &cfg)?;
            let mut store: ParamStore<f32> = init_params(&model, cfg.train.seed)?;
            let train_records: Vec<_> = dataset
                .train_indices()
                .map(|i| dataset.records[i].clone())
                .collect();
            pretrain::pretrain_align(
                &mut store,
                &model.vit,
                &model.text,
                &train_records,
                &cfg.pretrain,
            )?;
            fs::create_dir_all(&common.out).map_err(|e| CoreError::io(&common.out, e))?;
            train::save_checkpoint(&store, &cfg, &common.out.join("encoders.tgcl"))?;
            let held: Vec<_> = dataset
                .val_indices()
                .map(|i| dataset.records[i].clone())
                .collect();
            let (matched, mismatched) =
                pretrain::alignment_score(&store, &model.vit, &model.text, &held)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": common.out.join("encoders.tgcl"),
                    "val_cosine_matched": matched,
                    "val_cosine_mismatched": mismatched,
                })
            );
            Ok(())
        }
        Cmd::Train { common } => {
            let cfg = load(&common)?;
            let dataset = load_dataset(&common, &cfg)?;
            let mut store = build_store(&common, &cfg)?;
            let outcome = train::train(&cfg, &dataset, &mut store, &common.out)?;
            println!("{}", serde_json::to_string(&outcome).expect("outcome"));
            Ok(())
        }
        Cmd::Eval {
            common,
            checkpoint: ckpt,
            split,
        } => {
            let cfg = load(&common)?;
            let model = cfg.resolved_model();
            let dataset = load_dataset(&common, &cfg)?;
            let path = common
                .out
                .join(ckpt.unwrap_or_else(|| PathBuf::from("best.tgcl")));
            let store = checkpoint::load(&path)?;
            let indices: Vec<usize> = match split.as_str() {
                "train" => dataset.train_indices().collect(),
                "val" => dataset.val_indices().collect(),
                "test" => dataset.test_indices().collect(),
                other => {
                    return Err(CoreError::Config(format!(
                        "unknown split '{other}' (use train, val, or test)"
                    )))
                }
            };
            let tokenizer = model.tokenizer();
            let (report, loss) =
                train::evaluate(&store, &model, &tokenizer, &dataset, &indices, 0)?;
            let body = serde_json::json!({
                "split": split,
                "n": indices.len(),
                "mDice": report.m_dice,
                "mIoU": report.m_iou,
                "loss": loss,
            });
            let out_path = common.out.join(format!("eval_{split}.json"));
            fs::write(&out_path, body.to_string()).map_err(|e| CoreError::io(&out_path, e))?;
            println!("{body}");
            Ok(())
        }
        Cmd::Ablate {
            common,
            seeds,
            full,
        } => {
            let cfg = load(&common)?;
            let dataset = load_dataset(&common, &cfg)?;
            let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.train.seed + i).collect();
            let work = common.out.join("ablation_runs");
            let report = ablate::run_ablation(&cfg, &dataset, &seed_list, full, &work)?;
            let json_path = common.out.join("ablation.json");
            fs::write(
                &json_path,
                serde_json::to_string_pretty(&report).expect("report"),
            )
            .map_err(|e| CoreError::io(&json_path, e))?;
            let mut text = ablate::render_core_table(&report.core);
            if let Some(rows) = &report.encoder_variants {
                text.push('\n');
                text.push_str(&ablate::render_variant_table("encoder configuration", rows));
            }
            if let Some(rows) = &report.date_variants {
                text.push('\n');
                text.push_str(&ablate::render_variant_table("text augmentation", rows));
            }
            if let Some(rows) = &report.vlcm_variants {
                text.push('\n');
                text.push_str(&ablate::render_variant_table("alignment method", rows));
            }
            let table_path = common.out.join("ablation.txt");
            fs::write(&table_path, &text).map_err(|e| CoreError::io(&table_path, e))?;
            println!("{text}");
            Ok(())
        }
        Cmd::Params { common } => {
            let cfg = load(&common)?;
            let store: ParamStore<f32> = init_params(&cfg.resolved_model(), cfg.train.seed)?;
            let counts = train::count_params(&store)?;
            println!("{}", serde_json::to_string_pretty(&counts).expect("counts"));
            Ok(())
        }
        Cmd::Simmap {
            common,
            checkpoint: ckpt,
            index,
        } => {
            let cfg = load(&common)?;
            let model = cfg.resolved_model();
            let dataset = load_dataset(&common, &cfg)?;
            let path = common
                .out
                .join(ckpt.unwrap_or_else(|| PathBuf::from("best.tgcl")));
            let store = checkpoint::load(&path)?;
            let test: Vec<usize> = dataset.test_indices().collect();
            let &rec_idx = test.get(index).ok_or_else(|| {
                CoreError::Config(format!("index {index} outside the test split"))
            })?;
            let record = &dataset.records[rec_idx];
            let tokenizer = model.tokenizer();
            for (tag, adapters) in [("adapted", true), ("raw", false)] {
                let map = simmap::similarity_heatmap(&store, &model, &tokenizer, record, adapters)?;
                let out_path = common.out.join(format!("simmap_{tag}.pgm"));
                pgm::write(&out_path, record.width, record.height, &map)?;
                println!("{}", out_path.display());
            }
            Ok(())
        }
    }
}
