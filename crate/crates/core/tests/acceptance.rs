//! Acceptance suite: one pass/fail line per criterion.
//!
//! Criteria:
//!  1. finite-difference gradient suite (ops + composed modules, f64)
//!  2. frozen-encoder protocol across a training run
//!  3. degeneracy identities (zero-offset sampling, zeroed projections)
//!  4. synthetic-task performance on the default 1000-sample set
//!  5. ablation ordering across seeds, Table-3-shaped report
//!  6. referring behavior under prompt swaps
//!  7. metric identities
//!  8. byte-level determinism of logs, checkpoints, heatmaps
//!  9. similarity-map contrast, adapted vs raw encoders
//!
//! Run with `cargo test -p tgc-core --test acceptance -- --nocapture`
//! (expect roughly 30-50 minutes on a 2-core CPU box; the full-scale
//! training run in criterion 4 dominates).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tgc_core::config::{DataConfig, ExperimentConfig, PretrainConfig, Toggles, TrainConfig};
use tgc_core::date::{self, DateConfig, DateVariant};
use tgc_core::decoder;
use tgc_core::encoders::{CnnConfig, TextConfig, VitConfig};
use tgc_core::grammar;
use tgc_core::metrics::dice_iou;
use tgc_core::model::{self, miniature_config, ModelConfig};
use tgc_core::nn;
use tgc_core::optim::AdamConfig;
use tgc_core::pretrain;
use tgc_core::rng::Rng;
use tgc_core::simmap;
use tgc_core::sse::{self, EncoderVariant, SseConfig};
use tgc_core::synth::{self, PromptPair, SceneGeometry};
use tgc_core::train;
use tgc_core::vlcm::{self, VlcmConfig, VlcmVariant};
use tgc_core::ablate;
use tgc_tensor::{Graph, NodeId, ParamStore, Tensor};

const FD_H: f64 = 1e-4;
const FD_H_FINE: f64 = 1e-6;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
const SEEDS: u64 = 21;

struct Outcome {
    name: &'static str,
    pass: bool,
}

fn report(outcomes: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    println!("{} - {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    outcomes.push(Outcome { name, pass });
}

fn work_dir() -> PathBuf {
    let dir = std::env::temp_dir().join("tgc_acceptance");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn acceptance_criteria() {
    let dir = work_dir();
    let mut outcomes = Vec::new();

    criterion_1_gradient_suite(&mut outcomes);
    criterion_2_frozen_protocol(&mut outcomes, &dir);
    criterion_3_degeneracies(&mut outcomes);
    let trained = criterion_4_synthetic_performance(&mut outcomes, &dir);
    criterion_5_ablation_ordering(&mut outcomes, &dir);
    if let Some((store, cfg, dataset)) = &trained {
        criterion_6_referring_behavior(&mut outcomes, store, cfg);
        criterion_9_similarity_contrast(&mut outcomes, store, cfg, dataset);
    } else {
        report(
            &mut outcomes,
            "criterion 6 (referring behavior)",
            false,
            "skipped: criterion 4 training unavailable".into(),
        );
        report(
            &mut outcomes,
            "criterion 9 (similarity contrast)",
            false,
            "skipped: criterion 4 training unavailable".into(),
        );
    }
    criterion_7_metric_identities(&mut outcomes);
    criterion_8_determinism(&mut outcomes, &dir);

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "\nacceptance: {}/{} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    assert!(
        failed.is_empty(),
        "failed criteria: {:?}",
        failed.iter().map(|o| o.name).collect::<Vec<_>>()
    );
}

// ── criterion 1: gradient suite ─────────────────────────────────────────

struct FdRng(u64);

impl FdRng {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
    fn signed(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform() * 2.0 - 1.0).collect()
    }
    fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// FD check over leaf inputs for one op builder; returns worst relative
/// error across all elements and seeds.
fn fd_op(
    shapes: &[Vec<usize>],
    gen: &dyn Fn(&mut FdRng) -> Vec<Vec<f64>>,
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let mut worst = 0f64;
    for seed in 0..SEEDS {
        let mut rng = FdRng(0xacce_0000 + seed * 6151);
        let data = gen(&mut rng);
        let out_numel = {
            let mut g: Graph<f64> = Graph::new();
            let ids: Vec<NodeId> = shapes
                .iter()
                .zip(&data)
                .map(|(s, d)| g.leaf(Tensor::from_vec(s.clone(), d.clone()).unwrap()))
                .collect();
            let out = build(&mut g, &ids);
            g.value(out).numel()
        };
        let weights = rng.signed(out_numel);
        let eval = |data: &[Vec<f64>]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let ids: Vec<NodeId> = shapes
                .iter()
                .zip(data)
                .map(|(s, d)| g.leaf(Tensor::from_vec(s.clone(), d.clone()).unwrap()))
                .collect();
            let out = build(&mut g, &ids);
            let w = g.constant(g.shape(out).to_vec(), weights.clone()).unwrap();
            let p = g.mul(out, w).unwrap();
            let loss = g.sum_all(p);
            g.data(loss)[0]
        };
        // analytic
        let grads: Vec<Vec<f64>> = {
            let mut g: Graph<f64> = Graph::new();
            let ids: Vec<NodeId> = shapes
                .iter()
                .zip(&data)
                .map(|(s, d)| {
                    g.leaf(
                        Tensor::from_vec(s.clone(), d.clone())
                            .unwrap()
                            .with_grad(true),
                    )
                })
                .collect();
            let out = build(&mut g, &ids);
            let w = g.constant(g.shape(out).to_vec(), weights.clone()).unwrap();
            let p = g.mul(out, w).unwrap();
            let loss = g.sum_all(p);
            g.backward(loss).unwrap();
            ids.iter()
                .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default())
                .collect()
        };
        for (pi, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            for e in 0..n {
                let mut plus = data.clone();
                plus[pi][e] += FD_H;
                let mut minus = data.clone();
                minus[pi][e] -= FD_H;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
                let a = grads[pi][e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

/// FD spot-probes over trainable parameters of a module forward.
fn fd_module(
    store: &ParamStore<f64>,
    filter: &dyn Fn(&str) -> bool,
    build: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId,
    probes_per_seed: usize,
    tol: f64,
) -> (f64, usize) {
    let mut worst = 0f64;
    let mut checked = 0usize;
    let eval = |ps: &ParamStore<f64>| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let loss = build(&mut g, ps);
        g.data(loss)[0]
    };
    for seed in 0..SEEDS {
        let mut rng = FdRng(0xfd_0000 + seed * 7919);
        let mut g: Graph<f64> = Graph::new();
        let loss = build(&mut g, store);
        g.backward(loss).unwrap();
        let grads: Vec<(String, Vec<f64>)> = g
            .bound_params()
            .filter(|(name, _)| filter(name))
            .filter_map(|(name, id)| g.grad(id).map(|gr| (name.to_string(), gr.to_vec())))
            .collect();
        assert!(!grads.is_empty(), "no trainable params matched the filter");
        for _ in 0..probes_per_seed {
            let (name, grad) = &grads[rng.below(grads.len())];
            let idx = rng.below(grad.len());
            let analytic = grad[idx];
            let numeric_at = |h: f64| -> f64 {
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().data[idx] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().data[idx] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            };
            let numeric = numeric_at(FD_H);
            let mut rel = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(1e-3);
            if rel >= tol {
                // kinks (relu) inflate the coarse step; retry finer
                let numeric2 = numeric_at(FD_H_FINE);
                rel = (analytic - numeric2).abs()
                    / analytic.abs().max(numeric2.abs()).max(1e-3);
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

fn tiny_sse_store(seed: u64, levels: usize) -> (ParamStore<f64>, SseConfig) {
    let cfg = SseConfig {
        fusion_dim: 8,
        heads: 2,
        points: 2,
        levels,
        layers: 1,
    };
    let cnn = CnnConfig {
        c8: 8,
        c16: 8,
        c32: 8,
        stem_blocks: 1,
    };
    let mut ps = ParamStore::new();
    sse::init_sse(&mut ps, &mut Rng::new(seed), &cfg, EncoderVariant::Full, 6, &cnn);
    // give the zero-initialized heads nonzero weights so offsets matter
    let mut r = Rng::new(seed ^ 0x0ff);
    for name in [
        "train.sse.msda.layers.0.off.w",
        "train.sse.msda.layers.0.off.b",
        "train.sse.msda.layers.0.att.w",
        "train.sse.msda.layers.0.att.b",
    ] {
        for v in ps.get_mut(name).unwrap().data.iter_mut() {
            *v = r.normal() * 0.3;
        }
    }
    (ps, cfg)
}

fn criterion_1_gradient_suite(outcomes: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut worst_op = 0f64;

    // every differentiable tensor op, randomized small shapes
    let off_zero = |r: &mut FdRng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let s = if r.uniform() < 0.5 { -1.0 } else { 1.0 };
                s * (0.2 + r.uniform())
            })
            .collect()
    };
    type OpCase<'a> = (
        &'static str,
        Vec<Vec<usize>>,
        Box<dyn Fn(&mut FdRng) -> Vec<Vec<f64>> + 'a>,
        Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId + 'a>,
    );
    let cases: Vec<OpCase> = vec![
        (
            "add",
            vec![vec![2, 3], vec![3]],
            Box::new(|r| vec![r.signed(6), r.signed(3)]),
            Box::new(|g, ids| g.add(ids[0], ids[1]).unwrap()),
        ),
        (
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|r| vec![r.signed(6), r.signed(6)]),
            Box::new(|g, ids| g.mul(ids[0], ids[1]).unwrap()),
        ),
        (
            "div",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(move |r| vec![r.signed(6), off_zero(r, 6)]),
            Box::new(|g, ids| g.div(ids[0], ids[1]).unwrap()),
        ),
        (
            "scale",
            vec![vec![5]],
            Box::new(|r| vec![r.signed(5)]),
            Box::new(|g, ids| g.scale(ids[0], -1.3)),
        ),
        (
            "relu",
            vec![vec![8]],
            Box::new(move |r| vec![off_zero(r, 8)]),
            Box::new(|g, ids| g.relu(ids[0])),
        ),
        (
            "gelu",
            vec![vec![8]],
            Box::new(|r| vec![r.signed(8)]),
            Box::new(|g, ids| g.gelu(ids[0])),
        ),
        (
            "sigmoid",
            vec![vec![8]],
            Box::new(|r| vec![r.signed(8)]),
            Box::new(|g, ids| g.sigmoid(ids[0])),
        ),
        (
            "ln",
            vec![vec![6]],
            Box::new(|r| vec![(0..6).map(|_| 0.2 + r.uniform()).collect()]),
            Box::new(|g, ids| g.ln(ids[0]).unwrap()),
        ),
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|r| vec![r.signed(12), r.signed(8)]),
            Box::new(|g, ids| g.matmul(ids[0], ids[1]).unwrap()),
        ),
        (
            "matmul_batched",
            vec![vec![2, 3, 4], vec![2, 4, 2]],
            Box::new(|r| vec![r.signed(24), r.signed(16)]),
            Box::new(|g, ids| g.matmul(ids[0], ids[1]).unwrap()),
        ),
        (
            "transpose",
            vec![vec![3, 4]],
            Box::new(|r| vec![r.signed(12)]),
            Box::new(|g, ids| g.transpose(ids[0]).unwrap()),
        ),
        (
            "permute3",
            vec![vec![2, 3, 4]],
            Box::new(|r| vec![r.signed(24)]),
            Box::new(|g, ids| g.permute3(ids[0], [2, 0, 1]).unwrap()),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(|r| vec![r.signed(12)]),
            Box::new(|g, ids| g.reshape(ids[0], vec![3, 4]).unwrap()),
        ),
        (
            "slice",
            vec![vec![3, 5]],
            Box::new(|r| vec![r.signed(15)]),
            Box::new(|g, ids| g.slice(ids[0], 1, 1, 3).unwrap()),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|r| vec![r.signed(6), r.signed(4)]),
            Box::new(|g, ids| g.concat(&[ids[0], ids[1]], 1).unwrap()),
        ),
        (
            "repeat",
            vec![vec![2, 1, 3]],
            Box::new(|r| vec![r.signed(6)]),
            Box::new(|g, ids| g.repeat(ids[0], 1, 4).unwrap()),
        ),
        (
            "sum_all",
            vec![vec![7]],
            Box::new(|r| vec![r.signed(7)]),
            Box::new(|g, ids| g.sum_all(ids[0])),
        ),
        (
            "sum_axis",
            vec![vec![2, 3, 4]],
            Box::new(|r| vec![r.signed(24)]),
            Box::new(|g, ids| g.sum_axis(ids[0], 1).unwrap()),
        ),
        (
            "mean_axis",
            vec![vec![2, 3, 4]],
            Box::new(|r| vec![r.signed(24)]),
            Box::new(|g, ids| g.mean_axis(ids[0], 2).unwrap()),
        ),
        (
            "softmax",
            vec![vec![2, 5]],
            Box::new(|r| vec![r.signed(10)]),
            Box::new(|g, ids| g.softmax(ids[0], 1).unwrap()),
        ),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|r| vec![r.signed(18), r.signed(6), r.signed(6)]),
            Box::new(|g, ids| g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap()),
        ),
        (
            "conv2d",
            vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            Box::new(|r| vec![r.signed(50), r.signed(54), r.signed(3)]),
            Box::new(|g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap()),
        ),
        (
            "pad_replicate2d",
            vec![vec![1, 2, 3, 3]],
            Box::new(|r| vec![r.signed(18)]),
            Box::new(|g, ids| g.pad_replicate2d(ids[0], 1).unwrap()),
        ),
        (
            "bilinear_sample",
            vec![vec![2, 4, 4], vec![6, 2]],
            Box::new(|r| {
                let value = r.signed(32);
                let mut pts = Vec::with_capacity(12);
                for _ in 0..12 {
                    let cell = (r.uniform() * 3.0).floor();
                    let px = cell + 0.2 + 0.6 * r.uniform();
                    pts.push((px + 0.5) / 4.0);
                }
                vec![value, pts]
            }),
            Box::new(|g, ids| g.bilinear_sample(ids[0], ids[1]).unwrap()),
        ),
        (
            "deform_core",
            vec![vec![2, 16, 3], vec![2, 4, 3], vec![5, 24], vec![5, 12]],
            Box::new(|r| {
                vec![
                    r.signed(96),
                    r.signed(24),
                    r.signed(120).iter().map(|v| v * 0.15).collect(),
                    r.signed(60).iter().map(|v| v.abs() + 0.1).collect(),
                ]
            }),
            Box::new(|g, ids| {
                let refs = g
                    .constant(
                        vec![5, 2],
                        (0..10).map(|i| 0.25 + 0.05 * i as f64).collect(),
                    )
                    .unwrap();
                g.deform_core(&[ids[0], ids[1]], &[4, 2], ids[2], ids[3], refs, 2, 3)
                    .unwrap()
            }),
        ),
        (
            "upsample_bilinear",
            vec![vec![2, 3, 3]],
            Box::new(|r| vec![r.signed(18)]),
            Box::new(|g, ids| g.upsample_bilinear(ids[0], 5, 7).unwrap()),
        ),
        (
            "embedding",
            vec![vec![5, 3]],
            Box::new(|r| vec![r.signed(15)]),
            Box::new(|g, ids| g.embedding(ids[0], &[0, 2, 2, 4]).unwrap()),
        ),
        (
            "patch_extract",
            vec![vec![2, 4, 4]],
            Box::new(|r| vec![r.signed(32)]),
            Box::new(|g, ids| g.patch_extract(ids[0], 2).unwrap()),
        ),
        (
            "normalize_rows",
            vec![vec![3, 4]],
            Box::new(move |r| vec![off_zero(r, 12)]),
            Box::new(|g, ids| g.normalize_rows(ids[0], 1e-8).unwrap()),
        ),
        (
            "bce_with_logits",
            vec![vec![9]],
            Box::new(|r| vec![r.signed(9)]),
            Box::new(|g, ids| {
                let t: Vec<f64> = (0..9).map(|i| f64::from(i % 2 == 0)).collect();
                g.bce_with_logits_mean(ids[0], &t).unwrap()
            }),
        ),
    ];
    for (name, shapes, gen, build) in &cases {
        let w = fd_op(shapes, gen.as_ref(), build.as_ref());
        assert!(w < OP_TOL, "op {name}: rel {w:.2e}");
        worst_op = worst_op.max(w);
    }

    // composed modules in f64
    let mut worst_mod = 0f64;
    let mut total_probes = 0usize;

    // Eq.1-style fusion
    {
        let (ps, _) = tiny_sse_store(1, 2);
        let mut rng = Rng::new(2);
        let clip: Vec<f64> = (0..16 * 6).map(|_| rng.normal()).collect();
        let grid: Vec<f64> = (0..8 * 16).map(|_| rng.normal()).collect();
        let weights: Vec<f64> = (0..16 * 8).map(|_| rng.normal()).collect();
        let (w, n) = fd_module(
            &ps,
            &|name| name.starts_with("train.sse.p_") || name.starts_with("train.sse.fuse"),
            &move |g, ps| {
                let c = g.leaf(Tensor::from_vec(vec![16, 6], clip.clone()).unwrap());
                let f = g.leaf(Tensor::from_vec(vec![8, 4, 4], grid.clone()).unwrap());
                let out = sse::project_and_fuse(g, ps, Some(c), f).unwrap();
                let wn = g.constant(vec![16, 8], weights.clone()).unwrap();
                let p = g.mul(out, wn).unwrap();
                g.sum_all(p)
            },
            20,
            OP_TOL,
        );
        assert!(w < OP_TOL, "fusion FD rel {w:.2e}");
        worst_mod = worst_mod.max(w);
        total_probes += n;
    }

    // deformable attention layer
    {
        let (ps, cfg) = tiny_sse_store(3, 2);
        let mut rng = Rng::new(4);
        let x: Vec<f64> = (0..20 * 8).map(|_| rng.normal()).collect();
        let weights: Vec<f64> = (0..20 * 8).map(|_| rng.normal()).collect();
        let (w, n) = fd_module(
            &ps,
            &|name| name.starts_with("train.sse.msda"),
            &move |g, ps| {
                let xn = g.leaf(Tensor::from_vec(vec![20, 8], x.clone()).unwrap());
                let refs = {
                    let mut data = Vec::new();
                    for side in [4usize, 2] {
                        for i in 0..side {
                            for j in 0..side {
                                data.push((j as f64 + 0.5) / side as f64);
                                data.push((i as f64 + 0.5) / side as f64);
                            }
                        }
                    }
                    g.constant(vec![20, 2], data).unwrap()
                };
                let out = sse::deform_attn_layer(
                    g,
                    ps,
                    "train.sse.msda.layers.0",
                    &cfg,
                    xn,
                    &[4, 2],
                    refs,
                )
                .unwrap();
                let wn = g.constant(vec![20, 8], weights.clone()).unwrap();
                let p = g.mul(out.refined, wn).unwrap();
                g.sum_all(p)
            },
            20,
            OP_TOL,
        );
        assert!(w < OP_TOL, "msda FD rel {w:.2e}");
        worst_mod = worst_mod.max(w);
        total_probes += n;
    }

    // DATE
    {
        let mut ps: ParamStore<f64> = ParamStore::new();
        date::init_date(&mut ps, &mut Rng::new(5), 6);
        let cfg = DateConfig {
            heads: 2,
            variant: DateVariant::Inject,
        };
        let mut rng = Rng::new(6);
        let fp: Vec<f64> = (0..5 * 6).map(|_| rng.normal()).collect();
        let fa: Vec<f64> = (0..5 * 6).map(|_| rng.normal()).collect();
        let weights: Vec<f64> = (0..5 * 6).map(|_| rng.normal()).collect();
        let (w, n) = fd_module(
            &ps,
            &|name| name.starts_with("train.date"),
            &move |g, ps| {
                let p = g.leaf(Tensor::from_vec(vec![5, 6], fp.clone()).unwrap());
                let a = g.leaf(Tensor::from_vec(vec![5, 6], fa.clone()).unwrap());
                let mask = [true, true, true, true, false];
                let out = date::date_forward(g, ps, &cfg, p, a, &mask, &mask).unwrap();
                let wn = g.constant(vec![5, 6], weights.clone()).unwrap();
                let pr = g.mul(out.tokens, wn).unwrap();
                g.sum_all(pr)
            },
            20,
            OP_TOL,
        );
        assert!(w < OP_TOL, "date FD rel {w:.2e}");
        worst_mod = worst_mod.max(w);
        total_probes += n;
    }

    // VLCM (gated)
    {
        let cfg = VlcmConfig {
            dim: 8,
            heads: 2,
            variant: VlcmVariant::Gated,
        };
        let mut ps: ParamStore<f64> = ParamStore::new();
        vlcm::init_vlcm(&mut ps, &mut Rng::new(7), &cfg, 6);
        let mut rng = Rng::new(8);
        let v: Vec<f64> = (0..4 * 8).map(|_| rng.normal()).collect();
        let t: Vec<f64> = (0..3 * 6).map(|_| rng.normal()).collect();
        let wv: Vec<f64> = (0..4 * 8).map(|_| rng.normal()).collect();
        let wt: Vec<f64> = (0..3 * 8).map(|_| rng.normal()).collect();
        let (w, n) = fd_module(
            &ps,
            &|name| name.starts_with("train.vlcm"),
            &move |g, ps| {
                let vn = g.leaf(Tensor::from_vec(vec![4, 8], v.clone()).unwrap());
                let tn = g.leaf(Tensor::from_vec(vec![3, 6], t.clone()).unwrap());
                let out = vlcm::calibrate(g, ps, &cfg, vn, tn, &[true, true, false]).unwrap();
                let wvn = g.constant(vec![4, 8], wv.clone()).unwrap();
                let wtn = g.constant(vec![3, 8], wt.clone()).unwrap();
                let pv = g.mul(out.visual, wvn).unwrap();
                let pt = g.mul(out.text, wtn).unwrap();
                let sv = g.sum_all(pv);
                let st = g.sum_all(pt);
                g.add(sv, st).unwrap()
            },
            20,
            OP_TOL,
        );
        assert!(w < OP_TOL, "vlcm FD rel {w:.2e}");
        worst_mod = worst_mod.max(w);
        total_probes += n;
    }

    // cost decoder (volume + aggregation + upsampling)
    {
        let dcfg = decoder::DecoderConfig { d_agg: 6, blocks: 1 };
        let mut ps: ParamStore<f64> = ParamStore::new();
        decoder::init_decoder(&mut ps, &mut Rng::new(9), &dcfg, 8, 5, 5);
        let mut rng = Rng::new(10);
        let v: Vec<f64> = (0..4 * 8).map(|_| rng.normal()).collect();
        let t: Vec<f64> = (0..3 * 8).map(|_| rng.normal()).collect();
        let s16: Vec<f64> = (0..5 * 16).map(|_| rng.normal()).collect();
        let s8: Vec<f64> = (0..5 * 64).map(|_| rng.normal()).collect();
        let target: Vec<bool> = (0..256).map(|i| i % 5 == 0).collect();
        let (w, n) = fd_module(
            &ps,
            &|name| name.starts_with("train.dec"),
            &move |g, ps| {
                let vn = g.leaf(Tensor::from_vec(vec![4, 8], v.clone()).unwrap());
                let tn = g.leaf(Tensor::from_vec(vec![3, 8], t.clone()).unwrap());
                let (cost, _) =
                    decoder::cost_volume(g, vn, tn, &[true, true, true]).unwrap();
                let agg = decoder::aggregate(g, ps, &dcfg, cost, vn, 2).unwrap();
                let k16 = g.leaf(Tensor::from_vec(vec![5, 4, 4], s16.clone()).unwrap());
                let k8 = g.leaf(Tensor::from_vec(vec![5, 8, 8], s8.clone()).unwrap());
                let logits =
                    decoder::upsample_decode(g, ps, agg.grid, k16, k8, (16, 16)).unwrap();
                decoder::segmentation_loss(g, logits, &target).unwrap()
            },
            20,
            OP_TOL,
        );
        assert!(w < OP_TOL, "decoder FD rel {w:.2e}");
        worst_mod = worst_mod.max(w);
        total_probes += n;
    }

    // end-to-end miniature model
    let mut worst_e2e = 0f64;
    {
        let cfg = miniature_config();
        let tok = cfg.tokenizer();
        let ps: ParamStore<f64> = model::init_params(&cfg, 11).unwrap();
        let geom = SceneGeometry {
            height: 16,
            width: 16,
        };
        let rec = synth::generate_sample(77, &geom, &tok);
        let image: Vec<f64> = rec.image_f32().iter().map(|&v| v as f64).collect();
        let mask = rec.mask_bits();
        let prompts = rec.prompts.clone();
        let (w, n) = fd_module(
            &ps,
            &|name| name.starts_with("train."),
            &move |g, ps| {
                let art = model::forward(g, ps, &cfg, &tok, &image, &prompts).unwrap();
                decoder::segmentation_loss(g, art.logits, &mask).unwrap()
            },
            12,
            E2E_TOL,
        );
        assert!(w < E2E_TOL, "end-to-end FD rel {w:.2e}");
        worst_e2e = worst_e2e.max(w);
        total_probes += n;
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_op < OP_TOL && worst_mod < OP_TOL && worst_e2e < E2E_TOL && elapsed < 120.0;
    report(
        outcomes,
        "criterion 1 (gradient suite)",
        pass,
        format!(
            "ops rel {worst_op:.2e}, modules rel {worst_mod:.2e} ({total_probes} probes), \
             e2e rel {worst_e2e:.2e}, {elapsed:.1}s"
        ),
    );
}

// ── criterion 2: frozen protocol ────────────────────────────────────────

fn miniature_experiment(manifest: &Path, steps: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: miniature_config(),
        toggles: Toggles::default(),
        train: TrainConfig {
            steps,
            batch: 4,
            seed,
            eval_every: steps.max(1),
            eval_samples: 6,
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        },
        pretrain: PretrainConfig {
            enabled: false,
            ..PretrainConfig::default()
        },
        data: DataConfig {
            manifest: manifest.to_string_lossy().into_owned(),
            n: 32,
            seed: 5,
        },
    }
}

fn criterion_2_frozen_protocol(outcomes: &mut Vec<Outcome>, dir: &Path) {
    let data_dir = dir.join("mini_data");
    let cfg = miniature_experiment(&data_dir.join("manifest.json"), 200, 1);
    let geom = SceneGeometry {
        height: 16,
        width: 16,
    };
    let tok = cfg.model.tokenizer();
    synth::generate_dataset(cfg.data.n, cfg.data.seed, &geom, &tok, &data_dir).unwrap();
    let dataset = synth::load_dataset(&data_dir.join("manifest.json"), &tok).unwrap();

    let mut store: ParamStore<f32> = model::init_params(&cfg.model, 1).unwrap();
    let before = store.frozen_bytes();
    let run_dir = dir.join("frozen_run");
    let outcome = train::train(&cfg, &dataset, &mut store, &run_dir);
    let bytes_equal = store.frozen_bytes() == before;

    // grad slots on frozen tensors after a backward pass
    let mut g: Graph<f32> = Graph::new();
    let rec = &dataset.records[0];
    let art = model::forward(&mut g, &store, &cfg.model, &tok, &rec.image_f32(), &rec.prompts)
        .unwrap();
    let loss = decoder::segmentation_loss(&mut g, art.logits, &rec.mask_bits()).unwrap();
    g.backward(loss).unwrap();
    let mut frozen_bound = 0usize;
    let mut frozen_with_grad = 0usize;
    for (name, id) in g.bound_params() {
        if name.starts_with("frozen.") {
            frozen_bound += 1;
            if g.grad(id).is_some() {
                frozen_with_grad += 1;
            }
        }
    }
    let pass =
        outcome.is_ok() && bytes_equal && frozen_bound > 0 && frozen_with_grad == 0;
    report(
        outcomes,
        "criterion 2 (frozen-encoder protocol)",
        pass,
        format!(
            "200-step run: frozen bytes identical = {bytes_equal}, \
             {frozen_bound} frozen tensors bound, {frozen_with_grad} with gradients"
        ),
    );
}

// ── criterion 3: degeneracy identities ──────────────────────────────────

fn criterion_3_degeneracies(outcomes: &mut Vec<Outcome>) {
    let mut worst = 0f64;

    // zero-offset single-point deformable attention samples its own location
    {
        let cfg = SseConfig {
            fusion_dim: 8,
            heads: 2,
            points: 1,
            levels: 1,
            layers: 1,
        };
        let cnn = CnnConfig {
            c8: 8,
            c16: 8,
            c32: 8,
            stem_blocks: 1,
        };
        let mut ps: ParamStore<f32> = ParamStore::new();
        sse::init_sse(&mut ps, &mut Rng::new(7), &cfg, EncoderVariant::Full, 6, &cnn);
        let mut g: Graph<f32> = Graph::new();
        let mut rng = Rng::new(9);
        let xd: Vec<f32> = (0..16 * 8).map(|_| rng.normal() as f32).collect();
        let x = g.leaf(Tensor::from_vec(vec![16, 8], xd).unwrap());
        let refs = {
            let mut data = Vec::new();
            for i in 0..4 {
                for j in 0..4 {
                    data.push((j as f32 + 0.5) / 4.0);
                    data.push((i as f32 + 0.5) / 4.0);
                }
            }
            g.constant(vec![16, 2], data).unwrap()
        };
        let out =
            sse::deform_attn_layer(&mut g, &ps, "train.sse.msda.layers.0", &cfg, x, &[4], refs)
                .unwrap();
        let expected = nn::linear(&mut g, &ps, "train.sse.msda.val0", x).unwrap();
        for (a, b) in g.data(out.aggregated).iter().zip(g.data(expected)) {
            worst = worst.max((a - b).abs() as f64);
        }
    }

    // DATE with zeroed output projection reduces to LayerNorm(F_p)
    {
        let mut ps: ParamStore<f32> = ParamStore::new();
        date::init_date(&mut ps, &mut Rng::new(1), 8);
        for v in ps.get_mut("train.date.attn.wo.w").unwrap().data.iter_mut() {
            *v = 0.0;
        }
        for v in ps.get_mut("train.date.attn.wo.b").unwrap().data.iter_mut() {
            *v = 0.0;
        }
        let cfg = DateConfig {
            heads: 2,
            variant: DateVariant::Inject,
        };
        let mut g: Graph<f32> = Graph::new();
        let mut rng = Rng::new(2);
        let fp: Vec<f32> = (0..5 * 8).map(|_| rng.normal() as f32).collect();
        let fa: Vec<f32> = (0..5 * 8).map(|_| rng.normal() as f32).collect();
        let p = g.leaf(Tensor::from_vec(vec![5, 8], fp).unwrap());
        let a = g.leaf(Tensor::from_vec(vec![5, 8], fa).unwrap());
        let mask = vec![true, true, true, false, false];
        let out = date::date_forward(&mut g, &ps, &cfg, p, a, &mask, &mask).unwrap();
        let expect = nn::layer_norm(&mut g, &ps, "train.date.ln", p).unwrap();
        for (x, y) in g.data(out.tokens).iter().zip(g.data(expect)) {
            worst = worst.max((x - y).abs() as f64);
        }
    }

    // VLCM with zeroed output projections reduces to residual pass-through
    {
        let cfg = VlcmConfig {
            dim: 8,
            heads: 2,
            variant: VlcmVariant::Gated,
        };
        let mut ps: ParamStore<f32> = ParamStore::new();
        vlcm::init_vlcm(&mut ps, &mut Rng::new(3), &cfg, 6);
        for name in [
            "train.vlcm.attn_v.wo.w",
            "train.vlcm.attn_v.wo.b",
            "train.vlcm.attn_t.wo.w",
            "train.vlcm.attn_t.wo.b",
        ] {
            for v in ps.get_mut(name).unwrap().data.iter_mut() {
                *v = 0.0;
            }
        }
        let mut g: Graph<f32> = Graph::new();
        let mut rng = Rng::new(4);
        let vd: Vec<f32> = (0..4 * 8).map(|_| rng.normal() as f32).collect();
        let td: Vec<f32> = (0..3 * 6).map(|_| rng.normal() as f32).collect();
        let v = g.leaf(Tensor::from_vec(vec![4, 8], vd).unwrap());
        let t = g.leaf(Tensor::from_vec(vec![3, 6], td).unwrap());
        let mask = vec![true, true, false];
        let out = vlcm::calibrate(&mut g, &ps, &cfg, v, t, &mask).unwrap();
        let ev = nn::layer_norm(&mut g, &ps, "train.vlcm.ln_v", v).unwrap();
        let t_in = nn::linear(&mut g, &ps, "train.vlcm.txt_in", t).unwrap();
        let et = nn::layer_norm(&mut g, &ps, "train.vlcm.ln_t", t_in).unwrap();
        for (x, y) in g.data(out.visual).iter().zip(g.data(ev)) {
            worst = worst.max((x - y).abs() as f64);
        }
        for (x, y) in g.data(out.text).iter().zip(g.data(et)) {
            worst = worst.max((x - y).abs() as f64);
        }
    }

    let pass = worst < 1e-5;
    report(
        outcomes,
        "criterion 3 (degeneracy identities)",
        pass,
        format!("max abs deviation {worst:.2e} (tolerance 1e-5)"),
    );
}

// ── criterion 4: synthetic-task performance ─────────────────────────────

type Trained = (ParamStore<f32>, ModelConfig, synth::Dataset);

fn criterion_4_synthetic_performance(
    outcomes: &mut Vec<Outcome>,
    dir: &Path,
) -> Option<Trained> {
    let start = Instant::now();
    let data_dir = dir.join("full_data");
    let exp = ExperimentConfig {
        train: TrainConfig {
            steps: 1600,
            batch: 8,
            seed: 0,
            eval_every: 200,
            eval_samples: 60,
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        },
        data: DataConfig {
            manifest: data_dir.join("manifest.json").to_string_lossy().into_owned(),
            n: 1000,
            seed: 42,
        },
        ..ExperimentConfig::default()
    };
    let model_cfg = exp.resolved_model();
    let tok = model_cfg.tokenizer();
    let geom = SceneGeometry {
        height: model_cfg.vit.image_size,
        width: model_cfg.vit.image_size,
    };
    synth::generate_dataset(exp.data.n, exp.data.seed, &geom, &tok, &data_dir).unwrap();
    let dataset = synth::load_dataset(&data_dir.join("manifest.json"), &tok).unwrap();

    let mut store: ParamStore<f32> = model::init_params(&model_cfg, exp.train.seed).unwrap();
    let train_records: Vec<_> = dataset
        .train_indices()
        .map(|i| dataset.records[i].clone())
        .collect();
    pretrain::pretrain_align(
        &mut store,
        &model_cfg.vit,
        &model_cfg.text,
        &train_records,
        &exp.pretrain,
    )
    .unwrap();

    let run_dir = dir.join("full_run");
    let outcome = train::train(&exp, &dataset, &mut store, &run_dir).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let pass = outcome.best_dice >= 0.85 && exp.train.steps <= 3000 && minutes < 30.0;
    report(
        outcomes,
        "criterion 4 (synthetic-task mDice)",
        pass,
        format!(
            "val mDice {:.4} at step {} ({} steps total, {:.1} min incl. data+pretrain)",
            outcome.best_dice, outcome.best_step, outcome.steps_run, minutes
        ),
    );
    Some((store, model_cfg, dataset))
}

// ── criterion 5: ablation ordering ──────────────────────────────────────

fn ablation_base(dir: &Path) -> ExperimentConfig {
    let data_dir = dir.join("ablate_data");
    ExperimentConfig {
        model: ModelConfig {
            vit: VitConfig {
                image_size: 64,
                patch_size: 32,
                embed_dim: 64,
                layers: 4,
                heads: 4,
            },
            text: TextConfig::default(),
            cnn: CnnConfig::default(),
            sse: SseConfig::default(),
            date: DateConfig::default(),
            vlcm: VlcmConfig::default(),
            decoder: decoder::DecoderConfig::default(),
            encoder_variant: EncoderVariant::Full,
        },
        toggles: Toggles::default(),
        train: TrainConfig {
            steps: 500,
            batch: 8,
            seed: 0,
            eval_every: 500,
            eval_samples: 45,
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        },
        pretrain: PretrainConfig {
            enabled: true,
            steps: 150,
            batch: 8,
            lr: 1e-3,
            seed: 7,
            temperature: 0.07,
        },
        data: DataConfig {
            manifest: data_dir.join("manifest.json").to_string_lossy().into_owned(),
            n: 400,
            seed: 1234,
        },
    }
}

fn criterion_5_ablation_ordering(outcomes: &mut Vec<Outcome>, dir: &Path) {
    let exp = ablation_base(dir);
    let data_dir = dir.join("ablate_data");
    let model_cfg = exp.resolved_model();
    let tok = model_cfg.tokenizer();
    let geom = SceneGeometry {
        height: model_cfg.vit.image_size,
        width: model_cfg.vit.image_size,
    };
    synth::generate_dataset(exp.data.n, exp.data.seed, &geom, &tok, &data_dir).unwrap();
    let dataset = synth::load_dataset(&data_dir.join("manifest.json"), &tok).unwrap();

    let seeds = [0u64, 1, 2];
    let rows = ablate::AblationHarness::new(&exp, &dataset, &seeds, &dir.join("ablate_runs"))
        .core_rows()
        .unwrap();
    println!("{}", ablate::render_core_table(&rows));
    let full = &rows[0];
    let baseline = &rows[4];
    let full_vs_baseline = full.dice_mean >= baseline.dice_mean;
    let mut single_removed_ok = true;
    let mut details = Vec::new();
    for row in &rows[1..4] {
        let pooled = ((full.dice_sd.powi(2) + row.dice_sd.powi(2)) / 2.0).sqrt();
        let ok = full.dice_mean >= row.dice_mean - pooled;
        single_removed_ok &= ok;
        details.push(format!(
            "{} {:.4}+/-{:.4}{}",
            row.id,
            row.dice_mean,
            row.dice_sd,
            if ok { "" } else { " VIOLATED" }
        ));
    }
    let pass = full_vs_baseline && single_removed_ok;
    report(
        outcomes,
        "criterion 5 (ablation ordering)",
        pass,
        format!(
            "full {:.4}+/-{:.4} vs baseline {:.4}+/-{:.4} (ordering {}); rows: {}",
            full.dice_mean,
            full.dice_sd,
            baseline.dice_mean,
            baseline.dice_sd,
            full_vs_baseline,
            details.join(", ")
        ),
    );
}

// ── criterion 6: referring behavior ─────────────────────────────────────

fn criterion_6_referring_behavior(
    outcomes: &mut Vec<Outcome>,
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
) {
    let tok = cfg.tokenizer();
    let geom = SceneGeometry {
        height: cfg.vit.image_size,
        width: cfg.vit.image_size,
    };
    // held-out probe stream, disjoint from the dataset's seed space
    let probes = synth::referring_probe_samples(0xbead, 50, &geom, &tok);
    let mut steered = 0usize;
    for probe in &probes {
        let lesion_zone = *probe.record.zones.iter().next().unwrap();
        let mirrored: std::collections::BTreeSet<_> =
            [lesion_zone.mirrored()].into_iter().collect();
        let swapped = PromptPair::from_strings(
            &grammar::generate_primary(&mirrored),
            &grammar::generate_auxiliary(&mirrored),
            &tok,
        );
        let mut g: Graph<f32> = Graph::new();
        let art = model::forward(
            &mut g,
            store,
            cfg,
            &tok,
            &probe.record.image_f32(),
            &swapped,
        )
        .unwrap();
        let pred = decoder::predict_mask(g.data(art.logits));
        let distractor = probe
            .distractors
            .iter()
            .find(|b| b.zone == lesion_zone.mirrored())
            .unwrap();
        let matching_mask = probe.blob_mask(distractor, &geom);
        let opposite_mask = probe.record.mask_bits();
        let (dice_match, _) = dice_iou(&pred, &matching_mask).unwrap();
        let (dice_opp, _) = dice_iou(&pred, &opposite_mask).unwrap();
        if dice_match > dice_opp {
            steered += 1;
        }
    }
    let frac = steered as f64 / probes.len() as f64;
    let pass = probes.len() >= 50 && frac >= 0.9;
    report(
        outcomes,
        "criterion 6 (referring behavior)",
        pass,
        format!(
            "{steered}/{} swapped-prompt predictions match the prompted side ({:.0}%)",
            probes.len(),
            frac * 100.0
        ),
    );
}

// ── criterion 7: metric identities ──────────────────────────────────────

fn criterion_7_metric_identities(outcomes: &mut Vec<Outcome>) {
    let mut rng = Rng::new(123);
    let mut ok = true;
    for _ in 0..500 {
        let p: Vec<bool> = (0..96).map(|_| rng.uniform() < 0.35).collect();
        let q: Vec<bool> = (0..96).map(|_| rng.uniform() < 0.35).collect();
        let (d, i) = dice_iou(&p, &q).unwrap();
        ok &= d >= i - 1e-9;
    }
    let m: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    let (d_same, i_same) = dice_iou(&m, &m).unwrap();
    ok &= (d_same - 1.0).abs() < 1e-9 && (i_same - 1.0).abs() < 1e-9;
    let a: Vec<bool> = (0..64).map(|i| i < 10).collect();
    let b: Vec<bool> = (0..64).map(|i| i >= 50).collect();
    let (d_disj, i_disj) = dice_iou(&a, &b).unwrap();
    ok &= d_disj < 1e-6 && i_disj < 1e-6;
    report(
        outcomes,
        "criterion 7 (metric identities)",
        ok,
        format!(
            "dice >= iou over 500 random pairs; perfect = ({d_same:.6}, {i_same:.6}), \
             disjoint = ({d_disj:.2e}, {i_disj:.2e})"
        ),
    );
}

// ── criterion 8: determinism ────────────────────────────────────────────

fn criterion_8_determinism(outcomes: &mut Vec<Outcome>, dir: &Path) {
    let data_dir = dir.join("mini_data");
    let manifest = data_dir.join("manifest.json");
    let cfg = miniature_experiment(&manifest, 30, 9);
    let tok = cfg.model.tokenizer();
    let dataset = synth::load_dataset(&manifest, &tok).unwrap();

    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
        let run_dir = dir.join(format!("det_{tag}"));
        let mut store: ParamStore<f32> = model::init_params(&cfg.model, 9).unwrap();
        train::train(&cfg, &dataset, &mut store, &run_dir).unwrap();
        let heat = simmap::similarity_heatmap(
            &store,
            &cfg.model,
            &tok,
            &dataset.records[0],
            true,
        )
        .unwrap();
        (
            fs::read(run_dir.join("metrics.jsonl")).unwrap(),
            fs::read(run_dir.join("last.tgcl")).unwrap(),
            fs::read(run_dir.join("best.tgcl")).unwrap(),
            heat,
        )
    };
    let a = run("a");
    let b = run("b");
    let pass = a == b;
    report(
        outcomes,
        "criterion 8 (determinism)",
        pass,
        format!(
            "two identical runs: logs {}, last checkpoint {}, best checkpoint {}, heatmap {}",
            eq(&a.0, &b.0),
            eq(&a.1, &b.1),
            eq(&a.2, &b.2),
            eq(&a.3, &b.3)
        ),
    );
}

fn eq(a: &[u8], b: &[u8]) -> &'static str {
    if a == b {
        "identical"
    } else {
        "DIFFER"
    }
}

// ── criterion 9: similarity-map contrast ────────────────────────────────

fn criterion_9_similarity_contrast(
    outcomes: &mut Vec<Outcome>,
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    dataset: &synth::Dataset,
) {
    let tok = cfg.tokenizer();
    let mut adapted_hits = 0usize;
    let mut raw_hits = 0usize;
    let mut n = 0usize;
    let mut adapted_margin = 0f64;
    let mut raw_margin = 0f64;
    for i in dataset.test_indices() {
        let rec = &dataset.records[i];
        if rec.zones.is_empty() {
            continue;
        }
        let mask = rec.mask_bits();
        let adapted = simmap::similarity_heatmap(store, cfg, &tok, rec, true).unwrap();
        let raw = simmap::similarity_heatmap(store, cfg, &tok, rec, false).unwrap();
        let (a_in, a_out) = simmap::mask_contrast(&adapted, &mask);
        let (r_in, r_out) = simmap::mask_contrast(&raw, &mask);
        if a_in > a_out {
            adapted_hits += 1;
        }
        if r_in > r_out {
            raw_hits += 1;
        }
        adapted_margin += a_in - a_out;
        raw_margin += r_in - r_out;
        n += 1;
        if n >= 60 {
            break;
        }
    }
    let frac = adapted_hits as f64 / n as f64;
    let pass = n >= 50 && frac >= 0.8;
    report(
        outcomes,
        "criterion 9 (similarity contrast)",
        pass,
        format!(
            "adapted in>out on {adapted_hits}/{n} ({:.0}%), mean margin {:.1}; \
             raw frozen encoders: {raw_hits}/{n}, mean margin {:.1}",
            frac * 100.0,
            adapted_margin / n as f64,
            raw_margin / n as f64
        ),
    );
}

