//! Deterministic synthetic referring-segmentation benchmark.
//!
//! Each sample is a thorax-like grayscale image (two bright elliptical lobes
//! over noisy background), 0-3 soft-edged lesion blobs in distinct zones,
//! plus 0-2 visually identical distractor blobs in zones the prompt does NOT
//! mention. The mask covers lesions only, so prompts carry real information:
//! a blob is foreground iff its zone is prompted. Everything is a pure
//! function of the sample seed.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grammar::{self, Zone, ALL_ZONES};
use crate::pgm;
use crate::rng::Rng;
use crate::vocab::{Tokenized, Tokenizer};

/// Geometry of the rendered scene, parameterized by image size.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneGeometry {
    pub height: usize,
    pub width: usize,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        SceneGeometry {
            height: 256,
            width: 256,
        }
    }
}

const LOBE_CY: f64 = 0.52;
const LOBE_A: f64 = 0.17;
const LOBE_B: f64 = 0.36;
const LOBE_CX: [f64; 2] = [0.30, 0.70]; // left, right
const LOBE_EDGE: f64 = 0.08;
const LOBE_INTENSITY: f64 = 0.50;
const BASE_INTENSITY: f64 = 0.08;
const NOISE_AMPLITUDE: f64 = 0.06;
const NOISE_GRID: usize = 9;
/// Lesion radius range in pixels at the 256x256 reference size.
const RADIUS_RANGE_AT_256: (f64, f64) = (8.0, 32.0);

impl SceneGeometry {
    fn scale(&self) -> f64 {
        self.height as f64 / 256.0
    }

    fn lobe_center(&self, left: bool) -> (f64, f64) {
        let cx = if left { LOBE_CX[0] } else { LOBE_CX[1] };
        (cx * self.width as f64, LOBE_CY * self.height as f64)
    }

    fn lobe_radii(&self) -> (f64, f64) {
        (LOBE_A * self.width as f64, LOBE_B * self.height as f64)
    }

    /// Normalized elliptical distance to the nearest lobe (<= 1 inside).
    pub fn lobe_distance(&self, x: f64, y: f64) -> f64 {
        let (a, b) = self.lobe_radii();
        let mut best = f64::INFINITY;
        for left in [true, false] {
            let (cx, cy) = self.lobe_center(left);
            let d = (((x - cx) / a).powi(2) + ((y - cy) / b).powi(2)).sqrt();
            best = best.min(d);
        }
        best
    }

    /// Soft lobe indicator; crosses 0.5 exactly on the ellipse boundary.
    fn lobe_soft(&self, x: f64, y: f64) -> f64 {
        let nd = self.lobe_distance(x, y);
        ((1.0 + LOBE_EDGE / 2.0 - nd) / LOBE_EDGE).clamp(0.0, 1.0)
    }

    pub fn inside_lobes(&self, x: f64, y: f64) -> bool {
        self.lobe_distance(x, y) <= 1.0
    }
}

/// One rendered blob (lesion or distractor).
#[derive(Clone, Debug)]
pub struct Blob {
    pub zone: Zone,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub peak: f64,
}

impl Blob {
    /// Gaussian profile whose half-intensity contour is at `radius`.
    fn sigma(&self) -> f64 {
        self.radius / (2f64.ln()).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    pub primary: String,
    pub auxiliary: String,
    pub primary_tok: Tokenized,
    pub auxiliary_tok: Tokenized,
}

impl PromptPair {
    pub fn from_strings(primary: &str, auxiliary: &str, tokenizer: &Tokenizer) -> Self {
        PromptPair {
            primary: primary.to_string(),
            auxiliary: auxiliary.to_string(),
            primary_tok: tokenizer.encode(primary),
            auxiliary_tok: tokenizer.encode(auxiliary),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub prompts: PromptPair,
    pub zones: BTreeSet<Zone>,
    pub seed: u64,
}

impl SampleRecord {
    pub fn image_f32(&self) -> Vec<f32> {
        self.image.iter().map(|&v| v as f32 / 255.0).collect()
    }

    pub fn mask_bits(&self) -> Vec<bool> {
        self.mask.iter().map(|&v| v >= 128).collect()
    }
}

/// Sample plus generator-internal blob metadata (not serialized).
#[derive(Clone, Debug)]
pub struct RichSample {
    pub record: SampleRecord,
    pub lesions: Vec<Blob>,
    pub distractors: Vec<Blob>,
}

impl RichSample {
    /// Support mask (half-intensity threshold) of one blob, clipped to lobes.
    pub fn blob_mask(&self, blob: &Blob, geom: &SceneGeometry) -> Vec<bool> {
        blob_support(blob, geom)
    }
}

fn place_blob(
    geom: &SceneGeometry,
    rng: &mut Rng,
    zone: Zone,
    existing: &[Blob],
) -> Blob {
    let scale = geom.scale();
    // absolute pixel floors keep supports non-empty and components separable
    // at small image sizes
    let (mut r_lo, mut r_hi) = (
        (RADIUS_RANGE_AT_256.0 * scale).max(1.6),
        (RADIUS_RANGE_AT_256.1 * scale).max(3.2),
    );
    let separation = (4.0 * scale).max(2.5);
    let (cx_l, cy_l) = geom.lobe_center(zone.is_left());
    let (a, b) = geom.lobe_radii();
    let peak = rng.range(0.38, 0.46);
    loop {
        let radius = rng.range(r_lo, r_hi);
        for _ in 0..64 {
            let u = rng.range(-0.72, 0.72);
            let v = if zone.is_upper() {
                rng.range(-0.72, -0.20)
            } else {
                rng.range(0.20, 0.72)
            };
            if u * u + v * v > 0.72 * 0.72 {
                continue;
            }
            let cx = cx_l + u * a;
            let cy = cy_l + v * b;
            let clear = existing.iter().all(|o| {
                let d = ((cx - o.cx).powi(2) + (cy - o.cy).powi(2)).sqrt();
                d >= radius + o.radius + separation
            });
            if clear {
                return Blob {
                    zone,
                    cx,
                    cy,
                    radius,
                    peak,
                };
            }
        }
        // crowded: retry with smaller blobs until the zone extremes fit
        r_hi = (r_hi * 0.85).max(1.6);
        r_lo = (r_lo * 0.85).max(1.2);
    }
}

fn blob_support(blob: &Blob, geom: &SceneGeometry) -> Vec<bool> {
    let (h, w) = (geom.height, geom.width);
    let mut out = vec![false; h * w];
    let sigma = blob.sigma();
    let reach = (3.0 * sigma).ceil() as isize;
    let (bx, by) = (blob.cx.round() as isize, blob.cy.round() as isize);
    for y in (by - reach).max(0)..(by + reach + 1).min(h as isize) {
        for x in (bx - reach).max(0)..(bx + reach + 1).min(w as isize) {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d2 = (fx - blob.cx).powi(2) + (fy - blob.cy).powi(2);
            let profile = (-d2 / (sigma * sigma)).exp();
            if profile * geom.lobe_soft(fx, fy) >= 0.5 {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Bilinearly interpolated value noise from a seeded coarse grid.
fn value_noise(geom: &SceneGeometry, rng: &mut Rng) -> Vec<f32> {
    let grid: Vec<f64> = (0..NOISE_GRID * NOISE_GRID)
        .map(|_| rng.uniform() * NOISE_AMPLITUDE)
        .collect();
    let (h, w) = (geom.height, geom.width);
    let mut out = vec![0f32; h * w];
    let gs = (NOISE_GRID - 1) as f64;
    for y in 0..h {
        let gy = y as f64 / (h - 1).max(1) as f64 * gs;
        let y0 = (gy.floor() as usize).min(NOISE_GRID - 2);
        let ty = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 / (w - 1).max(1) as f64 * gs;
            let x0 = (gx.floor() as usize).min(NOISE_GRID - 2);
            let tx = gx - x0 as f64;
            let v00 = grid[y0 * NOISE_GRID + x0];
            let v01 = grid[y0 * NOISE_GRID + x0 + 1];
            let v10 = grid[(y0 + 1) * NOISE_GRID + x0];
            let v11 = grid[(y0 + 1) * NOISE_GRID + x0 + 1];
            out[y * w + x] = ((v00 * (1.0 - tx) + v01 * tx) * (1.0 - ty)
                + (v10 * (1.0 - tx) + v11 * tx) * ty) as f32;
        }
    }
    out
}

fn render(geom: &SceneGeometry, noise: &[f32], blobs: &[Blob]) -> Vec<u8> {
    let (h, w) = (geom.height, geom.width);
    let mut img = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let soft = geom.lobe_soft(fx, fy);
            img[y * w + x] =
                (BASE_INTENSITY + noise[y * w + x] as f64 + LOBE_INTENSITY * soft) as f32;
        }
    }
    for blob in blobs {
        let sigma = blob.sigma();
        let reach = (3.0 * sigma).ceil() as isize;
        let (bx, by) = (blob.cx.round() as isize, blob.cy.round() as isize);
        for y in (by - reach).max(0)..(by + reach + 1).min(h as isize) {
            for x in (bx - reach).max(0)..(bx + reach + 1).min(w as isize) {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let d2 = (fx - blob.cx).powi(2) + (fy - blob.cy).powi(2);
                let contribution =
                    blob.peak * (-d2 / (sigma * sigma)).exp() * geom.lobe_soft(fx, fy);
                img[y as usize * w + x as usize] += contribution as f32;
            }
        }
    }
    img.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Generate one sample with full blob metadata.
pub fn generate_rich(seed: u64, geom: &SceneGeometry, tokenizer: &Tokenizer) -> RichSample {
    let root = Rng::new(seed);
    let mut layout = root.fork(1);
    let mut noise_rng = root.fork(2);

    // lesion count: 0 is the healthy case
    let count = match layout.below(20) {
        0..=1 => 0,
        2..=7 => 1,
        8..=14 => 2,
        _ => 3,
    };
    let lesion_zone_idx = layout.choose_distinct(4, count);
    let lesion_zones: Vec<Zone> = lesion_zone_idx.iter().map(|&i| ALL_ZONES[i]).collect();
    let remaining: Vec<Zone> = ALL_ZONES
        .iter()
        .copied()
        .filter(|z| !lesion_zones.contains(z))
        .collect();
    let distractor_count = layout.below(3).min(remaining.len());
    let distractor_pick = layout.choose_distinct(remaining.len(), distractor_count);

    let mut blobs: Vec<Blob> = Vec::new();
    let mut lesions = Vec::new();
    for &z in &lesion_zones {
        let b = place_blob(geom, &mut layout, z, &blobs);
        blobs.push(b.clone());
        lesions.push(b);
    }
    let mut distractors = Vec::new();
    for &i in &distractor_pick {
        let b = place_blob(geom, &mut layout, remaining[i], &blobs);
        blobs.push(b.clone());
        distractors.push(b);
    }

    let noise = value_noise(geom, &mut noise_rng);
    let image = render(geom, &noise, &blobs);

    let mut mask = vec![0u8; geom.height * geom.width];
    for lesion in &lesions {
        for (m, s) in mask.iter_mut().zip(blob_support(lesion, geom)) {
            if s {
                *m = 255;
            }
        }
    }

    let zones: BTreeSet<Zone> = lesion_zones.iter().copied().collect();
    let primary = grammar::generate_primary(&zones);
    let auxiliary = grammar::generate_auxiliary(&zones);
    RichSample {
        record: SampleRecord {
            image,
            mask,
            height: geom.height,
            width: geom.width,
            prompts: PromptPair::from_strings(&primary, &auxiliary, tokenizer),
            zones,
            seed,
        },
        lesions,
        distractors,
    }
}

pub fn generate_sample(seed: u64, geom: &SceneGeometry, tokenizer: &Tokenizer) -> SampleRecord {
    generate_rich(seed, geom, tokenizer).record
}

// ── zone re-derivation ──────────────────────────────────────────────────

/// Zones of the mask's connected components, by component centroid.
pub fn derive_zones_from_mask(mask: &[bool], geom: &SceneGeometry) -> BTreeSet<Zone> {
    let (h, w) = (geom.height, geom.width);
    let mut seen = vec![false; h * w];
    let mut zones = BTreeSet::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut sum_x = 0f64;
        let mut sum_y = 0f64;
        let mut count = 0f64;
        stack.push(start);
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            sum_x += x as f64;
            sum_y += y as f64;
            count += 1.0;
            let mut try_push = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                try_push(p - 1);
            }
            if x + 1 < w {
                try_push(p + 1);
            }
            if y > 0 {
                try_push(p - w);
            }
            if y + 1 < h {
                try_push(p + w);
            }
        }
        let (cx, cy) = (sum_x / count, sum_y / count);
        let left = cx < w as f64 / 2.0;
        let upper = cy < LOBE_CY * h as f64;
        zones.insert(match (left, upper) {
            (true, true) => Zone::LeftUpper,
            (true, false) => Zone::LeftLower,
            (false, true) => Zone::RightUpper,
            (false, false) => Zone::RightLower,
        });
    }
    zones
}

// ── dataset on disk ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplePaths {
    pub image: String,
    pub mask: String,
    pub prompts: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub split_sizes: SplitSizes,
    pub samples: Vec<SamplePaths>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PromptsFile {
    primary: String,
    auxiliary: String,
    zones: Vec<Zone>,
    seed: u64,
}

pub fn split_sizes(n: usize) -> SplitSizes {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    SplitSizes {
        train,
        val,
        test: n - train - val,
    }
}

/// Generate `n` samples under `out_dir` (PGM images/masks + prompt JSON)
/// with a manifest written last. Idempotent for fixed `(n, seed, geometry)`.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    geom: &SceneGeometry,
    tokenizer: &Tokenizer,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n < 3 {
        return Err(CoreError::Config(format!(
            "dataset needs n >= 3 to populate all splits, got {n}"
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut samples = Vec::with_capacity(n);
    let sample_seed_rng = Rng::new(seed);
    for i in 0..n {
        let sample_seed = sample_seed_rng.fork(i as u64).next_u64();
        let record = generate_sample(sample_seed, geom, tokenizer);
        let rel = format!("samples/s{i:05}");
        let dir = out_dir.join(&rel);
        fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        pgm::write(&dir.join("image.pgm"), record.width, record.height, &record.image)?;
        pgm::write(&dir.join("mask.pgm"), record.width, record.height, &record.mask)?;
        let prompts = PromptsFile {
            primary: record.prompts.primary.clone(),
            auxiliary: record.prompts.auxiliary.clone(),
            zones: record.zones.iter().copied().collect(),
            seed: record.seed,
        };
        let ppath = dir.join("prompts.json");
        let body = serde_json::to_string_pretty(&prompts).expect("prompts serialize");
        fs::write(&ppath, body).map_err(|e| CoreError::io(&ppath, e))?;
        samples.push(SamplePaths {
            image: format!("{rel}/image.pgm"),
            mask: format!("{rel}/mask.pgm"),
            prompts: format!("{rel}/prompts.json"),
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        count: n,
        seed,
        height: geom.height,
        width: geom.width,
        split_sizes: split_sizes(n),
        samples,
    };
    let mpath = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serialize");
    fs::write(&mpath, body).map_err(|e| CoreError::io(&mpath, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn geometry(&self) -> SceneGeometry {
        SceneGeometry {
            height: self.manifest.height,
            width: self.manifest.width,
        }
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.manifest.split_sizes.train
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        let s = &self.manifest.split_sizes;
        s.train..s.train + s.val
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        let s = &self.manifest.split_sizes;
        s.train + s.val..self.manifest.count
    }
}

/// Load a dataset back, validating per-record invariants.
pub fn load_dataset(manifest_path: &Path, tokenizer: &Tokenizer) -> Result<Dataset> {
    let body = fs::read_to_string(manifest_path).map_err(|e| CoreError::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&body).map_err(|e| CoreError::Json {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.samples.len() != manifest.count {
        return Err(CoreError::CorruptRecord {
            path: manifest_path.to_path_buf(),
            msg: format!(
                "manifest count {} != sample list length {}",
                manifest.count,
                manifest.samples.len()
            ),
        });
    }
    let geom = SceneGeometry {
        height: manifest.height,
        width: manifest.width,
    };
    let mut records = Vec::with_capacity(manifest.count);
    for paths in &manifest.samples {
        let ipath = base.join(&paths.image);
        let (iw, ih, image) = pgm::read(&ipath)?;
        let mpath = base.join(&paths.mask);
        let (mw, mh, mask) = pgm::read(&mpath)?;
        if (iw, ih) != (manifest.width, manifest.height) || (mw, mh) != (iw, ih) {
            return Err(CoreError::CorruptRecord {
                path: mpath,
                msg: format!("shape mismatch: image {iw}x{ih}, mask {mw}x{mh}"),
            });
        }
        if mask.iter().any(|&v| v != 0 && v != 255) {
            return Err(CoreError::CorruptRecord {
                path: mpath,
                msg: "mask is not binary".into(),
            });
        }
        let ppath = base.join(&paths.prompts);
        let pbody = fs::read_to_string(&ppath).map_err(|e| CoreError::io(&ppath, e))?;
        let prompts: PromptsFile = serde_json::from_str(&pbody).map_err(|e| CoreError::Json {
            path: ppath.clone(),
            source: e,
        })?;
        let zones: BTreeSet<Zone> = prompts.zones.iter().copied().collect();
        let mask_bits: Vec<bool> = mask.iter().map(|&v| v >= 128).collect();
        let derived = derive_zones_from_mask(&mask_bits, &geom);
        if derived != zones {
            return Err(CoreError::CorruptRecord {
                path: ppath,
                msg: format!("mask zones {derived:?} disagree with prompt zones {zones:?}"),
            });
        }
        records.push(SampleRecord {
            image,
            mask,
            height: manifest.height,
            width: manifest.width,
            prompts: PromptPair::from_strings(&prompts.primary, &prompts.auxiliary, tokenizer),
            zones,
            seed: prompts.seed,
        });
    }
    Ok(Dataset { manifest, records })
}

/// Held-out probes for the referring-behavior check: exactly one lesion,
/// with a distractor blob at the mirrored zone, drawn by rejection from a
/// dedicated seed stream. Swapping the prompt to the mirrored zone set then
/// has a well-defined matching mask (the distractor's support).
pub fn referring_probe_samples(
    seed: u64,
    n: usize,
    geom: &SceneGeometry,
    tokenizer: &Tokenizer,
) -> Vec<RichSample> {
    let stream = Rng::new(seed).fork(0x5245_4645_5252_45); // probe stream tag
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        let s = stream.fork(i).next_u64();
        i += 1;
        let rich = generate_rich(s, geom, tokenizer);
        if rich.record.zones.len() != 1 {
            continue;
        }
        let lesion_zone = *rich.record.zones.iter().next().unwrap();
        let mirrored = lesion_zone.mirrored();
        if rich.distractors.iter().any(|b| b.zone == mirrored) {
            out.push(rich);
        }
    }
    out
}
