//! Binary-mask Dice and IoU.

use serde::Serialize;

use crate::error::{CoreError, Result};

pub const METRIC_EPS: f64 = 1e-6;

/// `(dice, iou)` with epsilon smoothing; for binary sets dice >= iou always.
pub fn dice_iou(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(CoreError::Config(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut g = 0u64;
    for (&a, &b) in pred.iter().zip(gt) {
        if a && b {
            inter += 1;
        }
        if a {
            p += 1;
        }
        if b {
            g += 1;
        }
    }
    let union = p + g - inter;
    let dice = (2.0 * inter as f64 + METRIC_EPS) / ((p + g) as f64 + METRIC_EPS);
    let iou = (inter as f64 + METRIC_EPS) / (union as f64 + METRIC_EPS);
    Ok((dice, iou))
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub m_dice: f64,
    pub m_iou: f64,
    pub per_sample: Vec<(f64, f64)>,
    pub step: usize,
    pub wallclock_s: f64,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<(f64, f64)>, step: usize, wallclock_s: f64) -> Self {
        let n = per_sample.len().max(1) as f64;
        let m_dice = per_sample.iter().map(|s| s.0).sum::<f64>() / n;
        let m_iou = per_sample.iter().map(|s| s.1).sum::<f64>() / n;
        MetricsReport {
            m_dice,
            m_iou,
            per_sample,
            step,
            wallclock_s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_overlap_is_one() {
        let m: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let (d, i) = dice_iou(&m, &m).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        assert!((i - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_masks_are_near_zero() {
        let a: Vec<bool> = (0..20).map(|i| i < 5).collect();
        let b: Vec<bool> = (0..20).map(|i| i >= 15).collect();
        let (d, i) = dice_iou(&a, &b).unwrap();
        assert!(d < 1e-6 && i < 1e-6, "{d} {i}");
    }

    #[test]
    fn half_overlap_set_arithmetic() {
        // |P| = |G| = 100, overlap 50
        let mut p = vec![false; 200];
        let mut g = vec![false; 200];
        for i in 0..100 {
            p[i] = true;
        }
        for i in 50..150 {
            g[i] = true;
        }
        let (d, i) = dice_iou(&p, &g).unwrap();
        assert!((d - 0.5).abs() < 1e-6, "dice {d}");
        assert!((i - 50.0 / 150.0).abs() < 1e-6, "iou {i}");
    }

    #[test]
    fn dice_bounds_iou_over_random_masks() {
        let mut rng = crate::rng::Rng::new(8);
        for _ in 0..200 {
            let p: Vec<bool> = (0..64).map(|_| rng.uniform() < 0.3).collect();
            let g: Vec<bool> = (0..64).map(|_| rng.uniform() < 0.3).collect();
            let (d, i) = dice_iou(&p, &g).unwrap();
            assert!(d >= i - 1e-5, "dice {d} < iou {i}");
            assert!((0.0..=1.0 + 1e-9).contains(&d) && (0.0..=1.0 + 1e-9).contains(&i));
        }
    }

    #[test]
    fn empty_vs_empty_is_perfect() {
        let empty = vec![false; 10];
        let (d, i) = dice_iou(&empty, &empty).unwrap();
        assert!((d - 1.0).abs() < 1e-9 && (i - 1.0).abs() < 1e-9);
    }
}
