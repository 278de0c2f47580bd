//! Reference implementations used as test oracles. Each one takes the most
//! direct route available and shares no code with the library paths it
//! checks.

#![allow(dead_code)]

use rand::Rng;
use vesselpatch::patching::PatchStat;

/// Round half up for a ratio given in exact integer percent.
pub fn percent_count(percent: u64, n: u64) -> u64 {
    ((percent * n + 50) / 100).max(1)
}

/// Cascade selection by materializing the full documented total order twice.
pub fn brute_force_cup(stats: &[PatchStat], c1_pct: u64, c2_pct: u64) -> Vec<(String, usize)> {
    let mut all: Vec<&PatchStat> = stats.iter().collect();
    all.sort_by(|a, b| {
        let ka = (
            std::cmp::Reverse(ordered(a.ves_u)),
            &a.image_id,
            a.patch_index,
        );
        let kb = (
            std::cmp::Reverse(ordered(b.ves_u)),
            &b.image_id,
            b.patch_index,
        );
        ka.cmp(&kb)
    });
    let k1 = percent_count(c1_pct, all.len() as u64) as usize;
    let mut stage1: Vec<&PatchStat> = all.into_iter().take(k1).collect();
    stage1.sort_by(|a, b| {
        let ka = (std::cmp::Reverse(a.ves_p), &a.image_id, a.patch_index);
        let kb = (std::cmp::Reverse(b.ves_p), &b.image_id, b.patch_index);
        ka.cmp(&kb)
    });
    let k2 = percent_count(c2_pct, k1 as u64) as usize;
    stage1
        .into_iter()
        .take(k2)
        .map(|s| (s.image_id.clone(), s.patch_index))
        .collect()
}

/// Totally ordered wrapper over non-negative finite floats via their bits.
fn ordered(v: f64) -> u64 {
    assert!(v >= 0.0 && v.is_finite());
    (v + 0.0).to_bits()
}

/// Random statistics with deliberate ties: uncertainty and vessel counts are
/// drawn from small pools, image ids from a short list.
pub fn random_stats(rng: &mut impl Rng, n: usize) -> Vec<PatchStat> {
    let ids = ["a", "b", "img10", "img2", "zz"];
    let u_pool: Vec<f64> = (0..rng.random_range(1..8))
        .map(|_| rng.random_range(0.0..50.0))
        .collect();
    let mut next_index = [0usize; 5];
    (0..n)
        .map(|_| {
            let which = rng.random_range(0..ids.len());
            let patch_index = next_index[which];
            next_index[which] += 1 + rng.random_range(0..3);
            let ves_u = if rng.random_bool(0.5) {
                u_pool[rng.random_range(0..u_pool.len())]
            } else {
                rng.random_range(0.0..50.0)
            };
            PatchStat {
                image_id: ids[which].to_string(),
                patch_index,
                ves_p: rng.random_range(0..6) * 10,
                ves_u,
            }
        })
        .collect()
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Entropy of softmax(z) through the log-partition identity
/// `H = lse(z) - sum_c softmax(z)_c z_c`, never forming `p ln p`.
pub fn entropy_from_logits(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|v| v - m).collect();
    let partition = compensated_sum(shifted.iter().map(|v| v.exp()));
    let lse = partition.ln();
    let mean = compensated_sum(shifted.iter().map(|v| v.exp() / partition * v));
    lse - mean
}

/// Bilinear sample with a tent kernel over the clamped source coordinate.
pub fn tent_sample(src: &[Vec<[f64; 2]>], sx: f64, sy: f64) -> [f64; 2] {
    let h = src.len();
    let w = src[0].len();
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let mut acc = [0.0; 2];
    for (j, row) in src.iter().enumerate() {
        for (i, px) in row.iter().enumerate() {
            let wgt =
                (1.0 - (sx - i as f64).abs()).max(0.0) * (1.0 - (sy - j as f64).abs()).max(0.0);
            acc[0] += wgt * px[0];
            acc[1] += wgt * px[1];
        }
    }
    let s = acc[0] + acc[1];
    [acc[0] / s, acc[1] / s]
}

pub struct Formulas {
    pub dice: f64,
    pub iou: f64,
    pub mcc: f64,
    pub bm: f64,
}

/// Metric definitions evaluated literally in f64.
pub fn formulas(tp: u64, fp: u64, fn_: u64, tn: u64) -> Formulas {
    let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
    Formulas {
        dice: 2.0 * tp / (2.0 * tp + fp + fn_),
        iou: tp / (tp + fp + fn_),
        mcc: (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt(),
        bm: tp / (tp + fn_) + tn / (tn + fp) - 1.0,
    }
}
