//! Overlap and correlation metrics for binary vessel segmentation, with vessel
//! as the positive class.
//!
//! Degenerate denominators are defined rather than reported as errors:
//!
//! | metric | degenerate case | value |
//! |--------|-----------------|-------|
//! | Dice, IoU | prediction and ground truth both empty | 1 |
//! | MCC | any of the four marginal sums is zero | 0 |
//! | BM | sensitivity or specificity undefined | that term counts as 0 |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::BinaryMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(
            self.tp + o.tp,
            self.fp + o.fp,
            self.fn_ + o.fn_,
            self.tn + o.tn,
        )
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::DimensionMismatch {
            what: "prediction".into(),
            got_w: pred.width(),
            got_h: pred.height(),
            want_w: gt.width(),
            want_h: gt.height(),
        });
    }
    // Index by 2 * pred + gt: tn, fn, fp, tp.
    let mut cells = [0u64; 4];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        cells[(2 * p + g) as usize] += 1;
    }
    Ok(ConfusionCounts::new(cells[3], cells[2], cells[1], cells[0]))
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return 1.0;
    }
    (2 * c.tp) as f64 / den as f64
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        return 1.0;
    }
    c.tp as f64 / den as f64
}

/// Matthews correlation coefficient. The numerator is formed in exact integer
/// arithmetic.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let factors = [c.tp + c.fp, c.tp + c.fn_, c.tn + c.fp, c.tn + c.fn_];
    if factors.contains(&0) {
        return 0.0;
    }
    let num = c.tp as i128 * c.tn as i128 - c.fp as i128 * c.fn_ as i128;
    let pair = |a: u64, b: u64| ((a as u128 * b as u128) as f64).sqrt();
    let den = pair(factors[0], factors[1]) * pair(factors[2], factors[3]);
    (num as f64 / den).clamp(-1.0, 1.0)
}

/// Bookmaker informedness: sensitivity + specificity - 1.
pub fn bm(c: &ConfusionCounts) -> f64 {
    let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    ratio(c.tp, c.tp + c.fn_) + ratio(c.tn, c.tn + c.fp) - 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub dice: f64,
    pub iou: f64,
    pub mcc: f64,
    pub bm: f64,
}

impl ImageMetrics {
    pub fn from_counts(image_id: &str, c: &ConfusionCounts) -> Self {
        Self {
            image_id: image_id.to_string(),
            dice: dice(c),
            iou: iou(c),
            mcc: mcc(c),
            bm: bm(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and sample (n - 1) standard deviation; the deviation of
    /// a single value is 0.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cannot aggregate zero values"));
        }
        if values.iter().all(|&v| v == values[0]) {
            return Ok(Self {
                mean: values[0],
                std: 0.0,
            });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub dice: MeanStd,
    pub iou: MeanStd,
    pub mcc: MeanStd,
    pub bm: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
}

pub fn aggregate(per_image: Vec<ImageMetrics>) -> Result<MetricReport> {
    if per_image.is_empty() {
        return Err(Error::invalid("metric report needs at least one image"));
    }
    let col = |f: fn(&ImageMetrics) -> f64| -> Result<MeanStd> {
        MeanStd::of(&per_image.iter().map(f).collect::<Vec<_>>())
    };
    let aggregate = AggregateMetrics {
        dice: col(|m| m.dice)?,
        iou: col(|m| m.iou)?,
        mcc: col(|m| m.mcc)?,
        bm: col(|m| m.bm)?,
    };
    Ok(MetricReport {
        per_image,
        aggregate,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned table in percent with two decimals, one row per image plus a
    /// `mean±std` row.
    pub fn to_table(&self) -> String {
        let id_w = self
            .per_image
            .iter()
            .map(|m| m.image_id.len())
            .chain(["image".len(), "mean±std".chars().count()])
            .max()
            .unwrap_or(5);
        let mut out = format!(
            "{:<id_w$}  {:>13}  {:>13}  {:>13}  {:>13}\n",
            "image", "Dice", "IoU", "MCC", "BM"
        );
        for m in &self.per_image {
            out += &format!(
                "{:<id_w$}  {:>13.2}  {:>13.2}  {:>13.2}  {:>13.2}\n",
                m.image_id,
                100.0 * m.dice,
                100.0 * m.iou,
                100.0 * m.mcc,
                100.0 * m.bm
            );
        }
        let a = &self.aggregate;
        let cell = |s: &MeanStd| format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std);
        out += &format!(
            "{:<id_w$}  {:>13}  {:>13}  {:>13}  {:>13}\n",
            "mean±std",
            cell(&a.dice),
            cell(&a.iou),
            cell(&a.mcc),
            cell(&a.bm)
        );
        out
    }
}
