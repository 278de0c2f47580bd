//! Synthetic vessel phantoms with exact ground truth.
//!
//! A phantom is a union of random branching curves. Each branch is a uniform
//! quadratic B-spline through a random-walk control polygon, so consecutive
//! segments join with a continuous tangent. A pixel is vessel iff the
//! distance from its center `(x + 0.5, y + 0.5)` to the spline (sampled at
//! most 0.25 px apart) is at most half the segment width.
//!
//! Intensities are `background_level` or `vessel_level`, raised to
//! `contrast_gamma`, Gaussian-blurred, perturbed with Gaussian noise, clamped
//! to `[0, 1]` and quantized to 8 bits.
//!
//! Randomness is derived from the parameter seed with [`mix_seed`]: vessel
//! `i` draws from stream `i + 1` and the noise from stream 0, so adding
//! vessels never moves existing ones. Dataset image `i` of a domain uses
//! seed `mix_seed(domain.seed, i)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, MapKind, OutputStage};
use crate::maps::{BinaryMask, GrayImage, LogitMap};
use crate::selection::round_half_up;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub vessel_count: usize,
    /// Vessel width bounds in pixels, `[min, max]`.
    pub width_range: [f64; 2],
    pub contrast_gamma: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub background_level: f64,
    pub vessel_level: f64,
}

impl DomainParams {
    /// Default desk-scale source domain: bright, crisp vessels.
    pub fn source_default() -> Self {
        Self {
            seed: 1,
            width: 512,
            height: 512,
            vessel_count: 6,
            width_range: [2.0, 7.0],
            contrast_gamma: 1.0,
            noise_sigma: 0.04,
            blur_sigma: 0.8,
            background_level: 0.25,
            vessel_level: 0.75,
        }
    }

    /// Default target domain: darker, lower contrast, noisier and blurrier.
    pub fn target_default() -> Self {
        Self {
            seed: 2,
            width: 512,
            height: 512,
            vessel_count: 6,
            width_range: [1.5, 6.0],
            contrast_gamma: 1.8,
            noise_sigma: 0.07,
            blur_sigma: 1.3,
            background_level: 0.35,
            vessel_level: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [wmin, wmax] = self.width_range;
        if !(wmin.is_finite() && wmax.is_finite() && wmin > 0.0 && wmax >= wmin) {
            return Err(Error::invalid(format!(
                "vessel width range [{wmin}, {wmax}] must satisfy 0 < min <= max"
            )));
        }
        if self.width == 0 || self.height == 0 || (self.width.min(self.height) as f64) < wmax {
            return Err(Error::invalid(format!(
                "image {}x{} is smaller than the maximum vessel width {wmax}",
                self.width, self.height
            )));
        }
        if !(self.contrast_gamma.is_finite() && self.contrast_gamma > 0.0) {
            return Err(Error::invalid("contrast_gamma must be positive"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        for (name, v) in [
            ("background_level", self.background_level),
            ("vessel_level", self.vessel_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        if self.level_byte(self.background_level) == self.level_byte(self.vessel_level) {
            return Err(Error::invalid(
                "background and vessel levels quantize to the same gray value",
            ));
        }
        Ok(())
    }

    fn level_byte(&self, level: f64) -> u8 {
        quantize(level.powf(self.contrast_gamma))
    }

    /// Gray values of background and vessel pixels in a noiseless, unblurred
    /// image.
    pub fn gray_levels(&self) -> (u8, u8) {
        (
            self.level_byte(self.background_level),
            self.level_byte(self.vessel_level),
        )
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of stream `k` from `seed`:
/// `splitmix64(seed + splitmix64(k))` with wrapping addition.
pub fn mix_seed(seed: u64, k: u64) -> u64 {
    splitmix64(seed.wrapping_add(splitmix64(k)))
}

#[derive(Debug, Clone, Copy)]
struct Pt {
    x: f64,
    y: f64,
}

fn lerp(a: Pt, b: Pt, t: f64) -> Pt {
    Pt {
        x: a.x + (b.x - a.x) * t,
        y: a.y + (b.y - a.y) * t,
    }
}

fn dist(a: Pt, b: Pt) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Quadratic Bezier piece of the spline with its stroke width.
struct Piece {
    p0: Pt,
    ctrl: Pt,
    p1: Pt,
    width: f64,
}

struct Branch {
    start: Pt,
    angle: f64,
    length: f64,
    width: f64,
    depth: u32,
}

const MAX_DEPTH: u32 = 2;

fn grow(rng: &mut ChaCha8Rng, b: Branch, min_width: f64, pieces: &mut Vec<Piece>) {
    let steps = rng.random_range(4..=7usize);
    let step = b.length / steps as f64;
    let mut angle = b.angle;
    let mut ctrl = vec![b.start];
    for _ in 0..steps {
        angle += rng.random_range(-0.45..0.45);
        let last = *ctrl.last().expect("non-empty");
        ctrl.push(Pt {
            x: last.x + step * angle.cos(),
            y: last.y + step * angle.sin(),
        });
    }
    let n = ctrl.len() - 1;
    let mut children = Vec::new();
    for j in 0..n - 1 {
        // Piece j runs between the midpoints of control edges j and j + 1.
        let p0 = if j == 0 {
            ctrl[0]
        } else {
            lerp(ctrl[j], ctrl[j + 1], 0.5)
        };
        let p1 = if j == n - 2 {
            ctrl[n]
        } else {
            lerp(ctrl[j + 1], ctrl[j + 2], 0.5)
        };
        let taper = 1.0 - 0.35 * j as f64 / n as f64;
        let width = (b.width * taper).max(min_width);
        pieces.push(Piece {
            p0,
            ctrl: ctrl[j + 1],
            p1,
            width,
        });
        if b.depth < MAX_DEPTH && rng.random_bool(0.35) {
            let dir = (ctrl[j + 2].y - ctrl[j + 1].y).atan2(ctrl[j + 2].x - ctrl[j + 1].x);
            let turn = rng.random_range(0.5..1.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            children.push(Branch {
                start: p1,
                angle: dir + turn,
                length: b.length * rng.random_range(0.3..0.55),
                width: (width * 0.7).max(min_width),
                depth: b.depth + 1,
            });
        }
    }
    for c in children {
        grow(rng, c, min_width, pieces);
    }
}

fn stamp_segment(mask: &mut BinaryMask, a: Pt, b: Pt, radius: f64) {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let x_lo = (a.x.min(b.x) - radius - 0.5).floor().max(0.0);
    let x_hi = (a.x.max(b.x) + radius - 0.5).ceil().min(w - 1.0);
    let y_lo = (a.y.min(b.y) - radius - 0.5).floor().max(0.0);
    let y_hi = (a.y.max(b.y) + radius - 0.5).ceil().min(h - 1.0);
    if x_lo > x_hi || y_lo > y_hi {
        return;
    }
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    for y in y_lo as usize..=y_hi as usize {
        for x in x_lo as usize..=x_hi as usize {
            let p = Pt {
                x: x as f64 + 0.5,
                y: y as f64 + 0.5,
            };
            let t = if len2 > 0.0 {
                (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            if dist(p, lerp(a, b, t)) <= radius {
                mask.set(x, y, true);
            }
        }
    }
}

fn rasterize(mask: &mut BinaryMask, piece: &Piece) {
    let approx_len = dist(piece.p0, piece.ctrl) + dist(piece.ctrl, piece.p1);
    let n = ((approx_len / 0.25).ceil() as usize).max(1);
    let at = |t: f64| {
        lerp(
            lerp(piece.p0, piece.ctrl, t),
            lerp(piece.ctrl, piece.p1, t),
            t,
        )
    };
    let radius = piece.width / 2.0;
    let mut prev = at(0.0);
    for i in 1..=n {
        let next = at(i as f64 / n as f64);
        stamp_segment(mask, prev, next, radius);
        prev = next;
    }
}

/// Ground-truth mask of a phantom.
pub fn vessel_mask(params: &DomainParams) -> Result<BinaryMask> {
    params.validate()?;
    let (w, h) = (params.width as f64, params.height as f64);
    let [wmin, wmax] = params.width_range;
    let mut mask = BinaryMask::zeros(params.width, params.height);
    for i in 0..params.vessel_count {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, i as u64 + 1));
        let start = Pt {
            x: rng.random_range(0.0..w),
            y: rng.random_range(0.0..h),
        };
        // Aim roughly across the image so trunks do not leave immediately.
        let toward_center = (h / 2.0 - start.y).atan2(w / 2.0 - start.x);
        let trunk = Branch {
            start,
            angle: toward_center + rng.random_range(-PI / 3.0..PI / 3.0),
            length: w.max(h) * rng.random_range(0.45..0.9),
            width: if wmax > wmin {
                rng.random_range(wmin..=wmax)
            } else {
                wmin
            },
            depth: 0,
        };
        let mut pieces = Vec::new();
        grow(&mut rng, trunk, wmin, &mut pieces);
        for p in &pieces {
            rasterize(&mut mask, p);
        }
    }
    Ok(mask)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn blur(img: &mut [f64], width: usize, height: usize, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let sx = (x as i64 + i as i64 - r).clamp(0, width as i64 - 1) as usize;
                    w * img[y * width + sx]
                })
                .sum();
        }
    }
    for y in 0..height {
        for x in 0..width {
            img[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let sy = (y as i64 + i as i64 - r).clamp(0, height as i64 - 1) as usize;
                    w * tmp[sy * width + x]
                })
                .sum();
        }
    }
}

/// Renders a phantom and its ground-truth mask.
pub fn gen_vessel_image(params: &DomainParams) -> Result<(GrayImage, BinaryMask)> {
    let mask = vessel_mask(params)?;
    let (bg, fg) = (
        params.background_level.powf(params.contrast_gamma),
        params.vessel_level.powf(params.contrast_gamma),
    );
    let mut intensity: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m == 1 { fg } else { bg })
        .collect();
    blur(
        &mut intensity,
        params.width,
        params.height,
        params.blur_sigma,
    );
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, 0));
        let normal = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
        for v in &mut intensity {
            *v += normal.sample(&mut rng);
        }
    }
    let data = intensity.into_iter().map(quantize).collect();
    Ok((GrayImage::new(params.width, params.height, data)?, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// 6:2:2 split of `n >= 5` images: train and validation sizes are rounded
/// half up, the test split takes the rest.
pub fn split_counts(n: usize) -> Result<SplitCounts> {
    if n < 5 {
        return Err(Error::invalid(format!(
            "need at least 5 images per domain for a 6:2:2 split, got {n}"
        )));
    }
    let train = round_half_up(0.6 * n as f64);
    let val = round_half_up(0.2 * n as f64);
    Ok(SplitCounts {
        train,
        val,
        test: n - train - val,
    })
}

/// Stand-in for a frozen source model: a logistic classifier on pixel
/// intensity, fitted on source images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityProbe {
    /// Intensity (in `[0, 1]`) where both classes are equally likely.
    pub threshold: f64,
    /// Vessel logit per unit intensity above the threshold; negative when
    /// vessels are darker than background.
    pub slope: f64,
}

impl IntensityProbe {
    /// Puts the threshold halfway between the mean vessel and mean
    /// background intensity and scales the slope so the class means sit at
    /// logits of +-4.
    pub fn fit(samples: &[(GrayImage, BinaryMask)]) -> Result<Self> {
        let (mut sum, mut n) = ([0.0f64; 2], [0u64; 2]);
        for (img, mask) in samples {
            for (&v, &m) in img.data.iter().zip(mask.data()) {
                sum[m as usize] += v as f64 / 255.0;
                n[m as usize] += 1;
            }
        }
        if n[0] == 0 || n[1] == 0 {
            return Err(Error::invalid(
                "probe fitting needs both vessel and background pixels",
            ));
        }
        let (bg, fg) = (sum[0] / n[0] as f64, sum[1] / n[1] as f64);
        if fg == bg {
            return Err(Error::invalid("vessel and background intensities coincide"));
        }
        Ok(Self {
            threshold: (bg + fg) / 2.0,
            slope: 8.0 / (fg - bg),
        })
    }

    /// Two-channel logits `(0, slope * (I - threshold))` per pixel.
    pub fn logits(&self, img: &GrayImage) -> LogitMap {
        let data = img
            .data
            .iter()
            .flat_map(|&v| {
                [
                    0.0,
                    (self.slope * (v as f64 / 255.0 - self.threshold)) as f32,
                ]
            })
            .collect();
        LogitMap::new(img.width, img.height, 2, data).expect("finite logits")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub params: DomainParams,
    pub splits: SplitCounts,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// `dataset.json`, written at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub source: DomainRecord,
    pub target: DomainRecord,
    pub probe: IntensityProbe,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

/// Parameters of image `index` of a domain.
pub fn image_params(domain: &DomainParams, index: usize) -> DomainParams {
    DomainParams {
        seed: mix_seed(domain.seed, index as u64),
        ..domain.clone()
    }
}

type Rendered = (String, GrayImage, BinaryMask);

fn render_domain(
    name: &str,
    params: &DomainParams,
    count: usize,
) -> Result<(DomainRecord, Vec<Rendered>)> {
    params.validate()?;
    let splits = split_counts(count)?;
    let images = (0..count)
        .map(|i| {
            let (img, mask) = gen_vessel_image(&image_params(params, i))?;
            Ok((format!("{name}_{i:03}"), img, mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = images.iter().map(|(id, _, _)| id.clone()).collect();
    let record = DomainRecord {
        params: params.clone(),
        splits,
        train: ids[..splits.train].to_vec(),
        val: ids[splits.train..splits.train + splits.val].to_vec(),
        test: ids[splits.train + splits.val..].to_vec(),
    };
    Ok((record, images))
}

fn split_of(record: &DomainRecord, id: &str) -> &'static str {
    if record.train.iter().any(|t| t == id) {
        "train"
    } else if record.val.iter().any(|t| t == id) {
        "val"
    } else {
        "test"
    }
}

/// Writes a source/target dataset under `out_dir`:
///
/// ```text
/// dataset.json
/// {source,target}/{train,val,test}/images/<id>.pgm
/// {source,target}/{train,val,test}/masks/<id>.pgm
/// target/{train,val,test}/maps/<id>.fmap (+ .meta.json)   probe logits
/// ```
///
/// Images are assigned to splits in generation order. The probe is fitted
/// on the source training split.
pub fn gen_dataset(
    source: &DomainParams,
    target: &DomainParams,
    counts: (usize, usize),
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let (src_rec, src_imgs) = render_domain("source", source, counts.0)?;
    let (tgt_rec, tgt_imgs) = render_domain("target", target, counts.1)?;
    let train: Vec<(GrayImage, BinaryMask)> = src_imgs[..src_rec.splits.train]
        .iter()
        .map(|(_, i, m)| (i.clone(), m.clone()))
        .collect();
    let probe = IntensityProbe::fit(&train)?;

    let stage = OutputStage::new(out_dir)?;
    for (domain, rec, imgs) in [
        ("source", &src_rec, &src_imgs),
        ("target", &tgt_rec, &tgt_imgs),
    ] {
        for (id, img, mask) in imgs {
            let dir = Path::new(domain).join(split_of(rec, id));
            stage.write(
                dir.join("images").join(format!("{id}.pgm")),
                &io::encode_pgm(img),
            )?;
            stage.write(
                dir.join("masks").join(format!("{id}.pgm")),
                &io::encode_mask(mask),
            )?;
            if domain == "target" {
                let logits = probe.logits(img);
                let fmap = io::FloatMap::from(&logits);
                let meta = io::MapMeta {
                    width: fmap.width,
                    height: fmap.height,
                    channels: fmap.channels,
                    kind: MapKind::Logit,
                };
                stage.write(
                    dir.join("maps").join(format!("{id}.fmap")),
                    &io::encode_fmap(&fmap),
                )?;
                stage.write(
                    dir.join("maps").join(format!("{id}.meta.json")),
                    &io::encode_meta(&meta),
                )?;
            }
        }
    }
    let manifest = DatasetManifest {
        version: 1,
        source: src_rec,
        target: tgt_rec,
        probe,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("dataset manifest serializes");
    json.push('\n');
    stage.write(DATASET_MANIFEST, json.as_bytes())?;
    stage.commit()?;
    Ok(manifest)
}
