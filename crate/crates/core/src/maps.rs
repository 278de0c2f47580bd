//! Per-pixel probability, logit, mask and uncertainty rasters, and the
//! transforms between them: softmax, argmax prediction, entropy and resampling.
//!
//! All rasters are row-major. Multi-channel maps store channels fastest, so
//! the value for class `c` at `(x, y)` lives at `(y * width + x) * channels + c`.

use crate::error::{Error, Result};

/// Allowed deviation of a pixel's channel sum from 1.
pub const SIMPLEX_TOLERANCE: f32 = 1e-5;

fn check_dims(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("empty raster {width}x{height}")));
    }
    if channels == 0 {
        return Err(Error::invalid("raster must have at least one channel"));
    }
    let want = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::invalid("raster dimensions overflow"))?;
    if want != len {
        return Err(Error::invalid(format!(
            "{width}x{height}x{channels} raster needs {want} values, got {len}"
        )));
    }
    Ok(())
}

/// Unnormalized per-class scores straight out of a segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl LogitMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height, channels, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let px = i / channels;
            return Err(Error::invalid(format!(
                "non-finite logit {} at pixel ({}, {}) channel {}",
                data[i],
                px % width,
                px / width,
                i % channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Per-pixel class probabilities. Every pixel lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    /// Validates shape, the `[0, 1]` range and the per-pixel sum.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height, channels, data.len())?;
        if channels < 2 {
            return Err(Error::invalid("probability map needs at least two classes"));
        }
        for (px, probs) in data.chunks_exact(channels).enumerate() {
            let (x, y) = (px % width, px / width);
            if let Some(v) = probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!(
                    "probability {v} outside [0, 1] at pixel ({x}, {y})"
                )));
            }
            let sum: f32 = probs.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::invalid(format!(
                    "probabilities at pixel ({x}, {y}) sum to {sum}"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// A map with the same distribution at every pixel.
    pub fn constant(width: usize, height: usize, probs: &[f32]) -> Result<Self> {
        let data = probs
            .iter()
            .copied()
            .cycle()
            .take(width * height * probs.len())
            .collect();
        Self::new(width, height, probs.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Per-pixel predictive entropy in nats, bounded by `ln(channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl UncertaintyMap {
    /// `channels` is the class count of the distribution the entropy was taken
    /// over; it fixes the upper bound `ln(channels)`.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, 1, data.len())?;
        if channels < 2 {
            return Err(Error::invalid("entropy needs at least two classes"));
        }
        let max = (channels as f64).ln();
        if let Some(i) = data
            .iter()
            .position(|v| !(v.is_finite() && *v >= -1e-9 && *v <= max + 1e-9))
        {
            return Err(Error::invalid(format!(
                "uncertainty {} at pixel ({}, {}) outside [0, ln {channels}]",
                data[i],
                i % width,
                i / width
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Multiplies every value by `factor`. Used to check that selection does
    /// not depend on the logarithm base; the result is no longer bounded by
    /// `ln(channels)` so it bypasses validation.
    pub fn scaled(&self, factor: f64) -> UncertaintyMap {
        UncertaintyMap {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Binary segmentation: 0 is background, 1 is vessel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, 1, data.len())?;
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!(
                "mask value {} at pixel ({}, {}) is not 0 or 1",
                data[i],
                i % width,
                i / width
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "empty mask");
        assert!(value <= 1, "mask value must be 0 or 1");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(width > 0 && height > 0, "empty mask");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Flips every pixel.
    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }
}

/// 8-bit single-channel image, as stored in a binary PGM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, 1, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

impl From<&BinaryMask> for GrayImage {
    /// Encodes vessel pixels as 255.
    fn from(mask: &BinaryMask) -> Self {
        GrayImage {
            width: mask.width,
            height: mask.height,
            data: mask.data.iter().map(|&v| v * 255).collect(),
        }
    }
}

/// Converts logits to probabilities per pixel with the max-shifted
/// exponential, so large logits do not overflow.
pub fn softmax(logits: &LogitMap) -> ProbabilityMap {
    let c = logits.channels;
    let mut out = Vec::with_capacity(logits.data.len());
    let mut exps = vec![0f64; c];
    for z in logits.data.chunks_exact(c) {
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut sum = 0.0;
        for (e, &v) in exps.iter_mut().zip(z) {
            *e = (v as f64 - max).exp();
            sum += *e;
        }
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    ProbabilityMap {
        width: logits.width,
        height: logits.height,
        channels: c,
        data: out,
    }
}

/// Predicted class per pixel for a two-class map. A tie goes to background.
pub fn argmax_mask(prob: &ProbabilityMap) -> Result<BinaryMask> {
    if prob.channels != 2 {
        return Err(Error::invalid(format!(
            "argmax mask needs a two-class map, got {} channels",
            prob.channels
        )));
    }
    let data = prob
        .data
        .chunks_exact(2)
        .map(|p| (p[1] > p[0]) as u8)
        .collect();
    Ok(BinaryMask {
        width: prob.width,
        height: prob.height,
        data,
    })
}

/// Shannon entropy per pixel in nats, with `0 * ln 0 = 0`.
pub fn entropy_map(prob: &ProbabilityMap) -> UncertaintyMap {
    let c = prob.channels;
    let max = (c as f64).ln();
    let data = prob
        .data
        .chunks_exact(c)
        .map(|p| {
            let h: f64 = p
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| {
                    let v = v as f64;
                    -v * v.ln()
                })
                .sum();
            h.clamp(0.0, max)
        })
        .collect();
    UncertaintyMap {
        width: prob.width,
        height: prob.height,
        channels: c,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMethod {
    Nearest,
    Bilinear,
}

/// Source coordinate of a destination pixel center under half-pixel
/// alignment: `(dst + 0.5) * src_len / dst_len - 0.5`.
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Resizes a probability map to `width` x `height`.
///
/// Pixel centers are aligned (the convention of most imaging libraries with
/// `align_corners = false`), and coordinates are clamped at the border.
/// Bilinear output is renormalized to the simplex per pixel. When all four
/// bilinear neighbours are identical their value is copied unchanged.
pub fn resample(
    map: &ProbabilityMap,
    width: usize,
    height: usize,
    method: ResampleMethod,
) -> Result<ProbabilityMap> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "resample target {width}x{height} is empty"
        )));
    }
    if width == map.width && height == map.height {
        return Ok(map.clone());
    }
    let c = map.channels;
    let mut data = Vec::with_capacity(width * height * c);
    match method {
        ResampleMethod::Nearest => {
            for y in 0..height {
                let sy = nearest_index(y, map.height, height);
                for x in 0..width {
                    let sx = nearest_index(x, map.width, width);
                    data.extend_from_slice(map.pixel(sx, sy));
                }
            }
        }
        ResampleMethod::Bilinear => {
            let mut acc = vec![0f64; c];
            for y in 0..height {
                let (y0, y1, fy) = bilinear_taps(y, map.height, height);
                for x in 0..width {
                    let (x0, x1, fx) = bilinear_taps(x, map.width, width);
                    let taps = [
                        (map.pixel(x0, y0), (1.0 - fx) * (1.0 - fy)),
                        (map.pixel(x1, y0), fx * (1.0 - fy)),
                        (map.pixel(x0, y1), (1.0 - fx) * fy),
                        (map.pixel(x1, y1), fx * fy),
                    ];
                    if taps.iter().all(|(p, _)| *p == taps[0].0) {
                        data.extend_from_slice(taps[0].0);
                        continue;
                    }
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for (p, w) in taps {
                        for (a, &v) in acc.iter_mut().zip(p) {
                            *a += w * v as f64;
                        }
                    }
                    let sum: f64 = acc.iter().sum();
                    data.extend(acc.iter().map(|a| (a / sum) as f32));
                }
            }
        }
    }
    Ok(ProbabilityMap {
        width,
        height,
        channels: c,
        data,
    })
}

fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    s.min(src_len - 1)
}

fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = source_coord(dst, src_len, dst_len).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(pixels: &[[f32; 2]]) -> LogitMap {
        let data = pixels.iter().flatten().copied().collect();
        LogitMap::new(pixels.len(), 1, 2, data).unwrap()
    }

    #[test]
    fn softmax_symmetric_pixel_is_uniform() {
        let p = softmax(&logits(&[[0.0, 0.0]]));
        assert_eq!(p.pixel(0, 0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        for k in [-3.0f32, 0.5, 4.0] {
            for z in [-20.0f32, 7.0, 100.0] {
                let a = softmax(&logits(&[[z, z + k]]));
                let b = softmax(&logits(&[[0.0, k]]));
                for (u, v) in a.data().iter().zip(b.data()) {
                    assert!((u - v).abs() <= 1e-6, "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn softmax_known_value() {
        // 1 / (1 + e) evaluated to 12 digits.
        let p = softmax(&logits(&[[1.0, 2.0]]));
        assert!((p.pixel(0, 0)[0] as f64 - 0.268941421370).abs() < 1e-5);
        assert!((p.pixel(0, 0)[1] as f64 - 0.731058578630).abs() < 1e-5);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&logits(&[[1e30, -1e30]]));
        assert_eq!(p.pixel(0, 0), &[1.0, 0.0]);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let err = LogitMap::new(2, 1, 2, vec![0.0, 1.0, f32::NAN, 0.0]).unwrap_err();
        assert!(err.to_string().contains("pixel (1, 0)"), "{err}");
        assert!(LogitMap::new(1, 1, 2, vec![f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn argmax_ties_go_to_background() {
        let p = ProbabilityMap::new(3, 1, 2, vec![0.7, 0.3, 0.5, 0.5, 0.2, 0.8]).unwrap();
        assert_eq!(argmax_mask(&p).unwrap().data(), &[0, 0, 1]);
        let uniform = ProbabilityMap::constant(4, 3, &[0.5, 0.5]).unwrap();
        assert_eq!(argmax_mask(&uniform).unwrap().count_ones(), 0);
    }

    #[test]
    fn argmax_rejects_multiclass() {
        let p = ProbabilityMap::constant(2, 2, &[0.2, 0.3, 0.5]).unwrap();
        assert!(argmax_mask(&p).is_err());
    }

    #[test]
    fn entropy_reference_values() {
        let p = ProbabilityMap::new(3, 1, 2, vec![1.0, 0.0, 0.5, 0.5, 0.9, 0.1]).unwrap();
        let h = entropy_map(&p);
        assert_eq!(h.get(0, 0), 0.0);
        assert!((h.get(1, 0) - std::f64::consts::LN_2).abs() < 1e-12);
        // -(0.9 ln 0.9 + 0.1 ln 0.1) = 0.325082973391...
        assert!((h.get(2, 0) - 0.325082973391).abs() < 1e-6);
    }

    #[test]
    fn probability_map_validation() {
        assert!(ProbabilityMap::new(1, 1, 2, vec![0.6, 0.6]).is_err());
        assert!(ProbabilityMap::new(1, 1, 2, vec![1.2, -0.2]).is_err());
        assert!(ProbabilityMap::new(2, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(ProbabilityMap::new(1, 1, 1, vec![1.0]).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
        assert_eq!(BinaryMask::new(2, 1, vec![0, 1]).unwrap().count_ones(), 1);
    }

    #[test]
    fn resample_identity_and_constant() {
        let p = ProbabilityMap::new(2, 1, 2, vec![0.1, 0.9, 0.35, 0.65]).unwrap();
        for m in [ResampleMethod::Nearest, ResampleMethod::Bilinear] {
            assert_eq!(resample(&p, 2, 1, m).unwrap(), p);
        }
        let c = ProbabilityMap::constant(3, 2, &[0.3, 0.7]).unwrap();
        for m in [ResampleMethod::Nearest, ResampleMethod::Bilinear] {
            let r = resample(&c, 7, 5, m).unwrap();
            assert_eq!(r, ProbabilityMap::constant(7, 5, &[0.3, 0.7]).unwrap());
        }
        assert!(resample(&c, 0, 4, ResampleMethod::Nearest).is_err());
    }

    #[test]
    fn nearest_copies_source_pixels() {
        let p =
            ProbabilityMap::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.25, 0.75, 0.5, 0.5]).unwrap();
        let r = resample(&p, 4, 4, ResampleMethod::Nearest).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(r.pixel(x, y), p.pixel(x / 2, y / 2));
            }
        }
        let down = resample(&r, 2, 2, ResampleMethod::Nearest).unwrap();
        assert_eq!(down, p);
    }
}
