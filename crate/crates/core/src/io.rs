//! On-disk formats.
//!
//! Float maps use a small binary container:
//!
//! ```text
//! FMAP1\n
//! <width> <height> <channels>\n
//! width*height*channels little-endian f32, row-major, channels fastest
//! ```
//!
//! with a JSON sidecar `<stem>.meta.json` holding
//! `{"width", "height", "channels", "kind"}`. Masks and images are binary
//! 8-bit PGM (P5); masks encode vessel as 255.
//!
//! Every writer goes through a temporary file in the destination directory
//! followed by a rename, so readers never observe a half-written file.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, GrayImage, LogitMap, ProbabilityMap, UncertaintyMap};

pub const FMAP_MAGIC: &[u8] = b"FMAP1\n";
const MAX_HEADER_LINE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Prob,
    Logit,
    Uncertainty,
}

/// Sidecar descriptor written next to every float map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapMeta {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub kind: MapKind,
}

/// Raw contents of a float-map file, before any semantic validation.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl From<&ProbabilityMap> for FloatMap {
    fn from(m: &ProbabilityMap) -> Self {
        FloatMap {
            width: m.width(),
            height: m.height(),
            channels: m.channels(),
            data: m.data().to_vec(),
        }
    }
}

impl From<&LogitMap> for FloatMap {
    fn from(m: &LogitMap) -> Self {
        FloatMap {
            width: m.width(),
            height: m.height(),
            channels: m.channels(),
            data: m.data().to_vec(),
        }
    }
}

impl From<&UncertaintyMap> for FloatMap {
    /// Narrows to f32, the storage precision of the format.
    fn from(m: &UncertaintyMap) -> Self {
        FloatMap {
            width: m.width(),
            height: m.height(),
            channels: 1,
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }
}

pub fn encode_fmap(map: &FloatMap) -> Vec<u8> {
    let header = format!("{} {} {}\n", map.width, map.height, map.channels);
    let mut out = Vec::with_capacity(FMAP_MAGIC.len() + header.len() + map.data.len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(header.as_bytes());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a float map. `path` is only used in diagnostics.
pub fn decode_fmap(bytes: &[u8], path: &Path) -> Result<FloatMap> {
    if !bytes.starts_with(FMAP_MAGIC) {
        let got = &bytes[..bytes.len().min(FMAP_MAGIC.len())];
        return Err(Error::format(
            path,
            0,
            format!(
                "bad magic {:?}, expected \"FMAP1\\n\"",
                String::from_utf8_lossy(got)
            ),
        ));
    }
    let start = FMAP_MAGIC.len();
    let rest = &bytes[start..];
    let nl = rest
        .iter()
        .take(MAX_HEADER_LINE)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, start, "unterminated dimension header"))?;
    let line = std::str::from_utf8(&rest[..nl])
        .map_err(|_| Error::format(path, start, "dimension header is not ASCII"))?;
    let dims: Vec<usize> = line
        .split(' ')
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::format(
                path,
                start,
                format!("expected \"width height channels\", got {line:?}"),
            )
        })?;
    let [width, height, channels] = dims[..] else {
        return Err(Error::format(
            path,
            start,
            format!("expected 3 dimensions, got {}", dims.len()),
        ));
    };
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::format(
            path,
            start,
            format!("zero dimension in {line:?}"),
        ));
    }
    let data_start = start + nl + 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, start, "dimensions overflow"))?;
    let payload = &bytes[data_start..];
    if payload.len() < expected {
        return Err(Error::format(
            path,
            bytes.len(),
            format!("truncated payload: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            path,
            data_start + expected,
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(FloatMap {
        width,
        height,
        channels,
        data,
    })
}

/// `dir/name.fmap` -> `dir/name.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn encode_meta(meta: &MapMeta) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(meta).expect("meta serializes");
    s.push('\n');
    s.into_bytes()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a map and its sidecar.
pub fn write_map(path: &Path, map: &FloatMap, kind: MapKind) -> Result<()> {
    let meta = MapMeta {
        width: map.width,
        height: map.height,
        channels: map.channels,
        kind,
    };
    write_atomic(path, &encode_fmap(map))?;
    write_atomic(&meta_path(path), &encode_meta(&meta))
}

/// Reads a map and, when present, its sidecar. A sidecar that disagrees with
/// the binary header is an error.
pub fn read_map(path: &Path) -> Result<(FloatMap, Option<MapKind>)> {
    let map = decode_fmap(&read_file(path)?, path)?;
    let mpath = meta_path(path);
    if !mpath.exists() {
        return Ok((map, None));
    }
    let meta: MapMeta = serde_json::from_slice(&read_file(&mpath)?).map_err(|e| Error::Serde {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    if (meta.width, meta.height, meta.channels) != (map.width, map.height, map.channels) {
        return Err(Error::format(
            &mpath,
            0,
            format!(
                "sidecar says {}x{}x{}, file header says {}x{}x{}",
                meta.width, meta.height, meta.channels, map.width, map.height, map.channels
            ),
        ));
    }
    Ok((map, Some(meta.kind)))
}

fn expect_kind(path: &Path, got: Option<MapKind>, want: MapKind) -> Result<()> {
    match got {
        Some(k) if k != want => Err(Error::format(
            meta_path(path),
            0,
            format!("map kind is {k:?}, expected {want:?}"),
        )),
        _ => Ok(()),
    }
}

fn semantic(path: &Path, e: Error) -> Error {
    Error::format(path, 0, e.to_string())
}

pub fn read_probability_map(path: &Path) -> Result<ProbabilityMap> {
    let (m, kind) = read_map(path)?;
    expect_kind(path, kind, MapKind::Prob)?;
    ProbabilityMap::new(m.width, m.height, m.channels, m.data).map_err(|e| semantic(path, e))
}

pub fn read_logit_map(path: &Path) -> Result<LogitMap> {
    let (m, kind) = read_map(path)?;
    expect_kind(path, kind, MapKind::Logit)?;
    LogitMap::new(m.width, m.height, m.channels, m.data).map_err(|e| semantic(path, e))
}

/// Reads an entropy map over `classes` classes. Values that the f32 storage
/// rounded just past `ln(classes)` are clamped back onto the bound.
pub fn read_uncertainty_map(path: &Path, classes: usize) -> Result<UncertaintyMap> {
    let (m, kind) = read_map(path)?;
    expect_kind(path, kind, MapKind::Uncertainty)?;
    if m.channels != 1 {
        return Err(Error::format(
            path,
            0,
            format!("uncertainty map must have 1 channel, has {}", m.channels),
        ));
    }
    let max = (classes as f64).ln();
    let data = m
        .data
        .iter()
        .map(|&v| {
            let v = v as f64;
            if v > max && v <= max + 1e-6 {
                max
            } else {
                v
            }
        })
        .collect();
    UncertaintyMap::new(m.width, m.height, classes, data).map_err(|e| semantic(path, e))
}

pub fn write_probability_map(path: &Path, map: &ProbabilityMap) -> Result<()> {
    write_map(path, &map.into(), MapKind::Prob)
}

pub fn write_logit_map(path: &Path, map: &LogitMap) -> Result<()> {
    write_map(path, &map.into(), MapKind::Logit)
}

pub fn write_uncertainty_map(path: &Path, map: &UncertaintyMap) -> Result<()> {
    write_map(path, &map.into(), MapKind::Uncertainty)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(self.path, start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are ASCII")
            .parse()
            .map_err(|_| Error::format(self.path, start, format!("{what} out of range")))
    }
}

/// Parses a binary 8-bit PGM (P5). `path` is only used in diagnostics.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::format(
            path,
            0,
            "not a binary PGM (missing P5 magic)",
        ));
    }
    let mut cur = HeaderCursor {
        bytes,
        pos: 2,
        path,
    };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(
            path,
            cur.pos,
            format!("empty image {width}x{height}"),
        ));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            path,
            cur.pos,
            format!("unsupported maxval {maxval}, only 8-bit PGM is supported"),
        ));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(Error::format(
                path,
                cur.pos,
                "missing whitespace after maxval",
            ));
        }
    }
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(path, cur.pos, "dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::format(
            path,
            bytes.len(),
            format!(
                "truncated pixel data: {} of {expected} bytes",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            path,
            cur.pos + expected,
            format!(
                "{} trailing bytes after pixel data",
                payload.len() - expected
            ),
        ));
    }
    if let Some(i) = payload.iter().position(|&v| v as usize > maxval) {
        return Err(Error::format(
            path,
            cur.pos + i,
            format!("sample {} exceeds maxval {maxval}", payload[i]),
        ));
    }
    GrayImage::new(width, height, payload.to_vec())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_file(path)?, path)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_atomic(path, &encode_pgm(img))
}

/// Interprets a grayscale image as a mask: zero is background, anything else
/// vessel.
pub fn mask_from_gray(img: &GrayImage, path: &Path) -> BinaryMask {
    let odd = img.data.iter().filter(|&&v| v != 0 && v != 255).count();
    if odd > 0 {
        warn!(
            "{}: {odd} mask pixels are neither 0 nor 255; treating them as vessel",
            path.display()
        );
    }
    let data = img.data.iter().map(|&v| (v != 0) as u8).collect();
    BinaryMask::new(img.width, img.height, data).expect("values are 0 or 1")
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<BinaryMask> {
    Ok(mask_from_gray(&decode_pgm(bytes, path)?, path))
}

pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    encode_pgm(&GrayImage::from(mask))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask(&read_file(path)?, path)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode_mask(mask))
}

/// Writes `bytes` to a temporary sibling of `path` and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Collects the outputs of a multi-file operation in a hidden staging
/// directory and moves them into place only on [`commit`](Self::commit).
/// Dropping an uncommitted stage deletes everything written so far.
#[derive(Debug)]
pub struct OutputStage {
    root: PathBuf,
    staging: tempfile::TempDir,
    files: Mutex<Vec<PathBuf>>,
}

impl OutputStage {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let staging = tempfile::Builder::new()
            .prefix(".stage-")
            .tempdir_in(root)
            .map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            staging,
            files: Mutex::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stages `bytes` under `rel`, a path relative to the output root.
    pub fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let rel = rel.as_ref();
        let target = self.staging.path().join(rel);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&target, bytes).map_err(|e| Error::io(self.root.join(rel), e))?;
        self.files
            .lock()
            .expect("stage lock")
            .push(rel.to_path_buf());
        Ok(())
    }

    /// Moves every staged file to its final location and returns the final
    /// paths in sorted order.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut files = self.files.into_inner().expect("stage lock");
        files.sort();
        files.dedup();
        let mut out = Vec::with_capacity(files.len());
        for rel in files {
            let dest = self.root.join(&rel);
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::rename(self.staging.path().join(&rel), &dest)
                .map_err(|e| Error::io(&dest, e))?;
            out.push(dest);
        }
        Ok(out)
    }
}
