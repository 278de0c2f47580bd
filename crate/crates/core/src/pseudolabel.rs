//! Exporting selected patches for annotation and splicing the annotated
//! patches back into prediction masks to form enhanced pseudo-labels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, OutputStage};
use crate::maps::{BinaryMask, GrayImage};
use crate::patching::{PatchGrid, Rect};
use crate::selection::SelectionManifest;

/// File name used for an exported or annotated patch.
pub fn patch_file_name(image_id: &str, patch_index: usize) -> String {
    format!("{image_id}_{patch_index}.pgm")
}

/// Copies the pixels of `rect` out of `img`.
pub fn crop(img: &GrayImage, rect: Rect) -> GrayImage {
    let mut data = Vec::with_capacity(rect.area());
    for y in rect.y0..rect.y1 {
        let row = y * img.width;
        data.extend_from_slice(&img.data[row + rect.x0..row + rect.x1]);
    }
    GrayImage {
        width: rect.width(),
        height: rect.height(),
        data,
    }
}

/// Crops every manifest entry out of `images` (keyed by image id).
///
/// Returns `(file name, patch)` pairs in manifest order. An entry whose image
/// is missing or does not match the grid is an error.
pub fn extract_patches(
    images: &BTreeMap<String, GrayImage>,
    manifest: &SelectionManifest,
    grid: &PatchGrid,
) -> Result<Vec<(String, GrayImage)>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let img = images.get(&e.image_id).ok_or_else(|| Error::MissingImage {
                image_id: e.image_id.clone(),
                patch_index: e.patch_index,
            })?;
            grid.check_image(&format!("image `{}`", e.image_id), img.width, img.height)?;
            let rect = grid.bounds(e.patch_index)?;
            Ok((patch_file_name(&e.image_id, e.patch_index), crop(img, rect)))
        })
        .collect()
}

/// Writes one PGM per manifest entry into `out_dir`. Nothing is written if
/// any entry fails.
pub fn export_patches(
    images: &BTreeMap<String, GrayImage>,
    manifest: &SelectionManifest,
    grid: &PatchGrid,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let patches = extract_patches(images, manifest, grid)?;
    let stage = OutputStage::new(out_dir)?;
    for (name, patch) in &patches {
        stage.write(name, &io::encode_pgm(patch))?;
    }
    stage.commit()
}

/// Annotated patch masks keyed by `(image_id, patch_index)`.
#[derive(Debug, Clone)]
pub struct AnnotationSet {
    grid: PatchGrid,
    items: BTreeMap<(String, usize), BinaryMask>,
}

impl AnnotationSet {
    pub fn new(grid: PatchGrid) -> Self {
        Self {
            grid,
            items: BTreeMap::new(),
        }
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, image_id: &str, patch_index: usize) -> Option<&BinaryMask> {
        self.items.get(&(image_id.to_string(), patch_index))
    }

    /// Adds an annotation; it must have the grid's patch size.
    pub fn insert(&mut self, image_id: &str, patch_index: usize, mask: BinaryMask) -> Result<()> {
        if patch_index >= self.grid.len() {
            return Err(Error::invalid(format!(
                "annotation for patch {patch_index} of `{image_id}` is outside the {}-patch grid",
                self.grid.len()
            )));
        }
        if (mask.width(), mask.height()) != (self.grid.patch_width, self.grid.patch_height) {
            return Err(Error::DimensionMismatch {
                what: format!("annotation for patch {patch_index} of `{image_id}`"),
                got_w: mask.width(),
                got_h: mask.height(),
                want_w: self.grid.patch_width,
                want_h: self.grid.patch_height,
            });
        }
        self.items.insert((image_id.to_string(), patch_index), mask);
        Ok(())
    }

    /// Simulated annotator: copies the ground-truth pixels of every manifest
    /// entry.
    pub fn from_ground_truth(
        gt: &BTreeMap<String, BinaryMask>,
        manifest: &SelectionManifest,
        grid: &PatchGrid,
    ) -> Result<Self> {
        let mut set = Self::new(*grid);
        for e in &manifest.entries {
            let mask = gt.get(&e.image_id).ok_or_else(|| Error::MissingImage {
                image_id: e.image_id.clone(),
                patch_index: e.patch_index,
            })?;
            grid.check_image(
                &format!("ground truth `{}`", e.image_id),
                mask.width(),
                mask.height(),
            )?;
            let patch = crop_mask(mask, grid.bounds(e.patch_index)?);
            set.insert(&e.image_id, e.patch_index, patch)?;
        }
        Ok(set)
    }

    /// Loads `{image_id}_{patch_index}.pgm` for every manifest entry from
    /// `dir`. Missing files are an error; files not named by the manifest are
    /// ignored with a warning.
    pub fn load_dir(dir: &Path, manifest: &SelectionManifest, grid: &PatchGrid) -> Result<Self> {
        let mut set = Self::new(*grid);
        for e in &manifest.entries {
            let path = dir.join(patch_file_name(&e.image_id, e.patch_index));
            if !path.is_file() {
                return Err(Error::MissingAnnotation {
                    image_id: e.image_id.clone(),
                    patch_index: e.patch_index,
                });
            }
            set.insert(&e.image_id, e.patch_index, io::read_mask(&path)?)?;
        }
        let expected = manifest.entries.len();
        let on_disk = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
            .count();
        if on_disk > expected {
            warn!(
                "{}: {} annotation files are not in the manifest and were ignored",
                dir.display(),
                on_disk - expected
            );
        }
        Ok(set)
    }
}

pub fn crop_mask(mask: &BinaryMask, rect: Rect) -> BinaryMask {
    let mut data = Vec::with_capacity(rect.area());
    for y in rect.y0..rect.y1 {
        let row = y * mask.width();
        data.extend_from_slice(&mask.data()[row + rect.x0..row + rect.x1]);
    }
    BinaryMask::new(rect.width(), rect.height(), data).expect("crop of a valid mask")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchSource {
    Predicted,
    Annotated,
}

/// Prediction mask with annotated patches spliced in.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedLabel {
    pub image_id: String,
    pub mask: BinaryMask,
    /// Source of every grid patch, by patch index.
    pub provenance: Vec<PatchSource>,
}

/// JSON record written next to each enhanced label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub image_id: String,
    pub patches: usize,
    pub annotated: Vec<usize>,
}

impl EnhancedLabel {
    pub fn annotated_patches(&self) -> Vec<usize> {
        self.provenance
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == PatchSource::Annotated)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn provenance_record(&self) -> ProvenanceRecord {
        ProvenanceRecord {
            image_id: self.image_id.clone(),
            patches: self.provenance.len(),
            annotated: self.annotated_patches(),
        }
    }
}

/// Builds the enhanced label for `image_id`: annotation pixels inside the
/// manifest's patches for this image, prediction pixels everywhere else.
///
/// Every selected patch must have an annotation; there is no fallback to the
/// prediction.
pub fn merge_enhanced(
    image_id: &str,
    pred: &BinaryMask,
    annotations: &AnnotationSet,
    manifest: &SelectionManifest,
    grid: &PatchGrid,
) -> Result<EnhancedLabel> {
    grid.check_image(
        &format!("prediction `{image_id}`"),
        pred.width(),
        pred.height(),
    )?;
    if annotations.grid() != grid {
        return Err(Error::invalid(
            "annotation set was built for a different grid",
        ));
    }
    let mut data = pred.data().to_vec();
    let mut provenance = vec![PatchSource::Predicted; grid.len()];
    for e in manifest.entries_for(image_id) {
        let patch =
            annotations
                .get(image_id, e.patch_index)
                .ok_or_else(|| Error::MissingAnnotation {
                    image_id: image_id.to_string(),
                    patch_index: e.patch_index,
                })?;
        let rect = grid.bounds(e.patch_index)?;
        for (py, y) in (rect.y0..rect.y1).enumerate() {
            let src = &patch.data()[py * rect.width()..(py + 1) * rect.width()];
            let row = y * grid.image_width;
            data[row + rect.x0..row + rect.x1].copy_from_slice(src);
        }
        provenance[e.patch_index] = PatchSource::Annotated;
    }
    Ok(EnhancedLabel {
        image_id: image_id.to_string(),
        mask: BinaryMask::new(pred.width(), pred.height(), data)?,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::{make_grid, EdgePolicy, PatchStat};
    use crate::selection::{select_uncertainty_only, Scope};

    fn grid() -> PatchGrid {
        make_grid((8, 8), (4, 4), EdgePolicy::Exact).unwrap()
    }

    fn manifest_for(picks: &[usize]) -> SelectionManifest {
        let stats: Vec<PatchStat> = (0..4)
            .map(|i| PatchStat {
                image_id: "img".into(),
                patch_index: i,
                ves_p: 0,
                ves_u: if picks.contains(&i) { 1.0 } else { 0.0 },
            })
            .collect();
        select_uncertainty_only(&stats, picks.len() as f64 / 4.0, Scope::Pooled).unwrap()
    }

    #[test]
    fn empty_manifest_is_identity() {
        let g = grid();
        let pred = BinaryMask::from_fn(8, 8, |x, y| (x + y) % 3 == 0);
        let mut m = manifest_for(&[0]);
        m.entries.clear();
        let out = merge_enhanced("img", &pred, &AnnotationSet::new(g), &m, &g).unwrap();
        assert_eq!(out.mask, pred);
        assert!(out.annotated_patches().is_empty());
    }

    #[test]
    fn one_vessel_patch_on_background() {
        let g = grid();
        let pred = BinaryMask::zeros(8, 8);
        let m = manifest_for(&[3]);
        let mut ann = AnnotationSet::new(g);
        ann.insert("img", 3, BinaryMask::filled(4, 4, 1)).unwrap();
        let out = merge_enhanced("img", &pred, &ann, &m, &g).unwrap();
        assert_eq!(out.mask.count_ones(), 16);
        let rect = g.bounds(3).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.mask.get(x, y) == 1, rect.contains(x, y));
            }
        }
        assert_eq!(out.provenance_record().annotated, vec![3]);
    }

    #[test]
    fn missing_annotation_is_an_error() {
        let g = grid();
        let m = manifest_for(&[1]);
        let err = merge_enhanced(
            "img",
            &BinaryMask::zeros(8, 8),
            &AnnotationSet::new(g),
            &m,
            &g,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::MissingAnnotation { patch_index: 1, .. }
        ));
    }

    #[test]
    fn annotation_must_match_patch_size() {
        let mut ann = AnnotationSet::new(grid());
        assert!(ann.insert("img", 0, BinaryMask::zeros(3, 4)).is_err());
        assert!(ann.insert("img", 4, BinaryMask::zeros(4, 4)).is_err());
    }

    #[test]
    fn export_requires_every_image() {
        let g = grid();
        let m = manifest_for(&[0, 2]);
        let dir = tempfile::tempdir().unwrap();
        let err = export_patches(&BTreeMap::new(), &m, &g, dir.path()).unwrap_err();
        assert!(err.to_string().contains("img"), "{err}");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn export_writes_named_patches() {
        let g = grid();
        let m = manifest_for(&[0, 2]);
        let img = GrayImage::new(8, 8, (0..64).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let images = BTreeMap::from([("img".to_string(), img)]);
        let files = export_patches(&images, &m, &g, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let p2 = io::read_pgm(&dir.path().join("img_2.pgm")).unwrap();
        assert_eq!((p2.width, p2.height), (4, 4));
        assert_eq!(p2.data[0], 32);
    }
}
