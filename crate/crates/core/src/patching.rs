//! Fixed patch grids over an image and per-patch prediction statistics.
//!
//! Patches are indexed row-major from the top-left corner:
//! `index = row * cols + col`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, UncertaintyMap};

/// How to handle image sizes that are not a multiple of the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgePolicy {
    /// The patch size must divide the image size.
    #[default]
    Exact,
    /// Drop the right and bottom residue.
    Crop,
}

impl std::str::FromStr for EdgePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EdgePolicy::Exact),
            "crop" => Ok(EdgePolicy::Crop),
            other => Err(Error::invalid(format!(
                "unknown edge policy `{other}` (expected exact or crop)"
            ))),
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_width: usize,
    pub image_height: usize,
    pub patch_width: usize,
    pub patch_height: usize,
    pub cols: usize,
    pub rows: usize,
    pub edge_policy: EdgePolicy,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_area(&self) -> usize {
        self.patch_width * self.patch_height
    }

    /// Rectangle covered by patch `index`.
    pub fn bounds(&self, index: usize) -> Result<Rect> {
        if index >= self.len() {
            return Err(Error::invalid(format!(
                "patch index {index} out of range for {}x{} grid",
                self.cols, self.rows
            )));
        }
        let (row, col) = (index / self.cols, index % self.cols);
        let x0 = col * self.patch_width;
        let y0 = row * self.patch_height;
        Ok(Rect {
            x0,
            y0,
            x1: x0 + self.patch_width,
            y1: y0 + self.patch_height,
        })
    }

    /// Index of the patch containing pixel `(x, y)`, if any.
    pub fn index_of(&self, x: usize, y: usize) -> Option<usize> {
        let (col, row) = (x / self.patch_width, y / self.patch_height);
        (col < self.cols && row < self.rows).then_some(row * self.cols + col)
    }

    pub fn check_image(&self, what: &str, width: usize, height: usize) -> Result<()> {
        if (width, height) != (self.image_width, self.image_height) {
            return Err(Error::DimensionMismatch {
                what: what.to_string(),
                got_w: width,
                got_h: height,
                want_w: self.image_width,
                want_h: self.image_height,
            });
        }
        Ok(())
    }
}

/// Builds the patch grid for an image.
pub fn make_grid(
    image: (usize, usize),
    patch: (usize, usize),
    edge_policy: EdgePolicy,
) -> Result<PatchGrid> {
    let ((iw, ih), (pw, ph)) = (image, patch);
    if pw == 0 || ph == 0 {
        return Err(Error::invalid(format!("patch size {pw}x{ph} is empty")));
    }
    if pw > iw || ph > ih {
        return Err(Error::invalid(format!(
            "patch size {pw}x{ph} exceeds image size {iw}x{ih}"
        )));
    }
    let (cols, rows) = (iw / pw, ih / ph);
    if edge_policy == EdgePolicy::Exact && (iw % pw != 0 || ih % ph != 0) {
        return Err(Error::invalid(format!(
            "{pw}x{ph} patches do not tile a {iw}x{ih} image exactly; \
             the crop policy would keep {cols}x{rows} patches and drop a \
             {}-pixel right and {}-pixel bottom margin",
            iw % pw,
            ih % ph
        )));
    }
    Ok(PatchGrid {
        image_width: iw,
        image_height: ih,
        patch_width: pw,
        patch_height: ph,
        cols,
        rows,
        edge_policy,
    })
}

/// Free-function form of [`PatchGrid::bounds`].
pub fn patch_bounds(grid: &PatchGrid, index: usize) -> Result<Rect> {
    grid.bounds(index)
}

/// Predicted vessel area and summed entropy of one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchStat {
    pub image_id: String,
    pub patch_index: usize,
    /// Number of pixels predicted as vessel.
    pub ves_p: u64,
    /// Sum of per-pixel entropy, in nats.
    pub ves_u: f64,
}

/// One [`PatchStat`] per grid cell, in index order. Uncertainty sums are
/// accumulated in f64.
pub fn patch_stats(
    mask: &BinaryMask,
    umap: &UncertaintyMap,
    grid: &PatchGrid,
    image_id: &str,
) -> Result<Vec<PatchStat>> {
    grid.check_image("prediction mask", mask.width(), mask.height())?;
    grid.check_image("uncertainty map", umap.width(), umap.height())?;
    let mut stats: Vec<PatchStat> = (0..grid.len())
        .map(|patch_index| PatchStat {
            image_id: image_id.to_string(),
            patch_index,
            ves_p: 0,
            ves_u: 0.0,
        })
        .collect();
    let (m, u) = (mask.data(), umap.data());
    for row in 0..grid.rows {
        for y in row * grid.patch_height..(row + 1) * grid.patch_height {
            let line = y * grid.image_width;
            for col in 0..grid.cols {
                let s = &mut stats[row * grid.cols + col];
                let x0 = line + col * grid.patch_width;
                let x1 = x0 + grid.patch_width;
                s.ves_p += m[x0..x1].iter().map(|&v| v as u64).sum::<u64>();
                s.ves_u += u[x0..x1].iter().sum::<f64>();
            }
        }
    }
    Ok(stats)
}
