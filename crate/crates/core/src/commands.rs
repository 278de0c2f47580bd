//! File-level pipeline steps behind the `vesselpatch` subcommands.
//!
//! Each step reads whole directories of per-image files (named `<id>.<ext>`),
//! processes images on a worker pool, and writes all of its outputs through
//! a staging area so that a failing step leaves nothing behind. Outputs are
//! pure functions of the inputs: rerunning a step overwrites identical bytes.
//!
//! Layout produced by [`pipeline`] under the output directory:
//!
//! ```text
//! config.resolved.toml
//! predictions/<id>.pgm          argmax masks
//! uncertainty/<id>.fmap         entropy maps (+ .meta.json)
//! patch_stats.csv
//! manifest.json
//! patches/<id>_<p>.pgm          image crops for annotators (with paths.images)
//! annotations/<id>_<p>.pgm      oracle annotations (oracle mode only)
//! enhanced/<id>.pgm             enhanced pseudo-labels
//! enhanced/<id>.provenance.json
//! reports/{prediction,enhanced}.{json,txt}   (with paths.ground_truth)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::io::{self, MapKind, OutputStage};
use crate::maps::{self, BinaryMask, GrayImage, ProbabilityMap, ResampleMethod};
use crate::metrics::{self, ImageMetrics, MetricReport};
use crate::patching::{self, EdgePolicy, PatchGrid, PatchStat};
use crate::pseudolabel::{self, AnnotationSet};
use crate::selection::{self, SelectionManifest, SelectionRequest};
use crate::synth::{self, DatasetManifest, DomainParams};

pub const PREDICTIONS_DIR: &str = "predictions";
pub const UNCERTAINTY_DIR: &str = "uncertainty";
pub const STATS_FILE: &str = "patch_stats.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PATCHES_DIR: &str = "patches";
pub const ANNOTATIONS_DIR: &str = "annotations";
pub const ENHANCED_DIR: &str = "enhanced";
pub const REPORTS_DIR: &str = "reports";
pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";

/// Binary task: entropy maps are bounded by ln 2.
const CLASSES: usize = 2;

/// Patch geometry; the image size comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_width: usize,
    pub patch_height: usize,
    pub edge_policy: EdgePolicy,
}

impl PatchSpec {
    pub fn grid_for(&self, width: usize, height: usize) -> Result<PatchGrid> {
        patching::make_grid(
            (width, height),
            (self.patch_width, self.patch_height),
            self.edge_policy,
        )
    }
}

/// Runs `f` on a pool of `workers` threads (0 = one per core).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// `(id, path)` of every `*.ext` file in `dir`, sorted by id.
pub fn list_ids(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || path.extension().and_then(|x| x.to_str()) != Some(ext) {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("{}: file name is not UTF-8", path.display())))?;
        out.push((id.to_string(), path));
    }
    out.sort();
    Ok(out)
}

fn require_nonempty<T>(items: Vec<T>, dir: &Path, what: &str) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no {what} found",
            dir.display()
        )));
    }
    Ok(items)
}

#[derive(Debug, Clone)]
pub struct UncertaintyOptions {
    /// Full-resolution size to resample model outputs to before prediction.
    pub resize: Option<(usize, usize)>,
    pub method: ResampleMethod,
    pub workers: usize,
}

impl Default for UncertaintyOptions {
    fn default() -> Self {
        Self {
            resize: None,
            method: ResampleMethod::Bilinear,
            workers: 0,
        }
    }
}

fn load_probabilities(path: &Path) -> Result<ProbabilityMap> {
    let (raw, kind) = io::read_map(path)?;
    let fail = |e: Error| Error::format(path, 0, e.to_string());
    match kind {
        Some(MapKind::Logit) => {
            let logits =
                maps::LogitMap::new(raw.width, raw.height, raw.channels, raw.data).map_err(fail)?;
            Ok(maps::softmax(&logits))
        }
        Some(MapKind::Prob) | None => {
            ProbabilityMap::new(raw.width, raw.height, raw.channels, raw.data).map_err(fail)
        }
        Some(MapKind::Uncertainty) => Err(Error::format(
            io::meta_path(path),
            0,
            "expected a probability or logit map, found an uncertainty map",
        )),
    }
}

/// Prediction masks and entropy maps for every `*.fmap` in `maps_dir`.
///
/// Logit maps (per their sidecar) go through softmax first; maps without a
/// sidecar are read as probabilities. Writes `predictions/` and
/// `uncertainty/` under `out_dir`. Returns the processed ids.
pub fn uncertainty(
    maps_dir: &Path,
    out_dir: &Path,
    opts: &UncertaintyOptions,
) -> Result<Vec<String>> {
    let inputs = require_nonempty(list_ids(maps_dir, "fmap")?, maps_dir, "*.fmap maps")?;
    let stage = OutputStage::new(out_dir)?;
    with_workers(opts.workers, || {
        inputs.par_iter().try_for_each(|(id, path)| -> Result<()> {
            let mut prob = load_probabilities(path)?;
            if let Some((w, h)) = opts.resize {
                prob = maps::resample(&prob, w, h, opts.method)?;
            }
            let mask =
                maps::argmax_mask(&prob).map_err(|e| Error::format(path, 0, e.to_string()))?;
            let umap = maps::entropy_map(&prob);
            let fmap = io::FloatMap::from(&umap);
            let meta = io::MapMeta {
                width: fmap.width,
                height: fmap.height,
                channels: 1,
                kind: MapKind::Uncertainty,
            };
            stage.write(
                Path::new(PREDICTIONS_DIR).join(format!("{id}.pgm")),
                &io::encode_mask(&mask),
            )?;
            stage.write(
                Path::new(UNCERTAINTY_DIR).join(format!("{id}.fmap")),
                &io::encode_fmap(&fmap),
            )?;
            stage.write(
                Path::new(UNCERTAINTY_DIR).join(format!("{id}.meta.json")),
                &io::encode_meta(&meta),
            )
        })
    })??;
    stage.commit()?;
    info!(
        "wrote predictions and uncertainty for {} images",
        inputs.len()
    );
    Ok(inputs.into_iter().map(|(id, _)| id).collect())
}

/// Checks that all images share one size and builds their grid.
fn common_grid(spec: &PatchSpec, dims: &[(String, (usize, usize))]) -> Result<PatchGrid> {
    let (first_id, (w, h)) = &dims[0];
    for (id, d) in dims {
        if d != &(*w, *h) {
            return Err(Error::DimensionMismatch {
                what: format!("image `{id}`"),
                got_w: d.0,
                got_h: d.1,
                want_w: *w,
                want_h: *h,
            });
        }
    }
    spec.grid_for(*w, *h)
        .map_err(|e| Error::invalid(format!("grid for `{first_id}` ({w}x{h}): {e}")))
}

pub fn encode_stats(stats: &[PatchStat]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in stats {
        w.serialize(s)
            .map_err(|e| Error::invalid(format!("patch stats: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::invalid(format!("patch stats: {e}")))
}

pub fn read_stats(path: &Path) -> Result<Vec<PatchStat>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde {
        path: path.into(),
        msg: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Serde {
                path: path.into(),
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Per-patch statistics for every prediction in `pred_dir`, paired with
/// `<id>.fmap` in `umap_dir`. Writes a CSV with columns
/// `image_id,patch_index,ves_p,ves_u`.
pub fn stats(
    pred_dir: &Path,
    umap_dir: &Path,
    spec: &PatchSpec,
    out_file: &Path,
    workers: usize,
) -> Result<Vec<PatchStat>> {
    let preds = require_nonempty(list_ids(pred_dir, "pgm")?, pred_dir, "*.pgm masks")?;
    let loaded = with_workers(workers, || {
        preds
            .par_iter()
            .map(|(id, path)| {
                let mask = io::read_mask(path)?;
                let upath = umap_dir.join(format!("{id}.fmap"));
                if !upath.is_file() {
                    return Err(Error::invalid(format!(
                        "{}: missing uncertainty map for `{id}`",
                        upath.display()
                    )));
                }
                let umap = io::read_uncertainty_map(&upath, CLASSES)?;
                Ok((id.clone(), mask, umap))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let dims: Vec<_> = loaded
        .iter()
        .map(|(id, m, _)| (id.clone(), (m.width(), m.height())))
        .collect();
    let grid = common_grid(spec, &dims)?;
    let per_image = with_workers(workers, || {
        loaded
            .par_iter()
            .map(|(id, mask, umap)| patching::patch_stats(mask, umap, &grid, id))
            .collect::<Result<Vec<_>>>()
    })??;
    let all: Vec<PatchStat> = per_image.into_iter().flatten().collect();
    io::write_atomic(out_file, &encode_stats(&all)?)?;
    info!(
        "wrote {} patch statistics for {} images",
        all.len(),
        loaded.len()
    );
    Ok(all)
}

pub fn read_manifest(path: &Path) -> Result<SelectionManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SelectionManifest::from_json(&text).map_err(|e| Error::Serde {
        path: path.into(),
        msg: e.to_string(),
    })
}

/// Selects patches from a statistics CSV and writes the manifest.
pub fn select(
    stats_file: &Path,
    req: &SelectionRequest,
    out_file: &Path,
) -> Result<SelectionManifest> {
    let stats = read_stats(stats_file)?;
    let manifest = selection::select(&stats, req)
        .map_err(|e| Error::invalid(format!("{}: {e}", stats_file.display())))?;
    io::write_atomic(out_file, manifest.to_json().as_bytes())?;
    info!(
        "selected {} of {} patches ({:?}, {:?})",
        manifest.entries.len(),
        stats.len(),
        manifest.strategy,
        manifest.scope
    );
    Ok(manifest)
}

fn load_images(dir: &Path, ids: &[&str], workers: usize) -> Result<BTreeMap<String, GrayImage>> {
    with_workers(workers, || {
        ids.par_iter()
            .filter_map(|id| {
                let path = dir.join(format!("{id}.pgm"));
                path.is_file()
                    .then(|| io::read_pgm(&path).map(|img| (id.to_string(), img)))
            })
            .collect::<Result<BTreeMap<_, _>>>()
    })?
}

/// Crops every manifest patch out of `<images_dir>/<id>.pgm` into `out_dir`.
/// Pointing `images_dir` at ground-truth masks produces oracle annotations.
pub fn export(
    manifest: &SelectionManifest,
    images_dir: &Path,
    spec: &PatchSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<PathBuf>> {
    let ids = manifest.image_ids();
    let images = load_images(images_dir, &ids, workers)?;
    if let Some(e) = manifest
        .entries
        .iter()
        .find(|e| !images.contains_key(&e.image_id))
    {
        return Err(Error::invalid(format!(
            "{}: no image `{}.pgm` for manifest entry ({}, {})",
            images_dir.display(),
            e.image_id,
            e.image_id,
            e.patch_index
        )));
    }
    let stage = OutputStage::new(out_dir)?;
    if !images.is_empty() {
        let dims: Vec<_> = images
            .iter()
            .map(|(id, img)| (id.clone(), (img.width, img.height)))
            .collect();
        let grid = common_grid(spec, &dims)?;
        for (name, patch) in pseudolabel::extract_patches(&images, manifest, &grid)? {
            stage.write(&name, &io::encode_pgm(&patch))?;
        }
    }
    stage.commit()
}

/// Enhanced pseudo-labels for every prediction in `pred_dir`, splicing in
/// `<annotations_dir>/<id>_<p>.pgm` for the manifest's patches.
pub fn merge(
    manifest: &SelectionManifest,
    pred_dir: &Path,
    annotations_dir: &Path,
    spec: &PatchSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<String>> {
    let preds = require_nonempty(list_ids(pred_dir, "pgm")?, pred_dir, "*.pgm masks")?;
    if let Some(e) = manifest
        .entries
        .iter()
        .find(|e| !preds.iter().any(|(id, _)| *id == e.image_id))
    {
        return Err(Error::invalid(format!(
            "{}: no prediction for manifest entry ({}, {})",
            pred_dir.display(),
            e.image_id,
            e.patch_index
        )));
    }
    let masks = with_workers(workers, || {
        preds
            .par_iter()
            .map(|(id, path)| Ok((id.clone(), io::read_mask(path)?)))
            .collect::<Result<Vec<(String, BinaryMask)>>>()
    })??;
    let dims: Vec<_> = masks
        .iter()
        .map(|(id, m)| (id.clone(), (m.width(), m.height())))
        .collect();
    let grid = common_grid(spec, &dims)?;
    let annotations = AnnotationSet::load_dir(annotations_dir, manifest, &grid)?;
    let stage = OutputStage::new(out_dir)?;
    with_workers(workers, || {
        masks.par_iter().try_for_each(|(id, pred)| -> Result<()> {
            let label = pseudolabel::merge_enhanced(id, pred, &annotations, manifest, &grid)?;
            let mut prov = serde_json::to_string_pretty(&label.provenance_record())
                .expect("provenance serializes");
            prov.push('\n');
            stage.write(format!("{id}.pgm"), &io::encode_mask(&label.mask))?;
            stage.write(format!("{id}.provenance.json"), prov.as_bytes())
        })
    })??;
    stage.commit()?;
    Ok(masks.into_iter().map(|(id, _)| id).collect())
}

/// Scores every mask in `pred_dir` against `<gt_dir>/<id>.pgm`. Writes the
/// JSON report to `out_file` and the table next to it with a `.txt`
/// extension.
pub fn eval(
    pred_dir: &Path,
    gt_dir: &Path,
    out_file: &Path,
    workers: usize,
) -> Result<MetricReport> {
    let preds = require_nonempty(list_ids(pred_dir, "pgm")?, pred_dir, "*.pgm masks")?;
    let per_image = with_workers(workers, || {
        preds
            .par_iter()
            .map(|(id, path)| {
                let gpath = gt_dir.join(format!("{id}.pgm"));
                if !gpath.is_file() {
                    return Err(Error::invalid(format!(
                        "{}: missing ground truth for `{id}`",
                        gpath.display()
                    )));
                }
                let c = metrics::confusion(&io::read_mask(path)?, &io::read_mask(&gpath)?)
                    .map_err(|e| Error::invalid(format!("`{id}`: {e}")))?;
                Ok(ImageMetrics::from_counts(id, &c))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let report = metrics::aggregate(per_image)?;
    io::write_atomic(out_file, report.to_json().as_bytes())?;
    io::write_atomic(
        &out_file.with_extension("txt"),
        report.to_table().as_bytes(),
    )?;
    Ok(report)
}

/// Synthetic source/target dataset with probe logits for the target domain.
pub fn synth(
    source: &DomainParams,
    target: &DomainParams,
    counts: (usize, usize),
    out_dir: &Path,
) -> Result<DatasetManifest> {
    synth::gen_dataset(source, target, counts, out_dir)
}

/// Summary of a [`pipeline`] run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: SelectionManifest,
    pub prediction_report: Option<MetricReport>,
    pub enhanced_report: Option<MetricReport>,
}

/// Moves every top-level entry of `from` into `to`, replacing what is there.
fn replace_tree(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    let mut entries: Vec<_> = std::fs::read_dir(from)
        .map_err(|e| Error::io(from, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .collect();
    entries.sort();
    for name in entries {
        let dest = to.join(&name);
        if dest.is_dir() {
            std::fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
        } else if dest.exists() {
            std::fs::remove_file(&dest).map_err(|e| Error::io(&dest, e))?;
        }
        std::fs::rename(from.join(&name), &dest).map_err(|e| Error::io(&dest, e))?;
    }
    Ok(())
}

/// Runs uncertainty, stats, select, export, merge and (with ground truth)
/// eval in sequence, exactly as the individual subcommands would.
///
/// Everything is built in a staging directory next to `paths.output` and
/// moved into place only after every step succeeded.
pub fn pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let resolved = cfg.resolved()?;
    let out = &cfg.paths.output;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".pipeline-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let root = staging.path();
    let workers = cfg.workers;
    let spec = PatchSpec {
        patch_width: cfg.grid.patch_width,
        patch_height: cfg.grid.patch_height,
        edge_policy: cfg.grid.edge_policy,
    };

    uncertainty(
        &cfg.paths.maps,
        root,
        &UncertaintyOptions {
            resize: cfg.maps.resize.map(|[w, h]| (w, h)),
            method: cfg.maps.method.into(),
            workers,
        },
    )?;
    let preds = root.join(PREDICTIONS_DIR);
    stats(
        &preds,
        &root.join(UNCERTAINTY_DIR),
        &spec,
        &root.join(STATS_FILE),
        workers,
    )?;
    let manifest = select(
        &root.join(STATS_FILE),
        &cfg.selection_request()?,
        &root.join(MANIFEST_FILE),
    )?;
    if let Some(images) = &cfg.paths.images {
        export(&manifest, images, &spec, &root.join(PATCHES_DIR), workers)?;
    }
    let annotations = if cfg.oracle_annotate {
        let gt = cfg.paths.ground_truth.as_ref().expect("validated");
        let dir = root.join(ANNOTATIONS_DIR);
        export(&manifest, gt, &spec, &dir, workers)?;
        dir
    } else {
        cfg.paths.annotations.clone().expect("validated")
    };
    merge(
        &manifest,
        &preds,
        &annotations,
        &spec,
        &root.join(ENHANCED_DIR),
        workers,
    )?;

    let (mut prediction_report, mut enhanced_report) = (None, None);
    if let Some(gt) = &cfg.paths.ground_truth {
        let reports = root.join(REPORTS_DIR);
        prediction_report = Some(eval(&preds, gt, &reports.join("prediction.json"), workers)?);
        enhanced_report = Some(eval(
            &root.join(ENHANCED_DIR),
            gt,
            &reports.join("enhanced.json"),
            workers,
        )?);
    }
    io::write_atomic(&root.join(CONFIG_SNAPSHOT), resolved.to_toml().as_bytes())?;
    replace_tree(root, out)?;
    Ok(PipelineOutcome {
        manifest,
        prediction_report,
        enhanced_report,
    })
}
