//! Annotation budget selection over patch statistics.
//!
//! The cascade strategy keeps the `c1` fraction of patches with the largest
//! summed entropy, then the `c2` fraction of those with the most predicted
//! vessel pixels. Two ablations are provided: ranking by entropy alone, and
//! a seeded uniform sample.
//!
//! Every ranking uses the same strict total order: statistic descending, then
//! `image_id` ascending, then `patch_index` ascending. Results therefore do not
//! depend on input order, and since only the order of the statistics matters,
//! rescaling them by a positive constant changes nothing.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::PatchStat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Cup,
    Random,
    #[serde(alias = "uncertainty", alias = "uncertainty-only")]
    UncertaintyOnly,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cup" => Ok(Strategy::Cup),
            "random" => Ok(Strategy::Random),
            "uncertainty" | "uncertainty_only" | "uncertainty-only" => {
                Ok(Strategy::UncertaintyOnly)
            }
            other => Err(Error::invalid(format!(
                "unknown strategy `{other}` (expected cup, random or uncertainty)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Rank all patches of all images together.
    #[default]
    Pooled,
    /// Apply the budget to each image separately.
    #[serde(alias = "per-image")]
    PerImage,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Scope::Pooled),
            "per-image" | "per_image" => Ok(Scope::PerImage),
            other => Err(Error::invalid(format!(
                "unknown scope `{other}` (expected pooled or per-image)"
            ))),
        }
    }
}

/// Round half up. Products like `0.1 * 45` land a hair below the half in
/// binary floating point, so values within 1e-9 (relative) of a half count
/// as the half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9 * x.abs().max(1.0)).floor().max(0.0) as usize
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0 && r <= 1.0) {
        return Err(Error::invalid(format!("{name} = {r} must lie in (0, 1]")));
    }
    Ok(())
}

/// Annotation budget: `alpha = c1_ratio * c2_ratio` of `n_total` patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionBudget {
    pub c1_ratio: f64,
    pub c2_ratio: f64,
    pub alpha: f64,
    pub n_total: usize,
    pub n_selected: usize,
}

impl SelectionBudget {
    /// Two-stage budget. Each stage keeps at least one patch.
    pub fn cascade(c1_ratio: f64, c2_ratio: f64, n_total: usize) -> Result<Self> {
        check_ratio("c1", c1_ratio)?;
        check_ratio("c2", c2_ratio)?;
        if n_total == 0 {
            return Err(Error::invalid("budget over zero patches"));
        }
        let k1 = stage_count(c1_ratio, n_total);
        let k2 = stage_count(c2_ratio, k1);
        Ok(Self {
            c1_ratio,
            c2_ratio,
            alpha: c1_ratio * c2_ratio,
            n_total,
            n_selected: k2,
        })
    }

    /// Single-stage budget, expressed as a cascade with `c2 = 1`.
    pub fn single(alpha: f64, n_total: usize) -> Result<Self> {
        Self::cascade(alpha, 1.0, n_total)
    }

    /// Patches kept by the first stage.
    pub fn stage1_count(&self) -> usize {
        stage_count(self.c1_ratio, self.n_total)
    }
}

fn stage_count(ratio: f64, available: usize) -> usize {
    let k = round_half_up(ratio * available as f64).max(1);
    if k > available {
        warn!("stage budget {k} exceeds {available} available patches; clamping");
        return available;
    }
    k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub patch_index: usize,
    pub ves_u: f64,
    pub ves_p: u64,
    /// 1-based position in the uncertainty ranking, when one was made.
    pub stage1_rank: Option<usize>,
    /// 1-based position in the vessel-area ranking within stage 1.
    pub stage2_rank: Option<usize>,
}

impl ManifestEntry {
    fn from_stat(s: &PatchStat, stage1_rank: Option<usize>, stage2_rank: Option<usize>) -> Self {
        Self {
            image_id: s.image_id.clone(),
            patch_index: s.patch_index,
            ves_u: s.ves_u,
            ves_p: s.ves_p,
            stage1_rank,
            stage2_rank,
        }
    }
}

/// The set of patches chosen for annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub strategy: Strategy,
    pub budget: SelectionBudget,
    pub scope: Scope,
    pub entries: Vec<ManifestEntry>,
    pub seed: Option<u64>,
}

impl SelectionManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: SelectionManifest =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert((e.image_id.as_str(), e.patch_index)) {
                return Err(Error::invalid(format!(
                    "manifest lists ({}, {}) twice",
                    e.image_id, e.patch_index
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, image_id: &str, patch_index: usize) -> bool {
        self.entries
            .iter()
            .any(|e| e.image_id == image_id && e.patch_index == patch_index)
    }

    /// Entries belonging to one image, in manifest order.
    pub fn entries_for<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a ManifestEntry> {
        self.entries.iter().filter(move |e| e.image_id == image_id)
    }

    /// Sorted, de-duplicated image ids referenced by the manifest.
    pub fn image_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.image_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn by_key(a: &PatchStat, b: &PatchStat) -> Ordering {
    a.image_id
        .cmp(&b.image_id)
        .then(a.patch_index.cmp(&b.patch_index))
}

fn by_uncertainty(a: &&PatchStat, b: &&PatchStat) -> Ordering {
    b.ves_u
        .partial_cmp(&a.ves_u)
        .expect("validated finite")
        .then_with(|| by_key(a, b))
}

fn by_vessel_area(a: &&PatchStat, b: &&PatchStat) -> Ordering {
    b.ves_p.cmp(&a.ves_p).then_with(|| by_key(a, b))
}

/// The `k` smallest items under `cmp`, sorted. Partitions first so only the
/// kept prefix is sorted.
fn top_k<'a>(
    mut items: Vec<&'a PatchStat>,
    k: usize,
    cmp: fn(&&'a PatchStat, &&'a PatchStat) -> Ordering,
) -> Vec<&'a PatchStat> {
    if k == 0 {
        return Vec::new();
    }
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, cmp);
        items.truncate(k);
    }
    items.sort_unstable_by(cmp);
    items
}

fn validate_stats(stats: &[PatchStat]) -> Result<()> {
    if stats.is_empty() {
        return Err(Error::invalid("no patch statistics to select from"));
    }
    let mut seen = HashSet::with_capacity(stats.len());
    for s in stats {
        if !(s.ves_u.is_finite() && s.ves_u >= 0.0) {
            return Err(Error::invalid(format!(
                "patch ({}, {}) has invalid uncertainty {}",
                s.image_id, s.patch_index, s.ves_u
            )));
        }
        if !seen.insert((s.image_id.as_str(), s.patch_index)) {
            return Err(Error::invalid(format!(
                "duplicate statistics for patch ({}, {})",
                s.image_id, s.patch_index
            )));
        }
    }
    Ok(())
}

/// Splits stats into the groups ranked independently under `scope`.
fn groups(stats: &[PatchStat], scope: Scope) -> Vec<Vec<&PatchStat>> {
    match scope {
        Scope::Pooled => vec![stats.iter().collect()],
        Scope::PerImage => {
            let mut by_image: BTreeMap<&str, Vec<&PatchStat>> = BTreeMap::new();
            for s in stats {
                by_image.entry(&s.image_id).or_default().push(s);
            }
            by_image.into_values().collect()
        }
    }
}

fn cascade_group(group: Vec<&PatchStat>, c1: f64, c2: f64) -> Result<Vec<ManifestEntry>> {
    let budget = SelectionBudget::cascade(c1, c2, group.len())?;
    let stage1 = top_k(group, budget.stage1_count(), by_uncertainty);
    let stage1_rank: BTreeMap<(&str, usize), usize> = stage1
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.image_id.as_str(), s.patch_index), i + 1))
        .collect();
    let stage2 = top_k(stage1.clone(), budget.n_selected, by_vessel_area);
    Ok(stage2
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r1 = stage1_rank[&(s.image_id.as_str(), s.patch_index)];
            ManifestEntry::from_stat(s, Some(r1), Some(i + 1))
        })
        .collect())
}

fn finish(
    strategy: Strategy,
    c1: f64,
    c2: f64,
    n_total: usize,
    scope: Scope,
    entries: Vec<ManifestEntry>,
    seed: Option<u64>,
) -> Result<SelectionManifest> {
    let mut budget = SelectionBudget::cascade(c1, c2, n_total)?;
    // Per-image budgets are rounded image by image, so the pooled formula
    // does not give the total.
    budget.n_selected = entries.len();
    Ok(SelectionManifest {
        strategy,
        budget,
        scope,
        entries,
        seed,
    })
}

/// Cascade selection: top `c1` by summed entropy, then top `c2` of those by
/// predicted vessel area.
pub fn select_cup(
    stats: &[PatchStat],
    c1: f64,
    c2: f64,
    scope: Scope,
) -> Result<SelectionManifest> {
    validate_stats(stats)?;
    SelectionBudget::cascade(c1, c2, stats.len())?;
    let mut entries = Vec::new();
    for group in groups(stats, scope) {
        entries.extend(cascade_group(group, c1, c2)?);
    }
    finish(Strategy::Cup, c1, c2, stats.len(), scope, entries, None)
}

/// Top `alpha` of patches by summed entropy alone.
pub fn select_uncertainty_only(
    stats: &[PatchStat],
    alpha: f64,
    scope: Scope,
) -> Result<SelectionManifest> {
    validate_stats(stats)?;
    SelectionBudget::single(alpha, stats.len())?;
    let mut entries = Vec::new();
    for group in groups(stats, scope) {
        let k = SelectionBudget::single(alpha, group.len())?.n_selected;
        entries.extend(
            top_k(group, k, by_uncertainty)
                .iter()
                .enumerate()
                .map(|(i, s)| ManifestEntry::from_stat(s, Some(i + 1), None)),
        );
    }
    finish(
        Strategy::UncertaintyOnly,
        alpha,
        1.0,
        stats.len(),
        scope,
        entries,
        None,
    )
}

/// Uniform sample without replacement of `alpha` of the patches.
///
/// Patches are first put in `(image_id, patch_index)` order, then indices are
/// drawn with [`rand::seq::index::sample`] from a ChaCha8 generator seeded
/// with `seed`. Groups are sampled in image-id order from the same generator.
/// Entries are listed in key order.
pub fn select_random(
    stats: &[PatchStat],
    alpha: f64,
    seed: u64,
    scope: Scope,
) -> Result<SelectionManifest> {
    validate_stats(stats)?;
    SelectionBudget::single(alpha, stats.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for mut group in groups(stats, scope) {
        group.sort_unstable_by(|a, b| by_key(a, b));
        let k = SelectionBudget::single(alpha, group.len())?.n_selected;
        let mut picked = rand::seq::index::sample(&mut rng, group.len(), k).into_vec();
        picked.sort_unstable();
        entries.extend(
            picked
                .into_iter()
                .map(|i| ManifestEntry::from_stat(group[i], None, None)),
        );
    }
    finish(
        Strategy::Random,
        alpha,
        1.0,
        stats.len(),
        scope,
        entries,
        Some(seed),
    )
}

/// Parameters for [`select`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionRequest {
    pub strategy: Strategy,
    pub c1: f64,
    pub c2: f64,
    pub scope: Scope,
    pub seed: u64,
}

impl SelectionRequest {
    /// Overall budget fraction `c1 * c2`.
    pub fn alpha(&self) -> f64 {
        self.c1 * self.c2
    }
}

/// Dispatches to the strategy named in `req`. The single-stage strategies
/// use `alpha = c1 * c2`.
pub fn select(stats: &[PatchStat], req: &SelectionRequest) -> Result<SelectionManifest> {
    match req.strategy {
        Strategy::Cup => select_cup(stats, req.c1, req.c2, req.scope),
        Strategy::UncertaintyOnly => select_uncertainty_only(stats, req.alpha(), req.scope),
        Strategy::Random => select_random(stats, req.alpha(), req.seed, req.scope),
    }
}
