//! Pipeline configuration file (TOML).
//!
//! ```toml
//! version = 1
//! strategy = "cup"            # cup | random | uncertainty
//! scope = "pooled"            # pooled | per_image
//! seed = 0
//! workers = 0                 # 0 = one per core
//! oracle_annotate = true
//!
//! [paths]
//! maps = "data/target/train/maps"
//! images = "data/target/train/images"          # optional
//! ground_truth = "data/target/train/masks"     # optional
//! annotations = "annotations"                  # optional
//! output = "run"
//!
//! [grid]
//! patch_width = 64
//! patch_height = 64
//! edge_policy = "exact"
//!
//! [budget]
//! c1 = 0.1
//! c2 = 0.5
//! # alpha = 0.05
//!
//! [maps]
//! # resize = [3900, 3072]
//! method = "bilinear"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::ResampleMethod;
use crate::patching::EdgePolicy;
use crate::selection::{Scope, SelectionBudget, SelectionRequest, Strategy};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub oracle_annotate: bool,
    pub paths: PathsConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub maps: MapsConfig,
}

fn default_strategy() -> Strategy {
    Strategy::Cup
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub maps: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub patch_width: usize,
    pub patch_height: usize,
    #[serde(default)]
    pub edge_policy: EdgePolicy,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            patch_width: 64,
            patch_height: 64,
            edge_policy: EdgePolicy::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            c1: Some(0.1),
            c2: Some(0.5),
            alpha: None,
        }
    }
}

impl BudgetConfig {
    /// Resolves the budget into cascade ratios `(c1, c2)`.
    ///
    /// The cascade needs both ratios; given `alpha` and one ratio the other
    /// is derived. Single-stage strategies use `(alpha, 1)`, where `alpha`
    /// defaults to `c1 * c2`.
    pub fn resolve(&self, strategy: Strategy) -> Result<(f64, f64)> {
        let (c1, c2, alpha) = (self.c1, self.c2, self.alpha);
        let ratios = match strategy {
            Strategy::Cup => match (c1, c2, alpha) {
                (Some(a), Some(b), None) => (a, b),
                (Some(a), Some(b), Some(al)) => {
                    if (a * b - al).abs() > 1e-12 {
                        return Err(Error::Config(format!(
                            "alpha = {al} disagrees with c1 * c2 = {}",
                            a * b
                        )));
                    }
                    (a, b)
                }
                (Some(a), None, Some(al)) => (a, al / a),
                (None, Some(b), Some(al)) => (al / b, b),
                _ => {
                    return Err(Error::Config(
                        "the cascade strategy needs c1 and c2 (or alpha with one of them)".into(),
                    ))
                }
            },
            Strategy::Random | Strategy::UncertaintyOnly => match (c1, c2, alpha) {
                (_, _, Some(al)) => (al, 1.0),
                (Some(a), Some(b), None) => (a * b, 1.0),
                (Some(a), None, None) => (a, 1.0),
                _ => return Err(Error::Config("budget needs alpha or c1 and c2".into())),
            },
        };
        SelectionBudget::cascade(ratios.0, ratios.1, 1)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(ratios)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodConfig {
    Nearest,
    Bilinear,
}

impl From<MethodConfig> for ResampleMethod {
    fn from(m: MethodConfig) -> Self {
        match m {
            MethodConfig::Nearest => ResampleMethod::Nearest,
            MethodConfig::Bilinear => ResampleMethod::Bilinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapsConfig {
    /// Full-resolution `[width, height]` to resample model outputs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resize: Option<[usize; 2]>,
    pub method: MethodConfig,
}

impl Default for MapsConfig {
    fn default() -> Self {
        Self {
            resize: None,
            method: MethodConfig::Bilinear,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (this build reads version {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.grid.patch_width == 0 || self.grid.patch_height == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.oracle_annotate && self.paths.annotations.is_some() {
            return Err(Error::Config(
                "oracle_annotate conflicts with an explicit annotations directory".into(),
            ));
        }
        if self.oracle_annotate && self.paths.ground_truth.is_none() {
            return Err(Error::Config(
                "oracle_annotate needs paths.ground_truth to copy patches from".into(),
            ));
        }
        if !self.oracle_annotate && self.paths.annotations.is_none() {
            return Err(Error::Config(
                "set paths.annotations or enable oracle_annotate".into(),
            ));
        }
        if let Some([w, h]) = self.maps.resize {
            if w == 0 || h == 0 {
                return Err(Error::Config("maps.resize must be positive".into()));
            }
        }
        self.budget.resolve(self.strategy)?;
        Ok(())
    }

    /// Budget with every implied value filled in, as recorded in snapshots.
    pub fn resolved(&self) -> Result<Self> {
        let (c1, c2) = self.budget.resolve(self.strategy)?;
        let mut out = self.clone();
        out.budget = BudgetConfig {
            c1: Some(c1),
            c2: Some(c2),
            alpha: Some(c1 * c2),
        };
        Ok(out)
    }

    pub fn selection_request(&self) -> Result<SelectionRequest> {
        let (c1, c2) = self.budget.resolve(self.strategy)?;
        Ok(SelectionRequest {
            strategy: self.strategy,
            c1,
            c2,
            scope: self.scope,
            seed: self.seed,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
