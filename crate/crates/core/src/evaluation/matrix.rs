use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, IoUReport, DEFAULT_THRESHOLD};
use crate::data::{load_samples, ChannelStats, DatasetManifest, Sample, SubsetLevel};
use crate::error::{Error, Result};
use crate::model::{CheckpointBundle, ToyUNet};

/// Checkpoint metadata key holding the normalization the model was trained with.
pub const NORMALIZATION_KEY: &str = "normalization";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    NoGuided,
    FullMethod,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::NoGuided, Arm::FullMethod];
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Baseline => "baseline",
            Arm::NoGuided => "no_guided",
            Arm::FullMethod => "full_method",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "no_guided" => Ok(Arm::NoGuided),
            "full_method" => Ok(Arm::FullMethod),
            other => Err(Error::Config(format!("unknown arm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[default]
    InDomain,
    /// Validated on a style or city never seen in training.
    Holdout,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::InDomain => "in_domain",
            Domain::Holdout => "holdout",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain" => Ok(Domain::InDomain),
            "holdout" => Ok(Domain::Holdout),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub level: SubsetLevel,
    pub domain: Domain,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.level, self.domain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowOutcome {
    /// One report per training seed.
    Evaluated(Vec<(u64, IoUReport)>),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub variant: Variant,
    pub arm: Arm,
    /// Labelled training samples the arm was fine-tuned on.
    pub train_size: usize,
    pub outcome: RowOutcome,
}

impl MatrixRow {
    /// Dataset-level IoU of `class` per seed, skipping seeds where it is undefined.
    pub fn per_seed(&self, class: u8) -> Vec<f64> {
        match &self.outcome {
            RowOutcome::Evaluated(r) => r.iter().filter_map(|(_, rep)| rep.iou(class)).collect(),
            RowOutcome::Failed(_) => Vec::new(),
        }
    }

    pub fn mean_iou(&self, class: u8) -> Option<f64> {
        let v = self.per_seed(class);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Population standard deviation across seeds.
    pub fn std_iou(&self, class: u8) -> Option<f64> {
        let v = self.per_seed(class);
        let m = self.mean_iou(class)?;
        Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
    }

    pub fn mean_per_image_iou(&self, class: u8) -> Option<f64> {
        let RowOutcome::Evaluated(r) = &self.outcome else { return None };
        let v: Vec<f64> = r
            .iter()
            .filter_map(|(_, rep)| rep.per_class.get(&class).and_then(|c| c.per_image_mean))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.outcome, RowOutcome::Failed(_))
    }
}

/// Rows keyed by `(variant, arm)`; each pair appears at most once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentMatrix {
    rows: Vec<MatrixRow>,
}

impl ExperimentMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MatrixRow) -> Result<()> {
        if self.get(row.variant, row.arm).is_some() {
            return Err(Error::Config(format!("duplicate matrix row {} {}", row.variant, row.arm)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MatrixRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, variant: Variant, arm: Arm) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.variant == variant && r.arm == arm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRowSpec {
    pub level: SubsetLevel,
    #[serde(default)]
    pub domain: Domain,
    pub arm: Arm,
    pub train_size: usize,
    /// One checkpoint per seed.
    pub checkpoints: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

/// Which checkpoints to score on which validation manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub validation: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_validation: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(rename = "row")]
    pub rows: Vec<MatrixRowSpec>,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl MatrixSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("matrix spec serializes")
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest and its samples; image paths resolve against the
/// manifest's directory.
pub fn load_manifest_samples(path: &Path) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::load(path)?;
    load_samples(&manifest, path.parent().unwrap_or(Path::new(".")))
}

/// The normalization stored alongside a checkpoint.
pub fn bundle_stats(bundle: &CheckpointBundle) -> Result<ChannelStats> {
    bundle
        .metadata
        .get(NORMALIZATION_KEY)
        .ok_or_else(|| Error::Config("checkpoint carries no normalization stats".into()))?
        .parse()
}

/// Loads a checkpoint into a [`ToyUNet`] and scores it.
pub fn evaluate_bundle(bundle: &CheckpointBundle, samples: &[Sample], threshold: f64) -> Result<IoUReport> {
    let model = ToyUNet::from_bundle(bundle)?;
    evaluate(&model, samples, &bundle_stats(bundle)?, threshold)
}

/// Scores every row of `spec`. Paths resolve against `base_dir`. A row whose
/// checkpoints are missing or unreadable is marked failed; the rest of the
/// matrix is still produced.
pub fn run_matrix(spec: &MatrixSpec, base_dir: &Path) -> Result<ExperimentMatrix> {
    let mut cache: BTreeMap<Domain, Vec<Sample>> = BTreeMap::new();
    let mut matrix = ExperimentMatrix::new();
    for row in &spec.rows {
        let val_path = match row.domain {
            Domain::InDomain => spec.validation.clone(),
            Domain::Holdout => spec
                .holdout_validation
                .clone()
                .ok_or_else(|| Error::Config("holdout row without holdout_validation".into()))?,
        };
        if !cache.contains_key(&row.domain) {
            cache.insert(row.domain, load_manifest_samples(&resolve(base_dir, &val_path))?);
        }
        let samples = &cache[&row.domain];
        let seeds: Vec<u64> = row
            .seeds
            .clone()
            .unwrap_or_else(|| (0..row.checkpoints.len() as u64).collect());
        if seeds.len() != row.checkpoints.len() {
            return Err(Error::Config("seeds and checkpoints differ in length".into()));
        }
        let paths: Vec<PathBuf> = row.checkpoints.iter().map(|p| resolve(base_dir, p)).collect();
        let missing: Vec<String> = paths
            .iter()
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        let outcome = if !missing.is_empty() {
            RowOutcome::Failed(format!("missing checkpoint: {}", missing.join(", ")))
        } else {
            let scored: Result<Vec<(u64, IoUReport)>> = seeds
                .iter()
                .zip(&paths)
                .map(|(&seed, p)| Ok((seed, evaluate_bundle(&CheckpointBundle::load(p)?, samples, spec.threshold)?)))
                .collect();
            match scored {
                Ok(r) => RowOutcome::Evaluated(r),
                Err(e) => RowOutcome::Failed(e.to_string()),
            }
        };
        matrix.push(MatrixRow {
            variant: Variant {
                level: row.level,
                domain: row.domain,
            },
            arm: row.arm,
            train_size: row.train_size,
            outcome,
        })?;
    }
    Ok(matrix)
}
