//! Step and pipeline configuration, profiles, and TOML loading with
//! `flag > file > profile default` precedence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::MaskSchedule;
use crate::model::checkpoint::sha256_hex;
use crate::model::StepTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Inpaint,
    GuidedInpaint,
    Segmentation,
}

impl StepKind {
    pub fn tag(self) -> StepTag {
        match self {
            StepKind::Inpaint => StepTag::Step1,
            StepKind::GuidedInpaint => StepTag::Step2,
            StepKind::Segmentation => StepTag::Step3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationLossKind {
    /// Binary cross-entropy on one logit, softmax cross-entropy otherwise.
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub step: StepKind,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    /// Random dihedral transform per sample per epoch, applied before masking.
    pub augment: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_schedule: Option<MaskSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
    /// Global L2 norm clip on the gradient; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub segmentation_loss: SegmentationLossKind,
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{:?}: {m}", self.step)));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_milestones must be strictly increasing".into());
        }
        if self.lr_milestones.iter().any(|&m| m >= self.epochs) {
            return bad("lr_milestones must lie below epochs".into());
        }
        if !(self.lr_gamma.is_finite() && self.lr_gamma > 0.0) {
            return bad("lr_gamma must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        self.loss_weights.validate()?;
        match self.step {
            StepKind::Inpaint | StepKind::GuidedInpaint if self.mask_schedule.is_none() => {
                bad("inpainting steps need a mask_schedule".into())
            }
            _ => Ok(()),
        }
    }

    /// `lr · gamma^(milestones ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_gamma.powi(decays as i32)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("step config serializes")
    }

    /// Hash of every setting except `init_from`, so a scratch baseline and a
    /// pretrained run with otherwise equal settings share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.init_from = None;
        sha256_hex(c.to_toml().as_bytes())
    }

    /// SGD with momentum 0.9 and weight decay 5e-4, step-1 and step-3 values
    /// of the SPIN setup.
    pub fn spin(step: StepKind) -> Self {
        let (epochs, lr, lr_milestones) = match step {
            StepKind::GuidedInpaint => (40, 0.001, vec![10, 20, 30]),
            _ => (120, 0.01, vec![50, 90, 110]),
        };
        StepConfig {
            step,
            epochs,
            optimizer: OptimizerKind::SgdMomentum,
            lr,
            lr_milestones,
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 32,
            loss_weights: LossWeights::default(),
            augment: true,
            mask_schedule: (step != StepKind::Segmentation).then(MaskSchedule::table),
            init_from: None,
            grad_clip: None,
            segmentation_loss: SegmentationLossKind::CrossEntropy,
        }
    }

    /// EmekU-Net fine-tuning: Adam at 1e-3, decayed by 0.1 after 10, 20, 30.
    pub fn emek_segmentation() -> Self {
        StepConfig {
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            lr_milestones: vec![10, 20, 30],
            weight_decay: 0.0,
            ..StepConfig::spin(StepKind::Segmentation)
        }
    }

    /// Shrinks the epoch count to `epochs`, scaling LR milestones and
    /// mask-schedule epochs by the same factor (rounded down, at least 1).
    /// Milestones that no longer fall inside the run are dropped.
    pub fn shortened(&self, epochs: usize) -> Result<Self> {
        let factor = epochs as f64 / self.epochs as f64;
        let mut c = self.clone();
        c.epochs = epochs;
        let mut ms: Vec<usize> = self
            .lr_milestones
            .iter()
            .map(|&m| ((m as f64 * factor).floor() as usize).max(1))
            .filter(|&m| m < epochs)
            .collect();
        ms.dedup();
        c.lr_milestones = ms;
        if let Some(s) = &self.mask_schedule {
            c.mask_schedule = Some(s.scaled(factor, 1.0)?);
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Paper-scale SPIN setup (120/40/120 epochs, batch 32).
    Paper,
    /// Paper scale, with the EmekU-Net fine-tuning step and three classes.
    PaperEmek,
    /// CPU-sized runs on 64-pixel synthetic scenes (12/4/12 epochs, batch 2).
    Desk,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::PaperEmek => "paper_emek",
            Profile::Desk => "desk",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "paper_emek" => Ok(Profile::PaperEmek),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Manifests consumed by a pipeline run. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Images for step 1; labels are ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled: Option<PathBuf>,
    /// Labelled images for steps 2 and 3.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub num_classes: usize,
    pub base_channels: usize,
    /// Probability threshold for binary heads.
    pub threshold: f64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub step1: StepConfig,
    /// Batch size and optimizer are not given for this step; they repeat
    /// step 1's.
    pub step2: StepConfig,
    pub step3: StepConfig,
}

/// Cluster sizes in the desk profile are scaled from 512-pixel crops to
/// 64-pixel scenes.
pub const DESK_CANVAS: usize = 64;
pub const DESK_BATCH: usize = 2;

impl PipelineConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => PipelineConfig {
                profile,
                seed: 0,
                num_classes: 1,
                base_channels: 16,
                threshold: 0.5,
                data: DataConfig::default(),
                out_dir: None,
                step1: StepConfig::spin(StepKind::Inpaint),
                step2: StepConfig::spin(StepKind::GuidedInpaint),
                step3: StepConfig::spin(StepKind::Segmentation),
            },
            Profile::PaperEmek => PipelineConfig {
                profile,
                num_classes: 3,
                step3: StepConfig::emek_segmentation(),
                ..PipelineConfig::profile(Profile::Paper)
            },
            Profile::Desk => {
                let paper = PipelineConfig::profile(Profile::Paper);
                let desk = |c: &StepConfig, epochs: usize| {
                    let mut c = c.shortened(epochs).expect("paper schedule scales");
                    c.batch_size = DESK_BATCH;
                    c
                };
                let mut step1 = desk(&paper.step1, 12);
                step1.mask_schedule = Some(
                    MaskSchedule::table()
                        .scaled(0.1, DESK_CANVAS as f64 / 512.0)
                        .expect("table scales"),
                );
                let mut step2 = desk(&paper.step2, 4);
                step2.mask_schedule = step1.mask_schedule.clone();
                // Adam at 1e-3 (the EmekU-Net fine-tuning values) on the SPIN
                // milestones; SGD at this step count leaves scratch and
                // pretrained trunks both underfit
                let mut step3 = desk(&paper.step3, 12);
                step3.optimizer = OptimizerKind::Adam;
                step3.lr = 0.001;
                step3.weight_decay = 0.0;
                PipelineConfig {
                    profile,
                    step1,
                    step2,
                    step3,
                    ..paper
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidClassCount(0));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        for (want, c) in [
            (StepKind::Inpaint, &self.step1),
            (StepKind::GuidedInpaint, &self.step2),
            (StepKind::Segmentation, &self.step3),
        ] {
            if c.step != want {
                return Err(Error::Config(format!("section for {want:?} declares step {:?}", c.step)));
            }
            c.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// Parses a config file over the defaults of its `profile` key (desk when
    /// absent), then applies `key=value` overrides with dotted keys such as
    /// `step1.lr=0.02`. Unknown keys are errors.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged_overrides = toml::Table::new();
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_dotted(&mut merged_overrides, &key, value)?;
        }
        let profile = match merged_overrides.get("profile").or_else(|| file.get("profile")) {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => Profile::Desk,
        };
        let mut base = toml::Table::try_from(PipelineConfig::profile(profile)).expect("config serializes");
        merge(&mut base, file);
        merge(&mut base, merged_overrides);
        let cfg: PipelineConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_with_overrides(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.data.unlabeled);
        fix(&mut cfg.data.labeled);
        fix(&mut cfg.data.validation);
        fix(&mut cfg.out_dir);
        Ok(cfg)
    }
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let raw = raw.trim();
    // parse as a TOML value; anything that is not one is taken as a bare string
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_scaling() {
        let c = PipelineConfig::profile(Profile::Desk);
        c.validate().unwrap();
        assert_eq!((c.step1.epochs, c.step2.epochs, c.step3.epochs), (12, 4, 12));
        assert_eq!(c.step1.lr_milestones, vec![5, 9, 11]);
        assert_eq!(c.step2.lr_milestones, vec![1, 2, 3]);
        let epochs: Vec<usize> = c.step1.mask_schedule.as_ref().unwrap().milestones().iter().map(|m| m.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn lr_steps() {
        let c = StepConfig::spin(StepKind::Inpaint);
        assert_eq!(c.lr_at(0), 0.01);
        assert!((c.lr_at(50) - 0.001).abs() < 1e-15);
        assert!((c.lr_at(119) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn precedence() {
        let text = "profile = \"desk\"\n[step1]\nlr = 0.05\nbatch_size = 4\n";
        let c = PipelineConfig::from_toml_with_overrides(text, &["step1.lr=0.07".into()]).unwrap();
        assert_eq!(c.step1.lr, 0.07);
        assert_eq!(c.step1.batch_size, 4);
        assert_eq!(c.step1.momentum, 0.9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml_with_overrides("[step1]\nlearning_rate = 1.0\n", &[]).is_err());
        assert!(PipelineConfig::from_toml_with_overrides("", &["nope=1".into()]).is_err());
    }

    #[test]
    fn round_trip_toml() {
        for p in [Profile::Paper, Profile::PaperEmek, Profile::Desk] {
            let c = PipelineConfig::profile(p);
            assert_eq!(PipelineConfig::from_toml_with_overrides(&c.to_toml(), &[]).unwrap(), c);
        }
    }

    #[test]
    fn digest_ignores_init() {
        let a = StepConfig::spin(StepKind::Segmentation);
        let mut b = a.clone();
        b.init_from = Some("x.ckpt".into());
        assert_eq!(a.digest(), b.digest());
        b.lr = 0.5;
        assert_ne!(a.digest(), b.digest());
    }
}
