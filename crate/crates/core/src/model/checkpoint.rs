//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RFCK" u32:version
//! u32:header_len  header (UTF-8, one `key=value` per line)
//! u32:tensor_count
//! repeated: u32:name_len name u32:ndim u64[ndim]:dims f32[prod(dims)]:values
//! ```
//!
//! Tensor names starting with `optim/` hold optimizer state and are not
//! model parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::SegmentationModel;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RFCK";
pub const FORMAT_VERSION: u32 = 1;
pub const OPTIMIZER_PREFIX: &str = "optim/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StepTag {
    Step1,
    Step2,
    Step3,
}

impl fmt::Display for StepTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepTag::Step1 => "step1",
            StepTag::Step2 => "step2",
            StepTag::Step3 => "step3",
        })
    }
}

impl FromStr for StepTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step1" => Ok(StepTag::Step1),
            "step2" => Ok(StepTag::Step2),
            "step3" => Ok(StepTag::Step3),
            other => Err(Error::Config(format!("unknown step tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub parameters: BTreeMap<String, NamedTensor>,
    pub step_tag: StepTag,
    pub head_channels: usize,
    pub config_digest: String,
    /// Free-form extras (epoch, architecture, lineage).
    pub metadata: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl CheckpointBundle {
    pub fn from_model<M: SegmentationModel>(
        model: &M,
        step_tag: StepTag,
        config_digest: &str,
    ) -> Result<Self> {
        let mut parameters = BTreeMap::new();
        for (name, p) in model.parameters() {
            if p.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptState(name));
            }
            parameters.insert(
                name,
                NamedTensor {
                    shape: p.shape.clone(),
                    values: p.value.clone(),
                },
            );
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("architecture".into(), model.describe_architecture());
        Ok(CheckpointBundle {
            parameters,
            step_tag,
            head_channels: model.out_channels(),
            config_digest: config_digest.to_string(),
            metadata,
        })
    }

    pub fn model_parameters(&self) -> impl Iterator<Item = (&String, &NamedTensor)> {
        self.parameters
            .iter()
            .filter(|(n, _)| !n.starts_with(OPTIMIZER_PREFIX))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!(
            "format=roadfill-checkpoint\nstep_tag={}\nhead_channels={}\nconfig_digest={}\n",
            self.step_tag, self.head_channels, self.config_digest
        );
        for (k, v) in &self.metadata {
            header.push_str(&format!("{k}={}\n", v.replace('\n', " ")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.parameters.len() as u32).to_le_bytes());
        for (name, t) in &self.parameters {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Digest of the serialized bundle.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::format(path, "header is not UTF-8"))?;
        let mut fields: BTreeMap<String, String> = header
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut required = |key: &str| {
            fields
                .remove(key)
                .ok_or_else(|| Error::format(path, format!("header lacks `{key}`")))
        };
        if required("format")? != "roadfill-checkpoint" {
            return Err(Error::format(path, "unknown checkpoint format"));
        }
        let step_tag: StepTag = required("step_tag")?.parse()?;
        let head_channels = required("head_channels")?
            .parse()
            .map_err(|_| Error::format(path, "bad head_channels"))?;
        let config_digest = required("config_digest")?;

        let count = r.u32()? as usize;
        let mut parameters = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            parameters.insert(name, NamedTensor { shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(CheckpointBundle {
            parameters,
            step_tag,
            head_channels,
            config_digest,
            metadata: fields,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes `model` to `path` and returns the bundle that was written.
pub fn save_checkpoint<M: SegmentationModel>(
    model: &M,
    step_tag: StepTag,
    config_digest: &str,
    path: &Path,
) -> Result<CheckpointBundle> {
    let bundle = CheckpointBundle::from_model(model, step_tag, config_digest)?;
    bundle.save(path)?;
    Ok(bundle)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub transferred: Vec<String>,
    /// Target parameters left at their fresh initialization.
    pub reinitialized: Vec<String>,
}

/// Copies every name-matched parameter from `bundle` into `target`.
///
/// Output-layer parameters whose shapes differ keep the target's fresh
/// initialization; a shape conflict anywhere else is an error.
pub fn load_checkpoint<M: SegmentationModel>(
    bundle: &CheckpointBundle,
    target: &mut M,
) -> Result<LoadReport> {
    let final_names: Vec<bool> = target
        .parameters()
        .iter()
        .map(|(n, _)| target.is_final_layer_param(n))
        .collect();
    let overlap = target
        .parameters()
        .iter()
        .filter(|(n, _)| bundle.parameters.contains_key(n))
        .count();
    if overlap == 0 {
        return Err(Error::IncompatibleCheckpoint);
    }
    for ((name, p), &is_final) in target.parameters().iter().zip(&final_names) {
        if let Some(t) = bundle.parameters.get(name) {
            if t.shape != p.shape && !is_final {
                return Err(Error::ParameterShape {
                    name: name.clone(),
                    expected: p.shape.clone(),
                    found: t.shape.clone(),
                });
            }
        }
    }
    let mut report = LoadReport::default();
    for ((name, p), is_final) in target.parameters_mut().into_iter().zip(final_names) {
        match bundle.parameters.get(&name) {
            Some(t) if t.shape == p.shape => {
                p.value.copy_from_slice(&t.values);
                report.transferred.push(name);
            }
            Some(_) => {
                debug_assert!(is_final);
                log::warn!("output layer `{name}` differs in shape from checkpoint; keeping fresh init");
                report.reinitialized.push(name);
            }
            None => {
                log::warn!("`{name}` not in checkpoint; keeping fresh init");
                report.reinitialized.push(name);
            }
        }
    }
    Ok(report)
}
