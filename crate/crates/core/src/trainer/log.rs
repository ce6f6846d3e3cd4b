//! Tab-separated training log: one row per optimizer step plus a flagged
//! summary row per epoch.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::StepTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Batch,
    Epoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub kind: RowKind,
    pub step: StepTag,
    pub epoch: usize,
    /// Batch index within the epoch; `None` on summary rows.
    pub batch: Option<usize>,
    pub lr: f64,
    pub l_id: Option<f64>,
    pub l_fill: Option<f64>,
    pub l_total: f64,
    pub masked_fraction: Option<f64>,
    pub cluster_count: Option<usize>,
    pub cluster_size: Option<usize>,
    /// Held-out reconstruction loss (inpainting) or IoU (segmentation).
    pub val_metric: Option<f64>,
}

const HEADER: &str =
    "kind\tstep\tepoch\tbatch\tlr\tl_id\tl_fill\tl_total\tmasked_fraction\tcluster_count\tcluster_size\tval_metric";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or("-".into(), |v| v.to_string())
}

impl TrainingLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: TrainingLog) {
        self.rows.extend(other.rows);
    }

    pub fn epochs(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Epoch)
    }

    pub fn batches(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Batch)
    }

    pub fn row_tsv(r: &LogRow) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            match r.kind {
                RowKind::Batch => "batch",
                RowKind::Epoch => "epoch",
            },
            r.step,
            r.epoch,
            opt(r.batch),
            r.lr,
            opt(r.l_id),
            opt(r.l_fill),
            r.l_total,
            opt(r.masked_fraction),
            opt(r.cluster_count),
            opt(r.cluster_size),
            opt(r.val_metric)
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{}", Self::row_tsv(r));
        }
        out
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<TrainingLog> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::format(path, "not a training log"));
        }
        let mut log = TrainingLog::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 12 {
                return Err(Error::format(path, format!("expected 12 fields in `{line}`")));
            }
            let bad = |s: &str| Error::format(path, format!("bad field `{s}`"));
            let num = |s: &str| -> Result<Option<f64>> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(s))
                }
            };
            let int = |s: &str| -> Result<Option<usize>> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(s))
                }
            };
            log.push(LogRow {
                kind: match f[0] {
                    "batch" => RowKind::Batch,
                    "epoch" => RowKind::Epoch,
                    s => return Err(bad(s)),
                },
                step: f[1].parse()?,
                epoch: int(f[2])?.ok_or_else(|| bad(f[2]))?,
                batch: int(f[3])?,
                lr: num(f[4])?.ok_or_else(|| bad(f[4]))?,
                l_id: num(f[5])?,
                l_fill: num(f[6])?,
                l_total: num(f[7])?.ok_or_else(|| bad(f[7]))?,
                masked_fraction: num(f[8])?,
                cluster_count: int(f[9])?,
                cluster_size: int(f[10])?,
                val_metric: num(f[11])?,
            });
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TrainingLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut log = TrainingLog::default();
        log.push(LogRow {
            kind: RowKind::Batch,
            step: StepTag::Step1,
            epoch: 0,
            batch: Some(3),
            lr: 0.01,
            l_id: Some(0.25),
            l_fill: Some(1.0 / 3.0),
            l_total: 0.3,
            masked_fraction: Some(0.021),
            cluster_count: Some(100),
            cluster_size: Some(1),
            val_metric: None,
        });
        log.push(LogRow {
            kind: RowKind::Epoch,
            batch: None,
            l_id: None,
            l_fill: None,
            masked_fraction: None,
            cluster_count: None,
            cluster_size: None,
            val_metric: Some(0.5),
            ..log.rows[0].clone()
        });
        assert_eq!(TrainingLog::parse_tsv(&log.to_tsv(), Path::new("x")).unwrap(), log);
    }
}
