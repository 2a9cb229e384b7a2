//! Append-only per-step metrics files.
//!
//! CSV files start with `#` comment lines carrying the run header as JSON,
//! followed by a `step,epoch,loss,images_per_sec,wall_ms` table. JSON-lines
//! files hold the header object on the first line and one step per line after.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::StepMetrics;

pub const CSV_MAGIC: &str = "# layerpar-metrics v1";
pub const CSV_COLUMNS: [&str; 5] = ["step", "epoch", "loss", "images_per_sec", "wall_ms"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("step {got} does not follow step {last}")]
    StepOrder { last: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" => Ok(ReportFormat::Jsonl),
            _ => Err(format!("unknown format `{s}` (expected csv or jsonl)")),
        }
    }
}

/// Written once, before the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run: serde_json::Value,
    pub world_size: usize,
    pub build_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub header: RunHeader,
    pub steps: Vec<StepMetrics>,
}

pub fn build_id() -> String {
    format!(
        "{}+{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("LAYERPAR_BUILD_ID").unwrap_or("unknown")
    )
}

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    format: ReportFormat,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path, format: ReportFormat, header: &RunHeader) -> Result<Self, MetricsError> {
        let io = |source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        let json = serde_json::to_string(header).expect("header serializes");
        match format {
            ReportFormat::Csv => {
                writeln!(out, "{CSV_MAGIC}").map_err(io)?;
                writeln!(out, "# header: {json}").map_err(io)?;
                writeln!(out, "{}", CSV_COLUMNS.join(",")).map_err(io)?;
            }
            ReportFormat::Jsonl => writeln!(out, "{json}").map_err(io)?,
        }
        out.flush().map_err(io)?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
            format,
            last_step: None,
        })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<(), MetricsError> {
        if let Some(last) = self.last_step {
            if m.step <= last {
                return Err(MetricsError::StepOrder { last, got: m.step });
            }
        }
        let io = |source| MetricsError::Io {
            path: self.path.clone(),
            source,
        };
        match self.format {
            ReportFormat::Csv => writeln!(
                self.out,
                "{},{},{:?},{:?},{:?}",
                m.step, m.epoch, m.loss, m.images_per_sec, m.wall_ms
            ),
            ReportFormat::Jsonl => writeln!(self.out, "{}", serde_json::to_string(m).expect("metrics serialize")),
        }
        .map_err(io)?;
        self.out.flush().map_err(io)?;
        self.last_step = Some(m.step);
        Ok(())
    }
}

impl MetricsLog {
    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<(), MetricsError> {
        let mut w = MetricsWriter::create(path, format, &self.header)?;
        for s in &self.steps {
            w.append(s)?;
        }
        Ok(())
    }

    /// Reads either format, telling them apart by the first line.
    pub fn read(path: &Path) -> Result<Self, MetricsError> {
        let file = File::open(path).map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|source| MetricsError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let err = |line: usize, detail: String| MetricsError::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let first = lines.first().ok_or_else(|| err(1, "empty file".into()))?;
        let mut steps: Vec<StepMetrics> = Vec::new();
        let header = if first == CSV_MAGIC {
            let json = lines
                .get(1)
                .and_then(|l| l.strip_prefix("# header: "))
                .ok_or_else(|| err(2, "missing `# header:` line".into()))?;
            let header = serde_json::from_str(json).map_err(|e| err(2, e.to_string()))?;
            if lines.get(2).map(String::as_str) != Some(CSV_COLUMNS.join(",").as_str()) {
                return Err(err(3, format!("expected columns {}", CSV_COLUMNS.join(","))));
            }
            for (i, line) in lines.iter().enumerate().skip(3) {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != CSV_COLUMNS.len() {
                    return Err(err(i + 1, format!("{} fields, expected {}", f.len(), CSV_COLUMNS.len())));
                }
                let int = |s: &str| s.parse::<usize>().map_err(|e| err(i + 1, format!("`{s}`: {e}")));
                let num = |s: &str| s.parse::<f64>().map_err(|e| err(i + 1, format!("`{s}`: {e}")));
                steps.push(StepMetrics {
                    step: int(f[0])?,
                    epoch: int(f[1])?,
                    loss: num(f[2])?,
                    images_per_sec: num(f[3])?,
                    wall_ms: num(f[4])?,
                });
            }
            header
        } else {
            let header = serde_json::from_str(first).map_err(|e| err(1, e.to_string()))?;
            for (i, line) in lines.iter().enumerate().skip(1).filter(|(_, l)| !l.is_empty()) {
                steps.push(serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?);
            }
            header
        };
        if let Some(w) = steps.windows(2).find(|w| w[1].step <= w[0].step) {
            return Err(MetricsError::StepOrder {
                last: w[0].step,
                got: w[1].step,
            });
        }
        Ok(Self { header, steps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> RunHeader {
        RunHeader {
            run: serde_json::json!({"strategy": "hybrid", "lr_schedule": [[0, 0.1]]}),
            world_size: 4,
            build_id: build_id(),
        }
    }

    fn step(step: usize, loss: f64) -> StepMetrics {
        StepMetrics {
            step,
            epoch: step / 3,
            loss,
            images_per_sec: 1234.5678901234,
            wall_ms: 0.1 + step as f64,
        }
    }

    #[test]
    fn steps_must_increase() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(&dir.path().join("m.csv"), ReportFormat::Csv, &header()).unwrap();
        w.append(&step(0, 1.0)).unwrap();
        assert!(matches!(w.append(&step(0, 1.0)), Err(MetricsError::StepOrder { last: 0, got: 0 })));
    }

    #[test]
    fn header_precedes_steps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        MetricsWriter::create(&p, ReportFormat::Csv, &header()).unwrap();
        let log = MetricsLog::read(&p).unwrap();
        assert_eq!(log.header, header());
        assert!(log.steps.is_empty());
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(CSV_MAGIC));
    }

    #[test]
    fn malformed_rows_are_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, format!("{}\n{{\"step\": 1}}\n", serde_json::to_string(&header()).unwrap())).unwrap();
        assert!(matches!(MetricsLog::read(&p), Err(MetricsError::Parse { line: 2, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip(losses in proptest::collection::vec(-1e300f64..1e300, 0..20), jsonl in any::<bool>()) {
            let dir = tempfile::tempdir().unwrap();
            let (path, fmt) = if jsonl {
                (dir.path().join("m.jsonl"), ReportFormat::Jsonl)
            } else {
                (dir.path().join("m.csv"), ReportFormat::Csv)
            };
            let log = MetricsLog {
                header: header(),
                steps: losses.iter().enumerate().map(|(i, &l)| step(i * 2, l)).collect(),
            };
            log.write(&path, fmt).unwrap();
            prop_assert_eq!(MetricsLog::read(&path).unwrap(), log);
        }
    }
}
