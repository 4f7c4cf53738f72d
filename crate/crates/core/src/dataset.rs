//! Directories of FTEN tensors described by a JSONL manifest.
//!
//! Each manifest line is `{"file": "x.ften", "race": "..."}`; evaluation
//! sets additionally carry `"id"`, `"label"` and `"approach"`. File paths
//! are resolved relative to the manifest's directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pruning::{Calibration, CalibrationSample, EvalSample};
use crate::tensor::{read_tensor, write_tensor, TensorError};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        source: TensorError,
    },
    #[error("{0}: manifest lists no tensors")]
    Empty(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub race: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach: Option<String>,
}

/// A directory argument means `<dir>/manifest.jsonl`.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_entries(manifest: &Path) -> Result<Vec<(usize, TensorEntry)>, DatasetError> {
    let file = File::open(manifest).map_err(io_err(manifest))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(manifest))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: TensorEntry = serde_json::from_str(&line).map_err(|e| DatasetError::Manifest {
            path: manifest.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, entry));
    }
    if out.is_empty() {
        return Err(DatasetError::Empty(manifest.to_path_buf()));
    }
    Ok(out)
}

fn load(base: &Path, file: &str) -> Result<crate::tensor::Tensor, DatasetError> {
    let path = base.join(file);
    let f = File::open(&path).map_err(io_err(&path))?;
    read_tensor(BufReader::new(f)).map_err(|source| DatasetError::Tensor { path, source })
}

pub fn load_calibration(path: &Path) -> Result<Calibration, DatasetError> {
    let manifest = resolve_manifest(path);
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let samples = read_entries(&manifest)?
        .into_iter()
        .map(|(_, e)| {
            Ok(CalibrationSample {
                input: load(&base, &e.file)?,
                race: e.race,
            })
        })
        .collect::<Result<_, DatasetError>>()?;
    Ok(Calibration::new(samples))
}

pub fn load_eval_set(path: &Path) -> Result<Vec<EvalSample>, DatasetError> {
    let manifest = resolve_manifest(path);
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    read_entries(&manifest)?
        .into_iter()
        .map(|(line, e)| {
            let missing = |field: &str| DatasetError::Manifest {
                path: manifest.clone(),
                line,
                message: format!("evaluation entry needs `{field}`"),
            };
            let label = e.label.ok_or_else(|| missing("label"))?;
            let approach = e.approach.clone().ok_or_else(|| missing("approach"))?;
            Ok(EvalSample {
                id: e.id.clone().unwrap_or_else(|| e.file.clone()),
                input: load(&base, &e.file)?,
                race: e.race,
                approach,
                label,
            })
        })
        .collect()
}

fn write_set(dir: &Path, entries: Vec<(TensorEntry, &crate::tensor::Tensor)>) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut out = BufWriter::new(File::create(&manifest).map_err(io_err(&manifest))?);
    for (entry, tensor) in entries {
        let path = dir.join(&entry.file);
        let f = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(f);
        write_tensor(&mut w, tensor).map_err(|source| DatasetError::Tensor { path: path.clone(), source })?;
        w.flush().map_err(io_err(&path))?;
        serde_json::to_writer(&mut out, &entry).expect("manifest entry serializes");
        out.write_all(b"\n").map_err(io_err(&manifest))?;
    }
    out.flush().map_err(io_err(&manifest))
}

pub fn write_calibration(dir: &Path, calibration: &Calibration) -> Result<(), DatasetError> {
    let entries = calibration
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                TensorEntry {
                    file: format!("calib_{i:05}.ften"),
                    race: s.race.clone(),
                    id: None,
                    label: None,
                    approach: None,
                },
                &s.input,
            )
        })
        .collect();
    write_set(dir, entries)
}

pub fn write_eval_set(dir: &Path, samples: &[EvalSample]) -> Result<(), DatasetError> {
    let entries = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                TensorEntry {
                    file: format!("eval_{i:05}.ften"),
                    race: s.race.clone(),
                    id: Some(s.id.clone()),
                    label: Some(s.label),
                    approach: Some(s.approach.clone()),
                },
                &s.input,
            )
        })
        .collect();
    write_set(dir, entries)
}
