//! CSV/JSON artifact schemas, writers and the validator behind the
//! `validate` subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColType {
    /// Non-negative integer.
    Index,
    /// Finite float.
    Float,
    /// Float that may be `NaN` (undefined statistic).
    FloatOrNan,
    Text,
    Bool,
}

#[derive(Debug)]
pub struct Schema {
    pub file: &'static str,
    pub columns: &'static [(&'static str, ColType)],
}

use ColType::*;

pub const COUPLING_CSV: Schema = Schema {
    file: "coupling.csv",
    columns: &[
        ("kind", Text),
        ("l", Index),
        ("t1", Index),
        ("t2", Index),
        ("l_basis", Index),
        ("t1_basis", Index),
        ("t2_basis", Index),
        ("K", Index),
        ("p", Float),
        ("m_K", FloatOrNan),
        ("c_K", FloatOrNan),
        ("prompt", Index),
        ("degenerate", Bool),
    ],
};

pub const TRAJECTORIES_CSV: Schema = Schema {
    file: "trajectories.csv",
    columns: &[
        ("prompt", Index),
        ("token", Index),
        ("lss", FloatOrNan),
        ("ed", FloatOrNan),
        ("mean_alpha", FloatOrNan),
    ],
};

pub const NORMS_CSV: Schema = Schema {
    file: "norms.csv",
    columns: &[("prompt", Index), ("token", Index), ("layer", Index), ("norm", Float)],
};

pub const ENTROPY_CSV: Schema = Schema {
    file: "entropy.csv",
    columns: &[("prompt", Index), ("layer", Index), ("entropy", Float)],
};

pub const PCA_CSV: Schema = Schema {
    file: "pca.csv",
    columns: &[
        ("prompt", Index),
        ("token", Index),
        ("layer", Index),
        ("pc1", Float),
        ("pc2", Float),
    ],
};

pub const SVALS_CSV: Schema = Schema {
    file: "svals.csv",
    columns: &[
        ("layer", Index),
        ("rank", Index),
        ("value", Float),
        ("prompt", Index),
        ("token", Index),
    ],
};

pub const PERTURB_CSV: Schema = Schema {
    file: "perturb.csv",
    columns: &[("scale", Float), ("cos_first", Float), ("cos_last", Float)],
};

pub const ADJACENCY_CSV: Schema = Schema {
    file: "adjacency.csv",
    columns: &[("l", Index), ("l_basis", Index), ("mean_c", Float)],
};

pub const EMERGENCE_CSV: Schema = Schema {
    file: "emergence.csv",
    columns: &[("step", Index), ("metric", Text), ("value", FloatOrNan)],
};

pub const SWEEP_CSV: Schema = Schema {
    file: "sweep.csv",
    columns: &[
        ("run_id", Text),
        ("hyperparam", Float),
        ("val_loss", Float),
        ("mean_coupling", FloatOrNan),
    ],
};

pub const LOSS_CSV: Schema = Schema {
    file: "loss.csv",
    columns: &[("step", Index), ("train_loss", Float), ("val_loss", FloatOrNan)],
};

pub const ALL_CSV: &[&Schema] = &[
    &COUPLING_CSV,
    &TRAJECTORIES_CSV,
    &NORMS_CSV,
    &ENTROPY_CSV,
    &PCA_CSV,
    &SVALS_CSV,
    &PERTURB_CSV,
    &ADJACENCY_CSV,
    &EMERGENCE_CSV,
    &SWEEP_CSV,
    &LOSS_CSV,
];

pub const ADJACENCY_JSON: &str = "adjacency.json";
pub const RUN_MANIFEST_JSON: &str = "manifest.json";

pub fn schema_for(file_name: &str) -> Option<&'static Schema> {
    ALL_CSV.iter().copied().find(|s| s.file == file_name)
}

/// Shortest round-trip representation; `NaN` for undefined values.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), fmt_f64)
}

/// Builds rows for one schema and writes them in one go.
pub struct Table {
    schema: &'static Schema,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(schema: &'static Schema) -> Self {
        Self {
            schema,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(
            row.len(),
            self.schema.columns.len(),
            "row width for {}",
            self.schema.file
        );
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes `dir/<schema file>` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(self.schema.file);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(self.schema.columns.iter().map(|c| c.0))?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[macro_export]
macro_rules! row {
    ($($v:expr),* $(,)?) => { vec![$($v.to_string()),*] };
}

/// Adjacency export: `entries` is row-major, `entries[(l-1)·L + (l'-1)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyJson {
    #[serde(rename = "L")]
    pub n_layers: usize,
    pub entries: Vec<f64>,
}

pub fn write_adjacency(dir: &Path, adj: &Matrix) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = AdjacencyJson {
        n_layers: adj.rows(),
        entries: adj.data().to_vec(),
    };
    let path = dir.join(ADJACENCY_JSON);
    fs::write(&path, serde_json::to_string_pretty(&json)? + "\n").map_err(|e| Error::io(&path, e))?;
    let mut table = Table::new(&ADJACENCY_CSV);
    for l in 0..adj.rows() {
        for lb in 0..adj.cols() {
            table.push(row![l + 1, lb + 1, fmt_f64(adj[(l, lb)])]);
        }
    }
    table.write(dir)?;
    Ok(())
}

/// Run manifest recorded next to every set of artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub files: Vec<String>,
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(RUN_MANIFEST_JSON);
    fs::write(&path, serde_json::to_string_pretty(manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

fn schema_err(file: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        file: file.to_string(),
        reason: reason.into(),
    }
}

fn check_cell(file: &str, line: usize, col: &str, ty: ColType, cell: &str) -> Result<()> {
    let ok = match ty {
        Index => cell.parse::<u64>().is_ok(),
        Float => cell.parse::<f64>().is_ok_and(f64::is_finite),
        FloatOrNan => cell.parse::<f64>().is_ok_and(|v| v.is_finite() || v.is_nan()),
        Text => !cell.is_empty(),
        Bool => cell == "true" || cell == "false",
    };
    if ok {
        Ok(())
    } else {
        Err(schema_err(
            file,
            format!("line {line}, column {col}: bad value '{cell}'"),
        ))
    }
}

/// Checks header and every cell of a CSV against its schema; returns the
/// number of data rows.
pub fn validate_csv(path: &Path, schema: &Schema) -> Result<usize> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let expected: Vec<&str> = schema.columns.iter().map(|c| c.0).collect();
    if header != expected {
        return Err(schema_err(
            schema.file,
            format!("header {header:?}, expected {expected:?}"),
        ));
    }
    let mut n = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != expected.len() {
            return Err(schema_err(
                schema.file,
                format!("line {} has {} fields", i + 2, rec.len()),
            ));
        }
        for (cell, &(name, ty)) in rec.iter().zip(schema.columns) {
            check_cell(schema.file, i + 2, name, ty, cell)?;
        }
        n += 1;
    }
    Ok(n)
}

pub fn validate_adjacency_json(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let adj: AdjacencyJson = serde_json::from_str(&text).map_err(|e| schema_err(ADJACENCY_JSON, e.to_string()))?;
    if adj.entries.len() != adj.n_layers * adj.n_layers {
        return Err(schema_err(
            ADJACENCY_JSON,
            format!("{} entries for L = {}", adj.entries.len(), adj.n_layers),
        ));
    }
    if adj.entries.iter().any(|v| !v.is_finite()) {
        return Err(schema_err(ADJACENCY_JSON, "non-finite entry"));
    }
    Ok(())
}

pub fn validate_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| schema_err(RUN_MANIFEST_JSON, e.to_string()))
}

/// Outcome for one recognized artifact.
#[derive(Debug)]
pub struct Validation {
    pub file: String,
    pub result: Result<usize>,
}

/// Validates every recognized artifact in `dir` (non-recursive). Files with
/// unknown names are skipped.
pub fn validate_dir(dir: &Path) -> Result<Vec<Validation>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let path = dir.join(&name);
        let result = if let Some(schema) = schema_for(&name) {
            validate_csv(&path, schema)
        } else if name == ADJACENCY_JSON {
            validate_adjacency_json(&path).map(|_| 1)
        } else if name == RUN_MANIFEST_JSON {
            validate_manifest(&path).map(|m| m.files.len())
        } else {
            continue;
        };
        out.push(Validation { file: name, result });
    }
    Ok(out)
}
