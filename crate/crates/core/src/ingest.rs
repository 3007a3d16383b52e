//! Embedding bundles: loading, saving, row normalization and class-balanced
//! subsampling.
//!
//! A bundle is a directory holding `manifest.json` plus one matrix file per
//! checkpoint. Matrix files are either the binary `TGEM` format
//! (little-endian `f32` payload followed by `u32` labels) or a CSV with
//! header `f0,...,f{d-1},label`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAGIC: &[u8; 4] = b"TGEM";

/// Row-normalized embeddings of one checkpoint with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub checkpoint_id: String,
    /// n × d, one embedding per row.
    pub points: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl EmbeddingDataset {
    /// Builds a dataset, normalizing rows and validating labels.
    pub fn new(
        checkpoint_id: impl Into<String>,
        points: DMatrix<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let points = normalize_rows(&points)?;
        Self::from_normalized(checkpoint_id, points, labels, num_classes)
    }

    /// Builds a dataset from rows that are already unit norm (or that are
    /// deliberately left as-is, e.g. a perturbed copy used for stability checks).
    pub fn from_normalized(
        checkpoint_id: impl Into<String>,
        points: DMatrix<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let checkpoint_id = checkpoint_id.into();
        if labels.len() != points.nrows() {
            return Err(Error::InvalidInput(format!(
                "{checkpoint_id}: {} labels for {} rows",
                labels.len(),
                points.nrows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
                context: checkpoint_id,
            });
        }
        Ok(EmbeddingDataset {
            checkpoint_id,
            points,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Row indices belonging to `class`, ascending.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// The sub-matrix of rows belonging to `class`.
    pub fn class_points(&self, class: usize) -> DMatrix<f64> {
        select_rows(&self.points, &self.class_indices(class))
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// A family of checkpoints sharing dimension and class set.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFamily {
    pub family_id: String,
    pub checkpoints: Vec<EmbeddingDataset>,
    /// Evaluation-only ground truth, one value per checkpoint.
    pub ood_accuracy: Option<Vec<f64>>,
    pub num_classes: usize,
    /// Free-form metadata carried through the manifest.
    pub metadata: Option<serde_json::Value>,
}

impl CheckpointFamily {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.checkpoints.first() else {
            return Err(Error::InvalidInput(format!(
                "family {} has no checkpoints",
                self.family_id
            )));
        };
        for ck in &self.checkpoints {
            if ck.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    path: PathBuf::from(&ck.checkpoint_id),
                    expected: first.dim(),
                    found: ck.dim(),
                });
            }
            if ck.num_classes != self.num_classes {
                return Err(Error::InvalidInput(format!(
                    "{} has {} classes, family has {}",
                    ck.checkpoint_id, ck.num_classes, self.num_classes
                )));
            }
        }
        if let Some(acc) = &self.ood_accuracy {
            if acc.len() != self.checkpoints.len() {
                return Err(Error::InvalidInput(format!(
                    "{} ood_accuracy values for {} checkpoints",
                    acc.len(),
                    self.checkpoints.len()
                )));
            }
            if let Some(a) = acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::InvalidInput(format!(
                    "ood_accuracy {a} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub family_id: String,
    pub checkpoints: Vec<ManifestEntry>,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

/// Divides every row by its Euclidean norm.
pub fn normalize_rows(points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = points.clone();
    for i in 0..out.nrows() {
        let norm = out.row(i).norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroRow(i));
        }
        out.row_mut(i).unscale_mut(norm);
    }
    Ok(out)
}

/// Draws `min(n_per_class, |class|)` points per class uniformly without
/// replacement. Output rows are class-major, original-index-minor.
pub fn sample_per_class(
    ds: &EmbeddingDataset,
    n_per_class: usize,
    seed: u64,
) -> Result<EmbeddingDataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidInput("n_per_class must be positive".into()));
    }
    let root = Seed::new(seed).child("sample_per_class");
    let mut rows = Vec::with_capacity(ds.len().min(n_per_class * ds.num_classes));
    for class in 0..ds.num_classes {
        let idx = ds.class_indices(class);
        if idx.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        if idx.len() <= n_per_class {
            rows.extend(idx);
            continue;
        }
        let mut rng = root.index(class as u64).rng();
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, idx.len(), n_per_class)
            .into_iter()
            .map(|p| idx[p])
            .collect();
        chosen.sort_unstable();
        rows.extend(chosen);
    }
    Ok(EmbeddingDataset {
        checkpoint_id: ds.checkpoint_id.clone(),
        points: select_rows(&ds.points, &rows),
        labels: rows.iter().map(|&r| ds.labels[r]).collect(),
        num_classes: ds.num_classes,
    })
}

/// Matrix file on-disk format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Binary,
    Csv,
}

impl MatrixFormat {
    fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Binary,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Binary => "tgem",
            MatrixFormat::Csv => "csv",
        }
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptMatrix {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads raw (un-normalized) points and labels.
pub fn read_matrix_file(path: &Path) -> Result<(DMatrix<f64>, Vec<usize>)> {
    match MatrixFormat::for_path(path) {
        MatrixFormat::Binary => read_binary(path),
        MatrixFormat::Csv => read_csv(path),
    }
}

fn read_binary(path: &Path) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt(path, "bad magic or truncated header"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let rows = u32_at(4) as usize;
    let cols = u32_at(8) as usize;
    let expected = 12 + 4 * rows * cols + 4 * rows;
    if bytes.len() != expected {
        return Err(corrupt(
            path,
            format!(
                "header says {rows}x{cols}, expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let data = &bytes[12..12 + 4 * rows * cols];
    let points = DMatrix::from_fn(rows, cols, |i, j| {
        let off = 4 * (i * cols + j);
        f64::from(f32::from_le_bytes(data[off..off + 4].try_into().unwrap()))
    });
    let lab = &bytes[12 + 4 * rows * cols..];
    let labels = (0..rows)
        .map(|i| u32::from_le_bytes(lab[4 * i..4 * i + 4].try_into().unwrap()) as usize)
        .collect();
    Ok((points, labels))
}

fn read_csv(path: &Path) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(corrupt(path, "empty file")),
    };
    let cols: Vec<&str> = header.trim().split(',').collect();
    let d = cols.len().saturating_sub(1);
    let header_ok = cols.last() == Some(&"label")
        && cols[..d]
            .iter()
            .enumerate()
            .all(|(i, c)| *c == format!("f{i}"));
    if d == 0 || !header_ok {
        return Err(corrupt(path, "expected header f0,...,f{d-1},label"));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != d + 1 {
            return Err(corrupt(
                path,
                format!("line {}: {} fields, expected {}", lineno + 2, fields.len(), d + 1),
            ));
        }
        for f in &fields[..d] {
            let v: f64 = f
                .parse()
                .map_err(|_| corrupt(path, format!("line {}: bad number {f:?}", lineno + 2)))?;
            values.push(v);
        }
        let label: usize = fields[d]
            .parse()
            .map_err(|_| corrupt(path, format!("line {}: bad label", lineno + 2)))?;
        labels.push(label);
    }
    let n = labels.len();
    Ok((DMatrix::from_row_slice(n, d, &values), labels))
}

/// Writes points as `f32` and labels as `u32` in the chosen format.
pub fn write_matrix_file(
    path: &Path,
    points: &DMatrix<f64>,
    labels: &[usize],
    format: MatrixFormat,
) -> Result<()> {
    let mut buf = Vec::new();
    match format {
        MatrixFormat::Binary => {
            buf.extend_from_slice(MAGIC);
            buf.extend_from_slice(&(points.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(points.ncols() as u32).to_le_bytes());
            for i in 0..points.nrows() {
                for j in 0..points.ncols() {
                    buf.extend_from_slice(&(points[(i, j)] as f32).to_le_bytes());
                }
            }
            for &l in labels {
                buf.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        MatrixFormat::Csv => {
            let header: Vec<String> = (0..points.ncols()).map(|j| format!("f{j}")).collect();
            writeln!(buf, "{},label", header.join(",")).unwrap();
            for i in 0..points.nrows() {
                let row: Vec<String> = (0..points.ncols())
                    .map(|j| format!("{}", points[(i, j)] as f32))
                    .collect();
                writeln!(buf, "{},{}", row.join(","), labels[i]).unwrap();
            }
        }
    }
    crate::cache::atomic_write(path, &buf)
}

/// Loads and validates a bundle directory.
pub fn load_bundle(path: &Path) -> Result<CheckpointFamily> {
    let manifest_path = path.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.checkpoints.is_empty() {
        return Err(Error::Manifest {
            path: manifest_path,
            reason: "no checkpoints listed".into(),
        });
    }

    let loaded: Vec<Result<EmbeddingDataset>> = manifest
        .checkpoints
        .par_iter()
        .map(|entry| {
            let file = path.join(&entry.file);
            let (raw, labels) = read_matrix_file(&file)?;
            if let Some(&bad) = labels.iter().find(|&&l| l >= manifest.num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    num_classes: manifest.num_classes,
                    context: file.display().to_string(),
                });
            }
            let points = normalize_rows(&raw).map_err(|e| match e {
                Error::ZeroRow(r) => corrupt(&file, format!("row {r} is the zero vector")),
                other => other,
            })?;
            EmbeddingDataset::from_normalized(&entry.id, points, labels, manifest.num_classes)
        })
        .collect();
    let checkpoints = loaded.into_iter().collect::<Result<Vec<_>>>()?;

    let d0 = checkpoints[0].dim();
    for (entry, ck) in manifest.checkpoints.iter().zip(&checkpoints) {
        if ck.dim() != d0 {
            return Err(Error::DimensionMismatch {
                path: path.join(&entry.file),
                expected: d0,
                found: ck.dim(),
            });
        }
    }

    let accs: Vec<Option<f64>> = manifest.checkpoints.iter().map(|e| e.ood_accuracy).collect();
    let ood_accuracy = if accs.iter().all(Option::is_some) {
        Some(accs.into_iter().map(Option::unwrap).collect())
    } else if accs.iter().all(Option::is_none) {
        None
    } else {
        return Err(Error::Manifest {
            path: manifest_path,
            reason: "ood_accuracy must be given for all checkpoints or none".into(),
        });
    };

    let family = CheckpointFamily {
        family_id: manifest.family_id,
        checkpoints,
        ood_accuracy,
        num_classes: manifest.num_classes,
        metadata: manifest.metadata,
    };
    family.validate()?;
    Ok(family)
}

/// Writes a bundle directory (manifest plus one matrix file per checkpoint).
pub fn save_bundle(family: &CheckpointFamily, path: &Path, format: MatrixFormat) -> Result<()> {
    family.validate()?;
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::with_capacity(family.checkpoints.len());
    for (i, ck) in family.checkpoints.iter().enumerate() {
        let file = format!("ckpt_{i:04}.{}", format.extension());
        write_matrix_file(&path.join(&file), &ck.points, &ck.labels, format)?;
        entries.push(ManifestEntry {
            id: ck.checkpoint_id.clone(),
            file,
            ood_accuracy: family.ood_accuracy.as_ref().map(|a| a[i]),
        });
    }
    let manifest = Manifest {
        family_id: family.family_id.clone(),
        checkpoints: entries,
        num_classes: family.num_classes,
        metadata: family.metadata.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    crate::cache::atomic_write(&path.join(MANIFEST_FILE), text.as_bytes())
}
