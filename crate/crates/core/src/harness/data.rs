//! Dataset synthesis and CSV persistence.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::SyntheticSpec;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::stream::{train_test_split, Dataset, Example};

/// Gaussian blobs around class means on a radius-`r` shell, split 80/20
/// per class into `(train, test)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let all = generate_synthetic_full(spec, seed)?;
    train_test_split(&all, 0.2, seed)
}

/// The unsplit synthetic dataset, ids `0..C*N` in class order.
pub fn generate_synthetic_full(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.per_class < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 examples per class, got {}",
            spec.per_class
        )));
    }
    if spec.classes == 0 || spec.dim == 0 {
        return Err(Error::Config("synthetic data needs classes and dim > 0".into()));
    }
    if !(spec.radius >= 0.0 && spec.sigma >= 0.0) {
        return Err(Error::Config("radius and sigma must be non-negative".into()));
    }
    let mut mean_rng = rng_for(seed, "synthetic-means");
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.dim).map(|_| mean_rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.into_iter().map(|v| spec.radius * v / norm).collect()
        })
        .collect();
    let mut point_rng = rng_for(seed, "synthetic-points");
    let mut examples = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, mean) in means.iter().enumerate() {
        for i in 0..spec.per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let z: f64 = point_rng.sample(StandardNormal);
                    m + spec.sigma * z
                })
                .collect();
            examples.push(Example::clean((c * spec.per_class + i) as u64, x, c));
        }
    }
    Dataset::new(spec.classes, spec.dim, examples)
}

/// Reads `id,label,f0,...,f{D-1}`. The label column becomes both the
/// observed and the true label. `num_classes` defaults to `max label + 1`.
pub fn load_dataset_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(parse_err(1, "empty file".into()));
    }
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(parse_err(1, "header must be id,label,f0,...".into()));
    }
    let dim = headers.len() - 2;
    for (k, name) in headers.iter().skip(2).enumerate() {
        if name != format!("f{k}") {
            return Err(parse_err(1, format!("expected column f{k}, found {name:?}")));
        }
    }

    let mut examples = Vec::new();
    let mut ids = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let id: u64 = row[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad id {:?}", &row[0])))?;
        let label: usize = row[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", &row[1])))?;
        let x = row
            .iter()
            .skip(2)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| parse_err(line, format!("bad feature {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if !ids.insert(id) {
            return Err(parse_err(line, format!("duplicate id {id}")));
        }
        if let Some(c) = num_classes {
            if label >= c {
                return Err(parse_err(line, format!("label {label} outside [0, {c})")));
            }
        }
        examples.push(Example::clean(id, x, label));
    }
    if examples.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let classes = num_classes.unwrap_or_else(|| examples.iter().map(|e| e.true_label).max().unwrap_or(0) + 1);
    Dataset::new(classes, dim, examples)
}

/// Writes the dataset with floats in 17 significant digits. The label
/// column carries the observed (noisy) label.
pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "id,label")?;
    for k in 0..dataset.dim() {
        write!(out, ",f{k}")?;
    }
    writeln!(out)?;
    for e in &dataset.examples {
        write!(out, "{},{}", e.id, e.noisy_label)?;
        for v in &e.x {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
