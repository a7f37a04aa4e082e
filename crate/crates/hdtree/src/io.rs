//! Dataset readers and writers: IDX image/label pairs, CSV tables and raw
//! little-endian `f32` blobs.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use hdtree_core::data::Dataset;
use hdtree_core::Matrix;

use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 2051;
const IDX_LABELS: u32 = 2049;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated IDX header"))
}

/// Pixels of an IDX image file scaled to `[0, 1]`, one flattened image per row.
pub fn read_idx_images(path: &Path) -> Result<Matrix> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(path, format!("IDX image magic {magic}, expected {IDX_IMAGES}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * dim {
        return Err(Error::format(path, format!("{} pixel bytes for {n} images of {rows}x{cols}", body.len())));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Matrix::from_vec(n, dim, data)?)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(path, format!("IDX label magic {magic}, expected {IDX_LABELS}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(path, format!("{} label bytes for {n} labels", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Images and labels of an IDX pair; counts must agree.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if x.rows() != y.len() {
        return Err(Error::format(labels, format!("{} labels for {} images", y.len(), x.rows())));
    }
    Ok(Dataset::new(x).with_labels(y)?)
}

/// Writes an IDX image file from values in `[0, 1]` (rounded to bytes).
pub fn write_idx_images(path: &Path, x: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != x.cols() {
        return Err(Error::Config(format!("{rows}x{cols} images from {} columns", x.cols())));
    }
    let mut out = Vec::with_capacity(16 + x.as_slice().len());
    for v in [IDX_IMAGES, x.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(x.as_slice().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit a byte")))?);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A CSV column given by header name or zero-based position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    Name(String),
    Index(usize),
}

impl std::str::FromStr for Column {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(s.parse().map(Column::Index).unwrap_or_else(|_| Column::Name(s.to_string())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CsvOptions {
    pub header: bool,
    /// Categorical column factorized into `0..C` in order of first appearance.
    pub label: Option<Column>,
    pub timestamp: Option<Column>,
}

fn resolve(col: &Column, names: Option<&[String]>, width: usize, path: &Path) -> Result<usize> {
    let idx = match col {
        Column::Index(i) => *i,
        Column::Name(name) => names
            .and_then(|n| n.iter().position(|h| h == name))
            .ok_or_else(|| Error::format(path, format!("no column named {name:?}")))?,
    };
    if idx >= width {
        return Err(Error::format(path, format!("column {idx} out of range for {width} columns")));
    }
    Ok(idx)
}

/// Category codes in order of first appearance.
pub fn factorize<S: AsRef<str>>(values: &[S]) -> (Vec<usize>, Vec<String>) {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut names = Vec::new();
    let codes = values
        .iter()
        .map(|v| {
            let v = v.as_ref();
            *seen.entry(v).or_insert_with(|| {
                names.push(v.to_string());
                names.len() - 1
            })
        })
        .collect();
    (codes, names)
}

/// Numeric table with optional label and timestamp columns; every other
/// column becomes a feature.
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.header)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let names: Option<Vec<String>> = if options.header {
        let h = reader.headers().map_err(|e| Error::format(path, e.to_string()))?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };
    let records: Vec<csv::StringRecord> =
        reader.records().collect::<std::result::Result<_, _>>().map_err(|e| Error::format(path, e.to_string()))?;
    let width = names.as_ref().map(Vec::len).or_else(|| records.first().map(|r| r.len())).unwrap_or(0);
    let label = options.label.as_ref().map(|c| resolve(c, names.as_deref(), width, path)).transpose()?;
    let time = options.timestamp.as_ref().map(|c| resolve(c, names.as_deref(), width, path)).transpose()?;
    let feature_cols: Vec<usize> = (0..width).filter(|c| Some(*c) != label && Some(*c) != time).collect();

    let mut data = Vec::with_capacity(records.len() * feature_cols.len());
    let mut raw_labels = Vec::new();
    let mut times = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        let line = r + 1 + usize::from(options.header);
        for &c in &feature_cols {
            let s = rec[c].trim();
            data.push(s.parse::<f64>().map_err(|_| Error::format(path, format!("line {line}: {s:?} is not a number")))?);
        }
        if let Some(c) = label {
            raw_labels.push(rec[c].trim().to_string());
        }
        if let Some(c) = time {
            let s = rec[c].trim();
            times.push(s.parse::<f64>().map_err(|_| Error::format(path, format!("line {line}: bad timestamp {s:?}")))?);
        }
    }
    let mut ds = Dataset::new(Matrix::from_vec(records.len(), feature_cols.len(), data)?);
    if label.is_some() {
        ds = ds.with_labels(factorize(&raw_labels).0)?;
    }
    if time.is_some() {
        ds = ds.with_timestamps(times)?;
    }
    ds.feature_names = names.map(|n| feature_cols.iter().map(|&c| n[c].clone()).collect());
    Ok(ds)
}

/// Row-major little-endian `f32` values with `cols` per row.
pub fn load_f32le(path: &Path, cols: usize) -> Result<Matrix> {
    let bytes = read(path)?;
    if cols == 0 || bytes.len() % (4 * cols) != 0 {
        return Err(Error::format(path, format!("{} bytes do not hold rows of {cols} f32 values", bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    Ok(Matrix::from_vec(bytes.len() / (4 * cols), cols, data)?)
}

pub fn write_f32le(path: &Path, x: &Matrix) -> Result<()> {
    let out: Vec<u8> = x.as_slice().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    F32le { cols: usize },
}

pub fn load_matrix(path: &Path, format: MatrixFormat, options: &CsvOptions) -> Result<Dataset> {
    match format {
        MatrixFormat::Csv => load_csv(path, options),
        MatrixFormat::F32le { cols } => Ok(Dataset::new(load_f32le(path, cols)?)),
    }
}

/// Shortest decimal text that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Dataset as CSV: features (named `x0..` unless names are attached), then
/// `label` and `time` columns when present.
pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header: Vec<String> = match &ds.feature_names {
        Some(n) => n.clone(),
        None => (0..ds.dim()).map(|j| format!("x{j}")).collect(),
    };
    if ds.labels.is_some() {
        header.push("label".into());
    }
    if ds.timestamps.is_some() {
        header.push("time".into());
    }
    let err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(&header).map_err(err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|&v| fmt_f64(v)).collect();
        if let Some(l) = &ds.labels {
            rec.push(l[i].to_string());
        }
        if let Some(t) = &ds.timestamps {
            rec.push(fmt_f64(t[i]));
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `contents` to `path`, creating missing parent directories.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorize_first_appearance() {
        let (codes, names) = factorize(&["b", "a", "b", "c", "a"]);
        assert_eq!(codes, vec![0, 1, 0, 2, 1]);
        assert_eq!(names, vec!["b", "a", "c"]);
    }

    #[test]
    fn column_parsing() {
        assert_eq!("3".parse::<Column>().unwrap(), Column::Index(3));
        assert_eq!("celltype".parse::<Column>().unwrap(), Column::Name("celltype".into()));
    }

    #[test]
    fn float_text_round_trips() {
        for v in [0.1, -1e-300, 1.0 / 3.0, 12345.678] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
