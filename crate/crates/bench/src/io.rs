//! CSV interchange: dataset directories, the raw MSDS layout, score files
//! and loss traces.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is lossless.

use std::fs;
use std::path::{Path, PathBuf};

use mtsad_core::data::{HostTable, LabelTable, MsdsProtocol, MsdsSplit, TimeSeriesDataset};
use mtsad_core::training::StepRecord;
use mtsad_core::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}, line {line}: cannot parse `{field}` as a number")]
    Parse { path: PathBuf, line: u64, field: String },
    #[error("{0}: no header row")]
    NoHeader(PathBuf),
    #[error("train has {train} channels but test has {test}")]
    ChannelMismatch { train: usize, test: usize },
    #[error("{labels} labels for {test} test rows")]
    LabelLength { labels: usize, test: usize },
    #[error("{path}, line {line}: label `{value}` is not 0 or 1")]
    BadLabel { path: PathBuf, line: u64, value: String },
    #[error("{0}: no `timestamp` column")]
    NoTimestamp(PathBuf),
    #[error(transparent)]
    Core(#[from] mtsad_core::Error),
}

pub type LoadResult<T> = std::result::Result<T, LoadError>;

/// Headered numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub values: Matrix,
}

fn open(path: &Path) -> LoadResult<csv::Reader<fs::File>> {
    if !path.is_file() {
        return Err(LoadError::MissingFile(path.to_path_buf()));
    }
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| LoadError::Csv { path: path.to_path_buf(), source })
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn read_table(path: &Path) -> LoadResult<Table> {
    let mut rdr = open(path)?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|source| LoadError::Csv { path: path.to_path_buf(), source })?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() {
        return Err(LoadError::NoHeader(path.to_path_buf()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|source| LoadError::Csv { path: path.to_path_buf(), source })?;
        for field in rec.iter() {
            let v = field.parse::<f64>().map_err(|_| LoadError::Parse {
                path: path.to_path_buf(),
                line: line_of(&rec),
                field: field.to_owned(),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let values = Matrix::from_vec(rows, headers.len(), data)?;
    Ok(Table { headers, values })
}

pub fn read_labels(path: &Path) -> LoadResult<Vec<u8>> {
    let mut rdr = open(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| LoadError::Csv { path: path.to_path_buf(), source })?;
        let field = rec.get(0).unwrap_or("");
        let label = match field.parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ => {
                return Err(LoadError::BadLabel {
                    path: path.to_path_buf(),
                    line: line_of(&rec),
                    value: field.to_owned(),
                })
            }
        };
        out.push(label);
    }
    Ok(out)
}

/// Default column names `c0, c1, ...`.
pub fn channel_names(c: usize) -> Vec<String> {
    (0..c).map(|j| format!("c{j}")).collect()
}

fn writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_table(path: &Path, headers: &[String], m: &Matrix) -> anyhow::Result<()> {
    anyhow::ensure!(headers.len() == m.cols(), "{} headers for {} columns", headers.len(), m.cols());
    let mut w = writer(path)?;
    w.write_record(headers)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

fn write_column<T: ToString>(path: &Path, header: &str, values: &[T]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record([header])?;
    for v in values {
        w.write_record([v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Dataset in the `<root>/<name>/{train,test,labels}.csv` layout, not
/// normalised.
pub fn load_dataset(root: &Path, name: &str) -> LoadResult<TimeSeriesDataset> {
    let dir = root.join(name);
    let train = read_table(&dir.join("train.csv"))?.values;
    let test = read_table(&dir.join("test.csv"))?.values;
    let labels = read_labels(&dir.join("labels.csv"))?;
    if train.cols() != test.cols() {
        return Err(LoadError::ChannelMismatch { train: train.cols(), test: test.cols() });
    }
    if labels.len() != test.rows() {
        return Err(LoadError::LabelLength { labels: labels.len(), test: test.rows() });
    }
    Ok(TimeSeriesDataset::new(name, train, test, labels)?)
}

pub fn save_dataset(root: &Path, ds: &TimeSeriesDataset) -> anyhow::Result<()> {
    let dir = root.join(&ds.name);
    let names = channel_names(ds.channels());
    write_table(&dir.join("train.csv"), &names, &ds.train)?;
    write_table(&dir.join("test.csv"), &names, &ds.test)?;
    write_column(&dir.join("labels.csv"), "label", &ds.test_labels)
}

fn timestamp_table(path: &Path) -> LoadResult<(Option<Vec<i64>>, Vec<String>, Matrix)> {
    let t = read_table(path)?;
    let Some(ts_col) = t.headers.iter().position(|h| h == "timestamp") else {
        return Ok((None, t.headers, t.values));
    };
    let timestamps = t.values.column(ts_col).iter().map(|&v| v as i64).collect();
    let keep: Vec<usize> = (0..t.headers.len()).filter(|&j| j != ts_col).collect();
    let values = Matrix::from_fn(t.values.rows(), keep.len(), |i, k| t.values.get(i, keep[k]));
    let headers = keep.iter().map(|&j| t.headers[j].clone()).collect();
    Ok((Some(timestamps), headers, values))
}

/// Read `<raw>/<host>.csv` for every protocol host plus `<raw>/labels.csv`.
/// Host files need a `timestamp` column; the label file may have one.
pub fn load_msds_raw(raw: &Path, protocol: &MsdsProtocol) -> LoadResult<(Vec<HostTable>, LabelTable)> {
    let mut hosts = Vec::with_capacity(protocol.hosts.len());
    for host in &protocol.hosts {
        let path = raw.join(format!("{host}.csv"));
        let (ts, columns, values) = timestamp_table(&path)?;
        let timestamps = ts.ok_or(LoadError::NoTimestamp(path))?;
        hosts.push(HostTable { host: host.clone(), columns, timestamps, values });
    }
    let (timestamps, _, flags) = timestamp_table(&raw.join("labels.csv"))?;
    Ok((hosts, LabelTable { timestamps, flags }))
}

pub fn load_msds(raw: &Path, protocol: &MsdsProtocol) -> LoadResult<(TimeSeriesDataset, MsdsSplit)> {
    let (hosts, labels) = load_msds_raw(raw, protocol)?;
    Ok(mtsad_core::data::msds_preprocess(&hosts, &labels, protocol)?)
}

/// Single-column score file aligned to the test timesteps.
pub fn write_scores(path: &Path, scores: &[f64]) -> anyhow::Result<()> {
    write_column(path, "score", scores)
}

pub fn read_scores(path: &Path) -> LoadResult<Vec<f64>> {
    let t = read_table(path)?;
    Ok(t.values.column(0))
}

pub const TRACE_HEADER: [&str; 7] = ["step", "total", "rec", "dag", "freq", "lr", "lambda_dag"];

pub fn write_trace(path: &Path, trace: &[StepRecord]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in trace {
        let row = [r.step as f64, r.total, r.rec, r.dag, r.freq, r.lr, r.lambda_dag];
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

/// Serialise `value` as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}
