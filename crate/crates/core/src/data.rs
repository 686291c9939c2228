//! Datasets, standardisation, sliding windows and the MSDS merge protocol.
//!
//! Everything here works on in-memory tables; file parsing lives in the
//! companion bench crate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::matrix::Matrix;

/// Lower bound on a channel's standard deviation. Channels whose train
/// spread falls below it are treated as constant and scaled by 1.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Column means and population standard deviations of `m`.
    pub fn fit(m: &Matrix) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::Empty("train split"));
        }
        let n = m.rows() as f64;
        let mut mean = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = libm::sqrt(v / n);
                if s < STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| (m.get(i, j) - self.mean[j]) / self.std[j])
    }
}

/// A named multichannel series with train/test splits and test labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub train: Matrix,
    pub test: Matrix,
    pub test_labels: Vec<u8>,
    /// Present once the splits have been standardised.
    pub norm: Option<NormStats>,
}

impl TimeSeriesDataset {
    pub fn new(name: impl Into<String>, train: Matrix, test: Matrix, test_labels: Vec<u8>) -> Result<Self> {
        let ds = Self { name: name.into(), train, test, test_labels, norm: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.cols() == 0 {
            return Err(invalid!("dataset `{}` has no channels", self.name));
        }
        if self.train.cols() != self.test.cols() {
            return Err(shape_err!("train has {} channels, test has {}", self.train.cols(), self.test.cols()));
        }
        if self.test_labels.len() != self.test.rows() {
            return Err(shape_err!("{} labels for {} test timesteps", self.test_labels.len(), self.test.rows()));
        }
        if self.test_labels.iter().any(|&l| l > 1) {
            return Err(invalid!("labels must be 0 or 1"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.train.cols()
    }

    pub fn anomaly_ratio(&self) -> f64 {
        if self.test_labels.is_empty() {
            return 0.0;
        }
        self.test_labels.iter().map(|&l| f64::from(l)).sum::<f64>() / self.test_labels.len() as f64
    }
}

/// Standardise both splits with statistics computed on the train split.
pub fn zscore(ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    let stats = NormStats::fit(&ds.train)?;
    Ok(TimeSeriesDataset {
        name: ds.name.clone(),
        train: stats.apply(&ds.train),
        test: stats.apply(&ds.test),
        test_labels: ds.test_labels.clone(),
        norm: Some(stats),
    })
}

/// A batch of sliding windows laid out as `batch × len × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub windows: Vec<f64>,
    pub len: usize,
    pub channels: usize,
    pub start_indices: Vec<usize>,
    pub stride: usize,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.start_indices.len()
    }

    pub fn window(&self, b: usize) -> &[f64] {
        let sz = self.len * self.channels;
        &self.windows[b * sz..(b + 1) * sz]
    }

    /// Sub-batch made of the listed windows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut windows = Vec::with_capacity(idx.len() * self.len * self.channels);
        for &b in idx {
            windows.extend_from_slice(self.window(b));
        }
        Self {
            windows,
            len: self.len,
            channels: self.channels,
            start_indices: idx.iter().map(|&b| self.start_indices[b]).collect(),
            stride: self.stride,
        }
    }
}

/// Cut `split` into windows of `len` rows every `stride` rows.
pub fn make_windows(split: &Matrix, len: usize, stride: usize) -> Result<WindowBatch> {
    if len == 0 || stride == 0 {
        return Err(invalid!("window length and stride must be positive"));
    }
    if split.rows() < len {
        return Err(invalid!("split of {} rows is shorter than window {len}", split.rows()));
    }
    let count = (split.rows() - len) / stride + 1;
    let c = split.cols();
    let mut windows = Vec::with_capacity(count * len * c);
    let mut start_indices = Vec::with_capacity(count);
    for b in 0..count {
        let s = b * stride;
        start_indices.push(s);
        windows.extend_from_slice(&split.as_slice()[s * c..(s + len) * c]);
    }
    Ok(WindowBatch { windows, len, channels: c, start_indices, stride })
}

/// One host's raw metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTable {
    pub host: String,
    pub columns: Vec<String>,
    pub timestamps: Vec<i64>,
    pub values: Matrix,
}

/// Per-timestep anomaly flags, one column per source stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    pub timestamps: Option<Vec<i64>>,
    pub flags: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsdsProtocol {
    pub name: String,
    pub hosts: Vec<String>,
    pub metrics: Vec<String>,
    /// Leading fraction of the merged stream dropped as warm-up transient.
    pub drop_fraction: f64,
}

impl Default for MsdsProtocol {
    fn default() -> Self {
        Self {
            name: "msds".into(),
            hosts: ["wally113", "wally117", "wally122", "wally123", "wally124"]
                .iter()
                .map(|h| String::from(*h))
                .collect(),
            metrics: vec!["cpu.user".into(), "mem.used".into()],
            drop_fraction: 0.10,
        }
    }
}

/// Sizes of each protocol stage, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsdsSplit {
    pub joined: usize,
    pub dropped: usize,
    pub train: usize,
    pub test: usize,
}

fn dedup_host(table: &HostTable, metrics: &[String]) -> Result<BTreeMap<i64, Vec<f64>>> {
    let cols: Vec<usize> = metrics
        .iter()
        .map(|m| {
            table
                .columns
                .iter()
                .position(|c| c == m)
                .ok_or_else(|| Error::MissingColumn { host: table.host.clone(), column: m.clone() })
        })
        .collect::<Result<_>>()?;
    if table.timestamps.len() != table.values.rows() {
        return Err(shape_err!(
            "host `{}`: {} timestamps for {} rows",
            table.host,
            table.timestamps.len(),
            table.values.rows()
        ));
    }
    let mut acc: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &ts) in table.timestamps.iter().enumerate() {
        let row = table.values.row(i);
        let entry = acc.entry(ts).or_insert_with(|| (vec![0.0; cols.len()], 0));
        for (k, &c) in cols.iter().enumerate() {
            entry.0[k] += row[c];
        }
        entry.1 += 1;
    }
    Ok(acc.into_iter().map(|(ts, (sum, n))| (ts, sum.into_iter().map(|v| v / n as f64).collect())).collect())
}

/// Merge per-host MSDS tables into a standardised dataset.
///
/// Per host the configured metric columns are kept and rows sharing a
/// timestamp are averaged; hosts are inner-joined on timestamp (channels
/// ordered host-major); the first `floor(drop_fraction·N)` merged rows are
/// dropped; the remainder is split `floor(M/2)` / `ceil(M/2)` into train and
/// test and z-scored with train statistics. A test timestep is anomalous when
/// any flag column is positive.
///
/// The label table must either carry timestamps (matched against the test
/// rows) or have exactly one row per merged timestep or per test timestep.
pub fn msds_preprocess(
    host_files: &[HostTable],
    labels: &LabelTable,
    protocol: &MsdsProtocol,
) -> Result<(TimeSeriesDataset, MsdsSplit)> {
    if protocol.hosts.is_empty() || protocol.metrics.is_empty() {
        return Err(invalid!("MSDS protocol needs at least one host and one metric"));
    }
    let mut per_host = Vec::with_capacity(protocol.hosts.len());
    for host in &protocol.hosts {
        let table =
            host_files.iter().find(|t| &t.host == host).ok_or_else(|| invalid!("no table for host `{host}`"))?;
        per_host.push(dedup_host(table, &protocol.metrics)?);
    }

    let width = protocol.hosts.len() * protocol.metrics.len();
    let mut timestamps = Vec::new();
    let mut merged = Vec::new();
    'rows: for (ts, first) in &per_host[0] {
        let mut row = Vec::with_capacity(width);
        row.extend_from_slice(first);
        for other in &per_host[1..] {
            match other.get(ts) {
                Some(vals) => row.extend_from_slice(vals),
                None => continue 'rows,
            }
        }
        timestamps.push(*ts);
        merged.extend(row);
    }
    let joined = timestamps.len();
    if joined == 0 {
        return Err(Error::EmptyJoin);
    }

    let dropped = libm::floor(protocol.drop_fraction * joined as f64) as usize;
    let remaining = joined - dropped;
    let n_train = remaining / 2;
    let n_test = remaining - n_train;
    if n_train == 0 || n_test == 0 {
        return Err(invalid!("only {remaining} rows remain after dropping {dropped}"));
    }
    let train_start = dropped;
    let test_start = dropped + n_train;
    let train = Matrix::from_vec(n_train, width, merged[train_start * width..test_start * width].to_vec())?;
    let test = Matrix::from_vec(n_test, width, merged[test_start * width..].to_vec())?;
    let test_ts = &timestamps[test_start..];

    let flag_rows: Vec<usize> = match &labels.timestamps {
        Some(label_ts) => {
            if label_ts.len() != labels.flags.rows() {
                return Err(Error::LabelMisalignment(format!(
                    "{} label timestamps for {} flag rows",
                    label_ts.len(),
                    labels.flags.rows()
                )));
            }
            let index: BTreeMap<i64, usize> = label_ts.iter().enumerate().map(|(i, &t)| (t, i)).collect();
            test_ts
                .iter()
                .map(|t| {
                    index
                        .get(t)
                        .copied()
                        .ok_or_else(|| Error::LabelMisalignment(format!("no label row for timestamp {t}")))
                })
                .collect::<Result<_>>()?
        }
        None if labels.flags.rows() == joined => (test_start..joined).collect(),
        None if labels.flags.rows() == n_test => (0..n_test).collect(),
        None => {
            return Err(Error::LabelMisalignment(format!(
                "{} label rows; expected {joined} (merged) or {n_test} (test)",
                labels.flags.rows()
            )))
        }
    };
    let test_labels = flag_rows.into_iter().map(|r| u8::from(labels.flags.row(r).iter().any(|&f| f > 0.0))).collect();

    let raw = TimeSeriesDataset::new(protocol.name.clone(), train, test, test_labels)?;
    let ds = zscore(&raw)?;
    Ok((ds, MsdsSplit { joined, dropped, train: n_train, test: n_test }))
}
