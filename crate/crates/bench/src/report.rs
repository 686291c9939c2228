//! Tables rendered from persisted reports.

use std::fs;
use std::path::{Path, PathBuf};

use mtsad_core::perturb::Family;

use crate::io;
use crate::run::{EffectivenessReport, EfficiencyReport, RobustnessReport, TransferReport};

/// Displayed precision of every score.
pub const DECIMALS: usize = 3;

const MISSING: &str = "n/a";

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn to_markdown(&self) -> String {
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let mut s = line(&self.headers);
        s.push_str(&line(&vec!["---".to_string(); self.headers.len()]));
        for r in &self.rows {
            s.push_str(&line(r));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.name));
        let md = dir.join(format!("{}.md", self.name));
        fs::write(&csv, self.to_csv()?)?;
        fs::write(&md, self.to_markdown())?;
        Ok(vec![csv, md])
    }
}

fn round(v: f64) -> i64 {
    (v * 10f64.powi(DECIMALS as i32)).round() as i64
}

/// Competition ranks (1, 2, 2, 4, ...) by descending value at displayed
/// precision; missing values are unranked.
pub fn competition_ranks(values: &[Option<f64>]) -> Vec<Option<usize>> {
    values
        .iter()
        .map(|v| {
            let v = round((*v)?);
            Some(1 + values.iter().flatten().filter(|&&o| round(o) > v).count())
        })
        .collect()
}

pub fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.into(), |v| format!("{v:.DECIMALS$}"))
}

/// `mean ± std` at displayed precision.
pub fn fmt_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.DECIMALS$} ± {std:.DECIMALS$}")
}

fn fmt_rank(r: Option<usize>) -> String {
    r.map_or_else(|| MISSING.into(), |r| r.to_string())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Methods by datasets of VUS-ROC mean ± std over seeds, with the
/// across-dataset average and its rank.
pub fn main_table(r: &EffectivenessReport) -> Table {
    let mut headers = vec!["Method".to_string()];
    headers.extend(r.datasets.iter().cloned());
    headers.extend(["Avg".into(), "Rank".into()]);
    let mut avgs = Vec::new();
    let mut rows = Vec::new();
    for m in &r.methods {
        let mut row = vec![m.clone()];
        let mut means = Vec::new();
        for d in &r.datasets {
            match r.aggregates.iter().find(|a| &a.method == m && &a.dataset == d).and_then(|a| a.aggregate.as_ref()) {
                Some(a) => {
                    means.push(a.mean.vus_roc);
                    row.push(fmt_mean_std(a.mean.vus_roc, a.std.vus_roc));
                }
                None => row.push(MISSING.into()),
            }
        }
        let avg = (means.len() == r.datasets.len() && !means.is_empty()).then(|| mean(&means));
        row.push(fmt_value(avg));
        avgs.push(avg);
        rows.push(row);
    }
    for (row, rank) in rows.iter_mut().zip(competition_ranks(&avgs)) {
        row.push(fmt_rank(rank));
    }
    Table { name: "main".into(), headers, rows }
}

/// Every metric for every (method, dataset), mean ± std over seeds.
pub fn metrics_table(r: &EffectivenessReport) -> Table {
    let mut headers = vec!["Method".to_string(), "Dataset".to_string()];
    headers.extend(mtsad_core::metrics::MetricValues::NAMES.iter().map(|s| s.to_string()));
    let rows = r
        .aggregates
        .iter()
        .map(|a| {
            let mut row = vec![a.method.clone(), a.dataset.clone()];
            match &a.aggregate {
                Some(agg) => {
                    let (m, s) = (agg.mean.to_array(), agg.std.to_array());
                    row.extend((0..6).map(|k| fmt_mean_std(m[k], s[k])));
                }
                None => row.extend((0..6).map(|_| MISSING.to_string())),
            }
            row
        })
        .collect();
    Table { name: "metrics".into(), headers, rows }
}

pub fn robustness_table(r: &RobustnessReport) -> Table {
    let mut headers = vec!["Method".to_string(), "Base".to_string()];
    headers.extend(Family::ALL.iter().map(|f| capitalise(f.name())));
    headers.extend(["Avg".into(), "Rank".into()]);
    headers.extend(Family::ALL.iter().map(|f| format!("Ret. {}", capitalise(f.name()))));
    let avgs: Vec<Option<f64>> = r.rows.iter().map(|row| row.summary.as_ref().map(|s| s.avg.mean)).collect();
    let ranks = competition_ranks(&avgs);
    let rows = r
        .rows
        .iter()
        .zip(ranks)
        .map(|(row, rank)| {
            let mut out = vec![row.method.clone()];
            match &row.summary {
                Some(s) => {
                    out.push(fmt_mean_std(s.base.mean, s.base.std));
                    let fam = |f: Family| s.families.iter().find(|x| x.family == f);
                    for f in Family::ALL {
                        out.push(
                            fam(f).map_or_else(|| MISSING.into(), |x| fmt_mean_std(x.vus_roc.mean, x.vus_roc.std)),
                        );
                    }
                    out.push(fmt_mean_std(s.avg.mean, s.avg.std));
                    out.push(fmt_rank(rank));
                    for f in Family::ALL {
                        out.push(fmt_value(fam(f).map(|x| x.retention)));
                    }
                }
                None => out.extend((0..9).map(|_| MISSING.to_string())),
            }
            out
        })
        .collect();
    Table { name: "robustness".into(), headers, rows }
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// One source-by-target VUS-ROC table per method plus a summary.
pub fn transfer_tables(r: &TransferReport) -> Vec<Table> {
    let mut tables = Vec::new();
    let mut summary = Vec::new();
    for m in &r.matrices {
        let mut headers = vec!["Source \\ Target".to_string()];
        headers.extend(m.datasets.iter().cloned());
        let rows = (0..m.datasets.len())
            .map(|s| {
                let mut row = vec![m.datasets[s].clone()];
                row.extend((0..m.datasets.len()).map(|t| fmt_value(m.cell(s, t).metrics.map(|x| x.vus_roc))));
                row
            })
            .collect();
        tables.push(Table { name: format!("transfer_{}", m.method), headers, rows });
        let ratio = m.diagonal_mean.zip(m.off_diagonal_mean).map(|(d, o)| o / d);
        summary.push(vec![
            m.method.clone(),
            m.policy.name().to_string(),
            fmt_value(m.diagonal_mean),
            fmt_value(m.off_diagonal_mean),
            fmt_value(ratio),
        ]);
    }
    let headers = ["Method", "Policy", "Diagonal", "Off-diagonal", "Off/Diag"].map(String::from).to_vec();
    tables.push(Table { name: "transfer_summary".into(), headers, rows: summary });
    tables
}

pub fn efficiency_table(r: &EfficiencyReport) -> Table {
    let headers = ["Method", "Params", "Params (M)", "Train (samples/s)", "Inference (ms/sample)", "Peak RSS (MB)"]
        .map(String::from)
        .to_vec();
    let rows = r
        .records
        .iter()
        .map(|e| {
            vec![
                e.method.clone(),
                e.params.map_or_else(|| MISSING.into(), |p| p.to_string()),
                e.params.map_or_else(|| MISSING.into(), |p| format!("{:.2}", p as f64 / 1e6)),
                e.train_samples_per_sec.map_or_else(|| MISSING.into(), |v| format!("{v:.1}")),
                e.inference_ms_per_sample.map_or_else(|| MISSING.into(), |v| format!("{v:.4}")),
                e.peak_rss_mb.map_or_else(|| MISSING.into(), |v| format!("{v:.1}")),
            ]
        })
        .collect();
    Table { name: "efficiency".into(), headers, rows }
}

/// Render tables for every report present under `run_dir/reports`.
pub fn emit_tables(run_dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let reports = run_dir.join("reports");
    let tables_dir = run_dir.join("tables");
    let mut tables = Vec::new();
    let eff = reports.join("effectiveness.json");
    if eff.is_file() {
        let r: EffectivenessReport = io::read_json(&eff)?;
        tables.push(main_table(&r));
        tables.push(metrics_table(&r));
    }
    let rob = reports.join("robustness.json");
    if rob.is_file() {
        tables.push(robustness_table(&io::read_json(&rob)?));
    }
    let tr = reports.join("transfer.json");
    if tr.is_file() {
        tables.extend(transfer_tables(&io::read_json(&tr)?));
    }
    let ef = reports.join("efficiency.json");
    if ef.is_file() {
        tables.push(efficiency_table(&io::read_json(&ef)?));
    }
    anyhow::ensure!(!tables.is_empty(), "no reports under {}", reports.display());
    let mut written = Vec::new();
    for t in tables {
        written.extend(t.write(&tables_dir)?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_share_ties() {
        assert_eq!(competition_ranks(&[Some(0.675), Some(0.624), Some(0.624)]), [Some(1), Some(2), Some(2)]);
        assert_eq!(competition_ranks(&[Some(0.5)]), [Some(1)]);
        assert_eq!(
            competition_ranks(&[Some(0.6241), Some(0.6239), None, Some(0.7)]),
            [Some(2), Some(2), None, Some(1)]
        );
    }

    #[test]
    fn formatting() {
        assert_eq!(fmt_mean_std(0.67549, 0.0121), "0.675 ± 0.012");
        assert_eq!(fmt_value(None), "n/a");
        let t = Table {
            name: "t".into(),
            headers: vec!["a".into(), "b".into()],
            rows: vec![vec!["1".into(), "x, y".into()]],
        };
        assert_eq!(t.to_markdown(), "| a | b |\n| --- | --- |\n| 1 | x, y |\n");
        assert_eq!(t.to_csv().unwrap(), "a,b\n1,\"x, y\"\n");
        assert_eq!(capitalise("dropout"), "Dropout");
    }
}
