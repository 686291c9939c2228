//! Grid orchestration: effectiveness, robustness, transfer and efficiency.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context};
use mtsad_core::ccg::{project_scores, CcgConfig, CcgModel, LinearAr};
use mtsad_core::data::{make_windows, zscore, TimeSeriesDataset, WindowBatch};
use mtsad_core::metrics::{aggregate_seeds, evaluate, MetricReport, MetricValues, ScoredSeries, SeedAggregate};
use mtsad_core::perturb::{robustness_suite, RobustnessPlan, RobustnessSummary};
use mtsad_core::synth::{self, SynthConfig};
use mtsad_core::training::{self, StepRecord, TrainConfig};
use mtsad_core::Matrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{digest, CheckpointCache, Trained};
use crate::config::{BenchConfig, DatasetSource, DatasetSpec, Method, PolicyKind};
use crate::io;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Blocks re-initialised by the adapt policy on top of the channel-shaped
/// ones: the channel-token embedding.
pub const ADAPT_REINIT: [&str; 2] = ["chan.embed.w", "chan.embed.b"];

pub const WARMUP_STEPS: usize = 5;
pub const MEASURED_STEPS: usize = 30;
pub const EFFICIENCY_BATCH: usize = 64;
pub const EFFICIENCY_WINDOW: usize = 100;
pub const EFFICIENCY_CHANNELS: usize = 38;

/// A standardised dataset ready for training and scoring.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub data: TimeSeriesDataset,
    pub train_stride: usize,
    /// Digest of the standardised contents.
    pub fingerprint: String,
}

fn fingerprint(ds: &TimeSeriesDataset) -> String {
    let mut h = Sha256::new();
    for m in [&ds.train, &ds.test] {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(&ds.test_labels);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_spec(cfg: &BenchConfig, spec: &DatasetSpec) -> anyhow::Result<TimeSeriesDataset> {
    let ds = match &spec.source {
        DatasetSource::Dir { root } => {
            let root = cfg.resolve_path(root.as_deref().unwrap_or(Path::new("")));
            zscore(&io::load_dataset(&root, &spec.name)?)?
        }
        DatasetSource::Synthetic { synth } => {
            let mut ds = zscore(&synth::generate(synth)?)?;
            ds.name.clone_from(&spec.name);
            ds
        }
        DatasetSource::Msds { raw, protocol } => {
            let raw = cfg.resolve_path(raw.as_deref().unwrap_or(Path::new("msds/raw")));
            let protocol = mtsad_core::data::MsdsProtocol { name: spec.name.clone(), ..protocol.clone() };
            io::load_msds(&raw, &protocol)?.0
        }
    };
    Ok(ds)
}

/// Outcome of one (method, dataset, seed) effectiveness cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub dataset: String,
    /// Present only when every seed succeeded.
    pub aggregate: Option<SeedAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessReport {
    pub code_version: String,
    pub run_id: String,
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellRecord>,
    pub aggregates: Vec<AggregateRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub method: String,
    pub summary: Option<RobustnessSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub code_version: String,
    pub run_id: String,
    pub datasets: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<RobustnessRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    pub metrics: Option<MetricValues>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub method: String,
    pub policy: PolicyKind,
    pub datasets: Vec<String>,
    /// Row-major, sources by targets.
    pub cells: Vec<TransferCell>,
    pub diagonal_mean: Option<f64>,
    pub off_diagonal_mean: Option<f64>,
}

impl TransferMatrix {
    pub fn cell(&self, source: usize, target: usize) -> &TransferCell {
        &self.cells[source * self.datasets.len() + target]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub code_version: String,
    pub run_id: String,
    pub seed: u64,
    pub matrices: Vec<TransferMatrix>,
    /// Methods without a transfer policy, with the reason.
    pub skipped: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub warmup_steps: usize,
    pub measured_steps: usize,
    pub seconds: f64,
}

impl Timing {
    pub fn throughput(&self, batch: usize) -> f64 {
        (batch * self.measured_steps) as f64 / self.seconds
    }

    pub fn ms_per_sample(&self, batch: usize) -> f64 {
        1e3 * self.seconds / (batch * self.measured_steps) as f64
    }
}

/// Run `step` `warmup` times untimed, then `steps` times timed.
pub fn measure(warmup: usize, steps: usize, mut step: impl FnMut() -> anyhow::Result<()>) -> anyhow::Result<Timing> {
    for _ in 0..warmup {
        step()?;
    }
    let start = Instant::now();
    for _ in 0..steps {
        step()?;
    }
    Ok(Timing { warmup_steps: warmup, measured_steps: steps, seconds: start.elapsed().as_secs_f64() })
}

/// Peak resident set size in MiB, where the platform reports it.
pub fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRecord {
    pub method: String,
    pub params: Option<usize>,
    pub train: Option<Timing>,
    pub inference: Option<Timing>,
    pub train_samples_per_sec: Option<f64>,
    pub inference_ms_per_sample: Option<f64>,
    /// Process-wide high-water mark after this method ran; informative only.
    pub peak_rss_mb: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub code_version: String,
    pub run_id: String,
    pub batch: usize,
    pub window: usize,
    pub channels: usize,
    pub records: Vec<EfficiencyRecord>,
}

/// Result of a verb plus the number of failed cells.
#[derive(Debug, Clone)]
pub struct Outcome<R> {
    pub report: R,
    pub failures: usize,
}

/// Zero-pad or truncate `m` to `channels` columns.
pub fn pad_channels(m: &Matrix, channels: usize) -> Matrix {
    Matrix::from_fn(m.rows(), channels, |i, j| if j < m.cols() { m.get(i, j) } else { 0.0 })
}

fn cell_name(method: &str, dataset: &str, seed: u64) -> String {
    format!("{method}__{dataset}__seed{seed}")
}

fn seed_from(parts: &impl Serialize) -> u64 {
    let d = digest(parts);
    u64::from_str_radix(&d[..16], 16).expect("hex digest")
}

pub struct Bench {
    pub cfg: BenchConfig,
    pub run_dir: PathBuf,
    pub cache: CheckpointCache,
    datasets: Vec<(String, Result<LoadedDataset, String>)>,
    methods: Vec<(String, Method)>,
    pool: rayon::ThreadPool,
    trained: AtomicUsize,
    reused: AtomicUsize,
}

impl Bench {
    /// Validate `cfg`, load every dataset and write the config snapshot.
    pub fn new(cfg: BenchConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let run_dir = cfg.out.join(cfg.run_id());
        std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
        io::write_json(&run_dir.join("config.json"), &cfg)?;
        let cache = CheckpointCache::new(cfg.out.join("checkpoints"));
        let datasets = cfg
            .datasets
            .iter()
            .map(|spec| {
                let loaded = load_spec(&cfg, spec)
                    .map(|data| LoadedDataset {
                        fingerprint: fingerprint(&data),
                        data,
                        train_stride: cfg.train_stride(spec),
                    })
                    .map_err(|e| format!("{e:#}"));
                if let Err(e) = &loaded {
                    log::error!("dataset `{}`: {e}", spec.name);
                }
                (spec.name.clone(), loaded)
            })
            .collect();
        let methods = cfg.methods.iter().map(|m| Ok((m.name.clone(), m.resolve()?))).collect::<anyhow::Result<_>>()?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
        Ok(Self {
            cfg,
            run_dir,
            cache,
            datasets,
            methods,
            pool,
            trained: AtomicUsize::new(0),
            reused: AtomicUsize::new(0),
        })
    }

    /// Models trained and checkpoints reused so far by this instance.
    pub fn training_counts(&self) -> (usize, usize) {
        (self.trained.load(Ordering::SeqCst), self.reused.load(Ordering::SeqCst))
    }

    pub fn dataset(&self, name: &str) -> anyhow::Result<&LoadedDataset> {
        let (_, d) = self.datasets.iter().find(|(n, _)| n == name).ok_or_else(|| anyhow!("no dataset `{name}`"))?;
        d.as_ref().map_err(|e| anyhow!("dataset `{name}` failed to load: {e}"))
    }

    fn method(&self, name: &str) -> &Method {
        &self.methods.iter().find(|(n, _)| n == name).expect("validated method").1
    }

    fn model_key(&self, method: &Method, ds: &LoadedDataset, seed: u64) -> String {
        let identity = match method {
            Method::Ccg { config, train, .. } => serde_json::json!({ "ccg": config, "train": train }),
            Method::LinearAr { order, .. } => serde_json::json!({ "linear_ar": order }),
            _ => serde_json::Value::Null,
        };
        digest(&serde_json::json!({
            "version": CODE_VERSION,
            "model": identity,
            "dataset": ds.data.name,
            "data": ds.fingerprint,
            "window": self.cfg.window,
            "stride": ds.train_stride,
            "seed": seed,
        }))
    }

    fn fit(&self, method: &Method, ds: &LoadedDataset, seed: u64) -> anyhow::Result<(Trained, Vec<StepRecord>)> {
        match method {
            Method::Ccg { config, train, .. } => {
                let windows = make_windows(&ds.data.train, self.cfg.window, ds.train_stride)?;
                let mut model = CcgModel::new(config.clone(), self.cfg.window, ds.data.channels(), seed)?;
                let trace = training::train(&mut model, &windows, &TrainConfig { seed, ..train.clone() }, None)?;
                Ok((Trained::Ccg(model), trace))
            }
            Method::LinearAr { order, .. } => {
                Ok((Trained::LinearAr(LinearAr::fit(&ds.data.train, *order)?), Vec::new()))
            }
            _ => bail!("method is not trainable"),
        }
    }

    /// Trained model for the cell, from the checkpoint cache when present.
    pub fn model(&self, method_name: &str, dataset: &str, seed: u64) -> anyhow::Result<Trained> {
        let method = self.method(method_name);
        let ds = self.dataset(dataset)?;
        let key = self.model_key(method, ds, seed);
        let model = match self.cache.get(&key) {
            Some(m) => {
                self.reused.fetch_add(1, Ordering::SeqCst);
                m
            }
            None => {
                log::info!("training {method_name} on {dataset}, seed {seed}");
                let (m, trace) = self.fit(method, ds, seed)?;
                if !trace.is_empty() {
                    io::write_trace(&self.cache.trace_path(&key), &trace)?;
                }
                self.cache.put(&key, &m)?;
                self.trained.fetch_add(1, Ordering::SeqCst);
                m
            }
        };
        let trace = self.cache.trace_path(&key);
        if trace.is_file() {
            let dst = self.run_dir.join("traces").join(format!("{}.csv", cell_name(method_name, dataset, seed)));
            std::fs::create_dir_all(dst.parent().unwrap())?;
            std::fs::copy(trace, dst)?;
        }
        Ok(model)
    }

    fn ccg_scores(&self, model: &CcgModel, test: &Matrix) -> anyhow::Result<Vec<f64>> {
        let w = make_windows(test, model.params.window, self.cfg.strides.test)?;
        let s = model.score_windows(&w, self.cfg.score_chunk)?;
        Ok(project_scores(
            &s,
            &w.start_indices,
            test.rows(),
            model.config.score_projection,
            model.config.smooth_window,
        )?)
    }

    /// Score `test` with a fitted model; `context` supplies history for
    /// autoregressive models.
    pub fn score_with(&self, model: &Trained, context: &Matrix, test: &Matrix) -> anyhow::Result<Vec<f64>> {
        match model {
            Trained::Ccg(m) => self.ccg_scores(m, test),
            Trained::LinearAr(m) => Ok(m.score(context, test)?),
        }
    }

    fn untrained_scores(&self, method: &Method, dataset: &str, seed: u64, test: &Matrix) -> anyhow::Result<Vec<f64>> {
        match method {
            Method::Constant { value } => Ok(vec![*value; test.rows()]),
            Method::ScoreFile { template } => {
                let path = template.replace("{dataset}", dataset).replace("{seed}", &seed.to_string());
                let scores = io::read_scores(&self.cfg.resolve_path(Path::new(&path)))?;
                ensure!(scores.len() == test.rows(), "{} scores for {} test rows", scores.len(), test.rows());
                Ok(scores)
            }
            _ => bail!("method needs a trained model"),
        }
    }

    fn effectiveness_cell(&self, method_name: &str, dataset: &str, seed: u64) -> anyhow::Result<MetricReport> {
        let method = self.method(method_name);
        let ds = self.dataset(dataset)?;
        let scores = if method.trainable() {
            let model = self.model(method_name, dataset, seed)?;
            self.score_with(&model, &ds.data.train, &ds.data.test)?
        } else {
            self.untrained_scores(method, dataset, seed, &ds.data.test)?
        };
        ensure!(scores.iter().all(|s| s.is_finite()), "non-finite scores");
        io::write_scores(
            &self.run_dir.join("scores").join(format!("{}.csv", cell_name(method_name, dataset, seed))),
            &scores,
        )?;
        let series = ScoredSeries::new(scores, ds.data.test_labels.clone())?;
        Ok(evaluate(method_name, dataset, seed, &series, &self.cfg.metrics)?)
    }

    pub fn effectiveness(&self) -> anyhow::Result<Outcome<EffectivenessReport>> {
        let mut grid = Vec::new();
        for (m, _) in &self.methods {
            for (d, _) in &self.datasets {
                for &s in &self.cfg.seeds {
                    grid.push((m.as_str(), d.as_str(), s));
                }
            }
        }
        let cells: Vec<CellRecord> = self.pool.install(|| {
            grid.par_iter()
                .map(|&(m, d, s)| {
                    let res = self.effectiveness_cell(m, d, s);
                    if let Err(e) = &res {
                        log::error!("{m} / {d} / seed {s}: {e:#}");
                    }
                    let (report, error) = match res {
                        Ok(r) => (Some(r), None),
                        Err(e) => (None, Some(format!("{e:#}"))),
                    };
                    CellRecord { method: m.into(), dataset: d.into(), seed: s, report, error }
                })
                .collect()
        });
        for c in &cells {
            let path = self
                .run_dir
                .join("reports/effectiveness")
                .join(format!("{}.json", cell_name(&c.method, &c.dataset, c.seed)));
            io::write_json(&path, c)?;
        }
        let mut aggregates = Vec::new();
        for (m, _) in &self.methods {
            for (d, _) in &self.datasets {
                let group: Vec<&CellRecord> = cells.iter().filter(|c| &c.method == m && &c.dataset == d).collect();
                let reports: Option<Vec<MetricReport>> = group.iter().map(|c| c.report.clone()).collect();
                let aggregate = reports.map(|r| aggregate_seeds(&r)).transpose()?;
                aggregates.push(AggregateRow { method: m.clone(), dataset: d.clone(), aggregate });
            }
        }
        let failures = cells.iter().filter(|c| c.error.is_some()).count();
        let report = EffectivenessReport {
            code_version: CODE_VERSION.into(),
            run_id: self.cfg.run_id(),
            methods: self.methods.iter().map(|(n, _)| n.clone()).collect(),
            datasets: self.datasets.iter().map(|(n, _)| n.clone()).collect(),
            seeds: self.cfg.seeds.clone(),
            cells,
            aggregates,
        };
        io::write_json(&self.run_dir.join("reports/effectiveness.json"), &report)?;
        Ok(Outcome { report, failures })
    }

    fn loaded(&self) -> Vec<&LoadedDataset> {
        self.datasets.iter().filter_map(|(_, d)| d.as_ref().ok()).collect()
    }

    fn robustness_row(&self, method_name: &str) -> anyhow::Result<RobustnessSummary> {
        let method = self.method(method_name);
        ensure!(!matches!(method, Method::ScoreFile { .. }), "score files cannot be recomputed on perturbed input");
        let loaded = self.loaded();
        ensure!(loaded.len() == self.datasets.len(), "some datasets failed to load");
        let mut models = BTreeMap::new();
        if method.trainable() {
            for ds in &loaded {
                for &seed in &self.cfg.seeds {
                    models.insert((ds.data.name.clone(), seed), self.model(method_name, &ds.data.name, seed)?);
                }
            }
        }
        let plan = RobustnessPlan {
            strengths: self.cfg.robustness.strengths.clone(),
            seeds: self.cfg.seeds.clone(),
            vus_buffer: self.cfg.metrics.vus_buffer,
            shift_mode: self.cfg.robustness.shift_mode,
        };
        let datasets: Vec<TimeSeriesDataset> = loaded.iter().map(|d| d.data.clone()).collect();
        let detector = |seed: u64, ds: &TimeSeriesDataset, test: &Matrix| -> mtsad_core::Result<Vec<f64>> {
            let res = match models.get(&(ds.name.clone(), seed)) {
                Some(m) => self.score_with(m, &ds.train, test),
                None => self.untrained_scores(method, &ds.name, seed, test),
            };
            res.map_err(|e| mtsad_core::Error::InvalidArgument(format!("{e:#}")))
        };
        Ok(robustness_suite(detector, &datasets, &plan)?)
    }

    pub fn robustness(&self) -> anyhow::Result<Outcome<RobustnessReport>> {
        let rows: Vec<RobustnessRow> = self.pool.install(|| {
            self.methods
                .par_iter()
                .map(|(m, _)| match self.robustness_row(m) {
                    Ok(s) => RobustnessRow { method: m.clone(), summary: Some(s), error: None },
                    Err(e) => {
                        log::error!("robustness {m}: {e:#}");
                        RobustnessRow { method: m.clone(), summary: None, error: Some(format!("{e:#}")) }
                    }
                })
                .collect()
        });
        for r in &rows {
            io::write_json(&self.run_dir.join("reports/robustness").join(format!("{}.json", r.method)), r)?;
        }
        let failures = rows.iter().filter(|r| r.error.is_some()).count();
        let report = RobustnessReport {
            code_version: CODE_VERSION.into(),
            run_id: self.cfg.run_id(),
            datasets: self.datasets.iter().map(|(n, _)| n.clone()).collect(),
            seeds: self.cfg.seeds.clone(),
            rows,
        };
        io::write_json(&self.run_dir.join("reports/robustness.json"), &report)?;
        Ok(Outcome { report, failures })
    }

    /// Fine-tune the channel-facing blocks of `source` on `target`.
    pub fn adapt(
        &self,
        source: &CcgModel,
        train: &TrainConfig,
        target: &LoadedDataset,
        seed: u64,
    ) -> anyhow::Result<CcgModel> {
        let adapt_seed = seed_from(&(seed, &target.data.name, &target.fingerprint));
        let params = source.params.adapt_channels(&source.config, target.data.channels(), &ADAPT_REINIT, adapt_seed)?;
        let frozen: Vec<bool> =
            params.blocks.iter().map(|b| !(b.channel_dependent || ADAPT_REINIT.contains(&b.name.as_str()))).collect();
        let mut model = CcgModel { config: source.config.clone(), params };
        let windows = make_windows(&target.data.train, self.cfg.window, target.train_stride)?;
        let tc = TrainConfig { epochs: 1, seed: adapt_seed, ..train.clone() };
        training::train(&mut model, &windows, &tc, Some(&frozen))?;
        Ok(model)
    }

    fn transfer_scores(&self, method_name: &str, source: &str, target: &str, seed: u64) -> anyhow::Result<Vec<f64>> {
        let method = self.method(method_name);
        let policy = method.policy().ok_or_else(|| anyhow!("method has no transfer policy"))?;
        let tgt = self.dataset(target)?;
        let model = self.model(method_name, source, seed)?;
        let (train, test) = (&tgt.data.train, &tgt.data.test);
        if source == target {
            return self.score_with(&model, train, test);
        }
        let cs = model.channels();
        match (policy, &model, method) {
            (PolicyKind::Native, Trained::LinearAr(m), _) => {
                let m = if m.channels() == tgt.data.channels() { m.clone() } else { m.pooled(tgt.data.channels()) };
                Ok(m.score(train, test)?)
            }
            (PolicyKind::Pad, _, _) => self.score_with(&model, &pad_channels(train, cs), &pad_channels(test, cs)),
            (PolicyKind::Adapt, Trained::Ccg(m), Method::Ccg { train: tc, .. }) => {
                let adapted = self.adapt(m, tc, tgt, seed)?;
                self.ccg_scores(&adapted, test)
            }
            (p, _, _) => bail!("policy `{}` does not apply to this method", p.name()),
        }
    }

    pub fn transfer(&self) -> anyhow::Result<Outcome<TransferReport>> {
        let seed = self.cfg.transfer_seed;
        let names: Vec<String> = self.datasets.iter().map(|(n, _)| n.clone()).collect();
        let mut skipped = Vec::new();
        let mut jobs = Vec::new();
        for (m, method) in &self.methods {
            if method.policy().is_none() {
                skipped.push((m.clone(), "no channel-adaptation policy for this method kind".to_string()));
                continue;
            }
            for s in &names {
                for t in &names {
                    jobs.push((m.as_str(), s.as_str(), t.as_str()));
                }
            }
        }
        // Source models first, so parallel cells never race to train the same one.
        let sources: Vec<(&str, &str)> = jobs.iter().filter(|(_, s, t)| s == t).map(|&(m, s, _)| (m, s)).collect();
        self.pool.install(|| {
            sources.par_iter().for_each(|&(m, s)| {
                if let Err(e) = self.model(m, s, seed) {
                    log::error!("transfer source {m} / {s}: {e:#}");
                }
            })
        });
        let cells: Vec<(String, TransferCell)> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(m, s, t)| {
                    let res = self.transfer_scores(m, s, t, seed).and_then(|scores| {
                        let ds = self.dataset(t)?;
                        let series = ScoredSeries::new(scores, ds.data.test_labels.clone())?;
                        Ok(evaluate(m, t, seed, &series, &self.cfg.metrics)?.metrics)
                    });
                    let (metrics, error) = match res {
                        Ok(v) => (Some(v), None),
                        Err(e) => {
                            log::error!("transfer {m}: {s} -> {t}: {e:#}");
                            (None, Some(format!("{e:#}")))
                        }
                    };
                    (m.to_string(), TransferCell { source: s.into(), target: t.into(), metrics, error })
                })
                .collect()
        });
        let mut matrices = Vec::new();
        for (m, method) in &self.methods {
            let Some(policy) = method.policy() else { continue };
            let cells: Vec<TransferCell> = cells.iter().filter(|(n, _)| n == m).map(|(_, c)| c.clone()).collect();
            let mean = |diag: bool| -> Option<f64> {
                let v: Option<Vec<f64>> = cells
                    .iter()
                    .filter(|c| (c.source == c.target) == diag)
                    .map(|c| c.metrics.map(|x| x.vus_roc))
                    .collect();
                v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
            };
            matrices.push(TransferMatrix {
                method: m.clone(),
                policy,
                datasets: names.clone(),
                diagonal_mean: mean(true),
                off_diagonal_mean: mean(false),
                cells,
            });
        }
        let failures = matrices.iter().flat_map(|m| &m.cells).filter(|c| c.error.is_some()).count();
        let report =
            TransferReport { code_version: CODE_VERSION.into(), run_id: self.cfg.run_id(), seed, matrices, skipped };
        io::write_json(&self.run_dir.join("reports/transfer.json"), &report)?;
        Ok(Outcome { report, failures })
    }

    fn efficiency_record(&self, name: &str, method: &Method, batch: &WindowBatch) -> anyhow::Result<EfficiencyRecord> {
        let (t, c, b) = (batch.len, batch.channels, batch.batch_size());
        let mut rec = EfficiencyRecord {
            method: name.into(),
            params: None,
            train: None,
            inference: None,
            train_samples_per_sec: None,
            inference_ms_per_sample: None,
            peak_rss_mb: None,
            notes: Vec::new(),
        };
        match method {
            Method::Ccg { config, train, .. } => {
                let mut model = CcgModel::new(config.clone(), t, c, 0)?;
                rec.params = Some(model.param_count());
                let tc = TrainConfig { epochs: 1, batch_size: b, seed: 0, ..train.clone() };
                let timing = measure(WARMUP_STEPS, MEASURED_STEPS, || {
                    training::train(&mut model, batch, &tc, None)?;
                    Ok(())
                })?;
                rec.train = Some(timing);
                rec.inference = Some(measure(WARMUP_STEPS, MEASURED_STEPS, || {
                    model.score_windows(batch, b)?;
                    Ok(())
                })?);
            }
            Method::LinearAr { order, .. } => {
                let stacked = Matrix::from_vec(b * t, c, batch.windows.clone())?;
                let mut model = LinearAr::fit(&stacked, *order)?;
                rec.params = Some(model.param_count());
                rec.train = Some(measure(WARMUP_STEPS, MEASURED_STEPS, || {
                    model = LinearAr::fit(&stacked, *order)?;
                    Ok(())
                })?);
                let windows: Vec<Matrix> =
                    (0..b).map(|i| Matrix::from_vec(t, c, batch.window(i).to_vec())).collect::<Result<_, _>>()?;
                rec.inference = Some(measure(WARMUP_STEPS, MEASURED_STEPS, || {
                    for w in &windows {
                        model.score(w, w)?;
                    }
                    Ok(())
                })?);
            }
            Method::Constant { .. } => {
                rec.params = Some(0);
                rec.notes.push("no training or inference cost to measure".into());
            }
            Method::ScoreFile { .. } => rec.notes.push("precomputed scores: nothing to measure".into()),
        }
        rec.train_samples_per_sec = rec.train.map(|t| t.throughput(b));
        rec.inference_ms_per_sample = rec.inference.map(|t| t.ms_per_sample(b));
        rec.peak_rss_mb = peak_rss_mb();
        if rec.peak_rss_mb.is_none() {
            rec.notes.push("peak memory unavailable on this platform".into());
        }
        Ok(rec)
    }

    /// Synthetic workload of the fixed efficiency shape.
    pub fn efficiency_batch() -> anyhow::Result<WindowBatch> {
        let ds = synth::generate(&SynthConfig { channels: EFFICIENCY_CHANNELS, ..SynthConfig::default() })?;
        let ds = zscore(&ds)?;
        let all = make_windows(&ds.train, EFFICIENCY_WINDOW, 5)?;
        ensure!(all.batch_size() >= EFFICIENCY_BATCH, "workload too short");
        Ok(all.select(&(0..EFFICIENCY_BATCH).collect::<Vec<_>>()))
    }

    pub fn efficiency(&self) -> anyhow::Result<Outcome<EfficiencyReport>> {
        let batch = Self::efficiency_batch()?;
        let mut records = Vec::new();
        let mut failures = 0;
        // Sequential on purpose: concurrent methods would distort timings.
        for (name, method) in &self.methods {
            match self.efficiency_record(name, method, &batch) {
                Ok(r) => records.push(r),
                Err(e) => {
                    log::error!("efficiency {name}: {e:#}");
                    failures += 1;
                    let mut r = EfficiencyRecord {
                        method: name.clone(),
                        params: None,
                        train: None,
                        inference: None,
                        train_samples_per_sec: None,
                        inference_ms_per_sample: None,
                        peak_rss_mb: None,
                        notes: Vec::new(),
                    };
                    r.notes.push(format!("failed: {e:#}"));
                    records.push(r);
                }
            }
        }
        let report = EfficiencyReport {
            code_version: CODE_VERSION.into(),
            run_id: self.cfg.run_id(),
            batch: EFFICIENCY_BATCH,
            window: EFFICIENCY_WINDOW,
            channels: EFFICIENCY_CHANNELS,
            records,
        };
        io::write_json(&self.run_dir.join("reports/efficiency.json"), &report)?;
        Ok(Outcome { report, failures })
    }
}

/// Parameter count of a freshly built detector at the efficiency shape.
pub fn ccg_param_count(config: &CcgConfig) -> anyhow::Result<usize> {
    Ok(CcgModel::new(config.clone(), EFFICIENCY_WINDOW, EFFICIENCY_CHANNELS, 0)?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn measure_counts_steps() {
        let mut calls = 0;
        let t = measure(WARMUP_STEPS, MEASURED_STEPS, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 35);
        assert_eq!((t.warmup_steps, t.measured_steps), (5, 30));
    }

    #[test]
    fn sleeping_stub_throughput() {
        let t = measure(WARMUP_STEPS, MEASURED_STEPS, || {
            std::thread::sleep(Duration::from_millis(1));
            Ok(())
        })
        .unwrap();
        let thr = t.throughput(64);
        // Sleep overshoots, so the rate can only fall below 64 000.
        assert!(thr <= 64_000.0 && thr > 20_000.0, "{thr}");
        let exact = Timing { warmup_steps: 5, measured_steps: 30, seconds: 0.030 };
        assert!((exact.throughput(64) - 64_000.0).abs() < 1e-6);
        assert!((exact.ms_per_sample(64) - 1.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn padding() {
        let m = Matrix::from_fn(3, 25, |i, j| (i + j) as f64 + 1.0);
        let p = pad_channels(&m, 38);
        assert_eq!(p.cols(), 38);
        assert_eq!((25..38).filter(|&j| p.column(j).iter().all(|&v| v == 0.0)).count(), 13);
        assert_eq!(pad_channels(&m, 25), m);
        assert_eq!(pad_channels(&m, 4).row(1), &m.row(1)[..4]);
    }
}
