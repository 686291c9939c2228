//! Declarative run configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context};
use mtsad_core::ccg::CcgConfig;
use mtsad_core::data::MsdsProtocol;
use mtsad_core::metrics::MetricOptions;
use mtsad_core::perturb::{Family, ShiftMode};
use mtsad_core::synth::{AnomalyKind, SynthConfig};
use mtsad_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint::digest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub datasets: Vec<DatasetSpec>,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub strides: Strides,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub robustness: RobustnessSettings,
    /// Seed of the source models in the transfer matrix.
    #[serde(default)]
    pub transfer_seed: u64,
    /// Windows per forward pass when scoring.
    #[serde(default = "default_chunk")]
    pub score_chunk: usize,
    /// Directory that relative dataset paths are resolved against; defaults
    /// to the directory holding the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_window() -> usize {
    100
}
fn default_chunk() -> usize {
    64
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Strides {
    pub train: usize,
    /// Train stride for MSDS-protocol datasets.
    pub msds: usize,
    pub test: usize,
}

impl Default for Strides {
    fn default() -> Self {
        Self { train: 5, msds: 1, test: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSettings {
    pub strengths: Vec<(Family, Vec<f64>)>,
    pub shift_mode: ShiftMode,
}

impl Default for RobustnessSettings {
    fn default() -> Self {
        Self {
            strengths: Family::ALL.iter().map(|&f| (f, f.default_strengths())).collect(),
            shift_mode: ShiftMode::Rotate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Overrides the stride from `strides`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// `<root>/<name>/{train,test,labels}.csv`.
    Dir {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PathBuf>,
    },
    Synthetic {
        #[serde(default)]
        synth: SynthConfig,
    },
    /// Raw per-host tables under `raw` (default `<data_root>/msds/raw`).
    Msds {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        raw: Option<PathBuf>,
        #[serde(default)]
        protocol: MsdsProtocol,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Re-initialise the channel-facing blocks and fine-tune them on the
    /// target for one epoch with the body frozen.
    Adapt,
    /// Score directly; per-channel models fall back to pooled coefficients
    /// when the width differs.
    Native,
    /// Zero-pad or truncate the target's channels to the source width.
    Pad,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Adapt => "adapt",
            PolicyKind::Native => "native",
            PolicyKind::Pad => "pad",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: MethodKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodKind {
    Ccg {
        preset: String,
        /// Field overrides applied to the preset's detector config.
        #[serde(default, skip_serializing_if = "Map::is_empty")]
        overrides: Map<String, Value>,
        /// Field overrides applied to the preset's optimiser settings.
        #[serde(default, skip_serializing_if = "Map::is_empty")]
        train: Map<String, Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        transfer: Option<PolicyKind>,
    },
    LinearAr {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        transfer: Option<PolicyKind>,
    },
    /// Precomputed scores at `path`, where `{dataset}` and `{seed}` are
    /// substituted.
    ScoreFile { path: String },
    /// Scores every timestep with `value`, whatever the input.
    Constant {
        #[serde(default)]
        value: f64,
    },
}

fn default_order() -> usize {
    8
}

/// A method with its configuration fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Ccg { config: CcgConfig, train: TrainConfig, policy: PolicyKind },
    LinearAr { order: usize, policy: PolicyKind },
    ScoreFile { template: String },
    Constant { value: f64 },
}

impl Method {
    pub fn policy(&self) -> Option<PolicyKind> {
        match self {
            Method::Ccg { policy, .. } | Method::LinearAr { policy, .. } => Some(*policy),
            _ => None,
        }
    }

    pub fn trainable(&self) -> bool {
        matches!(self, Method::Ccg { .. } | Method::LinearAr { .. })
    }
}

/// Optimiser settings a preset ships with.
pub fn preset_train(preset: &str) -> TrainConfig {
    match preset {
        "desk" => TrainConfig { lr_peak: 1e-2, warmup_steps: 10, batch_size: 8, ..TrainConfig::default() },
        _ => TrainConfig::default(),
    }
}

fn merge<T: Serialize + serde::de::DeserializeOwned>(
    base: &T,
    overrides: &Map<String, Value>,
    what: &str,
) -> anyhow::Result<T> {
    let mut value = serde_json::to_value(base)?;
    let obj = value.as_object_mut().expect("configs serialise to objects");
    for (k, v) in overrides {
        ensure!(obj.contains_key(k), "unknown {what} field `{k}`");
        obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(value).with_context(|| format!("bad {what} override"))
}

impl MethodSpec {
    pub fn resolve(&self) -> anyhow::Result<Method> {
        let m = match &self.kind {
            MethodKind::Ccg { preset, overrides, train, transfer } => {
                let config: CcgConfig = merge(&CcgConfig::preset(preset)?, overrides, "detector")?;
                config.validate()?;
                let mut tc: TrainConfig = merge(&preset_train(preset), train, "train")?;
                tc.epochs = config.epochs;
                tc.inject_rate = config.inject_rate;
                tc.validate()?;
                let policy = transfer.unwrap_or(PolicyKind::Adapt);
                ensure!(
                    policy != PolicyKind::Native,
                    "method `{}`: native transfer needs a channel-agnostic model",
                    self.name
                );
                Method::Ccg { config, train: tc, policy }
            }
            MethodKind::LinearAr { order, transfer } => {
                ensure!(*order > 0, "method `{}`: order must be positive", self.name);
                let policy = transfer.unwrap_or(PolicyKind::Native);
                ensure!(policy != PolicyKind::Adapt, "method `{}`: adapt transfer needs a neural detector", self.name);
                Method::LinearAr { order: *order, policy }
            }
            MethodKind::ScoreFile { path } => Method::ScoreFile { template: path.clone() },
            MethodKind::Constant { value } => {
                ensure!(value.is_finite(), "method `{}`: constant must be finite", self.name);
                Method::Constant { value: *value }
            }
        };
        Ok(m)
    }
}

impl DatasetSpec {
    pub fn synthetic(kind: AnomalyKind, seed: u64) -> Self {
        Self {
            name: format!("synth_{}", kind.name()),
            source: DatasetSource::Synthetic { synth: SynthConfig { kind, seed, ..SynthConfig::default() } },
            train_stride: None,
        }
    }
}

impl BenchConfig {
    /// Bundled synthetic suite with CCG-MSD (`desk` preset), its
    /// no-channel-graph ablation and Linear-AR.
    pub fn desk_suite() -> Self {
        let ccg = |name: &str, graph: bool| {
            let mut overrides = Map::new();
            if !graph {
                overrides.insert("use_channel_graph".into(), Value::Bool(false));
            }
            MethodSpec {
                name: name.into(),
                kind: MethodKind::Ccg { preset: "desk".into(), overrides, train: Map::new(), transfer: None },
            }
        };
        Self {
            datasets: AnomalyKind::ALL.iter().enumerate().map(|(i, &k)| DatasetSpec::synthetic(k, i as u64)).collect(),
            methods: vec![
                ccg("ccg_msd", true),
                ccg("ccg_msd_no_graph", false),
                MethodSpec { name: "linear_ar".into(), kind: MethodKind::LinearAr { order: 8, transfer: None } },
            ],
            seeds: default_seeds(),
            window: default_window(),
            strides: Strides::default(),
            metrics: MetricOptions::default(),
            robustness: RobustnessSettings::default(),
            transfer_seed: 0,
            score_chunk: default_chunk(),
            data_root: None,
            out: default_out(),
            workers: default_workers(),
        }
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.data_root.is_none() {
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            cfg.data_root = Some(dir.canonicalize().with_context(|| format!("resolving {}", dir.display()))?);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(!self.datasets.is_empty(), "no datasets configured");
        ensure!(!self.methods.is_empty(), "no methods configured");
        ensure!(!self.seeds.is_empty(), "no seeds configured");
        ensure!(self.window >= 2, "window must be at least 2");
        ensure!(self.strides.train > 0 && self.strides.msds > 0 && self.strides.test > 0, "strides must be positive");
        ensure!(self.strides.test <= self.window, "test stride larger than the window leaves gaps");
        ensure!(self.workers > 0 && self.score_chunk > 0, "workers and score_chunk must be positive");
        let unique = |names: Vec<&str>, what: &str| -> anyhow::Result<()> {
            let mut seen = BTreeSet::new();
            for n in names {
                ensure!(!n.is_empty() && !n.contains(['/', '\\']), "bad {what} name `{n}`");
                ensure!(seen.insert(n), "duplicate {what} `{n}`");
            }
            Ok(())
        };
        unique(self.datasets.iter().map(|d| d.name.as_str()).collect(), "dataset")?;
        unique(self.methods.iter().map(|m| m.name.as_str()).collect(), "method")?;
        let seeds: BTreeSet<_> = self.seeds.iter().collect();
        ensure!(seeds.len() == self.seeds.len(), "duplicate seeds");
        for d in &self.datasets {
            ensure!(d.train_stride != Some(0), "dataset `{}`: train stride must be positive", d.name);
        }
        for m in &self.methods {
            m.resolve().with_context(|| format!("method `{}`", m.name))?;
        }
        for (_, s) in &self.robustness.strengths {
            ensure!(!s.is_empty(), "perturbation family without strengths");
        }
        Ok(())
    }

    /// Keep only the named datasets and methods; empty lists keep all.
    pub fn restrict(&mut self, datasets: &[String], methods: &[String]) -> anyhow::Result<()> {
        for n in datasets {
            ensure!(self.datasets.iter().any(|d| &d.name == n), "no dataset `{n}` in the config");
        }
        for n in methods {
            ensure!(self.methods.iter().any(|m| &m.name == n), "no method `{n}` in the config");
        }
        if !datasets.is_empty() {
            self.datasets.retain(|d| datasets.contains(&d.name));
        }
        if !methods.is_empty() {
            self.methods.retain(|m| methods.contains(&m.name));
        }
        Ok(())
    }

    pub fn root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root().join(p)
        }
    }

    pub fn train_stride(&self, d: &DatasetSpec) -> usize {
        d.train_stride.unwrap_or(match d.source {
            DatasetSource::Msds { .. } => self.strides.msds,
            _ => self.strides.train,
        })
    }

    pub fn method(&self, name: &str) -> anyhow::Result<&MethodSpec> {
        self.methods.iter().find(|m| m.name == name).ok_or_else(|| anyhow!("no method `{name}`"))
    }

    /// Identifier of the run's output directory: a digest of every field
    /// that can change a result.
    pub fn run_id(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out");
            obj.remove("workers");
        }
        digest(&v)[..12].to_string()
    }
}

/// Parse `0,1,2`.
pub fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u64>().map_err(|e| anyhow!("bad seed `{t}`: {e}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("empty seed list");
    }
    Ok(seeds)
}
