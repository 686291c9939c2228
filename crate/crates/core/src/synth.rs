//! Synthetic multivariate series with a known channel DAG and planted
//! anomalies.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{invalid, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Short burst of large deviations on one channel.
    Spike,
    /// Constant offset on one child channel.
    LevelShift,
    /// A child channel is replaced by its own delayed copy, breaking the
    /// link to its parents while keeping its marginal behaviour.
    CorrelationBreak,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::Spike, AnomalyKind::LevelShift, AnomalyKind::CorrelationBreak];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::LevelShift => "level_shift",
            AnomalyKind::CorrelationBreak => "corr_break",
        }
    }
}

/// Edge `parent -> child` with a delay and a weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub lag: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub channels: usize,
    pub train_len: usize,
    pub test_len: usize,
    pub kind: AnomalyKind,
    pub segments: usize,
    pub segment_len: usize,
    /// Standard deviation of the roots' autoregressive innovations.
    pub root_noise: f64,
    /// Observation noise added to every child.
    pub child_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            train_len: 2000,
            test_len: 2000,
            kind: AnomalyKind::CorrelationBreak,
            segments: 8,
            segment_len: 40,
            root_noise: 0.5,
            child_noise: 0.1,
            seed: 0,
        }
    }
}

/// Fixed DAG over `channels` nodes: the first two are roots, every later
/// node has one or two earlier parents.
pub fn dag(channels: usize) -> Vec<Edge> {
    let mut edges = Vec::new();
    for child in 2..channels {
        let p1 = (child * 7 + 3) % child;
        edges.push(Edge { parent: p1, child, lag: 1 + child % 3, weight: 0.8 });
        if child >= 3 {
            let p2 = (p1 + 1 + child % (child - 1)) % child;
            if p2 != p1 {
                edges.push(Edge { parent: p2, child, lag: 2 + child % 2, weight: -0.5 });
            }
        }
    }
    edges
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    edges: Vec<Edge>,
    periods: Vec<f64>,
    phases: Vec<f64>,
}

impl Generator<'_> {
    /// Clean series of `len` rows.
    fn series(&self, len: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let c = self.cfg.channels;
        let warm = 16;
        let total = len + warm;
        let mut x = Matrix::zeros(total, c);
        let mut ar = vec![0.0; c];
        for t in 0..total {
            for r in 0..2.min(c) {
                let e: f64 = StandardNormal.sample(rng);
                ar[r] = 0.7 * ar[r] + self.cfg.root_noise * e;
                let season = libm::sin(2.0 * core::f64::consts::PI * t as f64 / self.periods[r] + self.phases[r]);
                x.set(t, r, season + ar[r]);
            }
            for ch in 2..c {
                let mut v = 0.0;
                for e in self.edges.iter().filter(|e| e.child == ch) {
                    if t >= e.lag {
                        v += e.weight * x.get(t - e.lag, e.parent);
                    }
                }
                let n: f64 = StandardNormal.sample(rng);
                x.set(t, ch, v + self.cfg.child_noise * n);
            }
        }
        x.slice_rows(warm, total)
    }
}

/// Train/test dataset with labelled anomalies of one kind in the test split.
pub fn generate(cfg: &SynthConfig) -> Result<TimeSeriesDataset> {
    let c = cfg.channels;
    if c < 3 {
        return Err(invalid!("synthetic suite needs at least 3 channels"));
    }
    let stretch = cfg.segments * (cfg.segment_len + 2 * cfg.segment_len.max(50));
    if cfg.test_len < stretch || cfg.train_len < 200 {
        return Err(invalid!("test split of {} rows cannot host {} segments", cfg.test_len, cfg.segments));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let generator = Generator {
        cfg,
        edges: dag(c),
        periods: vec![24.0 + rng.random_range(0.0..8.0), 50.0 + rng.random_range(0.0..10.0)],
        phases: vec![rng.random_range(0.0..core::f64::consts::TAU), rng.random_range(0.0..core::f64::consts::TAU)],
    };
    let train = generator.series(cfg.train_len, &mut rng);
    let mut test = generator.series(cfg.test_len, &mut rng);
    let stds: Vec<f64> = (0..c)
        .map(|ch| {
            let col = train.column(ch);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            libm::sqrt(col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64)
        })
        .collect();
    let mut labels = vec![0u8; cfg.test_len];
    let slot = cfg.test_len / cfg.segments;
    let delay = 30;
    for s in 0..cfg.segments {
        let lo = s * slot + delay.max(cfg.segment_len / 2);
        let hi = (s + 1) * slot - cfg.segment_len;
        let start = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let end = start + cfg.segment_len;
        let ch = rng.random_range(2..c);
        match cfg.kind {
            AnomalyKind::Spike => {
                for t in start..end {
                    if rng.random::<f64>() < 0.3 {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        let v = test.get(t, ch) + sign * rng.random_range(2.0..4.0) * stds[ch];
                        test.set(t, ch, v);
                    }
                }
            }
            AnomalyKind::LevelShift => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for t in start..end {
                    let v = test.get(t, ch) + sign * 1.5 * stds[ch];
                    test.set(t, ch, v);
                }
            }
            AnomalyKind::CorrelationBreak => {
                let original = test.column(ch);
                for t in start..end {
                    test.set(t, ch, original[t - delay]);
                }
            }
        }
        labels[start..end].iter_mut().for_each(|l| *l = 1);
    }
    TimeSeriesDataset::new(format!("synth_{}", cfg.kind.name()), train, test, labels)
}

/// One dataset per anomaly kind, all drawn from `seed`.
pub fn suite(seed: u64) -> Result<Vec<TimeSeriesDataset>> {
    AnomalyKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            generate(&SynthConfig {
                kind,
                seed: seed.wrapping_mul(31).wrapping_add(i as u64),
                ..SynthConfig::default()
            })
        })
        .collect()
}

/// Suite dataset names, in order.
pub fn suite_names() -> Vec<String> {
    AnomalyKind::ALL.iter().map(|k| format!("synth_{}", k.name())).collect()
}
