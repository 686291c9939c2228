//! Test-time corruptions and the seed-matched robustness protocol.
//!
//! Perturbations act on standardised test splits. The headline number is the
//! absolute VUS-ROC under perturbation; retention (perturbed / clean) is kept
//! as a diagnostic only.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::metrics::{mean_std, vus, Curve, ScoredSeries, DEFAULT_VUS_BUFFER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Noise,
    Dropout,
    Shift,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Noise, Family::Dropout, Family::Shift];

    pub fn name(self) -> &'static str {
        match self {
            Family::Noise => "noise",
            Family::Dropout => "dropout",
            Family::Shift => "shift",
        }
    }

    pub fn default_strengths(self) -> Vec<f64> {
        match self {
            Family::Noise => [0.05, 0.10, 0.20].to_vec(),
            Family::Dropout => [0.10, 0.25, 0.50].to_vec(),
            Family::Shift => [2.0, 5.0, 10.0].to_vec(),
        }
    }
}

/// How a time shift treats the rows pushed past the end of the split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    /// Wrap the tail around to the front.
    #[default]
    Rotate,
    /// Drop the tail and hold the first row over the vacated front.
    Truncate,
}

/// One test-time corruption. `strength` is σ for noise, the channel fraction
/// for dropout and the shift in timesteps for shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub family: Family,
    pub strength: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.strength;
        match self.family {
            Family::Noise if !(s >= 0.0 && s.is_finite()) => Err(invalid!("noise sigma must be >= 0, got {s}")),
            Family::Dropout if !(0.0..=1.0).contains(&s) => Err(invalid!("dropout fraction must be in [0,1], got {s}")),
            Family::Shift if !(s >= 0.0 && s.is_finite() && libm::trunc(s) == s) => {
                Err(invalid!("shift must be a non-negative integer, got {s}"))
            }
            _ => Ok(()),
        }
    }
}

/// Number of channels zeroed by dropout: round-half-up of `p·C`, at least one
/// whenever `p > 0`.
pub fn dropout_count(p: f64, channels: usize) -> usize {
    if p <= 0.0 {
        return 0;
    }
    let k = libm::floor(p * channels as f64 + 0.5) as usize;
    k.clamp(1, channels)
}

/// Rotate rows forward by `shift` (negative shifts rotate backward).
pub fn rotate_rows(m: &Matrix, shift: isize) -> Matrix {
    let n = m.rows();
    if n == 0 {
        return m.clone();
    }
    let s = shift.rem_euclid(n as isize) as usize;
    let mut out = Matrix::zeros(n, m.cols());
    for t in 0..n {
        out.row_mut((t + s) % n).copy_from_slice(m.row(t));
    }
    out
}

pub fn apply_perturbation(test: &Matrix, spec: &PerturbationSpec) -> Result<Matrix> {
    apply_perturbation_with(test, spec, ShiftMode::Rotate)
}

pub fn apply_perturbation_with(test: &Matrix, spec: &PerturbationSpec, shift_mode: ShiftMode) -> Result<Matrix> {
    spec.validate()?;
    if test.rows() == 0 {
        return Err(invalid!("cannot perturb an empty test split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.family {
        Family::Noise => {
            let mut out = test.clone();
            if spec.strength > 0.0 {
                for v in out.as_mut_slice() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.strength * z;
                }
            }
            Ok(out)
        }
        Family::Dropout => {
            let c = test.cols();
            if spec.strength > 0.0 && c == 0 {
                return Err(invalid!("channel dropout on a split with no channels"));
            }
            let k = dropout_count(spec.strength, c);
            let mut out = test.clone();
            for ch in rand::seq::index::sample(&mut rng, c, k).into_iter() {
                for t in 0..out.rows() {
                    out.set(t, ch, 0.0);
                }
            }
            Ok(out)
        }
        Family::Shift => {
            let dt = spec.strength as usize;
            Ok(match shift_mode {
                ShiftMode::Rotate => rotate_rows(test, dt as isize),
                ShiftMode::Truncate => {
                    let n = test.rows();
                    Matrix::from_fn(n, test.cols(), |t, j| test.get(t.saturating_sub(dt).min(n - 1), j))
                }
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPlan {
    pub strengths: Vec<(Family, Vec<f64>)>,
    pub seeds: Vec<u64>,
    pub vus_buffer: usize,
    pub shift_mode: ShiftMode,
}

impl Default for RobustnessPlan {
    fn default() -> Self {
        Self {
            strengths: Family::ALL.iter().map(|&f| (f, f.default_strengths())).collect(),
            seeds: [0, 1, 2].to_vec(),
            vus_buffer: DEFAULT_VUS_BUFFER,
            shift_mode: ShiftMode::Rotate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub dataset: String,
    pub family: Family,
    pub strength: f64,
    pub vus_roc: f64,
}

/// One seed's clean and per-family means plus the cells behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRobustness {
    pub seed: u64,
    pub clean: f64,
    pub clean_per_dataset: Vec<(String, f64)>,
    pub families: Vec<(Family, f64)>,
    pub avg: f64,
    pub cells: Vec<RobustnessCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: Family,
    pub vus_roc: MeanStd,
    /// Perturbed mean over clean mean; diagnostic only.
    pub retention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub base: MeanStd,
    pub families: Vec<FamilySummary>,
    pub avg: MeanStd,
    pub per_seed: Vec<SeedRobustness>,
}

/// Run every (seed, dataset, family, strength) cell through `detector`.
///
/// `detector(seed, dataset, test)` returns one score per test timestep for
/// the (possibly perturbed) `test` matrix. For each seed the family mean
/// averages VUS-ROC over datasets and strengths; the summary reports
/// mean ± std of those per-seed numbers.
pub fn robustness_suite<F>(
    mut detector: F,
    datasets: &[TimeSeriesDataset],
    plan: &RobustnessPlan,
) -> Result<RobustnessSummary>
where
    F: FnMut(u64, &TimeSeriesDataset, &Matrix) -> Result<Vec<f64>>,
{
    if datasets.is_empty() || plan.seeds.is_empty() {
        return Err(invalid!("robustness suite needs at least one dataset and one seed"));
    }
    let score = |scores: Vec<f64>, ds: &TimeSeriesDataset| -> Result<f64> {
        vus(&ScoredSeries::new(scores, ds.test_labels.clone())?, plan.vus_buffer, Curve::Roc)
    };
    let mut per_seed = Vec::with_capacity(plan.seeds.len());
    for &seed in &plan.seeds {
        let mut clean_per_dataset = Vec::with_capacity(datasets.len());
        for ds in datasets {
            let v = score(detector(seed, ds, &ds.test)?, ds)?;
            clean_per_dataset.push((ds.name.clone(), v));
        }
        let clean = clean_per_dataset.iter().map(|(_, v)| v).sum::<f64>() / datasets.len() as f64;
        let mut cells = Vec::new();
        let mut families = Vec::with_capacity(plan.strengths.len());
        for (family, strengths) in &plan.strengths {
            let mut acc = Vec::new();
            for ds in datasets {
                for &strength in strengths {
                    let spec = PerturbationSpec { family: *family, strength, seed };
                    let perturbed = apply_perturbation_with(&ds.test, &spec, plan.shift_mode)?;
                    let v = score(detector(seed, ds, &perturbed)?, ds)?;
                    acc.push(v);
                    cells.push(RobustnessCell { dataset: ds.name.clone(), family: *family, strength, vus_roc: v });
                }
            }
            families.push((*family, acc.iter().sum::<f64>() / acc.len().max(1) as f64));
        }
        let avg = families.iter().map(|(_, v)| v).sum::<f64>() / families.len().max(1) as f64;
        per_seed.push(SeedRobustness { seed, clean, clean_per_dataset, families, avg, cells });
    }

    let base = MeanStd::of(&per_seed.iter().map(|s| s.clean).collect::<Vec<_>>());
    let families = plan
        .strengths
        .iter()
        .enumerate()
        .map(|(k, (family, _))| {
            let vus_roc = MeanStd::of(&per_seed.iter().map(|s| s.families[k].1).collect::<Vec<_>>());
            FamilySummary { family: *family, vus_roc, retention: vus_roc.mean / base.mean }
        })
        .collect();
    let avg = MeanStd::of(&per_seed.iter().map(|s| s.avg).collect::<Vec<_>>());
    Ok(RobustnessSummary { base, families, avg, per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn m() -> Matrix {
        Matrix::from_fn(50, 10, |i, j| (i * 10 + j) as f64 * 0.01)
    }

    #[test]
    fn identity_strengths() {
        let x = m();
        for family in Family::ALL {
            let spec = PerturbationSpec { family, strength: 0.0, seed: 3 };
            assert_eq!(apply_perturbation(&x, &spec).unwrap(), x);
        }
    }

    #[test]
    fn dropout_counts() {
        assert_eq!(dropout_count(0.25, 10), 3);
        assert_eq!(dropout_count(0.10, 10), 1);
        assert_eq!(dropout_count(0.50, 10), 5);
        assert_eq!(dropout_count(0.01, 10), 1);
        assert_eq!(dropout_count(0.0, 10), 0);
        let x = m();
        let y = apply_perturbation(&x, &PerturbationSpec { family: Family::Dropout, strength: 0.25, seed: 1 }).unwrap();
        let zeroed = (0..10).filter(|&j| (0..50).all(|t| y.get(t, j) == 0.0)).count();
        // channel 0 of row 0 is zero already but not the whole column
        assert_eq!(zeroed, 3);
        let empty = Matrix::zeros(5, 0);
        assert!(
            apply_perturbation(&empty, &PerturbationSpec { family: Family::Dropout, strength: 0.5, seed: 1 }).is_err()
        );
    }

    #[test]
    fn shift_modes() {
        let x = Matrix::from_fn(5, 1, |i, _| i as f64);
        let spec = PerturbationSpec { family: Family::Shift, strength: 2.0, seed: 0 };
        let r = apply_perturbation(&x, &spec).unwrap();
        assert_eq!(r.column(0), vec![3.0, 4.0, 0.0, 1.0, 2.0]);
        let t = apply_perturbation_with(&x, &spec, ShiftMode::Truncate).unwrap();
        assert_eq!(t.column(0), vec![0.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(rotate_rows(&r, -2), x);
        let bad = PerturbationSpec { family: Family::Shift, strength: 1.5, seed: 0 };
        assert!(apply_perturbation(&x, &bad).is_err());
    }

    #[test]
    fn spec_validation() {
        let x = m();
        for (family, s) in [(Family::Noise, -0.1), (Family::Dropout, 1.5), (Family::Shift, -1.0)] {
            assert!(apply_perturbation(&x, &PerturbationSpec { family, strength: s, seed: 0 }).is_err());
        }
    }

    fn toy_dataset(name: &str) -> TimeSeriesDataset {
        let test = Matrix::from_fn(600, 3, |i, j| libm::sin(i as f64 * 0.3 + j as f64));
        let mut labels = vec![0u8; 600];
        labels[150..160].iter_mut().for_each(|l| *l = 1);
        labels[450..455].iter_mut().for_each(|l| *l = 1);
        TimeSeriesDataset::new(name, test.clone(), test, labels).unwrap()
    }

    #[test]
    fn constant_scorer_retains_exactly_one() {
        let dsets = [toy_dataset("a"), toy_dataset("b")];
        let summary = robustness_suite(|_, _, t| Ok(vec![1.0; t.rows()]), &dsets, &RobustnessPlan::default()).unwrap();
        for f in &summary.families {
            assert_eq!(f.retention, 1.0);
            assert_eq!(f.vus_roc.mean, summary.base.mean);
        }
    }

    #[test]
    fn single_cell_family_mean() {
        let dsets = [toy_dataset("a")];
        let plan =
            RobustnessPlan { strengths: vec![(Family::Noise, vec![0.1])], seeds: vec![7], ..RobustnessPlan::default() };
        let s = robustness_suite(|_, _, t| Ok(t.column(0)), &dsets, &plan).unwrap();
        assert_eq!(s.families[0].vus_roc.std, 0.0);
        assert_eq!(s.families[0].vus_roc.mean, s.per_seed[0].cells[0].vus_roc);
        assert_eq!(s.avg.mean, s.families[0].vus_roc.mean);
    }
}
