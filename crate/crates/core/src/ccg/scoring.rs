use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{CcgConfig, ScoreProjection};
use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::numerics::moving_average;

/// Per-timestep score `α‖x − x̂‖² + δ_p c_patch + δ_t c_assoc` for every
/// window, laid out `[B, T]`. A cue must be given exactly when its view is
/// active.
pub fn anomaly_score(
    x: &Tensor,
    xhat: &Tensor,
    c_patch: Option<&[f64]>,
    c_assoc: Option<&[f64]>,
    cfg: &CcgConfig,
) -> Result<Vec<f64>> {
    if x.shape != xhat.shape {
        return Err(shape_err!("input {:?} vs reconstruction {:?}", x.shape, xhat.shape));
    }
    let [b, t, c] = x.shape;
    let cue = |given: Option<&[f64]>, active: bool, name: &'static str| -> Result<()> {
        match (given, active) {
            (Some(_), false) => Err(Error::ViewDisabled(name)),
            (None, true) => Err(Error::InvalidArgument(format!("{name} cue missing for an active view"))),
            (Some(v), true) if v.len() != b * t => {
                Err(shape_err!("{name} cue has {} entries, want {}", v.len(), b * t))
            }
            _ => Ok(()),
        }
    };
    cue(c_patch, cfg.use_patch_view, "patch")?;
    cue(c_assoc, cfg.use_temp_view, "temporal")?;
    let (dp, dt) = cfg.effective_deltas();
    let mut out = vec![0.0; b * t];
    for (i, s) in out.iter_mut().enumerate() {
        let r: f64 = (0..c).map(|ch| (x.data[i * c + ch] - xhat.data[i * c + ch]).powi(2)).sum();
        *s = cfg.alpha * r;
        if let Some(p) = c_patch {
            *s += dp * p[i];
        }
        if let Some(a) = c_assoc {
            *s += dt * a[i];
        }
    }
    Ok(out)
}

/// Map overlapping window scores onto a timeline of `len` steps.
pub fn project_scores(
    window_scores: &[Vec<f64>],
    start_indices: &[usize],
    len: usize,
    mode: ScoreProjection,
    smooth_window: usize,
) -> Result<Vec<f64>> {
    if window_scores.len() != start_indices.len() {
        return Err(shape_err!("{} windows but {} start indices", window_scores.len(), start_indices.len()));
    }
    if window_scores.is_empty() {
        return Err(Error::Empty("window scores"));
    }
    let mut sum = vec![0.0; len];
    let mut max = vec![f64::NEG_INFINITY; len];
    let mut count = vec![0usize; len];
    let mut last = vec![f64::NAN; len];
    // Earliest-starting window covering each step, for steps no window ends on.
    let mut first = vec![f64::NAN; len];
    let mut first_start = vec![usize::MAX; len];
    for (scores, &start) in window_scores.iter().zip(start_indices) {
        if start + scores.len() > len {
            return Err(shape_err!("window at {start} of length {} overruns {len} steps", scores.len()));
        }
        for (i, &s) in scores.iter().enumerate() {
            let step = start + i;
            sum[step] += s;
            max[step] = max[step].max(s);
            count[step] += 1;
            if start < first_start[step] {
                first_start[step] = start;
                first[step] = s;
            }
        }
        if let Some(&s) = scores.last() {
            last[start + scores.len() - 1] = s;
        }
    }
    if let Some(gap) = count.iter().position(|&n| n == 0) {
        return Err(Error::CoverageGap(gap));
    }
    match mode {
        ScoreProjection::Mean => Ok(sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect()),
        ScoreProjection::MaxSmooth => moving_average(&max, smooth_window),
        ScoreProjection::Last => Ok(last.iter().zip(&first).map(|(&l, &f)| if l.is_nan() { f } else { l }).collect()),
    }
}
