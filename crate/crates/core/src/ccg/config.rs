use alloc::string::ToString;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreProjection {
    Mean,
    MaxSmooth,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum View {
    Channel,
    Patch,
    Temporal,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Channel => "channel",
            View::Patch => "patch",
            View::Temporal => "temporal",
        }
    }
}

/// Architecture, loss and scoring options of one detector instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CcgConfig {
    pub use_channel_view: bool,
    /// Spectral side branch of the channel view.
    pub use_spectral: bool,
    /// Learned adjacency bias inside channel attention. Off means each
    /// channel token only attends to itself and no DAG penalty is applied.
    pub use_channel_graph: bool,
    pub use_patch_view: bool,
    pub use_temp_view: bool,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub rank: usize,
    pub k_periods: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub score_projection: ScoreProjection,
    pub smooth_window: usize,
    pub epochs: usize,
    pub inject_rate: f64,
    pub mask_rate: f64,
    pub lambda_dag: f64,
    pub lambda_freq: f64,
    pub alpha: f64,
    pub delta_p: f64,
    pub delta_t: f64,
}

impl Default for CcgConfig {
    fn default() -> Self {
        Self {
            use_channel_view: true,
            use_spectral: true,
            use_channel_graph: true,
            use_patch_view: false,
            use_temp_view: false,
            d_model: 32,
            layers: 2,
            heads: 2,
            rank: 4,
            k_periods: 3,
            patch_len: 8,
            patch_stride: 8,
            score_projection: ScoreProjection::Mean,
            smooth_window: 51,
            epochs: 1,
            inject_rate: 0.0,
            mask_rate: 0.15,
            lambda_dag: 0.05,
            lambda_freq: 0.0,
            alpha: 1.0,
            delta_p: 0.5,
            delta_t: 0.5,
        }
    }
}

pub const PRESETS: [&str; 6] = ["smd", "msl", "smap", "psm", "msds", "desk"];

impl CcgConfig {
    /// Headline per-dataset configuration, plus `desk` for the bundled
    /// synthetic suite.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let (patch, temp, epochs, proj) = match name {
            "smd" => (false, false, 1, ScoreProjection::MaxSmooth),
            "msl" => (false, false, 12, ScoreProjection::Mean),
            "smap" => (true, true, 2, ScoreProjection::MaxSmooth),
            "psm" => (false, false, 12, ScoreProjection::Mean),
            "msds" => (false, false, 8, ScoreProjection::Last),
            "desk" => (false, false, 2, ScoreProjection::MaxSmooth),
            other => return Err(Error::Config(alloc::format!("unknown preset `{other}`"))),
        };
        Ok(Self { use_patch_view: patch, use_temp_view: temp, epochs, score_projection: proj, ..base })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.use_channel_view || self.use_patch_view || self.use_temp_view) {
            return fail("at least one view must be enabled");
        }
        if self.smooth_window % 2 == 0 {
            return fail("smooth_window must be odd");
        }
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.rank == 0 || self.k_periods == 0 {
            return fail("d_model, layers, heads, rank and k_periods must be positive");
        }
        if self.d_model % self.heads != 0 {
            return fail("d_model must be divisible by heads");
        }
        if self.use_patch_view && (self.d_model % 2 != 0 || (self.d_model / 2) % self.heads != 0) {
            return fail("patch view needs d_model/2 divisible by heads");
        }
        if self.patch_len == 0 || self.patch_stride == 0 {
            return fail("patch_len and patch_stride must be positive");
        }
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.inject_rate) || !(0.0..=1.0).contains(&self.mask_rate) {
            return fail("inject_rate and mask_rate must lie in [0, 1]");
        }
        let coefs = [self.lambda_dag, self.lambda_freq, self.alpha, self.delta_p, self.delta_t];
        if coefs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("loss and score coefficients must be finite and non-negative");
        }
        Ok(())
    }

    pub fn views(&self) -> Vec<View> {
        let mut v = Vec::new();
        if self.use_channel_view {
            v.push(View::Channel);
        }
        if self.use_patch_view {
            v.push(View::Patch);
        }
        if self.use_temp_view {
            v.push(View::Temporal);
        }
        v
    }

    /// Whether the adjacency and its penalty are part of the model.
    pub fn has_graph(&self) -> bool {
        self.use_channel_view && self.use_channel_graph
    }

    /// Cue weights with inactive views forced to zero.
    pub fn effective_deltas(&self) -> (f64, f64) {
        (if self.use_patch_view { self.delta_p } else { 0.0 }, if self.use_temp_view { self.delta_t } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_mirror_headline_table() {
        let smap = CcgConfig::preset("smap").unwrap();
        assert!(smap.use_channel_view && smap.use_spectral && smap.use_patch_view && smap.use_temp_view);
        assert_eq!((smap.epochs, smap.score_projection), (2, ScoreProjection::MaxSmooth));
        let expect = [
            ("smd", 1, ScoreProjection::MaxSmooth),
            ("msl", 12, ScoreProjection::Mean),
            ("psm", 12, ScoreProjection::Mean),
            ("msds", 8, ScoreProjection::Last),
        ];
        for (name, epochs, proj) in expect {
            let c = CcgConfig::preset(name).unwrap();
            assert_eq!(c.views(), [View::Channel]);
            assert!(c.use_spectral);
            assert_eq!((c.epochs, c.score_projection, c.smooth_window), (epochs, proj, 51));
            c.validate().unwrap();
        }
        assert!(CcgConfig::preset("nope").is_err());
    }

    #[test]
    fn validation() {
        let none = CcgConfig { use_channel_view: false, ..CcgConfig::default() };
        assert!(none.validate().is_err());
        let even = CcgConfig { smooth_window: 50, ..CcgConfig::default() };
        assert!(even.validate().is_err());
        assert_eq!(CcgConfig::default().effective_deltas(), (0.0, 0.0));
    }
}
