use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::CcgConfig;
use super::patch_starts;
use crate::autodiff::Shape;
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Initial value of the adjacency logit bias.
pub const ADJ_BIAS_INIT: f64 = -1.0;
/// Standard deviation of the low-rank adjacency factors at init.
pub const ADJ_FACTOR_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Shape,
    /// Shape depends on the channel count; re-initialised when moving a
    /// model to a dataset of different width.
    pub channel_dependent: bool,
    pub init: Init,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn initialise(&mut self, rng: &mut ChaCha8Rng) {
        match self.init {
            Init::Zeros => self.data.iter_mut().for_each(|v| *v = 0.0),
            Init::Const(c) => self.data.iter_mut().for_each(|v| *v = c),
            Init::Normal(std) => self.data.iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }),
        }
    }
}

/// Low-rank adjacency parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyParams {
    pub u: Matrix,
    pub v: Matrix,
    pub b: f64,
    pub prior: Matrix,
}

impl AdjacencyParams {
    /// Factors at zero, bias at its initial value, all-ones prior.
    pub fn zeros(channels: usize, rank: usize) -> Self {
        Self {
            u: Matrix::zeros(channels, rank),
            v: Matrix::zeros(channels, rank),
            b: ADJ_BIAS_INIT,
            prior: Matrix::from_fn(channels, channels, |_, _| 1.0),
        }
    }
}

/// All trainable tensors of a detector, in a fixed order that defines the
/// flat view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub window: usize,
    pub channels: usize,
    pub blocks: Vec<ParamBlock>,
    /// Exogenous 0/1 adjacency mask (not trained).
    pub prior: Matrix,
}

struct Layout {
    blocks: Vec<ParamBlock>,
}

impl Layout {
    fn add(&mut self, name: String, shape: Shape, init: Init, channel_dependent: bool) {
        let n = shape.iter().product();
        self.blocks.push(ParamBlock { name, shape, channel_dependent, init, data: vec![0.0; n] });
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize, cdep: bool) {
        self.add(format!("{prefix}.w"), [1, fan_in, fan_out], Init::Normal(1.0 / libm::sqrt(fan_in as f64)), cdep);
        self.add(format!("{prefix}.b"), [1, 1, fan_out], Init::Zeros, cdep);
    }

    fn encoder(&mut self, prefix: &str, layers: usize, width: usize) {
        let std = 1.0 / libm::sqrt(width as f64);
        for l in 0..layers {
            for w in ["wq", "wk", "wv", "wo"] {
                self.add(format!("{prefix}.l{l}.{w}"), [1, width, width], Init::Normal(std), false);
            }
            self.dense(&format!("{prefix}.l{l}.ff1"), width, 2 * width, false);
            self.dense(&format!("{prefix}.l{l}.ff2"), 2 * width, width, false);
        }
    }
}

impl ModelParams {
    /// Freshly initialised parameters for windows of `window` rows and
    /// `channels` columns.
    pub fn init(cfg: &CcgConfig, window: usize, channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if window < 2 || channels == 0 {
            return Err(Error::Config(format!("window {window} x {channels} channels is too small")));
        }
        let (t, c, d) = (window, channels, cfg.d_model);
        let mut lay = Layout { blocks: Vec::new() };
        if cfg.use_channel_view {
            lay.dense("chan.embed", t, d, false);
            if cfg.use_spectral {
                lay.dense("chan.spec", t, d, false);
            }
            if cfg.use_channel_graph {
                lay.add("adj.u".into(), [1, c, cfg.rank], Init::Normal(ADJ_FACTOR_STD), true);
                lay.add("adj.v".into(), [1, c, cfg.rank], Init::Normal(ADJ_FACTOR_STD), true);
                lay.add("adj.b".into(), [1, 1, 1], Init::Const(ADJ_BIAS_INIT), false);
            }
            lay.encoder("chan", cfg.layers, d);
            lay.dense("chan.head", d, t, false);
        }
        if cfg.use_patch_view {
            if t < cfg.patch_len {
                return Err(Error::Config(format!("window {t} shorter than patch length {}", cfg.patch_len)));
            }
            let dp = d / 2;
            let n = patch_starts(t, cfg.patch_len, cfg.patch_stride).len();
            lay.dense("patch.embed", cfg.patch_len, dp, false);
            lay.add("patch.pos".into(), [1, c * n, dp], Init::Normal(0.02), true);
            lay.encoder("patch", cfg.layers, dp);
            lay.dense("patch.head", dp, cfg.patch_len, false);
        }
        if cfg.use_temp_view {
            lay.dense("temp.embed", c, d, true);
            lay.add("temp.pos".into(), [1, t, d], Init::Normal(0.02), false);
            lay.encoder("temp", cfg.layers, d);
            for l in 0..cfg.layers {
                lay.add(format!("temp.l{l}.sigma"), [1, t, 1], Init::Const(libm::log(3.0)), false);
            }
            lay.dense("temp.head", d, c, true);
        }
        let nv = cfg.views().len();
        if nv > 1 {
            lay.add("gate.w".into(), [1, nv * c, nv], Init::Zeros, true);
            lay.add("gate.b".into(), [1, 1, nv], Init::Zeros, false);
        }
        let mut p = Self { window, channels, blocks: lay.blocks, prior: Matrix::from_fn(c, c, |_, _| 1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.blocks.iter_mut().for_each(|b| b.initialise(&mut rng));
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Offsets of each block inside the flat view.
    pub fn offsets(&self) -> Vec<core::ops::Range<usize>> {
        let mut start = 0;
        self.blocks
            .iter()
            .map(|b| {
                let r = start..start + b.len();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn flat_view(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for b in &self.blocks {
            out.extend_from_slice(&b.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(shape_err!("flat vector has {} entries, model has {}", flat.len(), self.len()));
        }
        let mut start = 0;
        for b in &mut self.blocks {
            let n = b.len();
            b.data.copy_from_slice(&flat[start..start + n]);
            start += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    /// Adjacency parameters, if the model has a channel graph.
    pub fn adjacency_params(&self) -> Option<AdjacencyParams> {
        let u = self.block("adj.u")?;
        let v = self.block("adj.v")?;
        let b = self.block("adj.b")?;
        let (c, r) = (u.shape[1], u.shape[2]);
        Some(AdjacencyParams {
            u: Matrix::from_vec(c, r, u.data.clone()).ok()?,
            v: Matrix::from_vec(c, r, v.data.clone()).ok()?,
            b: b.data[0],
            prior: self.prior.clone(),
        })
    }

    /// Copy of these parameters rebuilt for `channels` channels: blocks whose
    /// shape depends on the channel count, plus any block named in `also`,
    /// are re-initialised from `seed`; everything else is kept.
    pub fn adapt_channels(&self, cfg: &CcgConfig, channels: usize, also: &[&str], seed: u64) -> Result<Self> {
        let mut fresh = Self::init(cfg, self.window, channels, seed)?;
        if fresh.blocks.len() != self.blocks.len() {
            return Err(Error::Config("configuration does not match these parameters".into()));
        }
        for (new, old) in fresh.blocks.iter_mut().zip(&self.blocks) {
            if new.name != old.name {
                return Err(Error::Config(format!("block `{}` does not match `{}`", new.name, old.name)));
            }
            if !(new.channel_dependent || also.contains(&new.name.as_str())) {
                new.data.clone_from(&old.data);
            }
        }
        Ok(fresh)
    }
}
