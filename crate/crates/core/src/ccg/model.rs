use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{CcgConfig, View};
use super::params::ModelParams;
use super::scoring::{anomaly_score, project_scores};
use super::{patch_starts, LOG_EPS, LOG_FLOOR};
use crate::autodiff::{BandPlan, SparseMap, Tape, Tensor, Var};
use crate::data::{make_windows, WindowBatch};
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{rfft_amplitudes, topk_bins, Spectrum};

const LN_EPS: f64 = 1e-5;
/// Floor inside the association KL so empty attention mass stays finite.
const KL_EPS: f64 = 1e-12;

/// Parameter leaves of one forward pass.
pub struct Binding<'a> {
    params: &'a ModelParams,
    pub vars: Vec<Var>,
}

impl<'a> Binding<'a> {
    pub fn new(tape: &mut Tape, params: &'a ModelParams) -> Self {
        let vars = params.blocks.iter().map(|b| tape.param(Tensor::from_vec(b.shape, b.data.clone()))).collect();
        Self { params, vars }
    }

    fn get(&self, name: &str) -> Var {
        let i = self.params.index_of(name).unwrap_or_else(|| panic!("parameter block `{name}` missing"));
        self.vars[i]
    }

    fn dense(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let y = tape.matmul(x, self.get(&format!("{prefix}.w")));
        tape.add(y, self.get(&format!("{prefix}.b")))
    }
}

enum Attention {
    /// Softmax attention with an optional additive logit bias.
    Full(Option<Var>),
    /// Every token attends only to itself.
    SelfOnly,
}

/// Pre-norm transformer layer. Returns the new hidden state and the
/// per-head attention maps.
fn encoder_layer(
    tape: &mut Tape,
    bind: &Binding,
    prefix: &str,
    h: Var,
    heads: usize,
    attn: Attention,
) -> (Var, Vec<Var>) {
    let z = tape.layer_norm(h, LN_EPS);
    let v = tape.matmul(z, bind.get(&format!("{prefix}.wv")));
    let (mixed, maps) = match attn {
        Attention::SelfOnly => (v, Vec::new()),
        Attention::Full(bias) => {
            let q = tape.matmul(z, bind.get(&format!("{prefix}.wq")));
            let k = tape.matmul(z, bind.get(&format!("{prefix}.wk")));
            let dh = tape.shape(q)[2] / heads;
            let mut outs = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let logits = tape.matmul_nt(qh, kh);
                let mut logits = tape.scale(logits, 1.0 / libm::sqrt(dh as f64));
                if let Some(b) = bias {
                    logits = tape.add(logits, b);
                }
                let p = tape.softmax(logits);
                maps.push(p);
                outs.push(tape.matmul(p, vh));
            }
            let mixed = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
            (mixed, maps)
        }
    };
    let o = tape.matmul(mixed, bind.get(&format!("{prefix}.wo")));
    let h = tape.add(h, o);
    let z2 = tape.layer_norm(h, LN_EPS);
    let f = bind.dense(tape, z2, &format!("{prefix}.ff1"));
    let f = tape.gelu(f);
    let f = bind.dense(tape, f, &format!("{prefix}.ff2"));
    (tape.add(h, f), maps)
}

/// Adjacency on the tape: `σ(UVᵀ + b) ∘ M_prior`, shape `[1, C, C]`.
fn adjacency_var(tape: &mut Tape, bind: &Binding, prior: &Matrix) -> Var {
    let uv = tape.matmul_nt(bind.get("adj.u"), bind.get("adj.v"));
    let logits = tape.add(uv, bind.get("adj.b"));
    let a = tape.sigmoid(logits);
    let m = tape.constant(Tensor::matrix(prior));
    tape.mul(a, m)
}

/// Period-pooled summary of `xt: [B, C, T]`: for each of the top-k periods
/// of the channel-averaged spectrum, every channel is folded onto the period
/// grid, averaged across cycles and tiled back to length `T`; periods are
/// mixed by a softmax of their amplitudes.
fn spectral_summary(tape: &mut Tape, xt: Var, k: usize) -> Result<Var> {
    let [b, c, t] = tape.shape(xt);
    let vals = tape.value(xt).data.clone();
    let mut per_batch = Vec::with_capacity(b);
    for bb in 0..b {
        let mut avg = vec![0.0; t / 2 + 1];
        for ch in 0..c {
            let row = &vals[(bb * c + ch) * t..(bb * c + ch + 1) * t];
            let s = rfft_amplitudes(row)?;
            avg.iter_mut().zip(s.amplitudes()).for_each(|(a, v)| *a += v / c as f64);
        }
        let spec = Spectrum::new(avg, t)?;
        let bins = topk_bins(&spec, k);
        let amps: Vec<f64> = bins.iter().map(|&f| spec.amplitudes()[f]).collect();
        let m = amps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = amps.iter().map(|a| libm::exp(a - m)).collect();
        let z: f64 = e.iter().sum();
        let periods: Vec<(usize, f64)> = bins.iter().zip(&e).map(|(&f, w)| (spec.period_of(f).max(1), w / z)).collect();
        per_batch.push(periods);
    }
    let pooled_len: usize = per_batch.iter().map(|ps| c * ps.iter().map(|p| p.0).sum::<usize>()).sum();
    let mut pool = SparseMap::builder(b * c * t, [1, 1, pooled_len.max(1)]);
    let mut offsets = Vec::with_capacity(b * c);
    let mut cursor = 0;
    for (bb, ps) in per_batch.iter().enumerate() {
        for ch in 0..c {
            let base = (bb * c + ch) * t;
            let mut offs = Vec::with_capacity(ps.len());
            for &(p, _) in ps {
                offs.push(cursor);
                for phase in 0..p {
                    let idx: Vec<usize> = (phase..t).step_by(p).collect();
                    let w = 1.0 / idx.len() as f64;
                    for i in idx {
                        pool.term(base + i, w);
                    }
                    pool.finish_row();
                }
                cursor += p;
            }
            offsets.push(offs);
        }
    }
    if pooled_len == 0 {
        pool.finish_row();
    }
    let pooled = tape.sparse(xt, Rc::new(pool.build()));
    let mut tile = SparseMap::builder(pooled_len.max(1), [b, c, t]);
    for (bb, ps) in per_batch.iter().enumerate() {
        for ch in 0..c {
            let offs = &offsets[bb * c + ch];
            for step in 0..t {
                for (&(p, w), &off) in ps.iter().zip(offs) {
                    tile.term(off + step % p, w);
                }
                tile.finish_row();
            }
        }
    }
    Ok(tape.sparse(pooled, Rc::new(tile.build())))
}

/// Channel-token view. Returns the `[B, T, C]` reconstruction and the
/// adjacency node when the channel graph is enabled.
pub fn channel_view_forward(tape: &mut Tape, bind: &Binding, cfg: &CcgConfig, x: Var) -> Result<(Var, Option<Var>)> {
    if !cfg.use_channel_view {
        return Err(Error::ViewDisabled("channel"));
    }
    let xt = tape.transpose(x);
    let mut e = bind.dense(tape, xt, "chan.embed");
    if cfg.use_spectral {
        let s = spectral_summary(tape, xt, cfg.k_periods)?;
        let g = bind.dense(tape, s, "chan.spec");
        let g = tape.gelu(g);
        e = tape.add(e, g);
    }
    let (adjacency, bias) = if cfg.use_channel_graph {
        let prior = &bind.params.prior;
        let a = adjacency_var(tape, bind, prior);
        // Query channel j reads key channel i through A[i][j].
        let at = tape.transpose(a);
        let pt = prior.transpose();
        let mask = Rc::new(pt.as_slice().iter().map(|&m| m != 0.0).collect());
        (Some(a), Some(tape.masked_log(at, LOG_EPS, mask, LOG_FLOOR)))
    } else {
        (None, None)
    };
    let mut h = e;
    for l in 0..cfg.layers {
        let attn = if cfg.use_channel_graph { Attention::Full(bias) } else { Attention::SelfOnly };
        h = encoder_layer(tape, bind, &format!("chan.l{l}"), h, cfg.heads, attn).0;
    }
    let h = tape.layer_norm(h, LN_EPS);
    let y = bind.dense(tape, h, "chan.head");
    Ok((tape.transpose(y), adjacency))
}

/// Patch view. Returns the reconstruction and `c_patch` laid out `[B, T]`.
pub fn patch_view_forward(tape: &mut Tape, bind: &Binding, cfg: &CcgConfig, x: Var) -> Result<(Var, Vec<f64>)> {
    if !cfg.use_patch_view {
        return Err(Error::ViewDisabled("patch"));
    }
    let [b, t, c] = tape.shape(x);
    let l = cfg.patch_len;
    if t < l {
        return Err(Error::InvalidArgument(format!("window {t} shorter than patch length {l}")));
    }
    let starts = patch_starts(t, l, cfg.patch_stride);
    let n = starts.len();
    let mut gather = SparseMap::builder(b * t * c, [b, c * n, l]);
    for bb in 0..b {
        for ch in 0..c {
            for &s in &starts {
                for i in 0..l {
                    gather.term((bb * t + s + i) * c + ch, 1.0).finish_row();
                }
            }
        }
    }
    let tokens = tape.sparse(x, Rc::new(gather.build()));
    let e = bind.dense(tape, tokens, "patch.embed");
    let mut h = tape.add(e, bind.get("patch.pos"));
    let mut maps = Vec::new();
    for layer in 0..cfg.layers {
        let (next, m) = encoder_layer(tape, bind, &format!("patch.l{layer}"), h, cfg.heads, Attention::Full(None));
        h = next;
        maps = m;
    }
    let h = tape.layer_norm(h, LN_EPS);
    let y = bind.dense(tape, h, "patch.head");

    let mut cover: Vec<Vec<(usize, usize)>> = vec![Vec::new(); t];
    for (pi, &s) in starts.iter().enumerate() {
        for i in 0..l {
            cover[s + i].push((pi, i));
        }
    }
    let mut fold = SparseMap::builder(b * c * n * l, [b, t, c]);
    for bb in 0..b {
        for step in 0..t {
            for ch in 0..c {
                let w = 1.0 / cover[step].len() as f64;
                for &(pi, i) in &cover[step] {
                    fold.term(((bb * c * n) + ch * n + pi) * l + i, w);
                }
                fold.finish_row();
            }
        }
    }
    let recon = tape.sparse(y, Rc::new(fold.build()));

    let tok = c * n;
    let mut diag = vec![0.0; b * tok];
    for &m in &maps {
        let v = &tape.value(m).data;
        for bb in 0..b {
            for i in 0..tok {
                diag[bb * tok + i] += v[(bb * tok + i) * tok + i] / maps.len() as f64;
            }
        }
    }
    let mut cue = vec![0.0; b * t];
    for bb in 0..b {
        for step in 0..t {
            let mut s = 0.0;
            for ch in 0..c {
                for &(pi, _) in &cover[step] {
                    s += 1.0 - diag[bb * tok + ch * n + pi];
                }
            }
            cue[bb * t + step] = (s / (c * cover[step].len()) as f64).max(0.0);
        }
    }
    Ok((recon, cue))
}

/// Row-normalised Gaussian prior over `|i − j|` with per-row width `sigma`.
pub fn gaussian_prior(sigma: &[f64]) -> Vec<f64> {
    let t = sigma.len();
    let mut p = vec![0.0; t * t];
    for i in 0..t {
        let s = sigma[i].max(1e-6);
        let row = &mut p[i * t..(i + 1) * t];
        for (j, v) in row.iter_mut().enumerate() {
            let d = i as f64 - j as f64;
            *v = libm::exp(-d * d / (2.0 * s * s));
        }
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

/// `KL(p‖q) + KL(q‖p)` in nats.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a + KL_EPS, b + KL_EPS);
            (a - b) * libm::log(a / b)
        })
        .sum()
}

/// Temporal-association view. Returns the reconstruction and `c_assoc`
/// laid out `[B, T]`.
pub fn temp_view_forward(tape: &mut Tape, bind: &Binding, cfg: &CcgConfig, x: Var) -> Result<(Var, Vec<f64>)> {
    if !cfg.use_temp_view {
        return Err(Error::ViewDisabled("temporal"));
    }
    let [b, t, _] = tape.shape(x);
    let e = bind.dense(tape, x, "temp.embed");
    let mut h = tape.add(e, bind.get("temp.pos"));
    let mut cue = vec![0.0; b * t];
    let norm = (cfg.layers * cfg.heads) as f64;
    for layer in 0..cfg.layers {
        let (next, maps) = encoder_layer(tape, bind, &format!("temp.l{layer}"), h, cfg.heads, Attention::Full(None));
        h = next;
        let raw = &tape.value(bind.get(&format!("temp.l{layer}.sigma"))).data;
        let sigma: Vec<f64> = raw.iter().map(|&r| libm::exp(r)).collect();
        let prior = gaussian_prior(&sigma);
        for &m in &maps {
            let s = &tape.value(m).data;
            for bb in 0..b {
                for step in 0..t {
                    let srow = &s[(bb * t + step) * t..(bb * t + step + 1) * t];
                    let prow = &prior[step * t..(step + 1) * t];
                    cue[bb * t + step] += symmetric_kl(prow, srow) / norm;
                }
            }
        }
    }
    let h = tape.layer_norm(h, LN_EPS);
    Ok((bind.dense(tape, h, "temp.head"), cue))
}

/// Per-timestep softmax gate over view reconstructions. With one view the
/// reconstruction passes through unchanged and no gate node exists.
pub fn gate_fuse(tape: &mut Tape, recons: &[Var], gate: Option<(Var, Var)>) -> Result<(Var, Option<Var>)> {
    match (recons.len(), gate) {
        (0, _) => Err(Error::Config("no active views to fuse".into())),
        (1, _) => Ok((recons[0], None)),
        (_, None) => Err(Error::Config("gate weights required for multiple views".into())),
        (nv, Some((w, bias))) => {
            let cat = tape.concat_cols(recons);
            let logits = tape.matmul(cat, w);
            let logits = tape.add(logits, bias);
            let g = tape.softmax(logits);
            let mut acc = None;
            for (v, &r) in recons.iter().enumerate().take(nv) {
                let gv = tape.slice_cols(g, v, 1);
                let term = tape.mul(gv, r);
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term),
                });
            }
            Ok((acc.expect("nv >= 2"), Some(g)))
        }
    }
}

/// Per-view outputs of one forward pass, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewOutputs {
    pub batch: usize,
    pub window: usize,
    pub channels: usize,
    pub views: Vec<View>,
    /// One `[B, T, C]` tensor per entry of `views`.
    pub reconstructions: Vec<Tensor>,
    /// `[B, T]`, present when the patch view is active.
    pub c_patch: Option<Vec<f64>>,
    /// `[B, T]`, present when the temporal view is active.
    pub c_assoc: Option<Vec<f64>>,
    /// `[B, T, n_v]` gate weights.
    pub gate: Vec<f64>,
}

pub struct Forward {
    pub params: Vec<Var>,
    pub xhat: Var,
    pub adjacency: Option<Var>,
    pub outputs: ViewOutputs,
}

/// Full forward pass on `x: [B, T, C]`.
pub fn forward(tape: &mut Tape, params: &ModelParams, cfg: &CcgConfig, x: &Tensor) -> Result<Forward> {
    let [b, t, c] = x.shape;
    if t != params.window || c != params.channels {
        return Err(shape_err!("input {t}x{c} does not match model {}x{}", params.window, params.channels));
    }
    let bind = Binding::new(tape, params);
    let xv = tape.constant(x.clone());
    let mut recons = Vec::new();
    let mut adjacency = None;
    let (mut c_patch, mut c_assoc) = (None, None);
    let views = cfg.views();
    for &view in &views {
        match view {
            View::Channel => {
                let (r, a) = channel_view_forward(tape, &bind, cfg, xv)?;
                recons.push(r);
                adjacency = a;
            }
            View::Patch => {
                let (r, cue) = patch_view_forward(tape, &bind, cfg, xv)?;
                recons.push(r);
                c_patch = Some(cue);
            }
            View::Temporal => {
                let (r, cue) = temp_view_forward(tape, &bind, cfg, xv)?;
                recons.push(r);
                c_assoc = Some(cue);
            }
        }
    }
    let gate_params = (views.len() > 1).then(|| (bind.get("gate.w"), bind.get("gate.b")));
    let (xhat, g) = gate_fuse(tape, &recons, gate_params)?;
    let gate = match g {
        Some(g) => tape.value(g).data.clone(),
        None => vec![1.0; b * t],
    };
    let outputs = ViewOutputs {
        batch: b,
        window: t,
        channels: c,
        views,
        reconstructions: recons.iter().map(|&r| tape.value(r).clone()).collect(),
        c_patch,
        c_assoc,
        gate,
    };
    Ok(Forward { params: bind.vars, xhat, adjacency, outputs })
}

/// Unweighted loss terms; `total` applies the effective coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    /// `h(A)`, zero without a channel graph.
    pub dag: f64,
    pub freq: f64,
}

impl LossParts {
    /// Name of the first non-finite term.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("rec", self.rec), ("dag", self.dag), ("freq", self.freq), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Composite objective on the tape. `weights` holds one weight per
/// `(window, timestep)`; each channel shares its timestep's weight.
pub fn composite_loss(
    tape: &mut Tape,
    fwd: &Forward,
    target: &Tensor,
    weights: &[f64],
    cfg: &CcgConfig,
    lambda_dag: f64,
) -> Result<(Var, LossParts)> {
    let [b, t, c] = target.shape;
    if tape.shape(fwd.xhat) != target.shape {
        return Err(shape_err!("reconstruction {:?} vs target {:?}", tape.shape(fwd.xhat), target.shape));
    }
    if weights.len() != b * t {
        return Err(shape_err!("{} weights for {} timesteps", weights.len(), b * t));
    }
    let total_w: f64 = weights.iter().sum::<f64>() * c as f64;
    if total_w <= 0.0 {
        return Err(Error::InvalidArgument("loss weights sum to zero".into()));
    }
    let w: Vec<f64> = weights.iter().flat_map(|&w| core::iter::repeat_n(w / total_w, c)).collect();
    let tgt = tape.constant(target.clone());
    let diff = tape.sub(fwd.xhat, tgt);
    let sq = tape.square(diff);
    let rec = tape.weighted_sum(sq, Rc::new(w));
    let mut parts = LossParts { rec: tape.value(rec).data[0], ..LossParts::default() };
    let mut total = rec;

    if let Some(a) = fwd.adjacency {
        let ch = tape.shape(a)[1] as f64;
        let aa = tape.square(a);
        let tr = tape.matexp_trace(aa);
        let tr = tape.scale(tr, 1.0 / ch);
        let h = tape.add_const(tr, -1.0);
        parts.dag = tape.value(h).data[0];
        let h2 = tape.square(h);
        let term = tape.scale(h2, lambda_dag);
        total = tape.add(total, term);
    }

    if cfg.lambda_freq > 0.0 {
        let mut probes = Vec::new();
        let mut targets = Vec::new();
        for bb in 0..b {
            for ch in 0..c {
                let col: Vec<f64> = (0..t).map(|s| target.at(bb, s, ch)).collect();
                let spec = rfft_amplitudes(&col)?;
                for f in topk_bins(&spec, cfg.k_periods) {
                    probes.push((bb, ch, f));
                    targets.push(spec.amplitudes()[f]);
                }
            }
        }
        if !probes.is_empty() {
            let n = probes.len();
            let amp = tape.band_amplitudes(fwd.xhat, Rc::new(BandPlan { probes }));
            let tv = tape.constant(Tensor::from_vec([1, 1, n], targets));
            let d = tape.sub(amp, tv);
            let d = tape.abs(d);
            let s = tape.sum(d);
            let freq = tape.scale(s, 1.0 / n as f64);
            parts.freq = tape.value(freq).data[0];
            let term = tape.scale(freq, cfg.lambda_freq);
            total = tape.add(total, term);
        }
    }
    parts.total = tape.value(total).data[0];
    Ok((total, parts))
}

/// A configured detector with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CcgModel {
    pub config: CcgConfig,
    pub params: ModelParams,
}

impl CcgModel {
    pub fn new(config: CcgConfig, window: usize, channels: usize, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, window, channels, seed)?;
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Loss and flat gradient for one batch. `input` is what the model sees,
    /// `target` what it must reconstruct.
    pub fn loss_and_grad(
        &self,
        input: &Tensor,
        target: &Tensor,
        weights: &[f64],
        lambda_dag: f64,
    ) -> Result<(LossParts, Vec<f64>)> {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &self.params, &self.config, input)?;
        let (loss, parts) = composite_loss(&mut tape, &fwd, target, weights, &self.config, lambda_dag)?;
        let grads = tape.backward(loss);
        let mut flat = Vec::with_capacity(self.params.len());
        for (&v, block) in fwd.params.iter().zip(&self.params.blocks) {
            match grads.get(v) {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(core::iter::repeat_n(0.0, block.len())),
            }
        }
        Ok((parts, flat))
    }

    /// Loss value only.
    pub fn loss(&self, input: &Tensor, target: &Tensor, weights: &[f64], lambda_dag: f64) -> Result<LossParts> {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &self.params, &self.config, input)?;
        Ok(composite_loss(&mut tape, &fwd, target, weights, &self.config, lambda_dag)?.1)
    }

    /// Per-timestep scores of every window, evaluated `chunk` windows at a
    /// time.
    pub fn score_windows(&self, windows: &WindowBatch, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let (t, c) = (windows.len, windows.channels);
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(windows.batch_size());
        let all: Vec<usize> = (0..windows.batch_size()).collect();
        for idx in all.chunks(chunk) {
            let sub = windows.select(idx);
            let x = Tensor::from_vec([idx.len(), t, c], sub.windows);
            let mut tape = Tape::new();
            let fwd = forward(&mut tape, &self.params, &self.config, &x)?;
            let xhat = tape.value(fwd.xhat);
            let o = &fwd.outputs;
            let s = anomaly_score(&x, xhat, o.c_patch.as_deref(), o.c_assoc.as_deref(), &self.config)?;
            out.extend(s.chunks(t).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Timeline scores for a whole split, windowed at stride 1 and projected.
    pub fn score_split(&self, split: &Matrix, chunk: usize) -> Result<Vec<f64>> {
        let windows = make_windows(split, self.params.window, 1)?;
        let scores = self.score_windows(&windows, chunk)?;
        project_scores(
            &scores,
            &windows.start_indices,
            split.rows(),
            self.config.score_projection,
            self.config.smooth_window,
        )
    }
}
