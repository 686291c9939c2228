use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::autodiff::{Tape, Tensor};

/// `tr exp(M)` by a plain Taylor series.
fn trace_exp_oracle(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut term = Matrix::identity(n);
    let mut total = n as f64;
    for k in 1..60 {
        term = term.matmul(m).unwrap().map(|v| v / k as f64);
        total += term.trace();
    }
    total
}

#[test]
fn adjacency_examples() {
    let p = AdjacencyParams::zeros(4, 2);
    let a = adjacency(&p).unwrap();
    assert!(a.as_slice().iter().all(|&v| (v - 0.268_941_421_369_995_1).abs() < 1e-12));

    let mut p = AdjacencyParams::zeros(2, 1);
    p.u = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
    p.v = Matrix::from_vec(2, 1, vec![2.0, 2.0]).unwrap();
    p.prior.set(0, 1, 0.0);
    let a = adjacency(&p).unwrap();
    assert!((a.get(0, 0) - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert_eq!(a.get(0, 1), 0.0);

    p.prior.set(0, 1, 0.5);
    assert!(adjacency(&p).is_err());
    p.v = Matrix::zeros(3, 1);
    assert!(adjacency(&p).is_err());
}

#[test]
fn dag_penalty_examples() {
    let upper = Matrix::from_fn(5, 5, |i, j| if j > i { 0.9 } else { 0.0 });
    assert!(dag_penalty(&upper).unwrap() < 1e-12);

    let cycle = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let expect = (trace_exp_oracle(&cycle) - 2.0) / 2.0;
    let h = dag_penalty(&cycle).unwrap();
    assert!((h - expect).abs() < 1e-12);
    assert!((h - 0.543_080_634_815_243_7).abs() < 1e-9);

    let mut big = Matrix::zeros(4, 4);
    big.set(1, 2, 1.0);
    big.set(2, 1, 1.0);
    assert!((dag_penalty(&big).unwrap() - expect / 2.0).abs() < 1e-12);
    assert!(dag_penalty(&Matrix::from_fn(2, 2, |_, _| -0.1)).is_err());
}

fn small_model(cfg: CcgConfig, t: usize, c: usize) -> CcgModel {
    CcgModel::new(cfg, t, c, 11).unwrap()
}

fn input(b: usize, t: usize, c: usize, seed: u64) -> Tensor {
    let data = (0..b * t * c).map(|i| libm::sin(0.37 * i as f64 + seed as f64) + 0.1 * (i % 7) as f64).collect();
    Tensor::from_vec([b, t, c], data)
}

fn set_block(m: &mut CcgModel, name: &str, f: impl Fn(usize) -> f64) {
    let i = m.params.index_of(name).unwrap();
    for (k, v) in m.params.blocks[i].data.iter_mut().enumerate() {
        *v = f(k);
    }
}

fn reconstruct(m: &CcgModel, x: &Tensor) -> (Tensor, ViewOutputs) {
    let mut tape = Tape::new();
    let f = forward(&mut tape, &m.params, &m.config, x).unwrap();
    (tape.value(f.xhat).clone(), f.outputs)
}

#[test]
fn constant_bias_equals_unmasked_attention() {
    let cfg = CcgConfig { use_spectral: false, ..CcgConfig::default() };
    let mut m = small_model(cfg, 12, 3);
    let x = input(2, 12, 3, 0);
    set_block(&mut m, "adj.b", |_| 40.0);
    let (a, _) = reconstruct(&m, &x);
    set_block(&mut m, "adj.b", |_| 60.0);
    let (b, _) = reconstruct(&m, &x);
    for (u, v) in a.data.iter().zip(&b.data) {
        assert!((u - v).abs() < 1e-7);
    }
}

#[test]
fn attention_follows_edge_direction() {
    // No edge 0 -> 1: channel 1 must not read channel 0, while channel 0
    // still reads channel 1 through the edge 1 -> 0.
    let cfg = CcgConfig { use_spectral: false, ..CcgConfig::default() };
    let mut m = small_model(cfg, 10, 2);
    m.params.prior.set(0, 1, 0.0);
    let x = input(1, 10, 2, 1);
    let mut y = x.clone();
    for t in 0..10 {
        y.data[t * 2] += 0.5;
    }
    let (a, _) = reconstruct(&m, &x);
    let (b, _) = reconstruct(&m, &y);
    let diff = |ch: usize| (0..10).map(|t| (a.data[t * 2 + ch] - b.data[t * 2 + ch]).abs()).fold(0.0, f64::max);
    assert!(diff(1) < 1e-9, "channel 1 moved by {}", diff(1));
    assert!(diff(0) > 1e-3);
}

#[test]
fn disabled_views_error() {
    let m = small_model(CcgConfig::default(), 8, 2);
    let mut tape = Tape::new();
    let bind = Binding::new(&mut tape, &m.params);
    let x = tape.constant(input(1, 8, 2, 0));
    assert!(matches!(patch_view_forward(&mut tape, &bind, &m.config, x), Err(Error::ViewDisabled("patch"))));
    assert!(matches!(temp_view_forward(&mut tape, &bind, &m.config, x), Err(Error::ViewDisabled("temporal"))));
}

fn patch_only(len: usize, stride: usize) -> CcgConfig {
    CcgConfig {
        use_channel_view: false,
        use_patch_view: true,
        patch_len: len,
        patch_stride: stride,
        ..CcgConfig::default()
    }
}

#[test]
fn patch_starts_anchor_tail() {
    assert_eq!(patch_starts(16, 8, 8), [0, 8]);
    assert_eq!(patch_starts(20, 8, 8), [0, 8, 12]);
    assert_eq!(patch_starts(8, 8, 8), [0]);
}

#[test]
fn patch_cue_examples() {
    let m = small_model(patch_only(12, 12), 12, 2);
    let (_, out) = reconstruct(&m, &input(2, 12, 2, 0));
    // Two channels, one patch each: two tokens, so the diagonal is not 1.
    assert!(out.c_patch.unwrap().iter().all(|v| (0.0..=1.0).contains(v)));

    let m = small_model(patch_only(12, 12), 12, 1);
    let (_, out) = reconstruct(&m, &input(2, 12, 1, 0));
    assert!(out.c_patch.unwrap().iter().all(|&v| v.abs() < 1e-12));

    let mut m = small_model(patch_only(4, 4), 12, 1);
    let last = m.config.layers - 1;
    set_block(&mut m, &alloc::format!("patch.l{last}.wq"), |_| 0.0);
    let (_, out) = reconstruct(&m, &input(1, 12, 1, 0));
    assert!(out.c_patch.unwrap().iter().all(|&v| (v - 2.0 / 3.0).abs() < 1e-12));
}

#[test]
fn symmetric_kl_examples() {
    let p = [0.9, 0.1];
    let s = [0.5, 0.5];
    let direct = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * libm::log(x / y)).sum::<f64>();
    let expect = direct(&p, &s) + direct(&s, &p);
    assert!((symmetric_kl(&p, &s) - expect).abs() < 1e-10);
    assert!((expect - (0.510_825_623_8 + 0.368_064_207_1)).abs() < 1e-9);
    assert_eq!(symmetric_kl(&p, &s), symmetric_kl(&s, &p));
    assert!(symmetric_kl(&p, &p).abs() < 1e-15);
}

#[test]
fn gaussian_prior_rows_normalise() {
    let p = gaussian_prior(&[1.0, 2.0, 0.5, 3.0]);
    for row in p.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(p[0] > p[1] && p[1] > p[2]);
}

#[test]
fn gate_examples() {
    let mut tape = Tape::new();
    let r1 = tape.constant(input(2, 3, 2, 1));
    let r2 = tape.constant(input(2, 3, 2, 2));
    let (x, g) = gate_fuse(&mut tape, &[r1], None).unwrap();
    assert_eq!(x, r1);
    assert!(g.is_none());
    let w = tape.param(Tensor::zeros([1, 4, 2]));
    let b = tape.param(Tensor::zeros([1, 1, 2]));
    let (x, g) = gate_fuse(&mut tape, &[r1, r2], Some((w, b))).unwrap();
    let (v1, v2, vx) = (&tape.value(r1).data, &tape.value(r2).data, &tape.value(x).data);
    for i in 0..vx.len() {
        assert!((vx[i] - 0.5 * (v1[i] + v2[i])).abs() < 1e-15);
    }
    assert!(tape.value(g.unwrap()).data.chunks(2).all(|r| (r[0] + r[1] - 1.0).abs() < 1e-12));
    assert!(gate_fuse(&mut tape, &[], None).is_err());
}

#[test]
fn gate_rows_sum_to_one_in_full_model() {
    let cfg = CcgConfig { use_patch_view: true, use_temp_view: true, ..CcgConfig::default() };
    let mut m = small_model(cfg, 16, 3);
    set_block(&mut m, "gate.w", |k| 0.3 * libm::sin(k as f64));
    let (_, out) = reconstruct(&m, &input(2, 16, 3, 4));
    assert_eq!(out.gate.len(), 2 * 16 * 3);
    for row in out.gate.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(out.c_patch.unwrap().iter().chain(out.c_assoc.as_ref().unwrap()).all(|&v| v >= 0.0 && v.is_finite()));
}

fn fixed_forward(tape: &mut Tape, xhat: Tensor, a: Option<Matrix>) -> Forward {
    let [b, t, c] = xhat.shape;
    let xhat = tape.constant(xhat);
    let adjacency = a.map(|m| tape.constant(Tensor::matrix(&m)));
    Forward {
        params: Vec::new(),
        xhat,
        adjacency,
        outputs: ViewOutputs {
            batch: b,
            window: t,
            channels: c,
            views: vec![View::Channel],
            reconstructions: Vec::new(),
            c_patch: None,
            c_assoc: None,
            gate: Vec::new(),
        },
    }
}

#[test]
fn composite_loss_examples() {
    let cfg = CcgConfig::default();
    let x = input(2, 4, 3, 0);
    let upper = Matrix::from_fn(3, 3, |i, j| if j > i { 0.7 } else { 0.0 });
    let mut tape = Tape::new();
    let f = fixed_forward(&mut tape, x.clone(), Some(upper));
    let (_, parts) = composite_loss(&mut tape, &f, &x, &[1.0; 8], &cfg, 0.05).unwrap();
    assert!(parts.total.abs() < 1e-15);

    let cycle = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let x2 = input(1, 4, 2, 0);
    let mut tape = Tape::new();
    let f = fixed_forward(&mut tape, x2.clone(), Some(cycle));
    let (_, parts) = composite_loss(&mut tape, &f, &x2, &[1.0; 4], &cfg, 0.05).unwrap();
    let h = libm::cosh(1.0) - 1.0;
    assert!((parts.dag - h).abs() < 1e-9);
    assert!((parts.total - 0.05 * h * h).abs() < 1e-12);
    assert!((parts.total - 0.014_747).abs() < 1e-6);

    let shifted = Tensor::from_vec(x.shape, x.data.iter().map(|v| v + 0.3).collect());
    for weights in [[2.0; 8], [1.0; 8]] {
        let mut tape = Tape::new();
        let f = fixed_forward(&mut tape, shifted.clone(), None);
        let (_, parts) = composite_loss(&mut tape, &f, &x, &weights, &cfg, 0.05).unwrap();
        assert!((parts.rec - 0.09).abs() < 1e-12);
    }
    let mut tape = Tape::new();
    let f = fixed_forward(&mut tape, shifted, None);
    assert!(composite_loss(&mut tape, &f, &x, &[1.0; 3], &cfg, 0.05).is_err());
}

#[test]
fn freq_loss_vanishes_on_perfect_reconstruction() {
    let cfg = CcgConfig { lambda_freq: 1.0, ..CcgConfig::default() };
    let x = input(2, 16, 2, 3);
    let mut tape = Tape::new();
    let f = fixed_forward(&mut tape, x.clone(), None);
    let (_, parts) = composite_loss(&mut tape, &f, &x, &[1.0; 32], &cfg, 0.0).unwrap();
    assert!(parts.freq.abs() < 1e-12);
    let scaled = Tensor::from_vec(x.shape, x.data.iter().map(|v| 2.0 * v).collect());
    let mut tape = Tape::new();
    let f = fixed_forward(&mut tape, scaled, None);
    let (_, parts) = composite_loss(&mut tape, &f, &x, &[1.0; 32], &cfg, 0.0).unwrap();
    assert!(parts.freq > 0.1);
}

#[test]
fn full_model_gradient_matches_differences() {
    let cfg = CcgConfig {
        use_patch_view: true,
        use_temp_view: true,
        d_model: 8,
        layers: 1,
        patch_len: 4,
        patch_stride: 4,
        lambda_freq: 0.1,
        ..CcgConfig::default()
    };
    let m = small_model(cfg, 8, 3);
    let x = input(2, 8, 3, 5);
    let target = input(2, 8, 3, 6);
    let w: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 2.0 } else { 1.0 }).collect();
    let (_, grad) = m.loss_and_grad(&x, &target, &w, 0.05).unwrap();
    let theta = m.params.flat_view();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..theta.len()).step_by(7) {
        let mut probe = m.clone();
        let mut t = theta.clone();
        t[i] += h;
        probe.params.set_flat(&t).unwrap();
        let up = probe.loss(&x, &target, &w, 0.05).unwrap().total;
        t[i] -= 2.0 * h;
        probe.params.set_flat(&t).unwrap();
        let down = probe.loss(&x, &target, &w, 0.05).unwrap().total;
        let num = (up - down) / (2.0 * h);
        let err = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-7);
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn scoring_a_split_covers_every_row() {
    let m = small_model(CcgConfig::preset("smd").unwrap(), 10, 2);
    let split = Matrix::from_fn(25, 2, |i, j| libm::sin(i as f64 * 0.3 + j as f64));
    let s = m.score_split(&split, 4).unwrap();
    assert_eq!(s.len(), 25);
    assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
}
