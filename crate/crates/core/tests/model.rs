use mtsad_core::autodiff::{Tape, Tensor};
use mtsad_core::ccg::{
    adjacency, anomaly_score, dag_penalty, forward, project_scores, CcgConfig, CcgModel, ScoreProjection,
};
use mtsad_core::data::make_windows;
use mtsad_core::numerics::moving_average;
use mtsad_core::synth::{generate, AnomalyKind, SynthConfig};
use mtsad_core::training::{clip_grad_norm, schedules, train, TrainConfig};
use proptest::prelude::*;

fn tensor(shape: [usize; 3], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 0.618 + seed as f64 * 0.37).sin() * 2.0).collect();
    Tensor::from_vec(shape, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_finite(
        b in 1usize..=4,
        t in 8usize..=32,
        c in 1usize..=8,
        d in prop::sample::select(vec![4usize, 8, 16]),
        patch in any::<bool>(),
        temp in any::<bool>(),
        spectral in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let cfg = CcgConfig {
            use_patch_view: patch,
            use_temp_view: temp,
            use_spectral: spectral,
            d_model: d,
            heads: 2,
            patch_len: 4,
            patch_stride: 2,
            ..CcgConfig::default()
        };
        let model = CcgModel::new(cfg.clone(), t, c, seed).unwrap();
        let x = tensor([b, t, c], seed);
        let mut tape = Tape::new();
        let f = forward(&mut tape, &model.params, &cfg, &x).unwrap();
        prop_assert!(tape.value(f.xhat).data.iter().all(|v| v.is_finite()));
        let o = &f.outputs;
        let nv = o.views.len();
        for row in o.gate.chunks(nv) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for cue in [&o.c_patch, &o.c_assoc].into_iter().flatten() {
            prop_assert!(cue.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        let loss = model.loss(&x, &x, &vec![1.0; b * t], cfg.lambda_dag).unwrap();
        prop_assert!(loss.non_finite().is_none());
    }

    #[test]
    fn clipping_never_increases_the_norm(g in prop::collection::vec(-100.0..100.0f64, 1..64), max in 1e-3..50.0f64) {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut clipped = g.clone();
        let before = clip_grad_norm(&mut clipped, max);
        prop_assert!((before - norm(&g)).abs() < 1e-9);
        prop_assert!(norm(&clipped) <= before.min(max) * (1.0 + 1e-12));
        let mut free = g.clone();
        clip_grad_norm(&mut free, f64::INFINITY);
        prop_assert_eq!(free, g);
    }

    #[test]
    fn mean_projection_preserves_the_mean(t in 1usize..20, k in 1usize..10, seed in 0u64..100) {
        let scores: Vec<Vec<f64>> = (0..k).map(|w| (0..t).map(|i| ((w * t + i) as f64 + seed as f64).cos()).collect()).collect();
        let starts: Vec<usize> = (0..k).map(|w| w * t).collect();
        let out = project_scores(&scores, &starts, k * t, ScoreProjection::Mean, 1).unwrap();
        let all: f64 = scores.iter().flatten().sum::<f64>() / (k * t) as f64;
        prop_assert!((out.iter().sum::<f64>() / out.len() as f64 - all).abs() < 1e-12);
    }
}

#[test]
fn inactive_views_contribute_nothing() {
    let x = tensor([2, 10, 3], 1);
    let xhat = tensor([2, 10, 3], 2);
    let base = CcgConfig::default();
    let reference = anomaly_score(&x, &xhat, None, None, &base).unwrap();
    for (dp, dt) in [(0.0, 0.0), (0.5, 0.5), (7.0, 3.0)] {
        let cfg = CcgConfig { delta_p: dp, delta_t: dt, ..base.clone() };
        assert_eq!(anomaly_score(&x, &xhat, None, None, &cfg).unwrap(), reference);
        assert!(anomaly_score(&x, &xhat, Some(&[0.0; 20]), None, &cfg).is_err());
    }
    let cue = vec![0.25; 20];
    let patch = CcgConfig { use_patch_view: true, ..base.clone() };
    let with = anomaly_score(&x, &xhat, Some(&cue), None, &patch).unwrap();
    for (a, b) in with.iter().zip(&reference) {
        assert!((a - b - 0.5 * 0.25).abs() < 1e-12);
    }
}

fn desk_windows(channels: usize, len: usize, stride: usize) -> mtsad_core::data::WindowBatch {
    let cfg = SynthConfig {
        channels,
        train_len: 800,
        test_len: 400,
        segments: 2,
        kind: AnomalyKind::Spike,
        ..SynthConfig::default()
    };
    let ds = mtsad_core::data::zscore(&generate(&cfg).unwrap()).unwrap();
    make_windows(&ds.train, len, stride).unwrap()
}

#[test]
fn dag_penalty_falls_during_training() {
    let cfg = CcgConfig { d_model: 8, use_spectral: false, lambda_dag: 0.5, mask_rate: 0.0, ..CcgConfig::default() };
    let windows = desk_windows(6, 16, 3);
    let mut model = CcgModel::new(cfg, 16, 6, 0).unwrap();
    let h0 = dag_penalty(&adjacency(&model.params.adjacency_params().unwrap()).unwrap()).unwrap();
    let tc = TrainConfig { lr_peak: 1e-2, warmup_steps: 10, batch_size: 4, epochs: 4, ..TrainConfig::default() };
    let trace = train(&mut model, &windows, &tc, None).unwrap();
    assert!(trace.len() >= 200, "{} steps", trace.len());
    let h: Vec<f64> = trace.iter().map(|r| r.dag).collect();
    assert!((h[0] - h0).abs() < 1e-12);
    let ma: Vec<f64> = h.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let last = *ma.last().unwrap();
    assert!(last < ma[0], "h moving average {} -> {last}", ma[0]);
    let tail = &ma[ma.len() / 2..];
    assert!(tail.windows(2).filter(|w| w[1] > w[0]).count() < tail.len() / 4, "no downward trend in {tail:?}");
}

#[test]
fn desk_loss_trace_descends_and_repeats() {
    let cfg = CcgConfig::preset("desk").unwrap();
    let windows = desk_windows(8, 32, 8);
    let tc =
        TrainConfig { lr_peak: 1e-2, warmup_steps: 10, batch_size: 8, epochs: cfg.epochs, ..TrainConfig::default() };
    let mut a = CcgModel::new(CcgConfig { d_model: 16, ..cfg.clone() }, 32, 8, 4).unwrap();
    let mut b = a.clone();
    let ta = train(&mut a, &windows, &tc, None).unwrap();
    let tb = train(&mut b, &windows, &tc, None).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.params, b.params);
    let tail: f64 = ta[ta.len() - 10..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    assert!(tail < ta[0].total, "last-10 mean {tail} vs initial {}", ta[0].total);
}

#[test]
fn schedules_are_continuous_and_ramp() {
    let tc = TrainConfig { lr_peak: 2e-3, warmup_steps: 50, ..TrainConfig::default() };
    let total = 400;
    let (at_junction, _) = schedules(50, total, 0.0, &tc, 0.05);
    let (after, _) = schedules(51, total, 0.0, &tc, 0.05);
    assert!((at_junction - tc.lr_peak).abs() < 1e-15);
    assert!(after < at_junction && at_junction - after < 1e-4 * tc.lr_peak);
    let mut prev = 0.0;
    for step in 0..total {
        let epochs = step as f64 / 100.0;
        let (_, lam) = schedules(step, total, epochs, &tc, 0.05);
        assert!(lam >= prev);
        if epochs >= 2.0 {
            assert_eq!(lam, 0.05);
        }
        prev = lam;
    }
}

#[test]
fn moving_average_smooths_max_projection() {
    let scores = vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 3.0, 0.0]];
    let out = project_scores(&scores, &[0, 1], 5, ScoreProjection::MaxSmooth, 3).unwrap();
    let max = [0.0, 1.0, 0.0, 3.0, 0.0];
    assert_eq!(out, moving_average(&max, 3).unwrap());
}
