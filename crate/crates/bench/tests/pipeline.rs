use std::fs;
use std::path::Path;
use std::process::Command;

use mtsad_bench::config::{BenchConfig, PolicyKind};
use mtsad_bench::report::{self, competition_ranks};
use mtsad_bench::run::EffectivenessReport;
use mtsad_bench::{io, Bench};
use proptest::prelude::*;
use serde_json::json;

fn synth(name: &str, channels: usize, seed: u64) -> serde_json::Value {
    json!({
        "name": name,
        "source": "synthetic",
        "synth": { "channels": channels, "train_len": 400, "test_len": 480, "kind": "spike", "segments": 4, "segment_len": 20, "seed": seed }
    })
}

fn config(out: &Path, datasets: serde_json::Value, methods: serde_json::Value, seeds: &[u64]) -> BenchConfig {
    serde_json::from_value(json!({
        "datasets": datasets,
        "methods": methods,
        "seeds": seeds,
        "window": 24,
        "strides": { "train": 4 },
        "out": out,
        "data_root": out,
    }))
    .unwrap()
}

fn small_ccg(name: &str) -> serde_json::Value {
    json!({ "name": name, "kind": "ccg", "preset": "desk", "overrides": { "d_model": 8, "epochs": 1 } })
}

#[test]
fn seed_grid_aggregates_and_tables_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        json!([synth("a", 4, 1)]),
        json!([{ "name": "ar", "kind": "linear_ar", "order": 4 }]),
        &[0, 1, 2],
    );
    let bench = Bench::new(cfg).unwrap();
    let out = bench.effectiveness().unwrap();
    assert_eq!(out.failures, 0);
    assert_eq!(out.report.cells.len(), 3);
    assert_eq!(out.report.aggregates.len(), 1);
    let agg = out.report.aggregates[0].aggregate.as_ref().unwrap();
    let vals: Vec<f64> = out.report.cells.iter().map(|c| c.report.as_ref().unwrap().metrics.vus_roc).collect();
    assert!((agg.mean.vus_roc - vals.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    for seed in 0..3 {
        assert!(bench.run_dir.join(format!("reports/effectiveness/ar__a__seed{seed}.json")).is_file());
        assert!(bench.run_dir.join(format!("scores/ar__a__seed{seed}.csv")).is_file());
    }

    let written = report::emit_tables(&bench.run_dir).unwrap();
    let first: Vec<Vec<u8>> = written.iter().map(|p| fs::read(p).unwrap()).collect();
    let reloaded: EffectivenessReport = io::read_json(&bench.run_dir.join("reports/effectiveness.json")).unwrap();
    assert_eq!(reloaded, out.report);
    let again = report::emit_tables(&bench.run_dir).unwrap();
    assert_eq!(written, again);
    assert_eq!(first, again.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>());
    let main = fs::read_to_string(bench.run_dir.join("tables/main.md")).unwrap();
    assert!(main.contains(&report::fmt_mean_std(agg.mean.vus_roc, agg.std.vus_roc)), "{main}");
}

#[test]
fn score_files_and_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        json!([synth("a", 3, 2)]),
        json!([
            { "name": "ext", "kind": "score_file", "path": "scores/{dataset}_{seed}.csv" },
            { "name": "flat", "kind": "constant", "value": 1.5 }
        ]),
        &[0, 1],
    );
    // Seed 0 gets oracle scores; seed 1 has no file and must fail alone.
    let labels = mtsad_bench::run::load_spec(&cfg, &cfg.datasets[0]).unwrap().test_labels;
    let oracle: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    io::write_scores(&dir.path().join("scores/a_0.csv"), &oracle).unwrap();

    let bench = Bench::new(cfg).unwrap();
    let out = bench.effectiveness().unwrap();
    assert_eq!(out.failures, 1);
    let cell = |m: &str, s: u64| out.report.cells.iter().find(|c| c.method == m && c.seed == s).unwrap();
    let perfect = cell("ext", 0).report.as_ref().unwrap().metrics;
    assert_eq!((perfect.auroc, perfect.f1), (1.0, 1.0));
    assert!(cell("ext", 1).error.as_ref().unwrap().contains("a_1.csv"));
    assert!(cell("flat", 0).report.as_ref().unwrap().metrics.auroc == 0.5);
    let agg = |m: &str| out.report.aggregates.iter().find(|a| a.method == m).unwrap().aggregate.clone();
    assert!(agg("ext").is_none());
    assert!(agg("flat").is_some());

    report::emit_tables(&bench.run_dir).unwrap();
    let main = fs::read_to_string(bench.run_dir.join("tables/main.md")).unwrap();
    let ext_row = main.lines().find(|l| l.starts_with("| ext")).unwrap();
    assert_eq!(ext_row, "| ext | n/a | n/a | n/a |");

    let rob = bench.robustness().unwrap();
    assert_eq!(rob.failures, 1);
    assert!(rob.report.rows[0].error.is_some());
    assert!(rob.report.rows[1].summary.as_ref().unwrap().families.iter().all(|f| f.retention == 1.0));
}

#[test]
fn transfer_diagonal_padding_and_checkpoint_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let mk = || {
        let mut cfg = config(
            dir.path(),
            json!([synth("a", 4, 3), synth("b", 4, 4), synth("wide", 6, 5)]),
            json!([
                { "name": "ar", "kind": "linear_ar", "order": 4 },
                { "name": "ar_pad", "kind": "linear_ar", "order": 4, "transfer": "pad" },
                small_ccg("ccg"),
                { "name": "flat", "kind": "constant" }
            ]),
            &[0],
        );
        cfg.workers = 2;
        cfg
    };
    let bench = Bench::new(mk()).unwrap();
    let eff = bench.effectiveness().unwrap();
    assert_eq!(eff.failures, 0);
    // `ar` and `ar_pad` fit the same model, so they share checkpoints.
    assert_eq!(bench.training_counts(), (6, 3));

    let tr = bench.transfer().unwrap();
    assert_eq!(tr.failures, 0, "{:?}", tr.report);
    // Every source model was already trained by the effectiveness grid.
    assert_eq!(bench.training_counts().0, 6);
    assert_eq!(tr.report.skipped.len(), 1);
    let matrix = |m: &str| tr.report.matrices.iter().find(|x| x.method == m).unwrap();
    assert_eq!(matrix("ccg").policy, PolicyKind::Adapt);
    assert_eq!(matrix("ar").policy, PolicyKind::Native);
    for m in ["ar", "ar_pad", "ccg"] {
        let mx = matrix(m);
        for (i, d) in mx.datasets.iter().enumerate() {
            let diag = mx.cell(i, i).metrics.unwrap();
            let cell = eff.report.cells.iter().find(|c| c.method == m && &c.dataset == d && c.seed == 0).unwrap();
            assert_eq!(diag, cell.report.as_ref().unwrap().metrics, "{m} on {d}");
        }
        assert!(mx.cells.iter().all(|c| c.metrics.is_some()));
    }
    // Same width: padding is the identity, so it matches native scoring.
    assert_eq!(matrix("ar").cell(0, 1).metrics, matrix("ar_pad").cell(0, 1).metrics);

    // A fresh process over the same output directory reuses every checkpoint.
    let again = Bench::new(mk()).unwrap();
    let eff2 = again.effectiveness().unwrap();
    assert_eq!(again.training_counts(), (0, 9));
    assert_eq!(eff2.report, eff.report);
    report::emit_tables(&bench.run_dir).unwrap();
    assert!(bench.run_dir.join("tables/transfer_summary.md").is_file());
}

fn write_config(dir: &Path, methods: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("run.json");
    let cfg = json!({ "datasets": [synth("a", 3, 6)], "methods": methods, "seeds": [0], "window": 24, "out": "out" });
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_bench");
    let dir = tempfile::tempdir().unwrap();
    let status = |cfg: &Path, verb: &str| {
        Command::new(bin).current_dir(dir.path()).args([verb, "--config"]).arg(cfg).output().unwrap()
    };

    let ok = write_config(dir.path(), json!([{ "name": "flat", "kind": "constant" }]));
    let out = status(&ok, "effectiveness");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = status(&ok, "report");
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("main.md"));

    let partial =
        write_config(dir.path(), json!([{ "name": "ext", "kind": "score_file", "path": "missing/{seed}.csv" }]));
    assert_eq!(status(&partial, "effectiveness").status.code(), Some(2));

    let bad = write_config(dir.path(), json!([{ "name": "x", "kind": "ccg", "preset": "nope" }]));
    let out = status(&bad, "effectiveness");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

proptest! {
    #[test]
    fn ranks_follow_descending_values(v in prop::collection::vec(prop::option::of(0.0..1.0f64), 1..12)) {
        let ranks = competition_ranks(&v);
        for (i, a) in v.iter().enumerate() {
            prop_assert_eq!(a.is_some(), ranks[i].is_some());
            for (j, b) in v.iter().enumerate() {
                if let (Some(a), Some(b)) = (a, b) {
                    let (ra, rb) = (ranks[i].unwrap(), ranks[j].unwrap());
                    let (ka, kb) = ((a * 1e3).round(), (b * 1e3).round());
                    prop_assert_eq!(ka == kb, ra == rb);
                    prop_assert_eq!(ka > kb, ra < rb);
                }
            }
        }
        let best = ranks.iter().flatten().min();
        prop_assert_eq!(best.copied(), v.iter().any(Option::is_some).then_some(1));
    }

    #[test]
    fn run_id_ignores_output_and_workers(workers in 1usize..16, seed in 0u64..5, out in "[a-z]{1,8}") {
        let base = BenchConfig::desk_suite();
        let moved = BenchConfig { workers, out: out.into(), ..base.clone() };
        prop_assert_eq!(base.run_id(), moved.run_id());
        let reseeded = BenchConfig { seeds: vec![seed + 10], ..base.clone() };
        prop_assert_ne!(base.run_id(), reseeded.run_id());
    }
}

fn shipped(name: &str) -> BenchConfig {
    BenchConfig::from_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

#[test]
fn shipped_configs_load() {
    let desk = shipped("desk.json");
    let suite = BenchConfig::desk_suite();
    assert_eq!(desk.datasets, suite.datasets);
    let resolved = |c: &BenchConfig| c.methods.iter().map(|m| m.resolve().unwrap()).collect::<Vec<_>>();
    assert_eq!(resolved(&desk), resolved(&suite));
    assert_eq!(desk.seeds, suite.seeds);

    let dir = tempfile::tempdir().unwrap();
    let msds = BenchConfig { out: dir.path().to_path_buf(), ..shipped("msds_fixture.json") };
    let bench = Bench::new(msds).unwrap();
    assert_eq!(bench.dataset("msds").unwrap().data.channels(), 4);
    let out = bench.effectiveness().unwrap();
    assert_eq!(out.failures, 0, "{:?}", out.report.cells);
}
