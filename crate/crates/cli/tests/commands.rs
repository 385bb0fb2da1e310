use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use depth_dissect::dataset::load_dataset;
use depth_dissect::parallel;
use depth_dissect::record::{output_dir, RunRecord, OUT_ENV, RUN_RECORD};
use depth_dissect_core::bins::BinningScheme;
use depth_dissect_core::dissect::SelectivityReport;
use depth_dissect_core::eval::{dissect_network, evaluate};
use depth_dissect_core::net::{NetConfig, Network};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depth-dissect"))
        .args(args)
        .current_dir(cwd)
        .env_remove(OUT_ENV)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cli(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn train_dissect_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    ok(
        &["gen-data", "--seed", "1", "--n", "6", "--out", "train"],
        cwd,
    );
    ok(
        &[
            "gen-data", "--seed", "2", "--n", "4", "--split", "test", "--out", "test",
        ],
        cwd,
    );
    ok(
        &[
            "train",
            "--data",
            "train",
            "--epochs",
            "1",
            "--batch-size",
            "3",
            "--lambda",
            "0.5",
            "--out",
            "run/model",
        ],
        cwd,
    );
    let model = "run/model/model.ckpt";
    let stdout = ok(
        &[
            "dissect",
            "--model",
            model,
            "--data",
            "test",
            "--layer",
            "d",
            "--out",
            "run/dissect",
        ],
        cwd,
    );
    assert!(stdout.starts_with("d: mean DS"), "{stdout}");
    ok(
        &[
            "eval", "--model", model, "--data", "test", "--out", "run/eval",
        ],
        cwd,
    );
    ok(
        &[
            "ablate",
            "--model",
            model,
            "--data",
            "test",
            "--rank-data",
            "train",
            "--out",
            "run/ablate",
        ],
        cwd,
    );
    ok(
        &[
            "correct",
            "--model",
            model,
            "--train-data",
            "train",
            "--data",
            "test",
            "--out",
            "run/correct",
        ],
        cwd,
    );
    ok(
        &[
            "attack",
            "--model",
            model,
            "--data",
            "test",
            "--limit",
            "2",
            "--out",
            "run/attack",
        ],
        cwd,
    );

    let report: SelectivityReport = serde_json::from_str(
        &fs::read_to_string(cwd.join("run/dissect/selectivity_d.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.split, "test");
    assert!(report.units.iter().all(|u| u.assigned_bin.is_some()));
    assert!((0.0..=1.0).contains(&report.mean_ds));

    let record: RunRecord = serde_json::from_str(
        &fs::read_to_string(cwd.join("run/dissect").join(RUN_RECORD)).unwrap(),
    )
    .unwrap();
    assert_eq!(record.command, "dissect");
    assert_eq!(record.input_hashes.len(), 2);

    ok(&["report", "--run", "run", "--out", "run/report"], cwd);
    let first = fs::read_to_string(cwd.join("run/report/index.html")).unwrap();
    ok(&["report", "--run", "run", "--out", "run/report"], cwd);
    let second = fs::read_to_string(cwd.join("run/report/index.html")).unwrap();
    assert_eq!(first, second);
    assert!(first.contains("<svg") && first.contains("</svg>"));
    let svgs: Vec<_> = fs::read_dir(cwd.join("run/report"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "svg"))
        .collect();
    assert_eq!(svgs.len(), 2, "{svgs:?}");
    for p in svgs {
        let svg = fs::read_to_string(p).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}

#[test]
fn report_on_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = cli(&["report", "--run", "empty", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(cli(&["train"], dir.path()).status.code(), Some(2));
    let missing = cli(
        &[
            "eval",
            "--model",
            "nope.ckpt",
            "--data",
            "nope",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let env_root = dir.path().join("env");
    let run = |explicit: Option<&str>, env: bool| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_depth-dissect"));
        c.args(["baseline-mc", "--trials", "1000"])
            .current_dir(dir.path())
            .env_remove(OUT_ENV);
        if let Some(o) = explicit {
            c.args(["--out", o]);
        }
        if env {
            c.env(OUT_ENV, &env_root);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(None, false);
    assert!(dir
        .path()
        .join("runs/baseline-mc")
        .join(RUN_RECORD)
        .exists());
    run(None, true);
    assert!(env_root.join("baseline-mc").join(RUN_RECORD).exists());
    run(Some("explicit"), true);
    assert!(dir.path().join("explicit").join(RUN_RECORD).exists());
    assert_eq!(output_dir(Some(Path::new("x")), "eval"), Path::new("x"));
}

#[test]
fn threaded_passes_match_the_sequential_ones() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["gen-data", "--seed", "4", "--n", "5", "--out", "data"],
        dir.path(),
    );
    let (_, samples) = load_dataset(&dir.path().join("data")).unwrap();
    let net = Network::<f32>::build(NetConfig::default(), 2).unwrap();
    let c = net.config();
    let scheme = BinningScheme::sid(c.d_min, c.d_max, 64).unwrap();

    let sequential = dissect_network(&net, &samples, "d", &scheme).unwrap();
    assert_eq!(
        parallel::dissect(&net, &samples, "d", &scheme, 1).unwrap(),
        sequential
    );
    let threaded = parallel::dissect(&net, &samples, "d", &scheme, 3).unwrap();
    assert_eq!(threaded.counts, sequential.counts);
    for (a, b) in threaded.sums.iter().zip(&sequential.sums) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    let m1 = evaluate(&net, &samples).unwrap();
    assert_eq!(parallel::evaluate(&net, &samples, 1).unwrap(), m1);
    let m3 = parallel::evaluate(&net, &samples, 3).unwrap();
    assert!((m3.delta1 - m1.delta1).abs() < 1e-12 && (m3.rms - m1.rms).abs() < 1e-9);
}
