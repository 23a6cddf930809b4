use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ionreadout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ionreadout")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_calibrate_classify_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cal = tmp.path().join("cal");
    let cls = tmp.path().join("cls");
    let rep = tmp.path().join("rep");
    let cfg = tmp.path().join("cfg.toml");
    fs::write(
        &cfg,
        "experiment = \"single_exposure\"\nseed = 4\ntrials = 4000\n\
         [calibration]\ntrials = 4000\n[classify]\nn_max = 20\nmethods = [\"threshold\", \"ml\", \"adaptive\"]\n",
    )
    .unwrap();

    let out = ok(&ionreadout(&["simulate", "--config", p(&cfg), "--out-dir", p(&data)]));
    assert!(out.contains("frames.irf1"));
    let frames = data.join("frames.irf1");
    let labels = data.join("labels.txt");
    assert_eq!(fs::read_to_string(&labels).unwrap().lines().count(), 4000);

    // The manifest written by `simulate` is itself a loadable config.
    let manifest = data.join("manifest.toml");
    ok(&ionreadout(&[
        "calibrate",
        "--config",
        p(&manifest),
        "--frames",
        p(&frames),
        "--labels",
        p(&labels),
        "--out-dir",
        p(&cal),
    ]));
    assert!(cal.join("calibration.csv").exists());
    assert!(cal.join("thresholds.csv").exists());

    ok(&ionreadout(&[
        "classify",
        "--config",
        p(&cfg),
        "--frames",
        p(&frames),
        "--labels",
        p(&labels),
        "--calibration",
        p(&cal),
        "--out-dir",
        p(&cls),
    ]));
    let verdicts = cls.join("verdicts.csv");
    let text = fs::read_to_string(&verdicts).unwrap();
    assert!(text.lines().next().unwrap().starts_with("method,N,trial,ion,truth,verdict,R"));

    ok(&ionreadout(&["report", "--verdicts", p(&verdicts), "--out-dir", p(&rep)]));
    let reports = fs::read_to_string(rep.join("reports.csv")).unwrap();
    let ml20 = reports
        .lines()
        .find(|l| l.starts_with("M,20,"))
        .expect("ML row for N=20");
    let eps: f64 = ml20.split(',').nth(2).unwrap().parse().unwrap();
    assert!(eps < 0.01, "{ml20}");
}

#[test]
fn crosstalk_subcommand_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ionreadout(&[
        "crosstalk",
        "--experiment",
        "crosstalk_study",
        "--seed",
        "2",
        "--out-dir",
        p(tmp.path()),
    ]));
    let t = fs::read_to_string(tmp.path().join("crosstalk.csv")).unwrap();
    assert!(t.starts_with("rank,ion0,ion1,ion2,ion3,airy_ion0"));
    assert!(tmp.path().join("crosstalk_roi.csv").exists());
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["run".into(), "--experiment".into(), "single_exposure".into()],
        vec!["run".into(), "--experiment".into(), "nonsense".into(), "--seed".into(), "1".into()],
        vec!["report".into(), "--verdicts".into(), p(&tmp.path().join("missing.csv")).into()],
        vec!["run".into(), "--experiment".into(), "qunybble".into(), "--seed".into(), "1".into(), "--trials".into(), "0".into()],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = ionreadout(&args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error: "), "{args:?}: {err}");
    }
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "experiment = \"single_exposure\"\nseed = 1\nunknown_key = 3\n").unwrap();
    let out = ionreadout(&["run", "--config", p(&bad)]);
    assert!(!out.status.success());
}
