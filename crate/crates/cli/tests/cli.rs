use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epk_cli::experiment::ExperimentConfig;

fn epk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epk"))
        .args(args)
        .env("EPK_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = epk(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small blobs, a trained trajectory and a query file in a fresh directory.
fn prepared() -> (tempfile::TempDir, PathBuf, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"means":[[1,4],[4,1],[5,5]],"std":1.0,"per_class_count":10,"dim":3,"seed":0}"#,
    )
    .unwrap();
    let data = dir.path().join("data.csv");
    ok(&["data", "gen-blobs", "--spec", s(&spec), "--out", s(&data)]);
    let cfg = dir.path().join("train.json");
    fs::write(
        &cfg,
        r#"{"model":{"layers":[3,4,3],"activation":"relu","head":"log_softmax"},"lr":0.1,"steps":6,"seed":1}"#,
    )
    .unwrap();
    let traj = dir.path().join("run.epk");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&traj)]);
    let q = dir.path().join("q.csv");
    fs::write(&q, "x0,x1,x2\n1,4,0\n4,1,0\n2.5,2.5,0.5\n").unwrap();
    (dir, data, traj, q)
}

#[test]
fn subcommands_write_expected_headers() {
    let (dir, data, traj, q) = prepared();
    let d = dir.path();
    let base = ["--traj", s(&traj), "--data", s(&data)];
    let with = |cmd: &[&str], extra: &[&str]| {
        let mut v: Vec<&str> = cmd.to_vec();
        v.extend_from_slice(&base);
        v.extend_from_slice(extra);
        ok(&v);
    };
    let p = |n: &str| d.join(n);
    with(&["predict"], &["--inputs", s(&q), "--method", "ntkN", "--out", s(&p("pred.csv"))]);
    with(&["compare"], &["--inputs", s(&q), "--steps", "1,4", "--out", s(&p("cmp.csv"))]);
    with(&["align"], &["--inputs", s(&q), "--steps", "4", "--out", s(&p("align.csv"))]);
    with(&["contrib"], &["--inputs", s(&q), "--point", "2", "--out", s(&p("contrib.csv"))]);
    with(&["gram"], &["--points", s(&q), "--steps", "3", "--out", s(&p("gram.csv")), "--report", s(&p("psd.json"))]);
    with(&["pathdiag"], &["--resolution", "3", "--out", s(&p("path.csv"))]);
    with(
        &["gp"],
        &["--grid", "0:5:3,0:5:2", "--train-points", "5", "--mc-samples", "50", "--out", s(&p("field.csv"))],
    );

    assert_eq!(header(&p("pred.csv")), "point,method,steps,predicted,logit_0,logit_1,logit_2");
    assert!(fs::read_to_string(p("pred.csv")).unwrap().contains(",ntkN,"));
    assert_eq!(
        header(&p("cmp.csv")),
        "point,steps,model_0,model_1,model_2,kernel_0,kernel_1,kernel_2,max_abs_err"
    );
    assert_eq!(fs::read_to_string(p("cmp.csv")).unwrap().lines().count(), 1 + 2 * 3);
    assert_eq!(
        header(&p("align.csv")),
        "s,epk_dpk_gap,epk_ntk0_gap,epk_ntkN_gap,cum_epk_dpk,cum_epk_ntk0,cum_epk_ntkN"
    );
    assert_eq!(fs::read_to_string(p("align.csv")).unwrap().lines().count(), 1 + 6);
    assert_eq!(header(&p("contrib.csv")), "train_index,label,distance,contrib_0,contrib_1,contrib_2");
    assert_eq!(fs::read_to_string(p("contrib.csv")).unwrap().lines().count(), 1 + 30);
    assert_eq!(fs::read_to_string(p("gram.csv")).unwrap().lines().count(), 1 + 9);
    let psd: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("psd.json")).unwrap()).unwrap();
    assert_eq!(psd["pass"], true);
    assert_eq!(header(&p("path.csv")), "t,accuracy,mean_loss,l2_norm,grad_dot_direction");
    assert_eq!(
        header(&p("field.csv")),
        "x0,x1,x2,mean_0,mean_1,mean_2,var_0,var_1,var_2,total_var,mcstd_0,mcstd_1,mcstd_2,kernel_value"
    );
    assert_eq!(fs::read_to_string(p("field.csv")).unwrap().lines().count(), 1 + 6);
    assert!(p("field.meta.json").exists());
}

#[test]
fn exit_codes_follow_error_kind() {
    let (dir, data, traj, q) = prepared();
    let d = dir.path();

    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"model":{"layers":[3,4,3],"activation":"relu","head":"log_softmax"},"lr":0.1,"steps":0,"seed":1}"#)
        .unwrap();
    let out = epk(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&d.join("x.epk"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = epk(&["predict", "--traj", s(&d.join("missing.epk")), "--data", s(&data), "--inputs", s(&q), "--out", s(&d.join("p.csv"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // Same shape, different rows: the trajectory was not trained on this set.
    let other = d.join("other.csv");
    let text = fs::read_to_string(&data).unwrap().replacen(",0\n", ",1\n", 1);
    fs::write(&other, text).unwrap();
    let out = epk(&["predict", "--traj", s(&traj), "--data", s(&other), "--inputs", s(&q), "--out", s(&d.join("p.csv"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("p.csv").exists());
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = configs().join("smoke.json");
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&a)]);
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&b)]);
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for f in ["compare_T1.csv", "compare_T8.csv", "preds.csv", "align.csv", "contrib.csv", "field.csv", "trajectory.epk"] {
        assert!(names.iter().any(|n| n == f), "missing {f}");
    }
    for n in names.iter().filter(|n| n.as_str() != "manifest.json") {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["max_abs_err"].as_array().unwrap().len(), 2);
    assert!(m["max_step_reconstruction_error"].as_f64().unwrap() <= 1e-12);
    let preds = fs::read_to_string(a.join("preds.csv")).unwrap();
    for method in [",epk,", ",dpk,", ",ntk0,", ",ntkN,"] {
        assert_eq!(preds.matches(method).count(), 6, "{method}");
    }
}

#[test]
fn failed_run_leaves_no_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&fs::read_to_string(configs().join("smoke.json")).unwrap()).unwrap();
    cfg.train.steps = 0;
    let path = dir.path().join("cfg.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = epk(&["run", "--config", s(&path), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());

    // A failure after files were written also cleans up.
    cfg.train.steps = 3;
    cfg.contrib.as_mut().unwrap().point = epk_cli::experiment::PointRef::Index(99);
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = epk(&["run", "--config", s(&path), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("contrib"));
    assert!(!out_dir.exists());
}

#[test]
fn shipped_configs_round_trip() {
    for name in ["toy.json", "mnist.json", "smoke.json"] {
        let text = fs::read_to_string(configs().join(name)).unwrap();
        let cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
        cfg.validate().unwrap();
        let again: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
    let with_typo = r#"{"name":"x","data":{"kind":"csv","path":"a"},"test":{"kind":"csv","path":"b"},"test_points":1,
        "train":{"model":{"layers":[2,3],"activation":"relu","head":"linear"},"lr":0.1,"steps":1,"seed":0},"quadature_steps":[1]}"#;
    assert!(serde_json::from_str::<ExperimentConfig>(with_typo).is_err());
}
