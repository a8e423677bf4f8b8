use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdrecon"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn column(path: &Path, idx: usize) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(idx).unwrap().to_string())
        .collect()
}

#[test]
fn fit_writes_artifacts_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["fit", "--input", &fixture("fragments.csv"), "--out-dir", "fit", "--emit-scores"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["mean.csv", "covariance.csv", "mask.csv", "eigensystem.csv", "scores.csv"] {
        let text = fs::read_to_string(tmp.path().join("fit").join(f)).unwrap();
        assert!(text.starts_with("# config: command=fit "), "{f}");
    }
    let out = String::from_utf8(o.stdout).unwrap();
    for key in ["bandwidths: h_x=", "sigma2: ", "mask coverage: 100.0%", "K_available: "] {
        assert!(out.contains(key), "{key} missing from\n{out}");
    }
}

#[test]
fn missing_input_is_an_io_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["fit", "--input", "no/such/file.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/file.csv"));
}

#[test]
fn zero_bandwidth_is_rejected_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["fit", "--input", &fixture("fragments.csv"), "--h-gamma", "0", "--out-dir", "out"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("h-gamma"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn error_json_is_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["--error-json", "fit", "--input", "missing.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(v["error"]["code"], 2);
    assert_eq!(v["error"]["kind"], "io");
    assert!(v["error"]["message"].as_str().unwrap().contains("missing.csv"));
}

#[test]
fn computation_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    // Only fragments: no complete curves to run GCV on.
    let o = run(tmp.path(), &["gcv-report", "--input", &fixture("band.csv"), "--observed", "0.2,0.4"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn unknown_dgp_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["simulate", "--dgp", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_composes_with_flags_winning() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.cfg"), "# comment\nh_gamma = 0.1\ngrid-len=21\nemit_scores=true\n").unwrap();
    let o = run(
        tmp.path(),
        &["fit", "--config", "run.cfg", "--input", &fixture("fragments.csv"), "--grid-len", "31", "--out-dir", "o"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mean = fs::read_to_string(tmp.path().join("o/mean.csv")).unwrap();
    let header = mean.lines().next().unwrap();
    assert!(header.contains("grid-len=31"), "{header}");
    assert!(header.contains("h-gamma=0.1 "), "{header}");
    assert_eq!(mean.lines().count(), 2 + 31);
    assert!(tmp.path().join("o/scores.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.cfg"), "bandwidth=0.1\n").unwrap();
    let o = run(tmp.path(), &["fit", "--config", "bad.cfg", "--input", &fixture("fragments.csv")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key \"bandwidth\""));
}

#[test]
fn complete_curve_is_all_observed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        tmp.path(),
        &["reconstruct", "--input", &fixture("fragments.csv"), "--curves", "c00", "--method", "ayesce", "--out-dir", "r"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let prov = column(&tmp.path().join("r/c00.csv"), 2);
    assert_eq!(prov.len(), 51);
    assert!(prov.iter().all(|p| p == "observed"));
}

#[test]
fn band_limited_mask_gives_partial_output_and_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["reconstruct", "--input", &fixture("band.csv"), "--curves", "b000", "--method", "ayes", "--K", "2"];
    let o = run(tmp.path(), &[&args[..], &["--out-dir", "plain"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: curve b000"));
    let plain = column(&tmp.path().join("plain/b000.csv"), 2);
    assert!(plain.iter().any(|p| p == "non_estimable"));
    assert!(plain.iter().any(|p| p == "observed"));

    let o = run(tmp.path(), &[&args[..], &["--out-dir", "iter", "--iterative"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let iter = column(&tmp.path().join("iter/b000.csv"), 2);
    assert!(iter.iter().all(|p| p != "non_estimable"));
    assert!(iter.iter().any(|p| p.starts_with("iteration_")));
}

#[test]
fn golden_reconstruction_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("golden");
    let o = run(
        &fixtures(),
        &[
            "reconstruct",
            "--input",
            "fragments.csv",
            "--curves",
            "c41,c55",
            "--method",
            "ayes",
            "--K",
            "3",
            "--error-variance",
            "--out-dir",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["c41.csv", "c55.csv", "summary.csv"] {
        let want = fs::read(fixtures().join("golden").join(f)).unwrap();
        let got = fs::read(out.join(f)).unwrap();
        assert!(want == got, "{f} differs from the checked-in golden file");
    }
}

#[test]
fn gcv_report_marks_the_chosen_truncation() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        tmp.path(),
        &["gcv-report", "--input", &fixture("fragments.csv"), "--curve", "c41", "--out", "gcv.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("chosen K: "));
    let csv = fs::read_to_string(tmp.path().join("gcv.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config: command=gcv-report"));
    assert_eq!(lines[1], "K,rss,gcv,chosen");
    assert_eq!(lines[2..].iter().filter(|l| l.ends_with(",1")).count(), 1);
}

#[test]
fn every_subcommand_documents_its_flags() {
    let tmp = tempfile::tempdir().unwrap();
    for (sub, flags) in [
        ("fit", &["--input", "--h-gamma", "--emit-scores", "--config", "--threads"][..]),
        ("reconstruct", &["--method", "--K", "--iterative", "--strategy", "--rmax"][..]),
        ("simulate", &["--dgp", "--n", "--m", "--reps", "--seed", "--methods", "--out"][..]),
        ("gcv-report", &["--curve", "--observed", "--method"][..]),
    ] {
        let o = run(tmp.path(), &[sub, "--help"]);
        assert!(o.status.success());
        let help = String::from_utf8(o.stdout).unwrap();
        for f in flags {
            assert!(help.contains(f), "{sub} --help lacks {f}");
        }
    }
}
