use std::path::Path;
use std::process::{Command, Output};

fn blindsep(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blindsep"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("BLINDSEP_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "name": "cli-tiny",
  "scenario": {"n_sources": 4, "n_sensors": 3, "horizon": 60, "hmm": {"p": 0.05, "q": 0.1}},
  "dl": {"outer_iters": 3},
  "methods": ["omp", "lasso"],
  "psf": {"gamma_grid": [0.2, 0.5, 1.0], "modes": ["raw", "known", "em"]},
  "trials": 3
}"#;

#[test]
fn generate_run_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.json"), TINY).unwrap();

    let gen = blindsep(&["generate", "--config", "tiny.json", "--trials", "2", "--seed", "4"], tmp.path());
    assert!(gen.status.success(), "{}", stderr(&gen));
    let gen_dir = stdout(&gen).trim().to_string();
    assert!(gen_dir.contains("scenario-") && gen_dir.ends_with("-s4"), "{gen_dir}");
    let scen = Path::new(&gen_dir);
    let scen = if scen.is_absolute() { scen.to_path_buf() } else { tmp.path().join(scen) };
    assert!(scen.join("p00-t001/Y.csv").is_file());

    let run = blindsep(
        &["run", "--config", "tiny.json", "--seed", "4", "--out", "results", "--workers", "2"],
        tmp.path(),
    );
    assert!(run.status.success(), "{}", stderr(&run));
    let out = stdout(&run);
    assert!(out.contains("cli-tiny: 3 trials completed, 0 failed"), "{out}");
    assert!(out.contains("pd@pfa=0.07"), "{out}");
    assert!(out.contains("EM mean absolute error"), "{out}");

    let report = blindsep(&["report", "--out", "results"], tmp.path());
    assert!(report.status.success(), "{}", stderr(&report));
    assert!(stdout(&report).contains("files verified"));

    // Same config and seed give byte-identical curves.
    let rerun = blindsep(&["run", "--config", "tiny.json", "--seed", "4", "--out", "again", "--workers", "1"], tmp.path());
    assert!(rerun.status.success(), "{}", stderr(&rerun));
    let name = std::fs::read_dir(tmp.path().join("results"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .find(|n| n.to_string_lossy().starts_with("run-"))
        .unwrap();
    assert_eq!(
        std::fs::read(tmp.path().join("results").join(&name).join("roc.csv")).unwrap(),
        std::fs::read(tmp.path().join("again").join(&name).join("roc.csv")).unwrap()
    );

    // A modified output file is caught.
    let roc = tmp.path().join("results").join(&name).join("roc.csv");
    let mut text = std::fs::read_to_string(&roc).unwrap();
    text = text.replacen("0.", "9.", 1);
    std::fs::write(&roc, text).unwrap();
    let bad = blindsep(&["report", "--out", "results"], tmp.path());
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("checksum mismatch"), "{}", stderr(&bad));
}

#[test]
fn report_without_runs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = blindsep(&["report", "--out", "."], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no runs found"), "{}", stderr(&o));
}

#[test]
fn unknown_figure_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = blindsep(&["run", "--figure", "fig3"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("fig4"), "{}", stderr(&o));
}

#[test]
fn invalid_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.json"), r#"{"scenario": {"hmm": {"p": 1.5, "q": 0.1}}}"#).unwrap();
    let o = blindsep(&["generate", "--config", "bad.json"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("1.5"), "{}", stderr(&o));
}
