use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn comorbid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comorbid"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = comorbid(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_cohort(dir: &Path) {
    ok(dir, &["generate", "--out", "c", "--m", "80", "--v", "40", "--k", "3", "--seed", "3"]);
}

const QUICK: &[&str] = &["--k", "3", "--chains", "1", "--burnin", "20", "--samples", "20"];

#[test]
fn stages_chain_together() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    for f in ["diagnoses.csv", "demographics.csv", "vocabulary.txt", "eci_mapping.csv", "truth/phi.csv", "manifest.json"] {
        assert!(d.join("c").join(f).exists(), "{f}");
    }
    ok(d, &["rates", "--cohort", "c", "--out", "r"]);
    let mut fit = vec!["fit", "--cohort", "c", "--out", "f", "--seed", "1", "--rates", "r"];
    fit.extend(QUICK);
    ok(d, &fit);
    ok(d, &["posterior", "--cohort", "c", "--fit", "f", "--rates", "r", "--out", "p"]);
    let post = fs::read_to_string(d.join("p/posterior.csv")).unwrap();
    assert_eq!(post.lines().next().unwrap(), "patient_id,topic_0,topic_1,topic_2");
    assert_eq!(post.lines().count(), 81);
    ok(d, &["cluster", "--posterior", "p/posterior.csv", "--out", "cl", "--g-max", "4"]);
    ok(d, &["survive", "--cohort", "c", "--assignments", "cl/assignments.csv", "--out", "s"]);
    let grid = fs::read_to_string(d.join("s/p_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 3 * 3);
    assert!(d.join("s/km.svg").exists());
    ok(d, &["eci", "--cohort", "c", "--assignments", "cl/assignments.csv", "--out", "e"]);
    ok(
        d,
        &["eci", "--cohort", "c", "--assignments", "cl/assignments.csv", "--algorithm", "birch", "--g", "2", "--out", "e2"],
    );
    assert!(fs::read_to_string(d.join("e2/report.txt")).unwrap().contains("birch with G=2"));
    ok(d, &["embed", "--cohort", "c", "--fit", "f", "--out", "em", "--tsne-iters", "300"]);
    assert!(d.join("em/embedding.svg").exists());
    for dir in ["r", "f", "p", "cl", "s", "e", "em"] {
        assert!(d.join(dir).join("manifest.json").exists(), "{dir}");
    }
}

#[test]
fn pdm_without_rates_names_the_rates_command() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    let mut args = vec!["fit", "--cohort", "c", "--out", "f", "--seed", "1"];
    args.extend(QUICK);
    let out = comorbid(d, &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("comorbid rates"), "{}", stderr(&out));
    // LDA needs no rates
    args.extend(["--model", "lda"]);
    ok(d, &args);
    assert!(!d.join("f/gamma.csv").exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // missing seed
    assert_eq!(comorbid(d, &["generate", "--out", "x"]).status.code(), Some(2));
    small_cohort(d);
    // non-empty output directory
    let again = comorbid(d, &["generate", "--out", "c", "--seed", "3"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    ok(d, &["generate", "--out", "c", "--m", "80", "--v", "40", "--k", "3", "--seed", "3", "--force"]);
    // malformed input names file and line
    let diag = d.join("c/diagnoses.csv");
    let mut text = fs::read_to_string(&diag).unwrap();
    text.push_str("P_unknown,999999,1\n");
    fs::write(&diag, text).unwrap();
    let bad = comorbid(d, &["rates", "--cohort", "c", "--out", "r"]);
    assert_eq!(bad.status.code(), Some(3), "{}", stderr(&bad));
    assert!(stderr(&bad).contains("diagnoses.csv"), "{}", stderr(&bad));
    // unknown key in the config file
    fs::write(d.join("bad.toml"), "[fit]\nchainz = 2\n").unwrap();
    assert_eq!(comorbid(d, &["--config", "bad.toml", "fit"]).status.code(), Some(2));
}

#[test]
fn config_file_fills_unset_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    fs::write(
        d.join("run.toml"),
        "seed = 9\n[fit]\nmodel = \"lda\"\nk = 3\nchains = 1\nburnin = 10\nsamples = 10\n",
    )
    .unwrap();
    ok(d, &["--config", "run.toml", "fit", "--cohort", "c", "--out", "f", "--samples", "12"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("f/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["samples"], 12);
    assert_eq!(manifest["config"]["burnin"], 10);
    assert_eq!(manifest["config"]["model"], "lda");
}

#[test]
fn same_seed_same_bytes_and_replay_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    let mut args = vec!["fit", "--cohort", "c", "--seed", "5", "--model", "lda"];
    args.extend(QUICK);
    let mut a = args.clone();
    a.extend(["--out", "f1"]);
    let mut b = args.clone();
    b.extend(["--out", "f2"]);
    ok(d, &a);
    ok(d, &b);
    for f in ["theta.csv", "phi.csv", "diagnostics.csv"] {
        assert_eq!(fs::read(d.join("f1").join(f)).unwrap(), fs::read(d.join("f2").join(f)).unwrap(), "{f}");
    }
    ok(d, &["replay", "f1/manifest.json"]);
    ok(d, &["replay", "f1/manifest.json", "--out", "f3"]);
    assert_eq!(fs::read(d.join("f1/phi.csv")).unwrap(), fs::read(d.join("f3/phi.csv")).unwrap());

    // a changed input is refused
    let demo = d.join("c/demographics.csv");
    let text = fs::read_to_string(&demo).unwrap();
    fs::write(&demo, text + "\n").unwrap();
    let out = comorbid(d, &["replay", "f1/manifest.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("demographics.csv"));
}

#[test]
fn small_pipeline_runs_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    let mut args = vec!["pipeline", "--cohort", "c", "--out", "run", "--seed", "4", "--tsne-iters", "300", "--perplexity", "5"];
    args.extend(QUICK);
    ok(d, &args);
    for f in ["survival/p_grid.txt", "report/report.csv", "embedding/embedding.svg", "survival/km.svg", "manifest.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let manifests = walk(&d.join("run")).into_iter().filter(|p| p.ends_with("manifest.json")).count();
    assert_eq!(manifests, 1);
    let svg = fs::read(d.join("run/survival/km.svg")).unwrap();
    ok(d, &["replay", "run/manifest.json"]);
    // figures carry no run-specific content
    assert_eq!(svg, fs::read(d.join("run/survival/km.svg")).unwrap());
}

#[test]
fn failed_pipeline_records_its_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    // 40 codes cannot support perplexity 30
    let mut args = vec!["pipeline", "--cohort", "c", "--out", "run", "--seed", "4", "--perplexity", "30"];
    args.extend(QUICK);
    let out = comorbid(d, &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("embed"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert_eq!(manifest["failed_stage"], "embed");
    assert!(manifest["outputs"].as_array().unwrap().len() > 5);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
