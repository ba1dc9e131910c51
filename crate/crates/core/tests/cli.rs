use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn lg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leakguard"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Work {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn dataset(&self, name: &str, n: usize, seed: u64) -> String {
        let n = n.to_string();
        let seed = seed.to_string();
        let out = self.p(name);
        ok(&[
            "simulate",
            "--mechanisms",
            "subject_overlap",
            "--n",
            &n,
            "--p",
            "5",
            "--s",
            "0.5",
            "--seed",
            &seed,
            "--write-data",
            &out,
        ]);
        out
    }

    fn split(&self, data: &str, out: &str, repeats: usize, seed: u64) -> Output {
        let (r, s, o) = (repeats.to_string(), seed.to_string(), self.p(out));
        lg(&[
            "split", "--data", data, "--outcome", "y", "--mode", "subject_grouped", "--group", "subject", "--v", "5",
            "--repeats", &r, "--seed", &s, "--out", &o,
        ])
    }

    fn fit(&self, data: &str, plan: &str, out: &str, predictors: &str) -> Output {
        let (p, o) = (self.p(plan), self.p(out));
        lg(&[
            "fit",
            "--data",
            data,
            "--outcome",
            "y",
            "--subject",
            "subject",
            "--predictors",
            predictors,
            "--plan",
            &p,
            "--learner",
            "glm",
            "--seed",
            "1",
            "--out",
            &o,
        ])
    }
}

const CLEAN: &str = "x1,x2,x3,x4,x5";
const LEAKY: &str = "x1,x2,x3,x4,x5,leak_subject_mean";

#[test]
fn split_example_writes_five_folds() {
    let w = Work::new();
    let d = w.dataset("d.csv", 150, 3);
    ok(&[
        "split", "--data", &d, "--outcome", "y", "--mode", "subject_grouped", "--group", "subject", "--v", "5", "--seed",
        "1", "--out", &w.p("plan.json"),
    ]);
    let plan = json(&w.path("plan.json"));
    assert_eq!(plan["folds"].as_array().unwrap().len(), 5);
    assert_eq!(plan["v"], 5);
    assert_eq!(plan["hash"].as_str().unwrap().len(), 12);
    assert_eq!(plan["n_rows"], 150);
}

#[test]
fn repeated_runs_give_identical_json() {
    let w = Work::new();
    let d = w.dataset("d.csv", 120, 4);
    assert!(w.split(&d, "a.json", 2, 7).status.success());
    assert!(w.split(&d, "b.json", 2, 7).status.success());
    let read = |n: &str| std::fs::read(w.path(n)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));

    assert!(w.fit(&d, "a.json", "fa.json", CLEAN).status.success());
    assert!(w.fit(&d, "a.json", "fb.json", CLEAN).status.success());
    assert_eq!(read("fa.json"), read("fb.json"));

    for out in ["audit_a.json", "audit_b.json"] {
        ok(&["audit", "--fit", &w.p("fa.json"), "--b", "30", "--seed", "5", "--out", &w.p(out)]);
    }
    assert_eq!(read("audit_a.json"), read("audit_b.json"));

    // a different seed changes the plan
    assert!(w.split(&d, "c.json", 2, 8).status.success());
    assert_ne!(json(&w.path("a.json"))["hash"], json(&w.path("c.json"))["hash"]);
}

#[test]
fn stale_plan_is_a_validation_error_naming_both_hashes() {
    let w = Work::new();
    let d = w.dataset("d.csv", 120, 5);
    let other = w.dataset("other.csv", 90, 6);
    assert!(w.split(&d, "plan.json", 1, 1).status.success());
    let plan = json(&w.path("plan.json"));
    let out = w.fit(&other, "plan.json", "fit.json", CLEAN);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(plan["hash"].as_str().unwrap()), "{err}");
    let data_hash = err.split("rows, data ").nth(1).and_then(|t| t.split_whitespace().next()).unwrap_or("");
    assert!(data_hash.len() == 12 && data_hash.chars().all(|c| c.is_ascii_hexdigit()), "{err}");
    assert_ne!(data_hash, plan["data_hash"].as_str().unwrap());
    assert!(err.contains("120 rows") && err.contains("90 rows"), "{err}");
    assert!(!w.path("fit.json").exists());
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let w = Work::new();
    let d = w.dataset("d.csv", 90, 7);
    // unknown mode and missing column are validation errors
    let out = lg(&["split", "--data", &d, "--outcome", "y", "--mode", "sideways", "--out", &w.p("p.json")]);
    assert_eq!(out.status.code(), Some(2));
    let out = lg(&["split", "--data", &d, "--outcome", "nope", "--mode", "row_wise", "--out", &w.p("p.json")]);
    assert_eq!(out.status.code(), Some(2));
    // unwritable output is a runtime failure
    let bad = w.path("missing_dir").join("d.csv");
    let out = lg(&["simulate", "--n", "60", "--p", "3", "--write-data", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn audit_reloads_data_by_reference_and_refuses_changed_files() {
    let w = Work::new();
    let d = w.dataset("d.csv", 120, 8);
    assert!(w.split(&d, "plan.json", 1, 1).status.success());
    assert!(w.fit(&d, "plan.json", "fit.json", LEAKY).status.success());
    let fit = std::fs::read_to_string(w.path("fit.json")).unwrap();
    // the fit stores a reference to the CSV, not the rows themselves
    let v: Value = serde_json::from_str(&fit).unwrap();
    assert!(v["refit"]["source"]["path"].as_str().unwrap().ends_with("d.csv"));
    assert!(v["refit"]["dataset"].is_null());

    ok(&["audit", "--fit", &w.p("fit.json"), "--b", "25", "--perm-refit", "true", "--out", &w.p("audit.json")]);
    let audit = json(&w.path("audit.json"));
    assert!(audit["permutation"]["p_value"].as_f64().unwrap() <= 1.0);

    // overwrite the CSV with different data of the same size
    w.dataset("d.csv", 120, 9);
    let out = lg(&["audit", "--fit", &w.p("fit.json"), "--b", "25", "--out", &w.p("audit2.json")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("has changed"));
}

#[test]
fn dlsi_reports_estimates_and_tiers() {
    let w = Work::new();
    let d = w.dataset("d.csv", 120, 10);
    assert!(w.split(&d, "plan.json", 5, 1).status.success());
    assert!(w.fit(&d, "plan.json", "leaky.json", LEAKY).status.success());
    assert!(w.fit(&d, "plan.json", "guarded.json", CLEAN).status.success());
    ok(&[
        "dlsi", "--leaky", &w.p("leaky.json"), "--guarded", &w.p("guarded.json"), "--metric", "auc", "--out",
        &w.p("dlsi.json"),
    ]);
    let r = json(&w.path("dlsi.json"));
    for key in ["delta_metric", "delta_lsi", "p_signflip", "tier"] {
        assert!(!r[key].is_null(), "{key} missing");
    }
    assert_eq!(r["tier"], "C_signflip");
    assert_eq!(r["r_eff"], 5);
    assert!(r["delta_metric"].as_f64().unwrap() > 0.0);

    // a guarded fit on a different plan cannot be paired
    assert!(w.split(&d, "plan2.json", 5, 2).status.success());
    assert!(w.fit(&d, "plan2.json", "guarded2.json", CLEAN).status.success());
    ok(&[
        "dlsi", "--leaky", &w.p("leaky.json"), "--guarded", &w.p("guarded2.json"), "--out", &w.p("unpaired.json"),
    ]);
    let u = json(&w.path("unpaired.json"));
    assert_eq!(u["tier"], "D_insufficient");
    assert!(u["p_signflip"].is_null());
    ok(&["report", "--dlsi", &w.p("unpaired.json"), "--out", &w.p("unpaired.html")]);
    let html = std::fs::read_to_string(w.path("unpaired.html")).unwrap();
    assert!(html.contains("inference suppressed (unpaired/insufficient repeats)"));
}

#[test]
fn audit_report_has_summary_blocks_and_regenerates_identically() {
    let w = Work::new();
    let d = w.dataset("d.csv", 120, 11);
    assert!(w.split(&d, "plan.json", 1, 1).status.success());
    assert!(w.fit(&d, "plan.json", "fit.json", CLEAN).status.success());
    ok(&[
        "audit", "--fit", &w.p("fit.json"), "--b", "30", "--batch-cols", "batch", "--out", &w.p("audit.json"),
    ]);
    ok(&[
        "report", "--audit", &w.p("audit.json"), "--out", &w.p("r1.html"), "--bundle-out", &w.p("bundle.json"),
    ]);
    ok(&["report", "--bundle", &w.p("bundle.json"), "--out", &w.p("r2.html")]);
    ok(&["report", "--bundle", &w.p("bundle.json"), "--out", &w.p("r3.html")]);
    let read = |n: &str| std::fs::read(w.path(n)).unwrap();
    assert_eq!(read("r1.html"), read("r2.html"));
    assert_eq!(read("r2.html"), read("r3.html"));

    let html = String::from_utf8(read("r1.html")).unwrap();
    assert!(html.starts_with("<!DOCTYPE html>"));
    for block in ["Mechanism Risk Assessment", "No near-duplicates detected."] {
        assert!(html.contains(block), "missing {block}");
    }
    assert!(!html.contains("<script src") && !html.contains("<link "));
    let bundle = json(&w.path("bundle.json"));
    assert_eq!(bundle["payload"]["kind"], "audit");
    assert!(bundle["schema_version"].as_u64().is_some());
}

#[test]
fn simulate_writes_checkpoints_and_a_table() {
    let w = Work::new();
    let ck = w.path("ck");
    ok(&[
        "simulate", "--mechanisms", "none,peek_norm", "--n", "60", "--p", "3", "--seeds", "2", "--b", "20", "--checkpoint-dir",
        ck.to_str().unwrap(), "--out", &w.p("grid.csv"),
    ]);
    assert_eq!(std::fs::read_dir(&ck).unwrap().count(), 4);
    let table = std::fs::read_to_string(w.path("grid.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("rejection_rate"));
    // a second run resumes from the checkpoints and gives the same table
    ok(&[
        "simulate", "--mechanisms", "none,peek_norm", "--n", "60", "--p", "3", "--seeds", "2", "--b", "20", "--checkpoint-dir",
        ck.to_str().unwrap(), "--out", &w.p("grid2.csv"),
    ]);
    assert_eq!(table, std::fs::read_to_string(w.path("grid2.csv")).unwrap());
}
