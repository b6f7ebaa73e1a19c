use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use psd_online::bench::{RunArtifact, RunReport};
use psd_online::designer::DesignResult;
use psd_online::oracle::AuditReport;

fn psd_online(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psd-online"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn design_run_audit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = psd_online(
        &["design", "--objective", "d-optimal", "--gamma", "2", "--umax", "8", "--q", "60", "--d", "120", "--out", "d.json"],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let design: DesignResult = serde_json::from_str(&fs::read_to_string(p.join("d.json")).unwrap()).unwrap();
    assert!(design.beta <= 3.0 + 1e-6 && !design.flagged);

    let out = psd_online(
        &[
            "run", "--n", "4", "--m", "15", "--b", "3", "--seed", "5", "--objective", "d-optimal", "--gamma", "2",
            "--variant", "seq", "--measure", "d.json", "--q", "60", "--d", "120", "--out", "run.json",
            "--instance-out", "inst.json", "--gs-out", "gs.csv",
        ],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: RunReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.audit_pass);
    assert!(report.budget_used <= report.b_prime + 1e-9);
    let gs = fs::read_to_string(p.join("gs.csv")).unwrap();
    assert!(gs.starts_with("u,gs_prime\n"));
    assert_eq!(gs.lines().count(), 201);

    let out = psd_online(&["audit", "--trace", "run.json"], p);
    assert!(out.status.success());
    let audit: AuditReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(audit.passed);

    // the saved instance reproduces the run
    let out = psd_online(
        &[
            "run", "--instance", "inst.json", "--objective", "d-optimal", "--gamma", "2", "--variant", "seq",
            "--measure", "d.json", "--q", "60", "--d", "120",
        ],
        p,
    );
    assert!(out.status.success());
    let again: RunReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(again, report);

    let mut artifact: RunArtifact = serde_json::from_str(&fs::read_to_string(p.join("run.json")).unwrap()).unwrap();
    let t = artifact.trace.steps.iter().position(|s| s.x > 0.5).unwrap();
    artifact.trace.steps[t].x = 0.0;
    fs::write(p.join("bad.json"), serde_json::to_string(&artifact).unwrap()).unwrap();
    let out = psd_online(&["audit", "--trace", "bad.json"], p);
    assert!(!out.status.success());
}

#[test]
fn run_rejects_a_measure_designed_for_another_objective() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = psd_online(&["design", "--objective", "a-optimal", "--gamma", "1", "--umax", "4", "--out", "a.json"], p);
    assert!(out.status.success());
    let out = psd_online(
        &["run", "--n", "3", "--m", "8", "--objective", "d-optimal", "--gamma", "1", "--measure", "a.json"],
        p,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("designed for a-optimal"));
}

#[test]
fn bench_reads_a_config_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("exp.toml"),
        "objective = \"a-optimal\"\nfamily = \"random\"\nn = 3\nm = 10\ngammas = [1]\nrepeats = 2\nseed = 4\nq = 30\nd = 60\nout = \"from_config.csv\"\n",
    )
    .unwrap();
    let out = psd_online(&["bench", "--config", "exp.toml", "--variant", "sim", "--repeats", "3"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(p.join("from_config.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("objective,gamma,repeat,budget_used,b_prime,primal_H,p_star,ratio,bound"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.starts_with("a-optimal,1,") && r.contains(",sim,smoothed,")));
}

#[test]
fn curve_writes_one_row_per_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let out = psd_online(&["curve", "--gamma", "1,2", "--q", "40", "--d", "80"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "gamma,beta,bound_smoothed,bound_unsmoothed");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(",0.38730016322"));
}

#[test]
fn missing_generator_flags_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = psd_online(&["run", "--objective", "d-optimal", "--gamma", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--n and --m are required"));
}
