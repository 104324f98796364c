use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn polaron(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polaron")).arg("--out").arg(out).args(args).output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is one JSON document")
}

const SMALL: &[&str] = &["--set", "sizes.pool=2000", "--set", "sizes.inner=20", "--set", "sizes.z=500"];

#[test]
fn trivial_root_is_zero_and_files_agree_with_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let o = polaron(dir.path(), &[&["--set", "potential.name=trivial"], SMALL, &["solve-lambda"]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = stdout_json(&o);
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["subcommand"], "solve-lambda");
    assert_eq!(doc["status"], "ok");
    assert!(doc["result"]["lambda_star"].as_f64().unwrap().abs() < 1e-3);
    assert!(doc["config"].get("run.out").is_none());
    let file: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("solve-lambda.json")).unwrap()).unwrap();
    assert_eq!(file, doc);
}

#[test]
fn csv_tables_use_crlf_and_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = polaron(dir.path(), &["--set", "sizes.cycles=50", "cycles"]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("cycles_cycles.csv")).unwrap();
    assert!(text.starts_with("index,dormant,active,customers\r\n"));
    assert_eq!(text.matches("\r\n").count(), 51);
    assert_eq!(text.matches('\n').count(), 51);
}

#[test]
fn output_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let run = |w: &str| {
        let out = dir.path().join(w);
        let o = polaron(&out, &[&["--workers", w, "--seed", "9"], SMALL, &["psi"]].concat());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (o.stdout, std::fs::read(out.join("psi.json")).unwrap())
    };
    assert_eq!(run("1"), run("2"));
}

#[test]
fn seed_changes_the_draws() {
    let dir = tempfile::tempdir().unwrap();
    let a = stdout_json(&polaron(dir.path(), &["--seed", "1", "--set", "sizes.cycles=200", "cycles"]));
    let b = stdout_json(&polaron(dir.path(), &["--seed", "2", "--set", "sizes.cycles=200", "cycles"]));
    assert_ne!(a["result"]["mean_cycle_length"], b["result"]["mean_cycle_length"]);
    assert_eq!(a["result"]["closed_form"], b["result"]["closed_form"]);
}

#[test]
fn guard_refusal_exits_two_with_a_reason() {
    let dir = tempfile::tempdir().unwrap();
    let o = polaron(dir.path(), &["--set", "model.alpha=3", "--set", "sizes.pool=200", "--set", "sizes.inner=10", "solve-lambda"]);
    assert_eq!(o.status.code(), Some(2));
    let doc = stdout_json(&o);
    assert_eq!(doc["status"], "refused");
    assert_eq!(doc["reason"]["kind"], "low_ess");
    assert!(doc.get("result").is_none());
    assert!(dir.path().join("solve-lambda.json").exists());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(polaron(dir.path(), &["--set", "nope.key=1", "cycles"]).status.code(), Some(1));
    assert_eq!(polaron(dir.path(), &["--set", "sizes.pool=0", "cycles"]).status.code(), Some(1));
    assert_eq!(polaron(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(polaron(dir.path(), &["--config", "/nonexistent/cfg", "cycles"]).status.code(), Some(1));
    assert_eq!(polaron(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_is_echoed_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\npotential.name = trivial\nmodel.alpha = 0.25\nrun.seed = 5\nsizes.cycles = 100\n").unwrap();
    let o = polaron(dir.path(), &["--config", cfg.to_str().unwrap(), "--seed", "6", "cycles"]);
    assert_eq!(o.status.code(), Some(0));
    let doc = stdout_json(&o);
    assert_eq!(doc["seed"], 6);
    assert_eq!(doc["config"]["run.seed"], "6");
    assert_eq!(doc["config"]["model.alpha"], "0.25");
    assert_eq!(doc["config"]["potential.name"], "trivial");
    assert_eq!(doc["result"]["n"], 100);
}

#[test]
fn bounded_potential_ratio_respects_its_bound() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        &["--set", "potential.name=bounded_exp", "--set", "potential.c=0.5", "--set", "potential.beta=1", "--set", "potential.ell=1"],
        SMALL,
        &["gc-scan"],
    ]
    .concat();
    let o = polaron(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = &stdout_json(&o)["result"];
    // exp(α c/β²) with α = 0.5, c = 0.5
    let bound = r["ratio_bound"].as_f64().unwrap();
    assert!((bound - 0.25f64.exp()).abs() < 1e-12);
    assert_eq!(r["bound_violations"], 0);
    for row in r["rows"].as_array().unwrap() {
        let e = &row["real_ratio"];
        assert!(e["value"].as_f64().unwrap() <= bound + 3.0 * e["se"].as_f64().unwrap());
    }
}
