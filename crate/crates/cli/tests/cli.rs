use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn popinv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popinv"))
        .current_dir(dir)
        .env_remove("POPINV_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = r#"
experiment = "darcy-uncorrelated"
seed = 5

[data]
n = 200

[learning]
iterations = 20
n_s = 100
window = 5
"#;

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.toml"), config).unwrap();
    let out = popinv(dir.path(), &["generate", "--config", "c.toml", "--out", "d.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let p = dir.path().to_path_buf();
    (dir, p)
}

#[test]
fn generate_honours_n_override() {
    let (_t, dir) = setup(SMALL);
    let out = popinv(&dir, &["generate", "--config", "c.toml", "--n", "100", "--out", "small.csv"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("100 rows x 50 values"));
    let text = fs::read_to_string(dir.join("small.csv")).unwrap();
    assert_eq!(text.lines().count(), 101, "header plus 100 rows");
    assert!(dir.join("small.meta.json").exists());
}

#[test]
fn missing_config_exits_2() {
    let t = TempDir::new().unwrap();
    let out = popinv(t.path(), &["generate", "--config", "absent.toml"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn infer_writes_exactly_the_run_files_and_scores_cleanly() {
    let (_t, dir) = setup(SMALL);
    let out = popinv(&dir, &["infer", "--config", "c.toml", "--data", "d.csv", "--out", "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = fs::read_dir(dir.join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["config.toml", "summary.json", "trace.csv"]);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations"], 20);
    assert_eq!(summary["seeds"]["experiment"], 5);
    assert!(summary["relative_errors"]["gamma"].is_number());
    assert_eq!(summary["config"]["learning"]["n_s"], 100);
    assert!(summary.get("wall_time").is_none());

    let trace = fs::read_to_string(dir.join("run/trace.csv")).unwrap();
    assert!(trace.starts_with("iter,loss,lr,m,sigma,gamma,wall_ms\n"));
    assert_eq!(trace.lines().count(), 21);

    assert_eq!(code(&popinv(&dir, &["score", "run"])), 0);
}

#[test]
fn tampered_summary_fails_scoring() {
    let (_t, dir) = setup(SMALL);
    assert_eq!(code(&popinv(&dir, &["infer", "--config", "c.toml", "--data", "d.csv", "--out", "run"])), 0);
    let path = dir.join("run/summary.json");
    let mut s: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    s["relative_errors"]["m"] = serde_json::json!(0.123456);
    fs::write(&path, serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(code(&popinv(&dir, &["score", "run"])), 5);
}

#[test]
fn existing_run_and_resume_are_refused() {
    let (_t, dir) = setup(SMALL);
    let args = ["infer", "--config", "c.toml", "--data", "d.csv", "--out", "run"];
    assert_eq!(code(&popinv(&dir, &args)), 0);
    let before = fs::read_to_string(dir.join("run/summary.json")).unwrap();
    assert_eq!(code(&popinv(&dir, &args)), 2);
    let out = popinv(&dir, &["infer", "--config", "c.toml", "--data", "d.csv", "--out", "other", "--resume"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.join("other").exists());
    assert_eq!(fs::read_to_string(dir.join("run/summary.json")).unwrap(), before);
}

#[test]
fn same_seed_single_thread_gives_identical_summaries() {
    let (_t, dir) = setup(SMALL);
    for run in ["a", "b"] {
        let out = popinv(
            &dir,
            &["--threads", "1", "infer", "--config", "c.toml", "--data", "d.csv", "--seed", "7", "--out", run],
        );
        assert_eq!(code(&out), 0);
    }
    let a = fs::read(dir.join("a/summary.json")).unwrap();
    let b = fs::read(dir.join("b/summary.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.join("a/trace.csv")).unwrap(),
        fs::read(dir.join("b/trace.csv")).unwrap()
    );
}

#[test]
fn gradient_mode_flag_reaches_the_run() {
    let (_t, dir) = setup(SMALL);
    let out = popinv(
        &dir,
        &["infer", "--config", "c.toml", "--data", "d.csv", "--gradient-mode", "standard", "--out", "run"],
    );
    assert_eq!(code(&out), 0);
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(s["config"]["learning"]["gradient_mode"], "standard");
    let bad = popinv(&dir, &["infer", "--config", "c.toml", "--data", "d.csv", "--gradient-mode", "sideways"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn plots_are_svg() {
    let (_t, dir) = setup(SMALL);
    let out = popinv(&dir, &["infer", "--config", "c.toml", "--data", "d.csv", "--out", "run", "--plots"]);
    assert_eq!(code(&out), 0);
    for f in ["loss.svg", "param_m.svg", "param_gamma.svg", "noise_covariance.svg"] {
        let svg = fs::read_to_string(dir.join("run/plots").join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{f}");
    }
    let gamma = fs::read_to_string(dir.join("run/plots/param_gamma.svg")).unwrap();
    assert!(gamma.contains("stroke-dasharray"));
}

#[test]
fn mismatched_data_exit_3() {
    let (_t, dir) = setup(SMALL);
    fs::write(
        dir.join("wide.toml"),
        "experiment = \"darcy-uncorrelated\"\n[model]\nkind = \"darcy\"\nf0 = 10.0\nd_y = 20\n",
    )
    .unwrap();
    let out = popinv(&dir, &["infer", "--config", "wide.toml", "--data", "d.csv", "--out", "run"]);
    assert_eq!(code(&out), 3);
    assert!(!dir.join("run").exists());
}

#[test]
fn runaway_run_aborts_with_exit_4() {
    let (_t, dir) = setup(SMALL);
    fs::write(dir.join("wild.toml"), format!("{}lr = 1e6\n", SMALL.replace("iterations = 20", "iterations = 200"))).unwrap();
    let out = popinv(&dir, &["infer", "--config", "wild.toml", "--data", "d.csv", "--out", "run"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aborted"));
}

#[test]
fn env_seed_is_a_fallback_only() {
    let t = TempDir::new().unwrap();
    let no_seed = "experiment = \"darcy-uncorrelated\"\n[data]\nn = 10\n";
    fs::write(t.path().join("c.toml"), no_seed).unwrap();
    let run = |env: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_popinv"));
        cmd.current_dir(t.path()).env_remove("POPINV_SEED");
        if let Some(v) = env {
            cmd.env("POPINV_SEED", v);
        }
        let mut args = vec!["generate", "--config", "c.toml", "--out", "x.csv"];
        args.extend_from_slice(extra);
        let out = cmd.args(&args).output().unwrap();
        assert_eq!(code(&out), 0);
        fs::read_to_string(t.path().join("x.csv")).unwrap()
    };
    let default = run(None, &[]);
    let env = run(Some("9"), &[]);
    assert_ne!(default, env);
    assert_eq!(run(Some("123"), &["--seed", "9"]), env);
}

#[test]
fn study_writes_the_error_table() {
    let t = TempDir::new().unwrap();
    let cfg = r#"
experiment = "darcy-uncorrelated"
[learning]
n_s = 50
window = 5
[study]
ns = [20]
values = [0.1, 0.3]
vary = "gamma"
repeats = 9
modes = ["cut", "standard"]
iterations = 10
"#;
    fs::write(t.path().join("s.toml"), cfg).unwrap();
    let out = popinv(t.path(), &["study", "--config", "s.toml", "--repeats", "2", "--out", "s.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(t.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,N,gamma_dagger,mean_rel_err,std_rel_err,runs");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.ends_with(",2")));

    fs::write(t.path().join("e.toml"), cfg.replace("ns = [20]", "ns = []")).unwrap();
    assert_eq!(code(&popinv(t.path(), &["study", "--config", "e.toml"])), 2);
}

#[test]
fn verify_filter_runs_transport_checks_only() {
    let t = TempDir::new().unwrap();
    let out = popinv(t.path(), &["verify", "--filter", "ot"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("ot-oracle-1d") && text.contains("ot-scaling-identity"));
    assert!(!text.contains("rk4-order"));
    assert_eq!(code(&popinv(t.path(), &["verify", "--filter", "no-such-check"])), 2);
}
