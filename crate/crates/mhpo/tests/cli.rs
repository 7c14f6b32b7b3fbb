use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mhpo::cli;
use mhpo::core::ratio::{self, LfmParams};
use mhpo::lab::{Lab, Suite};

fn mhpo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mhpo"))
        .args(args)
        .current_dir(cwd)
        .env_remove(cli::OUT_ROOT_VAR)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SHORT: [&str; 4] = ["--train.total_steps", "30", "--env.num_prompts", "8"];

fn train(cwd: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(&SHORT);
    args.extend_from_slice(extra);
    mhpo(&args, cwd)
}

#[test]
fn train_writes_run_directory_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = train(tmp.path(), out, &["--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in [
        "config.resolved",
        "log.csv",
        "summary.json",
        "ckpt.best",
        "ckpt.latest",
        "incidents.log",
    ] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        assert_eq!(
            a,
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let log = fs::read_to_string(tmp.path().join("a/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);
    assert!(log.lines().all(|l| l.split(',').count() == 10));
    let c = train(tmp.path(), "c", &["--seed", "8"]);
    assert_eq!(code(&c), 0);
    assert_ne!(
        fs::read(tmp.path().join("c/log.csv")).unwrap(),
        log.as_bytes()
    );
}

#[test]
fn default_run_directory_uses_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mhpo"))
        .args(["train", "--train.total_steps", "3", "--report.label", "x"])
        .current_dir(tmp.path())
        .env(cli::OUT_ROOT_VAR, "elsewhere")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("elsewhere/x-seed0/summary.json").exists());
}

#[test]
fn validation_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), "g", &["--method.name", "grpo_clip"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("method.eps"), "{}", stderr(&o));

    let o = train(tmp.path(), "u", &["--train.momentum", "0.9"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));

    assert_eq!(
        code(&mhpo(&["train", "--config", "nope.toml"], tmp.path())),
        3
    );
    assert_eq!(code(&mhpo(&["frobnicate"], tmp.path())), 1);
    assert_eq!(code(&mhpo(&["--help"], tmp.path())), 0);
}

#[test]
fn overrides_are_echoed_in_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        "[method]\nname = \"mhpo\"\nc = 1.0\n",
    )
    .unwrap();
    let o = mhpo(
        &[
            "train",
            "--config",
            "run.toml",
            "--method.c",
            "2.0",
            "--train.total_steps",
            "2",
            "--out",
            "r",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = fs::read_to_string(tmp.path().join("r/config.resolved")).unwrap();
    assert!(resolved.contains("c = 2.0"), "{resolved}");
}

#[test]
fn verify_bounds_passes_and_lists_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mhpo(&["verify", "bounds", "--out", "v"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("v/cert.json")).unwrap()).unwrap();
    assert_eq!(json["passed"], true);
    let names: Vec<&str> = json["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    for c in ["0.5", "1", "1.5", "2"] {
        assert!(
            names.contains(&format!("envelope_max_le_bound[c={c}]").as_str()),
            "{names:?}"
        );
    }
}

#[test]
fn verify_gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mhpo(&["verify", "gradcheck", "--out", "v"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn corrupted(p: LfmParams) -> f64 {
    0.99 * ratio::multiplier_bound(p)
}

#[test]
fn corrupted_bound_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let err = cli::verify(&Lab::with_bound(0, corrupted), Suite::All, tmp.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("envelope_max_le_bound"));
    let json = fs::read_to_string(tmp.path().join(cli::CERT_JSON)).unwrap();
    assert!(json.contains("\"passed\": false"));
}

#[test]
fn stress_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mhpo(
        &[
            "stress",
            "--ratios",
            "pareto-tail",
            "--samples",
            "20000",
            "--out",
            "s",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(tmp.path().join("s/stress_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert_eq!(code(&mhpo(&["stress", "--samples", "10"], tmp.path())), 1);
}

#[test]
fn report_single_and_multiple_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let methods: [(&str, &[&str]); 4] = [
        ("m", &[]),
        ("g", &["--method.name", "grpo_clip", "--method.eps", "0.2"]),
        (
            "d",
            &[
                "--method.name",
                "dapo_clip",
                "--method.eps_low",
                "0.2",
                "--method.eps_high",
                "0.28",
            ],
        ),
        ("n", &["--method.name", "naive_pg"]),
    ];
    for (out, extra) in methods {
        assert_eq!(code(&train(tmp.path(), out, extra)), 0);
    }

    let o = mhpo(&["report", "m", "--out", "one"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(tmp.path().join("one/reward.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(tmp.path().join("one/grad_norm.svg").exists());
    assert_eq!(
        fs::read_to_string(tmp.path().join("one/table.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let o = mhpo(
        &["report", "m", "g", "d", "n", "missing", "--out", "four"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("skipping missing"));
    let svg = fs::read_to_string(tmp.path().join("four/grad_norm.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    for label in ["mhpo", "grpo_clip", "dapo_clip", "naive_pg"] {
        assert!(
            svg.contains(&format!(">{label}</text>")),
            "legend lacks {label}"
        );
    }
    let table = fs::read_to_string(tmp.path().join("four/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);

    assert_eq!(code(&mhpo(&["report"], tmp.path())), 1);
}

#[test]
fn report_reads_partially_written_log() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(tmp.path(), "m", &[])), 0);
    let log = tmp.path().join("m/log.csv");
    let mut text = fs::read_to_string(&log).unwrap();
    text.push_str("31,0.5,0.1");
    fs::write(&log, text).unwrap();
    let (runs, warnings) = mhpo::report::load_runs(&[tmp.path().join("m")]);
    assert!(warnings.is_empty());
    assert_eq!(runs[0].log.len(), 30);
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = mhpo::config::RunConfig::load(&path, &[]).unwrap();
        cfg.resolve()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 4);
}
