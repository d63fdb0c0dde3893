//! End-to-end tests of the `selmag` binary: the full
//! generate → pretrain → train → evaluate pipeline on a tiny suite, stage
//! resumption, ablation dispatch, and the documented exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn selmag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selmag"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = selmag(args);
    assert!(
        out.status.success(),
        "selmag {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn expect_exit(args: &[&str], code: i32) -> String {
    let out = selmag(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "selmag {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Two shifted sources plus a mildly shifted target, 24 nodes each.
const SUITE_SPEC: &str = r#"{
  "base": {
    "num_nodes": 24,
    "num_classes": 3,
    "feature_dim": 6,
    "p_intra": 0.25,
    "p_inter": 0.04,
    "noise_sigma": 0.4,
    "mean_scale": 1.0,
    "seed": 9
  },
  "schedule": {
    "sources": [
      {},
      {"rotation_angle": 0.4, "mean_shift_sigma": 0.1}
    ],
    "target": {"rotation_angle": 0.2}
  }
}"#;

/// Small but complete experiment config for fast end-to-end runs.
const EXPERIMENT: &str = r#"{
  "seed": 11,
  "source": {"hidden_dim": 12, "max_epochs": 150},
  "ssl": {"hidden_dim": 8, "epochs": 10, "num_groups": 3},
  "train": {
    "max_outer_epochs": 3,
    "inner_steps": 2,
    "label_ratio": 0.3,
    "sinkhorn_max_iters": 300,
    "sinkhorn_tolerance": 1e-6
  }
}"#;

struct Fixture {
    _dir: TempDir,
    suite: String,
    suite_spec: String,
    config: String,
    root: std::path::PathBuf,
}

impl Fixture {
    fn generated() -> Fixture {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let suite_spec = root.join("suite_spec.json");
        let config = root.join("config.json");
        fs::write(&suite_spec, SUITE_SPEC).unwrap();
        fs::write(&config, EXPERIMENT).unwrap();
        let suite = root.join("suite");
        let fixture = Fixture {
            _dir: dir,
            suite: suite.display().to_string(),
            suite_spec: suite_spec.display().to_string(),
            config: config.display().to_string(),
            root,
        };
        run_ok(&[
            "generate",
            "--config",
            &fixture.suite_spec,
            "--out",
            &fixture.suite,
        ]);
        fixture
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn pretrained(&self) -> String {
        let pre = self.path("pre");
        run_ok(&[
            "pretrain",
            "--suite",
            &self.suite,
            "--out",
            &pre,
            "--config",
            &self.config,
        ]);
        pre
    }

    fn trained(&self, pre: &str, name: &str, extra: &[&str]) -> String {
        let run = self.path(name);
        let mut args = vec![
            "train",
            "--suite",
            &self.suite,
            "--artifacts",
            pre,
            "--out",
            &run,
            "--config",
            &self.config,
        ];
        args.extend_from_slice(extra);
        run_ok(&args);
        run
    }
}

fn count_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn pipeline_runs_end_to_end_and_is_deterministic() {
    let fx = Fixture::generated();
    let suite_dir = Path::new(&fx.suite);
    assert!(suite_dir.join("manifest.json").is_file());
    assert!(suite_dir.join("source_0").is_dir());
    assert!(suite_dir.join("source_1").is_dir());
    assert!(suite_dir.join("target").is_dir());
    assert!(suite_dir.join("target_labels_eval.tsv").is_file());
    assert!(suite_dir.join("run_config_resolved.json").is_file());

    // Regenerating with the same spec gives identical domains.
    let again = fx.path("suite_again");
    run_ok(&["generate", "--config", &fx.suite_spec, "--out", &again]);
    let first = fs::read(suite_dir.join("target").join("features.tsv")).unwrap();
    let second = fs::read(Path::new(&again).join("target").join("features.tsv")).unwrap();
    assert_eq!(first, second);

    let pre = fx.pretrained();
    let pre_dir = Path::new(&pre);
    assert!(pre_dir.join("source_models.json").is_file());
    assert!(pre_dir.join("ssl_modules.json").is_file());
    // Header + 3 tasks x 2 sources x 2 graphs.
    assert_eq!(count_lines(&pre_dir.join("transfer_scores_pairs.csv")), 13);

    let run = fx.trained(&pre, "run", &[]);
    let run_dir = Path::new(&run);
    // Header + one row per completed epoch (3 epochs, patience not hit).
    assert_eq!(count_lines(&run_dir.join("training_log.csv")), 4);
    assert!(run_dir.join("selectors.json").is_file());
    assert!(run_dir.join("target_model.json").is_file());
    // Header + 3 tasks x 2 sources.
    assert_eq!(count_lines(&run_dir.join("transfer_scores_target.csv")), 7);

    let eval = fx.path("eval");
    run_ok(&[
        "evaluate",
        "--suite",
        &fx.suite,
        "--pretrain",
        &pre,
        "--run",
        &run,
        "--out",
        &eval,
        "--config",
        &fx.config,
    ]);
    let eval_dir = Path::new(&eval);
    let report = fs::read_to_string(eval_dir.join("eval_report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "run_id,variant,seed,acc,auroc,macro_f1");
    assert!(lines[1].starts_with("run,full,11,"));
    // Header + one row per source.
    assert_eq!(count_lines(&eval_dir.join("selector_analysis.csv")), 3);

    // The whole train + evaluate chain is reproducible byte for byte.
    let run2 = fx.trained(&pre, "run2", &[]);
    let eval2 = fx.path("eval2");
    run_ok(&[
        "evaluate",
        "--suite",
        &fx.suite,
        "--pretrain",
        &pre,
        "--run",
        &run2,
        "--out",
        &eval2,
        "--config",
        &fx.config,
    ]);
    for file in ["training_log.csv", "selectors.json", "target_model.json"] {
        assert_eq!(
            fs::read(run_dir.join(file)).unwrap(),
            fs::read(Path::new(&run2).join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }
    assert_eq!(
        fs::read(eval_dir.join("eval_report.csv")).unwrap(),
        fs::read(Path::new(&eval2).join("eval_report.csv")).unwrap()
    );
}

#[test]
fn resume_skips_completed_stages_and_preserves_artifacts() {
    let fx = Fixture::generated();
    let pre = fx.pretrained();
    let pre_dir = Path::new(&pre);
    let before = fs::read(pre_dir.join("source_models.json")).unwrap();
    let stdout = run_ok(&[
        "pretrain",
        "--suite",
        &fx.suite,
        "--out",
        &pre,
        "--resume",
        "--config",
        &fx.config,
    ]);
    assert_eq!(stdout.matches("reusing").count(), 3, "{stdout}");
    let after = fs::read(pre_dir.join("source_models.json")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn ablation_flag_changes_the_trained_variant() {
    let fx = Fixture::generated();
    let pre = fx.pretrained();
    let run = fx.trained(&pre, "run_no_global", &["--ablation", "no_global"]);
    let run_dir = Path::new(&run);
    // A disabled graph-level selector means no target scoring pass.
    assert!(!run_dir.join("transfer_scores_target.csv").exists());
    assert!(run_dir.join("target_model.json").is_file());
    let resolved = fs::read_to_string(run_dir.join("run_config_resolved.json")).unwrap();
    assert!(resolved.contains("\"ablation\": \"no_global\""));

    let plan_run = fx.trained(&pre, "run_plan", &["--dump-plan"]);
    let plan = fs::read_to_string(Path::new(&plan_run).join("transport_plan.csv")).unwrap();
    let mut lines = plan.lines();
    assert_eq!(lines.next(), Some("i,j,gamma"));
    // 2 x 24 stacked source nodes against 24 target nodes.
    assert_eq!(lines.count(), 48 * 24);
}

#[test]
fn malformed_config_exits_two_with_parse_location() {
    let fx = Fixture::generated();
    let bad = fx.path("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let stderr = expect_exit(
        &["generate", "--config", &bad, "--out", &fx.path("x")],
        2,
    );
    assert!(stderr.contains("line"), "{stderr}");
    // Same contract for experiment configs on the other commands.
    let stderr = expect_exit(
        &[
            "pretrain",
            "--suite",
            &fx.suite,
            "--out",
            &fx.path("y"),
            "--config",
            &bad,
        ],
        2,
    );
    assert!(stderr.contains("line"), "{stderr}");
}

#[test]
fn unknown_ablation_exits_two() {
    let fx = Fixture::generated();
    expect_exit(
        &[
            "train",
            "--suite",
            &fx.suite,
            "--artifacts",
            &fx.path("nowhere"),
            "--out",
            &fx.path("out"),
            "--ablation",
            "bogus",
        ],
        2,
    );
}

#[test]
fn missing_artifacts_exit_three() {
    let fx = Fixture::generated();
    // Train against an empty artifact directory.
    fs::create_dir(fx.root.join("empty")).unwrap();
    let stderr = expect_exit(
        &[
            "train",
            "--suite",
            &fx.suite,
            "--artifacts",
            &fx.path("empty"),
            "--out",
            &fx.path("out"),
            "--config",
            &fx.config,
        ],
        3,
    );
    assert!(stderr.contains("missing file"), "{stderr}");

    // Evaluate without the held-out label file.
    let pre = fx.pretrained();
    let run = fx.trained(&pre, "run", &[]);
    fs::remove_file(fx.root.join("suite").join("target_labels_eval.tsv")).unwrap();
    expect_exit(
        &[
            "evaluate",
            "--suite",
            &fx.suite,
            "--pretrain",
            &pre,
            "--run",
            &run,
            "--out",
            &fx.path("eval"),
            "--config",
            &fx.config,
        ],
        3,
    );
}
