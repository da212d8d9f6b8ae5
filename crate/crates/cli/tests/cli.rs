use std::fs;
use std::path::Path;
use std::process::Command as Proc;

use diffgap_cli::commands::{ABLATE_INTERVAL_FILE, ABLATE_STEPS_FILE, RETRIEVAL_FILE};
use diffgap_cli::config::RESOLVED_FILE;
use diffgap_cli::{resolve, run, Axis, CliError, Command, RunConfig, Sources};

const SMALL: &str = "\
# tiny end-to-end run
count = 240
dim_a = 12
dim_v = 12
concept_dim = 3
hidden_dim = 24
time_embed_dim = 8
epochs = 2
eval_count = 40
steps = 10
m = 3
";

fn with_file(text: &str) -> (tempfile::TempDir, Sources) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, text).unwrap();
    let src = Sources {
        file: Some(path),
        ..Default::default()
    };
    (dir, src)
}

#[test]
fn empty_file_resolves_to_defaults() {
    let (_d, src) = with_file("# nothing here\n\n");
    let cfg = resolve(&src).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.train.batch_size, 64);
    assert_eq!(cfg.train.learning_rate, 2e-4);
    assert_eq!(cfg.train.interval, Some(5000));
}

#[test]
fn flags_beat_file_values() {
    let (_d, mut src) = with_file("m = 1000\n");
    assert_eq!(resolve(&src).unwrap().train.interval, Some(1000));
    src.flags.push(("interval", "5000".into()));
    assert_eq!(resolve(&src).unwrap().train.interval, Some(5000));
}

#[test]
fn precedence_runs_env_file_set_flag() {
    let (_d, mut src) = with_file("seed = 2\n");
    src.env_seed = Some("1".into());
    assert_eq!(resolve(&src).unwrap().seed, 2);
    src.file = None;
    assert_eq!(resolve(&src).unwrap().seed, 1);
    src.sets.push("seed=3".into());
    assert_eq!(resolve(&src).unwrap().seed, 3);
    src.flags.push(("seed", "4".into()));
    assert_eq!(resolve(&src).unwrap().seed, 4);
}

#[test]
fn typo_keys_are_named() {
    let (_d, src) = with_file("btach_size = 32\n");
    match resolve(&src) {
        Err(CliError::UnknownKey(k)) => assert_eq!(k, "btach_size"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_values_and_conflicts_are_rejected() {
    let (_d, src) = with_file("learning_rate = fast\n");
    assert!(matches!(resolve(&src), Err(CliError::Value { .. })));
    let (_d, src) = with_file("map_correlation = 0.5\ndim_a = 8\n");
    assert!(matches!(resolve(&src), Err(CliError::Core(_))));
    let (_d, src) = with_file("eval_count = 6000\n");
    assert!(matches!(resolve(&src), Err(CliError::Conflict(_))));
    let (_d, src) = with_file("just a line\n");
    assert!(matches!(resolve(&src), Err(CliError::Syntax { line: 1, .. })));
}

#[test]
fn rendered_config_reads_back_unchanged() {
    let (_d, src) = with_file(SMALL);
    let mut cfg = resolve(&src).unwrap();
    cfg.train.data_scale = Some(0.3);
    cfg.train.interval = None;
    let mut back = RunConfig::default();
    back.apply_text(&cfg.render()).unwrap();
    assert_eq!(back.render(), cfg.render());
    assert_eq!(back.train, cfg.train);
    assert_eq!(back.concept, cfg.concept);
}

fn pipeline(out: &Path, src: &Sources) -> RunConfig {
    let mut src = src.clone();
    src.flags.push(("out", out.display().to_string()));
    let cfg = resolve(&src).unwrap();
    for cmd in [Command::GenData, Command::Train, Command::EvalRetrieval] {
        run(cmd, &cfg).unwrap();
    }
    cfg
}

#[test]
fn pipeline_is_deterministic_and_resolved_config_reproduces_it() {
    let (dir, src) = with_file(SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = pipeline(&a, &src);
    pipeline(&b, &src);
    for f in ["corpus.dgc", "model.dgck", RETRIEVAL_FILE, "loss.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    // Re-running from the echoed config rewrites identical artifacts.
    let echoed = resolve(&Sources {
        file: Some(a.join(RESOLVED_FILE)),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(echoed, RunConfig { corpus: Some(cfg.corpus_path()), ckpt: Some(cfg.ckpt_path()), ..cfg });
    let before: Vec<Vec<u8>> = ["corpus.dgc", "model.dgck", RETRIEVAL_FILE]
        .iter()
        .map(|f| fs::read(a.join(f)).unwrap())
        .collect();
    for cmd in [Command::GenData, Command::Train, Command::EvalRetrieval] {
        run(cmd, &echoed).unwrap();
    }
    for (f, old) in ["corpus.dgc", "model.dgck", RETRIEVAL_FILE].iter().zip(before) {
        assert_eq!(fs::read(a.join(f)).unwrap(), old, "{f}");
    }

    let report = fs::read_to_string(a.join(RETRIEVAL_FILE)).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("direction,k,recall,query_count,steps,seed"));
    assert_eq!(lines.count(), 12);
}

#[test]
fn ablation_axes_emit_the_swept_values() {
    let (dir, src) = with_file(SMALL);
    let out = dir.path().join("abl");
    let cfg = pipeline(&out, &src);
    run(Command::Ablate(Some(Axis::Steps)), &cfg).unwrap();
    run(Command::Ablate(Some(Axis::Interval)), &cfg).unwrap();

    let steps_csv = fs::read_to_string(out.join(ABLATE_STEPS_FILE)).unwrap();
    let steps: Vec<&str> = steps_csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    for s in ["50", "20", "5"] {
        assert!(steps.contains(&s), "missing steps {s}");
    }

    let interval_csv = fs::read_to_string(out.join(ABLATE_INTERVAL_FILE)).unwrap();
    assert!(interval_csv.starts_with("interval,direction,k,recall"));
    let mut ms: Vec<&str> = interval_csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    ms.dedup();
    assert_eq!(ms, ["1000", "5000", "10000"]);
}

#[test]
fn binary_exits_nonzero_with_one_line_cause() {
    let dir = tempfile::tempdir().unwrap();
    let out = Proc::new(env!("CARGO_BIN_EXE_diffgap"))
        .args(["train", "--set", "btach_size=3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("btach_size"));

    let missing = Proc::new(env!("CARGO_BIN_EXE_diffgap"))
        .args(["eval-retrieval", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert_eq!(String::from_utf8(missing.stderr).unwrap().lines().count(), 1);
}

#[test]
fn binary_runs_grad_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = Proc::new(env!("CARGO_BIN_EXE_diffgap"))
        .args(["grad-check", "--set", "dim_a=8", "--set", "dim_v=8", "--set", "hidden_dim=16", "--out"])
        .arg(dir.path())
        .env("DIFFGAP_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = fs::read_to_string(dir.path().join(RESOLVED_FILE)).unwrap();
    assert!(resolved.contains("seed = 5\n"));
    assert!(dir.path().join("grad_check.txt").exists());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn set_values_survive_render_and_reload(
        seed in 0u64..u64::MAX,
        lr in 1e-6f64..1.0,
        interval in proptest::option::of(1u64..100_000),
        steps in 1usize..=1000,
        eta in 0.0f64..2.0,
    ) {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("learning_rate", &lr.to_string()).unwrap();
        cfg.set("m", &interval.map_or("none".into(), |m| m.to_string())).unwrap();
        cfg.set("steps", &steps.to_string()).unwrap();
        cfg.set("eta", &eta.to_string()).unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render()).unwrap();
        proptest::prop_assert_eq!((back.seed, back.train.learning_rate, back.train.interval), (seed, lr, interval));
        proptest::prop_assert_eq!((back.steps, back.eta), (steps, eta));
    }
}
