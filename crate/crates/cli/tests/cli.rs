use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lsh() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lsh"))
}

fn corpus(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt")).unwrap();
    let mut end = 40_000.min(text.len());
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    let p = dir.join("corpus.txt");
    std::fs::write(&p, &text[..end]).unwrap();
    p
}

/// Overrides that shrink the desk profile to a few seconds of work.
const TINY: &[&str] = &[
    "model.embed=8",
    "model.hidden=8",
    "model.layers=1",
    "train.batch_size=4",
    "train.bptt=10",
    "train.eval_batch_size=2",
    "train.batches_per_epoch=5",
    "train.eval_blocks=3",
    "train.dense_epochs=2",
    "ls.k=1",
    "ls.t=20",
    "ls.warmup=2",
    "search.epochs_per_event=1",
    "search.selection_epochs=1",
    "search.final_k=2",
    "search.extensive_epochs=2",
];

fn tiny<'a>(cmd: &'a mut Command, corpus: &Path) -> &'a mut Command {
    cmd.arg("--corpus").arg(corpus);
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (
        status.code().unwrap(),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = run(lsh().arg("--help"));
    assert_eq!(code, 0);
    for sub in ["dense-train", "ls", "search", "report"] {
        assert!(out.contains(sub), "{out}");
    }
}

#[test]
fn unknown_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(lsh().args(["search", "--set", "search.bogus=1"]).arg("--output").arg(dir.path()));
    assert_eq!(code, 1);
    assert!(err.contains("search.bogus"), "{err}");
}

#[test]
fn bad_enum_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = run(lsh().args(["search", "--sampler", "annealing"]).arg("--output").arg(dir.path()));
    assert_eq!(code, 1);
}

#[test]
fn missing_corpus_and_divergence_exit_differently() {
    let dir = tempfile::tempdir().unwrap();
    let (missing, _, err) = run(lsh()
        .args(["dense-train", "--corpus"])
        .arg(dir.path().join("nope.txt"))
        .arg("--output")
        .arg(dir.path().join("a")));
    assert_eq!(missing, 1, "{err}");
    assert!(err.contains("corpus.path"), "{err}");

    let c = corpus(dir.path());
    let (diverged, _, err) = run(tiny(lsh().arg("dense-train"), &c)
        .args(["--set", "train.lr=1e300", "--set", "train.clip=1e300"])
        .arg("--output")
        .arg(dir.path().join("b")));
    assert_eq!(diverged, 2, "{err}");
    assert!(err.contains("diverged"), "{err}");
}

#[test]
fn report_on_incomplete_dir_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), "{}").unwrap();
    let (code, _, err) = run(lsh().arg("report").arg(dir.path()));
    assert_eq!(code, 3);
    assert!(err.contains("pool_history.csv"), "{err}");
}

#[test]
fn grid_search_enumerates_all_method_combinations() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let out = dir.path().join("run");
    let (code, stdout, err) = run(tiny(lsh().arg("search"), &c)
        .args(["--sampler", "grid", "--death-rate", "0.8", "--pool-size", "24", "--criterion", "val_loss"])
        .arg("--output")
        .arg(&out));
    assert_eq!(code, 0, "{err}");
    let best: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(best["val_ppl"].as_f64().unwrap().is_finite());

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let initial: Vec<&serde_json::Value> = report["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["created_at"] == 0)
        .collect();
    assert_eq!(initial.len(), 24);
    let mut combos: Vec<String> = initial
        .iter()
        .map(|c| {
            let cfg = &c["config"];
            assert_eq!(cfg["death_rate"], 0.8);
            format!("{}/{}/{}", cfg["init_mode"], cfg["death_mode"], cfg["redist_mode"])
        })
        .collect();
    combos.sort();
    combos.dedup();
    assert_eq!(combos.len(), 24);
    assert!(!out.join(".lock").exists());

    let (code, stdout, err) = run(lsh().arg("report").arg(&out));
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("budget_rows"), "{stdout}");
    assert!(out.join("report/budget.csv").is_file());
}

#[test]
fn search_is_reproducible_and_respects_the_lock() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let search = |out: &Path| {
        run(tiny(lsh().arg("search"), &c)
            .args(["--pool-size", "4", "--criterion", "val_loss", "--seed", "7"])
            .arg("--output")
            .arg(out))
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (code_a, best_a, err) = search(&a);
    assert_eq!(code_a, 0, "{err}");
    let (code_b, best_b, _) = search(&b);
    assert_eq!(code_b, 0);
    assert_eq!(best_a, best_b);
    assert_eq!(std::fs::read(a.join("report.json")).unwrap(), std::fs::read(b.join("report.json")).unwrap());

    std::fs::write(a.join(".lock"), "").unwrap();
    let (code, _, err) = search(&a);
    assert_eq!(code, 2);
    assert!(err.contains("lock") || err.contains("in use"), "{err}");
}

#[test]
fn output_root_env_var_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let root = dir.path().join("root");
    let (code, _, err) = run(tiny(lsh().arg("dense-train"), &c).args(["--seed", "3"]).env("LSH_OUTPUT_ROOT", &root));
    assert_eq!(code, 0, "{err}");
    assert!(root.join("dense-seed3/dense.ckpt").is_file());

    let flag = dir.path().join("explicit");
    let (code, _, err) = run(tiny(lsh().arg("dense-train"), &c)
        .args(["--seed", "4"])
        .env("LSH_OUTPUT_ROOT", &root)
        .arg("--output")
        .arg(&flag));
    assert_eq!(code, 0, "{err}");
    assert!(flag.join("dense.ckpt").is_file());
    assert!(!root.join("dense-seed4").exists());

    // The spectrum of the saved checkpoint matches the one written at training time.
    let ls_csv = dir.path().join("ls.csv");
    let (code, _, err) = run(tiny(lsh().arg("ls"), &c)
        .args(["--seed", "4", "--checkpoint"])
        .arg(flag.join("dense.ckpt"))
        .arg("--out")
        .arg(&ls_csv));
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read(&ls_csv).unwrap(), std::fs::read(flag.join("spectrum.csv")).unwrap());
}
