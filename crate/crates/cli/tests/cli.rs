//! End-to-end checks of the command-line contract on a tiny synthetic corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "embed = 8\nhidden = 8\nattn = 8\nk = 2\nbatch = 4\nmax_len = 14\n\
disc_maps = 4\nsteps = 12\ncheckpoint_every = 6\nrefresh_interval = 5\nmin_count = 1\n";

fn styleshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styleshift"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A toy corpus plus a config file in a fresh directory.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    ok(&styleshift(&[
        "make-toy",
        "--out",
        p(&root.join("toy")),
        "--per-style",
        "80",
        "--test-per-style",
        "6",
    ]));
    let config = root.join("tiny.cfg");
    std::fs::write(&config, TINY).unwrap();
    Fixture {
        data: root.join("toy").join("toy"),
        root,
        config,
        _dir: dir,
    }
}

fn train(f: &Fixture, out: &str, extra: &[&str]) -> PathBuf {
    let run = f.root.join(out);
    let mut args = vec![
        "train",
        "--config",
        p(&f.config),
        "--data",
        p(&f.data),
        "--out",
        p(&run),
    ];
    args.extend_from_slice(extra);
    ok(&styleshift(&args));
    run
}

#[test]
fn missing_corpus_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("nothing");
    let out = styleshift(&["train", "--data", p(&data), "--out", p(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nothing.train.0"), "{}", stderr(&out));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn invalid_config_key_is_named() {
    let f = fixture();
    let bad = f.root.join("bad.cfg");
    std::fs::write(&bad, "hidden = 8\nlearning_rate = 0.1\n").unwrap();
    let out = styleshift(&[
        "train",
        "--config",
        p(&bad),
        "--data",
        p(&f.data),
        "--out",
        p(&f.root.join("run")),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let out = styleshift(&[
        "train",
        "--data",
        p(&f.data),
        "--set",
        "bogus=1",
        "--out",
        p(&f.root.join("run2")),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let f = fixture();
    let a = train(&f, "a", &["--seed", "7"]);
    let b = train(&f, "b", &["--seed", "7"]);
    let c = train(&f, "c", &["--seed", "8"]);
    let head = |run: &Path| -> Vec<String> {
        std::fs::read_to_string(run.join("train_log.tsv"))
            .unwrap()
            .lines()
            .take(11)
            .map(String::from)
            .collect()
    };
    assert_eq!(head(&a).len(), 11);
    assert_eq!(head(&a), head(&b));
    assert_ne!(head(&a), head(&c));
    // Flags override the config file.
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 7"));
    assert!(manifest.contains("config k = 2"));
}

#[test]
fn random_retriever_variant_trains() {
    let f = fixture();
    let run = train(&f, "random", &["--set", "retriever=random"]);
    let manifest = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("config retriever = random"));
}

#[test]
fn transfer_contract() {
    let f = fixture();
    let run = train(&f, "run", &[]);
    let input = f.root.join("in.txt");
    std::fs::write(&input, "the food was good\n\ni love the pizza they serve\n").unwrap();
    let output = f.root.join("out.txt");
    let prov = f.root.join("prov.tsv");
    let args = [
        "transfer",
        "--run",
        p(&run),
        "--input",
        p(&input),
        "--target",
        "1",
        "--out",
        p(&output),
        "--provenance",
        p(&prov),
    ];
    ok(&styleshift(&args));
    let lines = std::fs::read_to_string(&output).unwrap();
    assert_eq!(lines.lines().count(), 3);
    assert_eq!(lines.lines().nth(1), Some(""));

    // Exactly K = 2 retrieved sentences per non-blank input.
    let prov_text = std::fs::read_to_string(&prov).unwrap();
    let rows: Vec<&str> = prov_text.lines().skip(1).collect();
    assert_eq!(prov_text.lines().next(), Some("line\trank\tscore\tsentence"));
    for line in ["1", "3"] {
        assert_eq!(rows.iter().filter(|r| r.split('\t').next() == Some(line)).count(), 2);
    }

    // Existing outputs are protected unless forced.
    let again = styleshift(&args);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("out.txt"), "{}", stderr(&again));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&styleshift(&forced));

    // Empty input, empty output.
    let empty = f.root.join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let empty_out = f.root.join("empty.out");
    ok(&styleshift(&[
        "transfer",
        "--run",
        p(&run),
        "--input",
        p(&empty),
        "--target",
        "0",
        "--out",
        p(&empty_out),
    ]));
    assert_eq!(std::fs::read_to_string(&empty_out).unwrap(), "");

    // Style out of range.
    let bad = styleshift(&[
        "transfer",
        "--run",
        p(&run),
        "--input",
        p(&input),
        "--target",
        "2",
        "--out",
        p(&f.root.join("bad.txt")),
    ]);
    assert!(!bad.status.success());
    assert!(!f.root.join("bad.txt").exists());

    // Retrieval listing.
    let out = styleshift(&[
        "retrieve",
        "--run",
        p(&run),
        "--query",
        "the food was good",
        "--style",
        "1",
        "--k",
        "3",
    ]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rank\tscore\tsentence");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1\t"));
}

#[test]
fn run_directories_need_force() {
    let f = fixture();
    let run = train(&f, "run", &[]);
    let out = styleshift(&["train", "--config", p(&f.config), "--data", p(&f.data), "--out", p(&run)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains(p(&run)), "{}", stderr(&out));
    train(&f, "run", &["--force"]);
}

fn report_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

#[test]
fn sweep_rows_match_independent_runs() {
    let f = fixture();
    let sweep = f.root.join("sweep");
    ok(&styleshift(&[
        "sweep-k",
        "--config",
        p(&f.config),
        "--data",
        p(&f.data),
        "--out",
        p(&sweep),
        "--k",
        "1,3",
        "--classifier-epochs",
        "1",
    ]));
    let rows = report_rows(&sweep.join("sweep.tsv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "1");
    assert_eq!(rows[1][0], "3");

    // A plain run with K = 3 and the same seed evaluates to the same GM.
    let run = train(&f, "k3", &["--set", "k=3"]);
    let eval = f.root.join("k3-eval");
    ok(&styleshift(&[
        "evaluate",
        "--run",
        p(&run),
        "--out",
        p(&eval),
        "--classifier-epochs",
        "1",
    ]));
    let pooled = report_rows(&eval.join("report.tsv"))
        .into_iter()
        .find(|r| r[0] == "all")
        .unwrap();
    assert_eq!(rows[1].last(), pooled.last());
}
