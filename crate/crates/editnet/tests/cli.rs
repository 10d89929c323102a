use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use editnet::checkpoint::{decode_stats, Container, STATS};
use editnet::edbf;
use editnet_core::{Domain, EmbeddingSet, Matrix};

const SMALL_SPEC: &str = "n_speakers = 12\nemb_per_speaker = 8\neval_speakers = 4\ndim = 16\nspeaker_rank = 4\nn_trials = 200\n";
const SMALL_TRAIN: &str = "batch_per_domain = 32\nepochs = 2\nz_dim = 8\n";

fn editnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_editnet"))
        .args(args)
        .output()
        .expect("spawn editnet")
}

fn ok(args: &[&str]) -> Output {
    let out = editnet(args);
    assert!(
        out.status.success(),
        "editnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("spec.txt"), SMALL_SPEC).unwrap();
        std::fs::write(root.join("train.txt"), SMALL_TRAIN).unwrap();
        ok(&["synth", "--spec", p(&root.join("spec.txt")), "--out", p(&root.join("data"))]);
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let ckpt = self.path(out);
        let (tar, src, cfg) = (self.data("tar_train.edbf"), self.data("src_train.edbf"), self.path("train.txt"));
        let mut args = vec!["train", "--tar", p(&tar), "--src", p(&src), "--config", p(&cfg), "--out", p(&ckpt)];
        args.extend_from_slice(extra);
        ok(&args);
        ckpt
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn synth_is_deterministic_and_validates_specs() {
    let f = Fixture::new();
    let again = f.path("again");
    ok(&["synth", "--spec", p(&f.path("spec.txt")), "--out", p(&again)]);
    for name in editnet::cli::SYNTH_FILES {
        assert_eq!(std::fs::read(f.data(name)).unwrap(), std::fs::read(again.join(name)).unwrap(), "{name}");
    }
    std::fs::write(f.path("bad.txt"), "n_speakers = 1\n").unwrap();
    let out = editnet(&["synth", "--spec", p(&f.path("bad.txt")), "--out", p(&f.path("x"))]);
    assert_eq!(code(&out), 2);
    let out = editnet(&["synth", "--out", p(&f.path("y")), "--bogus"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn every_run_prints_its_configuration() {
    let f = Fixture::new();
    let out = ok(&["stats", "--embeddings", p(&f.data("tar_train.edbf")), "--out", p(&f.path("s"))]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("# editnet stats") && err.contains("# embeddings = "), "{err}");
    let out = ok(&["synth", "--spec", p(&f.path("spec.txt")), "--out", p(&f.path("d2"))]);
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["n_speakers = 12", "dim = 16", "shift = nonlinear", "seed = 42"] {
        assert!(err.contains(key), "missing {key}: {err}");
    }
}

#[test]
fn stats_are_stable_and_need_two_rows() {
    let f = Fixture::new();
    let (a, b) = (f.path("a.stats"), f.path("b.stats"));
    let input = f.data("tar_train.edbf");
    ok(&["stats", "--embeddings", p(&input), "--out", p(&a)]);
    ok(&["stats", "--embeddings", p(&input), "--out", p(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let one = EmbeddingSet::new(Domain::Target, Matrix::zeros(1, 3), vec!["u".into()], vec!["s".into()]).unwrap();
    edbf::save(&one, &f.path("one.edbf")).unwrap();
    let out = editnet(&["stats", "--embeddings", p(&f.path("one.edbf")), "--out", p(&f.path("c"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2 rows"));
}

#[test]
fn identity_shift_gives_matching_stats() {
    let f = Fixture::new();
    let spec = "n_speakers = 60\nemb_per_speaker = 40\neval_speakers = 4\ndim = 16\nspeaker_rank = 4\nn_trials = 200\nshift = identity\n";
    std::fs::write(f.path("id.txt"), spec).unwrap();
    ok(&["synth", "--spec", p(&f.path("id.txt")), "--out", p(&f.path("id"))]);
    let mut means = Vec::new();
    for name in ["tar_train", "src_train"] {
        let out = f.path(name);
        ok(&["stats", "--embeddings", p(&f.path("id").join(format!("{name}.edbf"))), "--out", p(&out)]);
        let c = Container::load(&out).unwrap();
        means.push(decode_stats(c.require(STATS).unwrap(), 0).unwrap());
    }
    // Standard error with the 60 speakers as independent units.
    for ch in 0..16 {
        let se = ((means[0].std[ch].powi(2) + means[1].std[ch].powi(2)) / 60.0).sqrt();
        assert!((means[0].mean[ch] - means[1].mean[ch]).abs() < 4.0 * se, "channel {ch}");
    }
}

#[test]
fn train_is_reproducible_and_logs_variants() {
    let f = Fixture::new();
    let a = f.train("a.ckpt", &[]);
    let b = f.train("b.ckpt", &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = f.train("c.ckpt", &["--seed", "7"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let nc = f.train("nc.ckpt", &["--variant", "no_cosine"]);
    let log = std::fs::read_to_string(format!("{}.log.tsv", p(&nc))).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "step\tepoch\tlr\trec\tkl\tcos\ttotal");
    let rows: Vec<&str> = lines.collect();
    // 96 target rows / 32 per batch, two epochs
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|l| l.split('\t').nth(5) == Some("0.0")));

    let full_log = std::fs::read_to_string(format!("{}.log.tsv", p(&a))).unwrap();
    assert!(full_log.lines().skip(1).any(|l| l.split('\t').nth(5) != Some("0.0")));
}

#[test]
fn transfer_methods() {
    let f = Fixture::new();
    let ckpt = f.train("m.ckpt", &[]);
    let input = f.data("tar_eval.edbf");
    let run = |method: &str, out: &str| {
        let out = f.path(out);
        ok(&["transfer", "--ckpt", p(&ckpt), "--in", p(&input), "--method", method, "--out", p(&out)]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("none", "none.edbf"), std::fs::read(&input).unwrap());
    assert_eq!(run("editnet", "e1.edbf"), run("editnet", "e2.edbf"));
    for m in ["center", "center_shift", "standardize", "standardize_recolor", "coral"] {
        let moved = edbf::decode(&run(m, &format!("{m}.edbf")), Domain::Source).unwrap();
        assert_eq!(moved.len(), 32, "{m}");
    }

    let bare = f.train("bare.ckpt", &["--no-coral"]);
    let out = editnet(&["transfer", "--ckpt", p(&bare), "--in", p(&input), "--method", "coral", "--out", p(&f.path("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("coral"));
    let out = editnet(&["transfer", "--ckpt", p(&bare), "--in", p(&input), "--method", "pca", "--out", p(&f.path("x"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_reports_and_rejects_bad_input() {
    let f = Fixture::new();
    let ckpt = f.train("m.ckpt", &[]);
    let (eval, trials) = (f.data("tar_eval.edbf"), f.data("trials.tsv"));
    let (scores, report) = (f.path("s.tsv"), f.path("r.txt"));
    let out = ok(&[
        "eval", "--ckpt", p(&ckpt), "--eval", p(&eval), "--trials", p(&trials), "--method", "editnet", "--scores",
        p(&scores), "--report", p(&report),
    ]);
    let report_text = std::fs::read_to_string(&report).unwrap();
    let keys: Vec<&str> = report_text.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["eer", "threshold", "n_trials", "n_same", "n_diff"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains(&report_text));
    let score_lines = std::fs::read_to_string(&scores).unwrap();
    assert_eq!(score_lines.lines().count(), 200);
    assert!(score_lines.lines().all(|l| l.split('\t').count() == 4));

    let out = editnet(&[
        "eval", "--ckpt", p(&ckpt), "--eval", p(&eval), "--trials", p(&trials), "--method", "none,editnet", "--report",
        p(&report),
    ]);
    assert_eq!(code(&out), 1);

    std::fs::write(f.path("bad_trials.tsv"), "1\teval_s0000_u0000\tghost_utt\n0\teval_s0000_u0000\teval_s0001_u0000\n").unwrap();
    let out = editnet(&["eval", "--ckpt", p(&ckpt), "--eval", p(&eval), "--trials", p(&f.path("bad_trials.tsv")), "--method", "none"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost_utt"));
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let f = Fixture::new();
    let ckpt = f.train("m.ckpt", &[]);
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0x40;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = editnet(&["transfer", "--ckpt", p(&ckpt), "--in", p(&f.data("tar_eval.edbf")), "--method", "none", "--out", p(&f.path("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn gradcheck_lists_every_term_and_fails_on_fault() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for term in ["rec", "kl", "cos", "total"] {
        assert!(text.lines().any(|l| l.starts_with(term) && l.contains("max_rel_error=")), "{term}: {text}");
    }
    let out = editnet(&["gradcheck", "--inject-fault", "1e-3"]);
    assert_eq!(code(&out), 4);
    let help = ok(&["gradcheck", "--help"]);
    assert!(!String::from_utf8_lossy(&help.stdout).contains("inject"));
}
