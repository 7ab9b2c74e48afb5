use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alibi_lm::cli::{self, parse_config, RunOptions};

fn corpus_slice(dir: &Path, bytes: usize) -> PathBuf {
    let full = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/shakespeare.txt");
    let text = fs::read(full).unwrap();
    let path = dir.join("corpus.txt");
    fs::write(&path, &text[..bytes]).unwrap();
    path
}

fn tiny_config(dir: &Path, corpus: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "d_model = 16\nn_heads = 2\nn_layers = 1\nd_ffn = 32\nseq_len = 16\nbatch_size = 4\n\
         steps = 6\nwarmup_steps = 2\neval_every = 0\ncorpus = {:?}\nlengths = [8, 16, 32]\n{extra}",
        corpus.display().to_string()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn bin(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_alibi-lm"));
    cmd.args(args).env_remove("ALIBI_LM_SEED");
    if let Some(s) = seed {
        cmd.env("ALIBI_LM_SEED", s);
    }
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn train_then_sweep_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus_slice(dir.path(), 40_000);
    let config = tiny_config(dir.path(), &corpus, "");
    let out = dir.path().join("out");

    let o = bin(&["train", "--config", s(&config), "--out", s(&out)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("alibi.ckpt").exists());
    assert!(out.join("alibi_train_log.csv").exists());
    assert_eq!(data_rows(&out.join("alibi_train_log.csv")).len(), 6);

    let resolved = parse_config(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(resolved.d_model, 16);
    assert_eq!(resolved.out_dir, out);

    let o = bin(&["sweep", "--config", s(&config), "--out", s(&out)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,L_train,L_valid,mode,stride,ppl,tokens,passes,seconds"
    );
    let rows = data_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 3);
    let lengths: Vec<&str> = rows.iter().map(|r| &r[2]).collect();
    assert_eq!(lengths, ["8", "16", "32"]);
    assert!(rows.iter().all(|r| &r[0] == "alibi" && &r[1] == "16"));
}

#[test]
fn compare_trains_each_method_and_merges() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus_slice(dir.path(), 40_000);
    let config = tiny_config(dir.path(), &corpus, "");
    let out = dir.path().join("cmp");
    let o = bin(&["compare", "--config", s(&config), "--out", s(&out), "--lengths", "16,32"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("sinusoidal.ckpt").exists());
    assert!(out.join("alibi.ckpt").exists());
    let rows = data_rows(&out.join("compare.csv"));
    let keys: Vec<(String, String)> = rows.iter().map(|r| (r[0].to_string(), r[2].to_string())).collect();
    assert_eq!(
        keys,
        [("sinusoidal", "16"), ("sinusoidal", "32"), ("alibi", "16"), ("alibi", "32")]
            .map(|(a, b)| (a.to_string(), b.to_string()))
    );

    // Same resolved config, same bytes.
    let again = dir.path().join("cmp2");
    let o = bin(&["compare", "--config", s(&out.join("config.toml")), "--out", s(&again)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["compare.csv", "alibi_train_log.csv", "sinusoidal_valid_log.csv", "alibi.ckpt"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_sliding_on_eight_token_fixture_reports_five_passes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("eight.txt");
    fs::write(&corpus, b"abcdefgh").unwrap();
    let big = corpus_slice(dir.path(), 20_000);
    let train_cfg = tiny_config(dir.path(), &big, "");
    let out = dir.path().join("fixture");
    let o = bin(&["train", "--config", s(&train_cfg), "--out", s(&out)], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let eval_cfg = dir.path().join("eval.toml");
    fs::write(
        &eval_cfg,
        format!(
            "d_model = 16\nn_heads = 2\nn_layers = 1\nd_ffn = 32\nseq_len = 16\nsteps = 0\nwarmup_steps = 0\n\
             corpus = {:?}\neval_split = \"all\"\nlengths = [4]\n",
            corpus.display().to_string()
        ),
    )
    .unwrap();
    let ckpt = out.join("alibi.ckpt");
    let o = bin(
        &[
            "eval", "--config", s(&eval_cfg), "--out", s(&out), "--checkpoint", s(&ckpt),
            "--mode", "sliding", "--stride", "1", "--lengths", "4",
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = data_rows(&out.join("eval.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][3], "sliding");
    assert_eq!(&rows[0][4], "1");
    assert_eq!(&rows[0][6], "7");
    assert_eq!(&rows[0][7], "5");

    let o = bin(
        &["eval", "--config", s(&eval_cfg), "--out", s(&out), "--checkpoint", s(&ckpt), "--lengths", "4"],
        None,
    );
    assert!(o.status.success());
    assert_eq!(&data_rows(&out.join("eval.csv"))[0][7], "2");
}

#[test]
fn errors_are_single_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "steps = 3\nposition_methd = \"alibi\"\n").unwrap();
    let o = bin(&["train", "--config", s(&bad), "--out", s(dir.path())], None);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]:") && err.contains("position_methd"), "{err}");

    let o = bin(
        &["sweep", "--out", s(dir.path()), "--checkpoint", s(&dir.path().join("none.ckpt"))],
        None,
    );
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.lines().last().unwrap().starts_with("error["), "{err}");

    let corpus = corpus_slice(dir.path(), 5_000);
    let config = tiny_config(dir.path(), &corpus, "");
    let o = bin(&["train", "--config", s(&config), "--out", s(dir.path())], Some("not-a-number"));
    assert!(!o.status.success());
    assert!(String::from_utf8(o.stderr).unwrap().contains("ALIBI_LM_SEED"));
}

#[test]
fn seed_env_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus_slice(dir.path(), 20_000);
    let config = tiny_config(dir.path(), &corpus, "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(bin(&["train", "--config", s(&config), "--out", s(&a)], Some("5")).status.success());
    assert!(bin(&["train", "--config", s(&config), "--out", s(&b)], Some("6")).status.success());
    assert!(fs::read_to_string(a.join("config.toml")).unwrap().contains("seed = 5"));
    assert_ne!(fs::read(a.join("alibi.ckpt")).unwrap(), fs::read(b.join("alibi.ckpt")).unwrap());
}

#[test]
fn library_entry_point_matches_binary_layout() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus_slice(dir.path(), 20_000);
    let config = cli::load_config(tiny_config(dir.path(), &corpus, "position_method = \"t5\"\n")).unwrap();
    let out = dir.path().join("lib");
    let report = cli::run(
        cli::Command::Train,
        config,
        &RunOptions {
            out: Some(out.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(report.artifacts.contains(&out.join("t5.ckpt")));
    assert!(report.artifacts.iter().all(|p| p.exists()));
}
