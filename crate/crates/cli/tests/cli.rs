use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gramlm::corpus::FineVocab;
use gramlm::maskplan::{sample_mask, RngState, Segmented};
use gramlm::lexicon::NGramLexicon;
use serde_json::Value;
use tempfile::TempDir;

fn gramlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gramlm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = gramlm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

/// A corpus with a few recurring phrases, its lexicon and vocabulary.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let phrases = ["new york", "ice cream", "machine learning", "united states of america"];
    let fillers = ["the", "a", "city", "people", "love", "eat", "is", "good", "big"];
    let mut text = String::new();
    let mut x: u64 = 7;
    for _ in 0..300 {
        let mut line = Vec::new();
        for _ in 0..8 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let r = (x >> 33) as usize;
            line.push(if r % 3 == 0 { phrases[r % phrases.len()] } else { fillers[r % fillers.len()] });
        }
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(dir.path().join("corpus.txt"), text).unwrap();
    ok(dir.path(), &["extract-lexicon", "--corpus", "corpus.txt", "--k2", "5", "--k3", "2", "--out", "lex.tsv"]);
    ok(dir.path(), &["build-vocab", "--corpus", "corpus.txt", "--max-query", "4", "--out", "vocab.txt"]);
    fs::write(
        dir.path().join("train.toml"),
        "steps = 20\nbatch_size = 4\nwarmup_steps = 2\ncheckpoint_every = 10\n[model]\nhidden = 12\nheads = 2\nff = 24\nmax_positions = 32\n",
    )
    .unwrap();
    dir
}

fn make_masks(dir: &Path, objective: &str, seed: &str, out: &str) {
    ok(
        dir,
        &[
            "make-masks", "--corpus", "corpus.txt", "--lexicon", "lex.tsv", "--vocab", "vocab.txt",
            "--objective", objective, "--seed", seed, "--max-len", "32", "--out", out,
        ],
    );
}

fn train(dir: &Path, plans: &str, out: &str, log: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--plans", plans, "--config", "train.toml", "--deterministic", "--out", out, "--log", log,
    ];
    args.extend_from_slice(extra);
    gramlm(dir, &args)
}

#[test]
fn help_lists_every_command() {
    let out = gramlm(Path::new("."), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for c in ["extract-lexicon", "build-vocab", "segment", "make-masks", "train", "eval-ppl", "export", "inspect-attention"] {
        assert!(text.contains(c), "{c} missing from help");
    }
    assert_eq!(gramlm(Path::new("."), &["make-masks", "--bogus"]).status.code(), Some(2));
}

#[test]
fn lexicon_is_reproducible_and_empty_corpus_is_fine() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["extract-lexicon", "--corpus", "corpus.txt", "--k2", "5", "--k3", "2", "--out", "again.tsv"]);
    assert_eq!(fs::read(d.join("lex.tsv")).unwrap(), fs::read(d.join("again.tsv")).unwrap());
    let lex = fs::read_to_string(d.join("lex.tsv")).unwrap();
    assert!(lex.starts_with("# gramlm "));
    assert!(lex.contains("new york\t2\t"));

    fs::write(d.join("empty.txt"), "").unwrap();
    ok(d, &["extract-lexicon", "--corpus", "empty.txt", "--out", "empty.tsv"]);
    let text = fs::read_to_string(d.join("empty.tsv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("# "));
}

#[test]
fn segment_marks_phrases() {
    let dir = workspace();
    ok(dir.path(), &["segment", "--corpus", "corpus.txt", "--lexicon", "lex.tsv", "--out", "seg.txt"]);
    let text = fs::read_to_string(dir.path().join("seg.txt")).unwrap();
    assert!(text.lines().next().unwrap().starts_with("# gramlm"));
    assert!(text.contains("| new york |") || text.contains("new york |") || text.contains("| new york"));
}

#[test]
fn plans_are_deterministic_per_seed() {
    let dir = workspace();
    let d = dir.path();
    make_masks(d, "comprehensive", "5", "a.bin");
    make_masks(d, "comprehensive", "5", "b.bin");
    make_masks(d, "comprehensive", "6", "c.bin");
    let a = fs::read(d.join("a.bin")).unwrap();
    assert_eq!(a, fs::read(d.join("b.bin")).unwrap());
    let c = fs::read(d.join("c.bin")).unwrap();
    assert_ne!(a, c);
    let (_, pa) = gramlm::maskplan::parse_plan_file(&a).unwrap();
    let (_, pc) = gramlm::maskplan::parse_plan_file(&c).unwrap();
    assert_eq!(pa.len(), pc.len());
}

#[test]
fn explicit_dump_of_the_six_token_example() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("toy.txt"), "x1 x2 x3 x4 x5 x6\n").unwrap();
    fs::write(d.join("lex.tsv"), "# toy\nx2 x3\t2\t1.0\t1\n").unwrap();
    let fine = FineVocab::new(words("x1 x2 x3 x4 x5 x6"), 4).unwrap();
    fs::write(d.join("vocab.txt"), fine.to_file_string()).unwrap();
    // Boundaries {1,2,4,5,6,7}: five segments, rate 0.4 masks two of them.
    let lex = NGramLexicon::from_ngrams([words("x2 x3")]);
    let seg = Segmented::new(words("x1 x2 x3 x4 x5 x6"), &fine, &lex);
    let seed = (0..1000u64)
        .find(|&s| sample_mask(&seg.boundaries, 0.4, &mut RngState::for_shard(s, 0)).unwrap() == vec![2, 4])
        .expect("some seed masks segments 2 and 4");
    let seed = seed.to_string();
    ok(
        d,
        &[
            "make-masks", "--corpus", "toy.txt", "--lexicon", "lex.tsv", "--vocab", "vocab.txt", "--objective",
            "explicit", "--rate", "0.4", "--seed", &seed, "--out", "p.bin", "--dump-json", "p.json",
        ],
    );
    let dump: Value = serde_json::from_str(&fs::read_to_string(d.join("p.json")).unwrap()).unwrap();
    let plan = &dump["plans"][0];
    let ctx: Vec<&str> = plan["context_tokens"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(ctx, ["x1", "[MASK]", "x4", "[MASK]", "x6"]);
    let targets = plan["coarse_targets"].as_array().unwrap();
    assert_eq!(targets.len(), 2);
    assert_eq!(targets[0]["row"], 1);
    assert_eq!(targets[1]["row"], 3);
    let y2 = targets[0]["id"].as_u64().unwrap() as u32;
    assert_eq!(y2 as usize, fine.len(), "x2 x3 is the first n-gram identity");
    assert_eq!(targets[1]["id"].as_u64().unwrap() as u32, fine.id("x5").unwrap());
    assert_eq!(dump["header"]["max_query"], 4);
}

#[test]
fn objective_needs_a_lexicon() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("none.tsv"), "# nothing\n").unwrap();
    let out = gramlm(
        d,
        &[
            "make-masks", "--corpus", "corpus.txt", "--lexicon", "none.tsv", "--vocab", "vocab.txt", "--objective",
            "explicit", "--out", "p.bin",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = workspace();
    let d = dir.path();
    make_masks(d, "relation", "1", "plans.bin");
    fs::create_dir(d.join("ck")).unwrap();
    assert!(train(d, "plans.bin", "a.ckpt", "a.jsonl", &["--checkpoint-dir", "ck"]).status.success());
    assert!(train(d, "plans.bin", "b.ckpt", "b.jsonl", &[]).status.success());
    let log_a = fs::read_to_string(d.join("a.jsonl")).unwrap();
    assert_eq!(log_a, fs::read_to_string(d.join("b.jsonl")).unwrap());
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(log_a.lines().count(), 21);
    let first: Value = serde_json::from_str(log_a.lines().nth(1).unwrap()).unwrap();
    for k in ["step", "losses", "lr", "wall_ms"] {
        assert!(first.get(k).is_some(), "{k} missing");
    }
    assert!(first["losses"]["rtd"].is_f64() && first["losses"]["generator"].is_f64());

    let out = train(d, "plans.bin", "c.ckpt", "c.jsonl", &["--resume", "ck/step-10.ckpt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tail_a: Vec<&str> = log_a.lines().skip(11).collect();
    let log_c = fs::read_to_string(d.join("c.jsonl")).unwrap();
    let tail_c: Vec<&str> = log_c.lines().skip(1).collect();
    assert_eq!(tail_a, tail_c);
    let a = gramlm::model::checkpoint::Checkpoint::<f32>::load(&d.join("a.ckpt")).unwrap();
    let c = gramlm::model::checkpoint::Checkpoint::<f32>::load(&d.join("c.ckpt")).unwrap();
    assert_eq!(a.tensors, c.tensors);
}

#[test]
fn untrained_explicit_model_is_near_uniform() {
    let dir = workspace();
    let d = dir.path();
    make_masks(d, "explicit", "2", "plans.bin");
    let out = train(d, "plans.bin", "m.ckpt", "m.jsonl", &["--lr", "0", "--steps", "1", "--warmup-steps", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = gramlm(d, &["eval-ppl", "--checkpoint", "m.ckpt", "--plans", "plans.bin"]);
    assert!(out.status.success());
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let plans = fs::read(d.join("plans.bin")).unwrap();
    let (header, _) = gramlm::maskplan::parse_plan_file(&plans).unwrap();
    let h: Value = serde_json::from_str(&header).unwrap();
    let joint = (h["fine_vocab"].as_u64().unwrap() + h["ngram_vocab"].as_u64().unwrap()) as f64;
    let ppl = r["ppl"].as_f64().unwrap();
    assert!((ppl / joint - 1.0).abs() < 0.05, "ppl {ppl} vs |joint| {joint}");
}

fn attention_rows(path: &PathBuf) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn export_and_inspect() {
    let dir = workspace();
    let d = dir.path();
    make_masks(d, "comprehensive", "3", "plans.bin");
    assert!(train(d, "plans.bin", "m.ckpt", "m.jsonl", &[]).status.success());
    ok(d, &["export", "--checkpoint", "m.ckpt", "--out", "e.ckpt"]);
    let text = "the ice cream in new york is good";
    ok(d, &["inspect-attention", "--checkpoint", "m.ckpt", "--vocab", "vocab.txt", "--text", text, "--out", "full.csv"]);
    ok(d, &["inspect-attention", "--checkpoint", "e.ckpt", "--vocab", "vocab.txt", "--text", text, "--out", "cut.csv"]);
    let full = attention_rows(&d.join("full.csv"));
    assert_eq!(full, attention_rows(&d.join("cut.csv")));
    assert_eq!(full.len(), 8);
    for row in &full {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    // Exported checkpoints carry no heads, so they cannot be evaluated.
    assert_eq!(gramlm(d, &["eval-ppl", "--checkpoint", "e.ckpt", "--plans", "plans.bin"]).status.code(), Some(3));
    assert_eq!(gramlm(d, &["inspect-attention", "--checkpoint", "m.ckpt", "--vocab", "vocab.txt", "--out", "x.csv"]).status.code(), Some(2));
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let dir = workspace();
    let d = dir.path();
    make_masks(d, "explicit", "2", "plans.bin");
    assert!(train(d, "plans.bin", "m.ckpt", "m.jsonl", &["--steps", "2", "--warmup-steps", "0"]).status.success());
    let mut bytes = fs::read(d.join("m.ckpt")).unwrap();
    bytes[8] = 9;
    fs::write(d.join("old.ckpt"), bytes).unwrap();
    let out = gramlm(d, &["eval-ppl", "--checkpoint", "old.ckpt", "--plans", "plans.bin"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 9"));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = workspace();
    let d = dir.path();
    make_masks(d, "explicit", "2", "plans.bin");
    let out = train(d, "plans.bin", "m.ckpt", "m.jsonl", &["--lr", "1e30", "--warmup-steps", "0"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("m.diagnostic.ckpt").exists());
}
