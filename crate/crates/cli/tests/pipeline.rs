use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn persona(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persona"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("persona runs")
}

fn persona_stdin(dir: &Path, args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_persona"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("persona runs");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONF: &str = "preset = small\nlr = 0.003\nmax_epochs = 2\nseed = 5\nrank = 4\n";
const CORPUS: [&str; 3] = ["--corpus", "data/corpus.jsonl", "--vocab"];

/// synth -> pretrain -> adapt -> finetune lora for 3 users -> evaluate.
fn pipeline(dir: &Path) {
    std::fs::write(dir.join("run.conf"), CONF).unwrap();
    ok(persona(dir, &["synth-corpus", "--users", "6", "--turns", "20", "--seed", "5", "--out", "data"]));
    let mut common: Vec<&str> = CORPUS.to_vec();
    common.extend(["data/vocab.txt", "--config", "run.conf"]);
    let with = |extra: &[&'static str]| -> Vec<&str> { extra.iter().copied().chain(common.iter().copied()).collect() };
    ok(persona(dir, &with(&["pretrain", "--out", "base.bin"])));
    ok(persona(dir, &with(&["adapt", "--base", "base.bin", "--out", "adapted.bin"])));
    ok(persona(dir, &with(&["finetune", "--base", "adapted.bin", "--registry", "reg", "--workers", "2"])));
    ok(persona(dir, &with(&["evaluate", "--base", "adapted.bin", "--registry", "reg", "--out", "lora.json"])));
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn smoke_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    let names: Vec<&String> = fa.iter().map(|f| &f.0).collect();
    for expected in [
        "base.bin.manifest",
        "adapted.bin.users",
        "reg/finetune-lora.manifest",
        "lora.json.records.jsonl",
        "data/manifest.txt",
    ] {
        assert!(names.iter().any(|n| n.as_str() == expected), "missing {expected} in {names:?}");
    }
    assert_eq!(fa.len(), fb.len());
    for ((na, ca), (nb, cb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ca == cb, "{na} differs between runs");
    }
    // Three reserved users, one adapter each.
    let adapters = names.iter().filter(|n| n.ends_with("-lora.bin")).count();
    assert_eq!(adapters, 3);
}

#[test]
fn corpus_has_one_file_per_user() {
    let dir = tempfile::tempdir().unwrap();
    ok(persona(dir.path(), &["synth-corpus", "--users", "20", "--turns", "30", "--out", "c"]));
    assert_eq!(std::fs::read_dir(dir.path().join("c/users")).unwrap().count(), 20);
    let splits = std::fs::read_to_string(dir.path().join("c/splits.txt")).unwrap();
    assert!(splits.starts_with("count.dev=60\ncount.test=120\ncount.train=420\n"), "{splits}");
    let out = persona(dir.path(), &["synth-corpus", "--users", "1", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.conf"), CONF).unwrap();
    ok(persona(d, &["synth-corpus", "--users", "4", "--turns", "10", "--out", "data"]));
    let base = ["--corpus", "data/corpus.jsonl", "--vocab", "data/vocab.txt", "--config", "run.conf"];

    // Missing upstream artifact: exit 3 naming the stage to run.
    let mut args = vec!["adapt", "--base", "nope.bin", "--out", "a.bin"];
    args.extend(base);
    let out = persona(d, &args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("persona pretrain"));

    // Fine-tuning a checkpoint that skipped adaptation: exit 3.
    let mut args = vec!["pretrain", "--out", "base.bin"];
    args.extend(base);
    ok(persona(d, &args));
    let mut args = vec!["finetune", "--base", "base.bin", "--registry", "reg"];
    args.extend(base);
    let out = persona(d, &args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("persona adapt"));

    // Bad values and unknown config keys: exit 2.
    let mut args = vec!["pretrain", "--out", "b.bin", "--variant", "fancy"];
    args.extend(base);
    assert_eq!(persona(d, &args).status.code(), Some(2));
    std::fs::write(d.join("bad.conf"), "include = run.conf\nlearning_rate = 1\n").unwrap();
    let out = persona(d, &["pretrain", "--config", "bad.conf", "--out", "b.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning-rate"));

    // A flipped byte in a checkpoint: exit 4.
    let mut bytes = std::fs::read(d.join("base.bin")).unwrap();
    bytes[200] ^= 0x01;
    std::fs::write(d.join("base.bin"), bytes).unwrap();
    let mut args = vec!["adapt", "--base", "base.bin", "--out", "a.bin"];
    args.extend(base);
    assert_eq!(persona(d, &args).status.code(), Some(4));
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.conf"), CONF).unwrap();
    ok(persona(d, &["synth-corpus", "--users", "4", "--turns", "10", "--out", "data"]));
    let args = [
        "pretrain", "--config", "run.conf", "--corpus", "data/corpus.jsonl", "--vocab", "data/vocab.txt",
        "--out", "base.bin", "--lr", "0.01", "--max-steps", "3",
    ];
    ok(persona(d, &args));
    let manifest = std::fs::read_to_string(d.join("base.bin.manifest")).unwrap();
    assert!(manifest.contains("\ntrain.lr=0.01\n"), "{manifest}");
    assert!(manifest.contains("\ntrain.max_epochs=2\n"), "{manifest}");
    assert!(manifest.contains("\nfit.steps=3\n"), "{manifest}");
    assert!(manifest.contains("\nmodel.d_model=32\n"), "{manifest}");
}

#[test]
fn chat_transcript_replays_through_serve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let user = std::fs::read_to_string(d.join("adapted.bin.users")).unwrap().lines().next().unwrap().to_string();
    let chat = [
        "chat", "--base", "adapted.bin", "--vocab", "data/vocab.txt", "--registry", "reg", "--user", &user,
        "--profile", "gender=female,age=20-years", "--transcript", "t.jsonl",
    ];
    let replies = ok(persona_stdin(d, &chat, "hello there\nwhat is your hobby?\nreally?\n"));
    assert_eq!(replies.lines().count(), 3);

    let transcript = std::fs::read_to_string(d.join("t.jsonl")).unwrap();
    let requests: String = transcript
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("response");
            format!("{v}\n")
        })
        .collect();
    let served = ok(persona_stdin(d, &["serve", "--base", "adapted.bin", "--vocab", "data/vocab.txt", "--registry", "reg"], &requests));
    let served: Vec<String> = served
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["text"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(served, replies.lines().collect::<Vec<_>>());
    assert!(d.join("t.jsonl.manifest").exists());
}

#[test]
fn diversity_probe_reports_each_question() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    std::fs::write(d.join("q.txt"), "do you cook?\nwhat is your dream?\n\nare you a morning person?\ndo you like cats?\nwho is your hero?\n").unwrap();
    let args = [
        "diversity-probe", "--base", "adapted.bin", "--vocab", "data/vocab.txt", "--registry", "reg",
        "--corpus", "data/corpus.jsonl", "--questions", "q.txt", "--out", "probe.jsonl",
    ];
    ok(persona(d, &args));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(d.join("probe.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    for l in &lines {
        assert_eq!(l["answers"].as_array().unwrap().len(), 3);
        for k in ["distinct_1", "distinct_2", "dist_s"] {
            let v = l[k].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn infer_profile_writes_the_vote() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let posts: String = (0..300)
        .map(|i| {
            let text = if i % 3 == 0 { "lunch in tokyo" } else { "long day" };
            format!("2023-01-{:02}T{:02}:00:00Z {text}\n", 1 + i / 24, i % 24)
        })
        .collect();
    std::fs::write(d.join("posts.tsv"), posts).unwrap();
    let out = ok(persona(d, &["infer-profile", "--posts", "posts.tsv", "--user", "ab12", "--out", "p.json"]));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["chunks"], 2);
    assert_eq!(v["partial_last"], false);
    assert_eq!(v["profile"]["location"], "kanto");
    assert!(d.join("p.json.manifest").exists());
}
