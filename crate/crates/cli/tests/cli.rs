use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn wwh(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_wwh")).current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "wwh {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    wwh(d, &["gen-corpus", "--kind", "mspd", "--n", "6", "--seed", "1", "--out", "mspd.jsonl"]);
    wwh(d, &["gen-corpus", "--kind", "daily", "--n", "6", "--seed", "2", "--out", "daily.jsonl"]);
    wwh(d, &["gen-corpus", "--kind", "mspd", "--n", "2", "--seed", "3", "--out", "heldout.jsonl"]);
    assert!(stdout(&wwh(d, &["corpus", "validate", "mspd.jsonl"])).contains("6 episodes, ok"));
    let stats = stdout(&wwh(d, &["corpus", "stats", "mspd.jsonl", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(v["episodes"], 6);

    fs::write(
        d.join("blend.toml"),
        "[[dataset]]\nid = \"pr\"\npath = \"mspd.jsonl\"\nweight = 0.7\nselect = \"pr\"\n\n\
         [[dataset]]\nid = \"npr\"\npath = \"mspd.jsonl\"\nweight = 0.8\nselect = \"npr\"\n\n\
         [[dataset]]\nid = \"casual\"\npath = \"daily.jsonl\"\nweight = 0.85\n",
    )
    .unwrap();
    wwh(d, &["blend", "--spec", "blend.toml", "--seed", "4", "--out", "manifest.jsonl"]);
    wwh(d, &["augment", "--manifest", "manifest.jsonl", "--k", "3", "--seed", "4", "--out", "train.jsonl"]);
    fs::write(
        d.join("train.toml"),
        "[model]\nn_layers = 1\nd_model = 16\nn_heads = 2\n\n[train]\nmax_steps = 3\nbatch_size = 2\n",
    )
    .unwrap();
    let t = stdout(&wwh(d, &["train", "--data", "train.jsonl", "--config", "train.toml", "--out", "m.ckpt", "--log-every", "1"]));
    assert!(t.contains("step      3/3"), "{t}");

    wwh(
        d,
        &["eval", "--ckpt", "m.ckpt", "--data", "heldout.jsonl", "--report", "r.jsonl", "--k", "3", "--limit", "6", "--max-new-tokens", "4"],
    );
    let r: serde_json::Value = serde_json::from_str(fs::read_to_string(d.join("r.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(r["n_instances"], 6);

    let mut chat = Command::new(env!("CARGO_BIN_EXE_wwh"))
        .current_dir(d)
        .args(["chat", "--ckpt", "m.ckpt", "--max-new-tokens", "4"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    chat.stdin
        .take()
        .unwrap()
        .write_all(b"/persona add i love jazz music\n/persona list\n/force crtl\nhello there\n/force prtl\nany jazz ?\n/quit\n")
        .unwrap();
    let out = chat.wait_with_output().unwrap();
    assert!(out.status.success());
    let s = stdout(&out);
    assert!(s.contains("added p000") && s.contains("p000  i love jazz music"), "{s}");
    assert!(s.contains("[CRTL]") && s.contains("[PRTL]"), "{s}");
}

#[test]
fn validate_reports_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    wwh(d, &["gen-corpus", "--kind", "mspd", "--n", "2", "--out", "c.jsonl"]);
    let src = fs::read_to_string(d.join("c.jsonl")).unwrap();
    // an agent turn first breaks speaker alternation
    let broken = src.replacen("\"speaker\":\"USER\"", "\"speaker\":\"AGENT\"", 1);
    assert!(broken != src, "no user turn to break");
    fs::write(d.join("bad.jsonl"), broken).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wwh")).current_dir(d).args(["corpus", "validate", "bad.jsonl"]).output().unwrap();
    assert!(!out.status.success());
    assert!(!out.stdout.is_empty());
}
