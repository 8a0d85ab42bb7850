use std::path::Path;
use std::process::{Command, Output};

fn bsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsa")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, split: &str, templates: &str) -> String {
    let p = dir.join(name).to_string_lossy().into_owned();
    let o = bsa(&["--out", &p, "gen", "--templates", templates, "--samples", "4", "--points", "128", "--split", split]);
    assert!(o.status.success(), "{}", stderr(&o));
    p
}

#[test]
fn gen_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.bsa", "train", "3");
    let b = gen(dir.path(), "b.bsa", "train", "3");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = gen(dir.path(), "c.bsa", "test", "3");
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn banner_echoes_config_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.bsa").to_string_lossy().into_owned();
    let o = bsa(&["--seed", "7", "--out", &p, "gen", "--templates", "2", "--samples", "2", "--points", "64"]);
    let err = stderr(&o);
    let line = err.lines().next().unwrap();
    assert!(line.starts_with("bsa gen [config "), "{line}");
    assert!(line.contains("\"seed\":7") && line.contains("\"templates\":2"), "{line}");
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!bsa(&["gen", "--templates", "0", "--out", "x.bsa"]).status.success());
    assert!(!bsa(&["gen"]).status.success());
    assert!(!bsa(&["eval", "--report", "/nonexistent/report.json"]).status.success());
    assert!(!bsa(&["frobnicate"]).status.success());
}

#[test]
fn pretrain_cil_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pre = gen(d, "pre.bsa", "pretrain", "3");
    let tr = gen(d, "tr.bsa", "train", "4");
    let te = gen(d, "te.bsa", "test", "4");
    let ck = d.join("enc.ckpt").to_string_lossy().into_owned();
    let enc = ["--layers", "1", "--dim", "8", "--heads", "2", "--ff-dim", "8", "--bottleneck", "2", "--groups", "8", "--group-size", "8"];
    let mut args = vec!["--out", &ck, "pretrain", "--data", &pre, "--epochs", "1", "--codebook", "4", "--batch", "4"];
    args.extend(enc);
    let o = bsa(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(&ck).exists());

    // resuming under a different encoder config is refused
    let mut bad = vec!["--out", &ck, "pretrain", "--data", &pre, "--epochs", "1", "--codebook", "4", "--resume", &ck];
    bad.extend(["--layers", "1", "--dim", "8", "--heads", "2", "--ff-dim", "8", "--bottleneck", "3", "--groups", "8", "--group-size", "8"]);
    let o = bsa(&bad);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config hash"), "{}", stderr(&o));

    let rep = d.join("run.json").to_string_lossy().into_owned();
    let o = bsa(&[
        "cil", "--data", &tr, "--test", &te, "--pretrained", &ck, "--increment", "2", "--exemplars", "2", "--epochs", "1",
        "--batch", "8", "--baseline", "--report", &rep,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("\"seed\":1993"));
    let csv = std::fs::read_to_string(d.join("run.csv")).unwrap();
    assert!(csv.starts_with("task,classes,accuracy,seconds\n"));
    assert!(d.join("run.baseline.json").exists());

    let o = bsa(&["eval", "--report", &rep]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("A_B="));

    let svg = d.join("plot.svg").to_string_lossy().into_owned();
    let base = d.join("run.baseline.json").to_string_lossy().into_owned();
    let o = bsa(&["plot", "--report", &rep, &base, "--svg", &svg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));

    // an increment larger than the class count is an error
    let o = bsa(&["cil", "--data", &tr, "--test", &te, "--pretrained", &ck, "--increment", "9", "--report", &rep]);
    assert!(!o.status.success());
}
