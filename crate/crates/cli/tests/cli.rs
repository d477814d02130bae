use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn wr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wr"))
        .args(args)
        .env_remove("WR_SEED")
        .output()
        .expect("spawn wr")
}

fn ok(args: &[&str]) -> Output {
    let out = wr(args);
    assert!(
        out.status.success(),
        "wr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_corpus(dir: &Path) -> String {
    let c = dir.join("corpus");
    ok(&[
        "--seed", "3", "synth", "--out", c.to_str().unwrap(),
        "--writers", "4", "--train-writers", "3", "--pages", "3", "--lines", "4", "--words", "3",
    ]);
    c.join("manifest.tsv").to_str().unwrap().to_string()
}

const SMALL: [&str; 6] = [
    "--set", "sampling.line_budget=300",
    "--set", "codebook.n_clusters=8",
    "--set", "sampling.word_budget=100",
];

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--seed", "7", "--writers", "20", "--out", d.to_str().unwrap()]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 100);
    assert_eq!(ta, tb);
}

#[test]
fn line_merge_report_has_normalized_map() {
    let t = tempfile::tempdir().unwrap();
    let m = small_corpus(t.path());
    let out = t.path().join("report");
    let mut args: Vec<&str> = SMALL.to_vec();
    args.extend(["experiment", "line-merge", "--n", "4", "--manifest", &m, "--out", out.to_str().unwrap()]);
    ok(&args);
    let csv = fs::read_to_string(out.join("line-merge.csv")).unwrap();
    assert!(csv.starts_with("metric,granularity,config-hash,value\n"));
    let row = csv.lines().find(|l| l.starts_with("mAP_normalized,")).expect("normalized row");
    let v: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!(v > 0.0 && v <= 1.5, "{row}");
    let hash = row.split(',').nth(2).unwrap();
    assert_eq!(hash.len(), 16);
    for f in ["line-merge.plot.csv", "line-merge.summary.txt", "line-merge.config.txt"] {
        assert!(fs::read_to_string(out.join(f)).unwrap().contains(hash), "{f} lacks the hash");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = wr(&["--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_config_and_missing_data_exit_codes() {
    let out = wr(&["experiment", "line-merge", "--manifest", "x.tsv"]);
    assert_eq!(out.status.code(), Some(2), "merge without --n");
    let out = wr(&["--set", "codebook.n_clusters=0", "experiment", "page", "--manifest", "x.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    let out = wr(&["experiment", "page", "--manifest", "/nonexistent/manifest.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/manifest.tsv"));
}

#[test]
fn seed_env_fallback_and_flag_precedence() {
    let t = tempfile::tempdir().unwrap();
    let run = |dir: &str, env: Option<&str>, flag: Option<&str>| {
        let out = t.path().join(dir);
        let mut c = Command::new(env!("CARGO_BIN_EXE_wr"));
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        c.args(["synth", "--writers", "2", "--train-writers", "1", "--pages", "2", "--lines", "2", "--words", "2"]);
        c.arg("--out").arg(&out);
        c.env_remove("WR_SEED");
        if let Some(e) = env {
            c.env("WR_SEED", e);
        }
        assert!(c.output().unwrap().status.success());
        fs::read_to_string(out.join("synth.meta")).unwrap()
    };
    assert!(run("a", Some("11"), None).starts_with("seed 11\n"));
    assert!(run("b", Some("11"), Some("5")).starts_with("seed 5\n"));
    assert!(run("c", None, None).starts_with("seed 0\n"));
}

#[test]
fn staged_pipeline_matches_and_threads_do_not_matter() {
    let t = tempfile::tempdir().unwrap();
    let m = small_corpus(t.path());
    let p = |name: &str| t.path().join(name).to_str().unwrap().to_string();
    let stage = |extra: &[&str]| {
        let mut args: Vec<&str> = SMALL.to_vec();
        args.extend(extra);
        ok(&args)
    };
    stage(&["describe", "--manifest", &m, "--out", &p("d.wrdesc")]);
    stage(&["codebook", "--manifest", &m, "--descriptors", &p("d.wrdesc"), "--out", &p("cb")]);
    stage(&["whiten", "--manifest", &m, "--descriptors", &p("d.wrdesc"), "--codebook", &p("cb"), "--out", &p("wh")]);
    stage(&[
        "encode", "--manifest", &m, "--descriptors", &p("d.wrdesc"), "--codebook", &p("cb"),
        "--whitening", &p("wh"), "--level", "line", "--out", &p("g.wrdesc"),
    ]);
    stage(&["evaluate", "--globals", &p("g.wrdesc"), "--out", &p("ev")]);
    stage(&["rank", "--globals", &p("g.wrdesc"), "--out", &p("ranked.txt")]);

    let cb = fs::read(p("cb")).unwrap();
    assert!(cb.starts_with(b"WRCODEBOOK "));
    assert!(String::from_utf8_lossy(&cb[..200]).contains("config-hash="));
    assert!(fs::read_to_string(p("g.wrdesc.meta")).unwrap().starts_with("config-hash "));
    let ev = fs::read_to_string(t.path().join("ev/evaluation.csv")).unwrap();
    let map: f64 = ev.lines().find(|l| l.starts_with("mAP,line,")).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(map > 0.3, "{ev}");
    // 48 test lines, each ranked against the other 47
    let ranked = fs::read_to_string(p("ranked.txt")).unwrap();
    assert_eq!(ranked.lines().filter(|l| !l.starts_with('#')).count(), 48 * 47);

    // the same line experiment from saved artifacts, under two thread counts
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out = p(&format!("ex{threads}"));
        stage(&[
            "--threads", threads, "experiment", "line", "--manifest", &m, "--descriptors", &p("d.wrdesc"),
            "--codebook", &p("cb"), "--whitening", &p("wh"), "--out", &out,
        ]);
        reports.push(fs::read(Path::new(&out).join("line.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let csv = String::from_utf8(reports[0].clone()).unwrap();
    let ex_map: f64 = csv.lines().find(|l| l.starts_with("mAP,")).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(ex_map, map);
}

#[test]
fn sample_writes_keypoints_and_patches() {
    let t = tempfile::tempdir().unwrap();
    let m = small_corpus(t.path());
    let out = t.path().join("s");
    let mut args: Vec<&str> = SMALL.to_vec();
    args.extend(["sample", "--manifest", &m, "--out", out.to_str().unwrap(), "--patches"]);
    ok(&args);
    let kp = fs::read_to_string(out.join("keypoints.txt")).unwrap();
    assert!(kp.starts_with("# config-hash "));
    assert!(kp.lines().count() > 100);
    let patches = fs::read(out.join("patches.wrpatch")).unwrap();
    assert!(patches.starts_with(b"WRPATCH\0"));
}

#[test]
fn binarize_output_reloads_identically() {
    let t = tempfile::tempdir().unwrap();
    let m = small_corpus(t.path());
    let b1 = t.path().join("b1");
    let b2 = t.path().join("b2");
    ok(&["binarize", "--manifest", &m, "--out", b1.to_str().unwrap()]);
    let m1 = b1.join("manifest.tsv");
    ok(&["binarize", "--manifest", m1.to_str().unwrap(), "--out", b2.to_str().unwrap()]);
    let (t1, t2) = (tree(&b1), tree(&b2));
    assert_eq!(t1.len(), t2.len());
    for (k, v) in &t1 {
        if k.extension().is_some_and(|e| e == "png") {
            assert_eq!(Some(v), t2.get(k), "{k:?} changed on re-binarization");
        }
    }
}
