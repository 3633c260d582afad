use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY_PLAN: &str = "\
seed=3
resolution=128
sets.flat=4
sets.c_tr=3
sets.c_ts=1
sets.s_tr=3
sets.s_ts=2
sets.f=2
forgery.sizes=64,48,32
jpeg.qualities=100,50
cmi.block=64
cmi.target_per_image=4
cmi.other_per_image=2
cmi.epochs=1
fusion.blocks_per_image=4
fusion.epochs=5
eval.blocks_per_image=4
localize.window=64
localize.stride=32
model.a=RGGB,bilinear,1,0
model.b=GRBG,smooth-hue,2,0.6
device.a-1=a
device.a-2=a
device.b-1=b
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prnufuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("stdout is JSON lines"))
        .collect()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("stderr error is JSON")
}

fn write_plan(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.txt");
    fs::write(&p, TINY_PLAN).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str) -> PathBuf {
    let plan = write_plan(dir);
    let out = dir.join(name);
    let o = run(&["simulate", "--plan", s(&plan), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_subcommands() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "simulate",
        "fingerprint",
        "train-cmi",
        "train-fusion",
        "calibrate",
        "detect",
        "bench",
    ] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["simulate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "a");
    let b = simulate(dir.path(), "b");
    let ta = tree(&a);
    assert!(ta.iter().any(|(p, _)| p.ends_with("manifest.csv")));
    assert_eq!(ta, tree(&b));
}

#[test]
fn duplicate_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dup.txt");
    fs::write(&p, format!("{TINY_PLAN}device.a-1=a\n")).unwrap();
    let o = run(&[
        "simulate",
        "--plan",
        s(&p),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "plan");
    assert!(err["message"].as_str().unwrap().contains("a-1"));
}

#[test]
fn missing_artifacts_are_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = simulate(dir.path(), "corpus");
    let store = dir.path().join("store");
    let o = run(&["train-fusion", "--corpus", s(&corpus), "--store", s(&store)]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "dependency");
    assert!(err["message"].as_str().unwrap().contains("fingerprints/"));

    let o = run(&[
        "bench",
        "--corpus",
        s(&corpus),
        "--store",
        s(&store),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_corpus_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "fingerprint",
        "--corpus",
        s(&dir.path().join("nothing")),
        "--store",
        s(&dir.path().join("store")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = simulate(dir.path(), "corpus");
    let store = dir.path().join("store");
    let io = ["--corpus", s(&corpus), "--store", s(&store)];
    let step = |name: &str| {
        let mut args = vec![name, "--jobs", "1"];
        args.extend_from_slice(&io);
        let o = run(&args);
        assert!(
            o.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        json_lines(&o)
    };

    let fps = step("fingerprint");
    assert_eq!(fps.len(), 3);
    assert!(fps.iter().all(|v| v["event"] == "fingerprint"));
    let cmi = step("train-cmi");
    assert_eq!(cmi.len(), 2);
    let fus = step("train-fusion");
    assert!(fus
        .iter()
        .all(|v| v["final_loss"].as_f64().unwrap().is_finite()));
    let cal = step("calibrate");
    for c in &cal {
        let tau = c["tau"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&tau));
    }
    assert!(store.join("fingerprints").join("a-1.fp").exists());

    // Splice a region of a model-b image into a model-a image.
    let host = corpus.join("a-1").join("s_ts").join("0000.ppm");
    assert!(host.exists());
    let truth = dir.path().join("truth.pgm");
    let forged = dir.path().join("forged.ppm");
    splice(
        &host,
        &corpus.join("b-1").join("s_ts").join("0000.ppm"),
        &forged,
        &truth,
    );

    let map = dir.path().join("map.pgm");
    let mask = dir.path().join("mask.pgm");
    let o = run(&[
        "detect",
        "--store",
        s(&store),
        "--plan",
        s(&corpus.join("plan.txt")),
        "--image",
        s(&forged),
        "--model",
        "a",
        "--truth",
        s(&truth),
        "--map",
        s(&map),
        "--mask",
        s(&mask),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = &json_lines(&o)[0];
    let total: u64 = ["tp", "fp", "fn", "tn"]
        .iter()
        .map(|k| rec[k].as_u64().unwrap())
        .sum();
    assert_eq!(total, 128 * 128);
    assert!(map.exists() && mask.exists());
    assert!(dir.path().join("map.pgm.txt").exists());

    let report = dir.path().join("report");
    let mut args = vec!["bench", "--out", s(&report)];
    args.extend_from_slice(&io);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(report.join("results.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("method"));
    assert!(csv.contains("Fusion"));
    assert!(report.join("summary.txt").exists());
}

/// Copies the top-left 64x64 square of `donor` into `host` and writes the
/// forged image with its mask, using the plain netpbm formats.
fn splice(host: &Path, donor: &Path, out: &Path, mask: &Path) {
    let (w, h, mut px) = read_ppm(host);
    let (_, _, dp) = read_ppm(donor);
    let mut m = vec![0u8; w * h];
    for r in 0..64 {
        for c in 0..64 {
            let i = r * w + c;
            px[3 * i..3 * i + 3].copy_from_slice(&dp[3 * i..3 * i + 3]);
            m[i] = 255;
        }
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&px);
    fs::write(out, bytes).unwrap();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&m);
    fs::write(mask, bytes).unwrap();
    assert_eq!(h, 128);
}

fn read_ppm(p: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(p).unwrap();
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P6");
    assert_eq!(fields[3], "255");
    let w: usize = fields[1].parse().unwrap();
    let h: usize = fields[2].parse().unwrap();
    (w, h, bytes[i + 1..].to_vec())
}
