use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mt3d::evalbench::parse_bench_csv;
use mt3d::formats::{encode_frame, file_sha256, read_frame, read_tracklet, write_tracklet, ResultsFile, RunManifest, TrackletMeta, RESULTS_SCHEMA};
use mt3d::synthgen::{generate, preset};
use mt3d::weights::WeightsFile;

fn mt3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mt3d")).args(args).output().expect("spawn mt3d")
}

fn mt3d_env(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mt3d"))
        .args(args)
        .env("MT3D_THREADS", threads)
        .output()
        .expect("spawn mt3d")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = mt3d(&["synth", "--preset", name, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn small_weights(dir: &Path) -> PathBuf {
    let w = dir.join("w.bin");
    let o = mt3d(&["weights", "init", "--small", "--seed", "3", "--out", s(&w)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    w
}

fn dir_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), file_sha256(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_preset_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "car-straight");
    let bins = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "bin")).count();
    assert_eq!(bins, 40);
    assert!(a.join("labels.jsonl").is_file());
    let m: RunManifest = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, Some(11));

    let b = tmp.path().join("again");
    assert!(mt3d(&["synth", "--preset", "car-straight", "--out", s(&b)]).status.success());
    assert_eq!(dir_hashes(&a), dir_hashes(&b));

    let t = generate(&preset("car-straight").unwrap()).unwrap();
    assert_eq!(encode_frame(&read_frame(&a.join("000007.bin")).unwrap()), encode_frame(&t.frames[7]));

    let c = tmp.path().join("other-seed");
    assert!(mt3d(&["synth", "--preset", "car-straight", "--seed", "99", "--out", s(&c)]).status.success());
    assert_ne!(dir_hashes(&a), dir_hashes(&c));
}

#[test]
fn synth_from_spec_file() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    let mut p = preset("ped-sparse").unwrap();
    p.frames = 5;
    fs::write(&spec, serde_json::to_string(&p).unwrap()).unwrap();
    let out = tmp.path().join("t");
    assert!(mt3d(&["synth", "--spec", s(&spec), "--out", s(&out)]).status.success());
    let (t, meta) = read_tracklet(&out).unwrap();
    assert_eq!(t.len(), 5);
    assert_eq!(meta.class, p.class);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mt3d(&["synth", "--out", "x"]).status.code(), Some(1));
    assert_eq!(mt3d(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mt3d(&["synth", "--preset", "no-such", "--out", "x"]).status.code(), Some(1));
    assert_eq!(mt3d(&["--help"]).status.code(), Some(0));
}

#[test]
fn track_results_schema_and_interval_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "car-turn");
    let w = small_weights(tmp.path());
    let r1 = tmp.path().join("r1.json");
    let o = mt3d(&["track", s(&data), "--weights", s(&w), "--interval", "1", "--out", s(&r1)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&r1).unwrap();
    let r = ResultsFile::from_json(&text, &r1).unwrap();
    assert_eq!(r.schema, RESULTS_SCHEMA);
    assert_eq!(r.tracklets.len(), 1);
    assert_eq!(r.tracklets[0].frames.len(), 40);
    assert_eq!(r.summary.frames, 39);
    assert!(r.manifest.input_hashes.contains_key(s(&w)));
    assert!(Path::new(r.manifest.timing.as_ref().unwrap()).is_file());

    // interval 1 equals the default (no subsampling)
    let r2 = tmp.path().join("r2.json");
    assert!(mt3d(&["track", s(&data), "--weights", s(&w), "--out", s(&r2)]).status.success());
    let b = ResultsFile::from_json(&fs::read_to_string(&r2).unwrap(), &r2).unwrap();
    assert_eq!(r.tracklets, b.tracklets);
    assert_eq!(r.summary, b.summary);

    let r5 = tmp.path().join("r5.json");
    assert!(mt3d(&["track", s(&data), "--weights", s(&w), "--interval", "5", "--out", s(&r5)]).status.success());
    let c = ResultsFile::from_json(&fs::read_to_string(&r5).unwrap(), &r5).unwrap();
    assert_eq!(c.tracklets[0].frames.len(), 8);

    // Unknown fields are rejected by the schema.
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["extra"] = serde_json::json!(1);
    assert!(ResultsFile::from_json(&v.to_string(), &r1).is_err());
    assert_eq!(mt3d(&["track", s(&data), "--weights", s(&w), "--interval", "0", "--out", s(&r5)]).status.code(), Some(1));
}

#[test]
fn track_gt_replay_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "ped-sparse");
    let w = small_weights(tmp.path());
    let out = tmp.path().join("r.json");
    assert!(mt3d(&["track", s(&data), "--weights", s(&w), "--gt-replay", "--out", s(&out)]).status.success());
    let r = ResultsFile::from_json(&fs::read_to_string(&out).unwrap(), &out).unwrap();
    assert_eq!(r.summary.success, 100.0 * 100.0 / 101.0);
    assert!(r.tracklets[0].frames.iter().all(|f| f.iou > 1.0 - 1e-9 && f.center_error == 0.0));
}

#[test]
fn track_missing_frame_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "ped-sparse");
    let w = small_weights(tmp.path());
    fs::remove_file(data.join("000012.bin")).unwrap();
    let o = mt3d(&["track", s(&data), "--weights", s(&w), "--out", s(&tmp.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("000012.bin"));
}

#[test]
fn track_fan_out_matches_single_worker() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("suite");
    for name in ["car-straight", "car-turn", "ped-sparse", "distractor-pair"] {
        synth(&root, name);
    }
    let w = small_weights(tmp.path());
    let out = tmp.path().join("r.json");
    let args = ["track", s(&root), "--weights", s(&w), "--interval", "2", "--out", s(&out)];
    assert!(mt3d_env(&args, "1").status.success());
    let one = fs::read(&out).unwrap();
    assert!(mt3d_env(&args, "4").status.success());
    let four = fs::read(&out).unwrap();
    assert_eq!(one, four);
    let r = ResultsFile::from_json(&String::from_utf8_lossy(&one), &out).unwrap();
    assert_eq!(r.tracklets.len(), 4);
    assert_eq!(mt3d_env(&args, "zero").status.code(), Some(1));
}

fn results_with(dir: &Path, name: &str, class: &str, frames: usize, score: f64) -> PathBuf {
    let tmp = tempfile::tempdir_in(dir).unwrap();
    let mut t = generate(&preset("ped-sparse").unwrap()).unwrap();
    t.frames.truncate(3);
    t.gt.truncate(3);
    write_tracklet(tmp.path(), &t, &TrackletMeta { class: class.into(), source: name.into(), ..Default::default() }).unwrap();
    let w = small_weights(tmp.path());
    let out = dir.join(name);
    assert!(mt3d(&["track", s(tmp.path()), "--weights", s(&w), "--out", s(&out)]).status.success());
    let mut r = ResultsFile::from_json(&fs::read_to_string(&out).unwrap(), &out).unwrap();
    r.tracklets[0].summary.frames = frames;
    r.tracklets[0].summary.success = score;
    r.tracklets[0].summary.precision = score;
    fs::write(&out, r.to_json()).unwrap();
    out
}

#[test]
fn eval_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let a = results_with(tmp.path(), "a.json", "car", 6424, 70.0);
    results_with(tmp.path(), "b.json", "pedestrian", 6088, 64.3);

    let o = mt3d(&["eval", s(&a)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("car"));

    let pattern = tmp.path().join("*.json");
    let json = tmp.path().join("table.out");
    let o = mt3d(&["eval", s(&pattern), "--json", s(&json)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let expect = (6424.0 * 70.0 + 6088.0 * 64.3) / (6424.0 + 6088.0);
    assert!((v["table"]["mean"]["success"].as_f64().unwrap() - expect).abs() < 1e-9);
    assert_eq!(v["table"]["classes"][0]["class"], "car");
    assert_eq!(v["inputs"].as_array().unwrap().len(), 2);

    let empty = tmp.path().join("nothing-*.json");
    assert_eq!(mt3d(&["eval", s(&empty)]).status.code(), Some(2));
    fs::write(tmp.path().join("bad.json"), "{}").unwrap();
    assert_eq!(mt3d(&["eval", s(&pattern)]).status.code(), Some(2));
}

#[test]
fn bench_csv_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"tokens": 16, "channels": 8, "group_size": 8, "ssm_layers": 1, "state_dim": 4}"#).unwrap();
    let csv = tmp.path().join("bench.csv");
    let o = mt3d(&["bench", "--config", s(&cfg), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("ours") && stdout.contains("attention"));
    let rows = parse_bench_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![512, 1024, 2048, 4096, 8192]);
    assert!(tmp.path().join("bench.csv.manifest.json").is_file());
    assert_eq!(mt3d(&["bench", "--sizes", "1024,512"]).status.code(), Some(1));
}

#[test]
fn weights_init_inspect_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.bin");
    let b = tmp.path().join("b.bin");
    assert!(mt3d(&["weights", "init", "--seed", "5", "--out", s(&a)]).status.success());
    assert!(mt3d(&["weights", "init", "--seed", "5", "--out", s(&b)]).status.success());
    assert_eq!(file_sha256(&a).unwrap(), file_sha256(&b).unwrap());
    let loaded = WeightsFile::load(&a).unwrap();
    assert_eq!(loaded.config, mt3d::Config::default());

    let o = mt3d(&["weights", "inspect", s(&a)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("head.weight"));
    assert!(text.contains("0 missing or mismatched"));

    let mut bytes = fs::read(&a).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&b, &bytes).unwrap();
    let o = mt3d(&["weights", "inspect", s(&b)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn selfcheck_json_output() {
    let o = mt3d(&["selfcheck", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    let json_end = text.rfind(']').unwrap();
    let v: serde_json::Value = serde_json::from_str(&text[..=json_end]).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 8);
}
