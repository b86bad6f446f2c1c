use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixscribe::audio::{read_wav, write_wav, AudioBuffer};
use mixscribe::estimators::{
    read_curves_csv, GainCurve, GridInfo, TrackTranscription, TranscriptionResult, WarpCurve,
};
use serde_json::{json, Value};

const SR: u32 = 8000;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mixscribe"));
    c.env_remove("MIXSCRIBE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mixscribe")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_fails(out: &Output) -> String {
    assert_eq!(
        out.status.code(),
        Some(1),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small grid: passes at hops 1024 and 512 with 4096/2048-sample windows.
const GRID: [&str; 6] = [
    "--hlen-init",
    "1024",
    "--hlen-target",
    "256",
    "--overlap",
    "4",
];

fn two_track_manifest(dir: &Path) -> PathBuf {
    let m = json!({
        "tracks": [
            {
                "synthetic": {"seed": 1, "duration_s": 6.0, "sample_rate": SR},
                "warp": [{"mix_start_s": 0.0, "mix_end_s": 6.0, "track_start_s": 0.0}],
                "gain": [{"time_s": 4.0, "gain": 1.0}, {"time_s": 6.0, "gain": 0.0}]
            },
            {
                "synthetic": {"seed": 2, "duration_s": 6.0, "sample_rate": SR},
                "warp": [{"mix_start_s": 4.0, "mix_end_s": 10.0, "track_start_s": 0.0}],
                "gain": [{"time_s": 4.0, "gain": 0.0}, {"time_s": 6.0, "gain": 1.0}]
            }
        ],
        "noise_level": 0.001,
        "seed": 7
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    path
}

fn synth(dir: &Path, manifest: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", s(manifest), "--out", s(&out)];
    args.extend(GRID);
    assert_ok(&run(&args));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn truth_grid(synth_dir: &Path) -> GridInfo {
    serde_json::from_value(read_json(&synth_dir.join("truth.json"))["grid"].clone()).unwrap()
}

fn gt_result(synth_dir: &Path, tracks: usize) -> TranscriptionResult {
    let grid = truth_grid(synth_dir);
    let tracks = (0..tracks)
        .map(|i| {
            let f = std::fs::File::open(synth_dir.join(format!("gt_{i}.csv"))).unwrap();
            let (gain, warp) = read_curves_csv(f, &grid).unwrap();
            TrackTranscription {
                track_id: i,
                gain,
                warp,
            }
        })
        .collect();
    TranscriptionResult { grid, tracks }
}

fn eval_args<'a>(result: &'a Path, synth_dir: &'a Path, gts: &'a mut Vec<String>) -> Vec<&'a str> {
    *gts = (0..2)
        .map(|i| {
            synth_dir
                .join(format!("gt_{i}.csv"))
                .to_str()
                .unwrap()
                .to_string()
        })
        .collect();
    let mut args = vec!["eval", "--result", s(result)];
    for g in gts.iter() {
        args.extend(["--ground-truth", g.as_str()]);
    }
    args
}

#[test]
fn synth_transcribe_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = two_track_manifest(dir.path());
    let sdir = synth(dir.path(), &manifest, "synth");
    for f in [
        "mix.wav",
        "track_0.wav",
        "track_1.wav",
        "gt_0.csv",
        "gt_1.csv",
        "manifest.json",
        "truth.json",
        "transcribe.json",
    ] {
        assert!(sdir.join(f).is_file(), "{f} missing");
    }

    let tdir = dir.path().join("run");
    let cfg = sdir.join("transcribe.json");
    assert_ok(&run(&[
        "transcribe",
        "--config",
        s(&cfg),
        "--out",
        s(&tdir),
        "--dump-activations",
        "--seed",
        "3",
    ]));
    for f in [
        "gain_0.csv",
        "gain_1.csv",
        "warp_0.csv",
        "warp_1.csv",
        "track_0.csv",
        "track_1.csv",
        "result.json",
        "passes.json",
        "config.json",
        "activations_0.bsa",
        "activations_1.bsa",
        "activations_0.pgm",
        "activations_1.pgm",
    ] {
        assert!(tdir.join(f).is_file(), "{f} missing");
    }
    assert!(!tdir.join("activations_2.bsa").exists());
    let gain = std::fs::read_to_string(tdir.join("gain_0.csv")).unwrap();
    assert_eq!(gain.lines().next(), Some("mix_time_s,gain"));
    let warp = std::fs::read_to_string(tdir.join("warp_1.csv")).unwrap();
    assert_eq!(warp.lines().next(), Some("mix_time_s,track_time_s"));
    let pgm = std::fs::read(tdir.join("activations_0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    let passes = read_json(&tdir.join("passes.json"));
    let hops: Vec<u64> = passes
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["hlen"].as_u64().unwrap())
        .collect();
    assert_eq!(hops, vec![1024, 512]);
    let echo = read_json(&tdir.join("config.json"));
    assert_eq!(echo["seed"], 3);
    assert_eq!(echo["hlen_init"], 1024);
    assert_eq!(echo["dump_activations"], true);

    let result = tdir.join("result.json");
    let mut gts = Vec::new();
    let out = run(&eval_args(&result, &sdir, &mut gts));
    assert_ok(&out);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("track"));
    assert!(table.lines().any(|l| l.starts_with("all")));
    let metrics = read_json(&tdir.join("metrics.json"));
    assert_eq!(metrics["tracks"].as_array().unwrap().len(), 2);
    let gain_mae = metrics["gain_mae"].as_f64().unwrap();
    assert!(gain_mae.is_finite() && gain_mae >= 0.0);
}

#[test]
fn transcribe_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = two_track_manifest(dir.path());
    let sdir = synth(dir.path(), &manifest, "synth");
    let cfg = sdir.join("transcribe.json");
    let results: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            assert_ok(&run(&["transcribe", "--config", s(&cfg), "--out", s(&out)]));
            std::fs::read(out.join("result.json")).unwrap()
        })
        .collect();
    assert_eq!(results[0], results[1]);
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = two_track_manifest(dir.path());
    let a = synth(dir.path(), &manifest, "a");
    let b = synth(dir.path(), &manifest, "b");
    for f in [
        "mix.wav",
        "gt_0.csv",
        "gt_1.csv",
        "truth.json",
        "manifest.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    let mut args = vec!["synth", s(&manifest), "--out", s(&c), "--seed", "8"];
    args.extend(GRID);
    assert_ok(&run(&args));
    assert_ne!(
        std::fs::read(a.join("mix.wav")).unwrap(),
        std::fs::read(c.join("mix.wav")).unwrap()
    );
    assert_eq!(read_json(&c.join("manifest.json"))["seed"], 8);
}

#[test]
fn identity_manifest_copies_the_excerpt() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<f32> = (0..4 * SR as usize)
        .map(|n| 0.5 * ((n as f32) * 0.01).sin())
        .collect();
    let input = AudioBuffer::new(samples.clone(), SR).unwrap();
    write_wav(dir.path().join("in.wav"), &input).unwrap();
    let m = json!({
        "tracks": [{
            "path": "in.wav",
            "warp": [{"mix_start_s": 0.0, "mix_end_s": 2.0, "track_start_s": 1.0, "speed": 1.0}],
            "gain": [{"time_s": 0.0, "gain": 1.0}]
        }]
    });
    let manifest = dir.path().join("identity.json");
    std::fs::write(&manifest, m.to_string()).unwrap();
    let out = synth(dir.path(), &manifest, "out");
    let mix = read_wav(out.join("mix.wav")).unwrap();
    assert_eq!(mix.samples, samples[SR as usize..3 * SR as usize].to_vec());
}

#[test]
fn loop_manifest_resets_track_time() {
    let dir = tempfile::tempdir().unwrap();
    let m = json!({
        "tracks": [{
            "synthetic": {"seed": 4, "duration_s": 5.0, "sample_rate": SR},
            "warp": [
                {"mix_start_s": 0.0, "mix_end_s": 4.0, "track_start_s": 0.0},
                {"mix_start_s": 4.0, "mix_end_s": 8.0, "track_start_s": 0.0}
            ]
        }]
    });
    let manifest = dir.path().join("loop.json");
    std::fs::write(&manifest, m.to_string()).unwrap();
    let out = synth(dir.path(), &manifest, "out");
    let csv = std::fs::read_to_string(out.join("gt_0.csv")).unwrap();
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    let resets: Vec<f64> = rows
        .windows(2)
        .filter(|w| w[1].1 < w[0].1)
        .map(|w| w[1].0)
        .collect();
    assert_eq!(resets.len(), 1, "{resets:?}");
    assert!((resets[0] - 4.0).abs() < 0.1, "{resets:?}");
    for (mix_t, track_t) in rows {
        // Positions before the first frame center clamp to frame 0.
        let first_center = 1024.0 / SR as f64;
        let expect = if mix_t < 4.0 { mix_t } else { mix_t - 4.0 }.max(first_center);
        assert!(
            (track_t - expect).abs() <= 0.5 * 512.0 / SR as f64 + 1e-6,
            "{mix_t}: {track_t}"
        );
    }
}

#[test]
fn invalid_spec_names_the_segment() {
    let dir = tempfile::tempdir().unwrap();
    let m = json!({
        "tracks": [{
            "synthetic": {"seed": 4, "duration_s": 5.0, "sample_rate": SR},
            "warp": [
                {"mix_start_s": 0.0, "mix_end_s": 4.0, "track_start_s": 0.0},
                {"mix_start_s": 3.0, "mix_end_s": 5.0, "track_start_s": 0.0}
            ]
        }]
    });
    let manifest = dir.path().join("bad.json");
    std::fs::write(&manifest, m.to_string()).unwrap();
    let err = assert_fails(&run(&[
        "synth",
        s(&manifest),
        "--out",
        s(&dir.path().join("o")),
    ]));
    assert!(err.contains("track 0 segment 1"), "{err}");
}

#[test]
fn missing_mix_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mix = dir.path().join("no_such_mix.wav");
    let err = assert_fails(&run(&[
        "transcribe",
        "--mix",
        s(&mix),
        "--tracks",
        s(&mix),
        "--out",
        s(&dir.path().join("o")),
    ]));
    assert!(err.contains(s(&mix)), "{err}");
    assert!(err.contains("I/O"), "{err}");
}

#[test]
fn eval_of_ground_truth_is_zero_and_offset_is_hand_computed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = two_track_manifest(dir.path());
    let sdir = synth(dir.path(), &manifest, "synth");

    let exact = gt_result(&sdir, 2);
    let path = dir.path().join("exact.json");
    std::fs::write(&path, exact.to_json().unwrap()).unwrap();
    let mut gts = Vec::new();
    assert_ok(&run(&eval_args(&path, &sdir, &mut gts)));
    let m = read_json(&dir.path().join("metrics.json"));
    assert_eq!(
        (
            m["gain_mae"].as_f64(),
            m["warp_mae_s"].as_f64(),
            m["miss_rate"].as_f64()
        ),
        (Some(0.0), Some(0.0), Some(0.0))
    );

    // Estimate two frames late wherever the reference is active; gain off by 0.25.
    let mut shifted = exact.clone();
    for t in &mut shifted.tracks {
        t.warp = WarpCurve(t.warp.0.iter().map(|f| f.map(|f| f + 2)).collect());
        t.gain = GainCurve(t.gain.0.iter().map(|g| g + 0.25).collect());
    }
    let path = dir.path().join("shifted.json");
    std::fs::write(&path, shifted.to_json().unwrap()).unwrap();
    let out_dir = dir.path().join("m");
    let mut args = eval_args(&path, &sdir, &mut gts);
    args.extend(["--out", s(&out_dir)]);
    assert_ok(&run(&args));
    let m = read_json(&out_dir.join("metrics.json"));
    let hop = exact.grid.hlen as f64 / SR as f64;
    assert!((m["warp_mae_s"].as_f64().unwrap() - 2.0 * hop).abs() < 1e-12);
    assert!((m["gain_mae"].as_f64().unwrap() - 0.25).abs() < 1e-6);
    assert_eq!(m["miss_rate"].as_f64(), Some(0.0));
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = two_track_manifest(dir.path());
    let sdir = synth(dir.path(), &manifest, "synth");
    let exact = gt_result(&sdir, 2);

    let mut other = exact.clone();
    other.grid.hlen *= 2;
    let path = dir.path().join("other.json");
    std::fs::write(&path, other.to_json().unwrap()).unwrap();
    let mut gts = Vec::new();
    assert_fails(&run(&eval_args(&path, &sdir, &mut gts)));

    let path = dir.path().join("exact.json");
    std::fs::write(&path, exact.to_json().unwrap()).unwrap();
    let missing = dir.path().join("missing_gt.csv");
    let err = assert_fails(&run(&[
        "eval",
        "--result",
        s(&path),
        "--ground-truth",
        s(&sdir.join("gt_0.csv")),
        "--ground-truth",
        s(&missing),
    ]));
    assert!(err.contains(s(&missing)), "{err}");
}

#[test]
fn thread_cap_is_validated() {
    let out = bin()
        .env("MIXSCRIBE_THREADS", "0")
        .args(["eval", "--result", "x", "--ground-truth", "y"])
        .output()
        .unwrap();
    let err = assert_fails(&out);
    assert!(err.contains("MIXSCRIBE_THREADS"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let manifest = two_track_manifest(dir.path());
    let out = dir.path().join("o");
    let mut args = vec!["synth", s(&manifest), "--out", s(&out)];
    args.extend(GRID);
    assert_ok(
        &bin()
            .env("MIXSCRIBE_THREADS", "1")
            .args(&args)
            .output()
            .unwrap(),
    );
}
