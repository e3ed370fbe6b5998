use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use zshdr::exposure::HdrFrame;
use zshdr::image::Image;
use zshdr::io::{
    read_exposure_sidecar, read_hdr_sequence, write_hdr_sequence, FrameFormat, FrameSequenceSpec,
};
use zshdr::unet::load_weights;

fn zshdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zshdr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = zshdr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_hdr(dir: &Path, frames: &[HdrFrame]) {
    let spec = FrameSequenceSpec::new(dir, "frame_%06d", FrameFormat::Pfm, 1.0).unwrap();
    write_hdr_sequence(frames, &spec).unwrap();
}

fn constant_frames(n: usize, v: f64) -> Vec<HdrFrame> {
    (0..n)
        .map(|_| HdrFrame::new(Image::filled(16, 16, v)).unwrap())
        .collect()
}

fn png_count(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count()
}

#[test]
fn simulate_constant_sequence() {
    let tmp = TempDir::new().unwrap();
    let (hdr, sdr) = (tmp.path().join("hdr"), tmp.path().join("sdr"));
    write_hdr(&hdr, &constant_frames(3, 0.3));
    ok(&["simulate-sdr", "--input", p(&hdr), "--output", p(&sdr)]);
    assert_eq!(png_count(&sdr), 3);
    let f = read_exposure_sidecar(&sdr.join("exposures.csv")).unwrap();
    assert_eq!(f.len(), 3);
    assert!(f.iter().all(|&v| v == f[0]));
}

#[test]
fn simulate_brightening_sequence_lowers_exposure() {
    let tmp = TempDir::new().unwrap();
    let (hdr, sdr) = (tmp.path().join("hdr"), tmp.path().join("sdr"));
    let frames: Vec<_> = (0..6)
        .map(|i| HdrFrame::new(Image::filled(8, 8, 0.1 * 1.5f64.powi(i))).unwrap())
        .collect();
    write_hdr(&hdr, &frames);
    let sidecar = tmp.path().join("f.csv");
    ok(&[
        "simulate-sdr",
        "--input",
        p(&hdr),
        "--output",
        p(&sdr),
        "--sidecar",
        p(&sidecar),
    ]);
    let f = read_exposure_sidecar(&sidecar).unwrap();
    assert!(f.windows(2).all(|w| w[1] <= w[0]), "{f:?}");
}

#[test]
fn missing_input_exits_2_and_names_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = zshdr(&[
        "simulate-sdr",
        "--input",
        p(&missing),
        "--output",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn invalid_flags_exit_2_before_writing() {
    let tmp = TempDir::new().unwrap();
    let hdr = tmp.path().join("hdr");
    write_hdr(&hdr, &constant_frames(2, 0.3));
    let out_dir = tmp.path().join("o");
    let out = zshdr(&[
        "simulate-sdr",
        "--input",
        p(&hdr),
        "--output",
        p(&out_dir),
        "--alpha",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    let out = zshdr(&[
        "expand",
        "--input",
        p(&hdr),
        "--output",
        p(&out_dir),
        "--stack",
        "-3,0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    assert_eq!(zshdr(&["train", "--bogus"]).status.code(), Some(2));
}

/// Builds a small SDR sequence through the CLI.
fn sdr_fixture(tmp: &Path, frames: usize, size: usize) -> std::path::PathBuf {
    let (gt, sdr) = (tmp.join("gt"), tmp.join("sdr"));
    ok(&[
        "fixture-gen",
        "--output",
        p(&gt),
        "--frames",
        &frames.to_string(),
        "--size",
        &size.to_string(),
        "--disk-radius",
        "3",
    ]);
    ok(&["simulate-sdr", "--input", p(&gt), "--output", p(&sdr)]);
    sdr
}

#[test]
fn train_expand_and_report() {
    let tmp = TempDir::new().unwrap();
    let sdr = sdr_fixture(tmp.path(), 1, 16);
    let w1 = tmp.path().join("w1.bin");
    let w2 = tmp.path().join("w2.bin");
    let report = tmp.path().join("report.tsv");
    let common = ["--max-epochs", "2", "--base-channels", "4", "--seed", "7"];
    let mut args = vec![
        "train",
        "--input",
        p(&sdr),
        "--weights-out",
        p(&w1),
        "--report",
        p(&report),
    ];
    args.extend(common);
    ok(&args);
    let mut args = vec!["train", "--input", p(&sdr), "--weights-out", p(&w2)];
    args.extend(common);
    ok(&args);
    assert_eq!(fs::read(&w1).unwrap(), fs::read(&w2).unwrap());
    assert_eq!(load_weights(&w1).unwrap().config().base_channels, 4);
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 2);

    let out = tmp.path().join("hdr");
    let dump = tmp.path().join("stack");
    ok(&[
        "expand",
        "--input",
        p(&sdr),
        "--weights",
        p(&w1),
        "--output",
        p(&out),
        "--dump-stack",
        p(&dump),
    ]);
    let spec = FrameSequenceSpec::new(&out, "frame_%06d", FrameFormat::Pfm, 1.0).unwrap();
    assert_eq!(read_hdr_sequence(&spec).unwrap().frames.len(), 1);
    assert_eq!(png_count(&dump), 5);

    let rgbe = tmp.path().join("rgbe");
    ok(&[
        "expand",
        "--input",
        p(&sdr),
        "--weights",
        p(&w1),
        "--output",
        p(&rgbe),
        "--out-format",
        "hdr",
    ]);
    let bytes = fs::read(rgbe.join("frame_000000.hdr")).unwrap();
    assert!(bytes.starts_with(b"#?RADIANCE\n"));
}

#[test]
fn identity_stack_linearizes_input() {
    let tmp = TempDir::new().unwrap();
    let sdr = sdr_fixture(tmp.path(), 2, 16);
    let out = tmp.path().join("lin");
    ok(&[
        "expand",
        "--input",
        p(&sdr),
        "--stack",
        "0",
        "--output",
        p(&out),
    ]);
    let frames = read_hdr_sequence(
        &FrameSequenceSpec::new(&out, "frame_%06d", FrameFormat::Pfm, 1.0).unwrap(),
    )
    .unwrap()
    .frames;
    let input = zshdr::io::read_png(&sdr.join("frame_000001.png")).unwrap();
    for (a, z) in frames[1].image.data().iter().zip(input.image.data()) {
        let expected = z.powf(2.2) as f32;
        assert_eq!(*a as f32, expected);
    }
}

#[test]
fn evaluate_identical_and_mismatched() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("gt");
    ok(&[
        "fixture-gen",
        "--output",
        p(&gt),
        "--frames",
        "3",
        "--size",
        "16",
        "--disk-radius",
        "3",
    ]);
    let out = ok(&["evaluate", "--pred", p(&gt), "--ref", p(&gt)]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert_eq!(lines[0], "frame,pu_psnr,pu_ssim");
    assert_eq!(lines[4], "mean,inf,1.000000");

    let short = tmp.path().join("short");
    ok(&[
        "fixture-gen",
        "--output",
        p(&short),
        "--frames",
        "2",
        "--size",
        "16",
        "--disk-radius",
        "3",
    ]);
    let out = zshdr(&["evaluate", "--pred", p(&short), "--ref", p(&gt)]);
    assert_eq!(out.status.code(), Some(2));

    let csv_path = tmp.path().join("scores.csv");
    ok(&[
        "evaluate",
        "--pred",
        p(&gt),
        "--ref",
        p(&gt),
        "--out",
        p(&csv_path),
    ]);
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), csv);
}

#[test]
fn config_file_defaults_and_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("gt");
    let cfg = tmp.path().join("run.cfg");
    fs::write(
        &cfg,
        "# fixture settings\nframes=4\nsize=16\ndisk_radius=3\n",
    )
    .unwrap();
    ok(&["fixture-gen", "--config", p(&cfg), "--output", p(&gt)]);
    let spec = FrameSequenceSpec::new(&gt, "frame_%06d", FrameFormat::Pfm, 1.0).unwrap();
    assert_eq!(read_hdr_sequence(&spec).unwrap().frames.len(), 4);

    let gt2 = tmp.path().join("gt2");
    ok(&[
        "fixture-gen",
        "--config",
        p(&cfg),
        "--output",
        p(&gt2),
        "--frames",
        "2",
    ]);
    let spec = FrameSequenceSpec::new(&gt2, "frame_%06d", FrameFormat::Pfm, 1.0).unwrap();
    assert_eq!(read_hdr_sequence(&spec).unwrap().frames.len(), 2);

    fs::write(&cfg, "frames 4\n").unwrap();
    assert_eq!(
        zshdr(&["fixture-gen", "--config", p(&cfg), "--output", p(&gt2)])
            .status
            .code(),
        Some(2)
    );
}
