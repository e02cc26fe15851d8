use std::path::Path;
use std::process::{Command, Output};

use c4::io::{read_image, write_image};
use c4_core::LinearImage;

fn c4(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c4"))
        .args(args)
        .env("C4_THREADS", "1")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

fn rgb(text: &str) -> Vec<f64> {
    text.split(',').map(|v| v.parse().unwrap()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(c4(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(c4(&["estimate", "--image", "x.png"]).status.code(), Some(1));
    assert_eq!(
        c4(&[
            "estimate",
            "--static",
            "gray-world",
            "--image",
            "x.png",
            "--bogus"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        c4(&[
            "correct",
            "--illuminant",
            "1,2",
            "--image",
            "x.png",
            "--out",
            "y.png"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(c4(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_exits_with_two() {
    let out = c4(&[
        "estimate",
        "--static",
        "gray-world",
        "--image",
        "/nonexistent/x.png",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x.png"));
}

#[test]
fn neutral_image_estimates_neutral() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("gray.png");
    write_image(&img, &LinearImage::filled(8, 8, [0.4, 0.4, 0.4]).unwrap()).unwrap();
    for preset in ["gray-world", "white-patch", "shades-of-gray"] {
        let out = c4(&["estimate", "--static", preset, "--image", p(&img)]);
        assert_eq!(out.status.code(), Some(0), "{preset}");
        assert_eq!(stdout(&out), "0.577350,0.577350,0.577350", "{preset}");
    }
}

#[test]
fn correction_neutralizes_a_cast() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("cast.pfa");
    let scene = LinearImage::from_fn(8, 8, |y, x| {
        let v = 0.2 + 0.05 * ((y * 8 + x) % 7) as f64;
        [v * 0.9, v * 0.5, v * 0.2]
    })
    .unwrap();
    write_image(&img, &scene).unwrap();
    let fixed = dir.path().join("fixed.pfa");
    let out = c4(&[
        "correct",
        "--static",
        "gray-world",
        "--image",
        p(&img),
        "--out",
        p(&fixed),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let est = rgb(&stdout(&c4(&[
        "estimate",
        "--static",
        "gray-world",
        "--image",
        p(&fixed),
    ])));
    for v in est {
        assert!((v - 0.577350).abs() < 1e-5);
    }

    let known = dir.path().join("known.pfa");
    let out = c4(&[
        "correct",
        "--illuminant",
        "0.9,0.5,0.2",
        "--image",
        p(&img),
        "--out",
        p(&known),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let px = read_image(&known).unwrap().pixel(0, 0);
    assert!((px[0] - px[1]).abs() < 1e-12 && (px[1] - px[2]).abs() < 1e-12);
}

#[test]
fn synth_train_estimate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = c4(&[
        "synth",
        "--n",
        "12",
        "--seed",
        "3",
        "--out-dir",
        p(&data),
        "--size",
        "16",
        "--folds",
        "3",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest = data.join("manifest.csv");
    assert_eq!(stdout(&out), manifest.display().to_string());

    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "batch_size = 4\npretrain_epochs = 2\nfinetune_epochs = 2\noutput_size = 16\nchannels = 4, 3\nstrides = 2, 1\n",
    )
    .unwrap();
    let model = dir.path().join("m.c4m");
    let out = c4(&[
        "train",
        "--manifest",
        p(&manifest),
        "--config",
        p(&cfg),
        "--stages",
        "2",
        "--out",
        p(&model),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = std::fs::read_to_string(dir.path().join("m.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);

    let est = c4(&[
        "estimate",
        "--model",
        p(&model),
        "--image",
        p(&data.join("img_00000.png")),
    ]);
    assert_eq!(est.status.code(), Some(0));
    let e = rgb(&stdout(&est));
    assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-5);

    let report = dir.path().join("report.csv");
    let out = c4(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--static",
        "gray-world",
        "--report",
        p(&report),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("Tri-mean") && text.contains("Worst 25%"));
    let rows = std::fs::read_to_string(&report).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 + 1);

    let out = c4(&["evaluate", "--manifest", p(&manifest), "--model", p(&model)]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn corrupt_model_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("bad.c4m");
    std::fs::write(&model, b"C4MD\x01\x00").unwrap();
    let img = dir.path().join("x.pfa");
    write_image(&img, &LinearImage::filled(4, 4, [0.5, 0.5, 0.5]).unwrap()).unwrap();
    assert_eq!(
        c4(&["estimate", "--model", p(&model), "--image", p(&img)])
            .status
            .code(),
        Some(2)
    );
}
