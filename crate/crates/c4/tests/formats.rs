use std::fs;

use c4::config::RunConfig;
use c4::error::C4Error;
use c4::io::{read_image, read_mask, write_image, write_mask};
use c4::manifest::{Manifest, ManifestEntry};
use c4::model_file::{decode, encode, load_model, save_model};
use c4_core::cascade::{CascadeModel, StageNetConfig};
use c4_core::LinearImage;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gradient(h: usize, w: usize) -> LinearImage {
    LinearImage::from_fn(h, w, |y, x| {
        [y as f64 / h as f64, x as f64 / w as f64, 0.25]
    })
    .unwrap()
}

fn small_model(stages: usize, seed: u64) -> CascadeModel {
    let net = StageNetConfig::from_channels(&[4, 3], 3, &[2, 1], 0.5);
    CascadeModel::new(net, stages, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn pfa_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pfa");
    let image = LinearImage::from_fn(3, 5, |y, x| {
        [0.1 * y as f64 + 1e-9, 1.0 / (x as f64 + 3.0), 7.5]
    })
    .unwrap();
    write_image(&path, &image).unwrap();
    assert_eq!(read_image(&path).unwrap().data(), image.data());
}

#[test]
fn png_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    let image = gradient(6, 9);
    write_image(&path, &image).unwrap();
    let back = read_image(&path).unwrap();
    assert_eq!((back.height(), back.width()), (6, 9));
    for (a, b) in image.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
    }
}

#[test]
fn png_write_clips_values_above_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.png");
    write_image(&path, &LinearImage::filled(2, 2, [0.0, 0.5, 3.0]).unwrap()).unwrap();
    let px = read_image(&path).unwrap().pixel(1, 1);
    assert_eq!(px[0], 0.0);
    assert_eq!(px[2], 1.0);
}

#[test]
fn mask_round_trip_and_size_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    let mask: Vec<bool> = (0..12).map(|i| i % 5 == 0).collect();
    write_mask(&path, 3, 4, &mask).unwrap();
    assert_eq!(read_mask(&path, 3, 4).unwrap(), mask);
    assert!(read_mask(&path, 4, 3).is_err());
}

#[test]
fn garbage_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("a.png");
    fs::write(&png, b"not a png").unwrap();
    assert!(matches!(read_image(&png), Err(C4Error::Image { .. })));
    let pfa = dir.path().join("a.pfa");
    fs::write(&pfa, "PFA\n2 1\n0 0 0 1 1\n").unwrap();
    assert!(read_image(&pfa).is_err());
}

#[test]
fn model_round_trip_preserves_weights_and_gamma() {
    let model = small_model(3, 4).with_input_gamma(1.0 / 2.2).unwrap();
    let back = decode(&encode(&model)).unwrap();
    assert_eq!(back, model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.c4m");
    save_model(&path, &model).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);
}

#[test]
fn model_decode_rejects_bad_magic_and_trailing_bytes() {
    let mut bytes = encode(&small_model(1, 0));
    bytes.push(0);
    assert!(decode(&bytes).is_err());
    bytes.pop();
    bytes[0] = b'X';
    assert_eq!(decode(&bytes).unwrap_err().offset, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn model_decode_rejects_every_truncation(stages in 1usize..4, seed in 0u64..1000, cut in 0.0f64..1.0) {
        let bytes = encode(&small_model(stages, seed));
        let len = ((bytes.len() as f64) * cut) as usize;
        let err = decode(&bytes[..len]).unwrap_err();
        prop_assert!(err.offset <= len);
    }
}

fn write_dataset(dir: &std::path::Path) {
    write_image(&dir.join("a.png"), &gradient(4, 4)).unwrap();
    write_image(&dir.join("b.pfa"), &gradient(4, 4)).unwrap();
    write_mask(&dir.join("b_mask.png"), 4, 4, &[false; 16]).unwrap();
}

#[test]
fn manifest_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let entry = |path: &str, mask: Option<&str>, fold| ManifestEntry {
        path: path.into(),
        r: 0.5,
        g: 0.6,
        b: 0.7,
        mask: mask.map(Into::into),
        fold,
        camera: "cam".into(),
    };
    let manifest = Manifest {
        root: dir.path().to_path_buf(),
        entries: vec![
            entry("a.png", None, Some(0)),
            entry("b.pfa", Some("b_mask.png"), Some(1)),
        ],
    };
    let path = dir.path().join("manifest.csv");
    manifest.save(&path).unwrap();
    let back = Manifest::load(&path).unwrap();
    assert_eq!(back, manifest);
    let samples = back.load_samples().unwrap();
    assert_eq!(samples.len(), 2);
    assert!(samples[1].image.mask().is_some());
    let norm: f64 = samples[0].illuminant.rgb().iter().map(|v| v * v).sum();
    assert!((norm - 1.0).abs() < 1e-12);
}

fn load_err(text: &str) -> C4Error {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let path = dir.path().join("m.csv");
    fs::write(&path, text).unwrap();
    Manifest::load(&path).unwrap_err()
}

fn line_of(err: C4Error) -> u64 {
    match err {
        C4Error::Line { line, .. } => line,
        other => panic!("expected a line error, got {other}"),
    }
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let header = "path,r,g,b,mask,fold,camera\n";
    assert_eq!(line_of(load_err("path,r,g\n")), 1);
    assert_eq!(
        line_of(load_err(&format!(
            "{header}a.png,1,1,1,,,c\nmissing.png,1,1,1,,,c\n"
        ))),
        3
    );
    assert_eq!(line_of(load_err(&format!("{header}a.png,1,x,1,,,c\n"))), 2);
    assert_eq!(
        line_of(load_err(&format!(
            "{header}a.png,1,1,1,,,c\na.png,0,0,0,,,c\n"
        ))),
        3
    );
    assert_eq!(
        line_of(load_err(&format!("{header}b.pfa,1,1,1,nomask.png,,c\n"))),
        2
    );
}

#[test]
fn manifest_folds_all_or_none() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path());
    let path = dir.path().join("m.csv");
    let header = "path,r,g,b,mask,fold,camera\n";
    fs::write(
        &path,
        format!("{header}a.png,1,1,1,,,c\nb.pfa,1,1,1,,,c\na.png,1,1,1,,,c\n"),
    )
    .unwrap();
    let assigned = Manifest::load(&path).unwrap().with_folds(3, 9).unwrap();
    let mut folds: Vec<usize> = assigned.entries.iter().map(|e| e.fold.unwrap()).collect();
    folds.sort();
    assert_eq!(folds, [0, 1, 2]);

    fs::write(
        &path,
        format!("{header}a.png,1,1,1,,0,c\nb.pfa,1,1,1,,,c\n"),
    )
    .unwrap();
    assert!(matches!(
        Manifest::load(&path).unwrap().with_folds(2, 0),
        Err(C4Error::Usage(_))
    ));
    fs::write(
        &path,
        format!("{header}a.png,1,1,1,,0,c\nb.pfa,1,1,1,,5,c\n"),
    )
    .unwrap();
    assert!(Manifest::load(&path).unwrap().with_folds(2, 0).is_err());
}

#[test]
fn config_render_parses_back() {
    let text = "learning_rate = 0.001\nloss_weights = 1, 2, 3\nchannels = 8, 3\nstrides = 2, 1\ndropout = 0.25 # tail comment\n";
    let path = std::path::Path::new("run.cfg");
    let cfg = RunConfig::parse(text, path).unwrap();
    assert_eq!(cfg.train.learning_rate, 1e-3);
    assert_eq!(cfg.net.layers.len(), 2);
    assert_eq!(cfg.net.dropout_p, 0.25);
    assert_eq!(RunConfig::parse(&cfg.render(), path).unwrap(), cfg);
    assert_eq!(
        RunConfig::parse(&RunConfig::default().render(), path).unwrap(),
        RunConfig::default()
    );
}

#[test]
fn config_errors_name_the_line() {
    let path = std::path::Path::new("run.cfg");
    for (text, line) in [
        ("# ok\nbogus = 1\n", 2),
        ("seed = 1\nbatch_size\n", 2),
        ("gamma = fast\n", 1),
    ] {
        match RunConfig::parse(text, path) {
            Err(C4Error::Line { line: l, .. }) => assert_eq!(l, line, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
    assert!(RunConfig::parse("channels = 8, 3\nstrides = 1\n", path).is_err());
    assert!(RunConfig::parse("batch_size = 0\n", path).is_err());
}
