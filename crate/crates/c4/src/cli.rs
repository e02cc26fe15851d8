use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use c4_core::cascade::CascadeModel;
use c4_core::data::{stream_rng, synthesize_dataset, MondrianSpec, Sample};
use c4_core::eval::{cascade_size_study, cross_validate, evaluate, split_fold, StudyConfig};
use c4_core::statics::StaticPreset;
use c4_core::train::train;
use c4_core::{von_kries_correct, Illuminant, LinearImage};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{C4Error, Result};
use crate::io::{read_image, read_mask, write_image, write_mask};
use crate::manifest::{Manifest, ManifestEntry};
use crate::model_file::{load_model, save_model};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "c4", version, about = "Cascaded convolutional color constancy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Mondrian dataset and its manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Side length of the square images.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Add a masked calibration patch to every scene.
        #[arg(long)]
        chart: bool,
        #[arg(long, default_value_t = 3)]
        folds: usize,
    },
    /// Train a cascade on every image of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        stages: usize,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV; defaults to the model path with a `.trace.csv` suffix.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Overrides the seed of the configuration file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the normalized illuminant estimate of one image as `r,g,b`.
    Estimate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Write a white-balanced copy of an image.
    Correct {
        #[command(flatten)]
        source: CorrectionSource,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report angular errors on a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        method: Method,
        /// Cascade depth when training per fold.
        #[arg(long, default_value_t = 3)]
        stages: usize,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        /// Seed of the fold partition for manifests without folds.
        #[arg(long, default_value_t = 0)]
        fold_seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and test one cascade per depth on synthetic scenes.
    Study {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        sizes: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    #[arg(long)]
    model: Option<PathBuf>,
    /// One of gray-world, white-patch, shades-of-gray, gray-edge-1, gray-edge-2, general-gray-world.
    #[arg(long = "static")]
    preset: Option<StaticPreset>,
}

fn parse_rgb(text: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected three comma-separated numbers".to_string())
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct CorrectionSource {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "static")]
    preset: Option<StaticPreset>,
    /// Known illuminant as `r,g,b`.
    #[arg(long, value_parser = parse_rgb)]
    illuminant: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Method {
    /// Evaluate a trained model on every entry.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Cross-validate a learning-free estimator.
    #[arg(long = "static")]
    preset: Option<StaticPreset>,
    /// Cross-validate cascades trained per fold with this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

enum Estimator {
    Model(Box<CascadeModel>),
    Static(StaticPreset),
    Known(Illuminant),
}

impl Estimator {
    fn estimate(&self, image: &LinearImage) -> Result<Illuminant> {
        Ok(match self {
            Self::Model(m) => c4_core::eval::Estimator::estimate(m.as_ref(), image)?,
            Self::Static(p) => c4_core::eval::Estimator::estimate(p, image)?,
            Self::Known(e) => *e,
        })
    }
}

fn source_estimator(
    model: &Option<PathBuf>,
    preset: Option<StaticPreset>,
    known: Option<&[f64]>,
) -> Result<Estimator> {
    if let Some(path) = model {
        return Ok(Estimator::Model(Box::new(load_model(path)?)));
    }
    if let Some(p) = preset {
        return Ok(Estimator::Static(p));
    }
    match known {
        Some(&[r, g, b]) => Ok(Estimator::Known(Illuminant::new(r, g, b)?)),
        _ => Err(C4Error::Usage(
            "expected --model, --static or --illuminant r,g,b".into(),
        )),
    }
}

fn load_input(image: &Path, mask: Option<&Path>) -> Result<LinearImage> {
    let img = read_image(image)?;
    match mask {
        Some(m) => {
            let mask = read_mask(m, img.height(), img.width())?;
            Ok(img.with_mask(mask)?)
        }
        None => Ok(img),
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn fresh_model(cfg: &RunConfig, stages: usize) -> Result<CascadeModel> {
    Ok(CascadeModel::new(
        cfg.net.clone(),
        stages,
        &mut stream_rng(cfg.train.seed, u64::MAX),
    )?)
}

fn synth(
    n: usize,
    seed: u64,
    out_dir: &Path,
    spec: &MondrianSpec,
    folds: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| C4Error::io(out_dir, e))?;
    let samples = synthesize_dataset(spec, n, seed)?;
    let entries = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let name = PathBuf::from(format!("img_{i:05}.png"));
            write_image(&out_dir.join(&name), &s.image)?;
            let mask = match s.image.mask() {
                Some(m) => {
                    let file = PathBuf::from(format!("mask_{i:05}.png"));
                    write_mask(&out_dir.join(&file), s.image.height(), s.image.width(), m)?;
                    Some(file)
                }
                None => None,
            };
            let [r, g, b] = s.illuminant.rgb();
            Ok(ManifestEntry {
                path: name,
                r,
                g,
                b,
                mask,
                fold: None,
                camera: s.camera.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    }
    .with_folds(folds, seed)?;
    let path = out_dir.join("manifest.csv");
    manifest.save(&path)?;
    Ok(path)
}

fn correct_image(image: &LinearImage, e: &Illuminant) -> Result<LinearImage> {
    // Dividing by the unit-norm light scales a neutral pixel by sqrt(3); undo that so
    // an achromatic illuminant leaves the image unchanged.
    Ok(von_kries_correct(image, e)?.scaled(1.0 / 3f64.sqrt())?)
}

fn trace_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".trace.csv");
    out.with_file_name(name)
}

fn samples_with_folds(manifest: &Path, folds: usize, seed: u64) -> Result<Vec<Sample>> {
    Manifest::load(manifest)?
        .with_folds(folds, seed)?
        .load_samples()
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            n,
            seed,
            out_dir,
            size,
            noise,
            chart,
            folds,
        } => {
            let spec = MondrianSpec {
                height: size,
                width: size,
                noise_std: noise,
                chart,
                ..Default::default()
            };
            spec.validate()?;
            let path = synth(n, seed, &out_dir, &spec, folds)?;
            println!("{}", path.display());
        }
        Command::Train {
            manifest,
            config,
            stages,
            out,
            trace,
            seed,
        } => {
            let mut cfg = run_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let samples = Manifest::load(&manifest)?.load_samples()?;
            eprintln!(
                "training a {stages}-stage cascade on {} images",
                samples.len()
            );
            let trained = train(
                &fresh_model(&cfg, stages)?,
                &samples,
                &cfg.train,
                &cfg.augment,
            )?;
            if let Some(last) = trained.trace.last() {
                eprintln!("final epoch mean loss {:.3} deg", last.mean_loss_deg);
            }
            save_model(&out, &trained.model)?;
            report::trace_csv(&trace.unwrap_or_else(|| trace_path(&out)), &trained.trace)?;
            println!("{}", out.display());
        }
        Command::Estimate {
            source,
            image,
            mask,
        } => {
            let est = source_estimator(&source.model, source.preset, None)?;
            let e = est
                .estimate(&load_input(&image, mask.as_deref())?)?
                .normalized()
                .rgb();
            println!("{:.6},{:.6},{:.6}", e[0], e[1], e[2]);
        }
        Command::Correct {
            source,
            image,
            mask,
            out,
        } => {
            let est = source_estimator(
                &source.model,
                source.preset,
                source.illuminant.as_ref().map(|a| &a[..]),
            )?;
            let img = load_input(&image, mask.as_deref())?;
            let e = est.estimate(&img)?;
            write_image(&out, &correct_image(&img.without_mask(), &e)?)?;
            println!("{}", out.display());
        }
        Command::Evaluate {
            manifest,
            method,
            stages,
            folds,
            fold_seed,
            report: report_path,
        } => {
            let (name, cv_folds, pooled) = if let Some(path) = &method.model {
                let model = load_model(path)?;
                let samples = Manifest::load(&manifest)?.load_samples()?;
                (
                    path.display().to_string(),
                    Vec::new(),
                    evaluate(&model, &samples)?,
                )
            } else if let Some(preset) = method.preset {
                let samples = samples_with_folds(&manifest, folds, fold_seed)?;
                let cv = cross_validate(&samples, folds, |_, _| Ok(preset))?;
                (preset.to_string(), cv.folds, cv.pooled)
            } else {
                let cfg = run_config(method.config.as_deref())?;
                let samples = samples_with_folds(&manifest, folds, fold_seed)?;
                let init = fresh_model(&cfg, stages)?;
                let models = (0..folds)
                    .into_par_iter()
                    .map(|k| {
                        let (train_set, _) = split_fold(&samples, k);
                        eprintln!("fold {k}: training on {} images", train_set.len());
                        train(&init, &train_set, &cfg.train, &cfg.augment)
                            .map(|t| t.model)
                            .map_err(|e| e.in_fold(k))
                    })
                    .collect::<c4_core::Result<Vec<_>>>()?;
                let cv = cross_validate(&samples, folds, |k, _| Ok(&models[k]))?;
                (format!("c4-{stages}"), cv.folds, cv.pooled)
            };
            let mut rows: Vec<(String, &_)> = cv_folds
                .iter()
                .enumerate()
                .map(|(k, r)| (format!("{name} fold {k}"), r))
                .collect();
            rows.push((name, &pooled));
            if let Some(path) = report_path {
                report::reports_csv(&path, &rows)?;
            }
            print!("{}", report::reports_table(&rows));
        }
        Command::Study {
            sizes,
            config,
            n_train,
            n_test,
            size,
            noise,
            seed,
            report: report_path,
        } => {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(C4Error::Usage(
                    "--sizes needs positive cascade depths".into(),
                ));
            }
            let cfg = run_config(config.as_deref())?;
            let spec = MondrianSpec {
                height: size,
                width: size,
                noise_std: noise,
                ..Default::default()
            };
            let train_set = synthesize_dataset(&spec, n_train, seed)?;
            let test_set = synthesize_dataset(&spec, n_test, seed ^ 0x5eed_7e57)?;
            let study = StudyConfig {
                net: cfg.net,
                train: cfg.train,
                augment: cfg.augment,
                init_seed: seed,
            };
            let rows = sizes
                .par_iter()
                .map(|&l| {
                    eprintln!("training a {l}-stage cascade");
                    cascade_size_study(&[l], &train_set, &test_set, &study).map(|mut r| r.remove(0))
                })
                .collect::<c4_core::Result<Vec<_>>>()?;
            if let Some(path) = report_path {
                report::study_csv(&path, &rows)?;
            }
            print!("{}", report::study_table(&rows));
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = std::env::var("C4_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // Fails only if a pool already exists, in which case that pool is used.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("c4: {e}");
            e.exit_code()
        }
    }
}
