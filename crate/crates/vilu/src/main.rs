use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vilu::checkpoint;
use vilu::config::RunConfig;
use vilu::dataset::{self, manifest_path, ManifestEntry};
use vilu::eval::{self, Predictions};
use vilu::nrrd::{self, Encoding};
use vilu::{gradcheck, overlay, run, Error, Result};
use vilu_core::data::{preprocess, respace, respace_labels, synth_dataset, Sample, SynthConfig};
use vilu_core::net::NetworkConfig;

/// ViLU-Net segmentation: synthetic data, preprocessing, training, scoring.
///
/// Exit status: 0 success, 2 usage error, 3 data error, 4 numeric failure.
/// VILU_THREADS caps the worker pool used for per-case file work.
#[derive(Parser)]
#[command(name = "vilu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration ({"network": .., "train": .., "metrics": ..}).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` overrides, applied after --config in order
    /// (last wins).
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of NRRD image/label pairs and a manifest.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        cases: usize,
        /// Extents, axis 0 first, e.g. 64,64 or 32,32,16.
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Voxel spacing in mm per axis (default 1 mm).
        #[arg(long, value_delimiter = ',')]
        spacing: Option<Vec<f64>>,
        #[arg(long, default_value = "raw")]
        encoding: Encoding,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clip, normalise and respace every case of a manifest.
    Preprocess {
        /// Manifest file or the directory holding manifest.json.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target spacing in mm: one value for every axis or one per axis.
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        spacing: Vec<f64>,
        #[arg(long, default_value = "raw")]
        encoding: Encoding,
    },
    /// Train on the manifest's train split, validating on its val split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (its configuration is the base).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Shorthand for train.epochs=N, applied before KEY=VALUE overrides.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions against a manifest's labels.
    Eval {
        /// Reference manifest (or its directory).
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Directory of predicted label files named like the reference ones.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        pred: Option<PathBuf>,
        /// Predict with this checkpoint instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score over this many classes (default: every class present).
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of the network gradient in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        /// Side of the square probe image.
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write PNG slices of images with their label maps blended on top.
    Overlay {
        #[arg(long)]
        manifest: PathBuf,
        /// Use label files from this directory instead of the references.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Slice indices along axis 2 (default: middle slice).
        #[arg(long, value_delimiter = ',')]
        slices: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn synth(seed: u64, cases: usize, shape: Vec<usize>, classes: usize, spacing: Option<Vec<f64>>, encoding: Encoding, out: &Path) -> Result<()> {
    if classes < 2 {
        return Err(Error::Usage(format!("--classes must be >= 2, got {classes}")));
    }
    if cases == 0 {
        return Err(Error::Usage("--cases must be >= 1".into()));
    }
    let spacing = spacing.unwrap_or_else(|| vec![1.0; shape.len()]);
    let cfg = SynthConfig {
        seed,
        n_cases: cases,
        shape,
        num_classes: classes,
        spacing,
        ..Default::default()
    };
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let samples = synth_dataset(&cfg)?;
    dataset::write_samples(out, &samples, encoding, &[])?;
    println!("wrote {cases} cases to {}", out.display());
    Ok(())
}

fn preprocess_cmd(input: &Path, out: &Path, spacing: &[f64], encoding: Encoding) -> Result<()> {
    let manifest = manifest_path(input);
    let entries = dataset::read_manifest(&manifest)?;
    let samples = dataset::load_samples(&manifest, None)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut processed = Vec::with_capacity(samples.len());
    for (s, e) in samples.iter().zip(&entries) {
        let target = match spacing.len() {
            1 => vec![spacing[0]; s.image.geometry.rank()],
            n if n == s.image.geometry.rank() => spacing.to_vec(),
            n => {
                return Err(Error::Usage(format!(
                    "--spacing has {n} values, case {} has {} axes",
                    s.case_id,
                    s.image.geometry.rank()
                )))
            }
        };
        // Images this command wrote before are only respaced.
        let normalized = nrrd::read_nrrd(&base.join(&e.image_path))?.key_value(nrrd::INTENSITY_KEY) == Some(nrrd::NORMALIZED);
        let result = if normalized {
            respace(&s.image, &target).and_then(|image| {
                let label = respace_labels(&s.label, &target)?;
                Sample::new(image, label, s.case_id.clone(), s.split)
            })
        } else {
            preprocess(s, &target)
        };
        processed.push(result.map_err(|err| Error::format(&manifest, format!("{}: {err}", s.case_id)))?);
    }
    let written = dataset::write_samples(out, &processed, encoding, &[(nrrd::INTENSITY_KEY, nrrd::NORMALIZED)])?;
    println!("preprocessed {} cases into {}", written.len(), out.display());
    Ok(())
}

fn train_cmd(manifest: &Path, out: &Path, resume: Option<&Path>, epochs: Option<usize>, cfg: &ConfigArgs) -> Result<()> {
    let base = match resume {
        Some(p) => {
            let h = checkpoint::read_header(p)?;
            RunConfig {
                network: h.network,
                train: h.train,
                ..Default::default()
            }
        }
        None => RunConfig::default(),
    };
    let mut overrides: Vec<String> = epochs.map(|e| format!("train.epochs={e}")).into_iter().collect();
    overrides.extend(cfg.overrides.iter().cloned());
    let run_cfg = RunConfig::resolve(base, cfg.config.as_deref(), &overrides)?;
    let s = run::train(&run_cfg, &manifest_path(manifest), out, resume)?;
    println!(
        "trained {} steps over {} epochs; best val DSC {}; checkpoint {}; log {}",
        s.steps,
        s.epochs,
        s.best_val_dsc.map_or("n/a".into(), |d| format!("{d:.4}")),
        s.last_checkpoint.display(),
        s.log.display()
    );
    Ok(())
}

fn eval_cmd(reference: &Path, pred: Option<&Path>, ckpt: Option<&Path>, classes: Option<usize>, out: &Path, cfg: &ConfigArgs) -> Result<()> {
    let run_cfg = RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
    let manifest = manifest_path(reference);
    let preds = match (pred, ckpt) {
        (Some(d), None) => Predictions::Dir(d),
        (None, Some(c)) => Predictions::Checkpoint(c),
        _ => return Err(Error::Usage("exactly one of --pred and --checkpoint is required".into())),
    };
    let r = eval::evaluate(&manifest, preds, classes, &run_cfg.metrics, out)?;
    let m = &r.aggregate.mean;
    println!(
        "{} cases: DSC {:.4} IoU {:.4} NSD {:.4} HD {:.3} HD95 {:.3}; table {}",
        r.cases.len(),
        m.dsc,
        m.iou,
        m.nsd,
        m.hd,
        m.hd95,
        r.csv.display()
    );
    Ok(())
}

fn gradcheck_cmd(seed: u64, probes: usize, size: usize, cfg: &ConfigArgs) -> Result<()> {
    let base = RunConfig {
        network: NetworkConfig::tiny(),
        ..Default::default()
    };
    let run_cfg = RunConfig::resolve(base, cfg.config.as_deref(), &cfg.overrides)?;
    if probes == 0 {
        return Err(Error::Usage("--probes must be >= 1".into()));
    }
    let outcomes = gradcheck::run_suite(&run_cfg.network, seed, probes, size)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        println!("{} {}", if o.passed() { "ok  " } else { "FAIL" }, o.summary());
        if !o.passed() {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")))
    }
}

fn overlay_cmd(manifest: &Path, pred: Option<&Path>, slices: Option<&[usize]>, out: &Path) -> Result<()> {
    let manifest = manifest_path(manifest);
    let entries: Vec<ManifestEntry> = dataset::read_manifest(&manifest)?;
    let samples = dataset::load_samples(&manifest, None)?;
    dataset::create_dir(out)?;
    let mut n = 0;
    for (s, e) in samples.iter().zip(&entries) {
        let labels = match pred {
            Some(dir) => {
                let name = Path::new(&e.label_path).file_name().expect("label path has a file name");
                dataset::with_class_count(nrrd::read_labels(&dir.join(name), 256)?, 2)
            }
            None => s.label.clone(),
        };
        let count = overlay::slice_count(s.image.shape());
        let wanted: Vec<usize> = slices.map(<[usize]>::to_vec).unwrap_or_else(|| vec![count / 2]);
        for z in wanted {
            let img = overlay::render(&s.image, Some(&labels), z)?;
            overlay::write_png(&out.join(format!("{}_slice{z:03}.png", s.case_id)), &img)?;
            n += 1;
        }
    }
    println!("wrote {n} overlays to {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    vilu::init_threads()?;
    match cli.command {
        Command::Synth {
            seed,
            cases,
            shape,
            classes,
            spacing,
            encoding,
            out,
        } => synth(seed, cases, shape, classes, spacing, encoding, &out),
        Command::Preprocess {
            input,
            out,
            spacing,
            encoding,
        } => preprocess_cmd(&input, &out, &spacing, encoding),
        Command::Train {
            manifest,
            out,
            resume,
            epochs,
            cfg,
        } => train_cmd(&manifest, &out, resume.as_deref(), epochs, &cfg),
        Command::Eval {
            reference,
            pred,
            checkpoint,
            classes,
            out,
            cfg,
        } => eval_cmd(&reference, pred.as_deref(), checkpoint.as_deref(), classes, &out, &cfg),
        Command::Gradcheck { seed, probes, size, cfg } => gradcheck_cmd(seed, probes, size, &cfg),
        Command::Overlay {
            manifest,
            pred,
            slices,
            out,
        } => overlay_cmd(&manifest, pred.as_deref(), slices.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
