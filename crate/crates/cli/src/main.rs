use std::collections::hash_map::RandomState;
use std::hash::BuildHasher;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nightlift::detector::{ApMode, Detector, TinyDetector};
use nightlift::io::{list_images, read_image, write_atomic, write_image};
use nightlift::kpn::KpnModel;
use nightlift::manifest::read_manifest;
use nightlift::pipeline::{
    check_kpn_compat, contrast_enhance, eval_map, infer_night, load_samples, train_detector, write_report,
    write_results, ContrastMode, KpnTrainer, TrainConfig, TrainState,
};
use nightlift::rng::sub_seed;
use nightlift::stylemix::{generate_pair, FileStylizer, StatsStylizer, StylePool, Stylizer};
use nightlift::toy::{generate, ToyConfig};
use nightlift::{Error, ErrorKind, Image};

/// Night-to-day image translation for object detection.
#[derive(Parser)]
#[command(name = "nightlift", version)]
struct Cli {
    /// Seed for every random choice. Picked at random and printed when absent.
    #[arg(long, global = true, env = "NIGHTLIFT_SEED")]
    seed: Option<u64>,

    /// Training configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic day/night detection dataset.
    MakeToyData(MakeToyData),
    /// Render pairs of mixed night images for day images.
    Stylemix(StyleMix),
    /// Train the daytime detector.
    TrainDetector(TrainDetector),
    /// Train the kernel prediction network against a frozen detector.
    TrainKpn(TrainKpn),
    /// Translate night images to day.
    Translate(Translate),
    /// Translate (optionally) and detect, writing a prediction dump.
    Detect(Detect),
    /// Score a prediction dump against a ground-truth manifest.
    EvalMap(EvalMap),
    /// Run the built-in invariant checks.
    Selfcheck,
}

#[derive(Args)]
struct MakeToyData {
    #[arg(long)]
    out: PathBuf,
    /// Day training scenes; the test split gets a quarter as many.
    #[arg(long, default_value_t = 200)]
    n_images: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    exposure: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct StyleMix {
    /// Day image manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of night style references.
    #[arg(long)]
    styles: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only the first N images of the manifest.
    #[arg(long)]
    count: Option<usize>,
    /// Use precomputed stylizations `<content>__<style>.png` from this directory.
    #[arg(long)]
    styled_dir: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    /// Independent mixing coefficients for every pixel.
    #[arg(long)]
    per_pixel: bool,
}

#[derive(Args)]
struct TrainDetector {
    /// Day training manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainKpn {
    /// Day training manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    styles: PathBuf,
    /// Detector checkpoint; required when lambda > 0.
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a training-state checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many steps in total.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    styled_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ContrastArgs {
    /// Brighten dark regions before translation.
    #[arg(long)]
    contrast: bool,
    #[arg(long)]
    contrast_threshold: Option<f64>,
    #[arg(long)]
    contrast_gain: Option<f64>,
    /// Use a gamma curve instead of the two-segment linear map.
    #[arg(long)]
    contrast_gamma: bool,
}

#[derive(Args)]
struct Translate {
    #[arg(long)]
    kpn: PathBuf,
    /// Image directory or manifest (.jsonl).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    contrast: ContrastArgs,
}

#[derive(Args)]
struct Detect {
    #[arg(long)]
    detector: PathBuf,
    /// Image directory or manifest (.jsonl).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Translate with this KPN before detecting.
    #[arg(long)]
    kpn: Option<PathBuf>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[command(flatten)]
    contrast: ContrastArgs,
}

#[derive(Args)]
struct EvalMap {
    /// Prediction dump (.jsonl).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth manifest.
    #[arg(long)]
    gt: PathBuf,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    eleven_point: bool,
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = RandomState::new().hash_one(std::time::SystemTime::now());
        eprintln!("seed: {s}");
        s
    })
}

/// Commands without randomness leave the seed alone instead of picking one.
fn load_config(cli: &Cli, seeded: bool) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if seeded {
        cfg.reseed(resolve_seed(cli.seed));
    }
    Ok(cfg)
}

fn apply_contrast(cfg: &mut TrainConfig, args: &ContrastArgs) {
    cfg.contrast.enabled |= args.contrast;
    if let Some(t) = args.contrast_threshold {
        cfg.contrast.threshold = t;
    }
    if let Some(g) = args.contrast_gain {
        cfg.contrast.gain = g;
    }
    if args.contrast_gamma {
        cfg.contrast.mode = ContrastMode::Gamma;
    }
}

/// Images from a directory or a manifest, with ids set.
fn read_inputs(input: &Path) -> Result<Vec<Image>> {
    let paths = if input.is_dir() {
        list_images(input)?
    } else {
        read_manifest(input)?.into_iter().map(|s| s.path).collect()
    };
    Ok(paths.iter().map(read_image).collect::<nightlift::Result<_>>()?)
}

fn load_kpn(path: &Path, cfg: &TrainConfig, strict: bool) -> Result<KpnModel> {
    let model = KpnModel::load(path)?;
    if strict {
        check_kpn_compat(&model, &cfg.kpn)?;
    }
    Ok(model)
}

fn make_dirs(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::MakeToyData(a) => {
            let mut toy = ToyConfig {
                n_images: a.n_images,
                size: a.size,
                seed: resolve_seed(cli.seed),
                ..Default::default()
            };
            if let Some(e) = a.exposure {
                toy.night.exposure = e;
            }
            if let Some(n) = a.noise {
                toy.night.noise = n;
            }
            let data = generate(&toy)?;
            data.write(&a.out)?;
            println!(
                "wrote {} train and {} test scenes, {} styles to {}",
                data.train.len(),
                data.test.len(),
                data.styles.len(),
                a.out.display()
            );
        }
        Command::Stylemix(a) => {
            let mut cfg = load_config(&cli, true)?;
            if let Some(alpha) = a.alpha {
                cfg.stylemix.alpha = alpha;
            }
            if let Some(p) = a.pool_size {
                cfg.stylemix.pool_size = p;
            }
            cfg.stylemix.per_pixel_coeffs |= a.per_pixel;
            cfg.validate()?;
            let pool = StylePool::from_dir(&a.styles)?;
            let stylizer: Box<dyn Stylizer> = match &a.styled_dir {
                Some(dir) => Box::new(FileStylizer::new(dir)),
                None => Box::new(StatsStylizer),
            };
            let mut samples = read_manifest(&a.manifest)?;
            if let Some(n) = a.count {
                samples.truncate(n);
            }
            make_dirs(&a.out)?;
            let mut plans = String::new();
            for (i, s) in samples.iter().enumerate() {
                let day = read_image(&s.path)?;
                let pair = generate_pair(&day, &cfg.stylemix, &pool, stylizer.as_ref(), sub_seed(cfg.seed, i as u64))?;
                write_image(&pair.mn1, a.out.join(format!("{}_mn1.png", s.id)))?;
                write_image(&pair.mn2, a.out.join(format!("{}_mn2.png", s.id)))?;
                let record = serde_json::json!({
                    "image_id": s.id,
                    "chains": [pair.plans[0].chains, pair.plans[1].chains],
                });
                plans.push_str(&record.to_string());
                plans.push('\n');
            }
            write_atomic(a.out.join("plans.jsonl"), plans.as_bytes())?;
            println!("wrote {} pairs to {}", samples.len(), a.out.display());
        }
        Command::TrainDetector(a) => {
            let mut cfg = load_config(&cli, true)?;
            if let Some(e) = a.epochs {
                cfg.det_epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.det_lr = lr;
            }
            cfg.validate()?;
            let data = load_samples(&read_manifest(&a.manifest)?)?;
            if data.is_empty() {
                return Err(Error::Data("detector training manifest is empty".into()).into());
            }
            let (det, report) = train_detector(&cfg, &data)?;
            make_dirs(&a.out.join("checkpoints"))?;
            make_dirs(&a.out.join("logs"))?;
            let ckpt = a.out.join("checkpoints/detector.ckpt");
            det.save(&ckpt)?;
            write_atomic(a.out.join("logs/detector.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
            let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!("detector saved to {} (final epoch loss {last:.4})", ckpt.display());
        }
        Command::TrainKpn(a) => {
            let mut cfg = load_config(&cli, true)?;
            if let Some(lr) = a.lr {
                cfg.kpn_lr = lr;
            }
            if let Some(l) = a.lambda {
                cfg.loss.lambda = l;
            }
            if let Some(e) = a.epochs {
                cfg.kpn_epochs = e;
            }
            if let Some(p) = a.pairs_per_epoch {
                cfg.pairs_per_epoch = p;
            }
            if a.steps.is_some() {
                cfg.max_steps = a.steps;
            }
            cfg.validate()?;
            let days = load_samples(&read_manifest(&a.manifest)?)?;
            let pool = StylePool::from_dir(&a.styles)?;
            let stylizer: Box<dyn Stylizer> = match &a.styled_dir {
                Some(dir) => Box::new(FileStylizer::new(dir)),
                None => Box::new(StatsStylizer),
            };
            let detector = match &a.detector {
                Some(path) => Some(TinyDetector::load(path)?),
                None => None,
            };
            let trainer = KpnTrainer::new(
                cfg.clone(),
                &days,
                &pool,
                stylizer.as_ref(),
                detector.as_ref().map(|d| d as &dyn Detector),
            )?;
            let mut state = match &a.resume {
                Some(path) => {
                    let s = TrainState::load(path)?;
                    check_kpn_compat(&s.model, &cfg.kpn)?;
                    s
                }
                None => {
                    let log = a.out.join("logs/train.jsonl");
                    if log.exists() {
                        std::fs::remove_file(&log).with_context(|| format!("removing {}", log.display()))?;
                    }
                    TrainState::new(KpnModel::new(cfg.kpn.clone())?)
                }
            };
            let total = trainer.total_steps();
            let summary = trainer.run(&mut state, Some(&a.out), |r| {
                if r.step % 10 == 0 || r.step + 1 == total {
                    eprintln!("step {:>5}/{total}  epoch {:>3}  loss {:.5}", r.step, r.epoch, r.loss.total);
                }
            })?;
            println!(
                "ran {} steps; KPN saved to {}",
                summary.steps_run,
                a.out.join("checkpoints/kpn.ckpt").display()
            );
        }
        Command::Translate(a) => {
            let mut cfg = load_config(&cli, false)?;
            apply_contrast(&mut cfg, &a.contrast);
            cfg.validate()?;
            let kpn = load_kpn(&a.kpn, &cfg, cli.config.is_some())?;
            let dir = a.out.join("translated");
            make_dirs(&dir)?;
            let images = read_inputs(&a.input)?;
            for (i, img) in images.iter().enumerate() {
                let id = img.meta.id.clone().unwrap_or_else(|| format!("{i:04}"));
                let out = kpn.translate_clamped(&contrast_enhance(img, &cfg.contrast)?)?;
                write_image(&out, dir.join(format!("{id}.png")))?;
            }
            println!("translated {} images into {}", images.len(), dir.display());
        }
        Command::Detect(a) => {
            let mut cfg = load_config(&cli, false)?;
            apply_contrast(&mut cfg, &a.contrast);
            if let Some(s) = a.score_threshold {
                cfg.detect.score_threshold = s;
            }
            cfg.validate()?;
            let det = TinyDetector::load(&a.detector)?;
            let kpn = match &a.kpn {
                Some(path) => load_kpn(path, &cfg, cli.config.is_some())?,
                None => KpnModel::identity(nightlift::kpn::KpnConfig {
                    channels: det.config().channels,
                    ..Default::default()
                })?,
            };
            let images = read_inputs(&a.input)?;
            let results = infer_night(&images, &kpn, &det, &cfg.contrast, &cfg.detect)?;
            let dump = write_results(&a.out, &results)?;
            println!("detections for {} images written to {}", results.len(), dump.display());
        }
        Command::EvalMap(a) => {
            let mut cfg = load_config(&cli, false)?;
            if let Some(t) = a.iou {
                cfg.eval.iou_threshold = t;
            }
            if a.eleven_point {
                cfg.eval.mode = ApMode::ElevenPoint;
            }
            cfg.validate()?;
            let report = eval_map(&a.pred, &a.gt, &cfg.eval)?;
            match &a.out {
                Some(path) => {
                    write_report(path, &report)?;
                    println!("mAP {:.4} (report in {})", report.map, path.display());
                }
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Selfcheck => {
            let report = nightlift::selfcheck::run();
            print!("{}", report.table());
            if !report.all_passed() {
                bail!(SelfCheckFailed);
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
struct SelfCheckFailed;

impl std::fmt::Display for SelfCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("self-check failed")
    }
}

impl std::error::Error for SelfCheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numeric) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
