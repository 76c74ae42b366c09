use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use detcam::data::{self, Dataset};
use detcam::gradcam::{self, PerturbSpec};
use detcam::harness::{self, DatasetInfo, Environment, RunManifest};
use detcam::train::{self, TrainConfig};
use detcam::weights;
use detcam::zoo::{ModelKind, SeedSet};
use detcam::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Deterministic CNN training, Grad-CAM explanations and run comparison.
#[derive(Parser)]
#[command(name = "detcam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Grad-CAM overlay of one image.
    Explain(ExplainArgs),
    /// Print the prediction table of an image, and rank shifts against a second one.
    Predict(PredictArgs),
    /// Compare the weights and outputs of two runs.
    Compare(CompareArgs),
    /// Crop or fill a rectangle of an image.
    Perturb(PerturbArgs),
    /// Print the weight fingerprint of a run.
    Fingerprint(FingerprintArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "DET_MODEL", default_value = "convnet")]
    model: ModelKind,
    /// Dataset root with one sub-directory of PPM files per class.
    #[arg(long, env = "DET_DATA", conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Validation root; defaults to `<data>/val` when `<data>/train` exists.
    #[arg(long, env = "DET_VAL_DATA", requires = "data")]
    val_data: Option<PathBuf>,
    /// Use N synthetic training images and N/2 validation images.
    #[arg(long, env = "DET_SYNTH")]
    synth: Option<usize>,
    #[arg(long, env = "DET_PDIM", default_value_t = 180)]
    pdim: usize,
    #[arg(long, env = "DET_EPOCHS", default_value_t = 10)]
    epochs: usize,
    #[arg(long, env = "DET_BATCH", default_value_t = 32)]
    batch: usize,
    #[arg(long, env = "DET_LR", default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, env = "DET_RHO", default_value_t = 0.9)]
    rho: f32,
    #[arg(long, env = "DET_EPSILON", default_value_t = 1e-7)]
    epsilon: f32,
    /// Global seed: shuffling, synthetic data and unseeded initializers.
    #[arg(long, env = "DET_SEED", default_value_t = 1001)]
    seed: u64,
    #[arg(long, env = "DET_KERNEL_SEED", default_value_t = 1)]
    kernel_seed: u64,
    #[arg(long, env = "DET_POINTWISE_SEED", default_value_t = 2)]
    pointwise_seed: u64,
    #[arg(long, env = "DET_DROPOUT_SEED", default_value_t = 7001)]
    dropout_seed: u64,
    #[arg(long, env = "DET_AUG_SEED", default_value_t = 1)]
    aug_seed: u64,
    #[arg(long, env = "DET_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 1)]
    class: usize,
    /// Target layer id, or LAST for the last convolutional layer.
    #[arg(long, default_value = "LAST")]
    layer: String,
    #[arg(long, default_value_t = 0.4)]
    alpha: f32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cam_txt: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Second image, typically a perturbed copy; prints a rank-shift report.
    #[arg(long)]
    against: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    run_a: PathBuf,
    #[arg(long)]
    run_b: PathBuf,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = harness::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    image: PathBuf,
    /// x0,y0,x1,y1 (half-open): remove these rows and/or columns.
    #[arg(long, value_delimiter = ',', conflicts_with = "fill", required_unless_present = "fill")]
    crop: Option<Vec<usize>>,
    /// x0,y0,x1,y1,r,g,b: paint the rectangle.
    #[arg(long, value_delimiter = ',')]
    fill: Option<Vec<f32>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FingerprintArgs {
    #[arg(long)]
    run: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return EXIT_CONFIG;
    };
    match e.root() {
        Error::NumericAbort { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::InvalidArgument(_)
        | Error::ArchitectureMismatch(_)
        | Error::InvalidShape { .. }
        | Error::ChannelMismatch { .. }
        | Error::UnknownNode(_)
        | Error::InvalidGraph(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn datasets(a: &TrainArgs) -> anyhow::Result<(String, Dataset, Dataset)> {
    if let Some(n) = a.synth {
        let tr = data::synth_blobs(n, a.pdim, a.seed)?;
        let va = data::synth_blobs_split((n / 2).max(2), a.pdim, a.seed, "val")?;
        return Ok((format!("synth:{n}"), tr, va));
    }
    let Some(root) = &a.data else {
        return Err(Error::InvalidArgument("one of --data or --synth is required".into()).into());
    };
    if !root.is_dir() {
        return Err(Error::Dataset(format!("data directory {} does not exist", root.display())).into());
    }
    let (tr_dir, va_dir) = match &a.val_data {
        Some(v) => (root.clone(), v.clone()),
        None if root.join("train").is_dir() && root.join("val").is_dir() => (root.join("train"), root.join("val")),
        None => {
            return Err(Error::InvalidArgument(format!(
                "{} has no train/ and val/ sub-directories; pass --val-data",
                root.display()
            ))
            .into())
        }
    };
    let tr = data::load_dataset(&tr_dir, a.pdim)?;
    let va = data::load_dataset(&va_dir, a.pdim)?;
    Ok((root.display().to_string(), tr, va))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        rho: a.rho,
        epsilon: a.epsilon,
        seed: a.seed,
        threads: a.threads,
    };
    cfg.validate()?;
    let seeds = SeedSet {
        global: a.seed,
        kernel: a.kernel_seed,
        pointwise: a.pointwise_seed,
        dropout: a.dropout_seed,
        augmentation: a.aug_seed,
    };
    let mut g = a.model.build(a.pdim, &seeds)?;
    let (source, tr, va) = datasets(&a)?;
    let outcome = train::train(&mut g, &tr, &va, &cfg)?;
    let manifest = RunManifest {
        engine_version: harness::ENGINE_VERSION.into(),
        model: a.model,
        pdim: a.pdim,
        seeds,
        train_config: cfg.clone(),
        dataset: DatasetInfo::new(source, &tr, &va),
        environment: Environment::capture(cfg.threads),
        trainable_params: g.count_trainable(),
        non_trainable_params: g.count_non_trainable(),
        epochs: outcome.records,
        fingerprint: harness::fingerprint(&g),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    harness::write_run(&a.out, &g, &manifest, Some(&outcome.optimizer))?;
    for r in &manifest.epochs {
        println!("{}", r.metrics_line());
    }
    println!("fingerprint {}", manifest.fingerprint);
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> anyhow::Result<()> {
    let run = harness::load_run(&a.run)?;
    let image = data::read_ppm(&a.image)?;
    let fitted = harness::fit_to_model(&run.graph, &image)?;
    let layer = (a.layer != "LAST").then_some(a.layer.as_str());
    let cam = gradcam::grad_cam(&run.graph, &fitted, layer, a.class)?;
    let overlay = gradcam::render_overlay(&image, &cam, a.alpha)?;
    data::write_ppm(&a.out, &overlay)?;
    if let Some(p) = &a.cam_txt {
        std::fs::write(p, cam.to_text()).with_context(|| p.display().to_string())?;
    }
    println!(
        "layer {} grid {}x{} class {} score {:.8}",
        cam.target_layer,
        cam.dims().0,
        cam.dims().1,
        cam.class_index,
        cam.class_score
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let run = harness::load_run(&a.run)?;
    let names = &run.manifest.dataset.class_names;
    let before = harness::prediction_table(&run.graph, &data::read_ppm(&a.image)?, names, 2)?;
    match &a.against {
        None => print!("{}", harness::format_prediction_table(&before)),
        Some(p) => {
            let after = harness::prediction_table(&run.graph, &data::read_ppm(p)?, names, 2)?;
            print!("{}", harness::format_rank_shifts(&harness::rank_shifts(&before, &after)));
        }
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> anyhow::Result<()> {
    let ra = harness::load_run(&a.run_a)?;
    let rb = harness::load_run(&a.run_b)?;
    let image = a.image.as_deref().map(data::read_ppm).transpose()?;
    let report = harness::compare_runs(&ra, &rb, image.as_ref(), a.tolerance)?;
    if a.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_perturb(a: PerturbArgs) -> anyhow::Result<()> {
    let spec = match (&a.crop, &a.fill) {
        (Some(c), _) => {
            let rect: [usize; 4] = c[..]
                .try_into()
                .map_err(|_| Error::InvalidArgument("--crop takes x0,y0,x1,y1".into()))?;
            PerturbSpec::CropRect { rect }
        }
        (None, Some(f)) => {
            if f.len() != 7 {
                return Err(Error::InvalidArgument("--fill takes x0,y0,x1,y1,r,g,b".into()).into());
            }
            if f[..4].iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
                return Err(Error::InvalidArgument("fill rectangle must be non-negative integers".into()).into());
            }
            PerturbSpec::FillRect {
                rect: [f[0] as usize, f[1] as usize, f[2] as usize, f[3] as usize],
                fill: [f[4], f[5], f[6]],
            }
        }
        (None, None) => unreachable!("clap requires --crop or --fill"),
    };
    let image = data::read_ppm(&a.image)?;
    data::write_ppm(&a.out, &gradcam::perturb(&image, &spec)?)?;
    Ok(())
}

fn cmd_fingerprint(a: FingerprintArgs) -> anyhow::Result<()> {
    let path: &Path = &a.run.join(harness::WEIGHTS_FILE);
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    weights::decode(&bytes).with_context(|| path.display().to_string())?;
    println!("{}", weights::file_fingerprint(&bytes).expect("decoded file has a digest"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Fingerprint(a) => cmd_fingerprint(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // engine errors already embed their sources in the message
            let mut msg = String::new();
            for c in e.chain() {
                let c = c.to_string();
                if !msg.contains(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
