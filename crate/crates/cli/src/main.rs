//! `air`: dataset synthesis, adversarial training, registration and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or validation error,
//! 3 numerical failure.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use air_core::evaluator::{
    emit_overlay, emit_triptych, evaluate, iterative_register, write_report, RefineOptions, Scorer,
};
use air_core::geometry::{PerturbationRange, RigidParams2D};
use air_core::resampler::warp;
use air_core::synthdata::{
    load_volume, make_dataset, DataError, Dataset, DatasetParams, ImagePair, Split, MANIFEST_FILE,
};
use air_core::trainer::{load_checkpoint, train, CheckpointError, TrainError, TrainState};

use config::RunConfig;

/// Latency gate for a single generator pass, in milliseconds.
const LATENCY_GATE_MS: f64 = 250.0;
const OVERLAY_CASES: usize = 3;

#[derive(Parser, Debug)]
#[command(name = "air", version, about = "Adversarial rigid image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of aligned two-modality pairs.
    Synth(SynthArgs),
    /// Train generator and critic adversarially.
    Train(TrainArgs),
    /// Register one moving volume to a fixed volume.
    Register(RegisterArgs),
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of pairs (at least 6 for the 5:1 split).
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Channels per modality.
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long = "spacing-mm", default_value_t = 1.0)]
    spacing_mm: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration JSON; relative paths inside resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory [config: data].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and log [config: out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded, in-order execution (the only mode; accepted for scripts).
    #[arg(long)]
    deterministic: bool,
    /// [default: 1]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rate [default: 5e-5]
    #[arg(long)]
    lr: Option<f64>,
    /// Generator learning rate [default: same as --lr]
    #[arg(long = "generator-lr")]
    generator_lr: Option<f64>,
    /// Weight of the parameter term of the generator loss [default: 1.0]
    #[arg(long)]
    alpha: Option<f64>,
    /// Critic weight clipping bound [default: 0.01]
    #[arg(long = "clip-c")]
    clip_c: Option<f64>,
    /// Critic updates per generator update [default: 2]
    #[arg(long = "n-critic")]
    n_critic: Option<usize>,
    /// [default: 8]
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Convolution width of both networks [default: 128]
    #[arg(long = "base-filters")]
    base_filters: Option<usize>,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fixed `.airvol` volume.
    #[arg(long)]
    fixed: PathBuf,
    /// Moving `.airvol` volume.
    #[arg(long)]
    moving: PathBuf,
    /// Initial transform "theta_rad,tx,ty" in normalized units.
    #[arg(long, default_value = "0,0,0")]
    init: String,
    /// Maximum generator passes.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Convergence threshold on the critic score improvement.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long = "spacing-mm", default_value_t = 1.0)]
    spacing_mm: f64,
    /// Directory for before/after overlay images.
    #[arg(long = "overlay-out")]
    overlay_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Seed of the initial misalignments.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Maximum generator passes per pair.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Convergence threshold on the critic score improvement.
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Accepted for scripts; evaluation is always single-threaded.
    #[arg(long)]
    deterministic: bool,
}

/// Failure with its exit code.
#[derive(Debug)]
enum Failure {
    Io(String),
    Usage(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::Usage(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Io(m) | Self::Usage(m) | Self::Numerical(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => Self::Io(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(CheckpointError::Io { .. }) => Self::Io(e.to_string()),
            TrainError::NonFinite { .. } => Self::Numerical(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<air_core::tensor::TensorError> for Failure {
    fn from(e: air_core::tensor::TensorError) -> Self {
        Self::Usage(e.to_string())
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Register(a) => cmd_register(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let params = DatasetParams {
        n: a.n,
        seed: a.seed,
        size: a.size,
        channels: a.channels,
        spacing_mm: a.spacing_mm,
    };
    let d = make_dataset(&params, &a.out)?;
    println!(
        "wrote {} pairs ({} train / {} validation) to {}",
        params.n,
        d.ids(Split::Train).len(),
        d.ids(Split::Validation).len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut run = match &a.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    let t = &mut run.train;
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { t.$field = v; } )* };
    }
    set!(
        epochs,
        seed,
        lr,
        alpha,
        clip_c,
        n_critic,
        batch_size,
        base_filters
    );
    if a.generator_lr.is_some() {
        t.generator_lr = a.generator_lr;
    }
    run.deterministic |= a.deterministic;
    let data_dir = a.data.or(run.data.clone()).ok_or_else(|| {
        Failure::Usage("no dataset: pass --data or set \"data\" in the config".into())
    })?;
    let out = a.out.or(run.out.clone()).ok_or_else(|| {
        Failure::Usage("no output directory: pass --out or set \"out\" in the config".into())
    })?;
    if !data_dir.join(MANIFEST_FILE).is_file() {
        match &run.dataset {
            Some(params) => {
                make_dataset(params, &data_dir)?;
            }
            None => {
                return Err(Failure::Usage(format!(
                    "no dataset at {} (missing {MANIFEST_FILE})",
                    data_dir.display()
                )))
            }
        }
    }
    let data = Dataset::open(&data_dir)?;
    // Translation ranges are physical; follow the dataset's grid.
    run.train.perturb.pixel_spacing_mm = data.manifest.params.spacing_mm;
    run.train.perturb.image_size_px = data.manifest.params.size;
    run.train.validate()?;

    fs::create_dir_all(&out).map_err(io_failure(&out))?;
    let log_path = out.join("train.log");
    let mut log = fs::File::create(&log_path).map_err(io_failure(&log_path))?;
    let echo = serde_json::to_string(&run.train).expect("config serializes");
    let header = format!(
        "config {echo}\ndata {}\ndeterministic {}\n",
        data_dir.display(),
        run.deterministic
    );
    eprint!("{header}");
    log.write_all(header.as_bytes())
        .map_err(io_failure(&log_path))?;

    let mut log_err = None;
    let outcome = train(run.train.clone(), &data, &out, |row| {
        if let (Some(t), Some(s)) = (row.val_tre_mm, row.val_dscore) {
            let line = format!(
                "iter {} d_loss {:.5} g_loss {:.5} val_tre_mm {t:.3} val_dscore {s:.4}\n",
                row.iter, row.d_loss, row.g_loss
            );
            eprint!("{line}");
            if let Err(e) = log.write_all(line.as_bytes()) {
                log_err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = log_err {
        return Err(io_failure(&log_path)(e));
    }
    let outcome = outcome?;
    println!(
        "trained {} iterations over {} epochs; checkpoint {}",
        outcome.state.iteration,
        outcome.state.epoch,
        out.join(air_core::trainer::FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<TrainState, Failure> {
    load_checkpoint(path).map_err(|e| Failure::Usage(format!("bad checkpoint: {e}")))
}

fn parse_init(text: &str) -> Result<RigidParams2D, Failure> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("--init {text:?}: {e}")))?;
    match parts.as_slice() {
        &[theta, tx, ty] if parts.iter().all(|v| v.is_finite()) => {
            Ok(RigidParams2D::new(theta, tx, ty))
        }
        _ => Err(Failure::Usage(format!(
            "--init {text:?}: expected \"theta,tx,ty\""
        ))),
    }
}

fn cmd_register(a: RegisterArgs) -> CmdResult {
    let state = read_checkpoint(&a.checkpoint)?;
    let init = parse_init(&a.init)?;
    if a.iters == 0 {
        return Err(Failure::Usage("--iters must be at least 1".into()));
    }
    let pair = ImagePair {
        id: "register".into(),
        fixed: load_volume(&a.fixed)?,
        moving: load_volume(&a.moving)?,
        pixel_spacing_mm: a.spacing_mm,
        gt_transform: RigidParams2D::IDENTITY,
    };
    if pair.fixed.shape() != pair.moving.shape() {
        return Err(Failure::Usage(format!(
            "fixed {:?} and moving {:?} differ in shape",
            pair.fixed.shape(),
            pair.moving.shape()
        )));
    }
    let opts = RefineOptions {
        max_iters: a.iters,
        eps: a.eps,
    };
    let start = Instant::now();
    let result = iterative_register(&state.g, &state.d, &pair, init, opts)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let t = result.estimated_t;
    let out = serde_json::json!({
        "theta_rad": t.theta,
        "tx": t.tx,
        "ty": t.ty,
        "dscore": result.dscore_after,
        "iterations": result.iterations,
        "ms": ms,
    });
    println!("{out}");
    if let Some(dir) = a.overlay_out {
        fs::create_dir_all(&dir).map_err(io_failure(&dir))?;
        let before = dir.join("before.ppm");
        emit_overlay(&pair, init, result.dscore_before, &before).map_err(io_failure(&before))?;
        let after = dir.join("after.ppm");
        emit_overlay(&pair, init.compose(t), result.dscore_after, &after)
            .map_err(io_failure(&after))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let state = read_checkpoint(&a.checkpoint)?;
    if a.iters == 0 {
        return Err(Failure::Usage("--iters must be at least 1".into()));
    }
    if !a.data.join(MANIFEST_FILE).is_file() {
        return Err(Failure::Usage(format!(
            "no dataset at {}",
            a.data.display()
        )));
    }
    let data = Dataset::open(&a.data)?;
    let pairs = data.load_split(Split::Validation)?;
    if pairs.is_empty() {
        return Err(Failure::Usage("validation split is empty".into()));
    }
    let perturb = PerturbationRange {
        pixel_spacing_mm: data.manifest.params.spacing_mm,
        image_size_px: data.manifest.params.size,
        ..state.config.perturb
    };
    let opts = RefineOptions {
        max_iters: a.iters,
        eps: a.eps,
    };
    let report = evaluate(&state.g, &state.d, &pairs, &perturb, a.seed, opts)?;
    let (csv, json) = write_report(&report, &a.out).map_err(io_failure(&a.out))?;
    // Re-write the summary with the latency gate recorded alongside.
    let mut summary = serde_json::to_value(&report.summary).expect("summary serializes");
    summary["latency_gate_ms"] = LATENCY_GATE_MS.into();
    summary["latency_within_gate"] = (report.summary.latency_ms_max < LATENCY_GATE_MS).into();
    fs::write(
        &json,
        serde_json::to_string_pretty(&summary).expect("json") + "\n",
    )
    .map_err(io_failure(&json))?;
    if report.summary.latency_ms_max >= LATENCY_GATE_MS {
        eprintln!(
            "warning: slowest generator pass took {:.1} ms (gate {LATENCY_GATE_MS} ms)",
            report.summary.latency_ms_max
        );
    }

    let overlay_dir = a.out.join("overlays");
    for (pair, r) in pairs.iter().zip(&report.results).take(OVERLAY_CASES) {
        let gt_score = state
            .d
            .score(&pair.fixed, &warp(&pair.moving, pair.gt_transform)?)?
            as f64;
        emit_triptych(
            pair,
            r.initial_t,
            r.estimated_t,
            [r.dscore_before, r.dscore_after, gt_score],
            &overlay_dir,
        )
        .map_err(io_failure(&overlay_dir))?;
    }
    let s = &report.summary;
    println!(
        "{} pairs: TRE {:.3} -> {:.3} mm, D-score {:.4} -> {:.4}, spearman {:.3}; wrote {} and {}",
        s.n,
        s.mean_tre_before_mm,
        s.mean_tre_after_mm,
        s.mean_dscore_before,
        s.mean_dscore_after,
        s.spearman_dscore_vs_neg_tre,
        csv.display(),
        json.display()
    );
    Ok(())
}
