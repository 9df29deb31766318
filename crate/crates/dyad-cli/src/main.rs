//! Command-line front end: train models, condition on observed streams,
//! evaluate per-timestep MSE, generate synthetic datasets, and inspect
//! checkpoints.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod eval;

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dyad::dataio::{
    self, class_histogram, load_dataset, synth_interactions, InteractionDataset, SynthConfig,
};
use dyad::numkit::Matrix;
use dyad::pipeline::{self, EarlyStop, TrainConfig};
use dyad::Error;

#[derive(Parser)]
#[command(
    name = "dyad",
    version,
    about = "Two-agent interaction dynamics: train, condition, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a labeled two-agent dataset.
    Train(TrainArgs),
    /// Predict agent 2's trajectory from an agent-1 stream.
    Condition(ConditionArgs),
    /// Score conditioned predictions against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic coupled-oscillator dataset.
    Synth(SynthArgs),
    /// Print a checkpoint's configuration and per-class summaries.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file (see the dataset text format in the library docs).
    #[arg(long)]
    data: PathBuf,
    /// Window length used to stack frames into model inputs.
    #[arg(long, default_value_t = 40)]
    window: usize,
    /// Expected number of classes; training fails if the dataset differs.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 10)]
    components: usize,
    #[arg(long, default_value_t = 5)]
    latent_dim: usize,
    #[arg(long, default_value_t = 1e-3)]
    kl_scale: f64,
    /// Posterior samples decoded per input.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    em_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    em_tol: f64,
    /// Prior covariance widening as a fraction of global latent variance.
    #[arg(long, default_value_t = 1e-2)]
    prior_reg: f64,
    /// Hidden layer widths, outermost first.
    #[arg(long, value_delimiter = ',', default_values_t = [250usize, 150])]
    hidden: Vec<usize>,
    /// Hold out a validation split and stop when it stalls.
    #[arg(long)]
    early_stop: bool,
    #[arg(long, default_value_t = 0.1)]
    holdout_frac: f64,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    /// Warm-start each refit from the previous epoch's mixture.
    #[arg(long)]
    warm_start_hsmm: bool,
    /// Refit mixtures from sampled latents instead of posterior means.
    #[arg(long)]
    hsmm_from_samples: bool,
    /// Copy agent 1's hidden layers into agent 2 at initialization.
    #[arg(long)]
    transfer_hidden: bool,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Training log CSV path.
    #[arg(long, default_value = "train_log.csv")]
    log: PathBuf,
    /// Stamp the checkpoint header with the current time (off by default
    /// so identical runs produce identical files).
    #[arg(long)]
    stamp: bool,
}

#[derive(Args)]
struct ConditionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Interaction class to condition.
    #[arg(long = "class")]
    class: String,
    /// Agent-1 frames: whitespace-separated rows, `#` comments, or `-`
    /// for stdin (streaming: one prediction per completed window).
    #[arg(long)]
    input: String,
    /// Output path for the predicted first-frame trajectory (`-` for
    /// stdout).
    #[arg(long)]
    out: String,
    /// Optional output path for the full predicted windows.
    #[arg(long)]
    out_windows: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test dataset in the dataset text format.
    #[arg(long)]
    data: PathBuf,
    /// Prefix for the emitted CSV files.
    #[arg(long, default_value = "eval")]
    out_prefix: String,
    /// Group coordinates into joints of this width for a per-joint table.
    #[arg(long)]
    coords_per_joint: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML config with keys classes, modes, demos, T, sigma, seed.
    /// Explicit flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    modes: Option<usize>,
    /// Demonstrations per class.
    #[arg(long)]
    demos: Option<usize>,
    /// Frames per demonstration.
    #[arg(long = "T")]
    len: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Condition(a) => cmd_condition(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotPositiveDefinite { .. }
        | Error::SingularMatrix(_)
        | Error::SingularBlock
        | Error::NonFiniteLoss { .. }
        | Error::DimensionMismatch { .. }
        | Error::ShapeMismatch(_) => 4,
        _ => 3,
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let demos = load_dataset(&a.data)?;
    let hist = class_histogram(&demos);
    if let Some(expected) = a.classes {
        if hist.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "dataset has {} classes, expected {expected}",
                hist.len()
            )));
        }
    }
    let dataset = InteractionDataset::from_raw(&demos, a.window)?;
    let config = TrainConfig {
        latent_dim: a.latent_dim,
        components: a.components,
        window: a.window,
        hidden: a.hidden,
        kl_scale: a.kl_scale,
        n_samples: a.samples,
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        seed: a.seed,
        em_iters: a.em_iters,
        em_tol: a.em_tol,
        prior_reg: a.prior_reg,
        hsmm_from_samples: a.hsmm_from_samples,
        warm_start_hsmm: a.warm_start_hsmm,
        transfer_hidden: a.transfer_hidden,
        early_stop: a.early_stop.then(|| EarlyStop {
            holdout_frac: a.holdout_frac,
            patience: a.patience,
        }),
    };
    for (class, count) in &hist {
        println!("class {class}: {count} demos");
    }
    let (mut model, log) = pipeline::train(&dataset, &config)?;
    if a.stamp {
        model.created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
    }
    pipeline::save(&model, &a.out)?;
    log.write_csv(&a.log)?;
    if let Some(last) = log.records.last() {
        println!(
            "trained {} epochs; final epoch recon {:.6}",
            last.epoch + 1,
            last.recon
        );
    }
    if let Some(e) = log.stopped_early_at {
        println!("early stop at epoch {e}");
    }
    println!("checkpoint: {}", a.out.display());
    println!("log: {}", a.log.display());
    Ok(())
}

/// Parses whitespace-separated frame rows with `#` comments.
fn parse_frames(text: &str, path: &str) -> Result<Matrix, Error> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(toks.len());
        for tok in toks {
            let v: f64 = tok.parse().map_err(|_| Error::ParseError {
                path: path.into(),
                line: idx + 1,
                msg: format!("bad number {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::ParseError {
                    path: path.into(),
                    line: idx + 1,
                    msg: format!("non-finite value {tok:?}"),
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::ParseError {
                    path: path.into(),
                    line: idx + 1,
                    msg: format!(
                        "expected {} values per frame, got {}",
                        first.len(),
                        row.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Matrix::from_rows(&rows))
}

fn format_row(row: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{v}"));
    }
    s
}

fn cmd_condition(a: ConditionArgs) -> Result<(), Error> {
    let model = pipeline::load(&a.checkpoint)?;
    let window = model.config.window;
    let d1 = model.vae.agent1.input_dim / window;
    let d2 = model.vae.agent2.input_dim / window;
    let mut conditioner = model.conditioner(&a.class)?;

    let mut out: Box<dyn Write> = if a.out == "-" {
        Box::new(std::io::stdout())
    } else {
        Box::new(std::fs::File::create(&a.out)?)
    };
    let mut predicted_windows: Vec<Vec<f64>> = Vec::new();
    let mut buffer: VecDeque<Vec<f64>> = VecDeque::with_capacity(window);

    let mut frames_in: Vec<Vec<f64>> = Vec::new();
    if a.input == "-" {
        let stdin = std::io::stdin();
        for line in stdin.lock().lines() {
            let line = line?;
            let text = match line.find('#') {
                Some(p) => line[..p].to_string(),
                None => line,
            };
            let toks: Vec<&str> = text.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            let frame = toks
                .iter()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::ParseError {
                        path: "<stdin>".into(),
                        line: 0,
                        msg: format!("bad number {t:?}"),
                    })
                })
                .collect::<Result<Vec<f64>, Error>>()?;
            // streaming: predict as soon as each window completes
            push_frame(
                frame,
                d1,
                d2,
                window,
                &mut buffer,
                &mut conditioner,
                &mut *out,
                &mut predicted_windows,
            )?;
        }
    } else {
        let text = std::fs::read_to_string(&a.input)?;
        let frames = parse_frames(&text, &a.input)?;
        if frames.rows() < window {
            return Err(Error::WindowTooLong {
                window,
                len: frames.rows(),
            });
        }
        for t in 0..frames.rows() {
            frames_in.push(frames.row(t).to_vec());
        }
        for frame in frames_in {
            push_frame(
                frame,
                d1,
                d2,
                window,
                &mut buffer,
                &mut conditioner,
                &mut *out,
                &mut predicted_windows,
            )?;
        }
    }

    if let Some(path) = &a.out_windows {
        let mut f = std::fs::File::create(path)?;
        for w in &predicted_windows {
            writeln!(f, "{}", format_row(w))?;
        }
    }
    eprintln!("{} predictions", predicted_windows.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn push_frame(
    frame: Vec<f64>,
    d1: usize,
    d2: usize,
    window: usize,
    buffer: &mut VecDeque<Vec<f64>>,
    conditioner: &mut pipeline::Conditioner,
    out: &mut dyn Write,
    predicted_windows: &mut Vec<Vec<f64>>,
) -> Result<(), Error> {
    if frame.len() != d1 {
        return Err(Error::DimensionMismatch {
            expected: d1,
            got: frame.len(),
            context: "agent-1 frame width",
        });
    }
    buffer.push_back(frame);
    if buffer.len() > window {
        buffer.pop_front();
    }
    if buffer.len() == window {
        let mut w = Vec::with_capacity(window * d1);
        for f in buffer.iter() {
            w.extend_from_slice(f);
        }
        let pred = conditioner.push(&w)?;
        writeln!(out, "{}", format_row(&pred[..d2]))?;
        out.flush()?;
        predicted_windows.push(pred);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let model = pipeline::load(&a.checkpoint)?;
    let demos = load_dataset(&a.data)?;
    let reports = eval::eval_model(&model, &demos, a.coords_per_joint)?;
    for r in &reports {
        println!(
            "class {}: frame MSE {:.6} +- {:.6} over {} demos / {} frames (raw units^2)",
            r.class, r.mse_mean, r.mse_std, r.demos, r.frames
        );
    }
    let prefix = &a.out_prefix;
    std::fs::write(format!("{prefix}_summary.csv"), eval::summary_csv(&reports))?;
    std::fs::write(format!("{prefix}_curve.csv"), eval::curve_csv(&reports))?;
    std::fs::write(format!("{prefix}_coords.csv"), eval::coords_csv(&reports))?;
    if let Some(j) = eval::joints_csv(&reports) {
        std::fs::write(format!("{prefix}_joints.csv"), j)?;
    }
    println!("wrote {prefix}_summary.csv, {prefix}_curve.csv, {prefix}_coords.csv");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    let mut cfg = match &a.config {
        Some(path) => SynthConfig::from_toml_str(&std::fs::read_to_string(path)?)?,
        None => SynthConfig {
            classes: 2,
            modes: 3,
            demos: 20,
            len: 120,
            sigma: 0.01,
            seed: 1,
        },
    };
    if let Some(v) = a.classes {
        cfg.classes = v;
    }
    if let Some(v) = a.modes {
        cfg.modes = v;
    }
    if let Some(v) = a.demos {
        cfg.demos = v;
    }
    if let Some(v) = a.len {
        cfg.len = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let (demos, _) = synth_interactions(&cfg)?;
    dataio::write_dataset(&a.out, &demos)?;
    println!(
        "wrote {} demos ({} classes x {}) to {}",
        demos.len(),
        cfg.classes,
        cfg.demos,
        a.out.display()
    );
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Error> {
    let model = pipeline::load(&a.checkpoint)?;
    print!("{}", model.summary());
    if model.created_unix != 0 {
        println!("created_unix: {}", model.created_unix);
    }
    Ok(())
}
