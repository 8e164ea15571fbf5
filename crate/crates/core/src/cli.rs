//! Command-line front end. Exit codes: 0 success, 2 configuration error,
//! 3 runtime failure or divergence, 4 I/O or file-format error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, DataSource, LoopKind};
use crate::data::synth::write_points_csv;
use crate::energy::head_checks;
use crate::error::{Error, Result};
use crate::generator::simulate_chain;
use crate::image::write_png_grid;
use crate::ndiff::gradcheck::layer_suite;
use crate::ndiff::Tensor;
use crate::semisup::{train_classifier, write_results_csv, Augmenter, ResultRow, Splits};
use crate::toyeval::{bound_value, mode_coverage, write_bound_csv, QuadratureGrid, Support};
use crate::training::{draw_samples, train, Trained};

#[derive(Debug, Parser)]
#[command(name = "vgf", version, about = "Energy-based generative models trained against learned samplers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key = value configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides vcd.rho.
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Args)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    /// Model checkpoint; defaults to OUT/checkpoint.vgf.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an energy model against a direct generator.
    TrainVgan(Common),
    /// Train an energy model against a transition generator.
    TrainVcd(Common),
    /// Train the discriminator/generator baseline.
    TrainGan(Common),
    /// Write a grid of samples from a trained generator.
    Sample(WithCheckpoint),
    /// Run the transition chain from data points and write every step.
    Chain {
        #[command(flatten)]
        ckpt: WithCheckpoint,
        /// Number of transitions (overrides sample.steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Exact likelihood, variational bound and mode coverage on 2D data.
    EvalBound(WithCheckpoint),
    /// Train a classifier on the labeled subset, optionally with transition augmentation.
    AugmentTrain(WithCheckpoint),
    /// Finite-difference check of every layer and both energy heads.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Csv(_) | Error::Png(_) | Error::BadMagic { .. } | Error::Format(_) => 4,
        _ => 3,
    }
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse()?
        }
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(r) = c.rho {
        cfg.vcd.rho = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(c: &Common, cfg: &Config) -> Result<()> {
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("config.resolved"), cfg.to_text())?;
    Ok(())
}

fn checkpoint_path(w: &WithCheckpoint) -> PathBuf {
    w.checkpoint.clone().unwrap_or_else(|| w.common.out.join("checkpoint.vgf"))
}

fn is_points(cfg: &Config) -> bool {
    cfg.data.source != DataSource::Idx
}

/// Images as a PNG grid, 2D points as CSV.
fn write_samples(cfg: &Config, out: &Path, stem: &str, x: &Tensor, rows: usize, cols: usize) -> Result<PathBuf> {
    if is_points(cfg) {
        let path = out.join(format!("{stem}.csv"));
        write_points_csv(&x.clone().reshape(&[x.batch(), 2])?, None, &path)?;
        Ok(path)
    } else {
        let path = out.join(format!("{stem}.png"));
        write_png_grid(&path, x, rows, cols)?;
        Ok(path)
    }
}

fn run_train(c: &Common, kind: LoopKind) -> Result<String> {
    let mut cfg = load_config(c)?;
    cfg.train.kind = kind;
    prepare_out(c, &cfg)?;
    let data = cfg.load_dataset()?;
    let (models, log) = train(&cfg, &data, Some(&c.out.join("checkpoint.vgf")))?;
    models.save(&c.out.join("checkpoint.vgf"))?;
    log.write_csv(&c.out.join("train_log.csv"))?;
    log.write_timing_csv(&c.out.join("timing.csv"))?;
    let (rows, cols) = (cfg.sample.rows, cfg.sample.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let x = draw_samples(&models, &data, rows * cols, &mut rng)?;
    let path = write_samples(&cfg, &c.out, "samples", &x, rows, cols)?;
    Ok(format!("trained {} iterations; samples in {}", log.len(), path.display()))
}

fn load_models(w: &WithCheckpoint, cfg: &Config, sample_shape: &[usize]) -> Result<Trained> {
    Trained::load(cfg, sample_shape, &checkpoint_path(w))
}

fn run_sample(w: &WithCheckpoint) -> Result<String> {
    let cfg = load_config(&w.common)?;
    prepare_out(&w.common, &cfg)?;
    let data = cfg.load_dataset()?;
    let models = load_models(w, &cfg, data.sample_shape())?;
    let (rows, cols) = (cfg.sample.rows, cfg.sample.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let x = draw_samples(&models, &data, rows * cols, &mut rng)?;
    let path = write_samples(&cfg, &w.common.out, "samples", &x, rows, cols)?;
    Ok(format!("wrote {}", path.display()))
}

fn run_chain(w: &WithCheckpoint, steps: Option<usize>) -> Result<String> {
    let mut cfg = load_config(&w.common)?;
    if let Some(s) = steps {
        cfg.sample.steps = s;
    }
    prepare_out(&w.common, &cfg)?;
    let data = cfg.load_dataset()?;
    let Trained::Vcd { gen, .. } = load_models(w, &cfg, data.sample_shape())? else {
        return Err(Error::Config("chain needs a transition generator checkpoint (train-vcd)".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let x0 = data.random_batch(cfg.sample.chains, &mut rng)?.x;
    let states = simulate_chain(&gen, &x0, cfg.sample.steps, &mut rng)?;
    let mut frames = vec![&x0];
    frames.extend(states.iter());
    // one row per time step, one column per chain
    let grid = Tensor::concat(&frames)?;
    let path = write_samples(&cfg, &w.common.out, "chain", &grid, cfg.sample.steps + 1, cfg.sample.chains)?;
    Ok(format!("wrote {} ({} steps)", path.display(), cfg.sample.steps))
}

fn run_eval_bound(w: &WithCheckpoint) -> Result<String> {
    let cfg = load_config(&w.common)?;
    if !is_points(&cfg) {
        return Err(Error::Config("eval-bound needs 2D synthetic data (data.source = ring or grid)".into()));
    }
    prepare_out(&w.common, &cfg)?;
    let data = cfg.load_dataset()?;
    let models = load_models(w, &cfg, data.sample_shape())?;
    let energy = match &models {
        Trained::Vgan { energy, .. } | Trained::Vcd { energy, .. } => energy,
        Trained::Gan { .. } => return Err(Error::Config("eval-bound needs a product-of-experts energy".into())),
    };
    let e = &cfg.eval;
    let grid = QuadratureGrid::new(2, e.lo, e.hi, e.points)?;
    let pts = data.images.clone().reshape(&[data.len(), 2])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let q = Tensor::from_fn(&[e.samples, 2], |_| rand::Rng::random_range(&mut rng, e.lo..e.hi));
    let report = bound_value(energy, &pts, &q, grid.uniform_entropy(), &Support::Grid(grid))?;
    write_bound_csv(&[report], &w.common.out.join("bound.csv"))?;
    let samples = draw_samples(&models, &data, e.samples, &mut rng)?;
    let n = samples.batch();
    let cov = mode_coverage(&samples.reshape(&[n, 2])?, &cfg.synth_spec()?.centers(), e.radius)?;
    cov.write_csv(&w.common.out.join("coverage.csv"))?;
    Ok(format!(
        "exact nll {:.4}, bound {:.4}, gap {:.4}; modes covered (>= 2%): {}",
        report.exact_nll,
        report.bound,
        report.gap,
        cov.modes_covered(0.02)
    ))
}

fn run_augment(w: &WithCheckpoint) -> Result<String> {
    let cfg = load_config(&w.common)?;
    prepare_out(&w.common, &cfg)?;
    let splits = Splits::from_config(&cfg)?;
    let gen_path = w
        .checkpoint
        .clone()
        .or_else(|| (!cfg.semisup.generator.is_empty()).then(|| PathBuf::from(&cfg.semisup.generator)));
    let generator = match &gen_path {
        Some(p) => match Trained::load(&cfg, splits.labeled.sample_shape(), p)? {
            Trained::Vcd { gen, .. } => Some(gen),
            _ => return Err(Error::Config("augmentation needs a transition generator checkpoint (train-vcd)".into())),
        },
        None => None,
    };
    let aug = generator.as_ref().map(|g| g as &dyn Augmenter);
    let run = train_classifier(&cfg, &splits, aug, cfg.train.seed)?;
    let model = match &gen_path {
        Some(_) => format!("rho={}", cfg.vcd.rho),
        None => "no augmentation".into(),
    };
    let row = ResultRow {
        model,
        dataset: format!("labeled-{}", splits.labeled.len()),
        error: 100.0 * run.test_error,
    };
    write_results_csv(std::slice::from_ref(&row), &w.common.out.join("results.csv"))?;
    let mut hist = csv::Writer::from_path(w.common.out.join("history.csv"))?;
    for r in &run.history {
        hist.serialize(r)?;
    }
    hist.flush()?;
    Ok(format!(
        "{}: test error {:.2}% (epoch {}, validation {:.2}%)",
        row.model,
        row.error,
        run.best_epoch,
        100.0 * run.val_error
    ))
}

/// Threshold for `grad-check` success.
pub const GRAD_TOL: f64 = 1e-4;

fn run_grad_check(seed: u64) -> Result<(String, bool)> {
    let mut reports = layer_suite(seed)?;
    reports.extend(head_checks(seed)?);
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    for r in &reports {
        lines.push(format!("{:<24} {:>10.3e}  ({} entries, worst {})", r.name, r.max_rel_error, r.checked, r.worst));
        worst = worst.max(r.max_rel_error);
    }
    lines.push(format!("max relative error: {worst:.3e}"));
    Ok((lines.join("\n"), worst < GRAD_TOL))
}

fn threads_from_env() -> Result<()> {
    match std::env::var("VGF_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::Config(format!("VGF_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(()),
    }
}

/// Executes a parsed command, printing its summary; returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = threads_from_env().and_then(|_| match &cli.command {
        Command::TrainVgan(c) => run_train(c, LoopKind::Vgan).map(|s| (s, true)),
        Command::TrainVcd(c) => run_train(c, LoopKind::Vcd).map(|s| (s, true)),
        Command::TrainGan(c) => run_train(c, LoopKind::Gan).map(|s| (s, true)),
        Command::Sample(w) => run_sample(w).map(|s| (s, true)),
        Command::Chain { ckpt, steps } => run_chain(ckpt, *steps).map(|s| (s, true)),
        Command::EvalBound(w) => run_eval_bound(w).map(|s| (s, true)),
        Command::AugmentTrain(w) => run_augment(w).map(|s| (s, true)),
        Command::GradCheck { seed } => run_grad_check(*seed),
    });
    match result {
        Ok((summary, ok)) => {
            println!("{summary}");
            if ok {
                0
            } else {
                3
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}
