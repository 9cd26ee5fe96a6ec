//! `probprompt` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use probprompt::gradsuite;
use probprompt::oracles;
use probprompt::synth::{generate_scene, image_to_f32_le, labels_to_pgm};
use probprompt::trainer::{analyze_uncertainty, evaluate, heldout_scenes, metrics_csv, Checkpoint, TrainConfig, Trainer};
use probprompt::numcore::{rng::streams, seeded_rng};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Overrides the configured seed when set.
pub const SEED_ENV: &str = "PROBPROMPT_SEED";

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "probprompt", version, about = "Probabilistic attribute prompts on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a JSON config (or resume a checkpoint) and write metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint on held-out scenes; prints one metrics row.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 500)]
        scenes: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = gradsuite::TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte-Carlo moment oracle and KL quadrature oracle.
    MomentsCheck {
        #[arg(long, default_value_t = oracles::MOMENT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = oracles::MIXTURES)]
        mixtures: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Uncertainty report for a checkpoint, written as CSV.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        scenes: usize,
    },
    /// Write one scene as a PGM label map and a raw little-endian f32 image.
    ExportScene {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Scene settings come from this config when given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Verification(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Verification(_) => EXIT_VERIFY,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<probprompt::Error> for Failure {
    fn from(e: probprompt::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Parse a config file; unknown keys and violated constraints are errors.
pub fn load_config(path: &Path) -> probprompt::Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    TrainConfig::from_json(&text)
}

/// Seed from the environment, if set and valid.
fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn config_arg(path: &Path) -> Result<TrainConfig, Failure> {
    load_config(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_outputs(out: &Path, trainer: &Trainer) -> CmdResult {
    fs::create_dir_all(out)?;
    write_atomic(&out.join(METRICS_FILE), metrics_csv(&trainer.eval_log).as_bytes())?;
    write_atomic(&out.join(TRAIN_LOG_FILE), metrics_csv(&trainer.train_log).as_bytes())?;
    write_atomic(&out.join(CONFIG_FILE), trainer.config().to_json().as_bytes())?;
    write_atomic(&out.join(CHECKPOINT_FILE), trainer.checkpoint().to_json().as_bytes())?;
    Ok(())
}

fn cmd_train(config: Option<PathBuf>, resume: Option<PathBuf>, out: PathBuf, steps: Option<u64>) -> CmdResult {
    let mut trainer = match (config, resume) {
        (_, Some(ckpt)) => {
            let ckpt = read_checkpoint(&ckpt)?;
            ckpt.restore()?
        }
        (Some(path), None) => {
            let mut cfg = config_arg(&path)?;
            if let Some(seed) = seed_override()? {
                cfg.seed = seed;
            }
            Trainer::new(&cfg)?
        }
        (None, None) => return Err(Failure::Usage("train needs --config or --resume".into())),
    };
    if let Some(s) = steps {
        trainer.state.config.steps = s;
    }
    let cfg = trainer.config().clone();
    println!("seed: {}", cfg.seed);
    println!("config: {}", serde_json::to_string(&cfg).expect("config serializes"));
    while trainer.state.step < cfg.steps {
        trainer.step()?;
        if trainer.state.step % cfg.eval_every == 0 {
            let m = trainer.eval_log.last().expect("evaluation row");
            println!(
                "step {} loss {:.5} acc {:.4} miou {:.4} uncertainty {:.4}",
                m.step, m.loss_total, m.acc, m.miou, m.uncertainty
            );
        }
    }
    write_outputs(&out, &trainer)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(ckpt: PathBuf, scenes: usize) -> CmdResult {
    if scenes == 0 {
        return Err(Failure::Usage("--scenes must be >= 1".into()));
    }
    let trainer = read_checkpoint(&ckpt)?.restore()?;
    let mut cfg = trainer.config().clone();
    println!("seed: {}", cfg.seed);
    cfg.heldout_scenes = scenes;
    let set = heldout_scenes(&cfg)?;
    let mut m = evaluate(&trainer.model, &trainer.state.params, &cfg, &set)?;
    m.step = trainer.state.step;
    print!("{}", metrics_csv(&[m]));
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64) -> CmdResult {
    println!("seed: {seed}");
    println!("{:<28} {:>7} {:>12} {:>8}", "operation", "trials", "max_rel_err", "status");
    let mut failed = Vec::new();
    for case in gradsuite::cases() {
        let r = gradsuite::run_case(&case, trials, seed)?;
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:>7} {:>12.3e} {:>8}", r.name, r.trials, r.max_rel_err, status);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all operations within {:e}", gradsuite::TOLERANCE);
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_moments(samples: usize, mixtures: usize, seed: u64) -> CmdResult {
    println!("seed: {seed}");
    let moments = oracles::moment_suite(mixtures, samples, seed)?;
    println!("{:<8} {:>4} {:>14} {:>14} {:>8}", "mixture", "K", "mean_rel_err", "var_rel_err", "status");
    let mut bad = 0;
    for (i, r) in moments.iter().enumerate() {
        let status = if r.passed() { "ok" } else { "FAIL" };
        bad += usize::from(!r.passed());
        println!("{i:<8} {:>4} {:>14.3e} {:>14.3e} {:>8}", r.k, r.mean_rel_err, r.var_rel_err, status);
    }
    let kls = oracles::kl_suite(oracles::MIXTURES, seed)?;
    println!("{:>10} {:>10} {:>12} {:>12} {:>8}", "mu", "sigma", "closed_form", "quadrature", "status");
    for r in &kls {
        let status = if r.passed() { "ok" } else { "FAIL" };
        bad += usize::from(!r.passed());
        println!("{:>10.4} {:>10.4} {:>12.6} {:>12.6} {:>8}", r.mu, r.sigma, r.closed_form, r.numeric, status);
    }
    if bad == 0 {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{bad} oracle checks failed")))
    }
}

fn cmd_analyze(ckpt: PathBuf, out: PathBuf, scenes: usize) -> CmdResult {
    let trainer = read_checkpoint(&ckpt)?.restore()?;
    let mut cfg = trainer.config().clone();
    println!("seed: {}", cfg.seed);
    cfg.heldout_scenes = scenes;
    let set = heldout_scenes(&cfg)?;
    let report = analyze_uncertainty(&trainer.model, &trainer.state.params, &cfg, &set)
        .map_err(|e| match e {
            probprompt::Error::Input(m) => Failure::Usage(m),
            other => other.into(),
        })?;
    write_atomic(&out, report.to_csv().as_bytes())?;
    match (report.spearman_rho, report.p_value) {
        (Some(rho), Some(p)) => println!("spearman_rho {rho:.4} p_value {p:.3e}"),
        _ => println!("spearman_rho undefined (constant uncertainty)"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_export(seed: u64, out: PathBuf, config: Option<PathBuf>) -> CmdResult {
    let cfg = match config {
        Some(p) => config_arg(&p)?,
        None => TrainConfig::default(),
    };
    println!("seed: {seed}");
    let spec = cfg.scene_spec();
    let mut rng = seeded_rng(seed, streams::DATA);
    let scene = generate_scene(&spec, &spec.palette(), &mut rng)?;
    fs::create_dir_all(&out)?;
    let labels = out.join(format!("scene_{seed}_labels.pgm"));
    let image = out.join(format!("scene_{seed}_image.f32"));
    write_atomic(&labels, &labels_to_pgm(&scene))?;
    write_atomic(&image, &image_to_f32_le(&scene))?;
    println!(
        "{}x{}x{} scene with {} foreground classes",
        scene.height, scene.width, spec.channels, scene.n_classes_present
    );
    println!("wrote {} and {}", labels.display(), image.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train {
            config,
            resume,
            out,
            steps,
        } => cmd_train(config, resume, out, steps),
        Command::Eval { ckpt, scenes } => cmd_eval(ckpt, scenes),
        Command::Gradcheck { trials, seed } => cmd_gradcheck(trials, seed),
        Command::MomentsCheck { samples, mixtures, seed } => cmd_moments(samples, mixtures, seed),
        Command::Analyze { ckpt, out, scenes } => cmd_analyze(ckpt, out, scenes),
        Command::ExportScene { seed, out, config } => cmd_export(seed, out, config),
    }
}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Verification(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            f.code()
        }
    }
}
