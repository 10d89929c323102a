//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use editnet_core::baselines::compute_stats;
use editnet_core::eval::evaluate_pipeline;
use editnet_core::gradcheck::{run_gradcheck, GradcheckConfig};
use editnet_core::synth::generate_synthetic;
use editnet_core::{Domain, Method, SynthSpec, TrainConfig, Variant};

use crate::checkpoint::{encode_stats, Checkpoint, Container, STATS};
use crate::error::{Error, Result, EXIT_OK, EXIT_USAGE};
use crate::pipeline::{fit_checkpoint, transfer_for};
use crate::text::{format_log, format_report, format_scores, format_trials, load_trials, write};
use crate::{edbf, kv};

#[derive(Debug, Parser)]
#[command(name = "editnet", version, about = "Unsupervised speaker-embedding domain transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-channel mean and std of an embedding file.
    Stats(StatsArgs),
    /// Train a model on target and source embeddings and write a checkpoint.
    Train(TrainArgs),
    /// Move target embeddings with a checkpoint's model or a baseline.
    Transfer(TransferArgs),
    /// Score a trial list and report the EER.
    Eval(EvalArgs),
    /// Finite-difference check of the training gradients.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic two-domain benchmark.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub tar: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    /// key = value file; unspecified keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's variant.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log path (default: `<out>.log.tsv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Do not fit CORAL into the checkpoint.
    #[arg(long)]
    pub no_coral: bool,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "editnet")]
    pub method: Method,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    /// One or more methods, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "editnet")]
    pub method: Vec<Method>,
    /// Score file per method, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scores: Vec<PathBuf>,
    /// Report file per method, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub report: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupts one analytic gradient entry by this amount.
    #[arg(long, hide = true)]
    pub inject_fault: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// key = value file; unspecified keys keep their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub const SYNTH_FILES: [&str; 4] = ["src_train.edbf", "tar_train.edbf", "tar_eval.edbf", "trials.tsv"];

fn print_config(command: &str, entries: &[(&str, &dyn Display)], extra: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "# editnet {command}");
    for (k, v) in entries {
        let _ = writeln!(err, "# {k} = {v}");
    }
    for line in extra.lines() {
        let _ = writeln!(err, "# {line}");
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(Error::io(path))
}

fn stats(a: &StatsArgs) -> Result<()> {
    print_config(
        "stats",
        &[("embeddings", &a.embeddings.display()), ("out", &a.out.display())],
        "",
    );
    let set = edbf::load(&a.embeddings, Domain::Target)?;
    let s = compute_stats(&set.embeddings)?;
    let mut c = Container::default();
    c.push(STATS, encode_stats(&s));
    c.save(&a.out)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => kv::parse_train_config(&read_text(p)?, &p.display().to_string())?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.variant {
        config.variant = v;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    print_config(
        "train",
        &[
            ("tar", &a.tar.display()),
            ("src", &a.src.display()),
            ("out", &a.out.display()),
            ("log", &log_path.display()),
            ("coral", &!a.no_coral),
        ],
        &kv::train_config_to_kv(&config),
    );
    let tar = edbf::load(&a.tar, Domain::Target)?;
    let src = edbf::load(&a.src, Domain::Source)?;
    let mut last_epoch = usize::MAX;
    let (ck, log) = fit_checkpoint(&tar, &src, &config, !a.no_coral, |r| {
        if r.epoch != last_epoch {
            last_epoch = r.epoch;
            eprintln!("epoch {:>3} step {:>6} lr {:.3e} total {:.4}", r.epoch, r.step, r.lr, r.loss.total);
        }
    })?;
    ck.save(&a.out)?;
    write(&log_path, &format_log(&log))
}

fn transfer(a: &TransferArgs) -> Result<()> {
    print_config(
        "transfer",
        &[
            ("ckpt", &a.ckpt.display()),
            ("in", &a.input.display()),
            ("method", &a.method),
            ("out", &a.out.display()),
        ],
        "",
    );
    let ck = Checkpoint::load(&a.ckpt)?;
    let set = edbf::load(&a.input, Domain::Target)?;
    let moved = transfer_for(&ck, a.method)?.transfer(&set.embeddings)?;
    let mut out = set.with_embeddings(moved)?;
    if a.method != Method::None {
        out.domain = Domain::Source;
    }
    edbf::save(&out, &a.out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    for (flag, n) in [("--scores", a.scores.len()), ("--report", a.report.len())] {
        if n != 0 && n != a.method.len() {
            return Err(Error::Usage(format!(
                "{flag} lists {n} paths for {} methods",
                a.method.len()
            )));
        }
    }
    let methods = a.method.iter().map(|m| m.name()).collect::<Vec<_>>().join(",");
    let list = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
    print_config(
        "eval",
        &[
            ("ckpt", &a.ckpt.display()),
            ("eval", &a.eval.display()),
            ("trials", &a.trials.display()),
            ("method", &methods),
            ("scores", &list(&a.scores)),
            ("report", &list(&a.report)),
        ],
        "",
    );
    let ck = Checkpoint::load(&a.ckpt)?;
    let set = edbf::load(&a.eval, Domain::Target)?;
    let trials = load_trials(&a.trials)?;
    for (i, &method) in a.method.iter().enumerate() {
        let r = evaluate_pipeline(transfer_for(&ck, method)?.as_ref(), &set, &trials)?;
        let report = format_report(&r);
        print!("method={method}\n{report}");
        if let Some(p) = a.scores.get(i) {
            write(p, &format_scores(&trials, &r.scores))?;
        }
        if let Some(p) = a.report.get(i) {
            write(p, &report)?;
        }
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        inject_fault: a.inject_fault,
        ..GradcheckConfig::default()
    };
    print_config(
        "gradcheck",
        &[
            ("seed", &cfg.seed),
            ("x_dim", &cfg.x_dim),
            ("z_dim", &cfg.z_dim),
            ("batch", &cfg.batch),
            ("step", &cfg.step),
            ("tolerance", &cfg.tolerance),
        ],
        "",
    );
    let report = run_gradcheck(&cfg)?;
    for c in &report.components {
        println!(
            "{:<6} max_rel_error={:.3e} worst={} params={} kink_skipped={} inert={} {}",
            c.component,
            c.max_rel_error,
            c.worst_param,
            c.n_params,
            c.kink_skipped,
            c.n_inert,
            if c.passed(report.tolerance) { "pass" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("gradcheck pass");
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error(),
            report.tolerance
        )))
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => kv::parse_synth_spec(&read_text(p)?, &p.display().to_string())?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    print_config("synth", &[("out", &a.out.display())], &kv::synth_spec_to_kv(&spec));
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    let [src, tar, ev, trials] = SYNTH_FILES.map(|f| a.out.join(f));
    edbf::save(&data.src_train, &src)?;
    edbf::save(&data.tar_train, &tar)?;
    edbf::save(&data.tar_eval, &ev)?;
    write(&trials, &format_trials(&data.trials))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(a),
        Command::Transfer(a) => transfer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
    }
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
