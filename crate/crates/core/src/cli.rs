//! The `cones-lab` command line.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::experiments::{load_config, AblationAxis, ExperimentConfig, Lab, Session};
use crate::losses::LossSelection;
use crate::tuning::Method;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cones-lab", version, about = "Concept embedding search on synthetic grounding scenes")]
struct Cli {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data, pretraining and tuning.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root (overrides CONES_LAB_HOME).
    #[arg(long, global = true)]
    home: Option<PathBuf>,
    /// Directory for tables and reports.
    #[arg(long, global = true)]
    output: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Cones,
    ConesStage2,
    Prompt,
    Textinv,
    Linear,
    Full,
    ZeroShot,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cones => Method::ConesStage1,
            MethodArg::ConesStage2 => Method::ConesStage2,
            MethodArg::Prompt => Method::PromptTuning,
            MethodArg::Textinv => Method::TextualInversion,
            MethodArg::Linear => Method::LinearProbe,
            MethodArg::Full => Method::FullFinetune,
            MethodArg::ZeroShot => Method::ZeroShot,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Tokens,
    Losses,
    Fusion,
    Pretrain,
}

impl From<AxisArg> for AblationAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Tokens => AblationAxis::Tokens,
            AxisArg::Losses => AblationAxis::Losses,
            AxisArg::Fusion => AblationAxis::Fusion,
            AxisArg::Pretrain => AblationAxis::Pretrain,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainArg {
    In,
    Out,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Learned tokens per class.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Loss selection such as `cls+bbox+mask`.
    #[arg(long)]
    losses: Option<String>,
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,
    /// Tune on a checkpoint pretrained without fusion layers.
    #[arg(long)]
    no_fusion: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and store the in- and out-of-domain splits.
    GenData,
    /// Pretrain the model on in-domain scenes.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_fusion: bool,
    },
    /// Adapt the pretrained model with one method.
    Tune(TuneArgs),
    /// Evaluate a method's run on the configured split.
    Eval(TuneArgs),
    /// Sweep one ablation axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
    },
    /// Concept vs class-name distances to visual embeddings.
    GapReport,
    /// Train the toy denoiser on colour concepts and sample from it.
    Generate,
    /// Summarize every run in the ledger.
    Report,
    /// Run every command in order.
    Pipeline,
    /// Config utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Print the resolved config with every default spelled out.
    Dump,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Schema { .. } | Error::SchemaVersion { .. } | Error::UnknownClass(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn set<T: PartialEq + Display>(notes: &mut Vec<String>, key: &str, slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        if *slot != v {
            notes.push(format!("{key}: {slot} -> {v}"));
        }
        *slot = v;
    }
}

fn apply_tune_flags(cfg: &mut ExperimentConfig, notes: &mut Vec<String>, a: &TuneArgs) -> Result<()> {
    set(notes, "method", &mut cfg.method, a.method.map(Method::from));
    set(notes, "tokens_per_class", &mut cfg.tokens_per_class, a.tokens);
    set(notes, "tune.learning_rate", &mut cfg.tune.learning_rate, a.lr);
    set(notes, "tune.steps", &mut cfg.tune.steps, a.steps);
    let losses = a.losses.as_deref().map(str::parse::<LossSelection>).transpose()?;
    set(notes, "losses", &mut cfg.losses, losses);
    let domain = a.domain.map(|d| match d {
        DomainArg::In => Domain::InDomain,
        DomainArg::Out => Domain::OutDomain,
    });
    if let Some(d) = domain {
        if cfg.eval.domain != d {
            notes.push(format!("eval.domain: {} -> {}", cfg.eval.domain.as_str(), d.as_str()));
        }
        cfg.eval.domain = d;
    }
    if a.no_fusion {
        set(notes, "fusion", &mut cfg.fusion, Some(false));
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    let mut notes = Vec::new();
    set(&mut notes, "seed", &mut cfg.seed, cli.seed);
    if let Some(o) = cli.output.clone() {
        if cfg.output != o {
            notes.push(format!("output: {:?} -> {o:?}", cfg.output));
        }
        cfg.output = o;
    }
    match &cli.command {
        Command::Pretrain { steps, no_fusion } => {
            set(&mut notes, "pretrain.steps", &mut cfg.pretrain.steps, *steps);
            if *no_fusion {
                set(&mut notes, "fusion", &mut cfg.fusion, Some(false));
            }
        }
        Command::Tune(a) | Command::Eval(a) => apply_tune_flags(&mut cfg, &mut notes, a)?,
        _ => {}
    }
    cfg.validate()?;
    if let Command::Config { action: ConfigAction::Dump } = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let lab = match &cli.home {
        Some(h) => Lab::open(h)?,
        None => Lab::from_env(crate::experiments::lab::DEFAULT_HOME)?,
    };
    let method = cfg.method;
    let session = Session {
        lab: &lab,
        config: cfg,
        overrides: notes,
    };
    match cli.command {
        Command::GenData => {
            for d in session.gen_data()? {
                println!("{}", d.display());
            }
        }
        Command::Pretrain { .. } => {
            let (dir, val) = session.pretrain()?;
            println!("{} val ap {:.4} ap_mask {:.4}", dir.display(), val.ap_box, val.ap_mask);
        }
        Command::Tune(_) => {
            let r = session.tune(method)?;
            let rec = &r.record;
            println!(
                "{} ap {:.4} ap50 {:.4} ap_mask {:.4} unfrozen {}/{} text_calls {}",
                rec.spec.method,
                rec.test.ap_box,
                rec.test.ap50_box,
                rec.test.ap_mask,
                rec.run.unfrozen_scalars,
                rec.params.total,
                rec.run.text_calls
            );
        }
        Command::Eval(_) => {
            let m = session.eval(method)?;
            println!("{method} ap {:.4} ap50 {:.4} ap_mask {:.4} ap50_mask {:.4}", m.ap_box, m.ap50_box, m.ap_mask, m.ap50_mask);
        }
        Command::Ablate { axis } => print!("{}", session.ablate(axis.into())?.to_csv()),
        Command::GapReport => print!("{}", session.gap_report()?.report.to_csv()),
        Command::Generate => {
            let g = session.generate()?;
            for c in &g.conditioned {
                println!("concept {} closer {:.3}", c.concept, c.closer_fraction);
            }
        }
        Command::Report => {
            session.report()?;
            println!("{}", session.output_dir().join("report.md").display());
        }
        Command::Pipeline => {
            session.pipeline()?;
            println!("{}", session.output_dir().display());
        }
        Command::Config { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cones-lab: {e}");
            exit_code(&e)
        }
    }
}
