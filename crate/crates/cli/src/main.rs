use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpb_core::dataset::Property;
use fpb_core::experiment::{
    cmd_generate, cmd_misuse, cmd_report, cmd_run, load_corpus, pivot, write_sweep, ExperimentConfig, MechanismKind, Metric,
    Sweep,
};
use fpb_core::Error;

/// Federated property-inference benchmark.
#[derive(Parser, Debug)]
#[command(name = "fpb", version, about)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Overrides {
    /// TOML experiment config; unset fields take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, env = "FPB_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "FPB_THREADS")]
    threads: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    folds: Option<usize>,

    /// Comma-separated privacy budgets.
    #[arg(long, global = true, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,

    #[arg(long, global = true)]
    n_eval: Option<usize>,

    #[arg(long, global = true)]
    rounds: Option<u32>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into the output directory.
    Generate,
    /// Sweep one mechanism against one attacked property.
    Run {
        /// none, udp, voiceprint_dp or pro_ind.
        #[arg(long, short)]
        mechanism: String,
        /// gender, age or race.
        #[arg(long, short, default_value = "gender")]
        target: String,
    },
    /// Gender attack under every defense, including mis-aimed Pro-Ind.
    Misuse,
    /// Pivot result files into plot-ready CSV tables.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Directory for the tables (defaults to `<output-dir>/tables`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn build_config(o: &Overrides) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &o.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(t) = o.threads {
        cfg.threads = Some(t);
    }
    if let Some(s) = o.seed {
        cfg.master_seed = s;
    }
    if let Some(f) = o.folds {
        cfg.folds = f;
    }
    if let Some(e) = &o.epsilons {
        cfg.epsilons = e.clone();
    }
    if let Some(n) = o.n_eval {
        cfg.n_eval = n;
    }
    if let Some(r) = o.rounds {
        cfg.fl.rounds = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_target(s: &str) -> Result<Property, Error> {
    Property::parse(s).ok_or_else(|| Error::Usage(format!("unknown property `{s}` (gender, age, race)")))
}

fn print_summary(sweep: &Sweep) {
    let Some(first) = sweep.records.first() else {
        return;
    };
    for metric in [Metric::SrP, Metric::StandardAccuracy] {
        println!("{} ({} attack)", metric.name(), first.target.name());
        print!("{}", pivot(&sweep.records, first.target, metric).to_csv());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = build_config(&cli.overrides)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Generate => {
            let summary = cmd_generate(&cfg)?;
            print!("{summary}");
            println!("wrote {}", cfg.corpus_path().display());
        }
        Command::Run { mechanism, target } => {
            let mech = MechanismKind::parse(&mechanism)
                .ok_or_else(|| Error::Usage(format!("unknown mechanism `{mechanism}`")))?;
            let target = parse_target(&target)?;
            let corpus = load_corpus(&cfg)?;
            let sweep = cmd_run(&cfg, &corpus, mech, target)?;
            let path = write_sweep(&cfg.output_dir, &format!("{}_{}", mech.name(), target.name()), &sweep)?;
            print_summary(&sweep);
            println!("wrote {}", path.display());
        }
        Command::Misuse => {
            let corpus = load_corpus(&cfg)?;
            let sweep = cmd_misuse(&cfg, &corpus)?;
            let path = write_sweep(&cfg.output_dir, "misuse", &sweep)?;
            print_summary(&sweep);
            println!("wrote {}", path.display());
        }
        Command::Report { files, out } => {
            let out = out.unwrap_or_else(|| cfg.output_dir.join("tables"));
            for p in cmd_report(&files, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fpb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
