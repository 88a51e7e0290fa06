use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cnsn_core::agent::Agent;
use cnsn_core::harness::{
    self, gradcheck, latest_checkpoint, AblateOptions, RunConfig, RunSummary, TrainOptions, Variant, CONFIG_FILE,
};
use cnsn_core::pixelworld::{ShiftSpec, Suite};
use cnsn_core::{Error, Prng, Result};

/// CrossNorm/SelfNorm experiments on a rendered grid task.
#[derive(Parser, Debug)]
#[command(name = "cnsn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed (run seed for train, first seed for ablate, episode seed for eval).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Run config JSON; defaults apply to absent fields.
    #[arg(long)]
    config: Option<PathBuf>,

    /// `dotted.key=value` override, repeatable. `*` indexes every array element.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run and evaluate it periodically on every suite.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the newest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the newest checkpoint of a run directory.
    Eval {
        /// Run directory written by `train`.
        run: PathBuf,
        #[arg(long, value_delimiter = ',')]
        suites: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train every variant for every seed and emit the summary table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Explicit seed list; otherwise --num-seeds seeds starting at --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 5)]
        num_seeds: u64,
        /// Variant list; defaults to base, cn, sn, cnsn, cnsn_nocrop.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Add the BatchNorm baseline.
        #[arg(long)]
        with_bn: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Restrict to these suites.
        #[arg(long = "suite")]
        suites: Vec<String>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Plot seed-averaged return curves from run directories.
    Plot {
        /// Run directories, or directories containing runs.
        dirs: Vec<PathBuf>,
    },
    /// Rebuild the summary table from finished runs under a directory.
    Summarize { root: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    RunConfig::load_with_overrides(args.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = load_config(&config, cli.seed)?;
            let out = cli
                .out
                .unwrap_or_else(|| PathBuf::from("runs").join(harness::run_dir_name(cfg.variant, cfg.seed)));
            let summary = harness::train_run_with(&cfg, &out, &TrainOptions { resume })?;
            print_json(&serde_json::to_value(&summary)?)?;
            Ok(if summary.completed() { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::Eval { run, suites, episodes } => eval(&run, &suites, episodes, cli.seed, cli.out.as_deref()),
        Command::Ablate {
            config,
            seeds,
            num_seeds,
            variants,
            with_bn,
            jobs,
        } => {
            let cfg = load_config(&config, None)?;
            let seeds = if seeds.is_empty() {
                let first = cli.seed.unwrap_or(0);
                (first..first + num_seeds).collect()
            } else {
                seeds
            };
            let mut variants: Vec<Variant> = if variants.is_empty() {
                Variant::ABLATION.to_vec()
            } else {
                variants.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?
            };
            if with_bn && !variants.contains(&Variant::Bn) {
                variants.push(Variant::Bn);
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs/ablation"));
            let table = harness::ablate(&cfg, &AblateOptions { seeds, variants, jobs }, &out)?;
            print!("{}", table.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            trials,
            suites,
            inject_fault,
        } => {
            let opts = gradcheck::GradcheckOptions {
                seed: cli.seed.unwrap_or(0),
                trials,
                suites,
                fault: inject_fault,
                ..Default::default()
            };
            let report = gradcheck::run_gradcheck(&opts)?;
            for s in &report.suites {
                println!(
                    "{:<10} {}  max rel error {:.2e}  coords {}  skipped {}  worst shape {}",
                    s.name,
                    if s.passed { "pass" } else { "FAIL" },
                    s.max_rel_error,
                    s.coords_checked,
                    s.skipped,
                    s.worst_shape
                );
            }
            if let Some(path) = &cli.out {
                let text = serde_json::to_string_pretty(&report)? + "\n";
                std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
            }
            report.into_result()?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { dirs } => {
            if dirs.is_empty() {
                return Err(Error::config("plot needs at least one directory"));
            }
            let runs = expand_run_dirs(&dirs)?;
            let out = cli.out.unwrap_or_else(|| dirs[0].clone());
            let path = harness::plot(&runs, &out)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Summarize { root } => {
            let table = harness::summarize_dir(&root)?;
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                table.write(out)?;
            }
            print!("{}", table.to_text());
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// A directory with `metrics.csv` is a run; otherwise its run subdirectories are used.
fn expand_run_dirs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for d in dirs {
        if d.join(harness::METRICS_FILE).exists() {
            out.push(d.clone());
            continue;
        }
        let mut subs: Vec<PathBuf> = std::fs::read_dir(d)
            .map_err(|e| Error::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(harness::METRICS_FILE).exists())
            .collect();
        if subs.is_empty() {
            return Err(Error::Schema(format!("{} holds no metrics.csv", d.display())));
        }
        subs.sort();
        out.extend(subs);
    }
    Ok(out)
}

fn eval(run: &Path, suites: &[String], episodes: Option<usize>, seed: Option<u64>, out: Option<&Path>) -> Result<ExitCode> {
    let cfg = RunConfig::load(&run.join(CONFIG_FILE))?;
    let ckpt = latest_checkpoint(run)?.ok_or_else(|| Error::config(format!("no checkpoint under {}", run.display())))?;
    let mut agent = Agent::new(cfg.agent.clone(), &cfg.resolved_encoder(), &Prng::new(cfg.seed))?;
    let meta = agent.load_checkpoint(&ckpt)?;
    let suites: Vec<Suite> = if suites.is_empty() {
        cfg.suites.clone()
    } else {
        suites.iter().map(|s| Suite::parse(s)).collect::<Result<_>>()?
    };
    let episodes = episodes.unwrap_or(cfg.eval_episodes);
    let rng = Prng::new(seed.unwrap_or(cfg.seed)).split_named("eval");
    let mut results = serde_json::Map::new();
    for suite in suites {
        let r = harness::evaluate(&agent.online, &ShiftSpec::suite(suite), episodes, &rng)?;
        results.insert(
            suite.name().into(),
            serde_json::json!({ "mean": r.mean, "std": r.std, "episodes": episodes }),
        );
    }
    let report = serde_json::json!({
        "run": run.display().to_string(),
        "checkpoint_step": meta["step"],
        "results": results,
    });
    print_json(&report)?;
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&report)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    if RunSummary::load(run).is_ok_and(|s| !s.completed()) {
        log::warn!("{} is marked failed; evaluated its last checkpoint", run.display());
    }
    Ok(ExitCode::SUCCESS)
}
