use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskbench::eval::RESULTS_HEADER;
use maskbench::trainer::LrSchedule;
use maskbench::Strategy;
use maskbench_cli::{
    cmd_compare, cmd_filter, cmd_gen, cmd_probe, cmd_score, cmd_train, CliError, ExperimentConfig, PairSet,
    ProbeSource, Result,
};

#[derive(Parser)]
#[command(name = "maskbench", version, about = "Attention-mask strategy experiments on a synthetic user corpus")]
struct Cli {
    /// Seed for corpus, sampling, init, batching and the probe split.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (or file, for score and filter).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    quiet: bool,
    /// Corpus directory. Defaults to $MASKBENCH_DATA_DIR, then ./data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        archetypes: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        sample_k: Option<u64>,
        /// Also run the QA pair pipeline.
        #[arg(long)]
        qa: bool,
    },
    /// Train one strategy and probe it.
    Train {
        #[arg(long)]
        strategy: Option<String>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Probe a checkpoint, or untrained weights, on the corpus tasks.
    Probe {
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        untrained: bool,
        #[arg(long)]
        strategy: Option<String>,
        /// Comma-separated label indices.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<usize>>,
    },
    /// Train several strategies under one config and tabulate them.
    Compare {
        /// Comma-separated strategy tags.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Attach difficulty scores to a pair file.
    Score {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Keep scored pairs at or above a difficulty threshold.
    Filter {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        t_filter: Option<f64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    lr_schedule: Option<Schedule>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long, value_enum)]
    pairs: Option<PairSet>,
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<usize>>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Schedule {
    Constant,
    Cosine,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl TrainArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        set(&mut t.steps, self.steps);
        set(&mut t.warmup, self.warmup);
        set(&mut t.lr, self.lr);
        set(
            &mut t.lr_schedule,
            self.lr_schedule.map(|s| match s {
                Schedule::Constant => LrSchedule::Constant,
                Schedule::Cosine => LrSchedule::Cosine,
            }),
        );
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.temperature, self.temperature);
        set(&mut t.margin, self.margin);
        set(&mut cfg.pairs, self.pairs);
        if self.tasks.is_some() {
            cfg.tasks = self.tasks;
        }
    }
}

fn strategy(tag: &str) -> Result<Strategy> {
    tag.parse::<Strategy>().map_err(|e| CliError::Usage(e.to_string()))
}

fn data_root(cli: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    cli.or(file)
        .or_else(|| std::env::var_os("MASKBENCH_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    let file_data = cfg.data.take();
    let data = data_root(cli.data.clone(), file_data.clone());
    let quiet = cli.quiet;
    let say = |s: String| {
        if !quiet {
            println!("{s}");
        }
    };
    match cli.cmd {
        Command::Gen {
            users,
            archetypes,
            noise,
            sample_k,
            qa,
        } => {
            set(&mut cfg.corpus.n_users, users);
            set(&mut cfg.corpus.n_archetypes, archetypes.map(|a| a as usize));
            set(&mut cfg.corpus.noise_rate, noise);
            set(&mut cfg.sample_k, sample_k.map(|k| k as usize));
            cfg.propagate_seed();
            let out = cli.out.unwrap_or(data);
            let m = cmd_gen(&cfg, &out, qa, cli.force)?;
            say(format!(
                "wrote {}: {} users, {} behavior pairs, {} qa pairs, {} skipped",
                out.display(),
                m.counts.users,
                m.counts.behavior,
                m.counts.qa,
                m.counts.skipped
            ));
        }
        Command::Train { strategy: s, train } => {
            if let Some(s) = s {
                cfg.train.strategy = strategy(&s)?;
            }
            train.apply(&mut cfg);
            cfg.propagate_seed();
            cfg.data = Some(data.clone());
            let out = cli
                .out
                .unwrap_or_else(|| data.join("runs").join(maskbench_cli::commands::run_id(&cfg)));
            let rec = cmd_train(&cfg, &out, cli.force, quiet)?;
            say(format!("run {} in {}", rec.run_id, out.display()));
            if let (Some(a), Some(b)) = (rec.initial_loss, rec.final_loss) {
                say(format!("smoothed loss {a:.4} -> {b:.4}"));
            }
            say(format!("mean auc {}", rec.mean_auc.map_or("-".into(), |m| format!("{m:.6}"))));
        }
        Command::Probe {
            checkpoint,
            untrained,
            strategy: s,
            tasks,
        } => {
            if let Some(s) = s {
                cfg.train.strategy = strategy(&s)?;
            }
            if tasks.is_some() {
                cfg.tasks = tasks;
            }
            cfg.propagate_seed();
            cfg.data = Some(data);
            let source = match (&checkpoint, untrained) {
                (Some(p), _) => ProbeSource::Checkpoint(p),
                (None, true) => ProbeSource::Untrained,
                (None, false) => return Err(CliError::Usage("probe needs --checkpoint or --untrained".into())),
            };
            let report = cmd_probe(&cfg, source)?;
            let text = RESULTS_HEADER.to_string() + &report.tsv_rows();
            match cli.out {
                Some(p) => std::fs::write(&p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
                None => print!("{text}"),
            }
        }
        Command::Compare { strategies, train } => {
            if let Some(tags) = strategies {
                cfg.strategies = tags.iter().map(|t| strategy(t)).collect::<Result<_>>()?;
            }
            train.apply(&mut cfg);
            cfg.propagate_seed();
            cfg.data = cli.data.or(file_data);
            let out = cli
                .out
                .unwrap_or_else(|| data.join("compare").join(cfg.hash()));
            let report = cmd_compare(&cfg, &out, cli.force, quiet)?;
            say(report.to_tsv());
            if let Some(r) = report.rows.iter().find(|r| r.status != maskbench_cli::RowStatus::Ok) {
                return Err(CliError::Numeric(format!("strategy {} failed", r.strategy)));
            }
        }
        Command::Score { pairs, checkpoint } => {
            cfg.data = Some(data);
            let out = cli.out.ok_or_else(|| CliError::Usage("score needs --out".into()))?;
            let n = cmd_score(&cfg, &pairs, checkpoint.as_deref(), &out)?;
            say(format!("scored {n} pairs into {}", out.display()));
        }
        Command::Filter { pairs, t_filter } => {
            let out = cli.out.ok_or_else(|| CliError::Usage("filter needs --out".into()))?;
            let t = t_filter.unwrap_or(cfg.qa.t_filter);
            let (n, kept) = cmd_filter(&pairs, t, &out)?;
            say(format!("kept {kept} of {n} pairs with difficulty >= {t}"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
