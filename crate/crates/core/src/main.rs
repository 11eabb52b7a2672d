use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alignlab::harness::{self, ExperimentConfig, OneOrMany};
use alignlab::objectives::{ObjectiveKind, ObjectiveSpec};
use alignlab::tasks::Task;
use alignlab::transform::TransformSpec;
use alignlab::{Error, Result};

/// Pre-train, fine-tune and evaluate encoders on a language and its
/// derived counterparts.
#[derive(Parser)]
#[command(name = "alignlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build corpora, derived language, tokenizer, correspondence, instances and task data.
    GenData(Grid),
    /// Train only the shared BPE tokenizer.
    TrainBpe(Grid),
    /// Pre-train every (transform, objective, seed) run; resumes interrupted runs.
    Pretrain(Grid),
    /// Fine-tune pre-trained runs on original and derived task data.
    Finetune(Grid),
    /// Score fine-tuned runs and write their result rows.
    Eval(Grid),
    /// Aggregate result rows into tables, plot data and correlations.
    Report(ReportArgs),
    /// All stages, then the report.
    Run(Grid),
    /// Print the resolved configuration as TOML.
    Config(Grid),
}

#[derive(Args, Clone)]
struct Grid {
    /// Experiment config (TOML); the desk profile when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Task names: NLI, NER, POS.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Transform names such as Trans,Trans+Inv,Trans+Syn.
    #[arg(long, value_delimiter = ',')]
    transform: Option<Vec<String>>,
    /// Objective names: MLM, XLM, DICT, ALIGN_MLM.
    #[arg(long, value_delimiter = ',')]
    objective: Option<Vec<String>>,
    /// ALIGN-MLM weight α.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    instance_len: Option<usize>,
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    grid: Grid,
    /// Report on a rows CSV instead of the grid's runs.
    #[arg(long)]
    rows: Option<PathBuf>,
    /// Directory for the report files (default: <output_dir>/report).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cells left out on purpose, as OBJECTIVE/TRANSFORM. Repeatable.
    #[arg(long)]
    absent: Vec<String>,
}

impl Grid {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk("alignlab-out"),
        };
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = &self.tasks {
            cfg.tasks = v.iter().map(|s| Task::parse(s)).collect::<Result<_>>()?;
        }
        if let Some(v) = &self.transform {
            cfg.transform = OneOrMany::Many(v.iter().map(|s| s.parse::<TransformSpec>()).collect::<Result<_>>()?);
        }
        if let Some(v) = &self.objective {
            let specs = v.iter().map(|s| ObjectiveKind::parse(s).map(ObjectiveSpec::new)).collect::<Result<_>>()?;
            cfg.objective = OneOrMany::Many(specs);
        }
        if let Some(a) = self.alpha {
            let specs = cfg.objectives().into_iter().map(|o| ObjectiveSpec { alpha: a, ..o }).collect();
            cfg.objective = OneOrMany::Many(specs);
        }
        if let Some(v) = self.total_steps {
            cfg.train.total_steps = v;
        }
        if let Some(v) = self.warmup_steps {
            cfg.train.warmup_steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.vocab_size {
            cfg.data.vocab_size = v;
        }
        if let Some(v) = self.instance_len {
            cfg.data.instance_len = v;
            cfg.encoder.max_positions = cfg.encoder.max_positions.max(v);
        }
        if let Some(v) = self.log_every {
            cfg.log_every = v;
        }
        cfg.validate()?;
        cfg.check_files()?;
        Ok(cfg)
    }
}

fn parse_absent(items: &[String]) -> Result<BTreeSet<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('/')
                .map(|(o, t)| (o.to_string(), t.to_string()))
                .ok_or_else(|| Error::Config(format!("--absent expects OBJECTIVE/TRANSFORM, got {s:?}")))
        })
        .collect()
}

fn print_report(r: &harness::Report) {
    for f in &r.files {
        println!("{}", f.display());
    }
    for (task, c) in &r.correlations {
        match (c.rho, c.p_value) {
            (Some(rho), Some(p)) => println!("{task}: rho_s(alignment, -delta) = {rho:.3} (p = {p:.3}, n = {})", c.n),
            _ => println!("{task}: no correlation ({})", c.error.as_deref().unwrap_or("unknown")),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(g) => {
            let cfg = g.resolve()?;
            for (spec, outcome) in cfg.transforms().iter().zip(harness::cmd_gen_data(&cfg)?) {
                println!("{spec}: {outcome:?}");
            }
        }
        Command::TrainBpe(g) => harness::cmd_train_bpe(&g.resolve()?)?,
        Command::Pretrain(g) => harness::cmd_pretrain(&g.resolve()?)?,
        Command::Finetune(g) => harness::cmd_finetune(&g.resolve()?)?,
        Command::Eval(g) => {
            for r in harness::cmd_eval(&g.resolve()?)? {
                println!("{} {} {} seed {}: B_S {:.2} B_Z {:.2} delta {:.2} alignment {:.1}", r.objective, r.transform, r.task, r.seed, r.b_s, r.b_z, r.delta, r.alignment);
            }
        }
        Command::Report(a) => {
            let absent = parse_absent(&a.absent)?;
            let report = match &a.rows {
                Some(rows) => {
                    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("report"));
                    harness::write_report(&harness::read_rows(rows)?, &absent, &out)?
                }
                None => {
                    let cfg = a.grid.resolve()?;
                    if let Some(out) = &a.out {
                        harness::write_report(&harness::collect_rows(&cfg, &absent)?, &absent, out)?
                    } else {
                        harness::cmd_report(&cfg, &absent)?
                    }
                }
            };
            print_report(&report);
        }
        Command::Run(g) => print_report(&harness::run_grid(&g.resolve()?)?),
        Command::Config(g) => print!("{}", g.resolve()?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
