use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gprompt::experiment::{
    cmd_eval, cmd_export_embeddings, cmd_pretrain, cmd_prompt_train, cmd_run, cmd_split,
    ExperimentConfig, RunSeeds, Task,
};
use gprompt::graphdata::{synth_node_graph, synth_shift_dataset, Dataset, SynthSpec};
use gprompt::shiftsplit::Property;
use gprompt::{Error, Result};

/// Unsupervised graph prompting: pretrain a GNN on a source split, freeze it,
/// and train an input prompt on an unlabeled covariate-shifted target split.
#[derive(Parser)]
#[command(name = "gprompt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the source/target split manifest and print the mean property per side.
    Split {
        #[command(flatten)]
        exp: ExpArgs,
        /// Split seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manifest path [default: <output_dir>/split.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the base GNN on the source side and save its checkpoint.
    Pretrain {
        #[command(flatten)]
        exp: ExpArgs,
        #[command(flatten)]
        cell: CellArgs,
        /// Checkpoint path [default: <output_dir>/model.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a prompt for a saved model on the unlabeled target side.
    PromptTrain {
        #[command(flatten)]
        exp: ExpArgs,
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        model: PathBuf,
        /// Prompt path [default: <output_dir>/prompt.json].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch CSV log [default: <output_dir>/prompt_log.csv].
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Target-test macro-F1 of a saved model, optionally through a saved prompt.
    Eval {
        #[command(flatten)]
        exp: ExpArgs,
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
    },
    /// Full seed × trial protocol; writes results.csv and summary.csv.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Generate a synthetic dataset as JSON.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Graph)]
        kind: SynthKind,
        #[arg(long, default_value_t = 200)]
        n_graphs: usize,
        /// Nodes per graph (node kind: nodes in the single graph).
        #[arg(long, default_value_t = 12)]
        nodes: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0.2)]
        homophily_lo: f64,
        #[arg(long, default_value_t = 1.0)]
        homophily_hi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Graph embeddings with and without the prompt, one CSV row per graph and variant.
    ExportEmbeddings {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value_t = 0)]
        seed_index: usize,
        #[arg(long)]
        model: PathBuf,
        /// Prompt checkpoint; a zero prompt when omitted.
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// CSV path [default: <output_dir>/embeddings.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Graph,
    Node,
}

#[derive(Args)]
struct ExpArgs {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dataset file (JSON) or TU-format directory; replaces the config's data source.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    property: Option<String>,
    /// Config override as dotted key=value, e.g. `prompt.tau=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct CellArgs {
    /// Which split seed of the protocol (0-based).
    #[arg(long, default_value_t = 0)]
    seed_index: usize,
    #[arg(long, default_value_t = 0)]
    trial: usize,
}

impl ExpArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load_unchecked(path, &self.overrides)?,
            None => ExperimentConfig::default().with_overrides(&self.overrides)?,
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
            cfg.synth = None;
        }
        if let Some(t) = &self.task {
            cfg.task = t.parse::<Task>()?;
        }
        if let Some(p) = &self.property {
            cfg.property = p.parse::<Property>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn or_default(path: &Option<PathBuf>, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    path.clone()
        .unwrap_or_else(|| cfg.resolved_output_dir().join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split { exp, seed, out } => {
            let cfg = exp.load()?;
            let out = or_default(&out, &cfg, "split.json");
            let s = cmd_split(&cfg, seed, &out)?;
            println!("manifest: {}", out.display());
            println!(
                "source: n={} mean {}={:.6}",
                s.manifest.source.len(),
                cfg.property,
                s.source_mean
            );
            println!(
                "target: n={} mean {}={:.6}",
                s.manifest.target.len(),
                cfg.property,
                s.target_mean
            );
        }
        Command::Pretrain { exp, cell, out } => {
            let cfg = exp.load()?;
            let out = or_default(&out, &cfg, "model.json");
            let r = cmd_pretrain(&cfg, cell.seed_index, cell.trial, &out)?;
            println!("checkpoint: {}", out.display());
            println!("source_val_f1,{:.6}", r.source_val_f1);
            println!("source_test_f1,{:.6}", r.source_test_f1);
            println!("target_test_f1,{:.6}", r.target_test_f1);
        }
        Command::PromptTrain {
            exp,
            cell,
            model,
            out,
            log,
        } => {
            let cfg = exp.load()?;
            let out = or_default(&out, &cfg, "prompt.json");
            let log = or_default(&log, &cfg, "prompt_log.csv");
            let o = cmd_prompt_train(&cfg, &model, cell.seed_index, cell.trial, &out, Some(&log))?;
            println!("prompt: {}", out.display());
            println!("best_epoch,{}", o.best_epoch);
            println!("best_val_f1,{:.6}", o.best_val_f1);
        }
        Command::Eval {
            exp,
            cell,
            model,
            prompt,
        } => {
            let cfg = exp.load()?;
            let r = cmd_eval(&cfg, &model, prompt.as_deref(), cell.seed_index, cell.trial)?;
            println!("method,f1,imp");
            println!("base,{:.6},0.0", r.base_f1);
            if let (Some(f1), Some(gain)) = (r.prompted_f1, r.imp()) {
                match gain {
                    Ok(g) => println!("ugprompt,{f1:.6},{g:.1}"),
                    Err(_) => println!("ugprompt,{f1:.6},NA"),
                }
            }
        }
        Command::Run { exp } => {
            let cfg = exp.load()?;
            let (report, dir) = cmd_run(&cfg)?;
            print!("{}", report.summary_csv());
            println!("results: {}", dir.join("results.csv").display());
            if !report.failures.is_empty() {
                eprintln!(
                    "{} of {} runs failed",
                    report.failures.len(),
                    cfg.n_seeds * cfg.n_trials
                );
            }
        }
        Command::Synth {
            kind,
            n_graphs,
            nodes,
            classes,
            dim,
            homophily_lo,
            homophily_hi,
            seed,
            out,
        } => {
            let ds = match kind {
                SynthKind::Graph => synth_shift_dataset(&SynthSpec {
                    n_graphs,
                    nodes_per_graph: nodes,
                    num_classes: classes,
                    feature_dim: dim,
                    homophily: (homophily_lo, homophily_hi),
                    seed,
                })?,
                SynthKind::Node => {
                    let g = synth_node_graph(nodes, classes, dim, seed)?;
                    Dataset::new("synth_node", classes, dim, vec![g])?
                }
            };
            write_dataset(&ds, &out)?;
            println!("wrote {} graphs to {}", ds.len(), out.display());
        }
        Command::ExportEmbeddings {
            exp,
            seed_index,
            model,
            prompt,
            out,
        } => {
            let cfg = exp.load()?;
            let out = or_default(&out, &cfg, "embeddings.csv");
            let seeds = RunSeeds::derive(cfg.seed, seed_index, 0);
            let rows = cmd_export_embeddings(&cfg, &model, prompt.as_deref(), seeds, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(())
}

fn write_dataset(ds: &Dataset, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    ds.save_json(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().try_into().unwrap_or(1)
}
