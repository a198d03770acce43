use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use branchlab::bnb::{solve, BnbConfig, Budget};
use branchlab::eval::PolicySpec;
use branchlab::milp::parse_instance;
use branchlab::pipeline::{PipelineConfig, PipelineError, Run};
use clap::{Args, Parser, Subcommand};

/// Learning-to-branch pipeline for mixed-integer linear programs.
#[derive(Parser)]
#[command(name = "branchlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory holding all artifacts.
    #[arg(long, short = 'd')]
    run_dir: PathBuf,
    /// Configuration file; defaults to <run-dir>/config.txt when present.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set envelope.p=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for collection and evaluation.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test instances.
    Generate(RunArgs),
    /// Record hybrid-expert episodes on the train split.
    Collect(RunArgs),
    /// Label returns, fit the envelope and keep the top p%.
    Select(RunArgs),
    /// Train the GCNN policy on the selected dataset.
    Train(RunArgs),
    /// Pick the best checkpoint on the valid split and score it on test.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Also copy the per-instance (clock, z*) series to this CSV.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Leaderboard against the configured baselines.
    Compare(RunArgs),
    /// Write reports/summary.txt and print it.
    Report(RunArgs),
    /// All stages in order.
    RunAll(RunArgs),
    /// Solve one instance file with a built-in rule.
    Solve {
        instance: PathBuf,
        #[arg(long, default_value = "pseudocost")]
        policy: String,
        #[arg(long)]
        max_nodes: Option<usize>,
        #[arg(long)]
        max_clock: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the (clock, z*) trace to this CSV.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
}

fn load_run(args: &RunArgs) -> Result<Run, PipelineError> {
    let default_path = args.run_dir.join("config.txt");
    let path = args.config.clone().or_else(|| default_path.exists().then_some(default_path));
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|source| PipelineError::Io { path: p.clone(), source })?;
            PipelineConfig::parse(&text)?
        }
        None => PipelineConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| PipelineError::Config(format!("--set expects KEY=VALUE, got '{o}'")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(w) = args.workers {
        config.set("workers", &w.to_string())?;
    }
    config.validate()?;
    Run::new(&args.run_dir, config)
}

fn pipeline(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Generate(a) => {
            let m = load_run(&a)?.generate()?;
            println!("generated {} train, {} valid, {} test instances", m.train.len(), m.valid.len(), m.test.len());
        }
        Command::Collect(a) => {
            let m = load_run(&a)?.collect()?;
            for f in &m.failures {
                eprintln!("warning: {}: {}", f.instance, f.error);
            }
            println!("collected {} episodes, {} transitions, {} failures", m.episodes.len(), m.total_transitions, m.failures.len());
        }
        Command::Select(a) => {
            let m = load_run(&a)?.select()?;
            println!(
                "selected {} of {} transitions (threshold {:.6}, envelope violation fraction {:.4})",
                m.selected, m.entries, m.threshold, m.envelope.violation_fraction
            );
        }
        Command::Train(a) => {
            let m = load_run(&a)?.train()?;
            if let Some(e) = m.diverged_at {
                eprintln!("warning: training diverged at epoch {e}; keeping earlier checkpoints");
            }
            println!("wrote {} checkpoints ({} train / {} valid samples)", m.checkpoints.len(), m.train_samples, m.valid_samples);
        }
        Command::Evaluate { run, plot_data } => {
            let r = load_run(&run)?;
            let m = r.evaluate()?;
            if let Some(dest) = plot_data {
                let src = r.root.join("reports/plot-eval-gcnn.csv");
                fs::copy(&src, &dest).map_err(|source| PipelineError::Io { path: dest.clone(), source })?;
            }
            println!("best checkpoint {}; test mean reward {}", m.best_checkpoint, m.test_mean_reward.map_or("-".into(), |v| v.to_string()));
        }
        Command::Compare(a) => {
            let m = load_run(&a)?.compare()?;
            for row in &m.leaderboard {
                println!("{}. {} {}", row.rank, row.policy, row.mean_reward.map_or("-".into(), |v| v.to_string()));
            }
            if let Some(t) = m.sign_test_vs_random {
                println!("sign test vs random: {} wins, {} losses, p = {:.3e}", t.wins, t.losses, t.p_value);
            }
        }
        Command::Report(a) => print!("{}", load_run(&a)?.report()?),
        Command::RunAll(a) => print!("{}", load_run(&a)?.run_all()?),
        Command::Solve { .. } => unreachable!(),
    }
    Ok(())
}

fn solve_one(path: &Path, policy: &str, budget: Budget, seed: u64, plot: Option<&Path>) -> anyhow::Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let inst = parse_instance(&text).with_context(|| format!("parsing {}", path.display()))?;
    let spec = match policy.parse::<PolicySpec>()? {
        PolicySpec::Random { .. } => PolicySpec::Random { seed },
        other => other,
    };
    let mut p = spec.build(inst.name());
    let res = solve(&inst, p.as_mut(), &BnbConfig { budget, ..Default::default() })?;
    println!(
        "{}",
        serde_json::json!({
            "instance": inst.name(),
            "policy": spec.name(),
            "status": res.status,
            "incumbent_value": res.incumbent_value,
            "nodes": res.nodes_processed,
            "clock": res.clock,
            "dual_integral": branchlab::bnb::dual_integral(&res.trace).ok(),
        })
    );
    if let Some(plot) = plot {
        let mut csv = String::from("clock,dual_bound\n");
        for (t, z) in &res.trace.events {
            csv.push_str(&format!("{t},{z}\n"));
        }
        fs::write(plot, csv).with_context(|| format!("writing {}", plot.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Command::Solve { instance, policy, max_nodes, max_clock, seed, plot_data } = cli.command {
        return match solve_one(&instance, &policy, Budget { max_nodes, max_clock }, seed, plot_data.as_deref()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        };
    }
    match pipeline(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
