use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use analog_loop::agents::BackendSpec;
use analog_loop::evalkit::{PassMode, ReportDocument};
use analog_loop::memory::{load, render_store, retrieve, MemoryConfig, MemoryStore};
use analog_loop::model::parse_task_file;
use analog_loop::orchestrate::{load_tasks, run_benchmark, run_task, BenchConfig, ClockMode, LoopConfig, Workspace};
use analog_loop::verify::FixCatalog;

/// Generate-verify-curate loop for analog netlists.
#[derive(Parser)]
#[command(name = "analog-loop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one task through the loop.
    Run(RunArgs),
    /// Run every task in a directory n times and write a report.
    Bench(BenchArgs),
    /// Inspect a playbook store.
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
    },
    /// Render a report written by `bench`.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Wall,
    Logical,
}

#[derive(Args)]
struct LoopArgs {
    /// `scripted:<file>` or `http:<url>[#model]`.
    #[arg(long)]
    backend: String,
    /// Attempt budget.
    #[arg(long = "K", default_value_t = 30)]
    k: u32,
    #[arg(long)]
    no_bias_repair: bool,
    /// Tune passing designs with TPE.
    #[arg(long)]
    tune: bool,
    #[arg(long, default_value_t = 50)]
    tune_budget: usize,
    /// Defaults to logical for scripted backends, wall otherwise.
    #[arg(long, value_enum)]
    clock: Option<Clock>,
    /// Extra `signature = fix` lines for the diagnosis catalog.
    #[arg(long)]
    fixes: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Artifact directory; defaults to `workspace/task_<id>` next to the store.
    #[arg(long)]
    workspace: Option<PathBuf>,
    #[command(flatten)]
    looping: LoopArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sample,
    Attempt,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 30)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    trials: u32,
    /// Machine-readable report (JSON); the text form goes to stdout.
    #[arg(long)]
    report: PathBuf,
    /// Workspaces, progress log and shared store; defaults to `<report>.runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    isolated_memory: bool,
    #[arg(long, value_enum, default_value = "sample")]
    mode: Mode,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    passk: Vec<usize>,
    #[command(flatten)]
    looping: LoopArgs,
}

#[derive(Subcommand)]
enum MemoryAction {
    /// Print the store, or what a task type would retrieve.
    Show {
        #[arg(long)]
        store: PathBuf,
        #[arg(long = "type")]
        task_type: Option<String>,
    },
    /// Print the store as JSON.
    Export {
        #[arg(long)]
        store: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    passk: Vec<usize>,
    /// Report to compare against in the Imp row.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn loop_config(a: &LoopArgs, spec: &BackendSpec) -> Result<LoopConfig> {
    let mut catalog = FixCatalog::default();
    if let Some(p) = &a.fixes {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        catalog.extend(FixCatalog::parse(&text).map_err(anyhow::Error::msg)?);
    }
    let clock = match (a.clock, spec) {
        (Some(Clock::Wall), _) => ClockMode::Wall,
        (Some(Clock::Logical), _) => ClockMode::Logical,
        (None, BackendSpec::Scripted(_)) => ClockMode::Logical,
        (None, BackendSpec::Http(_)) => ClockMode::Wall,
    };
    Ok(LoopConfig {
        k: a.k,
        enable_bias_repair: !a.no_bias_repair,
        enable_tuning: a.tune,
        tune_budget: a.tune_budget,
        catalog,
        clock,
        ..LoopConfig::default()
    })
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let text = fs::read_to_string(&a.task).with_context(|| format!("reading {}", a.task.display()))?;
    let task = parse_task_file(&text)?;
    let spec = BackendSpec::parse(&a.looping.backend).map_err(anyhow::Error::msg)?;
    let cfg = loop_config(&a.looping, &spec)?;
    let store = MemoryStore::open(&a.store, task.constraints.all_conventions(), MemoryConfig::default())?;
    let root = a.workspace.unwrap_or_else(|| {
        a.store
            .parent()
            .unwrap_or(Path::new("."))
            .join("workspace")
            .join(format!("task_{}", task.task_id))
    });
    if root.exists() && fs::read_dir(&root)?.next().is_some() {
        bail!("workspace {} is not empty; artifacts are write-once", root.display());
    }
    let ws = Workspace::create(&root)?;
    let st = run_task(&task, spec.backend(), &store, &mut Vec::new(), &cfg, Some(&ws))?;
    match st.first_success_at {
        Some(i) => println!("task {}: PASS at attempt {i} of {}", task.task_id, cfg.k),
        None => println!("task {}: no passing design in {} attempts", task.task_id, st.attempts),
    }
    println!(
        "tokens {}; rules added {}; store version {}; workspace {}",
        st.cumulative_tokens,
        st.curated,
        store.version(),
        root.display()
    );
    if let Some(t) = &st.tuning {
        println!("tuning: best loss {:e} after {} trials (improved: {})", t.best.loss, t.history.len(), t.improved);
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let tasks = load_tasks(&a.tasks)?;
    if tasks.is_empty() {
        bail!("no .task files in {}", a.tasks.display());
    }
    let spec = BackendSpec::parse(&a.looping.backend).map_err(anyhow::Error::msg)?;
    let looping = loop_config(&a.looping, &spec)?;
    let out = a.out.unwrap_or_else(|| a.report.with_extension("runs"));
    let cfg = BenchConfig {
        n_samples: a.n,
        trials: a.trials,
        isolated_memory: a.isolated_memory,
        looping,
        mode: match a.mode {
            Mode::Sample => PassMode::Sample,
            Mode::Attempt => PassMode::Attempt,
        },
        ks: a.passk.clone(),
        stop_after: None,
    };
    let r = run_benchmark(&tasks, spec.backend(), &cfg, &out)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.report, r.report.to_json())?;
    print!("{}", r.report.render_text(&a.passk, None));
    Ok(())
}

fn cmd_memory(action: MemoryAction) -> Result<()> {
    match action {
        MemoryAction::Show { store, task_type } => {
            let m = load(&store)?;
            match task_type {
                None => print!("{}", render_store(&m)),
                Some(t) => {
                    for e in retrieve(&m, &t, &MemoryConfig::default()) {
                        println!("- {} [{}]", e.rule, e.entry_id);
                    }
                }
            }
        }
        MemoryAction::Export { store } => {
            let m = load(&store)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let read = |p: &Path| -> Result<ReportDocument> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(ReportDocument::from_json(&text)?)
    };
    let r = read(&a.report)?;
    let baseline = a.baseline.as_deref().map(read).transpose()?;
    if a.json {
        println!("{}", r.to_json());
    } else {
        print!("{}", r.render_text(&a.passk, baseline.as_ref()));
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Memory { action } => cmd_memory(action),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
