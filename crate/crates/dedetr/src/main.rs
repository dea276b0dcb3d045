use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dedetr::experiments::{Runner, EVAL_FILE, LOSS_FILE, AP_FILE, PROBE_FILE};
use dedetr::registry::Registry;
use dedetr::report::{self, write_csv};
use dedetr::{dataset, CliError, RunConfig};
use dedetr_core::synth::generate_dataset;

#[derive(Parser)]
#[command(name = "dedetr", version, about = "Few-shot detection experiments on a synthetic shape world")]
struct Cli {
    /// Root directory for runs and tables (falls back to DEDETR_OUT, then the config, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of runs to execute in parallel (falls back to DEDETR_JOBS, then 1).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, fine-tune and evaluate one configuration.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// The four-row module ladder over several seeds and shot counts.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        shots: Vec<usize>,
    },
    /// Novel AP50 as a function of the prompt weight w.
    SweepW {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
        values: Vec<f64>,
    },
    /// Soft against learnable encoder-decoder skip over several seeds.
    CompareSkip {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Re-evaluate a stored run and print per-decoder-layer novel AP50.
    ProbeLayers {
        #[arg(long)]
        run: String,
    },
    /// Write a run's tables as delimited files.
    Export {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long = "to")]
        to: PathBuf,
    },
    /// Generate the synthetic dataset described by a config and save it.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "to")]
        to: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Tsv,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn output_root(cli: Option<&PathBuf>, config: Option<&RunConfig>) -> PathBuf {
    cli.cloned()
        .or_else(|| std::env::var_os("DEDETR_OUT").map(PathBuf::from))
        .or_else(|| config.and_then(|c| c.output.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn jobs(cli: Option<usize>) -> Result<usize, CliError> {
    match cli {
        Some(j) => Ok(j),
        None => match std::env::var("DEDETR_JOBS") {
            Ok(v) => v.parse().map_err(|_| CliError::Usage(format!("DEDETR_JOBS={v} is not a count"))),
            Err(_) => Ok(1),
        },
    }
}

fn runner(cli: &Cli, config: Option<&RunConfig>) -> Result<Runner, CliError> {
    let registry = Registry::open(output_root(cli.out.as_ref(), config))?;
    Ok(Runner::new(registry, jobs(cli.jobs)?))
}

fn export(runner: &Runner, id: &str, format: Format, to: &Path) -> Result<(), CliError> {
    runner.registry().find(id)?;
    let dir = runner.registry().run_dir(id);
    std::fs::create_dir_all(to).map_err(|e| CliError::io(to, e))?;
    let (delim, ext) = match format {
        Format::Csv => (b',', "csv"),
        Format::Tsv => (b'\t', "tsv"),
    };
    for name in [LOSS_FILE, AP_FILE, PROBE_FILE] {
        let stem = name.trim_end_matches(".csv");
        report::convert_table(&dir.join(name), b',', &to.join(format!("{stem}.{ext}")), delim)?;
    }
    let eval = dir.join(EVAL_FILE);
    std::fs::copy(&eval, to.join(EVAL_FILE)).map_err(|e| CliError::io(&eval, e))?;
    println!("exported {id} to {}", to.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run { config, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            let r = runner(cli, Some(&cfg))?;
            let rec = r.run(&cfg)?;
            println!("run {} config_hash {} seed {}", rec.id, cfg.hash(), cfg.seed);
            print!("{}", report::eval_report_kv(&rec.report, &cfg.hash(), cfg.seed));
        }
        Command::Ablate { config, seeds, shots } => {
            let cfg = load_config(config.as_deref())?;
            let r = runner(cli, Some(&cfg))?;
            let table = r.ablate(&cfg, seeds, shots)?;
            let path = r.registry().root().join(format!("ablation-{}.csv", cfg.short_hash()));
            write_csv(&path, &table.rows)?;
            print!("{}", table.render());
            println!("table written to {}", path.display());
            if table.rows.iter().any(|x| x.nap50.is_none()) {
                return Err(CliError::format("ablation", "some runs failed; see status column"));
            }
        }
        Command::SweepW { config, seed, values } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            let r = runner(cli, Some(&cfg))?;
            let rows = r.sweep_w(&cfg, values)?;
            let path = r.registry().root().join(format!("sweep-w-{}.csv", cfg.short_hash()));
            write_csv(&path, &rows)?;
            println!("{:<6} {:>8} {:>8}  config_hash seed", "w", "nap50", "bap50");
            for x in &rows {
                println!("{:<6.2} {:>8.4} {:>8.4}  {} {}", x.w, x.nap50, x.bap50, &x.config_hash[..12], x.seed);
            }
            if let Some(best) = rows.iter().max_by(|a, b| a.nap50.total_cmp(&b.nap50)) {
                println!("argmax w = {}", best.w);
            }
        }
        Command::CompareSkip { config, seeds } => {
            let cfg = load_config(config.as_deref())?;
            let r = runner(cli, Some(&cfg))?;
            let rows = r.compare_skip(&cfg, seeds)?;
            let path = r.registry().root().join(format!("compare-skip-{}.csv", cfg.short_hash()));
            write_csv(&path, &rows)?;
            println!("{:<15} {:>6} {:>6} {:>8}  config_hash", "mode", "params", "seed", "nap50");
            for x in &rows {
                let v = x.nap50.map_or_else(|| x.status.clone(), |v| format!("{v:.4}"));
                println!("{:<15} {:>6} {:>6} {:>8}  {}", x.mode, x.extra_params, x.seed, v, &x.config_hash[..12]);
            }
            let median = |mode: &str| {
                let v: Vec<f64> = rows.iter().filter(|x| x.mode == mode).filter_map(|x| x.nap50).collect();
                report::spread(&v).map(|s| s.1)
            };
            if let (Some(a), Some(b)) = (median("soft_skip"), median("learnable_skip")) {
                println!("median gap soft - learnable = {:+.4}", a - b);
            }
            if rows.iter().any(|x| x.nap50.is_none()) {
                return Err(CliError::format("comparison", "some runs failed; see status column"));
            }
        }
        Command::ProbeLayers { run } => {
            let r = runner(cli, None)?;
            let (cfg, report) = r.probe(run)?;
            println!("run {run} config_hash {} seed {}", cfg.hash(), cfg.seed);
            for (j, v) in report.layer_nap50.iter().enumerate() {
                println!("layer {} nap50 {v:.4}", j + 1);
            }
            println!("best_layer {}", report.best_layer);
        }
        Command::Export { run, format, to } => export(&runner(cli, None)?, run, *format, to)?,
        Command::GenData { config, to } => {
            let cfg = load_config(config.as_deref())?;
            let d = generate_dataset(&cfg.world, cfg.data.n_train, cfg.data.n_test, cfg.data.seed);
            dataset::save(&d, to)?;
            println!("wrote {} train and {} test images to {}", d.train.len(), d.test.len(), to.display());
        }
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
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
