use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use trendfuzz::store::{FsStore, SharedStore};
use trendfuzz::telemetry::{self, RunWriter};
use trendfuzz::{CampaignConfig, Policy};

#[derive(Parser)]
#[command(
    name = "trendfuzz",
    version,
    about = "Trend-driven ensemble fuzzing scheduler"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a campaign.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Total CPU budget in seconds.
        #[arg(long = "cpu-budget")]
        cpu_budget: Option<f64>,
        #[arg(long)]
        cores: Option<u32>,
        #[arg(long)]
        policy: Option<Policy>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from the state left in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write round table, coverage series and allocation heat map.
    Report { dir: PathBuf },
    /// Rank campaigns by final coverage density.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

/// Exit status for bad configuration or usage.
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 1;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run {
            config,
            cpu_budget,
            cores,
            policy,
            seed,
            output,
            resume,
        } => {
            let mut cfg = match CampaignConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(b) = cpu_budget {
                cfg.schedule.total_budget = b;
            }
            if let Some(c) = cores {
                cfg.schedule.cores = c;
            }
            if let Some(p) = policy {
                cfg.schedule.policy = p;
            }
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            if let Err(e) = cfg.check("command line") {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
            match run(&cfg, resume) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => {
                    eprintln!("campaign aborted: no fuzzer left running");
                    ExitCode::from(EXIT_ABORT)
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(EXIT_ABORT)
                }
            }
        }
        Command::Report { dir } => finish(report(&dir)),
        Command::Compare { dirs } => finish(compare(&dirs)),
    }
}

fn finish(r: anyhow::Result<()>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ABORT)
        }
    }
}

/// Returns false if the campaign aborted.
fn run(cfg: &CampaignConfig, resume: bool) -> anyhow::Result<bool> {
    let dir = &cfg.output_dir;
    let mut writer = RunWriter::open(dir, resume)?;
    let store: SharedStore = Arc::new(FsStore);
    let (campaign, _monitors) = cfg.build(store)?;
    let (mut campaign, resumed) = if resume {
        telemetry::resume(dir, campaign)?
    } else {
        (campaign.with_syncer(telemetry::syncer_for(dir)), false)
    };
    if resumed {
        log::info!("resuming after round {}", campaign.state().round);
    }
    let result = campaign.run(&mut writer)?;
    let summary = telemetry::summarize(
        &result,
        &campaign,
        &cfg.mode.to_string(),
        cfg.scenario.as_deref(),
    );
    writer.finish(&campaign, &summary)?;
    println!(
        "{} rounds, {:.0} CPU seconds, final density {:.6}",
        result.rounds.len(),
        result.elapsed_cpu,
        result.final_density
    );
    Ok(!result.aborted)
}

fn report(dir: &std::path::Path) -> anyhow::Result<()> {
    let report = telemetry::build_report(dir)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let out = telemetry::write_report(dir, &report).context("writing report")?;
    print!("{}", report.table_text);
    println!("report written to {}", out.display());
    Ok(())
}

fn compare(dirs: &[PathBuf]) -> anyhow::Result<()> {
    let rows = telemetry::compare(dirs)?;
    print!("{}", telemetry::render_compare(&rows));
    Ok(())
}
