use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualcast::config::{RunConfig, Variant};
use dualcast::pipeline::{ablate, with_client, Pipeline};
use dualcast::{Error, Result};

#[derive(Parser)]
#[command(name = "dualcast", version, about = "Dual-branch multimodal forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct Opts {
    /// JSON file of dotted configuration keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Restrict the run to one horizon.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// replay, oracle or http.
    #[arg(long, global = true)]
    client: Option<String>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any key, e.g. `--set train.stage3_epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset and write the windows.
    Prepare,
    /// Write the synthetic event dataset as CSV files.
    Synth,
    /// Template, summaries and plain reasoning.
    PrecomputeEvents,
    /// Correct training forecasts and build the knowledge base.
    BuildKb,
    /// Guided reasoning for held-out windows, then the three training stages.
    Train,
    /// Score the test windows with the trained checkpoint.
    Predict,
    /// Metrics report from stored predictions.
    Evaluate,
    /// Plots and fusion diagnostics.
    Analyze,
    /// Run ablation variants side by side.
    Ablate {
        /// Comma-separated variants; the standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Train, predict and evaluate every horizon.
    Run,
}

fn resolve(o: &Opts) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg = cfg.set(k.trim(), v)?;
    }
    if let Some(s) = o.seed {
        cfg.run.seed = s;
    }
    if let Some(j) = o.jobs {
        cfg.run.jobs = j;
    }
    if let Some(v) = &o.variant {
        cfg.run.variant = v.clone();
    }
    if let Some(h) = o.horizon {
        cfg.split.horizons = vec![h];
    }
    if let Some(c) = &o.client {
        cfg.client.kind = c.clone();
    }
    if let Some(d) = &o.cache_dir {
        cfg.run.cache_dir = Some(d.clone());
    }
    if let Some(d) = &o.out {
        cfg.run.out = d.clone();
    }
    let variant: Variant = cfg.run.variant.parse()?;
    let cfg = variant.apply(&cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.opts)?;
    with_client(&cfg, |client| {
        if let Command::Ablate { variants } = &cli.command {
            let list = if variants.is_empty() { Variant::all() } else { variants.iter().map(|v| v.parse()).collect::<Result<_>>()? };
            let reports = ablate(&cfg, &list, client)?;
            print!("{}", dualcast::evaluation::comparison_table(&reports));
            return Ok(());
        }
        let p = Pipeline::new(cfg.clone(), client)?;
        let horizons = cfg.split.horizons.clone();
        match &cli.command {
            Command::Prepare => {
                for h in horizons {
                    let w = p.prepare(h)?;
                    println!("h{h}: {} train, {} val, {} test windows", w.train.len(), w.val.len(), w.test.len());
                }
            }
            Command::Synth => println!("wrote {}", p.synth()?.display()),
            Command::PrecomputeEvents => {
                for h in horizons {
                    let e = p.precompute_events(&p.prepare(h)?)?;
                    println!("h{h}: {} summaries", e.train_summaries.len() + e.val_summaries.len() + e.test_summaries.len());
                }
            }
            Command::BuildKb => {
                for h in horizons {
                    let w = p.prepare(h)?;
                    let kb = p.build_kb(&w, &p.precompute_events(&w)?)?;
                    println!("h{h}: {} knowledge-base entries", kb.len());
                }
            }
            Command::Train => {
                for h in horizons {
                    let r = p.train_horizon(h)?;
                    println!("h{h}: stage-3 lr {}", r.selected_lr);
                }
            }
            Command::Predict => {
                for h in horizons {
                    println!("h{h}: {} test windows", p.predict_horizon(h)?.len());
                }
            }
            Command::Evaluate => print!("{}", p.evaluate()?.to_text()),
            Command::Analyze => {
                for a in p.analyze()? {
                    for f in a.plots {
                        println!("{}", f.display());
                    }
                }
            }
            Command::Run => print!("{}", p.run()?.to_text()),
            Command::Ablate { .. } => unreachable!(),
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
