use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use memxformer::harness::{
    ablate_memory, evaluate, offline_split, ordering_experiment, print_schema, run_offline, run_online, train_source,
    write_ablation_csv, write_ordering_csv, write_run_outputs, RunConfig, RunMode, Settings,
};
use memxformer::streamsim::{
    dataset_records, evaluation_set, gen_source_holdout, gen_target_stream, read_dump, records_to_dataset,
    stream_records, write_dump,
};
use memxformer::Checkpoint;

/// Memory-augmented student-teacher adaptation on synthetic shifted streams.
#[derive(Parser)]
#[command(name = "memx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and write `source.mxad`.
    TrainSource(Common),
    /// One pass over the target stream.
    AdaptOnline(AdaptArgs),
    /// Several passes over a target train split, evaluated on the held-out split.
    AdaptOffline {
        #[command(flatten)]
        adapt: AdaptArgs,
        /// Passes over the train split (overrides `epochs`).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy of a checkpoint on a data dump or on the configured target stream.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled dump written by `memx dump`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the student instead of the teacher.
        #[arg(long)]
        student: bool,
    },
    /// Online runs for several memory sizes.
    AblateMemory {
        #[command(flatten)]
        adapt: AdaptArgs,
        /// Comma-separated memory sizes.
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        sizes: Vec<usize>,
    },
    /// Online runs under several stream orders.
    OrderingExp {
        #[command(flatten)]
        adapt: AdaptArgs,
        #[arg(long, default_value_t = 5)]
        n_orders: usize,
    },
    /// Write the configured target stream or source holdout as a text dump.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = DumpWhat::Target)]
        what: DumpWhat,
    },
    /// Print every config key with its default.
    Schema,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DumpWhat {
    Target,
    SourceHoldout,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file (see `memx schema`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Any schema key is accepted.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    common: Common,
    /// Source checkpoint; trained on the fly when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut settings = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                Settings::parse(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Settings::default(),
        };
        for o in &self.overrides {
            settings.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            settings.set("seed", &seed.to_string())?;
        }
        Ok(settings)
    }

    fn run_config(&self) -> Result<RunConfig> {
        Ok(self.settings()?.build()?)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn source_checkpoint(config: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    match path {
        Some(p) => Checkpoint::load_file(p).with_context(|| format!("loading checkpoint {}", p.display())),
        None => {
            log::info!("no --checkpoint given; training the source model");
            Ok(train_source(config)?.checkpoint)
        }
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> memxformer::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn adapt(args: &AdaptArgs, settings: Settings) -> Result<()> {
    let config = settings.build()?;
    let ckpt = source_checkpoint(&config, args.checkpoint.as_deref())?;
    let outcome = match config.mode {
        RunMode::Online => run_online(&config, &ckpt)?,
        RunMode::Offline { .. } => run_offline(&config, &ckpt)?,
    };
    let out = args.common.out_dir()?;
    write_run_outputs(out, &outcome.report)?;
    outcome.checkpoint.save_file(out.join("adapted.mxad"))?;
    let r = &outcome.report;
    println!(
        "{}: source-only {:.4} -> {} {:.4} ({} steps, {} failed)",
        r.variant,
        r.source_only_accuracy,
        r.evaluated,
        r.final_accuracy,
        r.steps.len(),
        r.failed_steps
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSource(common) => {
            let config = common.run_config()?;
            let source = train_source(&config)?;
            let out = common.out_dir()?;
            source.checkpoint.save_file(out.join("source.mxad"))?;
            let summary = serde_json::json!({
                "config": config,
                "train_accuracy": source.train_accuracy,
                "holdout_accuracy": source.holdout_accuracy,
            });
            fs::write(out.join("source.json"), serde_json::to_string_pretty(&summary)?)?;
            println!(
                "source model: train {:.4}, holdout {:.4} -> {}",
                source.train_accuracy,
                source.holdout_accuracy,
                out.join("source.mxad").display()
            );
        }
        Command::AdaptOnline(args) => {
            let mut settings = args.common.settings()?;
            settings.set("mode", "online")?;
            adapt(&args, settings)?;
        }
        Command::AdaptOffline { adapt: args, epochs } => {
            let mut settings = args.common.settings()?;
            settings.set("mode", "offline")?;
            if let Some(e) = epochs {
                settings.set("epochs", &e.to_string())?;
            }
            adapt(&args, settings)?;
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            student,
        } => {
            let config = common.run_config()?;
            let ckpt = Checkpoint::load_file(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let dataset = match &data {
                Some(path) => {
                    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                    let (dim, records) = read_dump(BufReader::new(file))?;
                    records_to_dataset(dim, &records)?
                }
                None => {
                    let stream = match config.mode {
                        RunMode::Online => gen_target_stream(
                            &config.domain,
                            &config.shift,
                            config.stream_length,
                            config.order_seed,
                            config.jitter_std,
                        )?,
                        RunMode::Offline { .. } => offline_split(&config)?.1,
                    };
                    evaluation_set(config.domain.dim, &stream)?
                }
            };
            let params = if student { &ckpt.state.student } else { &ckpt.state.teacher };
            let accuracy = evaluate(params, &dataset)?;
            let summary = serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "data": data.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "target stream".into()),
                "evaluated": if student { "student" } else { "teacher" },
                "instances": dataset.len(),
                "accuracy": accuracy,
            });
            fs::write(common.out_dir()?.join("eval.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("accuracy {accuracy:.4} on {} instances", dataset.len());
        }
        Command::AblateMemory { adapt: args, sizes } => {
            let config = args.common.run_config()?;
            let ckpt = source_checkpoint(&config, args.checkpoint.as_deref())?;
            let rows = ablate_memory(&config, &ckpt, &sizes)?;
            let out = args.common.out_dir()?;
            write_file(&out.join("ablation.csv"), |w| write_ablation_csv(w, &rows))?;
            for r in &rows {
                println!("N_l={:<6} accuracy {:.4} (source-only {:.4})", r.n_memory, r.final_accuracy, r.source_only_accuracy);
            }
        }
        Command::OrderingExp { adapt: args, n_orders } => {
            let config = args.common.run_config()?;
            let ckpt = source_checkpoint(&config, args.checkpoint.as_deref())?;
            let report = ordering_experiment(&config, &ckpt, n_orders)?;
            let out = args.common.out_dir()?;
            write_file(&out.join("ordering.csv"), |w| write_ordering_csv(w, &report))?;
            println!("final accuracy over {n_orders} orders: mean {:.4}, std {:.4}", report.mean, report.std);
        }
        Command::Dump { common, what } => {
            let config = common.run_config()?;
            let out = common.out_dir()?;
            let dim = config.domain.dim;
            let (name, records) = match what {
                DumpWhat::Target => {
                    let stream = gen_target_stream(
                        &config.domain,
                        &config.shift,
                        config.stream_length,
                        config.order_seed,
                        config.jitter_std,
                    )?;
                    ("target.dump", stream_records(&stream))
                }
                DumpWhat::SourceHoldout => (
                    "source_holdout.dump",
                    dataset_records(&gen_source_holdout(&config.domain, config.holdout_size)?),
                ),
            };
            let n = records.len();
            write_file(&out.join(name), |w| write_dump(w, dim, records))?;
            println!("{n} records -> {}", out.join(name).display());
        }
        Command::Schema => print!("{}", print_schema()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
