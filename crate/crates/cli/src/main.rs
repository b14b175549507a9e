use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use itemvoice_cli::commands::{
    cmd_evaluate, cmd_extract, cmd_predict, cmd_synth, cmd_timeline, cmd_train,
};
use itemvoice_cli::config::RunConfig;
use itemvoice_core::corpus::{parse_manifest, ScaleDefinition, ScaleName, Split};
use itemvoice_core::model::ModelKind;
use itemvoice_core::synth::SynthConfig;
use itemvoice_core::train::load_trained;
use itemvoice_core::vote::VoteMethod;
use itemvoice_core::Result;

#[derive(Parser)]
#[command(
    name = "itemvoice",
    version,
    about = "Item-level depression screening from speech"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Overrides {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated 1-based item indices.
    #[arg(long, value_delimiter = ',')]
    items: Option<Vec<usize>>,
    #[arg(long)]
    multitask: bool,
    #[arg(long)]
    drop_last: bool,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    vote: Option<VoteMethod>,
    /// `auto`, `mean_prob` or `count_threshold:K`.
    #[arg(long)]
    combination: Option<String>,
    #[arg(long)]
    no_depression_model: bool,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(i) = &self.items {
            cfg.items = Some(i.clone());
        }
        cfg.multitask |= self.multitask;
        cfg.segmentation.drop_last |= self.drop_last;
        if let Some(m) = self.model {
            cfg.model = m;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(n) = self.max_epochs {
            cfg.train.max_epochs = n;
        }
        if let Some(n) = self.batch_size {
            cfg.train.batch_size = n;
        }
        if let Some(n) = self.trials {
            cfg.train.n_search_trials = n;
        }
        if let Some(v) = self.vote {
            cfg.vote.method = v;
        }
        if let Some(c) = &self.combination {
            cfg.vote.combination = c.clone();
        }
        if self.no_depression_model {
            cfg.depression_model = false;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute log-mel caches and a per-recording summary.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "madrs")]
        scale: ScaleName,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        drop_last: bool,
    },
    /// Train one model per item (and the depression model).
    Train(Overrides),
    /// Random hyper-parameter search per item.
    Search(Overrides),
    /// Score checkpoints on a split and write the report CSV.
    Evaluate {
        #[command(flatten)]
        o: Overrides,
        /// Checkpoint directory; defaults to the configured out_dir.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Item and depression decisions for one WAV file.
    Predict {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        wav: PathBuf,
    },
    /// Export the probability grid of one item as JSON and SVG.
    Timeline {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        item: Option<usize>,
        #[arg(long, default_value = "madrs")]
        scale: ScaleName,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        drop_last: bool,
    },
    /// Generate the synthetic two-class corpus with a matching config.toml.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "madrs")]
        scale: ScaleName,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Print the model spec and training metadata stored in a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn checkpoint_dir(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract {
            manifest,
            scale,
            out_dir,
            drop_last,
        } => {
            let m = parse_manifest(&manifest, &ScaleDefinition::from_name(scale))?;
            for r in cmd_extract(&m, &out_dir, drop_last)? {
                println!(
                    "{}\t{} frames\t{} segments",
                    r.recording_id, r.n_frames, r.n_segments
                );
            }
            Ok(())
        }
        Command::Train(o) => train(&o, false),
        Command::Search(o) => train(&o, true),
        Command::Evaluate {
            o,
            checkpoints,
            split,
        } => {
            let cfg = o.load()?;
            let dir = checkpoint_dir(&cfg, &checkpoints);
            let out = cmd_evaluate(&cfg, &dir, split)?;
            for row in &out.report.rows {
                println!(
                    "{}\thard {}\tsoft {}",
                    row.label,
                    row.hard.cell(),
                    row.soft.cell()
                );
            }
            eprintln!("wrote {}", out.report_path.display());
            Ok(())
        }
        Command::Predict {
            o,
            checkpoints,
            wav,
        } => {
            let cfg = o.load()?;
            let dir = checkpoint_dir(&cfg, &checkpoints);
            print_json(&cmd_predict(&cfg, &dir, &wav)?)
        }
        Command::Timeline {
            checkpoint,
            wav,
            item,
            scale,
            out_dir,
            drop_last,
        } => {
            let out = cmd_timeline(
                &checkpoint,
                &wav,
                item,
                &ScaleDefinition::from_name(scale),
                &out_dir,
                drop_last,
            )?;
            println!(
                "{}\n{}\n{} columns",
                out.json_path.display(),
                out.svg_path.display(),
                out.n_columns
            );
            Ok(())
        }
        Command::Synth {
            out_dir,
            scale,
            seed,
            duration_s,
        } => {
            let mut sc = SynthConfig::default();
            if let Some(s) = seed {
                sc.seed = s;
            }
            if let Some(d) = duration_s {
                sc.duration_s = d;
            }
            let path = cmd_synth(&out_dir, &scale_str(scale), &sc)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn scale_str(s: ScaleName) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| "madrs".into())
}

fn train(o: &Overrides, search: bool) -> Result<()> {
    let cfg = o.load()?;
    let outcome = cmd_train(&cfg, search)?;
    for t in &outcome.trained {
        println!(
            "{}\tepoch {}\tval F {:.4}\t{}",
            t.name,
            t.best_epoch,
            t.validation_weighted_f,
            t.checkpoint.display()
        );
    }
    for (name, e) in &outcome.failures {
        eprintln!("{name}: {e}");
    }
    outcome.into_result().map(|_| ())
}

fn inspect(path: &Path) -> Result<()> {
    let (model, extra) = load_trained(path)?;
    print_json(&serde_json::json!({
        "spec": model.spec,
        "parameters": model.params.numel(),
        "training": extra,
    }))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
