use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steganalysis_core::pipeline::{
    self, evaluate_checkpoint, evaluate_model, extract_features, fuse_train, load_codec_config, make_dataset,
    synth_sources, train_window, DatasetManifest, DatasetSpec, FeatureTable, RunConfig,
};
use steganalysis_core::synth::SynthParams;
use steganalysis_core::{MarginModel, Result, Scheme};

#[derive(Parser)]
#[command(name = "steganalysis", version, about = "Spectrogram residual-network steganalysis for compressed audio")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic source clips.
    SynthSources {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Clip length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        sample_rate: Option<u32>,
    },
    /// Code source clips into covers and stego twins and write a manifest.
    MakeDataset {
        /// Directory of source WAV files.
        #[arg(long)]
        source: PathBuf,
        /// Output directory; the manifest is written there.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "scheme", value_delimiter = ',', default_value = "SIGN")]
        schemes: Vec<Scheme>,
        #[arg(long = "ebr", value_delimiter = ',', default_value = "1.0")]
        ebrs: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Codec settings (TOML).
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Cut sources into clips of this many seconds.
        #[arg(long)]
        segment: Option<f64>,
        #[arg(long)]
        sign_threshold: Option<u32>,
    },
    /// Train the network for one window size.
    TrainWindow {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        window: usize,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint path; the epoch history goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse the features of three window checkpoints for every clip.
    ExtractFeatures {
        #[command(flatten)]
        run: RunArgs,
        /// Window checkpoints, one flag each, in window order.
        #[arg(long = "checkpoint", required = true, num_args = 1, action = clap::ArgAction::Append)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the margin classifier on the training split of a feature file.
    FuseTrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split with a fused model or a single checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, requires = "features", conflicts_with = "checkpoint")]
        model: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, required_unless_present = "model")]
        checkpoint: Option<PathBuf>,
        /// Report path stem: writes .txt, .json and .predictions.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed; it also fixes the train/test split.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<(DatasetManifest, RunConfig)> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok((DatasetManifest::load(&self.manifest)?, config))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| steganalysis_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthSources {
            out,
            count,
            seed,
            duration,
            sample_rate,
        } => {
            let mut params = SynthParams::default();
            params.duration_secs = duration.unwrap_or(params.duration_secs);
            params.sample_rate = sample_rate.unwrap_or(params.sample_rate);
            let written = synth_sources(&out, count, &params, seed)?;
            println!("wrote {} clips to {}", written.len(), out.display());
        }
        Command::MakeDataset {
            source,
            out,
            schemes,
            ebrs,
            seed,
            codec,
            segment,
            sign_threshold,
        } => {
            let mut spec = DatasetSpec::new(source, &out);
            spec.schemes = schemes;
            spec.ebrs = ebrs;
            spec.seed = seed;
            spec.segment_secs = segment;
            if let Some(path) = codec {
                spec.codec = load_codec_config(path)?;
            }
            if let Some(t) = sign_threshold {
                spec.sign_threshold = t;
            }
            let manifest = make_dataset(&spec)?;
            println!(
                "wrote {} clips and {}",
                manifest.entries.len(),
                out.join(pipeline::MANIFEST_FILE).display()
            );
        }
        Command::TrainWindow {
            run,
            window,
            epochs,
            out,
        } => {
            let (manifest, mut config) = run.load()?;
            if let Some(e) = epochs {
                config.epochs = e;
            }
            config.validate()?;
            let summary = train_window(&manifest, window, &config, &out)?;
            if let Some(last) = summary.history.last() {
                println!(
                    "window {window}: {} pairs, {} epochs, final loss {:.4}, accuracy {:.4}",
                    summary.pairs,
                    summary.history.len(),
                    last.loss,
                    last.accuracy
                );
            }
        }
        Command::ExtractFeatures {
            run,
            checkpoints,
            out,
            csv,
        } => {
            let (manifest, _) = run.load()?;
            let extraction = extract_features(&manifest, &checkpoints)?;
            extraction.table.write(&out)?;
            if let Some(path) = csv {
                write_text(&path, &extraction.table.to_csv())?;
            }
            println!("wrote {} rows to {}", extraction.table.rows(), out.display());
        }
        Command::FuseTrain { run, features, out } => {
            let (manifest, config) = run.load()?;
            let model = fuse_train(&FeatureTable::read(features)?, &manifest, &config)?;
            model.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            run,
            model,
            features,
            checkpoint,
            out,
        } => {
            let (manifest, config) = run.load()?;
            let evaluation = match (model, features, checkpoint) {
                (Some(m), Some(f), _) => {
                    evaluate_model(&MarginModel::load(m)?, &FeatureTable::read(f)?, &manifest, &config)?
                }
                (_, _, Some(c)) => evaluate_checkpoint(&c, &manifest, &config)?,
                _ => unreachable!("clap enforces a model with features, or a checkpoint"),
            };
            evaluation.write(&out)?;
            print!("{}", evaluation.report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error ({}): {e}", category.name());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
