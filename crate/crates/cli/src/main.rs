use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use moon_core::augmentation::{self, AugmentConfig, Clients, MockEditClient, MockEnrichmentClient};
use moon_core::data::{self, DatasetManifest, ModalityComposition};
use moon_core::eval::{self, MetricsReport, RetrievalTask};
use moon_core::training::{self, TrainConfig, TrainMode};
use moon_core::{checkpoint, Exec};

#[derive(Parser)]
#[command(name = "moon", about = "Modality-balanced multimodal embedding toolkit")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic triplet dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Manifest file; defaults are used when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Swap positive and negative for a fraction of triplets.
    InjectNoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        flip_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Enrich titles and add edited images with the mock clients.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Dataset directory holding manifest.toml and labels.json.
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        n_variants: Option<usize>,
        /// Frozen reference encoder for similarity filtering.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train an encoder.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "t2mm,i2mm,mm2mm,t2i,i2t")]
        tasks: String,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// labels.json for zero-shot classification.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a last-layer attention heatmap for one record.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "mm")]
        modality: String,
        /// Output path without extension; `.csv` and `.pgm` are written.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> moon_core::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Generate {
            out,
            manifest,
            seed,
            n_train,
            n_test,
        } => {
            let mut m = match manifest {
                Some(p) => DatasetManifest::load(&p)?,
                None => DatasetManifest::default(),
            };
            if let Some(s) = seed {
                m.seed = s;
            }
            if let Some(n) = n_train {
                m.n_train = n;
            }
            if let Some(n) = n_test {
                m.n_test = n;
            }
            let files = data::generate_synthetic_dataset(&m, &out)?;
            println!("wrote {} and {}", files.train.display(), files.test.display());
        }
        Command::InjectNoise {
            input,
            output,
            flip_rate,
            seed,
        } => {
            let ids = data::inject_label_noise(&input, &output, flip_rate, seed)?;
            println!("flipped {} triplets; ids in {}", ids.len(), data::sidecar_path(&output).display());
        }
        Command::Augment {
            input,
            output,
            report,
            dataset_dir,
            threshold,
            n_variants,
            reference,
        } => {
            let files = data::DatasetFiles::in_dir(&dataset_dir);
            let manifest = DatasetManifest::load(&files.manifest)?;
            let labels = data::load_label_names(&files.labels)?;
            let mut cfg = AugmentConfig::for_manifest(&manifest);
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            if let Some(n) = n_variants {
                cfg.n_variants = n;
            }
            cfg.reference_checkpoint = reference;
            let enrich = MockEnrichmentClient { max_len: cfg.text_len };
            let edit = MockEditClient::default();
            let clients = Clients {
                enrich: &enrich,
                edit: &edit,
            };
            let summary =
                augmentation::co_augment_dataset(&input, &output, &report, &clients, &cfg, &labels.lexicon(), exec)?;
            println!(
                "{} records, {} failed, {} flagged, kept {} of {} variants",
                summary.records, summary.failed, summary.flagged, summary.kept, summary.generated
            );
        }
        Command::Train { config, mode, seed, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            if cfg.output_dir.is_none() {
                cfg.output_dir = Some(PathBuf::from("run"));
            }
            let outcome = training::train(&cfg, exec)?;
            println!("config hash {}", outcome.config_hash);
            if let Some(last) = outcome.metrics.last() {
                println!("final total loss {:.6}", last.total);
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            tasks,
            k,
            out,
            labels,
            seed,
        } => {
            let start = Instant::now();
            let (encoder, meta) = checkpoint::load_checkpoint(&checkpoint)?;
            let test = data::load_triplets(&dataset)?;
            let tasks = RetrievalTask::parse_list(&tasks)?;
            let retrieval = eval::evaluate_retrieval(&encoder, &test, &tasks, &k, exec)?;
            let zero_shot = match labels {
                Some(p) => {
                    let names = data::load_label_names(&p)?;
                    let items: Vec<_> = test.iter().map(|t| &t.positive).collect();
                    Some(eval::classify_zero_shot(&encoder, &items, ModalityComposition::Multimodal, &names, exec)?)
                }
                None => None,
            };
            let report = MetricsReport {
                config_hash: meta.config_hash,
                seed,
                retrieval,
                zero_shot,
                runtime_secs: start.elapsed().as_secs_f64(),
            };
            let files = eval::write_report(&report, &out)?;
            print!("{}", std::fs::read_to_string(&files.text).unwrap_or_default());
        }
        Command::Heatmap {
            checkpoint,
            dataset,
            index,
            modality,
            out,
        } => {
            let (encoder, _) = checkpoint::load_checkpoint(&checkpoint)?;
            let records = data::load_triplets(&dataset)?;
            let record = records
                .get(index)
                .ok_or_else(|| moon_core::Error::Validation(format!("record {index} out of range")))?;
            let files = eval::export_heatmap(&encoder, &record.positive, ModalityComposition::parse(&modality)?, &out)?;
            println!("wrote {} and {}", files.csv.display(), files.pgm.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
