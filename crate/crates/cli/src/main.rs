use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use srlood::data::{self, CorpusSpec, EmbeddingDump};
use srlood::detector::Detector;
use srlood::pipeline::{self, Checkpoint, TrainConfig};
use srlood::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.json";
const DETECTOR_FILE: &str = "detector.json";
const LOG_FILE: &str = "train_log.json";

#[derive(Parser)]
#[command(name = "srlood", version, about = "Role-guided OOD detection for text classifiers")]
struct Cli {
    /// Seed for every random choice; overrides the seed in spec/config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with gold role spans.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and fit its detector on the val split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out OOD corpus for AUROC-based checkpoint selection.
        #[arg(long)]
        dev_ood: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against one or more OOD sets.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        id: PathBuf,
        /// OOD set as NAME=PATH; repeatable.
        #[arg(long, value_parser = parse_named, required = true)]
        ood: Vec<(String, PathBuf)>,
        #[arg(long)]
        report: PathBuf,
        /// Fit the detector from an embedding dump instead of the stored one.
        #[arg(long)]
        fit_dump: Option<PathBuf>,
    },
    /// Score an embedding dump with a saved detector.
    Score {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per masking probability.
    SweepMask {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ps: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the representation of every example in a corpus file.
    ExportEmb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got '{s}'")),
    }
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(T::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config: TrainConfig = read_json(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let mut spec: CorpusSpec = read_json(spec.as_deref())?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let corpus = data::gen_corpus(&spec)?;
            data::write_corpus_dir(&corpus, &out)?;
            write_text(&out.join("spec.json"), &serde_json::to_string_pretty(&spec)?)?;
            log::info!("wrote corpus to {}", out.display());
        }
        Command::Train {
            config,
            data: dir,
            out,
            dev_ood,
        } => {
            let config = load_train_config(config.as_deref(), cli.seed)?;
            let corpus = data::load_corpus_dir(&dir)?;
            let dev = dev_ood.map(data::load_corpus).transpose()?;
            let result = pipeline::train(&config, &corpus.train, &corpus.val, dev.as_deref())?;
            result.checkpoint.save(out.join(CHECKPOINT_FILE))?;
            result.detector.save(out.join(DETECTOR_FILE))?;
            write_text(&out.join(LOG_FILE), &serde_json::to_string(&result.log)?)?;
            let best = result.log.evals.iter().find(|e| e.step == result.log.best_step);
            println!(
                "best checkpoint after {} updates, val accuracy {:.4}",
                result.log.best_step,
                best.map_or(f64::NAN, |e| e.val_accuracy)
            );
        }
        Command::Eval {
            ckpt,
            id,
            ood,
            report,
            fit_dump,
        } => {
            let checkpoint = Checkpoint::load(ckpt.join(CHECKPOINT_FILE))?;
            let detector = match fit_dump {
                Some(p) => {
                    let dump = EmbeddingDump::load(p)?;
                    if dump.d != checkpoint.feature_dim() {
                        return Err(Error::DimMismatch {
                            expected: checkpoint.feature_dim(),
                            got: dump.d,
                        });
                    }
                    Detector::fit(
                        &dump.labelled(),
                        checkpoint.num_classes(),
                        Some(checkpoint.model.classifier_rows()),
                        checkpoint.config.detector.clone(),
                    )?
                }
                None => Detector::load(ckpt.join(DETECTOR_FILE))?,
            };
            let id_set = data::load_corpus(&id)?;
            let ood_sets = ood
                .into_iter()
                .map(|(name, p)| Ok((name, data::load_corpus(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let id_name = id.file_stem().map_or("id".into(), |s| s.to_string_lossy().into_owned());
            let rep = pipeline::evaluate(&checkpoint, &detector, &id_name, &id_set, &ood_sets)?;
            rep.save(&report)?;
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            for (set, per) in &rep.ood_sets {
                for (scorer, m) in per {
                    println!("{set}\t{scorer}\tAUROC {:.4}\tFAR95 {:.4}", m.auroc, m.far95);
                }
            }
        }
        Command::Score {
            detector,
            embeddings,
            out,
        } => {
            let det = Detector::load(detector)?;
            let dump = EmbeddingDump::load(embeddings)?;
            let feats: Vec<Vec<f64>> = dump.records.iter().map(|r| r.h.clone()).collect();
            let scores = pipeline::score_features(&det, &feats)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Invalid(e.to_string());
            let mut header = vec!["id".to_string(), "label".to_string()];
            header.extend(det.config().scorers.iter().map(|s| s.name().to_string()));
            w.write_record(&header).map_err(csv_err)?;
            for (r, s) in dump.records.iter().zip(&scores) {
                let mut row = vec![r.id.clone(), r.label.to_string()];
                row.extend(s.iter().map(f64::to_string));
                w.write_record(&row).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
            write_text(&out, &String::from_utf8_lossy(&bytes))?;
        }
        Command::SweepMask {
            config,
            data: dir,
            ps,
            out,
        } => {
            let config = load_train_config(config.as_deref(), cli.seed)?;
            let corpus = data::load_corpus_dir(&dir)?;
            let ood = vec![("test_ood".to_string(), corpus.test_ood)];
            let rows = pipeline::sweep_mask(&config, &corpus.train, &corpus.val, &corpus.test_id, &ood, &ps)?;
            let table = pipeline::sweep_csv(&rows)?;
            write_text(&out, &table)?;
            print!("{table}");
        }
        Command::ExportEmb { ckpt, data: path, out } => {
            let checkpoint = Checkpoint::load(ckpt.join(CHECKPOINT_FILE))?;
            let examples = data::load_corpus(&path)?;
            let dump = pipeline::export_embeddings(&checkpoint, &examples, &out)?;
            log::info!("wrote {} vectors of length {}", dump.records.len(), dump.d);
        }
    }
    Ok(())
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
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
