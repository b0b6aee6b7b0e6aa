use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use xlembed::config::RunConfig;
use xlembed::data::load_split;
use xlembed::eval::{
    embed_corpus, paired_distance_report, pca_project, render_svg, zero_shot_matrix, DocumentEmbedder, EmbeddingMatrix,
    EvalDataset, ModelEmbedder,
};
use xlembed::gradcheck::{check_objective, ObjectiveCheck};
use xlembed::synth::generate;
use xlembed::tokenizer::{learn_bpe, Vocabulary};
use xlembed::train::{train, Checkpoint, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "xlembed", version, about = "Cross-lingual sentence embeddings from a translation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus from the `synth` section.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a joint BPE vocabulary over all languages of a split.
    LearnBpe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a model; beta = lambda = 0 gives the unconstrained variant.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train only a->b and b->a (needs exactly two selected languages).
        #[arg(long)]
        bilingual: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed one document per input line into an EMB1 file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 750)]
        max_doc_tokens: usize,
        #[arg(long)]
        language: Option<String>,
        /// One label per input line, stored in the file footer.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Zero-shot classification matrix and paired-distance report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Run config supplying the `eval` section; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// PCA scatter of two paired embedding files.
    Plot {
        #[arg(long)]
        emb_a: PathBuf,
        #[arg(long)]
        emb_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full training objective.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2)]
        pairs: usize,
        #[arg(long, default_value_t = 1e-3)]
        rel_tol: f64,
    },
}

enum Failure {
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => Failure::Numeric(e.to_string()),
        other => Failure::Data(other.to_string()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenCorpus { config, out } => {
            let cfg = RunConfig::load(&config).map_err(data)?;
            let d = generate(&cfg.synth, &out).map_err(data)?;
            info!(
                "wrote {} languages, {}/{}/{} documents to {}",
                cfg.synth.n_languages,
                d.splits[0].len(),
                d.splits[1].len(),
                d.splits[2].len(),
                out.display()
            );
        }
        Command::LearnBpe {
            corpus,
            vocab_size,
            out,
            split,
        } => {
            let c = load_split(&corpus, &split).map_err(data)?;
            let text: Vec<&str> = c.all_sentences().collect();
            let v = learn_bpe(&text, vocab_size).map_err(data)?;
            v.save(&out).map_err(data)?;
            info!("vocabulary of {} tokens ({} merges) -> {}", v.len(), v.merges().len(), out.display());
        }
        Command::Train {
            config,
            corpus,
            vocab,
            out,
            bilingual,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config).map_err(data)?;
            cfg.data.bilingual |= bilingual;
            let train_split = load_split(&corpus, "train").map_err(data)?;
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path).map_err(train_failure)?;
                    Trainer::resume(ckpt, &train_split).map_err(train_failure)?
                }
                None => {
                    let v = Vocabulary::load(&vocab).map_err(data)?;
                    Trainer::new(cfg.model, cfg.train, cfg.loss, cfg.data, &train_split, &v).map_err(train_failure)?
                }
            };
            info!(
                "curriculum: {}",
                trainer.curriculum().iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            );
            let outcome = train(&mut trainer, &out).map_err(train_failure)?;
            info!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Embed {
            checkpoint,
            input,
            out,
            max_doc_tokens,
            language,
            labels,
        } => {
            let mut emb = ModelEmbedder::load(&checkpoint).map_err(data)?;
            emb.max_doc_tokens = max_doc_tokens;
            let text = fs::read_to_string(&input).map_err(|e| Failure::Data(format!("{}: {e}", input.display())))?;
            let docs: Vec<String> = text.lines().map(str::to_string).collect();
            let mut m = emb.embed_documents(&docs).map_err(data)?;
            m.language = language;
            if let Some(p) = labels {
                let l = fs::read_to_string(&p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
                m = m.with_labels(l.lines().map(str::to_string).collect()).map_err(data)?;
            }
            m.write(&out).map_err(data)?;
            info!("{} x {} embeddings -> {}", m.rows(), m.dim(), out.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            report,
            config,
        } => {
            let eval_cfg = match config {
                Some(p) => RunConfig::load(&p).map_err(data)?.eval,
                None => Default::default(),
            };
            let ckpt = Checkpoint::load(&checkpoint).map_err(train_failure)?;
            let mut emb = ModelEmbedder::from_checkpoint(&ckpt).map_err(data)?;
            emb.max_doc_tokens = eval_cfg.max_doc_tokens;
            let langs = emb.languages.clone();
            let splits: Vec<_> = ["train", "dev", "test"]
                .iter()
                .map(|s| load_split(&dataset, s))
                .collect::<Result<_, _>>()
                .map_err(data)?;
            let ds = EvalDataset::from_corpora(&langs, &splits[0], &splits[1], &splits[2]).map_err(data)?;
            let matrix = zero_shot_matrix(&emb, &ds, &eval_cfg.classifier).map_err(data)?;
            let distance = if langs.len() >= 2 {
                let embs = embed_corpus(&emb, &splits[2], &langs).map_err(data)?;
                Some(paired_distance_report(&embs, ckpt.meta.loss.epsilon).map_err(data)?)
            } else {
                None
            };
            let accuracy: serde_json::Value = serde_json::from_str(&matrix.to_json()).map_err(data)?;
            let doc = serde_json::json!({ "accuracy": accuracy, "paired_distance": distance });
            write(&report, &(serde_json::to_string_pretty(&doc).map_err(data)? + "\n"))?;
            write(&report.with_extension("tsv"), &matrix.to_tsv())?;
            info!(
                "cross {} same {:.2} all {:.2}",
                matrix.cross().map_or("-".to_string(), |c| format!("{c:.2}")),
                matrix.same(),
                matrix.all()
            );
        }
        Command::Plot { emb_a, emb_b, out } => {
            let a = EmbeddingMatrix::read(&emb_a).map_err(data)?;
            let b = EmbeddingMatrix::read(&emb_b).map_err(data)?;
            let p = pca_project(&a, &b).map_err(data)?;
            let title = format!(
                "+ {}  \u{2212} {}",
                a.language.as_deref().unwrap_or("A"),
                b.language.as_deref().unwrap_or("B")
            );
            write(&out, &render_svg(&p, &title))?;
            write(&out.with_extension("tsv"), &p.to_tsv())?;
        }
        Command::GradCheck { config, pairs, rel_tol } => {
            let cfg = RunConfig::load(&config).map_err(data)?;
            let spec = ObjectiveCheck {
                model: cfg.model,
                loss: cfg.loss,
                pairs,
                seed: cfg.train.seed,
                step: 1e-6,
                rel_tol,
            };
            let r = check_objective(&spec).map_err(|e| Failure::Numeric(e.to_string()))?;
            println!("{}", r.report);
            if !r.report.passed() {
                return Err(Failure::Numeric(format!("gradient check failed (worst {:.3e})", r.report.max_rel_err())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Data(m) | Failure::Numeric(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
