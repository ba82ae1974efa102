use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand};
use morphclm_core::alignment::{align_treebank, treebank_text, TagPlacement};
use morphclm_core::eval::{comparison_tsv, ComparisonRow, SENTENCE_SEPARATOR};
use morphclm_core::synth::{generate, SynthConfig};
use morphclm_core::{
    build_vocab, extract_schema, inflection_rate, parse_conllu, per_word_bits, write_conllu, CharVocab, Checkpoint,
    EvalOptions, EvalReport, ModelError, TrainError, Treebank,
};

mod config;
mod run;

use config::{config_err, ConfigError};

#[derive(Parser)]
#[command(name = "morphclm", version, about = "Character language models with morphology supervision")]
struct Cli {
    /// Omit the timestamp header line and wall-clock columns from TSV output.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a character vocabulary from training text.
    BuildVocab {
        /// Plain text files; `.conllu` files contribute their sentence text.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Keep characters occurring strictly more than this many times.
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model, or the (mtl_layer, delta) grid with --sweep.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: bool,
    },
    /// Score a text or treebank with a checkpoint.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Plain text to score.
        #[arg(long, required_unless_present = "treebank")]
        data: Option<PathBuf>,
        /// CoNLL-U treebank: adds per-word rows and the inflected split.
        #[arg(long)]
        treebank: Option<PathBuf>,
        /// Vocabulary the data was prepared with; must match the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        carry_state: bool,
        /// Identifier column in the report; defaults to the input file stem.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the character-level labels of a treebank.
    Align {
        #[arg(long)]
        treebank: PathBuf,
        #[arg(long)]
        last: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token, character and inflection counts of a treebank.
    Stats {
        #[arg(long)]
        treebank: PathBuf,
    },
    /// LM vs MTL table from two evaluation reports.
    Compare {
        #[arg(long)]
        language: String,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        mtl: PathBuf,
        /// Treebank for the %Infl column.
        #[arg(long)]
        treebank: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic annotated treebank.
    Synth {
        #[arg(long)]
        chars: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        max_particles: usize,
        /// Write the plain sentence text instead of CoNLL-U.
        #[arg(long)]
        text: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration or validation problems, 3 for numerical failures,
/// 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            if t.is_numerical() {
                return 3;
            }
            if matches!(t, TrainError::Config(_) | TrainError::Regime { .. }) {
                return 2;
            }
        }
        if let Some(ModelError::Config(_)) = cause.downcast_ref::<ModelError>() {
            return 2;
        }
    }
    1
}

pub fn timestamp_line() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("# created_unix\t{secs}\n")
}

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_treebank(path: &Path) -> anyhow::Result<Treebank> {
    parse_conllu(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn write_out(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let stamp = !cli.no_timestamp;
    match cli.cmd {
        Cmd::BuildVocab { input, min_count, out } => {
            let mut text = String::new();
            for p in &input {
                if p.extension().is_some_and(|e| e == "conllu") {
                    text.push_str(&treebank_text(&read_treebank(p)?, SENTENCE_SEPARATOR));
                } else {
                    text.push_str(&read_text(p)?);
                }
            }
            let vocab = build_vocab(&text, min_count)?;
            vocab.save(&out)?;
            println!("vocab\t{}", vocab.size());
        }
        Cmd::Train { config, sweep } => {
            let cfg = config::ExperimentConfig::load(&config)?;
            if sweep {
                run::sweep(&cfg, stamp)?;
            } else {
                run::single(&cfg, stamp)?;
            }
        }
        Cmd::Evaluate {
            ckpt,
            data,
            treebank,
            vocab,
            seq_len,
            carry_state,
            id,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            if let Some(v) = vocab {
                if CharVocab::load(&v)? != ck.vocab {
                    return Err(config_err(format!(
                        "vocabulary {} does not match the checkpoint's",
                        v.display()
                    )));
                }
            }
            let seq_len = match seq_len {
                Some(t) => t,
                None => ck.meta.get("seq_len").and_then(|v| v.parse().ok()).unwrap_or(150),
            };
            let opts = EvalOptions {
                carry_state,
                ..EvalOptions::new(seq_len)
            };
            let model = morphclm_core::Model::from_parts(ck.config.clone(), ck.params.clone())?;
            let (report, source) = match (&treebank, &data) {
                (Some(tb_path), data) => {
                    let tb = read_treebank(tb_path)?;
                    if let Some(d) = data {
                        if read_text(d)? != treebank_text(&tb, SENTENCE_SEPARATOR) {
                            return Err(config_err("--data text differs from the treebank's sentence text"));
                        }
                    }
                    (per_word_bits(&model, &tb, &ck.vocab, opts)?, tb_path)
                }
                (None, Some(d)) => {
                    let text = read_text(d)?;
                    (morphclm_core::bpc(&model, &ck.vocab.encode_text(&text), opts)?, d)
                }
                (None, None) => unreachable!("clap requires --data or --treebank"),
            };
            let id = id.unwrap_or_else(|| {
                source
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            });
            let mut text = if stamp { timestamp_line() } else { String::new() };
            text.push_str(&report.to_tsv(&id));
            write_out(Some(&out), &text)?;
            println!("bpc\t{:.6}", report.total_bpc());
        }
        Cmd::Align { treebank, last, out } => {
            let tb = read_treebank(&treebank)?;
            let placement = if last { TagPlacement::Last } else { TagPlacement::First };
            let aligned = align_treebank(&tb, &extract_schema(&tb), placement, SENTENCE_SEPARATOR)?;
            write_out(out.as_deref(), &aligned.dump())?;
        }
        Cmd::Stats { treebank } => {
            let tb = read_treebank(&treebank)?;
            let schema = extract_schema(&tb);
            let mut text = format!(
                "tokens\t{}\nchars\t{}\n%Infl {:.1}\nschema size {}\n",
                tb.token_count(),
                treebank_text(&tb, SENTENCE_SEPARATOR).chars().count(),
                100.0 * inflection_rate(&tb),
                schema.len()
            );
            for (name, values) in schema.iter() {
                let v: Vec<&str> = values.iter().map(String::as_str).collect();
                text.push_str(&format!("feature\t{name}\t{}\n", v.join("|")));
            }
            print!("{text}");
        }
        Cmd::Compare {
            language,
            lm,
            mtl,
            treebank,
            out,
        } => {
            let read = |p: &Path| -> anyhow::Result<EvalReport> {
                EvalReport::from_tsv(&read_text(p)?).with_context(|| format!("reading report {}", p.display()))
            };
            let inflection_rate = match &treebank {
                Some(p) => inflection_rate(&read_treebank(p)?),
                None => f64::NAN,
            };
            let row = ComparisonRow {
                language,
                inflection_rate,
                lm: read(&lm)?,
                mtl: read(&mtl)?,
            };
            write_out(out.as_deref(), &comparison_tsv(&[row])?)?;
        }
        Cmd::Synth {
            chars,
            seed,
            max_particles,
            text,
            out,
        } => {
            let tb = generate(SynthConfig {
                max_particles,
                ..SynthConfig::new(chars, seed)
            });
            let body = if text {
                treebank_text(&tb, SENTENCE_SEPARATOR)
            } else {
                write_conllu(&tb)
            };
            write_out(Some(&out), &body)?;
        }
    }
    Ok(())
}
