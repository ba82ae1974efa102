//! `train` and `train --sweep`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use morphclm_core::alignment::treebank_text;
use morphclm_core::eval::SENTENCE_SEPARATOR;
use morphclm_core::training::{union_vocab, CrossLingualFlags, EpochRecord, TrainOutcome};
use morphclm_core::{
    bpc, build_cross_lingual_dataset, encode_treebank, extract_schema, per_word_bits, train, CharVocab, Checkpoint,
    Datasets, EncodedStream, EvalOptions, EvalReport, Model, MorphSchema, Regime, TrainError, Treebank,
};

use crate::config::{config_err, ExperimentConfig};
use crate::{read_text, read_treebank, timestamp_line};

pub const SWEEP_LAYERS: [usize; 2] = [1, 2];
pub const SWEEP_DELTAS: [f64; 6] = [0.01, 0.1, 0.5, 1.0, 1.5, 2.0];

/// Everything loaded from disk once, shared by all sweep cells.
pub struct Prepared {
    pub vocab: CharVocab,
    pub schema: MorphSchema,
    pub data: Datasets,
    test: Option<TestSet>,
}

enum TestSet {
    Text(Vec<u32>),
    Treebank(Treebank),
}

fn load_tb(path: &Path, cfg: &ExperimentConfig) -> anyhow::Result<Treebank> {
    let mut tb = read_treebank(path)?;
    tb.drop_features(&cfg.exclude_features);
    Ok(tb)
}

pub fn prepare(cfg: &ExperimentConfig) -> anyhow::Result<Prepared> {
    let opt_tb = |p: &Option<PathBuf>| p.as_deref().map(|p| load_tb(p, cfg)).transpose();
    let opt_text = |p: &Option<PathBuf>| p.as_deref().map(read_text).transpose();
    let tb_train = opt_tb(&cfg.treebank_train)?;
    let high_tb = opt_tb(&cfg.high_treebank_train)?;
    let lm_train = opt_text(&cfg.lm_train)?;
    let high_lm = opt_text(&cfg.high_lm_train)?;

    let mut schema = MorphSchema::new();
    if cfg.train.regime != Regime::LmOnly {
        for tb in tb_train.iter().chain(&high_tb) {
            schema.merge(&extract_schema(tb));
        }
        if schema.is_empty() {
            return Err(config_err(format!(
                "{} needs morphological features, but the treebanks have none",
                cfg.train.regime
            )));
        }
    }

    let tb_text = tb_train.as_ref().map(|tb| treebank_text(tb, SENTENCE_SEPARATOR));
    let high_tb_text = high_tb.as_ref().map(|tb| treebank_text(tb, SENTENCE_SEPARATOR));
    let vocab = match &cfg.vocab {
        Some(p) => CharVocab::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let mut texts: Vec<&str> = Vec::new();
            match cfg.train.regime {
                Regime::LmOnly => texts.extend(lm_train.as_deref().or(tb_text.as_deref())),
                Regime::FullySupervised => texts.extend(tb_text.as_deref()),
                Regime::Distant => texts.extend(lm_train.as_deref()),
                Regime::CrossLingual => {
                    texts.extend(tb_text.as_deref());
                    texts.extend(lm_train.as_deref());
                    texts.extend(high_tb_text.as_deref());
                    texts.extend(high_lm.as_deref());
                }
            }
            union_vocab(&texts, cfg.min_count)?
        }
    };

    let labeled = |tb: &Treebank| encode_treebank(tb, &vocab, Some(&schema), cfg.tag_placement, SENTENCE_SEPARATOR);
    let plain = |text: &str| EncodedStream::unlabeled(vocab.encode_text(text));
    let dev = match (&cfg.lm_dev, &cfg.treebank_dev) {
        (Some(p), _) => plain(&read_text(p)?),
        (None, Some(p)) => plain(&treebank_text(&load_tb(p, cfg)?, SENTENCE_SEPARATOR)),
        (None, None) => unreachable!("validated"),
    };
    let data = match cfg.train.regime {
        Regime::LmOnly => Datasets {
            lm: vec![plain(lm_train.as_deref().or(tb_text.as_deref()).expect("validated"))],
            morph: vec![],
            dev,
        },
        Regime::FullySupervised => Datasets {
            lm: vec![labeled(tb_train.as_ref().expect("validated"))?],
            morph: vec![],
            dev,
        },
        Regime::Distant => Datasets {
            lm: vec![plain(lm_train.as_deref().expect("validated"))],
            morph: vec![labeled(tb_train.as_ref().expect("validated"))?],
            dev,
        },
        Regime::CrossLingual => {
            let mut low_lm = vec![labeled(tb_train.as_ref().expect("validated"))?];
            low_lm.extend(lm_train.as_deref().map(plain));
            let mut high_lm_streams = vec![labeled(high_tb.as_ref().expect("validated"))?];
            high_lm_streams.extend(high_lm.as_deref().map(plain));
            let low = Datasets {
                lm: low_lm,
                morph: vec![],
                dev: dev.clone(),
            };
            let high = Datasets {
                lm: high_lm_streams,
                morph: vec![],
                dev,
            };
            let flags = CrossLingualFlags {
                use_high_lm: cfg.use_high_lm,
                use_high_morph: cfg.use_high_morph,
                use_low_morph: cfg.use_low_morph,
            };
            build_cross_lingual_dataset(&high, &low, flags)
        }
    };

    let test = match (&cfg.treebank_test, &cfg.lm_test) {
        (Some(p), _) => Some(TestSet::Treebank(load_tb(p, cfg)?)),
        (None, Some(p)) => Some(TestSet::Text(vocab.encode_text(&read_text(p)?))),
        (None, None) => None,
    };
    Ok(Prepared {
        vocab,
        schema,
        data,
        test,
    })
}

/// Result of one training run, as written to the output directory.
pub struct RunSummary {
    pub best_epoch: Option<usize>,
    pub dev_bpc: Option<f64>,
    pub test_bpc: Option<f64>,
}

/// Trains one configuration into `out_dir`: `best.ckpt` (rewritten only on
/// a new best dev BPC), `train_log.tsv`, `run.cfg` and, when a test set is
/// configured, `test_report.tsv`.
pub fn run_one(cfg: &ExperimentConfig, prep: &Prepared, out_dir: &Path, stamp: bool) -> anyhow::Result<RunSummary> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let model_cfg = cfg.model_config(prep.vocab.size(), prep.schema.clone());
    model_cfg.validate().map_err(|e| config_err(e.to_string()))?;
    std::fs::write(out_dir.join("run.cfg"), cfg.to_canonical())?;
    prep.vocab.save(&out_dir.join("vocab.txt"))?;

    let ckpt_path = out_dir.join("best.ckpt");
    let t = &cfg.train;
    let mut save_best = |rec: &EpochRecord, model: &Model<f32>| -> Result<(), TrainError> {
        if !rec.improved {
            return Ok(());
        }
        let ck = Checkpoint::new(model.config.clone(), prep.vocab.clone(), model.params.clone())?
            .with_meta("epoch", rec.epoch)
            .with_meta("dev_bpc", format!("{:.6}", rec.dev_bpc))
            .with_meta("seq_len", t.seq_len)
            .with_meta("regime", t.regime)
            .with_meta("delta", t.delta)
            .with_meta("seed", t.seed);
        ck.save(&ckpt_path)
            .map_err(|e| TrainError::Hook(format!("writing {}: {e}", ckpt_path.display())))
    };
    let outcome: TrainOutcome = if cfg.eval_carry_state {
        let dev_ids = prep.data.dev.char_ids.clone();
        let opts = EvalOptions {
            carry_state: true,
            ..EvalOptions::new(t.seq_len)
        };
        let mut scorer = |_: usize, m: &Model<f32>| -> Result<f64, TrainError> { Ok(bpc(m, &dev_ids, opts)?.total_bpc()) };
        train(&model_cfg, t, &prep.data, Some(&mut scorer), Some(&mut save_best))?
    } else {
        train(&model_cfg, t, &prep.data, None, Some(&mut save_best))?
    };

    let mut log = if stamp { timestamp_line() } else { String::new() };
    log.push_str(&outcome.log.to_tsv(stamp));
    std::fs::write(out_dir.join("train_log.tsv"), log)?;

    let opts = EvalOptions {
        carry_state: cfg.eval_carry_state,
        ..EvalOptions::new(t.seq_len)
    };
    let test_report: Option<EvalReport> = match &prep.test {
        None => None,
        Some(TestSet::Text(ids)) => Some(bpc(&outcome.best, ids, opts)?),
        Some(TestSet::Treebank(tb)) => Some(per_word_bits(&outcome.best, tb, &prep.vocab, opts)?),
    };
    if let Some(r) = &test_report {
        let mut text = if stamp { timestamp_line() } else { String::new() };
        text.push_str(&r.to_tsv("test"));
        std::fs::write(out_dir.join("test_report.tsv"), text)?;
    }
    Ok(RunSummary {
        best_epoch: outcome.log.best_epoch,
        dev_bpc: outcome.log.best_dev_bpc(),
        test_bpc: test_report.map(|r| r.total_bpc()),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.6}"))
}

pub fn single(cfg: &ExperimentConfig, stamp: bool) -> anyhow::Result<()> {
    let prep = prepare(cfg)?;
    let s = run_one(cfg, &prep, &cfg.output_dir, stamp)?;
    println!(
        "best_epoch\t{}\ndev_bpc\t{}\ntest_bpc\t{}",
        s.best_epoch.map_or("-".into(), |e| e.to_string()),
        fmt_opt(s.dev_bpc),
        fmt_opt(s.test_bpc)
    );
    Ok(())
}

fn worker_threads() -> anyhow::Result<usize> {
    match std::env::var("MORPHCLM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(config_err(format!("MORPHCLM_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Trains every (mtl_layer, delta) cell into `output_dir/l{layer}_d{delta}`,
/// writes `grid.tsv`, and copies the cell with the lowest dev BPC to
/// `output_dir/best.ckpt`. Ties go to the earlier cell.
pub fn sweep(cfg: &ExperimentConfig, stamp: bool) -> anyhow::Result<()> {
    if cfg.train.regime == Regime::LmOnly {
        return Err(config_err("--sweep tunes the morphology loss; LM_ONLY has none"));
    }
    if cfg.num_layers < SWEEP_LAYERS.len() {
        return Err(config_err(format!(
            "--sweep places the morphology heads on layers {SWEEP_LAYERS:?}; num_layers is {}",
            cfg.num_layers
        )));
    }
    let prep = prepare(cfg)?;
    let cells: Vec<(usize, f64)> = SWEEP_LAYERS
        .iter()
        .flat_map(|&l| SWEEP_DELTAS.iter().map(move |&d| (l, d)))
        .collect();
    let results: Vec<Mutex<Option<anyhow::Result<RunSummary>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let threads = worker_threads()?.min(cells.len());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(layer, delta)) = cells.get(i) else { break };
                let mut cell_cfg = cfg.clone();
                cell_cfg.mtl_layer = layer;
                cell_cfg.train.delta = delta;
                cell_cfg.output_dir = cfg.output_dir.join(format!("l{layer}_d{delta}"));
                let r = run_one(&cell_cfg, &prep, &cell_cfg.output_dir, stamp);
                *results[i].lock().expect("poisoned") = Some(r);
            });
        }
    });

    let mut rows = Vec::new();
    for ((layer, delta), slot) in cells.iter().zip(results) {
        let r = slot
            .into_inner()
            .expect("poisoned")
            .expect("every cell ran")
            .with_context(|| format!("sweep cell mtl_layer={layer} delta={delta}"))?;
        rows.push((*layer, *delta, r));
    }
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, (_, _, r))| r.dev_bpc.map(|b| (i, b)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    let mut grid = if stamp { timestamp_line() } else { String::new() };
    grid.push_str("mtl_layer\tdelta\tbest_epoch\tdev_bpc\ttest_bpc\tselected\n");
    for (i, (layer, delta, r)) in rows.iter().enumerate() {
        let _ = writeln!(
            grid,
            "{layer}\t{delta}\t{}\t{}\t{}\t{}",
            r.best_epoch.map_or("-".into(), |e| e.to_string()),
            fmt_opt(r.dev_bpc),
            fmt_opt(r.test_bpc),
            if Some(i) == best { "*" } else { "" }
        );
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("grid.tsv"), &grid)?;
    if let Some(i) = best {
        let (layer, delta, r) = &rows[i];
        let cell_dir = cfg.output_dir.join(format!("l{layer}_d{delta}"));
        std::fs::copy(cell_dir.join("best.ckpt"), cfg.output_dir.join("best.ckpt"))?;
        println!("selected\tmtl_layer={layer}\tdelta={delta}\tdev_bpc\t{}", fmt_opt(r.dev_bpc));
    }
    Ok(())
}
