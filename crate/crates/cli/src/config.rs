//! Experiment config: flat `key = value` lines, `#` comments, and
//! `include = path` lines that pull in another file at that point. Later
//! assignments override earlier ones, so an included defaults file goes
//! first and the experiment file overrides what it needs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use morphclm_core::alignment::TagPlacement;
use morphclm_core::{MorphSchema, ModelConfig, Regime, TrainConfig};

/// Invalid or inconsistent configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

const KEYS: &[&str] = &[
    "seed",
    "regime",
    "learning_rate",
    "clip_norm",
    "batch_size",
    "seq_len",
    "max_epochs",
    "patience",
    "delta",
    "mask_none_positions",
    "lr_decay_every",
    "lr_decay",
    "embed_dim",
    "hidden_dim",
    "num_layers",
    "mtl_layer",
    "dropout",
    "embed_dropout",
    "lm_train",
    "lm_dev",
    "lm_test",
    "treebank_train",
    "treebank_dev",
    "treebank_test",
    "high_lm_train",
    "high_treebank_train",
    "use_high_lm",
    "use_high_morph",
    "use_low_morph",
    "vocab",
    "min_count",
    "exclude_features",
    "tag_placement",
    "eval_carry_state",
    "output_dir",
];

const PATH_KEYS: &[&str] = &[
    "lm_train",
    "lm_dev",
    "lm_test",
    "treebank_train",
    "treebank_dev",
    "treebank_test",
    "high_lm_train",
    "high_treebank_train",
    "vocab",
    "output_dir",
];

/// Reads a config file into raw key/value pairs, resolving includes and
/// making path values absolute relative to the file that sets them.
pub fn read_raw(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = Vec::new();
    read_into(path, &mut out, &mut stack)?;
    Ok(out)
}

fn read_into(path: &Path, out: &mut BTreeMap<String, String>, stack: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let canon = path
        .canonicalize()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if stack.contains(&canon) {
        return Err(config_err(format!("include cycle through {}", path.display())));
    }
    stack.push(canon.clone());
    let text = std::fs::read_to_string(&canon).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let base = canon.parent().map(Path::to_path_buf).unwrap_or_default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "include" {
            read_into(&base.join(v), out, stack)?;
            continue;
        }
        if !KEYS.contains(&k) {
            return Err(config_err(format!("{}:{}: unknown key `{k}`", path.display(), n + 1)));
        }
        let v = if PATH_KEYS.contains(&k) && !v.is_empty() {
            base.join(v).to_string_lossy().into_owned()
        } else {
            v.to_string()
        };
        out.insert(k.to_string(), v);
    }
    stack.pop();
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub mtl_layer: usize,
    pub dropout: f64,
    pub embed_dropout: bool,
    pub lm_train: Option<PathBuf>,
    pub lm_dev: Option<PathBuf>,
    pub lm_test: Option<PathBuf>,
    pub treebank_train: Option<PathBuf>,
    pub treebank_dev: Option<PathBuf>,
    pub treebank_test: Option<PathBuf>,
    pub high_lm_train: Option<PathBuf>,
    pub high_treebank_train: Option<PathBuf>,
    pub use_high_lm: bool,
    pub use_high_morph: bool,
    pub use_low_morph: bool,
    pub vocab: Option<PathBuf>,
    pub min_count: usize,
    pub exclude_features: Vec<String>,
    pub tag_placement: TagPlacement,
    pub eval_carry_state: bool,
    pub output_dir: PathBuf,
}

fn parse<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, default: T) -> anyhow::Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| config_err(format!("`{key}`: cannot parse `{v}`"))),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        Self::from_raw(&read_raw(path)?)
    }

    pub fn from_raw(kv: &BTreeMap<String, String>) -> anyhow::Result<Self> {
        let d = TrainConfig::default();
        let regime = match kv.get("regime") {
            None => d.regime,
            Some(r) => Regime::parse(r).ok_or_else(|| config_err(format!("unknown regime `{r}`")))?,
        };
        let train = TrainConfig {
            learning_rate: parse(kv, "learning_rate", d.learning_rate)?,
            clip_norm: parse(kv, "clip_norm", d.clip_norm)?,
            batch_size: parse(kv, "batch_size", d.batch_size)?,
            seq_len: parse(kv, "seq_len", d.seq_len)?,
            max_epochs: parse(kv, "max_epochs", d.max_epochs)?,
            patience: parse(kv, "patience", d.patience)?,
            delta: parse(kv, "delta", d.delta)?,
            regime,
            seed: parse(kv, "seed", d.seed)?,
            mask_none: parse(kv, "mask_none_positions", d.mask_none)?,
            lr_decay_every: parse(kv, "lr_decay_every", d.lr_decay_every)?,
            lr_decay: parse(kv, "lr_decay", d.lr_decay)?,
        };
        let m = ModelConfig::new(1, MorphSchema::new());
        let path = |k: &str| kv.get(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        let tag_placement = match kv.get("tag_placement").map(String::as_str) {
            None | Some("first") => TagPlacement::First,
            Some("last") => TagPlacement::Last,
            Some(o) => return Err(config_err(format!("`tag_placement` must be first or last, got `{o}`"))),
        };
        let cfg = Self {
            train,
            embed_dim: parse(kv, "embed_dim", m.embed_dim)?,
            hidden_dim: parse(kv, "hidden_dim", m.hidden_dim)?,
            num_layers: parse(kv, "num_layers", m.num_layers)?,
            mtl_layer: parse(kv, "mtl_layer", m.mtl_layer)?,
            dropout: parse(kv, "dropout", m.dropout)?,
            embed_dropout: parse(kv, "embed_dropout", m.embed_dropout)?,
            lm_train: path("lm_train"),
            lm_dev: path("lm_dev"),
            lm_test: path("lm_test"),
            treebank_train: path("treebank_train"),
            treebank_dev: path("treebank_dev"),
            treebank_test: path("treebank_test"),
            high_lm_train: path("high_lm_train"),
            high_treebank_train: path("high_treebank_train"),
            use_high_lm: parse(kv, "use_high_lm", false)?,
            use_high_morph: parse(kv, "use_high_morph", false)?,
            use_low_morph: parse(kv, "use_low_morph", true)?,
            vocab: path("vocab"),
            min_count: parse(kv, "min_count", 5)?,
            exclude_features: kv
                .get("exclude_features")
                .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
                .unwrap_or_default(),
            tag_placement,
            eval_carry_state: parse(kv, "eval_carry_state", false)?,
            output_dir: path("output_dir").ok_or_else(|| config_err("`output_dir` is required"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.train.validate().map_err(|e| config_err(e.to_string()))?;
        for p in [
            &self.lm_train,
            &self.lm_dev,
            &self.lm_test,
            &self.treebank_train,
            &self.treebank_dev,
            &self.treebank_test,
            &self.high_lm_train,
            &self.high_treebank_train,
            &self.vocab,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(config_err(format!("path does not exist: {}", p.display())));
            }
        }
        let need = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(config_err(msg.to_string())) };
        need(
            self.lm_dev.is_some() || self.treebank_dev.is_some(),
            "one of `lm_dev` or `treebank_dev` is required",
        )?;
        match self.train.regime {
            Regime::LmOnly => need(
                self.lm_train.is_some() || self.treebank_train.is_some(),
                "LM_ONLY needs `lm_train` or `treebank_train`",
            ),
            Regime::FullySupervised => {
                need(self.treebank_train.is_some(), "FULLY_SUPERVISED needs `treebank_train`")?;
                need(
                    self.lm_train.is_none(),
                    "FULLY_SUPERVISED trains on one annotated treebank; drop `lm_train`",
                )
            }
            Regime::Distant => {
                need(
                    self.lm_train.is_some() && self.treebank_train.is_some(),
                    "DISTANT needs `lm_train` and `treebank_train`",
                )?;
                need(self.lm_dev.is_some(), "DISTANT computes dev BPC on `lm_dev`")
            }
            Regime::CrossLingual => need(
                self.treebank_train.is_some() && self.high_treebank_train.is_some(),
                "CROSS_LINGUAL needs `treebank_train` and `high_treebank_train`",
            ),
        }
    }

    /// Canonical rendering: every key, sorted, one per line.
    pub fn to_canonical(&self) -> String {
        let t = &self.train;
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("seed", t.seed.to_string());
        kv.insert("regime", t.regime.to_string());
        kv.insert("learning_rate", t.learning_rate.to_string());
        kv.insert("clip_norm", t.clip_norm.to_string());
        kv.insert("batch_size", t.batch_size.to_string());
        kv.insert("seq_len", t.seq_len.to_string());
        kv.insert("max_epochs", t.max_epochs.to_string());
        kv.insert("patience", t.patience.to_string());
        kv.insert("delta", t.delta.to_string());
        kv.insert("mask_none_positions", t.mask_none.to_string());
        kv.insert("lr_decay_every", t.lr_decay_every.to_string());
        kv.insert("lr_decay", t.lr_decay.to_string());
        kv.insert("embed_dim", self.embed_dim.to_string());
        kv.insert("hidden_dim", self.hidden_dim.to_string());
        kv.insert("num_layers", self.num_layers.to_string());
        kv.insert("mtl_layer", self.mtl_layer.to_string());
        kv.insert("dropout", self.dropout.to_string());
        kv.insert("embed_dropout", self.embed_dropout.to_string());
        kv.insert("lm_train", p(&self.lm_train));
        kv.insert("lm_dev", p(&self.lm_dev));
        kv.insert("lm_test", p(&self.lm_test));
        kv.insert("treebank_train", p(&self.treebank_train));
        kv.insert("treebank_dev", p(&self.treebank_dev));
        kv.insert("treebank_test", p(&self.treebank_test));
        kv.insert("high_lm_train", p(&self.high_lm_train));
        kv.insert("high_treebank_train", p(&self.high_treebank_train));
        kv.insert("use_high_lm", self.use_high_lm.to_string());
        kv.insert("use_high_morph", self.use_high_morph.to_string());
        kv.insert("use_low_morph", self.use_low_morph.to_string());
        kv.insert("vocab", p(&self.vocab));
        kv.insert("min_count", self.min_count.to_string());
        kv.insert("exclude_features", self.exclude_features.join(","));
        kv.insert(
            "tag_placement",
            match self.tag_placement {
                TagPlacement::First => "first".into(),
                TagPlacement::Last => "last".into(),
            },
        );
        kv.insert("eval_carry_state", self.eval_carry_state.to_string());
        kv.insert("output_dir", self.output_dir.display().to_string());
        debug_assert_eq!(kv.keys().copied().collect::<BTreeSet<_>>(), KEYS.iter().copied().collect());
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self, vocab_size: usize, schema: MorphSchema) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            mtl_layer: self.mtl_layer,
            dropout: self.dropout,
            embed_dropout: self.embed_dropout,
            schema,
        }
    }
}
