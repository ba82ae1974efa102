//! Optimization: Adam, global-norm clipping, per-regime batch schedules and
//! early stopping on dev BPC.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{alternating_order, assemble, segments, Batch, CharVocab, CorpusError, EncodedStream, Segment, SourceTag};
use crate::diff::{clip_global_norm, DiffError, Real, Tape, Tensor};
use crate::eval::{bpc, EvalError, EvalOptions};
use crate::model::{loss, LossMask, Mode, Model, ModelConfig, ModelError, ModelParams, ParamNodes, Trunk};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("datasets do not fit regime {regime}: {reason}")]
    Regime { regime: Regime, reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(ModelError),
    #[error("{0}")]
    Hook(String),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diff(DiffError::NonFinite(op)) => TrainError::NonFinite(op.to_string()),
            other => TrainError::Model(other),
        }
    }
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        ModelError::from(e).into()
    }
}

impl TrainError {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite(_) | TrainError::Eval(EvalError::Model(ModelError::Diff(DiffError::NonFinite(_))))
        )
    }

    /// Tags numerical failures with the epoch they happened in.
    fn in_epoch(self, epoch: usize) -> Self {
        if self.is_numerical() {
            let what = match self {
                TrainError::NonFinite(what) => what,
                other => other.to_string(),
            };
            TrainError::NonFinite(format!("{what} (epoch {epoch})"))
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    LmOnly,
    FullySupervised,
    Distant,
    CrossLingual,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::LmOnly, Regime::FullySupervised, Regime::Distant, Regime::CrossLingual];

    pub fn name(self) -> &'static str {
        match self {
            Regime::LmOnly => "LM_ONLY",
            Regime::FullySupervised => "FULLY_SUPERVISED",
            Regime::Distant => "DISTANT",
            Regime::CrossLingual => "CROSS_LINGUAL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name().eq_ignore_ascii_case(s))
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub delta: f64,
    pub regime: Regime,
    pub seed: u64,
    /// Exclude NONE positions from each morphology loss term.
    pub mask_none: bool,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every`
    /// epochs; 0 disables decay.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            clip_norm: 5.0,
            batch_size: 10,
            seq_len: 150,
            max_epochs: 150,
            patience: 10,
            delta: 1.0,
            regime: Regime::FullySupervised,
            seed: 1,
            mask_none: false,
            lr_decay_every: 0,
            lr_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.clip_norm > 0.0) {
            return err(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.batch_size < 1 || self.seq_len < 2 || self.max_epochs < 1 || self.patience < 1 {
            return err(format!(
                "batch_size {}, seq_len {}, max_epochs {}, patience {} out of range",
                self.batch_size, self.seq_len, self.max_epochs, self.patience
            ));
        }
        if self.patience > self.max_epochs {
            return err(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return err(format!("delta {} must be >= 0", self.delta));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return err(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate * self.lr_decay.powi(((epoch - 1) / self.lr_decay_every) as i32)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction. Errors, leaving everything
/// untouched, if any gradient is non-finite or shapes disagree.
pub fn adam_step<F: Real>(
    params: &mut [&mut Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!("adam: shape {:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFinite("gradient".into()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (F::from_f64(ADAM_BETA1), F::from_f64(ADAM_BETA2));
    let (ob1, ob2) = (F::from_f64(1.0 - ADAM_BETA1), F::from_f64(1.0 - ADAM_BETA2));
    let step = F::from_f64(lr / c1);
    let inv_c2 = F::from_f64(1.0 / c2.sqrt());
    let eps = F::from_f64(ADAM_EPS);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + ob1 * gv;
            *vv = b2 * *vv + ob2 * gv * gv;
            *pv -= step * *mv / (vv.sqrt() * inv_c2 + eps);
        }
    }
    Ok(())
}

/// Loss values of one optimizer step (nats; morphology unweighted by delta).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub lm: Option<f64>,
    pub morph: Option<f64>,
    pub grad_norm: f64,
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub adam: AdamState<f32>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Self { model, config, adam })
    }

    /// Forward, loss, backward, clip, Adam on one batch.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats, TrainError> {
        let dropout_seed = derive_seed(self.config.seed, "dropout", self.adam.step);
        let cfg = &self.model.config;
        let mut tape = Tape::new();
        let pn = ParamNodes::record(&mut tape, &self.model.params, true);
        let trunk = Trunk::run(
            &mut tape,
            &pn,
            cfg,
            &batch.inputs,
            batch.rows,
            batch.seq_len,
            Mode::Train { dropout_seed },
            None,
        )?;
        let nodes = loss(
            &mut tape,
            &pn,
            cfg,
            &trunk,
            batch,
            LossMask::from(batch.source),
            self.config.delta,
            self.config.mask_none,
        )?;
        let scalar = |id| f64::from(tape.value(id).data()[0]);
        let stats_lm = nodes.lm.map(scalar);
        let stats_morph = (!nodes.morph.is_empty()).then(|| nodes.morph.iter().map(|&n| scalar(n)).sum());
        let total = scalar(nodes.total);
        let mut grads = tape.backward(nodes.total)?;
        let mut grads = pn.gradients(&mut grads, &self.model.params);
        let grad_norm = clip_global_norm(grads.iter_mut(), self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite("gradient norm".into()));
        }
        adam_step(&mut self.model.params.tensors_mut(), &grads, &mut self.adam, lr)?;
        Ok(StepStats {
            total,
            lm: stats_lm,
            morph: stats_morph,
            grad_norm,
        })
    }
}

/// Training streams for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    /// Streams feeding the LM side. Labeled streams give joint LM +
    /// morphology batches where the regime allows it.
    pub lm: Vec<EncodedStream>,
    /// Labeled streams used only for the morphology loss, interleaved with
    /// LM batches one-for-one.
    pub morph: Vec<EncodedStream>,
    /// Dev stream for early stopping (LM BPC only).
    pub dev: EncodedStream,
}

impl Datasets {
    /// Checks the streams fit `regime` and returns the effective copy:
    /// labels are stripped wherever the regime does not use them jointly.
    pub fn for_regime(&self, regime: Regime, n_feats: usize) -> Result<Datasets, TrainError> {
        let fail = |reason: &str| {
            Err(TrainError::Regime {
                regime,
                reason: reason.to_string(),
            })
        };
        if self.lm.is_empty() {
            return fail("no LM training stream");
        }
        if self.dev.is_empty() {
            return fail("empty dev stream");
        }
        let labeled_ok = |s: &EncodedStream| s.morph_labels.is_some() && s.n_feats == n_feats;
        let strip = |v: &[EncodedStream]| v.iter().map(EncodedStream::without_labels).collect::<Vec<_>>();
        let out = match regime {
            Regime::LmOnly => {
                if !self.morph.is_empty() {
                    return fail("LM_ONLY takes no morphology-only stream");
                }
                Datasets {
                    lm: strip(&self.lm),
                    morph: Vec::new(),
                    dev: self.dev.without_labels(),
                }
            }
            Regime::FullySupervised => {
                if !self.morph.is_empty() {
                    return fail("FULLY_SUPERVISED uses one annotated treebank for both signals");
                }
                if n_feats == 0 || !self.lm.iter().all(labeled_ok) {
                    return fail("FULLY_SUPERVISED needs an annotated training stream matching the schema");
                }
                self.clone()
            }
            Regime::Distant => {
                if self.morph.is_empty() || n_feats == 0 || !self.morph.iter().all(labeled_ok) {
                    return fail("DISTANT needs an annotated treebank matching the schema");
                }
                Datasets {
                    lm: strip(&self.lm),
                    morph: self.morph.clone(),
                    dev: self.dev.without_labels(),
                }
            }
            Regime::CrossLingual => {
                let any_labels = self.lm.iter().chain(&self.morph).any(|s| s.morph_labels.is_some());
                if !self.morph.iter().all(labeled_ok)
                    || !self.lm.iter().all(|s| s.morph_labels.is_none() || labeled_ok(s))
                    || (any_labels && n_feats == 0)
                {
                    return fail("annotated streams must match the schema");
                }
                self.clone()
            }
        };
        Ok(out)
    }
}

/// Joins a low-resource language's data with a related high-resource one.
///
/// The LM side always contains the low language and, with `use_high_lm`,
/// the high one. Morphology labels come from the low language when
/// `use_low_morph` is set and from the high one with `use_high_morph`.
/// High-language morphology without high-language LM text becomes a
/// morphology-only stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossLingualFlags {
    pub use_high_lm: bool,
    pub use_high_morph: bool,
    pub use_low_morph: bool,
}

pub fn build_cross_lingual_dataset(high: &Datasets, low: &Datasets, flags: CrossLingualFlags) -> Datasets {
    let labels_if = |streams: &[EncodedStream], keep: bool| -> Vec<EncodedStream> {
        streams
            .iter()
            .map(|s| if keep { s.clone() } else { s.without_labels() })
            .collect()
    };
    let mut lm = labels_if(&low.lm, flags.use_low_morph);
    let mut morph = Vec::new();
    if flags.use_high_lm {
        lm.extend(labels_if(&high.lm, flags.use_high_morph));
    } else if flags.use_high_morph {
        morph.extend(high.lm.iter().filter(|s| s.morph_labels.is_some()).cloned());
    }
    if flags.use_low_morph {
        morph.extend(low.morph.iter().cloned());
    }
    if flags.use_high_morph {
        morph.extend(high.morph.iter().cloned());
    }
    Datasets {
        lm,
        morph,
        dev: low.dev.without_labels(),
    }
}

/// Character vocabulary over the union of several training texts.
pub fn union_vocab(texts: &[&str], min_count_exclusive: usize) -> Result<CharVocab, CorpusError> {
    crate::corpus::build_vocab(&texts.concat(), min_count_exclusive)
}

/// Batches of one epoch, in consumption order.
pub fn epoch_batches(data: &Datasets, cfg: &TrainConfig, epoch: usize) -> Result<Vec<Batch>, TrainError> {
    let seed = derive_seed(cfg.seed, "epoch", epoch as u64);
    let (b, t) = (cfg.batch_size, cfg.seq_len);
    let group = |streams: &[&EncodedStream], tag: SourceTag, purpose: &str| -> Vec<Batch> {
        let mut segs: Vec<Segment> = streams
            .iter()
            .enumerate()
            .flat_map(|(i, s)| segments(i, s, t))
            .collect();
        segs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, 0)));
        assemble(streams, &segs, b, t, tag)
    };
    let labeled: Vec<&EncodedStream> = data.lm.iter().filter(|s| s.morph_labels.is_some()).collect();
    let plain: Vec<&EncodedStream> = data.lm.iter().filter(|s| s.morph_labels.is_none()).collect();
    let mut lm_side = group(&labeled, SourceTag::Joint, "joint");
    lm_side.extend(group(&plain, SourceTag::LmOnly, "lm"));
    if lm_side.is_empty() {
        let longest = data.lm.iter().map(EncodedStream::len).max().unwrap_or(0);
        return Err(CorpusError::StreamTooShort {
            len: longest,
            needed: t + 1,
        }
        .into());
    }
    lm_side.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "order", 0)));
    if data.morph.is_empty() {
        return Ok(lm_side);
    }
    let morph_refs: Vec<&EncodedStream> = data.morph.iter().collect();
    let morph_side = group(&morph_refs, SourceTag::MorphOnly, "morph");
    let order = alternating_order(lm_side.len(), morph_side.len(), derive_seed(seed, "alternate", 0))?;
    Ok(order
        .into_iter()
        .map(|(tag, i)| match tag {
            SourceTag::MorphOnly => morph_side[i].clone(),
            _ => lm_side[i].clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

/// Patience rule on a minimized score: stop once `patience` consecutive
/// epochs fail to beat the best so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch's score; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score >= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lm_loss: Option<f64>,
    pub morph_loss: Option<f64>,
    pub dev_bpc: f64,
    pub seconds: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: Option<StopReason>,
}

impl TrainLog {
    pub fn best_dev_bpc(&self) -> Option<f64> {
        self.records.iter().map(|r| r.dev_bpc).min_by(f64::total_cmp)
    }

    /// TSV `epoch lm_loss_nats morph_loss_nats dev_bpc seconds`. With
    /// `timestamps` off the seconds column is `-`, making logs of identical
    /// runs byte-identical.
    pub fn to_tsv(&self, timestamps: bool) -> String {
        let mut out = String::from("epoch\tlm_loss_nats\tmorph_loss_nats\tdev_bpc\tseconds\n");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        for r in &self.records {
            let secs = if timestamps { format!("{:.3}", r.seconds) } else { "-".into() };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{secs}",
                r.epoch,
                opt(r.lm_loss),
                opt(r.morph_loss),
                r.dev_bpc
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model<f32>,
    pub log: TrainLog,
}

/// Called after every epoch with the record and the current parameters.
pub type EpochObserver<'a> = dyn FnMut(&EpochRecord, &Model<f32>) -> Result<(), TrainError> + 'a;

/// Scores the model after an epoch; the default is LM BPC on the dev stream.
pub type DevScorer<'a> = dyn FnMut(usize, &Model<f32>) -> Result<f64, TrainError> + 'a;

/// Trains from a fresh initialization seeded from `train_cfg.seed`.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Datasets,
    scorer: Option<&mut DevScorer<'_>>,
    observer: Option<&mut EpochObserver<'_>>,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    let data = data.for_regime(train_cfg.regime, model_cfg.schema.len())?;
    let model = Model::new(model_cfg.clone(), derive_seed(train_cfg.seed, "init", 0))?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    let dev_ids = data.dev.char_ids.clone();
    let eval_opts = EvalOptions::new(train_cfg.seq_len);
    let mut default_scorer = |_: usize, m: &Model<f32>| -> Result<f64, TrainError> { Ok(bpc(m, &dev_ids, eval_opts)?.total_bpc()) };
    let scorer: &mut DevScorer<'_> = match scorer {
        Some(s) => s,
        None => &mut default_scorer,
    };
    let mut stopper = EarlyStopping::new(train_cfg.patience);
    let mut log = TrainLog::default();
    let mut best = trainer.model.clone();
    let mut observer = observer;
    for epoch in 1..=train_cfg.max_epochs {
        let started = Instant::now();
        let lr = train_cfg.learning_rate_at(epoch);
        let batches = epoch_batches(&data, train_cfg, epoch)?;
        let (mut lm_sum, mut lm_n, mut morph_sum, mut morph_n) = (0.0, 0usize, 0.0, 0usize);
        for batch in &batches {
            let s = trainer.step(batch, lr).map_err(|e| e.in_epoch(epoch))?;
            if let Some(v) = s.lm {
                lm_sum += v;
                lm_n += 1;
            }
            if let Some(v) = s.morph {
                morph_sum += v;
                morph_n += 1;
            }
        }
        if !trainer.model.params.all_finite() {
            return Err(TrainError::NonFinite(format!("parameters (epoch {epoch})")));
        }
        let dev_bpc = scorer(epoch, &trainer.model).map_err(|e| e.in_epoch(epoch))?;
        let improved = stopper.observe(epoch, dev_bpc);
        if improved {
            best = trainer.model.clone();
        }
        let record = EpochRecord {
            epoch,
            steps: batches.len(),
            lm_loss: (lm_n > 0).then(|| lm_sum / lm_n as f64),
            morph_loss: (morph_n > 0).then(|| morph_sum / morph_n as f64),
            dev_bpc,
            seconds: started.elapsed().as_secs_f64(),
            improved,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&record, &trainer.model)?;
        }
        log.records.push(record);
        if stopper.should_stop() {
            log.stop_reason = Some(StopReason::Patience);
            break;
        }
    }
    log.stop_reason.get_or_insert(StopReason::MaxEpochs);
    log.best_epoch = stopper.best.map(|(e, _)| e);
    Ok(TrainOutcome { best, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::MorphSchema;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap();
        let mut state = AdamState {
            m: vec![Tensor::zeros(&[3])],
            v: vec![Tensor::zeros(&[3])],
            step: 0,
        };
        adam_step(&mut [&mut p], &[g.clone()], &mut state, 0.002).unwrap();
        // m_hat = g, v_hat = g^2, so |update| = lr * |g| / (|g| + eps).
        for (i, (&new, &old)) in p.data().iter().zip(&[1.0, -2.0, 0.5]).enumerate() {
            let gi: f64 = g.data()[i];
            let expected = 0.002 * gi.abs() / (gi.abs() + ADAM_EPS);
            assert!(((old - new) * gi.signum() - expected).abs() < 1e-15, "index {i}");
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut state = AdamState {
            m: vec![Tensor::new(vec![2], vec![0.5, -0.5]).unwrap()],
            v: vec![Tensor::zeros(&[2])],
            step: 0,
        };
        let zero = Tensor::zeros(&[2]);
        let mut fresh = AdamState {
            m: vec![Tensor::zeros(&[2])],
            v: vec![Tensor::zeros(&[2])],
            step: 0,
        };
        adam_step(&mut [&mut p], &[zero.clone()], &mut fresh, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
        // Existing moments decay toward zero.
        let mut q = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        adam_step(&mut [&mut q], &[zero], &mut state, 0.1).unwrap();
        assert!((state.m[0].data()[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap_or_else(|_| Tensor::filled(&[1], f64::NAN));
        let mut state = AdamState {
            m: vec![Tensor::zeros(&[1])],
            v: vec![Tensor::zeros(&[1])],
            step: 0,
        };
        assert!(matches!(
            adam_step(&mut [&mut p], &[g], &mut state, 0.1),
            Err(TrainError::NonFinite(_))
        ));
        assert_eq!(state.step, 0);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn patience_rule() {
        let mut s = EarlyStopping::new(10);
        let mut stopped_at = None;
        for epoch in 1..=50 {
            s.observe(epoch, epoch as f64);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(11));
        assert_eq!(s.best, Some((1, 1.0)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 200,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let decay = TrainConfig {
            lr_decay_every: 2,
            lr_decay: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(decay.learning_rate_at(1), 0.002);
        assert_eq!(decay.learning_rate_at(3), 0.001);
    }

    fn labeled(len: usize) -> EncodedStream {
        EncodedStream {
            char_ids: (0..len).map(|i| (i % 5) as u32).collect(),
            morph_labels: Some((0..len).map(|i| (i % 3) as u16).collect()),
            n_feats: 1,
            none_ids: vec![2],
        }
    }

    #[test]
    fn regime_validation() {
        let plain = EncodedStream::unlabeled(vec![1; 50]);
        let data = Datasets {
            lm: vec![plain.clone()],
            morph: vec![],
            dev: plain.clone(),
        };
        assert!(data.for_regime(Regime::LmOnly, 0).is_ok());
        assert!(data.for_regime(Regime::FullySupervised, 1).is_err());
        assert!(data.for_regime(Regime::Distant, 1).is_err());
        let joint = Datasets {
            lm: vec![labeled(50)],
            ..data.clone()
        };
        assert!(joint.for_regime(Regime::FullySupervised, 1).is_ok());
        assert!(joint.for_regime(Regime::FullySupervised, 2).is_err());
        let stripped = joint.for_regime(Regime::LmOnly, 1).unwrap();
        assert!(stripped.lm[0].morph_labels.is_none());
        let distant = Datasets {
            morph: vec![labeled(50)],
            ..data
        };
        assert!(distant.for_regime(Regime::Distant, 1).is_ok());
        assert!(distant.for_regime(Regime::LmOnly, 1).is_err());
    }

    fn cfg_for(regime: Regime) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            seq_len: 4,
            regime,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn distant_epoch_alternates() {
        let data = Datasets {
            lm: vec![EncodedStream::unlabeled(vec![1; 41])],
            morph: vec![labeled(9)],
            dev: EncodedStream::unlabeled(vec![1; 10]),
        };
        let b = epoch_batches(&data, &cfg_for(Regime::Distant), 1).unwrap();
        // 10 LM segments -> 5 batches; 2 morph segments -> 1 batch, cycled.
        assert_eq!(b.len(), 10);
        for (i, batch) in b.iter().enumerate() {
            let want = if i % 2 == 0 { SourceTag::LmOnly } else { SourceTag::MorphOnly };
            assert_eq!(batch.source, want);
        }
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        let data = Datasets {
            lm: vec![EncodedStream::unlabeled((0..81).map(|i| (i % 7) as u32).collect())],
            morph: vec![],
            dev: EncodedStream::unlabeled(vec![1; 10]),
        };
        let c = cfg_for(Regime::LmOnly);
        let e1 = epoch_batches(&data, &c, 1).unwrap();
        assert_eq!(e1, epoch_batches(&data, &c, 1).unwrap());
        assert_ne!(e1, epoch_batches(&data, &c, 2).unwrap());
    }

    #[test]
    fn cross_lingual_flags() {
        let low = Datasets {
            lm: vec![labeled(20)],
            morph: vec![],
            dev: EncodedStream::unlabeled(vec![2; 10]),
        };
        let high = Datasets {
            lm: vec![labeled(30)],
            morph: vec![],
            dev: EncodedStream::unlabeled(vec![3; 10]),
        };
        let none = CrossLingualFlags {
            use_high_lm: false,
            use_high_morph: false,
            use_low_morph: true,
        };
        let d = build_cross_lingual_dataset(&high, &low, none);
        assert_eq!(d.lm, low.lm);
        assert!(d.morph.is_empty());
        assert_eq!(d.dev.char_ids, low.dev.char_ids);

        // Low LM with high-language morphology only.
        let d = build_cross_lingual_dataset(
            &high,
            &low,
            CrossLingualFlags {
                use_high_lm: false,
                use_high_morph: true,
                use_low_morph: false,
            },
        );
        assert_eq!(d.lm.len(), 1);
        assert!(d.lm[0].morph_labels.is_none());
        assert_eq!(d.morph, high.lm);

        let both = build_cross_lingual_dataset(
            &high,
            &low,
            CrossLingualFlags {
                use_high_lm: true,
                use_high_morph: true,
                use_low_morph: true,
            },
        );
        assert_eq!(both.lm.len(), 2);
        assert!(both.lm.iter().all(|s| s.morph_labels.is_some()));
    }

    #[test]
    fn union_vocab_covers_both_languages() {
        let v = union_vocab(&["aaab", "bbcc"], 1).unwrap();
        assert_eq!(v.chars(), &['a', 'b', 'c']);
        let v = union_vocab(&["aaaaab", "zzzzz"], 4).unwrap();
        assert!(v.chars().contains(&'a') && v.chars().contains(&'z'));
    }

    #[test]
    fn lm_only_training_never_touches_morph_heads() {
        let schema = MorphSchema::from_features([("F", vec!["x", "y"])]);
        let mcfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 6,
            num_layers: 1,
            mtl_layer: 1,
            dropout: 0.1,
            ..ModelConfig::new(5, schema)
        };
        let tcfg = TrainConfig {
            max_epochs: 2,
            patience: 2,
            ..cfg_for(Regime::LmOnly)
        };
        let data = Datasets {
            lm: vec![labeled(60)],
            morph: vec![],
            dev: EncodedStream::unlabeled((0..20).map(|i| (i % 5) as u32).collect()),
        };
        let init = Model::<f32>::new(mcfg.clone(), derive_seed(tcfg.seed, "init", 0)).unwrap();
        let out = train(&mcfg, &tcfg, &data, None, None).unwrap();
        assert_eq!(out.best.params.morph_heads, init.params.morph_heads);
        assert_ne!(out.best.params.lm_head, init.params.lm_head);
        assert!(out.log.records.iter().all(|r| r.morph_loss.is_none()));
    }
}
