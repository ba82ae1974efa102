use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, ModelParams};
use crate::corpus::{Batch, SourceTag};
use crate::diff::{Gradients, NodeId, Real, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    Eval,
}

/// Hidden and cell state of one layer, each `[rows, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<F> {
    pub h: Tensor<F>,
    pub c: Tensor<F>,
}

impl<F: Real> LayerState<F> {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[rows, hidden]),
            c: Tensor::zeros(&[rows, hidden]),
        }
    }
}

/// Parameters recorded on a tape, in the same order as
/// [`ModelParams::named`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub embedding: NodeId,
    pub layers: Vec<[NodeId; 3]>,
    pub lm_head: [NodeId; 2],
    pub morph_heads: Vec<[NodeId; 2]>,
}

impl ParamNodes {
    /// Records every parameter as a trainable leaf (or a constant when
    /// `trainable` is false, which skips gradient bookkeeping).
    pub fn record<F: Real>(tape: &mut Tape<F>, params: &ModelParams<F>, trainable: bool) -> Self {
        let mut put = |t: &Tensor<F>| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        Self {
            embedding: put(&params.embedding),
            layers: params
                .layers
                .iter()
                .map(|l| [put(&l.w_input), put(&l.w_hidden), put(&l.bias)])
                .collect(),
            lm_head: [put(&params.lm_head.weight), put(&params.lm_head.bias)],
            morph_heads: params
                .morph_heads
                .iter()
                .map(|h| [put(&h.weight), put(&h.bias)])
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.extend_from_slice(&self.lm_head);
        for h in &self.morph_heads {
            out.extend_from_slice(h);
        }
        out
    }

    /// Gradients in parameter order; parameters the loss did not reach get
    /// zero tensors.
    pub fn gradients<F: Real>(&self, grads: &mut Gradients<F>, params: &ModelParams<F>) -> Vec<Tensor<F>> {
        self.ids()
            .into_iter()
            .zip(params.tensors())
            .map(|(id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// Recurrent trunk outputs. Rows are time-major: row `t * rows + r` is
/// sequence `r` at step `t`.
#[derive(Debug, Clone)]
pub struct Trunk<F> {
    pub rows: usize,
    pub seq_len: usize,
    /// Output of every layer (after dropout in training), `[seq_len * rows, hidden]`.
    pub layer_outputs: Vec<NodeId>,
    pub final_state: Vec<LayerState<F>>,
}

impl<F: Real> Trunk<F> {
    /// Runs embedding and LSTM stack over `inputs`, laid out row-major
    /// `[rows, seq_len]` as in [`Batch`].
    pub fn run(
        tape: &mut Tape<F>,
        pn: &ParamNodes,
        cfg: &ModelConfig,
        inputs: &[u32],
        rows: usize,
        seq_len: usize,
        mode: Mode,
        init: Option<&[LayerState<F>]>,
    ) -> Result<Self, ModelError> {
        if rows == 0 || seq_len == 0 || inputs.len() != rows * seq_len {
            return Err(ModelError::Config(format!(
                "{} inputs do not form {rows} rows of {seq_len}",
                inputs.len()
            )));
        }
        if let Some(init) = init {
            if init.len() != cfg.num_layers
                || init
                    .iter()
                    .any(|s| s.h.shape() != [rows, cfg.hidden_dim] || s.c.shape() != [rows, cfg.hidden_dim])
            {
                return Err(ModelError::Config("initial state does not match model and batch".into()));
            }
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for t in 0..seq_len {
            for r in 0..rows {
                let id = inputs[r * seq_len + t];
                if id as usize >= cfg.vocab_size {
                    return Err(ModelError::IdOutOfRange {
                        id,
                        vocab: cfg.vocab_size,
                    });
                }
                ids.push(id as usize);
            }
        }
        let (rate, mut rng) = match mode {
            Mode::Train { dropout_seed } => (cfg.dropout, Some(ChaCha8Rng::seed_from_u64(dropout_seed))),
            Mode::Eval => (0.0, None),
        };
        let mut drop = |tape: &mut Tape<F>, x: NodeId| -> Result<NodeId, ModelError> {
            match rng.as_mut() {
                Some(rng) if rate > 0.0 => Ok(tape.dropout(x, rate, rng)?),
                _ => Ok(x),
            }
        };

        let h = cfg.hidden_dim;
        let mut x = tape.gather(pn.embedding, &ids)?;
        if cfg.embed_dropout {
            x = drop(tape, x)?;
        }
        let mut layer_outputs = Vec::with_capacity(cfg.num_layers);
        let mut final_state = Vec::with_capacity(cfg.num_layers);
        for (l, &[w_in, w_hid, bias]) in pn.layers.iter().enumerate() {
            let proj = tape.matmul(x, w_in)?;
            let proj = tape.add_bias(proj, bias)?;
            let (mut hp, mut cp) = match init {
                Some(s) => (
                    Some(tape.constant(s[l].h.clone())),
                    Some(tape.constant(s[l].c.clone())),
                ),
                None => (None, None),
            };
            let mut outs = Vec::with_capacity(seq_len);
            for t in 0..seq_len {
                let mut gates = tape.slice(proj, 0, t * rows, (t + 1) * rows)?;
                if let Some(hp) = hp {
                    let rec = tape.matmul(hp, w_hid)?;
                    gates = tape.add(gates, rec)?;
                }
                let i_pre = tape.slice(gates, 1, 0, h)?;
                let g_pre = tape.slice(gates, 1, 2 * h, 3 * h)?;
                let o_pre = tape.slice(gates, 1, 3 * h, 4 * h)?;
                let i = tape.sigmoid(i_pre)?;
                let g = tape.tanh(g_pre)?;
                let o = tape.sigmoid(o_pre)?;
                let mut c = tape.mul(i, g)?;
                if let Some(cp) = cp {
                    let f_pre = tape.slice(gates, 1, h, 2 * h)?;
                    let f = tape.sigmoid(f_pre)?;
                    let keep = tape.mul(f, cp)?;
                    c = tape.add(c, keep)?;
                }
                let tc = tape.tanh(c)?;
                let hn = tape.mul(o, tc)?;
                outs.push(hn);
                hp = Some(hn);
                cp = Some(c);
            }
            final_state.push(LayerState {
                h: tape.value(hp.expect("seq_len >= 1")).clone(),
                c: tape.value(cp.expect("seq_len >= 1")).clone(),
            });
            let out = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0)? };
            let out = drop(tape, out)?;
            layer_outputs.push(out);
            x = out;
        }
        Ok(Self {
            rows,
            seq_len,
            layer_outputs,
            final_state,
        })
    }

    pub fn top(&self) -> NodeId {
        *self.layer_outputs.last().expect("at least one layer")
    }

    /// `[seq_len * rows, vocab]` next-character logits.
    pub fn lm_logits(&self, tape: &mut Tape<F>, pn: &ParamNodes) -> Result<NodeId, ModelError> {
        let z = tape.matmul(self.top(), pn.lm_head[0])?;
        Ok(tape.add_bias(z, pn.lm_head[1])?)
    }

    /// Logits of morphology head `feature`, read from layer `mtl_layer`.
    pub fn morph_logits(&self, tape: &mut Tape<F>, pn: &ParamNodes, mtl_layer: usize, feature: usize) -> Result<NodeId, ModelError> {
        let [w, b] = pn.morph_heads[feature];
        let z = tape.matmul(self.layer_outputs[mtl_layer - 1], w)?;
        Ok(tape.add_bias(z, b)?)
    }

    /// Reorders a row-major `[rows, seq_len]` array into the trunk's
    /// time-major row order.
    pub fn time_major<T: Copy>(&self, row_major: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(row_major.len());
        for t in 0..self.seq_len {
            for r in 0..self.rows {
                out.push(row_major[r * self.seq_len + t]);
            }
        }
        out
    }
}

/// Which loss terms apply to a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMask {
    pub lm: bool,
    pub morph: bool,
}

impl From<SourceTag> for LossMask {
    fn from(tag: SourceTag) -> Self {
        match tag {
            SourceTag::LmOnly => Self { lm: true, morph: false },
            SourceTag::MorphOnly => Self { lm: false, morph: true },
            SourceTag::Joint => Self { lm: true, morph: true },
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: NodeId,
    /// Mean LM NLL in nats.
    pub lm: Option<NodeId>,
    /// Mean NLL per morphology feature, in schema order. Empty when the
    /// morphology term is off.
    pub morph: Vec<NodeId>,
}

/// `lm_mean_nll + delta * sum_i morph_mean_nll_i`, each term gated by `mask`.
///
/// With `mask_none`, a feature's mean runs only over positions whose label
/// is not NONE; a feature with no such position in the batch contributes
/// nothing.
pub fn loss<F: Real>(
    tape: &mut Tape<F>,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    trunk: &Trunk<F>,
    batch: &Batch,
    mask: LossMask,
    delta: f64,
    mask_none: bool,
) -> Result<LossNodes, ModelError> {
    let mut terms = Vec::new();
    let mut lm = None;
    if mask.lm {
        if batch.targets.len() != batch.inputs.len() {
            return Err(ModelError::MissingTargets("language-model"));
        }
        let logits = trunk.lm_logits(tape, pn)?;
        let targets: Vec<usize> = trunk.time_major(&batch.targets).into_iter().map(|t| t as usize).collect();
        let nll = tape.softmax_xent(logits, &targets)?;
        let mean = tape.mean(nll)?;
        lm = Some(mean);
        terms.push(mean);
    }
    let mut morph = Vec::new();
    if mask.morph && !cfg.schema.is_empty() {
        let labels = batch
            .morph_targets
            .as_ref()
            .ok_or(ModelError::MissingTargets("morphology"))?;
        let n_feats = cfg.schema.len();
        if batch.n_feats != n_feats || labels.len() != batch.inputs.len() * n_feats {
            return Err(ModelError::MissingTargets("morphology"));
        }
        let mut weighted = Vec::new();
        for f in 0..n_feats {
            let per_pos: Vec<u16> = (0..batch.inputs.len()).map(|p| labels[p * n_feats + f]).collect();
            let targets: Vec<usize> = trunk.time_major(&per_pos).into_iter().map(usize::from).collect();
            let none = usize::from(batch.none_ids[f]);
            let weights: Vec<F> = if mask_none {
                let n = targets.iter().filter(|&&t| t != none).count();
                if n == 0 {
                    continue;
                }
                let w = F::ONE / F::from_f64(n as f64);
                targets.iter().map(|&t| if t == none { F::ZERO } else { w }).collect()
            } else {
                vec![F::ONE / F::from_f64(targets.len() as f64); targets.len()]
            };
            let logits = trunk.morph_logits(tape, pn, cfg.mtl_layer, f)?;
            let nll = tape.softmax_xent(logits, &targets)?;
            let mean = tape.weighted_sum(nll, &weights)?;
            morph.push(mean);
            weighted.push(tape.scale(mean, F::from_f64(delta))?);
        }
        terms.extend(weighted);
    }
    let total = match terms.split_first() {
        None => tape.constant(Tensor::scalar(F::ZERO)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    Ok(LossNodes { total, lm, morph })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::MorphSchema;
    use crate::model::ModelParams;

    fn cfg(layers: usize, mtl: usize) -> ModelConfig {
        let schema = MorphSchema::from_features([("Number", vec!["Pl", "Sg"]), ("Tense", vec!["Past"])]);
        ModelConfig {
            embed_dim: 4,
            hidden_dim: 3,
            num_layers: layers,
            mtl_layer: mtl,
            dropout: 0.25,
            ..ModelConfig::new(6, schema)
        }
    }

    fn batch(rows: usize, t: usize, n_feats: usize) -> Batch {
        let n = rows * t;
        let inputs: Vec<u32> = (0..n).map(|i| (i * 7 % 6) as u32).collect();
        let targets: Vec<u32> = (0..n).map(|i| ((i * 5 + 1) % 6) as u32).collect();
        let morph: Vec<u16> = (0..n * n_feats)
            .map(|i| if i % n_feats == 0 { (i % 3) as u16 } else { (i % 2) as u16 })
            .collect();
        Batch {
            rows,
            seq_len: t,
            inputs,
            targets,
            morph_targets: Some(morph),
            n_feats,
            none_ids: vec![2, 1],
            source: SourceTag::Joint,
        }
    }

    fn total_loss(params: &ModelParams<f64>, c: &ModelConfig, b: &Batch, delta: f64, mask_none: bool, mode: Mode) -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let pn = ParamNodes::record(&mut tape, params, true);
        let trunk = Trunk::run(&mut tape, &pn, c, &b.inputs, b.rows, b.seq_len, mode, None).unwrap();
        let l = loss(&mut tape, &pn, c, &trunk, b, b.source.into(), delta, mask_none).unwrap();
        let v = tape.value(l.total).data()[0];
        let mut g = tape.backward(l.total).unwrap();
        (v, pn.gradients(&mut g, params))
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let c = cfg(1, 1);
        let p = ModelParams::<f64>::zeros(&c);
        let mut b = batch(2, 3, 2);
        b.source = SourceTag::LmOnly;
        let (v, _) = total_loss(&p, &c, &b, 1.0, false, Mode::Eval);
        assert!((v - (6f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_is_lm_plus_delta_times_morph() {
        let c = cfg(2, 1);
        let p = ModelParams::<f64>::init(&c, 1);
        let b = batch(2, 4, 2);
        let mut tape = Tape::new();
        let pn = ParamNodes::record(&mut tape, &p, true);
        let trunk = Trunk::run(&mut tape, &pn, &c, &b.inputs, 2, 4, Mode::Eval, None).unwrap();
        let l = loss(&mut tape, &pn, &c, &trunk, &b, LossMask { lm: true, morph: true }, 0.5, false).unwrap();
        let lm = tape.value(l.lm.unwrap()).data()[0];
        let m: f64 = l.morph.iter().map(|&n| tape.value(n).data()[0]).sum();
        assert!((tape.value(l.total).data()[0] - (lm + 0.5 * m)).abs() < 1e-12);

        let l0 = loss(&mut tape, &pn, &c, &trunk, &b, LossMask { lm: true, morph: true }, 0.0, false).unwrap();
        assert!((tape.value(l0.total).data()[0] - lm).abs() < 1e-12);
        let lm_only = loss(&mut tape, &pn, &c, &trunk, &b, LossMask { lm: true, morph: false }, 0.5, false).unwrap();
        assert!(lm_only.morph.is_empty());
    }

    #[test]
    fn missing_morph_targets_is_an_error() {
        let c = cfg(1, 1);
        let p = ModelParams::<f64>::init(&c, 1);
        let mut b = batch(1, 3, 2);
        b.morph_targets = None;
        let mut tape = Tape::new();
        let pn = ParamNodes::record(&mut tape, &p, true);
        let trunk = Trunk::run(&mut tape, &pn, &c, &b.inputs, 1, 3, Mode::Eval, None).unwrap();
        let err = loss(&mut tape, &pn, &c, &trunk, &b, LossMask { lm: false, morph: true }, 1.0, false).unwrap_err();
        assert!(matches!(err, ModelError::MissingTargets(_)));
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let c = cfg(1, 1);
        let p = ModelParams::<f64>::init(&c, 1);
        let mut tape = Tape::new();
        let pn = ParamNodes::record(&mut tape, &p, true);
        let err = Trunk::run(&mut tape, &pn, &c, &[0, 9], 1, 2, Mode::Eval, None).unwrap_err();
        assert!(matches!(err, ModelError::IdOutOfRange { id: 9, .. }));
    }

    #[test]
    fn carried_state_equals_one_long_pass() {
        let c = cfg(2, 2);
        let p = ModelParams::<f64>::init(&c, 9);
        let ids: Vec<u32> = vec![1, 2, 3, 4, 5, 0, 1, 2];
        let run = |ids: &[u32], init: Option<&[LayerState<f64>]>| {
            let mut tape = Tape::new();
            let pn = ParamNodes::record(&mut tape, &p, false);
            let tr = Trunk::run(&mut tape, &pn, &c, ids, 1, ids.len(), Mode::Eval, init).unwrap();
            let out = tape.value(tr.top()).data().to_vec();
            (out, tr.final_state)
        };
        let (full, _) = run(&ids, None);
        let (a, state) = run(&ids[..5], None);
        let (b, _) = run(&ids[5..], Some(&state));
        let joined: Vec<f64> = a.into_iter().chain(b).collect();
        for (x, y) in full.iter().zip(&joined) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (layers, mtl, mask_none, train) in [(1, 1, false, false), (2, 1, true, true), (2, 2, false, true)] {
            let c = cfg(layers, mtl);
            let p = ModelParams::<f64>::init(&c, 5);
            let b = batch(2, 3, 2);
            let mode = if train { Mode::Train { dropout_seed: 11 } } else { Mode::Eval };
            let (_, grads) = total_loss(&p, &c, &b, 0.7, mask_none, mode);
            let eps = 1e-6;
            let mut worst: f64 = 0.0;
            for (ti, g) in grads.iter().enumerate() {
                for k in (0..g.len()).step_by(3) {
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti].data_mut()[k] += eps;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti].data_mut()[k] -= eps;
                    let fp = total_loss(&plus, &c, &b, 0.7, mask_none, mode).0;
                    let fm = total_loss(&minus, &c, &b, 0.7, mask_none, mode).0;
                    let num = (fp - fm) / (2.0 * eps);
                    let ana = g.data()[k];
                    // Central differences on an O(1) loss carry ~1e-10 of
                    // roundoff, so tiny gradients are compared absolutely.
                    let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-4);
                    worst = worst.max(rel);
                }
            }
            assert!(worst < 1e-4, "layers {layers} mtl {mtl}: relative error {worst}");
        }
    }

    #[test]
    fn mask_none_ignores_none_positions() {
        let c = cfg(1, 1);
        let p = ModelParams::<f64>::init(&c, 2);
        let mut b = batch(1, 4, 2);
        b.source = SourceTag::MorphOnly;
        // feature 0 labels: only position 0 is tagged (value 0); rest NONE (2)
        b.morph_targets = Some(vec![0, 1, 2, 1, 2, 1, 2, 1]);
        let mut tape = Tape::new();
        let pn = ParamNodes::record(&mut tape, &p, true);
        let trunk = Trunk::run(&mut tape, &pn, &c, &b.inputs, 1, 4, Mode::Eval, None).unwrap();
        let l = loss(&mut tape, &pn, &c, &trunk, &b, b.source.into(), 1.0, true).unwrap();
        // Tense is NONE everywhere, so only Number contributes.
        assert_eq!(l.morph.len(), 1);
        let logits = trunk.morph_logits(&mut tape, &pn, 1, 0).unwrap();
        let nll = tape.softmax_xent(logits, &[0, 2, 2, 2]).unwrap();
        let first = tape.value(nll).data()[0];
        assert!((tape.value(l.morph[0]).data()[0] - first).abs() < 1e-12);
    }
}
