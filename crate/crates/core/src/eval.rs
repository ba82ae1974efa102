//! Bits-per-character evaluation, per-word attribution and the
//! inflected/uninflected split.

use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;

use crate::alignment::{treebank_spans, treebank_text};
use crate::conllu::{is_inflected, Treebank};
use crate::corpus::CharVocab;
use crate::diff::{Real, Tape};
use crate::model::{LayerState, Mode, Model, ModelError, ParamNodes, Trunk};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty stream")]
    EmptyStream,
    #[error("span bookkeeping mismatch: {0}")]
    SpanMismatch(String),
    #[error("reports cover different streams ({a} vs {b} characters)")]
    CharCountMismatch { a: usize, b: usize },
    #[error("invalid evaluation options: {0}")]
    Options(String),
    #[error("report TSV: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub seq_len: usize,
    /// Segments scored together; does not change the result.
    pub batch_size: usize,
    /// Carry the recurrent state across segments instead of resetting it.
    pub carry_state: bool,
}

impl EvalOptions {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            batch_size: 32,
            carry_state: false,
        }
    }
}

/// `-log2 p(c_i | c_<i)` for every character of `ids`.
///
/// The stream is cut into segments of `seq_len` characters. The first
/// character of a segment is predicted from the initial zero state, and the
/// state is reset at every segment start unless `carry_state` is set.
pub fn char_bits<F: Real>(model: &Model<F>, ids: &[u32], opts: EvalOptions) -> Result<Vec<f64>, EvalError> {
    if ids.is_empty() {
        return Err(EvalError::EmptyStream);
    }
    if opts.seq_len < 1 || opts.batch_size < 1 {
        return Err(EvalError::Options(format!(
            "seq_len {} and batch_size {} must be >= 1",
            opts.seq_len, opts.batch_size
        )));
    }
    let cfg = &model.config;
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            id: bad,
            vocab: cfg.vocab_size,
        }
        .into());
    }
    let ln2 = std::f64::consts::LN_2;
    let mut bits = vec![0.0; ids.len()];
    bits[0] = bits_from_zero_state(model, ids[0]);

    if opts.carry_state {
        let mut state: Option<Vec<LayerState<F>>> = None;
        let mut s = 0;
        while s + 1 < ids.len() {
            let end = (s + opts.seq_len).min(ids.len() - 1);
            let inputs = &ids[s..end];
            let targets: Vec<usize> = ids[s + 1..end + 1].iter().map(|&t| t as usize).collect();
            let (nll, next) = score_rows(model, inputs, &targets, 1, inputs.len(), state.as_deref())?;
            for (k, v) in nll.into_iter().enumerate() {
                bits[s + 1 + k] = v / ln2;
            }
            state = Some(next);
            s = end;
        }
        return Ok(bits);
    }

    let t = opts.seq_len;
    let starts: Vec<usize> = (0..ids.len()).step_by(t).collect();
    for &s in starts.iter().skip(1) {
        bits[s] = bits_from_zero_state(model, ids[s]);
    }
    let full: Vec<usize> = starts.iter().copied().filter(|&s| s + t <= ids.len()).collect();
    let mut groups: Vec<(usize, Vec<usize>)> = full.chunks(opts.batch_size).map(|c| (t, c.to_vec())).collect();
    if let Some(&last) = starts.last() {
        if last + t > ids.len() {
            groups.push((ids.len() - last, vec![last]));
        }
    }
    for (len, group) in groups {
        if len < 2 {
            continue;
        }
        let steps = len - 1;
        let mut inputs = Vec::with_capacity(group.len() * steps);
        for &s in &group {
            inputs.extend_from_slice(&ids[s..s + steps]);
        }
        // Targets in the trunk's time-major order.
        let mut targets = Vec::with_capacity(inputs.len());
        for step in 0..steps {
            for &s in &group {
                targets.push(ids[s + 1 + step] as usize);
            }
        }
        let (nll, _) = score_rows(model, &inputs, &targets, group.len(), steps, None)?;
        for step in 0..steps {
            for (r, &s) in group.iter().enumerate() {
                bits[s + 1 + step] = nll[step * group.len() + r] / ln2;
            }
        }
    }
    Ok(bits)
}

/// Bits of `target` from the zero state: the top hidden state is zero, so
/// the logits are the LM head bias.
fn bits_from_zero_state<F: Real>(model: &Model<F>, target: u32) -> f64 {
    let b: Vec<f64> = model.params.lm_head.bias.data().iter().map(|v| v.to_f64()).collect();
    let max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = b.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    (lse - b[target as usize]) / std::f64::consts::LN_2
}

/// Per-position NLL in time-major order plus the final state.
fn score_rows<F: Real>(
    model: &Model<F>,
    inputs: &[u32],
    targets: &[usize],
    rows: usize,
    steps: usize,
    init: Option<&[LayerState<F>]>,
) -> Result<(Vec<f64>, Vec<LayerState<F>>), EvalError> {
    let mut tape = Tape::new();
    let pn = ParamNodes::record(&mut tape, &model.params, false);
    let trunk = Trunk::run(&mut tape, &pn, &model.config, inputs, rows, steps, Mode::Eval, init)?;
    let logits = trunk.lm_logits(&mut tape, &pn)?;
    let nll = tape.softmax_xent(logits, targets).map_err(ModelError::from)?;
    let out = tape.value(nll).data().iter().map(|v| v.to_f64()).collect();
    Ok((out, trunk.final_state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordBits {
    pub index: usize,
    pub form: String,
    /// Character range in the evaluated stream.
    pub span: Range<usize>,
    pub bits: f64,
    pub chars: usize,
    pub inflected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitBpc {
    pub inflected_chars: usize,
    pub inflected_bits: f64,
    pub uninflected_chars: usize,
    pub uninflected_bits: f64,
}

impl SplitBpc {
    /// `None` when the split has no characters.
    pub fn inflected(&self) -> Option<f64> {
        ratio(self.inflected_bits, self.inflected_chars)
    }

    pub fn uninflected(&self) -> Option<f64> {
        ratio(self.uninflected_bits, self.uninflected_chars)
    }

    /// BPC over all word characters.
    pub fn words(&self) -> Option<f64> {
        ratio(
            self.inflected_bits + self.uninflected_bits,
            self.inflected_chars + self.uninflected_chars,
        )
    }

    /// Inflected minus uninflected BPC.
    pub fn delta(&self) -> Option<f64> {
        Some(self.inflected()? - self.uninflected()?)
    }
}

fn ratio(bits: f64, chars: usize) -> Option<f64> {
    (chars > 0).then(|| bits / chars as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub char_count: usize,
    pub total_bits: f64,
    pub per_word: Option<Vec<WordBits>>,
    pub split: Option<SplitBpc>,
}

impl EvalReport {
    pub fn from_bits(bits: &[f64]) -> Self {
        Self {
            char_count: bits.len(),
            total_bits: bits.iter().sum(),
            per_word: None,
            split: None,
        }
    }

    pub fn total_bpc(&self) -> f64 {
        self.total_bits / self.char_count as f64
    }

    /// TSV with header `scope identifier chars bits bpc`. Word rows use
    /// `index:form` identifiers.
    pub fn to_tsv(&self, identifier: &str) -> String {
        let mut out = String::from("scope\tidentifier\tchars\tbits\tbpc\n");
        let row = |out: &mut String, scope: &str, id: &str, chars: usize, bits: f64| {
            let bpc = ratio(bits, chars).map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{scope}\t{id}\t{chars}\t{bits:.6}\t{bpc}");
        };
        row(&mut out, "total", identifier, self.char_count, self.total_bits);
        if let Some(s) = &self.split {
            row(&mut out, "inflected", identifier, s.inflected_chars, s.inflected_bits);
            row(&mut out, "uninflected", identifier, s.uninflected_chars, s.uninflected_bits);
        }
        for w in self.per_word.iter().flatten() {
            let id = format!("{}:{}", w.index, crate::escape::escape_str(&w.form));
            row(&mut out, "word", &id, w.chars, w.bits);
        }
        out
    }

    /// Reads the `total` and split rows back from [`EvalReport::to_tsv`]
    /// output. Word rows and `#` comment lines are skipped.
    pub fn from_tsv(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some("scope\tidentifier\tchars\tbits\tbpc") {
            return Err(EvalError::Format("missing report header".into()));
        }
        let mut total = None;
        let (mut infl, mut uninfl) = (None, None);
        for line in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(EvalError::Format(format!("bad report line `{line}`")));
            }
            let chars: usize = cols[2].parse().map_err(|_| EvalError::Format(format!("bad char count in `{line}`")))?;
            let bits: f64 = cols[3].parse().map_err(|_| EvalError::Format(format!("bad bits in `{line}`")))?;
            match cols[0] {
                "total" => total = Some((chars, bits)),
                "inflected" => infl = Some((chars, bits)),
                "uninflected" => uninfl = Some((chars, bits)),
                _ => {}
            }
        }
        let (char_count, total_bits) = total.ok_or_else(|| EvalError::Format("no `total` row".into()))?;
        let split = match (infl, uninfl) {
            (Some((ic, ib)), Some((uc, ub))) => Some(SplitBpc {
                inflected_chars: ic,
                inflected_bits: ib,
                uninflected_chars: uc,
                uninflected_bits: ub,
            }),
            (None, None) => None,
            _ => return Err(EvalError::Format("only one of the split rows is present".into())),
        };
        Ok(Self {
            char_count,
            total_bits,
            per_word: None,
            split,
        })
    }
}

/// BPC of a character-id stream.
pub fn bpc<F: Real>(model: &Model<F>, ids: &[u32], opts: EvalOptions) -> Result<EvalReport, EvalError> {
    Ok(EvalReport::from_bits(&char_bits(model, ids, opts)?))
}

/// Sentence separator used when a treebank is turned into a stream.
pub const SENTENCE_SEPARATOR: &str = "\n";

/// Scores the treebank text and attributes bits to words.
pub fn per_word_bits<F: Real>(
    model: &Model<F>,
    tb: &Treebank,
    vocab: &CharVocab,
    opts: EvalOptions,
) -> Result<EvalReport, EvalError> {
    let text = treebank_text(tb, SENTENCE_SEPARATOR);
    let bits = char_bits(model, &vocab.encode_text(&text), opts)?;
    attribute_words(&bits, &text, tb)
}

/// Aggregates per-character bits over the treebank's word spans. Spaces and
/// sentence separators belong to no word.
pub fn attribute_words(bits: &[f64], text: &str, tb: &Treebank) -> Result<EvalReport, EvalError> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() != bits.len() {
        return Err(EvalError::SpanMismatch(format!(
            "{} characters of text but {} scored",
            chars.len(),
            bits.len()
        )));
    }
    let mut words = Vec::with_capacity(tb.token_count());
    let mut split = SplitBpc {
        inflected_chars: 0,
        inflected_bits: 0.0,
        uninflected_chars: 0,
        uninflected_bits: 0.0,
    };
    for (index, (tok, span)) in tb.tokens().zip(treebank_spans(tb, SENTENCE_SEPARATOR)).enumerate() {
        let got: String = chars
            .get(span.clone())
            .ok_or_else(|| EvalError::SpanMismatch(format!("word {index} span {span:?} outside stream")))?
            .iter()
            .collect();
        if got != tok.form {
            return Err(EvalError::SpanMismatch(format!("word {index}: expected `{}`, stream has `{got}`", tok.form)));
        }
        let b: f64 = bits[span.clone()].iter().sum();
        let n = span.len();
        let inflected = is_inflected(tok);
        if inflected {
            split.inflected_chars += n;
            split.inflected_bits += b;
        } else {
            split.uninflected_chars += n;
            split.uninflected_bits += b;
        }
        words.push(WordBits {
            index,
            form: tok.form.clone(),
            span,
            bits: b,
            chars: n,
            inflected,
        });
    }
    Ok(EvalReport {
        per_word: Some(words),
        split: Some(split),
        ..EvalReport::from_bits(bits)
    })
}

/// `a - b` per field; with `a` the baseline, positive values mean `b` is better.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub total: f64,
    pub inflected: Option<f64>,
    pub uninflected: Option<f64>,
    pub words: Option<f64>,
    /// Per-word BPC deltas, when both reports carry word detail.
    pub per_word: Option<Vec<f64>>,
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<Comparison, EvalError> {
    if a.char_count != b.char_count {
        return Err(EvalError::CharCountMismatch {
            a: a.char_count,
            b: b.char_count,
        });
    }
    let diff = |x: Option<f64>, y: Option<f64>| Some(x? - y?);
    let (sa, sb) = (a.split.as_ref(), b.split.as_ref());
    let per_word = match (&a.per_word, &b.per_word) {
        (Some(wa), Some(wb)) => {
            if wa.len() != wb.len() || wa.iter().zip(wb).any(|(x, y)| x.span != y.span) {
                return Err(EvalError::SpanMismatch("reports have different word spans".into()));
            }
            Some(wa.iter().zip(wb).map(|(x, y)| (x.bits - y.bits) / x.chars.max(1) as f64).collect())
        }
        _ => None,
    };
    Ok(Comparison {
        total: a.total_bpc() - b.total_bpc(),
        inflected: diff(sa.and_then(SplitBpc::inflected), sb.and_then(SplitBpc::inflected)),
        uninflected: diff(sa.and_then(SplitBpc::uninflected), sb.and_then(SplitBpc::uninflected)),
        words: diff(sa.and_then(SplitBpc::words), sb.and_then(SplitBpc::words)),
        per_word,
    })
}

/// One language's row group in the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub language: String,
    pub inflection_rate: f64,
    pub lm: EvalReport,
    pub mtl: EvalReport,
}

/// TSV `language %Infl scope LM MTL delta`, one line per scope that both
/// reports can fill (total, then inflected/uninflected when available).
pub fn comparison_tsv(rows: &[ComparisonRow]) -> Result<String, EvalError> {
    let mut out = String::from("language\t%Infl\tscope\tLM\tMTL\tdelta\n");
    for r in rows {
        let cmp = compare_reports(&r.lm, &r.mtl)?;
        let infl = if r.inflection_rate.is_finite() {
            format!("{:.1}", 100.0 * r.inflection_rate)
        } else {
            "-".to_string()
        };
        let _ = writeln!(
            out,
            "{}\t{infl}\ttotal\t{:.6}\t{:.6}\t{:.6}",
            r.language,
            r.lm.total_bpc(),
            r.mtl.total_bpc(),
            cmp.total
        );
        if let (Some(a), Some(b)) = (&r.lm.split, &r.mtl.split) {
            for (scope, x, y, d) in [
                ("inflected", a.inflected(), b.inflected(), cmp.inflected),
                ("uninflected", a.uninflected(), b.uninflected(), cmp.uninflected),
            ] {
                if let (Some(x), Some(y), Some(d)) = (x, y, d) {
                    let _ = writeln!(out, "{}\t{infl}\t{scope}\t{x:.6}\t{y:.6}\t{d:.6}", r.language);
                }
            }
        }
    }
    Ok(out)
}
