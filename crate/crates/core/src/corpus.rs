//! Character vocabularies, integer encoding and batch assembly.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::alignment::{align_treebank, treebank_text, AlignError, AlignedSequence, TagPlacement};
use crate::conllu::{MorphSchema, Treebank};
use crate::escape::{escape_char, unescape_char};
use crate::seed::derive_seed;

pub const VOCAB_HEADER: &str = "#morphclm-vocab v1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot build a vocabulary from empty text")]
    EmptyText,
    #[error("vocabulary file: {0}")]
    VocabFormat(String),
    #[error("duplicate character {0:?} in vocabulary")]
    DuplicateChar(char),
    #[error("aligned sequence does not match the text being encoded")]
    AlignmentMismatch,
    #[error("aligned sequence features {found:?} do not match schema {expected:?}")]
    FeatureMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("label {name}={value} is not in the schema")]
    UnknownLabel { name: String, value: String },
    #[error("stream of {len} characters is shorter than one segment of {needed}")]
    StreamTooShort { len: usize, needed: usize },
    #[error("invalid batch geometry: {0}")]
    Geometry(String),
    #[error("alternating schedule needs both batch sequences to be nonempty")]
    EmptySchedule,
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Character vocabulary. Index 0 is the reserved UNK symbol; `chars[i]` has
/// index `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl CharVocab {
    pub const UNK: u32 = 0;

    pub fn from_chars(chars: Vec<char>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i as u32 + 1).is_some() {
                return Err(CorpusError::DuplicateChar(c));
            }
        }
        Ok(Self { chars, index })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of symbols, UNK included.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(Self::UNK)
    }

    /// Character for an index; `None` for UNK or out of range.
    pub fn char_of(&self, id: u32) -> Option<char> {
        (id as usize).checked_sub(1).and_then(|i| self.chars.get(i).copied())
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for &c in &self.chars {
            out.push_str(&escape_char(c));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.split('\n');
        match lines.next() {
            Some(h) if h.trim_end_matches('\r') == VOCAB_HEADER => {}
            _ => return Err(CorpusError::VocabFormat(format!("missing `{VOCAB_HEADER}` header"))),
        }
        let body: Vec<&str> = lines.collect();
        let body = match body.split_last() {
            Some((last, rest)) if last.is_empty() => rest,
            _ => &body[..],
        };
        let mut chars = Vec::with_capacity(body.len());
        for (i, line) in body.iter().enumerate() {
            let c = unescape_char(line)
                .ok_or_else(|| CorpusError::VocabFormat(format!("line {}: `{line}` is not one character", i + 2)))?;
            chars.push(c);
        }
        Self::from_chars(chars)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

/// Keeps characters occurring strictly more than `min_count_exclusive` times,
/// ordered by descending count then ascending code point.
pub fn build_vocab(text: &str, min_count_exclusive: usize) -> Result<CharVocab, CorpusError> {
    if text.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let mut counts: HashMap<char, usize> = HashMap::new();
    for c in text.chars() {
        *counts.entry(c).or_default() += 1;
    }
    let mut kept: Vec<(char, usize)> = counts.into_iter().filter(|&(_, n)| n > min_count_exclusive).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    CharVocab::from_chars(kept.into_iter().map(|(c, _)| c).collect())
}

/// Character ids plus optional per-feature label ids, laid out
/// `position * n_feats + feature`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedStream {
    pub char_ids: Vec<u32>,
    pub morph_labels: Option<Vec<u16>>,
    pub n_feats: usize,
    /// NONE label id per feature.
    pub none_ids: Vec<u16>,
}

impl EncodedStream {
    pub fn unlabeled(char_ids: Vec<u32>) -> Self {
        Self {
            char_ids,
            morph_labels: None,
            n_feats: 0,
            none_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }

    pub fn labels_at(&self, pos: usize) -> Option<&[u16]> {
        self.morph_labels
            .as_ref()
            .map(|l| &l[pos * self.n_feats..(pos + 1) * self.n_feats])
    }

    /// Drops labels, keeping only the character stream.
    pub fn without_labels(&self) -> Self {
        Self::unlabeled(self.char_ids.clone())
    }
}

pub fn encode(
    text: &str,
    vocab: &CharVocab,
    aligned: Option<&AlignedSequence>,
    schema: &MorphSchema,
) -> Result<EncodedStream, CorpusError> {
    let char_ids = vocab.encode_text(text);
    let Some(aligned) = aligned else {
        return Ok(EncodedStream::unlabeled(char_ids));
    };
    if aligned.len() != char_ids.len() || !aligned.items.iter().zip(text.chars()).all(|(a, c)| a.ch == c) {
        return Err(CorpusError::AlignmentMismatch);
    }
    let names: Vec<String> = schema.names().map(str::to_string).collect();
    if names != aligned.features {
        return Err(CorpusError::FeatureMismatch {
            expected: names,
            found: aligned.features.clone(),
        });
    }
    let none_ids: Vec<u16> = names.iter().map(|n| schema.none_index(n).unwrap_or(0) as u16).collect();
    let mut labels = Vec::with_capacity(aligned.len() * names.len());
    for item in &aligned.items {
        for ((name, label), &none) in names.iter().zip(&item.labels).zip(&none_ids) {
            let id = match label {
                None => none,
                Some(v) => schema.value_index(name, v).ok_or_else(|| CorpusError::UnknownLabel {
                    name: name.clone(),
                    value: v.clone(),
                })? as u16,
            };
            labels.push(id);
        }
    }
    Ok(EncodedStream {
        char_ids,
        morph_labels: Some(labels),
        n_feats: names.len(),
        none_ids,
    })
}

/// Encodes a treebank's text (sentences joined by `separator`), with
/// character-level labels when `schema` is given and nonempty.
pub fn encode_treebank(
    tb: &Treebank,
    vocab: &CharVocab,
    schema: Option<&MorphSchema>,
    placement: TagPlacement,
    separator: &str,
) -> Result<EncodedStream, CorpusError> {
    let text = treebank_text(tb, separator);
    match schema.filter(|s| !s.is_empty()) {
        Some(schema) => {
            let aligned = align_treebank(tb, schema, placement, separator)?;
            encode(&text, vocab, Some(&aligned), schema)
        }
        None => Ok(EncodedStream::unlabeled(vocab.encode_text(&text))),
    }
}

/// Which loss terms a batch feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceTag {
    LmOnly,
    MorphOnly,
    Joint,
}

/// `rows x seq_len` training batch. Morphology targets are the labels of the
/// *input* characters: the hidden state after reading a word's first
/// character is asked for that word's features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub morph_targets: Option<Vec<u16>>,
    pub n_feats: usize,
    pub none_ids: Vec<u16>,
    pub source: SourceTag,
}

impl Batch {
    pub fn input_row(&self, r: usize) -> &[u32] {
        &self.inputs[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn target_row(&self, r: usize) -> &[u32] {
        &self.targets[r * self.seq_len..(r + 1) * self.seq_len]
    }
}

/// A `seq_len + 1` window into one of several streams: inputs are
/// `start..start + seq_len`, targets are shifted by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub stream: usize,
    pub start: usize,
}

/// Windows of `seq_len + 1` characters taken every `seq_len` characters, so
/// consecutive windows share one boundary character: each character is an
/// input at most once and a target at most once. A trailing partial window
/// is dropped.
pub fn segments(stream_index: usize, stream: &EncodedStream, seq_len: usize) -> Vec<Segment> {
    let count = stream.len().saturating_sub(1) / seq_len;
    (0..count)
        .map(|k| Segment {
            stream: stream_index,
            start: k * seq_len,
        })
        .collect()
}

/// Groups segments into batches of up to `batch_size` rows, in the given
/// order. The last batch may have fewer rows.
pub fn assemble(
    streams: &[&EncodedStream],
    segs: &[Segment],
    batch_size: usize,
    seq_len: usize,
    source: SourceTag,
) -> Vec<Batch> {
    segs.chunks(batch_size)
        .map(|chunk| {
            let rows = chunk.len();
            let mut inputs = Vec::with_capacity(rows * seq_len);
            let mut targets = Vec::with_capacity(rows * seq_len);
            let labeled = source != SourceTag::LmOnly && chunk.iter().all(|s| streams[s.stream].morph_labels.is_some());
            let n_feats = if labeled { streams[chunk[0].stream].n_feats } else { 0 };
            let none_ids = if labeled {
                streams[chunk[0].stream].none_ids.clone()
            } else {
                Vec::new()
            };
            let mut morph = labeled.then(|| Vec::with_capacity(rows * seq_len * n_feats));
            for seg in chunk {
                let s = streams[seg.stream];
                inputs.extend_from_slice(&s.char_ids[seg.start..seg.start + seq_len]);
                targets.extend_from_slice(&s.char_ids[seg.start + 1..seg.start + seq_len + 1]);
                if let (Some(m), Some(l)) = (morph.as_mut(), s.morph_labels.as_ref()) {
                    m.extend_from_slice(&l[seg.start * n_feats..(seg.start + seq_len) * n_feats]);
                }
            }
            Batch {
                rows,
                seq_len,
                inputs,
                targets,
                morph_targets: morph,
                n_feats,
                none_ids,
                source,
            }
        })
        .collect()
}

fn check_geometry(batch_size: usize, seq_len: usize) -> Result<(), CorpusError> {
    if batch_size < 1 || seq_len < 2 {
        return Err(CorpusError::Geometry(format!(
            "batch size {batch_size} (needs >= 1), sequence length {seq_len} (needs >= 2)"
        )));
    }
    Ok(())
}

/// Cuts `stream` into `seq_len + 1` windows (see [`segments`]), shuffles them with `seed`
/// and groups them into batches of `batch_size`. Labeled streams produce
/// [`SourceTag::Joint`] batches, unlabeled ones [`SourceTag::LmOnly`].
pub fn make_batches(stream: &EncodedStream, batch_size: usize, seq_len: usize, seed: u64) -> Result<Vec<Batch>, CorpusError> {
    check_geometry(batch_size, seq_len)?;
    if stream.len() < seq_len + 1 {
        return Err(CorpusError::StreamTooShort {
            len: stream.len(),
            needed: seq_len + 1,
        });
    }
    let mut segs = segments(0, stream, seq_len);
    segs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tag = if stream.morph_labels.is_some() {
        SourceTag::Joint
    } else {
        SourceTag::LmOnly
    };
    Ok(assemble(&[stream], &segs, batch_size, seq_len, tag))
}

/// Interleaving order for one epoch of alternating training: strictly
/// LM, MORPH, LM, MORPH... for `2 * max(n_lm, n_morph)` steps. The shorter
/// side cycles; every cycle after the first is reshuffled with a seed
/// derived from `seed` and the cycle number.
pub fn alternating_order(n_lm: usize, n_morph: usize, seed: u64) -> Result<Vec<(SourceTag, usize)>, CorpusError> {
    if n_lm == 0 || n_morph == 0 {
        return Err(CorpusError::EmptySchedule);
    }
    let longest = n_lm.max(n_morph);
    let cycled = |n: usize, tag: &str| -> Vec<usize> {
        let mut out = Vec::with_capacity(longest);
        let mut cycle = 0u64;
        while out.len() < longest {
            let mut perm: Vec<usize> = (0..n).collect();
            if cycle > 0 {
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, cycle)));
            }
            out.extend(perm.into_iter().take(longest - out.len()));
            cycle += 1;
        }
        out
    };
    let lm = cycled(n_lm, "cycle-lm");
    let morph = cycled(n_morph, "cycle-morph");
    Ok(lm
        .into_iter()
        .zip(morph)
        .flat_map(|(l, m)| [(SourceTag::LmOnly, l), (SourceTag::MorphOnly, m)])
        .collect())
}

/// Materialized form of [`alternating_order`]: LM batches are retagged
/// [`SourceTag::LmOnly`], morphology batches [`SourceTag::MorphOnly`].
pub fn alternating_schedule(lm_batches: &[Batch], morph_batches: &[Batch], seed: u64) -> Result<Vec<Batch>, CorpusError> {
    let order = alternating_order(lm_batches.len(), morph_batches.len(), seed)?;
    Ok(order
        .into_iter()
        .map(|(tag, i)| {
            let mut b = match tag {
                SourceTag::MorphOnly => morph_batches[i].clone(),
                _ => lm_batches[i].clone(),
            };
            b.source = tag;
            b
        })
        .collect())
}
