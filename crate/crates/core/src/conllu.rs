//! CoNLL-U treebank ingestion.
//!
//! Only FORM, LEMMA, FEATS and the `SpaceAfter=No` flag of MISC are kept;
//! all other columns are validated for count and otherwise ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConlluError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("document contains no sentences")]
    Empty,
}

fn malformed(line: usize, message: impl Into<String>) -> ConlluError {
    ConlluError::Malformed {
        line,
        message: message.into(),
    }
}

/// One `name=value` morphological annotation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MorphFeature {
    pub name: String,
    pub value: String,
}

impl MorphFeature {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: value.into(),
        }
    }
}

/// Feature set of one token, keyed (and ordered) by feature name.
pub type Feats = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub form: String,
    pub lemma: String,
    pub feats: Feats,
    pub space_after: bool,
}

impl Token {
    pub fn new(form: impl Into<String>, lemma: impl Into<String>) -> Self {
        Self {
            form: form.into(),
            lemma: lemma.into(),
            feats: Feats::new(),
            space_after: true,
        }
    }

    pub fn with_feat(mut self, name: &str, value: &str) -> Self {
        self.feats.insert(name.to_string(), value.to_string());
        self
    }

    pub fn no_space_after(mut self) -> Self {
        self.space_after = false;
        self
    }

    pub fn features(&self) -> impl Iterator<Item = MorphFeature> + '_ {
        self.feats.iter().map(|(n, v)| MorphFeature::new(n, v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Treebank {
    pub sentences: Vec<Sentence>,
    pub language_code: String,
}

impl Treebank {
    pub fn with_language(mut self, code: impl Into<String>) -> Self {
        self.language_code = code.into();
        self
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.sentences.iter().flat_map(|s| s.tokens.iter())
    }

    /// Removes the named features from every token.
    pub fn drop_features(&mut self, names: &[String]) {
        for s in &mut self.sentences {
            for t in &mut s.tokens {
                t.feats.retain(|k, _| !names.contains(k));
            }
        }
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }
}

fn parse_feats(col: &str, line: usize) -> Result<Feats, ConlluError> {
    let mut feats = Feats::new();
    if col == "_" {
        return Ok(feats);
    }
    for item in col.split('|') {
        let (name, value) = item
            .split_once('=')
            .ok_or_else(|| malformed(line, format!("feature `{item}` has no `=`")))?;
        if name.is_empty() || value.is_empty() || value.contains('=') {
            return Err(malformed(line, format!("unparsable feature `{item}`")));
        }
        if feats.insert(name.to_string(), value.to_string()).is_some() {
            return Err(malformed(line, format!("feature `{name}` repeated")));
        }
    }
    Ok(feats)
}

/// Parses a CoNLL-U document. Multiword ranges (`3-4`) and empty nodes
/// (`5.1`) are skipped. The language code is left as `und`.
pub fn parse_conllu(text: &str) -> Result<Treebank, ConlluError> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if !current.is_empty() {
                sentences.push(Sentence {
                    tokens: std::mem::take(&mut current),
                });
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(malformed(line_no, format!("expected 10 columns, found {}", cols.len())));
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        if id.parse::<u32>().is_err() {
            return Err(malformed(line_no, format!("bad token id `{id}`")));
        }
        let form = cols[1];
        if form.is_empty() {
            return Err(malformed(line_no, "empty FORM"));
        }
        let feats = parse_feats(cols[5], line_no)?;
        let space_after = !cols[9].split('|').any(|m| m == "SpaceAfter=No");
        current.push(Token {
            form: form.to_string(),
            lemma: cols[2].to_string(),
            feats,
            space_after,
        });
    }
    if !current.is_empty() {
        sentences.push(Sentence { tokens: current });
    }
    if sentences.is_empty() {
        return Err(ConlluError::Empty);
    }
    Ok(Treebank {
        sentences,
        language_code: "und".to_string(),
    })
}

/// Writes the retained columns back out as CoNLL-U. Columns that were not
/// kept are written as `_` (HEAD as 0, DEPREL as `dep`).
pub fn write_conllu(tb: &Treebank) -> String {
    let mut out = String::new();
    for s in &tb.sentences {
        for (i, t) in s.tokens.iter().enumerate() {
            let feats = if t.feats.is_empty() {
                "_".to_string()
            } else {
                t.feats.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join("|")
            };
            let misc = if t.space_after { "_" } else { "SpaceAfter=No" };
            let _ = writeln!(out, "{}\t{}\t{}\t_\t_\t{}\t0\tdep\t_\t{}", i + 1, t.form, t.lemma, feats, misc);
        }
        out.push('\n');
    }
    out
}

/// Per-language feature inventory: feature name -> observed values, both in
/// lexicographic order. The reserved NONE label is implicit and always gets
/// the index after the last observed value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MorphSchema {
    features: BTreeMap<String, BTreeSet<String>>,
}

impl MorphSchema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_features<I, N, V>(items: I) -> Self
    where
        I: IntoIterator<Item = (N, Vec<V>)>,
        N: Into<String>,
        V: Into<String>,
    {
        let mut schema = Self::new();
        for (name, values) in items {
            let set = schema.features.entry(name.into()).or_default();
            set.extend(values.into_iter().map(Into::into));
        }
        schema.features.retain(|_, v| !v.is_empty());
        schema
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Number of features (the `n` of the combined loss).
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn values(&self, name: &str) -> Option<impl Iterator<Item = &str>> {
        self.features.get(name).map(|v| v.iter().map(String::as_str))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.features.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.keys().position(|k| k == name)
    }

    /// Class index of `value` for `name`; `None` when either is unknown.
    pub fn value_index(&self, name: &str, value: &str) -> Option<usize> {
        self.features.get(name)?.iter().position(|v| v == value)
    }

    /// Class index reserved for NONE for feature `name`.
    pub fn none_index(&self, name: &str) -> Option<usize> {
        self.features.get(name).map(BTreeSet::len)
    }

    /// Number of output classes per feature, NONE included.
    pub fn class_counts(&self) -> Vec<usize> {
        self.features.values().map(|v| v.len() + 1).collect()
    }

    pub fn merge(&mut self, other: &MorphSchema) {
        for (k, v) in &other.features {
            self.features.entry(k.clone()).or_default().extend(v.iter().cloned());
        }
    }

    pub fn without(mut self, excluded: &[String]) -> Self {
        self.features.retain(|k, _| !excluded.contains(k));
        self
    }
}

pub fn extract_schema(tb: &Treebank) -> MorphSchema {
    let mut schema = MorphSchema::new();
    for tok in tb.tokens() {
        for (n, v) in &tok.feats {
            schema.features.entry(n.clone()).or_default().insert(v.clone());
        }
    }
    schema
}

fn fold(s: &str) -> String {
    caseless::default_case_fold_str(&s.nfc().collect::<String>())
        .nfc()
        .collect()
}

/// A token is inflected when its NFC-normalized, case-folded form differs
/// from its lemma under the same normalization.
pub fn is_inflected(tok: &Token) -> bool {
    fold(&tok.form) != fold(&tok.lemma)
}

pub fn inflection_rate(tb: &Treebank) -> f64 {
    let total = tb.token_count();
    if total == 0 {
        return 0.0;
    }
    let inflected = tb.tokens().filter(|t| is_inflected(t)).count();
    inflected as f64 / total as f64
}
