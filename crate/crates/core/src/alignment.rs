//! Word-level morphology to character-level supervision.
//!
//! Each token's features are attached to one character of the token (its
//! first character by default); every other character, inter-token spaces
//! and sentence separators included, carries NONE for every feature.

use std::ops::Range;

use thiserror::Error;

use crate::conllu::{MorphSchema, Sentence, Treebank};
use crate::escape::escape_char;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlignError {
    #[error("feature {name}={value} is not in the schema")]
    UnknownValue { name: String, value: String },
}

/// Which character of a word carries its tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TagPlacement {
    #[default]
    First,
    Last,
}

/// One character and its per-feature labels (`None` is the NONE label),
/// in schema feature order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharLabel {
    pub ch: char,
    pub labels: Vec<Option<String>>,
}

impl CharLabel {
    pub fn is_all_none(&self) -> bool {
        self.labels.iter().all(Option::is_none)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSequence {
    pub features: Vec<String>,
    pub items: Vec<CharLabel>,
}

impl AlignedSequence {
    pub fn text(&self) -> String {
        self.items.iter().map(|c| c.ch).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Debug dump: one `char<TAB>feat=val;feat=val` line per character,
    /// `-` when every label is NONE.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&escape_char(item.ch));
            out.push('\t');
            let tags: Vec<String> = self
                .features
                .iter()
                .zip(&item.labels)
                .filter_map(|(n, v)| v.as_ref().map(|v| format!("{n}={v}")))
                .collect();
            if tags.is_empty() {
                out.push('-');
            } else {
                out.push_str(&tags.join(";"));
            }
            out.push('\n');
        }
        out
    }
}

/// Joins token forms, inserting one space after every token whose
/// `space_after` is set, except the last.
pub fn detokenize(s: &Sentence) -> String {
    detokenize_with_spans(s).0
}

/// Like [`detokenize`], also returning each token's character range.
pub fn detokenize_with_spans(s: &Sentence) -> (String, Vec<Range<usize>>) {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(s.tokens.len());
    let mut pos = 0;
    for (i, tok) in s.tokens.iter().enumerate() {
        let n = tok.form.chars().count();
        spans.push(pos..pos + n);
        text.push_str(&tok.form);
        pos += n;
        if tok.space_after && i + 1 < s.tokens.len() {
            text.push(' ');
            pos += 1;
        }
    }
    (text, spans)
}

pub fn align_tags(s: &Sentence, schema: &MorphSchema, placement: TagPlacement) -> Result<AlignedSequence, AlignError> {
    let features: Vec<String> = schema.names().map(str::to_string).collect();
    let (text, spans) = detokenize_with_spans(s);
    let mut items: Vec<CharLabel> = text
        .chars()
        .map(|ch| CharLabel {
            ch,
            labels: vec![None; features.len()],
        })
        .collect();
    for (tok, span) in s.tokens.iter().zip(spans) {
        let at = match placement {
            TagPlacement::First => span.start,
            TagPlacement::Last => span.end - 1,
        };
        for (name, value) in &tok.feats {
            let fi = schema
                .feature_index(name)
                .filter(|_| schema.value_index(name, value).is_some())
                .ok_or_else(|| AlignError::UnknownValue {
                    name: name.clone(),
                    value: value.clone(),
                })?;
            items[at].labels[fi] = Some(value.clone());
        }
    }
    Ok(AlignedSequence { features, items })
}

/// Text of a whole treebank: sentences joined by `separator`.
pub fn treebank_text(tb: &Treebank, separator: &str) -> String {
    tb.sentences.iter().map(detokenize).collect::<Vec<_>>().join(separator)
}

/// Character spans of every token in [`treebank_text`] coordinates, in
/// treebank order.
pub fn treebank_spans(tb: &Treebank, separator: &str) -> Vec<Range<usize>> {
    let sep = separator.chars().count();
    let mut offset = 0;
    let mut out = Vec::with_capacity(tb.token_count());
    for (i, s) in tb.sentences.iter().enumerate() {
        if i > 0 {
            offset += sep;
        }
        let (text, spans) = detokenize_with_spans(s);
        out.extend(spans.into_iter().map(|r| r.start + offset..r.end + offset));
        offset += text.chars().count();
    }
    out
}

/// Aligns every sentence and joins them with an all-NONE `separator`.
pub fn align_treebank(
    tb: &Treebank,
    schema: &MorphSchema,
    placement: TagPlacement,
    separator: &str,
) -> Result<AlignedSequence, AlignError> {
    let features: Vec<String> = schema.names().map(str::to_string).collect();
    let mut items = Vec::new();
    for (i, s) in tb.sentences.iter().enumerate() {
        if i > 0 {
            items.extend(separator.chars().map(|ch| CharLabel {
                ch,
                labels: vec![None; features.len()],
            }));
        }
        items.extend(align_tags(s, schema, placement)?.items);
    }
    Ok(AlignedSequence { features, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{extract_schema, Token};
    use proptest::prelude::*;

    fn cats_ran() -> Sentence {
        Sentence {
            tokens: vec![
                Token::new("cats", "cat").with_feat("Number", "Pl"),
                Token::new("ran", "run").with_feat("Tense", "Past"),
            ],
        }
    }

    #[test]
    fn detokenize_examples() {
        assert_eq!(detokenize(&cats_ran()), "cats ran");
        let s = Sentence {
            tokens: vec![Token::new("end", "end").no_space_after(), Token::new(".", ".")],
        };
        assert_eq!(detokenize(&s), "end.");
        let single = Sentence {
            tokens: vec![Token::new("word", "word")],
        };
        assert_eq!(detokenize(&single), "word");
    }

    #[test]
    fn first_character_carries_tags() {
        let s = cats_ran();
        let schema = MorphSchema::from_features([("Number", vec!["Pl"]), ("Tense", vec!["Past"])]);
        let seq = align_tags(&s, &schema, TagPlacement::First).unwrap();
        assert_eq!(
            seq.dump(),
            "c\tNumber=Pl\na\t-\nt\t-\ns\t-\n \t-\nr\tTense=Past\na\t-\nn\t-\n"
        );
        let last = align_tags(&s, &schema, TagPlacement::Last).unwrap();
        assert_eq!(last.items[3].labels, vec![Some("Pl".to_string()), None]);
        assert!(last.items[0].is_all_none());
    }

    #[test]
    fn untagged_token_is_all_none_and_missing_features_are_none() {
        let schema = MorphSchema::from_features([("A", vec!["x"]), ("B", vec!["y"])]);
        let plain = Sentence {
            tokens: vec![Token::new("abc", "abc")],
        };
        let seq = align_tags(&plain, &schema, TagPlacement::First).unwrap();
        assert!(seq.items.iter().all(CharLabel::is_all_none));

        let partial = Sentence {
            tokens: vec![Token::new("ab", "ab").with_feat("A", "x")],
        };
        let seq = align_tags(&partial, &schema, TagPlacement::First).unwrap();
        assert_eq!(seq.items[0].labels, vec![Some("x".into()), None]);
    }

    #[test]
    fn unknown_value_is_an_error() {
        let schema = MorphSchema::from_features([("Number", vec!["Sing"])]);
        let err = align_tags(&cats_ran(), &schema, TagPlacement::First).unwrap_err();
        assert_eq!(
            err,
            AlignError::UnknownValue {
                name: "Number".into(),
                value: "Pl".into()
            }
        );
    }

    fn arb_sentence() -> impl Strategy<Value = Sentence> {
        proptest::collection::vec(
            ("[a-zé.,]{1,5}", proptest::option::of("[PS]"), any::<bool>()),
            1..8,
        )
        .prop_map(|toks| Sentence {
            tokens: toks
                .into_iter()
                .map(|(f, n, sp)| {
                    let mut t = Token::new(f.clone(), f);
                    if let Some(n) = n {
                        t = t.with_feat("Number", &n);
                    }
                    t.space_after = sp;
                    t
                })
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn aligned_chars_reproduce_text(s in arb_sentence()) {
            let tb = Treebank { sentences: vec![s.clone()], language_code: "xx".into() };
            let schema = extract_schema(&tb);
            let seq = align_tags(&s, &schema, TagPlacement::First).unwrap();
            let text = detokenize(&s);
            prop_assert_eq!(seq.len(), text.chars().count());
            prop_assert_eq!(seq.text(), text);
            let tagged = seq.items.iter().filter(|c| !c.is_all_none()).count();
            prop_assert!(tagged <= s.tokens.len());
        }

        #[test]
        fn treebank_spans_index_forms(sents in proptest::collection::vec(arb_sentence(), 1..4)) {
            let tb = Treebank { sentences: sents, language_code: "xx".into() };
            let text: Vec<char> = treebank_text(&tb, "\n").chars().collect();
            for (tok, span) in tb.tokens().zip(treebank_spans(&tb, "\n")) {
                let got: String = text[span].iter().collect();
                prop_assert_eq!(got, tok.form.clone());
            }
        }
    }
}
