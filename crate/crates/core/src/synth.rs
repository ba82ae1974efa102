//! Synthetic agglutinative toy language with annotated treebank output.
//!
//! A sentence is `TIME ART SUBJ (PARTICLE){0,3} VERB ART OBJ .` where the
//! time word fixes the tense, each noun follows an article agreeing with its
//! number suffix, and the verb carries a tense suffix plus a number suffix
//! agreeing with the subject. Every label is predictable from the left
//! context at the word's first character, and predicting each word's ending
//! needs exactly the information its labels describe.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::detokenize;
use crate::conllu::{Sentence, Token, Treebank};

// Word classes start with disjoint letters, so a word's first character
// (with its left context) decides which labels it carries.
const NOUN_ONSETS: &[&str] = &["b", "d", "f", "g", "p", "t", "v", "z"];
const VERB_ONSETS: &[&str] = &["k", "m", "n", "r", "s", "sh", "kl"];
const INNER_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "s"];

const TIME_WORDS: [(&str, &str); 6] = [
    ("ayer", "Past"),
    ("antes", "Past"),
    ("hoy", "Pres"),
    ("ahora", "Pres"),
    ("luego", "Fut"),
    ("pronto", "Fut"),
];
const PARTICLES: &[&str] = &["ya", "wo", "ju", "ix", "ox"];

fn article(number: &str) -> &'static str {
    if number == "Sing" {
        "el"
    } else {
        "los"
    }
}

fn noun_suffix(number: &str) -> &'static str {
    if number == "Sing" {
        "a"
    } else {
        "ik"
    }
}

fn verb_suffix(tense: &str, number: &str) -> String {
    let t = match tense {
        "Past" => "ta",
        "Pres" => "",
        _ => "ru",
    };
    let n = if number == "Sing" { "m" } else { "mos" };
    format!("{t}{n}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_stems: usize,
    pub seed: u64,
    /// Generation stops once the detokenized text (sentences joined by a
    /// newline) reaches this many characters.
    pub target_chars: usize,
    /// Uninflected particles between subject and verb: 0 to this many.
    pub max_particles: usize,
    /// Annotate particles with the clause's Number and Tense, as UD does
    /// for agreeing auxiliaries, while their surface form stays fixed.
    pub annotate_particles: bool,
}

impl SynthConfig {
    pub fn new(target_chars: usize, seed: u64) -> Self {
        Self {
            n_stems: 50,
            seed,
            target_chars,
            max_particles: 3,
            annotate_particles: false,
        }
    }
}

/// Lexicon of `n` distinct stems: 60% nouns, the rest verbs. Depends only
/// on `n` and `seed`.
pub fn lexicon(n: usize, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_nouns = (n * 3).div_ceil(5);
    let mut seen = BTreeSet::new();
    let mut stems = Vec::with_capacity(n);
    while stems.len() < n {
        let onsets = if stems.len() < n_nouns { NOUN_ONSETS } else { VERB_ONSETS };
        let mut s = String::new();
        s.push_str(onsets.choose(&mut rng).expect("non-empty"));
        s.push_str(VOWELS.choose(&mut rng).expect("non-empty"));
        if rng.gen_bool(0.5) {
            s.push_str(INNER_ONSETS.choose(&mut rng).expect("non-empty"));
            s.push_str(VOWELS.choose(&mut rng).expect("non-empty"));
        }
        s.push_str(CODAS.choose(&mut rng).expect("non-empty"));
        if s.len() >= 3 && seen.insert(s.clone()) {
            stems.push(s);
        }
    }
    let verbs = stems.split_off(n_nouns);
    (stems, verbs)
}

/// Generates a treebank. The lexicon is shared by every seed with the same
/// `n_stems`, so corpora from different seeds are one language.
pub fn generate(cfg: SynthConfig) -> Treebank {
    let (nouns, verbs) = lexicon(cfg.n_stems.max(2), 0x5eed_1e71);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sentences = Vec::new();
    let mut chars = 0usize;
    while chars < cfg.target_chars {
        let s = sentence(&mut rng, &nouns, &verbs, &cfg);
        chars += detokenize(&s).chars().count() + usize::from(!sentences.is_empty());
        sentences.push(s);
    }
    Treebank {
        sentences,
        language_code: "synth".into(),
    }
}

fn sentence(rng: &mut ChaCha8Rng, nouns: &[String], verbs: &[String], cfg: &SynthConfig) -> Sentence {
    let number = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { "Sing" } else { "Plur" };
    let noun = |rng: &mut ChaCha8Rng, tokens: &mut Vec<Token>, n: &str| {
        let stem = nouns.choose(rng).expect("nouns");
        tokens.push(Token::new(article(n), article(n)));
        tokens.push(Token::new(format!("{stem}{}", noun_suffix(n)), stem.clone()).with_feat("Number", n));
    };
    let (time, tense) = TIME_WORDS[rng.gen_range(0..TIME_WORDS.len())];
    let mut tokens = vec![Token::new(time, time)];
    let subj = number(rng);
    noun(rng, &mut tokens, subj);
    for _ in 0..rng.gen_range(0..=cfg.max_particles) {
        let p = PARTICLES.choose(rng).expect("particles");
        let mut tok = Token::new(*p, *p);
        if cfg.annotate_particles {
            tok = tok.with_feat("Number", subj).with_feat("Tense", tense);
        }
        tokens.push(tok);
    }
    let stem = verbs.choose(rng).expect("verbs");
    tokens.push(
        Token::new(format!("{stem}{}", verb_suffix(tense, subj)), stem.clone())
            .with_feat("Number", subj)
            .with_feat("Tense", tense),
    );
    let obj = number(rng);
    noun(rng, &mut tokens, obj);
    tokens.last_mut().expect("object").space_after = false;
    tokens.push(Token::new(".", "."));
    Sentence { tokens }
}
