//! Character-level language models with morphological multitask
//! supervision: CoNLL-U ingestion, character alignment of word features,
//! a small reverse-mode autodiff engine, an LSTM language model with
//! per-feature prediction heads, training and BPC evaluation.

pub mod alignment;
pub mod conllu;
pub mod corpus;
pub mod diff;
pub mod escape;
pub mod eval;
pub mod model;
pub mod seed;
pub mod synth;
pub mod training;

pub use alignment::{align_tags, align_treebank, detokenize, AlignError, AlignedSequence, CharLabel, TagPlacement};
pub use conllu::{
    extract_schema, inflection_rate, is_inflected, parse_conllu, write_conllu, ConlluError, MorphFeature, MorphSchema,
    Sentence, Token, Treebank,
};
pub use corpus::{
    alternating_schedule, build_vocab, encode, encode_treebank, make_batches, Batch, CharVocab, CorpusError,
    EncodedStream, SourceTag,
};
pub use diff::{DiffError, NodeId, Real, Tape, Tensor};
pub use eval::{bpc, compare_reports, per_word_bits, EvalError, EvalOptions, EvalReport};
pub use model::{Checkpoint, Model, ModelConfig, ModelError, ModelParams};
pub use seed::derive_seed;
pub use training::{
    adam_step, build_cross_lingual_dataset, train, AdamState, Datasets, Regime, TrainConfig, TrainError, TrainLog,
    Trainer,
};
