//! Checkpoint file: a text header of sorted `key=value` lines followed by
//! raw little-endian f32 tensors.
//!
//! ```text
//! #morphclm-ckpt v1
//! model.embed_dim=512
//! ...
//! schema.Number=Plur|Sing
//! vocab=ab\n c
//! #tensors 9
//! embedding 40,512
//! <40*512*4 bytes>
//! ...
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams};
use crate::conllu::MorphSchema;
use crate::corpus::CharVocab;
use crate::diff::Tensor;
use crate::escape::{escape_str, unescape_str};

pub const CKPT_HEADER: &str = "#morphclm-ckpt v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: CharVocab,
    /// Free-form training metadata (seq_len, epoch, dev_bpc, ...).
    pub meta: BTreeMap<String, String>,
    pub params: ModelParams<f32>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: ModelConfig, vocab: CharVocab, params: ModelParams<f32>) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.size() != config.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} ids but the model expects {}",
                vocab.size(),
                config.vocab_size
            )));
        }
        params.check_shapes(&config)?;
        Ok(Self {
            config,
            vocab,
            meta: BTreeMap::new(),
            params,
        })
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    fn header_lines(&self) -> BTreeMap<String, String> {
        let c = &self.config;
        let mut kv = BTreeMap::new();
        kv.insert("model.vocab_size".into(), c.vocab_size.to_string());
        kv.insert("model.embed_dim".into(), c.embed_dim.to_string());
        kv.insert("model.hidden_dim".into(), c.hidden_dim.to_string());
        kv.insert("model.num_layers".into(), c.num_layers.to_string());
        kv.insert("model.mtl_layer".into(), c.mtl_layer.to_string());
        kv.insert("model.dropout".into(), c.dropout.to_string());
        kv.insert("model.embed_dropout".into(), c.embed_dropout.to_string());
        for (name, values) in c.schema.iter() {
            let joined: Vec<&str> = values.iter().map(String::as_str).collect();
            kv.insert(format!("schema.{name}"), joined.join("|"));
        }
        let chars: String = self.vocab.chars().iter().collect();
        kv.insert("vocab".into(), escape_str(&chars));
        for (k, v) in &self.meta {
            kv.insert(format!("meta.{k}"), escape_str(v));
        }
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_HEADER.as_bytes());
        out.push(b'\n');
        for (k, v) in self.header_lines() {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        let named = self.params.named();
        out.extend_from_slice(format!("#tensors {}\n", named.len()).as_bytes());
        for (name, t) in named {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.extend_from_slice(format!("{name} {}\n", dims.join(",")).as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<&str, ModelError> {
            let rest = &bytes[*pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            *pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line(&mut pos)? != CKPT_HEADER {
            return Err(bad(format!("missing `{CKPT_HEADER}` header")));
        }
        let mut kv = BTreeMap::new();
        let n_tensors = loop {
            let line = next_line(&mut pos)?;
            if let Some(n) = line.strip_prefix("#tensors ") {
                break n.parse::<usize>().map_err(|_| bad(format!("bad tensor count `{n}`")))?;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
            kv.insert(k.to_string(), v.to_string());
        };

        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key `{k}`")));
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?.parse().map_err(|_| bad(format!("`{k}` is not an integer")))
        };
        let mut schema_items = Vec::new();
        let mut meta = BTreeMap::new();
        for (k, v) in &kv {
            if let Some(name) = k.strip_prefix("schema.") {
                schema_items.push((name.to_string(), v.split('|').map(str::to_string).collect::<Vec<_>>()));
            } else if let Some(m) = k.strip_prefix("meta.") {
                meta.insert(m.to_string(), unescape_str(v).ok_or_else(|| bad(format!("bad escape in `{k}`")))?);
            }
        }
        let config = ModelConfig {
            vocab_size: num("model.vocab_size")?,
            embed_dim: num("model.embed_dim")?,
            hidden_dim: num("model.hidden_dim")?,
            num_layers: num("model.num_layers")?,
            mtl_layer: num("model.mtl_layer")?,
            dropout: get("model.dropout")?
                .parse()
                .map_err(|_| bad("`model.dropout` is not a number"))?,
            embed_dropout: get("model.embed_dropout")?
                .parse()
                .map_err(|_| bad("`model.embed_dropout` is not a boolean"))?,
            schema: MorphSchema::from_features(schema_items),
        };
        config.validate()?;
        let chars = unescape_str(get("vocab")?).ok_or_else(|| bad("bad escape in vocab"))?;
        let vocab = CharVocab::from_chars(chars.chars().collect()).map_err(|e| bad(e.to_string()))?;

        let mut params = ModelParams::<f32>::zeros(&config);
        let expected = params.named_mut();
        if expected.len() != n_tensors {
            return Err(bad(format!("expected {} tensors, file has {n_tensors}", expected.len())));
        }
        for (name, slot) in expected {
            let line = next_line(&mut pos)?.to_string();
            let (got_name, dims) = line.split_once(' ').ok_or_else(|| bad(format!("bad tensor line `{line}`")))?;
            let dims: Vec<usize> = dims
                .split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad dims in `{line}`"))))
                .collect::<Result<_, _>>()?;
            if got_name != name || dims != slot.shape() {
                return Err(bad(format!(
                    "tensor `{got_name}` {dims:?} does not match expected `{name}` {:?}",
                    slot.shape()
                )));
            }
            let n = slot.len() * 4;
            let raw = bytes.get(pos..pos + n).ok_or_else(|| bad(format!("tensor `{name}` is truncated")))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            *slot = Tensor::new(dims, data)?;
            pos += n;
            if bytes.get(pos) != Some(&b'\n') {
                return Err(bad(format!("tensor `{name}` is not newline-terminated")));
            }
            pos += 1;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        let mut ck = Self::new(config, vocab, params)?;
        ck.meta = meta;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
