//! Token representations from a sub-token encoder.
//!
//! A backend maps a sentence to one vector per sub-token plus begin/end
//! markers. [`embed_tokens`] max-pools the sub-token vectors of each token and
//! drops the marker rows, giving exactly one `d`-dimensional row per token.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::{Error, Result};

/// What a sub-token row stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubtokenSlot {
    /// Sentence begin/end marker, removed after pooling.
    Marker,
    /// Piece of the token with this index.
    Token(usize),
}

pub struct SubtokenEncoding {
    /// One row per sub-token, markers included.
    pub vectors: Var,
    pub slots: Vec<SubtokenSlot>,
}

pub trait EncoderBackend {
    fn dim(&self) -> usize;

    fn encode(&self, g: &mut Graph<'_>, tokens: &[String]) -> Result<SubtokenEncoding>;
}

/// Sub-token rows belonging to each of the `n` tokens.
pub fn pooling_groups(slots: &[SubtokenSlot], n: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); n];
    for (row, slot) in slots.iter().enumerate() {
        if let SubtokenSlot::Token(t) = *slot {
            if t >= n {
                return Err(Error::Alignment { token: t });
            }
            groups[t].push(row);
        }
    }
    if let Some(token) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Alignment { token });
    }
    Ok(groups)
}

/// Max-pools sub-token rows into token rows, dropping markers.
pub fn pool_subtokens(vectors: &Matrix, slots: &[SubtokenSlot], n: usize) -> Result<Matrix> {
    if vectors.rows() != slots.len() {
        return Err(Error::shape(
            "pool_subtokens",
            format!("{} rows", slots.len()),
            format!("{} rows", vectors.rows()),
        ));
    }
    let groups = pooling_groups(slots, n)?;
    let mut out = Matrix::zeros(n, vectors.cols());
    for (t, rows) in groups.iter().enumerate() {
        for c in 0..vectors.cols() {
            let best = rows
                .iter()
                .map(|&r| vectors.get(r, c))
                .fold(f64::NEG_INFINITY, f64::max);
            out.set(t, c, best);
        }
    }
    Ok(out)
}

/// The aligned `n x d` token representation sequence.
pub fn embed_tokens<B: EncoderBackend + ?Sized>(
    g: &mut Graph<'_>,
    tokens: &[String],
    backend: &B,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::shape("embed_tokens", "at least one token", "0 tokens"));
    }
    let enc = backend.encode(g, tokens)?;
    if g.shape(enc.vectors).0 != enc.slots.len() {
        return Err(Error::shape(
            "embed_tokens",
            format!("{} sub-token rows", enc.slots.len()),
            format!("{} rows", g.shape(enc.vectors).0),
        ));
    }
    let groups = pooling_groups(&enc.slots, tokens.len())?;
    Ok(g.max_pool_rows(enc.vectors, &groups, None))
}

/// Splits a token into at most four roughly equal character chunks of at
/// least four characters each.
pub fn split_subtokens(token: &str) -> Vec<String> {
    let chars: Vec<char> = token.chars().collect();
    if chars.is_empty() {
        return vec![String::new()];
    }
    let size = chars.len().div_ceil(4).max(4);
    chars.chunks(size).map(|c| c.iter().collect()).collect()
}

fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashedEncoderConfig {
    pub dim: usize,
    pub buckets: usize,
    pub max_positions: usize,
}

/// Small trainable backend: hashed sub-token lookup plus learned positions,
/// followed by one single-head self-attention block with a residual
/// connection and layer normalization.
#[derive(Clone, Debug)]
pub struct HashedEncoder {
    config: HashedEncoderConfig,
    table: ParamId,
    positions: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

const BEGIN_BUCKET: usize = 0;
const END_BUCKET: usize = 1;

impl HashedEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: HashedEncoderConfig, rng: &mut R) -> Self {
        let d = config.dim;
        assert!(config.buckets > 2, "need room for the marker buckets");
        let table = store.add(
            "encoder.table",
            Matrix::uniform(config.buckets, d, 0.5, rng),
        );
        let positions = store.add(
            "encoder.positions",
            Matrix::uniform(config.max_positions, d, 0.1, rng),
        );
        let w_q = store.add("encoder.attn.w_q", Matrix::xavier(d, d, rng));
        let w_k = store.add("encoder.attn.w_k", Matrix::xavier(d, d, rng));
        let w_v = store.add("encoder.attn.w_v", Matrix::xavier(d, d, rng));
        let w_o = store.add("encoder.attn.w_o", Matrix::xavier(d, d, rng));
        let ln_gain = store.add("encoder.ln.gain", Matrix::filled(1, d, 1.0));
        let ln_bias = store.add("encoder.ln.bias", Matrix::zeros(1, d));
        HashedEncoder {
            config,
            table,
            positions,
            w_q,
            w_k,
            w_v,
            w_o,
            ln_gain,
            ln_bias,
        }
    }

    pub fn config(&self) -> &HashedEncoderConfig {
        &self.config
    }

    /// Bucket ids and slots, markers included.
    pub fn subtokenize(&self, tokens: &[String]) -> (Vec<usize>, Vec<SubtokenSlot>) {
        let mut ids = vec![BEGIN_BUCKET];
        let mut slots = vec![SubtokenSlot::Marker];
        for (t, token) in tokens.iter().enumerate() {
            for (i, piece) in split_subtokens(token).iter().enumerate() {
                let key = if i == 0 {
                    piece.clone()
                } else {
                    format!("##{piece}")
                };
                ids.push(2 + (fnv1a(&key) % (self.config.buckets as u64 - 2)) as usize);
                slots.push(SubtokenSlot::Token(t));
            }
        }
        ids.push(END_BUCKET);
        slots.push(SubtokenSlot::Marker);
        (ids, slots)
    }
}

impl EncoderBackend for HashedEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, g: &mut Graph<'_>, tokens: &[String]) -> Result<SubtokenEncoding> {
        let (ids, slots) = self.subtokenize(tokens);
        if ids.len() > self.config.max_positions {
            return Err(Error::Unsupported(format!(
                "sentence yields {} sub-tokens; the encoder supports {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        let table = g.param(self.table);
        let positions = g.param(self.positions);
        let words = g.gather_rows(table, &ids);
        let order: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(positions, &order);
        let x = g.add(words, pos);

        let w_q = g.param(self.w_q);
        let w_k = g.param(self.w_k);
        let w_v = g.param(self.w_v);
        let w_o = g.param(self.w_o);
        let q = g.matmul(x, w_q);
        let k = g.matmul(x, w_k);
        let v = g.matmul(x, w_v);
        let scores = g.matmul_transposed(q, k);
        let scores = g.scale(scores, 1.0 / (self.config.dim as f64).sqrt());
        let attn = g.softmax_rows(scores, None);
        let mixed = g.matmul(attn, v);
        let projected = g.matmul(mixed, w_o);
        let residual = g.add(x, projected);
        let gain = g.param(self.ln_gain);
        let bias = g.param(self.ln_bias);
        let vectors = g.layer_norm(residual, gain, bias, 1e-5);
        Ok(SubtokenEncoding { vectors, slots })
    }
}

/// Frozen sub-token features exported from an external pretrained encoder.
///
/// The file holds one JSON object per line:
/// `{"tokens": [...], "vectors": [[...], ...], "alignment": [null, 0, 0, 1, ..., null]}`
/// where `null` marks the begin/end marker rows and integers give the token
/// each sub-token row belongs to.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedEncoder {
    dim: usize,
    features: HashMap<Vec<String>, (Matrix, Vec<SubtokenSlot>)>,
}

#[derive(Deserialize)]
struct FeatureRecord {
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
    alignment: Vec<Option<usize>>,
}

impl PrecomputedEncoder {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = PrecomputedEncoder::default();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                what: format!("encoder features line {}", line_no + 1),
                message,
            };
            let rec: FeatureRecord =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            if rec.vectors.len() != rec.alignment.len() || rec.vectors.is_empty() {
                return Err(parse_err("vectors and alignment lengths differ".into()));
            }
            let dim = rec.vectors[0].len();
            if rec.vectors.iter().any(|v| v.len() != dim) {
                return Err(parse_err("ragged vectors".into()));
            }
            if out.dim != 0 && out.dim != dim {
                return Err(parse_err(format!("dimension {dim} differs from {}", out.dim)));
            }
            out.dim = dim;
            let slots: Vec<SubtokenSlot> = rec
                .alignment
                .iter()
                .map(|a| a.map_or(SubtokenSlot::Marker, SubtokenSlot::Token))
                .collect();
            pooling_groups(&slots, rec.tokens.len())?;
            out.features
                .insert(rec.tokens, (Matrix::from_rows(&rec.vectors), slots));
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PrecomputedEncoder::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

impl EncoderBackend for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, g: &mut Graph<'_>, tokens: &[String]) -> Result<SubtokenEncoding> {
        let (vectors, slots) = self.features.get(tokens).ok_or_else(|| {
            Error::Unsupported(format!(
                "no precomputed encoder features for sentence `{}`",
                tokens.join(" ")
            ))
        })?;
        Ok(SubtokenEncoding {
            vectors: g.constant(vectors.clone()),
            slots: slots.clone(),
        })
    }
}
