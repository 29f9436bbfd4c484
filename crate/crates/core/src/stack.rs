//! The three-stream stacked attention network.
//!
//! Token representations are projected into a label stream, an entity stream
//! and a relation stream. Each layer fuses the entity and relation streams,
//! lets the label stream attend to the fusion, then lets the entity and
//! relation streams attend to the *updated* label stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    /// Label stream queries the fused entity/relation stream.
    EntityRelationToLabel,
    /// Entity stream queries the label stream.
    LabelToEntity,
    /// Relation stream queries the label stream.
    LabelToRelation,
}

/// The label, entity and relation streams.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamStates<T = Var> {
    pub label: T,
    pub entity: T,
    pub relation: T,
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Projection {
            weight: store.add(format!("{name}.weight"), Matrix::xavier(fan_in, fan_out, rng)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.affine(x, w, b)
    }
}

/// Weights of one attention unit: multi-head attention followed by a
/// position-wise feed-forward network, each wrapped in residual + layer norm.
///
/// The per-head projections are stored side by side: head `i` of `w_q`
/// occupies columns `i*d/h .. (i+1)*d/h`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionUnitParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl AttentionUnitParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let mut w = |suffix: &str, rng: &mut R| store.add(format!("{name}.{suffix}"), Matrix::xavier(d, d, rng));
        let w_q = w("w_q", rng);
        let w_k = w("w_k", rng);
        let w_v = w("w_v", rng);
        let w_o = w("w_o", rng);
        let ffn_w1 = w("ffn.w1", rng);
        let ffn_w2 = w("ffn.w2", rng);
        AttentionUnitParams {
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_w1,
            ffn_w2,
            ffn_b1: store.add(format!("{name}.ffn.b1"), Matrix::zeros(1, d)),
            ffn_b2: store.add(format!("{name}.ffn.b2"), Matrix::zeros(1, d)),
            ln1_gain: store.add(format!("{name}.ln1.gain"), Matrix::filled(1, d, 1.0)),
            ln1_bias: store.add(format!("{name}.ln1.bias"), Matrix::zeros(1, d)),
            ln2_gain: store.add(format!("{name}.ln2.gain"), Matrix::filled(1, d, 1.0)),
            ln2_bias: store.add(format!("{name}.ln2.bias"), Matrix::zeros(1, d)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    /// `2d x d` fusion of entity and relation streams; absent when the
    /// label unit attends to itself.
    pub fusion: Option<Projection>,
    pub erla: AttentionUnitParams,
    pub lea: AttentionUnitParams,
    pub lra: AttentionUnitParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Label unit takes the label stream as query, key and value.
    pub no_erla: bool,
    /// No attention layers: the initial projections are the final streams.
    pub no_stack: bool,
}

#[derive(Clone, Debug)]
pub struct StackParams {
    pub config: StackConfig,
    pub init: StreamStates<Projection>,
    pub layers: Vec<LayerParams>,
}

impl StackParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: StackConfig, rng: &mut R) -> Result<Self> {
        let d = config.dim;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::HeadSplit { dim: d, heads: config.heads });
        }
        if config.layers == 0 && !config.no_stack {
            return Err(Error::Config("stack.layers must be at least 1".into()));
        }
        let init = StreamStates {
            label: Projection::new(store, "stack.init.label", d, d, rng),
            entity: Projection::new(store, "stack.init.entity", d, d, rng),
            relation: Projection::new(store, "stack.init.relation", d, d, rng),
        };
        let depth = if config.no_stack { 0 } else { config.layers };
        let layers = (0..depth)
            .map(|k| {
                let prefix = format!("stack.layer{k}");
                LayerParams {
                    fusion: (!config.no_erla)
                        .then(|| Projection::new(store, &format!("{prefix}.fusion"), 2 * d, d, rng)),
                    erla: AttentionUnitParams::new(store, &format!("{prefix}.erla"), d, rng),
                    lea: AttentionUnitParams::new(store, &format!("{prefix}.lea"), d, rng),
                    lra: AttentionUnitParams::new(store, &format!("{prefix}.lra"), d, rng),
                }
            })
            .collect();
        Ok(StackParams { config, init, layers })
    }
}

/// One finished attention unit, in execution order.
#[derive(Clone, Debug)]
pub struct TraceEvent {
    pub layer: usize,
    pub unit: UnitKind,
    pub query: Var,
    pub key_value: Var,
    pub output: Var,
    /// Attention probabilities per head (`n x n`).
    pub attention: Vec<Matrix>,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

/// Per-call settings threaded through the stack.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// `false` marks padded key positions.
    pub mask: Option<&'a [bool]>,
    /// Dropout is active only when an RNG is supplied.
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub trace: Option<&'a mut Trace>,
}

impl<'a> RunOptions<'a> {
    pub fn masked(mask: &'a [bool]) -> Self {
        RunOptions {
            mask: Some(mask),
            ..Default::default()
        }
    }

    fn dropout(&mut self, g: &mut Graph<'_>, x: Var, rate: f64) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) => g.dropout(x, rate, rng),
            None => x,
        }
    }
}

fn check_rows(g: &Graph<'_>, context: &'static str, v: Var, rows: usize, cols: usize) -> Result<()> {
    let shape = g.shape(v);
    if shape != (rows, cols) {
        return Err(Error::shape(
            context,
            format!("{rows}x{cols}"),
            format!("{}x{}", shape.0, shape.1),
        ));
    }
    Ok(())
}

/// Projects the token representations into the three initial streams.
pub fn init_streams(g: &mut Graph<'_>, e_hat: Var, params: &StackParams) -> Result<StreamStates> {
    let (n, d) = g.shape(e_hat);
    check_rows(g, "init_streams", e_hat, n, params.config.dim)?;
    let _ = d;
    Ok(StreamStates {
        label: params.init.label.apply(g, e_hat),
        entity: params.init.entity.apply(g, e_hat),
        relation: params.init.relation.apply(g, e_hat),
    })
}

/// `[H_E ; H_R] W_C + b_C`, concatenating along the feature axis.
pub fn fuse_streams(g: &mut Graph<'_>, entity: Var, relation: Var, fusion: &Projection) -> Result<Var> {
    let (n, d) = g.shape(entity);
    check_rows(g, "fuse_streams", relation, n, d)?;
    let w = g.store().get(fusion.weight).shape();
    if w != (2 * d, d) {
        return Err(Error::shape(
            "fuse_streams weight",
            format!("{}x{d}", 2 * d),
            format!("{}x{}", w.0, w.1),
        ));
    }
    let cat = g.concat_cols(&[entity, relation]);
    Ok(fusion.apply(g, cat))
}

/// Multi-head scaled dot-product attention. Returns the `n x d` output and
/// the per-head attention probabilities.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    query: Var,
    key: Var,
    value: Var,
    unit: &AttentionUnitParams,
    heads: usize,
    dropout: f64,
    opts: &mut RunOptions<'_>,
) -> Result<(Var, Vec<Var>)> {
    let (nq, d) = g.shape(query);
    let (nk, dk) = g.shape(key);
    if heads == 0 || d % heads != 0 {
        return Err(Error::HeadSplit { dim: d, heads });
    }
    check_rows(g, "attention key", key, nk, d)?;
    check_rows(g, "attention value", value, nk, d)?;
    let _ = dk;
    if let Some(mask) = opts.mask {
        if mask.len() != nk {
            return Err(Error::shape(
                "attention mask",
                format!("{nk} entries"),
                format!("{} entries", mask.len()),
            ));
        }
    }
    let width = d / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let w_q = g.param(unit.w_q);
    let w_k = g.param(unit.w_k);
    let w_v = g.param(unit.w_v);
    let q_all = g.matmul(query, w_q);
    let k_all = g.matmul(key, w_k);
    let v_all = g.matmul(value, w_v);
    let mut outputs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(q_all, h * width, width);
        let k = g.slice_cols(k_all, h * width, width);
        let v = g.slice_cols(v_all, h * width, width);
        let scores = g.matmul_transposed(q, k);
        let scores = g.scale(scores, scale);
        let p = g.softmax_rows(scores, opts.mask);
        probs.push(p);
        let p = opts.dropout(g, p, dropout);
        outputs.push(g.matmul(p, v));
    }
    let _ = nq;
    let cat = if heads == 1 { outputs[0] } else { g.concat_cols(&outputs) };
    let w_o = g.param(unit.w_o);
    Ok((g.matmul(cat, w_o), probs))
}

/// `LayerNorm(q + MHA(q, kv, kv))` followed by `LayerNorm(x + FFN(x))`.
pub fn attention_unit(
    g: &mut Graph<'_>,
    query: Var,
    key_value: Var,
    unit: &AttentionUnitParams,
    heads: usize,
    dropout: f64,
    opts: &mut RunOptions<'_>,
) -> Result<(Var, Vec<Var>)> {
    let (n, d) = g.shape(query);
    let (nk, _) = g.shape(key_value);
    check_rows(g, "attention_unit key/value", key_value, nk, d)?;
    let _ = n;
    let (attended, probs) =
        multi_head_attention(g, query, key_value, key_value, unit, heads, dropout, opts)?;
    let res = g.add(query, attended);
    let gain = g.param(unit.ln1_gain);
    let bias = g.param(unit.ln1_bias);
    let x = g.layer_norm(res, gain, bias, LAYER_NORM_EPS);

    let w1 = g.param(unit.ffn_w1);
    let b1 = g.param(unit.ffn_b1);
    let w2 = g.param(unit.ffn_w2);
    let b2 = g.param(unit.ffn_b2);
    let hidden = g.affine(x, w1, b1);
    let hidden = g.relu(hidden);
    let ffn = g.affine(hidden, w2, b2);
    let ffn = opts.dropout(g, ffn, dropout);
    let res = g.add(x, ffn);
    let gain = g.param(unit.ln2_gain);
    let bias = g.param(unit.ln2_bias);
    Ok((g.layer_norm(res, gain, bias, LAYER_NORM_EPS), probs))
}

fn traced_unit(
    g: &mut Graph<'_>,
    kind: UnitKind,
    layer: usize,
    query: Var,
    key_value: Var,
    unit: &AttentionUnitParams,
    config: &StackConfig,
    opts: &mut RunOptions<'_>,
) -> Result<Var> {
    let (output, probs) = attention_unit(g, query, key_value, unit, config.heads, config.dropout, opts)?;
    if let Some(trace) = opts.trace.as_deref_mut() {
        trace.events.push(TraceEvent {
            layer,
            unit: kind,
            query,
            key_value,
            output,
            attention: probs.iter().map(|&p| g.value(p).clone()).collect(),
        });
    }
    Ok(output)
}

/// One stacked layer: fuse, update the label stream, then update the entity
/// and relation streams from the new label stream.
pub fn run_layer(
    g: &mut Graph<'_>,
    states: StreamStates,
    layer: &LayerParams,
    index: usize,
    config: &StackConfig,
    opts: &mut RunOptions<'_>,
) -> Result<StreamStates> {
    let (n, d) = g.shape(states.label);
    check_rows(g, "run_layer entity", states.entity, n, d)?;
    check_rows(g, "run_layer relation", states.relation, n, d)?;
    let context = match (&layer.fusion, config.no_erla) {
        (Some(fusion), false) => fuse_streams(g, states.entity, states.relation, fusion)?,
        _ => states.label,
    };
    let label = traced_unit(
        g,
        UnitKind::EntityRelationToLabel,
        index,
        states.label,
        context,
        &layer.erla,
        config,
        opts,
    )?;
    let entity = traced_unit(g, UnitKind::LabelToEntity, index, states.entity, label, &layer.lea, config, opts)?;
    let relation = traced_unit(
        g,
        UnitKind::LabelToRelation,
        index,
        states.relation,
        label,
        &layer.lra,
        config,
        opts,
    )?;
    Ok(StreamStates { label, entity, relation })
}

/// Initial projections followed by every layer in order.
pub fn run_stack(
    g: &mut Graph<'_>,
    e_hat: Var,
    params: &StackParams,
    opts: &mut RunOptions<'_>,
) -> Result<StreamStates> {
    let mut states = init_streams(g, e_hat, params)?;
    for (k, layer) in params.layers.iter().enumerate() {
        states = run_layer(g, states, layer, k, &params.config, opts)?;
    }
    Ok(states)
}
