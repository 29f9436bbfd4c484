//! Sequence-tagging, span and span-pair decoders with their losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SpanCandidate;
use crate::stack::Projection;
use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::{Error, Result};

/// Smallest argument passed to `ln` in the probability-space losses.
pub const LOG_CLAMP: f64 = 1e-12;

/// How the relation BCE is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationLossNorm {
    /// Mean over every (pair, type) cell.
    #[default]
    PairsTimesTypes,
    /// Sum over types, mean over pairs.
    Pairs,
}

impl RelationLossNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pairs_times_types" => Ok(RelationLossNorm::PairsTimesTypes),
            "pairs" => Ok(RelationLossNorm::Pairs),
            other => Err(Error::Config(format!(
                "decoder.relation_loss_norm must be pairs_times_types or pairs, got {other:?}"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationLossNorm::PairsTimesTypes => "pairs_times_types",
            RelationLossNorm::Pairs => "pairs",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub labels: usize,
    pub entity_types: usize,
    pub relation_types: usize,
    pub label_dim: usize,
    pub width_dim: usize,
    pub max_width: usize,
    pub relation_threshold: f64,
    pub relation_loss_norm: RelationLossNorm,
    pub no_label_embedding: bool,
}

impl DecoderConfig {
    /// Width of one augmented stream row: `d`, plus the label embedding unless ablated.
    pub fn token_dim(&self) -> usize {
        if self.no_label_embedding {
            self.dim
        } else {
            self.dim + self.label_dim
        }
    }

    pub fn span_dim(&self) -> usize {
        2 * self.token_dim() + self.width_dim
    }

    pub fn relation_dim(&self) -> usize {
        2 * self.span_dim() + self.token_dim()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub sequence: Projection,
    pub label_table: Option<ParamId>,
    pub width_table: ParamId,
    pub span: Projection,
    pub no_context: ParamId,
    pub relation: Projection,
}

impl DecoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        if config.max_width == 0 {
            return Err(Error::Config("decoder.max_width must be at least 1".into()));
        }
        if !(config.relation_threshold > 0.0 && config.relation_threshold < 1.0) {
            return Err(Error::Config(format!(
                "decoder.relation_threshold must lie in (0, 1), got {}",
                config.relation_threshold
            )));
        }
        let sequence = Projection::new(store, "decoder.sequence", config.dim, config.labels, rng);
        let span = Projection::new(store, "decoder.span", config.span_dim(), config.entity_types, rng);
        let relation = Projection::new(store, "decoder.relation", config.relation_dim(), config.relation_types, rng);
        let label_table = (!config.no_label_embedding).then(|| {
            store.add(
                "decoder.label_embedding",
                Matrix::uniform(config.labels, config.label_dim, 0.1, rng),
            )
        });
        let width_table = store.add(
            "decoder.width_embedding",
            Matrix::uniform(config.max_width, config.width_dim, 0.1, rng),
        );
        let no_context = store.add(
            "decoder.no_context",
            Matrix::uniform(1, config.token_dim(), 0.1, rng),
        );
        Ok(DecoderParams {
            config,
            sequence,
            label_table,
            width_table,
            span,
            no_context,
            relation,
        })
    }
}

/// Logits of the sequence-tagging decoder, `n x l`.
pub fn sequence_logits(g: &mut Graph<'_>, h_label: Var, params: &DecoderParams) -> Var {
    params.sequence.apply(g, h_label)
}

/// Row-wise label distributions and their argmax (ties to the lowest index).
pub fn decode_sequence_labels(logits: &Matrix) -> (Matrix, Vec<usize>) {
    let probs = logits.softmax_rows(None);
    let predictions = probs.argmax_rows();
    (probs, predictions)
}

/// Mean negative log-likelihood of `gold` under probability rows `probs`.
pub fn cross_entropy(probs: &Matrix, gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let total: f64 = gold
        .iter()
        .enumerate()
        .map(|(r, &t)| -probs.get(r, t).max(LOG_CLAMP).ln())
        .sum();
    total / gold.len() as f64
}

/// Mean binary cross-entropy of `scores` against 0/1 `targets`, normalized per `norm`.
pub fn binary_cross_entropy(scores: &Matrix, targets: &Matrix, norm: RelationLossNorm) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let total: f64 = scores
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| -(y * p.max(LOG_CLAMP).ln() + (1.0 - y) * (1.0 - p).max(LOG_CLAMP).ln()))
        .sum();
    total / relation_normalizer(scores.rows(), scores.cols(), norm)
}

fn relation_normalizer(pairs: usize, types: usize, norm: RelationLossNorm) -> f64 {
    match norm {
        RelationLossNorm::PairsTimesTypes => (pairs * types) as f64,
        RelationLossNorm::Pairs => pairs as f64,
    }
}

fn check_indices(indices: &[usize], size: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= size) {
        Some(&index) => Err(Error::LabelIndex { index, size }),
        None => Ok(()),
    }
}

/// Mean token cross-entropy on the tape; zero when there are no tokens.
pub fn sequence_tagging_loss(g: &mut Graph<'_>, logits: Var, gold: &[usize]) -> Result<Var> {
    mean_softmax_loss(g, logits, gold)
}

/// Mean span cross-entropy on the tape; zero when there are no spans.
pub fn span_loss(g: &mut Graph<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    mean_softmax_loss(g, logits, targets)
}

fn mean_softmax_loss(g: &mut Graph<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (rows, cols) = g.shape(logits);
    if rows != targets.len() {
        return Err(Error::shape("cross-entropy targets", format!("{rows}"), format!("{}", targets.len())));
    }
    check_indices(targets, cols)?;
    if rows == 0 {
        return Ok(g.constant(Matrix::zeros(1, 1)));
    }
    let total = g.softmax_cross_entropy(logits, targets);
    Ok(g.scale(total, 1.0 / rows as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Teacher forcing: embed the gold labels.
    Training,
    /// Embed the decoder's own predictions.
    Inference,
}

/// Label-embedding rows for each token, or `None` when label embeddings are ablated.
pub fn select_label_embeddings(
    g: &mut Graph<'_>,
    params: &DecoderParams,
    mode: LabelMode,
    gold: &[usize],
    predicted: &[usize],
) -> Result<Option<Var>> {
    let Some(table) = params.label_table else {
        return Ok(None);
    };
    let labels = match mode {
        LabelMode::Training => gold,
        LabelMode::Inference => predicted,
    };
    check_indices(labels, params.config.labels)?;
    let table = g.param(table);
    Ok(Some(g.gather_rows(table, labels)))
}

/// `[H ; label rows]`, the stream each span-level decoder reads.
pub fn augment_stream(g: &mut Graph<'_>, stream: Var, label_rows: Option<Var>) -> Var {
    match label_rows {
        Some(rows) => g.concat_cols(&[stream, rows]),
        None => stream,
    }
}

fn check_span(span: &SpanCandidate, n: usize, max_width: usize) -> Result<()> {
    if span.start >= span.end || span.end > n {
        return Err(Error::SpanBounds {
            start: span.start,
            end: span.end,
            len: n,
        });
    }
    if span.width() > max_width {
        return Err(Error::WidthOverflow {
            width: span.width(),
            max_width,
        });
    }
    Ok(())
}

/// `[H'[start] ; H'[end - 1] ; width_embedding[width - 1]]` for each span, one row each.
pub fn span_representation(
    g: &mut Graph<'_>,
    augmented: Var,
    spans: &[SpanCandidate],
    params: &DecoderParams,
) -> Result<Var> {
    let n = g.shape(augmented).0;
    for span in spans {
        check_span(span, n, params.config.max_width)?;
    }
    let heads: Vec<usize> = spans.iter().map(|s| s.start).collect();
    let tails: Vec<usize> = spans.iter().map(|s| s.last()).collect();
    let widths: Vec<usize> = spans.iter().map(|s| s.width() - 1).collect();
    let head_rows = g.gather_rows(augmented, &heads);
    let tail_rows = g.gather_rows(augmented, &tails);
    let table = g.param(params.width_table);
    let width_rows = g.gather_rows(table, &widths);
    Ok(g.concat_cols(&[head_rows, tail_rows, width_rows]))
}

/// Entity-type logits for each span representation.
pub fn classify_spans(g: &mut Graph<'_>, spans: Var, params: &DecoderParams) -> Var {
    params.span.apply(g, spans)
}

/// Token indices strictly between two spans, in order. Overlapping or
/// adjacent spans have no gap.
pub fn gap_tokens(a: &SpanCandidate, b: &SpanCandidate) -> std::ops::Range<usize> {
    let from = a.end.min(b.end);
    let to = a.start.max(b.start);
    from..to.max(from)
}

/// Element-wise max over the gap rows of each pair, or the learned
/// no-context row when the gap is empty.
pub fn relation_context(
    g: &mut Graph<'_>,
    augmented: Var,
    pairs: &[(SpanCandidate, SpanCandidate)],
    params: &DecoderParams,
) -> Var {
    let groups: Vec<Vec<usize>> = pairs.iter().map(|(a, b)| gap_tokens(a, b).collect()).collect();
    let fallback = g.param(params.no_context);
    g.max_pool_rows(augmented, &groups, Some(fallback))
}

/// `[E_s(head) ; E_s(tail) ; C_r]` for each ordered pair over the relation stream.
pub fn relation_representation(
    g: &mut Graph<'_>,
    augmented: Var,
    pairs: &[(SpanCandidate, SpanCandidate)],
    params: &DecoderParams,
) -> Result<Var> {
    let heads: Vec<SpanCandidate> = pairs.iter().map(|p| p.0).collect();
    let tails: Vec<SpanCandidate> = pairs.iter().map(|p| p.1).collect();
    let e1 = span_representation(g, augmented, &heads, params)?;
    let e2 = span_representation(g, augmented, &tails, params)?;
    let context = relation_context(g, augmented, pairs, params);
    Ok(g.concat_cols(&[e1, e2, context]))
}

/// Relation-type logits for each pair representation.
pub fn relation_logits(g: &mut Graph<'_>, pairs: Var, params: &DecoderParams) -> Var {
    params.relation.apply(g, pairs)
}

/// Types whose score reaches `threshold`, per row. An empty set means no relation.
pub fn classify_relations(scores: &Matrix, threshold: f64) -> Vec<Vec<usize>> {
    (0..scores.rows())
        .map(|r| {
            scores
                .row(r)
                .iter()
                .enumerate()
                .filter(|(_, &s)| s >= threshold)
                .map(|(t, _)| t)
                .collect()
        })
        .collect()
}

/// Relation BCE on the tape; zero when there are no pairs.
pub fn relation_loss(
    g: &mut Graph<'_>,
    logits: Var,
    targets: Matrix,
    norm: RelationLossNorm,
) -> Result<Var> {
    let shape = g.shape(logits);
    if shape != targets.shape() {
        return Err(Error::shape(
            "relation targets",
            format!("{}x{}", shape.0, shape.1),
            format!("{}x{}", targets.rows(), targets.cols()),
        ));
    }
    if shape.0 == 0 || shape.1 == 0 {
        return Ok(g.constant(Matrix::zeros(1, 1)));
    }
    let total = g.sigmoid_bce(logits, targets);
    Ok(g.scale(total, 1.0 / relation_normalizer(shape.0, shape.1, norm)))
}

pub fn joint_loss(g: &mut Graph<'_>, l_label: Var, l_entity: Var, l_relation: Var) -> Var {
    let partial = g.add(l_label, l_entity);
    g.add(partial, l_relation)
}

/// Scalar loss values and the instance counts behind them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_label: f64,
    pub l_entity: f64,
    pub l_relation: f64,
    pub l_joint: f64,
    pub tokens: usize,
    pub spans: usize,
    pub pairs: usize,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_label, self.l_entity, self.l_relation, self.l_joint]
            .iter()
            .all(|v| v.is_finite())
    }
}
