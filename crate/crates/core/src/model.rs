//! The full network: encoder backend, stacked streams and decoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, EncoderKind};
use crate::data::{enumerate_spans, SentenceExample, SpanCandidate, TrainingBatch, TrainingInstance, Vocabularies};
use crate::decoders::{
    augment_stream, classify_relations, classify_spans, decode_sequence_labels, joint_loss, relation_logits,
    relation_loss, relation_representation, select_label_embeddings, sequence_logits, sequence_tagging_loss,
    span_loss, span_representation, DecoderParams, LabelMode, LossBundle,
};
use crate::encoder::{embed_tokens, EncoderBackend, HashedEncoder, PrecomputedEncoder};
use crate::stack::{run_stack, RunOptions, StackParams, StreamStates, Trace};
use crate::tagging::EntityMention;
use crate::data::RelationTuple;
use crate::tensor::{sigmoid, Graph, Matrix, ParamStore, Var};
use crate::{Error, Result};

/// Stream offset for parameter initialization, kept apart from the
/// sampling and dropout streams derived from the same seed.
pub const INIT_STREAM: u64 = 0;

#[derive(Clone, Debug)]
pub enum Backend {
    Hashed(HashedEncoder),
    Precomputed(PrecomputedEncoder),
}

impl Backend {
    fn as_dyn(&self) -> &dyn EncoderBackend {
        match self {
            Backend::Hashed(b) => b,
            Backend::Precomputed(b) => b,
        }
    }
}

/// Tape handles of one batch loss.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub label: Var,
    pub entity: Var,
    pub relation: Var,
    pub joint: Var,
    pub tokens: usize,
    pub spans: usize,
    pub pairs: usize,
}

impl BatchLoss {
    pub fn bundle(&self, g: &Graph<'_>) -> LossBundle {
        let v = |x: Var| g.value(x).get(0, 0);
        LossBundle {
            l_label: v(self.label),
            l_entity: v(self.entity),
            l_relation: v(self.relation),
            l_joint: v(self.joint),
            tokens: self.tokens,
            spans: self.spans,
            pairs: self.pairs,
        }
    }
}

/// Intermediate results of one sentence, kept for inspection.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    pub token_reps: Var,
    pub initial: StreamStates,
    pub states: StreamStates,
    pub label_logits: Var,
    pub predicted_labels: Vec<usize>,
    /// Label indices whose embedding rows fed the span decoders.
    pub label_lookup: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StsnModel {
    pub config: Config,
    pub vocabs: Vocabularies,
    pub store: ParamStore,
    pub backend: Backend,
    pub stack: StackParams,
    pub decoders: DecoderParams,
}

impl StsnModel {
    /// Builds a freshly initialized model; the precomputed backend reads
    /// `encoder.features` from disk.
    pub fn new(config: Config, vocabs: Vocabularies) -> Result<Self> {
        let features = match config.encoder.kind {
            EncoderKind::Precomputed => Some(PrecomputedEncoder::load(&config.encoder.features)?),
            EncoderKind::Hashed => None,
        };
        StsnModel::with_features(config, vocabs, features)
    }

    pub fn with_features(config: Config, vocabs: Vocabularies, features: Option<PrecomputedEncoder>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let backend = match (config.encoder.kind, features) {
            (EncoderKind::Hashed, _) => {
                Backend::Hashed(HashedEncoder::new(&mut store, config.hashed_encoder_config(), &mut rng))
            }
            (EncoderKind::Precomputed, Some(f)) => {
                if !f.is_empty() && f.dim() != config.encoder.dim {
                    return Err(Error::Config(format!(
                        "encoder features have dimension {}, but encoder.dim is {}",
                        f.dim(),
                        config.encoder.dim
                    )));
                }
                Backend::Precomputed(f)
            }
            (EncoderKind::Precomputed, None) => {
                return Err(Error::Config("the precomputed encoder needs a feature file".into()))
            }
        };
        let stack = StackParams::new(&mut store, config.stack_config(), &mut rng)?;
        let decoder_config = config.decoder_config(vocabs.labels.len(), vocabs.entities.len(), vocabs.relations.len());
        let decoders = DecoderParams::new(&mut store, decoder_config, &mut rng)?;
        Ok(StsnModel {
            config,
            vocabs,
            store,
            backend,
            stack,
            decoders,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// `n x d` token representations.
    pub fn embed(&self, g: &mut Graph<'_>, tokens: &[String]) -> Result<Var> {
        embed_tokens(g, tokens, self.backend.as_dyn())
    }

    fn max_width(&self) -> usize {
        self.decoders.config.max_width
    }

    /// Encoder, stack and label decoder for one sentence, padded to
    /// `mask.len()` rows when a mask is given. Label embeddings are chosen by
    /// `mode`; `gold` is ignored in inference mode.
    pub fn forward_sentence(
        &self,
        g: &mut Graph<'_>,
        tokens: &[String],
        gold: &[usize],
        mode: LabelMode,
        opts: &mut RunOptions<'_>,
    ) -> Result<(ForwardRecord, Var, Var)> {
        let n = tokens.len();
        let e_hat = self.embed(g, tokens)?;
        let padded = opts.mask.map_or(n, <[bool]>::len);
        let input = if padded > n {
            let pad = g.constant(Matrix::zeros(padded - n, self.config.encoder.dim));
            g.concat_rows(&[e_hat, pad])
        } else {
            e_hat
        };
        let initial = crate::stack::init_streams(g, input, &self.stack)?;
        let mut states = initial;
        for (k, layer) in self.stack.layers.iter().enumerate() {
            states = crate::stack::run_layer(g, states, layer, k, &self.stack.config, opts)?;
        }
        if padded > n {
            let real: Vec<usize> = (0..n).collect();
            states = StreamStates {
                label: g.gather_rows(states.label, &real),
                entity: g.gather_rows(states.entity, &real),
                relation: g.gather_rows(states.relation, &real),
            };
        }
        let label_logits = sequence_logits(g, states.label, &self.decoders);
        let (_, predicted_labels) = decode_sequence_labels(g.value(label_logits));
        let label_rows = select_label_embeddings(g, &self.decoders, mode, gold, &predicted_labels)?;
        let label_lookup = match (label_rows, mode) {
            (None, _) => Vec::new(),
            (Some(_), LabelMode::Training) => gold.to_vec(),
            (Some(_), LabelMode::Inference) => predicted_labels.clone(),
        };
        let entity_stream = augment_stream(g, states.entity, label_rows);
        let relation_stream = augment_stream(g, states.relation, label_rows);
        let record = ForwardRecord {
            token_reps: e_hat,
            initial,
            states,
            label_logits,
            predicted_labels,
            label_lookup,
        };
        Ok((record, entity_stream, relation_stream))
    }

    /// Joint loss of a batch under teacher forcing. Dropout is applied when
    /// `rng` is given.
    pub fn batch_loss(&self, g: &mut Graph<'_>, batch: &TrainingBatch, mut rng: Option<&mut ChaCha8Rng>) -> Result<BatchLoss> {
        let mut label_logits = Vec::new();
        let mut gold_labels = Vec::new();
        let mut span_reps = Vec::new();
        let mut span_targets = Vec::new();
        let mut pair_reps = Vec::new();
        let mut pair_rows: Vec<f64> = Vec::new();
        let mut pair_count = 0;
        let relation_types = self.vocabs.relations.len();
        for (inst, mask) in batch.instances.iter().zip(&batch.masks) {
            let mut opts = RunOptions {
                mask: Some(mask),
                rng: rng.as_deref_mut(),
                trace: None,
            };
            let (record, entity_stream, relation_stream) =
                self.forward_sentence(g, &inst.tokens, &inst.gold_labels, LabelMode::Training, &mut opts)?;
            label_logits.push(record.label_logits);
            gold_labels.extend_from_slice(&inst.gold_labels);

            let (spans, targets) = self.reachable_spans(inst);
            if !spans.is_empty() {
                span_reps.push(span_representation(g, entity_stream, &spans, &self.decoders)?);
                span_targets.extend(targets);
            }
            let (pairs, rows) = self.reachable_pairs(inst);
            if !pairs.is_empty() {
                pair_reps.push(relation_representation(g, relation_stream, &pairs, &self.decoders)?);
                pair_count += pairs.len();
                pair_rows.extend(rows);
            }
        }
        let logits = g.concat_rows(&label_logits);
        let label = sequence_tagging_loss(g, logits, &gold_labels)?;
        let entity = if span_reps.is_empty() {
            g.constant(Matrix::zeros(1, 1))
        } else {
            let reps = g.concat_rows(&span_reps);
            let logits = classify_spans(g, reps, &self.decoders);
            span_loss(g, logits, &span_targets)?
        };
        let relation = if pair_reps.is_empty() {
            g.constant(Matrix::zeros(1, 1))
        } else {
            let reps = g.concat_rows(&pair_reps);
            let logits = relation_logits(g, reps, &self.decoders);
            let targets = Matrix::new(pair_count, relation_types, pair_rows);
            relation_loss(g, logits, targets, self.decoders.config.relation_loss_norm)?
        };
        let joint = joint_loss(g, label, entity, relation);
        Ok(BatchLoss {
            label,
            entity,
            relation,
            joint,
            tokens: gold_labels.len(),
            spans: span_targets.len(),
            pairs: pair_count,
        })
    }

    // Spans wider than the width threshold can never be predicted, so they
    // are left out of the span and pair losses.
    fn reachable_spans(&self, inst: &TrainingInstance) -> (Vec<SpanCandidate>, Vec<usize>) {
        inst.spans
            .iter()
            .zip(&inst.span_targets)
            .filter(|(s, _)| s.width() <= self.max_width())
            .map(|(s, t)| (*s, *t))
            .unzip()
    }

    fn reachable_pairs(&self, inst: &TrainingInstance) -> (Vec<(SpanCandidate, SpanCandidate)>, Vec<f64>) {
        let mut pairs = Vec::new();
        let mut rows = Vec::new();
        for (i, (a, b)) in inst.pairs.iter().enumerate() {
            if a.width() <= self.max_width() && b.width() <= self.max_width() {
                pairs.push((*a, *b));
                rows.extend_from_slice(inst.pair_targets.row(i));
            }
        }
        (pairs, rows)
    }

    /// Inference: labels from the sequence decoder feed the label embeddings,
    /// every span up to the width threshold is classified, and every ordered
    /// pair of predicted entities is scored for relations.
    pub fn predict(&self, tokens: &[String]) -> Result<(Vec<EntityMention>, Vec<RelationTuple>)> {
        let mut g = Graph::new(&self.store);
        self.predict_on(&mut g, tokens, None)
    }

    /// Like [`predict`](Self::predict), also returning every attention unit's weights.
    pub fn predict_traced(&self, tokens: &[String]) -> Result<(Vec<EntityMention>, Vec<RelationTuple>, Trace)> {
        let mut g = Graph::new(&self.store);
        let mut trace = Trace::default();
        let (entities, relations) = self.predict_on(&mut g, tokens, Some(&mut trace))?;
        Ok((entities, relations, trace))
    }

    fn predict_on(
        &self,
        g: &mut Graph<'_>,
        tokens: &[String],
        trace: Option<&mut Trace>,
    ) -> Result<(Vec<EntityMention>, Vec<RelationTuple>)> {
        let mut opts = RunOptions {
            trace,
            ..Default::default()
        };
        let (_, entity_stream, relation_stream) =
            self.forward_sentence(g, tokens, &[], LabelMode::Inference, &mut opts)?;
        let candidates = enumerate_spans(tokens.len(), self.max_width());
        let reps = span_representation(g, entity_stream, &candidates, &self.decoders)?;
        let logits = classify_spans(g, reps, &self.decoders);
        let (_, classes) = decode_sequence_labels(g.value(logits));
        let none = self.vocabs.none_entity();
        let found: Vec<(SpanCandidate, usize)> = candidates
            .into_iter()
            .zip(classes)
            .filter(|&(_, c)| c != none)
            .collect();
        let entities: Vec<EntityMention> = found
            .iter()
            .map(|(s, c)| EntityMention::new(self.vocabs.entities.name(*c), s.start, s.end))
            .collect();

        let mut pairs = Vec::new();
        let mut pair_entities = Vec::new();
        for (i, a) in found.iter().enumerate() {
            for (j, b) in found.iter().enumerate() {
                if i != j {
                    pairs.push((a.0, b.0));
                    pair_entities.push((i, j));
                }
            }
        }
        let mut relations = Vec::new();
        if !pairs.is_empty() && !self.vocabs.relations.is_empty() {
            let reps = relation_representation(g, relation_stream, &pairs, &self.decoders)?;
            let logits = relation_logits(g, reps, &self.decoders);
            let scores = g.value(logits).map(sigmoid);
            for (row, types) in classify_relations(&scores, self.decoders.config.relation_threshold)
                .into_iter()
                .enumerate()
            {
                let (i, j) = pair_entities[row];
                for t in types {
                    relations.push(RelationTuple {
                        head: entities[i].clone(),
                        tail: entities[j].clone(),
                        relation_type: self.vocabs.relations.name(t).to_string(),
                    });
                }
            }
        }
        relations.sort();
        Ok((entities, relations))
    }

    /// Predictions for a corpus, one record per sentence with the same id and tokens.
    pub fn predict_corpus(&self, corpus: &[SentenceExample]) -> Result<Vec<SentenceExample>> {
        corpus
            .iter()
            .map(|s| {
                let (entities, relations) = self.predict(&s.tokens)?;
                Ok(SentenceExample {
                    id: s.id.clone(),
                    tokens: s.tokens.clone(),
                    entities,
                    relations,
                })
            })
            .collect()
    }

    /// Runs the stack once and returns each unit's attention weights.
    pub fn attention_trace(&self, tokens: &[String]) -> Result<Trace> {
        let mut g = Graph::new(&self.store);
        let e_hat = self.embed(&mut g, tokens)?;
        let mut trace = Trace::default();
        let mut opts = RunOptions {
            trace: Some(&mut trace),
            ..Default::default()
        };
        run_stack(&mut g, e_hat, &self.stack, &mut opts)?;
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabularies, sample_negatives, synthetic_corpus, SyntheticConfig};

    fn tiny_config() -> Config {
        let mut c = Config::default();
        for (k, v) in [
            ("encoder.dim", "8"),
            ("encoder.vocab_buckets", "64"),
            ("encoder.max_positions", "64"),
            ("stack.layers", "2"),
            ("stack.heads", "2"),
            ("stack.dropout", "0"),
            ("decoder.label_dim", "4"),
            ("decoder.width_dim", "3"),
            ("decoder.max_width", "4"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    fn fixture() -> (Vec<SentenceExample>, Vocabularies) {
        let corpus = synthetic_corpus(&SyntheticConfig::default());
        let vocabs = build_vocabularies(&corpus).unwrap();
        (corpus, vocabs)
    }

    fn batch(model: &StsnModel, corpus: &[SentenceExample]) -> TrainingBatch {
        let instances = corpus
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let neg = sample_negatives(s, 5, 5, model.max_width(), i as u64);
                TrainingInstance::build(s, &model.vocabs, &neg).unwrap()
            })
            .collect();
        TrainingBatch::new(instances)
    }

    #[test]
    fn batch_loss_is_finite_and_sums() {
        let (corpus, vocabs) = fixture();
        let model = StsnModel::new(tiny_config(), vocabs).unwrap();
        let b = batch(&model, &corpus[..4]);
        let mut g = Graph::new(&model.store);
        let loss = model.batch_loss(&mut g, &b, None).unwrap().bundle(&g);
        assert!(loss.is_finite());
        assert!((loss.l_joint - (loss.l_label + loss.l_entity + loss.l_relation)).abs() < 1e-12);
        assert_eq!(loss.tokens, corpus[..4].iter().map(SentenceExample::len).sum::<usize>());
    }

    #[test]
    fn padding_matches_single_sentence_batches() {
        let (corpus, vocabs) = fixture();
        let model = StsnModel::new(tiny_config(), vocabs).unwrap();
        let joint = batch(&model, &corpus[..3]);
        let mut g = Graph::new(&model.store);
        let together = model.batch_loss(&mut g, &joint, None).unwrap().bundle(&g);
        let mut label_sum = 0.0;
        for inst in &joint.instances {
            let single = TrainingBatch::new(vec![inst.clone()]);
            let l = model.batch_loss(&mut g, &single, None).unwrap().bundle(&g);
            label_sum += l.l_label * l.tokens as f64;
        }
        assert!((together.l_label * together.tokens as f64 - label_sum).abs() < 1e-9);
    }

    #[test]
    fn prediction_is_deterministic_and_in_range() {
        let (corpus, vocabs) = fixture();
        let model = StsnModel::new(tiny_config(), vocabs).unwrap();
        let a = model.predict_corpus(&corpus).unwrap();
        let b = model.predict_corpus(&corpus).unwrap();
        assert_eq!(a, b);
        for (p, s) in a.iter().zip(&corpus) {
            assert_eq!(p.id, s.id);
            for e in &p.entities {
                assert!(e.end <= s.len() && e.width() <= 4);
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, vocabs) = fixture();
        let a = StsnModel::new(tiny_config(), vocabs.clone()).unwrap();
        let b = StsnModel::new(tiny_config(), vocabs).unwrap();
        for (id, _, m) in a.store.iter() {
            assert_eq!(m, b.store.get(id));
        }
    }
}
