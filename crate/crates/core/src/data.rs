//! Corpora, vocabularies, candidate spans and negative sampling.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tagging::{check_type_name, encode_bio, EntityMention, LabelVocabulary, TagSequence};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const NONE_ENTITY: &str = "NoneEntity";
pub const DEFAULT_MAX_SENTENCE_LEN: usize = 128;

/// Candidate span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanCandidate {
    pub start: usize,
    pub end: usize,
}

impl SpanCandidate {
    pub fn new(start: usize, end: usize) -> Self {
        SpanCandidate { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    /// Index of the last token inside the span.
    pub fn last(&self) -> usize {
        self.end - 1
    }
}

impl From<&EntityMention> for SpanCandidate {
    fn from(e: &EntityMention) -> Self {
        SpanCandidate::new(e.start, e.end)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTuple {
    pub head: EntityMention,
    pub tail: EntityMention,
    pub relation_type: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
    pub relations: Vec<RelationTuple>,
}

impl SentenceExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Extended BIO tags for the entity set.
    pub fn tags(&self) -> Result<TagSequence> {
        Ok(encode_bio(self.len(), &self.entities)?)
    }
}

// On-disk record layout: relations point into the entity list by index.
#[derive(Serialize, Deserialize)]
struct EntityRecord {
    #[serde(rename = "type")]
    entity_type: String,
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
struct RelationRecord {
    #[serde(rename = "type")]
    relation_type: String,
    head: usize,
    tail: usize,
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<EntityRecord>,
    #[serde(default)]
    relations: Vec<RelationRecord>,
}

fn validate_record(index: usize, rec: SentenceRecord, max_len: usize) -> Result<SentenceExample> {
    let fail = |message: String| Error::Validation {
        record: index,
        message,
    };
    let n = rec.tokens.len();
    if n == 0 {
        return Err(fail("sentence has no tokens".into()));
    }
    if n > max_len {
        return Err(fail(format!(
            "sentence has {n} tokens, more than the limit of {max_len}"
        )));
    }
    let mut entities = Vec::with_capacity(rec.entities.len());
    for e in &rec.entities {
        if e.start >= e.end || e.end > n {
            return Err(fail(format!(
                "entity {}[{},{}) out of range for {n} tokens",
                e.entity_type, e.start, e.end
            )));
        }
        if e.entity_type == NONE_ENTITY {
            return Err(fail(format!("entity type `{NONE_ENTITY}` is reserved")));
        }
        check_type_name(&e.entity_type).map_err(|err| fail(err.to_string()))?;
        entities.push(EntityMention::new(e.entity_type.clone(), e.start, e.end));
    }
    let mut relations = Vec::with_capacity(rec.relations.len());
    for r in &rec.relations {
        let lookup = |i: usize| {
            entities.get(i).cloned().ok_or_else(|| {
                fail(format!(
                    "relation {} references entity {i}, but only {} entities exist",
                    r.relation_type,
                    entities.len()
                ))
            })
        };
        let head = lookup(r.head)?;
        let tail = lookup(r.tail)?;
        if head.same_span(&tail) {
            return Err(fail(format!(
                "relation {} has identical head and tail spans",
                r.relation_type
            )));
        }
        check_type_name(&r.relation_type).map_err(|err| fail(err.to_string()))?;
        relations.push(RelationTuple {
            head,
            tail,
            relation_type: r.relation_type.clone(),
        });
    }
    let entity_set: BTreeSet<_> = entities.into_iter().collect();
    let relation_set: BTreeSet<_> = relations.into_iter().collect();
    Ok(SentenceExample {
        id: rec.id.unwrap_or_else(|| index.to_string()),
        tokens: rec.tokens,
        entities: entity_set.into_iter().collect(),
        relations: relation_set.into_iter().collect(),
    })
}

/// Parses a JSON array of sentence records.
pub fn parse_corpus(text: &str, max_len: usize) -> Result<Vec<SentenceExample>> {
    let records: Vec<SentenceRecord> = serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "corpus".into(),
        message: e.to_string(),
    })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| validate_record(i, r, max_len))
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>, max_len: usize) -> Result<Vec<SentenceExample>> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, max_len)
}

/// Serializes sentences in the corpus record layout.
pub fn corpus_to_json(sentences: &[SentenceExample]) -> Result<String> {
    let records: Vec<SentenceRecord> = sentences
        .iter()
        .map(|s| {
            let index_of = |m: &EntityMention| s.entities.iter().position(|e| e == m);
            SentenceRecord {
                id: Some(s.id.clone()),
                tokens: s.tokens.clone(),
                entities: s
                    .entities
                    .iter()
                    .map(|e| EntityRecord {
                        entity_type: e.entity_type.clone(),
                        start: e.start,
                        end: e.end,
                    })
                    .collect(),
                relations: s
                    .relations
                    .iter()
                    .filter_map(|r| {
                        Some(RelationRecord {
                            relation_type: r.relation_type.clone(),
                            head: index_of(&r.head)?,
                            tail: index_of(&r.tail)?,
                        })
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

/// All spans of width `1..=min(max_width, n)`, ordered by start then width.
pub fn enumerate_spans(n: usize, max_width: usize) -> Vec<SpanCandidate> {
    let mut out = Vec::new();
    for start in 0..n {
        for width in 1..=max_width.min(n - start) {
            out.push(SpanCandidate::new(start, start + width));
        }
    }
    out
}

/// Type vocabulary with stable contiguous indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeVocabulary {
    names: Vec<String>,
}

impl TypeVocabulary {
    pub fn new(names: Vec<String>) -> Self {
        TypeVocabulary { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn to_lines(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }

    pub fn from_lines(text: &str) -> Self {
        TypeVocabulary {
            names: text.lines().map(str::to_string).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub labels: LabelVocabulary,
    /// `NoneEntity` at index 0, then observed types in sorted order.
    pub entities: TypeVocabulary,
    /// Observed relation types in sorted order; there is no "none" class.
    pub relations: TypeVocabulary,
}

pub const LABEL_VOCAB_FILE: &str = "labels.vocab";
pub const ENTITY_VOCAB_FILE: &str = "entity_types.vocab";
pub const RELATION_VOCAB_FILE: &str = "relation_types.vocab";

impl Vocabularies {
    pub fn none_entity(&self) -> usize {
        0
    }

    /// Writes the three vocabularies into `dir`, one entry per line.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::write(dir.join(LABEL_VOCAB_FILE), self.labels.to_lines())?;
        std::fs::write(dir.join(ENTITY_VOCAB_FILE), self.entities.to_lines())?;
        std::fs::write(dir.join(RELATION_VOCAB_FILE), self.relations.to_lines())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let entities = TypeVocabulary::from_lines(&std::fs::read_to_string(dir.join(ENTITY_VOCAB_FILE))?);
        if entities.names().first().map(String::as_str) != Some(NONE_ENTITY) {
            return Err(Error::Parse {
                what: "entity type vocabulary".into(),
                message: format!("first line must be `{NONE_ENTITY}`"),
            });
        }
        Ok(Vocabularies {
            labels: LabelVocabulary::from_lines(&std::fs::read_to_string(dir.join(LABEL_VOCAB_FILE))?)?,
            entities,
            relations: TypeVocabulary::from_lines(&std::fs::read_to_string(dir.join(RELATION_VOCAB_FILE))?),
        })
    }

    /// Fails with [`Error::VocabularyMismatch`] unless `other` assigns the
    /// same index to every entry.
    pub fn ensure_compatible(&self, other: &Vocabularies) -> Result<()> {
        let pairs: [(&str, &[String], &[String]); 3] = [
            ("label", self.labels.labels(), other.labels.labels()),
            ("entity type", self.entities.names(), other.entities.names()),
            ("relation type", self.relations.names(), other.relations.names()),
        ];
        for (kind, a, b) in pairs {
            if a != b {
                let at = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
                return Err(Error::VocabularyMismatch(format!(
                    "{kind} vocabularies differ at index {at} ({} vs {} entries)",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn build_vocabularies(corpus: &[SentenceExample]) -> Result<Vocabularies> {
    if corpus.is_empty() {
        return Err(Error::Config(
            "cannot build vocabularies from an empty corpus".into(),
        ));
    }
    let mut labels = BTreeSet::new();
    let mut entity_types = BTreeSet::new();
    let mut relation_types = BTreeSet::new();
    for s in corpus {
        for l in s.tags()?.into_labels() {
            labels.insert(l);
        }
        for e in &s.entities {
            check_type_name(&e.entity_type)?;
            entity_types.insert(e.entity_type.clone());
        }
        for r in &s.relations {
            check_type_name(&r.relation_type)?;
            relation_types.insert(r.relation_type.clone());
        }
    }
    let mut entities = vec![NONE_ENTITY.to_string()];
    entities.extend(entity_types);
    Ok(Vocabularies {
        labels: LabelVocabulary::from_labels(labels.iter().map(String::as_str)),
        entities: TypeVocabulary::new(entities),
        relations: TypeVocabulary::new(relation_types.into_iter().collect()),
    })
}

/// Negative instances drawn for one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSample {
    pub spans: Vec<SpanCandidate>,
    pub pairs: Vec<(EntityMention, EntityMention)>,
}

/// Ordered pairs of distinct gold entities that no gold relation connects.
pub fn negative_pair_pool(example: &SentenceExample) -> Vec<(EntityMention, EntityMention)> {
    let related: HashSet<(SpanCandidate, SpanCandidate)> = example
        .relations
        .iter()
        .map(|r| ((&r.head).into(), (&r.tail).into()))
        .collect();
    let mut pool = Vec::new();
    for a in &example.entities {
        for b in &example.entities {
            if a.same_span(b) || related.contains(&(a.into(), b.into())) {
                continue;
            }
            pool.push((a.clone(), b.clone()));
        }
    }
    pool
}

/// Draws up to `spans_per_sentence` non-gold spans and `pairs_per_sentence`
/// unrelated gold-entity pairs, uniformly without replacement.
pub fn sample_negatives(
    example: &SentenceExample,
    spans_per_sentence: usize,
    pairs_per_sentence: usize,
    max_width: usize,
    seed: u64,
) -> NegativeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gold: HashSet<SpanCandidate> = example.entities.iter().map(Into::into).collect();
    let span_pool: Vec<SpanCandidate> = enumerate_spans(example.len(), max_width)
        .into_iter()
        .filter(|s| !gold.contains(s))
        .collect();
    let pair_pool = negative_pair_pool(example);
    NegativeSample {
        spans: draw(&span_pool, spans_per_sentence, &mut rng),
        pairs: draw(&pair_pool, pairs_per_sentence, &mut rng),
    }
}

fn draw<T: Clone, R: Rng>(pool: &[T], count: usize, rng: &mut R) -> Vec<T> {
    let amount = count.min(pool.len());
    let mut picked = sample(rng, pool.len(), amount).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].clone()).collect()
}

/// Supervision for one sentence in the form the model consumes.
#[derive(Clone, Debug)]
pub struct TrainingInstance {
    pub tokens: Vec<String>,
    pub gold_labels: Vec<usize>,
    pub spans: Vec<SpanCandidate>,
    /// Entity-vocabulary index per span; negatives are `NoneEntity`.
    pub span_targets: Vec<usize>,
    pub pairs: Vec<(SpanCandidate, SpanCandidate)>,
    /// Multi-hot relation targets, one row per pair.
    pub pair_targets: Matrix,
}

impl TrainingInstance {
    /// Gold positives plus the supplied negatives.
    pub fn build(
        example: &SentenceExample,
        vocab: &Vocabularies,
        negatives: &NegativeSample,
    ) -> Result<Self> {
        let gold_labels = vocab.labels.encode(&example.tags()?)?;
        let mut spans = Vec::new();
        let mut span_targets = Vec::new();
        for e in &example.entities {
            let t = vocab
                .entities
                .index_of(&e.entity_type)
                .ok_or_else(|| Error::UnknownLabel {
                    kind: "entity",
                    label: e.entity_type.clone(),
                })?;
            spans.push(SpanCandidate::from(e));
            span_targets.push(t);
        }
        for s in &negatives.spans {
            spans.push(*s);
            span_targets.push(vocab.none_entity());
        }

        let r = vocab.relations.len();
        let mut pairs: Vec<(SpanCandidate, SpanCandidate)> = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rel in &example.relations {
            let key = ((&rel.head).into(), (&rel.tail).into());
            let t = vocab
                .relations
                .index_of(&rel.relation_type)
                .ok_or_else(|| Error::UnknownLabel {
                    kind: "relation",
                    label: rel.relation_type.clone(),
                })?;
            let row = match pairs.iter().position(|p| *p == key) {
                Some(i) => i,
                None => {
                    pairs.push(key);
                    rows.push(vec![0.0; r]);
                    pairs.len() - 1
                }
            };
            rows[row][t] = 1.0;
        }
        for (a, b) in &negatives.pairs {
            let key = (a.into(), b.into());
            if !pairs.contains(&key) {
                pairs.push(key);
                rows.push(vec![0.0; r]);
            }
        }
        let pair_targets = Matrix::new(rows.len(), r, rows.concat());
        Ok(TrainingInstance {
            tokens: example.tokens.clone(),
            gold_labels,
            spans,
            span_targets,
            pairs,
            pair_targets,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A group of sentences trained together; shorter sentences are padded.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub instances: Vec<TrainingInstance>,
    /// Per sentence, `true` for real tokens and `false` for padding.
    pub masks: Vec<Vec<bool>>,
}

impl TrainingBatch {
    pub fn new(instances: Vec<TrainingInstance>) -> Self {
        let width = instances.iter().map(TrainingInstance::len).max().unwrap_or(0);
        let masks = instances
            .iter()
            .map(|i| (0..width).map(|t| t < i.len()).collect())
            .collect();
        TrainingBatch { instances, masks }
    }

    pub fn padded_len(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }
}

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub sentences: usize,
    /// Sentences built from templates with a nested entity pair.
    pub overlap_sentences: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            sentences: 20,
            overlap_sentences: 4,
            seed: 7,
        }
    }
}

const PEOPLE: &[&str] = &["Jack", "Mary", "John Smith", "Anna Lee", "Peter", "Laura Chen"];
const ORGS: &[&str] = &["Harvard University", "Acme Corp", "Red Cross", "Globex"];
const PLACES: &[&str] = &["Boston", "New York", "Paris", "San Diego"];
const DRUGS: &[&str] = &["Codeine", "Aspirin", "Lithium", "Warfarin"];

enum Piece {
    Word(&'static str),
    Slot(&'static str, &'static [&'static str]),
}

use Piece::{Slot, Word};

struct Template {
    pieces: &'static [Piece],
    /// (relation, head, tail) as indices into the slots followed by the outer entity
    relations: &'static [(&'static str, usize, usize)],
    /// (entity type, first slot, trailing words covered) for an outer entity
    /// starting at a slot and extending over following words.
    outer: Option<(&'static str, usize, usize)>,
}

const PLAIN: &[Template] = &[
    Template {
        pieces: &[Slot("PER", PEOPLE), Word("works"), Word("for"), Slot("ORG", ORGS), Word(".")],
        relations: &[("Work_For", 0, 1)],
        outer: None,
    },
    Template {
        pieces: &[Slot("PER", PEOPLE), Word("lives"), Word("in"), Slot("LOC", PLACES), Word(".")],
        relations: &[("Live_In", 0, 1)],
        outer: None,
    },
    Template {
        pieces: &[Slot("ORG", ORGS), Word("is"), Word("based"), Word("in"), Slot("LOC", PLACES), Word(".")],
        relations: &[("OrgBased_In", 0, 1)],
        outer: None,
    },
    Template {
        pieces: &[Slot("PER", PEOPLE), Word("met"), Slot("PER", PEOPLE), Word("yesterday"), Word(".")],
        relations: &[],
        outer: None,
    },
    Template {
        pieces: &[
            Slot("PER", PEOPLE),
            Word(","),
            Word("who"),
            Word("works"),
            Word("for"),
            Slot("ORG", ORGS),
            Word(","),
            Word("lives"),
            Word("in"),
            Slot("LOC", PLACES),
            Word("."),
        ],
        relations: &[("Work_For", 0, 1), ("Live_In", 0, 2)],
        outer: None,
    },
];

const OVERLAPPING: &[Template] = &[
    Template {
        pieces: &[Slot("DRUG", DRUGS), Word("intoxication"), Word("was"), Word("reported"), Word(".")],
        relations: &[("Adverse_Effect", 1, 0)],
        outer: Some(("AE", 0, 1)),
    },
    Template {
        pieces: &[Word("severe"), Slot("DRUG", DRUGS), Word("toxicity"), Word("followed"), Word(".")],
        relations: &[("Adverse_Effect", 1, 0)],
        outer: Some(("AE", 0, 1)),
    },
    Template {
        pieces: &[Word("she"), Word("developed"), Slot("DRUG", DRUGS), Word("induced"), Word("hepatitis"), Word(".")],
        relations: &[("Adverse_Effect", 1, 0)],
        outer: Some(("AE", 0, 2)),
    },
];

fn instantiate(t: &Template, rng: &mut ChaCha8Rng, id: String) -> SentenceExample {
    let mut tokens: Vec<String> = Vec::new();
    let mut slots: Vec<EntityMention> = Vec::new();
    let mut slot_ends: Vec<usize> = Vec::new();
    let mut used: Vec<&str> = Vec::new();
    for p in t.pieces {
        match p {
            Word(w) => tokens.push(w.to_string()),
            Slot(ty, pool) => {
                let mut pick = pool[rng.gen_range(0..pool.len())];
                while used.contains(&pick) {
                    pick = pool[rng.gen_range(0..pool.len())];
                }
                used.push(pick);
                let start = tokens.len();
                tokens.extend(pick.split(' ').map(String::from));
                slots.push(EntityMention::new(*ty, start, tokens.len()));
                slot_ends.push(tokens.len());
            }
        }
    }
    // entity handles: slots first, then the optional outer entity
    let mut handles = slots.clone();
    if let Some((ty, slot, extra)) = t.outer {
        let inner = &slots[slot];
        handles.push(EntityMention::new(ty, inner.start, slot_ends[slot] + extra));
    }
    let relations = t
        .relations
        .iter()
        .map(|&(ty, h, tl)| RelationTuple {
            head: handles[h].clone(),
            tail: handles[tl].clone(),
            relation_type: ty.to_string(),
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    SentenceExample {
        id,
        tokens,
        entities: handles.into_iter().collect::<BTreeSet<_>>().into_iter().collect(),
        relations,
    }
}

/// Templated sentences with person/organization/location relations and
/// drug/adverse-effect sentences whose entities nest two-fold.
pub fn synthetic_corpus(config: &SyntheticConfig) -> Vec<SentenceExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.sentences)
        .map(|i| {
            let template = if i < config.overlap_sentences {
                &OVERLAPPING[i % OVERLAPPING.len()]
            } else {
                &PLAIN[(i - config.overlap_sentences) % PLAIN.len()]
            };
            instantiate(template, &mut rng, format!("synthetic-{i}"))
        })
        .collect()
}
