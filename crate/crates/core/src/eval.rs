//! NER, RE and RE+ scoring with micro/macro aggregation and length breakdowns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Matching;
use crate::data::{RelationTuple, SentenceExample};
use crate::tagging::EntityMention;
use crate::{Error, Result};

/// Predictions share the corpus record layout: id, tokens, entities, relations.
pub type PredictionRecord = SentenceExample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn merge(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn scores(&self) -> Scores {
        prf(self.tp, self.fp, self.fn_)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1, each 0 when its denominator is 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> Scores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores { precision, recall, f1 }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub counts: Counts,
    pub micro: Scores,
    /// Unweighted mean over the types that occur in gold.
    #[serde(rename = "macro")]
    pub macro_: Scores,
    pub per_type: BTreeMap<String, Counts>,
    /// Predicted types that never occur in gold.
    pub spurious_types: BTreeMap<String, Counts>,
}

impl TaskMetrics {
    fn from_per_type(all: BTreeMap<String, Counts>, gold_types: &BTreeSet<String>) -> Self {
        let mut counts = Counts::default();
        for c in all.values() {
            counts.merge(*c);
        }
        let (per_type, spurious_types): (BTreeMap<_, _>, BTreeMap<_, _>) =
            all.into_iter().partition(|(t, _)| gold_types.contains(t));
        let macro_ = if per_type.is_empty() {
            Scores::default()
        } else {
            let k = per_type.len() as f64;
            let mut m = Scores::default();
            for s in per_type.values().map(Counts::scores) {
                m.precision += s.precision / k;
                m.recall += s.recall / k;
                m.f1 += s.f1 / k;
            }
            m
        };
        TaskMetrics {
            counts,
            micro: counts.scores(),
            macro_,
            per_type,
            spurious_types,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sentences: usize,
    pub ner: TaskMetrics,
    pub re: TaskMetrics,
    pub re_plus: TaskMetrics,
}

/// Pairs every gold sentence with the prediction of the same id.
pub fn align<'a>(
    gold: &'a [SentenceExample],
    pred: &'a [PredictionRecord],
) -> Result<Vec<(&'a SentenceExample, &'a PredictionRecord)>> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::with_capacity(pred.len());
    for p in pred {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::SentenceMismatch(format!("duplicate prediction id {:?}", p.id)));
        }
    }
    if gold.len() != pred.len() {
        return Err(Error::SentenceMismatch(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    gold.iter()
        .map(|g| {
            by_id
                .get(g.id.as_str())
                .map(|p| (g, *p))
                .ok_or_else(|| Error::SentenceMismatch(format!("no prediction for sentence {:?}", g.id)))
        })
        .collect()
}

type Pairs<'a> = [(&'a SentenceExample, &'a PredictionRecord)];

fn entity_counts<'a>(
    pairs: &Pairs<'a>,
    keep: impl Fn(&EntityMention) -> bool,
) -> (BTreeMap<String, Counts>, BTreeSet<String>) {
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    let mut gold_types = BTreeSet::new();
    for (g, p) in pairs {
        let gold: BTreeSet<&EntityMention> = g.entities.iter().filter(|e| keep(e)).collect();
        let pred: BTreeSet<&EntityMention> = p.entities.iter().filter(|e| keep(e)).collect();
        for e in &gold {
            gold_types.insert(e.entity_type.clone());
            let c = per_type.entry(e.entity_type.clone()).or_default();
            if pred.contains(e) {
                c.tp += 1;
            } else {
                c.fn_ += 1;
            }
        }
        for e in pred.difference(&gold) {
            per_type.entry(e.entity_type.clone()).or_default().fp += 1;
        }
    }
    (per_type, gold_types)
}

/// NER: a mention is correct when type, start and end all match.
pub fn ner_metrics(pairs: &Pairs<'_>) -> TaskMetrics {
    let (per_type, gold_types) = entity_counts(pairs, |_| true);
    TaskMetrics::from_per_type(per_type, &gold_types)
}

/// RE: relation type and both entity boundaries must match. With
/// `strict_types` (RE+) the two entity types must match as well.
///
/// Without entity types, distinct gold tuples can share a key; each key is
/// matched as a multiset, so RE credit is never lower than RE+ credit.
pub fn re_metrics(pairs: &Pairs<'_>, strict_types: bool) -> TaskMetrics {
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    let mut gold_types = BTreeSet::new();
    for (g, p) in pairs {
        let key = |r: &RelationTuple| {
            let (ht, tt) = if strict_types {
                (r.head.entity_type.clone(), r.tail.entity_type.clone())
            } else {
                (String::new(), String::new())
            };
            (r.relation_type.clone(), r.head.start, r.head.end, r.tail.start, r.tail.end, ht, tt)
        };
        let gold: BTreeSet<_> = g.relations.iter().collect();
        let pred: BTreeSet<_> = p.relations.iter().collect();
        let mut gold_keys: BTreeMap<_, usize> = BTreeMap::new();
        for r in &gold {
            gold_types.insert(r.relation_type.clone());
            *gold_keys.entry(key(r)).or_default() += 1;
        }
        let mut pred_keys: BTreeMap<_, usize> = BTreeMap::new();
        for r in &pred {
            *pred_keys.entry(key(r)).or_default() += 1;
        }
        let keys: BTreeSet<_> = gold_keys.keys().chain(pred_keys.keys()).cloned().collect();
        for k in keys {
            let gc = gold_keys.get(&k).copied().unwrap_or(0);
            let pc = pred_keys.get(&k).copied().unwrap_or(0);
            let tp = gc.min(pc);
            let c = per_type.entry(k.0.clone()).or_default();
            c.tp += tp;
            c.fn_ += gc - tp;
            c.fp += pc - tp;
        }
    }
    TaskMetrics::from_per_type(per_type, &gold_types)
}

/// All three tasks over aligned gold and predicted corpora.
pub fn evaluate(gold: &[SentenceExample], pred: &[PredictionRecord], matching: Matching) -> Result<MetricsReport> {
    if matching == Matching::Head {
        return Err(Error::Unsupported(
            "head-word matching is not implemented; use eval.matching = exact".into(),
        ));
    }
    let pairs = align(gold, pred)?;
    Ok(report(&pairs))
}

fn report(pairs: &Pairs<'_>) -> MetricsReport {
    MetricsReport {
        sentences: pairs.len(),
        ner: ner_metrics(pairs),
        re: re_metrics(pairs, false),
        re_plus: re_metrics(pairs, true),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityLengthBucket {
    pub label: String,
    pub gold_entities: usize,
    pub metrics: TaskMetrics,
}

pub const ENTITY_LENGTH_EDGES: [(usize, usize); 5] = [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10)];

fn entity_bucket(width: usize) -> usize {
    ENTITY_LENGTH_EDGES
        .iter()
        .position(|&(lo, hi)| (lo..=hi).contains(&width))
        .unwrap_or(ENTITY_LENGTH_EDGES.len())
}

/// NER per entity-width bucket. Both gold and predicted mentions are
/// restricted to the bucket before matching. Mentions wider than 10 land in
/// an extra `>10` bucket, reported only when populated.
pub fn breakdown_by_entity_length(gold: &[SentenceExample], pred: &[PredictionRecord]) -> Result<Vec<EntityLengthBucket>> {
    let pairs = align(gold, pred)?;
    let mut out = Vec::new();
    for b in 0..=ENTITY_LENGTH_EDGES.len() {
        let keep = |e: &EntityMention| entity_bucket(e.width()) == b;
        let gold_entities = pairs
            .iter()
            .map(|(g, _)| g.entities.iter().filter(|e| keep(e)).collect::<BTreeSet<_>>().len())
            .sum();
        let (per_type, gold_types) = entity_counts(&pairs, keep);
        let label = match ENTITY_LENGTH_EDGES.get(b) {
            Some((lo, hi)) => format!("{lo}-{hi}"),
            None if per_type.is_empty() => continue,
            None => ">10".to_string(),
        };
        out.push(EntityLengthBucket {
            label,
            gold_entities,
            metrics: TaskMetrics::from_per_type(per_type, &gold_types),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceLengthBucket {
    pub label: String,
    pub report: MetricsReport,
}

pub const SENTENCE_LENGTH_BUCKETS: [&str; 4] = ["0-19", "20-34", "35-49", ">=50"];

pub fn sentence_bucket(len: usize) -> usize {
    match len {
        0..=19 => 0,
        20..=34 => 1,
        35..=49 => 2,
        _ => 3,
    }
}

/// Full metrics computed independently per sentence-length bucket.
pub fn breakdown_by_sentence_length(
    gold: &[SentenceExample],
    pred: &[PredictionRecord],
) -> Result<Vec<SentenceLengthBucket>> {
    let pairs = align(gold, pred)?;
    Ok(SENTENCE_LENGTH_BUCKETS
        .iter()
        .enumerate()
        .map(|(b, label)| {
            let subset: Vec<_> = pairs.iter().copied().filter(|(g, _)| sentence_bucket(g.len()) == b).collect();
            SentenceLengthBucket {
                label: label.to_string(),
                report: report(&subset),
            }
        })
        .collect())
}

fn table_row(out: &mut String, name: &str, m: &TaskMetrics) {
    let _ = writeln!(
        out,
        "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6} {:>6}",
        name,
        m.micro.precision,
        m.micro.recall,
        m.micro.f1,
        m.macro_.precision,
        m.macro_.recall,
        m.macro_.f1,
        m.counts.tp,
        m.counts.fp,
        m.counts.fn_
    );
}

fn table_header(out: &mut String, first: &str) {
    let _ = writeln!(
        out,
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6}",
        first, "micro-P", "micro-R", "micro-F1", "macro-P", "macro-R", "macro-F1", "TP", "FP", "FN"
    );
}

/// Aligned plain-text rendering of a report.
pub fn render_report(r: &MetricsReport) -> String {
    let mut out = String::new();
    table_header(&mut out, "task");
    table_row(&mut out, "NER", &r.ner);
    table_row(&mut out, "RE", &r.re);
    table_row(&mut out, "RE+", &r.re_plus);
    out
}

pub fn render_entity_length(buckets: &[EntityLengthBucket]) -> String {
    let mut out = String::new();
    table_header(&mut out, "width");
    for b in buckets {
        table_row(&mut out, &b.label, &b.metrics);
    }
    out
}

pub fn render_sentence_length(buckets: &[SentenceLengthBucket]) -> String {
    let mut out = String::new();
    for b in buckets {
        let _ = writeln!(out, "sentence length {} ({} sentences)", b.label, b.report.sentences);
        out.push_str(&render_report(&b.report));
    }
    out
}
