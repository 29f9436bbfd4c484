//! Extended BIO tagging for entity sets with two-fold overlaps.
//!
//! A plain BIO sequence cannot describe two entities sharing a token. The
//! extended scheme keeps the *preceding* entity of an overlapping pair in the
//! first channel and appends the other entity's BIO labels after a `/`, so a
//! token covered by both carries a composite label such as `B-AE/B-DRUG`.
//!
//! ```
//! use stsn::tagging::{encode_bio, decode_bio, DecodeMode, EntityMention};
//!
//! let entities = [EntityMention::new("AE", 0, 2), EntityMention::new("DRUG", 0, 1)];
//! let tags = encode_bio(5, &entities).unwrap();
//! assert_eq!(tags.labels(), ["B-AE/B-DRUG", "I-AE", "O", "O", "O"]);
//! let back = decode_bio(&tags, DecodeMode::Strict).unwrap();
//! assert_eq!(back.len(), 2);
//! ```

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator between the two channels of a composite label.
pub const CHANNEL_SEPARATOR: char = '/';
pub const OUTSIDE: &str = "O";

/// A typed half-open token span `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityMention {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

impl EntityMention {
    pub fn new(entity_type: impl Into<String>, start: usize, end: usize) -> Self {
        EntityMention {
            entity_type: entity_type.into(),
            start,
            end,
        }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, other: &EntityMention) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn same_span(&self, other: &EntityMention) -> bool {
        self.start == other.start && self.end == other.end
    }
}

impl Ord for EntityMention {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.start, self.end, &self.entity_type).cmp(&(other.start, other.end, &other.entity_type))
    }
}

impl PartialOrd for EntityMention {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EntityMention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{},{})", self.entity_type, self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("entities {a} and {b} do not overlap")]
    NotOverlapping { a: EntityMention, b: EntityMention },
    #[error("token {token} is part of an overlap cluster of {count} entities; at most two are supported")]
    OverlapArity { token: usize, count: usize },
    #[error("entities {outer} and {inner} overlap without nesting; the second channel must lie inside the preceding entity")]
    CrossingOverlap {
        outer: EntityMention,
        inner: EntityMention,
    },
    #[error("entity {entity} is out of range for a sentence of {len} tokens")]
    Bounds { entity: EntityMention, len: usize },
    #[error("invalid tag sequence: {0}")]
    InvalidTransition(Violation),
    #[error("entity type `{0}` is not allowed in labels")]
    InvalidTypeName(String),
}

/// Per-token composite labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TagSequence(Vec<String>);

impl TagSequence {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        TagSequence(labels.into_iter().map(Into::into).collect())
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_labels(self) -> Vec<String> {
        self.0
    }
}

/// Returns the preceding entity of an overlapping pair: the one starting
/// first, or on a shared start the longer one. Identical extents keep `a`.
pub fn select_preceding<'a>(
    a: &'a EntityMention,
    b: &'a EntityMention,
) -> Result<&'a EntityMention, CodecError> {
    if !a.overlaps(b) {
        return Err(CodecError::NotOverlapping {
            a: a.clone(),
            b: b.clone(),
        });
    }
    Ok(match a.start.cmp(&b.start) {
        Ordering::Less => a,
        Ordering::Greater => b,
        Ordering::Equal if b.width() > a.width() => b,
        Ordering::Equal => a,
    })
}

/// Rejects type names that would collide with the label syntax.
pub fn check_type_name(name: &str) -> Result<(), CodecError> {
    if name.is_empty() || name.contains(CHANNEL_SEPARATOR) || name.chars().any(char::is_whitespace)
    {
        return Err(CodecError::InvalidTypeName(name.to_string()));
    }
    Ok(())
}

fn bio_label(entity: &EntityMention, token: usize) -> String {
    if token == entity.start {
        format!("B-{}", entity.entity_type)
    } else {
        format!("I-{}", entity.entity_type)
    }
}

/// Encodes `entities` over `n` tokens with the extended BIO scheme.
///
/// Duplicates are collapsed. Every overlap cluster must contain at most two
/// entities and the non-preceding member must nest inside the preceding one.
pub fn encode_bio(n: usize, entities: &[EntityMention]) -> Result<TagSequence, CodecError> {
    let unique: BTreeSet<&EntityMention> = entities.iter().collect();
    let entities: Vec<&EntityMention> = unique.into_iter().collect();
    for e in &entities {
        check_type_name(&e.entity_type)?;
        if e.start >= e.end || e.end > n {
            return Err(CodecError::Bounds {
                entity: (*e).clone(),
                len: n,
            });
        }
    }

    let mut cover = vec![Vec::new(); n];
    for (i, e) in entities.iter().enumerate() {
        for slot in &mut cover[e.start..e.end] {
            slot.push(i);
        }
    }

    // Overlap partner of each entity; a second partner means a cluster of three.
    let mut partner: Vec<Option<usize>> = vec![None; entities.len()];
    for (token, covering) in cover.iter().enumerate() {
        if covering.len() > 2 {
            return Err(CodecError::OverlapArity {
                token,
                count: covering.len(),
            });
        }
        if let [a, b] = covering[..] {
            for (x, y) in [(a, b), (b, a)] {
                match partner[x] {
                    None => partner[x] = Some(y),
                    Some(p) if p == y => {}
                    Some(_) => {
                        return Err(CodecError::OverlapArity { token, count: 3 });
                    }
                }
            }
        }
    }

    let mut first = vec![OUTSIDE.to_string(); n];
    let mut second: Vec<Option<String>> = vec![None; n];
    for (i, e) in entities.iter().enumerate() {
        let secondary = match partner[i] {
            None => false,
            Some(p) => {
                let other = entities[p];
                let preceding = if i < p {
                    select_preceding(e, other)?
                } else {
                    select_preceding(other, e)?
                };
                if !std::ptr::eq(preceding, *e) {
                    if !preceding.contains(e) {
                        return Err(CodecError::CrossingOverlap {
                            outer: preceding.clone(),
                            inner: (*e).clone(),
                        });
                    }
                    true
                } else {
                    false
                }
            }
        };
        for t in e.start..e.end {
            let label = bio_label(e, t);
            if secondary {
                second[t] = Some(label);
            } else {
                first[t] = label;
            }
        }
    }

    Ok(TagSequence(
        first
            .into_iter()
            .zip(second)
            .map(|(a, b)| match b {
                Some(b) => format!("{a}{CHANNEL_SEPARATOR}{b}"),
                None => a,
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Orphan `I-` labels are an error.
    #[default]
    Strict,
    /// Orphan `I-` labels open a new entity.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// A label that is not `O`, `B-<type>` or `I-<type>`, or has more than two channels.
    Malformed(String),
    /// `I-<type>` not preceded by `B-<type>` or `I-<type>` in the same channel.
    OrphanInside,
    /// A second-channel entity that does not lie inside a single first-channel entity.
    SecondChannelOutside { start: usize, end: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub channel: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::Malformed(label) => {
                write!(f, "malformed label `{label}` at index {}", self.index)
            }
            ViolationKind::OrphanInside => write!(
                f,
                "orphan I- label at index {} (channel {})",
                self.index, self.channel
            ),
            ViolationKind::SecondChannelOutside { start, end } => write!(
                f,
                "second-channel entity [{start},{end}) is not inside a first-channel entity"
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChannelTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_channel(label: &str) -> Option<ChannelTag<'_>> {
    if label == OUTSIDE {
        return Some(ChannelTag::Outside);
    }
    let (prefix, ty) = label.split_once('-')?;
    if ty.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(ChannelTag::Begin(ty)),
        "I" => Some(ChannelTag::Inside(ty)),
        _ => None,
    }
}

/// Splits composite labels into two channel sequences.
fn split_channels(tags: &TagSequence) -> Result<[Vec<ChannelTag<'_>>; 2], Violation> {
    let mut channels = [Vec::with_capacity(tags.len()), Vec::with_capacity(tags.len())];
    for (index, label) in tags.labels().iter().enumerate() {
        let malformed = || Violation {
            index,
            channel: 0,
            kind: ViolationKind::Malformed(label.clone()),
        };
        let mut parts = label.split(CHANNEL_SEPARATOR);
        let a = parts.next().and_then(parse_channel).ok_or_else(malformed)?;
        let b = match parts.next() {
            Some(p) => parse_channel(p).ok_or_else(malformed)?,
            None => ChannelTag::Outside,
        };
        if parts.next().is_some() {
            return Err(malformed());
        }
        channels[0].push(a);
        channels[1].push(b);
    }
    Ok(channels)
}

/// Standard BIO decoding of one channel. Returns entities and orphan indices.
fn decode_channel(channel: &[ChannelTag<'_>], lenient: bool) -> (Vec<EntityMention>, Vec<usize>) {
    let mut out = Vec::new();
    let mut orphans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, tag) in channel.iter().enumerate() {
        match *tag {
            ChannelTag::Outside => {
                if let Some((ty, start)) = open.take() {
                    out.push(EntityMention::new(ty, start, i));
                }
            }
            ChannelTag::Begin(ty) => {
                if let Some((prev, start)) = open.take() {
                    out.push(EntityMention::new(prev, start, i));
                }
                open = Some((ty, i));
            }
            ChannelTag::Inside(ty) => match open {
                Some((prev, _)) if prev == ty => {}
                _ => {
                    orphans.push(i);
                    if let Some((prev, start)) = open.take() {
                        out.push(EntityMention::new(prev, start, i));
                    }
                    if lenient {
                        open = Some((ty, i));
                    }
                }
            },
        }
    }
    if let Some((ty, start)) = open {
        out.push(EntityMention::new(ty, start, channel.len()));
    }
    (out, orphans)
}

/// Lists every rule violation in `tags`; empty means well formed.
pub fn validate_tags(tags: &TagSequence) -> Vec<Violation> {
    let channels = match split_channels(tags) {
        Ok(c) => c,
        Err(v) => {
            // Report every malformed label, not only the first.
            return tags
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, l)| split_channels(&TagSequence::new([l.as_str()])).is_err())
                .map(|(index, l)| Violation {
                    index,
                    channel: v.channel,
                    kind: ViolationKind::Malformed(l.clone()),
                })
                .collect();
        }
    };
    let mut violations = Vec::new();
    let (first, orphans1) = decode_channel(&channels[0], true);
    let (second, orphans2) = decode_channel(&channels[1], true);
    for (channel, orphans) in [(0, orphans1), (1, orphans2)] {
        violations.extend(orphans.into_iter().map(|index| Violation {
            index,
            channel,
            kind: ViolationKind::OrphanInside,
        }));
    }
    for e in second {
        if !first.iter().any(|outer| outer.contains(&e)) {
            violations.push(Violation {
                index: e.start,
                channel: 1,
                kind: ViolationKind::SecondChannelOutside {
                    start: e.start,
                    end: e.end,
                },
            });
        }
    }
    violations.sort_by_key(|v| (v.index, v.channel));
    violations
}

/// Decodes an extended BIO sequence into its entity set (sorted, deduplicated).
pub fn decode_bio(tags: &TagSequence, mode: DecodeMode) -> Result<Vec<EntityMention>, CodecError> {
    let channels = split_channels(tags).map_err(CodecError::InvalidTransition)?;
    let lenient = mode == DecodeMode::Lenient;
    let mut entities = BTreeSet::new();
    for (channel, tags) in channels.iter().enumerate() {
        let (found, orphans) = decode_channel(tags, lenient);
        if !lenient {
            if let Some(&index) = orphans.first() {
                return Err(CodecError::InvalidTransition(Violation {
                    index,
                    channel,
                    kind: ViolationKind::OrphanInside,
                }));
            }
        }
        entities.extend(found);
    }
    Ok(entities.into_iter().collect())
}

/// Ordered set of composite labels; `O` is always index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    labels: Vec<String>,
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        LabelVocabulary {
            labels: vec![OUTSIDE.to_string()],
        }
    }
}

impl LabelVocabulary {
    /// `O` first, then the remaining labels in sorted order.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let rest: BTreeSet<&str> = labels.into_iter().filter(|&l| l != OUTSIDE).collect();
        let mut out = vec![OUTSIDE.to_string()];
        out.extend(rest.into_iter().map(String::from));
        LabelVocabulary { labels: out }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn encode(&self, tags: &TagSequence) -> crate::Result<Vec<usize>> {
        tags.labels()
            .iter()
            .map(|l| {
                self.index_of(l).ok_or_else(|| crate::Error::UnknownLabel {
                    kind: "BIO",
                    label: l.clone(),
                })
            })
            .collect()
    }

    /// One label per line, index = line number.
    pub fn to_lines(&self) -> String {
        let mut s = self.labels.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> crate::Result<Self> {
        let labels: Vec<String> = text.lines().map(str::to_string).collect();
        if labels.first().map(String::as_str) != Some(OUTSIDE) {
            return Err(crate::Error::Parse {
                what: "label vocabulary".into(),
                message: "first line must be `O`".into(),
            });
        }
        Ok(LabelVocabulary { labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(ty: &str, s: usize, t: usize) -> EntityMention {
        EntityMention::new(ty, s, t)
    }

    #[test]
    fn preceding_prefers_longer_on_shared_head() {
        let a = e("AE", 0, 2);
        let b = e("DRUG", 0, 1);
        assert_eq!(select_preceding(&a, &b).unwrap(), &a);
        assert_eq!(select_preceding(&b, &a).unwrap(), &a);
    }

    #[test]
    fn preceding_identical_returns_first() {
        let a = e("X", 1, 3);
        let b = e("X", 1, 3);
        assert!(std::ptr::eq(select_preceding(&a, &b).unwrap(), &a));
    }

    #[test]
    fn preceding_prefers_earlier_start() {
        let a = e("X", 2, 4);
        let b = e("Y", 3, 6);
        assert_eq!(select_preceding(&a, &b).unwrap(), &a);
        assert_eq!(select_preceding(&b, &a).unwrap(), &a);
    }

    #[test]
    fn preceding_rejects_disjoint() {
        assert!(matches!(
            select_preceding(&e("X", 0, 1), &e("Y", 1, 2)),
            Err(CodecError::NotOverlapping { .. })
        ));
    }

    #[test]
    fn encode_overlap_example() {
        let tags = encode_bio(5, &[e("AE", 0, 2), e("DRUG", 0, 1)]).unwrap();
        assert_eq!(tags.labels(), ["B-AE/B-DRUG", "I-AE", "O", "O", "O"]);
    }

    #[test]
    fn encode_empty() {
        assert_eq!(encode_bio(3, &[]).unwrap().labels(), ["O", "O", "O"]);
    }

    /// Plain single-channel BIO, written independently of `encode_bio`.
    fn plain_bio(n: usize, entities: &[EntityMention]) -> Vec<String> {
        let mut out = vec!["O".to_string(); n];
        for ent in entities {
            out[ent.start] = format!("B-{}", ent.entity_type);
            for slot in &mut out[ent.start + 1..ent.end] {
                *slot = format!("I-{}", ent.entity_type);
            }
        }
        out
    }

    #[test]
    fn encode_plain_matches_single_channel_encoder() {
        let ents = [e("PER", 0, 1), e("ORG", 3, 5)];
        let tags = encode_bio(6, &ents).unwrap();
        assert_eq!(tags.labels(), ["B-PER", "O", "O", "B-ORG", "I-ORG", "O"]);
        assert_eq!(tags.labels(), plain_bio(6, &ents).as_slice());
    }

    #[test]
    fn encode_nested_inner_in_middle() {
        let tags = encode_bio(5, &[e("AE", 0, 5), e("DRUG", 2, 4)]).unwrap();
        assert_eq!(
            tags.labels(),
            ["B-AE", "I-AE", "I-AE/B-DRUG", "I-AE/I-DRUG", "I-AE"]
        );
    }

    #[test]
    fn encode_collapses_duplicates() {
        let tags = encode_bio(2, &[e("PER", 0, 1), e("PER", 0, 1)]).unwrap();
        assert_eq!(tags.labels(), ["B-PER", "O"]);
    }

    #[test]
    fn encode_rejects_threefold() {
        let err = encode_bio(4, &[e("A", 0, 3), e("B", 0, 2), e("C", 1, 2)]).unwrap_err();
        assert!(matches!(err, CodecError::OverlapArity { .. }));
        // chain of three where no token is covered three times
        let err = encode_bio(6, &[e("A", 0, 3), e("B", 2, 3), e("C", 0, 1)]).unwrap_err();
        assert!(matches!(err, CodecError::OverlapArity { .. }));
    }

    #[test]
    fn encode_rejects_crossing_and_bounds() {
        assert!(matches!(
            encode_bio(6, &[e("X", 0, 3), e("Y", 2, 5)]),
            Err(CodecError::CrossingOverlap { .. })
        ));
        assert!(matches!(
            encode_bio(3, &[e("X", 2, 4)]),
            Err(CodecError::Bounds { .. })
        ));
        assert!(matches!(
            encode_bio(3, &[e("X", 2, 2)]),
            Err(CodecError::Bounds { .. })
        ));
        assert!(matches!(
            encode_bio(3, &[e("A/B", 0, 1)]),
            Err(CodecError::InvalidTypeName(_))
        ));
    }

    #[test]
    fn decode_examples() {
        let tags = TagSequence::new(["B-AE/B-DRUG", "I-AE", "O", "O", "O"]);
        assert_eq!(
            decode_bio(&tags, DecodeMode::Strict).unwrap(),
            vec![e("DRUG", 0, 1), e("AE", 0, 2)]
        );
        assert!(decode_bio(&TagSequence::new(["O", "O"]), DecodeMode::Strict)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn decode_orphan_modes() {
        let tags = TagSequence::new(["O", "I-PER", "I-PER", "B-ORG", "I-LOC"]);
        let err = decode_bio(&tags, DecodeMode::Strict).unwrap_err();
        assert!(matches!(
            err,
            CodecError::InvalidTransition(Violation { index: 1, .. })
        ));
        let lenient = decode_bio(&tags, DecodeMode::Lenient).unwrap();
        assert_eq!(lenient, vec![e("PER", 1, 3), e("ORG", 3, 4), e("LOC", 4, 5)]);
    }

    #[test]
    fn validate_examples() {
        assert!(validate_tags(&TagSequence::new(["B-PER", "I-PER"])).is_empty());
        assert_eq!(
            validate_tags(&TagSequence::new(["I-PER", "O"])),
            vec![Violation {
                index: 0,
                channel: 0,
                kind: ViolationKind::OrphanInside
            }]
        );
        assert!(validate_tags(&TagSequence::new(["B-AE/B-DRUG", "I-AE"])).is_empty());
    }

    #[test]
    fn validate_second_channel_placement() {
        let v = validate_tags(&TagSequence::new(["O/B-X", "O"]));
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0].kind, ViolationKind::SecondChannelOutside { .. }));
        // second channel spilling across two first-channel entities
        let v = validate_tags(&TagSequence::new(["B-A/B-X", "B-B/I-X"]));
        assert_eq!(v.len(), 1);
        let v = validate_tags(&TagSequence::new(["B-A/B-X/B-Y", "Q-A", "O"]));
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|x| matches!(x.kind, ViolationKind::Malformed(_))));
    }

    #[test]
    fn vocabulary_lines_round_trip() {
        let vocab = LabelVocabulary::from_labels(["I-ORG", "O", "B-PER", "B-ORG"]);
        assert_eq!(vocab.labels(), ["O", "B-ORG", "B-PER", "I-ORG"]);
        assert_eq!(LabelVocabulary::from_lines(&vocab.to_lines()).unwrap(), vocab);
    }

    /// Legal entity sets: disjoint blocks, some holding a nested pair.
    fn legal_entities() -> impl Strategy<Value = (usize, Vec<EntityMention>)> {
        let types = prop::sample::select(vec!["PER", "ORG", "AE", "DRUG"]);
        let block = (1usize..6, 0usize..3, types.clone(), types, any::<(u8, u8, bool)>());
        prop::collection::vec(block, 0..8).prop_map(|blocks| {
            let mut pos = 0;
            let mut out = Vec::new();
            for (len, gap, t1, t2, (a, b, nested)) in blocks {
                pos += gap;
                if pos + len > 30 {
                    break;
                }
                out.push(EntityMention::new(t1, pos, pos + len));
                if nested {
                    let s = pos + a as usize % len;
                    let w = 1 + b as usize % (pos + len - s);
                    out.push(EntityMention::new(t2, s, s + w));
                }
                pos += len;
            }
            (30.min(pos + 3), out)
        })
    }

    proptest! {
        #[test]
        fn round_trip((n, ents) in legal_entities()) {
            let tags = encode_bio(n, &ents).unwrap();
            prop_assert_eq!(tags.len(), n);
            prop_assert!(validate_tags(&tags).is_empty());
            let mut expected: Vec<_> = ents.clone();
            expected.sort();
            expected.dedup();
            prop_assert_eq!(decode_bio(&tags, DecodeMode::Strict).unwrap(), expected);
            // first channel alone is valid plain BIO
            let first = TagSequence::new(tags.labels().iter().map(|l| l.split('/').next().unwrap()));
            prop_assert!(validate_tags(&first).is_empty());
            prop_assert_eq!(encode_bio(n, &ents).unwrap(), tags);
        }

        #[test]
        fn non_overlapping_sets_have_no_separator((n, ents) in legal_entities()) {
            let flat: Vec<_> = ents.iter().filter(|x| !ents.iter().any(|y| *x != y && x.overlaps(y))).cloned().collect();
            let tags = encode_bio(n, &flat).unwrap();
            prop_assert!(tags.labels().iter().all(|l| !l.contains('/')));
        }
    }
}
