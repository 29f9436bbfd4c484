//! Browser bindings. Every export takes and returns JSON strings so the page
//! needs no generated TypeScript types. The plain functions are also callable
//! natively, which is how the tests exercise them.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use stsn::config::Config;
use stsn::data::{build_vocabularies, SentenceExample};
use stsn::model::StsnModel;
use stsn::optim::lr_schedule;
use stsn::stack::UnitKind;
use stsn::tagging::{decode_bio, encode_bio, validate_tags, DecodeMode, EntityMention, TagSequence};

/// Entity in the corpus file layout.
#[derive(Serialize, Deserialize)]
struct Entity {
    #[serde(rename = "type")]
    entity_type: String,
    start: usize,
    end: usize,
}

#[derive(Deserialize)]
struct EncodeRequest {
    tokens: Vec<String>,
    entities: Vec<Entity>,
}

#[derive(Serialize)]
struct Decoded {
    entities: Vec<Entity>,
    problems: Vec<String>,
}

/// `{"tokens": [...], "entities": [{"type", "start", "end"}]}` to a JSON
/// array of composite tags.
pub fn encode(request: &str) -> Result<String, String> {
    let req: EncodeRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let entities: Vec<EntityMention> = req
        .entities
        .into_iter()
        .map(|e| EntityMention::new(e.entity_type, e.start, e.end))
        .collect();
    let tags = encode_bio(req.tokens.len(), &entities).map_err(|e| e.to_string())?;
    serde_json::to_string(tags.labels()).map_err(|e| e.to_string())
}

/// JSON array of tags to the entities they describe. Malformed sequences are
/// decoded leniently and the problems listed alongside.
pub fn decode(tags: &str) -> Result<String, String> {
    let labels: Vec<String> = serde_json::from_str(tags).map_err(|e| e.to_string())?;
    let tags = TagSequence::new(labels);
    let problems = validate_tags(&tags).iter().map(ToString::to_string).collect();
    let entities = decode_bio(&tags, DecodeMode::Lenient)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|e| Entity {
            entity_type: e.entity_type,
            start: e.start,
            end: e.end,
        })
        .collect();
    serde_json::to_string(&Decoded { entities, problems }).map_err(|e| e.to_string())
}

/// Learning rate at every step of a run.
pub fn schedule(total_steps: usize, warmup_ratio: f64, base_lr: f64) -> Vec<f64> {
    (0..=total_steps)
        .map(|s| lr_schedule(s, total_steps, warmup_ratio, base_lr))
        .collect()
}

#[derive(Serialize)]
struct AttentionMap {
    layer: usize,
    unit: &'static str,
    head: usize,
    weights: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct AttentionReport {
    tokens: Vec<String>,
    maps: Vec<AttentionMap>,
}

const DEMO_DIM: usize = 16;

/// Attention weights of every unit and head in a freshly initialized model.
pub fn attention(sentence: &str, layers: usize, heads: usize, seed: u64) -> Result<String, String> {
    let tokens: Vec<String> = sentence.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err("enter at least one word".into());
    }
    let mut config = Config::default();
    config.encoder.dim = DEMO_DIM;
    config.encoder.vocab_buckets = 512;
    config.encoder.max_positions = 256;
    config.stack.layers = layers;
    config.stack.heads = heads;
    config.decoder.label_dim = 4;
    config.decoder.width_dim = 4;
    config.train.seed = seed;
    config.validate().map_err(|e| e.to_string())?;

    let example = SentenceExample {
        id: "demo".into(),
        tokens: tokens.clone(),
        entities: Vec::new(),
        relations: Vec::new(),
    };
    let vocabs = build_vocabularies(&[example]).map_err(|e| e.to_string())?;
    let model = StsnModel::new(config, vocabs).map_err(|e| e.to_string())?;
    let trace = model.attention_trace(&tokens).map_err(|e| e.to_string())?;

    let mut maps = Vec::new();
    for event in trace.events {
        let unit = match event.unit {
            UnitKind::EntityRelationToLabel => "E&R-L-A",
            UnitKind::LabelToEntity => "L-E-A",
            UnitKind::LabelToRelation => "L-R-A",
        };
        for (head, m) in event.attention.iter().enumerate() {
            maps.push(AttentionMap {
                layer: event.layer,
                unit,
                head,
                weights: (0..m.rows()).map(|r| m.row(r).to_vec()).collect(),
            });
        }
    }
    serde_json::to_string(&AttentionReport { tokens, maps }).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = encodeTags)]
pub fn encode_tags(request: &str) -> Result<String, JsError> {
    encode(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = decodeTags)]
pub fn decode_tags(tags: &str) -> Result<String, JsError> {
    decode(tags).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lrSchedule)]
pub fn lr_schedule_curve(total_steps: usize, warmup_ratio: f64, base_lr: f64) -> Vec<f64> {
    schedule(total_steps, warmup_ratio, base_lr)
}

#[wasm_bindgen(js_name = attentionMaps)]
pub fn attention_maps(sentence: &str, layers: usize, heads: usize, seed: u32) -> Result<String, JsError> {
    attention(sentence, layers, heads, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn encode_nested_pair() {
        let req = r#"{"tokens":["a","b","c"],"entities":[{"type":"AE","start":0,"end":2},{"type":"DRUG","start":0,"end":1}]}"#;
        assert_eq!(encode(req).unwrap(), r#"["B-AE/B-DRUG","I-AE","O"]"#);
    }

    #[test]
    fn encode_rejects_crossing_entities() {
        let req = r#"{"tokens":["a","b","c"],"entities":[{"type":"X","start":0,"end":2},{"type":"Y","start":1,"end":3}]}"#;
        assert!(encode(req).is_err());
    }

    #[test]
    fn decode_reports_problems() {
        let v: Value = serde_json::from_str(&decode(r#"["I-PER","O"]"#).unwrap()).unwrap();
        assert_eq!(v["problems"].as_array().unwrap().len(), 1);
        let v: Value = serde_json::from_str(&decode(r#"["B-AE/B-DRUG","I-AE","O"]"#).unwrap()).unwrap();
        assert_eq!(v["entities"].as_array().unwrap().len(), 2);
        assert!(v["problems"].as_array().unwrap().is_empty());
    }

    #[test]
    fn schedule_shape() {
        let lrs = schedule(100, 0.1, 1.0);
        assert_eq!(lrs.len(), 101);
        assert_eq!(lrs[0], 0.0);
        assert!((lrs[10] - 1.0).abs() < 1e-12);
        assert_eq!(lrs[100], 0.0);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let v: Value = serde_json::from_str(&attention("Jack taught at Harvard", 2, 4, 1).unwrap()).unwrap();
        let maps = v["maps"].as_array().unwrap();
        assert_eq!(maps.len(), 2 * 3 * 4);
        for m in maps {
            for row in m["weights"].as_array().unwrap() {
                let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_heads() {
        assert!(attention("a b", 1, 3, 0).is_err());
        assert!(attention("   ", 1, 2, 0).is_err());
    }
}
