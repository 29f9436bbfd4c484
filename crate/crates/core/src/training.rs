//! The optimization loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Matching;
use crate::data::{sample_negatives, SentenceExample, TrainingBatch, TrainingInstance};
use crate::eval::evaluate;
use crate::model::StsnModel;
use crate::optim::{clip_global_norm, lr_schedule, AdamW};
use crate::tensor::Graph;
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "L_L")]
    pub l_label: f64,
    #[serde(rename = "L_E")]
    pub l_entity: f64,
    #[serde(rename = "L_R")]
    pub l_relation: f64,
    #[serde(rename = "L_joint")]
    pub l_joint: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_re_plus_f1: Option<f64>,
}

pub struct TrainOutcome {
    /// The final model, or the best one on dev when a dev set was given.
    pub model: StsnModel,
    pub optimizer: AdamW,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub checkpoint: Checkpoint,
}

/// Deterministic per-(epoch, sentence) seed for negative sampling.
pub fn sampling_seed(seed: u64, epoch: usize, sentence: usize) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((sentence as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn total_steps(sentences: usize, batch_size: usize, epochs: usize) -> usize {
    sentences.div_ceil(batch_size) * epochs
}

/// Trains `model` on `train`. When `dev` is given, the model with the best
/// dev RE+ micro-F1 is kept. `on_epoch` sees every log line as it is produced.
pub fn train(
    mut model: StsnModel,
    train: &[SentenceExample],
    dev: Option<&[SentenceExample]>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    model.config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("the training corpus is empty".into()));
    }
    let cfg = model.config.train.clone();
    let max_width = model.config.decoder.max_width;
    let total = total_steps(train.len(), cfg.batch_size, cfg.epochs);
    let mut optimizer = AdamW::new(&model.store, cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step: u64 = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let instances = chunk
                .iter()
                .map(|&i| {
                    let seed = sampling_seed(cfg.seed, epoch, i);
                    let neg = sample_negatives(&train[i], cfg.neg_spans, cfg.neg_pairs, max_width, seed);
                    TrainingInstance::build(&train[i], &model.vocabs, &neg)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = TrainingBatch::new(instances);

            let (bundle, mut grads) = {
                let mut g = Graph::new(&model.store);
                let loss = model.batch_loss(&mut g, &batch, Some(&mut dropout_rng))?;
                let bundle = loss.bundle(&g);
                if !bundle.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: step as usize,
                        detail: format!(
                            "L_L={} L_E={} L_R={} on sentences {:?}",
                            bundle.l_label,
                            bundle.l_entity,
                            bundle.l_relation,
                            chunk.iter().map(|&i| train[i].id.as_str()).collect::<Vec<_>>()
                        ),
                    });
                }
                (bundle, g.backward(loss.joint).into_param_grads(&model.store))
            };
            clip_global_norm(&mut grads, cfg.grad_clip);
            lr = lr_schedule(step as usize, total, cfg.warmup_ratio, cfg.learning_rate);
            optimizer.update(&mut model.store, &grads, lr);
            step += 1;

            for (s, v) in sums.iter_mut().zip([bundle.l_label, bundle.l_entity, bundle.l_relation, bundle.l_joint]) {
                *s += v;
            }
            batches += 1;
        }

        let dev_f1 = match dev {
            Some(dev) => {
                let pred = model.predict_corpus(dev)?;
                Some(evaluate(dev, &pred, Matching::Exact)?.re_plus.micro.f1)
            }
            None => None,
        };
        let n = batches as f64;
        let line = EpochLog {
            epoch,
            step,
            l_label: sums[0] / n,
            l_entity: sums[1] / n,
            l_relation: sums[2] / n,
            l_joint: sums[3] / n,
            lr,
            dev_re_plus_f1: dev_f1,
        };
        on_epoch(&line);
        log.push(line);

        if let Some(f1) = dev_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, Checkpoint::from_model(&model, Some(&optimizer), epoch, step)));
            }
        }
    }

    match best {
        Some((_, best_epoch, checkpoint)) => {
            let (model, _) = checkpoint.clone().into_model_with_features(match &model.backend {
                crate::model::Backend::Precomputed(f) => Some(f.clone()),
                crate::model::Backend::Hashed(_) => None,
            })?;
            Ok(TrainOutcome {
                model,
                optimizer,
                log,
                best_epoch,
                checkpoint,
            })
        }
        None => {
            let checkpoint = Checkpoint::from_model(&model, Some(&optimizer), cfg.epochs, step);
            Ok(TrainOutcome {
                model,
                optimizer,
                log,
                best_epoch: cfg.epochs,
                checkpoint,
            })
        }
    }
}
