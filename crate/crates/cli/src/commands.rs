use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;

use stsn::checkpoint::Checkpoint;
use stsn::config::{Config, Matching};
use stsn::data::{build_vocabularies, corpus_to_json, parse_corpus, SentenceExample, Vocabularies, LABEL_VOCAB_FILE};
use stsn::eval::{
    breakdown_by_entity_length, breakdown_by_sentence_length, evaluate as score, render_entity_length, render_report,
    render_sentence_length, MetricsReport, Scores,
};
use stsn::model::StsnModel;
use stsn::training::{train as fit, EpochLog};

use crate::error::{CliError, Context};
use crate::{Breakdown, ConfigArgs, MatchingArg};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.cfg";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn resolve_config(args: &ConfigArgs) -> Result<Config, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            Config::parse(&text).context(|| format!("config {}", path.display()))?
        }
        None => Config::default(),
    };
    if let Ok(seed) = std::env::var("STSN_SEED") {
        config.set("train.seed", &seed).context(|| "STSN_SEED".into())?;
    }
    for pair in &args.overrides {
        config.set_pair(pair).context(|| format!("--set {pair}"))?;
    }
    config.validate().context(|| "config".into())?;
    Ok(config)
}

fn read_corpus(path: &Path, max_len: usize) -> Result<Vec<SentenceExample>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_corpus(&text, max_len).context(|| format!("corpus {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct TrainSummary {
    parameters: usize,
    epochs: usize,
    steps: u64,
    best_epoch: usize,
    train_sentences: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    dev: Option<MetricsReport>,
}

pub fn train(args: &ConfigArgs, train_path: &Path, dev_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let config = resolve_config(args)?;
    let max_len = config.data.max_sentence_len;
    let corpus = read_corpus(train_path, max_len)?;
    let dev = dev_path.map(|p| read_corpus(p, max_len)).transpose()?;
    let vocabs = build_vocabularies(&corpus).context(|| "building vocabularies".into())?;
    let model = StsnModel::new(config.clone(), vocabs.clone()).context(|| "building the model".into())?;
    let parameters = model.num_parameters();

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    let mut log_error = None;
    let epochs = config.train.epochs;
    let outcome = fit(model, &corpus, dev.as_deref(), |line: &EpochLog| {
        eprintln!(
            "epoch {}/{epochs} L_joint={:.5} lr={:.3e}{}",
            line.epoch,
            line.l_joint,
            line.lr,
            line.dev_re_plus_f1.map(|f| format!(" dev RE+ F1={f:.4}")).unwrap_or_default()
        );
        if log_error.is_none() {
            let json = serde_json::to_string(line).expect("log line serializes");
            if let Err(e) = writeln!(log, "{json}") {
                log_error = Some(e);
            }
        }
    })
    .context(|| "training".into())?;
    if let Some(e) = log_error {
        return Err(CliError::io(&log_path, e));
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ckpt_path).context(|| format!("writing {}", ckpt_path.display()))?;
    write_file(&out.join(CONFIG_FILE), &config.to_text())?;
    vocabs.save(out).context(|| format!("writing vocabularies to {}", out.display()))?;

    let dev_report = match &dev {
        Some(dev) => {
            let pred = outcome.model.predict_corpus(dev).context(|| "predicting on dev".into())?;
            Some(score(dev, &pred, config.eval.matching).context(|| "scoring dev".into())?)
        }
        None => None,
    };
    let summary = TrainSummary {
        parameters,
        epochs,
        steps: outcome.log.last().map_or(0, |l| l.step),
        best_epoch: outcome.best_epoch,
        train_sentences: corpus.len(),
        dev: dev_report,
    };
    write_file(&out.join(SUMMARY_FILE), &to_json(&summary))?;
    println!(
        "trained {parameters} parameters for {epochs} epochs; kept epoch {}; wrote {}",
        summary.best_epoch,
        out.display()
    );
    if let Some(report) = &summary.dev {
        print!("{}", render_report(report));
    }
    Ok(())
}

pub fn predict(checkpoint: &Path, input: &Path, output: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint).context(|| format!("loading {}", checkpoint.display()))?;
    // vocabulary files written next to the checkpoint must agree with the embedded copy
    let dir = checkpoint.parent().unwrap_or(Path::new(""));
    if dir.join(LABEL_VOCAB_FILE).exists() {
        let on_disk = Vocabularies::load(dir).context(|| format!("vocabularies in {}", dir.display()))?;
        ckpt.vocabs
            .ensure_compatible(&on_disk)
            .context(|| format!("checkpoint {} against {}", checkpoint.display(), dir.display()))?;
    }
    let (model, _) = ckpt.into_model().context(|| format!("restoring {}", checkpoint.display()))?;
    let corpus = read_corpus(input, model.config.data.max_sentence_len)?;
    let pred = model.predict_corpus(&corpus).context(|| "predicting".into())?;
    let mut json = corpus_to_json(&pred).context(|| "serializing predictions".into())?;
    json.push('\n');
    write_file(output, &json)?;
    eprintln!("wrote predictions for {} sentences to {}", pred.len(), output.display());
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOutput<'a> {
    report: &'a MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    breakdown: Option<serde_json::Value>,
}

pub fn evaluate(
    gold_path: &Path,
    pred_path: &Path,
    breakdown: Option<Breakdown>,
    matching: MatchingArg,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let gold = read_corpus(gold_path, usize::MAX)?;
    let pred = read_corpus(pred_path, usize::MAX)?;
    let matching = match matching {
        MatchingArg::Exact => Matching::Exact,
        MatchingArg::Head => Matching::Head,
    };
    let report = score(&gold, &pred, matching).context(|| "evaluating".into())?;
    let mut text = render_report(&report);
    let breakdown = match breakdown {
        None => None,
        Some(Breakdown::EntityLength) => {
            let buckets = breakdown_by_entity_length(&gold, &pred).context(|| "entity-length breakdown".into())?;
            text.push_str("\nNER by entity length\n");
            text.push_str(&render_entity_length(&buckets));
            Some(serde_json::to_value(&buckets).expect("buckets serialize"))
        }
        Some(Breakdown::SentenceLength) => {
            let buckets = breakdown_by_sentence_length(&gold, &pred).context(|| "sentence-length breakdown".into())?;
            text.push('\n');
            text.push_str(&render_sentence_length(&buckets));
            Some(serde_json::to_value(&buckets).expect("buckets serialize"))
        }
    };
    let json = to_json(&EvaluationOutput {
        report: &report,
        breakdown,
    });
    print!("{text}");
    println!("{}", json.trim_end());
    if let Some(dir) = out {
        write_file(&dir.join("metrics.json"), &json)?;
        write_file(&dir.join("metrics.txt"), &text)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[value(name = "full")]
    Full,
    #[value(name = "no_label_embedding")]
    NoLabelEmbedding,
    #[value(name = "no_erla")]
    NoErla,
    #[value(name = "no_stack")]
    NoStack,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoLabelEmbedding, Variant::NoErla, Variant::NoStack];

    /// Row label as used in ablation tables.
    pub fn label(self, layers: usize) -> String {
        match self {
            Variant::Full if layers == 1 => "1 AttentionLayer".into(),
            Variant::Full => format!("{layers} AttentionLayers"),
            Variant::NoLabelEmbedding => "-LabelEmbedding".into(),
            Variant::NoErla => "-E&R-L-A".into(),
            Variant::NoStack => "-AttentionLayer".into(),
        }
    }

    fn apply(self, config: &mut Config, layers: usize) {
        config.stack.layers = layers;
        config.ablation.no_label_embedding = self == Variant::NoLabelEmbedding;
        config.ablation.no_erla = self == Variant::NoErla;
        config.ablation.no_stack = self == Variant::NoStack;
    }
}

#[derive(Serialize)]
struct AblationRow {
    variant: Variant,
    label: String,
    layers: usize,
    parameters: usize,
    ner: Scores,
    re: Scores,
    re_plus: Scores,
}

/// The (variant, layers) grid. Without the stack the layer count is
/// irrelevant, so that variant runs once.
pub fn ablation_grid(variants: &[Variant], layers: &[usize], configured_layers: usize) -> Vec<(Variant, usize)> {
    let variants = if variants.is_empty() { &Variant::ALL[..] } else { variants };
    let layers: Vec<usize> = match (layers.is_empty(), variants.len() == Variant::ALL.len()) {
        (false, _) => layers.to_vec(),
        (true, true) => (1..=6).collect(),
        (true, false) => vec![configured_layers],
    };
    let mut grid = Vec::new();
    for &v in variants {
        if v == Variant::NoStack {
            grid.push((v, 0));
        } else {
            grid.extend(layers.iter().map(|&l| (v, l)));
        }
    }
    grid
}

fn render_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:>6} {:>12} {:>8} {:>8} {:>8}",
        "variant", "layers", "parameters", "NER-F1", "RE-F1", "RE+-F1"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>12} {:>8.4} {:>8.4} {:>8.4}",
            r.label, r.layers, r.parameters, r.ner.f1, r.re.f1, r.re_plus.f1
        );
    }
    out
}

pub fn ablate(
    args: &ConfigArgs,
    train_path: &Path,
    eval_path: Option<&Path>,
    variants: &[Variant],
    layers: &[usize],
    out: Option<&Path>,
) -> Result<(), CliError> {
    let base = resolve_config(args)?;
    let max_len = base.data.max_sentence_len;
    let corpus = read_corpus(train_path, max_len)?;
    let eval_corpus = match eval_path {
        Some(p) => read_corpus(p, max_len)?,
        None => corpus.clone(),
    };
    let vocabs = build_vocabularies(&corpus).context(|| "building vocabularies".into())?;

    let mut rows = Vec::new();
    for (variant, n_layers) in ablation_grid(variants, layers, base.stack.layers) {
        let label = variant.label(n_layers);
        let mut config = base.clone();
        variant.apply(&mut config, n_layers);
        config.validate().context(|| label.clone())?;
        let model = StsnModel::new(config, vocabs.clone()).context(|| label.clone())?;
        let parameters = model.num_parameters();
        eprintln!("training {label} ({parameters} parameters)");
        let outcome = fit(model, &corpus, None, |_| {}).context(|| format!("training {label}"))?;
        let pred = outcome.model.predict_corpus(&eval_corpus).context(|| format!("predicting with {label}"))?;
        let report = score(&eval_corpus, &pred, base.eval.matching).context(|| format!("scoring {label}"))?;
        rows.push(AblationRow {
            variant,
            label,
            layers: n_layers,
            parameters,
            ner: report.ner.micro,
            re: report.re.micro,
            re_plus: report.re_plus.micro,
        });
    }
    let text = render_ablation(&rows);
    let json = to_json(&rows);
    print!("{text}");
    println!("{}", json.trim_end());
    if let Some(dir) = out {
        write_file(&dir.join("ablation.json"), &json)?;
        write_file(&dir.join("ablation.txt"), &text)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CorpusSummary {
    path: PathBuf,
    sentences: usize,
    tokens: usize,
    longest_sentence: usize,
    entities: usize,
    overlapping_pairs: usize,
    /// Entities wider than `decoder.max_width`; they cannot be predicted and
    /// are left out of the training losses.
    too_wide: usize,
    relations: usize,
    entity_types: Vec<String>,
    relation_types: Vec<String>,
}

fn summarize(path: &Path, corpus: &[SentenceExample], max_width: usize) -> CorpusSummary {
    let mut entity_types = std::collections::BTreeSet::new();
    let mut relation_types = std::collections::BTreeSet::new();
    let mut s = CorpusSummary {
        path: path.to_path_buf(),
        sentences: corpus.len(),
        tokens: 0,
        longest_sentence: 0,
        entities: 0,
        overlapping_pairs: 0,
        too_wide: 0,
        relations: 0,
        entity_types: Vec::new(),
        relation_types: Vec::new(),
    };
    for ex in corpus {
        s.tokens += ex.len();
        s.longest_sentence = s.longest_sentence.max(ex.len());
        s.entities += ex.entities.len();
        s.relations += ex.relations.len();
        s.too_wide += ex.entities.iter().filter(|e| e.width() > max_width).count();
        for (i, a) in ex.entities.iter().enumerate() {
            s.overlapping_pairs += ex.entities[i + 1..].iter().filter(|b| a.overlaps(b)).count();
            entity_types.insert(a.entity_type.clone());
        }
        relation_types.extend(ex.relations.iter().map(|r| r.relation_type.clone()));
    }
    s.entity_types = entity_types.into_iter().collect();
    s.relation_types = relation_types.into_iter().collect();
    s
}

pub fn validate_data(args: &ConfigArgs, inputs: &[PathBuf]) -> Result<(), CliError> {
    let config = resolve_config(args)?;
    let mut summaries = Vec::new();
    for path in inputs {
        let corpus = read_corpus(path, config.data.max_sentence_len)?;
        for (record, ex) in corpus.iter().enumerate() {
            ex.tags()
                .map_err(|e| stsn::Error::Validation {
                    record,
                    message: e.to_string(),
                })
                .context(|| format!("corpus {}", path.display()))?;
        }
        let s = summarize(path, &corpus, config.decoder.max_width);
        println!(
            "{}: {} sentences, {} tokens (longest {}), {} entities ({} overlapping pairs, {} wider than {}), {} relations",
            path.display(),
            s.sentences,
            s.tokens,
            s.longest_sentence,
            s.entities,
            s.overlapping_pairs,
            s.too_wide,
            config.decoder.max_width,
            s.relations
        );
        summaries.push(s);
    }
    println!("{}", to_json(&summaries).trim_end());
    Ok(())
}
