//! End-to-end orchestration: preprocess → build vocab → build memory →
//! train → predict → evaluate → dump states.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    build_target_sequence, build_vocabulary, extend_vocabulary, load_corpus, write_corpus,
    Document, ExtendedVocabulary, RawRecord, TargetSequence, Vocabulary,
};
use crate::decode::{beam_search, rank_predictions, write_predictions, PredictionRecord};
use crate::eval::{evaluate, DocEvalInput, EvalReport};
use crate::memory::{build_memory, AddressOptions, DocumentMemory, EmbeddingMeanEncoder};
use crate::model::{
    encode_document, install_memory, train_step, Ablations, DocBatchItem, Model, ModelConfig,
    MEM_KEYS, MEM_VALUES,
};
use crate::params::{AdamConfig, ParameterStore};
use crate::{Error, Result};

/// Everything one pipeline run needs: artifact paths, the model shape,
/// training controls, and ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub memory: PathBuf,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub loss_log: PathBuf,
    pub states: PathBuf,
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub disable_memory: bool,
    pub disable_copy: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: "corpus.jsonl".into(),
            vocab: "vocab.txt".into(),
            memory: "memory.bin".into(),
            checkpoint: "checkpoint.bin".into(),
            predictions: "predictions.jsonl".into(),
            report: "report.txt".into(),
            loss_log: "loss.log".into(),
            states: "states.tsv".into(),
            model: ModelConfig::default(),
            steps: 2000,
            batch_size: 8,
            seed: 13,
            eval_interval: 500,
            disable_memory: false,
            disable_copy: false,
        }
    }
}

const MODEL_KEYS: [&str; 8] = [
    "layer_count",
    "head_count",
    "hidden_dim",
    "max_input_len",
    "max_target_len",
    "dropout_rate",
    "vocab_cap",
    "beam_size",
];

impl RunConfig {
    pub fn ablations(&self) -> Ablations {
        Ablations {
            disable_memory: self.disable_memory,
            disable_copy: self.disable_copy,
        }
    }

    /// Flat `key=value` dump; parsing it back reproduces the config.
    pub fn echo(&self) -> String {
        let path = |p: &Path| p.display().to_string();
        format!(
            "corpus={}\nvocab={}\nmemory={}\ncheckpoint={}\npredictions={}\nreport={}\nloss_log={}\nstates={}\n{}steps={}\nbatch_size={}\nseed={}\neval_interval={}\ndisable_memory={}\ndisable_copy={}\n",
            path(&self.corpus),
            path(&self.vocab),
            path(&self.memory),
            path(&self.checkpoint),
            path(&self.predictions),
            path(&self.report),
            path(&self.loss_log),
            path(&self.states),
            self.model.echo(),
            self.steps,
            self.batch_size,
            self.seed,
            self.eval_interval,
            self.disable_memory,
            self.disable_copy
        )
    }

    /// Parse a `key=value` block over the defaults. Model keys are shared
    /// with [`ModelConfig`]; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut model_lines = String::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got {:?}", line)))?;
            let (key, value) = (key.trim(), value.trim());
            if MODEL_KEYS.contains(&key) {
                model_lines.push_str(line);
                model_lines.push('\n');
                continue;
            }
            let int = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|e| Error::Parse(format!("{}: {}", key, e)))
            };
            let boolean = |v: &str| -> Result<bool> {
                v.parse()
                    .map_err(|e| Error::Parse(format!("{}: {}", key, e)))
            };
            match key {
                "corpus" => cfg.corpus = value.into(),
                "vocab" => cfg.vocab = value.into(),
                "memory" => cfg.memory = value.into(),
                "checkpoint" => cfg.checkpoint = value.into(),
                "predictions" => cfg.predictions = value.into(),
                "report" => cfg.report = value.into(),
                "loss_log" => cfg.loss_log = value.into(),
                "states" => cfg.states = value.into(),
                "steps" => cfg.steps = int(value)?,
                "batch_size" => cfg.batch_size = int(value)?,
                "eval_interval" => cfg.eval_interval = int(value)?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|e| Error::Parse(format!("seed: {}", e)))?
                }
                "disable_memory" => cfg.disable_memory = boolean(value)?,
                "disable_copy" => cfg.disable_copy = boolean(value)?,
                _ => return Err(Error::Parse(format!("unknown config key {:?}", key))),
            }
        }
        cfg.model = ModelConfig::parse(&model_lines)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingInput {
            artifact: "config",
            path: path.display().to_string(),
        })?;
        Self::parse(&text)
    }
}

/// Documented process exit code per failure class; missing artifacts get
/// distinct codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingInput { artifact, .. } => match *artifact {
            "corpus" => 10,
            "vocabulary" => 11,
            "memory" => 12,
            "checkpoint" => 13,
            "predictions" => 14,
            "config" => 15,
            _ => 16,
        },
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Parse(_) => 4,
        Error::Numeric(_) => 5,
        Error::Shape(_) => 6,
        Error::Io(_) => 7,
    }
}

/// Normalize a raw corpus file: tokenize, drop unusable records, remove
/// duplicates, and write the cleaned records in the same line format.
pub fn run_preprocess(input: &Path, output: &Path) -> Result<usize> {
    let docs = load_corpus(input)?;
    let records: Vec<RawRecord> = docs
        .iter()
        .map(|doc| RawRecord {
            id: doc.id.clone(),
            title: doc.title_tokens.join(" "),
            abstract_text: doc.abstract_tokens.join(" "),
            keyphrases: doc.gold_keyphrases.iter().map(|p| p.join(" ")).collect(),
        })
        .collect();
    write_corpus(output, &records)?;
    Ok(records.len())
}

pub fn run_build_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let docs = load_corpus(&cfg.corpus)?;
    if docs.is_empty() {
        return Err(Error::Data("corpus has no usable documents".into()));
    }
    let vocab = build_vocabulary(&docs, cfg.model.vocab_cap);
    vocab.save(&cfg.vocab)?;
    Ok(vocab)
}

/// Build the document memory from scratch with seeded embeddings (the model
/// is trained later; keys are re-derived then updated by gradient descent).
pub fn run_build_memory(cfg: &RunConfig) -> Result<DocumentMemory> {
    let docs = load_corpus(&cfg.corpus)?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(cfg.model.clone(), vocab.size(), &mut rng)?;
    let encoder = EmbeddingMeanEncoder {
        embeddings: model.embeddings(),
        vocab: &vocab,
    };
    let mem = build_memory(&docs, &encoder)?;
    mem.save(&cfg.memory)?;
    Ok(mem)
}

struct TrainingData {
    docs: Vec<Document>,
    exts: Vec<ExtendedVocabulary>,
    targets: Vec<TargetSequence>,
    /// Document order for batching: stable sort by source length.
    order: Vec<usize>,
}

fn prepare_training_data(docs: Vec<Document>, vocab: &Vocabulary) -> Result<TrainingData> {
    let mut exts = Vec::with_capacity(docs.len());
    let mut targets = Vec::with_capacity(docs.len());
    for doc in &docs {
        let ext = extend_vocabulary(vocab, &doc.source_tokens);
        let target = build_target_sequence(doc, vocab, &ext)?;
        exts.push(ext);
        targets.push(target);
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by_key(|&i| docs[i].source_tokens.len());
    Ok(TrainingData {
        docs,
        exts,
        targets,
        order,
    })
}

/// Train the model and write the checkpoint plus a per-step loss log.
/// Returns the final model. Memory keys/values train alongside the model;
/// rows for documents absent from this corpus stay frozen.
pub fn run_train(cfg: &RunConfig) -> Result<Model> {
    let docs = load_corpus(&cfg.corpus)?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    let mem = DocumentMemory::load(&cfg.memory)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), vocab.size(), &mut rng)?;
    install_memory(&mut model, &mem)?;

    let frozen_rows: Vec<usize> = {
        let in_corpus: std::collections::HashSet<&str> =
            docs.iter().map(|d| d.id.as_str()).collect();
        (0..mem.len())
            .filter(|&i| !in_corpus.contains(mem.doc_ids[i].as_str()))
            .collect()
    };

    let data = prepare_training_data(docs, &vocab)?;
    let batches: Vec<&[usize]> = data.order.chunks(cfg.batch_size).collect();
    let adam = AdamConfig::default();
    let ablations = cfg.ablations();

    let mut log = BufWriter::new(std::fs::File::create(&cfg.loss_log)?);
    writeln!(log, "# seed={}", cfg.seed)?;
    for step in 1..=cfg.steps {
        let batch = batches[(step - 1) % batches.len()];
        let items: Vec<DocBatchItem<'_>> = batch
            .iter()
            .map(|&i| DocBatchItem {
                doc: &data.docs[i],
                target: &data.targets[i],
                ext: &data.exts[i],
            })
            .collect();
        // Addressing during training includes the document itself.
        let self_indices: Vec<Option<usize>> = vec![None; batch.len()];
        let loss = train_step(
            &mut model,
            &vocab,
            &items,
            &self_indices,
            ablations,
            &frozen_rows,
            &adam,
            if cfg.model.dropout_rate > 0.0 {
                Some(&mut rng)
            } else {
                None
            },
        )?;
        writeln!(log, "{}\t{:.12}", step, loss)?;
        if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
            model
                .params
                .save_checkpoint(&cfg.checkpoint, cfg.seed, &cfg.echo())?;
        }
    }
    log.flush()?;
    model
        .params
        .save_checkpoint(&cfg.checkpoint, cfg.seed, &cfg.echo())?;
    Ok(model)
}

/// Load the checkpointed parameters; the memory file provides document ids
/// while trained keys/values come from the checkpoint when present.
pub fn load_trained(cfg: &RunConfig, vocab: &Vocabulary) -> Result<(Model, Option<DocumentMemory>)> {
    let (params, _seed, _echo) = ParameterStore::load_checkpoint(&cfg.checkpoint)?;
    let model = Model::from_parts(cfg.model.clone(), vocab.size(), params)?;
    let memory = if cfg.disable_memory {
        None
    } else {
        let mut mem = DocumentMemory::load(&cfg.memory)?;
        if model.params.contains(MEM_KEYS) && model.params.contains(MEM_VALUES) {
            if model.params.get(MEM_KEYS).shape() != mem.keys.shape() {
                return Err(Error::Config(format!(
                    "checkpoint memory shape {:?} does not match memory file {:?}",
                    model.params.get(MEM_KEYS).shape(),
                    mem.keys.shape()
                )));
            }
            crate::model::extract_memory(&model, &mut mem);
        }
        Some(mem)
    };
    Ok((model, memory))
}

/// Decode every corpus document and write one prediction record per line,
/// in input order.
pub fn run_predict(cfg: &RunConfig) -> Result<Vec<PredictionRecord>> {
    let docs = load_corpus(&cfg.corpus)?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    let (model, memory) = load_trained(cfg, &vocab)?;
    let ablations = cfg.ablations();
    let mut records = Vec::with_capacity(docs.len());
    for doc in &docs {
        let enc = encode_document(
            &model,
            &vocab,
            doc,
            memory.as_ref(),
            &AddressOptions::default(),
            ablations,
        )?;
        let hyps = beam_search(
            &model,
            &enc,
            cfg.model.beam_size,
            cfg.model.max_target_len,
            ablations,
        )?;
        let set = rank_predictions(&hyps, &vocab, &enc.ext);
        records.push(PredictionRecord::from_set(&doc.id, &set));
    }
    write_predictions(&cfg.predictions, &records)?;
    Ok(records)
}

/// Score predictions against the corpus gold and write the report files.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let docs = load_corpus(&cfg.corpus)?;
    let records = crate::decode::load_predictions(&cfg.predictions)?;

    let by_id: HashMap<&str, &PredictionRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let corpus_ids: std::collections::HashSet<&str> =
        docs.iter().map(|d| d.id.as_str()).collect();
    let mut missing: Vec<&str> = docs
        .iter()
        .map(|d| d.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let mut orphaned: Vec<&str> = records
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !corpus_ids.contains(id))
        .collect();
    if !missing.is_empty() || !orphaned.is_empty() {
        missing.sort_unstable();
        orphaned.sort_unstable();
        return Err(Error::Data(format!(
            "prediction/corpus id mismatch; unpredicted: [{}], unknown: [{}]",
            missing.join(", "),
            orphaned.join(", ")
        )));
    }

    let inputs: Vec<DocEvalInput> = docs
        .iter()
        .map(|doc| DocEvalInput::from_prediction(doc, by_id[doc.id.as_str()]))
        .collect();
    let report = evaluate(&inputs)?;
    report.save(&cfg.report)?;
    Ok(report)
}

/// Write the decoder-state dump for the first `steps` greedy steps.
pub fn run_dump_states(cfg: &RunConfig, steps: usize) -> Result<()> {
    let docs = load_corpus(&cfg.corpus)?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    let (model, memory) = load_trained(cfg, &vocab)?;
    crate::eval::dump_decoder_states(
        &cfg.states,
        &docs,
        &model,
        &vocab,
        memory.as_ref(),
        steps,
        cfg.ablations(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture_corpus(path: &Path) {
        let records = vec![
            RawRecord {
                id: "a".into(),
                title: "Graph Clustering Methods".into(),
                abstract_text: "We study graph clustering with spectral methods.".into(),
                keyphrases: vec!["graph clustering".into(), "spectral methods".into()],
            },
            RawRecord {
                id: "b".into(),
                title: "Sparse Coding".into(),
                abstract_text: "Sparse coding for signals in 2019.".into(),
                keyphrases: vec!["sparse coding".into(), "dictionary learning".into()],
            },
        ];
        write_corpus(path, &records).unwrap();
    }

    fn tiny_run_config(dir: &Path) -> RunConfig {
        RunConfig {
            corpus: dir.join("corpus.jsonl"),
            vocab: dir.join("vocab.txt"),
            memory: dir.join("memory.bin"),
            checkpoint: dir.join("checkpoint.bin"),
            predictions: dir.join("pred.jsonl"),
            report: dir.join("report.txt"),
            loss_log: dir.join("loss.log"),
            states: dir.join("states.tsv"),
            model: ModelConfig {
                layer_count: 1,
                head_count: 2,
                hidden_dim: 8,
                max_input_len: 32,
                max_target_len: 16,
                dropout_rate: 0.0,
                vocab_cap: 30,
                beam_size: 3,
            },
            steps: 3,
            batch_size: 2,
            seed: 13,
            eval_interval: 0,
            disable_memory: false,
            disable_copy: false,
        }
    }

    #[test]
    fn config_echo_roundtrip_and_unknown_key() {
        let cfg = tiny_run_config(Path::new("/tmp/x"));
        let parsed = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(parsed, cfg);
        assert!(RunConfig::parse("bogus=1").is_err());
        assert!(RunConfig::parse("steps=abc").is_err());
    }

    #[test]
    fn exit_codes_are_distinct_per_artifact() {
        let artifacts = ["corpus", "vocabulary", "memory", "checkpoint", "predictions", "config"];
        let codes: std::collections::HashSet<i32> = artifacts
            .iter()
            .map(|&artifact| {
                exit_code(&Error::MissingInput {
                    artifact,
                    path: "x".into(),
                })
            })
            .collect();
        assert_eq!(codes.len(), artifacts.len());
        assert!(codes.iter().all(|&c| c != 0));
        assert_ne!(exit_code(&Error::Config("x".into())), 0);
    }

    #[test]
    fn preprocess_normalizes_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.jsonl");
        let clean = dir.path().join("clean.jsonl");
        let again = dir.path().join("again.jsonl");
        write_fixture_corpus(&raw);
        let n = run_preprocess(&raw, &clean).unwrap();
        assert_eq!(n, 2);
        let text = std::fs::read_to_string(&clean).unwrap();
        assert!(text.contains("graph clustering methods"));
        assert!(text.contains("<digit>"));
        run_preprocess(&clean, &again).unwrap();
        assert_eq!(text, std::fs::read_to_string(&again).unwrap());
    }

    #[test]
    fn full_tiny_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        write_fixture_corpus(&cfg.corpus);
        run_build_vocab(&cfg).unwrap();
        run_build_memory(&cfg).unwrap();
        run_train(&cfg).unwrap();
        let records = run_predict(&cfg).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, "a");
        let report = run_eval(&cfg).unwrap();
        assert_eq!(report.doc_count, 2);
        assert!(cfg.report.with_extension("txt.json").exists());
        run_dump_states(&cfg, 2).unwrap();
        let states = std::fs::read_to_string(&cfg.states).unwrap();
        assert!(states.starts_with("doc_id\tstep"));

        // Loss log: header plus one line per step.
        let log = std::fs::read_to_string(&cfg.loss_log).unwrap();
        assert_eq!(log.lines().count(), 1 + cfg.steps);
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.steps = 0;
        write_fixture_corpus(&cfg.corpus);
        let vocab = run_build_vocab(&cfg).unwrap();
        let mem = run_build_memory(&cfg).unwrap();
        run_train(&cfg).unwrap();

        let (params, seed, _) = ParameterStore::load_checkpoint(&cfg.checkpoint).unwrap();
        assert_eq!(seed, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fresh = Model::new(cfg.model.clone(), vocab.size(), &mut rng).unwrap();
        install_memory(&mut fresh, &mem).unwrap();
        // The checkpoint stores 32-bit floats; compare at that precision.
        for (name, tensor) in fresh.params.iter() {
            let saved: Vec<f32> = params.get(name).data().iter().map(|&v| v as f32).collect();
            let init: Vec<f32> = tensor.data().iter().map(|&v| v as f32).collect();
            assert_eq!(saved, init, "{}", name);
        }
    }

    #[test]
    fn same_seed_gives_identical_loss_logs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.model.dropout_rate = 0.2;
        write_fixture_corpus(&cfg.corpus);
        run_build_vocab(&cfg).unwrap();
        run_build_memory(&cfg).unwrap();
        run_train(&cfg).unwrap();
        let first = std::fs::read(&cfg.loss_log).unwrap();
        run_train(&cfg).unwrap();
        let second = std::fs::read(&cfg.loss_log).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn eval_rejects_mismatched_ids() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        write_fixture_corpus(&cfg.corpus);
        write_predictions(
            &cfg.predictions,
            &[PredictionRecord {
                id: "zzz".into(),
                candidates: vec![],
                top_beam: vec![],
                scores: vec![],
            }],
        )
        .unwrap();
        let err = run_eval(&cfg).unwrap_err();
        match err {
            Error::Data(msg) => {
                assert!(msg.contains("zzz"), "{}", msg);
                assert!(msg.contains('a') && msg.contains('b'), "{}", msg);
            }
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn missing_inputs_give_missing_artifact_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        assert!(matches!(
            run_train(&cfg),
            Err(Error::MissingInput { artifact: "corpus", .. })
        ));
        write_fixture_corpus(&cfg.corpus);
        assert!(matches!(
            run_train(&cfg),
            Err(Error::MissingInput { artifact: "vocabulary", .. })
        ));
        run_build_vocab(&cfg).unwrap();
        assert!(matches!(
            run_train(&cfg),
            Err(Error::MissingInput { artifact: "memory", .. })
        ));
        assert!(matches!(
            run_predict(&cfg),
            Err(Error::MissingInput { artifact: "checkpoint", .. })
        ));
    }
}
