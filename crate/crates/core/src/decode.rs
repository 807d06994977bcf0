//! Beam-search generation of the joined keyphrase sequence, phrase
//! extraction, stem-level deduplication, and candidate ranking.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ExtendedVocabulary, Vocabulary, EOS, SEP};
use crate::model::{step_distribution, Ablations, EncodedDocument, Model};
use crate::stem::stem_phrase;
use crate::{Error, Result};

/// One partial or finished output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Extended-vocabulary ids emitted after BOS (EOS included when
    /// finished).
    pub ids: Vec<usize>,
    /// Sum of per-step log mixture probabilities.
    pub score: f64,
    /// True once EOS was emitted; finished hypotheses are never extended.
    pub finished: bool,
}

/// Descending score, ties broken by lexicographically smaller token ids.
fn hypothesis_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Standard beam search over the mixture distribution. Scores are raw
/// log-probability sums (no length normalization); hypotheses finish at EOS
/// or are truncated at `max_len`; the result is sorted by descending score
/// with ties broken by token ids.
pub fn beam_search(
    model: &Model,
    enc: &EncodedDocument,
    beam_size: usize,
    max_len: usize,
    ablations: Ablations,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let max_len = max_len.min(model.config.max_target_len);
    let mut beams = vec![Hypothesis {
        ids: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    loop {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        let mut extended_any = false;
        for hyp in &beams {
            if hyp.finished || hyp.ids.len() >= max_len {
                candidates.push(hyp.clone());
                continue;
            }
            extended_any = true;
            let dist = step_distribution(model, enc, &hyp.ids, ablations)?;
            for (token, &p) in dist.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let mut ids = hyp.ids.clone();
                ids.push(token);
                candidates.push(Hypothesis {
                    ids,
                    score: hyp.score + p.ln(),
                    finished: token == EOS,
                });
            }
        }
        candidates.sort_by(hypothesis_order);
        candidates.truncate(beam_size);
        beams = candidates;
        if !extended_any {
            break;
        }
    }
    Ok(beams)
}

/// Split a hypothesis into phrases: stop at EOS, split on SEP, drop empty
/// phrases. Extended ids surface as their source words.
pub fn extract_phrases(
    hypothesis: &Hypothesis,
    vocab: &Vocabulary,
    ext: &ExtendedVocabulary,
) -> Vec<Vec<String>> {
    let mut phrases = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for &id in &hypothesis.ids {
        match id {
            EOS => break,
            SEP => {
                if !current.is_empty() {
                    phrases.push(std::mem::take(&mut current));
                }
            }
            _ => current.push(ext.word(vocab, id).to_string()),
        }
    }
    if !current.is_empty() {
        phrases.push(current);
    }
    phrases
}

/// Ranked, stem-deduplicated candidates plus the best hypothesis's phrases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    /// Phrases in (hypothesis score descending, emission position ascending)
    /// order, deduplicated by stemmed form keeping the first occurrence.
    pub candidates: Vec<Vec<String>>,
    /// Source-hypothesis score per candidate.
    pub scores: Vec<f64>,
    /// Deduplicated phrases of the single best hypothesis, emission order.
    pub top_beam: Vec<Vec<String>>,
}

pub fn rank_predictions(
    hypotheses: &[Hypothesis],
    vocab: &Vocabulary,
    ext: &ExtendedVocabulary,
) -> PredictionSet {
    let mut ordered: Vec<&Hypothesis> = hypotheses.iter().collect();
    ordered.sort_by(|a, b| hypothesis_order(a, b));

    let mut seen = std::collections::HashSet::new();
    let mut set = PredictionSet::default();
    for (rank, hyp) in ordered.iter().enumerate() {
        for phrase in extract_phrases(hyp, vocab, ext) {
            let stem = stem_phrase(&phrase);
            if seen.insert(stem.clone()) {
                set.candidates.push(phrase.clone());
                set.scores.push(hyp.score);
            }
            if rank == 0 && set.top_beam.iter().all(|p| stem_phrase(p) != stem) {
                set.top_beam.push(phrase);
            }
        }
    }
    set
}

/// One line of the prediction file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    /// Space-joined candidate phrases, ranked.
    pub candidates: Vec<String>,
    /// Space-joined phrases of the best hypothesis.
    pub top_beam: Vec<String>,
    /// Source-hypothesis score per candidate.
    pub scores: Vec<f64>,
}

impl PredictionRecord {
    pub fn from_set(id: &str, set: &PredictionSet) -> Self {
        PredictionRecord {
            id: id.to_string(),
            candidates: set.candidates.iter().map(|p| p.join(" ")).collect(),
            top_beam: set.top_beam.iter().map(|p| p.join(" ")).collect(),
            scores: set.scores.clone(),
        }
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| Error::Parse(format!("prediction serialization: {}", e)))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let reader = BufReader::new(std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput {
                artifact: "predictions",
                path: path.display().to_string(),
            }
        } else {
            Error::Io(e)
        }
    })?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{}:{}: {}", path.display(), lineno + 1, e))
        })?);
    }
    Ok(records)
}

/// Brute-force best sequence by full tree enumeration; reference oracle for
/// beam search on tiny models.
pub fn exhaustive_best(
    model: &Model,
    enc: &EncodedDocument,
    max_len: usize,
    ablations: Ablations,
) -> Result<Hypothesis> {
    fn walk(
        model: &Model,
        enc: &EncodedDocument,
        max_len: usize,
        ablations: Ablations,
        prefix: &mut Vec<usize>,
        score: f64,
        best: &mut Option<Hypothesis>,
    ) -> Result<()> {
        let finished = prefix.last() == Some(&EOS);
        if finished || prefix.len() >= max_len {
            let hyp = Hypothesis {
                ids: prefix.clone(),
                score,
                finished,
            };
            let better = match best {
                Some(b) => hypothesis_order(&hyp, b) == std::cmp::Ordering::Less,
                None => true,
            };
            if better {
                *best = Some(hyp);
            }
            return Ok(());
        }
        let dist = step_distribution(model, enc, prefix, ablations)?;
        for (token, &p) in dist.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            prefix.push(token);
            walk(model, enc, max_len, ablations, prefix, score + p.ln(), best)?;
            prefix.pop();
        }
        Ok(())
    }
    let max_len = max_len.min(model.config.max_target_len);
    let mut best = None;
    walk(model, enc, max_len, ablations, &mut Vec::new(), 0.0, &mut best)?;
    best.ok_or_else(|| Error::Numeric("no admissible sequence".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, extend_vocabulary, ingest, RawRecord};
    use crate::memory::AddressOptions;
    use crate::model::{encode_document, ModelConfig};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup(seed: u64) -> (Model, Vocabulary, EncodedDocument) {
        let doc = ingest(&RawRecord {
            id: "d".into(),
            title: "ant bee".into(),
            abstract_text: "bee ant".into(),
            keyphrases: vec!["ant".into()],
        })
        .unwrap();
        let vocab = build_vocabulary(std::slice::from_ref(&doc), 10);
        let config = ModelConfig {
            layer_count: 1,
            head_count: 2,
            hidden_dim: 8,
            max_input_len: 8,
            max_target_len: 8,
            dropout_rate: 0.0,
            vocab_cap: 10,
            beam_size: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(config, vocab.size(), &mut rng).unwrap();
        let enc = encode_document(
            &model,
            &vocab,
            &doc,
            None,
            &AddressOptions::default(),
            Ablations::default(),
        )
        .unwrap();
        (model, vocab, enc)
    }

    #[test]
    fn beam_one_equals_greedy_rollout() {
        let (model, _vocab, enc) = tiny_setup(41);
        let beams = beam_search(&model, &enc, 1, 5, Ablations::default()).unwrap();
        assert_eq!(beams.len(), 1);

        let mut greedy = Vec::new();
        let mut score = 0.0;
        for _ in 0..5 {
            let dist = step_distribution(&model, &enc, &greedy, Ablations::default()).unwrap();
            let best = crate::model::argmax(&dist);
            score += dist[best].ln();
            greedy.push(best);
            if best == EOS {
                break;
            }
        }
        assert_eq!(beams[0].ids, greedy);
        assert_relative_eq!(beams[0].score, score, epsilon = 1e-12);
    }

    #[test]
    fn wide_beam_matches_exhaustive_enumeration() {
        let (model, _vocab, enc) = tiny_setup(43);
        let max_len = 3;
        let beams = beam_search(&model, &enc, 4096, max_len, Ablations::default()).unwrap();
        let best = exhaustive_best(&model, &enc, max_len, Ablations::default()).unwrap();
        assert_eq!(beams[0].ids, best.ids);
        assert_relative_eq!(beams[0].score, best.score, epsilon = 1e-9);
    }

    #[test]
    fn scores_are_monotonically_nonincreasing() {
        let (model, _vocab, enc) = tiny_setup(47);
        let beams = beam_search(&model, &enc, 3, 6, Ablations::default()).unwrap();
        for hyp in &beams {
            // log probabilities are ≤ 0, so any prefix scores at least as
            // high as the full sequence.
            assert!(hyp.score <= 0.0);
        }
        // Sorted by descending score.
        for pair in beams.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    fn word_ids(vocab: &Vocabulary, ext: &ExtendedVocabulary, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| ext.id(vocab, w).unwrap()).collect()
    }

    #[test]
    fn extract_phrases_splits_on_sep_and_stops_at_eos() {
        let doc = ingest(&RawRecord {
            id: "d".into(),
            title: "meaning processing".into(),
            abstract_text: "information retrieval".into(),
            keyphrases: vec!["meaning".into()],
        })
        .unwrap();
        let vocab = build_vocabulary(std::slice::from_ref(&doc), 50);
        let ext = extend_vocabulary(&vocab, &doc.source_tokens);

        let mut ids = word_ids(&vocab, &ext, &["meaning", "processing"]);
        ids.push(SEP);
        ids.extend(word_ids(&vocab, &ext, &["information", "retrieval"]));
        ids.push(EOS);
        let hyp = Hypothesis {
            ids,
            score: -1.0,
            finished: true,
        };
        let phrases = extract_phrases(&hyp, &vocab, &ext);
        assert_eq!(
            phrases,
            vec![
                vec!["meaning".to_string(), "processing".to_string()],
                vec!["information".to_string(), "retrieval".to_string()],
            ]
        );

        // Only separators and EOS: nothing extracted.
        let empty = Hypothesis {
            ids: vec![SEP, SEP, EOS],
            score: 0.0,
            finished: true,
        };
        assert!(extract_phrases(&empty, &vocab, &ext).is_empty());
    }

    #[test]
    fn novel_ids_surface_as_source_words() {
        let doc = ingest(&RawRecord {
            id: "d".into(),
            title: "the synthesis of the framework".into(),
            abstract_text: "the zeolite".into(),
            keyphrases: vec!["zeolite".into()],
        })
        .unwrap();
        // Cap of one keeps only the most frequent word; "zeolite" is novel.
        let vocab = build_vocabulary(std::slice::from_ref(&doc), 1);
        let ext = extend_vocabulary(&vocab, &doc.source_tokens);
        let novel_id = ext.id(&vocab, "zeolite").unwrap();
        assert!(novel_id >= vocab.size());
        let hyp = Hypothesis {
            ids: vec![novel_id, EOS],
            score: 0.0,
            finished: true,
        };
        let phrases = extract_phrases(&hyp, &vocab, &ext);
        assert_eq!(phrases, vec![vec!["zeolite".to_string()]]);
    }

    #[test]
    fn rank_predictions_dedups_by_stem_keeping_higher_score() {
        let doc = ingest(&RawRecord {
            id: "d".into(),
            title: "processing process".into(),
            abstract_text: "signal data".into(),
            keyphrases: vec!["processing".into()],
        })
        .unwrap();
        let vocab = build_vocabulary(std::slice::from_ref(&doc), 50);
        let ext = extend_vocabulary(&vocab, &doc.source_tokens);

        let better = Hypothesis {
            ids: {
                let mut v = word_ids(&vocab, &ext, &["processing"]);
                v.push(SEP);
                v.extend(word_ids(&vocab, &ext, &["signal"]));
                v.push(EOS);
                v
            },
            score: -0.5,
            finished: true,
        };
        let worse = Hypothesis {
            ids: {
                let mut v = word_ids(&vocab, &ext, &["process"]);
                v.push(SEP);
                v.extend(word_ids(&vocab, &ext, &["data"]));
                v.push(EOS);
                v
            },
            score: -2.0,
            finished: true,
        };
        // Input order should not matter; ranking sorts by score.
        let set = rank_predictions(&[worse, better], &vocab, &ext);
        assert_eq!(
            set.candidates,
            vec![
                vec!["processing".to_string()],
                vec!["signal".to_string()],
                vec!["data".to_string()],
            ]
        );
        assert_eq!(set.scores, vec![-0.5, -0.5, -2.0]);
        assert_eq!(
            set.top_beam,
            vec![vec!["processing".to_string()], vec!["signal".to_string()]]
        );
    }

    #[test]
    fn rank_predictions_single_and_empty() {
        let doc = ingest(&RawRecord {
            id: "d".into(),
            title: "alpha beta".into(),
            abstract_text: "gamma".into(),
            keyphrases: vec!["alpha".into()],
        })
        .unwrap();
        let vocab = build_vocabulary(std::slice::from_ref(&doc), 50);
        let ext = extend_vocabulary(&vocab, &doc.source_tokens);
        let hyp = Hypothesis {
            ids: {
                let mut v = word_ids(&vocab, &ext, &["alpha"]);
                v.push(SEP);
                v.extend(word_ids(&vocab, &ext, &["beta"]));
                v.push(EOS);
                v
            },
            score: -1.0,
            finished: true,
        };
        let set = rank_predictions(std::slice::from_ref(&hyp), &vocab, &ext);
        assert_eq!(set.candidates.len(), 2);
        assert_eq!(set.candidates, set.top_beam);

        let empty = Hypothesis {
            ids: vec![SEP, EOS],
            score: 0.0,
            finished: true,
        };
        let set = rank_predictions(&[empty], &vocab, &ext);
        assert_eq!(set, PredictionSet::default());
    }

    /// Re-ranking the ranked output changes nothing.
    #[test]
    fn dedup_is_idempotent() {
        let doc = ingest(&RawRecord {
            id: "d".into(),
            title: "alpha beta gamma".into(),
            abstract_text: "delta".into(),
            keyphrases: vec!["alpha".into()],
        })
        .unwrap();
        let vocab = build_vocabulary(std::slice::from_ref(&doc), 50);
        let ext = extend_vocabulary(&vocab, &doc.source_tokens);
        let hyps = vec![
            Hypothesis {
                ids: {
                    let mut v = word_ids(&vocab, &ext, &["alpha", "beta"]);
                    v.push(SEP);
                    v.extend(word_ids(&vocab, &ext, &["gamma"]));
                    v.push(EOS);
                    v
                },
                score: -0.3,
                finished: true,
            },
            Hypothesis {
                ids: {
                    let mut v = word_ids(&vocab, &ext, &["gamma"]);
                    v.push(SEP);
                    v.extend(word_ids(&vocab, &ext, &["delta"]));
                    v.push(EOS);
                    v
                },
                score: -1.7,
                finished: true,
            },
        ];
        let first = rank_predictions(&hyps, &vocab, &ext);
        // Feed the candidates back in as single-phrase hypotheses with the
        // same scores.
        let again: Vec<Hypothesis> = first
            .candidates
            .iter()
            .zip(&first.scores)
            .map(|(phrase, &score)| Hypothesis {
                ids: {
                    let mut v: Vec<usize> =
                        phrase.iter().map(|w| ext.id(&vocab, w).unwrap()).collect();
                    v.push(EOS);
                    v
                },
                score,
                finished: true,
            })
            .collect();
        let second = rank_predictions(&again, &vocab, &ext);
        assert_eq!(second.candidates, first.candidates);
        assert_eq!(second.scores, first.scores);
    }

    #[test]
    fn prediction_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.jsonl");
        let records = vec![PredictionRecord {
            id: "doc-1".into(),
            candidates: vec!["neural networks".into(), "graph theory".into()],
            top_beam: vec!["neural networks".into()],
            scores: vec![-0.25, -1.5],
        }];
        write_predictions(&path, &records).unwrap();
        let loaded = load_predictions(&path).unwrap();
        assert_eq!(loaded, records);

        let missing = load_predictions(&dir.path().join("nope.jsonl"));
        assert!(matches!(
            missing,
            Err(Error::MissingInput { artifact: "predictions", .. })
        ));
    }
}
