//! Stemmed evaluation protocol: present/absent splitting, macro-averaged
//! precision/recall/F1 at fixed and variable cutoffs, recall@k, count error,
//! diversity, and the decoder-state dump.

use std::collections::HashSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{first_occurrence, Document, Vocabulary, EOS};
use crate::decode::PredictionRecord;
use crate::memory::{AddressOptions, DocumentMemory};
use crate::model::{encode_document, step_distribution, Ablations, Model};
use crate::stem::{stem_phrase, stem_tokens};
use crate::{Error, Result};

/// True iff the stemmed phrase occurs as a contiguous subsequence of the
/// stemmed source tokens.
pub fn is_present(phrase: &[String], source_tokens: &[String]) -> bool {
    let needle = stem_tokens(phrase);
    let haystack = stem_tokens(source_tokens);
    first_occurrence(&needle, &haystack).is_some()
}

/// Per-prediction match flags: a prediction matches when its stemmed form
/// equals a gold stemmed form; each gold form is consumed by at most one
/// prediction (first occurrence).
pub fn match_flags(prediction_stems: &[String], gold_stems: &[String]) -> Vec<bool> {
    let mut remaining: Vec<&String> = gold_stems.iter().collect();
    prediction_stems
        .iter()
        .map(|p| match remaining.iter().position(|g| *g == p) {
            Some(i) => {
                remaining.swap_remove(i);
                true
            }
            None => false,
        })
        .collect()
}

/// Evaluation cutoff: a fixed k, M (= number of predictions), or O (= number
/// of gold keyphrases).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cutoff {
    Fixed(usize),
    M,
    O,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall, and F1 of the top-min(k, |preds|) predictions.
/// Precision divides by min(k, |preds|); an empty prediction list scores
/// zero across the board.
pub fn prf_at_k(prediction_stems: &[String], gold_stems: &[String], cutoff: Cutoff) -> Result<Prf> {
    if gold_stems.is_empty() {
        return Err(Error::Data("prf_at_k requires nonempty gold".into()));
    }
    let k = match cutoff {
        Cutoff::Fixed(k) if k >= 1 => k,
        Cutoff::Fixed(_) => return Err(Error::Config("cutoff k must be at least 1".into())),
        Cutoff::M => prediction_stems.len(),
        Cutoff::O => gold_stems.len(),
    };
    let top = k.min(prediction_stems.len());
    if top == 0 {
        return Ok(Prf::default());
    }
    let matches = match_flags(&prediction_stems[..top], gold_stems)
        .iter()
        .filter(|&&m| m)
        .count() as f64;
    let precision = matches / top as f64;
    let recall = matches / gold_stems.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
    })
}

/// Recall of the top-k predictions against the gold set.
pub fn recall_at_k(prediction_stems: &[String], gold_stems: &[String], k: usize) -> Result<f64> {
    Ok(prf_at_k(prediction_stems, gold_stems, Cutoff::Fixed(k))?.recall)
}

/// Mean absolute error between predicted and gold counts, plus the mean
/// predicted count.
pub fn count_mae(pred_counts: &[usize], gold_counts: &[usize]) -> Result<(f64, f64)> {
    if pred_counts.len() != gold_counts.len() {
        return Err(Error::Shape(format!(
            "count lists of length {} and {}",
            pred_counts.len(),
            gold_counts.len()
        )));
    }
    if pred_counts.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = pred_counts.len() as f64;
    let mae = pred_counts
        .iter()
        .zip(gold_counts)
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum::<f64>()
        / n;
    let avg_pred = pred_counts.iter().sum::<usize>() as f64 / n;
    Ok((mae, avg_pred))
}

/// Mean over documents of the number of distinct stemmed candidates.
pub fn avg_unique(per_doc_candidate_stems: &[Vec<String>]) -> f64 {
    if per_doc_candidate_stems.is_empty() {
        return 0.0;
    }
    let total: usize = per_doc_candidate_stems
        .iter()
        .map(|stems| stems.iter().collect::<HashSet<_>>().len())
        .sum();
    total as f64 / per_doc_candidate_stems.len() as f64
}

/// Everything needed to score one document.
#[derive(Debug, Clone)]
pub struct DocEvalInput {
    pub id: String,
    pub source_tokens: Vec<String>,
    pub gold: Vec<Vec<String>>,
    /// Ranked pooled candidates (already stem-deduplicated by decoding).
    pub candidates: Vec<Vec<String>>,
    /// Phrases of the single best hypothesis.
    pub top_beam: Vec<Vec<String>>,
}

impl DocEvalInput {
    pub fn from_prediction(doc: &Document, record: &PredictionRecord) -> Self {
        let split =
            |phrases: &[String]| -> Vec<Vec<String>> {
                phrases
                    .iter()
                    .map(|p| p.split_whitespace().map(str::to_string).collect())
                    .collect()
            };
        DocEvalInput {
            id: doc.id.clone(),
            source_tokens: doc.source_tokens.clone(),
            gold: doc.gold_keyphrases.clone(),
            candidates: split(&record.candidates),
            top_beam: split(&record.top_beam),
        }
    }
}

/// Macro-averaged metrics for one split (present or absent).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct SplitMetrics {
    pub f1_at_5: f64,
    pub f1_at_10: f64,
    pub f1_at_m: f64,
    pub f1_at_o: f64,
    pub r_at_10: f64,
    pub r_at_50: f64,
    pub count_mae: f64,
    pub avg_pred_count: f64,
    /// Documents with at least one gold keyphrase in this split.
    pub doc_count: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub present: SplitMetrics,
    pub absent: SplitMetrics,
    pub avg_unique_predictions: f64,
    pub doc_count: usize,
}

#[derive(Default)]
struct SplitAccumulator {
    f1_at_5: f64,
    f1_at_10: f64,
    f1_at_m: f64,
    f1_at_o: f64,
    r_at_10: f64,
    r_at_50: f64,
    pred_counts: Vec<usize>,
    gold_counts: Vec<usize>,
}

impl SplitAccumulator {
    fn add(
        &mut self,
        candidate_stems: &[String],
        top_beam_stems: &[String],
        gold_stems: &[String],
    ) -> Result<()> {
        self.f1_at_5 += prf_at_k(candidate_stems, gold_stems, Cutoff::Fixed(5))?.f1;
        self.f1_at_10 += prf_at_k(candidate_stems, gold_stems, Cutoff::Fixed(10))?.f1;
        // Variable cutoffs score the model's own prediction set (the best
        // hypothesis), not the pooled beam.
        self.f1_at_m += prf_at_k(top_beam_stems, gold_stems, Cutoff::M)?.f1;
        self.f1_at_o += prf_at_k(top_beam_stems, gold_stems, Cutoff::O)?.f1;
        self.r_at_10 += recall_at_k(candidate_stems, gold_stems, 10)?;
        self.r_at_50 += recall_at_k(candidate_stems, gold_stems, 50)?;
        self.pred_counts.push(top_beam_stems.len());
        self.gold_counts.push(gold_stems.len());
        Ok(())
    }

    fn finish(self) -> Result<SplitMetrics> {
        let n = self.pred_counts.len();
        if n == 0 {
            return Ok(SplitMetrics::default());
        }
        let (count_mae, avg_pred_count) = count_mae(&self.pred_counts, &self.gold_counts)?;
        let d = n as f64;
        Ok(SplitMetrics {
            f1_at_5: self.f1_at_5 / d,
            f1_at_10: self.f1_at_10 / d,
            f1_at_m: self.f1_at_m / d,
            f1_at_o: self.f1_at_o / d,
            r_at_10: self.r_at_10 / d,
            r_at_50: self.r_at_50 / d,
            count_mae,
            avg_pred_count,
            doc_count: n,
        })
    }
}

fn dedup_stems(phrases: &[Vec<String>]) -> (Vec<String>, Vec<bool>) {
    // Stems plus per-phrase presence flags are computed together later; here
    // just dedup while keeping order.
    let mut seen = HashSet::new();
    let mut stems = Vec::new();
    let mut kept = Vec::new();
    for phrase in phrases {
        let stem = stem_phrase(phrase);
        let fresh = seen.insert(stem.clone());
        kept.push(fresh);
        if fresh {
            stems.push(stem);
        }
    }
    (stems, kept)
}

/// Macro-averaged evaluation over a corpus. Both gold keyphrases and
/// predictions are split into present/absent against the source; documents
/// with no gold keyphrase in a split are excluded from that split's macro
/// average.
pub fn evaluate(docs: &[DocEvalInput]) -> Result<EvalReport> {
    let mut present = SplitAccumulator::default();
    let mut absent = SplitAccumulator::default();
    let mut diversity: Vec<Vec<String>> = Vec::new();

    for doc in docs {
        let split_phrases = |phrases: &[Vec<String>]| -> (Vec<String>, Vec<String>) {
            let (stems, kept) = dedup_stems(phrases);
            let mut iter = stems.into_iter();
            let mut pres = Vec::new();
            let mut abs = Vec::new();
            for (phrase, fresh) in phrases.iter().zip(kept) {
                if !fresh {
                    continue;
                }
                let stem = iter.next().expect("stem per kept phrase");
                if is_present(phrase, &doc.source_tokens) {
                    pres.push(stem);
                } else {
                    abs.push(stem);
                }
            }
            (pres, abs)
        };

        let (gold_present, gold_absent) = split_phrases(&doc.gold);
        let (cand_present, cand_absent) = split_phrases(&doc.candidates);
        let (beam_present, beam_absent) = split_phrases(&doc.top_beam);

        if !gold_present.is_empty() {
            present.add(&cand_present, &beam_present, &gold_present)?;
        }
        if !gold_absent.is_empty() {
            absent.add(&cand_absent, &beam_absent, &gold_absent)?;
        }
        let (all_stems, _) = dedup_stems(&doc.candidates);
        diversity.push(all_stems);
    }

    Ok(EvalReport {
        present: present.finish()?,
        absent: absent.finish()?,
        avg_unique_predictions: avg_unique(&diversity),
        doc_count: docs.len(),
    })
}

impl EvalReport {
    /// Flat key-value rendering, one metric per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, split) in [("present", &self.present), ("absent", &self.absent)] {
            for (metric, value) in [
                ("f1@5", split.f1_at_5),
                ("f1@10", split.f1_at_10),
                ("f1@M", split.f1_at_m),
                ("f1@O", split.f1_at_o),
                ("r@10", split.r_at_10),
                ("r@50", split.r_at_50),
                ("count_mae", split.count_mae),
                ("avg_pred_count", split.avg_pred_count),
            ] {
                out.push_str(&format!("{}.{} = {:.4}\n", name, metric, value));
            }
            out.push_str(&format!("{}.doc_count = {}\n", name, split.doc_count));
        }
        out.push_str(&format!(
            "diversity.avg_unique = {:.4}\n",
            self.avg_unique_predictions
        ));
        out.push_str(&format!("doc_count = {}\n", self.doc_count));
        out
    }

    /// Write the text report and a JSON mirror next to it (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        let mirror = path.with_extension(match path.extension() {
            Some(ext) => format!("{}.json", ext.to_string_lossy()),
            None => "json".to_string(),
        });
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("report serialization: {}", e)))?;
        std::fs::write(mirror, json)?;
        Ok(())
    }
}

/// Final-decoder-layer output vectors for the first `steps` greedy decoding
/// steps of each document, as tab-separated values with a header.
pub fn dump_decoder_states(
    path: &Path,
    docs: &[Document],
    model: &Model,
    vocab: &Vocabulary,
    mem: Option<&DocumentMemory>,
    steps: usize,
    ablations: Ablations,
) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "doc_id\tstep")?;
    for i in 0..model.config.hidden_dim {
        write!(out, "\tv{}", i)?;
    }
    writeln!(out)?;
    for doc in docs {
        let enc = encode_document(model, vocab, doc, mem, &AddressOptions::default(), ablations)?;
        let mut prefix: Vec<usize> = Vec::new();
        for step in 1..=steps {
            let state = crate::model::decode_step(model, &enc.fused, &prefix)?;
            write!(out, "{}\t{}", doc.id, step)?;
            for v in &state.output {
                write!(out, "\t{}", v)?;
            }
            writeln!(out)?;
            let dist = step_distribution(model, &enc, &prefix, ablations)?;
            let next = crate::model::argmax(&dist);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn phrase(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn stems(phrases: &[&str]) -> Vec<String> {
        phrases
            .iter()
            .map(|p| stem_phrase(&phrase(&p.split(' ').collect::<Vec<_>>())))
            .collect()
    }

    #[test]
    fn presence_is_a_stemmed_contiguous_match() {
        let source = phrase(&["we", "study", "meaning", "processing", "in", "context"]);
        assert!(is_present(&phrase(&["meaning", "processing"]), &source));
        // Stemmed match: "processes" stems like "processing".
        assert!(is_present(&phrase(&["meaning", "processes"]), &source));
        // Non-contiguous pair is absent.
        assert!(!is_present(&phrase(&["study", "processing"]), &source));
        assert!(!is_present(&phrase(&["information", "retrieval"]), &source));
        // The entire source is trivially present.
        assert!(is_present(&source, &source));
    }

    #[test]
    fn match_consumes_each_gold_once() {
        let preds = stems(&["neural networks", "neural network", "graphs"]);
        let gold = stems(&["neural network"]);
        // Both predictions stem identically, but gold is consumed once.
        assert_eq!(match_flags(&preds, &gold), vec![true, false, false]);

        let preds = stems(&["language processing"]);
        let gold = stems(&["language processing"]);
        assert_eq!(match_flags(&preds, &gold), vec![true]);

        assert_eq!(
            match_flags(&stems(&["alpha"]), &stems(&["beta"])),
            vec![false]
        );
    }

    #[test]
    fn prf_hand_case() {
        // 5 predictions, 2 match, |gold| = 4, k = 5.
        let preds = stems(&["a", "b", "c", "d", "e"]);
        let gold = stems(&["a", "c", "f", "g"]);
        let prf = prf_at_k(&preds, &gold, Cutoff::Fixed(5)).unwrap();
        assert_relative_eq!(prf.precision, 0.4, epsilon = 1e-12);
        assert_relative_eq!(prf.recall, 0.5, epsilon = 1e-12);
        assert_relative_eq!(prf.f1, 0.4444, epsilon = 1e-4);
    }

    #[test]
    fn prf_perfect_and_empty() {
        let gold = stems(&["alpha", "beta"]);
        let prf = prf_at_k(&gold.clone(), &gold, Cutoff::O).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
        let prf = prf_at_k(&[], &gold, Cutoff::Fixed(5)).unwrap();
        assert_eq!(prf, Prf::default());
        assert!(prf_at_k(&gold.clone(), &[], Cutoff::Fixed(5)).is_err());
        assert!(prf_at_k(&gold.clone(), &gold, Cutoff::Fixed(0)).is_err());
    }

    #[test]
    fn prf_mode_equivalences() {
        let preds = stems(&["a", "b", "c"]);
        let gold = stems(&["b", "d"]);
        // Mode M equals fixed k = |preds|; mode O equals fixed k = |gold|.
        assert_eq!(
            prf_at_k(&preds, &gold, Cutoff::M).unwrap(),
            prf_at_k(&preds, &gold, Cutoff::Fixed(3)).unwrap()
        );
        assert_eq!(
            prf_at_k(&preds, &gold, Cutoff::O).unwrap(),
            prf_at_k(&preds, &gold, Cutoff::Fixed(2)).unwrap()
        );
    }

    #[test]
    fn recall_cases() {
        let gold = stems(&["a", "b", "c", "d"]);
        // All gold inside the top 10.
        let preds = stems(&["a", "b", "c", "d", "x"]);
        assert_eq!(recall_at_k(&preds, &gold, 10).unwrap(), 1.0);
        // Exactly one of four found.
        let preds = stems(&["a", "x", "y"]);
        assert_eq!(recall_at_k(&preds, &gold, 10).unwrap(), 0.25);
        assert_eq!(recall_at_k(&[], &gold, 10).unwrap(), 0.0);
    }

    #[test]
    fn count_mae_cases() {
        // Oracle: predicted counts equal gold counts.
        let (mae, _) = count_mae(&[2, 4, 1], &[2, 4, 1]).unwrap();
        assert_eq!(mae, 0.0);
        // Every document off by one.
        let (mae, _) = count_mae(&[3, 5, 2], &[2, 4, 1]).unwrap();
        assert_eq!(mae, 1.0);
        let (mae, avg) = count_mae(&[3, 5], &[2, 2]).unwrap();
        assert_eq!(mae, 2.0);
        assert_eq!(avg, 4.0);
        assert!(count_mae(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn avg_unique_cases() {
        assert_eq!(
            avg_unique(&[stems(&["a", "b", "c"]), stems(&["d", "e", "f"])]),
            3.0
        );
        // "process" and "processing" share a stem.
        assert_eq!(
            avg_unique(&[stems(&["process", "processing"]), stems(&["y", "z"])]),
            1.5
        );
        assert_eq!(avg_unique(&[]), 0.0);
    }

    fn doc_input(
        id: &str,
        source: &[&str],
        gold: &[&str],
        candidates: &[&str],
        top_beam: &[&str],
    ) -> DocEvalInput {
        let to_phrases = |list: &[&str]| -> Vec<Vec<String>> {
            list.iter()
                .map(|p| p.split(' ').map(str::to_string).collect())
                .collect()
        };
        DocEvalInput {
            id: id.to_string(),
            source_tokens: phrase(source),
            gold: to_phrases(gold),
            candidates: to_phrases(candidates),
            top_beam: to_phrases(top_beam),
        }
    }

    #[test]
    fn gold_split_partitions() {
        let doc = doc_input(
            "d",
            &["graph", "spectral", "clustering"],
            &["spectral clustering", "laplacian matrix"],
            &[],
            &[],
        );
        let present: Vec<bool> = doc
            .gold
            .iter()
            .map(|g| is_present(g, &doc.source_tokens))
            .collect();
        assert_eq!(present, vec![true, false]);
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let doc = doc_input(
            "d",
            &["deep", "metric", "learning", "with", "triplets"],
            &["metric learning", "triplet loss"],
            &["metric learning", "triplet loss"],
            &["metric learning", "triplet loss"],
        );
        let report = evaluate(std::slice::from_ref(&doc)).unwrap();
        assert_eq!(report.present.f1_at_m, 1.0);
        assert_eq!(report.present.f1_at_o, 1.0);
        assert_eq!(report.present.count_mae, 0.0);
        assert_eq!(report.absent.f1_at_m, 1.0);
        assert_eq!(report.absent.count_mae, 0.0);
        assert_eq!(report.avg_unique_predictions, 2.0);
    }

    #[test]
    fn macro_average_is_duplication_invariant() {
        let a = || {
            doc_input(
                "a",
                &["kernel", "methods"],
                &["kernel methods", "support vectors"],
                &["kernel methods", "margins"],
                &["kernel methods"],
            )
        };
        let b = || {
            doc_input(
                "b",
                &["query", "expansion"],
                &["query expansion"],
                &["query expansion", "retrieval"],
                &["query expansion", "retrieval"],
            )
        };
        let single = evaluate(&[a(), b()]).unwrap();
        let doubled = evaluate(&[a(), b(), a(), b()]).unwrap();
        assert_relative_eq!(single.present.f1_at_5, doubled.present.f1_at_5, epsilon = 1e-12);
        assert_relative_eq!(single.present.f1_at_m, doubled.present.f1_at_m, epsilon = 1e-12);
        assert_relative_eq!(single.absent.f1_at_o, doubled.absent.f1_at_o, epsilon = 1e-12);
        assert_relative_eq!(
            single.avg_unique_predictions,
            doubled.avg_unique_predictions,
            epsilon = 1e-12
        );
        assert_relative_eq!(single.present.count_mae, doubled.present.count_mae, epsilon = 1e-12);
    }

    #[test]
    fn docs_without_split_gold_are_excluded() {
        // Only present gold: the absent split sees no documents.
        let doc = doc_input(
            "d",
            &["topic", "models"],
            &["topic models"],
            &["topic models"],
            &["topic models"],
        );
        let report = evaluate(std::slice::from_ref(&doc)).unwrap();
        assert_eq!(report.present.doc_count, 1);
        assert_eq!(report.absent.doc_count, 0);
        assert_eq!(report.absent, SplitMetrics::default());
    }

    #[test]
    fn report_text_format() {
        let doc = doc_input(
            "d",
            &["topic", "models"],
            &["topic models"],
            &["topic models"],
            &["topic models"],
        );
        let report = evaluate(std::slice::from_ref(&doc)).unwrap();
        let text = report.to_text();
        assert!(text.contains("present.f1@5 = 1.0000"));
        assert!(text.contains("absent.f1@M = 0.0000"));
        assert!(text.contains("diversity.avg_unique = 1.0000"));
        assert!(text.lines().all(|l| l.contains(" = ")));
    }

    #[test]
    fn report_save_writes_json_mirror() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.txt");
        let report = EvalReport {
            doc_count: 3,
            ..Default::default()
        };
        report.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("doc_count = 3"));
        let json = std::fs::read_to_string(dir.path().join("report.txt.json")).unwrap();
        let loaded: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(loaded, report);
    }
}
