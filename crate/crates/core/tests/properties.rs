//! Property tests for the spec-level invariants that hold on arbitrary
//! inputs rather than hand-picked fixtures.

use proptest::prelude::*;

use kpgen_core::corpus::{
    build_target_sequence, build_vocabulary, extend_vocabulary, ingest, preprocess_text,
    Document, RawRecord, EOS, SEP,
};
use kpgen_core::eval::{evaluate, match_flags, prf_at_k, Cutoff, DocEvalInput};
use kpgen_core::nn::softmax;
use kpgen_core::stem::{porter_stem, stem_phrase};

const POOL: [&str; 12] = [
    "graph", "kernel", "topic", "query", "signal", "image", "speech", "protein", "sparse",
    "deep", "robust", "latent",
];

fn word() -> impl Strategy<Value = String> {
    proptest::sample::select(&POOL[..]).prop_map(str::to_string)
}

fn tokens(max_len: usize) -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(word(), 1..max_len)
}

fn corpus_doc() -> impl Strategy<Value = Document> {
    (tokens(12), 0usize..8).prop_map(|(source, start)| {
        let start = start.min(source.len() - 1);
        let end = (start + 2).min(source.len());
        let gold = source[start..end].join(" ");
        ingest(&RawRecord {
            id: "prop".into(),
            title: source[..1].join(" "),
            abstract_text: source[1..].join(" "),
            keyphrases: vec![gold],
        })
        .expect("nonempty record")
    })
}

proptest! {
    /// Re-tokenizing the joined token stream changes nothing.
    #[test]
    fn preprocess_is_idempotent(raw in "\\PC{0,80}") {
        let once = preprocess_text(&raw);
        let twice = preprocess_text(&once.join(" "));
        prop_assert_eq!(once, twice);
    }

    /// Softmax normalizes and is invariant to a constant logit shift.
    #[test]
    fn softmax_normalizes_and_shifts(
        logits in proptest::collection::vec(-30.0f64..30.0, 1..20),
        shift in -50.0f64..50.0,
    ) {
        let p = softmax(&logits).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    /// Every source position gets exactly one extended id; ids at or above
    /// the base size appear only for out-of-vocabulary words, numbered by
    /// first occurrence.
    #[test]
    fn extended_vocabulary_invariants(doc in corpus_doc(), cap in 1usize..8) {
        let vocab = build_vocabulary(std::slice::from_ref(&doc), cap);
        let ext = extend_vocabulary(&vocab, &doc.source_tokens);
        prop_assert_eq!(ext.position_map().len(), doc.source_tokens.len());
        let mut next_novel = vocab.size();
        for (pos, &id) in ext.position_map().iter().enumerate() {
            let token = &doc.source_tokens[pos];
            prop_assert!(id < ext.size());
            match vocab.id(token) {
                Some(base) => prop_assert_eq!(id, base),
                None => {
                    prop_assert!(id >= vocab.size());
                    if id == next_novel {
                        next_novel += 1;
                    }
                    prop_assert!(id < next_novel, "novel ids numbered by first occurrence");
                }
            }
            // The id resolves back to the same surface word.
            prop_assert_eq!(ext.word(&vocab, id), token.as_str());
            prop_assert_eq!(ext.id(&vocab, token), Some(id));
        }
    }

    /// Decoding a target sequence through the extended vocabulary and
    /// re-splitting on SEP reproduces the ordered phrase list.
    #[test]
    fn target_sequence_round_trip(doc in corpus_doc(), cap in 1usize..8) {
        let vocab = build_vocabulary(std::slice::from_ref(&doc), cap);
        let ext = extend_vocabulary(&vocab, &doc.source_tokens);
        let target = build_target_sequence(&doc, &vocab, &ext).unwrap();

        prop_assert_eq!(target.ids.last(), Some(&EOS));
        prop_assert_eq!(target.ids.iter().filter(|&&id| id == EOS).count(), 1);

        let mut phrases: Vec<Vec<String>> = vec![Vec::new()];
        for &id in &target.ids[..target.ids.len() - 1] {
            if id == SEP {
                phrases.push(Vec::new());
            } else {
                phrases.last_mut().unwrap().push(ext.word(&vocab, id).to_string());
            }
        }
        // Gold phrases here are contiguous source slices, so every word has
        // an extended id and the round trip is exact up to reordering.
        prop_assert_eq!(phrases.len(), doc.gold_keyphrases.len());
        for phrase in &phrases {
            prop_assert!(doc.gold_keyphrases.contains(phrase));
        }
        prop_assert!(target.present_count <= doc.gold_keyphrases.len());
    }

    /// Each gold form is consumed by at most one prediction.
    #[test]
    fn match_flags_consume_gold_once(
        preds in proptest::collection::vec(word(), 0..10),
        gold in proptest::collection::vec(word(), 0..6),
    ) {
        let pred_stems: Vec<String> = preds.iter().map(|w| porter_stem(w)).collect();
        let gold_stems: Vec<String> = gold.iter().map(|w| porter_stem(w)).collect();
        let flags = match_flags(&pred_stems, &gold_stems);
        prop_assert_eq!(flags.len(), pred_stems.len());
        let matched = flags.iter().filter(|&&f| f).count();
        prop_assert!(matched <= gold_stems.len());
        // Multiset intersection size, computed independently.
        let mut remaining = gold_stems.clone();
        let mut expected = 0;
        for p in &pred_stems {
            if let Some(i) = remaining.iter().position(|g| g == p) {
                remaining.swap_remove(i);
                expected += 1;
            }
        }
        prop_assert_eq!(matched, expected);
    }

    /// The M cutoff equals a fixed cutoff at the prediction count, and the
    /// O cutoff equals a fixed cutoff at the gold count.
    #[test]
    fn variable_cutoffs_match_fixed(
        preds in proptest::collection::vec(word(), 1..12),
        gold in proptest::collection::vec(word(), 1..6),
    ) {
        let preds: Vec<String> = preds.iter().map(|w| porter_stem(w)).collect();
        let gold: Vec<String> = gold.iter().map(|w| porter_stem(w)).collect();
        let m = prf_at_k(&preds, &gold, Cutoff::M).unwrap();
        let m_fixed = prf_at_k(&preds, &gold, Cutoff::Fixed(preds.len())).unwrap();
        prop_assert_eq!(m, m_fixed);
        let o = prf_at_k(&preds, &gold, Cutoff::O).unwrap();
        let o_fixed = prf_at_k(&preds, &gold, Cutoff::Fixed(gold.len())).unwrap();
        prop_assert_eq!(o, o_fixed);
    }

    /// Duplicated candidate phrases never change a report: scoring
    /// deduplicates by stemmed form first.
    #[test]
    fn evaluation_ignores_duplicate_candidates(
        doc in corpus_doc(),
        cands in proptest::collection::vec(tokens(3), 1..6),
    ) {
        let base = DocEvalInput {
            id: doc.id.clone(),
            source_tokens: doc.source_tokens.clone(),
            gold: doc.gold_keyphrases.clone(),
            candidates: cands.clone(),
            top_beam: cands.clone(),
        };
        let mut doubled = base.clone();
        doubled.candidates.extend(cands.iter().cloned());
        doubled.top_beam.extend(cands.iter().cloned());
        let a = evaluate(std::slice::from_ref(&base)).unwrap();
        let b = evaluate(std::slice::from_ref(&doubled)).unwrap();
        prop_assert_eq!(a, b);
    }

    /// Macro averages are invariant under replicating the whole corpus.
    #[test]
    fn macro_average_duplication_invariance(
        docs in proptest::collection::vec((corpus_doc(), proptest::collection::vec(tokens(3), 1..5)), 1..4),
    ) {
        let inputs: Vec<DocEvalInput> = docs
            .iter()
            .enumerate()
            .map(|(i, (doc, cands))| DocEvalInput {
                id: format!("{}-{}", doc.id, i),
                source_tokens: doc.source_tokens.clone(),
                gold: doc.gold_keyphrases.clone(),
                candidates: cands.clone(),
                top_beam: cands.clone(),
            })
            .collect();
        let doubled: Vec<DocEvalInput> = inputs.iter().chain(inputs.iter()).cloned().collect();
        let a = evaluate(&inputs).unwrap();
        let b = evaluate(&doubled).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
        prop_assert!(close(a.present.f1_at_5, b.present.f1_at_5));
        prop_assert!(close(a.present.f1_at_m, b.present.f1_at_m));
        prop_assert!(close(a.present.r_at_10, b.present.r_at_10));
        prop_assert!(close(a.present.count_mae, b.present.count_mae));
        prop_assert!(close(a.absent.f1_at_5, b.absent.f1_at_5));
        prop_assert!(close(a.absent.r_at_10, b.absent.r_at_10));
        prop_assert!(close(a.avg_unique_predictions, b.avg_unique_predictions));
        prop_assert_eq!(a.doc_count * 2, b.doc_count);
    }

    /// A phrase stem is the space-joined per-word stem.
    #[test]
    fn phrase_stem_composes(phrase in tokens(4)) {
        let joined = stem_phrase(&phrase);
        let per_word: Vec<String> = phrase.iter().map(|w| porter_stem(w)).collect();
        prop_assert_eq!(joined, per_word.join(" "));
    }
}
