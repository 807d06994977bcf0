//! Bundled synthetic corpora driving the acceptance tests: a 32-document
//! overfit set and a 64-document neighbor-pair set whose absent keyphrases
//! occur only in a designated partner document.
//!
//! The checked-in JSONL files under `fixtures/` are byte-for-byte outputs of
//! these generators; a test pins that equality.

use std::path::Path;

use crate::corpus::{write_corpus, RawRecord};
use crate::Result;

const SUBJECTS: [&str; 8] = [
    "graph", "kernel", "topic", "query", "signal", "image", "speech", "protein",
];
const MODIFIERS: [&str; 4] = ["sparse", "deep", "robust", "latent"];
const TASKS: [&str; 8] = [
    "clustering",
    "retrieval",
    "segmentation",
    "classification",
    "alignment",
    "ranking",
    "denoising",
    "tracking",
];

/// 32 short documents whose gold keyphrases all occur in the source text.
pub fn overfit_corpus() -> Vec<RawRecord> {
    let mut records = Vec::with_capacity(32);
    for i in 0..32usize {
        let s = SUBJECTS[i % 8];
        let m = MODIFIERS[i / 8];
        let t = TASKS[(i * 5 + 3) % 8];
        records.push(RawRecord {
            id: format!("overfit-{:02}", i),
            title: format!("{} {} {}", m, s, t),
            abstract_text: format!(
                "we describe {} {} and show that {} {} improves the baseline",
                s, t, m, s
            ),
            keyphrases: vec![format!("{} {}", s, t), format!("{} {}", m, s)],
        });
    }
    records
}

const PAIR_LEFT: [&str; 16] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
    "lambda", "mu", "nu", "xi", "omicron", "sigma",
];
const PAIR_RIGHT: [&str; 16] = [
    "red", "blue", "green", "gold", "gray", "pink", "teal", "cyan", "plum", "rust", "jade",
    "sand", "mint", "wine", "snow", "coal",
];
/// Second words of the paired phrases; the pairing varies per pair so a
/// document's absent phrase cannot be derived from its own text by one
/// global rule.
const HEADS: [&str; 8] = [
    "mapping", "fusion", "pruning", "folding", "routing", "scaling", "binding", "packing",
];

/// 512 documents in 256 pairs. Each pair is identified by a two-token marker
/// (left word, right word); each document's absent gold keyphrase is the
/// present keyphrase of its partner and occurs verbatim only in the partner's
/// text. Partners share both marker tokens while unrelated documents share at
/// most one, so the two partner documents are each other's nearest neighbors
/// under mean-embedding similarity, which is what drives memory addressing.
pub fn neighbor_corpus() -> Vec<RawRecord> {
    let mut records = Vec::with_capacity(512);
    for pair in 0..256usize {
        let (left, right) = (PAIR_LEFT[pair % 16], PAIR_RIGHT[pair / 16]);
        let a = HEADS[(pair * 3 + 1) % 8];
        let mut b = HEADS[(pair * 5 + 4) % 8];
        if b == a {
            b = HEADS[(pair * 5 + 5) % 8];
        }
        for (side, own, other) in [(0, a, b), (1, b, a)] {
            records.push(RawRecord {
                id: format!("pair-{:03}-{}", pair, side),
                title: format!("{} {} study", left, own),
                abstract_text: format!("{l} {r} {l} {r} {own}", l = left, r = right, own = own),
                keyphrases: vec![
                    format!("{} {} {}", left, right, own),
                    format!("{} {} {}", left, right, other),
                ],
            });
        }
    }
    records
}

pub fn write_overfit(path: &Path) -> Result<()> {
    write_corpus(path, &overfit_corpus())
}

pub fn write_neighbor(path: &Path) -> Result<()> {
    write_corpus(path, &neighbor_corpus())
}
