//! Document ingestion, text normalization, vocabularies, and training
//! target construction.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::stem;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;
pub const DIGIT: usize = 5;

pub const SPECIALS: [&str; 6] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<digit>"];

/// One raw corpus record as stored on disk (line-delimited JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub keyphrases: Vec<String>,
}

/// A normalized document: the unit of training, memory, and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub title_tokens: Vec<String>,
    pub abstract_tokens: Vec<String>,
    /// Title followed by abstract.
    pub source_tokens: Vec<String>,
    pub gold_keyphrases: Vec<Vec<String>>,
}

/// Lowercase, split on whitespace and punctuation boundaries (punctuation
/// kept as separate tokens), and replace whole-token digit runs with the
/// digit placeholder. Mixed alphanumerics like "mp3" are left untouched.
pub fn preprocess_text(raw: &str) -> Vec<String> {
    let lowered = raw.to_lowercase();
    let mut tokens = Vec::new();
    for word in lowered.split_whitespace() {
        if word == SPECIALS[DIGIT] {
            tokens.push(word.to_string());
            continue;
        }
        if is_digit_run(word) {
            tokens.push(SPECIALS[DIGIT].to_string());
            continue;
        }
        // Fragments split off at punctuation get the digit rule too, so a
        // second pass over the joined output changes nothing.
        let flush = |current: &mut String, tokens: &mut Vec<String>| {
            if current.is_empty() {
                return;
            }
            let fragment = std::mem::take(current);
            if fragment.chars().all(|c| c.is_ascii_digit()) {
                tokens.push(SPECIALS[DIGIT].to_string());
            } else {
                tokens.push(fragment);
            }
        };
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                current.push(ch);
            } else {
                flush(&mut current, &mut tokens);
                tokens.push(ch.to_string());
            }
        }
        flush(&mut current, &mut tokens);
    }
    tokens
}

/// Whole-token digit run: only digits plus optional '.', ',' or '-', with at
/// least one digit.
fn is_digit_run(word: &str) -> bool {
    let mut saw_digit = false;
    for ch in word.chars() {
        match ch {
            '0'..='9' => saw_digit = true,
            '.' | ',' | '-' => {}
            _ => return false,
        }
    }
    saw_digit
}

/// Normalize a raw record into a [`Document`]. Records whose gold keyphrase
/// list is empty after cleaning are dropped (returns `None`).
pub fn ingest(record: &RawRecord) -> Option<Document> {
    let title_tokens = preprocess_text(&record.title);
    let abstract_tokens = preprocess_text(&record.abstract_text);
    let mut source_tokens = title_tokens.clone();
    source_tokens.extend(abstract_tokens.iter().cloned());
    let gold_keyphrases: Vec<Vec<String>> = record
        .keyphrases
        .iter()
        .map(|kp| preprocess_text(kp))
        .filter(|tokens| !tokens.is_empty())
        .collect();
    if gold_keyphrases.is_empty() || source_tokens.is_empty() {
        return None;
    }
    Some(Document {
        id: record.id.clone(),
        title_tokens,
        abstract_tokens,
        source_tokens,
        gold_keyphrases,
    })
}

/// Load a line-delimited corpus file, normalizing each record and removing
/// exact duplicates (matching normalized source tokens, keeping the first).
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingInput {
        artifact: "corpus",
        path: path.display().to_string(),
    })?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    let mut seen: HashMap<Vec<String>, ()> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {}", path.display(), lineno + 1, e)))?;
        if let Some(doc) = ingest(&record) {
            if seen.insert(doc.source_tokens.clone(), ()).is_none() {
                docs.push(doc);
            }
        }
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for record in records {
        serde_json::to_writer(&mut file, record).map_err(|e| Error::Data(e.to_string()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// The predefined word vocabulary: specials first, then the most frequent
/// content words up to the cap.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for word in &self.words {
            writeln!(file, "{}", word)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|_| Error::MissingInput {
            artifact: "vocabulary",
            path: path.display().to_string(),
        })?;
        let words: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()?;
        for (i, special) in SPECIALS.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Parse(format!(
                    "{}: expected special token {} at line {}",
                    path.display(),
                    special,
                    i + 1
                )));
            }
        }
        Ok(Vocabulary::from_words(words))
    }
}

/// Rank content words by descending corpus frequency (ties broken
/// lexicographically), keep the top `cap`, and prepend the special tokens.
/// Both source text and gold keyphrase words are counted.
pub fn build_vocabulary(docs: &[Document], cap: usize) -> Vocabulary {
    assert!(cap >= 1, "vocabulary cap must be at least 1");
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for doc in docs {
        for token in &doc.source_tokens {
            if !SPECIALS.contains(&token.as_str()) {
                *counts.entry(token).or_default() += 1;
            }
        }
        for phrase in &doc.gold_keyphrases {
            for token in phrase {
                if !SPECIALS.contains(&token.as_str()) {
                    *counts.entry(token).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cap);
    let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    words.extend(ranked.into_iter().map(|(w, _)| w.to_string()));
    Vocabulary::from_words(words)
}

/// The predefined vocabulary extended with the current document's novel
/// source words, enabling out-of-vocabulary emission by copying.
#[derive(Debug, Clone)]
pub struct ExtendedVocabulary {
    base_size: usize,
    novel_words: Vec<String>,
    novel_index: HashMap<String, usize>,
    /// Extended id for every source position.
    position_map: Vec<usize>,
}

impl ExtendedVocabulary {
    pub fn size(&self) -> usize {
        self.base_size + self.novel_words.len()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn novel_words(&self) -> &[String] {
        &self.novel_words
    }

    pub fn position_map(&self) -> &[usize] {
        &self.position_map
    }

    /// Extended id of a word: the base id when present, the novel id when
    /// the word occurs in the source, `None` otherwise.
    pub fn id(&self, vocab: &Vocabulary, word: &str) -> Option<usize> {
        vocab.id(word).or_else(|| {
            self.novel_index
                .get(word)
                .map(|&i| self.base_size + i)
        })
    }

    pub fn word<'a>(&'a self, vocab: &'a Vocabulary, id: usize) -> &'a str {
        if id < self.base_size {
            vocab.word(id)
        } else {
            &self.novel_words[id - self.base_size]
        }
    }
}

/// Assign extended ids to source words absent from the base vocabulary, in
/// first-occurrence order starting at the base size.
pub fn extend_vocabulary(vocab: &Vocabulary, source_tokens: &[String]) -> ExtendedVocabulary {
    let mut novel_words = Vec::new();
    let mut novel_index: HashMap<String, usize> = HashMap::new();
    let mut position_map = Vec::with_capacity(source_tokens.len());
    for token in source_tokens {
        let id = match vocab.id(token) {
            Some(base_id) => base_id,
            None => {
                let next = novel_index.len();
                let idx = *novel_index.entry(token.clone()).or_insert(next);
                if idx == next {
                    novel_words.push(token.clone());
                }
                vocab.size() + idx
            }
        };
        position_map.push(id);
    }
    ExtendedVocabulary {
        base_size: vocab.size(),
        novel_words,
        novel_index,
        position_map,
    }
}

/// The delimiter-joined training target: phrases separated by SEP and
/// terminated by a single EOS, present phrases (ordered by first source
/// occurrence) before absent ones (in gold order).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSequence {
    pub ids: Vec<usize>,
    pub present_count: usize,
}

pub fn build_target_sequence(
    doc: &Document,
    vocab: &Vocabulary,
    ext: &ExtendedVocabulary,
) -> Result<TargetSequence> {
    if doc.gold_keyphrases.is_empty() {
        return Err(Error::Data(format!(
            "document {} has no gold keyphrases",
            doc.id
        )));
    }
    let stemmed_source = stem::stem_tokens(&doc.source_tokens);
    // Present phrases are ordered by the first occurrence of their stemmed
    // form in the stemmed source; absent phrases keep gold order.
    let mut present: Vec<(usize, &Vec<String>)> = Vec::new();
    let mut absent: Vec<&Vec<String>> = Vec::new();
    for phrase in &doc.gold_keyphrases {
        match first_occurrence(&stem::stem_tokens(phrase), &stemmed_source) {
            Some(pos) => present.push((pos, phrase)),
            None => absent.push(phrase),
        }
    }
    present.sort_by_key(|(pos, _)| *pos);
    let present_count = present.len();

    let ordered: Vec<&Vec<String>> = present
        .into_iter()
        .map(|(_, p)| p)
        .chain(absent)
        .collect();
    let mut ids = Vec::new();
    for (i, phrase) in ordered.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        for token in phrase.iter() {
            ids.push(ext.id(vocab, token).unwrap_or(UNK));
        }
    }
    ids.push(EOS);
    Ok(TargetSequence { ids, present_count })
}

/// Position of the first contiguous occurrence of `needle` in `haystack`.
pub(crate) fn first_occurrence(needle: &[String], haystack: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack
        .windows(needle.len())
        .position(|window| window == needle)
}
