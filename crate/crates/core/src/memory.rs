//! Cross-document attention memory: key/value vectors for a document
//! collection, softmax addressing, and the latent-topic readout.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::{Document, Vocabulary, UNK};
use crate::params;
use crate::tensor::{dot, Tensor};
use crate::{Error, Result};

const MEMORY_MAGIC: &[u8; 8] = b"KPMEM001";

/// Aligned key and value vectors for a document collection, both `(l, d)`.
#[derive(Debug, Clone)]
pub struct DocumentMemory {
    pub doc_ids: Vec<String>,
    pub keys: Tensor,
    pub values: Tensor,
    pub trainable: bool,
}

impl DocumentMemory {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn index_of(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|id| id == doc_id)
    }

    /// Header (dimension, length, id table) followed by the row-major key
    /// matrix and then the value matrix, little-endian 32-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MEMORY_MAGIC)?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for id in &self.doc_ids {
            params::write_string(&mut w, id)?;
        }
        params::write_tensor(&mut w, &self.keys)?;
        params::write_tensor(&mut w, &self.values)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|_| Error::MissingInput {
            artifact: "memory",
            path: path.display().to_string(),
        })?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MEMORY_MAGIC {
            return Err(Error::Parse(format!(
                "{} is not a memory file",
                path.display()
            )));
        }
        let dim = params::read_u32(&mut r)? as usize;
        let len = params::read_u32(&mut r)? as usize;
        let mut doc_ids = Vec::with_capacity(len);
        for _ in 0..len {
            doc_ids.push(params::read_string(&mut r)?);
        }
        let keys = params::read_tensor(&mut r)?;
        let values = params::read_tensor(&mut r)?;
        if keys.shape() != (len, dim) || values.shape() != (len, dim) {
            return Err(Error::Parse(format!(
                "{}: matrix shapes disagree with header",
                path.display()
            )));
        }
        Ok(DocumentMemory {
            doc_ids,
            keys,
            values,
            trainable: true,
        })
    }
}

/// Produces the sentential encoding of a document, used as the addressing
/// query and for memory initialization. A pretrained sentence encoder can be
/// plugged in here; the default is the embedding mean.
pub trait SententialEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, doc: &Document) -> Result<Vec<f64>>;
}

/// Fallback encoder: arithmetic mean of the model's word embeddings over the
/// source tokens, with the UNK embedding for out-of-vocabulary words.
pub struct EmbeddingMeanEncoder<'a> {
    pub embeddings: &'a Tensor,
    pub vocab: &'a Vocabulary,
}

impl SententialEncoder for EmbeddingMeanEncoder<'_> {
    fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    fn encode(&self, doc: &Document) -> Result<Vec<f64>> {
        encode_query(doc, self.embeddings, self.vocab)
    }
}

/// Sentential encoding: arithmetic mean of the source-token embeddings.
pub fn encode_query(doc: &Document, embeddings: &Tensor, vocab: &Vocabulary) -> Result<Vec<f64>> {
    if doc.source_tokens.is_empty() {
        return Err(Error::Data(format!("document {} has no source tokens", doc.id)));
    }
    let d = embeddings.cols();
    let mut sum = vec![0.0; d];
    for token in &doc.source_tokens {
        let id = vocab.id(token).unwrap_or(UNK);
        for (acc, v) in sum.iter_mut().zip(embeddings.row(id)) {
            *acc += v;
        }
    }
    let n = doc.source_tokens.len() as f64;
    for v in &mut sum {
        *v /= n;
    }
    Ok(sum)
}

/// One key and one value vector per document, both initialized from the
/// encoder output. Training differentiates them afterwards.
pub fn build_memory(docs: &[Document], encoder: &dyn SententialEncoder) -> Result<DocumentMemory> {
    if docs.is_empty() {
        return Err(Error::Data("cannot build memory from an empty corpus".into()));
    }
    let d = encoder.dim();
    let mut keys = Tensor::zeros(docs.len(), d);
    let mut doc_ids = Vec::with_capacity(docs.len());
    for (i, doc) in docs.iter().enumerate() {
        let e = encoder.encode(doc)?;
        if e.len() != d {
            return Err(Error::Config(format!(
                "encoder produced dimension {} but promised {}",
                e.len(),
                d
            )));
        }
        keys.row_mut(i).copy_from_slice(&e);
        doc_ids.push(doc.id.clone());
    }
    let values = keys.clone();
    Ok(DocumentMemory {
        doc_ids,
        keys,
        values,
        trainable: true,
    })
}

/// Addressing options. Masking the query document's own entry and top-K
/// truncation both deviate from the plain softmax and are off by default.
#[derive(Debug, Clone, Default)]
pub struct AddressOptions {
    pub mask_self: Option<usize>,
    pub top_k: Option<usize>,
}

/// Softmax addressing over the memory keys: `p_k ∝ exp(e · u_k)`.
pub fn address(e: &[f64], mem: &DocumentMemory) -> Result<Vec<f64>> {
    address_with(e, mem, &AddressOptions::default())
}

pub fn address_with(e: &[f64], mem: &DocumentMemory, opts: &AddressOptions) -> Result<Vec<f64>> {
    if e.len() != mem.dim() {
        return Err(Error::Shape(format!(
            "query dimension {} does not match memory dimension {}",
            e.len(),
            mem.dim()
        )));
    }
    let mut logits = Vec::with_capacity(mem.len());
    for k in 0..mem.len() {
        let score = dot(e, mem.keys.row(k));
        if !score.is_finite() {
            return Err(Error::Numeric(format!("non-finite addressing logit at {}", k)));
        }
        logits.push(score);
    }
    if let Some(own) = opts.mask_self {
        if mem.len() == 1 {
            return Err(Error::Config("cannot mask the only memory entry".into()));
        }
        logits[own] = f64::NEG_INFINITY;
    }
    let mut p = crate::nn::softmax(&logits)?;
    if let Some(k) = opts.top_k {
        truncate_to_top_k(&mut p, k);
    }
    Ok(p)
}

/// Keep the K largest weights (ties to the lower index) and renormalize.
fn truncate_to_top_k(p: &mut [f64], k: usize) {
    if k >= p.len() || k == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    for &i in &order[k..] {
        p[i] = 0.0;
    }
    let total: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= total;
    }
}

/// Latent topic readout: `o = Σ_k p_k v_k`.
pub fn topic_vector(p: &[f64], mem: &DocumentMemory) -> Result<Vec<f64>> {
    if p.len() != mem.len() {
        return Err(Error::Shape(format!(
            "weight count {} does not match memory length {}",
            p.len(),
            mem.len()
        )));
    }
    let mut o = vec![0.0; mem.dim()];
    for (k, &w) in p.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (acc, v) in o.iter_mut().zip(mem.values.row(k)) {
            *acc += w * v;
        }
    }
    Ok(o)
}
