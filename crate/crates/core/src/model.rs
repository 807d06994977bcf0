//! The keyphrase generation network: Transformer encoder, topic fusion,
//! Transformer decoder, vocabulary head, copy gate, copy distribution, and
//! the gated mixture, plus the teacher-forced training objective.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, ExtendedVocabulary, TargetSequence, Vocabulary, BOS, UNK};
use crate::graph::{Graph, NodeId};
use crate::memory::{self, AddressOptions, DocumentMemory};
use crate::nn::{self, AttentionNodes, MASK_NEG};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MEM_KEYS: &str = "mem.keys";
pub const MEM_VALUES: &str = "mem.values";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layer_count: usize,
    pub head_count: usize,
    pub hidden_dim: usize,
    pub max_input_len: usize,
    pub max_target_len: usize,
    pub dropout_rate: f64,
    pub vocab_cap: usize,
    pub beam_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layer_count: 4,
            head_count: 8,
            hidden_dim: 768,
            max_input_len: 768,
            max_target_len: 40,
            dropout_rate: 0.5,
            vocab_cap: 50_000,
            beam_size: 50,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.layer_count == 0
            || self.head_count == 0
            || self.max_input_len == 0
            || self.max_target_len == 0
            || self.vocab_cap == 0
            || self.beam_size == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by head_count {}",
                self.hidden_dim, self.head_count
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Plain `key=value` echo, one field per line.
    pub fn echo(&self) -> String {
        format!(
            "layer_count={}\nhead_count={}\nhidden_dim={}\nmax_input_len={}\nmax_target_len={}\ndropout_rate={}\nvocab_cap={}\nbeam_size={}\n",
            self.layer_count,
            self.head_count,
            self.hidden_dim,
            self.max_input_len,
            self.max_target_len,
            self.dropout_rate,
            self.vocab_cap,
            self.beam_size
        )
    }

    /// Parse a `key=value` block, starting from the defaults. Unknown keys
    /// are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got {:?}", line)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: std::num::ParseIntError| Error::Parse(format!("{}: {}", key, e));
            match key {
                "layer_count" => cfg.layer_count = value.parse().map_err(bad)?,
                "head_count" => cfg.head_count = value.parse().map_err(bad)?,
                "hidden_dim" => cfg.hidden_dim = value.parse().map_err(bad)?,
                "max_input_len" => cfg.max_input_len = value.parse().map_err(bad)?,
                "max_target_len" => cfg.max_target_len = value.parse().map_err(bad)?,
                "vocab_cap" => cfg.vocab_cap = value.parse().map_err(bad)?,
                "beam_size" => cfg.beam_size = value.parse().map_err(bad)?,
                "dropout_rate" => {
                    cfg.dropout_rate = value
                        .parse()
                        .map_err(|e| Error::Parse(format!("dropout_rate: {}", e)))?
                }
                _ => return Err(Error::Parse(format!("unknown config key {:?}", key))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ablation switches realizing the baseline grid: the plain Transformer,
/// Transformer+copy, and Transformer+cross-document variants.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ablations {
    /// Force the topic vector to zero (no cross-document attention).
    pub disable_memory: bool,
    /// Force the generation gate to one (no copy distribution).
    pub disable_copy: bool,
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParameterStore,
}

impl Model {
    /// Fresh model with seeded Xavier initialization.
    pub fn new(config: ModelConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = 4 * d;
        let mut params = ParameterStore::new();
        params.insert("embed.word", Tensor::xavier(vocab_size, d, rng));
        params.insert("enc.pos", Tensor::xavier(config.max_input_len, d, rng));
        params.insert("dec.pos", Tensor::xavier(config.max_target_len + 1, d, rng));
        let attn_block = |params: &mut ParameterStore, prefix: &str, rng: &mut ChaCha8Rng| {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("{}.{}", prefix, w), Tensor::xavier(d, d, rng));
            }
            params.insert(format!("{}.bo", prefix), Tensor::zeros(1, d));
        };
        let ln_block = |params: &mut ParameterStore, prefix: &str| {
            params.insert(format!("{}.gain", prefix), Tensor::filled(1, d, 1.0));
            params.insert(format!("{}.bias", prefix), Tensor::zeros(1, d));
        };
        let ffn_block = |params: &mut ParameterStore, prefix: &str, rng: &mut ChaCha8Rng| {
            params.insert(format!("{}.w1", prefix), Tensor::xavier(d, f, rng));
            params.insert(format!("{}.b1", prefix), Tensor::zeros(1, f));
            params.insert(format!("{}.w2", prefix), Tensor::xavier(f, d, rng));
            params.insert(format!("{}.b2", prefix), Tensor::zeros(1, d));
        };
        for i in 0..config.layer_count {
            ln_block(&mut params, &format!("enc.{}.ln1", i));
            attn_block(&mut params, &format!("enc.{}.attn", i), rng);
            ln_block(&mut params, &format!("enc.{}.ln2", i));
            ffn_block(&mut params, &format!("enc.{}.ffn", i), rng);
        }
        ln_block(&mut params, "enc.final_ln");
        for i in 0..config.layer_count {
            ln_block(&mut params, &format!("dec.{}.ln1", i));
            attn_block(&mut params, &format!("dec.{}.self", i), rng);
            ln_block(&mut params, &format!("dec.{}.ln2", i));
            attn_block(&mut params, &format!("dec.{}.cross", i), rng);
            ln_block(&mut params, &format!("dec.{}.ln3", i));
            ffn_block(&mut params, &format!("dec.{}.ffn", i), rng);
        }
        ln_block(&mut params, "dec.final_ln");
        params.insert("head.w2", Tensor::xavier(2 * d, d, rng));
        params.insert("head.w1", Tensor::xavier(d, vocab_size, rng));
        params.insert("gate.wc", Tensor::xavier(d, 1, rng));
        params.insert("gate.ws", Tensor::xavier(d, 1, rng));
        params.insert("gate.wy", Tensor::xavier(d, 1, rng));
        params.insert("gate.b", Tensor::zeros(1, 1));
        Ok(Model {
            config,
            vocab_size,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, vocab_size: usize, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let expected = (vocab_size, config.hidden_dim);
        if params.get("embed.word").shape() != expected {
            return Err(Error::Config(format!(
                "checkpoint embedding shape {:?} does not match config/vocab {:?}",
                params.get("embed.word").shape(),
                expected
            )));
        }
        Ok(Model {
            config,
            vocab_size,
            params,
        })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.params.get("embed.word")
    }

    /// Map an extended-vocabulary id to an input-embedding row. Novel words
    /// have no embedding of their own and share the UNK row.
    pub fn input_id(&self, ext_id: usize) -> usize {
        if ext_id < self.vocab_size {
            ext_id
        } else {
            UNK
        }
    }

    /// Source tokens as base-vocabulary ids (UNK for out-of-vocabulary
    /// words), truncated at the maximum input length.
    pub fn source_ids(&self, doc: &Document, vocab: &Vocabulary) -> Vec<usize> {
        let mut ids: Vec<usize> = doc
            .source_tokens
            .iter()
            .map(|t| vocab.id(t).unwrap_or(UNK))
            .collect();
        if ids.len() > self.config.max_input_len {
            log::warn!(
                "document {} has {} tokens; truncating to {}",
                doc.id,
                ids.len(),
                self.config.max_input_len
            );
            ids.truncate(self.config.max_input_len);
        }
        ids
    }
}

/// Graph nodes for every parameter tensor, bound once per graph.
pub struct Bound {
    nodes: HashMap<String, NodeId>,
}

impl Bound {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {}", name))
    }

    pub fn try_node(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }

    fn attention(&self, prefix: &str) -> AttentionNodes {
        AttentionNodes {
            wq: self.node(&format!("{}.wq", prefix)),
            wk: self.node(&format!("{}.wk", prefix)),
            wv: self.node(&format!("{}.wv", prefix)),
            wo: self.node(&format!("{}.wo", prefix)),
            bo: self.node(&format!("{}.bo", prefix)),
        }
    }
}

/// Place every parameter on the graph as a leaf.
pub fn bind_params(g: &mut Graph, store: &ParameterStore) -> Bound {
    let mut nodes = HashMap::new();
    for (name, tensor) in store.iter() {
        nodes.insert(name.to_string(), g.leaf(tensor.clone()));
    }
    Bound { nodes }
}

/// Dropout context used during training; inference passes `None`.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn maybe_dropout(g: &mut Graph, x: NodeId, ctx: &mut Option<Dropout<'_>>) -> NodeId {
    match ctx {
        Some(d) if d.rate > 0.0 => nn::dropout(g, x, d.rate, d.rng),
        _ => x,
    }
}

fn ffn(g: &mut Graph, bound: &Bound, prefix: &str, x: NodeId) -> NodeId {
    let h = g.matmul(x, bound.node(&format!("{}.w1", prefix)));
    let h = g.add_broadcast_row(h, bound.node(&format!("{}.b1", prefix)));
    let h = g.relu(h);
    let out = g.matmul(h, bound.node(&format!("{}.w2", prefix)));
    g.add_broadcast_row(out, bound.node(&format!("{}.b2", prefix)))
}

fn layer_norm(g: &mut Graph, bound: &Bound, prefix: &str, x: NodeId) -> NodeId {
    g.layer_norm(
        x,
        bound.node(&format!("{}.gain", prefix)),
        bound.node(&format!("{}.bias", prefix)),
    )
}

/// Transformer encoder over source ids (pre-norm residual blocks).
pub fn encode(
    g: &mut Graph,
    bound: &Bound,
    config: &ModelConfig,
    source_ids: &[usize],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    if source_ids.is_empty() {
        return Err(Error::Data("cannot encode an empty source".into()));
    }
    if source_ids.len() > config.max_input_len {
        return Err(Error::Config(format!(
            "source length {} exceeds max_input_len {}",
            source_ids.len(),
            config.max_input_len
        )));
    }
    let positions: Vec<usize> = (0..source_ids.len()).collect();
    let emb = g.gather_rows(bound.node("embed.word"), source_ids);
    let pos = g.gather_rows(bound.node("enc.pos"), &positions);
    let mut x = g.add(emb, pos);
    for i in 0..config.layer_count {
        let normed = layer_norm(g, bound, &format!("enc.{}.ln1", i), x);
        let attn = bound.attention(&format!("enc.{}.attn", i));
        let (a, _) = nn::multi_head_attention(g, normed, normed, &attn, config.head_count, None)?;
        let a = maybe_dropout(g, a, dropout);
        x = g.add(x, a);
        let normed = layer_norm(g, bound, &format!("enc.{}.ln2", i), x);
        let f = ffn(g, bound, &format!("enc.{}.ffn", i), normed);
        let f = maybe_dropout(g, f, dropout);
        x = g.add(x, f);
    }
    Ok(layer_norm(g, bound, "enc.final_ln", x))
}

/// Element-wise topic fusion `h̃_i = h_i + o`.
pub fn fuse(g: &mut Graph, hidden: NodeId, topic: NodeId) -> NodeId {
    g.add_broadcast_row(hidden, topic)
}

fn causal_mask(t: usize) -> Tensor {
    let mut mask = Tensor::zeros(t, t);
    for r in 0..t {
        for c in r + 1..t {
            mask.set(r, c, MASK_NEG);
        }
    }
    mask
}

/// Transformer decoder over the target prefix (starting with BOS), attending
/// to the fused encoder states. Returns the final-layer outputs for every
/// prefix position and the last layer's head-averaged cross-attention
/// weights `(t, n)`.
pub fn decode(
    g: &mut Graph,
    bound: &Bound,
    config: &ModelConfig,
    prefix_input_ids: &[usize],
    fused: NodeId,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(NodeId, NodeId)> {
    let t = prefix_input_ids.len();
    if t == 0 {
        return Err(Error::Data("decoder prefix must start with BOS".into()));
    }
    if t > config.max_target_len + 1 {
        return Err(Error::Config(format!(
            "prefix length {} exceeds max_target_len {}",
            t, config.max_target_len
        )));
    }
    let positions: Vec<usize> = (0..t).collect();
    let emb = g.gather_rows(bound.node("embed.word"), prefix_input_ids);
    let pos = g.gather_rows(bound.node("dec.pos"), &positions);
    let mut x = g.add(emb, pos);
    let mask = causal_mask(t);
    let mut cross_weights = None;
    for i in 0..config.layer_count {
        let normed = layer_norm(g, bound, &format!("dec.{}.ln1", i), x);
        let attn = bound.attention(&format!("dec.{}.self", i));
        let (a, _) =
            nn::multi_head_attention(g, normed, normed, &attn, config.head_count, Some(&mask))?;
        let a = maybe_dropout(g, a, dropout);
        x = g.add(x, a);

        let normed = layer_norm(g, bound, &format!("dec.{}.ln2", i), x);
        let attn = bound.attention(&format!("dec.{}.cross", i));
        let (a, weights) =
            nn::multi_head_attention(g, normed, fused, &attn, config.head_count, None)?;
        let a = maybe_dropout(g, a, dropout);
        x = g.add(x, a);
        cross_weights = Some(weights);

        let normed = layer_norm(g, bound, &format!("dec.{}.ln3", i), x);
        let f = ffn(g, bound, &format!("dec.{}.ffn", i), normed);
        let f = maybe_dropout(g, f, dropout);
        x = g.add(x, f);
    }
    let out = layer_norm(g, bound, "dec.final_ln", x);
    Ok((out, cross_weights.expect("at least one layer")))
}

/// All per-step output distributions of a teacher-forced forward pass.
pub struct HeadNodes {
    /// `(t, |V|)` vocabulary distribution before padding.
    pub d_v: NodeId,
    /// `(t, |V'|)` copy distribution (all zeros when copying is disabled).
    pub d_c: NodeId,
    /// `(t, 1)` generation gate.
    pub gate: NodeId,
    /// `(t, |V'|)` final mixture.
    pub mixture: NodeId,
    /// `(t, d)` context vectors.
    pub context: NodeId,
}

/// Vocabulary head, copy gate, copy distribution, and gated mixture for all
/// prefix positions at once.
pub fn output_head(
    g: &mut Graph,
    bound: &Bound,
    dec_out: NodeId,
    cross: NodeId,
    fused: NodeId,
    prev_token_emb: NodeId,
    position_map: &[usize],
    ext_size: usize,
    ablations: Ablations,
) -> HeadNodes {
    // c^t = Σ_i α^t_i h̃_i for every step at once.
    let context = g.matmul(cross, fused);
    let concat = g.concat_cols(dec_out, context);
    // Two linear maps with no intermediate nonlinearity, then softmax.
    let z = g.matmul(concat, bound.node("head.w2"));
    let z = g.matmul(z, bound.node("head.w1"));
    let d_v = g.softmax_rows(z);
    let d_v_padded = g.pad_cols(d_v, ext_size);

    if ablations.disable_copy {
        let (t, _) = g.value(dec_out).shape();
        let ones = g.constant(Tensor::filled(t, 1, 1.0));
        let zeros = g.constant(Tensor::zeros(t, ext_size));
        return HeadNodes {
            d_v,
            d_c: zeros,
            gate: ones,
            mixture: d_v_padded,
            context,
        };
    }

    let gc = g.matmul(context, bound.node("gate.wc"));
    let gs = g.matmul(dec_out, bound.node("gate.ws"));
    let gy = g.matmul(prev_token_emb, bound.node("gate.wy"));
    let sum = g.add(gc, gs);
    let sum = g.add(sum, gy);
    let sum = g.add_broadcast_row(sum, bound.node("gate.b"));
    let gate = g.sigmoid(sum);

    let d_c = g.scatter_sum_cols(cross, position_map, ext_size);

    let gen_part = g.mul_broadcast_col(d_v_padded, gate);
    let neg_gate = g.scale(gate, -1.0);
    let one_minus = g.add_scalar(neg_gate, 1.0);
    let copy_part = g.mul_broadcast_col(d_c, one_minus);
    let mixture = g.add(gen_part, copy_part);
    HeadNodes {
        d_v,
        d_c,
        gate,
        mixture,
        context,
    }
}

/// Everything one document contributes to a training or inspection pass.
pub struct DocForward {
    pub fused: NodeId,
    pub topic: NodeId,
    pub cross: NodeId,
    pub dec_out: NodeId,
    pub head: HeadNodes,
    /// Sum of `-log(mixture[gold] + 1e-12)` over the target tokens.
    pub loss_sum: NodeId,
    pub token_count: usize,
}

pub struct DocBatchItem<'a> {
    pub doc: &'a Document,
    pub target: &'a TargetSequence,
    pub ext: &'a ExtendedVocabulary,
}

/// Teacher-forced forward pass for one document. When the bound parameters
/// include memory keys/values the topic vector is computed in-graph (so
/// gradients reach the memory); otherwise the topic vector is zero.
pub fn forward_doc(
    g: &mut Graph,
    bound: &Bound,
    model: &Model,
    vocab: &Vocabulary,
    item: &DocBatchItem<'_>,
    ablations: Ablations,
    mask_self: Option<usize>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<DocForward> {
    let d = model.config.hidden_dim;
    let source_ids = model.source_ids(item.doc, vocab);

    // Latent topic from the cross-document memory.
    let topic = if ablations.disable_memory || bound.try_node(MEM_KEYS).is_none() {
        g.constant(Tensor::zeros(1, d))
    } else {
        let emb_rows = g.gather_rows(bound.node("embed.word"), &source_ids);
        let e = g.mean_rows(emb_rows);
        let logits = g.matmul_nt(e, bound.node(MEM_KEYS));
        let logits = match mask_self {
            Some(own) => {
                let (_, l) = g.value(logits).shape();
                let mut m = Tensor::zeros(1, l);
                m.set(0, own, MASK_NEG);
                let m = g.constant(m);
                g.add(logits, m)
            }
            None => logits,
        };
        let p = g.softmax_rows(logits);
        g.matmul(p, bound.node(MEM_VALUES))
    };

    let hidden = encode(g, bound, &model.config, &source_ids, dropout)?;
    let fused = fuse(g, hidden, topic);

    // Teacher forcing: input is BOS + gold[..t-1], predictions score gold.
    let gold = &item.target.ids;
    if gold.is_empty() {
        return Err(Error::Data(format!("document {} has an empty target", item.doc.id)));
    }
    if gold.len() > model.config.max_target_len {
        return Err(Error::Config(format!(
            "target length {} exceeds max_target_len {}",
            gold.len(),
            model.config.max_target_len
        )));
    }
    let mut prefix_input: Vec<usize> = Vec::with_capacity(gold.len());
    prefix_input.push(BOS);
    prefix_input.extend(gold[..gold.len() - 1].iter().map(|&id| model.input_id(id)));

    let (dec_out, cross) = decode(g, bound, &model.config, &prefix_input, fused, dropout)?;
    let prev_token_emb = g.gather_rows(bound.node("embed.word"), &prefix_input);
    // Copy reaches only the encoded (possibly truncated) source positions.
    let head = output_head(
        g,
        bound,
        dec_out,
        cross,
        fused,
        prev_token_emb,
        &item.ext.position_map()[..source_ids.len()],
        item.ext.size(),
        ablations,
    );

    let picked = g.gather_col_per_row(head.mixture, gold);
    let safe = g.add_scalar(picked, 1e-12);
    let logs = g.log(safe);
    let total = g.sum_all(logs);
    let loss_sum = g.scale(total, -1.0);
    Ok(DocForward {
        fused,
        topic,
        cross,
        dec_out,
        head,
        loss_sum,
        token_count: gold.len(),
    })
}

/// Mean negative log-likelihood over all target tokens in the batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    g: &mut Graph,
    bound: &Bound,
    model: &Model,
    vocab: &Vocabulary,
    items: &[DocBatchItem<'_>],
    ablations: Ablations,
    self_indices: &[Option<usize>],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let mut total: Option<NodeId> = None;
    let mut tokens = 0usize;
    for (item, &mask_self) in items.iter().zip(self_indices) {
        let fwd = forward_doc(g, bound, model, vocab, item, ablations, mask_self, dropout)?;
        tokens += fwd.token_count;
        total = Some(match total {
            Some(acc) => g.add(acc, fwd.loss_sum),
            None => fwd.loss_sum,
        });
    }
    Ok(g.scale(total.expect("nonempty batch"), 1.0 / tokens as f64))
}

/// Collect gradients for every parameter after a backward pass.
pub fn parameter_gradients(
    g: &Graph,
    bound: &Bound,
    store: &ParameterStore,
    grads: &crate::graph::Gradients,
) -> IndexMap<String, Tensor> {
    let mut out = IndexMap::new();
    for name in store.names() {
        out.insert(name.to_string(), grads.get(g, bound.node(name)));
    }
    out
}

/// Move the memory keys/values into the parameter store so the optimizer
/// treats them like any other weight.
pub fn install_memory(model: &mut Model, mem: &DocumentMemory) -> Result<()> {
    if mem.dim() != model.config.hidden_dim {
        return Err(Error::Config(format!(
            "memory dimension {} does not match model dimension {}",
            mem.dim(),
            model.config.hidden_dim
        )));
    }
    model.params.insert(MEM_KEYS, mem.keys.clone());
    model.params.insert(MEM_VALUES, mem.values.clone());
    Ok(())
}

/// Copy trained memory keys/values back out of the parameter store.
pub fn extract_memory(model: &Model, mem: &mut DocumentMemory) {
    mem.keys = model.params.get(MEM_KEYS).clone();
    mem.values = model.params.get(MEM_VALUES).clone();
}

/// One optimizer step on a batch: forward, backward, Adam. Memory rows
/// listed in `frozen_rows` (documents outside the training split) receive
/// zero gradient. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    vocab: &Vocabulary,
    items: &[DocBatchItem<'_>],
    self_indices: &[Option<usize>],
    ablations: Ablations,
    frozen_rows: &[usize],
    adam: &crate::params::AdamConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, &model.params);
    let mut dropout = dropout_rng.map(|rng| Dropout {
        rate: model.config.dropout_rate,
        rng,
    });
    let loss = batch_loss(
        &mut g,
        &bound,
        model,
        vocab,
        items,
        ablations,
        self_indices,
        &mut dropout,
    )?;
    let loss_value = g.value(loss).get(0, 0);
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", loss_value)));
    }
    let grads = g.backward(loss);
    let mut by_name = parameter_gradients(&g, &bound, &model.params, &grads);
    for name in [MEM_KEYS, MEM_VALUES] {
        if let Some(grad) = by_name.get_mut(name) {
            for &row in frozen_rows {
                grad.row_mut(row).fill(0.0);
            }
        }
    }
    model.params.adam_step(&by_name, adam);
    Ok(loss_value)
}

// ---------------------------------------------------------------------------
// Inference path: graph-based encoder/decoder plus pure-math output head.
// ---------------------------------------------------------------------------

/// Encoder output with topic fusion applied, ready for repeated decoding.
pub struct EncodedDocument {
    pub fused: Tensor,
    pub ext: ExtendedVocabulary,
    pub topic: Vec<f64>,
}

/// Run the encoder and memory addressing once for a document.
pub fn encode_document(
    model: &Model,
    vocab: &Vocabulary,
    doc: &Document,
    mem: Option<&DocumentMemory>,
    address_options: &AddressOptions,
    ablations: Ablations,
) -> Result<EncodedDocument> {
    let d = model.config.hidden_dim;
    let topic = match (mem, ablations.disable_memory) {
        (Some(mem), false) => {
            if mem.dim() != d {
                return Err(Error::Config(format!(
                    "memory dimension {} does not match model dimension {}",
                    mem.dim(),
                    d
                )));
            }
            // The query uses the same (possibly truncated) tokens the
            // encoder sees, matching the in-graph training path.
            let ids = model.source_ids(doc, vocab);
            let mut e = vec![0.0; d];
            for &id in &ids {
                for (acc, v) in e.iter_mut().zip(model.embeddings().row(id)) {
                    *acc += v;
                }
            }
            for v in &mut e {
                *v /= ids.len() as f64;
            }
            let p = memory::address_with(&e, mem, address_options)?;
            memory::topic_vector(&p, mem)?
        }
        _ => vec![0.0; d],
    };

    let source_ids = model.source_ids(doc, vocab);
    let mut g = Graph::new();
    let bound = bind_params(&mut g, &model.params);
    let hidden = encode(&mut g, &bound, &model.config, &source_ids, &mut None)?;
    let topic_node = g.constant(Tensor::row_vector(topic.clone()));
    let fused = fuse(&mut g, hidden, topic_node);
    Ok(EncodedDocument {
        fused: g.value(fused).clone(),
        ext: crate::corpus::extend_vocabulary(vocab, &doc.source_tokens),
        topic,
    })
}

/// One decoding step: decoder output and cross-attention weights at the last
/// prefix position.
pub struct DecoderStep {
    pub output: Vec<f64>,
    pub attention: Vec<f64>,
}

/// Run the decoder on a prefix (BOS followed by emitted extended ids) over
/// precomputed fused states.
pub fn decode_step(model: &Model, fused: &Tensor, prefix_ext_ids: &[usize]) -> Result<DecoderStep> {
    let input_ids: Vec<usize> = std::iter::once(BOS)
        .chain(prefix_ext_ids.iter().map(|&id| model.input_id(id)))
        .collect();
    let mut g = Graph::new();
    let bound = bind_params(&mut g, &model.params);
    let fused_node = g.constant(fused.clone());
    let (dec_out, cross) = decode(&mut g, &bound, &model.config, &input_ids, fused_node, &mut None)?;
    let t = input_ids.len() - 1;
    Ok(DecoderStep {
        output: g.value(dec_out).row(t).to_vec(),
        attention: g.value(cross).row(t).to_vec(),
    })
}

/// Context vector `c^t = Σ_i α^t_i h̃_i`.
pub fn context_vector(attention: &[f64], fused: &Tensor) -> Result<Vec<f64>> {
    if attention.len() != fused.rows() {
        return Err(Error::Shape(format!(
            "attention length {} does not match {} source positions",
            attention.len(),
            fused.rows()
        )));
    }
    let mut c = vec![0.0; fused.cols()];
    for (i, &w) in attention.iter().enumerate() {
        for (acc, v) in c.iter_mut().zip(fused.row(i)) {
            *acc += w * v;
        }
    }
    Ok(c)
}

/// Vocabulary distribution over the predefined vocabulary (Eq. form:
/// softmax of two stacked linear maps on `s ⊕ c`).
pub fn vocab_distribution(model: &Model, dec_out: &[f64], context: &[f64]) -> Result<Vec<f64>> {
    let concat: Vec<f64> = dec_out.iter().chain(context).copied().collect();
    let x = Tensor::row_vector(concat);
    let z = x.matmul(model.params.get("head.w2"));
    let z = z.matmul(model.params.get("head.w1"));
    nn::softmax(z.data())
}

/// Generation gate `p = σ(W_c c + W_s s + W_y y + b)`.
pub fn generation_gate(model: &Model, context: &[f64], dec_out: &[f64], prev_emb: &[f64]) -> f64 {
    let wc = model.params.get("gate.wc");
    let ws = model.params.get("gate.ws");
    let wy = model.params.get("gate.wy");
    let b = model.params.get("gate.b").get(0, 0);
    let logit = column_dot(wc, context) + column_dot(ws, dec_out) + column_dot(wy, prev_emb) + b;
    nn::sigmoid(logit)
}

fn column_dot(w: &Tensor, x: &[f64]) -> f64 {
    debug_assert_eq!(w.shape(), (x.len(), 1));
    x.iter().enumerate().map(|(i, v)| v * w.get(i, 0)).sum()
}

/// Copy distribution over the extended vocabulary: attention mass summed per
/// extended id.
pub fn copy_distribution(attention: &[f64], position_map: &[usize], ext_size: usize) -> Result<Vec<f64>> {
    if attention.len() != position_map.len() {
        return Err(Error::Shape(format!(
            "attention length {} does not match position map length {}",
            attention.len(),
            position_map.len()
        )));
    }
    let mut d_c = vec![0.0; ext_size];
    for (&w, &id) in attention.iter().zip(position_map) {
        d_c[id] += w;
    }
    Ok(d_c)
}

/// Gated mixture `p·d_v + (1−p)·d_c` with `d_v` zero-padded up to `|V'|`.
pub fn final_distribution(p: f64, d_v: &[f64], d_c: &[f64]) -> Result<Vec<f64>> {
    if d_c.len() < d_v.len() {
        return Err(Error::Shape(
            "copy distribution shorter than vocabulary distribution".into(),
        ));
    }
    let mut mixture = vec![0.0; d_c.len()];
    for (m, &v) in mixture.iter_mut().zip(d_v) {
        *m = p * v;
    }
    for (m, &c) in mixture.iter_mut().zip(d_c) {
        *m += (1.0 - p) * c;
    }
    Ok(mixture)
}

/// Index of the largest entry, ties broken by the lowest id.
pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate() {
        if v > dist[best] {
            best = i;
        }
    }
    best
}

/// Full per-step mixture over the extended vocabulary for an inference
/// prefix. UNK mass is forced to zero so it can never be emitted.
pub fn step_distribution(
    model: &Model,
    enc: &EncodedDocument,
    prefix_ext_ids: &[usize],
    ablations: Ablations,
) -> Result<Vec<f64>> {
    let step = decode_step(model, &enc.fused, prefix_ext_ids)?;
    let context = context_vector(&step.attention, &enc.fused)?;
    let d_v = vocab_distribution(model, &step.output, &context)?;
    let mut mixture = if ablations.disable_copy {
        let mut m = d_v;
        m.resize(enc.ext.size(), 0.0);
        m
    } else {
        let prev_id = prefix_ext_ids.last().map_or(BOS, |&id| model.input_id(id));
        let prev_emb = model.embeddings().row(prev_id).to_vec();
        let p = generation_gate(model, &context, &step.output, &prev_emb);
        let map = &enc.ext.position_map()[..step.attention.len()];
        let d_c = copy_distribution(&step.attention, map, enc.ext.size())?;
        final_distribution(p, &d_v, &d_c)?
    };
    mixture[UNK] = 0.0;
    Ok(mixture)
}
