//! Numeric building blocks: softmax, dense layers, layer normalization,
//! multi-head attention, dropout, and the gradient checking harness.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Additive mask value for disallowed attention positions.
pub const MASK_NEG: f64 = -1e30;

/// Numerically safe softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in softmax input".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

/// `W x + b` for a `(rows, cols)` weight matrix and a `cols`-vector input.
pub fn dense(w: &Tensor, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::Shape(format!(
            "dense: W is {}x{}, x has {}, b has {}",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        )));
    }
    let mut out = b.to_vec();
    for r in 0..w.rows() {
        out[r] += crate::tensor::dot(w.row(r), x);
    }
    Ok(out)
}

/// Zero-mean unit-variance normalization (variance over `1/d`) followed by
/// an affine map, epsilon inside the square root.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + crate::graph::LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv_std * g + b)
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Projection weights for one attention block, already placed on a graph.
/// The query/key/value projections carry no bias (a key bias cancels inside
/// the row softmax and would have an identically zero gradient).
pub struct AttentionNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Scaled dot-product multi-head attention.
///
/// `mask`, when given, is an additive `(nq, nk)` matrix of `0` / [`MASK_NEG`]
/// entries. Returns the projected output and the head-averaged attention
/// weights `(nq, nk)`.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: NodeId,
    kv_in: NodeId,
    p: &AttentionNodes,
    head_count: usize,
    mask: Option<&Tensor>,
) -> Result<(NodeId, NodeId)> {
    let (nq, d) = g.value(q_in).shape();
    let (nk, dk) = g.value(kv_in).shape();
    if d != dk {
        return Err(Error::Shape("attention query/key dimension mismatch".into()));
    }
    if d % head_count != 0 {
        return Err(Error::Config(format!(
            "model dimension {} not divisible by {} heads",
            d, head_count
        )));
    }
    if let Some(m) = mask {
        if m.shape() != (nq, nk) {
            return Err(Error::Shape("attention mask shape mismatch".into()));
        }
        for r in 0..nq {
            if m.row(r).iter().all(|&v| v <= MASK_NEG) {
                return Err(Error::Numeric(format!(
                    "all key positions masked for query {}",
                    r
                )));
            }
        }
    }
    let head_dim = d / head_count;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q_proj = g.matmul(q_in, p.wq);
    let k_proj = g.matmul(kv_in, p.wk);
    let v_proj = g.matmul(kv_in, p.wv);

    let mask_node = mask.map(|m| g.constant(m.clone()));

    let mut concat: Option<NodeId> = None;
    let mut weight_sum: Option<NodeId> = None;
    for h in 0..head_count {
        let qh = g.slice_cols(q_proj, h * head_dim, head_dim);
        let kh = g.slice_cols(k_proj, h * head_dim, head_dim);
        let vh = g.slice_cols(v_proj, h * head_dim, head_dim);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let scores = match mask_node {
            Some(m) => g.add(scores, m),
            None => scores,
        };
        let attn = g.softmax_rows(scores);
        let out_h = g.matmul(attn, vh);
        concat = Some(match concat {
            Some(c) => g.concat_cols(c, out_h),
            None => out_h,
        });
        weight_sum = Some(match weight_sum {
            Some(w) => g.add(w, attn),
            None => attn,
        });
    }
    let concat = concat.expect("at least one head");
    let out = g.matmul(concat, p.wo);
    let out = g.add_broadcast_row(out, p.bo);
    let avg_weights = g.scale(weight_sum.expect("at least one head"), 1.0 / head_count as f64);
    Ok((out, avg_weights))
}

/// Inverted-scaling dropout. Rate 0 is the identity; otherwise each entry is
/// kept with probability `1 - rate` and scaled by `1 / (1 - rate)`.
pub fn dropout<R: Rng>(g: &mut Graph, x: NodeId, rate: f64, rng: &mut R) -> NodeId {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if rate == 0.0 {
        return x;
    }
    let (n, d) = g.value(x).shape();
    let keep = 1.0 - rate;
    let mut mask = Tensor::zeros(n, d);
    for v in mask.data_mut() {
        if rng.gen::<f64>() >= rate {
            *v = 1.0 / keep;
        }
    }
    let mask = g.constant(mask);
    g.mul(x, mask)
}

/// Maximum relative error between analytic and central-difference gradients.
///
/// `eval_loss` must be a pure function of the store contents. For every
/// tensor, up to `samples_per_tensor` coordinates are checked (all of them
/// when the tensor is smaller). Relative error is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<R: Rng>(
    store: &mut ParameterStore,
    analytic: &indexmap::IndexMap<String, Tensor>,
    eval_loss: &dyn Fn(&ParameterStore) -> Result<f64>,
    h: f64,
    samples_per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let base = eval_loss(store)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", base)));
    }
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let mut report = GradCheckReport::default();
    for name in names {
        let len = store.get(&name).len();
        let coords: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < samples_per_tensor {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Data(format!("no analytic gradient for {}", name)))?;
        for i in coords {
            let orig = store.get(&name).data()[i];
            store.get_mut(&name).data_mut()[i] = orig + h;
            let up = eval_loss(store)?;
            store.get_mut(&name).data_mut()[i] = orig - h;
            let down = eval_loss(store)?;
            store.get_mut(&name).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i, a, numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(tensor name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}
