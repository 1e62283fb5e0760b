//! Scaled dot-product and multi-head attention, built from tape primitives
//! so gradients flow through every piece.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Additive logit penalty for masked positions.
pub const MASK_PENALTY: f64 = 1e9;

/// Boolean keep-matrix for attention: entry (q, k) is 1.0 when query q may
/// attend key k, 0.0 when masked.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    keep: Tensor,
}

impl AttentionMask {
    pub fn new(keep: Tensor) -> Result<Self> {
        if !keep.is_matrix() {
            return Err(Error::Shape(format!("mask of {:?}", keep.shape())));
        }
        if keep.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("mask entries must be 0 or 1".into()));
        }
        for r in 0..keep.rows() {
            if keep.row(r).iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!("query row {r} is fully masked")));
            }
        }
        Ok(AttentionMask { keep })
    }

    /// Lower-triangular causal mask over a length-n sequence.
    pub fn causal(n: usize) -> Self {
        let mut keep = Tensor::zeros(vec![n, n]);
        for q in 0..n {
            for k in 0..=q {
                keep.set2(q, k, 1.0);
            }
        }
        AttentionMask { keep }
    }

    pub fn shape(&self) -> &[usize] {
        self.keep.shape()
    }

    /// Additive bias: 0 where kept, -MASK_PENALTY where masked.
    fn bias(&self) -> Tensor {
        let data = self
            .keep
            .data()
            .iter()
            .map(|&v| (v - 1.0) * MASK_PENALTY)
            .collect();
        Tensor::new(self.keep.shape().to_vec(), data).expect("same shape")
    }
}

/// softmax(q k^T / sqrt(d)) v with optional masking.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    queries: NodeId,
    keys: NodeId,
    values: NodeId,
    mask: Option<&AttentionMask>,
) -> Result<NodeId> {
    let (qs, ks, vs) = (tape.shape(queries), tape.shape(keys), tape.shape(values));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::Shape("attention expects matrices".into()));
    }
    if qs[1] != ks[1] {
        return Err(Error::Shape(format!(
            "query dim {} vs key dim {}",
            qs[1], ks[1]
        )));
    }
    if ks[0] != vs[0] {
        return Err(Error::Shape(format!("{} keys vs {} values", ks[0], vs[0])));
    }
    let (lq, lk, d) = (qs[0], ks[0], qs[1]);
    if let Some(m) = mask {
        if m.shape() != [lq, lk] {
            return Err(Error::Shape(format!(
                "mask {:?} for scores ({lq}, {lk})",
                m.shape()
            )));
        }
    }

    let kt = tape.transpose(keys)?;
    let scores = tape.matmul(queries, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let scores = match mask {
        Some(m) => {
            let bias = tape.constant(m.bias());
            tape.add(scores, bias)?
        }
        None => scores,
    };
    let weights = tape.softmax(scores)?;
    tape.matmul(weights, values)
}

/// Parameter names for one multi-head attention block under a prefix.
pub fn mha_param_names(prefix: &str) -> [String; 8] {
    [
        format!("{prefix}.wq"),
        format!("{prefix}.bq"),
        format!("{prefix}.wk"),
        format!("{prefix}.bk"),
        format!("{prefix}.wv"),
        format!("{prefix}.bv"),
        format!("{prefix}.wo"),
        format!("{prefix}.bo"),
    ]
}

pub fn init_mha_params(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut RngStream) {
    let [wq, bq, wk, bk, wv, bv, wo, bo] = mha_param_names(prefix);
    store.insert(wq, Tensor::xavier(dim, dim, rng));
    store.insert(bq, Tensor::zeros(vec![dim]));
    store.insert(wk, Tensor::xavier(dim, dim, rng));
    store.insert(bk, Tensor::zeros(vec![dim]));
    store.insert(wv, Tensor::xavier(dim, dim, rng));
    store.insert(bv, Tensor::zeros(vec![dim]));
    store.insert(wo, Tensor::xavier(dim, dim, rng));
    store.insert(bo, Tensor::zeros(vec![dim]));
}

/// Multi-head attention: per-head projections of `x_q` and `x_kv`,
/// scaled-dot attention per head, concat, output projection. Parameters are
/// read from the store under `prefix` (see `mha_param_names`).
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: NodeId,
    x_kv: NodeId,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<NodeId> {
    let dim = tape.shape(x_q)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Invalid(format!(
            "model dim {dim} not divisible into {heads} heads"
        )));
    }
    let head_dim = dim / heads;
    let [wq, bq, wk, bk, wv, bv, wo, bo] = mha_param_names(prefix);

    let project = |tape: &mut Tape, x: NodeId, w: &str, b: &str| -> Result<NodeId> {
        let w = tape.param(store, w)?;
        let b = tape.param(store, b)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    };
    let q = project(tape, x_q, &wq, &bq)?;
    let k = project(tape, x_kv, &wk, &bk)?;
    let v = project(tape, x_kv, &wv, &bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        head_outputs.push(scaled_dot_attention(tape, qh, kh, vh, mask)?);
    }
    let concat = tape.concat(&head_outputs, 1)?;
    project(tape, concat, &wo, &bo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(tape: &mut Tape, rows: &[&[f64]]) -> NodeId {
        let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        tape.constant(t)
    }

    #[test]
    fn single_key_value_returns_that_value() {
        let mut tape = Tape::new();
        let q = constant(&mut tape, &[&[3.7, -1.0], &[0.0, 0.5]]);
        let k = constant(&mut tape, &[&[0.2, 0.9]]);
        let v = constant(&mut tape, &[&[5.0, 6.0]]);
        let out = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let q = constant(&mut tape, &[&[1.0, 2.0]]);
        let k = constant(&mut tape, &[&[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4]]);
        let v = constant(&mut tape, &[&[3.0, 0.0], &[6.0, 3.0], &[0.0, 0.0]]);
        let out = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - 3.0).abs() < 1e-12);
        assert!((got[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_key_blend() {
        // d=1, q=[1], k=[0, ln 9]: logits [0, ln 9], weights [0.1, 0.9]
        let mut tape = Tape::new();
        let q = constant(&mut tape, &[&[1.0]]);
        let k = constant(&mut tape, &[&[0.0], &[9.0_f64.ln()]]);
        let v = constant(&mut tape, &[&[10.0], &[20.0]]);
        let out = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        let expected = 0.1 * 10.0 + 0.9 * 20.0;
        assert!((tape.value(out).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn mask_rejects_fully_masked_row() {
        let keep = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(AttentionMask::new(keep).is_err());
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut tape = Tape::new();
        let q = constant(&mut tape, &[&[1.0]]);
        let k = constant(&mut tape, &[&[0.0], &[0.0]]);
        let v = constant(&mut tape, &[&[10.0], &[20.0]]);
        let mask = AttentionMask::new(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let out = scaled_dot_attention(&mut tape, q, k, v, Some(&mask)).unwrap();
        assert!((tape.value(out).data()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = AttentionMask::causal(3);
        assert_eq!(
            m.keep.data(),
            &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn single_head_identity_projections_reduce_to_scaled_dot() {
        let dim = 3;
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0);
        init_mha_params(&mut store, "attn", dim, &mut rng);
        // overwrite with identity projections
        let mut eye = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            eye.set2(i, i, 1.0);
        }
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            *store.get_mut(w).unwrap() = eye.clone();
        }

        let mut tape = Tape::new();
        let x = constant(&mut tape, &[&[0.1, -0.4, 0.9], &[1.2, 0.0, -0.3]]);
        let mha = multi_head_attention(&mut tape, x, x, &store, "attn", 1, None).unwrap();
        let plain = scaled_dot_attention(&mut tape, x, x, x, None).unwrap();
        assert!(tape.value(mha).max_abs_diff(tape.value(plain)) < 1e-12);
    }

    #[test]
    fn output_shape_is_len_by_model_dim() {
        let dim = 4;
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        init_mha_params(&mut store, "attn", dim, &mut rng);
        let mut tape = Tape::new();
        let xq = tape.constant(Tensor::zeros(vec![5, dim]));
        let xkv = tape.constant(Tensor::zeros(vec![7, dim]));
        let out = multi_head_attention(&mut tape, xq, xkv, &store, "attn", 2, None).unwrap();
        assert_eq!(tape.shape(out), &[5, dim]);
    }

    #[test]
    fn indivisible_head_split_rejected() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(2);
        init_mha_params(&mut store, "attn", 4, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(multi_head_attention(&mut tape, x, x, &store, "attn", 3, None).is_err());
    }

    #[test]
    fn mha_gradient_matches_finite_differences() {
        use crate::gradcheck;
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3);
        init_mha_params(&mut store, "attn", 4, &mut rng);
        store.insert("x", Tensor::xavier(2, 4, &mut rng));
        let build = |tape: &mut Tape, p: &ParamStore| {
            let x = tape.param(p, "x")?;
            let y = multi_head_attention(tape, x, x, p, "attn", 2, None)?;
            let y = tape.tanh(y)?;
            tape.sum(y)
        };
        let outcome = gradcheck::compare(&build, &store, 1e-5).unwrap();
        assert!(
            outcome.max_rel_err <= 1e-5,
            "rel err {}",
            outcome.max_rel_err
        );
    }
}
