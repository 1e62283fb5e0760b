//! Finite-difference gradient checking.
//!
//! `numeric_gradient` is the independent oracle: it only ever evaluates the
//! forward pass, so it shares no code with the backward sweep it is used to
//! verify. The suite functions drive it across every primitive and across
//! end-to-end model losses.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{NodeId, PrimKind, Tape};
use crate::tensor::Tensor;

/// Central finite differences of a scalar function of the parameter store,
/// one coordinate at a time. The step is scaled per coordinate magnitude:
/// eps_eff = eps * max(1, |x|).
pub fn numeric_gradient(
    f: &dyn Fn(&ParamStore) -> Result<f64>,
    params: &ParamStore,
    eps: f64,
) -> Result<BTreeMap<String, Tensor>> {
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let len = params.get(&name)?.len();
        let mut grad = Tensor::zeros(params.get(&name)?.shape().to_vec());
        for i in 0..len {
            let base = params.get(&name)?.data()[i];
            let step = eps * base.abs().max(1.0);

            work.get_mut(&name)?.data_mut()[i] = base + step;
            let plus = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = base - step;
            let minus = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = base;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective non-finite while perturbing `{name}`[{i}]"
                )));
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// Absolute floor on the relative-error denominator. Parameters whose true
/// gradient is identically zero (e.g. a bias that only shifts all softmax
/// logits uniformly) leave both sides as sub-1e-9 rounding noise; without a
/// floor the metric would divide noise by noise.
const REL_ERR_FLOOR: f64 = 1e-4;

/// Norm-relative error ||a - n|| / max(||a|| + ||n||, floor), the standard
/// gradient-checking metric.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let mut diff = 0.0;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        diff += (a - n) * (a - n);
    }
    let denom = (analytic.l2_norm() + numeric.l2_norm()).max(REL_ERR_FLOOR);
    diff.sqrt() / denom
}

/// Result of one backward-vs-finite-differences comparison.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub per_param: BTreeMap<String, f64>,
}

/// Build the graph with `build`, compare tape gradients against the
/// finite-difference oracle for every parameter in the store.
pub fn compare(
    build: &dyn Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
    params: &ParamStore,
    eps: f64,
) -> Result<CheckOutcome> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let pass = tape.backward(loss)?;
    let analytic = tape.param_grads(&pass, params);

    let objective = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        t.value(l).item()
    };
    let numeric = numeric_gradient(&objective, params, eps)?;

    let mut per_param = BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;
    for (name, a) in &analytic {
        let n = numeric
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("oracle missing `{name}`")))?;
        let err = relative_error(a, n);
        max_rel_err = max_rel_err.max(err);
        per_param.insert(name.clone(), err);
    }
    Ok(CheckOutcome {
        max_rel_err,
        per_param,
    })
}

const FD_EPS: f64 = 1e-5;

fn rand_tensor(shape: Vec<usize>, rng: &mut RngStream, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(shape, data).expect("shape by construction")
}

/// Random value bounded away from zero, for kink-free relu/l2 checks.
fn rand_tensor_off_zero(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            sign * rng.uniform(0.2, 1.5)
        })
        .collect();
    Tensor::new(shape, data).expect("shape by construction")
}

/// One randomized finite-difference check of a single primitive. Returns the
/// max norm-relative error over the primitive's differentiable inputs.
pub fn check_primitive(kind: PrimKind, rng: &mut RngStream) -> Result<f64> {
    let mut params = ParamStore::new();
    let m = rng.range_usize(1, 4);
    let k = rng.range_usize(1, 4);
    let n = rng.range_usize(1, 4);

    // Every builder funnels the primitive's output through tanh and a
    // weighted sum so the upstream gradient is non-uniform.
    let weighted_sum = |tape: &mut Tape, x: NodeId, w: &Tensor| -> Result<NodeId> {
        let wid = tape.constant(w.clone());
        let prod = tape.mul(x, wid)?;
        tape.sum(prod)
    };

    let build: Box<dyn Fn(&mut Tape, &ParamStore) -> Result<NodeId>> = match kind {
        PrimKind::Matmul => {
            params.insert("a", rand_tensor(vec![m, k], rng, -1.0, 1.0));
            params.insert("b", rand_tensor(vec![k, n], rng, -1.0, 1.0));
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let a = tape.param(p, "a")?;
                let b = tape.param(p, "b")?;
                let y = tape.matmul(a, b)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Transpose => {
            params.insert("x", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            let w = rand_tensor(vec![n, m], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let y = tape.transpose(x)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Add => {
            params.insert("a", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            params.insert("b", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let a = tape.param(p, "a")?;
                let b = tape.param(p, "b")?;
                let y = tape.add(a, b)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::AddRow => {
            params.insert("x", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            params.insert("row", rand_tensor(vec![n], rng, -1.0, 1.0));
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let r = tape.param(p, "row")?;
                let y = tape.add_row(x, r)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Mul => {
            params.insert("a", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            params.insert("b", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let a = tape.param(p, "a")?;
                let b = tape.param(p, "b")?;
                let y = tape.mul(a, b)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Scale => {
            params.insert("x", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            let alpha = rng.uniform(-2.0, 2.0);
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let y = tape.scale(x, alpha)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::ScaleBy => {
            params.insert("x", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            params.insert("s", rand_tensor(vec![1], rng, -1.5, 1.5));
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let s = tape.param(p, "s")?;
                let y = tape.scale_by(x, s)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Concat => {
            let axis = rng.range_usize(0, 1);
            let (sa, sb) = if axis == 0 {
                (vec![m, n], vec![k, n])
            } else {
                (vec![m, n], vec![m, k])
            };
            params.insert("a", rand_tensor(sa.clone(), rng, -1.0, 1.0));
            params.insert("b", rand_tensor(sb.clone(), rng, -1.0, 1.0));
            let out_shape = if axis == 0 {
                vec![m + k, n]
            } else {
                vec![m, n + k]
            };
            let w = rand_tensor(out_shape, rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let a = tape.param(p, "a")?;
                let b = tape.param(p, "b")?;
                let y = tape.concat(&[a, b], axis)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Slice => {
            let rows = m + 1;
            let cols = n + 1;
            params.insert("x", rand_tensor(vec![rows, cols], rng, -1.0, 1.0));
            let axis = rng.range_usize(0, 1);
            let bound = if axis == 0 { rows } else { cols };
            let start = rng.range_usize(0, bound - 1);
            let end = rng.range_usize(start + 1, bound);
            let out_shape = if axis == 0 {
                vec![end - start, cols]
            } else {
                vec![rows, end - start]
            };
            let w = rand_tensor(out_shape, rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let y = tape.slice(x, axis, start, end)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Embedding => {
            let vocab = rng.range_usize(2, 6);
            let dim = rng.range_usize(1, 4);
            params.insert("table", rand_tensor(vec![vocab, dim], rng, -1.0, 1.0));
            // repeats exercise the scatter-add path
            let ids: Vec<u32> = (0..rng.range_usize(1, 6))
                .map(|_| rng.below(vocab as u64) as u32)
                .collect();
            let w = rand_tensor(vec![ids.len(), dim], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let t = tape.param(p, "table")?;
                let y = tape.embedding(t, &ids)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Tanh | PrimKind::Sigmoid | PrimKind::Exp => {
            params.insert("x", rand_tensor(vec![m, n], rng, -1.5, 1.5));
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let y = match kind {
                    PrimKind::Tanh => tape.tanh(x)?,
                    PrimKind::Sigmoid => tape.sigmoid(x)?,
                    _ => tape.exp(x)?,
                };
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Relu => {
            params.insert("x", rand_tensor_off_zero(vec![m, n], rng));
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let y = tape.relu(x)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Softmax => {
            params.insert("x", rand_tensor(vec![m, n], rng, -2.0, 2.0));
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let y = tape.softmax(x)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::LayerNorm => {
            let cols = n + 1; // avoid the degenerate single-column row
            params.insert("x", rand_tensor(vec![m, cols], rng, -2.0, 2.0));
            params.insert("gain", rand_tensor(vec![cols], rng, 0.5, 1.5));
            params.insert("bias", rand_tensor(vec![cols], rng, -0.5, 0.5));
            let w = rand_tensor(vec![m, cols], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let g = tape.param(p, "gain")?;
                let b = tape.param(p, "bias")?;
                let y = tape.layer_norm(x, g, b)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Dropout => {
            params.insert("x", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            let rate = rng.uniform(0.1, 0.6);
            let mask_seed = rng.next_u64();
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            // the fixed seed makes every evaluation reuse the same mask, so
            // the objective is a deterministic linear map
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let mut mask_rng = RngStream::new(mask_seed);
                let y = tape.dropout(x, rate, true, &mut mask_rng)?;
                weighted_sum(tape, y, &w)
            })
        }
        PrimKind::Sum => {
            params.insert("x", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let s = tape.sum(x)?;
                tape.tanh(s)
            })
        }
        PrimKind::Mean => {
            params.insert("x", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let s = tape.mean(x)?;
                tape.tanh(s)
            })
        }
        PrimKind::L2Norm => {
            params.insert("x", rand_tensor_off_zero(vec![m, n], rng));
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let s = tape.l2_norm(x)?;
                tape.tanh(s)
            })
        }
        PrimKind::CrossEntropy => {
            let vocab = rng.range_usize(2, 6);
            let len = rng.range_usize(1, 5);
            params.insert("logits", rand_tensor(vec![len, vocab], rng, -2.0, 2.0));
            let targets: Vec<u32> = (0..len).map(|_| rng.below(vocab as u64) as u32).collect();
            let smoothing = if rng.next_f64() < 0.5 { 0.0 } else { 0.1 };
            let w = rand_tensor(vec![len], rng, 0.1, 1.0);
            Box::new(move |tape, p| {
                let l = tape.param(p, "logits")?;
                let ce = tape.cross_entropy(l, &targets, smoothing)?;
                weighted_sum(tape, ce, &w)
            })
        }
        PrimKind::ReverseRows => {
            params.insert("x", rand_tensor(vec![m, n], rng, -1.0, 1.0));
            let w = rand_tensor(vec![m, n], rng, -1.0, 1.0);
            Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let y = tape.reverse_rows(x)?;
                let y = tape.tanh(y)?;
                weighted_sum(tape, y, &w)
            })
        }
    };

    Ok(compare(build.as_ref(), &params, FD_EPS)?.max_rel_err)
}

/// Run `trials` randomized checks for every primitive. Returns
/// (primitive name, max relative error over trials).
pub fn primitive_suite(trials: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut results = Vec::new();
    let mut rng = RngStream::new(seed);
    for kind in PrimKind::ALL {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            worst = worst.max(check_primitive(kind, &mut rng)?);
        }
        results.push((kind.name().to_string(), worst));
    }
    Ok(results)
}

/// Finite-difference check of the full training loss (dropout disabled) for
/// one model configuration, over every parameter in the store.
fn check_model(
    family: crate::encoders::Family,
    layers: usize,
    mode: crate::seq2seq::AttentionMode,
    seed: u64,
) -> Result<f64> {
    use crate::seq2seq::{compute_loss, decoder_forward, Batch, ModelConfig};

    let mut cfg = ModelConfig::toy(family, layers, mode);
    cfg.encoder.model_dim = 8;
    cfg.encoder.ff_dim = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.dropout_rate = 0.0;
    cfg.transparent_dropout = 0.0;
    cfg.vocab_size = 10;
    cfg.decoder_layers = 2;
    let params = cfg.init_params(seed)?;
    let batch = Batch::new(
        &[vec![2, 5, 7], vec![4, 3]],
        &[vec![5, 2, 6], vec![3, 4]],
        10,
    )?;

    let build = move |tape: &mut Tape, p: &ParamStore| {
        let mut rng = RngStream::new(0);
        let logits = decoder_forward(tape, p, &cfg, &batch, false, &mut rng, false)?;
        compute_loss(tape, &logits, &batch, cfg.label_smoothing)
    };
    Ok(compare(&build, &params, FD_EPS)?.max_rel_err)
}

/// End-to-end gradient checks for both model families at 2 and 4 encoder
/// layers, in both attention modes. Returns (label, max relative error).
pub fn model_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    use crate::encoders::Family;
    use crate::seq2seq::AttentionMode;

    let mut results = Vec::new();
    for family in [Family::Transformer, Family::Recurrent] {
        for layers in [2usize, 4] {
            for mode in [AttentionMode::Baseline, AttentionMode::Transparent] {
                let label = format!("{}-{}l-{}", family.name(), layers, mode.name());
                results.push((label, check_model(family, layers, mode, seed)?));
            }
        }
    }
    Ok(results)
}

/// The full gradient oracle suite: every primitive at `trials` random
/// configurations plus the end-to-end model losses.
pub fn full_suite(trials: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut results = primitive_suite(trials, seed)?;
    results.extend(model_suite(seed)?);
    Ok(results)
}
