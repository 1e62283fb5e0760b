//! Transparent attention: each encoder-decoder attention module attends a
//! learned softmax-weighted combination of all encoder layer outputs
//! (embeddings included) instead of only the top layer.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// The N+1 encoder activations h^0..h^N on a tape, h^0 being the embedding
/// output. All entries share one (source length, model dim) shape.
#[derive(Debug, Clone)]
pub struct LayerStack {
    layers: Vec<NodeId>,
}

impl LayerStack {
    pub fn new(tape: &Tape, layers: Vec<NodeId>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("empty layer stack".into()));
        }
        let shape = tape.shape(layers[0]).to_vec();
        for &id in &layers[1..] {
            if tape.shape(id) != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "stack entry {:?} vs {:?}",
                    tape.shape(id),
                    shape
                )));
            }
        }
        Ok(LayerStack { layers })
    }

    /// N + 1: encoder layer count plus the embedding layer.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, i: usize) -> NodeId {
        self.layers[i]
    }

    pub fn top(&self) -> NodeId {
        *self.layers.last().expect("non-empty by construction")
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().copied()
    }
}

/// Name of the transparent logit matrix in the parameter store.
pub const TRANSPARENT_W: &str = "transparent.w";
pub const TRANSPARENT_PROJ_W: &str = "transparent.proj.w";
pub const TRANSPARENT_PROJ_B: &str = "transparent.proj.b";

/// The (N+1) x M learnable logits behind the per-module layer weights.
/// Zero-initialized so training starts from the uniform combination.
#[derive(Debug, Clone)]
pub struct TransparentWeights {
    num_layers: usize,
    num_modules: usize,
}

impl TransparentWeights {
    pub fn register(store: &mut ParamStore, num_layers: usize, num_modules: usize) -> Self {
        store.insert(
            TRANSPARENT_W,
            Tensor::zeros(vec![num_layers + 1, num_modules]),
        );
        TransparentWeights {
            num_layers,
            num_modules,
        }
    }

    /// Wrap logits already present in a store (e.g. after checkpoint load).
    pub fn from_store(store: &ParamStore, num_layers: usize, num_modules: usize) -> Result<Self> {
        let w = store.get(TRANSPARENT_W)?;
        if w.shape() != [num_layers + 1, num_modules] {
            return Err(Error::Shape(format!(
                "transparent logits {:?}, expected ({}, {})",
                w.shape(),
                num_layers + 1,
                num_modules
            )));
        }
        Ok(TransparentWeights {
            num_layers,
            num_modules,
        })
    }

    pub fn rows(&self) -> usize {
        self.num_layers + 1
    }

    pub fn modules(&self) -> usize {
        self.num_modules
    }
}

/// Softmax-normalize the transparent logits into per-module layer weights.
/// Columns (one per attention module) sum to 1. When training, inverted
/// dropout is applied to the logits before the softmax.
///
/// Returns the s matrix node of shape (N+1, M).
pub fn normalize_transparent_weights(
    tape: &mut Tape,
    store: &ParamStore,
    weights: &TransparentWeights,
    dropout_rate: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let w = tape.param(store, TRANSPARENT_W)?;
    if tape.shape(w) != [weights.rows(), weights.modules()] {
        return Err(Error::Shape(format!(
            "transparent logits {:?}, expected ({}, {})",
            tape.shape(w),
            weights.rows(),
            weights.modules()
        )));
    }
    let w = tape.dropout(w, dropout_rate, training, rng)?;
    // softmax normalizes the last axis; columns need it, so transpose around it
    let wt = tape.transpose(w)?;
    let st = tape.softmax(wt)?;
    tape.transpose(st)
}

/// Recompute the s matrix outside any tape, dropout disabled. Used for
/// weight snapshots and logging.
pub fn transparent_weights_eval(
    store: &ParamStore,
    weights: &TransparentWeights,
) -> Result<Tensor> {
    let w = store.get(TRANSPARENT_W)?;
    let (rows, cols) = (weights.rows(), weights.modules());
    if w.shape() != [rows, cols] {
        return Err(Error::Shape(format!("transparent logits {:?}", w.shape())));
    }
    let mut s = Tensor::zeros(vec![rows, cols]);
    for j in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for i in 0..rows {
            max = max.max(w.at2(i, j));
        }
        let mut sum = 0.0;
        for i in 0..rows {
            let e = (w.at2(i, j) - max).exp();
            s.set2(i, j, e);
            sum += e;
        }
        for i in 0..rows {
            s.set2(i, j, s.at2(i, j) / sum);
        }
    }
    Ok(s)
}

/// z^j_t = sum_i s_{i,j} h^i_t: blend the stack with one column of s.
/// `s_column` must be a (N+1, 1) node (one slice of the s matrix).
pub fn combine_layers(tape: &mut Tape, stack: &LayerStack, s_column: NodeId) -> Result<NodeId> {
    let shape = tape.shape(s_column);
    if shape != [stack.len(), 1] {
        return Err(Error::Shape(format!(
            "weight column {:?} for a stack of {}",
            shape,
            stack.len()
        )));
    }
    let mut combined: Option<NodeId> = None;
    for (i, layer) in stack.iter().enumerate() {
        let coeff = tape.slice(s_column, 0, i, i + 1)?;
        let term = tape.scale_by(layer, coeff)?;
        combined = Some(match combined {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    combined.ok_or_else(|| Error::Invalid("empty layer stack".into()))
}

pub fn init_projection(store: &mut ParamStore, dim: usize, rng: &mut RngStream) {
    store.insert(TRANSPARENT_PROJ_W, Tensor::xavier(dim, dim, rng));
    store.insert(TRANSPARENT_PROJ_B, Tensor::zeros(vec![dim]));
}

/// Affine projection of the combined context, used by the recurrent family
/// before its attention module.
pub fn project_combined(tape: &mut Tape, store: &ParamStore, z: NodeId) -> Result<NodeId> {
    let w = tape.param(store, TRANSPARENT_PROJ_W)?;
    let b = tape.param(store, TRANSPARENT_PROJ_B)?;
    let zf = tape.shape(z)[1];
    if tape.shape(w)[0] != zf {
        return Err(Error::Shape(format!(
            "projection input dim {} vs features {zf}",
            tape.shape(w)[0]
        )));
    }
    let y = tape.matmul(z, w)?;
    tape.add_row(y, b)
}
