//! Deep encoders for both model families.
//!
//! The transformer encoder stacks self-attention + feed-forward layers with
//! optional residual connections and a configurable norm placement. The
//! recurrent encoder is one bidirectional LSTM layer projected back to the
//! model dim, unidirectional LSTM layers above it, and residual connections
//! from layer 3 onward.
//!
//! Both emit the full `LayerStack` h^0..h^N (h^0 = embeddings) and register
//! gradient taps at every layer so the grad-norm diagnostics can read them.

use crate::attention::{multi_head_attention, AttentionMask};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::transparent::LayerStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Transformer,
    Recurrent,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Transformer => "transformer",
            Family::Recurrent => "recurrent",
        }
    }

    pub fn from_name(name: &str) -> Result<Family> {
        match name {
            "transformer" => Ok(Family::Transformer),
            "recurrent" => Ok(Family::Recurrent),
            other => Err(Error::Invalid(format!("unknown family `{other}`"))),
        }
    }
}

/// Where layer normalization sits relative to each sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPlacement {
    /// norm -> sublayer -> dropout -> (+ input)
    Pre,
    /// sublayer -> dropout -> (+ input) -> norm
    Post,
}

impl NormPlacement {
    pub fn name(self) -> &'static str {
        match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        }
    }

    pub fn from_name(name: &str) -> Result<NormPlacement> {
        match name {
            "pre" => Ok(NormPlacement::Pre),
            "post" => Ok(NormPlacement::Post),
            other => Err(Error::Invalid(format!("unknown norm placement `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub family: Family,
    pub num_layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub use_residual: bool,
    pub dropout_rate: f64,
    pub norm_placement: NormPlacement,
}

impl EncoderConfig {
    /// Toy defaults: scaled-down stand-ins for the base-model sizes.
    pub fn toy(family: Family, num_layers: usize) -> Self {
        EncoderConfig {
            family,
            num_layers,
            model_dim: 64,
            ff_dim: 256,
            heads: 4,
            use_residual: true,
            dropout_rate: 0.1,
            norm_placement: NormPlacement::Pre,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Invalid("encoder needs at least one layer".into()));
        }
        if self.model_dim == 0 {
            return Err(Error::Invalid("model_dim must be positive".into()));
        }
        if self.family == Family::Transformer
            && (self.heads == 0 || self.model_dim % self.heads != 0)
        {
            return Err(Error::Invalid(format!(
                "model_dim {} not divisible into {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Sinusoidal position encodings, one row per position.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(vec![len, dim]);
    for t in 0..len {
        for i in 0..dim {
            let exponent = 2.0 * (i / 2) as f64 / dim as f64;
            let angle = t as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.set2(t, i, v);
        }
    }
    pe
}

// ---- transformer ---------------------------------------------------------

pub fn init_transformer_encoder_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    vocab_size: usize,
    rng: &mut RngStream,
) {
    let d = cfg.model_dim;
    store.insert("enc.embed", Tensor::xavier(vocab_size, d, rng));
    for l in 1..=cfg.num_layers {
        crate::attention::init_mha_params(store, &format!("enc.l{l}.attn"), d, rng);
        store.insert(format!("enc.l{l}.ln1.gain"), Tensor::full(vec![d], 1.0));
        store.insert(format!("enc.l{l}.ln1.bias"), Tensor::zeros(vec![d]));
        store.insert(
            format!("enc.l{l}.ff.w1"),
            Tensor::xavier(d, cfg.ff_dim, rng),
        );
        store.insert(format!("enc.l{l}.ff.b1"), Tensor::zeros(vec![cfg.ff_dim]));
        store.insert(
            format!("enc.l{l}.ff.w2"),
            Tensor::xavier(cfg.ff_dim, d, rng),
        );
        store.insert(format!("enc.l{l}.ff.b2"), Tensor::zeros(vec![d]));
        store.insert(format!("enc.l{l}.ln2.gain"), Tensor::full(vec![d], 1.0));
        store.insert(format!("enc.l{l}.ln2.bias"), Tensor::zeros(vec![d]));
    }
}

pub(crate) fn feed_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w1 = tape.param(store, &format!("{prefix}.w1"))?;
    let b1 = tape.param(store, &format!("{prefix}.b1"))?;
    let w2 = tape.param(store, &format!("{prefix}.w2"))?;
    let b2 = tape.param(store, &format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w2)?;
    tape.add_row(h, b2)
}

pub(crate) fn layer_norm_named(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gain = tape.param(store, &format!("{prefix}.gain"))?;
    let bias = tape.param(store, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, gain, bias)
}

/// One sublayer wrapped per the configured norm placement and residual flag.
pub(crate) fn wrap_sublayer(
    tape: &mut Tape,
    store: &ParamStore,
    ln_prefix: &str,
    cfg_norm: NormPlacement,
    use_residual: bool,
    dropout_rate: f64,
    training: bool,
    rng: &mut RngStream,
    x: NodeId,
    sublayer: impl FnOnce(&mut Tape, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    match cfg_norm {
        NormPlacement::Pre => {
            let normed = layer_norm_named(tape, store, ln_prefix, x)?;
            let y = sublayer(tape, normed)?;
            let y = tape.dropout(y, dropout_rate, training, rng)?;
            if use_residual {
                tape.add(x, y)
            } else {
                Ok(y)
            }
        }
        NormPlacement::Post => {
            let y = sublayer(tape, x)?;
            let y = tape.dropout(y, dropout_rate, training, rng)?;
            let y = if use_residual { tape.add(x, y)? } else { y };
            layer_norm_named(tape, store, ln_prefix, y)
        }
    }
}

/// Self-attention sublayer then feed-forward sublayer.
pub fn transformer_encoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    h_in: NodeId,
    mask: Option<&AttentionMask>,
    training: bool,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let shape = tape.shape(h_in);
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(Error::Shape(format!(
            "encoder layer input {:?}, expected (T, {})",
            shape, cfg.model_dim
        )));
    }
    let attn_prefix = format!("enc.l{layer}.attn");
    let heads = cfg.heads;
    let h = wrap_sublayer(
        tape,
        store,
        &format!("enc.l{layer}.ln1"),
        cfg.norm_placement,
        cfg.use_residual,
        cfg.dropout_rate,
        training,
        rng,
        h_in,
        |tape, x| multi_head_attention(tape, x, x, store, &attn_prefix, heads, mask),
    )?;
    let ff_prefix = format!("enc.l{layer}.ff");
    wrap_sublayer(
        tape,
        store,
        &format!("enc.l{layer}.ln2"),
        cfg.norm_placement,
        cfg.use_residual,
        cfg.dropout_rate,
        training,
        rng,
        h,
        |tape, x| feed_forward(tape, store, &ff_prefix, x),
    )
}

/// Full encoder pass over one token sequence. Registers taps
/// `{tap_scope}.h0` .. `{tap_scope}.hN` when a scope is given.
pub fn run_transformer_encoder(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    tokens: &[u32],
    training: bool,
    rng: &mut RngStream,
    tap_scope: Option<&str>,
) -> Result<LayerStack> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    let table = tape.param(store, "enc.embed")?;
    let emb = tape.embedding(table, tokens)?;
    let emb = tape.scale(emb, (cfg.model_dim as f64).sqrt())?;
    let pos = tape.constant(sinusoidal_positions(tokens.len(), cfg.model_dim));
    let mut h = tape.add(emb, pos)?;

    let mut layers = vec![h];
    for l in 1..=cfg.num_layers {
        h = transformer_encoder_layer(tape, store, cfg, l, h, None, training, rng)?;
        layers.push(h);
    }
    if let Some(scope) = tap_scope {
        for (i, &id) in layers.iter().enumerate() {
            tape.tap(&format!("{scope}.h{i}"), id)?;
        }
    }
    LayerStack::new(tape, layers)
}

// ---- recurrent ------------------------------------------------------------

/// Gate packing order within the stacked LSTM weight matrices.
/// Columns [0,d) input gate, [d,2d) forget, [2d,3d) cell, [3d,4d) output.
pub fn init_recurrent_encoder_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    vocab_size: usize,
    rng: &mut RngStream,
) {
    let d = cfg.model_dim;
    store.insert("enc.embed", Tensor::xavier(vocab_size, d, rng));
    for dir in ["fwd", "bwd"] {
        store.insert(format!("enc.l1.{dir}.wx"), Tensor::xavier(d, 4 * d, rng));
        store.insert(format!("enc.l1.{dir}.wh"), Tensor::xavier(d, 4 * d, rng));
        store.insert(format!("enc.l1.{dir}.b"), Tensor::zeros(vec![4 * d]));
    }
    store.insert("enc.l1.proj.w", Tensor::xavier(2 * d, d, rng));
    store.insert("enc.l1.proj.b", Tensor::zeros(vec![d]));
    for l in 2..=cfg.num_layers {
        store.insert(format!("enc.l{l}.wx"), Tensor::xavier(d, 4 * d, rng));
        store.insert(format!("enc.l{l}.wh"), Tensor::xavier(d, 4 * d, rng));
        store.insert(format!("enc.l{l}.b"), Tensor::zeros(vec![4 * d]));
    }
}

pub(crate) struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

/// One LSTM cell step. `x` is a (1, d_in) row, state tensors are (1, d).
pub(crate) fn lstm_cell(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    state: &LstmState,
) -> Result<LstmState> {
    let wx = tape.param(store, &format!("{prefix}.wx"))?;
    let wh = tape.param(store, &format!("{prefix}.wh"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let d = tape.shape(wh)[0];

    let zx = tape.matmul(x, wx)?;
    let zh = tape.matmul(state.h, wh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, b)?;

    let i_raw = tape.slice(z, 1, 0, d)?;
    let f_raw = tape.slice(z, 1, d, 2 * d)?;
    let g_raw = tape.slice(z, 1, 2 * d, 3 * d)?;
    let o_raw = tape.slice(z, 1, 3 * d, 4 * d)?;

    let i = tape.sigmoid(i_raw)?;
    let f = tape.sigmoid(f_raw)?;
    let g = tape.tanh(g_raw)?;
    let o = tape.sigmoid(o_raw)?;

    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let ct = tape.tanh(c)?;
    let h = tape.mul(o, ct)?;
    Ok(LstmState { h, c })
}

/// Run an LSTM over all rows of `input` (T, d_in), returning stacked hidden
/// states (T, d). `reverse` runs right-to-left and restores row order.
pub(crate) fn lstm_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    input: NodeId,
    reverse: bool,
) -> Result<NodeId> {
    let steps = tape.shape(input)[0];
    let d = store.get(&format!("{prefix}.wh"))?.shape()[0];
    let input = if reverse {
        tape.reverse_rows(input)?
    } else {
        input
    };
    let mut state = LstmState {
        h: tape.constant(Tensor::zeros(vec![1, d])),
        c: tape.constant(Tensor::zeros(vec![1, d])),
    };
    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.slice(input, 0, t, t + 1)?;
        state = lstm_cell(tape, store, prefix, x, &state)?;
        rows.push(state.h);
    }
    let stacked = tape.concat(&rows, 0)?;
    if reverse {
        tape.reverse_rows(stacked)
    } else {
        Ok(stacked)
    }
}

/// Recurrent encoder: bidirectional first layer projected to the model dim,
/// unidirectional layers above, residuals from layer 3 onward.
pub fn run_recurrent_encoder(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    tokens: &[u32],
    training: bool,
    rng: &mut RngStream,
    tap_scope: Option<&str>,
) -> Result<LayerStack> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    let table = tape.param(store, "enc.embed")?;
    let h0 = tape.embedding(table, tokens)?;

    let fwd = lstm_sequence(tape, store, "enc.l1.fwd", h0, false)?;
    let bwd = lstm_sequence(tape, store, "enc.l1.bwd", h0, true)?;
    let both = tape.concat(&[fwd, bwd], 1)?;
    let proj_w = tape.param(store, "enc.l1.proj.w")?;
    let proj_b = tape.param(store, "enc.l1.proj.b")?;
    let projected = tape.matmul(both, proj_w)?;
    let projected = tape.add_row(projected, proj_b)?;
    let mut h = tape.dropout(projected, cfg.dropout_rate, training, rng)?;

    let mut layers = vec![h0, h];
    for l in 2..=cfg.num_layers {
        let out = lstm_sequence(tape, store, &format!("enc.l{l}"), h, false)?;
        let out = tape.dropout(out, cfg.dropout_rate, training, rng)?;
        h = if cfg.use_residual && l >= 3 {
            tape.add(out, h)?
        } else {
            out
        };
        layers.push(h);
    }
    if let Some(scope) = tap_scope {
        for (i, &id) in layers.iter().enumerate() {
            tape.tap(&format!("{scope}.h{i}"), id)?;
        }
    }
    LayerStack::new(tape, layers)
}

/// Dispatch on the configured family.
pub fn run_encoder(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    tokens: &[u32],
    training: bool,
    rng: &mut RngStream,
    tap_scope: Option<&str>,
) -> Result<LayerStack> {
    match cfg.family {
        Family::Transformer => {
            run_transformer_encoder(tape, store, cfg, tokens, training, rng, tap_scope)
        }
        Family::Recurrent => {
            run_recurrent_encoder(tape, store, cfg, tokens, training, rng, tap_scope)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(family: Family, layers: usize) -> EncoderConfig {
        EncoderConfig {
            family,
            num_layers: layers,
            model_dim: 8,
            ff_dim: 16,
            heads: 2,
            use_residual: true,
            dropout_rate: 0.0,
            norm_placement: NormPlacement::Pre,
        }
    }

    fn zero_sublayer_outputs(store: &mut ParamStore, layers: usize, cfg: &EncoderConfig) {
        // zero every weight feeding a sublayer output: attention value/out
        // projections and the whole feed-forward path
        for l in 1..=layers {
            for name in ["wv", "bv", "wo", "bo"] {
                let key = format!("enc.l{l}.attn.{name}");
                let shape = store.get(&key).unwrap().shape().to_vec();
                *store.get_mut(&key).unwrap() = Tensor::zeros(shape);
            }
            for name in ["w1", "b1", "w2", "b2"] {
                let key = format!("enc.l{l}.ff.{name}");
                let shape = store.get(&key).unwrap().shape().to_vec();
                *store.get_mut(&key).unwrap() = Tensor::zeros(shape);
            }
        }
        let _ = cfg;
    }

    #[test]
    fn residual_zeroed_sublayers_is_identity() {
        let cfg = small_cfg(Family::Transformer, 3);
        let mut rng = RngStream::new(5);
        let mut store = ParamStore::new();
        init_transformer_encoder_params(&mut store, &cfg, 10, &mut rng);
        zero_sublayer_outputs(&mut store, 3, &cfg);

        let mut tape = Tape::new();
        let mut fwd_rng = RngStream::new(0);
        let stack = run_transformer_encoder(
            &mut tape,
            &store,
            &cfg,
            &[2, 5, 7],
            false,
            &mut fwd_rng,
            None,
        )
        .unwrap();
        let h0 = tape.value(stack.layer(0)).clone();
        for i in 1..stack.len() {
            assert!(
                tape.value(stack.layer(i)).max_abs_diff(&h0) < 1e-12,
                "layer {i} not the identity of h0"
            );
        }
    }

    #[test]
    fn no_residual_zeroed_sublayers_collapses_to_zero() {
        let mut cfg = small_cfg(Family::Transformer, 2);
        cfg.use_residual = false;
        let mut rng = RngStream::new(6);
        let mut store = ParamStore::new();
        init_transformer_encoder_params(&mut store, &cfg, 10, &mut rng);
        zero_sublayer_outputs(&mut store, 2, &cfg);

        let mut tape = Tape::new();
        let mut fwd_rng = RngStream::new(0);
        let stack =
            run_transformer_encoder(&mut tape, &store, &cfg, &[1, 2], false, &mut fwd_rng, None)
                .unwrap();
        let top = tape.value(stack.top());
        assert!(top.data().iter().all(|&v| v == 0.0));
        let h0 = tape.value(stack.layer(0));
        assert!(h0.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stack_length_is_layers_plus_one() {
        for n in [1, 4, 20] {
            let cfg = small_cfg(Family::Transformer, n);
            let mut rng = RngStream::new(7);
            let mut store = ParamStore::new();
            init_transformer_encoder_params(&mut store, &cfg, 10, &mut rng);
            let mut tape = Tape::new();
            let mut fwd_rng = RngStream::new(0);
            let stack =
                run_transformer_encoder(&mut tape, &store, &cfg, &[3], false, &mut fwd_rng, None)
                    .unwrap();
            assert_eq!(stack.len(), n + 1);
        }
    }

    #[test]
    fn identical_tokens_and_seed_give_identical_stacks() {
        let cfg = EncoderConfig {
            dropout_rate: 0.2,
            ..small_cfg(Family::Transformer, 2)
        };
        let mut rng = RngStream::new(8);
        let mut store = ParamStore::new();
        init_transformer_encoder_params(&mut store, &cfg, 10, &mut rng);

        let run = || {
            let mut tape = Tape::new();
            let mut fwd_rng = RngStream::new(99);
            let stack = run_transformer_encoder(
                &mut tape,
                &store,
                &cfg,
                &[4, 4, 9],
                true,
                &mut fwd_rng,
                None,
            )
            .unwrap();
            (0..stack.len())
                .flat_map(|i| {
                    tape.value(stack.layer(i))
                        .data()
                        .iter()
                        .map(|v| v.to_bits())
                })
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn out_of_vocab_rejected() {
        let cfg = small_cfg(Family::Transformer, 1);
        let mut rng = RngStream::new(9);
        let mut store = ParamStore::new();
        init_transformer_encoder_params(&mut store, &cfg, 10, &mut rng);
        let mut tape = Tape::new();
        let mut fwd_rng = RngStream::new(0);
        assert!(
            run_transformer_encoder(&mut tape, &store, &cfg, &[10], false, &mut fwd_rng, None)
                .is_err()
        );
    }

    #[test]
    fn transformer_layer_gradient_matches_finite_differences() {
        use crate::gradcheck;
        let cfg = small_cfg(Family::Transformer, 1);
        let mut rng = RngStream::new(10);
        let mut store = ParamStore::new();
        init_transformer_encoder_params(&mut store, &cfg, 10, &mut rng);
        store.insert("x", Tensor::xavier(3, 8, &mut rng));

        let build = |tape: &mut Tape, p: &ParamStore| {
            let x = tape.param(p, "x")?;
            let mut fwd_rng = RngStream::new(0);
            let h = transformer_encoder_layer(tape, p, &cfg, 1, x, None, false, &mut fwd_rng)?;
            let h = tape.tanh(h)?;
            tape.sum(h)
        };
        let outcome = gradcheck::compare(&build, &store, 1e-5).unwrap();
        assert!(
            outcome.max_rel_err <= 1e-5,
            "rel err {}",
            outcome.max_rel_err
        );
    }

    #[test]
    fn lstm_zero_weights_give_zero_states() {
        let cfg = small_cfg(Family::Recurrent, 3);
        let mut rng = RngStream::new(11);
        let mut store = ParamStore::new();
        init_recurrent_encoder_params(&mut store, &cfg, 10, &mut rng);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            if name != "enc.embed" {
                let shape = store.get(&name).unwrap().shape().to_vec();
                *store.get_mut(&name).unwrap() = Tensor::zeros(shape);
            }
        }
        let mut tape = Tape::new();
        let mut fwd_rng = RngStream::new(0);
        let stack = run_recurrent_encoder(
            &mut tape,
            &store,
            &cfg,
            &[1, 2, 3],
            false,
            &mut fwd_rng,
            None,
        )
        .unwrap();
        for i in 1..stack.len() {
            assert!(tape.value(stack.layer(i)).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn recurrent_stack_length_is_layers_plus_one() {
        let cfg = small_cfg(Family::Recurrent, 4);
        let mut rng = RngStream::new(12);
        let mut store = ParamStore::new();
        init_recurrent_encoder_params(&mut store, &cfg, 10, &mut rng);
        let mut tape = Tape::new();
        let mut fwd_rng = RngStream::new(0);
        let stack =
            run_recurrent_encoder(&mut tape, &store, &cfg, &[5, 6], false, &mut fwd_rng, None)
                .unwrap();
        assert_eq!(stack.len(), 5);
    }

    #[test]
    fn lstm_cell_matches_hand_evaluated_gates() {
        // d = 1 scalar cell: z = x*wx + h*wh + b, gates [i, f, g, o]
        let d = 1;
        let mut store = ParamStore::new();
        store.insert(
            "cell.wx",
            Tensor::new(vec![d, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        store.insert(
            "cell.wh",
            Tensor::new(vec![d, 4], vec![0.5, -0.5, 0.25, -0.25]).unwrap(),
        );
        store.insert(
            "cell.b",
            Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        );

        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let x0 = 0.5;
        // step 1 by hand, starting from h = c = 0
        let (mut eh, mut ec) = (0.0, 0.0);
        for xv in [x0, -0.3] {
            let zi = xv * 1.0 + eh * 0.5 + 0.1;
            let zf = xv * 2.0 + eh * -0.5 + 0.2;
            let zg = xv * 3.0 + eh * 0.25 + 0.3;
            let zo = xv * 4.0 + eh * -0.25 + 0.4;
            ec = sigma(zf) * ec + sigma(zi) * zg.tanh();
            eh = sigma(zo) * ec.tanh();
        }

        let mut tape = Tape::new();
        let input = tape.constant(Tensor::new(vec![2, 1], vec![x0, -0.3]).unwrap());
        let out = lstm_sequence(&mut tape, &store, "cell", input, false).unwrap();
        let got = tape.value(out).at2(1, 0);
        assert!((got - eh).abs() < 1e-12, "{got} vs {eh}");
    }

    #[test]
    fn recurrent_residuals_start_at_layer_three() {
        // zero only layer >= 3 weights: with residuals those layers must
        // pass h2 through unchanged; without residuals they go to zero
        let mut cfg = small_cfg(Family::Recurrent, 4);
        let mut rng = RngStream::new(13);
        let mut store = ParamStore::new();
        init_recurrent_encoder_params(&mut store, &cfg, 10, &mut rng);
        for l in 3..=4 {
            for suffix in ["wx", "wh", "b"] {
                let key = format!("enc.l{l}.{suffix}");
                let shape = store.get(&key).unwrap().shape().to_vec();
                *store.get_mut(&key).unwrap() = Tensor::zeros(shape);
            }
        }

        let mut tape = Tape::new();
        let mut fwd_rng = RngStream::new(0);
        let stack =
            run_recurrent_encoder(&mut tape, &store, &cfg, &[2, 3], false, &mut fwd_rng, None)
                .unwrap();
        let h2 = tape.value(stack.layer(2)).clone();
        assert!(tape.value(stack.layer(3)).max_abs_diff(&h2) < 1e-12);
        assert!(tape.value(stack.layer(4)).max_abs_diff(&h2) < 1e-12);

        cfg.use_residual = false;
        let mut tape = Tape::new();
        let mut fwd_rng = RngStream::new(0);
        let stack =
            run_recurrent_encoder(&mut tape, &store, &cfg, &[2, 3], false, &mut fwd_rng, None)
                .unwrap();
        assert!(tape.value(stack.layer(3)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_layer_gradient_matches_finite_differences() {
        use crate::gradcheck;
        let mut cfg = small_cfg(Family::Recurrent, 2);
        cfg.model_dim = 4;
        let mut rng = RngStream::new(14);
        let mut store = ParamStore::new();
        init_recurrent_encoder_params(&mut store, &cfg, 8, &mut rng);

        let cfg2 = cfg.clone();
        let build = move |tape: &mut Tape, p: &ParamStore| {
            let mut fwd_rng = RngStream::new(0);
            let stack =
                run_recurrent_encoder(tape, p, &cfg2, &[1, 3, 5], false, &mut fwd_rng, None)?;
            let top = tape.tanh(stack.top())?;
            tape.sum(top)
        };
        let outcome = gradcheck::compare(&build, &store, 1e-5).unwrap();
        assert!(
            outcome.max_rel_err <= 1e-5,
            "rel err {}",
            outcome.max_rel_err
        );
    }

    #[test]
    fn post_norm_layer_normalizes_its_output() {
        // post placement ends every sublayer in a layer norm, so each row of
        // the layer output has zero mean and unit variance (up to eps)
        let mut cfg = small_cfg(Family::Transformer, 1);
        cfg.norm_placement = NormPlacement::Post;
        let mut rng = RngStream::new(21);
        let mut store = ParamStore::new();
        init_transformer_encoder_params(&mut store, &cfg, 10, &mut rng);

        let mut tape = Tape::new();
        let mut fwd_rng = RngStream::new(0);
        let stack =
            run_transformer_encoder(&mut tape, &store, &cfg, &[2, 5, 7], false, &mut fwd_rng, None)
                .unwrap();
        let top = tape.value(stack.top());
        let d = cfg.model_dim as f64;
        for r in 0..top.rows() {
            let row = top.row(r);
            let mean: f64 = row.iter().sum::<f64>() / d;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "row {r} var {var}");
        }
    }

    #[test]
    fn post_norm_layer_gradient_matches_finite_differences() {
        use crate::gradcheck;
        let mut cfg = small_cfg(Family::Transformer, 1);
        cfg.norm_placement = NormPlacement::Post;
        let mut rng = RngStream::new(22);
        let mut store = ParamStore::new();
        init_transformer_encoder_params(&mut store, &cfg, 10, &mut rng);
        store.insert("x", Tensor::xavier(3, 8, &mut rng));

        let cfg2 = cfg.clone();
        let build = move |tape: &mut Tape, p: &ParamStore| {
            let x = tape.param(p, "x")?;
            let mut fwd_rng = RngStream::new(0);
            let h = transformer_encoder_layer(tape, p, &cfg2, 1, x, None, false, &mut fwd_rng)?;
            let h = tape.tanh(h)?;
            tape.sum(h)
        };
        let outcome = gradcheck::compare(&build, &store, 1e-5).unwrap();
        assert!(
            outcome.max_rel_err <= 1e-5,
            "rel err {}",
            outcome.max_rel_err
        );
    }
}
