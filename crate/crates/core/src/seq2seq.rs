//! Full encoder-decoder models wiring baseline or transparent attention into
//! a transformer decoder (one encoder-decoder attention module per decoder
//! layer) and a recurrent decoder (a single attention module), plus token
//! cross-entropy loss and greedy decoding.

use crate::attention::{multi_head_attention, AttentionMask};
use crate::encoders::{
    self, run_encoder, sinusoidal_positions, EncoderConfig, Family, NormPlacement,
};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::transparent::{
    combine_layers, init_projection, normalize_transparent_weights, project_combined, LayerStack,
    TransparentWeights,
};

/// Fixed special token ids of the toy vocabulary.
pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
/// First id available for content tokens.
pub const FIRST_CONTENT_ID: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Baseline,
    Transparent,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Baseline => "baseline",
            AttentionMode::Transparent => "transparent",
        }
    }

    pub fn from_name(name: &str) -> Result<AttentionMode> {
        match name {
            "baseline" => Ok(AttentionMode::Baseline),
            "transparent" => Ok(AttentionMode::Transparent),
            other => Err(Error::Invalid(format!("unknown attention mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    pub attention_mode: AttentionMode,
    pub vocab_size: usize,
    pub transparent_dropout: f64,
    pub label_smoothing: f64,
}

impl ModelConfig {
    pub fn toy(family: Family, encoder_layers: usize, attention_mode: AttentionMode) -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(family, encoder_layers),
            decoder_layers: 2,
            attention_mode,
            vocab_size: 16,
            transparent_dropout: 0.1,
            label_smoothing: 0.0,
        }
    }

    /// M: the transformer attends the encoder from every decoder layer, the
    /// recurrent family only from its single attention module.
    pub fn attention_modules(&self) -> usize {
        match self.encoder.family {
            Family::Transformer => self.decoder_layers,
            Family::Recurrent => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_layers == 0 {
            return Err(Error::Invalid("decoder needs at least one layer".into()));
        }
        if self.vocab_size <= FIRST_CONTENT_ID as usize {
            return Err(Error::Invalid(format!(
                "vocab of {} leaves no room for content tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.transparent_dropout) {
            return Err(Error::Invalid(format!(
                "transparent dropout {} outside [0, 1)",
                self.transparent_dropout
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Invalid(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Fresh parameter store for this config, deterministically from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = RngStream::new(seed).derive(0x494e_4954); // "INIT"
        let mut store = ParamStore::new();
        let d = self.encoder.model_dim;

        match self.encoder.family {
            Family::Transformer => {
                encoders::init_transformer_encoder_params(
                    &mut store,
                    &self.encoder,
                    self.vocab_size,
                    &mut rng,
                );
                store.insert("dec.embed", Tensor::xavier(self.vocab_size, d, &mut rng));
                for l in 1..=self.decoder_layers {
                    crate::attention::init_mha_params(
                        &mut store,
                        &format!("dec.l{l}.self"),
                        d,
                        &mut rng,
                    );
                    crate::attention::init_mha_params(
                        &mut store,
                        &format!("dec.l{l}.cross"),
                        d,
                        &mut rng,
                    );
                    for ln in ["ln1", "ln2", "ln3"] {
                        store.insert(format!("dec.l{l}.{ln}.gain"), Tensor::full(vec![d], 1.0));
                        store.insert(format!("dec.l{l}.{ln}.bias"), Tensor::zeros(vec![d]));
                    }
                    store.insert(
                        format!("dec.l{l}.ff.w1"),
                        Tensor::xavier(d, self.encoder.ff_dim, &mut rng),
                    );
                    store.insert(
                        format!("dec.l{l}.ff.b1"),
                        Tensor::zeros(vec![self.encoder.ff_dim]),
                    );
                    store.insert(
                        format!("dec.l{l}.ff.w2"),
                        Tensor::xavier(self.encoder.ff_dim, d, &mut rng),
                    );
                    store.insert(format!("dec.l{l}.ff.b2"), Tensor::zeros(vec![d]));
                }
                if self.encoder.norm_placement == NormPlacement::Pre {
                    store.insert("dec.final_ln.gain", Tensor::full(vec![d], 1.0));
                    store.insert("dec.final_ln.bias", Tensor::zeros(vec![d]));
                }
                store.insert("dec.out.w", Tensor::xavier(d, self.vocab_size, &mut rng));
                store.insert("dec.out.b", Tensor::zeros(vec![self.vocab_size]));
            }
            Family::Recurrent => {
                encoders::init_recurrent_encoder_params(
                    &mut store,
                    &self.encoder,
                    self.vocab_size,
                    &mut rng,
                );
                store.insert("dec.embed", Tensor::xavier(self.vocab_size, d, &mut rng));
                store.insert("dec.l1.wx", Tensor::xavier(d, 4 * d, &mut rng));
                store.insert("dec.l1.wh", Tensor::xavier(d, 4 * d, &mut rng));
                store.insert("dec.l1.b", Tensor::zeros(vec![4 * d]));
                for l in 2..=self.decoder_layers {
                    // input is [previous layer output ; attention context]
                    store.insert(
                        format!("dec.l{l}.wx"),
                        Tensor::xavier(2 * d, 4 * d, &mut rng),
                    );
                    store.insert(format!("dec.l{l}.wh"), Tensor::xavier(d, 4 * d, &mut rng));
                    store.insert(format!("dec.l{l}.b"), Tensor::zeros(vec![4 * d]));
                }
                crate::attention::init_mha_params(&mut store, "dec.cross", d, &mut rng);
                store.insert(
                    "dec.out.w",
                    Tensor::xavier(2 * d, self.vocab_size, &mut rng),
                );
                store.insert("dec.out.b", Tensor::zeros(vec![self.vocab_size]));
            }
        }

        if self.attention_mode == AttentionMode::Transparent {
            TransparentWeights::register(
                &mut store,
                self.encoder.num_layers,
                self.attention_modules(),
            );
            if self.encoder.family == Family::Recurrent {
                init_projection(&mut store, d, &mut rng);
            }
        }
        Ok(store)
    }
}

/// Padded id matrix with per-row true lengths.
#[derive(Debug, Clone)]
pub struct IdMatrix {
    width: usize,
    data: Vec<u32>,
    lengths: Vec<usize>,
}

impl IdMatrix {
    pub fn from_rows(rows: &[Vec<u32>], pad_id: u32) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * width);
        let mut lengths = Vec::with_capacity(rows.len());
        for row in rows {
            lengths.push(row.len());
            data.extend_from_slice(row);
            data.extend(std::iter::repeat(pad_id).take(width - row.len()));
        }
        IdMatrix {
            width,
            data,
            lengths,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn length(&self, row: usize) -> usize {
        self.lengths[row]
    }

    /// Row content without padding.
    pub fn row(&self, row: usize) -> &[u32] {
        &self.data[row * self.width..row * self.width + self.lengths[row]]
    }
}

/// One training batch: padded source and target id matrices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: IdMatrix,
    pub tgt: IdMatrix,
    pub pad_id: u32,
}

impl Batch {
    pub fn new(src_rows: &[Vec<u32>], tgt_rows: &[Vec<u32>], vocab_size: usize) -> Result<Batch> {
        if src_rows.len() != tgt_rows.len() {
            return Err(Error::Invalid(format!(
                "{} sources vs {} targets",
                src_rows.len(),
                tgt_rows.len()
            )));
        }
        if src_rows.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for row in src_rows.iter().chain(tgt_rows) {
            for &id in row {
                if id as usize >= vocab_size {
                    return Err(Error::Vocab { id, vocab_size });
                }
            }
        }
        Ok(Batch {
            src: IdMatrix::from_rows(src_rows, PAD_ID),
            tgt: IdMatrix::from_rows(tgt_rows, PAD_ID),
            pad_id: PAD_ID,
        })
    }

    pub fn size(&self) -> usize {
        self.src.num_rows()
    }
}

/// Teacher-forcing views of a target row: decoder input `[EOS, y...]` and
/// prediction targets `[y..., EOS]`.
pub fn teacher_forcing(target: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(EOS_ID);
    input.extend_from_slice(target);
    let mut labels = Vec::with_capacity(target.len() + 1);
    labels.extend_from_slice(target);
    labels.push(EOS_ID);
    (input, labels)
}

/// Per-module encoder memories for one sequence.
fn build_memories(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    stack: &LayerStack,
    s_matrix: Option<NodeId>,
) -> Result<Vec<NodeId>> {
    let modules = cfg.attention_modules();
    match cfg.attention_mode {
        AttentionMode::Baseline => Ok(vec![stack.top(); modules]),
        AttentionMode::Transparent => {
            let s = s_matrix.ok_or_else(|| {
                Error::Invalid("transparent mode needs the normalized weight matrix".into())
            })?;
            let mut memories = Vec::with_capacity(modules);
            for j in 0..modules {
                let col = tape.slice(s, 1, j, j + 1)?;
                let z = combine_layers(tape, stack, col)?;
                let z = if cfg.encoder.family == Family::Recurrent {
                    project_combined(tape, store, z)?
                } else {
                    z
                };
                memories.push(z);
            }
            Ok(memories)
        }
    }
}

fn transformer_decode_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    dec_input: &[u32],
    memories: &[NodeId],
    training: bool,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let d = cfg.encoder.model_dim;
    let table = tape.param(store, "dec.embed")?;
    let emb = tape.embedding(table, dec_input)?;
    let emb = tape.scale(emb, (d as f64).sqrt())?;
    let pos = tape.constant(sinusoidal_positions(dec_input.len(), d));
    let mut h = tape.add(emb, pos)?;
    let causal = AttentionMask::causal(dec_input.len());

    for l in 1..=cfg.decoder_layers {
        let self_prefix = format!("dec.l{l}.self");
        let heads = cfg.encoder.heads;
        let causal_ref = &causal;
        h = encoders::wrap_sublayer(
            tape,
            store,
            &format!("dec.l{l}.ln1"),
            cfg.encoder.norm_placement,
            true,
            cfg.encoder.dropout_rate,
            training,
            rng,
            h,
            |tape, x| {
                multi_head_attention(tape, x, x, store, &self_prefix, heads, Some(causal_ref))
            },
        )?;
        let cross_prefix = format!("dec.l{l}.cross");
        let memory = memories[l - 1];
        h = encoders::wrap_sublayer(
            tape,
            store,
            &format!("dec.l{l}.ln2"),
            cfg.encoder.norm_placement,
            true,
            cfg.encoder.dropout_rate,
            training,
            rng,
            h,
            |tape, x| multi_head_attention(tape, x, memory, store, &cross_prefix, heads, None),
        )?;
        let ff_prefix = format!("dec.l{l}.ff");
        h = encoders::wrap_sublayer(
            tape,
            store,
            &format!("dec.l{l}.ln3"),
            cfg.encoder.norm_placement,
            true,
            cfg.encoder.dropout_rate,
            training,
            rng,
            h,
            |tape, x| encoders::feed_forward(tape, store, &ff_prefix, x),
        )?;
    }
    if cfg.encoder.norm_placement == NormPlacement::Pre {
        h = encoders::layer_norm_named(tape, store, "dec.final_ln", h)?;
    }
    let w = tape.param(store, "dec.out.w")?;
    let b = tape.param(store, "dec.out.b")?;
    let logits = tape.matmul(h, w)?;
    tape.add_row(logits, b)
}

fn recurrent_decode_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    dec_input: &[u32],
    memory: NodeId,
    training: bool,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let table = tape.param(store, "dec.embed")?;
    let emb = tape.embedding(table, dec_input)?;

    let mut h = encoders::lstm_sequence(tape, store, "dec.l1", emb, false)?;
    h = tape.dropout(h, cfg.encoder.dropout_rate, training, rng)?;

    // single attention module: queries from the first decoder layer
    let ctx = multi_head_attention(tape, h, memory, store, "dec.cross", 1, None)?;

    for l in 2..=cfg.decoder_layers {
        let joined = tape.concat(&[h, ctx], 1)?;
        let out = encoders::lstm_sequence(tape, store, &format!("dec.l{l}"), joined, false)?;
        let out = tape.dropout(out, cfg.encoder.dropout_rate, training, rng)?;
        h = if l >= 3 { tape.add(out, h)? } else { out };
    }

    // Luong-style attentional output: logits from [top state ; context]
    let features = tape.concat(&[h, ctx], 1)?;
    let w = tape.param(store, "dec.out.w")?;
    let b = tape.param(store, "dec.out.b")?;
    let logits = tape.matmul(features, w)?;
    tape.add_row(logits, b)
}

/// One full forward pass over a batch.
pub struct ForwardPass {
    pub tape: Tape,
    /// Logits per sequence, shape (target length + 1, vocab).
    pub per_seq_logits: Vec<NodeId>,
    /// Mean token cross-entropy over all non-pad positions.
    pub loss: NodeId,
}

/// Decoder logits for every sequence of a batch. Encodes sources, builds the
/// per-module memories (top layer or transparent combinations), and runs the
/// decoder with teacher forcing.
///
/// With `tap_encoder`, encoder activations are tapped under `s{b}.h{i}` for
/// the grad-norm diagnostics.
pub fn decoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &Batch,
    training: bool,
    rng: &mut RngStream,
    tap_encoder: bool,
) -> Result<Vec<NodeId>> {
    cfg.validate()?;
    if batch.src.num_rows() == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }

    let s_matrix = match cfg.attention_mode {
        AttentionMode::Transparent => {
            let weights = TransparentWeights::from_store(
                store,
                cfg.encoder.num_layers,
                cfg.attention_modules(),
            )?;
            Some(normalize_transparent_weights(
                tape,
                store,
                &weights,
                cfg.transparent_dropout,
                training,
                rng,
            )?)
        }
        AttentionMode::Baseline => None,
    };

    let mut per_seq_logits = Vec::with_capacity(batch.size());
    for b in 0..batch.size() {
        let scope = format!("s{b}");
        let tap = if tap_encoder {
            Some(scope.as_str())
        } else {
            None
        };
        let stack = run_encoder(
            tape,
            store,
            &cfg.encoder,
            batch.src.row(b),
            training,
            rng,
            tap,
        )?;
        let memories = build_memories(tape, store, cfg, &stack, s_matrix)?;
        let (dec_input, _) = teacher_forcing(batch.tgt.row(b));
        let logits = match cfg.encoder.family {
            Family::Transformer => {
                transformer_decode_sequence(tape, store, cfg, &dec_input, &memories, training, rng)?
            }
            Family::Recurrent => {
                recurrent_decode_sequence(tape, store, cfg, &dec_input, memories[0], training, rng)?
            }
        };
        per_seq_logits.push(logits);
    }
    Ok(per_seq_logits)
}

/// Mean token-level cross-entropy over all non-pad positions of the batch.
pub fn compute_loss(
    tape: &mut Tape,
    per_seq_logits: &[NodeId],
    batch: &Batch,
    label_smoothing: f64,
) -> Result<NodeId> {
    if per_seq_logits.len() != batch.size() {
        return Err(Error::Invalid(format!(
            "{} logit sets for a batch of {}",
            per_seq_logits.len(),
            batch.size()
        )));
    }
    let mut total_positions = 0usize;
    let mut total: Option<NodeId> = None;
    for (b, &logits) in per_seq_logits.iter().enumerate() {
        let (_, labels) = teacher_forcing(batch.tgt.row(b));
        if tape.shape(logits)[0] != labels.len() {
            return Err(Error::Shape(format!(
                "logits rows {} vs {} labels",
                tape.shape(logits)[0],
                labels.len()
            )));
        }
        total_positions += labels.len();
        let ce = tape.cross_entropy(logits, &labels, label_smoothing)?;
        let seq_sum = tape.sum(ce)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, seq_sum)?,
            None => seq_sum,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("loss over an empty batch".into()))?;
    if total_positions == 0 {
        return Err(Error::Invalid("all target positions are padding".into()));
    }
    tape.scale(total, 1.0 / total_positions as f64)
}

/// Forward + loss in one call.
pub fn forward_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &Batch,
    training: bool,
    rng: &mut RngStream,
    tap_encoder: bool,
) -> Result<ForwardPass> {
    let mut tape = Tape::new();
    let per_seq_logits = decoder_forward(&mut tape, store, cfg, batch, training, rng, tap_encoder)?;
    let loss = compute_loss(&mut tape, &per_seq_logits, batch, cfg.label_smoothing)?;
    Ok(ForwardPass {
        tape,
        per_seq_logits,
        loss,
    })
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding: encode once, then repeatedly extend the hypothesis with
/// the argmax token until EOS or `max_len`. Dropout is disabled throughout.
pub fn greedy_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    source: &[u32],
    max_len: usize,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    let mut tape = Tape::new();
    let mut rng = RngStream::new(0); // eval mode: never consulted
    let stack = run_encoder(
        &mut tape,
        store,
        &cfg.encoder,
        source,
        false,
        &mut rng,
        None,
    )?;

    let s_matrix = match cfg.attention_mode {
        AttentionMode::Transparent => {
            let weights = TransparentWeights::from_store(
                store,
                cfg.encoder.num_layers,
                cfg.attention_modules(),
            )?;
            Some(normalize_transparent_weights(
                &mut tape,
                store,
                &weights,
                cfg.transparent_dropout,
                false,
                &mut rng,
            )?)
        }
        AttentionMode::Baseline => None,
    };
    let memories = build_memories(&mut tape, store, cfg, &stack, s_matrix)?;

    let mut hypothesis: Vec<u32> = Vec::new();
    loop {
        let mut dec_input = Vec::with_capacity(hypothesis.len() + 1);
        dec_input.push(EOS_ID);
        dec_input.extend_from_slice(&hypothesis);
        let logits = match cfg.encoder.family {
            Family::Transformer => transformer_decode_sequence(
                &mut tape, store, cfg, &dec_input, &memories, false, &mut rng,
            )?,
            Family::Recurrent => recurrent_decode_sequence(
                &mut tape,
                store,
                cfg,
                &dec_input,
                memories[0],
                false,
                &mut rng,
            )?,
        };
        let last = tape.value(logits).rows() - 1;
        let next = argmax(tape.value(logits).row(last));
        if next == EOS_ID {
            break;
        }
        hypothesis.push(next);
        if hypothesis.len() >= max_len {
            break;
        }
    }
    Ok(hypothesis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transparent::TRANSPARENT_W;

    fn tiny_config(family: Family, mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                family,
                num_layers: 2,
                model_dim: 8,
                ff_dim: 16,
                heads: 2,
                use_residual: true,
                dropout_rate: 0.0,
                norm_placement: NormPlacement::Pre,
            },
            decoder_layers: 2,
            attention_mode: mode,
            vocab_size: 12,
            transparent_dropout: 0.0,
            label_smoothing: 0.0,
        }
    }

    fn tiny_batch() -> Batch {
        Batch::new(
            &[vec![2, 5, 7], vec![3, 4]],
            &[vec![5, 2, 7], vec![4, 3]],
            12,
        )
        .unwrap()
    }

    #[test]
    fn logit_shape_is_len_plus_one_by_vocab() {
        for family in [Family::Transformer, Family::Recurrent] {
            let cfg = tiny_config(family, AttentionMode::Baseline);
            let store = cfg.init_params(1).unwrap();
            let batch = tiny_batch();
            let mut rng = RngStream::new(0);
            let mut tape = Tape::new();
            let logits =
                decoder_forward(&mut tape, &store, &cfg, &batch, false, &mut rng, false).unwrap();
            assert_eq!(tape.shape(logits[0]), &[4, 12]);
            assert_eq!(tape.shape(logits[1]), &[3, 12]);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![3, 12]));
        let batch = Batch::new(&[vec![2, 3]], &[vec![4, 5]], 12).unwrap();
        let loss = compute_loss(&mut tape, &[logits], &batch, 0.0).unwrap();
        assert!((tape.value(loss).item().unwrap() - (12.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let batch = Batch::new(&[vec![2]], &[vec![4]], 12).unwrap();
        let (_, labels) = teacher_forcing(batch.tgt.row(0));
        let mut prev = f64::INFINITY;
        for margin in [2.0, 8.0, 32.0] {
            let mut logits = Tensor::zeros(vec![2, 12]);
            for (r, &t) in labels.iter().enumerate() {
                logits.set2(r, t as usize, margin);
            }
            let mut tape = Tape::new();
            let l = tape.constant(logits);
            let loss = compute_loss(&mut tape, &[l], &batch, 0.0).unwrap();
            let v = tape.value(loss).item().unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn hand_computed_two_token_vocab_three_loss() {
        // logits [[1,2,3],[0,0,0]] for labels [2, 0]:
        // ce_0 = ln(e^1 + e^2 + e^3) - 3, ce_1 = ln 3
        let mut tape = Tape::new();
        let logits =
            tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let ce = tape.cross_entropy(logits, &[2, 0], 0.0).unwrap();
        let expected0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let expected1 = 3f64.ln();
        let got = tape.value(ce).data();
        assert!((got[0] - expected0).abs() < 1e-12);
        assert!((got[1] - expected1).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_empty_logit_list() {
        let mut tape = Tape::new();
        let batch = tiny_batch();
        assert!(compute_loss(&mut tape, &[], &batch, 0.0).is_err());
    }

    /// Force the transparent weights one-hot on the top layer; underflow in
    /// the softmax makes the resulting s column exactly one-hot.
    fn force_one_hot_top(store: &mut ParamStore, num_layers: usize, modules: usize) {
        let mut w = Tensor::zeros(vec![num_layers + 1, modules]);
        for j in 0..modules {
            w.set2(num_layers, j, 2000.0);
        }
        *store.get_mut(TRANSPARENT_W).unwrap() = w;
    }

    fn copy_shared_params(from: &ParamStore, into: &mut ParamStore) {
        let names: Vec<String> = into.names().map(String::from).collect();
        for name in names {
            *into.get_mut(&name).unwrap() = from.get(&name).unwrap().clone();
        }
    }

    #[test]
    fn one_hot_transparent_reduces_to_baseline() {
        for family in [Family::Transformer, Family::Recurrent] {
            let cfg_t = tiny_config(family, AttentionMode::Transparent);
            let cfg_b = tiny_config(family, AttentionMode::Baseline);
            let mut store_t = cfg_t.init_params(7).unwrap();
            force_one_hot_top(
                &mut store_t,
                cfg_t.encoder.num_layers,
                cfg_t.attention_modules(),
            );
            if family == Family::Recurrent {
                // the baseline recurrent path has no projection; pin it to the
                // identity so the reduction is exact
                let d = cfg_t.encoder.model_dim;
                let mut eye = Tensor::zeros(vec![d, d]);
                for i in 0..d {
                    eye.set2(i, i, 1.0);
                }
                *store_t
                    .get_mut(crate::transparent::TRANSPARENT_PROJ_W)
                    .unwrap() = eye;
            }
            let mut store_b = cfg_b.init_params(99).unwrap();
            copy_shared_params(&store_t, &mut store_b);

            let batch = tiny_batch();
            let mut rng = RngStream::new(0);
            let pass_t = forward_loss(&store_t, &cfg_t, &batch, false, &mut rng, false).unwrap();
            let mut rng = RngStream::new(0);
            let pass_b = forward_loss(&store_b, &cfg_b, &batch, false, &mut rng, false).unwrap();

            for (lt, lb) in pass_t.per_seq_logits.iter().zip(&pass_b.per_seq_logits) {
                let diff = pass_t.tape.value(*lt).max_abs_diff(pass_b.tape.value(*lb));
                assert!(diff < 1e-9, "{family:?} logits differ by {diff}");
            }
            let loss_diff = (pass_t.tape.value(pass_t.loss).item().unwrap()
                - pass_b.tape.value(pass_b.loss).item().unwrap())
            .abs();
            assert!(loss_diff < 1e-9);

            // gradients of shared parameters agree as well
            let bp_t = pass_t.tape.backward(pass_t.loss).unwrap();
            let bp_b = pass_b.tape.backward(pass_b.loss).unwrap();
            let grads_t = pass_t.tape.param_grads(&bp_t, &store_t);
            let grads_b = pass_b.tape.param_grads(&bp_b, &store_b);
            for (name, gb) in &grads_b {
                let gt = &grads_t[name];
                assert!(
                    gt.max_abs_diff(gb) < 1e-9,
                    "{family:?} grad for {name} differs"
                );
            }

            // and greedy decodes match
            let d_t = greedy_decode(&store_t, &cfg_t, &[2, 5, 7], 8).unwrap();
            let d_b = greedy_decode(&store_b, &cfg_b, &[2, 5, 7], 8).unwrap();
            assert_eq!(d_t, d_b);
        }
    }

    #[test]
    fn transparent_adds_exactly_the_documented_parameters() {
        for family in [Family::Transformer, Family::Recurrent] {
            let cfg_t = tiny_config(family, AttentionMode::Transparent);
            let cfg_b = tiny_config(family, AttentionMode::Baseline);
            let n_t = cfg_t.init_params(1).unwrap().total_elements();
            let n_b = cfg_b.init_params(1).unwrap().total_elements();
            let n = cfg_t.encoder.num_layers;
            let m = cfg_t.attention_modules();
            let d = cfg_t.encoder.model_dim;
            let expected = (n + 1) * m
                + if family == Family::Recurrent {
                    d * d + d
                } else {
                    0
                };
            assert_eq!(n_t - n_b, expected, "{family:?}");
        }
    }

    #[test]
    fn causality_later_target_tokens_do_not_leak_backward() {
        for family in [Family::Transformer, Family::Recurrent] {
            let cfg = tiny_config(family, AttentionMode::Baseline);
            let store = cfg.init_params(3).unwrap();
            let src = vec![2u32, 3, 4];
            let tgt_a = vec![5u32, 6, 7, 8];
            let mut tgt_b = tgt_a.clone();
            let t = 2;
            tgt_b[t] = 9; // perturb target position t

            let run = |tgt: &[u32]| {
                let batch = Batch::new(std::slice::from_ref(&src), &[tgt.to_vec()], 12).unwrap();
                let mut rng = RngStream::new(0);
                let mut tape = Tape::new();
                let logits =
                    decoder_forward(&mut tape, &store, &cfg, &batch, false, &mut rng, false)
                        .unwrap();
                tape.value(logits[0]).clone()
            };
            let la = run(&tgt_a);
            let lb = run(&tgt_b);
            let vocab = cfg.vocab_size;
            for row in 0..=t {
                for c in 0..vocab {
                    let (a, b) = (la.at2(row, c), lb.at2(row, c));
                    assert!(
                        (a - b).abs() <= 1e-12,
                        "{family:?} row {row} changed: {a} vs {b}"
                    );
                }
            }
            // and the perturbation does reach later rows
            let mut changed = false;
            for row in t + 1..la.rows() {
                if (0..vocab).any(|c| (la.at2(row, c) - lb.at2(row, c)).abs() > 1e-12) {
                    changed = true;
                }
            }
            assert!(changed, "{family:?}: perturbation had no effect at all");
        }
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let cfg = tiny_config(Family::Transformer, AttentionMode::Transparent);
        let store = cfg.init_params(11).unwrap();
        let a = greedy_decode(&store, &cfg, &[2, 9, 4], 10).unwrap();
        let b = greedy_decode(&store, &cfg, &[2, 9, 4], 10).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 10);
    }

    #[test]
    fn end_to_end_transparent_gradient_matches_finite_differences() {
        use crate::gradcheck;
        for family in [Family::Transformer, Family::Recurrent] {
            let mut cfg = tiny_config(family, AttentionMode::Transparent);
            cfg.encoder.model_dim = 4;
            cfg.encoder.ff_dim = 8;
            cfg.encoder.heads = 2;
            cfg.vocab_size = 8;
            let store = cfg.init_params(19).unwrap();
            let batch = Batch::new(&[vec![2, 4]], &[vec![3, 5]], 8).unwrap();

            let cfg2 = cfg.clone();
            let batch2 = batch.clone();
            let build = move |tape: &mut Tape, p: &ParamStore| {
                let mut rng = RngStream::new(0);
                let logits = decoder_forward(tape, p, &cfg2, &batch2, false, &mut rng, false)?;
                compute_loss(tape, &logits, &batch2, cfg2.label_smoothing)
            };
            let outcome = gradcheck::compare(&build, &store, 1e-5).unwrap();
            assert!(
                outcome.max_rel_err <= 1e-5,
                "{family:?} rel err {}",
                outcome.max_rel_err
            );
            // the transparent logits themselves must be covered
            assert!(outcome.per_param.contains_key(TRANSPARENT_W));
        }
    }

    #[test]
    fn gradient_reaches_every_encoder_layer_in_transparent_mode() {
        for family in [Family::Transformer, Family::Recurrent] {
            let cfg = tiny_config(family, AttentionMode::Transparent);
            let store = cfg.init_params(23).unwrap();
            let batch = tiny_batch();
            let mut rng = RngStream::new(0);
            let pass = forward_loss(&store, &cfg, &batch, false, &mut rng, true).unwrap();
            let bp = pass.tape.backward(pass.loss).unwrap();
            let taps = pass.tape.tap_grads(&bp);
            for b in 0..batch.size() {
                for i in 0..=cfg.encoder.num_layers {
                    let g = &taps[&format!("s{b}.h{i}")];
                    assert!(
                        g.l2_norm() > 0.0,
                        "{family:?}: no gradient at layer {i} of sequence {b}"
                    );
                }
            }
        }
    }
}
