//! Training and evaluation loops: batch generation, forward/backward, the
//! grad-norm and weight instrumentation, Adam with the warmup schedule,
//! periodic evaluation, and artifact export.

use std::path::Path;

use crate::bleu::corpus_bleu;
use crate::checkpoint;
use crate::diagnostics::{
    export_csv, snapshot_weights, EvalReport, GradNormRecord, RunLog, RunMeta, TrainPoint,
};
use crate::encoders::{EncoderConfig, Family, NormPlacement};
use crate::error::{Error, Result};
use crate::optim::{adam_update, lr_at, AdamHyper, AdamState};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::seq2seq::{
    decoder_forward, forward_loss, greedy_decode, teacher_forcing, AttentionMode, Batch,
    ModelConfig,
};
use crate::tape::Tape;
use crate::tasks::{generate_batch, write_dictionary_csv, TaskKind, TaskSpec};
use crate::tensor::Tensor;

pub const BUILD_ID: &str = concat!("seqlab-core ", env!("CARGO_PKG_VERSION"));

const DATA_STREAM: u64 = 0x4441_5441;
const EVAL_STREAM: u64 = 0x4556_414c;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

/// Window of trailing losses averaged for the failed-to-train check.
const LOSS_WINDOW: usize = 50;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub batch_size: usize,
    pub total_steps: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamHyper,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_size: usize,
    /// Checkpoint window for the post-convergence BLEU summary.
    pub checkpoint_window: usize,
    /// Cadence of grad-norm records and weight snapshots.
    pub record_every: u64,
    pub max_decode_len: usize,
    /// After this many steps, a smoothed loss still above chance (ln V)
    /// terminates the run as failed-to-train.
    pub fail_after: Option<u64>,
    /// Stop early once an evaluation reaches this token accuracy.
    pub target_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn toy(model: ModelConfig, task: TaskSpec) -> Self {
        let max_decode_len = task.max_len + 2;
        TrainConfig {
            model,
            task,
            batch_size: 8,
            total_steps: 3000,
            base_lr: 3.0,
            warmup_steps: 400,
            adam: AdamHyper::default(),
            seed: 1,
            eval_every: 200,
            eval_size: 32,
            checkpoint_window: 5,
            record_every: 10,
            max_decode_len,
            fail_after: None,
            target_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.model.vocab_size != self.task.vocab_size {
            return Err(Error::Invalid(format!(
                "model vocab {} differs from task vocab {}",
                self.model.vocab_size, self.task.vocab_size
            )));
        }
        if self.batch_size == 0 || self.eval_size == 0 {
            return Err(Error::Invalid(
                "batch and eval sizes must be positive".into(),
            ));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Invalid("warmup_steps must be at least 1".into()));
        }
        if self.eval_every == 0 || self.record_every == 0 {
            return Err(Error::Invalid("cadences must be at least 1".into()));
        }
        if self.checkpoint_window == 0 {
            return Err(Error::Invalid(
                "checkpoint window must be at least 1".into(),
            ));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Invalid("max_decode_len must be at least 1".into()));
        }
        if self.base_lr < 0.0 {
            return Err(Error::Invalid(format!("negative base_lr {}", self.base_lr)));
        }
        Ok(())
    }

    /// Structured text echo of the full configuration, written beside run
    /// artifacts and embedded in checkpoints.
    pub fn to_text(&self) -> String {
        let enc = &self.model.encoder;
        let mut out = String::from("seqlab-config-v1\n");
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("family", enc.family.name().to_string());
        kv("encoder_layers", enc.num_layers.to_string());
        kv("model_dim", enc.model_dim.to_string());
        kv("ff_dim", enc.ff_dim.to_string());
        kv("heads", enc.heads.to_string());
        kv(
            "residuals",
            if enc.use_residual { "on" } else { "off" }.to_string(),
        );
        kv("dropout", enc.dropout_rate.to_string());
        kv("norm_placement", enc.norm_placement.name().to_string());
        kv("decoder_layers", self.model.decoder_layers.to_string());
        kv("attention", self.model.attention_mode.name().to_string());
        kv("vocab_size", self.model.vocab_size.to_string());
        kv(
            "transparent_dropout",
            self.model.transparent_dropout.to_string(),
        );
        kv("label_smoothing", self.model.label_smoothing.to_string());
        kv("task", self.task.kind.name().to_string());
        kv("min_len", self.task.min_len.to_string());
        kv("max_len", self.task.max_len.to_string());
        kv("dictionary_seed", self.task.dictionary_seed.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("beta1", self.adam.beta1.to_string());
        kv("beta2", self.adam.beta2.to_string());
        kv("adam_eps", self.adam.eps.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("eval_size", self.eval_size.to_string());
        kv("checkpoint_window", self.checkpoint_window.to_string());
        kv("record_every", self.record_every.to_string());
        kv("max_decode_len", self.max_decode_len.to_string());
        kv(
            "fail_after",
            match self.fail_after {
                Some(v) => v.to_string(),
                None => "none".to_string(),
            },
        );
        kv(
            "target_accuracy",
            match self.target_accuracy {
                Some(v) => v.to_string(),
                None => "none".to_string(),
            },
        );
        kv("build", BUILD_ID.to_string());
        out
    }

    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut lines = text.lines();
        if lines.next() != Some("seqlab-config-v1") {
            return Err(Error::Parse("missing seqlab-config-v1 header".into()));
        }
        let mut map = std::collections::BTreeMap::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Parse(format!("bad config line `{line}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| Error::Parse(format!("missing config key `{k}`")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("bad value for `{k}`")))
        };
        let parse_u64 = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("bad value for `{k}`")))
        };
        let parse_f64 = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("bad value for `{k}`")))
        };

        let encoder = EncoderConfig {
            family: Family::from_name(get("family")?)?,
            num_layers: parse_usize("encoder_layers")?,
            model_dim: parse_usize("model_dim")?,
            ff_dim: parse_usize("ff_dim")?,
            heads: parse_usize("heads")?,
            use_residual: match get("residuals")?.as_str() {
                "on" => true,
                "off" => false,
                other => return Err(Error::Parse(format!("bad residuals value `{other}`"))),
            },
            dropout_rate: parse_f64("dropout")?,
            norm_placement: NormPlacement::from_name(get("norm_placement")?)?,
        };
        let model = ModelConfig {
            encoder,
            decoder_layers: parse_usize("decoder_layers")?,
            attention_mode: AttentionMode::from_name(get("attention")?)?,
            vocab_size: parse_usize("vocab_size")?,
            transparent_dropout: parse_f64("transparent_dropout")?,
            label_smoothing: parse_f64("label_smoothing")?,
        };
        let task = TaskSpec {
            kind: TaskKind::from_name(get("task")?)?,
            vocab_size: model.vocab_size,
            min_len: parse_usize("min_len")?,
            max_len: parse_usize("max_len")?,
            dictionary_seed: parse_u64("dictionary_seed")?,
        };
        let optional = |k: &str| -> Result<Option<f64>> {
            let v = get(k)?;
            if v == "none" {
                Ok(None)
            } else {
                v.parse()
                    .map(Some)
                    .map_err(|_| Error::Parse(format!("bad value for `{k}`")))
            }
        };
        let cfg = TrainConfig {
            model,
            task,
            batch_size: parse_usize("batch_size")?,
            total_steps: parse_u64("total_steps")?,
            base_lr: parse_f64("base_lr")?,
            warmup_steps: parse_u64("warmup_steps")?,
            adam: AdamHyper {
                beta1: parse_f64("beta1")?,
                beta2: parse_f64("beta2")?,
                eps: parse_f64("adam_eps")?,
            },
            seed: parse_u64("seed")?,
            eval_every: parse_u64("eval_every")?,
            eval_size: parse_usize("eval_size")?,
            checkpoint_window: parse_usize("checkpoint_window")?,
            record_every: parse_u64("record_every")?,
            max_decode_len: parse_usize("max_decode_len")?,
            fail_after: optional("fail_after")?.map(|v| v as u64),
            target_accuracy: optional("target_accuracy")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FailureReason {
    NonFiniteLoss {
        step: u64,
    },
    NonFiniteGradient {
        step: u64,
    },
    /// Smoothed loss still at or above chance level (ln V) at the budget.
    AboveChance {
        step: u64,
        loss: f64,
    },
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FailureReason::NonFiniteLoss { step } => {
                write!(f, "loss became non-finite at step {step}")
            }
            FailureReason::NonFiniteGradient { step } => {
                write!(f, "gradients became non-finite at step {step}")
            }
            FailureReason::AboveChance { step, loss } => {
                write!(f, "loss {loss:.4} still at chance level at step {step}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed,
    FailedToTrain(FailureReason),
}

impl RunOutcome {
    pub fn is_failure(&self) -> bool {
        matches!(self, RunOutcome::FailedToTrain(_))
    }
}

pub struct TrainResult {
    pub log: RunLog,
    pub outcome: RunOutcome,
    pub params: ParamStore,
}

/// The held-out evaluation batch for a config: drawn from a stream derived
/// from the seed, disjoint from the training data stream.
pub fn make_eval_batch(cfg: &TrainConfig) -> Result<Batch> {
    let mut eval_rng = RngStream::new(cfg.seed).derive(EVAL_STREAM);
    generate_batch(&cfg.task, &mut eval_rng, cfg.eval_size)
}

/// Teacher-forced token accuracy and greedy-decode corpus BLEU on a fixed
/// evaluation batch.
pub fn evaluate(
    store: &ParamStore,
    model: &ModelConfig,
    eval_batch: &Batch,
    max_decode_len: usize,
    step: u64,
) -> Result<EvalReport> {
    if eval_batch.size() == 0 {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let mut rng = RngStream::new(0); // eval mode: dropout disabled
    let mut tape = Tape::new();
    let logits = decoder_forward(&mut tape, store, model, eval_batch, false, &mut rng, false)?;

    let mut correct = 0usize;
    let mut total = 0usize;
    for (b, &id) in logits.iter().enumerate() {
        let (_, labels) = teacher_forcing(eval_batch.tgt.row(b));
        let t = tape.value(id);
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best as u32 == label {
                correct += 1;
            }
            total += 1;
        }
    }

    let mut hypotheses = Vec::with_capacity(eval_batch.size());
    let mut references = Vec::with_capacity(eval_batch.size());
    for b in 0..eval_batch.size() {
        hypotheses.push(greedy_decode(
            store,
            model,
            eval_batch.src.row(b),
            max_decode_len,
        )?);
        references.push(eval_batch.tgt.row(b).to_vec());
    }
    let bleu = corpus_bleu(&hypotheses, &references, 4)?;

    Ok(EvalReport {
        step,
        token_accuracy: correct as f64 / total as f64,
        bleu,
    })
}

fn smoothed_recent_loss(log: &RunLog) -> Option<f64> {
    if log.train_points.is_empty() {
        return None;
    }
    let window = log.train_points.len().min(LOSS_WINDOW);
    let tail = &log.train_points[log.train_points.len() - window..];
    Some(tail.iter().map(|p| p.loss).sum::<f64>() / window as f64)
}

/// Concatenate the per-sequence tap gradients for encoder layer `layer`.
fn stacked_tap_grad(
    taps: &std::collections::BTreeMap<String, Tensor>,
    batch_size: usize,
    layer: usize,
) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let name = format!("s{b}.h{layer}");
        parts.push(
            taps.get(&name)
                .ok_or_else(|| Error::Invalid(format!("missing tap `{name}`")))?,
        );
    }
    Tensor::concat_rows(&parts)
}

/// Run the full training loop for `cfg`. Always returns the (possibly
/// partial) run log; the outcome distinguishes completed runs from
/// failed-to-train terminations.
pub fn train(cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let master = RngStream::new(cfg.seed);
    let mut data_rng = master.derive(DATA_STREAM);
    let mut dropout_rng = master.derive(DROPOUT_STREAM);

    let mut store = cfg.model.init_params(cfg.seed)?;
    let mut adam_state = AdamState::new();
    let mut log = RunLog::new(RunMeta {
        config_text: cfg.to_text(),
        seed: cfg.seed,
        build_id: BUILD_ID.to_string(),
    });
    let eval_batch = make_eval_batch(cfg)?;
    let transparent = cfg.model.attention_mode == AttentionMode::Transparent;

    if transparent {
        log.push_weights(snapshot_weights(&store, &cfg.model, 0)?)?;
    }

    let chance_level = (cfg.model.vocab_size as f64).ln();
    let mut outcome = RunOutcome::Completed;
    let mut last_eval_step = 0u64;
    let mut last_step_run = 0u64;

    for step in 1..=cfg.total_steps {
        last_step_run = step;
        let batch = generate_batch(&cfg.task, &mut data_rng, cfg.batch_size)?;
        let record_now = step % cfg.record_every == 0;

        let pass = forward_loss(&store, &cfg.model, &batch, true, &mut dropout_rng, true)?;
        let loss = pass.tape.value(pass.loss).item()?;
        let lr = lr_at(
            step,
            cfg.base_lr,
            cfg.model.encoder.model_dim,
            cfg.warmup_steps,
        );
        if !loss.is_finite() {
            outcome = RunOutcome::FailedToTrain(FailureReason::NonFiniteLoss { step });
            break;
        }
        log.push_train_point(TrainPoint { step, loss, lr })?;

        let bp = pass.tape.backward(pass.loss)?;
        if record_now {
            let taps = pass.tape.tap_grads(&bp);
            let g_h1 = stacked_tap_grad(&taps, batch.size(), 1)?;
            let g_hn = stacked_tap_grad(&taps, batch.size(), cfg.model.encoder.num_layers)?;
            log.push_gradnorm(GradNormRecord::compute(step, &g_h1, &g_hn)?)?;
        }

        let grads = pass.tape.param_grads(&bp, &store);
        store.zero_grads();
        store.accumulate_grads(&grads)?;
        match adam_update(&mut store, &mut adam_state, &cfg.adam, lr) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => {
                outcome = RunOutcome::FailedToTrain(FailureReason::NonFiniteGradient { step });
                break;
            }
            Err(other) => return Err(other),
        }

        if transparent && record_now {
            log.push_weights(snapshot_weights(&store, &cfg.model, step)?)?;
        }

        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let report = evaluate(&store, &cfg.model, &eval_batch, cfg.max_decode_len, step)?;
            let accuracy = report.token_accuracy;
            log.push_eval(report)?;
            last_eval_step = step;
            if let Some(target) = cfg.target_accuracy {
                if accuracy >= target {
                    break;
                }
            }
        }

        if cfg.fail_after == Some(step) {
            if let Some(recent) = smoothed_recent_loss(&log) {
                if recent >= chance_level {
                    outcome = RunOutcome::FailedToTrain(FailureReason::AboveChance {
                        step,
                        loss: recent,
                    });
                    break;
                }
            }
        }
    }

    // completed runs always end with a fresh evaluation
    if !outcome.is_failure() && last_step_run > 0 && last_eval_step != last_step_run {
        let report = evaluate(
            &store,
            &cfg.model,
            &eval_batch,
            cfg.max_decode_len,
            last_step_run,
        )?;
        log.push_eval(report)?;
    }

    Ok(TrainResult {
        log,
        outcome,
        params: store,
    })
}

/// Write every artifact of a finished run: the four CSVs, the config echo,
/// the checkpoint, and (for the lookup task) the dictionary sidecar.
pub fn write_artifacts(cfg: &TrainConfig, result: &TrainResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    export_csv(&result.log, dir)?;
    let config_text = cfg.to_text();
    std::fs::write(dir.join("config.txt"), &config_text)
        .map_err(|e| Error::io(dir.join("config.txt"), e))?;
    checkpoint::save(&dir.join("checkpoint.bin"), &config_text, &result.params)?;
    if cfg.task.kind == TaskKind::LookupTranslation {
        write_dictionary_csv(&cfg.task, &dir.join("dictionary.csv"))?;
    }
    Ok(())
}
