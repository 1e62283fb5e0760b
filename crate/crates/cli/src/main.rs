//! Command-line front end: `train`, `eval`, and `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 failed-to-train.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use seqlab_core::bleu::post_convergence_mean;
use seqlab_core::train::{evaluate, make_eval_batch, write_artifacts, TrainConfig};
use seqlab_core::{
    checkpoint, gradcheck, train, AttentionMode, Error, Family, ModelConfig, NormPlacement,
    RunOutcome, TaskKind, TaskSpec,
};

const EXIT_OK: u8 = 0;
const EXIT_USAGE_OR_IO: u8 = 1;
const EXIT_FAILED_TO_TRAIN: u8 = 2;

const GRADCHECK_TOLERANCE: f64 = 1e-5;

const USAGE: &str = "\
seqlab: a desk-scale seq2seq training laboratory

USAGE:
  seqlab train --family {transformer|recurrent} --encoder-layers N
               --attention {baseline|transparent} --residuals {on|off}
               --task {copy|reverse|lookup} --steps K --seed S --out DIR
               [--warmup W] [--base-lr X] [--transparent-dropout P]
               [--eval-every E] [--window C] [--model-dim D] [--ff-dim F]
               [--heads H] [--decoder-layers L] [--batch-size B] [--vocab V]
               [--min-len A] [--max-len B] [--dropout P] [--norm {pre|post}]
               [--record-every R] [--eval-size N] [--label-smoothing S]
               [--fail-after K] [--target-accuracy X] [--dictionary-seed S]
  seqlab eval --checkpoint PATH --task {copy|reverse|lookup} --seed S
              [--eval-size N] [--min-len A] [--max-len B] [--dictionary-seed S]
  seqlab gradcheck [--trials K] [--seed S]

EXIT CODES:
  0 success    1 usage or I/O error    2 failed to train
";

struct Args {
    values: BTreeMap<String, String>,
}

impl Args {
    fn parse(tokens: &[String], allowed: &[&str]) -> Result<Args, String> {
        let mut values = BTreeMap::new();
        let mut iter = tokens.iter();
        while let Some(token) = iter.next() {
            let Some(key) = token.strip_prefix("--") else {
                return Err(format!("unexpected argument `{token}`"));
            };
            if !allowed.contains(&key) {
                return Err(format!("unknown flag `--{key}`"));
            }
            let Some(value) = iter.next() else {
                return Err(format!("flag `--{key}` needs a value"));
            };
            if values.insert(key.to_string(), value.clone()).is_some() {
                return Err(format!("flag `--{key}` given twice"));
            }
        }
        Ok(Args { values })
    }

    fn required(&self, key: &str) -> Result<&str, String> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format!("missing required flag `--{key}`"))
    }

    fn optional(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T, String> {
        value
            .parse()
            .map_err(|_| format!("bad value `{value}` for `--{key}`"))
    }

    fn required_num<T: std::str::FromStr>(&self, key: &str) -> Result<T, String> {
        let v = self.required(key)?;
        self.parse_num(key, v)
    }

    fn optional_num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, String> {
        match self.optional(key) {
            Some(v) => self.parse_num(key, v),
            None => Ok(default),
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let code = match argv.first().map(String::as_str) {
        Some("train") => cmd_train(&argv[1..]),
        Some("eval") => cmd_eval(&argv[1..]),
        Some("gradcheck") => cmd_gradcheck(&argv[1..]),
        Some("--help") | Some("-h") | Some("help") => {
            print!("{USAGE}");
            EXIT_OK
        }
        Some(other) => {
            eprintln!("unknown command `{other}`\n\n{USAGE}");
            EXIT_USAGE_OR_IO
        }
        None => {
            eprint!("{USAGE}");
            EXIT_USAGE_OR_IO
        }
    };
    ExitCode::from(code)
}

fn usage_error(msg: &str) -> u8 {
    eprintln!("error: {msg}");
    eprintln!("run `seqlab --help` for usage");
    EXIT_USAGE_OR_IO
}

fn lib_error(err: &Error) -> u8 {
    eprintln!("error: {err}");
    EXIT_USAGE_OR_IO
}

const TRAIN_FLAGS: &[&str] = &[
    "family",
    "encoder-layers",
    "attention",
    "residuals",
    "task",
    "steps",
    "seed",
    "out",
    "warmup",
    "base-lr",
    "transparent-dropout",
    "eval-every",
    "window",
    "model-dim",
    "ff-dim",
    "heads",
    "decoder-layers",
    "batch-size",
    "vocab",
    "min-len",
    "max-len",
    "dropout",
    "norm",
    "record-every",
    "eval-size",
    "label-smoothing",
    "fail-after",
    "target-accuracy",
    "dictionary-seed",
];

fn build_train_config(args: &Args) -> Result<(TrainConfig, PathBuf), String> {
    let family = Family::from_name(args.required("family")?).map_err(|e| e.to_string())?;
    let encoder_layers: usize = args.required_num("encoder-layers")?;
    let attention =
        AttentionMode::from_name(args.required("attention")?).map_err(|e| e.to_string())?;
    let use_residual = match args.required("residuals")? {
        "on" => true,
        "off" => false,
        other => return Err(format!("bad value `{other}` for `--residuals` (on|off)")),
    };
    let task_kind = TaskKind::from_name(args.required("task")?).map_err(|e| e.to_string())?;
    let steps: u64 = args.required_num("steps")?;
    let seed: u64 = args.required_num("seed")?;
    let out = PathBuf::from(args.required("out")?);

    let mut model = ModelConfig::toy(family, encoder_layers, attention);
    model.encoder.use_residual = use_residual;
    model.encoder.model_dim = args.optional_num("model-dim", model.encoder.model_dim)?;
    model.encoder.ff_dim = args.optional_num("ff-dim", model.encoder.ff_dim)?;
    model.encoder.heads = args.optional_num("heads", model.encoder.heads)?;
    model.encoder.dropout_rate = args.optional_num("dropout", model.encoder.dropout_rate)?;
    if let Some(norm) = args.optional("norm") {
        model.encoder.norm_placement = NormPlacement::from_name(norm).map_err(|e| e.to_string())?;
    }
    model.decoder_layers = args.optional_num("decoder-layers", model.decoder_layers)?;
    model.vocab_size = args.optional_num("vocab", model.vocab_size)?;
    model.transparent_dropout =
        args.optional_num("transparent-dropout", model.transparent_dropout)?;
    model.label_smoothing = args.optional_num("label-smoothing", model.label_smoothing)?;

    let min_len: usize = args.optional_num("min-len", 2)?;
    let max_len: usize = args.optional_num("max-len", 10)?;
    let mut task = TaskSpec::new(task_kind, model.vocab_size, min_len, max_len);
    task.dictionary_seed = args.optional_num("dictionary-seed", task.dictionary_seed)?;

    let mut cfg = TrainConfig::toy(model, task);
    cfg.total_steps = steps;
    cfg.seed = seed;
    cfg.warmup_steps = args.optional_num("warmup", cfg.warmup_steps)?;
    cfg.base_lr = args.optional_num("base-lr", cfg.base_lr)?;
    cfg.eval_every = args.optional_num("eval-every", cfg.eval_every)?;
    cfg.checkpoint_window = args.optional_num("window", cfg.checkpoint_window)?;
    cfg.batch_size = args.optional_num("batch-size", cfg.batch_size)?;
    cfg.record_every = args.optional_num("record-every", cfg.record_every)?;
    cfg.eval_size = args.optional_num("eval-size", cfg.eval_size)?;
    cfg.max_decode_len = cfg.task.max_len + 2;
    if let Some(v) = args.optional("fail-after") {
        cfg.fail_after = Some(args.parse_num("fail-after", v)?);
    }
    if let Some(v) = args.optional("target-accuracy") {
        cfg.target_accuracy = Some(args.parse_num("target-accuracy", v)?);
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((cfg, out))
}

fn cmd_train(tokens: &[String]) -> u8 {
    let args = match Args::parse(tokens, TRAIN_FLAGS) {
        Ok(a) => a,
        Err(msg) => return usage_error(&msg),
    };
    let (cfg, out) = match build_train_config(&args) {
        Ok(v) => v,
        Err(msg) => return usage_error(&msg),
    };

    println!(
        "training {} ({} encoder layers, {} attention, residuals {}) on {} for {} steps, seed {}",
        cfg.model.encoder.family.name(),
        cfg.model.encoder.num_layers,
        cfg.model.attention_mode.name(),
        if cfg.model.encoder.use_residual {
            "on"
        } else {
            "off"
        },
        cfg.task.kind.name(),
        cfg.total_steps,
        cfg.seed,
    );

    let result = match train(&cfg) {
        Ok(r) => r,
        Err(e) => return lib_error(&e),
    };
    if let Err(e) = write_artifacts(&cfg, &result, &out) {
        return lib_error(&e);
    }

    if let Some(point) = result.log.train_points.last() {
        println!(
            "final loss {:.4} at step {} (lr {:.6})",
            point.loss, point.step, point.lr
        );
    }
    if let Some(eval) = result.log.evals.last() {
        println!(
            "final eval: token accuracy {:.4}, BLEU {:.2} at step {}",
            eval.token_accuracy, eval.bleu, eval.step
        );
    }
    if result.log.evals.len() >= cfg.checkpoint_window {
        match post_convergence_mean(&result.log.evals, cfg.checkpoint_window) {
            Ok(mean) => println!(
                "post-convergence BLEU over {} checkpoints: {:.2}",
                cfg.checkpoint_window, mean
            ),
            Err(e) => eprintln!("warning: {e}"),
        }
    }
    println!("artifacts written to {}", out.display());

    match result.outcome {
        RunOutcome::Completed => {
            println!("outcome: completed");
            EXIT_OK
        }
        RunOutcome::FailedToTrain(reason) => {
            println!("outcome: failed to train ({reason})");
            EXIT_FAILED_TO_TRAIN
        }
    }
}

fn cmd_eval(tokens: &[String]) -> u8 {
    let args = match Args::parse(
        tokens,
        &[
            "checkpoint",
            "task",
            "seed",
            "eval-size",
            "min-len",
            "max-len",
            "dictionary-seed",
        ],
    ) {
        Ok(a) => a,
        Err(msg) => return usage_error(&msg),
    };
    let path = match args.required("checkpoint") {
        Ok(p) => PathBuf::from(p),
        Err(msg) => return usage_error(&msg),
    };
    let task_kind = match args
        .required("task")
        .and_then(|t| TaskKind::from_name(t).map_err(|e| e.to_string()))
    {
        Ok(k) => k,
        Err(msg) => return usage_error(&msg),
    };
    let seed: u64 = match args.required_num("seed") {
        Ok(s) => s,
        Err(msg) => return usage_error(&msg),
    };

    let (config_text, store) = match checkpoint::load(&path) {
        Ok(v) => v,
        Err(e) => return lib_error(&e),
    };
    let mut cfg = match TrainConfig::from_text(&config_text) {
        Ok(c) => c,
        Err(e) => return lib_error(&e),
    };
    cfg.task.kind = task_kind;
    cfg.seed = seed;
    let overridden: Result<(usize, usize, usize, u64), String> = (|| {
        Ok((
            args.optional_num("eval-size", cfg.eval_size)?,
            args.optional_num("min-len", cfg.task.min_len)?,
            args.optional_num("max-len", cfg.task.max_len)?,
            args.optional_num("dictionary-seed", cfg.task.dictionary_seed)?,
        ))
    })();
    match overridden {
        Ok((size, min_len, max_len, dict_seed)) => {
            cfg.eval_size = size;
            cfg.task.min_len = min_len;
            cfg.task.max_len = max_len;
            cfg.task.dictionary_seed = dict_seed;
            cfg.max_decode_len = max_len + 2;
        }
        Err(msg) => return usage_error(&msg),
    }

    let eval_batch = match make_eval_batch(&cfg) {
        Ok(b) => b,
        Err(e) => return lib_error(&e),
    };
    match evaluate(&store, &cfg.model, &eval_batch, cfg.max_decode_len, 0) {
        Ok(report) => {
            println!(
                "checkpoint {}: token accuracy {:.4}, BLEU {:.2} on {} {} sequences (seed {})",
                path.display(),
                report.token_accuracy,
                report.bleu,
                eval_batch.size(),
                cfg.task.kind.name(),
                seed,
            );
            EXIT_OK
        }
        Err(e) => lib_error(&e),
    }
}

fn cmd_gradcheck(tokens: &[String]) -> u8 {
    let args = match Args::parse(tokens, &["trials", "seed"]) {
        Ok(a) => a,
        Err(msg) => return usage_error(&msg),
    };
    let trials: usize = match args.optional_num("trials", 100) {
        Ok(t) => t,
        Err(msg) => return usage_error(&msg),
    };
    let seed: u64 = match args.optional_num("seed", 7) {
        Ok(s) => s,
        Err(msg) => return usage_error(&msg),
    };

    println!("finite-difference gradient check, {trials} trials per primitive");
    let results = match gradcheck::full_suite(trials, seed) {
        Ok(r) => r,
        Err(e) => return lib_error(&e),
    };
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for (name, err) in &results {
        let status = if *err <= GRADCHECK_TOLERANCE {
            "ok"
        } else {
            "FAIL"
        };
        println!("  {status:4} {name:32} max rel err {err:.3e}");
        if *err > worst {
            worst = *err;
            worst_name = name.clone();
        }
    }
    println!("max relative error {worst:.3e} ({worst_name}), tolerance {GRADCHECK_TOLERANCE:.0e}");
    if worst <= GRADCHECK_TOLERANCE {
        println!("gradcheck passed");
        EXIT_OK
    } else {
        println!("gradcheck FAILED");
        EXIT_USAGE_OR_IO
    }
}
