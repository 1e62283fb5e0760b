//! Grad-norm ratio diagnostics, transparent-weight snapshots, and the CSV
//! exports behind the training curves.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::seq2seq::{AttentionMode, ModelConfig};
use crate::tensor::Tensor;
use crate::transparent::{transparent_weights_eval, TransparentWeights};

/// L2-norm ratio ||grad_h1|| / ||grad_hN||. The batch dimension is expected
/// to be flattened into the tensors (rows concatenated across sequences).
/// Returns None when the denominator vanishes: an undefined-ratio event,
/// recorded but excluded from ratio statistics.
pub fn grad_norm_ratio(grad_h1: &Tensor, grad_hn: &Tensor) -> Result<Option<f64>> {
    if !grad_h1.all_finite() || !grad_hn.all_finite() {
        return Err(Error::NonFinite("tap gradient".into()));
    }
    let denom = grad_hn.l2_norm();
    if denom > 0.0 {
        Ok(Some(grad_h1.l2_norm() / denom))
    } else {
        Ok(None)
    }
}

/// One grad-norm measurement at training step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormRecord {
    pub step: u64,
    pub norm_h1: f64,
    pub norm_hn: f64,
    /// None marks the undefined-ratio event (norm_hn == 0).
    pub ratio: Option<f64>,
}

impl GradNormRecord {
    pub fn compute(step: u64, grad_h1: &Tensor, grad_hn: &Tensor) -> Result<GradNormRecord> {
        let ratio = grad_norm_ratio(grad_h1, grad_hn)?;
        Ok(GradNormRecord {
            step,
            norm_h1: grad_h1.l2_norm(),
            norm_hn: grad_hn.l2_norm(),
            ratio,
        })
    }
}

/// Post-softmax transparent weights at one step, dropout disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub step: u64,
    /// (N+1, M): rows are layers (0 = embeddings), columns are modules.
    pub s: Tensor,
}

/// Snapshot the current transparent weights. Rejected in baseline mode,
/// which has no weight matrix.
pub fn snapshot_weights(
    store: &ParamStore,
    cfg: &ModelConfig,
    step: u64,
) -> Result<WeightSnapshot> {
    if cfg.attention_mode != AttentionMode::Transparent {
        return Err(Error::Invalid(
            "weight snapshots only exist in transparent mode".into(),
        ));
    }
    let weights =
        TransparentWeights::from_store(store, cfg.encoder.num_layers, cfg.attention_modules())?;
    let s = transparent_weights_eval(store, &weights)?;
    Ok(WeightSnapshot { step, s })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Evaluation summary at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub step: u64,
    /// Teacher-forced token accuracy in [0, 1].
    pub token_accuracy: f64,
    /// Corpus BLEU in [0, 100].
    pub bleu: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunMeta {
    pub config_text: String,
    pub seed: u64,
    pub build_id: String,
}

/// Time series of one training run.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub meta: RunMeta,
    pub gradnorms: Vec<GradNormRecord>,
    pub weights: Vec<WeightSnapshot>,
    pub train_points: Vec<TrainPoint>,
    pub evals: Vec<EvalReport>,
}

impl RunLog {
    pub fn new(meta: RunMeta) -> Self {
        RunLog {
            meta,
            ..Default::default()
        }
    }

    fn check_increasing(last: Option<u64>, step: u64, series: &str) -> Result<()> {
        if let Some(prev) = last {
            if step <= prev {
                return Err(Error::Invalid(format!(
                    "{series} step {step} not after {prev}"
                )));
            }
        }
        Ok(())
    }

    pub fn push_gradnorm(&mut self, rec: GradNormRecord) -> Result<()> {
        Self::check_increasing(self.gradnorms.last().map(|r| r.step), rec.step, "gradnorm")?;
        self.gradnorms.push(rec);
        Ok(())
    }

    pub fn push_weights(&mut self, snap: WeightSnapshot) -> Result<()> {
        Self::check_increasing(self.weights.last().map(|w| w.step), snap.step, "weights")?;
        self.weights.push(snap);
        Ok(())
    }

    pub fn push_train_point(&mut self, point: TrainPoint) -> Result<()> {
        Self::check_increasing(
            self.train_points.last().map(|p| p.step),
            point.step,
            "train",
        )?;
        self.train_points.push(point);
        Ok(())
    }

    pub fn push_eval(&mut self, eval: EvalReport) -> Result<()> {
        Self::check_increasing(self.evals.last().map(|e| e.step), eval.step, "eval")?;
        self.evals.push(eval);
        Ok(())
    }

    /// Mean of the defined ratios among the first `count` records.
    pub fn mean_ratio_over_first(&self, count: usize) -> Option<f64> {
        let defined: Vec<f64> = self
            .gradnorms
            .iter()
            .take(count)
            .filter_map(|r| r.ratio)
            .collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

fn fmt_ratio(ratio: Option<f64>) -> String {
    match ratio {
        Some(v) => format!("{v}"),
        None => "NaN".to_string(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub const GRADNORM_HEADER: &str = "step,norm_h1,norm_hN,ratio";
pub const WEIGHTS_HEADER: &str = "step,module,layer,weight";
pub const TRAIN_HEADER: &str = "step,loss,lr";
pub const EVAL_HEADER: &str = "step,token_acc,bleu";

pub fn gradnorm_csv(log: &RunLog) -> String {
    let mut out = String::from(GRADNORM_HEADER);
    out.push('\n');
    for r in &log.gradnorms {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step,
            r.norm_h1,
            r.norm_hn,
            fmt_ratio(r.ratio)
        ));
    }
    out
}

/// Rows ordered by snapshot, then module (1-based), then layer (0 = embeddings).
pub fn weights_csv(log: &RunLog) -> String {
    let mut out = String::from(WEIGHTS_HEADER);
    out.push('\n');
    for snap in &log.weights {
        let (rows, cols) = (snap.s.rows(), snap.s.cols());
        for j in 0..cols {
            for i in 0..rows {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    snap.step,
                    j + 1,
                    i,
                    snap.s.at2(i, j)
                ));
            }
        }
    }
    out
}

pub fn train_csv(log: &RunLog) -> String {
    let mut out = String::from(TRAIN_HEADER);
    out.push('\n');
    for p in &log.train_points {
        out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
    }
    out
}

pub fn eval_csv(log: &RunLog) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for e in &log.evals {
        out.push_str(&format!("{},{},{}\n", e.step, e.token_accuracy, e.bleu));
    }
    out
}

/// Write gradnorm.csv, weights.csv, train.csv, and eval.csv into `directory`.
pub fn export_csv(log: &RunLog, directory: &Path) -> Result<()> {
    fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    write_file(&directory.join("gradnorm.csv"), &gradnorm_csv(log))?;
    write_file(&directory.join("weights.csv"), &weights_csv(log))?;
    write_file(&directory.join("train.csv"), &train_csv(log))?;
    write_file(&directory.join("eval.csv"), &eval_csv(log))?;
    Ok(())
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad float `{field}` on line {line}")))
}

fn parse_u64(field: &str, line: usize) -> Result<u64> {
    field
        .parse::<u64>()
        .map_err(|_| Error::Parse(format!("bad integer `{field}` on line {line}")))
}

/// Parse a gradnorm.csv body back into records (round-trip of the export).
pub fn parse_gradnorm_csv(text: &str) -> Result<Vec<GradNormRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == GRADNORM_HEADER => {}
        _ => return Err(Error::Parse("missing gradnorm header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!("expected 4 fields on line {i}")));
        }
        let ratio_field = parse_f64(fields[3], i)?;
        out.push(GradNormRecord {
            step: parse_u64(fields[0], i)?,
            norm_h1: parse_f64(fields[1], i)?,
            norm_hn: parse_f64(fields[2], i)?,
            ratio: if ratio_field.is_nan() {
                None
            } else {
                Some(ratio_field)
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Family;

    #[test]
    fn identical_gradients_give_ratio_one() {
        let g = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(grad_norm_ratio(&g, &g).unwrap(), Some(1.0));
    }

    #[test]
    fn ratio_is_arithmetic_of_norms() {
        let a = Tensor::new(vec![2], vec![2.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 4.0]).unwrap();
        assert_eq!(grad_norm_ratio(&a, &b).unwrap(), Some(0.5));
    }

    #[test]
    fn zero_denominator_is_undefined_not_a_crash() {
        let a = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![2]);
        assert_eq!(grad_norm_ratio(&a, &b).unwrap(), None);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let a = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(grad_norm_ratio(&a, &b).is_err());
    }

    #[test]
    fn snapshot_rejected_in_baseline_mode() {
        let cfg = ModelConfig::toy(Family::Transformer, 2, AttentionMode::Baseline);
        let store = cfg.init_params(1).unwrap();
        assert!(snapshot_weights(&store, &cfg, 0).is_err());
    }

    #[test]
    fn snapshot_after_zero_init_is_uniform_and_pure() {
        let cfg = ModelConfig::toy(Family::Transformer, 3, AttentionMode::Transparent);
        let store = cfg.init_params(1).unwrap();
        let snap = snapshot_weights(&store, &cfg, 0).unwrap();
        for &v in snap.s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let again = snapshot_weights(&store, &cfg, 0).unwrap();
        assert_eq!(snap, again);
    }

    #[test]
    fn empty_log_exports_headers_only() {
        let log = RunLog::default();
        assert_eq!(gradnorm_csv(&log), "step,norm_h1,norm_hN,ratio\n");
        assert_eq!(weights_csv(&log), "step,module,layer,weight\n");
        assert_eq!(train_csv(&log), "step,loss,lr\n");
        assert_eq!(eval_csv(&log), "step,token_acc,bleu\n");
    }

    #[test]
    fn single_record_serializes_exactly() {
        let mut log = RunLog::default();
        log.push_gradnorm(GradNormRecord {
            step: 10,
            norm_h1: 0.5,
            norm_hn: 1.0,
            ratio: Some(0.5),
        })
        .unwrap();
        assert_eq!(
            gradnorm_csv(&log),
            "step,norm_h1,norm_hN,ratio\n10,0.5,1,0.5\n"
        );
    }

    #[test]
    fn gradnorm_round_trips_through_csv() {
        let mut log = RunLog::default();
        for (i, hn) in [(1u64, 0.3), (11, 0.0), (21, 1.7)] {
            let h1 = Tensor::new(vec![2], vec![0.25 * i as f64, -0.1]).unwrap();
            let hn = Tensor::new(vec![2], vec![hn, 0.0]).unwrap();
            log.push_gradnorm(GradNormRecord::compute(i, &h1, &hn).unwrap())
                .unwrap();
        }
        let parsed = parse_gradnorm_csv(&gradnorm_csv(&log)).unwrap();
        assert_eq!(parsed, log.gradnorms);
    }

    #[test]
    fn series_steps_must_increase() {
        let mut log = RunLog::default();
        log.push_train_point(TrainPoint {
            step: 5,
            loss: 1.0,
            lr: 0.1,
        })
        .unwrap();
        assert!(log
            .push_train_point(TrainPoint {
                step: 5,
                loss: 0.9,
                lr: 0.1
            })
            .is_err());
    }
}
