//! Training loop and dataset evaluation.

use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::accounting::model_stats;
use crate::checkpoint::Checkpoint;
use crate::data::{batch_images, SegSample};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_loss, predict_labels, LossMode};
use crate::metrics::{confusion, hausdorff, scores, ConfusionCounts, HausdorffFlag, MetricsReport, ScoreMode, Scores};
use crate::model::{McaNet, VariantSpec};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::{no_grad, with_precision, Precision};

/// Offset mixed into the shuffling stream so it differs from the weight
/// initialisation stream drawn from the same seed.
const SHUFFLE_STREAM: u64 = 0x005e_ed0f_ba7c;
const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly to zero over the run.
    Linear,
}

fn default_iterations() -> usize {
    2000
}
fn default_batch() -> usize {
    8
}
fn default_eval_interval() -> usize {
    200
}
fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Validation every this many iterations; 0 disables it.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            iterations: default_iterations(),
            batch_size: default_batch(),
            seed: 0,
            precision: default_precision(),
            eval_interval: default_eval_interval(),
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        if self.optimizer.lr() <= 0.0 {
            return Err(Error::Config("learning rate must be positive for training".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: McaNet,
    pub checkpoint: Checkpoint,
    /// Loss of every iteration.
    pub losses: Vec<f64>,
}

/// Cycles through seeded permutations of `0..n`.
struct BatchStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchStream { rng: ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM), order: (0..n).collect(), pos: n };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn check_samples(spec: &VariantSpec, data: &[SegSample]) -> Result<()> {
    let classes = spec.decoder.num_classes.max(2);
    for s in data {
        s.validate(classes)?;
        if s.channels != spec.encoder.in_channels {
            return Err(Error::Data(format!(
                "samples have {} channels, model expects {}",
                s.channels, spec.encoder.in_channels
            )));
        }
    }
    Ok(())
}

/// Trains a freshly initialised model. The result is a pure function of
/// `(spec, cfg, data)`. `log` receives one JSON object per iteration.
pub fn train(
    spec: &VariantSpec,
    cfg: &TrainConfig,
    data: &[SegSample],
    validation: &[SegSample],
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training data is empty".into()));
    }
    check_samples(spec, data)?;
    check_samples(spec, validation)?;
    let model = McaNet::new(spec, cfg.seed)?;
    if cfg.precision == Precision::F32 {
        model.round_params_to_f32();
    }
    let params = model.named_params();
    let mode = LossMode::for_classes(spec.decoder.num_classes);
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut stream = BatchStream::new(data.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let picked: Vec<&SegSample> = stream.next_batch(cfg.batch_size).into_iter().map(|i| &data[i]).collect();
        let mask: Vec<u8> = picked.iter().flat_map(|s| s.mask.iter().copied()).collect();
        let images = batch_images(&picked)?;
        let diverged = |reason: String| Error::Diverged {
            iteration: it,
            reason,
            last_good: Box::new(Checkpoint::from_model(&model).unwrap_or_default()),
        };
        let step = with_precision(cfg.precision, || -> Result<f64> {
            model.zero_grad();
            let loss = cross_entropy_loss(&model.forward(&images)?, &mask, mode)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "cross_entropy" });
            }
            loss.backward()?;
            let scale = match cfg.lr_schedule {
                LrSchedule::Constant => 1.0,
                LrSchedule::Linear => 1.0 - it as f64 / cfg.iterations as f64,
            };
            opt.step(&params, scale)?;
            Ok(value)
        });
        let loss = match step {
            Ok(v) => v,
            Err(e @ (Error::NonFinite { .. } | Error::NonFiniteGrad { .. })) => return Err(diverged(e.to_string())),
            Err(e) => return Err(e),
        };
        losses.push(loss);
        let mut line = json!({ "iteration": it, "loss": loss });
        let last = it + 1 == cfg.iterations;
        if !validation.is_empty() && cfg.eval_interval > 0 && ((it + 1) % cfg.eval_interval == 0 || last) {
            let (counts, _) = predict_counts(&model, validation)?;
            let s = scores(&counts, score_mode(spec))?;
            line["val_miou"] = json!(s.miou);
            line["val_mdice"] = json!(s.mdice);
            info!("iteration {} loss {loss:.5} val mIoU {:.4}", it + 1, s.miou);
        } else {
            debug!("iteration {} loss {loss:.5}", it + 1);
        }
        writeln!(log, "{line}")?;
    }
    let checkpoint = Checkpoint::from_model(&model)?;
    Ok(TrainOutcome { model, checkpoint, losses })
}

fn score_mode(spec: &VariantSpec) -> ScoreMode {
    if spec.decoder.num_classes == 1 {
        ScoreMode::Binary
    } else {
        ScoreMode::Multiclass
    }
}

/// Predicted label masks for every sample plus the pooled confusion counts.
pub fn predict_counts(model: &McaNet, data: &[SegSample]) -> Result<(ConfusionCounts, Vec<Vec<u8>>)> {
    let classes = model.spec.decoder.num_classes.max(2);
    let mut counts = ConfusionCounts::new(classes);
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let logits = no_grad(|| model.forward(&batch_images(&refs)?))?;
        let labels = predict_labels(&logits)?;
        let hw = chunk[0].height * chunk[0].width;
        for (s, pred) in chunk.iter().zip(labels.chunks(hw)) {
            counts.merge(&confusion(pred, &s.mask, classes)?)?;
            preds.push(pred.to_vec());
        }
    }
    Ok((counts, preds))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Scores,
    /// (sample, class) pairs where exactly one mask was empty.
    pub hd_one_empty: usize,
    /// (sample, class) pairs skipped because both masks were empty.
    pub hd_both_empty: usize,
}

/// Scores `model` on `data`: pooled IoU/Dice, mean Hausdorff (max and 95th
/// percentile) over foreground classes, and accounting at the sample size.
pub fn evaluate(model: &McaNet, data: &[SegSample]) -> Result<Evaluation> {
    let first = data.first().ok_or_else(|| Error::Data("evaluation data is empty".into()))?;
    check_samples(&model.spec, data)?;
    let (counts, preds) = predict_counts(model, data)?;
    let s = scores(&counts, score_mode(&model.spec))?;
    let classes = counts.num_classes();
    let (mut hd_sum, mut hd95_sum, mut n) = (0.0, 0.0, 0usize);
    let (mut one_empty, mut both_empty) = (0, 0);
    for (sample, pred) in data.iter().zip(&preds) {
        let (h, w) = (sample.height, sample.width);
        for class in 1..classes as u8 {
            let p: Vec<bool> = pred.iter().map(|&l| l == class).collect();
            let g: Vec<bool> = sample.mask.iter().map(|&l| l == class).collect();
            let full = hausdorff(&p, &g, h, w, 100.0)?;
            match full.flag {
                HausdorffFlag::BothEmpty => {
                    both_empty += 1;
                    continue;
                }
                HausdorffFlag::OneEmpty => one_empty += 1,
                HausdorffFlag::Ok => {}
            }
            hd_sum += full.distance;
            hd95_sum += hausdorff(&p, &g, h, w, 95.0)?.distance;
            n += 1;
        }
    }
    let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
    let stats = model_stats(model, first.height, first.width)?;
    Ok(Evaluation {
        report: MetricsReport::new(&s, mean(hd_sum), mean(hd95_sum), stats.params, stats.flops.total),
        scores: s,
        hd_one_empty: one_empty,
        hd_both_empty: both_empty,
    })
}
