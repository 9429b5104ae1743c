//! Optimization and evaluation.
//!
//! [`train`] runs the full recipe: seeded shuffling, augmentation,
//! multi-scale loss with the `tau` schedule, AdamW with a cosine learning
//! rate, one `key=value` log line per step and periodic checkpoints.
//! [`evaluate`] measures a predictor against ground truth and reports the
//! linear-blend baseline next to it.

mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};

use crate::data::{augment, load_triplet, save_checkpoint, Triplet, TripletRef};
use crate::error::{ensure_arg, Error, Result};
use crate::loss::{tau, total_loss, LossBreakdown, LossConfig};
use crate::metrics::{Metric, MetricReport};
use crate::model::{ModelConfig, Pmcrnet};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Side of the square training crop.
    pub crop: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Use only the first this-many triplets of the dataset.
    pub max_triplets: Option<usize>,
    /// Write a checkpoint every this-many epochs (0: final only).
    pub checkpoint_every: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch: 16,
            lr_max: 1e-4,
            lr_min: 2e-5,
            optimizer: AdamWConfig::default(),
            seed: 0,
            crop: 256,
            max_steps: None,
            max_triplets: None,
            checkpoint_every: 10,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small overfitting run: 4 triplets, 96x96 crops, one triplet per step,
    /// 300 steps. The learning rate is raised because 300 steps at the
    /// full-scale rate barely move the weights.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 75,
            batch: 1,
            lr_max: 1e-3,
            lr_min: 2e-4,
            crop: 96,
            max_steps: Some(300),
            max_triplets: Some(4),
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.epochs >= 1, "epochs must be at least 1");
        ensure_arg!(self.batch >= 1, "batch size must be at least 1");
        ensure_arg!(
            self.lr_min <= self.lr_max && self.lr_min >= 0.0,
            "need 0 <= lr_min <= lr_max, got {} and {}",
            self.lr_min,
            self.lr_max
        );
        ensure_arg!(
            self.crop >= 16 && self.crop % 16 == 0,
            "crop must be a positive multiple of 16, got {}",
            self.crop
        );
        ensure_arg!(self.max_steps != Some(0), "max_steps must be positive");
        self.loss.validate()?;
        self.model.validate()
    }

    /// Identifies the structural and schedule choices of a run.
    pub fn fingerprint(&self) -> String {
        format!("{} tau={}", self.model.fingerprint(), self.loss.mode)
    }
}

/// Random-access triplet collection.
pub trait TripletSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Triplet>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TripletSource for [Triplet] {
    fn len(&self) -> usize {
        <[Triplet]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Triplet> {
        Ok(self[index].clone())
    }
}

impl TripletSource for Vec<Triplet> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Triplet> {
        Ok(self[index].clone())
    }
}

/// Triplets read from disk on demand.
impl TripletSource for [TripletRef] {
    fn len(&self) -> usize {
        <[TripletRef]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Triplet> {
        load_triplet(&self[index])
    }
}

/// Values recorded for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Fractional epoch at which `tau` was evaluated.
    pub epoch: f64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    /// One `key=value` log line.
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        format!(
            "step={} epoch={} lr={} tau={} loss={} charbonnier0={} census0={} aux1={} aux2={} aux3={}",
            self.step,
            self.epoch,
            self.lr,
            l.tau,
            l.total,
            l.charbonnier[0],
            l.census[0],
            l.level(1),
            l.level(2),
            l.level(3)
        )
    }
}

/// Outcome of [`train`].
#[derive(Debug)]
pub struct TrainSummary {
    pub model: Pmcrnet<f32>,
    pub optimizer: OptimizerState<f32>,
    pub records: Vec<StepRecord>,
    pub steps_per_epoch: usize,
    /// Path of the final checkpoint when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

impl TrainSummary {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.loss.total)
    }

    /// Mean loss over the last epoch's worth of steps.
    pub fn final_loss(&self) -> f64 {
        let k = self.steps_per_epoch.clamp(1, self.records.len().max(1));
        let tail = &self.records[self.records.len().saturating_sub(k)..];
        tail.iter().map(|r| r.loss.total).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn log(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(Path::new("<training log>"), e))
}

/// Trains a freshly initialized network on `data`.
pub fn train<S: TripletSource + ?Sized>(
    cfg: &TrainConfig,
    data: &S,
    out_dir: Option<&Path>,
    log_out: &mut dyn Write,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let model = Pmcrnet::new(cfg.model.clone(), cfg.seed)?;
    train_from(cfg, model, None, data, out_dir, log_out)
}

/// Trains starting from given weights and optimizer state.
pub fn train_from<S: TripletSource + ?Sized>(
    cfg: &TrainConfig,
    mut model: Pmcrnet<f32>,
    optimizer: Option<OptimizerState<f32>>,
    data: &S,
    out_dir: Option<&Path>,
    log_out: &mut dyn Write,
) -> Result<TrainSummary> {
    cfg.validate()?;
    ensure_arg!(!data.is_empty(), "training dataset is empty");
    let n = cfg.max_triplets.map_or(data.len(), |k| k.min(data.len()));
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total_steps = cfg.max_steps.map_or(cfg.epochs * steps_per_epoch, |m| {
        m.min(cfg.epochs * steps_per_epoch)
    });
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    log(
        log_out,
        &format!(
            "config fingerprint=\"{}\" params={} triplets={n} batch={} steps_per_epoch={steps_per_epoch} total_steps={total_steps} seed={}",
            cfg.fingerprint(),
            model.param_count(),
            cfg.batch,
            cfg.seed
        ),
    )?;

    let mut opt = optimizer.unwrap_or_else(|| OptimizerState::for_parameters(model.parameters()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(total_steps);
    let mut step = 0;
    let mut checkpoint = None;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if step >= total_steps {
                break 'epochs;
            }
            let mut f0 = Vec::with_capacity(chunk.len());
            let mut gt = Vec::with_capacity(chunk.len());
            let mut f1 = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = augment(&data.get(i)?, cfg.crop, &mut rng)?;
                f0.push(t.frame0);
                gt.push(t.gt);
                f1.push(t.frame1);
            }
            let (f0, gt, f1) = (
                Tensor::stack_batch(&f0)?,
                Tensor::stack_batch(&gt)?,
                Tensor::stack_batch(&f1)?,
            );

            let frac_epoch = step as f64 / steps_per_epoch as f64;
            let tau_now = tau(frac_epoch, cfg.epochs as f64, &cfg.loss);
            let tape = Tape::new();
            let leaves = model.parameters().track(&tape);
            let output = model.forward_with(&leaves, &f0, &f1)?;
            let (loss, breakdown) = total_loss(&output, &gt, tau_now, &cfg.loss)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("epoch {epoch}, loss {}", breakdown.total),
                });
            }
            let grads = loss.backward()?;
            let grads: Vec<Tensor<f32>> = leaves.iter().map(|l| grads.get_or_zeros(l)).collect();
            if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: format!(
                        "gradient of {} is not finite",
                        model.parameters().names()[bad]
                    ),
                });
            }
            let lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            adamw_step(model.parameters_mut(), &grads, &mut opt, lr, &cfg.optimizer)?;

            let record = StepRecord {
                step,
                epoch: frac_epoch,
                lr,
                loss: breakdown,
            };
            log(log_out, &record.log_line())?;
            records.push(record);
            step += 1;
        }
        let done = epoch + 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let p = dir.join(format!("epoch{done:04}.pmcr"));
                save_checkpoint(&p, &model, Some(&opt), done, step)?;
                log(
                    log_out,
                    &format!("checkpoint epoch={done} path={}", p.display()),
                )?;
            }
        }
    }

    if let Some(dir) = out_dir {
        let p = dir.join("final.pmcr");
        let epochs_done = step.div_ceil(steps_per_epoch);
        save_checkpoint(&p, &model, Some(&opt), epochs_done, step)?;
        log(log_out, &format!("checkpoint final path={}", p.display()))?;
        checkpoint = Some(p);
    }
    Ok(TrainSummary {
        model,
        optimizer: opt,
        records,
        steps_per_epoch,
        checkpoint,
    })
}

/// How evaluation produces the middle frame.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model(&'a Pmcrnet<f32>),
    /// Average of the two input frames.
    Blend,
    /// Returns the ground truth itself; checks the measuring harness.
    GroundTruth,
}

impl Predictor<'_> {
    pub fn predict(&self, t: &Triplet) -> Result<Tensor<f32>> {
        match self {
            Predictor::Model(net) => Ok(net
                .forward(&t.frame0, &t.frame1)?
                .prediction
                .clamp(0.0, 1.0)),
            Predictor::Blend => linear_blend(&t.frame0, &t.frame1),
            Predictor::GroundTruth => Ok(t.gt.clone()),
        }
    }
}

/// `0.5 * frame0 + 0.5 * frame1`.
pub fn linear_blend(frame0: &Tensor<f32>, frame1: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mask = Tensor::full(frame0.shape().with_c(1), 0.5);
    frame0.blend(frame1, &mask)
}

/// Metrics for a predictor and for the linear-blend baseline on the same
/// triplets.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predicted: MetricReport,
    pub baseline: MetricReport,
}

pub fn evaluate<S: TripletSource + ?Sized>(
    predictor: Predictor<'_>,
    data: &S,
    metrics: &[Metric],
) -> Result<Evaluation> {
    let mut predicted = MetricReport::new(metrics.to_vec());
    let mut baseline = MetricReport::new(metrics.to_vec());
    for i in 0..data.len() {
        let t = data.get(i)?;
        predicted.push(t.id.clone(), &predictor.predict(&t)?, &t.gt)?;
        baseline.push(t.id.clone(), &Predictor::Blend.predict(&t)?, &t.gt)?;
    }
    Ok(Evaluation {
        predicted,
        baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::synthetic_frames;

    fn tiny_data(count: usize) -> Vec<Triplet> {
        (0..count)
            .map(|i| {
                let [a, b, c] = synthetic_frames(32, 40, i as u64);
                Triplet::new(format!("s{i}"), a, b, c).unwrap()
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch: 2,
            crop: 32,
            model: ModelConfig {
                hidden_width: 6,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn steps_per_epoch_is_ceiling() {
        let data = tiny_data(3);
        let mut sink = Vec::new();
        let s = train(&tiny_config(), &data, None, &mut sink).unwrap();
        assert_eq!(s.steps_per_epoch, 2);
        assert_eq!(s.records.len(), 4);
        assert_eq!(s.records[1].epoch, 0.5);
        let text = String::from_utf8(sink).unwrap();
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("step=0 epoch=0 lr=0.0001 tau=0.1 "));
    }

    #[test]
    fn runs_are_reproducible() {
        let data = tiny_data(2);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        train(&tiny_config(), &data, None, &mut a).unwrap();
        train(&tiny_config(), &data, None, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_predictor_is_perfect() {
        let data = tiny_data(2);
        let e = evaluate(Predictor::GroundTruth, &data, &Metric::ALL).unwrap();
        assert_eq!(e.predicted.means(), vec![99.0, 1.0, 0.0]);
    }

    #[test]
    fn blend_baseline_on_static_scene() {
        let [a, _, _] = synthetic_frames(16, 16, 3);
        let data = vec![Triplet::new("static", a.clone(), a.clone(), a).unwrap()];
        let e = evaluate(Predictor::Blend, &data, &[Metric::Psnr]).unwrap();
        assert_eq!(e.baseline.samples[0].values[0], 99.0);
    }
}
