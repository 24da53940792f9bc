//! Three-stage curriculum training: coordinates only (one frame), then
//! velocities (two frames), then acceleration (three frames). Each stage
//! trains the frame count matching its stage number; moving to the next
//! stage copies every shared weight and zero-initializes the new
//! residual head, so the grown network starts out predicting plain
//! finite differences.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::network::{
    forward, save_checkpoint, transfer_weights, ModelWeights, NetworkConfig,
};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Prng;
use crate::scene::{assemble_sample, batch_input, batch_targets, Dataset, TargetNormalizer};
use crate::tape::{BnMode, Tape};

/// How the learning rate evolves over a stage's epochs.
///
/// `Compound` multiplies in a 0.1 attenuation every 10 epochs and a
/// 1000x amplification after every fourth attenuation, giving a sawtooth
/// whose peaks themselves decay 10x per 40-epoch cycle. `ResetCycle` is
/// the alternative reading where each 40-epoch cycle restarts at the
/// initial rate; it exists for comparison and is not the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Compound,
    ResetCycle,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Result<LrSchedule> {
        match s {
            "compound" => Ok(LrSchedule::Compound),
            "reset-cycle" => Ok(LrSchedule::ResetCycle),
            other => Err(Error::Config(format!(
                "unknown learning-rate schedule {other:?} (expected compound or reset-cycle)"
            ))),
        }
    }
}

/// The published starting rate: 1e-3 for the first stage, 1e-6 for the
/// fine-tuning stages.
pub fn default_initial_lr(stage: u32) -> f64 {
    if stage == 1 {
        1e-3
    } else {
        1e-6
    }
}

/// Learning rate at a (0-based) epoch.
pub fn lr_at(epoch: u32, initial: f64, schedule: LrSchedule) -> f64 {
    match schedule {
        LrSchedule::Compound => {
            initial * 0.1f64.powi((epoch / 10) as i32) * 1000f64.powi((epoch / 40) as i32)
        }
        LrSchedule::ResetCycle => initial * 0.1f64.powi(((epoch % 40) / 10) as i32),
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: u32,
    pub epochs: u32,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub net: NetworkConfig,
    pub adam: AdamConfig,
    /// Where per-epoch checkpoints go; None trains without writing.
    pub checkpoint_out: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(stage: u32, net: NetworkConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: 120,
            batch_size: 32,
            initial_lr: default_initial_lr(stage),
            schedule: LrSchedule::Compound,
            seed,
            net,
            adam: AdamConfig::default(),
            checkpoint_out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!(
                "stage must be 1 to 3, got {}",
                self.stage
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".to_string()));
        }
        if self.net.frames != self.stage as usize {
            return Err(Error::Config(format!(
                "stage {} trains {} frame(s) but the network config has {}",
                self.stage, self.stage, self.net.frames
            )));
        }
        self.net.validate()
    }
}

/// One optimizer step's bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// 1-based epoch the step belongs to.
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
}

/// One epoch's validation summary: mean loss on normalized targets and
/// the standard deviation of denormalized (world-unit) component errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub val_loss: f64,
    pub val_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl MetricsLog {
    /// CSV with one row per step (validation columns empty) and one row
    /// per epoch summary (step columns empty), in chronological order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,train_loss,val_loss,val_std\n");
        let mut ei = 0;
        let flush_epochs = |out: &mut String, up_to: u32, ei: &mut usize| {
            while *ei < self.epochs.len() && self.epochs[*ei].epoch <= up_to {
                let e = &self.epochs[*ei];
                out.push_str(&format!(",{},,,{},{}\n", e.epoch, e.val_loss, e.val_std));
                *ei += 1;
            }
        };
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},,\n", s.step, s.epoch, s.lr, s.loss));
            let last_of_epoch =
                i + 1 == self.steps.len() || self.steps[i + 1].epoch != s.epoch;
            if last_of_epoch {
                flush_epochs(&mut out, s.epoch, &mut ei);
            }
        }
        flush_epochs(&mut out, u32::MAX, &mut ei);
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "step,epoch,lr,train_loss,val_loss,val_std" {
            return Err(Error::Config(format!(
                "unexpected metrics header {header:?}"
            )));
        }
        let mut log = MetricsLog::default();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!(
                    "metrics line {} has {} fields, expected 6",
                    n + 2,
                    f.len()
                )));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad {what} {s:?} on line {}", n + 2)))
            };
            if f[0].is_empty() {
                log.epochs.push(EpochRecord {
                    epoch: parse(f[1], "epoch")? as u32,
                    val_loss: parse(f[4], "val_loss")?,
                    val_std: parse(f[5], "val_std")?,
                });
            } else {
                log.steps.push(StepRecord {
                    step: parse(f[0], "step")? as u64,
                    epoch: parse(f[1], "epoch")? as u32,
                    lr: parse(f[2], "lr")?,
                    loss: parse(f[3], "train_loss")?,
                });
            }
        }
        Ok(log)
    }
}

/// Starting point for a stage: fresh weights, transferred weights, or a
/// resumed checkpoint with its optimizer state and epoch counter.
pub struct ResumePoint {
    pub weights: ModelWeights<f32>,
    pub adam: Option<AdamState<f32>>,
    pub start_epoch: u32,
}

fn run_validation(
    weights: &mut ModelWeights<f32>,
    val: &Dataset,
    batch_size: usize,
    frames: usize,
    rng: &mut Prng,
) -> Result<(f64, f64)> {
    let norm = TargetNormalizer::default();
    let n = val.len();
    let mut loss_sum = 0.0f64;
    // Kahan-compensated sums of world-unit errors and their squares.
    let mut count = 0u64;
    let (mut s1, mut c1) = (0.0f64, 0.0f64);
    let (mut s2, mut c2) = (0.0f64, 0.0f64);
    let add = |sum: &mut f64, comp: &mut f64, v: f64| {
        let y = v - *comp;
        let t = *sum + y;
        *comp = (t - *sum) - y;
        *sum = t;
    };
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let samples: Vec<_> = (start..end)
            .map(|i| assemble_sample(val, i, rng, frames))
            .collect::<Result<_>>()?;
        let x = batch_input::<f32>(val, &samples);
        let y = batch_targets::<f32>(&samples, &norm);
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let bound = weights.store.bind(&mut tape);
        let out = forward(&mut tape, xid, weights, &bound, BnMode::Eval, true)?;
        let loss = tape.mse_loss(out, &y)?;
        loss_sum += tape.value(loss).item() as f64 * (end - start) as f64;
        let pred = tape.value(out).data();
        let truth = y.data();
        for (p, t) in pred.iter().zip(truth) {
            let err = norm.denormalize((*p - *t) as f64);
            add(&mut s1, &mut c1, err);
            add(&mut s2, &mut c2, err * err);
            count += 1;
        }
        start = end;
    }
    let mean = s1 / count as f64;
    let var = (s2 / count as f64 - mean * mean).max(0.0);
    Ok((loss_sum / n as f64, var.sqrt()))
}

/// Train one stage. Every dataset index appears exactly once per epoch
/// as a sample's first frame (in index order); later frames are drawn
/// from a per-epoch stream so pairings reshuffle each epoch. Validation
/// runs after every epoch; the checkpoint (with optimizer state) is
/// rewritten after every epoch. A non-finite loss saves a diagnostic
/// checkpoint next to the output path and aborts.
pub fn train_stage(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    init: Option<ResumePoint>,
) -> Result<(ModelWeights<f32>, MetricsLog)> {
    cfg.validate()?;
    let (mut weights, mut adam, start_epoch) = match init {
        Some(r) => {
            if r.weights.config != cfg.net {
                return Err(Error::Config(format!(
                    "initial weights were built for {:?}, stage wants {:?}",
                    r.weights.config, cfg.net
                )));
            }
            (r.weights, r.adam.unwrap_or_default(), r.start_epoch)
        }
        None => (
            ModelWeights::init(cfg.net, cfg.seed)?,
            AdamState::new(),
            0,
        ),
    };
    if start_epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "resume epoch {start_epoch} is past the requested {} epochs",
            cfg.epochs
        )));
    }

    let norm = TargetNormalizer::default();
    let frames = cfg.stage as usize;
    let n = train.len();
    if n == 0 {
        return Err(Error::Config("training dataset is empty".to_string()));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut log = MetricsLog::default();
    let mut step = start_epoch as u64 * steps_per_epoch;

    for e in start_epoch..cfg.epochs {
        let lr = lr_at(e, cfg.initial_lr, cfg.schedule);
        let mut epoch_rng = Prng::derive(cfg.seed, "epoch", e as u64);
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let samples: Vec<_> = (start..end)
                .map(|i| assemble_sample(train, i, &mut epoch_rng, frames))
                .collect::<Result<_>>()?;
            let x = batch_input::<f32>(train, &samples);
            let y = batch_targets::<f32>(&samples, &norm);

            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let bound = weights.store.bind(&mut tape);
            let out = forward(&mut tape, xid, &mut weights, &bound, BnMode::Train, true)?;
            let loss = tape.mse_loss(out, &y)?;
            let loss_val = tape.value(loss).item() as f64;
            step += 1;
            if !loss_val.is_finite() {
                if let Some(out_path) = &cfg.checkpoint_out {
                    let mut name = out_path.as_os_str().to_owned();
                    name.push(".nan");
                    let diag = PathBuf::from(name);
                    save_checkpoint(&diag, &weights, Some(&adam), e, cfg.stage)?;
                }
                return Err(Error::NonFiniteLoss {
                    step,
                    epoch: (e + 1) as u64,
                    value: loss_val,
                });
            }
            tape.backward(loss)?;
            let grads = bound.collect_grads(&tape);
            adam.step(&mut weights.store, &grads, lr, &cfg.adam)?;
            log.steps.push(StepRecord {
                step,
                epoch: e + 1,
                lr,
                loss: loss_val,
            });
            start = end;
        }

        let mut val_rng = Prng::derive(cfg.seed, "val", e as u64);
        let (val_loss, val_std) =
            run_validation(&mut weights, val, cfg.batch_size, frames, &mut val_rng)?;
        log.epochs.push(EpochRecord {
            epoch: e + 1,
            val_loss,
            val_std,
        });
        if let Some(out_path) = &cfg.checkpoint_out {
            save_checkpoint(out_path, &weights, Some(&adam), e + 1, cfg.stage)?;
        }
    }

    // A zero-epoch stage still emits its (possibly transferred) weights.
    if cfg.epochs == 0 || start_epoch == cfg.epochs {
        if let Some(out_path) = &cfg.checkpoint_out {
            save_checkpoint(out_path, &weights, Some(&adam), cfg.epochs, cfg.stage)?;
        }
    }
    Ok((weights, log))
}

/// Run all three stages in sequence, transferring weights between them.
pub fn run_curriculum(
    configs: &[TrainConfig; 3],
    train: &Dataset,
    val: &Dataset,
) -> Result<(ModelWeights<f32>, [MetricsLog; 3])> {
    for (i, cfg) in configs.iter().enumerate() {
        let stage = i as u32 + 1;
        if cfg.stage != stage {
            return Err(Error::Config(format!(
                "curriculum slot {i} holds a stage-{} config, expected stage {stage}",
                cfg.stage
            )));
        }
        cfg.validate()?;
        let base = NetworkConfig {
            frames: 1,
            ..cfg.net
        };
        let first = NetworkConfig {
            frames: 1,
            ..configs[0].net
        };
        if base != first {
            return Err(Error::Config(format!(
                "stage {stage} architecture differs from stage 1 beyond the frame count"
            )));
        }
    }
    let (w1, log1) = train_stage(&configs[0], train, val, None)?;
    let init2 = ResumePoint {
        weights: transfer_weights(&w1, 2)?,
        adam: None,
        start_epoch: 0,
    };
    let (w2, log2) = train_stage(&configs[1], train, val, Some(init2))?;
    let init3 = ResumePoint {
        weights: transfer_weights(&w2, 3)?,
        adam: None,
        start_epoch: 0,
    };
    let (w3, log3) = train_stage(&configs[2], train, val, Some(init3))?;
    Ok((w3, [log1, log2, log3]))
}
