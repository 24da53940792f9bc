//! Test-set metrics, the residual-head ablation, the pooling and
//! nonlinearity comparison harnesses, and the inference benchmark.
//!
//! Errors are always signed prediction-minus-truth per output component,
//! converted back to world units. "std" is the population standard
//! deviation (n = 3072 component samples per quantity makes the n vs
//! n-1 distinction invisible); the mean is reported alongside because a
//! standard deviation hides bias.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::network::{forward, ModelWeights, NetworkConfig, Nonlinearity, Pooling};
use crate::rng::Prng;
use crate::scene::{assemble_sample, batch_input, Dataset, TargetNormalizer};
use crate::tape::{BnMode, Tape};
use crate::training::{train_stage, MetricsLog, ResumePoint, TrainConfig};

/// One line of an evaluation report: a quantity (coordinate, velocity,
/// acceleration), an axis (x, y, z, or the pooled "all"), and the error
/// statistics over every matching component sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub quantity: String,
    pub axis: String,
    pub std: f64,
    pub max: f64,
    pub mean: f64,
    pub n: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Mean wall-clock milliseconds of model inference per sample.
    pub ms_per_measurement: f64,
}

const QUANTITIES: [&str; 3] = ["coordinate", "velocity", "acceleration"];
const AXES: [&str; 3] = ["x", "y", "z"];

impl EvalReport {
    pub fn row(&self, quantity: &str, axis: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.quantity == quantity && r.axis == axis)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,axis,std,max,mean,n\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.quantity, r.axis, r.std, r.max, r.mean, r.n
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<EvalReport> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "quantity,axis,std,max,mean,n" {
            return Err(Error::Config(format!("unexpected report header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!(
                    "report line {} has {} fields, expected 6",
                    i + 2,
                    f.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad number {s:?} on line {}", i + 2)))
            };
            rows.push(EvalRow {
                quantity: f[0].to_string(),
                axis: f[1].to_string(),
                std: num(f[2])?,
                max: num(f[3])?,
                mean: num(f[4])?,
                n: num(f[5])? as u64,
            });
        }
        Ok(EvalReport {
            rows,
            ms_per_measurement: 0.0,
        })
    }
}

/// Compensated accumulator for a single error population.
#[derive(Clone, Copy, Default)]
struct ErrorStats {
    sum: f64,
    sum_c: f64,
    sq: f64,
    sq_c: f64,
    max: f64,
    n: u64,
}

impl ErrorStats {
    fn push(&mut self, e: f64) {
        let add = |sum: &mut f64, comp: &mut f64, v: f64| {
            let y = v - *comp;
            let t = *sum + y;
            *comp = (t - *sum) - y;
            *sum = t;
        };
        add(&mut self.sum, &mut self.sum_c, e);
        add(&mut self.sq, &mut self.sq_c, e * e);
        self.max = self.max.max(e.abs());
        self.n += 1;
    }

    fn row(&self, quantity: &str, axis: &str) -> EvalRow {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = (self.sq / n - mean * mean).max(0.0);
        EvalRow {
            quantity: quantity.to_string(),
            axis: axis.to_string(),
            std: var.sqrt(),
            max: self.max,
            mean,
            n: self.n,
        }
    }
}

/// Which quantity and axis an output component belongs to, for a
/// prediction vector covering `frames` frames.
fn component_kind(index: usize, frames: usize) -> (usize, usize) {
    let coords = 3 * frames;
    let velocities = 3 * frames.saturating_sub(1);
    if index < coords {
        (0, index % 3)
    } else if index < coords + velocities {
        (1, index % 3)
    } else {
        (2, index % 3)
    }
}

/// Turn aligned prediction/truth component rows (world units) into the
/// per-quantity, per-axis statistics table. This is the statistics stage
/// of [`evaluate`]; tests feed it known pairs directly.
pub fn build_report(
    predictions: &[f64],
    truths: &[f64],
    dim: usize,
    frames: usize,
    ms_per_measurement: f64,
) -> Result<EvalReport> {
    if dim == 0 || predictions.len() != truths.len() || predictions.len() % dim != 0 {
        return Err(Error::Config(format!(
            "prediction/truth lengths {} and {} do not tile dimension {dim}",
            predictions.len(),
            truths.len()
        )));
    }
    let quantities = if frames >= 3 { 3 } else { frames.max(1) };
    // [quantity][axis] plus a pooled slot per quantity.
    let mut per_axis = vec![[ErrorStats::default(); 3]; quantities];
    let mut pooled = vec![ErrorStats::default(); quantities];
    for (row_p, row_t) in predictions.chunks(dim).zip(truths.chunks(dim)) {
        for (i, (p, t)) in row_p.iter().zip(row_t).enumerate() {
            let (q, axis) = component_kind(i, frames);
            let e = p - t;
            per_axis[q][axis].push(e);
            pooled[q].push(e);
        }
    }
    let mut rows = Vec::new();
    for q in 0..quantities {
        for a in 0..3 {
            rows.push(per_axis[q][a].row(QUANTITIES[q], AXES[a]));
        }
        rows.push(pooled[q].row(QUANTITIES[q], "all"));
    }
    Ok(EvalReport {
        rows,
        ms_per_measurement,
    })
}

fn check_dataset_matches(config: &NetworkConfig, dataset: &Dataset) -> Result<()> {
    let h = dataset.header.height as usize;
    let w = dataset.header.width as usize;
    if h != config.image_size || w != config.image_size {
        return Err(Error::Config(format!(
            "dataset images are {h}x{w} but the network expects {0}x{0}",
            config.image_size
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".to_string()));
    }
    Ok(())
}

fn predict_errors(
    weights: &mut ModelWeights<f32>,
    dataset: &Dataset,
    seed: u64,
    batch_size: usize,
    residual: bool,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    check_dataset_matches(&weights.config, dataset)?;
    let frames = weights.config.frames;
    let dim = weights.config.output_dim();
    let norm = TargetNormalizer::default();
    let n = dataset.len();
    let mut preds = Vec::with_capacity(n * dim);
    let mut truths = Vec::with_capacity(n * dim);
    let mut inference = 0.0f64;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        // Per-index streams keep the pairings independent of batching.
        let samples: Vec<_> = (start..end)
            .map(|i| {
                let mut rng = Prng::derive(seed, "eval", i as u64);
                assemble_sample(dataset, i, &mut rng, frames)
            })
            .collect::<Result<_>>()?;
        let x = batch_input::<f32>(dataset, &samples);
        let clock = Instant::now();
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let bound = weights.store.bind(&mut tape);
        let out = forward(&mut tape, xid, weights, &bound, BnMode::Eval, residual)?;
        inference += clock.elapsed().as_secs_f64() * 1000.0;
        let out_data = tape.value(out).data().to_vec();
        for (s, sample) in samples.iter().enumerate() {
            for i in 0..dim {
                preds.push(norm.denormalize(out_data[s * dim + i] as f64));
                truths.push(sample.targets[i] as f64);
            }
        }
        start = end;
    }
    Ok((preds, truths, inference / n as f64))
}

/// Run the model over a test set and report per-quantity, per-axis error
/// statistics in world units. Deterministic given (weights, dataset,
/// seed); batching does not change the result.
pub fn evaluate(
    weights: &mut ModelWeights<f32>,
    dataset: &Dataset,
    seed: u64,
    batch_size: usize,
) -> Result<EvalReport> {
    let (preds, truths, ms) = predict_errors(weights, dataset, seed, batch_size, true)?;
    build_report(
        &preds,
        &truths,
        weights.config.output_dim(),
        weights.config.frames,
        ms,
    )
}

/// The residual ablation: the same samples scored with the learned
/// residual corrections and with plain finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub with_residual: EvalReport,
    pub without_residual: EvalReport,
}

/// Fractional reduction of a spread thanks to the residual path:
/// (without - with) / without. Multiply by 100 for percent.
pub fn relative_reduction(with_residual: f64, without_residual: f64) -> f64 {
    (without_residual - with_residual) / without_residual
}

impl AblationReport {
    /// Pooled-std reductions per quantity, as (quantity, fraction).
    pub fn reductions(&self) -> Vec<(String, f64)> {
        self.with_residual
            .rows
            .iter()
            .filter(|r| r.axis == "all")
            .filter_map(|r| {
                let other = self.without_residual.row(&r.quantity, "all")?;
                Some((
                    r.quantity.clone(),
                    relative_reduction(r.std, other.std),
                ))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,quantity,axis,std,max,mean,n\n");
        for (arm, report) in [
            ("residual", &self.with_residual),
            ("no-residual", &self.without_residual),
        ] {
            for r in &report.rows {
                out.push_str(&format!(
                    "{arm},{},{},{},{},{},{}\n",
                    r.quantity, r.axis, r.std, r.max, r.mean, r.n
                ));
            }
        }
        out
    }
}

/// Score the same dataset with and without the residual head path.
pub fn ablate_residual(
    weights: &mut ModelWeights<f32>,
    dataset: &Dataset,
    seed: u64,
    batch_size: usize,
) -> Result<AblationReport> {
    let frames = weights.config.frames;
    let dim = weights.config.output_dim();
    let (p1, t1, ms1) = predict_errors(weights, dataset, seed, batch_size, true)?;
    let (p2, t2, ms2) = predict_errors(weights, dataset, seed, batch_size, false)?;
    Ok(AblationReport {
        with_residual: build_report(&p1, &t1, dim, frames, ms1)?,
        without_residual: build_report(&p2, &t2, dim, frames, ms2)?,
    })
}

/// Convergence curves for the arms of a side-by-side comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub arms: Vec<(String, MetricsLog)>,
    /// Weight-set digest of each arm before any training step.
    pub init_fingerprints: Vec<u64>,
}

impl ComparisonReport {
    /// One aligned CSV of per-step training losses across the arms.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,step,epoch,lr,loss\n");
        for (name, log) in &self.arms {
            for s in &log.steps {
                out.push_str(&format!(
                    "{name},{},{},{},{}\n",
                    s.step, s.epoch, s.lr, s.loss
                ));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ComparisonReport> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "arm,step,epoch,lr,loss" {
            return Err(Error::Config(format!("unexpected curve header {header:?}")));
        }
        let mut arms: Vec<(String, MetricsLog)> = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Config(format!(
                    "curve line {} has {} fields, expected 5",
                    i + 2,
                    f.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad number {s:?} on line {}", i + 2)))
            };
            let arm = match arms.last_mut() {
                Some((name, log)) if *name == f[0] => log,
                _ => {
                    arms.push((f[0].to_string(), MetricsLog::default()));
                    &mut arms.last_mut().unwrap().1
                }
            };
            arm.steps.push(crate::training::StepRecord {
                step: num(f[1])? as u64,
                epoch: num(f[2])? as u32,
                lr: num(f[3])?,
                loss: num(f[4])?,
            });
        }
        Ok(ComparisonReport {
            arms,
            init_fingerprints: Vec::new(),
        })
    }
}

fn run_comparison(
    base: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    variants: Vec<(String, NetworkConfig)>,
) -> Result<ComparisonReport> {
    let mut arms = Vec::new();
    let mut init_fingerprints = Vec::new();
    for (name, net) in variants {
        let cfg = TrainConfig {
            net,
            checkpoint_out: None,
            ..base.clone()
        };
        cfg.validate()?;
        // Both arms start from the same weights: initialization draws
        // per-parameter streams that ignore pooling and nonlinearity.
        let weights = ModelWeights::<f32>::init(net, cfg.seed)?;
        init_fingerprints.push(weights.fingerprint());
        let init = ResumePoint {
            weights,
            adam: None,
            start_epoch: 0,
        };
        let (_, log) = train_stage(&cfg, train, val, Some(init))?;
        arms.push((name, log));
    }
    Ok(ComparisonReport {
        arms,
        init_fingerprints,
    })
}

/// Train the same stage twice, once per pooling flavor, from identical
/// initial weights and identical batch streams.
pub fn compare_pooling(
    base: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<ComparisonReport> {
    let variants = vec![
        (
            "avg-pool".to_string(),
            NetworkConfig {
                pooling: Pooling::Average,
                ..base.net
            },
        ),
        (
            "max-pool".to_string(),
            NetworkConfig {
                pooling: Pooling::Max,
                ..base.net
            },
        ),
    ];
    run_comparison(base, train, val, variants)
}

/// As [`compare_pooling`], over the PReLU/ReLU choice.
pub fn compare_nonlinearity(
    base: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<ComparisonReport> {
    let variants = vec![
        (
            "prelu".to_string(),
            NetworkConfig {
                nonlinearity: Nonlinearity::Prelu,
                ..base.net
            },
        ),
        (
            "relu".to_string(),
            NetworkConfig {
                nonlinearity: Nonlinearity::Relu,
                ..base.net
            },
        ),
    ];
    run_comparison(base, train, val, variants)
}

/// Timed single-sample forward passes over pre-rendered inputs.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub mean_ms: f64,
    pub p95_ms: f64,
    /// Measurements per second implied by the mean, 1000 / mean_ms.
    pub throughput_per_s: f64,
    pub n: usize,
}

/// Assemble `count` batch-1 input tensors from a dataset, ready for the
/// benchmark (rendering and file I/O stay outside the timed region).
pub fn render_bench_inputs(
    dataset: &Dataset,
    seed: u64,
    frames: usize,
    count: usize,
) -> Result<Vec<crate::tensor::Tensor<f32>>> {
    (0..count)
        .map(|i| {
            let mut rng = Prng::derive(seed, "bench", i as u64);
            let sample = assemble_sample(dataset, i % dataset.len(), &mut rng, frames)?;
            Ok(batch_input::<f32>(dataset, &[sample]))
        })
        .collect()
}

/// Benchmark inference: a few untimed warmup passes, then one timed
/// forward per input at batch size 1.
pub fn benchmark_inference(
    weights: &mut ModelWeights<f32>,
    inputs: &[crate::tensor::Tensor<f32>],
    warmup: usize,
) -> Result<BenchReport> {
    if inputs.is_empty() {
        return Err(Error::Config("benchmark needs at least one input".to_string()));
    }
    let mut run = |x: &crate::tensor::Tensor<f32>| -> Result<f64> {
        let clock = Instant::now();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let bound = weights.store.bind(&mut tape);
        let out = forward(&mut tape, xid, weights, &bound, BnMode::Eval, true)?;
        let ms = clock.elapsed().as_secs_f64() * 1000.0;
        // Touch the output so the whole pass is observable work.
        let _ = tape.value(out).data()[0];
        Ok(ms)
    };
    for x in inputs.iter().take(warmup) {
        run(x)?;
    }
    let mut times = Vec::with_capacity(inputs.len());
    for x in inputs {
        times.push(run(x)?);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    let mut sorted = times.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p95_idx = ((times.len() as f64 * 0.95).ceil() as usize).clamp(1, times.len()) - 1;
    Ok(BenchReport {
        mean_ms,
        p95_ms: sorted[p95_idx],
        throughput_per_s: 1000.0 / mean_ms,
        n: times.len(),
    })
}
