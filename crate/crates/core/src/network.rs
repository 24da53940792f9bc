//! The position/velocity/acceleration network: a backbone of
//! concatenate-and-pool building blocks followed by difference-plus-
//! residual heads.
//!
//! Each building block runs two Conv-BN-PReLU transformations (channel-
//! full convolution, kernel 1 on time, 3x3 on space), concatenates the
//! result with the block's own input, and 2x2-pools. Because the input
//! half of the concatenation bypasses the convolutions, every block's
//! output carries pooled copies of all earlier features, and gradients
//! reach the first block directly. The default configuration turns
//! [N,2,3,256,256] into [N,256,3,2,2], which is split per frame into
//! three 1024-vectors; a shared FC maps each to a coordinate, and the
//! velocity/acceleration heads add learned residuals to plain finite
//! differences of those coordinates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamSlot, AdamState, BoundParams, ParameterStore};
use crate::rng::Prng;
use crate::scene::target_dim;
use crate::tape::{BnMode, RunningStats, Tape, TracedValue};
use crate::tensor::{Scalar, Tensor};

/// Spatial downsampling flavor used after each block's concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Average,
    Max,
}

/// Post-BN nonlinearity. PReLU slopes exist as parameters either way so
/// both arms of a comparison share one initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Prelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Square input image extent; must be 2^(n_blocks + 1).
    pub image_size: usize,
    pub n_blocks: usize,
    /// Frames per sample, 1 to 3.
    pub frames: usize,
    pub pooling: Pooling,
    pub nonlinearity: Nonlinearity,
}

impl NetworkConfig {
    /// The full-scale configuration: 256x256, 7 blocks.
    pub fn standard(frames: usize) -> NetworkConfig {
        NetworkConfig {
            image_size: 256,
            n_blocks: 7,
            frames,
            pooling: Pooling::Average,
            nonlinearity: Nonlinearity::Prelu,
        }
    }

    /// Derive the block count from the image size (blocks halve the
    /// extent until 2x2 remains).
    pub fn for_image_size(image_size: usize, frames: usize) -> Result<NetworkConfig> {
        if !image_size.is_power_of_two() || image_size < 8 {
            return Err(Error::Config(format!(
                "image size must be a power of two of at least 8, got {image_size}"
            )));
        }
        let n_blocks = image_size.trailing_zeros() as usize - 1;
        let cfg = NetworkConfig {
            image_size,
            n_blocks,
            frames,
            pooling: Pooling::Average,
            nonlinearity: Nonlinearity::Prelu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size != 1 << (self.n_blocks + 1) {
            return Err(Error::Config(format!(
                "image size {} does not match {} blocks (need {})",
                self.image_size,
                self.n_blocks,
                1 << (self.n_blocks + 1)
            )));
        }
        if !(1..=3).contains(&self.frames) {
            return Err(Error::Config(format!(
                "frames must be 1 to 3, got {}",
                self.frames
            )));
        }
        Ok(())
    }

    /// Channel count entering block `k` (1-based): 2, 4, 8, ...
    pub fn block_in_channels(&self, k: usize) -> usize {
        1 << k
    }

    /// Channel count of the backbone output.
    pub fn final_channels(&self) -> usize {
        1 << (self.n_blocks + 1)
    }

    /// Length of one flattened per-frame state vector (channels x 2 x 2).
    pub fn state_dim(&self) -> usize {
        self.final_channels() * 4
    }

    /// Length of the prediction vector for this frame count.
    pub fn output_dim(&self) -> usize {
        target_dim(self.frames)
    }

    /// (convolutional, fully connected) layer counts.
    pub fn layer_counts(&self) -> (usize, usize) {
        (2 * self.n_blocks, self.frames.min(3))
    }
}

/// PReLU initial slope; also enters the conv weight variance.
const PRELU_ALPHA_INIT: f64 = 0.25;

/// Named weights plus the configuration they were built for. The name
/// set is a pure function of the configuration.
#[derive(Clone, Debug)]
pub struct ModelWeights<E: Scalar> {
    pub config: NetworkConfig,
    pub store: ParameterStore<E>,
}

/// Expected (name, shape, trainable) triplets for a configuration.
fn expected_entries(config: &NetworkConfig) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = Vec::new();
    for k in 1..=config.n_blocks {
        let c = config.block_in_channels(k);
        for half in ["1", "2"] {
            out.push((format!("block{k}.conv{half}.weight"), vec![c, c, 1, 3, 3], true));
            out.push((format!("block{k}.conv{half}.bias"), vec![c], true));
            out.push((format!("block{k}.bn{half}.gamma"), vec![c], true));
            out.push((format!("block{k}.bn{half}.beta"), vec![c], true));
            out.push((format!("block{k}.bn{half}.running_mean"), vec![c], false));
            out.push((format!("block{k}.bn{half}.running_var"), vec![c], false));
            out.push((format!("block{k}.prelu{half}.alpha"), vec![c], true));
        }
    }
    let s = config.state_dim();
    out.push(("head.fc1.weight".to_string(), vec![s, 3], true));
    out.push(("head.fc1.bias".to_string(), vec![3], true));
    if config.frames >= 2 {
        out.push(("head.fc2.weight".to_string(), vec![s, 3], true));
        out.push(("head.fc2.bias".to_string(), vec![3], true));
    }
    if config.frames >= 3 {
        out.push(("head.fc3.weight".to_string(), vec![s, 3], true));
        out.push(("head.fc3.bias".to_string(), vec![3], true));
    }
    out
}

impl<E: Scalar> ModelWeights<E> {
    /// Fresh weights: conv filters scaled-normal with variance
    /// 2/(fan_in*(1+alpha^2)), BN at identity, PReLU slopes 0.25, FC1
    /// scaled-normal, FC2/FC3 zero so the residual paths start inert.
    /// Each parameter draws from its own name-derived stream, so a
    /// parameter's initial value does not depend on which other
    /// parameters exist.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<ModelWeights<E>> {
        config.validate()?;
        let mut store = ParameterStore::new();
        for (name, shape, trainable) in expected_entries(&config) {
            let tensor = init_tensor::<E>(&name, &shape, seed);
            store.insert(name, tensor, trainable);
        }
        Ok(ModelWeights { config, store })
    }

    /// Read the running statistics pair for a `block{k}.bn{j}` prefix.
    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats<E>> {
        let mean = self.store.get(&format!("{prefix}.running_mean"))?.clone();
        let var = self.store.get(&format!("{prefix}.running_var"))?.clone();
        Ok(RunningStats::from_tensors(mean, var))
    }

    pub fn set_running_stats(&mut self, prefix: &str, stats: RunningStats<E>) -> Result<()> {
        if let (Some(mean), Some(var)) = (stats.mean(), stats.var()) {
            self.store
                .set(&format!("{prefix}.running_mean"), mean.clone())?;
            self.store
                .set(&format!("{prefix}.running_var"), var.clone())?;
        }
        Ok(())
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn count_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Order-independent FNV-1a digest of every entry (names, shapes, and
    /// element bits), used to prove two weight sets identical.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, entry) in self.store.iter() {
            eat(name.as_bytes());
            eat(&[0]);
            for &d in entry.tensor.shape() {
                eat(&(d as u32).to_le_bytes());
            }
            for &v in entry.tensor.data() {
                eat(&v.to_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<F: Scalar>(&self) -> ModelWeights<F> {
        ModelWeights {
            config: self.config,
            store: self.store.cast(),
        }
    }
}

fn init_tensor<E: Scalar>(name: &str, shape: &[usize], seed: u64) -> Tensor<E> {
    let numel: usize = shape.iter().product();
    let mut rng = Prng::derive(seed, name, 0);
    let gauss_fill = |rng: &mut Prng, std: f64| -> Tensor<E> {
        let data: Vec<E> = (0..numel)
            .map(|_| E::from_f64(rng.gauss() * std))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    };
    if name.ends_with("conv1.weight") || name.ends_with("conv2.weight") {
        let fan_in = (shape[1] * shape[2] * shape[3] * shape[4]) as f64;
        let std = (2.0 / (fan_in * (1.0 + PRELU_ALPHA_INIT * PRELU_ALPHA_INIT))).sqrt();
        gauss_fill(&mut rng, std)
    } else if name == "head.fc1.weight" {
        let std = (1.0 / shape[0] as f64).sqrt();
        gauss_fill(&mut rng, std)
    } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
        Tensor::ones(shape)
    } else if name.ends_with(".alpha") {
        Tensor::full(shape, E::from_f64(PRELU_ALPHA_INIT))
    } else {
        // Conv/FC biases, BN beta, running means, and the residual heads
        // FC2/FC3 all start at zero.
        Tensor::zeros(shape)
    }
}

// ── Forward passes ──────────────────────────────────────────────────

fn apply_nonlinearity<E: Scalar>(
    tape: &mut Tape<E>,
    x: TracedValue,
    alpha_name: &str,
    weights: &ModelWeights<E>,
    bound: &BoundParams,
) -> Result<TracedValue> {
    match weights.config.nonlinearity {
        Nonlinearity::Prelu => tape.prelu(x, bound.get(alpha_name)?),
        Nonlinearity::Relu => Ok(tape.relu(x)),
    }
}

fn apply_pooling<E: Scalar>(
    tape: &mut Tape<E>,
    x: TracedValue,
    pooling: Pooling,
) -> Result<TracedValue> {
    match pooling {
        Pooling::Average => tape.avg_pool2(x),
        Pooling::Max => tape.max_pool2(x),
    }
}

/// One building block: two Conv-BN-nonlinearity passes, concatenation
/// with the block input (transformed channels first), then 2x2 pooling.
/// [N,C,T,H,W] -> [N,2C,T,H/2,W/2].
pub fn block_forward<E: Scalar>(
    tape: &mut Tape<E>,
    x: TracedValue,
    k: usize,
    weights: &mut ModelWeights<E>,
    bound: &BoundParams,
    mode: BnMode,
) -> Result<TracedValue> {
    let p = format!("block{k}");
    let mut h = x;
    for half in ["1", "2"] {
        let conv = tape.conv_ct33(
            h,
            bound.get(&format!("{p}.conv{half}.weight"))?,
            bound.get(&format!("{p}.conv{half}.bias"))?,
        )?;
        let bn_prefix = format!("{p}.bn{half}");
        let mut stats = weights.running_stats(&bn_prefix)?;
        let bn = tape.batch_norm(
            conv,
            bound.get(&format!("{bn_prefix}.gamma"))?,
            bound.get(&format!("{bn_prefix}.beta"))?,
            &mut stats,
            mode,
        )?;
        weights.set_running_stats(&bn_prefix, stats)?;
        h = apply_nonlinearity(tape, bn, &format!("{p}.prelu{half}.alpha"), weights, bound)?;
    }
    let cat = tape.concat_channels(h, x)?;
    apply_pooling(tape, cat, weights.config.pooling)
}

/// All blocks in sequence: [N,2,T,S,S] -> [N,C_final,T,2,2].
pub fn backbone_forward<E: Scalar>(
    tape: &mut Tape<E>,
    x: TracedValue,
    weights: &mut ModelWeights<E>,
    bound: &BoundParams,
    mode: BnMode,
) -> Result<TracedValue> {
    let shape = tape.value(x).shape().to_vec();
    let cfg = &weights.config;
    let expect = [
        usize::MAX, // any batch
        2,
        cfg.frames,
        cfg.image_size,
        cfg.image_size,
    ];
    let ok = shape.len() == 5
        && shape[1] == expect[1]
        && shape[2] == expect[2]
        && shape[3] == expect[3]
        && shape[4] == expect[4];
    if !ok {
        return Err(Error::shape(
            "backbone_forward",
            format!(
                "input {shape:?} does not match config (want [n, 2, {}, {}, {}])",
                cfg.frames, cfg.image_size, cfg.image_size
            ),
        ));
    }
    let mut h = x;
    for k in 1..=weights.config.n_blocks {
        h = block_forward(tape, h, k, weights, bound, mode)?;
    }
    Ok(h)
}

/// Split the backbone output per frame and flatten each slice:
/// [N,C,T,2,2] -> T tensors of [N, 4C].
pub fn split_states<E: Scalar>(
    tape: &mut Tape<E>,
    features: TracedValue,
    frames: usize,
) -> Result<Vec<TracedValue>> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 5 || shape[3] != 2 || shape[4] != 2 {
        return Err(Error::shape(
            "split_states",
            format!("expected a [n, c, t, 2, 2] feature map, got {shape:?}"),
        ));
    }
    (0..frames)
        .map(|t| tape.time_slice_flatten(features, t))
        .collect()
}

fn fc<E: Scalar>(
    tape: &mut Tape<E>,
    x: TracedValue,
    name: &str,
    bound: &BoundParams,
) -> Result<TracedValue> {
    tape.fully_connected(
        x,
        bound.get(&format!("{name}.weight"))?,
        bound.get(&format!("{name}.bias"))?,
    )
}

fn head_core<E: Scalar>(
    tape: &mut Tape<E>,
    states: &[TracedValue],
    bound: &BoundParams,
    residual: bool,
) -> Result<TracedValue> {
    let t = states.len();
    if !(1..=3).contains(&t) {
        return Err(Error::Config(format!(
            "head needs 1 to 3 states, got {t}"
        )));
    }
    let mut parts = Vec::new();
    let coords: Vec<TracedValue> = states
        .iter()
        .map(|&s| fc(tape, s, "head.fc1", bound))
        .collect::<Result<_>>()?;
    parts.extend_from_slice(&coords);

    let mut velocities = Vec::new();
    if t >= 2 {
        for i in 0..t - 1 {
            let diff = tape.sub(coords[i + 1], coords[i])?;
            let v = if residual {
                let ds = tape.sub(states[i + 1], states[i])?;
                let res = fc(tape, ds, "head.fc2", bound)?;
                tape.add(diff, res)?
            } else {
                diff
            };
            velocities.push(v);
        }
        parts.extend_from_slice(&velocities);
    }

    if t == 3 {
        let dv = tape.sub(velocities[1], velocities[0])?;
        let a = if residual {
            // s_3 - 2 s_2 + s_1 as a difference of state differences.
            let d1 = tape.sub(states[1], states[0])?;
            let d2 = tape.sub(states[2], states[1])?;
            let dd = tape.sub(d2, d1)?;
            let res = fc(tape, dd, "head.fc3", bound)?;
            tape.add(dv, res)?
        } else {
            dv
        };
        parts.push(a);
    }
    tape.concat_cols(&parts)
}

/// Heads with residual corrections: p_i = FC1(s_i);
/// v_i = (p_{i+1} - p_i) + FC2(s_{i+1} - s_i);
/// a = (v_2 - v_1) + FC3(s_3 - 2 s_2 + s_1). Output [p..., v..., a].
pub fn head_forward<E: Scalar>(
    tape: &mut Tape<E>,
    states: &[TracedValue],
    bound: &BoundParams,
) -> Result<TracedValue> {
    head_core(tape, states, bound, true)
}

/// Plain finite-difference heads: v_i = p_{i+1} - p_i, a = v_2 - v_1.
pub fn head_forward_no_residual<E: Scalar>(
    tape: &mut Tape<E>,
    states: &[TracedValue],
    bound: &BoundParams,
) -> Result<TracedValue> {
    head_core(tape, states, bound, false)
}

/// Full pipeline: backbone, per-frame split, heads.
pub fn forward<E: Scalar>(
    tape: &mut Tape<E>,
    x: TracedValue,
    weights: &mut ModelWeights<E>,
    bound: &BoundParams,
    mode: BnMode,
    residual: bool,
) -> Result<TracedValue> {
    let features = backbone_forward(tape, x, weights, bound, mode)?;
    let states = split_states(tape, features, weights.config.frames)?;
    head_core(tape, &states, bound, residual)
}

// ── Stage transfer ──────────────────────────────────────────────────

/// Grow a T-frame model to more frames: every shared parameter (and
/// running statistic) is copied verbatim; head parameters that do not
/// exist yet start at zero, so new difference paths begin uncorrected.
pub fn transfer_weights<E: Scalar>(
    src: &ModelWeights<E>,
    frames: usize,
) -> Result<ModelWeights<E>> {
    if frames < src.config.frames {
        return Err(Error::Config(format!(
            "cannot transfer from {} frames down to {frames}",
            src.config.frames
        )));
    }
    let dst_config = NetworkConfig {
        frames,
        ..src.config
    };
    let mut dst = ModelWeights::<E>::init(dst_config, 0)?;
    for (name, entry) in src.store.iter() {
        dst.store.set(name, entry.tensor.clone())?;
    }
    Ok(dst)
}

// ── Checkpoint files ────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"PIDW";
const CHECKPOINT_VERSION: u32 = 1;

/// A checkpoint read back from disk.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub weights: ModelWeights<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Completed epochs in the stage this checkpoint belongs to.
    pub epoch: u32,
    pub stage: u32,
}

fn pooling_code(p: Pooling) -> f32 {
    match p {
        Pooling::Average => 0.0,
        Pooling::Max => 1.0,
    }
}

fn nonlinearity_code(n: Nonlinearity) -> f32 {
    match n {
        Nonlinearity::Prelu => 0.0,
        Nonlinearity::Relu => 1.0,
    }
}

fn write_tensor_record<W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    data: &[f32],
    path: &Path,
) -> Result<()> {
    let io = |e| Error::io(path, e);
    w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
    w.write_all(name.as_bytes()).map_err(io)?;
    w.write_all(&[shape.len() as u8]).map_err(io)?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(io)
}

fn read_tensor_record<R: Read>(r: &mut R, path: &Path) -> Result<(String, Tensor<f32>)> {
    let io = |e| Error::io(path, e);
    let mut len2 = [0u8; 2];
    r.read_exact(&mut len2).map_err(io)?;
    let name_len = u16::from_le_bytes(len2) as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf).map_err(io)?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::format(path, "tensor name is not UTF-8".to_string()))?;
    let mut nd = [0u8; 1];
    r.read_exact(&mut nd).map_err(io)?;
    let mut shape = Vec::with_capacity(nd[0] as usize);
    for _ in 0..nd[0] {
        let mut d = [0u8; 4];
        r.read_exact(&mut d).map_err(io)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes).map_err(io)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let tensor = Tensor::from_vec(&shape, data)
        .map_err(|e| Error::format(path, format!("bad tensor {name}: {e}")))?;
    Ok((name, tensor))
}

/// Write weights (with their configuration and epoch/stage counters) and
/// optionally the optimizer state. Every f32 survives bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    weights: &ModelWeights<f32>,
    adam: Option<&AdamState<f32>>,
    epoch: u32,
    stage: u32,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    let n_tensors = weights.store.len() as u32 + 2;
    w.write_all(&n_tensors.to_le_bytes()).map_err(io)?;

    let cfg = &weights.config;
    let config_rec = [
        cfg.image_size as f32,
        cfg.n_blocks as f32,
        cfg.frames as f32,
        pooling_code(cfg.pooling),
        nonlinearity_code(cfg.nonlinearity),
    ];
    write_tensor_record(&mut w, "__meta.config", &[5], &config_rec, path)?;
    write_tensor_record(
        &mut w,
        "__meta.progress",
        &[2],
        &[epoch as f32, stage as f32],
        path,
    )?;
    for (name, entry) in weights.store.iter() {
        write_tensor_record(&mut w, name, entry.tensor.shape(), entry.tensor.data(), path)?;
    }

    if let Some(state) = adam {
        let n = state.slots().len() as u32 * 3;
        w.write_all(&n.to_le_bytes()).map_err(io)?;
        for (name, slot) in state.slots() {
            write_tensor_record(&mut w, &format!("m.{name}"), slot.m.shape(), slot.m.data(), path)?;
            write_tensor_record(&mut w, &format!("v.{name}"), slot.v.shape(), slot.v.data(), path)?;
            write_tensor_record(&mut w, &format!("t.{name}"), &[1], &[slot.t as f32], path)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a checkpoint written by [`save_checkpoint`], validating magic,
/// version, and that the stored names are exactly the configuration's.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            path,
            format!(
                "bad magic {:?}, expected \"PIDW\"",
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    r.read_exact(&mut v4).map_err(|e| Error::io(path, e))?;
    let n_tensors = u32::from_le_bytes(v4);

    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(n_tensors as usize);
    for _ in 0..n_tensors {
        tensors.push(read_tensor_record(&mut r, path)?);
    }
    let take = |name: &str, tensors: &mut Vec<(String, Tensor<f32>)>| -> Result<Tensor<f32>> {
        let idx = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format(path, format!("missing {name} record")))?;
        Ok(tensors.remove(idx).1)
    };
    let config_rec = take("__meta.config", &mut tensors)?;
    let progress = take("__meta.progress", &mut tensors)?;
    if config_rec.numel() != 5 || progress.numel() != 2 {
        return Err(Error::format(path, "malformed meta records".to_string()));
    }
    let cd = config_rec.data();
    let config = NetworkConfig {
        image_size: cd[0] as usize,
        n_blocks: cd[1] as usize,
        frames: cd[2] as usize,
        pooling: if cd[3] == 0.0 {
            Pooling::Average
        } else {
            Pooling::Max
        },
        nonlinearity: if cd[4] == 0.0 {
            Nonlinearity::Prelu
        } else {
            Nonlinearity::Relu
        },
    };
    config
        .validate()
        .map_err(|e| Error::format(path, format!("stored config invalid: {e}")))?;

    let mut store = ParameterStore::new();
    let expected = expected_entries(&config);
    if tensors.len() != expected.len() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint has {} tensors, configuration needs {}",
                tensors.len(),
                expected.len()
            ),
        ));
    }
    for (name, shape, trainable) in expected {
        let idx = tensors
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        let (_, tensor) = tensors.remove(idx);
        if tensor.shape() != shape.as_slice() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                ),
            ));
        }
        store.insert(name, tensor, trainable);
    }

    // Optional optimizer section: absence is EOF right here.
    let mut adam = None;
    let mut n4 = [0u8; 4];
    match r.read_exact(&mut n4) {
        Ok(()) => {
            let n = u32::from_le_bytes(n4);
            let mut records = Vec::with_capacity(n as usize);
            for _ in 0..n {
                records.push(read_tensor_record(&mut r, path)?);
            }
            let mut state = AdamState::new();
            let mut by_name: std::collections::BTreeMap<String, (Option<Tensor<f32>>, Option<Tensor<f32>>, Option<u64>)> =
                Default::default();
            for (name, tensor) in records {
                let (kind, param) = name.split_once('.').ok_or_else(|| {
                    Error::format(path, format!("malformed optimizer record {name}"))
                })?;
                let slot = by_name.entry(param.to_string()).or_default();
                match kind {
                    "m" => slot.0 = Some(tensor),
                    "v" => slot.1 = Some(tensor),
                    "t" => slot.2 = Some(tensor.data()[0] as u64),
                    _ => {
                        return Err(Error::format(
                            path,
                            format!("unknown optimizer record kind {kind}"),
                        ))
                    }
                }
            }
            for (param, (m, v, t)) in by_name {
                let (m, v, t) = match (m, v, t) {
                    (Some(m), Some(v), Some(t)) => (m, v, t),
                    _ => {
                        return Err(Error::format(
                            path,
                            format!("incomplete optimizer state for {param}"),
                        ))
                    }
                };
                state.insert_slot(param, AdamSlot { m, v, t });
            }
            adam = Some(state);
        }
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {}
        Err(e) => return Err(Error::io(path, e)),
    }

    Ok(LoadedCheckpoint {
        weights: ModelWeights { config, store },
        adam,
        epoch: progress.data()[0] as u32,
        stage: progress.data()[1] as u32,
    })
}
