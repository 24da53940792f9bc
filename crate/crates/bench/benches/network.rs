//! Wall-clock benchmarks of the numeric hot paths: one convolution, one
//! building block, full-resolution inference, and a complete training
//! step. Run with `cargo bench -p pidcnn-bench`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use pidcnn::network::{block_forward, forward, ModelWeights, NetworkConfig};
use pidcnn::rng::Prng;
use pidcnn::tape::{BnMode, Tape};
use pidcnn::tensor::Tensor;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = Prng::seed(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.unit() as f32).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// A single mid-network convolution: 16 -> 16 channels at 32x32.
fn bench_conv(c: &mut Criterion) {
    let x = rand_tensor(&[1, 16, 1, 32, 32], 1);
    let w = rand_tensor(&[16, 16, 1, 3, 3], 2);
    let b = rand_tensor(&[16], 3);
    c.bench_function("conv 16ch 32x32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let ids = [tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone())];
            let y = tape.conv_ct33(ids[0], ids[1], ids[2]).unwrap();
            black_box(tape.value(y).data()[0])
        })
    });
}

/// One building block (two conv-bn-prelu layers, concatenation, pool)
/// on a 64x64 single-frame input.
fn bench_block(c: &mut Criterion) {
    let config = NetworkConfig::for_image_size(64, 1).unwrap();
    let mut weights: ModelWeights<f32> = ModelWeights::init(config, 4).unwrap();
    let x = rand_tensor(&[1, 2, 1, 64, 64], 5);
    c.bench_function("block1 64x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let bound = weights.store.bind(&mut tape);
            let y = block_forward(&mut tape, xid, 1, &mut weights, &bound, BnMode::Eval).unwrap();
            black_box(tape.value(y).data()[0])
        })
    });
}

/// One full-resolution measurement: a 3-frame 256x256 binocular input
/// through all 7 blocks and the heads.
fn bench_inference(c: &mut Criterion) {
    let config = NetworkConfig::standard(3);
    let mut weights: ModelWeights<f32> = ModelWeights::init(config, 6).unwrap();
    let x = rand_tensor(&[1, 2, 3, 256, 256], 7);
    c.bench_function("inference 256x256 T=3", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let bound = weights.store.bind(&mut tape);
            let y = forward(&mut tape, xid, &mut weights, &bound, BnMode::Eval, true).unwrap();
            black_box(tape.value(y).data()[0])
        })
    });
}

/// A full training step at desk scale: forward, loss, backward, and
/// gradient collection for a batch of 8 single-frame 64x64 inputs.
fn bench_train_step(c: &mut Criterion) {
    let config = NetworkConfig::for_image_size(64, 1).unwrap();
    let mut weights: ModelWeights<f32> = ModelWeights::init(config, 8).unwrap();
    let x = rand_tensor(&[8, 2, 1, 64, 64], 9);
    let target = rand_tensor(&[8, 3], 10);
    c.bench_function("train step 64x64 batch 8", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let bound = weights.store.bind(&mut tape);
            let y = forward(&mut tape, xid, &mut weights, &bound, BnMode::Train, true).unwrap();
            let loss = tape.mse_loss(y, &target).unwrap();
            tape.backward(loss).unwrap();
            black_box(bound.collect_grads(&tape).len())
        })
    });
}

criterion_group!(benches, bench_conv, bench_block, bench_inference, bench_train_step);
criterion_main!(benches);
