//! Shared fixtures for the integration suites.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slimnet::model::{ConvParams, LayerSpec, Model, ModelBuilder, Shape};
use slimnet::serialize::save_model;
use slimnet::tensor::Tensor4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(dims: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor4 {
    let n = dims.0 * dims.1 * dims.2 * dims.3;
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor4::new(dims, data).unwrap()
}

/// Random kernel scaled by 1/sqrt(fan-in), the usual initialization scale.
/// Keeps activations O(1) through deep chains so float noise stays far
/// below the equivalence tolerances.
pub fn kernel_tensor(dims: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor4 {
    let fan_in = (dims.1 * dims.2 * dims.3) as f32;
    let scale = fan_in.sqrt().recip();
    let n = dims.0 * dims.1 * dims.2 * dims.3;
    let data: Vec<f32> =
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * scale).collect();
    Tensor4::new(dims, data).unwrap()
}

/// Kernel whose filter-wise flattening has a geometrically decaying
/// spectrum (singular values ~ `ratio^j`), like trained layers with
/// strong low-rank structure. Scaled so activations stay O(1).
pub fn spectral_tensor(
    dims: (usize, usize, usize, usize),
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor4 {
    let rows = dims.0;
    let cols = dims.1 * dims.2 * dims.3;
    let mut m = vec![0.0f64; rows * cols];
    let unit = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    };
    for j in 0..rows.min(cols) {
        let g = unit(rows, rng);
        let h = unit(cols, rng);
        let s = ratio.powi(j as i32);
        for r in 0..rows {
            for c in 0..cols {
                m[r * cols + c] += s * g[r] * h[c];
            }
        }
    }
    // Scale so the map roughly preserves activation variance under ReLU
    // (He-style): sum of squared row norms = 2 * rows.
    let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let scale = (2.0 * rows as f64).sqrt() / frob;
    let data: Vec<f32> = m.into_iter().map(|x| (x * scale) as f32).collect();
    Tensor4::new(dims, data).unwrap()
}

/// Small per-channel bias that stays well below unit activations.
pub fn bias_tensor(c: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
    let data: Vec<f32> =
        (0..c).map(|_| rng.sample::<f32, _>(StandardNormal) * 0.1).collect();
    Tensor4::new((c, 1, 1, 1), data).unwrap()
}

pub fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::vector((0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

/// Strictly positive per-channel values (batch-norm variances).
pub fn positive_vector(n: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::vector((0..n).map(|_| rng.gen_range(0.5f32..2.0)).collect()).unwrap()
}

/// input → conv(+bias) → batchnorm → scale: the classic fold-away chain.
pub fn conv_bn_scale_model(seed: u64) -> Model {
    let mut r = rng(seed);
    let p = ConvParams::square(5, 3, 3, 1, 1);
    ModelBuilder::new(Shape::new(3, 8, 8))
        .tensor("w", kernel_tensor(p.weight_dims(), &mut r))
        .tensor("b", random_tensor((5, 1, 1, 1), &mut r))
        .tensor("mu", random_vector(5, &mut r))
        .tensor("var", positive_vector(5, &mut r))
        .tensor("alpha", random_vector(5, &mut r))
        .tensor("beta", random_vector(5, &mut r))
        .node("conv", LayerSpec::Convolution(p), &["data"], &["w"], Some("b"))
        .node("bn", LayerSpec::BatchNorm { eps: 1e-5 }, &["conv_out"], &["mu", "var"], None)
        .node("scale", LayerSpec::Scale, &["bn_out"], &["alpha", "beta"], None)
        .build()
}

/// A randomized model exercising all three lossless patterns:
/// conv+bn+scale folding, batchnorm-before-conv folding, and the merge of
/// an adjacent 1×1 convolution.
pub fn fusable_model(seed: u64) -> Model {
    let mut r = rng(seed);
    let c0 = r.gen_range(2..=4);
    let c1 = r.gen_range(3..=6);
    let c2 = r.gen_range(3..=6);
    let c3 = r.gen_range(4..=6);
    let c4 = r.gen_range(2..=3); // < c3 so the 1×1 merge passes its cost gate
    let h = r.gen_range(6..=9);
    let w = r.gen_range(6..=9);
    // conv2 is unpadded: the batch-norm fold into a following convolution
    // is only lossless when padded zeros never enter the folded transform.
    let p1 = ConvParams::square(c1, c0, 3, 1, 1);
    let p2 = ConvParams::square(c2, c1, 3, 1, 0);
    let p3 = ConvParams::square(c3, c2, 3, 1, 1);
    let p4 = ConvParams::square(c4, c3, 1, 1, 0);
    ModelBuilder::new(Shape::new(c0, h, w))
        .tensor("w1", kernel_tensor(p1.weight_dims(), &mut r))
        .tensor("b1", random_tensor((c1, 1, 1, 1), &mut r))
        .tensor("mu1", random_vector(c1, &mut r))
        .tensor("var1", positive_vector(c1, &mut r))
        .tensor("alpha1", random_vector(c1, &mut r))
        .tensor("beta1", random_vector(c1, &mut r))
        .tensor("mu2", random_vector(c1, &mut r))
        .tensor("var2", positive_vector(c1, &mut r))
        .tensor("w2", kernel_tensor(p2.weight_dims(), &mut r))
        .tensor("b2", random_tensor((c2, 1, 1, 1), &mut r))
        .tensor("w3", kernel_tensor(p3.weight_dims(), &mut r))
        .tensor("w4", kernel_tensor(p4.weight_dims(), &mut r))
        .tensor("b4", random_tensor((c4, 1, 1, 1), &mut r))
        .node("conv1", LayerSpec::Convolution(p1), &["data"], &["w1"], Some("b1"))
        .node("bn1", LayerSpec::BatchNorm { eps: 1e-5 }, &["conv1_out"], &["mu1", "var1"], None)
        .node("scale1", LayerSpec::Scale, &["bn1_out"], &["alpha1", "beta1"], None)
        .node("relu1", LayerSpec::ReLU, &["scale1_out"], &[], None)
        .node("bn2", LayerSpec::BatchNorm { eps: 1e-5 }, &["relu1_out"], &["mu2", "var2"], None)
        .node("conv2", LayerSpec::Convolution(p2), &["bn2_out"], &["w2"], Some("b2"))
        .node("relu2", LayerSpec::ReLU, &["conv2_out"], &[], None)
        .node("conv3", LayerSpec::Convolution(p3), &["relu2_out"], &["w3"], None)
        .node("conv4", LayerSpec::Convolution(p4), &["conv3_out"], &["w4"], Some("b4"))
        .build()
}

/// Fixed six-representation-layer CNN used by the p-sweep and invariant
/// suites: five convolutions (two strided) and a final fully-connected
/// classifier head.
pub fn six_layer_cnn(seed: u64) -> Model {
    let mut r = rng(seed);
    let p1 = ConvParams::square(8, 3, 3, 1, 1);
    let p2 = ConvParams::square(12, 8, 3, 1, 1);
    let p3 = ConvParams::square(16, 12, 3, 2, 1);
    let p4 = ConvParams::square(16, 16, 3, 1, 1);
    let p5 = ConvParams::square(24, 16, 3, 2, 1);
    ModelBuilder::new(Shape::new(3, 16, 16))
        .tensor("w1", spectral_tensor(p1.weight_dims(), 0.7, &mut r))
        .tensor("b1", bias_tensor(8, &mut r))
        .tensor("w2", spectral_tensor(p2.weight_dims(), 0.7, &mut r))
        .tensor("b2", bias_tensor(12, &mut r))
        .tensor("w3", spectral_tensor(p3.weight_dims(), 0.7, &mut r))
        .tensor("w4", spectral_tensor(p4.weight_dims(), 0.7, &mut r))
        .tensor("w5", spectral_tensor(p5.weight_dims(), 0.7, &mut r))
        .tensor("wf", spectral_tensor((10, 24 * 4 * 4, 1, 1), 0.7, &mut r))
        .tensor("bf", bias_tensor(10, &mut r))
        .node("conv1", LayerSpec::Convolution(p1), &["data"], &["w1"], Some("b1"))
        .node("relu1", LayerSpec::ReLU, &["conv1_out"], &[], None)
        .node("conv2", LayerSpec::Convolution(p2), &["relu1_out"], &["w2"], Some("b2"))
        .node("relu2", LayerSpec::ReLU, &["conv2_out"], &[], None)
        .node("conv3", LayerSpec::Convolution(p3), &["relu2_out"], &["w3"], None)
        .node("relu3", LayerSpec::ReLU, &["conv3_out"], &[], None)
        .node("conv4", LayerSpec::Convolution(p4), &["relu3_out"], &["w4"], None)
        .node("relu4", LayerSpec::ReLU, &["conv4_out"], &[], None)
        .node("conv5", LayerSpec::Convolution(p5), &["relu4_out"], &["w5"], None)
        .node("relu5", LayerSpec::ReLU, &["conv5_out"], &[], None)
        .node(
            "fc",
            LayerSpec::FullyConnected { c_i: 24 * 4 * 4, c_o: 10 },
            &["relu5_out"],
            &["wf"],
            Some("bf"),
        )
        .build()
}

/// Writes a model as `<stem>.json` + `<stem>.bin` under `dir`.
pub fn write_model(dir: &Path, stem: &str, m: &Model) -> (PathBuf, PathBuf) {
    let (manifest, weights) = save_model(m);
    let mp = dir.join(format!("{stem}.json"));
    let wp = dir.join(format!("{stem}.bin"));
    fs::write(&mp, manifest).unwrap();
    fs::write(&wp, weights).unwrap();
    (mp, wp)
}
