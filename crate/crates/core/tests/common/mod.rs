//! Oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use compgan::config::ModelConfig;
use compgan::discriminator::Discriminator;
use compgan::generator::Generator;
use compgan::nn::convert_params;
use compgan::schema::SemanticSchema;

/// Per-pixel fusion computed with plain scalar loops.
///
/// `depths[k]` and `features[k][c]` describe one pixel. Returns the
/// softmax mask, the modified mask and the fused feature vector.
pub fn fuse_pixel(depths: &[f64], transparent: &[bool], features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let softmax_over = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
        let top = (0..depths.len())
            .filter(|&k| keep(k))
            .map(|k| depths[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..depths.len())
            .map(|k| if keep(k) { (depths[k] - top).exp() } else { 0.0 })
            .collect();
        let total: f64 = e.iter().sum();
        e.iter().map(|v| v / total).collect()
    };
    let m = softmax_over(&|_| true);
    let opaque = softmax_over(&|k| !transparent[k]);
    let mt: Vec<f64> = (0..depths.len())
        .map(|k| if transparent[k] { m[k] } else { opaque[k] })
        .collect();
    let channels = features[0].len();
    let fused = (0..channels)
        .map(|c| (0..depths.len()).map(|k| mt[k] * features[k][c]).sum())
        .collect();
    (m, mt, fused)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-scale, scale]` as an f64 tensor.
pub fn uniform(rng: &mut impl Rng, shape: &[i64], scale: f64) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::from_slice(&v).reshape(shape)
}

/// The smallest generator the config rules allow: 16x16 output from a
/// 16x16 coarse grid.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_resolution: 16,
        coarse_resolution: 16,
        latent_dim: 8,
        mapping_layers: 2,
        local_hidden_dim: 8,
        local_feature_dim: 4,
        local_layers: 4,
        base_layers: 1,
        shape_layers: 2,
        texture_layers: 1,
        fourier_channels: 8,
        render_channel_base: 64,
        render_channel_max: 8,
        disc_channel_base: 32,
        disc_channel_max: 8,
        batch_size: 4,
        ..ModelConfig::default()
    }
}

pub fn tiny_generator(seed: u64, schema: SemanticSchema) -> Generator {
    Generator::new(&mut rng(seed), tiny_config(), schema).unwrap()
}

/// A two-block discriminator on 8x8 inputs with f64 weights.
pub fn tiny_discriminator_f64(seed: u64, num_classes: usize) -> Discriminator {
    let config = ModelConfig {
        image_resolution: 8,
        disc_channel_base: 32,
        disc_channel_max: 4,
        ..ModelConfig::default()
    };
    let d = Discriminator::new(&mut rng(seed), &config, num_classes);
    convert_params(&d, Kind::Double);
    d
}

/// Central finite-difference gradient of `f` at `x`, entry by entry.
pub fn fd_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let flat = x.detach().reshape([-1]).copy();
    let n = flat.size()[0];
    let mut grad = vec![0.0f64; n as usize];
    for (i, g) in grad.iter_mut().enumerate() {
        let base = flat.double_value(&[i as i64]);
        let eval = |v: f64| {
            let y = flat.copy();
            let _ = y.get(i as i64).fill_(v);
            f(&y.reshape(x.size()))
        };
        *g = (eval(base + h) - eval(base - h)) / (2.0 * h);
    }
    Tensor::from_slice(&grad).reshape(x.size())
}

/// `|a - b| / |b|` in the Frobenius norm.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = (a - b).norm().double_value(&[]);
    diff / b.norm().double_value(&[]).max(1e-300)
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).abs().max().double_value(&[])
}

/// Autograd against finite differences for one R1 branch of an 8x8
/// discriminator. Returns the relative errors of the input gradient and of
/// the penalty value.
pub fn r1_errors(branch: compgan::discriminator::R1Branch, h: f64) -> (f64, f64) {
    use compgan::discriminator::{r1_penalty, R1Branch};
    let k = 4;
    let d = tiny_discriminator_f64(3, k);
    let mut g = rng(4);
    let image = uniform(&mut g, &[2, 3, 8, 8], 1.0);
    let seg = uniform(&mut g, &[2, k as i64, 8, 8], 1.0).softmax(1, Kind::Double);
    let score_sum = |img: &Tensor, s: &Tensor| d.forward(img, Some(s)).unwrap().sum(Kind::Double).double_value(&[]);

    let penalty = r1_penalty(|i, s| d.forward(i, Some(s)), &image, &seg, branch)
        .unwrap()
        .double_value(&[]);
    let (input, fd) = match branch {
        R1Branch::Image => (&image, fd_gradient(|x| score_sum(x, &seg), &image, h)),
        R1Branch::Segmentation => (&seg, fd_gradient(|x| score_sum(&image, x), &seg, h)),
    };
    let leaf = input.detach().set_requires_grad(true);
    let scores = match branch {
        R1Branch::Image => d.forward(&leaf, Some(&seg)),
        R1Branch::Segmentation => d.forward(&image, Some(&leaf)),
    }
    .unwrap();
    let grad = Tensor::run_backward(&[scores.sum(Kind::Double)], &[&leaf], false, false).remove(0);
    let batch = input.size()[0] as f64;
    let oracle = 0.5 * fd.square().sum(Kind::Double).double_value(&[]) / batch;
    (relative_error(&grad, &fd), (penalty - oracle).abs() / oracle)
}

/// `J^T y` from autograd and from finite differences of `<image, y>` on the
/// tiny generator in f64, with only `active` classes rendered. Both are
/// `[B, S, D]`.
pub fn path_products(active: &[usize], h: f64) -> (Tensor, Tensor) {
    use compgan::coords::GridTransform;
    use compgan::nn::randn;
    use compgan::train::path_jacobian_product;
    let g = tiny_generator(5, SemanticSchema::toy());
    convert_params(&g, Kind::Double);
    tch::no_grad(|| {
        let b = g.fourier.b.to_kind(Kind::Double);
        g.fourier.b.shallow_clone().set_data(&b);
    });
    let mut r = rng(6);
    let slots = randn(&mut r, &[2, g.num_slots() as i64, g.config.latent_dim as i64]).to_kind(Kind::Double);
    let res = g.config.image_resolution as i64;
    let noise = randn(&mut r, &[2, 3, res, res]).to_kind(Kind::Double);
    let scale = 1.0 / (res as f64);
    let image_of = |s: &Tensor| g.synthesize(s, GridTransform::IDENTITY, active).unwrap().render.image;

    let leaf = slots.detach().set_requires_grad(true);
    let jt_y = path_jacobian_product(&image_of(&leaf), &leaf, &noise);
    let fd = tch::no_grad(|| {
        fd_gradient(
            |s| (image_of(s) * &noise * scale).sum(Kind::Double).double_value(&[]),
            &slots,
            h,
        )
    });
    (jt_y, fd)
}

/// Slot indices of the texture codes of classes `1..k`.
pub fn foreground_texture_slots(k: usize) -> Tensor {
    Tensor::from_slice(&(1..k as i64).map(|c| 2 * c + 2).collect::<Vec<_>>())
}
