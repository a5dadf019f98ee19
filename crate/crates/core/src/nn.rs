//! Layer primitives shared by the generator and the discriminator.
//!
//! All weights use the equalized learning-rate parameterization: they are
//! stored as unit-variance samples and rescaled by `1/sqrt(fan_in)` at run
//! time.

use rand::Rng;
use rand_distr::StandardNormal;
use tch::{Kind, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;

/// Parameters are initialized from a seeded Rust RNG so that models are
/// reproducible independently of libtorch's global generator.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[i64]) -> Tensor {
    let n: i64 = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_slice(&values).reshape(shape)
}

pub fn param(t: Tensor) -> Tensor {
    t.set_requires_grad(true)
}

pub fn full(shape: &[i64], value: f64) -> Tensor {
    Tensor::full(shape, value, (Kind::Float, tch::Device::Cpu))
}

/// Leaky ReLU with the `sqrt(2)` gain that keeps activations unit-variance.
pub fn lrelu(x: &Tensor) -> Tensor {
    let slope = Tensor::from(LRELU_SLOPE).to_kind(x.kind());
    x.prelu(&slope) * std::f64::consts::SQRT_2
}

/// Bilinear 2x upsampling (half-pixel centers).
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.size()[2], x.size()[3]);
    x.upsample_bilinear2d([2 * h, 2 * w], false, None, None)
}

/// Repeated 2x bilinear upsampling until the map is `size` wide.
pub fn upsample_to(x: &Tensor, size: i64) -> Tensor {
    let mut out = x.shallow_clone();
    while out.size()[3] < size {
        out = upsample2(&out);
    }
    out
}

/// 2x2 average pooling.
pub fn downsample2(x: &Tensor) -> Tensor {
    x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>)
}

/// Repeated 2x2 average pooling until the map is `size` wide.
pub fn downsample_to(x: &Tensor, size: i64) -> Tensor {
    let mut out = x.shallow_clone();
    while out.size()[3] > size {
        out = downsample2(&out);
    }
    out
}

/// Named parameter access used by optimizers, EMA and checkpoints.
pub trait Parameterized {
    /// Appends `(name, tensor)` pairs; the tensors share storage with the
    /// module.
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully connected layer `y = x W^T * gain + b * lr_mul`.
#[derive(Debug)]
pub struct EqualLinear {
    pub weight: Tensor,
    pub bias: Tensor,
    weight_gain: f64,
    lr_mul: f64,
}

impl EqualLinear {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_dim: i64,
        out_dim: i64,
        bias_init: f64,
        lr_mul: f64,
    ) -> Self {
        Self {
            weight: param(randn(rng, &[out_dim, in_dim]) / lr_mul),
            bias: param(full(&[out_dim], bias_init / lr_mul)),
            weight_gain: lr_mul / (in_dim as f64).sqrt(),
            lr_mul,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&(&self.weight * self.weight_gain).tr()) + &self.bias * self.lr_mul
    }
}

impl Parameterized for EqualLinear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.shallow_clone()));
        out.push((join(prefix, "bias"), self.bias.shallow_clone()));
    }
}

/// Stride-1 "same" convolution with an optional bias.
#[derive(Debug)]
pub struct EqualConv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    weight_gain: f64,
    padding: i64,
}

impl EqualConv2d {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_ch: i64, out_ch: i64, kernel: i64, bias: bool) -> Self {
        Self {
            weight: param(randn(rng, &[out_ch, in_ch, kernel, kernel])),
            bias: bias.then(|| param(Tensor::zeros([out_ch], (Kind::Float, tch::Device::Cpu)))),
            weight_gain: 1.0 / ((in_ch * kernel * kernel) as f64).sqrt(),
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(
            &(&self.weight * self.weight_gain),
            self.bias.as_ref(),
            [1, 1],
            [self.padding, self.padding],
            [1, 1],
            1,
        )
    }
}

impl Parameterized for EqualConv2d {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.shallow_clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.shallow_clone()));
        }
    }
}

/// Copies every parameter of `src` into the matching parameter of `dst`.
pub fn copy_params(dst: &impl Parameterized, src: &impl Parameterized) {
    tch::no_grad(|| {
        for ((dn, mut d), (sn, s)) in dst.named_params().into_iter().zip(src.named_params()) {
            debug_assert_eq!(dn, sn);
            d.copy_(&s);
        }
    });
}

/// Converts every parameter of `module` to `kind` in place.
pub fn convert_params(module: &impl Parameterized, kind: Kind) {
    tch::no_grad(|| {
        for (_, mut p) in module.named_params() {
            let converted = p.to_kind(kind);
            p.set_data(&converted);
        }
    });
}
