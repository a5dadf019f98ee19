//! The bank of per-class local generators.
//!
//! Each local generator is a pointwise MLP over Fourier features whose hidden
//! layers are modulated by the base code (first block), the class's shape
//! code (second block) and its texture code (third block). The K generators
//! are stored as stacked tensors with a leading class axis and evaluated
//! together with batched matrix products; no operation mixes classes or
//! pixels.

use rand::Rng;
use tch::{Kind, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent::{shape_slot, texture_slot, BASE_SLOT};
use crate::nn::{full, join, lrelu, param, randn, Parameterized};

/// Which code modulates a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Base,
    Shape,
    Texture,
}

/// Per-class feature and pseudo-depth maps at coarse resolution.
#[derive(Debug)]
pub struct LocalOutputs {
    /// `[B, K', C, H, W]`.
    pub features: Tensor,
    /// `[B, K', H, W]`; the background entry is exactly zero.
    pub depths: Tensor,
    /// Class ids of the K' evaluated generators, in order.
    pub classes: Vec<usize>,
}

/// K stacked linear maps `y_k = x_k W_k^T * gain + b_k`.
#[derive(Debug)]
struct StackedLinear {
    weight: Tensor,
    bias: Tensor,
    gain: f64,
}

impl StackedLinear {
    fn new<R: Rng + ?Sized>(rng: &mut R, k: i64, in_dim: i64, out_dim: i64, bias_init: f64) -> Self {
        Self {
            weight: param(randn(rng, &[k, out_dim, in_dim])),
            bias: param(full(&[k, out_dim], bias_init)),
            gain: 1.0 / (in_dim as f64).sqrt(),
        }
    }

    fn select(&self, idx: &Tensor) -> (Tensor, Tensor) {
        (
            self.weight.index_select(0, idx) * self.gain,
            self.bias.index_select(0, idx),
        )
    }

    /// `x` is `[N, K', M, in]`; returns `[N, K', M, out]`.
    fn forward(&self, x: &Tensor, idx: &Tensor) -> Tensor {
        let (w, b) = self.select(idx);
        x.matmul(&w.transpose(1, 2)) + b.unsqueeze(1)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.shallow_clone()));
        out.push((join(prefix, "bias"), self.bias.shallow_clone()));
    }
}

/// Weight-demodulated 1x1 convolution with its style affine.
#[derive(Debug)]
struct ModulatedLayer {
    affine: StackedLinear,
    conv: StackedLinear,
    block: Block,
}

impl ModulatedLayer {
    /// `x` is `[N, K', P, in]` and `w` is `[B, K', D]`.
    fn forward(&self, x: &Tensor, w: &Tensor, idx: &Tensor) -> Tensor {
        let styles = self.affine.forward(&w.unsqueeze(2), idx).squeeze_dim(2); // [B, K', in]
        let (weight, bias) = self.conv.select(idx); // [K', out, in]
        let modulated = weight.unsqueeze(0) * styles.unsqueeze(2); // [B, K', out, in]
        let demod = (modulated.square().sum_dim_intlist(&[3i64][..], false, None::<Kind>) + 1e-8).rsqrt();
        // Folding both scalings into the per-sample weight keeps the
        // elementwise work off the [B, K', P, C] activations.
        let folded = modulated * demod.unsqueeze(3);
        lrelu(&(x.matmul(&folded.transpose(2, 3)) + bias.unsqueeze(1)))
    }
}

#[derive(Debug)]
pub struct LocalGeneratorBank {
    input: StackedLinear,
    layers: Vec<ModulatedLayer>,
    to_depth: StackedLinear,
    to_feat: StackedLinear,
    num_classes: usize,
    feature_dim: usize,
    fourier_channels: usize,
    latent_dim: usize,
}

impl LocalGeneratorBank {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: &ModelConfig, num_classes: usize) -> Self {
        let k = num_classes as i64;
        let h = config.local_hidden_dim as i64;
        let d = config.latent_dim as i64;
        let input = StackedLinear::new(rng, k, config.fourier_channels as i64, h, 0.0);
        let layers = (0..config.local_layers)
            .map(|i| {
                let block = if i < config.base_layers {
                    Block::Base
                } else if i < config.depth_tap_layer() {
                    Block::Shape
                } else {
                    Block::Texture
                };
                ModulatedLayer {
                    affine: StackedLinear::new(rng, k, d, h, 1.0),
                    conv: StackedLinear::new(rng, k, h, h, 0.0),
                    block,
                }
            })
            .collect();
        Self {
            input,
            layers,
            to_depth: StackedLinear::new(rng, k, h, 1, 0.0),
            to_feat: StackedLinear::new(rng, k, h, config.local_feature_dim as i64, 0.0),
            num_classes,
            feature_dim: config.local_feature_dim,
            fourier_channels: config.fourier_channels,
            latent_dim: config.latent_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Runs every class's generator.
    pub fn forward_all(&self, encoding: &Tensor, slots: &Tensor) -> Result<LocalOutputs> {
        let classes: Vec<usize> = (0..self.num_classes).collect();
        self.forward(encoding, slots, &classes)
    }

    /// Runs the generators of `classes` (strictly increasing ids).
    ///
    /// `encoding` is `[1 or B, F, H, W]`; `slots` holds the latent bundles as
    /// `[B, 1 + 2K, D]`.
    pub fn forward(&self, encoding: &Tensor, slots: &Tensor, classes: &[usize]) -> Result<LocalOutputs> {
        let es = encoding.size();
        let ss = slots.size();
        if es.len() != 4 || es[1] != self.fourier_channels as i64 {
            return Err(Error::Shape(format!(
                "encoding must be [N, {}, H, W], got {es:?}",
                self.fourier_channels
            )));
        }
        let expected_slots = (1 + 2 * self.num_classes) as i64;
        if ss.len() != 3 || ss[1] != expected_slots || ss[2] != self.latent_dim as i64 {
            return Err(Error::Shape(format!(
                "latent slots must be [B, {expected_slots}, {}], got {ss:?}",
                self.latent_dim
            )));
        }
        if es[0] != 1 && es[0] != ss[0] {
            return Err(Error::Shape(format!(
                "encoding batch {} does not match latent batch {}",
                es[0], ss[0]
            )));
        }
        if classes.is_empty() {
            return Err(Error::InvalidArgument("no classes to evaluate".into()));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::UnknownClass(bad));
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("class ids must be strictly increasing".into()));
        }

        let (b, h, w) = (ss[0], es[2], es[3]);
        let kk = classes.len() as i64;
        let idx = Tensor::from_slice(&classes.iter().map(|&c| c as i64).collect::<Vec<_>>());
        let slot_index = |f: fn(usize) -> usize| {
            Tensor::from_slice(&classes.iter().map(|&c| f(c) as i64).collect::<Vec<_>>())
        };
        let base = slots
            .select(1, BASE_SLOT as i64)
            .unsqueeze(1)
            .expand([b, kk, ss[2]], false);
        let shape = slots.index_select(1, &slot_index(shape_slot));
        let texture = slots.index_select(1, &slot_index(texture_slot));

        // [N, 1, P, F]
        let pixels = encoding.flatten(2, 3).transpose(1, 2).unsqueeze(1);
        let mut x = self.input.forward(&pixels, &idx);
        let tap = self.layers.iter().rposition(|l| l.block == Block::Shape).unwrap_or(0);
        let mut depth = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let code = match layer.block {
                Block::Base => &base,
                Block::Shape => &shape,
                Block::Texture => &texture,
            };
            x = layer.forward(&x, code, &idx);
            if i == tap {
                depth = Some(self.to_depth.forward(&x, &idx));
                x = self.stop_gradient(&x, classes);
            }
        }
        let depth = depth.expect("local generator has a shape block");

        let is_background = Tensor::from_slice(&classes.iter().map(|&c| c == 0).collect::<Vec<_>>())
            .reshape([1, kk, 1, 1]);
        let zero = Tensor::from(0f32);
        // [B, K', P, 1] -> [B, K', H, W]
        let depths = zero
            .where_self(&is_background, &depth)
            .squeeze_dim(3)
            .reshape([b, kk, h, w]);
        let features = self
            .to_feat
            .forward(&x, &idx)
            .transpose(2, 3)
            .reshape([b, kk, self.feature_dim as i64, h, w]);
        Ok(LocalOutputs {
            features,
            depths,
            classes: classes.to_vec(),
        })
    }

    /// Detaches the shape-block activations entering the texture block for
    /// every class except the background.
    fn stop_gradient(&self, x: &Tensor, classes: &[usize]) -> Tensor {
        if classes.first() != Some(&0) {
            return x.detach();
        }
        let bg = x.narrow(1, 0, 1);
        let rest = x.narrow(1, 1, classes.len() as i64 - 1).detach();
        Tensor::cat(&[bg, rest], 1)
    }

    /// Names of the parameters that belong to the shape block.
    pub fn shape_block_param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.block == Block::Shape {
                for part in ["affine", "conv"] {
                    for t in ["weight", "bias"] {
                        out.push(format!("layers.{i}.{part}.{t}"));
                    }
                }
            }
        }
        out
    }
}

impl Parameterized for LocalGeneratorBank {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.input.collect(&join(prefix, "input"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layers.{i}"));
            layer.affine.collect(&join(&p, "affine"), out);
            layer.conv.collect(&join(&p, "conv"), out);
        }
        self.to_depth.collect(&join(prefix, "to_depth"), out);
        self.to_feat.collect(&join(prefix, "to_feat"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::{CoordGrid, FourierFeatures, GridTransform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (LocalGeneratorBank, Tensor, Tensor) {
        let config = ModelConfig {
            latent_dim: 8,
            local_hidden_dim: 6,
            local_feature_dim: 5,
            fourier_channels: 8,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = LocalGeneratorBank::new(&mut rng, &config, 3);
        let ff = FourierFeatures::new(&mut rng, 8, 1.0).unwrap();
        let enc = ff.encode(&CoordGrid::new(4, 5, GridTransform::IDENTITY).unwrap());
        let slots = randn(&mut rng, &[2, 7, 8]);
        (bank, enc, slots)
    }

    #[test]
    fn output_shapes() {
        let (bank, enc, slots) = tiny();
        let out = bank.forward_all(&enc, &slots).unwrap();
        assert_eq!(out.features.size(), vec![2, 3, 5, 4, 5]);
        assert_eq!(out.depths.size(), vec![2, 3, 4, 5]);
        assert_eq!(out.depths.select(1, 0).abs().max().double_value(&[]), 0.0);
        assert!(out.depths.select(1, 1).abs().max().double_value(&[]) > 0.0);
    }

    #[test]
    fn subset_matches_full_bank() {
        let (bank, enc, slots) = tiny();
        let full = bank.forward_all(&enc, &slots).unwrap();
        let sub = bank.forward(&enc, &slots, &[0, 2]).unwrap();
        assert!(sub.depths.select(1, 1).equal(&full.depths.select(1, 2)));
        assert!(sub.features.select(1, 0).equal(&full.features.select(1, 0)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (bank, enc, slots) = tiny();
        assert!(bank.forward(&enc, &slots, &[3]).is_err());
        assert!(bank.forward(&enc, &slots, &[1, 0]).is_err());
        assert!(bank.forward(&enc, &slots.narrow(1, 0, 5), &[0]).is_err());
        assert!(bank.forward(&enc.narrow(1, 0, 4), &slots, &[0]).is_err());
    }
}
