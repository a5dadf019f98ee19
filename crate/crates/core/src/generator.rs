//! The full generator: mapping network, local generator bank, fusion and
//! render net.

use std::collections::BTreeSet;

use rand::Rng;
use tch::Tensor;

use crate::config::ModelConfig;
use crate::coords::{CoordGrid, FourierFeatures, GridTransform};
use crate::error::{Error, Result};
use crate::fusion::{aggregate, depth_to_mask, modified_mask_with_flags, CoarseMask, ModifiedMask};
use crate::latent::{LatentBundle, WStatistics};
use crate::local::{LocalGeneratorBank, LocalOutputs};
use crate::mapping::MappingNetwork;
use crate::nn::{join, Parameterized};
use crate::render::{RenderNet, RenderOutput};
use crate::schema::SemanticSchema;

/// Everything produced by one synthesis pass.
#[derive(Debug)]
pub struct Synthesis {
    pub local: LocalOutputs,
    /// `[B, K, Hc, Wc]`, with `-inf` for inactive classes.
    pub depths: Tensor,
    pub modified_mask: ModifiedMask,
    /// Fused features `[B, C, Hc, Wc]`.
    pub fused: Tensor,
    pub render: RenderOutput,
    pub active_classes: Vec<usize>,
}

/// Options for [`Generator::generate`].
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    /// `None` means every class.
    pub active_classes: Option<BTreeSet<usize>>,
    pub psi: f64,
    pub transform: GridTransform,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            active_classes: None,
            psi: 1.0,
            transform: GridTransform::IDENTITY,
        }
    }
}

/// Parameters of the generator. The Fourier matrix is fixed and therefore
/// not part of [`Parameterized`].
#[derive(Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub schema: SemanticSchema,
    pub mapping: MappingNetwork,
    pub bank: LocalGeneratorBank,
    pub render: RenderNet,
    pub fourier: FourierFeatures,
}

/// Stacks bundles into a `[B, 1 + 2K, D]` tensor.
pub fn bundles_to_tensor(bundles: &[LatentBundle]) -> Result<Tensor> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty bundle batch".into()))?;
    let (s, d) = (first.num_slots(), first.latent_dim());
    let mut data = Vec::with_capacity(bundles.len() * s * d);
    for b in bundles {
        if b.num_slots() != s || b.latent_dim() != d {
            return Err(Error::Shape("bundles in a batch must share K and latent_dim".into()));
        }
        data.extend_from_slice(b.as_slice());
    }
    Ok(Tensor::from_slice(&data).reshape([bundles.len() as i64, s as i64, d as i64]))
}

/// Splits a `[B, 1 + 2K, D]` tensor back into bundles.
pub fn tensor_to_bundles(t: &Tensor, num_classes: usize) -> Result<Vec<LatentBundle>> {
    let size = t.size();
    let values = Vec::<f32>::try_from(t.detach().contiguous().flatten(0, -1))?;
    let per = (size[1] * size[2]) as usize;
    values
        .chunks(per)
        .map(|c| LatentBundle::from_slots(num_classes, size[2] as usize, c.to_vec()))
        .collect()
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: ModelConfig, schema: SemanticSchema) -> Result<Self> {
        config.validate()?;
        let k = schema.num_classes();
        let fourier = FourierFeatures::new(rng, config.fourier_channels, config.fourier_sigma)?;
        let mapping = MappingNetwork::new(rng, config.latent_dim, config.mapping_layers, config.mapping_lr_mul);
        let bank = LocalGeneratorBank::new(rng, &config, k);
        let render = RenderNet::new(rng, &config, k);
        Ok(Self {
            config,
            schema,
            mapping,
            bank,
            render,
            fourier,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.schema.num_classes()
    }

    pub fn num_slots(&self) -> usize {
        1 + 2 * self.num_classes()
    }

    /// Fourier encoding of the coarse grid under `transform`.
    pub fn encoding(&self, transform: GridTransform) -> Result<Tensor> {
        let r = self.config.coarse_resolution;
        Ok(self.fourier.encode(&CoordGrid::new(r, r, transform)?))
    }

    /// Maps `[N, D]` noise to `[N, 1 + 2K, D]` broadcast bundles.
    pub fn map_broadcast(&self, z: &Tensor) -> Result<Tensor> {
        let w = self.mapping.forward(z)?;
        let s = self.num_slots() as i64;
        Ok(w.unsqueeze(1).expand([-1, s, -1], false).contiguous())
    }

    fn check_active(&self, active: &[usize]) -> Result<()> {
        if active.is_empty() {
            return Err(Error::InvalidArgument("active class set is empty".into()));
        }
        if active[0] != 0 {
            return Err(Error::InvalidArgument("the background class must stay active".into()));
        }
        if let Some(&bad) = active.iter().find(|&&c| c >= self.num_classes()) {
            return Err(Error::UnknownClass(bad));
        }
        Ok(())
    }

    /// Differentiable synthesis from latent slots `[B, 1 + 2K, D]`.
    ///
    /// Inactive classes are not evaluated; their depth is `-inf`, so they
    /// receive zero weight in both softmaxes.
    pub fn synthesize(&self, slots: &Tensor, transform: GridTransform, active: &[usize]) -> Result<Synthesis> {
        self.check_active(active)?;
        let enc = self.encoding(transform)?;
        let local = self.bank.forward(&enc, slots, active)?;
        let k = self.num_classes() as i64;
        let depths = if active.len() as i64 == k {
            local.depths.shallow_clone()
        } else {
            let s = local.depths.size();
            let idx = Tensor::from_slice(&active.iter().map(|&c| c as i64).collect::<Vec<_>>());
            Tensor::full([s[0], k, s[2], s[3]], f64::NEG_INFINITY, (local.depths.kind(), tch::Device::Cpu))
                .index_copy(1, &idx, &local.depths)
        };
        let mask = depth_to_mask(&depths)?;
        let mtilde = modified_mask_with_flags(&mask, &depths, &self.schema.transparent_flags())?;
        let fused = if active.len() as i64 == k {
            aggregate(&mtilde, &local.features)?
        } else {
            let idx = Tensor::from_slice(&active.iter().map(|&c| c as i64).collect::<Vec<_>>());
            aggregate(&ModifiedMask(mtilde.tensor().index_select(1, &idx)), &local.features)?
        };
        let render = self.render.forward(&fused, CoarseMask(mask.tensor().shallow_clone()))?;
        Ok(Synthesis {
            local,
            depths,
            modified_mask: mtilde,
            fused,
            render,
            active_classes: active.to_vec(),
        })
    }

    /// Inference entry point: truncation, restricted class set, grid
    /// transform. The returned image is clamped to `[-1, 1]`.
    pub fn generate(
        &self,
        bundles: &[LatentBundle],
        options: &GenerateOptions,
        stats: Option<&WStatistics>,
    ) -> Result<Synthesis> {
        let truncated: Vec<LatentBundle> = if options.psi == 1.0 {
            bundles.to_vec()
        } else {
            let stats = stats.ok_or_else(|| Error::InvalidArgument("truncation needs mean_w".into()))?;
            bundles
                .iter()
                .map(|b| b.truncate(options.psi, stats))
                .collect::<Result<_>>()?
        };
        for b in &truncated {
            if b.num_classes() != self.num_classes() || b.latent_dim() != self.config.latent_dim {
                return Err(Error::Shape(format!(
                    "bundle K={} dim={} does not match model K={} dim={}",
                    b.num_classes(),
                    b.latent_dim(),
                    self.num_classes(),
                    self.config.latent_dim
                )));
            }
        }
        let active: Vec<usize> = match &options.active_classes {
            None => (0..self.num_classes()).collect(),
            Some(set) => set.iter().copied().collect(),
        };
        let slots = bundles_to_tensor(&truncated)?;
        let mut out = tch::no_grad(|| self.synthesize(&slots, options.transform, &active))?;
        out.render.image = out.render.image.clamp(-1.0, 1.0);
        if active.len() < self.num_classes() {
            let flags: Vec<bool> = (0..self.num_classes()).map(|c| active.contains(&c)).collect();
            let keep = Tensor::from_slice(&flags).reshape([1, -1, 1, 1]);
            out.render.segmentation = out.render.segmentation.where_self(&keep, &Tensor::from(0f32));
        }
        Ok(out)
    }

    /// Samples `count` broadcast bundles from noise drawn with `rng`.
    pub fn sample_bundles<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<LatentBundle>> {
        let z = crate::nn::randn(rng, &[count as i64, self.config.latent_dim as i64]);
        let slots = tch::no_grad(|| self.map_broadcast(&z))?;
        tensor_to_bundles(&slots, self.num_classes())
    }
}

impl Synthesis {
    /// Per-pixel class labels `[B, R, R]` over the active classes; ties go to
    /// the lowest id.
    pub fn labels(&self) -> Tensor {
        let seg = &self.render.segmentation;
        let k = seg.size()[1];
        let flags: Vec<bool> = (0..k as usize).map(|c| self.active_classes.contains(&c)).collect();
        let keep = Tensor::from_slice(&flags).reshape([1, -1, 1, 1]);
        seg.where_self(&keep, &Tensor::from(f32::NEG_INFINITY)).argmax(1, false)
    }
}

impl Parameterized for Generator {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.mapping.collect_params(&join(prefix, "mapping"), out);
        self.bank.collect_params(&join(prefix, "bank"), out);
        self.render.collect_params(&join(prefix, "render"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_resolution: 32,
            coarse_resolution: 16,
            latent_dim: 8,
            local_hidden_dim: 8,
            local_feature_dim: 4,
            fourier_channels: 8,
            render_channel_base: 128,
            render_channel_max: 8,
            disc_channel_base: 64,
            disc_channel_max: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn generate_shapes_and_background_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(&mut rng, tiny_config(), SemanticSchema::toy()).unwrap();
        let bundles = g.sample_bundles(&mut rng, 2).unwrap();
        let out = g.generate(&bundles, &GenerateOptions::default(), None).unwrap();
        assert_eq!(out.render.image.size(), vec![2, 3, 32, 32]);
        assert_eq!(out.render.segmentation.size(), vec![2, 6, 32, 32]);
        let opts = GenerateOptions {
            active_classes: Some([0].into()),
            ..GenerateOptions::default()
        };
        let bg = g.generate(&bundles, &opts, None).unwrap();
        let m = bg.render.coarse_mask.tensor();
        assert_eq!(m.select(1, 0).min().double_value(&[]), 1.0);
        assert_eq!(bg.labels().max().int64_value(&[]), 0);
        let no_bg = GenerateOptions {
            active_classes: Some([1, 2].into()),
            ..GenerateOptions::default()
        };
        assert!(g.generate(&bundles, &no_bg, None).is_err());
        let psi = GenerateOptions { psi: 0.5, ..GenerateOptions::default() };
        assert!(g.generate(&bundles, &psi, None).is_err());
    }

    #[test]
    fn bundle_tensor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(&mut rng, tiny_config(), SemanticSchema::toy()).unwrap();
        let bundles = g.sample_bundles(&mut rng, 3).unwrap();
        let t = bundles_to_tensor(&bundles).unwrap();
        assert_eq!(tensor_to_bundles(&t, 6).unwrap(), bundles);
    }
}
