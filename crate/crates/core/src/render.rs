//! The render net: fused features to RGB image and refined segmentation.
//!
//! The network starts from the fused feature map average-pooled to 16x16,
//! runs unmodulated convolution blocks with bilinear upsampling, concatenates
//! the full fused map again once the coarse resolution is reached and
//! continues up to the output resolution. RGB is accumulated StyleGAN2-style
//! (one ToRGB per block, skip-upsampled). The segmentation stream starts from
//! the coarse mask and receives a ToSeg residual after every convolution.

use rand::Rng;
use tch::{Kind, Tensor};

use crate::config::{ModelConfig, LOW_RES_INJECT};
use crate::error::{Error, Result};
use crate::fusion::CoarseMask;
use crate::nn::{downsample_to, join, lrelu, upsample2, upsample_to, EqualConv2d, Parameterized};

#[derive(Debug)]
pub struct RenderOutput {
    /// `[B, 3, R, R]`.
    pub image: Tensor,
    /// Refined segmentation `[B, K, R, R]`.
    pub segmentation: Tensor,
    /// The coarse mask the segmentation stream was seeded with.
    pub coarse_mask: CoarseMask,
}

#[derive(Debug)]
struct RenderBlock {
    resolution: usize,
    conv0: EqualConv2d,
    conv1: EqualConv2d,
    to_seg0: EqualConv2d,
    to_seg1: EqualConv2d,
    to_rgb: EqualConv2d,
    concat_features: bool,
}

#[derive(Debug)]
pub struct RenderNet {
    blocks: Vec<RenderBlock>,
    coarse_resolution: usize,
    image_resolution: usize,
    feature_dim: usize,
    num_classes: usize,
}

impl RenderNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: &ModelConfig, num_classes: usize) -> Self {
        let c = config.local_feature_dim as i64;
        let k = num_classes as i64;
        let mut blocks = Vec::new();
        let mut res = LOW_RES_INJECT;
        let mut in_ch = c;
        while res <= config.image_resolution {
            let concat = res == config.coarse_resolution && res != LOW_RES_INJECT;
            let ch = config.render_channels(res) as i64;
            let conv_in = if concat { in_ch + c } else { in_ch };
            blocks.push(RenderBlock {
                resolution: res,
                conv0: EqualConv2d::new(rng, conv_in, ch, 3, true),
                conv1: EqualConv2d::new(rng, ch, ch, 3, true),
                to_seg0: EqualConv2d::new(rng, ch, k, 1, true),
                to_seg1: EqualConv2d::new(rng, ch, k, 1, true),
                to_rgb: EqualConv2d::new(rng, ch, 3, 1, true),
                concat_features: concat,
            });
            in_ch = ch;
            res *= 2;
        }
        Self {
            blocks,
            coarse_resolution: config.coarse_resolution,
            image_resolution: config.image_resolution,
            feature_dim: config.local_feature_dim,
            num_classes,
        }
    }

    pub fn forward(&self, features: &Tensor, mask: CoarseMask) -> Result<RenderOutput> {
        let fs = features.size();
        let ms = mask.tensor().size();
        let hc = self.coarse_resolution as i64;
        if fs.len() != 4 || fs[1] != self.feature_dim as i64 || fs[2] != hc || fs[3] != hc {
            return Err(Error::Shape(format!(
                "render net expects features [B, {}, {hc}, {hc}], got {fs:?}",
                self.feature_dim
            )));
        }
        if ms != [fs[0], self.num_classes as i64, hc, hc] {
            return Err(Error::Shape(format!("coarse mask {ms:?} does not match features {fs:?}")));
        }

        let mut x = downsample_to(features, LOW_RES_INJECT as i64);
        let mut rgb: Option<Tensor> = None;
        let mut delta: Option<Tensor> = None;
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                x = upsample2(&x);
            }
            if block.concat_features {
                x = Tensor::cat(&[&x, features], 1);
            }
            x = lrelu(&block.conv0.forward(&x));
            let d0 = block.to_seg0.forward(&x);
            let d = match delta.take() {
                Some(prev) => upsample2(&prev) + d0,
                None => d0,
            };
            x = lrelu(&block.conv1.forward(&x));
            delta = Some(d + block.to_seg1.forward(&x));
            let y = block.to_rgb.forward(&x);
            rgb = Some(match rgb.take() {
                Some(prev) => upsample2(&prev) + y,
                None => y,
            });
        }
        let r = self.image_resolution as i64;
        let segmentation = upsample_to(mask.tensor(), r) + delta.expect("render net has blocks");
        Ok(RenderOutput {
            image: rgb.expect("render net has blocks"),
            segmentation,
            coarse_mask: mask,
        })
    }

    /// Sets every ToSeg weight and bias to zero.
    pub fn zero_to_seg(&self) {
        tch::no_grad(|| {
            for block in &self.blocks {
                for head in [&block.to_seg0, &block.to_seg1] {
                    let _ = head.weight.shallow_clone().zero_();
                    if let Some(b) = &head.bias {
                        let _ = b.shallow_clone().zero_();
                    }
                }
            }
        });
    }

    pub fn block_resolutions(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.resolution).collect()
    }
}

impl Parameterized for RenderNet {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for block in &self.blocks {
            let p = join(prefix, &format!("b{}", block.resolution));
            block.conv0.collect_params(&join(&p, "conv0"), out);
            block.conv1.collect_params(&join(&p, "conv1"), out);
            block.to_seg0.collect_params(&join(&p, "to_seg0"), out);
            block.to_seg1.collect_params(&join(&p, "to_seg1"), out);
            block.to_rgb.collect_params(&join(&p, "to_rgb"), out);
        }
    }
}

/// Mean squared segmentation residual measured at coarse resolution.
///
/// The residual is `seg - upsample(m)`, average-pooled back to the coarse
/// grid. Bilinear upsampling followed by average pooling is not the identity
/// on non-constant maps, so comparing `downsample(seg)` against `m` directly
/// would penalize the network even when it adds nothing to the mask.
pub fn mask_residual_loss(segmentation: &Tensor, mask: &CoarseMask) -> Tensor {
    let m = mask.tensor();
    let coarse = m.size()[3];
    let upsampled = upsample_to(m, segmentation.size()[3]);
    let residual = downsample_to(&(segmentation - upsampled), coarse);
    residual.square().mean(None::<Kind>)
}
