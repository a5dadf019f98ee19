//! Dual-branch discriminator over (image, segmentation) pairs.
//!
//! Both branches are residual stacks that differ only in their input
//! channels. Their 4x4 outputs are summed, a minibatch standard-deviation
//! channel is appended and two fully connected layers produce the score.

use rand::Rng;
use tch::{Kind, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{downsample2, join, lrelu, EqualConv2d, EqualLinear, Parameterized};

#[derive(Debug)]
struct ResBlock {
    conv0: EqualConv2d,
    conv1: EqualConv2d,
    skip: EqualConv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Tensor {
        let y = lrelu(&self.conv0.forward(x));
        let y = lrelu(&self.conv1.forward(&downsample2(&y)));
        let s = self.skip.forward(&downsample2(x));
        (y + s) * std::f64::consts::FRAC_1_SQRT_2
    }
}

#[derive(Debug)]
pub struct Branch {
    from_input: EqualConv2d,
    blocks: Vec<ResBlock>,
    in_channels: i64,
}

impl Branch {
    fn new<R: Rng + ?Sized>(rng: &mut R, config: &ModelConfig, in_channels: i64) -> Self {
        let mut res = config.image_resolution;
        let from_input = EqualConv2d::new(rng, in_channels, config.disc_channels(res) as i64, 1, true);
        let mut blocks = Vec::new();
        while res > 4 {
            let c_in = config.disc_channels(res) as i64;
            let c_out = config.disc_channels(res / 2) as i64;
            blocks.push(ResBlock {
                conv0: EqualConv2d::new(rng, c_in, c_in, 3, true),
                conv1: EqualConv2d::new(rng, c_in, c_out, 3, true),
                skip: EqualConv2d::new(rng, c_in, c_out, 1, false),
            });
            res /= 2;
        }
        Self {
            from_input,
            blocks,
            in_channels,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = lrelu(&self.from_input.forward(x));
        for block in &self.blocks {
            h = block.forward(&h);
        }
        h
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.from_input.collect_params(&join(prefix, "from_input"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.conv0.collect_params(&join(&p, "conv0"), out);
            b.conv1.collect_params(&join(&p, "conv1"), out);
            b.skip.collect_params(&join(&p, "skip"), out);
        }
    }
}

/// Which input an R1 penalty differentiates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum R1Branch {
    Image,
    Segmentation,
}

#[derive(Debug)]
pub struct Discriminator {
    pub image_branch: Branch,
    pub seg_branch: Branch,
    fc: EqualLinear,
    out: EqualLinear,
    resolution: i64,
    mbstd_group: usize,
}

/// Appends the per-group standard deviation, averaged over features, as one
/// extra channel. The group size is the largest divisor of the batch not
/// exceeding `group`.
pub fn minibatch_stddev(x: &Tensor, group: usize) -> Tensor {
    let s = x.size();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let g = (1..=group.min(n as usize) as i64).rev().find(|g| n % g == 0).unwrap_or(1);
    let y = x.reshape([g, n / g, c, h, w]);
    let y = &y - y.mean_dim(&[0i64][..], true, None::<Kind>);
    let std = (y.square().mean_dim(&[0i64][..], false, None::<Kind>) + 1e-8).sqrt();
    let stat = std.mean_dim(&[1i64, 2, 3][..], false, None::<Kind>); // [n / g]
    let channel = stat.reshape([1, n / g, 1, 1, 1]).repeat([g, 1, 1, h, w]).reshape([n, 1, h, w]);
    Tensor::cat(&[x, &channel], 1)
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: &ModelConfig, num_classes: usize) -> Self {
        let image_branch = Branch::new(rng, config, 3);
        let seg_branch = Branch::new(rng, config, num_classes as i64);
        let c4 = config.disc_channels(4) as i64;
        Self {
            image_branch,
            seg_branch,
            fc: EqualLinear::new(rng, (c4 + 1) * 16, c4, 0.0, 1.0),
            out: EqualLinear::new(rng, c4, 1, 0.0, 1.0),
            resolution: config.image_resolution as i64,
            mbstd_group: config.mbstd_group,
        }
    }

    /// Scores a batch; returns `[B]`. With `segmentation = None` the
    /// segmentation branch is skipped entirely.
    pub fn forward(&self, image: &Tensor, segmentation: Option<&Tensor>) -> Result<Tensor> {
        let r = self.resolution;
        let is = image.size();
        if is.len() != 4 || is[1] != 3 || is[2] != r || is[3] != r {
            return Err(Error::Shape(format!("image must be [B, 3, {r}, {r}], got {is:?}")));
        }
        let mut h = self.image_branch.forward(image);
        if let Some(seg) = segmentation {
            let ss = seg.size();
            if ss != [is[0], self.seg_branch.in_channels, r, r] {
                return Err(Error::Shape(format!(
                    "segmentation must be [{}, {}, {r}, {r}], got {ss:?}",
                    is[0], self.seg_branch.in_channels
                )));
            }
            h = h + self.seg_branch.forward(seg);
        }
        let h = minibatch_stddev(&h, self.mbstd_group).flatten(1, -1);
        let h = lrelu(&self.fc.forward(&h));
        Ok(self.out.forward(&h).squeeze_dim(1))
    }

    /// Parameters of the segmentation branch only.
    pub fn seg_branch_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.seg_branch.collect("seg", &mut out);
        out
    }
}

impl Parameterized for Discriminator {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.image_branch.collect(&join(prefix, "img"), out);
        self.seg_branch.collect(&join(prefix, "seg"), out);
        self.fc.collect_params(&join(prefix, "fc"), out);
        self.out.collect_params(&join(prefix, "out"), out);
    }
}

/// `(1/2) mean_b |d score_b / d input_b|^2` for the selected input, computed
/// with a differentiable graph so it can be minimized.
///
/// `score_fn` receives the (image, segmentation) pair with gradient tracking
/// enabled on the selected input.
pub fn r1_penalty<F>(score_fn: F, image: &Tensor, segmentation: &Tensor, branch: R1Branch) -> Result<Tensor>
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    let (img, seg) = match branch {
        R1Branch::Image => (image.detach().set_requires_grad(true), segmentation.detach()),
        R1Branch::Segmentation => (image.detach(), segmentation.detach().set_requires_grad(true)),
    };
    let scores = score_fn(&img, &seg)?;
    let input = match branch {
        R1Branch::Image => &img,
        R1Branch::Segmentation => &seg,
    };
    r1_from_scores(&scores, input)
}

/// The R1 penalty given scores already computed from `input`.
pub fn r1_from_scores(scores: &Tensor, input: &Tensor) -> Result<Tensor> {
    let grads = if scores.requires_grad() {
        Tensor::run_backward(&[scores.sum(None::<Kind>)], &[input], true, true)
    } else {
        vec![Tensor::new()]
    };
    let grad = &grads[0];
    let sq = if grad.defined() {
        grad.square().flatten(1, -1).sum_dim_intlist(&[1i64][..], false, None::<Kind>)
    } else {
        Tensor::zeros([input.size()[0]], (input.kind(), tch::Device::Cpu))
    };
    let penalty = sq.mean(None::<Kind>) * 0.5;
    if !bool::try_from(penalty.isfinite()).unwrap_or(false) {
        return Err(Error::NonFinite("R1 gradient is not finite".into()));
    }
    Ok(penalty)
}
