//! Adversarial training: losses, lazy regularization, style mixing and EMA.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::config::ModelConfig;
use crate::coords::GridTransform;
use crate::data::SamplerState;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::latent::mixing_mask;
use crate::nn::{copy_params, randn, Parameterized};
use crate::optim::{Adam, AdamConfig};
use crate::render::mask_residual_loss;
use crate::schema::SemanticSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Joint,
    Finetune,
}

/// Loss terms of one step, as written to the metrics log. Regularizers are
/// `None` on steps where they are not evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub mask_loss: Option<f64>,
    pub r1_img: Option<f64>,
    pub r1_seg: Option<f64>,
    pub path: Option<f64>,
    pub path_mean: f64,
}

/// Non-saturating generator loss `mean softplus(-s)`.
pub fn g_adversarial_loss(fake_scores: &Tensor) -> Tensor {
    (-fake_scores).softplus().mean(None::<Kind>)
}

/// `mean softplus(-real) + mean softplus(fake)`.
pub fn d_adversarial_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Tensor {
    (-real_scores).softplus().mean(None::<Kind>) + fake_scores.softplus().mean(None::<Kind>)
}

/// `a + decay (batch_mean - a)`.
pub fn update_path_mean(current: f64, batch_mean: f64, decay: f64) -> f64 {
    current + decay * (batch_mean - current)
}

/// Result of one path-length evaluation.
#[derive(Debug)]
pub struct PathLength {
    /// `weight * mean_b (|J_b^T y_b| - a)^2`, differentiable.
    pub penalty: Tensor,
    /// Per-sample `|J^T y|`.
    pub lengths: Tensor,
    /// The running mean after this batch.
    pub new_mean: f64,
}

/// `J^T y` for image-space noise `y`, taken over all latent slots jointly.
/// `y` is scaled by `1 / sqrt(H W)` so the length is resolution-independent.
pub fn path_jacobian_product(image: &Tensor, slots: &Tensor, noise: &Tensor) -> Tensor {
    let s = image.size();
    let scale = 1.0 / ((s[2] * s[3]) as f64).sqrt();
    let target = (image * noise * scale).sum(None::<Kind>);
    if !target.requires_grad() {
        return slots.zeros_like();
    }
    let grads = Tensor::run_backward(&[target], &[slots], true, true);
    if grads[0].defined() {
        grads[0].shallow_clone()
    } else {
        slots.zeros_like()
    }
}

/// Path-length penalty measured against the running mean `a` from before
/// this batch; the returned `new_mean` folds this batch in.
pub fn path_length_reg(
    image: &Tensor,
    slots: &Tensor,
    noise: &Tensor,
    path_mean: f64,
    weight: f64,
    decay: f64,
) -> Result<PathLength> {
    let jt_y = path_jacobian_product(image, slots, noise);
    let lengths = jt_y.square().flatten(1, -1).sum_dim_intlist(&[1i64][..], false, None::<Kind>).sqrt();
    let batch_mean = lengths.mean(Kind::Double).double_value(&[]);
    if !batch_mean.is_finite() {
        return Err(Error::NonFinite("path-length Jacobian product".into()));
    }
    let penalty = (&lengths - path_mean).square().mean(None::<Kind>) * weight;
    Ok(PathLength {
        penalty,
        lengths,
        new_mean: update_path_mean(path_mean, batch_mean, decay),
    })
}

/// Everything needed to continue training bit-identically.
#[derive(Debug)]
pub struct TrainState {
    pub config: ModelConfig,
    pub g: Generator,
    pub ema: Generator,
    pub d: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub path_mean: f64,
    pub rng: ChaCha8Rng,
    pub mode: TrainMode,
    pub sampler: Option<SamplerState>,
}

fn set_requires_grad(params: &[(String, Tensor)], on: bool) {
    for (_, p) in params {
        let _ = p.set_requires_grad(on);
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

impl TrainState {
    /// Fresh state; every parameter is drawn from a generator seeded with
    /// `seed`.
    pub fn new(config: ModelConfig, schema: SemanticSchema, seed: u64, mode: TrainMode) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::new(&mut rng, config.clone(), schema.clone())?;
        let d = Discriminator::new(&mut rng, &config, schema.num_classes());
        let ema = Generator::new(&mut ChaCha8Rng::seed_from_u64(0), config.clone(), schema)?;
        copy_params(&ema, &g);
        tch::no_grad(|| ema.fourier.b.shallow_clone().copy_(&g.fourier.b));
        set_requires_grad(&ema.named_params(), false);
        let opt_g = Adam::new(
            AdamConfig::lazy(config.learning_rate, 0.0, 0.99, config.path_interval),
            g.named_params(),
        );
        let opt_d = Adam::new(
            AdamConfig::lazy(config.learning_rate, 0.0, 0.99, config.r1_interval),
            d.named_params(),
        );
        Ok(Self {
            config,
            g,
            ema,
            d,
            opt_g,
            opt_d,
            step: 0,
            path_mean: 0.0,
            rng,
            mode,
            sampler: None,
        })
    }

    pub fn schema(&self) -> &SemanticSchema {
        &self.g.schema
    }

    /// The regularization weights in effect: `(r1_img, r1_seg, mask)`.
    pub fn lambdas(&self) -> (f64, f64, f64) {
        (
            self.config.lambda_r1_img,
            self.config.lambda_r1_seg,
            self.config.lambda_mask,
        )
    }

    pub fn ema_beta(&self) -> f64 {
        0.5f64.powf(self.config.batch_size as f64 / self.config.ema_half_life_images)
    }

    fn is_reg_step(&self, interval: usize) -> bool {
        interval > 0 && self.step % interval as u64 == 0
    }

    /// Draws `n` mixed latent bundles `[n, 1 + 2K, D]` from the mapping
    /// network: two codes per sample, each slot taking the second code with
    /// probability `mixing_prob`.
    pub fn sample_slots(&mut self, n: usize) -> Result<Tensor> {
        let d = self.config.latent_dim as i64;
        let z1 = randn(&mut self.rng, &[n as i64, d]);
        let z2 = randn(&mut self.rng, &[n as i64, d]);
        let w1 = self.g.map_broadcast(&z1)?;
        let w2 = self.g.map_broadcast(&z2)?;
        let slots = self.g.num_slots();
        let mut flags = Vec::with_capacity(n * slots);
        for _ in 0..n {
            flags.extend(mixing_mask(&mut self.rng, slots, self.config.mixing_prob)?);
        }
        let take = Tensor::from_slice(&flags).reshape([n as i64, slots as i64, 1]);
        Ok(w2.where_self(&take, &w1))
    }

    fn all_classes(&self) -> Vec<usize> {
        (0..self.g.num_classes()).collect()
    }

    /// One joint step on real images `[B, 3, R, R]` and one-hot masks
    /// `[B, K, R, R]`.
    pub fn train_step(&mut self, images: &Tensor, masks: &Tensor) -> Result<StepMetrics> {
        if self.mode != TrainMode::Joint {
            return Err(Error::InvalidArgument("train_step needs joint mode".into()));
        }
        self.step_impl(images, Some(masks))
    }

    /// One image-only step: no segmentation branch, no R1 on masks and no
    /// mask loss. A supplied mask batch is ignored.
    pub fn finetune_step(&mut self, images: &Tensor, masks: Option<&Tensor>) -> Result<StepMetrics> {
        if self.mode != TrainMode::Finetune {
            return Err(Error::InvalidArgument("finetune_step needs finetune mode".into()));
        }
        if masks.is_some() {
            log::warn!("segmentation supplied in finetune mode; ignoring it");
        }
        self.step_impl(images, None)
    }

    fn step_impl(&mut self, images: &Tensor, masks: Option<&Tensor>) -> Result<StepMetrics> {
        let batch = images.size()[0] as usize;
        let joint = masks.is_some();
        let (lambda_img, lambda_seg, lambda_mask) = self.lambdas();
        let r1_step = self.is_reg_step(self.config.r1_interval);
        let path_step = self.is_reg_step(self.config.path_interval);
        let all = self.all_classes();

        // Discriminator update.
        let d_params = self.d.named_params();
        let g_params = self.g.named_params();
        set_requires_grad(&d_params, true);
        self.opt_d.zero_grad();
        let fake = tch::no_grad(|| -> Result<(Tensor, Tensor)> {
            let slots = self.sample_slots(batch)?;
            let out = self.g.synthesize(&slots, GridTransform::IDENTITY, &all)?;
            Ok((out.render.image, out.render.segmentation))
        })?;
        let fake_scores = self.d.forward(&fake.0, joint.then_some(&fake.1))?;
        let real_img = images.detach().set_requires_grad(r1_step);
        let real_seg = masks.map(|m| m.detach().set_requires_grad(r1_step));
        let real_scores = self.d.forward(&real_img, real_seg.as_ref())?;
        let d_adv = d_adversarial_loss(&real_scores, &fake_scores);
        let mut d_total = d_adv.shallow_clone();
        let (mut r1_img, mut r1_seg) = (None, None);
        if r1_step {
            let mut inputs = vec![real_img.shallow_clone()];
            if let Some(seg) = &real_seg {
                inputs.push(seg.shallow_clone());
            }
            let grads = Tensor::run_backward(&[real_scores.sum(None::<Kind>)], &inputs, true, true);
            let penalty = |g: &Tensor| {
                g.square()
                    .flatten(1, -1)
                    .sum_dim_intlist(&[1i64][..], false, None::<Kind>)
                    .mean(None::<Kind>)
                    * 0.5
            };
            let interval = self.config.r1_interval as f64;
            let p_img = penalty(&grads[0]);
            r1_img = Some(scalar(&p_img));
            d_total = d_total + p_img * (lambda_img * interval);
            if joint {
                let p_seg = penalty(&grads[1]);
                r1_seg = Some(scalar(&p_seg));
                d_total = d_total + p_seg * (lambda_seg * interval);
            }
        }
        let d_loss = scalar(&d_adv);
        self.check_finite("discriminator", d_total.double_value(&[]), &[
            ("d_adv", d_loss),
            ("r1_img", r1_img.unwrap_or(0.0)),
            ("r1_seg", r1_seg.unwrap_or(0.0)),
        ])?;
        d_total.backward();
        self.opt_d.step()?;

        // Generator update.
        set_requires_grad(&d_params, false);
        self.opt_g.zero_grad();
        let slots = self.sample_slots(batch)?;
        let out = self.g.synthesize(&slots, GridTransform::IDENTITY, &all)?;
        let seg = &out.render.segmentation;
        let scores = self.d.forward(&out.render.image, joint.then_some(seg))?;
        let g_adv = g_adversarial_loss(&scores);
        let mut g_total = g_adv.shallow_clone();
        let mut mask_loss = None;
        if joint {
            let ml = mask_residual_loss(seg, &out.render.coarse_mask);
            mask_loss = Some(scalar(&ml));
            g_total = g_total + ml * lambda_mask;
        }
        let mut path = None;
        if path_step {
            let n = (batch / self.config.path_batch_shrink.max(1)).max(1);
            let slots = self.sample_slots(n)?;
            let out = self.g.synthesize(&slots, GridTransform::IDENTITY, &all)?;
            let noise = randn(&mut self.rng, &out.render.image.size());
            let reg = path_length_reg(
                &out.render.image,
                &slots,
                &noise,
                self.path_mean,
                self.config.path_reg_weight,
                self.config.path_decay,
            )?;
            path = Some(scalar(&reg.penalty));
            self.path_mean = reg.new_mean;
            g_total = g_total + reg.penalty * self.config.path_interval as f64;
        }
        let g_loss = scalar(&g_adv);
        self.check_finite("generator", g_total.double_value(&[]), &[
            ("g_adv", g_loss),
            ("mask", mask_loss.unwrap_or(0.0)),
            ("path", path.unwrap_or(0.0)),
        ])?;
        g_total.backward();
        self.opt_g.step()?;
        set_requires_grad(&d_params, true);

        self.update_ema(&g_params);
        let metrics = StepMetrics {
            step: self.step,
            d_loss,
            g_loss,
            mask_loss,
            r1_img,
            r1_seg,
            path,
            path_mean: self.path_mean,
        };
        self.step += 1;
        Ok(metrics)
    }

    fn check_finite(&self, which: &str, total: f64, terms: &[(&str, f64)]) -> Result<()> {
        if total.is_finite() {
            return Ok(());
        }
        let detail: Vec<String> = terms.iter().map(|(n, v)| format!("{n}={v}")).collect();
        let sampler = self
            .sampler
            .as_ref()
            .map(|s| format!(" (epoch {}, position {})", s.epoch, s.position))
            .unwrap_or_default();
        Err(Error::NonFinite(format!(
            "{which} loss at step {}{sampler}: {}",
            self.step,
            detail.join(", ")
        )))
    }

    fn update_ema(&self, g_params: &[(String, Tensor)]) {
        let beta = self.ema_beta();
        tch::no_grad(|| {
            for ((_, mut e), (_, p)) in self.ema.named_params().into_iter().zip(g_params) {
                let lerped = p.lerp(&e, beta);
                e.copy_(&lerped);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adversarial_loss_values() {
        let zero = Tensor::from_slice(&[0.0f32, 0.0]);
        let ln2 = std::f64::consts::LN_2;
        assert!((scalar(&g_adversarial_loss(&zero)) - ln2).abs() < 1e-7);
        assert!((scalar(&d_adversarial_loss(&zero, &zero)) - 2.0 * ln2).abs() < 1e-6);
        let big = Tensor::from_slice(&[80.0f32]);
        assert!(scalar(&g_adversarial_loss(&big)) < 1e-30);
        assert!(scalar(&d_adversarial_loss(&big, &(-&big))) < 1e-30);
        let a = scalar(&d_adversarial_loss(&Tensor::from_slice(&[0.5f32]), &zero));
        let b = scalar(&d_adversarial_loss(&Tensor::from_slice(&[1.5f32]), &zero));
        assert!(b < a);
    }

    #[test]
    fn path_mean_recurrence() {
        // Simulate the recurrence and compare against its closed form.
        let (mut a, target, decay) = (0.0f64, 2.5, 0.01);
        for n in 1..=500 {
            a = update_path_mean(a, target, decay);
            let closed = target * (1.0 - (1.0 - decay).powi(n));
            assert!((a - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_output_penalty_is_weighted_mean_squared() {
        let slots = Tensor::zeros([2, 3, 4], (Kind::Float, tch::Device::Cpu)).set_requires_grad(true);
        let image = Tensor::ones([2, 3, 8, 8], (Kind::Float, tch::Device::Cpu));
        let noise = Tensor::ones([2, 3, 8, 8], (Kind::Float, tch::Device::Cpu));
        let reg = path_length_reg(&image, &slots, &noise, 1.7, 0.5, 0.01).unwrap();
        assert!((scalar(&reg.penalty) - 0.5 * 1.7 * 1.7).abs() < 1e-6);
    }
}
