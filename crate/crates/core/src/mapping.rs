//! The mapping MLP from `z` to `w`.

use rand::Rng;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::latent::WStatistics;
use crate::nn::{lrelu, EqualLinear, Parameterized};

#[derive(Debug)]
pub struct MappingNetwork {
    layers: Vec<EqualLinear>,
    latent_dim: i64,
}

/// Normalizes each row to unit root-mean-square.
pub fn pixel_norm(z: &Tensor) -> Tensor {
    let ms = z.square().mean_dim(&[1i64][..], true, None::<Kind>);
    z * (ms + 1e-8).rsqrt()
}

impl MappingNetwork {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, latent_dim: usize, layers: usize, lr_mul: f64) -> Self {
        let d = latent_dim as i64;
        Self {
            layers: (0..layers).map(|_| EqualLinear::new(rng, d, d, 0.0, lr_mul)).collect(),
            latent_dim: d,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim as usize
    }

    /// Maps a `[N, latent_dim]` batch of noise vectors to `w`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let size = z.size();
        if size.len() != 2 || size[1] != self.latent_dim {
            return Err(Error::Shape(format!(
                "mapping expects [N, {}], got {size:?}",
                self.latent_dim
            )));
        }
        let mut x = pixel_norm(z);
        for layer in &self.layers {
            x = lrelu(&layer.forward(&x));
        }
        Ok(x)
    }

    /// Mean of `w` over `count` noise draws, evaluated in chunks.
    pub fn estimate_mean_w<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<WStatistics> {
        let d = self.latent_dim as usize;
        let mut sum = Tensor::zeros([self.latent_dim], (Kind::Double, tch::Device::Cpu));
        let chunk = 4096;
        let mut done = 0;
        tch::no_grad(|| -> Result<()> {
            while done < count {
                let n = chunk.min(count - done);
                let z = crate::nn::randn(rng, &[n as i64, d as i64]);
                let w = self.forward(&z)?;
                sum += w.to_kind(Kind::Double).sum_dim_intlist(&[0i64][..], false, Kind::Double);
                done += n;
            }
            Ok(())
        })?;
        let mean = (sum / count.max(1) as f64).to_kind(Kind::Float);
        Ok(WStatistics {
            mean_w: Vec::<f32>::try_from(mean).map_err(Error::Torch)?,
            sample_count: count,
        })
    }
}

impl Parameterized for MappingNetwork {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&crate::nn::join(prefix, &format!("fc{i}")), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_determinism() {
        let net = MappingNetwork::new(&mut ChaCha8Rng::seed_from_u64(0), 16, 8, 0.01);
        let z = crate::nn::randn(&mut ChaCha8Rng::seed_from_u64(1), &[4, 16]);
        let a = net.forward(&z).unwrap();
        assert_eq!(a.size(), vec![4, 16]);
        assert!(a.equal(&net.forward(&z).unwrap()));
        assert!(net.forward(&Tensor::zeros([4, 15], (Kind::Float, tch::Device::Cpu))).is_err());
        assert_eq!(net.named_params().len(), 16);
    }
}
