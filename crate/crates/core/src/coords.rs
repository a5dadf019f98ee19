//! Coordinate grids and their Fourier encoding.
//!
//! Coordinates are computed in `f64` and only the final encoding is cast to
//! `f32`. A translation by a whole number of pixels is snapped so that the
//! shifted grid reproduces the unshifted grid's values bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::nn::randn;

/// Translation `(dx, dy)` in normalized units and isotropic scale `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridTransform {
    pub dx: f64,
    pub dy: f64,
    pub s: f64,
}

impl Default for GridTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl GridTransform {
    pub const IDENTITY: Self = Self {
        dx: 0.0,
        dy: 0.0,
        s: 1.0,
    };

    /// The translation that moves content by `(px, py)` pixels on a grid of
    /// the given size.
    pub fn pixel_shift(px: f64, py: f64, height: usize, width: usize, s: f64) -> Self {
        Self {
            dx: 2.0 * px / ((width.max(2) - 1) as f64 * s),
            dy: 2.0 * py / ((height.max(2) - 1) as f64 * s),
            s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {}", self.s)));
        }
        if !self.dx.is_finite() || !self.dy.is_finite() {
            return Err(Error::InvalidArgument("translation must be finite".into()));
        }
        Ok(())
    }
}

/// A separable grid of `(x, y)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    pub transform: GridTransform,
    /// One entry per column.
    pub xs: Vec<f64>,
    /// One entry per row.
    pub ys: Vec<f64>,
}

/// Axis coordinates `(2 (j - u) / (n - 1) - 1) / s` where `u` is the shift in
/// pixels. When `u` is (numerically) an integer it is rounded, so the shifted
/// axis is an exact relabelling of the unshifted one.
fn axis(n: usize, shift: f64, s: f64) -> Vec<f64> {
    if n == 1 {
        return vec![-shift];
    }
    let span = (n - 1) as f64;
    let mut u = shift * s * span / 2.0;
    if (u - u.round()).abs() < 1e-9 {
        u = u.round();
    }
    (0..n).map(|j| (2.0 * (j as f64 - u) / span - 1.0) / s).collect()
}

impl CoordGrid {
    pub fn new(height: usize, width: usize, transform: GridTransform) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("grid must be at least 1x1".into()));
        }
        transform.validate()?;
        Ok(Self {
            height,
            width,
            transform,
            xs: axis(width, transform.dx, transform.s),
            ys: axis(height, transform.dy, transform.s),
        })
    }

    /// Coordinate of pixel `(i, j)` (row, column).
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        (self.xs[j], self.ys[i])
    }
}

/// Fixed random frequency matrix `B` with `channels / 2` rows and 2 columns.
#[derive(Debug)]
pub struct FourierFeatures {
    /// `[channels / 2, 2]`, not trainable.
    pub b: Tensor,
}

impl FourierFeatures {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize, sigma: f64) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::Config(format!(
                "fourier_channels must be even and positive, got {channels}"
            )));
        }
        Ok(Self {
            b: randn(rng, &[channels as i64 / 2, 2]) * sigma,
        })
    }

    pub fn from_tensor(b: Tensor) -> Result<Self> {
        let size = b.size();
        if size.len() != 2 || size[1] != 2 {
            return Err(Error::Shape(format!("frequency matrix must be [n, 2], got {size:?}")));
        }
        Ok(Self { b })
    }

    pub fn channels(&self) -> usize {
        2 * self.b.size()[0] as usize
    }

    /// `[sin(2 pi B p); cos(2 pi B p)]` per pixel, as a `[1, C, H, W]` tensor.
    pub fn encode(&self, grid: &CoordGrid) -> Tensor {
        let b = Vec::<f64>::try_from(self.b.to_kind(Kind::Double).flatten(0, -1))
            .expect("frequency matrix is a real tensor");
        let half = b.len() / 2;
        let (h, w) = (grid.height, grid.width);
        let mut out = vec![0f32; 2 * half * h * w];
        let plane = h * w;
        for c in 0..half {
            let (bx, by) = (b[2 * c], b[2 * c + 1]);
            for i in 0..h {
                for j in 0..w {
                    let (x, y) = grid.at(i, j);
                    let phase = 2.0 * std::f64::consts::PI * (bx * x + by * y);
                    out[c * plane + i * w + j] = phase.sin() as f32;
                    out[(half + c) * plane + i * w + j] = phase.cos() as f32;
                }
            }
        }
        Tensor::from_slice(&out)
            .reshape([1, 2 * half as i64, h as i64, w as i64])
            .to_kind(self.b.kind())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn corners_of_a_two_by_two_grid() {
        let g = CoordGrid::new(2, 2, GridTransform::IDENTITY).unwrap();
        assert_eq!(g.at(0, 0), (-1.0, -1.0));
        assert_eq!(g.at(0, 1), (1.0, -1.0));
        assert_eq!(g.at(1, 0), (-1.0, 1.0));
        assert_eq!(g.at(1, 1), (1.0, 1.0));
    }

    #[test]
    fn translation_and_scale() {
        let base = CoordGrid::new(5, 7, GridTransform::IDENTITY).unwrap();
        let moved = CoordGrid::new(5, 7, GridTransform { dx: 0.5, dy: 0.0, s: 1.0 }).unwrap();
        for (a, b) in base.xs.iter().zip(&moved.xs) {
            assert!((b - (a - 0.5)).abs() < 1e-12);
        }
        assert_eq!(base.ys, moved.ys);
        let zoomed = CoordGrid::new(5, 7, GridTransform { dx: 0.0, dy: 0.0, s: 2.0 }).unwrap();
        assert_eq!(zoomed.xs[0], -0.5);
        assert_eq!(zoomed.xs[6], 0.5);
        assert!(CoordGrid::new(4, 4, GridTransform { dx: 0.0, dy: 0.0, s: 0.0 }).is_err());
    }

    #[test]
    fn whole_pixel_shift_is_exact() {
        for s in [1.0, 0.7, 1.9] {
            let base = CoordGrid::new(16, 16, GridTransform { s, ..GridTransform::IDENTITY }).unwrap();
            let shifted = CoordGrid::new(16, 16, GridTransform::pixel_shift(1.0, -2.0, 16, 16, s)).unwrap();
            for j in 1..16 {
                assert_eq!(shifted.xs[j], base.xs[j - 1]);
            }
            for i in 0..14 {
                assert_eq!(shifted.ys[i], base.ys[i + 2]);
            }
        }
    }

    #[test]
    fn zero_grid_encodes_to_sin_zero_cos_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ff = FourierFeatures::new(&mut rng, 8, 1.0).unwrap();
        let grid = CoordGrid::new(1, 1, GridTransform::IDENTITY).unwrap();
        assert_eq!(grid.at(0, 0), (-0.0, -0.0));
        let enc = Vec::<f32>::try_from(ff.encode(&grid).flatten(0, -1)).unwrap();
        assert_eq!(&enc[..4], &[0.0; 4]);
        assert_eq!(&enc[4..], &[1.0; 4]);
        assert!(FourierFeatures::new(&mut rng, 7, 1.0).is_err());
    }

    #[test]
    fn encoding_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ff = FourierFeatures::new(&mut rng, 32, 3.0).unwrap();
        let enc = ff.encode(&CoordGrid::new(9, 9, GridTransform { dx: 0.3, dy: -0.2, s: 0.5 }).unwrap());
        assert_eq!(enc.size(), vec![1, 32, 9, 9]);
        assert!(enc.abs().max().double_value(&[]) <= 1.0);
    }
}
