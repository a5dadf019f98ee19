//! Paired image / mask datasets.
//!
//! Layout: `DIR/images/NNNNNN.png` (RGB) and `DIR/masks/NNNNNN.png`
//! (single-channel, pixel value = class id).

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::schema::SemanticSchema;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
    pub resolution: usize,
}

/// One decoded training pair.
#[derive(Debug)]
pub struct DualSample {
    /// `[3, R, R]` in `[-1, 1]`.
    pub image: Tensor,
    /// One-hot `[K, R, R]`.
    pub mask: Tensor,
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl DatasetIndex {
    /// Pairs every `images/*.png` with the same-named file under `masks/`.
    pub fn from_dir(dir: &Path, resolution: usize) -> Result<Self> {
        let images_dir = dir.join("images");
        let mut names: Vec<String> = std::fs::read_dir(&images_dir)
            .map_err(|e| Error::io(&images_dir, e))?
            .filter_map(|entry| entry.ok())
            .map(|entry| entry.file_name().to_string_lossy().into_owned())
            .filter(|name| name.ends_with(".png"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::InvalidArgument(format!("no images in {}", images_dir.display())));
        }
        let mut records = Vec::with_capacity(names.len());
        for name in names {
            let mask = dir.join("masks").join(&name);
            if !mask.exists() {
                return Err(Error::io(
                    &mask,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "mask missing for image"),
                ));
            }
            records.push(Record {
                image: images_dir.join(&name),
                mask,
            });
        }
        Ok(Self { records, resolution })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Decodes one record: bilinear-resized image scaled to `[-1, 1]` and a
/// nearest-resized, one-hot expanded mask.
pub fn load_sample(record: &Record, schema: &SemanticSchema, resolution: usize) -> Result<DualSample> {
    let r = resolution as u32;
    let img = image::open(&record.image).map_err(|e| image_error(&record.image, e))?.to_rgb8();
    let img = if img.dimensions() == (r, r) {
        img
    } else {
        image::imageops::resize(&img, r, r, FilterType::Triangle)
    };
    let mask = image::open(&record.mask).map_err(|e| image_error(&record.mask, e))?.to_luma8();
    let mask = if mask.dimensions() == (r, r) {
        mask
    } else {
        image::imageops::resize(&mask, r, r, FilterType::Nearest)
    };
    let k = schema.num_classes();
    let plane = (r * r) as usize;
    let mut pixels = vec![0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            pixels[c * plane + i] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    let mut onehot = vec![0f32; k * plane];
    for (i, p) in mask.pixels().enumerate() {
        let v = p.0[0] as usize;
        if v >= k {
            return Err(Error::MaskLabel {
                path: record.mask.clone(),
                x: i as u32 % r,
                y: i as u32 / r,
                value: v as u8,
                num_classes: k,
            });
        }
        onehot[v * plane + i] = 1.0;
    }
    let r = r as i64;
    Ok(DualSample {
        image: Tensor::from_slice(&pixels).reshape([3, r, r]),
        mask: Tensor::from_slice(&onehot).reshape([k as i64, r, r]),
    })
}

/// The whole dataset decoded into two tensors.
#[derive(Debug)]
pub struct InMemoryDataset {
    /// `[N, 3, R, R]`.
    pub images: Tensor,
    /// `[N, K, R, R]`.
    pub masks: Tensor,
}

impl InMemoryDataset {
    pub fn load(index: &DatasetIndex, schema: &SemanticSchema) -> Result<Self> {
        let mut images = Vec::with_capacity(index.len());
        let mut masks = Vec::with_capacity(index.len());
        for record in &index.records {
            let s = load_sample(record, schema, index.resolution)?;
            images.push(s.image);
            masks.push(s.mask);
        }
        Ok(Self {
            images: Tensor::stack(&images, 0),
            masks: Tensor::stack(&masks, 0),
        })
    }

    pub fn len(&self) -> usize {
        self.images.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers a batch; samples with `flip = true` are mirrored horizontally.
    pub fn batch(&self, picks: &[(usize, bool)]) -> (Tensor, Tensor) {
        let idx = Tensor::from_slice(&picks.iter().map(|p| p.0 as i64).collect::<Vec<_>>());
        let mut images = self.images.index_select(0, &idx);
        let mut masks = self.masks.index_select(0, &idx);
        if picks.iter().any(|p| p.1) {
            let flip = Tensor::from_slice(&picks.iter().map(|p| p.1).collect::<Vec<_>>()).reshape([-1, 1, 1, 1]);
            images = images.flip([3]).where_self(&flip, &images);
            masks = masks.flip([3]).where_self(&flip, &masks);
        }
        (images, masks)
    }
}

/// Epoch-based shuffling sampler. The order of epoch `e` is a pure function
/// of `(seed, e)`, so the sampler state is just a position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub epoch: u64,
    pub position: usize,
    pub flip: bool,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    pub state: SamplerState,
    len: usize,
    order: Vec<usize>,
}

/// The permutation used in epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn flip_bit(seed: u64, epoch: u64, position: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(epoch);
    rng.set_word_pos(position as u128 * 2);
    rng.random::<bool>()
}

impl Sampler {
    pub fn new(seed: u64, len: usize, flip: bool) -> Self {
        Self::from_state(
            SamplerState {
                seed,
                epoch: 0,
                position: 0,
                flip,
            },
            len,
        )
    }

    pub fn from_state(state: SamplerState, len: usize) -> Self {
        let order = epoch_order(state.seed, state.epoch, len);
        Self { state, len, order }
    }

    /// The next `n` (index, flip) pairs, crossing epochs as needed.
    pub fn next_batch(&mut self, n: usize) -> Vec<(usize, bool)> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.state.position >= self.len {
                self.state.epoch += 1;
                self.state.position = 0;
                self.order = epoch_order(self.state.seed, self.state.epoch, self.len);
            }
            let flip = self.state.flip && flip_bit(self.state.seed, self.state.epoch, self.state.position);
            out.push((self.order[self.state.position], flip));
            self.state.position += 1;
        }
        out
    }
}

/// Mean per-class mass of a batch of masks `[B, K, H, W]`.
pub fn class_mass(masks: &Tensor) -> Vec<f64> {
    let m = masks.mean_dim(&[0i64, 2, 3][..], false, Kind::Double);
    Vec::<f64>::try_from(m).expect("class mass is a vector")
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, RgbImage};

    #[test]
    fn epoch_orders_are_reproducible_permutations() {
        let a = epoch_order(3, 1, 50);
        assert_eq!(a, epoch_order(3, 1, 50));
        assert_ne!(a, epoch_order(3, 2, 50));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_resumes_from_state() {
        let mut s = Sampler::new(9, 10, true);
        s.next_batch(7);
        let snapshot = s.state.clone();
        let expected = s.next_batch(8);
        let mut resumed = Sampler::from_state(snapshot, 10);
        assert_eq!(resumed.next_batch(8), expected);
        assert_eq!(resumed.state.epoch, 1);
    }

    #[test]
    fn mask_label_out_of_range_names_the_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.png");
        let mask = dir.path().join("m.png");
        RgbImage::new(4, 4).save(&img).unwrap();
        let mut m = GrayImage::new(4, 4);
        m.put_pixel(2, 1, Luma([9]));
        m.save(&mask).unwrap();
        let err = load_sample(&Record { image: img, mask }, &SemanticSchema::toy(), 4).unwrap_err();
        match err {
            Error::MaskLabel { x, y, value, .. } => assert_eq!((x, y, value), (2, 1, 9)),
            other => panic!("unexpected {other}"),
        }
    }
}
