//! The factorized latent space.
//!
//! A [`LatentBundle`] holds one base code plus a (shape, texture) pair per
//! semantic class. Slots are addressed as `0` for the base code and
//! `2k + 1` / `2k + 2` for the shape / texture codes of class `k`.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::SemanticSchema;

pub const BASE_SLOT: usize = 0;

pub fn shape_slot(class: usize) -> usize {
    2 * class + 1
}

pub fn texture_slot(class: usize) -> usize {
    2 * class + 2
}

/// What a slot controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Base,
    Shape(usize),
    Texture(usize),
}

pub fn slot_kind(slot: usize) -> SlotKind {
    match slot {
        0 => SlotKind::Base,
        s if s % 2 == 1 => SlotKind::Shape((s - 1) / 2),
        s => SlotKind::Texture((s - 2) / 2),
    }
}

/// Human-readable slot names in slot order: `base`, `<class>.shape`,
/// `<class>.texture`, ...
pub fn slot_names(schema: &SemanticSchema) -> Vec<String> {
    let mut names = vec!["base".to_string()];
    for class in schema.classes() {
        names.push(format!("{}.shape", class.name));
        names.push(format!("{}.texture", class.name));
    }
    names
}

/// Resolves a slot name (`base`, `hair.shape`, `hair.texture`) or a bare class
/// name (`hair`, meaning both of its slots) to slot indices.
pub fn parse_slots(name: &str, schema: &SemanticSchema) -> Result<Vec<usize>> {
    if name == "base" {
        return Ok(vec![BASE_SLOT]);
    }
    let (class_name, part) = match name.split_once('.') {
        Some((c, p)) => (c, Some(p)),
        None => (name, None),
    };
    let class = schema
        .class_id(class_name)
        .ok_or_else(|| Error::UnknownSlot(name.to_string()))?;
    match part {
        None => Ok(vec![shape_slot(class), texture_slot(class)]),
        Some("shape") => Ok(vec![shape_slot(class)]),
        Some("texture") => Ok(vec![texture_slot(class)]),
        Some(_) => Err(Error::UnknownSlot(name.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBundle {
    num_classes: usize,
    latent_dim: usize,
    /// Row-major `[num_slots, latent_dim]`.
    data: Vec<f32>,
}

impl LatentBundle {
    pub fn from_slots(num_classes: usize, latent_dim: usize, data: Vec<f32>) -> Result<Self> {
        let expected = (1 + 2 * num_classes) * latent_dim;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "bundle for K={num_classes}, dim={latent_dim} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            num_classes,
            latent_dim,
            data,
        })
    }

    /// Every slot set to `w`.
    pub fn broadcast(w: &[f32], num_classes: usize) -> Self {
        let num_slots = 1 + 2 * num_classes;
        let mut data = Vec::with_capacity(num_slots * w.len());
        for _ in 0..num_slots {
            data.extend_from_slice(w);
        }
        Self {
            num_classes,
            latent_dim: w.len(),
            data,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_slots(&self) -> usize {
        1 + 2 * self.num_classes
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn slot(&self, index: usize) -> Result<&[f32]> {
        self.check_slot(index)?;
        let d = self.latent_dim;
        Ok(&self.data[index * d..(index + 1) * d])
    }

    pub fn slot_mut(&mut self, index: usize) -> Result<&mut [f32]> {
        self.check_slot(index)?;
        let d = self.latent_dim;
        Ok(&mut self.data[index * d..(index + 1) * d])
    }

    pub fn base(&self) -> &[f32] {
        &self.data[..self.latent_dim]
    }

    pub fn shape(&self, class: usize) -> Result<&[f32]> {
        self.slot(shape_slot(class))
    }

    pub fn texture(&self, class: usize) -> Result<&[f32]> {
        self.slot(texture_slot(class))
    }

    fn check_slot(&self, index: usize) -> Result<()> {
        if index >= self.num_slots() {
            return Err(Error::SlotOutOfRange {
                index,
                len: self.num_slots(),
            });
        }
        Ok(())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.num_classes != other.num_classes || self.latent_dim != other.latent_dim {
            return Err(Error::Shape(format!(
                "bundles differ: K={} dim={} vs K={} dim={}",
                self.num_classes, self.latent_dim, other.num_classes, other.latent_dim
            )));
        }
        Ok(())
    }

    /// Moves every slot toward `stats.mean_w` by factor `psi`.
    pub fn truncate(&self, psi: f64, stats: &WStatistics) -> Result<Self> {
        if !(0.0..=1.0).contains(&psi) {
            return Err(Error::InvalidArgument(format!("psi must lie in [0, 1], got {psi}")));
        }
        if stats.mean_w.len() != self.latent_dim {
            return Err(Error::Shape(format!(
                "mean_w has {} entries, bundle slots have {}",
                stats.mean_w.len(),
                self.latent_dim
            )));
        }
        if psi == 1.0 {
            return Ok(self.clone());
        }
        let psi = psi as f32;
        let data = self
            .data
            .chunks(self.latent_dim)
            .flat_map(|slot| {
                slot.iter()
                    .zip(&stats.mean_w)
                    .map(move |(&v, &m)| m + psi * (v - m))
            })
            .collect();
        Ok(Self { data, ..*self })
    }

    /// Slot-wise selection: slots in `slots` come from `other`, the rest from
    /// `self`.
    pub fn mix(&self, other: &Self, slots: &BTreeSet<usize>) -> Result<Self> {
        self.check_compatible(other)?;
        if let Some(&bad) = slots.iter().find(|&&s| s >= self.num_slots()) {
            return Err(Error::SlotOutOfRange {
                index: bad,
                len: self.num_slots(),
            });
        }
        let mask: Vec<bool> = (0..self.num_slots()).map(|s| slots.contains(&s)).collect();
        Ok(self.mix_mask(other, &mask))
    }

    fn mix_mask(&self, other: &Self, take_other: &[bool]) -> Self {
        let d = self.latent_dim;
        let mut data = self.data.clone();
        for (slot, &take) in take_other.iter().enumerate() {
            if take {
                data[slot * d..(slot + 1) * d].copy_from_slice(&other.data[slot * d..(slot + 1) * d]);
            }
        }
        Self { data, ..*self }
    }

    /// Training-time style mixing: each slot independently comes from `other`
    /// with probability `p`.
    pub fn sample_training_mixture<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        other: &Self,
        p: f64,
    ) -> Result<Self> {
        self.check_compatible(other)?;
        let mask = mixing_mask(rng, self.num_slots(), p)?;
        Ok(self.mix_mask(other, &mask))
    }

    /// Per-slot linear interpolation toward `other` on the given slots,
    /// exact at `t = 0` and `t = 1`.
    pub fn lerp(&self, other: &Self, t: f32, slots: &BTreeSet<usize>) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for &slot in slots {
            let b = other.slot(slot)?.to_vec();
            for (a, b) in out.slot_mut(slot)?.iter_mut().zip(b) {
                *a = (1.0 - t) * *a + t * b;
            }
        }
        Ok(out)
    }

    pub fn all_slots(&self) -> BTreeSet<usize> {
        (0..self.num_slots()).collect()
    }
}

/// Draws the per-slot Bernoulli(`p`) mask used for training-time style
/// mixing. `true` means "take the second code".
pub fn mixing_mask<R: Rng + ?Sized>(rng: &mut R, num_slots: usize, p: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "mixing probability must lie in [0, 1], got {p}"
        )));
    }
    Ok((0..num_slots).map(|_| rng.random::<f64>() < p).collect())
}

/// Running statistics of the mapped latent space, used for truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WStatistics {
    pub mean_w: Vec<f32>,
    pub sample_count: usize,
}

impl WStatistics {
    /// Minimum number of mapped samples before the mean may be used.
    pub const MIN_SAMPLES: usize = 10_000;

    pub fn is_ready(&self) -> bool {
        self.sample_count >= Self::MIN_SAMPLES
    }
}
