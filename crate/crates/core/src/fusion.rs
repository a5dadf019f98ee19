//! Pseudo-depth fusion.
//!
//! Per-class pseudo-depth maps act as softmax logits over classes, giving the
//! coarse mask `m`. Features are aggregated with a modified mask in which
//! transparent classes are layered on top of a softmax taken over the opaque
//! classes only.

use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::schema::SemanticSchema;

/// Coarse segmentation `[B, K, H, W]`; every pixel's class vector lies on the
/// simplex.
#[derive(Debug)]
pub struct CoarseMask(pub Tensor);

/// Aggregation weights `[B, K, H, W]`. Opaque entries sum to one per pixel;
/// transparent entries are copied from the coarse mask.
#[derive(Debug)]
pub struct ModifiedMask(pub Tensor);

impl CoarseMask {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

impl ModifiedMask {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_depths(depths: &Tensor) -> Result<()> {
    if depths.dim() != 4 {
        return Err(Error::Shape(format!(
            "depth maps must be [B, K, H, W], got {:?}",
            depths.size()
        )));
    }
    if depths.isnan().any().int64_value(&[]) != 0 {
        return Err(Error::NonFinite("NaN in pseudo-depth maps".into()));
    }
    Ok(())
}

/// Softmax over dim 1 with the per-pixel max subtracted first. Entries equal
/// to `-inf` get exactly zero weight.
fn stable_softmax(logits: &Tensor) -> Tensor {
    let max = logits.amax([1], true).detach();
    let e = (logits - max).exp();
    let denom = e.sum_dim_intlist(&[1i64][..], true, None::<Kind>);
    e / denom
}

fn class_mask(flags: &[bool]) -> Tensor {
    let values: Vec<bool> = flags.to_vec();
    Tensor::from_slice(&values).reshape([1, flags.len() as i64, 1, 1])
}

/// Replaces the depths of inactive classes by `-inf` so that they take no
/// part in either softmax.
pub fn mask_inactive(depths: &Tensor, active: &[bool]) -> Result<Tensor> {
    if depths.size()[1] != active.len() as i64 {
        return Err(Error::Shape(format!(
            "{} activity flags for {} depth maps",
            active.len(),
            depths.size()[1]
        )));
    }
    let neg_inf = Tensor::from(f32::NEG_INFINITY);
    Ok(depths.where_self(&class_mask(active), &neg_inf))
}

/// `m_k = exp(d_k) / sum_k' exp(d_k')`, per pixel.
pub fn depth_to_mask(depths: &Tensor) -> Result<CoarseMask> {
    check_depths(depths)?;
    let finite_classes = depths.size()[1];
    if finite_classes < 1 {
        return Err(Error::Shape("need at least one class".into()));
    }
    Ok(CoarseMask(stable_softmax(depths)))
}

/// Modified aggregation mask for a schema's transparency flags.
pub fn modified_mask(m: &CoarseMask, depths: &Tensor, schema: &SemanticSchema) -> Result<ModifiedMask> {
    modified_mask_with_flags(m, depths, &schema.transparent_flags())
}

/// `m~_k = 1_NT(k) softmax_NT(d)_k + 1_T(k) m_k`.
///
/// Transparent classes are assumed not to overlap; if they do, the per-pixel
/// sum exceeds one by their combined weight.
pub fn modified_mask_with_flags(
    m: &CoarseMask,
    depths: &Tensor,
    transparent: &[bool],
) -> Result<ModifiedMask> {
    check_depths(depths)?;
    if m.0.size() != depths.size() {
        return Err(Error::Shape(format!(
            "mask {:?} and depths {:?} differ",
            m.0.size(),
            depths.size()
        )));
    }
    if transparent.len() as i64 != depths.size()[1] {
        return Err(Error::Shape(format!(
            "schema has {} classes, depth maps have {}",
            transparent.len(),
            depths.size()[1]
        )));
    }
    if transparent.iter().all(|&t| t) {
        return Err(Error::InvalidArgument("all classes are transparent".into()));
    }
    let opaque: Vec<bool> = transparent.iter().map(|t| !t).collect();
    let opaque_logits = mask_inactive(depths, &opaque)?;
    let opaque_part = stable_softmax(&opaque_logits);
    let transparent_weight = class_mask(transparent).to_kind(m.0.kind());
    Ok(ModifiedMask(opaque_part + &m.0 * transparent_weight))
}

/// `f = sum_k m~_k * f_k`, channelwise. `features` is `[B, K, C, H, W]`.
pub fn aggregate(weights: &ModifiedMask, features: &Tensor) -> Result<Tensor> {
    let w = &weights.0;
    let fs = features.size();
    let ws = w.size();
    if fs.len() != 5 || ws.len() != 4 || fs[0] != ws[0] || fs[1] != ws[1] || fs[3..] != ws[2..] {
        return Err(Error::Shape(format!(
            "features {fs:?} incompatible with weights {ws:?}"
        )));
    }
    Ok((w.unsqueeze(2) * features).sum_dim_intlist(&[1i64][..], false, None::<Kind>))
}

/// Per-pixel argmax over classes; the lowest class id wins ties.
pub fn argmax_classes(mask: &Tensor) -> Tensor {
    // torch's argmax returns the first maximal index.
    mask.argmax(1, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t4(values: &[f32], shape: [i64; 4]) -> Tensor {
        Tensor::from_slice(values).reshape(shape)
    }

    fn to_vec(t: &Tensor) -> Vec<f32> {
        Vec::<f32>::try_from(t.flatten(0, -1)).unwrap()
    }

    #[test]
    fn zero_depths_give_uniform_mask() {
        let m = depth_to_mask(&Tensor::zeros([1, 2, 3, 3], (Kind::Float, tch::Device::Cpu))).unwrap();
        assert!(to_vec(&m.0).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ln3_versus_zero() {
        let d = t4(&[3f32.ln(), 0.0], [1, 2, 1, 1]);
        let m = to_vec(&depth_to_mask(&d).unwrap().0);
        assert!((m[0] - 0.75).abs() < 1e-7 && (m[1] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f32> = (0..4 * 9).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d = t4(&v, [1, 4, 3, 3]);
        let a = depth_to_mask(&d).unwrap().0;
        let b = depth_to_mask(&(&d + 7.5)).unwrap().0;
        let diff = (a - b).abs().max().double_value(&[]);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn nan_depth_rejected() {
        let d = t4(&[f32::NAN, 0.0], [1, 2, 1, 1]);
        assert!(matches!(depth_to_mask(&d), Err(Error::NonFinite(_))));
        assert!(depth_to_mask(&Tensor::zeros([2, 3], (Kind::Float, tch::Device::Cpu))).is_err());
    }

    #[test]
    fn no_transparent_classes_leaves_mask_untouched() {
        let d = t4(&[0.3, -1.0, 2.0, 0.1, 0.0, 0.5], [1, 3, 1, 2]);
        let m = depth_to_mask(&d).unwrap();
        let mt = modified_mask_with_flags(&m, &d, &[false, false, false]).unwrap();
        assert!(mt.0.equal(&m.0));
    }

    #[test]
    fn transparent_class_example() {
        // m = (0.3, 0.3, 0.4); opaque renormalization gives (0.5, 0.5).
        let d = t4(&[0.0, 0.0, (4.0f32 / 3.0).ln()], [1, 3, 1, 1]);
        let m = depth_to_mask(&d).unwrap();
        let mv = to_vec(&m.0);
        for (a, b) in mv.iter().zip([0.3, 0.3, 0.4]) {
            assert!((a - b).abs() < 1e-6);
        }
        let mt = to_vec(&modified_mask_with_flags(&m, &d, &[false, false, true]).unwrap().0);
        for (a, b) in mt.iter().zip([0.5, 0.5, 0.4]) {
            assert!((a - b).abs() < 1e-6, "{mt:?}");
        }
        // Aggregating scalar features (a, b, c) gives 0.5a + 0.5b + 0.4c.
        let feats = Tensor::from_slice(&[2.0f32, -4.0, 10.0]).reshape([1, 3, 1, 1, 1]);
        let weights = modified_mask_with_flags(&m, &d, &[false, false, true]).unwrap();
        let f = aggregate(&weights, &feats).unwrap().double_value(&[0, 0, 0, 0]);
        assert!((f - (1.0 - 2.0 + 4.0)).abs() < 1e-5, "{f}");
    }

    #[test]
    fn vanishing_transparent_class() {
        let d = t4(&[0.2, -0.4, -80.0], [1, 3, 1, 1]);
        let m = depth_to_mask(&d).unwrap();
        let mt = to_vec(&modified_mask_with_flags(&m, &d, &[false, false, true]).unwrap().0);
        let opaque = to_vec(&depth_to_mask(&t4(&[0.2, -0.4], [1, 2, 1, 1])).unwrap().0);
        assert!(mt[2] < 1e-30);
        assert_eq!(&mt[..2], &opaque[..]);
    }

    #[test]
    fn all_transparent_rejected() {
        let d = t4(&[0.0, 0.0], [1, 2, 1, 1]);
        let m = depth_to_mask(&d).unwrap();
        assert!(modified_mask_with_flags(&m, &d, &[true, true]).is_err());
        assert!(modified_mask_with_flags(&m, &d, &[false]).is_err());
    }

    #[test]
    fn weighted_sum_example() {
        let w = ModifiedMask(t4(&[0.75, 0.25], [1, 2, 1, 1]));
        let feats = Tensor::from_slice(&[4.0f32, 8.0]).reshape([1, 2, 1, 1, 1]);
        assert_eq!(aggregate(&w, &feats).unwrap().double_value(&[0, 0, 0, 0]), 5.0);
        let onehot = ModifiedMask(t4(&[1.0, 0.0], [1, 2, 1, 1]));
        assert_eq!(aggregate(&onehot, &feats).unwrap().double_value(&[0, 0, 0, 0]), 4.0);
        let bad = Tensor::zeros([1, 3, 1, 1, 1], (Kind::Float, tch::Device::Cpu));
        assert!(aggregate(&w, &bad).is_err());
    }

    #[test]
    fn masked_classes_get_zero_weight() {
        let d = t4(&[0.0, 5.0, 1.0], [1, 3, 1, 1]);
        let masked = mask_inactive(&d, &[true, false, false]).unwrap();
        let m = to_vec(&depth_to_mask(&masked).unwrap().0);
        assert_eq!(m, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        let m = t4(&[0.5, 0.5], [1, 2, 1, 1]);
        assert_eq!(argmax_classes(&m).int64_value(&[0, 0, 0]), 0);
    }
}
