//! Linear attribute directions in the factorized latent space and the
//! locality metrics used to compare slot-restricted with full-space edits.

use std::collections::BTreeSet;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::generator::{tensor_to_bundles, GenerateOptions, Generator};
use crate::latent::LatentBundle;
use crate::logistic;

const L2: f64 = 1e-3;
const MAX_ITER: usize = 500;
/// Samples below this count are fitted without a validation split.
const MIN_SPLIT: usize = 10;

/// One unit vector (or zero) per latent slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    pub attribute: String,
    pub vectors: Vec<Vec<f32>>,
    pub train_accuracy: f64,
    /// `None` when the sample set was too small to hold out a split.
    pub validation_accuracy: Option<f64>,
    pub sample_count: usize,
}

impl EditDirection {
    pub fn num_slots(&self) -> usize {
        self.vectors.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("direction serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

fn bits_key(b: &LatentBundle) -> Vec<u32> {
    b.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn in_validation(key: &[u32]) -> bool {
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    h.finish() % 10 < 3
}

/// Fits a logistic separator on the concatenated slots and splits its normal
/// back into per-slot unit vectors.
///
/// The samples are put in a canonical order first, so the result does not
/// depend on how they were supplied. Roughly 30% of them, chosen by a hash
/// of their contents, are held out for `validation_accuracy`.
pub fn fit_linear_boundary(samples: &[(LatentBundle, bool)], attribute: &str) -> Result<EditDirection> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples to fit".into()))?;
    let (k, d) = (first.0.num_classes(), first.0.latent_dim());
    if samples.iter().any(|(b, _)| b.num_classes() != k || b.latent_dim() != d) {
        return Err(Error::Shape("samples must share K and latent_dim".into()));
    }
    if samples.iter().all(|s| s.1) || samples.iter().all(|s| !s.1) {
        return Err(Error::InvalidArgument("both labels must be present".into()));
    }
    if samples.iter().all(|(b, _)| b.as_slice() == first.0.as_slice()) {
        return Err(Error::InvalidArgument("all samples are identical".into()));
    }

    let mut keyed: Vec<(Vec<u32>, bool, &LatentBundle)> =
        samples.iter().map(|(b, l)| (bits_key(b), *l, b)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

    let split = samples.len() >= MIN_SPLIT;
    let (mut train_x, mut train_y, mut val_x, mut val_y) = (vec![], vec![], vec![], vec![]);
    for (key, label, bundle) in &keyed {
        let row: Vec<f64> = bundle.as_slice().iter().map(|&v| v as f64).collect();
        if split && in_validation(key) {
            val_x.push(row);
            val_y.push(*label);
        } else {
            train_x.push(row);
            train_y.push(*label);
        }
    }
    if train_y.iter().all(|&l| l) || train_y.iter().all(|&l| !l) {
        return Err(Error::InvalidArgument("training split holds a single label".into()));
    }

    let model = logistic::fit(&train_x, &train_y, L2, MAX_ITER);
    let vectors = model
        .weights
        .chunks(d)
        .map(|slot| {
            let norm = slot.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                vec![0.0; d]
            } else {
                slot.iter().map(|v| (v / norm) as f32).collect()
            }
        })
        .collect();
    Ok(EditDirection {
        attribute: attribute.to_string(),
        vectors,
        train_accuracy: model.accuracy(&train_x, &train_y),
        validation_accuracy: (!val_x.is_empty()).then(|| model.accuracy(&val_x, &val_y)),
        sample_count: samples.len(),
    })
}

/// `bundle[i] + alpha * dir[i]` for every slot `i` in `slots`.
pub fn apply_edit(
    bundle: &LatentBundle,
    direction: &EditDirection,
    alpha: f32,
    slots: &BTreeSet<usize>,
) -> Result<LatentBundle> {
    if direction.num_slots() != bundle.num_slots()
        || direction.vectors.iter().any(|v| v.len() != bundle.latent_dim())
    {
        return Err(Error::Shape(format!(
            "direction has {} slots, bundle has {} slots of dim {}",
            direction.num_slots(),
            bundle.num_slots(),
            bundle.latent_dim()
        )));
    }
    let mut out = bundle.clone();
    for &slot in slots {
        for (w, v) in out.slot_mut(slot)?.iter_mut().zip(&direction.vectors[slot]) {
            *w += alpha * v;
        }
    }
    Ok(out)
}

/// `1 - mean |a - b|` for images already scaled to `[0, 1]`.
pub fn pixel_preservation(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("images differ in shape: {:?} vs {:?}", a.size(), b.size())));
    }
    Ok(1.0 - (a - b).abs().mean(Kind::Double).double_value(&[]))
}

/// Maps a generator image from `[-1, 1]` to `[0, 1]`.
pub fn to_unit(image: &Tensor) -> Tensor {
    (image + 1.0) * 0.5
}

/// A single rendered sample: `[3, R, R]` image in `[-1, 1]` and `[K, R, R]`
/// segmentation.
#[derive(Debug)]
pub struct Rendered {
    pub image: Tensor,
    pub segmentation: Tensor,
}

/// Maps a rendered sample to an attribute score in `[0, 1]`.
pub trait Scorer {
    fn score(&self, sample: &Rendered) -> f64;
}

/// Soft area of one class: the mean of its segmentation channel clamped to
/// `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ClassAreaScorer {
    pub class: usize,
}

impl Scorer for ClassAreaScorer {
    fn score(&self, sample: &Rendered) -> f64 {
        sample
            .segmentation
            .get(self.class as i64)
            .clamp(0.0, 1.0)
            .mean(Kind::Double)
            .double_value(&[])
    }
}

fn checked_score(scorer: &dyn Scorer, sample: &Rendered) -> Result<f64> {
    let s = scorer.score(sample);
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("scorer returned {s}, outside [0, 1]")));
    }
    Ok(s)
}

/// `scorer(after) - scorer(before)`.
pub fn score_gain(scorer: &dyn Scorer, before: &Rendered, after: &Rendered) -> Result<f64> {
    Ok(checked_score(scorer, after)? - checked_score(scorer, before)?)
}

/// Renders bundles one at a time, so each result is independent of what else
/// is being rendered.
pub fn render(generator: &Generator, bundle: &LatentBundle) -> Result<Rendered> {
    let out = generator.generate(std::slice::from_ref(bundle), &GenerateOptions::default(), None)?;
    Ok(Rendered {
        image: out.render.image.get(0),
        segmentation: out.render.segmentation.get(0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub preservation: f64,
    pub score_gain: f64,
}

/// Preservation and score gain of each edit strength against the unedited
/// bundle.
pub fn sweep_curve(
    generator: &Generator,
    bundle: &LatentBundle,
    direction: &EditDirection,
    slots: &BTreeSet<usize>,
    alphas: &[f64],
    scorer: &dyn Scorer,
) -> Result<Vec<CurvePoint>> {
    let base = render(generator, bundle)?;
    let base_unit = to_unit(&base.image);
    alphas
        .iter()
        .map(|&alpha| {
            let edited = render(generator, &apply_edit(bundle, direction, alpha as f32, slots)?)?;
            Ok(CurvePoint {
                alpha,
                preservation: pixel_preservation(&base_unit, &to_unit(&edited.image))?,
                score_gain: score_gain(scorer, &base, &edited)?,
            })
        })
        .collect()
}

/// Parses `start:stop:step` into an inclusive list.
pub fn parse_alphas(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("alphas must look like start:stop:step, got `{spec}`"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut text = String::from("alpha,preservation,score_gain\n");
    for p in points {
        text.push_str(&format!("{},{},{}\n", p.alpha, p.preservation, p.score_gain));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const CURVE_COLORS: [[u8; 3]; 4] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [148, 103, 189]];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=steps {
        let x = x0 + (x1 - x0) * i / steps;
        let y = y0 + (y1 - y0) * i / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Plots score gain (vertical) against preservation (horizontal), one
/// polyline per curve, on a white canvas with axes.
pub fn plot_curves(curves: &[&[CurvePoint]]) -> RgbImage {
    let (w, h, margin) = (360i64, 260i64, 24i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let pts = curves.iter().flat_map(|c| c.iter());
    let (mut pmin, mut pmax, mut gmin, mut gmax) = (1.0f64, 1.0f64, 0.0f64, 0.0f64);
    for p in pts {
        pmin = pmin.min(p.preservation);
        pmax = pmax.max(p.preservation);
        gmin = gmin.min(p.score_gain);
        gmax = gmax.max(p.score_gain);
    }
    let span = |lo: f64, hi: f64| if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let to_px = |p: &CurvePoint| {
        let x = margin + ((p.preservation - pmin) / span(pmin, pmax) * (w - 2 * margin) as f64).round() as i64;
        let y = h - margin - ((p.score_gain - gmin) / span(gmin, gmax) * (h - 2 * margin) as f64).round() as i64;
        (x, y)
    };
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (margin, h - margin), (w - margin, h - margin), axis);
    draw_line(&mut img, (margin, margin), (margin, h - margin), axis);
    for (i, curve) in curves.iter().enumerate() {
        let color = Rgb(CURVE_COLORS[i % CURVE_COLORS.len()]);
        for pair in curve.windows(2) {
            draw_line(&mut img, to_px(&pair[0]), to_px(&pair[1]), color);
        }
        for p in curve.iter() {
            let (x, y) = to_px(p);
            for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                draw_line(&mut img, (x + dx, y + dy), (x + dx, y + dy), color);
            }
        }
    }
    img
}

/// Preservation at the first point along the curve where the score gain
/// reaches `target`, linearly interpolated between neighbouring alphas.
pub fn preservation_at_gain(curve: &[CurvePoint], target: f64) -> Option<f64> {
    for pair in curve.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.score_gain <= target && b.score_gain >= target {
            let t = if b.score_gain > a.score_gain {
                (target - a.score_gain) / (b.score_gain - a.score_gain)
            } else {
                0.0
            };
            return Some(a.preservation + t * (b.preservation - a.preservation));
        }
    }
    None
}

/// Outcome of comparing a restricted and a full-space edit on one bundle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalityRecord {
    pub matched_gain: f64,
    pub restricted: Option<f64>,
    pub full: Option<f64>,
}

impl LocalityRecord {
    pub fn restricted_wins(&self) -> bool {
        matches!((self.restricted, self.full), (Some(r), Some(f)) if r > f)
    }
}

/// Compares the two edits at half of the smaller of their maximum gains.
/// A bundle where either edit never raises the score is recorded without
/// preservations and counts against the restricted edit.
pub fn compare_at_matched_gain(restricted: &[CurvePoint], full: &[CurvePoint]) -> LocalityRecord {
    let max_gain = |c: &[CurvePoint]| c.iter().map(|p| p.score_gain).fold(f64::NEG_INFINITY, f64::max);
    let target = 0.5 * max_gain(restricted).min(max_gain(full));
    if !(target > 0.0) {
        return LocalityRecord {
            matched_gain: target,
            restricted: None,
            full: None,
        };
    }
    LocalityRecord {
        matched_gain: target,
        restricted: preservation_at_gain(restricted, target),
        full: preservation_at_gain(full, target),
    }
}

/// Draws bundles whose slots each come from an independent mapped code, so
/// a classifier can tell which slots matter.
pub fn sample_independent_slots<R: Rng + ?Sized>(
    generator: &Generator,
    rng: &mut R,
    count: usize,
) -> Result<Vec<LatentBundle>> {
    let s = generator.num_slots() as i64;
    let d = generator.config.latent_dim as i64;
    let z = crate::nn::randn(rng, &[count as i64 * s, d]);
    let w = tch::no_grad(|| generator.mapping.forward(&z))?;
    tensor_to_bundles(&w.reshape([count as i64, s, d]), generator.num_classes())
}

/// Scores bundles in batches of `chunk`.
pub fn score_bundles(generator: &Generator, bundles: &[LatentBundle], scorer: &dyn Scorer) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(bundles.len());
    for chunk in bundles.chunks(32) {
        let out = generator.generate(chunk, &GenerateOptions::default(), None)?;
        for i in 0..chunk.len() as i64 {
            let sample = Rendered {
                image: out.render.image.get(i),
                segmentation: out.render.segmentation.get(i),
            };
            scores.push(checked_score(scorer, &sample)?);
        }
    }
    Ok(scores)
}

/// Labels samples by whether their score exceeds the median score.
pub fn median_labels(scores: &[f64]) -> Vec<bool> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    scores.iter().map(|&s| s >= median).collect()
}

/// Samples, scores, labels and fits a direction for `attribute`.
pub fn fit_attribute<R: Rng + ?Sized>(
    generator: &Generator,
    rng: &mut R,
    count: usize,
    scorer: &dyn Scorer,
    attribute: &str,
) -> Result<EditDirection> {
    let bundles = sample_independent_slots(generator, rng, count)?;
    let scores = score_bundles(generator, &bundles, scorer)?;
    let labels = median_labels(&scores);
    let samples: Vec<(LatentBundle, bool)> = bundles.into_iter().zip(labels).collect();
    fit_linear_boundary(&samples, attribute)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(g: f64, p: f64) -> CurvePoint {
        CurvePoint {
            alpha: 0.0,
            preservation: p,
            score_gain: g,
        }
    }

    #[test]
    fn alpha_ranges_are_inclusive() {
        assert_eq!(parse_alphas("-3:3:0.5").unwrap().len(), 13);
        assert_eq!(parse_alphas("0:0:1").unwrap(), vec![0.0]);
        assert!(parse_alphas("1:0:1").is_err());
        assert!(parse_alphas("0:1").is_err());
    }

    #[test]
    fn interpolates_at_first_crossing() {
        let curve = [point(0.0, 1.0), point(0.2, 0.9), point(0.4, 0.7)];
        assert!((preservation_at_gain(&curve, 0.3).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(preservation_at_gain(&curve, 0.5), None);
    }

    #[test]
    fn no_gain_counts_against_the_restricted_edit() {
        let flat = [point(0.0, 1.0), point(0.0, 0.9)];
        let rising = [point(0.0, 1.0), point(0.4, 0.5)];
        assert!(!compare_at_matched_gain(&flat, &rising).restricted_wins());
        let better = [point(0.0, 1.0), point(0.4, 0.95)];
        let record = compare_at_matched_gain(&better, &rising);
        assert!((record.matched_gain - 0.2).abs() < 1e-12);
        assert!(record.restricted_wins());
    }
}
