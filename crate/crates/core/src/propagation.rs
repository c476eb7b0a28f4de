//! Label propagation through learned affinities with a fixed set of
//! earlier reference frames.

use crate::affinity::intra_affinity;
use crate::compactness::{filter_affinity_with, DEFAULT_COMPONENTS, DEFAULT_SIGMA2_MIN};
use crate::encoder::{encode_frame, EncoderParams, FeatureMap, STRIDE};
use crate::error::{shape_err, Error, Result};
use crate::frame::{ColorSpace, Frame};
use crate::metrics::{Keypoint, KeypointSet, Mask};

/// Per-pixel class distributions on an `h × w` grid, `[h·w, K]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract(format!("label maps need at least 2 classes, got {classes}")));
        }
        if values.len() != height * width * classes {
            return Err(shape_err!(
                "label map {}x{}x{} given {} values",
                height,
                width,
                classes,
                values.len()
            ));
        }
        Ok(LabelMap {
            height,
            width,
            classes,
            values,
        })
    }

    /// One-hot labels of `mask` averaged over `factor × factor` blocks.
    pub fn from_mask(mask: &Mask, classes: usize, factor: usize) -> Result<Self> {
        if factor == 0 || mask.height % factor != 0 || mask.width % factor != 0 {
            return Err(shape_err!("{}x{} mask is not divisible by {}", mask.height, mask.width, factor));
        }
        if mask.max_label() as usize >= classes {
            return Err(shape_err!("mask label {} with {} classes", mask.max_label(), classes));
        }
        let (h, w) = (mask.height / factor, mask.width / factor);
        let mut values = vec![0.0; h * w * classes];
        let unit = 1.0 / (factor * factor) as f64;
        for y in 0..mask.height {
            for x in 0..mask.width {
                let cell = (y / factor) * w + x / factor;
                values[cell * classes + mask.get(x, y) as usize] += unit;
            }
        }
        LabelMap::new(h, w, classes, values)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dist(&self, pixel: usize) -> &[f64] {
        &self.values[pixel * self.classes..(pixel + 1) * self.classes]
    }

    fn renormalize(&mut self) {
        let k = self.classes;
        for d in self.values.chunks_mut(k) {
            let s: f64 = d.iter().sum();
            if s > 0.0 {
                d.iter_mut().for_each(|v| *v /= s);
            } else {
                d.iter_mut().for_each(|v| *v = 1.0 / k as f64);
            }
        }
    }

    /// Most likely class per cell.
    pub fn argmax(&self) -> Mask {
        let labels = (0..self.pixels()).map(|i| argmax(self.dist(i)) as u8).collect();
        Mask {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Bilinearly resamples the distributions to `height × width`
    /// (cell centres aligned) and takes the most likely class.
    pub fn upsample_argmax(&self, height: usize, width: usize) -> Mask {
        let (sy, sx) = (self.height as f64 / height as f64, self.width as f64 / width as f64);
        let mut out = Mask::zeros(height, width);
        let mut acc = vec![0.0; self.classes];
        for y in 0..height {
            let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, fy) = (v.floor() as usize, v - v.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, fx) = (u.floor() as usize, u - u.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                acc.fill(0.0);
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        for (a, d) in acc.iter_mut().zip(self.dist(yy * self.width + xx)) {
                            *a += wgt * d;
                        }
                    }
                }
                out.set(x, y, argmax(&acc) as u8);
            }
        }
        out
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Options for one propagation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationOptions {
    /// Chebyshev radius of the matching window, in feature cells.
    pub window: Option<usize>,
    /// Replace affinities by their compact mixture fit.
    pub compact: bool,
    pub components: usize,
    pub sigma2_min: f64,
    /// Keep the long-term references (frames 0 and 5).
    pub long_term: bool,
    /// Upsample label distributions bilinearly before the argmax instead
    /// of taking the nearest cell.
    pub bilinear: bool,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        PropagationOptions {
            window: Some(3),
            compact: true,
            components: DEFAULT_COMPONENTS,
            sigma2_min: DEFAULT_SIGMA2_MIN,
            long_term: true,
            bilinear: false,
        }
    }
}

/// Earlier frames used as references for frame `t`: `{0, 5, t−5, t−3, t−1}`
/// restricted to `[0, t)`, ascending and deduplicated.
pub fn reference_schedule(t: usize) -> Vec<usize> {
    reference_schedule_with(t, true)
}

/// With `long_term = false` frames 0 and 5 are only kept when they are also
/// short-term references.
pub fn reference_schedule_with(t: usize, long_term: bool) -> Vec<usize> {
    if t == 0 {
        return Vec::new();
    }
    let t = t as isize;
    let mut refs: Vec<isize> = vec![t - 5, t - 3, t - 1];
    if long_term {
        refs.extend([0, 5]);
    }
    let mut out: Vec<usize> = refs.into_iter().filter(|&r| r >= 0 && r < t).map(|r| r as usize).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Labels for `query` as the mean over references of affinity-weighted
/// reference labels, renormalised per pixel.
pub fn propagate_step(query: &FeatureMap, references: &[(&FeatureMap, &LabelMap)], opts: &PropagationOptions) -> Result<LabelMap> {
    let Some((_, first)) = references.first() else {
        return Err(Error::Contract("propagation needs at least one reference".into()));
    };
    let k = first.classes;
    let n = query.pixels();
    let mut acc = vec![0.0; n * k];
    for (feats, labels) in references {
        if labels.classes != k || labels.pixels() != feats.pixels() {
            return Err(shape_err!("reference labels do not match reference features"));
        }
        let mut a = intra_affinity(query, feats, opts.window)?;
        if opts.compact {
            a = filter_affinity_with(&a, opts.components, opts.sigma2_min);
        }
        for i in 0..n {
            let row = a.row(i);
            let out = &mut acc[i * k..(i + 1) * k];
            for (j, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, l) in out.iter_mut().zip(labels.dist(j)) {
                    *o += w * l;
                }
            }
        }
    }
    let scale = 1.0 / references.len() as f64;
    acc.iter_mut().for_each(|v| *v *= scale);
    let mut out = LabelMap::new(query.height, query.width, k, acc)?;
    out.renormalize();
    Ok(out)
}

/// Propagates `first` through a sequence of feature maps; soft labels feed
/// later reference slots.
pub fn propagate_features(features: &[FeatureMap], first: LabelMap, opts: &PropagationOptions) -> Result<Vec<LabelMap>> {
    let mut labels = Vec::with_capacity(features.len());
    labels.push(first);
    for t in 1..features.len() {
        let refs: Vec<(&FeatureMap, &LabelMap)> = reference_schedule_with(t, opts.long_term)
            .into_iter()
            .map(|r| (&features[r], &labels[r]))
            .collect();
        let next = propagate_step(&features[t], &refs, opts)?;
        labels.push(next);
    }
    Ok(labels)
}

/// Encodes `frames` in `space` and propagates the frame-0 mask; returns
/// one full-resolution mask per frame (frame 0 is the given annotation).
pub fn propagate_masks(
    params: &EncoderParams,
    temperature: f64,
    space: ColorSpace,
    frames: &[Frame],
    first: &Mask,
    classes: usize,
    opts: &PropagationOptions,
) -> Result<Vec<Mask>> {
    let features = frames
        .iter()
        .map(|f| encode_frame(&f.to_space(space), params, temperature))
        .collect::<Result<Vec<_>>>()?;
    let labels0 = LabelMap::from_mask(first, classes, STRIDE)?;
    let labels = propagate_features(&features, labels0, opts)?;
    let mut masks = Vec::with_capacity(labels.len());
    masks.push(first.clone());
    for l in &labels[1..] {
        masks.push(if opts.bilinear {
            l.upsample_argmax(first.height, first.width)
        } else {
            l.argmax().upsample_nearest(first.height, first.width)
        });
    }
    Ok(masks)
}

/// One background channel plus one channel per joint, at cell resolution.
pub fn keypoints_to_labels(kps: &KeypointSet, height: usize, width: usize, stride: usize) -> Result<LabelMap> {
    let (h, w) = (height / stride, width / stride);
    let k = kps.joints.len() + 1;
    let mut values = vec![0.0; h * w * k];
    for i in 0..h * w {
        values[i * k] = 1.0;
    }
    for (c, kp) in kps.joints.iter().enumerate() {
        if kp.x < 0.0 || kp.y < 0.0 || kp.x >= width as f64 || kp.y >= height as f64 {
            return Err(Error::Range(format!("joint {} at ({}, {}) outside frame", kp.joint, kp.x, kp.y)));
        }
        let cell = (kp.y as usize / stride) * w + kp.x as usize / stride;
        values[cell * k] = 0.0;
        values[cell * k + c + 1] = 1.0;
    }
    let mut out = LabelMap::new(h, w, k, values)?;
    out.renormalize();
    Ok(out)
}

/// Each joint at the cell centre where its channel peaks.
pub fn labels_to_keypoints(labels: &LabelMap, template: &KeypointSet, stride: usize) -> KeypointSet {
    let joints = template
        .joints
        .iter()
        .enumerate()
        .map(|(c, kp)| {
            let best = (0..labels.pixels())
                .max_by(|&a, &b| labels.dist(a)[c + 1].total_cmp(&labels.dist(b)[c + 1]).then(b.cmp(&a)))
                .unwrap_or(0);
            let (cx, cy) = (best % labels.width, best / labels.width);
            Keypoint {
                joint: kp.joint,
                x: (cx as f64 + 0.5) * stride as f64 - 0.5,
                y: (cy as f64 + 0.5) * stride as f64 - 0.5,
            }
        })
        .collect();
    KeypointSet {
        joints,
        bbox_width: template.bbox_width,
        bbox_height: template.bbox_height,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(reference_schedule(1), vec![0]);
        assert_eq!(reference_schedule(4), vec![0, 1, 3]);
        assert_eq!(reference_schedule(20), vec![0, 5, 15, 17, 19]);
        assert_eq!(reference_schedule_with(20, false), vec![15, 17, 19]);
        assert_eq!(reference_schedule_with(1, false), vec![0]);
    }

    #[test]
    fn schedule_is_monotone_and_has_previous_frame() {
        for t in 1..60 {
            let s = reference_schedule(t);
            assert!(s.contains(&(t - 1)));
            assert_eq!(*s.last().unwrap(), t - 1);
            let next = reference_schedule(t + 1);
            assert!(next.last() > s.last());
        }
    }

    fn one_hot_features(h: usize, w: usize, scale: f64) -> FeatureMap {
        let n = h * w;
        let rows: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |c| if c == i { scale } else { 0.0 }))
            .collect();
        FeatureMap::from_rows(h, w, n, &rows).unwrap()
    }

    fn labels(h: usize, w: usize, mask: &[u8]) -> LabelMap {
        LabelMap::from_mask(&Mask::new(h, w, mask.to_vec()).unwrap(), 2, 1).unwrap()
    }

    #[test]
    fn identity_affinity_copies_labels() {
        let f = one_hot_features(2, 2, 60.0);
        let l = labels(2, 2, &[0, 1, 1, 0]);
        let opts = PropagationOptions {
            window: None,
            compact: false,
            ..Default::default()
        };
        let out = propagate_step(&f, &[(&f, &l)], &opts).unwrap();
        for (a, b) in out.values.iter().zip(&l.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_reference_labels_are_reproduced() {
        let q = FeatureMap::from_rows(1, 3, 2, &[0.3, 0.1, -0.2, 0.5, 0.7, 0.7]).unwrap();
        let r = FeatureMap::from_rows(1, 3, 2, &[1.0, 0.0, 0.2, 0.1, 0.0, -1.0]).unwrap();
        let l = labels(1, 3, &[1, 1, 1]);
        let opts = PropagationOptions {
            window: None,
            compact: false,
            ..Default::default()
        };
        let out = propagate_step(&q, &[(&r, &l), (&q, &l)], &opts).unwrap();
        for (a, b) in out.values.iter().zip(&l.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_are_distributions() {
        let q = one_hot_features(3, 3, 2.0);
        let l = labels(3, 3, &[0, 1, 0, 1, 1, 0, 0, 0, 1]);
        for compact in [false, true] {
            let opts = PropagationOptions {
                window: Some(1),
                compact,
                ..Default::default()
            };
            let out = propagate_step(&q, &[(&q, &l)], &opts).unwrap();
            for i in 0..9 {
                let d = out.dist(i);
                assert!(d.iter().all(|&v| v >= 0.0));
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_references_rejected() {
        let q = one_hot_features(1, 2, 1.0);
        assert!(matches!(
            propagate_step(&q, &[], &PropagationOptions::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bilinear_upsampling_recovers_aligned_block() {
        let mut m = Mask::zeros(16, 16);
        for y in 4..12 {
            for x in 4..12 {
                m.set(x, y, 1);
            }
        }
        let l = LabelMap::from_mask(&m, 2, 4).unwrap();
        let up = l.upsample_argmax(16, 16);
        let j = crate::metrics::region_similarity(&up, &m).mean().unwrap();
        assert!(j > 0.85, "{j}");
    }

    #[test]
    fn keypoints_round_trip_through_labels() {
        let kps = KeypointSet::new(
            vec![Keypoint { joint: 3, x: 9.5, y: 5.5 }, Keypoint { joint: 7, x: 1.5, y: 13.5 }],
            10.0,
            10.0,
        )
        .unwrap();
        let l = keypoints_to_labels(&kps, 16, 16, 4).unwrap();
        let back = labels_to_keypoints(&l, &kps, 4);
        assert_eq!(crate::metrics::pck(&back, &kps, 0.1), 1.0);
    }
}
