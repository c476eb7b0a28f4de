//! Categorical masks, region similarity (J) and keypoint PCK.

use crate::error::{shape_err, Error, Result};

/// Per-pixel class ids, row-major; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!("mask {}x{} given {} labels", height, width, labels.len()));
        }
        Ok(Mask { height, width, labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Nearest-neighbour resampling to `height × width`.
    pub fn upsample_nearest(&self, height: usize, width: usize) -> Mask {
        let mut out = Mask::zeros(height, width);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                out.labels[y * width + x] = self.labels[sy * self.width + sx];
            }
        }
        out
    }

    pub fn area(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Per-object IoU for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameJ {
    pub per_object: Vec<(u8, f64)>,
}

impl FrameJ {
    pub fn mean(&self) -> Option<f64> {
        if self.per_object.is_empty() {
            None
        } else {
            Some(self.per_object.iter().map(|(_, j)| j).sum::<f64>() / self.per_object.len() as f64)
        }
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|` for every foreground class present in `gt`.
/// A prediction at another resolution is resampled (nearest) onto `gt`.
pub fn region_similarity(pred: &Mask, gt: &Mask) -> FrameJ {
    let resized;
    let pred = if pred.height != gt.height || pred.width != gt.width {
        resized = pred.upsample_nearest(gt.height, gt.width);
        &resized
    } else {
        pred
    };
    let classes = gt.max_label().max(pred.max_label()) as usize;
    let mut inter = vec![0usize; classes + 1];
    let mut union = vec![0usize; classes + 1];
    let mut in_gt = vec![false; classes + 1];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        in_gt[g as usize] = true;
        if p == g {
            inter[g as usize] += 1;
            union[g as usize] += 1;
        } else {
            union[g as usize] += 1;
            union[p as usize] += 1;
        }
    }
    let per_object = (1..=classes)
        .filter(|&c| in_gt[c])
        .map(|c| (c as u8, inter[c] as f64 / union[c] as f64))
        .collect();
    FrameJ { per_object }
}

/// J over a sequence: per object averaged over the frames where it is
/// annotated, then averaged over objects. Frame 0 (the given annotation)
/// is excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceJ {
    pub per_object: Vec<(u8, f64)>,
    pub mean: f64,
}

pub fn sequence_j(preds: &[Mask], gts: &[Mask]) -> Result<SequenceJ> {
    if preds.len() != gts.len() {
        return Err(shape_err!("{} predictions for {} annotations", preds.len(), gts.len()));
    }
    let mut sums: Vec<(u8, f64, usize)> = Vec::new();
    for (p, g) in preds.iter().zip(gts).skip(1) {
        for (c, j) in region_similarity(p, g).per_object {
            match sums.iter_mut().find(|(k, _, _)| *k == c) {
                Some(entry) => {
                    entry.1 += j;
                    entry.2 += 1;
                }
                None => sums.push((c, j, 1)),
            }
        }
    }
    sums.sort_by_key(|e| e.0);
    let per_object: Vec<(u8, f64)> = sums.into_iter().map(|(c, s, n)| (c, s / n as f64)).collect();
    let mean = if per_object.is_empty() {
        0.0
    } else {
        per_object.iter().map(|(_, j)| j).sum::<f64>() / per_object.len() as f64
    };
    Ok(SequenceJ { per_object, mean })
}

/// Fraction of pixels whose predicted class matches.
pub fn pixel_accuracy(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.labels.len() != gt.labels.len() {
        return Err(shape_err!("mask sizes differ"));
    }
    let hit = pred.labels.iter().zip(&gt.labels).filter(|(a, b)| a == b).count();
    Ok(hit as f64 / gt.labels.len().max(1) as f64)
}

/// Per-class recall over a sequence, pooled over frames (frame 0 excluded)
/// and averaged over the classes present in the ground truth. Labelling
/// everything as background scores `1 / classes`.
pub fn class_mean_accuracy(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(shape_err!("{} predictions for {} annotations", preds.len(), gts.len()));
    }
    let mut counts = [(0usize, 0usize); 256];
    for (p, g) in preds.iter().zip(gts).skip(1) {
        if p.labels.len() != g.labels.len() {
            return Err(shape_err!("mask sizes differ"));
        }
        for (&a, &b) in p.labels.iter().zip(&g.labels) {
            counts[b as usize].1 += 1;
            counts[b as usize].0 += (a == b) as usize;
        }
    }
    let recalls: Vec<f64> = counts.iter().filter(|c| c.1 > 0).map(|&(hit, n)| hit as f64 / n as f64).collect();
    Ok(if recalls.is_empty() { 0.0 } else { recalls.iter().sum::<f64>() / recalls.len() as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub joint: usize,
    pub x: f64,
    pub y: f64,
}

/// Joints of one instance with its bounding-box size.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub joints: Vec<Keypoint>,
    pub bbox_width: f64,
    pub bbox_height: f64,
}

impl KeypointSet {
    pub fn new(joints: Vec<Keypoint>, bbox_width: f64, bbox_height: f64) -> Result<Self> {
        let mut ids: Vec<usize> = joints.iter().map(|k| k.joint).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate joint id".into()));
        }
        Ok(KeypointSet {
            joints,
            bbox_width,
            bbox_height,
        })
    }

    pub fn joint(&self, id: usize) -> Option<&Keypoint> {
        self.joints.iter().find(|k| k.joint == id)
    }
}

/// A ground-truth joint counts as correct when the predicted joint with the
/// same id lies within `tau · max(bbox height, bbox width)`; missing joints
/// count as wrong.
pub fn pck(pred: &KeypointSet, gt: &KeypointSet, tau: f64) -> f64 {
    if gt.joints.is_empty() {
        return 0.0;
    }
    let radius = tau * gt.bbox_height.max(gt.bbox_width);
    let correct = gt
        .joints
        .iter()
        .filter(|g| {
            pred.joint(g.joint)
                .is_some_and(|p| ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt() <= radius)
        })
        .count();
    correct as f64 / gt.joints.len() as f64
}
