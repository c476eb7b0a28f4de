//! FIFO store of feature points from other videos, encoded with a moving
//! average of the live encoder.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::affinity::NegativeSet;
use crate::diff::Tape;
use crate::encoder::{EncoderParams, FeatureMap, FEATURE_CHANNELS, STRIDE};
use crate::error::{shape_err, Error, Result};
use crate::frame::Frame;
use crate::position::ShiftMode;

pub const DEFAULT_MOMENTUM: f64 = 0.999;
pub const DEFAULT_CAPACITY: usize = 90;
pub const DEFAULT_POINTS_PER_FRAME: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub video_id: usize,
    /// `points_per_frame × c` vectors, row-major.
    pub vectors: Vec<f64>,
    /// Grid cells the vectors were sampled from.
    pub cells: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    entries: VecDeque<BankEntry>,
    capacity: usize,
    points_per_frame: usize,
    momentum: f64,
    temperature: f64,
    shift_mode: ShiftMode,
    ema: EncoderParams,
    reads: usize,
}

impl MemoryBank {
    pub fn new(
        live: &EncoderParams,
        capacity: usize,
        points_per_frame: usize,
        momentum: f64,
        temperature: f64,
        shift_mode: ShiftMode,
    ) -> Result<Self> {
        if capacity == 0 || points_per_frame == 0 {
            return Err(Error::Config("bank capacity and points per frame must be positive".into()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(MemoryBank {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            points_per_frame,
            momentum,
            temperature,
            shift_mode,
            ema: live.clone(),
            reads: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn points_per_frame(&self) -> usize {
        self.points_per_frame
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn ema_params(&self) -> &EncoderParams {
        &self.ema
    }

    /// Number of `gather_negatives` calls so far.
    pub fn reads(&self) -> usize {
        self.reads
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Encodes `frame` with the moving-average encoder under a modulated
    /// position map and stores `points_per_frame` distinct cells.
    pub fn push(&mut self, frame: &Frame, video_id: usize, rng: &mut impl Rng) -> Result<()> {
        let feats = self.encode_negative(frame, rng)?;
        self.push_features(&feats, video_id, rng)
    }

    fn encode_negative(&self, frame: &Frame, rng: &mut impl Rng) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let vars = self.ema.on_tape(&mut tape, false)?;
        let pos = self.ema.position.negative_on_tape(&mut tape, &vars.position, self.shift_mode, rng)?;
        let raw = self.ema.forward(&mut tape, &vars, frame, pos)?;
        let emb = self.ema.embed(&mut tape, raw, self.temperature)?;
        FeatureMap::from_rows(
            frame.height() / STRIDE,
            frame.width() / STRIDE,
            FEATURE_CHANNELS,
            tape.value(emb).values(),
        )
    }

    /// Stores sampled vectors of an already-encoded map.
    pub fn push_features(&mut self, feats: &FeatureMap, video_id: usize, rng: &mut impl Rng) -> Result<()> {
        let n = feats.pixels();
        if n < self.points_per_frame {
            return Err(shape_err!("{} cells cannot supply {} points", n, self.points_per_frame));
        }
        let cells: Vec<usize> = index::sample(rng, n, self.points_per_frame).into_vec();
        let vectors = cells.iter().flat_map(|&i| feats.vector(i)).collect();
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(BankEntry {
            video_id,
            vectors,
            cells,
        });
        Ok(())
    }

    /// Every stored vector whose source video differs from `current_video`.
    pub fn gather_negatives(&mut self, current_video: usize) -> NegativeSet {
        self.reads += 1;
        let dim = self.entries.front().map_or(FEATURE_CHANNELS, |e| e.vectors.len() / self.points_per_frame);
        let mut set = NegativeSet::new(dim);
        for e in self.entries.iter().filter(|e| e.video_id != current_video) {
            for k in 0..self.points_per_frame {
                set.push(&e.vectors[k * dim..(k + 1) * dim], e.video_id)
                    .expect("uniform dimension");
            }
        }
        debug_assert!(set.sources().iter().all(|&s| s != current_video));
        set
    }

    /// `ema ← β·ema + (1 − β)·live`.
    pub fn ema_update(&mut self, live: &EncoderParams) -> Result<()> {
        if !self.ema.same_shapes(live) {
            return Err(Error::Shape("live parameters do not match the moving average".into()));
        }
        let beta = self.momentum;
        for (e, l) in self.ema.tensors_mut().into_iter().zip(live.tensors()) {
            for (a, b) in e.values_mut().iter_mut().zip(l.values()) {
                *a = beta * *a + (1.0 - beta) * b;
            }
        }
        Ok(())
    }

    /// Resets the moving average to `live`.
    pub fn sync(&mut self, live: &EncoderParams) {
        self.ema = live.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::ColorSpace;
    use crate::position::PositionKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> EncoderParams {
        EncoderParams::new(PositionKind::Absolute1D, 16, 16, 0).unwrap()
    }

    fn fmap(fill: f64) -> FeatureMap {
        FeatureMap::new(16, 16, 2, vec![fill; 512]).unwrap()
    }

    fn bank(capacity: usize, momentum: f64) -> MemoryBank {
        MemoryBank::new(&params(), capacity, 4, momentum, 0.07, ShiftMode::Shift).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut b = bank(3, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in 0..4 {
            b.push_features(&fmap(v as f64), v, &mut rng).unwrap();
        }
        let ids: Vec<usize> = b.entries().map(|e| e.video_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
    }

    #[test]
    fn distinct_seeded_cells() {
        let mut b = bank(3, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        b.push_features(&fmap(0.0), 0, &mut rng).unwrap();
        let mut cells = b.entries().next().unwrap().cells.clone();
        cells.sort();
        cells.dedup();
        assert_eq!(cells.len(), 4);

        let mut again = bank(3, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        again.push_features(&fmap(0.0), 0, &mut rng).unwrap();
        assert_eq!(again.entries().next().unwrap().cells, b.entries().next().unwrap().cells);
    }

    #[test]
    fn excludes_current_video() {
        let mut b = bank(90, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            b.push_features(&fmap(1.0), 2, &mut rng).unwrap();
        }
        assert!(b.gather_negatives(2).is_empty());
        for v in 0..90 {
            b.push_features(&fmap(1.0), 100 + v, &mut rng).unwrap();
        }
        let n = b.gather_negatives(2);
        assert_eq!(n.len(), 360);
        assert!(n.sources().iter().all(|&s| s != 2));
        assert_eq!(b.reads(), 2);
    }

    #[test]
    fn full_scale_negative_count() {
        let p = params();
        let mut b = MemoryBank::new(&p, 1440, 4, 0.999, 0.07, ShiftMode::Shift).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in 0..1440 {
            b.push_features(&fmap(0.5), v + 1, &mut rng).unwrap();
        }
        assert_eq!(b.gather_negatives(0).len(), 1440 * 4);
    }

    #[test]
    fn stored_vectors_are_not_mutated_by_later_pushes() {
        let mut b = bank(4, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.push_features(&fmap(0.25), 0, &mut rng).unwrap();
        let first = b.entries().next().unwrap().clone();
        b.push_features(&fmap(0.75), 1, &mut rng).unwrap();
        assert_eq!(b.entries().next().unwrap(), &first);
    }

    #[test]
    fn ema_arithmetic() {
        let live = params();
        let mut zero = live.clone();
        zero.tensors_mut().into_iter().for_each(|t| t.values_mut().fill(0.0));
        let mut one = live.clone();
        one.tensors_mut().into_iter().for_each(|t| t.values_mut().fill(1.0));

        let mut b = MemoryBank::new(&zero, 2, 1, 1.0, 0.07, ShiftMode::None).unwrap();
        b.ema_update(&one).unwrap();
        assert_eq!(b.ema_params(), &zero);

        let mut b = MemoryBank::new(&zero, 2, 1, 0.0, 0.07, ShiftMode::None).unwrap();
        b.ema_update(&one).unwrap();
        assert_eq!(b.ema_params(), &one);

        let mut b = MemoryBank::new(&zero, 2, 1, 0.99, 0.07, ShiftMode::None).unwrap();
        b.ema_update(&one).unwrap();
        assert!(b.ema_params().tensors().iter().all(|t| t.values().iter().all(|&v| (v - 0.01).abs() < 1e-15)));
    }

    #[test]
    fn ema_converges_geometrically() {
        let live = params();
        let mut start = live.clone();
        start.tensors_mut().into_iter().for_each(|t| t.values_mut().fill(0.0));
        let mut b = MemoryBank::new(&start, 2, 1, 0.9, 0.07, ShiftMode::None).unwrap();
        let gap = |b: &MemoryBank| {
            b.ema_params()
                .tensors()
                .iter()
                .zip(live.tensors())
                .flat_map(|(e, l)| e.values().iter().zip(l.values()).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max)
        };
        let g0 = gap(&b);
        for _ in 0..50 {
            b.ema_update(&live).unwrap();
        }
        assert!((gap(&b) - g0 * 0.9f64.powi(50)).abs() < 1e-12);
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut b = bank(2, 0.9);
        let other = EncoderParams::new(PositionKind::Absolute2D, 16, 16, 0).unwrap();
        assert!(matches!(b.ema_update(&other), Err(Error::Shape(_))));
    }

    #[test]
    fn push_encodes_frames() {
        let mut b = bank(2, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = Frame::new(16, 16, ColorSpace::Lab, (0..768).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        b.push(&frame, 3, &mut rng).unwrap();
        let e = b.entries().next().unwrap();
        assert_eq!(e.vectors.len(), 4 * FEATURE_CHANNELS);
        let norm: f64 = e.vectors[..FEATURE_CHANNELS].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.07f64.sqrt().recip()).abs() < 1e-9);
    }
}
