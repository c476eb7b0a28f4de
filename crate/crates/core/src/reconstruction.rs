//! Copy-based reconstruction of a query frame from reference colours, the
//! reconstruction loss, and the input bottleneck that keeps the task from
//! being solved by colour copying alone.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::affinity::AffinityMatrix;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::frame::{ColorSpace, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BottleneckMode {
    ChannelDropout,
    RgbToGray,
    None,
}

impl fmt::Display for BottleneckMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BottleneckMode::ChannelDropout => "channel_dropout",
            BottleneckMode::RgbToGray => "rgb2gray",
            BottleneckMode::None => "none",
        })
    }
}

impl FromStr for BottleneckMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_dropout" => Ok(BottleneckMode::ChannelDropout),
            "rgb2gray" => Ok(BottleneckMode::RgbToGray),
            "none" => Ok(BottleneckMode::None),
            other => Err(Error::Config(format!("unknown bottleneck mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BottleneckSpec {
    pub colorspace: ColorSpace,
    pub mode: BottleneckMode,
    /// Channels zeroed when dropout fires; 0, 1 or 2.
    pub drop_count: usize,
    /// Probability that the bottleneck fires for a given pair.
    pub probability: f64,
}

impl Default for BottleneckSpec {
    fn default() -> Self {
        BottleneckSpec {
            colorspace: ColorSpace::Lab,
            mode: BottleneckMode::ChannelDropout,
            drop_count: 1,
            probability: 1.0,
        }
    }
}

/// The degradation drawn for one query/reference pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BottleneckDraw {
    Identity,
    Drop([bool; 3]),
    Gray,
}

impl BottleneckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.drop_count > 2 {
            return Err(Error::Config(format!("drop_count must be 0, 1 or 2, got {}", self.drop_count)));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!("drop probability {} outside [0, 1]", self.probability)));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> BottleneckDraw {
        if self.mode == BottleneckMode::None || self.probability == 0.0 {
            return BottleneckDraw::Identity;
        }
        if self.probability < 1.0 && rng.random::<f64>() >= self.probability {
            return BottleneckDraw::Identity;
        }
        match self.mode {
            BottleneckMode::None => BottleneckDraw::Identity,
            BottleneckMode::RgbToGray => BottleneckDraw::Gray,
            BottleneckMode::ChannelDropout => {
                let mut dropped = [false; 3];
                for c in index::sample(rng, 3, self.drop_count) {
                    dropped[c] = true;
                }
                BottleneckDraw::Drop(dropped)
            }
        }
    }
}

impl BottleneckDraw {
    pub fn apply(&self, frame: &Frame) -> Frame {
        let mut out = frame.clone();
        match self {
            BottleneckDraw::Identity => {}
            BottleneckDraw::Drop(dropped) => {
                for (c, _) in dropped.iter().enumerate().filter(|(_, d)| **d) {
                    out.plane_mut(c).fill(0.0);
                }
            }
            BottleneckDraw::Gray => match frame.space() {
                // Lab: keep lightness, neutral chroma.
                ColorSpace::Lab => {
                    out.plane_mut(1).fill(0.5);
                    out.plane_mut(2).fill(0.5);
                }
                ColorSpace::Rgb => {
                    let n = frame.height() * frame.width();
                    for i in 0..n {
                        let d = frame.data();
                        let g = 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
                        for c in 0..3 {
                            out.data_mut()[c * n + i] = g;
                        }
                    }
                }
            },
        }
        out
    }
}

/// Samples a degradation from `spec` and applies it to `frame`.
pub fn apply_bottleneck(frame: &Frame, spec: &BottleneckSpec, rng: &mut impl Rng) -> Frame {
    spec.sample(rng).apply(frame)
}

/// `Î(i) = Σ_j affinity(i, j) · reference(j)` at the affinity's grid resolution.
pub fn reconstruct(affinity: &AffinityMatrix, reference: &Frame) -> Result<Frame> {
    let reference = to_grid(reference, affinity.height, affinity.width)?;
    let colors = reference.to_pixel_rows();
    let cols = affinity.cols();
    if affinity.rows != cols {
        return Err(shape_err!("reconstruction needs a square affinity, got {}x{}", affinity.rows, cols));
    }
    let mut out = vec![0.0; affinity.rows * 3];
    for i in 0..affinity.rows {
        let row = affinity.row(i);
        for (j, &a) in row.iter().enumerate().take(cols) {
            if a == 0.0 {
                continue;
            }
            for c in 0..3 {
                out[i * 3 + c] += a * colors[j * 3 + c];
            }
        }
    }
    Frame::from_pixel_rows(affinity.height, affinity.width, reference.space(), &out)
}

/// Area-downsamples `frame` onto an `h × w` grid if needed.
pub fn to_grid(frame: &Frame, height: usize, width: usize) -> Result<Frame> {
    if frame.height() == height && frame.width() == width {
        return Ok(frame.clone());
    }
    if height == 0 || frame.height() % height != 0 || frame.height() / height != frame.width() / width.max(1) {
        return Err(shape_err!(
            "cannot map a {}x{} frame onto a {}x{} grid",
            frame.height(),
            frame.width(),
            height,
            width
        ));
    }
    frame.area_downsample(frame.height() / height)
}

/// Root of the mean squared difference over all pixels and channels.
pub fn reconstruction_loss(target: &Frame, reconstructed: &Frame) -> Result<f64> {
    if target.height() != reconstructed.height() || target.width() != reconstructed.width() {
        return Err(shape_err!(
            "target {}x{} vs reconstruction {}x{}",
            target.height(),
            target.width(),
            reconstructed.height(),
            reconstructed.width()
        ));
    }
    let n = target.data().len() as f64;
    let ss: f64 = target
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / n).sqrt())
}

/// `affinity [hw, hw] × colours [hw, 3]`.
pub fn reconstruct_on_tape(tape: &mut Tape, affinity: Var, colors: Var) -> Result<Var> {
    tape.matmul(affinity, colors)
}

/// Root-mean-square difference as a scalar node.
pub fn rms_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).len();
    let d = tape.sub(a, b)?;
    let flat = tape.reshape(d, vec![1, n])?;
    let norm = tape.norm_rows(flat)?;
    let norm = tape.reshape(norm, Vec::new())?;
    tape.scale(norm, (n as f64).sqrt().recip())
}

/// Pixel colours of `frame` on the `h × w` grid as a `[hw, 3]` tensor.
pub fn color_rows(frame: &Frame, height: usize, width: usize) -> Result<Tensor> {
    let g = to_grid(frame, height, width)?;
    Tensor::new(vec![height * width, 3], g.to_pixel_rows())
}
