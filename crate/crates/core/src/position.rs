//! Explicit position encodings and the circular shifting applied to
//! frames from other videos.
//!
//! Maps are stored channel-major (`[c', h', w']`) so they can be added
//! directly to the output of the encoder's first convolution.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Base of the sinusoid frequencies.
pub const SPE_EPSILON: f64 = 1e-4;

/// Standard deviation of the learnable table initialisation.
pub const LEARNABLE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionKind {
    /// No position information (all-zero map).
    None,
    /// Fixed 2D sinusoids.
    Sinusoidal2D,
    /// One free vector per cell.
    Absolute1D,
    /// Separate learnable column and row tables, concatenated per cell.
    Absolute2D,
}

impl PositionKind {
    pub fn learnable(self) -> bool {
        matches!(self, PositionKind::Absolute1D | PositionKind::Absolute2D)
    }
}

impl fmt::Display for PositionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionKind::None => "none",
            PositionKind::Sinusoidal2D => "2dspe",
            PositionKind::Absolute1D => "1dape",
            PositionKind::Absolute2D => "2dape",
        })
    }
}

impl FromStr for PositionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PositionKind::None),
            "2dspe" => Ok(PositionKind::Sinusoidal2D),
            "1dape" => Ok(PositionKind::Absolute1D),
            "2dape" => Ok(PositionKind::Absolute2D),
            other => Err(Error::Config(format!("unknown position kind `{other}`"))),
        }
    }
}

/// How the position map is modulated for frames from other videos.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftMode {
    /// Use the map unchanged.
    None,
    /// Random circular shift along both axes.
    Shift,
    /// Random permutation of cells (destroys adjacency).
    Shuffle,
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftMode::None => "none",
            ShiftMode::Shift => "shift",
            ShiftMode::Shuffle => "shuffle",
        })
    }
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(ShiftMode::None),
            "shift" => Ok(ShiftMode::Shift),
            "shuffle" => Ok(ShiftMode::Shuffle),
            other => Err(Error::Config(format!("unknown shift mode `{other}`"))),
        }
    }
}

/// A materialised `h' × w' × c'` position grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionMap {
    kind: PositionKind,
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl PositionMap {
    pub fn new(kind: PositionKind, height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(shape_err!(
                "position map {}x{}x{} given {} values",
                height,
                width,
                channels,
                values.len()
            ));
        }
        Ok(PositionMap {
            kind,
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        PositionMap {
            kind: PositionKind::None,
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn kind(&self) -> PositionKind {
        self.kind
    }

    pub fn learnable(&self) -> bool {
        self.kind.learnable()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channel-major `[c', h', w']` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    /// The `c'`-vector stored at cell `(x, y)`.
    pub fn cell(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(x, y, c)).collect()
    }

    fn permuted(&self, index: &[usize]) -> PositionMap {
        PositionMap {
            values: index.iter().map(|&i| self.values[i]).collect(),
            ..self.clone()
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.values.clone())
            .expect("shape checked at construction")
    }
}

/// Fixed sinusoidal encoding: x in the first half of the channels, y in the second.
pub fn build_2dspe(height: usize, width: usize, channels: usize) -> Result<PositionMap> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs channels divisible by 4, got {channels}"
        )));
    }
    let mut map = PositionMap::zeros(height, width, channels);
    map.kind = PositionKind::Sinusoidal2D;
    let half = channels / 2;
    for u in 0..channels / 4 {
        let freq = SPE_EPSILON.powf(4.0 * u as f64 / channels as f64);
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64 * freq, y as f64 * freq);
                map.set(x, y, 2 * u, xf.sin());
                map.set(x, y, 2 * u + 1, xf.cos());
                map.set(x, y, 2 * u + half, yf.sin());
                map.set(x, y, 2 * u + 1 + half, yf.cos());
            }
        }
    }
    Ok(map)
}

/// A position encoding together with its trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEncoding {
    kind: PositionKind,
    height: usize,
    width: usize,
    channels: usize,
    /// Fixed map for `None` / `Sinusoidal2D`.
    fixed: Option<PositionMap>,
    /// `[c', h', w']` for 1D; `[w', c'/2]` then `[h', c'/2]` for 2D.
    params: Vec<Tensor>,
}

impl PositionEncoding {
    pub fn new(kind: PositionKind, height: usize, width: usize, channels: usize, seed: u64) -> Result<Self> {
        match kind {
            PositionKind::None => Ok(PositionEncoding {
                kind,
                height,
                width,
                channels,
                fixed: Some(PositionMap::zeros(height, width, channels)),
                params: Vec::new(),
            }),
            PositionKind::Sinusoidal2D => Ok(PositionEncoding {
                kind,
                height,
                width,
                channels,
                fixed: Some(build_2dspe(height, width, channels)?),
                params: Vec::new(),
            }),
            PositionKind::Absolute1D | PositionKind::Absolute2D => build_learnable(kind, height, width, channels, seed),
        }
    }

    pub fn kind(&self) -> PositionKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Flat-index table turning the concatenated 2D tables into a `[c', h', w']` map.
    fn absolute2d_index(&self) -> Vec<usize> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let half = c / 2;
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    index.push(if ch < half {
                        x * half + ch
                    } else {
                        w * half + y * half + (ch - half)
                    });
                }
            }
        }
        index
    }

    pub fn map(&self) -> PositionMap {
        match self.kind {
            PositionKind::None | PositionKind::Sinusoidal2D => self.fixed.clone().expect("fixed map present"),
            PositionKind::Absolute1D => PositionMap {
                kind: self.kind,
                height: self.height,
                width: self.width,
                channels: self.channels,
                values: self.params[0].values().to_vec(),
            },
            PositionKind::Absolute2D => {
                let flat: Vec<f64> = self.params[0].values().iter().chain(self.params[1].values()).copied().collect();
                PositionMap {
                    kind: self.kind,
                    height: self.height,
                    width: self.width,
                    channels: self.channels,
                    values: self.absolute2d_index().iter().map(|&i| flat[i]).collect(),
                }
            }
        }
    }

    /// Records the `[c', h', w']` map on `tape`. `params` are the tape leaves for
    /// [`PositionEncoding::params`], in order.
    pub fn on_tape(&self, tape: &mut Tape, params: &[Var]) -> Result<Var> {
        let shape = vec![self.channels, self.height, self.width];
        match self.kind {
            PositionKind::None | PositionKind::Sinusoidal2D => {
                tape.constant(self.fixed.as_ref().expect("fixed map present").to_tensor())
            }
            PositionKind::Absolute1D => tape.reshape(params[0], shape),
            PositionKind::Absolute2D => {
                let half = self.channels / 2;
                let xs = tape.reshape(params[0], vec![1, self.width * half])?;
                let ys = tape.reshape(params[1], vec![1, self.height * half])?;
                let both = tape.concat_cols(xs, ys)?;
                tape.gather(both, self.absolute2d_index().into(), shape)
            }
        }
    }

    /// The map as seen by a frame from another video: modulated per `mode`
    /// and cut off from the gradient.
    pub fn negative_on_tape(&self, tape: &mut Tape, params: &[Var], mode: ShiftMode, rng: &mut impl Rng) -> Result<Var> {
        let map = self.on_tape(tape, params)?;
        let modulated = match negative_index(mode, self.height, self.width, self.channels, rng) {
            Some(index) => tape.gather(map, index.into(), vec![self.channels, self.height, self.width])?,
            None => map,
        };
        tape.stop_gradient(modulated)
    }
}

/// Learnable table initialised from a zero-mean normal with std [`LEARNABLE_INIT_STD`].
pub fn build_learnable(kind: PositionKind, height: usize, width: usize, channels: usize, seed: u64) -> Result<PositionEncoding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, LEARNABLE_INIT_STD).expect("valid std");
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
    let params = match kind {
        PositionKind::Absolute1D => vec![Tensor::new(vec![channels, height, width], draw(channels * height * width))?],
        PositionKind::Absolute2D => {
            if channels % 2 != 0 {
                return Err(Error::Config(format!("2D absolute encoding needs even channels, got {channels}")));
            }
            let half = channels / 2;
            vec![
                Tensor::new(vec![width, half], draw(width * half))?,
                Tensor::new(vec![height, half], draw(height * half))?,
            ]
        }
        other => return Err(Error::Config(format!("{other} is not a learnable encoding"))),
    };
    Ok(PositionEncoding {
        kind,
        height,
        width,
        channels,
        fixed: None,
        params,
    })
}

/// Flat gather index realising `out(x, y) = in((x − dx) mod w, (y − dy) mod h)`.
pub fn shift_index(height: usize, width: usize, channels: usize, dx: usize, dy: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        for y in 0..height {
            let sy = (y + height - dy % height) % height;
            for x in 0..width {
                let sx = (x + width - dx % width) % width;
                index.push((c * height + sy) * width + sx);
            }
        }
    }
    index
}

/// Flat gather index moving whole cell vectors by a random permutation.
pub fn shuffle_index(height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut cells: Vec<usize> = (0..height * width).collect();
    cells.shuffle(rng);
    let mut index = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        for &cell in &cells {
            index.push(c * height * width + cell);
        }
    }
    index
}

fn negative_index(mode: ShiftMode, height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Option<Rc<[usize]>> {
    match mode {
        ShiftMode::None => None,
        ShiftMode::Shift => {
            let (dx, dy) = sample_shift(rng, width, height);
            Some(shift_index(height, width, channels, dx, dy).into())
        }
        ShiftMode::Shuffle => Some(shuffle_index(height, width, channels, rng).into()),
    }
}

/// Circularly shifts `pos` by `dx` columns and `dy` rows.
pub fn shift(pos: &PositionMap, dx: usize, dy: usize) -> Result<PositionMap> {
    if dx >= pos.width || dy >= pos.height {
        return Err(Error::Range(format!(
            "shift ({dx}, {dy}) outside {}x{} map",
            pos.width, pos.height
        )));
    }
    Ok(pos.permuted(&shift_index(pos.height, pos.width, pos.channels, dx, dy)))
}

/// The shuffling alternative to [`shift`].
pub fn shuffle(pos: &PositionMap, rng: &mut impl Rng) -> PositionMap {
    pos.permuted(&shuffle_index(pos.height, pos.width, pos.channels, rng))
}

/// Uniform `(dx, dy)` with `dx ∈ [0, width)`, `dy ∈ [0, height)`.
pub fn sample_shift(rng: &mut impl Rng, width: usize, height: usize) -> (usize, usize) {
    (rng.random_range(0..width), rng.random_range(0..height))
}

/// Applies `mode` to a materialised map.
pub fn modulate(pos: &PositionMap, mode: ShiftMode, rng: &mut impl Rng) -> PositionMap {
    match negative_index(mode, pos.height, pos.width, pos.channels, rng) {
        Some(index) => pos.permuted(&index),
        None => pos.clone(),
    }
}
