//! The convolutional feature encoder.
//!
//! Three convolutions (7×7/2 → relu → 3×3/2 → relu → 3×3/1) take an
//! `H × W` frame to an `H/4 × W/4` feature map. The position map is added
//! to the activations of the first layer, whose output is `H/2 × W/2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::frame::Frame;
use crate::position::{PositionEncoding, PositionKind, PositionMap};

pub const POSITION_CHANNELS: usize = 16;
pub const FEATURE_CHANNELS: usize = 32;
/// Total spatial reduction of the encoder.
pub const STRIDE: usize = 4;

/// One convolution: `[out, in, k, k]` kernel and `[out]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn he_init(out_ch: usize, in_ch: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = (0..out_ch * in_ch * kernel * kernel).map(|_| normal.sample(rng)).collect();
        ConvLayer {
            weight: Tensor::new(vec![out_ch, in_ch, kernel, kernel], weight).expect("sized above"),
            bias: Tensor::zeros(vec![out_ch]),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Encoder weights plus the position encoding injected after layer one.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
    pub position: PositionEncoding,
}

/// Tape handles for every parameter of an [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub position: Vec<Var>,
}

impl ParamVars {
    /// In the same order as [`EncoderParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain(self.position.iter().copied())
            .collect()
    }
}

/// An `h × w × c` embedding grid, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(shape_err!(
                "feature map {}x{}x{} given {} values",
                height,
                width,
                channels,
                values.len()
            ));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            values,
        })
    }

    /// Builds a map from per-pixel vectors laid out as `[h·w, c]` rows.
    pub fn from_rows(height: usize, width: usize, channels: usize, rows: &[f64]) -> Result<Self> {
        let n = height * width;
        if rows.len() != n * channels {
            return Err(shape_err!("{} row values for {}x{}x{}", rows.len(), height, width, channels));
        }
        let mut values = vec![0.0; rows.len()];
        for i in 0..n {
            for c in 0..channels {
                values[c * n + i] = rows[i * channels + c];
            }
        }
        FeatureMap::new(height, width, channels, values)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel vectors as `[h·w, c]` rows.
    pub fn rows(&self) -> Vec<f64> {
        let n = self.pixels();
        let mut out = vec![0.0; self.values.len()];
        for c in 0..self.channels {
            for i in 0..n {
                out[i * self.channels + c] = self.values[c * n + i];
            }
        }
        out
    }

    pub fn vector(&self, pixel: usize) -> Vec<f64> {
        let n = self.pixels();
        (0..self.channels).map(|c| self.values[c * n + pixel]).collect()
    }

    pub fn rows_tensor(&self) -> Tensor {
        Tensor::new(vec![self.pixels(), self.channels], self.rows()).expect("sized by construction")
    }
}

impl EncoderParams {
    /// Desk-scale encoder for `frame_height × frame_width` inputs.
    pub fn new(kind: PositionKind, frame_height: usize, frame_width: usize, seed: u64) -> Result<Self> {
        check_frame_dims(frame_height, frame_width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            ConvLayer::he_init(POSITION_CHANNELS, 3, 7, 2, &mut rng),
            ConvLayer::he_init(FEATURE_CHANNELS, POSITION_CHANNELS, 3, 2, &mut rng),
            ConvLayer::he_init(FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 1, &mut rng),
        ];
        let position = PositionEncoding::new(
            kind,
            frame_height / 2,
            frame_width / 2,
            POSITION_CHANNELS,
            seed.wrapping_add(0x9e37_79b9),
        )?;
        Ok(EncoderParams { layers, position })
    }

    /// All parameter tensors: per layer weight then bias, then position tables.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .chain(self.position.params())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let EncoderParams { layers, position } = self;
        layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(position.params_mut().iter_mut())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shapes(&self, other: &EncoderParams) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    pub fn position_map(&self) -> PositionMap {
        self.position.map()
    }

    pub fn on_tape(&self, tape: &mut Tape, requires_grad: bool) -> Result<ParamVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((tape.leaf(l.weight.clone(), requires_grad)?, tape.leaf(l.bias.clone(), requires_grad)?)))
            .collect::<Result<Vec<_>>>()?;
        let position = self
            .position
            .params()
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars { layers, position })
    }

    /// Records the encoder on `tape`; returns the raw `[c, h, w]` features.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, frame: &Frame, pos: Var) -> Result<Var> {
        check_frame_dims(frame.height(), frame.width())?;
        let expect = [POSITION_CHANNELS, frame.height() / 2, frame.width() / 2];
        if tape.value(pos).shape() != expect {
            return Err(shape_err!(
                "position map {:?} does not match first-layer output {:?}",
                tape.value(pos).shape(),
                expect
            ));
        }
        let input = tape.constant(Tensor::new(
            vec![3, frame.height(), frame.width()],
            frame.data().to_vec(),
        )?)?;
        let mut x = input;
        for (i, (layer, &(w, b))) in self.layers.iter().zip(&vars.layers).enumerate() {
            x = tape.conv2d(x, w, b, layer.stride, layer.pad)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
            if i == 0 {
                x = tape.add(x, pos)?;
            }
        }
        Ok(x)
    }

    /// Pixel embeddings `[h·w, c]`: L2-normalised and scaled by `1/√temperature`
    /// so that dot products are cosine similarities divided by the temperature.
    pub fn embed(&self, tape: &mut Tape, features: Var, temperature: f64) -> Result<Var> {
        let shape = tape.value(features).shape().to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let flat = tape.reshape(features, vec![c, hw])?;
        let rows = tape.transpose(flat)?;
        let unit = tape.normalize_rows(rows)?;
        tape.scale(unit, temperature.sqrt().recip())
    }
}

/// Forward pass with a caller-supplied position map; returns the scaled embedding grid.
pub fn encode(frame: &Frame, pos: &PositionMap, params: &EncoderParams, temperature: f64) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, false)?;
    let p = tape.constant(pos.to_tensor())?;
    let feats = params.forward(&mut tape, &vars, frame, p)?;
    let emb = params.embed(&mut tape, feats, temperature)?;
    let (h, w) = (frame.height() / STRIDE, frame.width() / STRIDE);
    FeatureMap::from_rows(h, w, FEATURE_CHANNELS, tape.value(emb).values())
}

/// Forward pass with the parameters' own position map.
pub fn encode_frame(frame: &Frame, params: &EncoderParams, temperature: f64) -> Result<FeatureMap> {
    encode(frame, &params.position_map(), params, temperature)
}

/// Forward pass without normalisation; the raw `[c, h, w]` activations.
pub fn encode_raw(frame: &Frame, pos: &PositionMap, params: &EncoderParams) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, false)?;
    let p = tape.constant(pos.to_tensor())?;
    let feats = params.forward(&mut tape, &vars, frame, p)?;
    let shape = tape.value(feats).shape().to_vec();
    FeatureMap::new(shape[1], shape[2], shape[0], tape.value(feats).values().to_vec())
}

fn check_frame_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % STRIDE != 0 || width % STRIDE != 0 {
        return Err(Error::Shape(format!(
            "frame {height}x{width} is not divisible by {STRIDE}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::ColorSpace;
    use rand::Rng;

    fn random_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(h, w, ColorSpace::Lab, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn zero_everything_gives_zero_features() {
        let mut params = EncoderParams::new(PositionKind::None, 16, 16, 0).unwrap();
        for t in params.tensors_mut() {
            t.values_mut().fill(0.0);
        }
        let frame = Frame::zeros(16, 16, ColorSpace::Lab);
        let out = encode_raw(&frame, &PositionMap::zeros(8, 8, POSITION_CHANNELS), &params).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_quarter_resolution() {
        let params = EncoderParams::new(PositionKind::Absolute1D, 64, 64, 1).unwrap();
        let f = encode_frame(&random_frame(64, 64, 2), &params, 0.07).unwrap();
        assert_eq!((f.height, f.width, f.channels), (16, 16, FEATURE_CHANNELS));
        // unit norm scaled by 1/sqrt(0.07)
        let v = f.vector(17);
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 0.07f64.sqrt().recip()).abs() < 1e-9);
    }

    #[test]
    fn position_map_changes_features() {
        let params = EncoderParams::new(PositionKind::None, 16, 16, 3).unwrap();
        let frame = random_frame(16, 16, 4);
        let p0 = PositionMap::zeros(8, 8, POSITION_CHANNELS);
        let mut p1 = p0.clone();
        p1.set(3, 3, 0, 1.0);
        let a = encode_raw(&frame, &p0, &params).unwrap();
        let b = encode_raw(&frame, &p1, &params).unwrap();
        assert_ne!(a.values, b.values);
    }

    #[test]
    fn rejects_bad_shapes() {
        let params = EncoderParams::new(PositionKind::None, 16, 16, 0).unwrap();
        let frame = Frame::zeros(18, 16, ColorSpace::Lab);
        assert!(matches!(encode_frame(&frame, &params, 0.07), Err(Error::Shape(_))));
        let frame = Frame::zeros(16, 16, ColorSpace::Lab);
        let bad = PositionMap::zeros(4, 4, POSITION_CHANNELS);
        assert!(matches!(encode(&frame, &bad, &params, 0.07), Err(Error::Shape(_))));
    }

    #[test]
    fn rows_round_trip() {
        let rows: Vec<f64> = (0..24).map(f64::from).collect();
        let f = FeatureMap::from_rows(2, 3, 4, &rows).unwrap();
        assert_eq!(f.rows(), rows);
        assert_eq!(f.vector(1), vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn parameter_lists_line_up() {
        let params = EncoderParams::new(PositionKind::Absolute2D, 16, 16, 0).unwrap();
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape, true).unwrap();
        let all = vars.all();
        assert_eq!(all.len(), params.tensors().len());
        for (v, t) in all.iter().zip(params.tensors()) {
            assert_eq!(tape.value(*v), t);
        }
    }
}
