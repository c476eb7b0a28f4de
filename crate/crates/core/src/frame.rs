//! Video frames and the sRGB ↔ CIELAB conversion used for network input.

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    /// CIELAB (D65) rescaled to `[0, 1]` per channel: `L/100`, `(a+128)/256`, `(b+128)/256`.
    Lab,
}

/// An `H × W × 3` color grid in `[0, 1]`, stored as three planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    space: ColorSpace,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, space: ColorSpace, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(shape_err!(
                "frame {}x{} needs {} values, got {}",
                height,
                width,
                3 * height * width,
                data.len()
            ));
        }
        Ok(Frame {
            height,
            width,
            space,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, space: ColorSpace) -> Self {
        Frame {
            height,
            width,
            space,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    /// Planar `[3, H, W]` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, p: [f64; 3]) {
        for (c, v) in p.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Averages non-overlapping `factor × factor` blocks.
    pub fn area_downsample(&self, factor: usize) -> Result<Frame> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(shape_err!(
                "{}x{} frame is not divisible by {}",
                self.height,
                self.width,
                factor
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Frame::zeros(h, w, self.space);
        let norm = 1.0 / (factor * factor) as f64;
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = self.get(c, y, x) * norm;
                    let i = (c * h + y / factor) * w + x / factor;
                    out.data[i] += v;
                }
            }
        }
        Ok(out)
    }

    /// Pixels as rows of a `[H·W, 3]` row-major matrix.
    pub fn to_pixel_rows(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n * 3];
        for c in 0..3 {
            for i in 0..n {
                out[i * 3 + c] = self.data[c * n + i];
            }
        }
        out
    }

    /// Inverse of [`Frame::to_pixel_rows`].
    pub fn from_pixel_rows(height: usize, width: usize, space: ColorSpace, rows: &[f64]) -> Result<Frame> {
        let n = height * width;
        if rows.len() != 3 * n {
            return Err(shape_err!("{} pixel values for {}x{}", rows.len(), height, width));
        }
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = rows[i * 3 + c];
            }
        }
        Frame::new(height, width, space, data)
    }

    pub fn to_lab(&self) -> Frame {
        match self.space {
            ColorSpace::Lab => self.clone(),
            ColorSpace::Rgb => self.map_pixels(ColorSpace::Lab, rgb_to_lab_pixel),
        }
    }

    pub fn to_space(&self, space: ColorSpace) -> Frame {
        match space {
            ColorSpace::Lab => self.to_lab(),
            ColorSpace::Rgb => self.to_rgb(),
        }
    }

    pub fn to_rgb(&self) -> Frame {
        match self.space {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Lab => self.map_pixels(ColorSpace::Rgb, lab_to_rgb_pixel),
        }
    }

    fn map_pixels(&self, space: ColorSpace, f: fn([f64; 3]) -> [f64; 3]) -> Frame {
        let mut out = Frame::zeros(self.height, self.width, space);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, f(self.pixel(y, x)));
            }
        }
        out
    }
}

// D65 reference white.
const XN: f64 = 0.950_47;
const YN: f64 = 1.0;
const ZN: f64 = 1.088_83;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D {
        t * t * t
    } else {
        3.0 * D * D * (t - 4.0 / 29.0)
    }
}

/// sRGB in `[0, 1]` to rescaled Lab. Inputs are clamped.
pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| srgb_to_linear(c.clamp(0.0, 1.0)));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / XN), lab_f(y / YN), lab_f(z / ZN));
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let bb = 200.0 * (fy - fz);
    [(l / 100.0).max(0.0), (a + 128.0) / 256.0, (bb + 128.0) / 256.0]
}

/// Rescaled Lab to sRGB, clamped to `[0, 1]`.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let l = lab[0].clamp(0.0, 1.0) * 100.0;
    let a = lab[1].clamp(0.0, 1.0) * 256.0 - 128.0;
    let b = lab[2].clamp(0.0, 1.0) * 256.0 - 128.0;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let (x, y, z) = (XN * lab_f_inv(fx), YN * lab_f_inv(fy), ZN * lab_f_inv(fz));
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let bl = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    [r, g, bl].map(|c| linear_to_srgb(c.max(0.0)).clamp(0.0, 1.0))
}

pub fn rgb_to_lab(frame: &Frame) -> Frame {
    frame.to_lab()
}

pub fn lab_to_rgb(frame: &Frame) -> Frame {
    frame.to_rgb()
}
