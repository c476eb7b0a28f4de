//! Single-channel float grids (heatmaps, affinity rows) stored as PFM, and
//! their rendering to greyscale PNG.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    /// Row-major, top row first.
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("grid {height}x{width} given {} values", values.len())));
        }
        Ok(Grid { height, width, values })
    }

    /// Writes a little-endian greyscale PFM (stored bottom row first).
    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(32 + 4 * self.values.len());
        write!(out, "Pf\n{} {}\n-1.0\n", self.width, self.height)?;
        for row in self.values.chunks(self.width.max(1)).rev() {
            for &v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PFM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "Pf" {
            return Err(Error::Format(format!("unsupported PFM kind {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PFM size {s:?}")));
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let scale: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad PFM scale {:?}", fields[3])))?;
        let body = &bytes[pos.min(bytes.len())..];
        if body.len() != 4 * width * height {
            return Err(Error::Format(format!(
                "PFM body has {} bytes, expected {}",
                body.len(),
                4 * width * height
            )));
        }
        let decode = |c: &[u8]| {
            let b = [c[0], c[1], c[2], c[3]];
            if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };
        let mut values = vec![0.0; width * height];
        for (r, row) in body.chunks(4 * width.max(1)).enumerate() {
            let y = height - 1 - r;
            for (x, c) in row.chunks(4).enumerate() {
                values[y * width + x] = decode(c) as f64;
            }
        }
        Grid::new(height, width, values)
    }

    /// Min-max normalised greyscale image, each cell drawn as a
    /// `scale × scale` block.
    pub fn render_png(&self, path: impl AsRef<Path>, scale: usize) -> Result<()> {
        let scale = scale.max(1);
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let img = image::GrayImage::from_fn((self.width * scale) as u32, (self.height * scale) as u32, |x, y| {
            let v = self.values[(y as usize / scale) * self.width + x as usize / scale];
            image::Luma([(((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        img.save(path)?;
        Ok(())
    }
}
