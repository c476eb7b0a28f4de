//! Versioned binary checkpoints of encoder weights.
//!
//! Layout (little-endian): magic `LIIR`, `u32` version, `f64` temperature,
//! `u8` position kind, `u32` frame height and width, `u32` layer count with
//! `(stride, pad)` per layer, `u32` tensor count, one shape record per
//! tensor (`u32` rank then `u32` dims), then every tensor's `f64` values in
//! order.

use std::fs;
use std::path::Path;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::position::PositionKind;

pub const MAGIC: &[u8; 4] = b"LIIR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub temperature: f64,
}

fn kind_code(kind: PositionKind) -> u8 {
    match kind {
        PositionKind::None => 0,
        PositionKind::Sinusoidal2D => 1,
        PositionKind::Absolute1D => 2,
        PositionKind::Absolute2D => 3,
    }
}

fn kind_from_code(code: u8) -> Result<PositionKind> {
    Ok(match code {
        0 => PositionKind::None,
        1 => PositionKind::Sinusoidal2D,
        2 => PositionKind::Absolute1D,
        3 => PositionKind::Absolute2D,
        _ => return Err(Error::Format(format!("unknown position kind code {code}"))),
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.temperature.to_le_bytes());
        out.push(kind_code(p.position.kind()));
        out.extend_from_slice(&((p.position.height() * 2) as u32).to_le_bytes());
        out.extend_from_slice(&((p.position.width() * 2) as u32).to_le_bytes());
        out.extend_from_slice(&(p.layers.len() as u32).to_le_bytes());
        for l in &p.layers {
            out.extend_from_slice(&(l.stride as u32).to_le_bytes());
            out.extend_from_slice(&(l.pad as u32).to_le_bytes());
        }
        let tensors = p.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &tensors {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let temperature = r.f64()?;
        let kind = kind_from_code(r.take(1)?[0])?;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        let mut params = EncoderParams::new(kind, h, w, 0)?;
        let layers = r.u32()? as usize;
        if layers != params.layers.len() {
            return Err(Error::Format(format!("{layers} layers, expected {}", params.layers.len())));
        }
        for l in &params.layers {
            let (stride, pad) = (r.u32()? as usize, r.u32()? as usize);
            if (stride, pad) != (l.stride, l.pad) {
                return Err(Error::Format(format!("layer stride/pad {stride}/{pad} unsupported")));
            }
        }
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            shapes.push((0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?);
        }
        {
            let tensors = params.tensors_mut();
            if tensors.len() != count || tensors.iter().zip(&shapes).any(|(t, s)| t.shape() != s.as_slice()) {
                return Err(Error::Format("tensor shape table does not match the architecture".into()));
            }
            for t in tensors {
                for v in t.values_mut() {
                    *v = r.f64()?;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { params, temperature })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            params: EncoderParams::new(PositionKind::Absolute2D, 16, 24, 11).unwrap(),
            temperature: 0.07,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut b = sample().to_bytes();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let b = sample().to_bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
