use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::{ColorSpace, Frame};
use crate::metrics::Mask;

use super::synthetic::SyntheticClip;

/// A loaded sequence: frames in `[0, 1]` RGB, annotations where present.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub annotations: Vec<Option<Mask>>,
    /// Number of classes including background, from the annotations.
    pub classes: usize,
    pub flows: Vec<Option<Vec<f64>>>,
}

impl Sequence {
    pub fn first_annotation(&self) -> Option<&Mask> {
        self.annotations.first().and_then(Option::as_ref)
    }
}

/// The conventional 256-colour segmentation palette (bit-interleaved).
pub fn davis_palette() -> Vec<[u8; 3]> {
    (0..256u32)
        .map(|i| {
            let mut c = [0u8; 3];
            let mut id = i;
            for shift in (0..8).rev() {
                for (ch, v) in c.iter_mut().enumerate() {
                    *v |= (((id >> ch) & 1) as u8) << shift;
                }
                id >>= 3;
            }
            c
        })
        .collect()
}

fn numbered(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("{index:05}.{ext}"))
}

/// Writes `frames/%05d.png`, `anno/%05d.png` (indexed) and `flow/%05d.f64`.
pub fn write_clip(clip: &SyntheticClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["frames", "anno", "flow"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (t, frame) in clip.frames.iter().enumerate() {
        let rgb = frame.to_rgb();
        let img = image::RgbImage::from_fn(rgb.width() as u32, rgb.height() as u32, |x, y| {
            image::Rgb(rgb.pixel(y as usize, x as usize).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        img.save(numbered(&dir.join("frames"), t, "png"))?;
    }
    for (t, mask) in clip.masks.iter().enumerate() {
        write_annotation(mask, numbered(&dir.join("anno"), t, "png"))?;
    }
    for (t, flow) in clip.flows.iter().enumerate() {
        let bytes: Vec<u8> = flow.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(numbered(&dir.join("flow"), t, "f64"), bytes)?;
    }
    Ok(())
}

/// Palette-indexed PNG whose indices are the class ids.
pub fn write_annotation(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(davis_palette().concat());
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_image_data(&mask.labels)
        .map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Reads an annotation. Indexed images map index → class, but two used
/// indices with the same palette colour are rejected as ambiguous. Colour
/// images are mapped through [`davis_palette`].
pub fn read_annotation(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed, png::BitDepth::Eight) => {
            let palette = reader.info().palette.as_ref().map(|p| p.to_vec()).unwrap_or_default();
            let mut used = [false; 256];
            buf.iter().for_each(|&i| used[i as usize] = true);
            let colour = |i: usize| palette.get(3 * i..3 * i + 3);
            for a in 0..256 {
                for b in a + 1..256 {
                    if used[a] && used[b] && colour(a).is_some() && colour(a) == colour(b) {
                        return Err(Error::Format(format!(
                            "{}: palette entries {a} and {b} share a colour",
                            path.display()
                        )));
                    }
                }
            }
            Mask::new(h, w, buf)
        }
        (png::ColorType::Rgb, png::BitDepth::Eight) | (png::ColorType::Rgba, png::BitDepth::Eight) => {
            let stride = if info.color_type == png::ColorType::Rgb { 3 } else { 4 };
            let palette = davis_palette();
            let labels = buf
                .chunks(stride)
                .map(|px| {
                    palette
                        .iter()
                        .position(|c| c[..] == px[..3])
                        .map(|i| i as u8)
                        .ok_or_else(|| Error::Format(format!("{}: colour {:?} not in palette", path.display(), &px[..3])))
                })
                .collect::<Result<Vec<u8>>>()?;
            Mask::new(h, w, labels)
        }
        (png::ColorType::Grayscale, png::BitDepth::Eight) => Mask::new(h, w, buf),
        (ct, bd) => Err(Error::Format(format!("{}: unsupported annotation {ct:?}/{bd:?}", path.display()))),
    }
}

fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut frame = Frame::zeros(h, w, ColorSpace::Rgb);
    for (x, y, p) in img.enumerate_pixels() {
        frame.set_pixel(y as usize, x as usize, p.0.map(|v| v as f64 / 255.0));
    }
    Ok(frame)
}

/// Loads `<dir>/frames/%05d.png` (contiguous from 0), any `anno/%05d.png`
/// and any `flow/%05d.f64`.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let frames_dir = dir.join("frames");
    let mut names: Vec<String> = fs::read_dir(&frames_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no frames in {}", frames_dir.display()),
        )));
    }
    for (i, n) in names.iter().enumerate() {
        if *n != format!("{i:05}.png") {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("frame {i:05}.png missing from {}", frames_dir.display()),
            )));
        }
    }
    let frames = (0..names.len())
        .map(|t| read_frame(&numbered(&frames_dir, t, "png")))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (frames[0].height(), frames[0].width());
    if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.height() != h || f.width() != w) {
        return Err(Error::Format(format!(
            "frame {t} is {}x{}, frame 0 is {h}x{w}",
            f.height(),
            f.width()
        )));
    }

    let mut annotations = Vec::with_capacity(frames.len());
    let mut flows = Vec::with_capacity(frames.len());
    let mut classes = 0usize;
    for t in 0..frames.len() {
        let p = numbered(&dir.join("anno"), t, "png");
        let anno = if p.exists() {
            let m = read_annotation(&p)?;
            if m.height != h || m.width != w {
                return Err(Error::Format(format!("annotation {t} is {}x{}, frames are {h}x{w}", m.height, m.width)));
            }
            classes = classes.max(m.max_label() as usize + 1);
            Some(m)
        } else {
            None
        };
        annotations.push(anno);
        let p = numbered(&dir.join("flow"), t, "f64");
        let flow = if p.exists() {
            let bytes = fs::read(&p)?;
            if bytes.len() != h * w * 2 * 8 {
                return Err(Error::Format(format!("flow {t} has {} bytes", bytes.len())));
            }
            Some(
                bytes
                    .chunks(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
        } else {
            None
        };
        flows.push(flow);
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sequence {
        name,
        frames,
        annotations,
        classes: classes.max(2),
        flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clip, Scenario};

    #[test]
    fn palette_starts_like_davis() {
        let p = davis_palette();
        assert_eq!(p[0], [0, 0, 0]);
        assert_eq!(p[1], [128, 0, 0]);
        assert_eq!(p[2], [0, 128, 0]);
        assert_eq!(p[3], [128, 128, 0]);
        let mut sorted = p.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 256);
    }

    #[test]
    fn clip_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(Scenario::TwinSprites, 32, 32, 3, 9).unwrap();
        write_clip(&clip, dir.path()).unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        assert_eq!(seq.frames, clip.frames);
        assert_eq!(seq.classes, 3);
        for (a, m) in seq.annotations.iter().zip(&clip.masks) {
            assert_eq!(a.as_ref(), Some(m));
        }
        for (a, f) in seq.flows.iter().zip(&clip.flows) {
            assert_eq!(a.as_ref(), Some(f));
        }
    }

    #[test]
    fn two_frames_one_mask() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(Scenario::SingleSprite, 32, 32, 2, 1).unwrap();
        write_clip(&clip, dir.path()).unwrap();
        fs::remove_file(dir.path().join("anno/00001.png")).unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        assert_eq!(seq.frames.len(), 2);
        assert_eq!(seq.classes, 2);
        assert!(seq.first_annotation().is_some() && seq.annotations[1].is_none());
    }

    #[test]
    fn missing_frame_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(Scenario::SingleSprite, 32, 32, 3, 1).unwrap();
        write_clip(&clip, dir.path()).unwrap();
        fs::remove_file(dir.path().join("frames/00001.png")).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Io(_))));
        assert!(matches!(load_sequence(dir.path().join("nope")), Err(Error::Io(_))));
    }

    #[test]
    fn non_uniform_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(Scenario::SingleSprite, 32, 32, 2, 1).unwrap();
        write_clip(&clip, dir.path()).unwrap();
        image::RgbImage::new(16, 16).save(dir.path().join("frames/00001.png")).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn palette_collision_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let file = BufWriter::new(File::create(&path).unwrap());
        let mut enc = png::Encoder::new(file, 2, 1);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(vec![0, 0, 0, 9, 9, 9, 9, 9, 9]);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[1, 2]).unwrap();
        w.finish().unwrap();
        assert!(matches!(read_annotation(&path), Err(Error::Format(_))));
    }

    #[test]
    fn colour_annotations_map_through_palette() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = image::RgbImage::from_fn(2, 1, |x, _| image::Rgb(if x == 0 { [0, 0, 0] } else { [0, 128, 0] }));
        img.save(&path).unwrap();
        assert_eq!(read_annotation(&path).unwrap().labels, vec![0, 2]);
    }
}
