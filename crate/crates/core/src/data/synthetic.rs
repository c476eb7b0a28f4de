use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{ColorSpace, Frame};
use crate::metrics::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// One textured sprite.
    SingleSprite,
    /// Two sprites with pixel-identical textures.
    TwinSprites,
    /// One sprite passing behind a static textured bar.
    Occlusion,
    /// One sprite with velocities up to 6 px/frame.
    FastMotion,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::SingleSprite,
        Scenario::TwinSprites,
        Scenario::Occlusion,
        Scenario::FastMotion,
    ];

    pub fn objects(self) -> usize {
        match self {
            Scenario::TwinSprites => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::SingleSprite => "single_sprite",
            Scenario::TwinSprites => "twin_sprites",
            Scenario::Occlusion => "occlusion",
            Scenario::FastMotion => "fast_motion",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

/// Top-left corner and per-frame velocity of a square sprite; sprites
/// bounce off the frame border.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpriteSpec {
    pub x: i64,
    pub y: i64,
    pub vx: i64,
    pub vy: i64,
    pub texture_seed: u64,
}

/// Everything needed to render a clip deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprite_size: usize,
    pub background_seed: u64,
    pub sprites: Vec<SpriteSpec>,
    /// Static occluder `(x, y, width, height)` drawn over the sprites.
    pub occluder: Option<(usize, usize, usize, usize)>,
}

pub const DEFAULT_SPRITE_SIZE: usize = 16;

impl ClipSpec {
    /// Random placement and motion for `scenario`.
    pub fn for_scenario(scenario: Scenario, height: usize, width: usize, frames: usize, seed: u64) -> Result<Self> {
        let size = DEFAULT_SPRITE_SIZE;
        if size > height || size > width {
            return Err(Error::Config(format!("{size}px sprite does not fit a {height}x{width} frame")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vmax = if scenario == Scenario::FastMotion { 6 } else { 2 };
        let sprite = |rng: &mut ChaCha8Rng, texture_seed: u64| {
            let (vx, vy) = loop {
                let v = (rng.random_range(-vmax..=vmax), rng.random_range(-vmax..=vmax));
                if v != (0, 0) {
                    break v;
                }
            };
            SpriteSpec {
                x: rng.random_range(0..=(width - size) as i64),
                y: rng.random_range(0..=(height - size) as i64),
                vx,
                vy,
                texture_seed,
            }
        };
        let background_seed = rng.random();
        let sprites = match scenario {
            Scenario::TwinSprites => {
                let tex = rng.random();
                // keep the twins apart at frame 0 so the annotation is unambiguous
                let (a, b) = (0..1000)
                    .map(|_| (sprite(&mut rng, tex), sprite(&mut rng, tex)))
                    .find(|(a, b)| (a.x - b.x).abs() >= size as i64 || (a.y - b.y).abs() >= size as i64)
                    .ok_or_else(|| Error::Config(format!("two {size}px sprites do not fit a {height}x{width} frame")))?;
                vec![a, b]
            }
            _ => {
                let tex = rng.random();
                vec![sprite(&mut rng, tex)]
            }
        };
        let occluder = (scenario == Scenario::Occlusion).then(|| {
            let bar = (width / 8).max(1);
            (rng.random_range(0..=width - bar), 0, bar, height)
        });
        Ok(ClipSpec {
            height,
            width,
            frames,
            sprite_size: size,
            background_seed,
            sprites,
            occluder,
        })
    }

    /// Sprite top-left corners for every frame.
    pub fn trajectories(&self) -> Vec<Vec<(i64, i64)>> {
        let (xmax, ymax) = (
            (self.width - self.sprite_size) as i64,
            (self.height - self.sprite_size) as i64,
        );
        self.sprites
            .iter()
            .map(|s| {
                let (mut x, mut y, mut vx, mut vy) = (s.x, s.y, s.vx, s.vy);
                let mut out = Vec::with_capacity(self.frames);
                for _ in 0..self.frames {
                    out.push((x, y));
                    (x, vx) = bounce(x, vx, xmax);
                    (y, vy) = bounce(y, vy, ymax);
                }
                out
            })
            .collect()
    }
}

fn bounce(p: i64, v: i64, max: i64) -> (i64, i64) {
    let next = p + v;
    if next < 0 {
        (-next, -v)
    } else if next > max {
        (2 * max - next, -v)
    } else {
        (next, v)
    }
}

/// Smooth value noise in `[0, 1]`: random lattice values every `cell`
/// pixels, interpolated with a smoothstep.
pub fn value_noise(height: usize, width: usize, cell: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gh, gw) = (height / cell + 2, width / cell + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let (gy, ty) = (y / cell, smooth((y % cell) as f64 / cell as f64));
        for x in 0..width {
            let (gx, tx) = (x / cell, smooth((x % cell) as f64 / cell as f64));
            let at = |i: usize, j: usize| lattice[i * gw + j];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bottom = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            out[y * width + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Three-channel texture quantised to 8 bits: grey value noise blended
/// with a tinted noise of a random vivid hue; `chroma` sets the blend.
fn texture(height: usize, width: usize, cell: usize, chroma: f64, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let raw: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let peak = raw.iter().cloned().fold(f64::EPSILON, f64::max);
    let hue = raw.map(|v| v / peak);
    let planes: Vec<Vec<f64>> = (0..4)
        .map(|c| value_noise(height, width, cell, seed.wrapping_mul(4).wrapping_add(c)))
        .collect();
    (0..height * width)
        .map(|i| {
            std::array::from_fn(|c| {
                let tint = hue[c] * (0.4 + 0.6 * planes[c][i]);
                let v = planes[3][i] * (1.0 - chroma) + tint * chroma;
                (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
            })
        })
        .collect()
}

/// A rendered clip with per-frame instance masks and flow back to frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub spec: ClipSpec,
    /// RGB frames with values on the 8-bit grid.
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    /// Per frame, `[h, w, 2]` row-major `(dx, dy)` such that pixel `(x, y)`
    /// of frame `t` shows the point at `(x + dx, y + dy)` of frame 0.
    pub flows: Vec<Vec<f64>>,
}

impl SyntheticClip {
    pub fn objects(&self) -> usize {
        self.spec.sprites.len()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn generate_clip(scenario: Scenario, height: usize, width: usize, frames: usize, seed: u64) -> Result<SyntheticClip> {
    render_clip(&ClipSpec::for_scenario(scenario, height, width, frames, seed)?)
}

pub fn render_clip(spec: &ClipSpec) -> Result<SyntheticClip> {
    let (h, w, s) = (spec.height, spec.width, spec.sprite_size);
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!("clip size {h}x{w} must be a positive multiple of 4")));
    }
    if spec.frames < 2 {
        return Err(Error::Config(format!("a clip needs at least 2 frames, got {}", spec.frames)));
    }
    if s == 0 || s > h || s > w {
        return Err(Error::Config(format!("{s}px sprite does not fit a {h}x{w} frame")));
    }
    for sp in &spec.sprites {
        if sp.x < 0 || sp.y < 0 || sp.x as usize + s > w || sp.y as usize + s > h {
            return Err(Error::Config(format!("sprite at ({}, {}) leaves the frame", sp.x, sp.y)));
        }
    }
    if spec.sprites.len() > 254 {
        return Err(Error::Config("at most 254 sprites".into()));
    }
    let background = texture(h, w, 8, 0.2, spec.background_seed);
    let sprite_tex: Vec<Vec<[f64; 3]>> = spec.sprites.iter().map(|sp| texture(s, s, 4, 0.9, sp.texture_seed)).collect();
    let occluder_tex = spec
        .occluder
        .map(|(_, _, ow, oh)| texture(oh, ow, 4, 0.5, spec.background_seed.wrapping_add(17)));
    let tracks = spec.trajectories();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut flows = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = Frame::zeros(h, w, ColorSpace::Rgb);
        let mut mask = Mask::zeros(h, w);
        let mut flow = vec![0.0; h * w * 2];
        for y in 0..h {
            for x in 0..w {
                frame.set_pixel(y, x, background[y * w + x]);
            }
        }
        for (k, (tex, track)) in sprite_tex.iter().zip(&tracks).enumerate() {
            let (sx, sy) = (track[t].0 as usize, track[t].1 as usize);
            let (dx, dy) = ((track[0].0 - track[t].0) as f64, (track[0].1 - track[t].1) as f64);
            for v in 0..s {
                for u in 0..s {
                    let (x, y) = (sx + u, sy + v);
                    frame.set_pixel(y, x, tex[v * s + u]);
                    mask.set(x, y, (k + 1) as u8);
                    flow[(y * w + x) * 2] = dx;
                    flow[(y * w + x) * 2 + 1] = dy;
                }
            }
        }
        if let (Some((ox, oy, ow, oh)), Some(tex)) = (spec.occluder, &occluder_tex) {
            for v in 0..oh.min(h - oy) {
                for u in 0..ow.min(w - ox) {
                    let (x, y) = (ox + u, oy + v);
                    frame.set_pixel(y, x, tex[v * ow + u]);
                    mask.set(x, y, 0);
                    flow[(y * w + x) * 2] = 0.0;
                    flow[(y * w + x) * 2 + 1] = 0.0;
                }
            }
        }
        frames.push(frame);
        masks.push(mask);
        flows.push(flow);
    }
    Ok(SyntheticClip {
        spec: spec.clone(),
        frames,
        masks,
        flows,
    })
}
