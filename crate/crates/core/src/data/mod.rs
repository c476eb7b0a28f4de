//! Synthetic sprite videos with exact ground truth, and DAVIS-style
//! directories of numbered frames and indexed annotations.

mod io;
mod synthetic;

pub use io::{davis_palette, load_sequence, read_annotation, write_annotation, write_clip, Sequence};
pub use synthetic::{generate_clip, render_clip, value_noise, ClipSpec, Scenario, SpriteSpec, SyntheticClip};
