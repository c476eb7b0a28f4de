//! Runs the twin-sprite ablations over three seeds with shared training.
use std::time::Instant;

use liir::config::RunConfig;
use liir::experiment::{ablate_axes, Axis};

fn main() -> liir::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("scenarios", "twin_sprites")?;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let start = Instant::now();
    let tables = ablate_axes(&cfg, &[Axis::Inter, Axis::Shift, Axis::Compactness], &[0, 1, 2], |v, s, r| {
        println!(
            "{v} seed {s} accuracy {:.4} J {:.4} [{:.0}s]",
            r.accuracy,
            r.mean_j,
            start.elapsed().as_secs_f64()
        );
    })?;
    for t in tables {
        println!("{t}");
    }
    Ok(())
}
