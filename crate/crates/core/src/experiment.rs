//! Desk-scale experiments: train on synthetic clips, propagate first-frame
//! masks through held-out clips, and compare ablation variants over seeds.

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::{generate_clip, Scenario, SyntheticClip};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::metrics::{class_mean_accuracy, sequence_j, SequenceJ};
use crate::propagation::{propagate_masks, PropagationOptions};
use crate::train::{StepRecord, Trainer, Video};

/// Offset between the seed ranges of different scenarios.
const SCENARIO_STRIDE: u64 = 100_000;

fn scenario_index(s: Scenario) -> u64 {
    Scenario::ALL.iter().position(|&x| x == s).expect("listed") as u64
}

/// Training clips: seeds `k` (plus a per-scenario offset) for `k < train_clips`.
pub fn training_clips(cfg: &RunConfig) -> Result<Vec<SyntheticClip>> {
    clips(cfg, 0, cfg.train_clips)
}

/// Held-out clips, seeded from `eval_seed`.
pub fn evaluation_clips(cfg: &RunConfig) -> Result<Vec<SyntheticClip>> {
    clips(cfg, cfg.eval_seed, cfg.eval_clips)
}

fn clips(cfg: &RunConfig, base: u64, count: usize) -> Result<Vec<SyntheticClip>> {
    let mut out = Vec::with_capacity(count * cfg.scenarios.len());
    for &s in &cfg.scenarios {
        for k in 0..count as u64 {
            let seed = base + scenario_index(s) * SCENARIO_STRIDE + k;
            out.push(generate_clip(s, cfg.frame_size, cfg.frame_size, cfg.clip_length, seed)?);
        }
    }
    Ok(out)
}

pub fn to_videos(clips: &[SyntheticClip], cfg: &RunConfig) -> Vec<Video> {
    let space = cfg.train.bottleneck.colorspace;
    clips
        .iter()
        .enumerate()
        .map(|(id, c)| Video {
            id,
            frames: c.frames.iter().map(|f| f.to_space(space)).collect(),
        })
        .collect()
}

pub fn initial_params(cfg: &RunConfig) -> Result<EncoderParams> {
    EncoderParams::new(cfg.position, cfg.frame_size, cfg.frame_size, cfg.train.seed)
}

/// Trains from [`initial_params`] on [`training_clips`]; returns the
/// trained parameters and per-epoch mean losses.
pub fn train(cfg: &RunConfig, log: impl FnMut(&StepRecord)) -> Result<(EncoderParams, Vec<StepRecord>)> {
    cfg.validate()?;
    let videos = to_videos(&training_clips(cfg)?, cfg);
    let mut trainer = Trainer::new(initial_params(cfg)?, cfg.train.clone())?;
    let epochs = trainer.fit(&videos, log)?;
    Ok((trainer.params, epochs))
}

pub fn propagation_options(cfg: &RunConfig) -> PropagationOptions {
    PropagationOptions {
        window: cfg.window,
        compact: cfg.compact_infer,
        components: cfg.train.components,
        sigma2_min: cfg.train.sigma2_min,
        long_term: cfg.long_term,
        bilinear: cfg.bilinear,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_clip: Vec<SequenceJ>,
    /// Mean over clips of the per-clip mean J.
    pub mean_j: f64,
    /// Mean over clips of the class-mean pixel accuracy.
    pub accuracy: f64,
}

/// Propagates each clip's frame-0 mask with `params` and scores J.
pub fn evaluate(params: &EncoderParams, cfg: &RunConfig, clips: &[SyntheticClip]) -> Result<EvalReport> {
    let opts = propagation_options(cfg);
    let mut per_clip = Vec::with_capacity(clips.len());
    let mut accuracy = 0.0;
    for c in clips {
        let masks = propagate_masks(
            params,
            cfg.train.temperature,
            cfg.train.bottleneck.colorspace,
            &c.frames,
            &c.masks[0],
            c.objects() + 1,
            &opts,
        )?;
        accuracy += class_mean_accuracy(&masks, &c.masks)?;
        per_clip.push(sequence_j(&masks, &c.masks)?);
    }
    let mean_j = if per_clip.is_empty() {
        0.0
    } else {
        per_clip.iter().map(|j| j.mean).sum::<f64>() / per_clip.len() as f64
    };
    Ok(EvalReport {
        per_clip,
        mean_j,
        accuracy: accuracy / clips.len().max(1) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Inter,
    Position,
    Shift,
    Compactness,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Inter => "inter",
            Axis::Position => "position",
            Axis::Shift => "shift",
            Axis::Compactness => "compactness",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter" => Ok(Axis::Inter),
            "position" => Ok(Axis::Position),
            "shift" => Ok(Axis::Shift),
            "compactness" => Ok(Axis::Compactness),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

/// A named set of config overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub overrides: Vec<(&'static str, &'static str)>,
}

impl Axis {
    /// Variants from weakest to the full model, which comes last.
    pub fn variants(self) -> Vec<Variant> {
        let v = |name, overrides: &[(&'static str, &'static str)]| Variant {
            name,
            overrides: overrides.to_vec(),
        };
        match self {
            Axis::Inter => vec![v("intra", &[("negatives", "false")]), v("inter+intra", &[("negatives", "true")])],
            Axis::Position => vec![
                v("none", &[("position", "none")]),
                v("2dspe", &[("position", "2dspe")]),
                v("2dape", &[("position", "2dape")]),
                v("1dape", &[("position", "1dape")]),
            ],
            Axis::Shift => vec![
                v("none", &[("shift_mode", "none")]),
                v("shuffle", &[("shift_mode", "shuffle")]),
                v("shift", &[("shift_mode", "shift")]),
            ],
            Axis::Compactness => vec![
                v("neither", &[("compact_train", "false"), ("compact_infer", "false")]),
                v("train", &[("compact_train", "true"), ("compact_infer", "false")]),
                v("train+infer", &[("compact_train", "true"), ("compact_infer", "true")]),
            ],
        }
    }
}

/// Per-seed held-out scores of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub name: String,
    pub accuracy: Vec<f64>,
    pub j: Vec<f64>,
}

impl VariantResult {
    pub fn median_accuracy(&self) -> f64 {
        median(&self.accuracy)
    }

    pub fn median_j(&self) -> f64 {
        median(&self.j)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: Axis,
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantResult>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for AblationTable {
    /// Medians over seeds and deltas against the full model (last row).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (base_acc, base_j) = self.rows.last().map_or((0.0, 0.0), |r| (r.median_accuracy(), r.median_j()));
        writeln!(f, "axis {}  seeds {:?}", self.axis, self.seeds)?;
        writeln!(
            f,
            "{:<14} {:>8} {:>8} {:>8} {:>8}  per-seed accuracy",
            "variant", "accuracy", "delta", "J", "delta"
        )?;
        for r in &self.rows {
            let scores: Vec<String> = r.accuracy.iter().map(|s| format!("{s:.4}")).collect();
            writeln!(
                f,
                "{:<14} {:>8.4} {:>+8.4} {:>8.4} {:>+8.4}  {}",
                r.name,
                r.median_accuracy(),
                r.median_accuracy() - base_acc,
                r.median_j(),
                r.median_j() - base_j,
                scores.join(" ")
            )?;
        }
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Configs that differ only in propagation settings share a trained model.
fn training_key(cfg: &RunConfig) -> RunConfig {
    let mut k = cfg.clone();
    let d = RunConfig::default();
    k.compact_infer = d.compact_infer;
    k.window = d.window;
    k.long_term = d.long_term;
    k.bilinear = d.bilinear;
    k.output_dir = d.output_dir;
    k
}

/// Trains and evaluates every variant of `axis` for each seed; `progress`
/// receives each held-out report as it arrives.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    seeds: &[u64],
    progress: impl FnMut(&str, u64, &EvalReport),
) -> Result<AblationTable> {
    let mut tables = ablate_axes(base, &[axis], seeds, progress)?;
    Ok(tables.remove(0))
}

/// [`ablate`] over several axes, training each distinct model once.
pub fn ablate_axes(
    base: &RunConfig,
    axes: &[Axis],
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &EvalReport),
) -> Result<Vec<AblationTable>> {
    let mut cache: Vec<(RunConfig, EncoderParams)> = Vec::new();
    let mut tables = Vec::with_capacity(axes.len());
    for &axis in axes {
        let mut rows = Vec::new();
        for variant in axis.variants() {
            let mut accuracy = Vec::with_capacity(seeds.len());
            let mut j = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.train.seed = seed;
                for (k, v) in &variant.overrides {
                    cfg.set(k, v)?;
                }
                cfg.validate()?;
                let key = training_key(&cfg);
                let params = match cache.iter().find(|(k, _)| *k == key) {
                    Some((_, p)) => p.clone(),
                    None => {
                        let (p, _) = train(&cfg, |_| {})?;
                        cache.push((key, p.clone()));
                        p
                    }
                };
                let report = evaluate(&params, &cfg, &evaluation_clips(&cfg)?)?;
                progress(variant.name, seed, &report);
                accuracy.push(report.accuracy);
                j.push(report.mean_j);
            }
            rows.push(VariantResult {
                name: variant.name.to_string(),
                accuracy,
                j,
            });
        }
        tables.push(AblationTable {
            axis,
            seeds: seeds.to_vec(),
            rows,
        });
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn variants_parse_as_config() {
        for axis in [Axis::Inter, Axis::Position, Axis::Shift, Axis::Compactness] {
            assert_eq!(axis.to_string().parse::<Axis>().unwrap(), axis);
            for v in axis.variants() {
                let mut cfg = RunConfig::default();
                for (k, val) in v.overrides {
                    cfg.set(k, val).unwrap();
                }
            }
        }
    }

    #[test]
    fn clip_sets_are_disjoint_and_stable() {
        let cfg = RunConfig {
            train_clips: 2,
            eval_clips: 2,
            clip_length: 2,
            ..Default::default()
        };
        let a = training_clips(&cfg).unwrap();
        let b = evaluation_clips(&cfg).unwrap();
        assert_eq!(a, training_clips(&cfg).unwrap());
        assert!(a.iter().all(|c| !b.contains(c)));
    }
}
