//! `liir`: train, propagate, evaluate, ablate, render and generate data.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use liir::affinity::intra_affinity;
use liir::checkpoint::Checkpoint;
use liir::compactness::compact_row;
use liir::config::{RunConfig, KEYS};
use liir::data::{load_sequence, write_annotation, write_clip};
use liir::encoder::{encode_frame, STRIDE};
use liir::experiment::{ablate, evaluate, evaluation_clips, initial_params, propagation_options, train, training_clips, Axis};
use liir::grid::Grid;
use liir::metrics::{sequence_j, Mask};
use liir::propagation::propagate_masks;
use liir::Error;

#[derive(Parser)]
#[command(name = "liir", version, about = "Self-supervised temporal correspondence at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shortcut for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder; writes a checkpoint, the config used and a metrics log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: `output_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Propagate the first-frame annotation of a sequence directory.
    Propagate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `frames/%05d.png` and `anno/00000.png`.
        #[arg(long)]
        sequence: PathBuf,
        /// Where predicted masks are written as indexed PNGs.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score J and class-mean accuracy on held-out synthetic clips.
    Eval {
        /// Omit to evaluate a randomly initialised encoder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate every variant along one ablation axis.
    Ablate {
        /// inter | position | shift | compactness
        #[arg(long)]
        axis: String,
        /// Comma-separated training seeds (at least 3).
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a float grid to PNG, or dump one affinity heatmap before and
    /// after compact filtering.
    Render {
        /// Existing `.pfm` grid to render.
        #[arg(long, conflicts_with_all = ["checkpoint", "sequence"])]
        grid: Option<PathBuf>,
        #[arg(long, requires = "sequence")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        sequence: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        query: usize,
        #[arg(long, default_value_t = 0)]
        reference: usize,
        /// Query pixel `x,y` at frame resolution.
        #[arg(long, value_parser = parse_pixel, default_value = "0,0")]
        pixel: (usize, usize),
        /// Output PNG (grid mode) or directory (heatmap mode).
        #[arg(long)]
        out: PathBuf,
        /// Pixels per grid cell in the PNG.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write synthetic clips in the on-disk sequence layout.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Which clip set to write.
        #[arg(long, default_value = "eval", value_parser = ["train", "eval"])]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// List every config key with its default.
    Keys,
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected x,y, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(x)?, n(y)?))
}

/// Prints a line; a closed stdout (e.g. piped into `head`) ends the
/// process quietly.
macro_rules! say {
    ($($arg:tt)*) => {{
        let mut out = std::io::stdout().lock();
        if let Err(e) = writeln!(out, $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

/// Failures with their process exit codes.
enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Numeric(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Config(_) | Error::Range(_) => Failure::Config(m),
            Error::Io(_) | Error::Image(_) | Error::Format(_) | Error::Shape(_) => Failure::Data(m),
            Error::Numeric(_) => Failure::Numeric(m),
            _ => Failure::Other(m),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    check_threads()?;
    match command {
        Command::Train { cfg, out } => cmd_train(&load_config(&cfg)?, out),
        Command::Propagate {
            checkpoint,
            sequence,
            out,
            cfg,
        } => cmd_propagate(&load_config(&cfg)?, &checkpoint, &sequence, &out),
        Command::Eval { checkpoint, cfg } => cmd_eval(&load_config(&cfg)?, checkpoint.as_deref()),
        Command::Ablate { axis, seeds, cfg } => cmd_ablate(&load_config(&cfg)?, &axis, &seeds),
        Command::Render {
            grid,
            checkpoint,
            sequence,
            query,
            reference,
            pixel,
            out,
            scale,
            cfg,
        } => match (grid, checkpoint, sequence) {
            (Some(grid), _, _) => {
                Grid::read_pfm(&grid)?.render_png(&out, scale)?;
                say!("{}", out.display());
                Ok(())
            }
            (None, Some(ck), Some(seq)) => {
                cmd_render_heatmap(&load_config(&cfg)?, &ck, &seq, (query, reference), pixel, &out, scale)
            }
            _ => Err(Failure::Config("render needs --grid or --checkpoint with --sequence".into())),
        },
        Command::GenData { out, split, cfg } => cmd_gen_data(&load_config(&cfg)?, &out, &split),
        Command::Keys => {
            let cfg = RunConfig::default();
            for (key, doc) in KEYS {
                say!("{key} = {}  # {doc}", cfg.get(key)?);
            }
            Ok(())
        }
    }
}

fn check_threads() -> CliResult<()> {
    match std::env::var("LIIR_THREADS") {
        Ok(v) if !matches!(v.trim().parse::<usize>(), Ok(n) if n > 0) => Err(Failure::Config(format!(
            "LIIR_THREADS must be a positive integer, got {v:?}"
        ))),
        _ => Ok(()),
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Failure::Config(format!("cannot read config {}: {io}", path.display())),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<()> {
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).map_err(Error::from)?;
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(Error::from)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("metrics.log"))
        .map_err(Error::from)?;
    let mut log_err = None;
    let (params, epochs) = train(cfg, |r| {
        if log_err.is_none() {
            log_err = writeln!(log, "{r}").err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::from(e).into());
    }
    for e in &epochs {
        say!(
            "epoch {} {} L_res {:.6} L_com {:.6}",
            e.epoch, e.phase, e.losses.l_res, e.losses.l_com
        );
    }
    let path = out.join("checkpoint.liir");
    Checkpoint {
        params,
        temperature: cfg.train.temperature,
    }
    .save(&path)?;
    say!("checkpoint {}", path.display());
    Ok(())
}

/// One report record: name, mean J, then `object:J` pairs.
fn j_report(name: &str, preds: &[Mask], annotations: &[Option<Mask>]) -> CliResult<String> {
    let (p, g): (Vec<Mask>, Vec<Mask>) = preds
        .iter()
        .zip(annotations)
        .enumerate()
        .filter_map(|(t, (p, a))| a.as_ref().filter(|_| t > 0).map(|a| (p.clone(), a.clone())))
        .unzip();
    if g.is_empty() {
        return Ok(format!("{name} J n/a"));
    }
    // sequence_j skips its first entry, so lead with a placeholder pair
    let lead = Mask::zeros(g[0].height, g[0].width);
    let preds: Vec<Mask> = std::iter::once(lead.clone()).chain(p).collect();
    let gts: Vec<Mask> = std::iter::once(lead).chain(g).collect();
    let j = sequence_j(&preds, &gts)?;
    let objects: Vec<String> = j.per_object.iter().map(|(k, v)| format!("{k}:{v:.4}")).collect();
    Ok(format!("{name} J {:.4} {}", j.mean, objects.join(" ")).trim_end().to_string())
}

fn cmd_propagate(cfg: &RunConfig, checkpoint: &Path, sequence: &Path, out: &Path) -> CliResult<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let seq = load_sequence(sequence)?;
    let first = seq
        .first_annotation()
        .ok_or_else(|| Failure::Data(format!("{} has no first-frame annotation", sequence.display())))?;
    let masks = propagate_masks(
        &ck.params,
        ck.temperature,
        cfg.train.bottleneck.colorspace,
        &seq.frames,
        first,
        seq.classes,
        &propagation_options(cfg),
    )?;
    fs::create_dir_all(out).map_err(Error::from)?;
    for (t, m) in masks.iter().enumerate() {
        write_annotation(m, out.join(format!("{t:05}.png")))?;
    }
    say!("{}", j_report(&seq.name, &masks, &seq.annotations)?);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<()> {
    let mut cfg = cfg.clone();
    let params = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            cfg.train.temperature = ck.temperature;
            ck.params
        }
        None => initial_params(&cfg)?,
    };
    let clips = evaluation_clips(&cfg)?;
    let report = evaluate(&params, &cfg, &clips)?;
    for (k, j) in report.per_clip.iter().enumerate() {
        let objects: Vec<String> = j.per_object.iter().map(|(c, v)| format!("{c}:{v:.4}")).collect();
        let scenario = cfg.scenarios[k / cfg.eval_clips.max(1)];
        say!(
            "{scenario}-{:03} J {:.4} {}",
            k % cfg.eval_clips.max(1),
            j.mean,
            objects.join(" ")
        );
    }
    say!("mean J {:.4} accuracy {:.4}", report.mean_j, report.accuracy);
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, axis: &str, seeds: &[u64]) -> CliResult<()> {
    let axis: Axis = axis.parse()?;
    if seeds.len() < 3 {
        return Err(Failure::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let table = ablate(cfg, axis, seeds, |variant, seed, report| {
        eprintln!(
            "{variant} seed {seed} accuracy {:.4} J {:.4}",
            report.accuracy, report.mean_j
        );
    })?;
    say!("{}", table.to_string().trim_end());
    Ok(())
}

fn cmd_render_heatmap(
    cfg: &RunConfig,
    checkpoint: &Path,
    sequence: &Path,
    (query, reference): (usize, usize),
    (x, y): (usize, usize),
    out: &Path,
    scale: usize,
) -> CliResult<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let seq = load_sequence(sequence)?;
    let frame = |t: usize| {
        seq.frames
            .get(t)
            .map(|f| f.to_space(cfg.train.bottleneck.colorspace))
            .ok_or_else(|| Failure::Config(format!("frame {t} out of range (sequence has {})", seq.frames.len())))
    };
    let (fq, fr) = (frame(query)?, frame(reference)?);
    if x >= fq.width() || y >= fq.height() {
        return Err(Failure::Config(format!("pixel ({x}, {y}) outside the {}x{} frame", fq.width(), fq.height())));
    }
    let eq = encode_frame(&fq, &ck.params, ck.temperature)?;
    let er = encode_frame(&fr, &ck.params, ck.temperature)?;
    let a = intra_affinity(&eq, &er, cfg.window)?;
    let (h, w) = (er.height, er.width);
    let row = a.row((y / STRIDE) * eq.width + x / STRIDE).to_vec();
    let compact = compact_row(&row, h, w, cfg.train.components, cfg.train.sigma2_min);
    fs::create_dir_all(out).map_err(Error::from)?;
    for (name, values) in [("heatmap", row), ("compact", compact)] {
        let g = Grid::new(h, w, values)?;
        g.write_pfm(out.join(format!("{name}.pfm")))?;
        g.render_png(out.join(format!("{name}.png")), scale)?;
        say!("{}", out.join(format!("{name}.png")).display());
    }
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, split: &str) -> CliResult<()> {
    let clips = if split == "train" {
        training_clips(cfg)?
    } else {
        evaluation_clips(cfg)?
    };
    let per = clips.len() / cfg.scenarios.len().max(1);
    for (k, clip) in clips.iter().enumerate() {
        let dir = out.join(format!("{}-{:03}", cfg.scenarios[k / per.max(1)], k % per.max(1)));
        write_clip(clip, &dir)?;
        say!("{}", dir.display());
    }
    Ok(())
}
