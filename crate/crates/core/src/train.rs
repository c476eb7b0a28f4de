//! Reconstruction training: Adam over the encoder parameters, a warm-up
//! phase on intra-video affinities and an inter phase that adds memory-bank
//! negatives and the compactness prior.

use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::{intra_inter_on_tape, intra_on_tape, logits_on_tape};
use crate::compactness::{compactness_loss_on_tape, DEFAULT_COMPONENTS, DEFAULT_SIGMA2_MIN};
use crate::diff::{Tape, Tensor};
use crate::encoder::{EncoderParams, STRIDE};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::memory_bank::{MemoryBank, DEFAULT_CAPACITY, DEFAULT_MOMENTUM, DEFAULT_POINTS_PER_FRAME};
use crate::position::ShiftMode;
use crate::reconstruction::{color_rows, reconstruct_on_tape, rms_on_tape, BottleneckDraw, BottleneckSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub inter_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_warmup: f64,
    pub lr_inter: f64,
    pub lambda_com: f64,
    /// Largest frame distance between query and reference.
    pub max_gap: usize,
    pub temperature: f64,
    pub bottleneck: BottleneckSpec,
    /// Use memory-bank negatives in the inter phase.
    pub negatives: bool,
    pub bank_capacity: usize,
    pub bank_points: usize,
    pub momentum: f64,
    pub shift_mode: ShiftMode,
    /// Apply the compactness loss in the inter phase.
    pub compact_train: bool,
    pub components: usize,
    pub sigma2_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 6,
            inter_epochs: 2,
            steps_per_epoch: 50,
            batch_size: 4,
            lr_warmup: 3e-3,
            lr_inter: 5e-4,
            lambda_com: 0.01,
            max_gap: 4,
            temperature: 0.01,
            bottleneck: BottleneckSpec::default(),
            negatives: true,
            bank_capacity: DEFAULT_CAPACITY,
            bank_points: DEFAULT_POINTS_PER_FRAME,
            momentum: DEFAULT_MOMENTUM,
            shift_mode: ShiftMode::Shift,
            compact_train: true,
            components: DEFAULT_COMPONENTS,
            sigma2_min: DEFAULT_SIGMA2_MIN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("max_gap", self.max_gap),
            ("bank_capacity", self.bank_capacity),
            ("bank_points", self.bank_points),
            ("components", self.components),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let reals = [
            ("lr_warmup", self.lr_warmup),
            ("lr_inter", self.lr_inter),
            ("temperature", self.temperature),
            ("sigma2_min", self.sigma2_min),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if !(self.lambda_com.is_finite() && self.lambda_com >= 0.0) {
            return Err(Error::Config(format!("lambda_com must be >= 0, got {}", self.lambda_com)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        self.bottleneck.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Inter,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Inter => "inter",
        })
    }
}

/// A training video: Lab frames and an id used for negative exclusion.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: usize,
    pub frames: Vec<Frame>,
}

/// Query and reference frames (Lab) from one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub query: Frame,
    pub reference: Frame,
    pub video_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_res: f64,
    pub l_com: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &EncoderParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, tensor) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, p) in tensor.values_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One record of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub losses: StepLosses,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:.6} {:.6}",
            self.epoch, self.step, self.losses.l_res, self.losses.l_com
        )
    }
}

pub struct Trainer {
    pub params: EncoderParams,
    pub bank: MemoryBank,
    pub cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    steps: usize,
    threads: usize,
}

impl Trainer {
    pub fn new(params: EncoderParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = MemoryBank::new(
            &params,
            cfg.bank_capacity,
            cfg.bank_points,
            cfg.momentum,
            cfg.temperature,
            cfg.shift_mode,
        )?;
        Ok(Trainer {
            adam: Adam::new(&params),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11),
            params,
            bank,
            cfg,
            steps: 0,
            threads: crate::worker_threads(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Caps the workers used per batch; results do not depend on it.
    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    /// Bottleneck draw and negatives for one pair, taken in batch order so
    /// results do not depend on the thread count.
    fn prepare(&mut self, pair: &Pair, phase: Phase) -> Result<(BottleneckDraw, Option<Tensor>)> {
        let draw = self.cfg.bottleneck.sample(&mut self.rng);
        let negatives = if phase == Phase::Inter && self.cfg.negatives {
            let n = self.bank.gather_negatives(pair.video_id);
            (!n.is_empty()).then(|| n.to_tensor())
        } else {
            None
        };
        Ok((draw, negatives))
    }

    /// Losses and summed parameter gradients over `batch`, evaluated on up
    /// to `threads` workers and reduced in batch order.
    fn batch_grads(&mut self, batch: &[Pair], phase: Phase) -> Result<(StepLosses, Vec<Vec<f64>>)> {
        let jobs = batch
            .iter()
            .map(|p| self.prepare(p, phase))
            .collect::<Result<Vec<_>>>()?;
        let (params, cfg) = (&self.params, &self.cfg);
        let run = |i: usize| {
            let (draw, negatives) = &jobs[i];
            item_grads(params, cfg, &batch[i], phase, *draw, negatives.clone())
        };
        let threads = self.threads.clamp(1, batch.len());
        let results: Vec<Result<(StepLosses, Vec<Vec<f64>>)>> = if threads == 1 {
            (0..batch.len()).map(run).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads)
                    .map(|t| {
                        let run = &run;
                        scope.spawn(move || (t..batch.len()).step_by(threads).map(|i| (i, run(i))).collect::<Vec<_>>())
                    })
                    .collect();
                let mut out: Vec<_> = handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("training worker panicked"))
                    .collect();
                out.sort_by_key(|(i, _)| *i);
                out.into_iter().map(|(_, r)| r).collect()
            })
        };
        let mut grads: Vec<Vec<f64>> = self.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut total = StepLosses { l_res: 0.0, l_com: 0.0 };
        for r in results {
            let (l, g) = r?;
            total.l_res += l.l_res;
            total.l_com += l.l_com;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        Ok((total, grads))
    }

    /// One Adam step on the mean loss over `batch`. In the inter phase with
    /// negatives enabled the bank must be non-empty; afterwards the moving
    /// average is updated and the bottlenecked queries are pushed.
    pub fn train_step(&mut self, batch: &[Pair], phase: Phase) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let use_bank = phase == Phase::Inter && self.cfg.negatives;
        if use_bank && self.bank.is_empty() {
            return Err(Error::State("inter phase needs a non-empty memory bank".into()));
        }
        let (total, mut grads) = self.batch_grads(batch, phase)?;
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        let lr = match phase {
            Phase::Warmup => self.cfg.lr_warmup,
            Phase::Inter => self.cfg.lr_inter,
        };
        self.adam.step(&mut self.params, &grads, lr);
        self.steps += 1;
        if use_bank {
            self.bank.ema_update(&self.params)?;
            for pair in batch {
                let frame = self.cfg.bottleneck.sample(&mut self.rng).apply(&pair.query);
                self.bank.push(&frame, pair.video_id, &mut self.rng)?;
            }
        }
        Ok(StepLosses {
            l_res: total.l_res * scale,
            l_com: total.l_com * scale,
        })
    }

    /// Loss of `batch` under the current parameters without updating them
    /// (bottleneck draws are taken from a copy of the generator).
    pub fn evaluate(&self, batch: &[Pair], phase: Phase) -> Result<StepLosses> {
        let mut probe = Trainer {
            params: self.params.clone(),
            bank: self.bank.clone(),
            cfg: self.cfg.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            steps: self.steps,
            threads: self.threads,
        };
        let (total, _) = probe.batch_grads(batch, phase)?;
        let n = batch.len().max(1) as f64;
        Ok(StepLosses {
            l_res: total.l_res / n,
            l_com: total.l_com / n,
        })
    }

    /// A random pair from a random video, `1..=max_gap` frames apart.
    pub fn sample_pair(&mut self, videos: &[Video]) -> Result<Pair> {
        let v = &videos[self.rng.random_range(0..videos.len())];
        let n = v.frames.len();
        if n < 2 {
            return Err(Error::Contract(format!("video {} has fewer than 2 frames", v.id)));
        }
        let gap = self.rng.random_range(1..=self.cfg.max_gap.min(n - 1));
        let r = self.rng.random_range(0..n - gap);
        let (q, r) = if self.rng.random::<bool>() { (r + gap, r) } else { (r, r + gap) };
        Ok(Pair {
            query: v.frames[q].clone(),
            reference: v.frames[r].clone(),
            video_id: v.id,
        })
    }

    /// Resets the moving average to the live weights and fills the bank with
    /// frames drawn across `videos`.
    pub fn prefill_bank(&mut self, videos: &[Video]) -> Result<()> {
        self.bank.sync(&self.params);
        self.bank.clear();
        for _ in 0..self.cfg.bank_capacity {
            let v = &videos[self.rng.random_range(0..videos.len())];
            let frame = &v.frames[self.rng.random_range(0..v.frames.len())];
            let frame = self.cfg.bottleneck.sample(&mut self.rng).apply(frame);
            self.bank.push(&frame, v.id, &mut self.rng)?;
        }
        Ok(())
    }

    /// Warm-up epochs then inter epochs; every step is reported to `log`.
    pub fn fit(&mut self, videos: &[Video], mut log: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        if videos.is_empty() {
            return Err(Error::Contract("no training videos".into()));
        }
        let mut epoch_means = Vec::new();
        let schedule = std::iter::repeat_n(Phase::Warmup, self.cfg.warmup_epochs)
            .chain(std::iter::repeat_n(Phase::Inter, self.cfg.inter_epochs));
        let mut entered_inter = false;
        for (epoch, phase) in schedule.enumerate() {
            if phase == Phase::Inter && !entered_inter {
                entered_inter = true;
                if self.cfg.negatives {
                    self.prefill_bank(videos)?;
                }
            }
            let mut sum = StepLosses { l_res: 0.0, l_com: 0.0 };
            for _ in 0..self.cfg.steps_per_epoch {
                let batch = (0..self.cfg.batch_size)
                    .map(|_| self.sample_pair(videos))
                    .collect::<Result<Vec<_>>>()?;
                let losses = self.train_step(&batch, phase)?;
                sum.l_res += losses.l_res;
                sum.l_com += losses.l_com;
                log(&StepRecord {
                    epoch,
                    step: self.steps,
                    phase,
                    losses,
                });
            }
            let n = self.cfg.steps_per_epoch as f64;
            epoch_means.push(StepRecord {
                epoch,
                step: self.steps,
                phase,
                losses: StepLosses {
                    l_res: sum.l_res / n,
                    l_com: sum.l_com / n,
                },
            });
        }
        Ok(epoch_means)
    }
}

/// Loss and parameter gradients for one pair; the bottleneck draw is
/// shared by query and reference, targets are the original colours.
fn item_grads(
    params: &EncoderParams,
    cfg: &TrainConfig,
    pair: &Pair,
    phase: Phase,
    draw: BottleneckDraw,
    negatives: Option<Tensor>,
) -> Result<(StepLosses, Vec<Vec<f64>>)> {
    let (h, w) = (pair.query.height() / STRIDE, pair.query.width() / STRIDE);
    let (q_in, r_in) = (draw.apply(&pair.query), draw.apply(&pair.reference));
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, true)?;
    let pos = params.position.on_tape(&mut tape, &vars.position)?;
    let fq = params.forward(&mut tape, &vars, &q_in, pos)?;
    let fq = params.embed(&mut tape, fq, cfg.temperature)?;
    let fr = params.forward(&mut tape, &vars, &r_in, pos)?;
    let fr = params.embed(&mut tape, fr, cfg.temperature)?;
    let logits = logits_on_tape(&mut tape, fq, fr)?;
    let intra = intra_on_tape(&mut tape, logits, None::<Rc<[bool]>>)?;
    let affinity = match negatives {
        Some(n) => {
            let n = tape.constant(n)?;
            intra_inter_on_tape(&mut tape, fq, logits, Some(n))?
        }
        None => intra,
    };
    let ref_colors = tape.constant(color_rows(&pair.reference, h, w)?)?;
    let target = tape.constant(color_rows(&pair.query, h, w)?)?;
    let recon = reconstruct_on_tape(&mut tape, affinity, ref_colors)?;
    let l_res = rms_on_tape(&mut tape, recon, target)?;
    let mut loss = l_res;
    let mut l_com = 0.0;
    if phase == Phase::Inter && cfg.compact_train && cfg.lambda_com > 0.0 {
        let lc = compactness_loss_on_tape(&mut tape, intra, h, w, cfg.components, cfg.sigma2_min)?;
        l_com = tape.value(lc).item();
        let weighted = tape.scale(lc, cfg.lambda_com)?;
        loss = tape.add(loss, weighted)?;
    }
    let l_res = tape.value(l_res).item();
    if !l_res.is_finite() || !l_com.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {l_res} / {l_com}")));
    }
    tape.backward(loss)?;
    let grads = vars
        .all()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], |g| g.values().to_vec()))
        .collect();
    Ok((StepLosses { l_res, l_com }, grads))
}

/// Concatenated parameter values, for comparisons in tests and tools.
pub fn flat_params(params: &EncoderParams) -> Vec<f64> {
    params.tensors().iter().flat_map(|t| t.values().iter().copied()).collect()
}
