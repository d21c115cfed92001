//! Denoising-score training for low-pass and conditional detail denoisers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, NormMode};
use crate::checkpoint::{Checkpoint, LossRecord, TrainMeta};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::wavelet::{build_pyramid, DETAIL_CHANNELS};

/// `y = x + σz` with `z` i.i.d. standard normal drawn from `seed`.
pub fn corrupt(x: &Tensor<f64>, sigma: f64, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corrupt_with(x, sigma, &mut rng)
}

pub fn corrupt_with<R: Rng + ?Sized>(x: &Tensor<f64>, sigma: f64, rng: &mut R) -> Result<Tensor<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise level must be finite and ≥ 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let data = x
        .data()
        .iter()
        .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// What the network learns to denoise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// The low-pass band at `depth` (0 is the full-resolution image).
    Lowpass { depth: usize },
    /// Detail band `scale` given its clean low-pass band.
    Conditional { scale: usize },
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("training mode `{s}`: expected lowpass:J or conditional:j")))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("training mode `{s}`: bad scale")))?;
        match kind.trim() {
            "lowpass" => Ok(TrainMode::Lowpass { depth: n }),
            "conditional" if n >= 1 => Ok(TrainMode::Conditional { scale: n }),
            _ => Err(Error::config(format!("training mode `{s}` not recognized"))),
        }
    }

    fn channels(self) -> (usize, usize) {
        match self {
            TrainMode::Lowpass { .. } => (1, 1),
            TrainMode::Conditional { .. } => (DETAIL_CHANNELS + 1, DETAIL_CHANNELS),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Lowpass { depth } => write!(f, "lowpass:{depth}"),
            TrainMode::Conditional { scale } => write!(f, "conditional:{scale}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Random square crops of this side (in band pixels) instead of whole bands.
    pub patch: Option<usize>,
    /// Random horizontal flips.
    pub flip: bool,
    /// Extra steps after the main loop with batch norm frozen at its
    /// running statistics.
    pub frozen_norm_steps: usize,
    /// Epochs without a 0.1% improvement before the learning rate halves.
    pub plateau_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            sigma_min: 0.0,
            sigma_max: 1.0,
            learning_rate: 1e-3,
            epochs: 10,
            max_steps: None,
            patch: None,
            flip: false,
            plateau_patience: 2,
            frozen_norm_steps: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(0.0 <= self.sigma_min && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::config(format!(
                "noise range must satisfy 0 ≤ σ_min < σ_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.patch == Some(0) {
            return Err(Error::config("patch size must be positive"));
        }
        Ok(())
    }
}

/// A clean training example at the band the model sees.
struct Example {
    /// `out_channels×S×S`
    target: Vec<f32>,
    /// `1×S×S` clean conditioning band (conditional mode only).
    cond: Vec<f32>,
    side: usize,
}

fn prepare(images: &[Tensor<f64>], mode: TrainMode) -> Result<Vec<Example>> {
    images
        .iter()
        .map(|img| {
            let (c, h, w) = img.dims3()?;
            if c != 1 || h != w {
                return Err(Error::dim(format!(
                    "training images must be 1×N×N, got {:?}",
                    img.shape()
                )));
            }
            let to32 = |t: &Tensor<f64>| t.data().iter().map(|&v| v as f32).collect::<Vec<_>>();
            match mode {
                TrainMode::Lowpass { depth: 0 } => Ok(Example {
                    target: to32(img),
                    cond: Vec::new(),
                    side: h,
                }),
                TrainMode::Lowpass { depth } => {
                    let p = build_pyramid(img, depth)?;
                    Ok(Example {
                        target: to32(&p.lowpass),
                        cond: Vec::new(),
                        side: h >> depth,
                    })
                }
                TrainMode::Conditional { scale } => {
                    let p = build_pyramid(img, scale)?;
                    Ok(Example {
                        target: to32(&p.details[scale - 1]),
                        cond: to32(&p.lowpass),
                        side: h >> scale,
                    })
                }
            }
        })
        .collect()
}

/// Window of a band stack: top-left corner, side, and whether it is
/// mirrored left-right.
#[derive(Clone, Copy)]
struct Window {
    r0: usize,
    c0: usize,
    side: usize,
    flip: bool,
}

/// Copies a window of every channel of `src` into `dst`. Mirroring an image
/// negates its vertical and diagonal Haar details, so `detail_bands` applies
/// that sign change to channels 1 and 2.
fn crop(src: &[f32], channels: usize, full: usize, w: Window, detail_bands: bool, dst: &mut Vec<f32>) {
    for ch in 0..channels {
        let sign = if w.flip && detail_bands && ch > 0 { -1.0 } else { 1.0 };
        for r in 0..w.side {
            let row = &src[(ch * full + w.r0 + r) * full + w.c0..][..w.side];
            if w.flip {
                dst.extend(row.iter().rev().map(|&v| sign * v));
            } else {
                dst.extend_from_slice(row);
            }
        }
    }
}

/// Builds one noisy/clean batch from the examples at `chunk`.
fn sample_batch(
    examples: &[Example],
    chunk: &[usize],
    cin: usize,
    cout: usize,
    side: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let full = examples[0].side;
    let b = chunk.len();
    let mut input = Vec::with_capacity(b * cin * side * side);
    let mut target = Vec::with_capacity(b * cout * side * side);
    for &i in chunk {
        let ex = &examples[i];
        let w = Window {
            r0: rng.gen_range(0..=full - side),
            c0: rng.gen_range(0..=full - side),
            side,
            flip: cfg.flip && rng.gen_bool(0.5),
        };
        let sigma = rng.gen_range(cfg.sigma_min..cfg.sigma_max);
        let details = cin > cout;
        let start = input.len();
        crop(&ex.target, cout, full, w, details, &mut input);
        for v in &mut input[start..] {
            *v += (sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
        if details {
            crop(&ex.cond, 1, full, w, false, &mut input);
        }
        crop(&ex.target, cout, full, w, details, &mut target);
    }
    Ok((
        Tensor::from_vec(&[b, cin, side, side], input)?,
        Tensor::from_vec(&[b, cout, side, side], target)?,
    ))
}

/// One Adam step on the MSE between `model(input)` and `target`; returns
/// the loss before the update. Running statistics move only in train mode.
fn optimize(
    model: &mut Model<f32>,
    input: Tensor<f32>,
    target: Tensor<f32>,
    norm: NormMode,
    state: &mut AdamState<f32>,
    adam: &AdamConfig,
    step: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(input, false)?;
    let fwd = model.forward_graph(&mut g, x, norm, true)?;
    let t = g.leaf(target, false)?;
    let loss = g.mse(fwd.output, t)?;
    let loss_value = g.value(loss).data()[0] as f64;
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss at step {step}")));
    }
    let grads = g.backward(loss)?;
    let gs: Vec<&Tensor<f32>> = fwd
        .params
        .iter()
        .map(|&p| grads.get(p).ok_or_else(|| Error::Graph("missing parameter gradient".into())))
        .collect::<Result<_>>()?;
    {
        let mut ps: Vec<&mut Tensor<f32>> = model.params_mut().iter_mut().collect();
        adam_step(&mut ps, &gs, state, adam)?;
    }
    if norm == NormMode::Train {
        model.update_running_stats(&g, &fwd.norms)?;
    }
    Ok(loss_value)
}

/// Trains `model` in place and returns a checkpoint holding the final
/// weights, optimizer state and per-step loss history.
///
/// Each example gets its own noise level drawn uniformly from
/// `[σ_min, σ_max]`; in conditional mode only the detail channels are
/// corrupted and the low-pass channel stays clean.
pub fn train_denoiser(
    model: &mut Model<f32>,
    train: &[Tensor<f64>],
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<Checkpoint> {
    train_denoiser_with(model, train, cfg, mode, |_| {})
}

/// [`train_denoiser`] with a callback after every logged step.
pub fn train_denoiser_with(
    model: &mut Model<f32>,
    train: &[Tensor<f64>],
    cfg: &TrainConfig,
    mode: TrainMode,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let (cin, cout) = mode.channels();
    if model.spec.in_channels != cin || model.spec.out_channels != cout {
        return Err(Error::config(format!(
            "{mode} training needs a {cin}→{cout} channel model, `{}` is {}→{}",
            model.spec.name, model.spec.in_channels, model.spec.out_channels
        )));
    }
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let examples = prepare(train, mode)?;
    let full = examples[0].side;
    if examples.iter().any(|e| e.side != full) {
        return Err(Error::dim("training images differ in size"));
    }
    let side = cfg.patch.unwrap_or(full);
    if side > full {
        return Err(Error::config(format!("patch {side} exceeds band side {full}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(model.params());
    let mut meta = TrainMeta {
        mode: mode.to_string(),
        seed: cfg.seed,
        ..TrainMeta::default()
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut step = 0u64;
    let budget = cfg.max_steps.map_or(u64::MAX, |s| s as u64);

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= budget {
                break 'epochs;
            }
            let (input, target) = sample_batch(&examples, chunk, cin, cout, side, cfg, &mut rng)?;
            let loss_value = optimize(model, input, target, NormMode::Train, &mut state, &adam, step)?;
            step += 1;
            epoch_loss += loss_value;
            batches += 1;
            let rec = LossRecord {
                epoch: epoch as u32,
                step,
                loss: loss_value,
            };
            on_step(&rec);
            meta.loss_history.push(rec);
        }
        meta.epoch = epoch as u32 + 1;
        if batches > 0 {
            let mean = epoch_loss / batches as f64;
            if mean < best * (1.0 - 1e-3) {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if cfg.plateau_patience > 0 && stale >= cfg.plateau_patience {
                    adam.lr *= 0.5;
                    stale = 0;
                }
            }
        }
    }
    // Fine-tune against the frozen running statistics so the weights fit
    // the normalization used at inference rather than per-batch statistics.
    // Moments gathered under batch statistics do not transfer, so the
    // optimizer restarts with a smaller step.
    let frozen_epoch = meta.epoch;
    let mut frozen_state = AdamState::new(model.params());
    let frozen_adam = AdamConfig {
        lr: adam.lr * 0.1,
        ..adam
    };
    for _ in 0..cfg.frozen_norm_steps {
        let chunk: Vec<usize> = rand::seq::index::sample(&mut rng, examples.len(), cfg.batch_size.min(examples.len())).into_vec();
        let (input, target) = sample_batch(&examples, &chunk, cin, cout, side, cfg, &mut rng)?;
        let loss = optimize(model, input, target, NormMode::Eval, &mut frozen_state, &frozen_adam, step)?;
        step += 1;
        let rec = LossRecord {
            epoch: frozen_epoch,
            step,
            loss,
        };
        on_step(&rec);
        meta.loss_history.push(rec);
    }
    meta.step = step;
    model.noise_range = (cfg.sigma_min, cfg.sigma_max);
    Ok(Checkpoint {
        model: model.clone(),
        optimizer: Some(state),
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{plain_network, LowpassConfig};

    #[test]
    fn corrupt_basics() {
        let x = Tensor::full(&[1, 4, 4], 0.5);
        assert_eq!(corrupt(&x, 0.0, 1).unwrap(), x);
        assert_eq!(corrupt(&x, 0.3, 1).unwrap(), corrupt(&x, 0.3, 1).unwrap());
        assert_ne!(corrupt(&x, 0.3, 1).unwrap(), corrupt(&x, 0.3, 2).unwrap());
        assert!(matches!(corrupt(&x, -0.1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn mirrored_details_match_mirrored_image() {
        let img = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| (v * v % 7) as f64).collect()).unwrap();
        let mirrored = Tensor::from_vec(
            &[1, 4, 4],
            (0..16).map(|i| img.data()[i / 4 * 4 + 3 - i % 4]).collect(),
        )
        .unwrap();
        let band = |x: &Tensor<f64>| -> Vec<f32> {
            build_pyramid(x, 1).unwrap().details[0].data().iter().map(|&v| v as f32).collect()
        };
        let mut out = Vec::new();
        let w = Window { r0: 0, c0: 0, side: 2, flip: true };
        crop(&band(&img), 3, 2, w, true, &mut out);
        assert_eq!(out, band(&mirrored));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(TrainMode::parse("lowpass:2").unwrap(), TrainMode::Lowpass { depth: 2 });
        assert_eq!(
            TrainMode::parse("conditional:1").unwrap(),
            TrainMode::Conditional { scale: 1 }
        );
        assert!(TrainMode::parse("conditional:0").is_err());
        assert!(TrainMode::parse("pixel").is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut m = crate::model::build_lowpass_denoiser(&LowpassConfig {
            conv_layers: 3,
            width: 2,
            ..LowpassConfig::default()
        })
        .unwrap()
        .cast::<f32>();
        let imgs = vec![Tensor::full(&[1, 8, 8], 0.5)];
        let err = train_denoiser(&mut m, &imgs, &TrainConfig::default(), TrainMode::Conditional { scale: 1 });
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn short_run_is_reproducible() {
        let spec = plain_network("t", 1, 1, 4, &[3, 3, 3], true).unwrap();
        let imgs: Vec<_> = (0..4)
            .map(|i| Tensor::full(&[1, 8, 8], 0.2 + 0.1 * i as f64))
            .collect();
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 3,
            patch: Some(4),
            flip: true,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::<f32>::init(spec.clone(), 5).unwrap();
            train_denoiser(&mut m, &imgs, &cfg, TrainMode::Lowpass { depth: 0 }).unwrap()
        };
        let a = run();
        assert_eq!(a.meta.loss_history.len(), 6);
        assert_eq!(a.meta.step, 6);
        assert_eq!(a, run());
    }

    #[test]
    fn frozen_phase_keeps_running_stats() {
        let spec = plain_network("t", 1, 1, 4, &[3, 3, 3], true).unwrap();
        let imgs: Vec<_> = (0..4)
            .map(|i| Tensor::full(&[1, 8, 8], 0.2 + 0.1 * i as f64))
            .collect();
        let mut m = Model::<f32>::init(spec, 5).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 1,
            ..TrainConfig::default()
        };
        train_denoiser(&mut m, &imgs, &cfg, TrainMode::Lowpass { depth: 0 }).unwrap();
        let stats = m.running_stats().to_vec();
        let weights = m.params().to_vec();
        let frozen = TrainConfig {
            epochs: 0,
            frozen_norm_steps: 3,
            ..cfg
        };
        let ck = train_denoiser(&mut m, &imgs, &frozen, TrainMode::Lowpass { depth: 0 }).unwrap();
        assert_eq!(ck.meta.loss_history.len(), 3);
        assert_eq!(m.running_stats(), &stats[..]);
        assert_ne!(m.params(), &weights[..]);
    }
}
