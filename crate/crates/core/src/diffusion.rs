//! Noise schedule, forward corruption, the training loop and the
//! classifier-free-guided ancestral sampler.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::daydream::DaydreamRecord;
use crate::domain::{Bounds, CapacityClass, Codec, Configuration};
use crate::error::{Error, Result};
use crate::nn::checkpoint::CheckpointMeta;
use crate::nn::optim::{apply_update, Adam};
use crate::nn::unet::mse_loss;
use crate::nn::{DenoiserModel, Mode, Tensor};

pub const DEFAULT_BETA0: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 0.02;
/// Desk-scale step count; the published setting is 400.
pub const DEFAULT_STEPS: usize = 100;

/// Linear variance schedule with its cumulative signal and noise scales.
/// Step indices are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(beta0: f64, beta_t: f64, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta0 > 0.0 && beta0 <= beta_t && beta_t < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta0 <= betaT < 1, got beta0={beta0}, betaT={beta_t}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    beta0
                } else {
                    beta0 + (beta_t - beta0) * k as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut keep = 1.0;
        let mut alpha = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        for &b in &beta {
            keep *= 1.0 - b;
            alpha.push(keep.sqrt());
            sigma.push((1.0 - keep).sqrt());
        }
        Ok(NoiseSchedule { beta, alpha, sigma })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

pub fn make_schedule(beta0: f64, beta_t: f64, steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(beta0, beta_t, steps)
}

/// `z_t = alpha_t x0 + sigma_t eps`, elementwise.
pub fn forward_diffuse(x0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Vec<f32> {
    assert_eq!(x0.len(), eps.len(), "data and noise differ in size");
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    x0.iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + s * e as f64) as f32)
        .collect()
}

/// One ancestral step:
/// `x_{t-1} = (x_t - (beta_t / sigma_t) eps) / sqrt(1 - beta_t) + sqrt(beta_t) xi`,
/// with no noise on the final step (`t == 1`).
pub fn reverse_step<R: Rng + ?Sized>(
    x_t: &[f32],
    t: usize,
    eps_tilde: &[f32],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Vec<f32> {
    assert_eq!(x_t.len(), eps_tilde.len(), "latent and noise estimate differ in size");
    let beta = schedule.beta(t);
    let coef = beta / schedule.sigma(t);
    let scale = 1.0 / (1.0 - beta).sqrt();
    let std = beta.sqrt();
    x_t.iter()
        .zip(eps_tilde)
        .map(|(&x, &e)| {
            let mean = scale * (x as f64 - coef * e as f64);
            let noise = if t > 1 {
                let xi: f64 = StandardNormal.sample(rng);
                std * xi
            } else {
                0.0
            };
            (mean + noise) as f32
        })
        .collect()
}

/// Anything that predicts the noise in a batch of latents.
pub trait NoiseEstimator: Sync {
    fn grid_size(&self) -> usize;

    /// Step count the estimator was trained for, when known.
    fn trained_steps(&self) -> Option<usize> {
        None
    }

    /// `z` is `[batch, g, g]`; returns an estimate of the same shape.
    fn estimate(&self, z: &Tensor<f32>, steps: &[usize], classes: &[Option<CapacityClass>]) -> Result<Tensor<f32>>;
}

impl NoiseEstimator for DenoiserModel<f32> {
    fn grid_size(&self) -> usize {
        self.architecture().grid_size
    }

    fn estimate(&self, z: &Tensor<f32>, steps: &[usize], classes: &[Option<CapacityClass>]) -> Result<Tensor<f32>> {
        DenoiserModel::estimate(self, z, steps, classes)
    }
}

/// A trained denoiser with the settings it was trained under.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub denoiser: DenoiserModel<f32>,
    pub meta: CheckpointMeta,
}

impl TrainedModel {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.meta.beta0, self.meta.beta_t, self.meta.steps)
    }
}

impl NoiseEstimator for TrainedModel {
    fn grid_size(&self) -> usize {
        self.denoiser.architecture().grid_size
    }

    fn trained_steps(&self) -> Option<usize> {
        Some(self.meta.steps)
    }

    fn estimate(&self, z: &Tensor<f32>, steps: &[usize], classes: &[Option<CapacityClass>]) -> Result<Tensor<f32>> {
        self.denoiser.estimate(z, steps, classes)
    }
}

/// `(1 + w) eps_c - w eps_null` for a batch sharing one class. With `w == 0`
/// the unconditional branch is skipped and the conditional estimate is
/// returned unchanged.
pub fn guided_noise<E: NoiseEstimator + ?Sized>(
    model: &E,
    z_t: &Tensor<f32>,
    t: usize,
    class: CapacityClass,
    w: f64,
) -> Result<Tensor<f32>> {
    if !(w >= 0.0) {
        return Err(Error::invalid(format!(
            "guidance strength must be non-negative, got {w}"
        )));
    }
    let b = z_t.shape()[0];
    if w == 0.0 {
        return model.estimate(z_t, &vec![t; b], &vec![Some(class); b]);
    }
    // one pass over the stacked batch: conditional rows first, then null rows
    let mut stacked = Vec::with_capacity(2 * z_t.len());
    stacked.extend_from_slice(z_t.data());
    stacked.extend_from_slice(z_t.data());
    let mut shape = z_t.shape().to_vec();
    shape[0] = 2 * b;
    let mut classes = vec![Some(class); b];
    classes.resize(2 * b, None);
    let both = model.estimate(&Tensor::from_vec(&shape, stacked), &vec![t; 2 * b], &classes)?;
    let (cond, uncond) = both.data().split_at(z_t.len());
    let (wc, wu) = ((1.0 + w) as f32, w as f32);
    let data = cond.iter().zip(uncond).map(|(&c, &u)| wc * c - wu * u).collect();
    Ok(Tensor::from_vec(z_t.shape(), data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Probability of replacing a record's class with the null class.
    pub p_uncond: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p_uncond: 0.1,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::invalid(format!("p_u = {} outside [0, 1]", self.p_uncond)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean per-entry loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    /// Records whose class was replaced by the null class.
    pub nulled: usize,
    pub seen: usize,
}

/// One training batch: noised latents, their steps, class rows and target noise.
struct Batch {
    z: Tensor<f32>,
    steps: Vec<usize>,
    class_rows: Vec<usize>,
    eps: Tensor<f32>,
}

fn make_batch(
    records: &[&DaydreamRecord],
    encoded: &[Vec<f32>],
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    codec: &Codec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    nulled: &mut usize,
) -> Batch {
    let g = codec.grid_size;
    let n = g * g;
    let b = records.len();
    let mut z = Vec::with_capacity(b * n);
    let mut eps = Vec::with_capacity(b * n);
    let mut steps = Vec::with_capacity(b);
    let mut class_rows = Vec::with_capacity(b);
    for (rec, x0) in records.iter().zip(encoded) {
        let t = rng.gen_range(1..=schedule.steps());
        let row = if rng.gen_bool(cfg.p_uncond) {
            *nulled += 1;
            model.null_index()
        } else {
            rec.capacity_class.index()
        };
        let (i, j) = (rec.config.asset_types(), rec.config.stations());
        let mut e: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        // padding stays at its clean value and carries no noise
        for r in 0..g {
            for c in 0..g {
                if r >= i || c >= j {
                    e[r * g + c] = 0.0;
                }
            }
        }
        let mut zt = forward_diffuse(x0, t, &e, schedule);
        codec.clamp_padding(&mut zt, i, j);
        z.extend(zt);
        eps.extend(e);
        steps.push(t);
        class_rows.push(row);
    }
    Batch {
        z: Tensor::from_vec(&[b, g, g], z),
        steps,
        class_rows,
        eps: Tensor::from_vec(&[b, g, g], eps),
    }
}

/// Squared error over the configuration block only, and its gradient.
fn masked_loss(estimate: &Tensor<f32>, target: &Tensor<f32>, g: usize, rows: usize, cols: usize) -> (f64, Tensor<f32>) {
    let b = estimate.shape()[0];
    let mask = |k: usize| {
        let cell = k % (g * g);
        cell / g < rows && cell % g < cols
    };
    let masked_est: Vec<f32> = estimate
        .data()
        .iter()
        .enumerate()
        .filter(|(k, _)| mask(*k))
        .map(|(_, &v)| v)
        .collect();
    let masked_tgt: Vec<f32> = target
        .data()
        .iter()
        .enumerate()
        .filter(|(k, _)| mask(*k))
        .map(|(_, &v)| v)
        .collect();
    let m = masked_est.len();
    let (loss, grad) = mse_loss(&Tensor::from_vec(&[m], masked_est), &Tensor::from_vec(&[m], masked_tgt));
    let mut full = vec![0.0f32; b * g * g];
    let mut it = grad.data().iter();
    for (k, slot) in full.iter_mut().enumerate() {
        if mask(k) {
            *slot = *it.next().expect("mask counts agree");
        }
    }
    (loss, Tensor::from_vec(estimate.shape(), full))
}

/// Train for a fixed number of epochs. Each record draws a step uniformly
/// from `1..=T`, loses its class with probability `p_u`, is noised with
/// fresh Gaussian noise and contributes to the squared error between the
/// estimate and that noise. `on_epoch` sees each epoch's mean loss.
pub fn train(
    model: &mut DenoiserModel<f32>,
    records: &[DaydreamRecord],
    schedule: &NoiseSchedule,
    codec: &Codec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("training needs at least one record"));
    }
    if model.architecture().grid_size != codec.grid_size {
        return Err(Error::invalid(format!(
            "model grid {} differs from codec grid {}",
            model.architecture().grid_size,
            codec.grid_size
        )));
    }
    let encoded: Vec<Vec<f32>> = records
        .iter()
        .map(|r| codec.encode(&r.config).map(|g| g.values))
        .collect::<Result<_>>()?;
    let (rows, cols) = (records[0].config.asset_types(), records[0].config.stations());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::default();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut last_finite = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let recs: Vec<&DaydreamRecord> = chunk.iter().map(|&k| &records[k]).collect();
            let enc: Vec<Vec<f32>> = chunk.iter().map(|&k| encoded[k].clone()).collect();
            let batch = make_batch(&recs, &enc, model, schedule, codec, cfg, &mut rng, &mut report.nulled);
            report.seen += recs.len();
            let out = model.forward(&batch.z, &batch.steps, &batch.class_rows, Mode::Train)?;
            let (loss, seed) = masked_loss(&out, &batch.eps, codec.grid_size, rows, cols);
            if !loss.is_finite() {
                model.clear_context();
                return Err(Error::Divergence(format!(
                    "non-finite loss in epoch {epoch}; last finite loss {last_finite}"
                )));
            }
            last_finite = loss;
            let tape = model.backward(&seed)?;
            apply_update(model, &tape, &mut opt, cfg.lr)?;
            report.steps += 1;
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(report)
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (k, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", k + 1, l));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io("write", path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub class: CapacityClass,
    /// Guidance strength.
    pub w: f64,
    pub count: usize,
    pub seed: u64,
    /// Steps at which to record intermediate grids; 0 records the final
    /// decoded configuration's encoding and `T` the initial noise.
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
}

/// Intermediate grid of one sample at step `t`, rows of the padded grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: usize,
    pub grid: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleOutput {
    pub configs: Vec<Configuration>,
    /// Per sample, snapshots in descending `t`.
    pub snapshots: Vec<Vec<Snapshot>>,
}

/// Largest number of latents pushed through the model at once.
const SAMPLE_CHUNK: usize = 64;

fn grid_rows(values: &[f32], g: usize) -> Vec<Vec<f32>> {
    values.chunks(g).map(<[f32]>::to_vec).collect()
}

/// Draw `count` configurations for one class: start from Gaussian noise,
/// iterate the guided estimate and the ancestral step from `T` to 1, keep the
/// padding clamped to the empty-cell encoding, decode.
pub fn sample<E: NoiseEstimator + ?Sized>(
    model: &E,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
    codec: &Codec,
    bounds: &Bounds,
) -> Result<SampleOutput> {
    if req.count < 1 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if let Some(trained) = model.trained_steps() {
        if trained != schedule.steps() {
            return Err(Error::invalid(format!(
                "model was trained with T = {trained}, schedule has T = {}",
                schedule.steps()
            )));
        }
    }
    if model.grid_size() != codec.grid_size {
        return Err(Error::invalid("model and codec grid sizes differ"));
    }
    if let Some(&bad) = req.snapshot_steps.iter().find(|&&t| t > schedule.steps()) {
        return Err(Error::invalid(format!(
            "snapshot step {bad} beyond T = {}",
            schedule.steps()
        )));
    }
    let g = codec.grid_size;
    let n = g * g;
    let (rows, cols) = (bounds.asset_types, bounds.stations);
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut out = SampleOutput::default();
    let mut remaining = req.count;
    while remaining > 0 {
        let b = remaining.min(SAMPLE_CHUNK);
        remaining -= b;
        let mut x: Vec<f32> = (0..b * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for grid in x.chunks_mut(n) {
            codec.clamp_padding(grid, rows, cols);
        }
        let mut snaps: Vec<Vec<Snapshot>> = vec![Vec::new(); b];
        let record = |x: &[f32], t: usize, snaps: &mut Vec<Vec<Snapshot>>| {
            if req.snapshot_steps.contains(&t) {
                for (s, grid) in snaps.iter_mut().zip(x.chunks(n)) {
                    s.push(Snapshot {
                        t,
                        grid: grid_rows(grid, g),
                    });
                }
            }
        };
        record(&x, schedule.steps(), &mut snaps);
        for t in (1..=schedule.steps()).rev() {
            let z = Tensor::from_vec(&[b, g, g], x);
            let eps = guided_noise(model, &z, t, req.class, req.w)?;
            x = reverse_step(z.data(), t, eps.data(), schedule, &mut rng);
            for grid in x.chunks_mut(n) {
                codec.clamp_padding(grid, rows, cols);
            }
            if t > 1 {
                record(&x, t - 1, &mut snaps);
            }
        }
        for (k, grid) in x.chunks(n).enumerate() {
            let padded = crate::domain::PaddedGrid {
                size: g,
                asset_types: rows,
                stations: cols,
                values: grid.to_vec(),
            };
            let config = codec.decode(&padded);
            if req.snapshot_steps.contains(&0) {
                let enc = codec.encode(&config)?;
                snaps[k].push(Snapshot {
                    t: 0,
                    grid: grid_rows(&enc.values, g),
                });
            }
            out.configs.push(config);
        }
        out.snapshots.extend(snaps);
    }
    if req.snapshot_steps.is_empty() {
        out.snapshots.clear();
    }
    Ok(out)
}
