use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::network::{Network, Variant};
use crate::selector::{GateNoise, ModulationInput};
use crate::sensing::{generate_phi, sample, BlockLayout, MeasurementMatrix, Measurements, BLOCK_SIZE};

use super::config::TrainConfig;
use super::data::BlockSampler;
use super::loss::{loss_select, LossReport};
use super::optim::Adam;

/// Independent random streams, all derived from the root seed.
const STREAM_WEIGHTS: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_MU: u64 = 2;
const STREAM_GUMBEL: u64 = 3;
const STREAM_NOISE: u64 = 4;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Which loop is running; decides block size, sampling layout and noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Non-overlapping 33×33 blocks.
    Main,
    /// Large blocks sampled with an overlapping unfold and folded at
    /// initialisation.
    Deblock,
    /// Main-phase blocks with Gaussian noise added to the measurements.
    Noise,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub l_rec: f64,
    pub l_select: f64,
    pub mean_n_am_g: f64,
    pub mean_n_am_p: f64,
    /// Batches per multiplier, keyed by its decimal form.
    pub mu_histogram: BTreeMap<String, usize>,
}

/// Owns the parameters, the optimiser state and the random streams of one
/// training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub network: Network,
    pub phi: MeasurementMatrix,
    pub phase: Phase,
    optimizer: Adam,
    grad: Network,
    mu_rng: ChaCha8Rng,
    gumbel_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    epoch: usize,
    last_traces: (f64, f64),
}

impl Trainer {
    /// Fresh network with fan-in initialisation and `ρ = 1`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::new(config.network_config(), &mut stream(config.seed, STREAM_WEIGHTS))?;
        let phi = generate_phi(config.ratio, BLOCK_SIZE * BLOCK_SIZE, config.seed)?;
        Ok(Self::assemble(config, network, phi, Phase::Main))
    }

    /// Continues from a checkpoint. The model shape and operator come from
    /// the checkpoint; the schedule and optimiser settings from `config`.
    pub fn resume(checkpoint: Checkpoint, mut config: TrainConfig, phase: Phase) -> Result<Self> {
        let meta = &checkpoint.meta;
        config.stages = meta.stages;
        config.channels = meta.channels;
        config.variant = meta.variant;
        config.tau = meta.tau;
        config.ratio = meta.ratio;
        if meta.variant == Variant::DpcDun && meta.mu_set.len() != meta.encoding_len {
            return Err(Error::State("checkpoint μ set does not match its encoding".into()));
        }
        config.mu_set = meta.mu_set.clone();
        config.validate()?;
        let phi = meta.phi()?;
        Ok(Self::assemble(config, checkpoint.network, phi, phase))
    }

    fn assemble(config: TrainConfig, network: Network, phi: MeasurementMatrix, phase: Phase) -> Self {
        let seed = config.seed;
        let lr = config.learning_rate;
        let betas = config.optimizer_decay_rates;
        Trainer {
            grad: network.zeros_like(),
            optimizer: Adam::new(lr, betas),
            mu_rng: stream(seed, STREAM_MU),
            gumbel_rng: stream(seed, STREAM_GUMBEL),
            noise_rng: stream(seed, STREAM_NOISE),
            epoch: 0,
            last_traces: (0.0, 0.0),
            config,
            network,
            phi,
            phase,
        }
    }

    /// Block edge length used by the current phase.
    pub fn block_size(&self) -> usize {
        match self.phase {
            Phase::Deblock => self.config.block_finetune,
            Phase::Main | Phase::Noise => self.config.block_main,
        }
    }

    /// Data stream matching the current phase, seeded from the root seed.
    pub fn sampler(&self, images: Vec<Array2<f64>>) -> Result<BlockSampler> {
        let seed = stream(self.config.seed, STREAM_DATA).gen();
        BlockSampler::from_images(images, self.block_size(), self.config.augment, seed)
    }

    fn layout(&self, h: usize, w: usize) -> Result<BlockLayout> {
        match self.phase {
            Phase::Deblock => BlockLayout::new(h, w, BLOCK_SIZE, self.config.deblock_stride),
            Phase::Main | Phase::Noise => BlockLayout::tiled(h, w, BLOCK_SIZE),
        }
    }

    fn modulation(&self, mu: f64) -> Result<ModulationInput> {
        match self.network.config.variant {
            Variant::DpcDun => ModulationInput::preset_in(mu, &self.config.mu_set),
            Variant::DpDun => Ok(ModulationInput::zeros(0)),
        }
    }

    fn draw_mu(&mut self) -> f64 {
        match self.config.fixed_mu {
            Some(mu) => mu,
            None => *self.config.mu_set.choose(&mut self.mu_rng).expect("non-empty μ set"),
        }
    }

    fn measure(&mut self, block: &Array2<f64>) -> Result<Measurements> {
        let (h, w) = block.dim();
        let layout = self.layout(h, w)?;
        let mut meas = sample(block.view(), &self.phi, &layout)?;
        if self.phase == Phase::Noise {
            let (lo, hi) = self.config.noise_sigma_range;
            let sigma = if hi > lo { self.noise_rng.gen_range(lo..=hi) } else { lo } / 255.0;
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("finite σ");
                meas.per_block
                    .mapv_inplace(|v| v + normal.sample(&mut self.noise_rng));
            }
        }
        Ok(meas)
    }

    /// One optimiser step on `batch` with a single μ drawn for the batch.
    pub fn train_step(&mut self, batch: &[Array2<f64>]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let mu = self.draw_mu();
        self.step_with_mu(batch, mu)
    }

    /// One optimiser step with an explicit multiplier.
    pub fn step_with_mu(&mut self, batch: &[Array2<f64>], mu: f64) -> Result<LossReport> {
        let modulation = self.modulation(mu)?;
        let batch_len = batch.len() as f64;
        let stages = self.network.config.stages;
        self.grad.fill(0.0);
        let (mut l_rec, mut l_select) = (0.0, 0.0);
        let (mut n_g, mut n_p) = (0.0, 0.0);
        for truth in batch {
            let meas = self.measure(truth)?;
            let noise = GateNoise::sample(stages, &mut self.gumbel_rng);
            let tape = self.network.forward_train(&meas, &self.phi, &modulation, &noise, false)?;
            let recon = tape.reconstruction();
            let scale = 1.0 / (truth.len() as f64 * batch_len);
            let diff = &recon - truth;
            l_rec += diff.mapv(f64::abs).sum() * scale;
            let d_output = diff.mapv(|d| if d == 0.0 { 0.0 } else { d.signum() * scale });
            l_select += loss_select(&tape.trace) / batch_len;
            n_g += tape.trace.n_am_g as f64 / batch_len;
            n_p += tape.trace.n_am_p as f64 / batch_len;
            let d_exec = mu / (stages as f64 * batch_len);
            self.network.backward(
                &tape,
                &meas,
                &self.phi,
                &modulation,
                &d_output,
                d_exec,
                &mut self.grad,
            )?;
        }
        let report = LossReport::new(l_rec, l_select, mu);
        if !report.total.is_finite() {
            return Err(Error::Numeric {
                stage: stages,
                message: format!("non-finite loss (l_rec {l_rec}, l_select {l_select})"),
            });
        }
        let grads = self.grad.flatten();
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            let mut name = String::new();
            let mut offset = 0;
            self.grad.visit("", &mut |n, _, v| {
                if name.is_empty() && pos < offset + v.len() {
                    name = n.to_string();
                }
                offset += v.len();
            });
            return Err(Error::Numeric {
                stage: stages,
                message: format!("non-finite gradient in {name}"),
            });
        }
        let mut params = self.network.flatten();
        self.optimizer.step(&mut params, &grads);
        self.network.load_flat(&params);
        self.last_traces = (n_g, n_p);
        Ok(report)
    }

    /// Batches per epoch: the configured count, or one pass over the images.
    pub fn steps_per_epoch(&self, sampler: &BlockSampler) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| sampler.len().div_ceil(self.config.batch_size))
            .max(1)
    }

    /// Runs one epoch and returns its log line.
    pub fn run_epoch(&mut self, sampler: &mut BlockSampler) -> Result<EpochLog> {
        let steps = self.steps_per_epoch(sampler);
        let mut log = EpochLog {
            epoch: self.epoch,
            phase: self.phase,
            l_rec: 0.0,
            l_select: 0.0,
            mean_n_am_g: 0.0,
            mean_n_am_p: 0.0,
            mu_histogram: BTreeMap::new(),
        };
        for _ in 0..steps {
            let batch = sampler.next_batch(self.config.batch_size);
            let report = self.train_step(&batch)?;
            log.l_rec += report.l_rec / steps as f64;
            log.l_select += report.l_select / steps as f64;
            log.mean_n_am_g += self.last_traces.0 / steps as f64;
            log.mean_n_am_p += self.last_traces.1 / steps as f64;
            *log.mu_histogram.entry(report.mu_used.to_string()).or_default() += 1;
        }
        self.epoch += 1;
        Ok(log)
    }

    /// Runs `epochs` epochs, handing every log line to `on_epoch`.
    pub fn run(
        &mut self,
        sampler: &mut BlockSampler,
        epochs: usize,
        on_epoch: &mut dyn FnMut(&EpochLog),
    ) -> Result<()> {
        for _ in 0..epochs {
            let log = self.run_epoch(sampler)?;
            log::info!(
                "epoch {} ({:?}): l_rec {:.6} l_select {:.4} n_am ({:.2}, {:.2})",
                log.epoch,
                log.phase,
                log.l_rec,
                log.l_select,
                log.mean_n_am_g,
                log.mean_n_am_p
            );
            on_epoch(&log);
        }
        Ok(())
    }

    /// Packages the current parameters with their metadata.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta =
            CheckpointMeta::for_network(&self.network, self.config.ratio, &self.config.mu_set, self.phi.seed());
        meta.training_config_hash = self.config.hash();
        meta.eval_stride = self.config.deblock_stride;
        meta.train_config = serde_json::to_value(&self.config).ok();
        Checkpoint {
            meta,
            network: self.network.clone(),
        }
    }
}

fn run_phase(
    mut trainer: Trainer,
    images: Vec<Array2<f64>>,
    epochs: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let mut sampler = trainer.sampler(images)?;
    trainer.run(&mut sampler, epochs, on_epoch)?;
    Ok(trainer.checkpoint())
}

/// Main training phase from scratch.
pub fn train(
    config: &TrainConfig,
    images: Vec<Array2<f64>>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let trainer = Trainer::new(config.clone())?;
    let epochs = config.epochs_main;
    run_phase(trainer, images, epochs, on_epoch)
}

/// Continues a main-phase model on large blocks sampled with overlap.
pub fn finetune_deblock(
    checkpoint: Checkpoint,
    config: &TrainConfig,
    images: Vec<Array2<f64>>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let trainer = Trainer::resume(checkpoint, config.clone(), Phase::Deblock)?;
    run_phase(trainer, images, config.epochs_finetune, on_epoch)
}

/// Continues a model with Gaussian noise on the measurements.
pub fn finetune_noise(
    checkpoint: Checkpoint,
    config: &TrainConfig,
    images: Vec<Array2<f64>>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let trainer = Trainer::resume(checkpoint, config.clone(), Phase::Noise)?;
    run_phase(trainer, images, config.epochs_finetune, on_epoch)
}
