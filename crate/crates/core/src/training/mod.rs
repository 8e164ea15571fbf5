//! Training loops for the variational energy/generator game, its
//! transition-operator variant, and the classic GAN baseline.

mod log;
pub mod steps;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch;
use crate::config::{Config, LoopKind};
use crate::data::{epoch_order, Dataset};
use crate::energy::{Critic, EnergyModel, GanEnergyHead};
use crate::error::{Error, Result};
use crate::generator::{DirectGenerator, TransitionGenerator, VcdTerms};
use crate::ndiff::{checkpoint, Adadelta, Tensor};

pub use log::{IterRecord, TrainLog};
pub use steps::*;

/// Independent random streams of one run, all derived from `train.seed`.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// The models a training run produces.
#[derive(Clone, Debug)]
pub enum Trained {
    Vgan { energy: EnergyModel, gen: DirectGenerator },
    Vcd { energy: EnergyModel, gen: TransitionGenerator },
    Gan { disc: GanEnergyHead, gen: DirectGenerator },
}

impl Trained {
    /// Freshly initialized models for `cfg.train.kind`.
    pub fn init(cfg: &Config, sample_shape: &[usize]) -> Result<Self> {
        let rng = &mut stream(cfg.train.seed, INIT_STREAM);
        Ok(match cfg.train.kind {
            LoopKind::Vgan => Trained::Vgan {
                energy: arch::build_energy(cfg, sample_shape, rng)?,
                gen: arch::build_generator(cfg, sample_shape, rng)?,
            },
            LoopKind::Vcd => Trained::Vcd {
                energy: arch::build_energy(cfg, sample_shape, rng)?,
                gen: arch::build_transition(cfg, sample_shape, rng)?,
            },
            LoopKind::Gan => Trained::Gan {
                disc: arch::build_discriminator(cfg, sample_shape, rng)?,
                gen: arch::build_generator(cfg, sample_shape, rng)?,
            },
        })
    }

    /// Models described by `cfg` with parameters read from a checkpoint.
    /// The loop kind is taken from the checkpoint, not from `train.loop`.
    pub fn load(cfg: &Config, sample_shape: &[usize], path: &Path) -> Result<Self> {
        let tensors = checkpoint::load(path)?;
        let mut cfg = cfg.clone();
        cfg.train.kind = Self::kind_of(&tensors);
        let mut models = Self::init(&cfg, sample_shape)?;
        models.load_state(&tensors)?;
        Ok(models)
    }

    /// Which loop produced a set of checkpoint tensors, by graph names.
    pub fn kind_of(tensors: &BTreeMap<String, Tensor>) -> LoopKind {
        let has = |prefix: &str| tensors.keys().any(|k| k.starts_with(prefix));
        if has("enc.") {
            LoopKind::Vcd
        } else if has("disc.") {
            LoopKind::Gan
        } else {
            LoopKind::Vgan
        }
    }

    pub fn kind(&self) -> LoopKind {
        match self {
            Trained::Vgan { .. } => LoopKind::Vgan,
            Trained::Vcd { .. } => LoopKind::Vcd,
            Trained::Gan { .. } => LoopKind::Gan,
        }
    }

    /// Every parameter and running statistic, by qualified name.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let owned = |v: Vec<(String, &Tensor)>| v.into_iter().map(|(n, t)| (n, t.clone())).collect::<Vec<_>>();
        match self {
            Trained::Vgan { energy, gen } => [owned(energy.state()), gen.state()].concat(),
            Trained::Vcd { energy, gen } => [owned(energy.state()), gen.state()].concat(),
            Trained::Gan { disc, gen } => [owned(disc.state()), gen.state()].concat(),
        }
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        match self {
            Trained::Vgan { energy, gen } => {
                energy.load_state(tensors)?;
                gen.load_state(tensors)
            }
            Trained::Vcd { energy, gen } => {
                energy.load_state(tensors)?;
                gen.load_state(tensors)
            }
            Trained::Gan { disc, gen } => {
                disc.load_state(tensors)?;
                gen.load_state(tensors)
            }
        }
    }

    /// Writes all state; the file is replaced atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let state = self.state();
        let tmp = path.with_extension("vgf.tmp");
        checkpoint::save(&tmp, state.iter().map(|(n, t)| (n.as_str(), t)))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        match self {
            Trained::Vgan { energy, gen } => energy.checksum() ^ gen.checksum().rotate_left(7),
            Trained::Vcd { energy, gen } => energy.checksum() ^ gen.checksum().rotate_left(7),
            Trained::Gan { disc, gen } => disc.checksum() ^ gen.checksum().rotate_left(7),
        }
    }
}

/// Runs the loop named by `cfg.train.kind` from a fresh initialization.
///
/// With `checkpoint` set, the models are written there after every epoch;
/// on divergence the file still holds the last completed epoch.
pub fn train(cfg: &Config, data: &Dataset, checkpoint: Option<&Path>) -> Result<(Trained, TrainLog)> {
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let mut models = Trained::init(cfg, data.sample_shape())?;
    let log = run(cfg, data, &mut models, checkpoint)?;
    Ok((models, log))
}

fn with_kind(cfg: &Config, kind: LoopKind) -> Config {
    let mut c = cfg.clone();
    c.train.kind = kind;
    c
}

pub fn train_vgan(cfg: &Config, data: &Dataset, checkpoint: Option<&Path>) -> Result<(EnergyModel, DirectGenerator, TrainLog)> {
    match train(&with_kind(cfg, LoopKind::Vgan), data, checkpoint)? {
        (Trained::Vgan { energy, gen }, log) => Ok((energy, gen, log)),
        _ => unreachable!("loop kind was fixed"),
    }
}

pub fn train_vcd(
    cfg: &Config,
    data: &Dataset,
    checkpoint: Option<&Path>,
) -> Result<(EnergyModel, TransitionGenerator, TrainLog)> {
    match train(&with_kind(cfg, LoopKind::Vcd), data, checkpoint)? {
        (Trained::Vcd { energy, gen }, log) => Ok((energy, gen, log)),
        _ => unreachable!("loop kind was fixed"),
    }
}

pub fn train_gan_baseline(
    cfg: &Config,
    data: &Dataset,
    checkpoint: Option<&Path>,
) -> Result<(GanEnergyHead, DirectGenerator, TrainLog)> {
    match train(&with_kind(cfg, LoopKind::Gan), data, checkpoint)? {
        (Trained::Gan { disc, gen }, log) => Ok((disc, gen, log)),
        _ => unreachable!("loop kind was fixed"),
    }
}

fn optimizer(cfg: &Config) -> Adadelta {
    Adadelta::new(cfg.train.lr, cfg.train.decay, cfg.train.eps)
}

/// One outer iteration: `k` generator updates, then one energy update.
fn iterate(
    cfg: &Config,
    data: &Dataset,
    models: &mut Trained,
    opts: &mut (Adadelta, Adadelta),
    batch: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<IterRecord> {
    let (k, n) = (cfg.train.k, batch.batch());
    let (opt_e, opt_g) = opts;
    let mut rec = IterRecord {
        gen_steps: k,
        ..Default::default()
    };
    match models {
        Trained::Vgan { energy, gen } => {
            for _ in 0..k {
                rec.gen_loss += vgan_generator_step(energy, gen, opt_g, n, rng)?.loss / k as f64;
            }
            let s = vgan_energy_step(energy, gen, opt_e, batch, rng)?;
            fill(&mut rec, &s);
        }
        Trained::Vcd { energy, gen } => {
            let rho = cfg.vcd.rho;
            for _ in 0..k {
                let x = data.random_batch(n, rng)?.x;
                let obj = vcd_generator_step(energy, gen, opt_g, &x, VcdTerms::from_config(cfg), rng)?;
                rec.gen_loss += obj.loss / k as f64;
                rec.recon_mse += obj.recon_mse / k as f64;
                rec.masks += if rho == 0.0 { 0 } else { n };
            }
            let (s, masks) = vcd_energy_step(energy, gen, opt_e, batch, rho, rng)?;
            rec.masks += masks;
            fill(&mut rec, &s);
        }
        Trained::Gan { disc, gen } => {
            for _ in 0..k {
                rec.gen_loss += gan_generator_step(disc, gen, opt_g, n, rng)? / k as f64;
            }
            let s = gan_discriminator_step(disc, gen, opt_e, batch, rng)?;
            fill(&mut rec, &s);
        }
    }
    Ok(rec)
}

fn fill(rec: &mut IterRecord, s: &EnergyStepStats) {
    rec.data_energy = s.data_energy;
    rec.gen_energy = s.gen_energy;
    rec.entropy_data = s.entropy_data;
    rec.entropy_gen = s.entropy_gen;
    rec.energy_loss = s.loss;
}

/// Continues training `models` in place for the configured budget.
pub fn run(cfg: &Config, data: &Dataset, models: &mut Trained, checkpoint: Option<&Path>) -> Result<TrainLog> {
    cfg.validate()?;
    if models.kind() != cfg.train.kind {
        return Err(Error::Config("models do not match train.loop".into()));
    }
    let mut batch_rng = stream(cfg.train.seed, BATCH_STREAM);
    let mut noise_rng = stream(cfg.train.seed, NOISE_STREAM);
    let mut opts = (optimizer(cfg), optimizer(cfg));
    let mut log = TrainLog::default();
    let cap = match cfg.train.max_iterations {
        0 => usize::MAX,
        m => m,
    };
    'epochs: for epoch in 0..cfg.train.epochs {
        for idx in epoch_order(data.len(), cfg.train.batch, &mut batch_rng)? {
            if log.len() >= cap {
                break 'epochs;
            }
            let start = Instant::now();
            let batch = data.batch(&idx)?.x;
            let iteration = log.len();
            let mut rec = iterate(cfg, data, models, &mut opts, &batch, &mut noise_rng).map_err(|e| match e {
                Error::NonFinite(reason) => Error::Divergence { iteration, reason },
                other => other,
            })?;
            rec.iteration = iteration;
            rec.epoch = epoch;
            log.push(rec, start.elapsed().as_secs_f64() * 1e3);
        }
        if let Some(path) = checkpoint {
            models.save(path)?;
        }
    }
    Ok(log)
}

/// Draws `n` samples from a trained generator: noise for direct generators,
/// one transition of random data points for transition generators.
pub fn draw_samples(models: &Trained, data: &Dataset, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    match models {
        Trained::Vgan { gen, .. } | Trained::Gan { gen, .. } => gen.sample(n, rng),
        Trained::Vcd { gen, .. } => {
            let x = data.random_batch(n.min(data.len()), rng)?.x;
            Ok(gen.transition_sample(&x, rng)?.x_tilde)
        }
    }
}
