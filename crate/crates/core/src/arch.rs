//! Network builders for every model a config can describe.

use rand::Rng;

use crate::config::{Config, DataSource, NetArch, OutputAct};
use crate::energy::{EnergyModel, GanEnergyHead};
use crate::error::{Error, Result};
use crate::generator::{DirectGenerator, TransitionGenerator};
use crate::ndiff::{Graph, GraphBuilder};

fn pixels(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `[C, H, W]` with `H` and `W` divisible by 4, as two 2x poolings need.
fn conv_geometry(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] if h % 4 == 0 && w % 4 == 0 && h >= 4 && w >= 4 => Ok((c, h, w)),
        _ => Err(Error::Config(format!(
            "convolutional networks need C x H x W samples with H, W divisible by 4, got {shape:?}"
        ))),
    }
}

fn two(v: &[usize], key: &str) -> Result<(usize, usize)> {
    match *v {
        [a, b] if a > 0 && b > 0 => Ok((a, b)),
        _ => Err(Error::Config(format!("{key} takes two positive channel counts, got {v:?}"))),
    }
}

fn output_sigmoid(cfg: &Config, act: OutputAct) -> bool {
    match act {
        OutputAct::Sigmoid => true,
        OutputAct::Linear => false,
        OutputAct::Auto => cfg.data.source == DataSource::Idx,
    }
}

/// `conv5 → relu → pool → conv5 → relu → pool → flatten`.
fn conv_stack(b: GraphBuilder, channels: (usize, usize), rng: &mut impl Rng) -> GraphBuilder {
    b.conv(channels.0, 5, 1, 2, rng)
        .relu()
        .max_pool()
        .conv(channels.1, 5, 1, 2, rng)
        .relu()
        .max_pool()
        .flatten()
}

/// Feature network `φ` (no batch norm, deterministic).
pub fn build_phi(cfg: &Config, sample_shape: &[usize], rng: &mut impl Rng) -> Result<Graph> {
    let e = &cfg.energy;
    let mut b = Graph::builder("phi", sample_shape);
    match e.arch {
        NetArch::Mlp => {
            if e.hidden.is_empty() {
                return Err(Error::Config("energy.hidden needs at least one width".into()));
            }
            b = b.flatten();
            for &h in &e.hidden {
                b = b.dense(h, rng).relu();
            }
        }
        NetArch::Conv => {
            conv_geometry(sample_shape)?;
            b = conv_stack(b, two(&e.channels, "energy.channels")?, rng).dense(e.features, rng).relu();
        }
    }
    b.build(rng)
}

pub fn build_energy(cfg: &Config, sample_shape: &[usize], rng: &mut impl Rng) -> Result<EnergyModel> {
    let phi = build_phi(cfg, sample_shape, rng)?;
    let experts = Graph::builder("experts", phi.output_shape())
        .dense(cfg.model.experts, rng)
        .build(rng)?;
    EnergyModel::new(phi, experts)
}

/// Same `φ` topology with a single logistic unit.
pub fn build_discriminator(cfg: &Config, sample_shape: &[usize], rng: &mut impl Rng) -> Result<GanEnergyHead> {
    let phi = build_phi(cfg, sample_shape, rng)?;
    let unit = Graph::builder("disc", phi.output_shape()).dense(1, rng).build(rng)?;
    GanEnergyHead::new(phi, unit)
}

fn maybe_bn(b: GraphBuilder, on: bool) -> GraphBuilder {
    if on {
        b.batch_norm()
    } else {
        b
    }
}

pub fn build_generator(cfg: &Config, sample_shape: &[usize], rng: &mut impl Rng) -> Result<DirectGenerator> {
    let g = &cfg.gen;
    let mut b = Graph::builder("gen", &[g.dz]);
    match g.arch {
        NetArch::Mlp => {
            for &h in &g.hidden {
                b = maybe_bn(b.dense(h, rng), g.batchnorm).relu();
            }
            b = b.dense(pixels(sample_shape), rng);
            if output_sigmoid(cfg, g.output) {
                b = b.sigmoid();
            }
            b = b.reshape(sample_shape);
        }
        NetArch::Conv => {
            let (c, h, w) = conv_geometry(sample_shape)?;
            let (c0, c1) = two(&g.channels, "gen.channels")?;
            let fc = g.hidden.first().copied().unwrap_or(256);
            b = maybe_bn(b.dense(fc, rng), g.batchnorm).relu();
            b = maybe_bn(b.dense(c0 * (h / 4) * (w / 4), rng), g.batchnorm).relu();
            b = b.reshape(&[c0, h / 4, w / 4]);
            b = maybe_bn(b.conv_transpose(c1, 5, 2, 2, 1, rng), g.batchnorm).relu();
            b = b.conv_transpose(c, 5, 2, 2, 1, rng);
            if output_sigmoid(cfg, g.output) {
                b = b.sigmoid();
            }
        }
    }
    DirectGenerator::new(b.build(rng)?)
}

/// Encoder ending in `tanh` and a decoder back to sample space.
pub fn build_transition(cfg: &Config, sample_shape: &[usize], rng: &mut impl Rng) -> Result<TransitionGenerator> {
    let v = &cfg.vcd;
    let sigmoid = output_sigmoid(cfg, cfg.gen.output);
    let mut enc = Graph::builder("enc", sample_shape);
    let mut dec = Graph::builder("dec", &[v.d]);
    match v.arch {
        NetArch::Mlp => {
            enc = enc.flatten();
            for &h in &v.hidden {
                enc = enc.dense(h, rng).relu();
            }
            for &h in v.hidden.iter().rev() {
                dec = dec.dense(h, rng).relu();
            }
            dec = dec.dense(pixels(sample_shape), rng);
            if sigmoid {
                dec = dec.sigmoid();
            }
            dec = dec.reshape(sample_shape);
        }
        NetArch::Conv => {
            let (c, h, w) = conv_geometry(sample_shape)?;
            let (c0, c1) = two(&v.channels, "vcd.channels")?;
            enc = conv_stack(enc, (c0, c1), rng);
            dec = dec
                .dense(c1 * (h / 4) * (w / 4), rng)
                .relu()
                .reshape(&[c1, h / 4, w / 4])
                .conv_transpose(c0, 5, 2, 2, 1, rng)
                .relu()
                .conv_transpose(c, 5, 2, 2, 1, rng);
            if sigmoid {
                dec = dec.sigmoid();
            }
        }
    }
    let encoder = enc.dense(v.d, rng).tanh().build(rng)?;
    TransitionGenerator::new(encoder, dec.build(rng)?)
}
