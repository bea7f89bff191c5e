//! Client side of a round: metric-loss training against the received bank,
//! memory extraction, and memory-reduce.

mod knn;
mod reduce;

pub use knn::{knn_lookup, metric_loss, LossConfig, Neighbors};
pub use reduce::{align_bank, dynamic_weights, max_patch_norm, memory_reduce, weighted_average, MemoryBank};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{project, project_backward, Activation, ProjectionCache, ProjectionParams};
use crate::generator::{generate_memory, generator_backward, GeneratorCache, GeneratorParams, GridSpace};
use crate::numerics::io::Container;
use crate::numerics::{AdamState, Real, SeedStream, Tensor};

/// Shapes of the trainable part of a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Memory feature channels `C`.
    pub memory_channels: usize,
    pub phi_hidden: usize,
    /// Grid space extents `[HG, WG]`.
    pub grid: [usize; 2],
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            memory_channels: 16,
            phi_hidden: 16,
            grid: [12, 12],
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_channels == 0 {
            return Err(Error::config_key("memory_channels", "must be >= 1"));
        }
        if self.phi_hidden == 0 {
            return Err(Error::config_key("phi_hidden", "must be >= 1"));
        }
        if self.grid.iter().any(|&g| g < 2) {
            return Err(Error::config_key("grid", "grid extents must be >= 2"));
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 11] = [
    "proj_w", "proj_b", "coord_w", "coord_b", "phi1_w", "phi1_b", "phi2_w", "phi2_b", "out_w",
    "out_b", "grid",
];

/// Projection followed by the memory generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientModel<T = f32> {
    pub projection: ProjectionParams<T>,
    pub generator: GeneratorParams<T>,
    pub activation: Activation,
}

/// Forward intermediates of [`ClientModel::forward`].
#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    pub projection: ProjectionCache<T>,
    pub generator: GeneratorCache<T>,
}

impl<T: Real> ClientModel<T> {
    pub fn init(cin: usize, cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let c = cfg.memory_channels;
        Ok(Self {
            projection: ProjectionParams::init(cin, c, rng),
            generator: GeneratorParams::init(c, cfg.phi_hidden, cfg.grid[0], cfg.grid[1], rng)?,
            activation: cfg.activation,
        })
    }

    pub fn forward(&self, fused: &Tensor<T>) -> Result<(Tensor<T>, ModelCache<T>)> {
        let (p, projection) = project(fused, &self.projection, self.activation)?;
        let (m, generator) = generate_memory(&p, &self.generator)?;
        Ok((m, ModelCache { projection, generator }))
    }

    /// Parameter gradients given `dL/dM`, laid out like `self`.
    pub fn backward(&self, cache: &ModelCache<T>, grad_m: &Tensor<T>) -> Result<Self> {
        let (generator, d_p) = generator_backward(&cache.generator, &self.generator, grad_m)?;
        let projection = project_backward(&cache.projection, &self.projection, self.activation, &d_p)?;
        Ok(Self {
            projection,
            generator,
            activation: self.activation,
        })
    }

    /// Metric loss of one fused feature map against `bank` and its gradient.
    pub fn loss_and_grad(&self, fused: &Tensor<T>, bank: &Tensor<T>, cfg: &LossConfig) -> Result<(f64, Self, Tensor<T>)> {
        let (m, cache) = self.forward(fused)?;
        let (loss, grad_m) = metric_loss(&m, bank, cfg)?;
        Ok((loss, self.backward(&cache, &grad_m)?, m))
    }

    /// Trainable tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor<T>; 11] {
        let g = &self.generator;
        [
            &self.projection.weight,
            &self.projection.bias,
            &g.coord_w,
            &g.coord_b,
            &g.phi1_w,
            &g.phi1_b,
            &g.phi2_w,
            &g.phi2_b,
            &g.out_w,
            &g.out_b,
            &g.grid.grid,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 11] {
        let g = &mut self.generator;
        [
            &mut self.projection.weight,
            &mut self.projection.bias,
            &mut g.coord_w,
            &mut g.coord_b,
            &mut g.phi1_w,
            &mut g.phi1_b,
            &mut g.phi2_w,
            &mut g.phi2_b,
            &mut g.out_w,
            &mut g.out_b,
            &mut g.grid.grid,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ClientModel<U> {
        let t = self.tensors().map(|t| t.cast::<U>());
        let [pw, pb, cw, cb, p1w, p1b, p2w, p2b, ow, ob, grid] = t;
        ClientModel {
            projection: ProjectionParams { weight: pw, bias: pb },
            generator: GeneratorParams {
                coord_w: cw,
                coord_b: cb,
                phi1_w: p1w,
                phi1_b: p1b,
                phi2_w: p2w,
                phi2_b: p2b,
                out_w: ow,
                out_b: ob,
                grid: GridSpace { grid },
                version: self.generator.version,
            },
            activation: self.activation,
        }
    }

    fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    fn sum_squares(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_squares()).sum()
    }
}

impl ClientModel<f32> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            c.push(*name, t.clone());
        }
        c
    }

    /// Restores tensors into a model of the same shape.
    pub fn load_container(&mut self, c: &Container) -> Result<()> {
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors_mut()) {
            let src = c.get(name)?;
            if src.dims() != t.dims() {
                return Err(Error::Format(format!(
                    "section `{name}` has dims {:?}, expected {:?}",
                    src.dims(),
                    t.dims()
                )));
            }
            *t = src.clone();
        }
        self.generator.version += 1;
        Ok(())
    }
}

/// Everything one client owns between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientModelState {
    pub id: usize,
    pub model: ClientModel<f32>,
    /// One optimizer state per tensor, in [`PARAM_NAMES`] order.
    pub adam: Vec<AdamState<f32>>,
    pub bank: MemoryBank,
}

impl ClientModelState {
    pub fn new(id: usize, model: ClientModel<f32>, cfg: &LossConfig, bank: MemoryBank) -> Self {
        let adam = model
            .tensors()
            .iter()
            .map(|t| AdamState::new(t, cfg.optimizer.clone()))
            .collect();
        Self { id, model, adam, bank }
    }
}

/// Per-batch records from [`client_update`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateTrace {
    pub losses: Vec<f64>,
    /// Squared norm of the loss gradient (without weight decay).
    pub grad_sq_norms: Vec<f64>,
    /// Largest memory patch norm seen during training.
    pub max_patch_norm: f64,
}

/// `E` epochs of minibatch Adam on the metric loss against `state.bank`.
/// `data` holds the client's fused feature maps; batch order is shuffled
/// from `shuffle` per epoch.
pub fn client_update(
    state: &mut ClientModelState,
    data: &[Tensor<f32>],
    cfg: &LossConfig,
    round: u64,
    shuffle: &SeedStream,
) -> Result<UpdateTrace> {
    if data.is_empty() {
        return Err(Error::contract(format!("client {} has an empty dataset", state.id)));
    }
    if state.adam.len() != PARAM_NAMES.len() {
        return Err(Error::contract("optimizer state does not match the model"));
    }
    let mut trace = UpdateTrace::default();
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle.path(&[state.id as u64, round, epoch as u64]).rng(0));
        for batch in order.chunks(cfg.batch_size) {
            let model = &state.model;
            let bank = &state.bank.patches;
            let per_sample: Vec<_> = batch
                .par_iter()
                .map(|&i| model.loss_and_grad(&data[i], bank, cfg))
                .collect::<Result<_>>()?;
            let mut losses = Vec::with_capacity(batch.len());
            let mut grads: Option<ClientModel<f32>> = None;
            for (loss, g, m) in per_sample {
                losses.push(loss);
                trace.max_patch_norm = trace.max_patch_norm.max(max_patch_norm(&m));
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.add_assign(&g)?,
                }
            }
            let mut grads = grads.expect("batch is nonempty");
            let inv = 1.0 / batch.len() as f32;
            for t in grads.tensors_mut() {
                t.scale(inv);
            }
            let loss = losses.iter().sum::<f64>() / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("client {} loss is not finite", state.id)));
            }
            trace.losses.push(loss);
            trace.grad_sq_norms.push(grads.sum_squares());
            for ((p, g), opt) in state
                .model
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(state.adam.iter_mut())
            {
                opt.step(p, g)?;
            }
            state.model.generator.version += 1;
        }
    }
    Ok(trace)
}

/// One memory feature per sample, in input order.
pub fn extract_all_memories(model: &ClientModel<f32>, data: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    data.par_iter().map(|x| Ok(model.forward(x)?.0)).collect()
}
