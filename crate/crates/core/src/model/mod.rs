//! Model parameters, the forward context, and the network blocks.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`backbone.stem.weight`, `ssa.wa`, ...). A [`Forward`] borrows a tape and
//! the store, lazily registers each parameter as a leaf the first time a
//! layer asks for it, and optionally records per-layer firing statistics
//! for the energy report.

mod backbone;
mod shs;
mod ssa;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::energy::{EnergyRecorder, LayerGeometry, LayerGroup};
use crate::error::{Error, Result};
use crate::spiking::{NiLifConfig, SpikeMode};
use crate::tensor::{Real, Tensor};

pub use backbone::{backbone_forward, backbone_param_specs};
pub use shs::{hsm_ssd_forward, shs_forward, shs_param_specs};
pub use ssa::{cpe_forward, ssa_forward, ssa_forward_traced, ssa_param_specs, GateMode, SsaTrace};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Channel widths of the two convolutional stages and the transformer stages.
    pub widths: [usize; 3],
    pub conv_blocks: usize,
    pub transformer_blocks: usize,
    pub mlp_ratio: usize,
    /// Hidden state size of the state-space core.
    pub state_dim: usize,
    pub num_classes: usize,
    pub neuron: NiLifConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            widths: [16, 32, 64],
            conv_blocks: 1,
            transformer_blocks: 2,
            mlp_ratio: 2,
            state_dim: 16,
            num_classes: 64,
            neuron: NiLifConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image size {} is incompatible with three stride-2 downsamplings",
                self.image_size
            )));
        }
        if self.widths.contains(&0) || self.in_channels == 0 || self.mlp_ratio == 0 || self.state_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        self.neuron.validate()
    }

    pub fn channels(&self) -> usize {
        self.widths[2]
    }

    /// Side of the final feature grid.
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened embedding size `C·H·W`.
    pub fn embed_dim(&self) -> usize {
        self.channels() * self.seq_len()
    }

    /// Every trainable tensor of the full training model.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = backbone_param_specs(self);
        specs.extend(ssa_param_specs(self));
        specs.extend(shs_param_specs(self));
        let c = self.channels();
        specs.push(ParamSpec::uniform("head.fc.weight", &[c, self.num_classes], c));
        specs.push(ParamSpec::zeros("head.fc.bias", &[self.num_classes]));
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±√(1/fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn uniform(name: &str, shape: &[usize], fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Uniform { fan_in },
        }
    }

    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Zeros,
        }
    }

    pub fn ones(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Ones,
        }
    }
}

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Seeded initialization; tensors are drawn in `specs` order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            let t = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| T::lit(rng.random_range(-bound..bound)))
                }
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, T::one()),
            };
            store.params.insert(spec.name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.params.insert(name.to_string(), t);
    }

    pub fn insert_buffer(&mut self, name: &str, t: Tensor<T>) {
        self.buffers.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of trainable tensors.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn map_params(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            params: self.params.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
            buffers: self.buffers.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Only the tensors whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            params: self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
            buffers: self.buffers.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Fails when any parameter named by `specs` is missing or mis-shaped.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.params.get(&spec.name) {
                None => return Err(Error::Format(format!("missing parameter {}", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::shape("parameter", t.shape(), &spec.shape));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// One forward pass: tape, parameter bindings, neuron settings and optional
/// energy instrumentation.
pub struct Forward<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    vars: BTreeMap<String, Var>,
    pub neuron: NiLifConfig,
    pub spike_mode: SpikeMode,
    /// Batch norm uses batch statistics when set.
    pub training: bool,
    pub track_grads: bool,
    pub gate_mode: GateMode,
    pub recorder: Option<EnergyRecorder>,
    /// `(name, batch mean, batch variance, element count)` per batch-norm call.
    pub bn_batch_stats: Vec<(String, Vec<T>, Vec<T>, usize)>,
}

impl<'a, T: Real> Forward<'a, T> {
    /// Inference-mode pass with no gradient tracking.
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, neuron: NiLifConfig) -> Self {
        Self {
            tape,
            params,
            vars: BTreeMap::new(),
            neuron,
            spike_mode: SpikeMode::Quantized,
            training: false,
            track_grads: false,
            gate_mode: GateMode::Learned,
            recorder: None,
            bn_batch_stats: Vec::new(),
        }
    }

    /// Training-mode pass: parameters require gradients and batch norm
    /// uses batch statistics.
    pub fn training(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, neuron: NiLifConfig) -> Self {
        let mut fw = Self::new(tape, params, neuron);
        fw.training = true;
        fw.track_grads = true;
        fw
    }

    pub fn with_recorder(mut self) -> Self {
        self.recorder = Some(EnergyRecorder::new());
        self
    }

    /// Uses an existing tape variable for parameter `name`.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
        let v = self.tape.leaf(t.clone(), self.track_grads);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn has_param(&self, name: &str) -> bool {
        self.vars.contains_key(name) || self.params.get(name).is_some()
    }

    /// Parameter name → tape variable for every parameter touched so far.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn sn(&mut self, x: Var) -> Var {
        let cfg = self.neuron;
        self.tape.spike(x, &cfg, self.spike_mode)
    }

    fn record(&mut self, name: &str, group: LayerGroup, geometry: LayerGeometry, input: Var) {
        let t_steps = self.neuron.t_steps;
        if let Some(rec) = self.recorder.as_mut() {
            rec.record(name, group, geometry, self.tape.value(input), t_steps);
        }
    }

    /// Convolution `name.weight` with optional `name.bias`.
    pub fn conv(&mut self, name: &str, group: LayerGroup, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let y = self.tape.conv2d(x, w, stride, padding)?;
        let ys = self.tape.shape(y).to_vec();
        let ws = self.tape.shape(w).to_vec();
        self.record(
            name,
            group,
            LayerGeometry::Conv {
                k: ws[2],
                h: ys[2],
                w: ys[3],
                c_in: ws[1],
                c_out: ws[0],
            },
            x,
        );
        let bias = format!("{name}.bias");
        if self.has_param(&bias) {
            let b = self.param(&bias)?;
            self.tape.add_bias(y, b, 1)
        } else {
            Ok(y)
        }
    }

    /// Same-padded depthwise convolution `name.weight` (`C×1×k×k`).
    pub fn dwconv(&mut self, name: &str, group: LayerGroup, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let y = self.tape.depthwise_conv2d(x, w)?;
        let xs = self.tape.shape(x).to_vec();
        let k = self.tape.shape(w)[2];
        self.record(
            name,
            group,
            LayerGeometry::Conv {
                k,
                h: xs[2],
                w: xs[3],
                c_in: 1,
                c_out: xs[1],
            },
            x,
        );
        Ok(y)
    }

    /// Linear map `name.weight` (plus optional `name.bias`) over the last
    /// axis; `x` is `[B, tokens, K]` or `[B, K]`.
    pub fn dense(&mut self, name: &str, group: LayerGroup, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let y = self.tape.linear(x, w)?;
        let xs = self.tape.shape(x).to_vec();
        let ws = self.tape.shape(w).to_vec();
        let tokens = if xs.len() > 2 { xs[1..xs.len() - 1].iter().product() } else { 1 };
        self.record(name, group, LayerGeometry::Mlp { tokens, i_m: ws[0], o_m: ws[1] }, x);
        let bias = format!("{name}.bias");
        if self.has_param(&bias) {
            let b = self.param(&bias)?;
            let axis = self.tape.shape(y).len() - 1;
            self.tape.add_bias(y, b, axis)
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{name}.gamma"))?;
        let b = self.param(&format!("{name}.beta"))?;
        self.tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{name}.gamma"))?;
        let b = self.param(&format!("{name}.beta"))?;
        if self.training {
            let xs = self.tape.shape(x).to_vec();
            let count = xs[0] * xs[2..].iter().product::<usize>();
            let (y, mean, var) = self.tape.batch_norm(x, g, b, T::lit(BN_EPS), None)?;
            self.bn_batch_stats.push((name.to_string(), mean, var, count));
            Ok(y)
        } else {
            let c = self.tape.shape(x)[1];
            let mean = self
                .params
                .buffer(&format!("{name}.running_mean"))
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![T::zero(); c]);
            let var = self
                .params
                .buffer(&format!("{name}.running_var"))
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![T::one(); c]);
            let (y, _, _) = self.tape.batch_norm(x, g, b, T::lit(BN_EPS), Some((&mean, &var)))?;
            Ok(y)
        }
    }

    /// `B×C×L → B×L×C` and back (the permutation is its own inverse).
    pub fn swap_last(&mut self, x: Var) -> Result<Var> {
        self.tape.permute(x, &[0, 2, 1])
    }

    /// `B×C×L → B×C×P×P` with `P = √L`.
    pub fn to_grid(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let &[b, c, l] = s.as_slice() else {
            return Err(Error::shape("to_grid", &s, &[0, 0, 0]));
        };
        let p = square_side(l).ok_or_else(|| Error::shape("to_grid", &s, &[b, c, 0, 0]))?;
        self.tape.reshape(x, &[b, c, p, p])
    }

    /// `B×C×H×W → B×C×(H·W)`.
    pub fn flatten_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let &[b, c, h, w] = s.as_slice() else {
            return Err(Error::shape("flatten", &s, &[0, 0, 0, 0]));
        };
        self.tape.reshape(x, &[b, c, h * w])
    }
}

/// Folds batch statistics from a training pass into the running buffers.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[(String, Vec<T>, Vec<T>, usize)]) {
    let m = T::lit(BN_MOMENTUM);
    for (name, mean, var, count) in stats {
        let unbias = if *count > 1 { T::lit(*count as f64 / (*count as f64 - 1.0)) } else { T::one() };
        let c = mean.len();
        let rm_name = format!("{name}.running_mean");
        let rv_name = format!("{name}.running_var");
        let mut rm = store.buffer(&rm_name).cloned().unwrap_or_else(|| Tensor::zeros(&[c]));
        let mut rv = store.buffer(&rv_name).cloned().unwrap_or_else(|| Tensor::full(&[c], T::one()));
        for i in 0..c {
            rm.data_mut()[i] = (T::one() - m) * rm.data()[i] + m * mean[i];
            rv.data_mut()[i] = (T::one() - m) * rv.data()[i] + m * var[i] * unbias;
        }
        store.insert_buffer(&rm_name, rm);
        store.insert_buffer(&rv_name, rv);
    }
}

pub fn square_side(l: usize) -> Option<usize> {
    let p = (l as f64).sqrt().round() as usize;
    (p * p == l).then_some(p)
}

/// Initial parameters (and batch-norm buffers) for the full training model.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::init(&cfg.param_specs(), seed);
    for name in shs::BN_LAYERS {
        let c = shs::bn_channels(cfg, name);
        store.insert_buffer(&format!("shs.{name}.running_mean"), Tensor::zeros(&[c]));
        store.insert_buffer(&format!("shs.{name}.running_var"), Tensor::full(&[c], T::one()));
    }
    store
}

/// Backbone-only parameters for inference; auxiliary blocks and the
/// classification head are dropped.
pub fn prune_for_inference<T: Real>(store: &ParamStore<T>) -> ParamStore<T> {
    store.filter_prefix("backbone.")
}

/// Spikes, global average pooling and the linear classifier on a
/// `B×C×H×W` map; returns `B×K` logits.
pub fn head_forward<T: Real>(fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
    let s = fw.sn(x);
    let flat = fw.flatten_spatial(s)?;
    let pooled = fw.tape.mean_last(flat);
    fw.dense("head.fc", LayerGroup::Head, pooled)
}

/// Flattened `B×(C·L)` embeddings from the backbone alone.
pub fn embed<T: Real>(cfg: &ModelConfig, params: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, params, cfg.neuron);
    let x = fw.tape.constant(images.clone());
    let f = backbone_forward(&mut fw, cfg, x)?;
    let s = fw.tape.shape(f).to_vec();
    fw.tape.value(f).reshape(&[s[0], s[1] * s[2]])
}
