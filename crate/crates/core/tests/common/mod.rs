//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikevim::autodiff::{check_gradients, GradCheckReport};
use spikevim::model::{init_params, Forward, ModelConfig, ParamStore};
use spikevim::spiking::{NiLifConfig, SpikeMode};
use spikevim::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// A model small enough for exhaustive finite differences: 16×16 input,
/// four channels on a 2×2 token grid.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        widths: [2, 3, 4],
        conv_blocks: 1,
        transformer_blocks: 1,
        mlp_ratio: 2,
        state_dim: 3,
        num_classes: 5,
        ..ModelConfig::default()
    }
}

/// Freshly initialized parameters with every entry jittered, so that unit
/// scales and zero shifts of the norms are not a special case.
pub fn jittered_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed ^ 0xA5A5);
    init_params::<f64>(cfg, seed).map_params(|t| t.map(|v| v + r.random_range(-0.2..0.2)))
}

/// Named parameter tensors (optionally restricted to a prefix) flattened
/// into the argument list of a gradient check.
pub fn named_inputs(params: &ParamStore<f64>, prefix: &str) -> (Vec<String>, Vec<Tensor<f64>>) {
    params
        .params()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.clone(), t.clone()))
        .unzip()
}

/// Finite-difference check of a model-level scalar. `vars[0]` is the data
/// input and the rest bind to `names` in order; spikes run in the relaxed
/// mode whose derivative is exactly the surrogate.
pub fn check_block<F>(
    neuron: NiLifConfig,
    names: &[String],
    inputs: &[Tensor<f64>],
    points: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Forward<'_, f64>, Var) -> Result<Var>,
{
    let empty = ParamStore::<f64>::new();
    check_gradients(
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let mut fw = Forward::training(tape, &empty, neuron);
            fw.spike_mode = SpikeMode::Relaxed;
            for (n, &v) in names.iter().zip(&vars[1..]) {
                fw.bind(n, v);
            }
            let out = build(&mut fw, vars[0])?;
            // A fixed random projection makes the scalar depend on every output.
            let shape = fw.tape.shape(out).to_vec();
            let mut r = rng(7);
            let w = fw.tape.constant(Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0)));
            let p = fw.tape.mul(out, w)?;
            Ok(fw.tape.sum(p))
        },
        inputs,
        points,
        seed,
    )
}

/// Random scalar weighting of a tape value, used to turn tensor-valued ops
/// into scalar losses for gradient checks.
pub fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed);
    let w = tape.constant(Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0)));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}
