//! Browser bindings for three small pieces of the core crate: single-neuron
//! dynamics, the spiking/non-spiking energy break-even, and the
//! patch-keep corruption mask.
//!
//! Each export is a thin wrapper over a plain function so the logic can be
//! tested natively.

use spikevim::energy;
use spikevim::retrieval::{self, KeepPatchSpec};
use spikevim::spiking::{lif_step, nilif_step, LifConfig, MembraneState, NiLifConfig};
use spikevim::Tensor;
use wasm_bindgen::prelude::*;

/// Membrane potentials and spikes of a binary LIF and an integer NI-LIF
/// neuron driven by the same input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub lif_u: Vec<f64>,
    pub lif_s: Vec<f64>,
    pub nilif_u: Vec<f64>,
    pub nilif_s: Vec<f64>,
}

impl Trace {
    /// Rows concatenated in field order, as handed to JavaScript.
    pub fn flatten(self) -> Vec<f64> {
        [self.lif_u, self.lif_s, self.nilif_u, self.nilif_s].concat()
    }
}

pub fn simulate(inputs: &[f64], v_th: f64, beta: f64, d_max: u32) -> spikevim::Result<Trace> {
    let lif = LifConfig::new(v_th, beta)?;
    let nilif = NiLifConfig { d_max, beta, t_steps: 1 };
    nilif.validate()?;
    let mut a = MembraneState::<f64>::zeros(&[1]);
    let mut b = MembraneState::<f64>::zeros(&[1]);
    let mut tr = Trace { lif_u: vec![], lif_s: vec![], nilif_u: vec![], nilif_s: vec![] };
    for &x in inputs {
        let x = Tensor::full(&[1], x);
        let (s, next) = lif_step(&a, &x, &lif)?;
        tr.lif_u.push(next.u.data()[0]);
        tr.lif_s.push(s.data()[0]);
        a = next;
        let (s, next) = nilif_step(&b, &x, &nilif)?;
        tr.nilif_u.push(next.u.data()[0]);
        // Report the integer count rather than the normalized level.
        tr.nilif_s.push(s.data()[0] * d_max as f64);
        b = next;
    }
    Ok(tr)
}

pub fn mask(h: usize, w: usize, ratio: f64, patches: usize, seed: u64) -> spikevim::Result<Vec<u8>> {
    let spec = KeepPatchSpec { ratio, patches, seed };
    Ok(retrieval::keep_mask(h, w, &spec)?.into_iter().map(u8::from).collect())
}

fn js(e: spikevim::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Four rows of `inputs.len()` values: LIF potential, LIF spikes, NI-LIF
/// potential, NI-LIF integer spike counts.
#[wasm_bindgen(js_name = neuronTrace)]
pub fn neuron_trace(inputs: &[f64], v_th: f64, beta: f64, d_max: u32) -> Result<Vec<f64>, JsError> {
    simulate(inputs, v_th, beta, d_max).map(Trace::flatten).map_err(js)
}

/// Largest `T·R_f` at which spike-driven accumulation is cheaper.
#[wasm_bindgen(js_name = breakEven)]
pub fn break_even(e_ac: f64, e_mac: f64) -> f64 {
    energy::break_even_product(e_ac, e_mac)
}

#[wasm_bindgen(js_name = spikingIsCheaper)]
pub fn spiking_is_cheaper(t_steps: usize, rate: f64, e_ac: f64, e_mac: f64) -> bool {
    energy::efficiency_check(t_steps, rate, e_ac, e_mac)
}

#[wasm_bindgen(js_name = defaultCosts)]
pub fn default_costs() -> Vec<f64> {
    vec![energy::E_AC_PJ, energy::E_MAC_PJ]
}

/// Row-major `h×w` mask, 1 where the image is kept.
#[wasm_bindgen(js_name = keepMask)]
pub fn keep_mask(h: usize, w: usize, ratio: f64, patches: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    mask(h, w, ratio, patches, seed as u64).map_err(js)
}
