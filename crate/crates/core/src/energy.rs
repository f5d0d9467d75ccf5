//! Theoretical energy accounting for spike-driven layers.
//!
//! A convolution costs `k²·h·w·c_in·c_out` operations and a fully connected
//! map `i·o` per token. A dense network pays `E_MAC` per operation; a
//! spiking one pays `E_AC·T·R_f` per operation, where `R_f` is the fraction
//! of non-zero entries in the layer's input spike tensor.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::spiking::{firing_rate, FiringStats};
use crate::tensor::{Real, Tensor};

/// 45nm multiply-accumulate energy in picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// 45nm accumulate energy in picojoules.
pub const E_AC_PJ: f64 = 0.9;

const PJ_PER_MJ: f64 = 1e9;

pub fn flops_conv(k: u64, h: u64, w: u64, c_in: u64, c_out: u64) -> Result<u64> {
    if [k, h, w, c_in, c_out].contains(&0) {
        return Err(Error::Validation("conv geometry extents must be positive".into()));
    }
    [k, h, w, c_in, c_out]
        .iter()
        .try_fold(k, |acc, &v| acc.checked_mul(v))
        .ok_or_else(|| Error::Validation("conv FLOPs overflow 64 bits".into()))
}

pub fn flops_mlp(i_m: u64, o_m: u64) -> Result<u64> {
    if i_m == 0 || o_m == 0 {
        return Err(Error::Validation("mlp extents must be positive".into()));
    }
    i_m.checked_mul(o_m).ok_or_else(|| Error::Validation("mlp FLOPs overflow 64 bits".into()))
}

pub fn energy_snn(flops: u64, t_steps: usize, rate: f64, e_ac: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Validation(format!("firing rate {rate} outside [0, 1]")));
    }
    if t_steps == 0 {
        return Err(Error::Validation("timestep count must be at least 1".into()));
    }
    Ok(e_ac * t_steps as f64 * rate * flops as f64)
}

pub fn energy_ann(flops: u64, e_mac: f64) -> f64 {
    e_mac * flops as f64
}

/// True when a spiking layer is cheaper than its dense counterpart:
/// `e_ac·T·R_f < e_mac`.
pub fn efficiency_check(t_steps: usize, rate: f64, e_ac: f64, e_mac: f64) -> bool {
    e_ac * t_steps as f64 * rate < e_mac
}

/// The `T·R_f` product at which spiking and dense energy are equal.
pub fn break_even_product(e_ac: f64, e_mac: f64) -> f64 {
    e_mac / e_ac
}

/// `baseline / improved`, e.g. a parameter or energy reduction factor.
pub fn reduction_ratio(baseline: f64, improved: f64) -> f64 {
    baseline / improved
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerGeometry {
    Conv { k: usize, h: usize, w: usize, c_in: usize, c_out: usize },
    Mlp { tokens: usize, i_m: usize, o_m: usize },
}

impl LayerGeometry {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerGeometry::Conv { .. } => "conv",
            LayerGeometry::Mlp { .. } => "mlp",
        }
    }

    /// Operation count for one image.
    pub fn flops(&self) -> Result<u64> {
        match *self {
            LayerGeometry::Conv { k, h, w, c_in, c_out } => flops_conv(k as u64, h as u64, w as u64, c_in as u64, c_out as u64),
            LayerGeometry::Mlp { tokens, i_m, o_m } => flops_mlp(i_m as u64, o_m as u64)?
                .checked_mul(tokens as u64)
                .ok_or_else(|| Error::Validation("mlp FLOPs overflow 64 bits".into())),
        }
    }
}

/// Which part of the model a layer belongs to. Only `Backbone` survives
/// inference pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerGroup {
    Backbone,
    Ssa,
    Shs,
    Head,
}

impl LayerGroup {
    pub fn name(&self) -> &'static str {
        match self {
            LayerGroup::Backbone => "backbone",
            LayerGroup::Ssa => "ssa",
            LayerGroup::Shs => "shs",
            LayerGroup::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub group: LayerGroup,
    pub geometry: LayerGeometry,
    pub firing: FiringStats,
    pub t_steps: usize,
}

/// Per-layer registry filled during an instrumented forward pass. Repeated
/// calls under the same name accumulate firing statistics.
#[derive(Clone, Debug, Default)]
pub struct EnergyRecorder {
    layers: Vec<LayerSpec>,
}

impl EnergyRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record<T: Real>(&mut self, name: &str, group: LayerGroup, geometry: LayerGeometry, input: &Tensor<T>, t_steps: usize) {
        let idx = match self.layers.iter().position(|l| l.name == name) {
            Some(i) => i,
            None => {
                self.layers.push(LayerSpec {
                    name: name.to_string(),
                    group,
                    geometry,
                    firing: FiringStats::default(),
                    t_steps,
                });
                self.layers.len() - 1
            }
        };
        self.layers[idx].firing.record(input);
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Registry restricted to the layers kept at inference.
    pub fn pruned(&self) -> Self {
        Self {
            layers: self.layers.iter().filter(|l| l.group == LayerGroup::Backbone).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub group: LayerGroup,
    pub kind: &'static str,
    pub flops: u64,
    pub rate: f64,
    pub e_snn_pj: f64,
    pub e_ann_pj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub total_flops: u64,
    pub total_snn_pj: f64,
    pub total_ann_pj: f64,
    pub e_ac: f64,
    pub e_mac: f64,
    pub param_count: Option<usize>,
}

impl EnergyReport {
    pub fn total_snn_mj(&self) -> f64 {
        self.total_snn_pj / PJ_PER_MJ
    }

    pub fn total_ann_mj(&self) -> f64 {
        self.total_ann_pj / PJ_PER_MJ
    }

    /// Tab-separated rows `layer kind flops R_f E_SNN(pJ) E_ANN(pJ)` with
    /// totals in millijoules as trailing comment lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer\tkind\tflops\trate\te_snn_pj\te_ann_pj\n");
        for l in &self.layers {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6}\t{:.4}\t{:.4}", l.name, l.kind, l.flops, l.rate, l.e_snn_pj, l.e_ann_pj);
        }
        let _ = writeln!(out, "# total_flops\t{}", self.total_flops);
        let _ = writeln!(out, "# total_e_snn_mj\t{:.9}", self.total_snn_mj());
        let _ = writeln!(out, "# total_e_ann_mj\t{:.9}", self.total_ann_mj());
        if let Some(p) = self.param_count {
            let _ = writeln!(out, "# params\t{p}");
        }
        out
    }
}

pub fn model_report(recorder: &EnergyRecorder, e_ac: f64, e_mac: f64) -> Result<EnergyReport> {
    if recorder.is_empty() {
        return Err(Error::Usage("energy report requested without a recorded forward pass".into()));
    }
    let mut layers = Vec::with_capacity(recorder.layers().len());
    let (mut total_flops, mut total_snn, mut total_ann) = (0u64, 0.0, 0.0);
    for spec in recorder.layers() {
        let flops = spec.geometry.flops()?;
        let rate = firing_rate(&spec.firing)?;
        let e_snn = energy_snn(flops, spec.t_steps, rate, e_ac)?;
        let e_ann = energy_ann(flops, e_mac);
        total_flops = total_flops
            .checked_add(flops)
            .ok_or_else(|| Error::Validation("total FLOPs overflow 64 bits".into()))?;
        total_snn += e_snn;
        total_ann += e_ann;
        layers.push(LayerEnergy {
            name: spec.name.clone(),
            group: spec.group,
            kind: spec.geometry.kind(),
            flops,
            rate,
            e_snn_pj: e_snn,
            e_ann_pj: e_ann,
        });
    }
    Ok(EnergyReport {
        layers,
        total_flops,
        total_snn_pj: total_snn,
        total_ann_pj: total_ann,
        e_ac,
        e_mac,
        param_count: None,
    })
}
