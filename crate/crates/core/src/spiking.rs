//! LIF and NI-LIF neurons, their surrogate-gradient tape ops, and firing
//! statistics.
//!
//! Both neurons use soft reset: `U[t] = H[t-1] + X[t]`, then a spike
//! function, then `H[t] = β(U[t] − reset)`. The LIF spike is the Heaviside
//! step with `Θ(0) = 1`; the NI-LIF spike is `clip(round(U), 0, D) / D`.
//!
//! On the tape, the non-differentiable spike functions get a
//! straight-through surrogate: NI-LIF passes `1/D` inside `[0, D]` and zero
//! outside, LIF passes `1` inside a unit-wide window centred on `V_th`.
//! [`SpikeMode::Relaxed`] replaces the forward staircase by the continuous
//! function whose derivative is exactly that surrogate, which is what the
//! finite-difference checks run against.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifConfig {
    pub v_th: f64,
    pub beta: f64,
}

impl LifConfig {
    pub fn new(v_th: f64, beta: f64) -> Result<Self> {
        let cfg = Self { v_th, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0) {
            return Err(Error::Config(format!("v_th must be positive, got {}", self.v_th)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

impl Default for LifConfig {
    fn default() -> Self {
        Self { v_th: 1.0, beta: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NiLifConfig {
    /// Integer activation bound `D`.
    pub d_max: u32,
    pub beta: f64,
    /// Simulation timesteps `T`.
    pub t_steps: usize,
}

impl NiLifConfig {
    pub fn new(d_max: u32, beta: f64, t_steps: usize) -> Result<Self> {
        let cfg = Self { d_max, beta, t_steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_max == 0 {
            return Err(Error::Config("d_max must be at least 1".into()));
        }
        if self.t_steps == 0 {
            return Err(Error::Config("t_steps must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }

    /// Timestep label in `T×D` form, e.g. `1×4`.
    pub fn step_label(&self) -> String {
        format!("{}×{}", self.t_steps, self.d_max)
    }
}

impl Default for NiLifConfig {
    fn default() -> Self {
        Self {
            d_max: 4,
            beta: 0.5,
            t_steps: 1,
        }
    }
}

/// Pre-spike potential `u` and post-firing potential `h` of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MembraneState<T> {
    pub u: Tensor<T>,
    pub h: Tensor<T>,
}

impl<T: Real> MembraneState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            u: Tensor::zeros(shape),
            h: Tensor::zeros(shape),
        }
    }
}

/// Heaviside step with `Θ(0) = 1`.
#[inline]
pub fn heaviside<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// `clip(round(u), 0, D) / D`, rounding half away from zero.
#[inline]
pub fn nilif_quantize<T: Real>(u: T, d_max: u32) -> T {
    let d = T::lit(d_max as f64);
    u.round().max(T::zero()).min(d) / d
}

pub fn lif_step<T: Real>(state: &MembraneState<T>, x: &Tensor<T>, cfg: &LifConfig) -> Result<(Tensor<T>, MembraneState<T>)> {
    let u = state.h.zip_map(x, |h, x| h + x)?;
    let (v_th, beta) = (T::lit(cfg.v_th), T::lit(cfg.beta));
    let s = u.map(|v| heaviside(v - v_th));
    let h = u.zip_map(&s, |u, s| beta * (u - s))?;
    Ok((s, MembraneState { u, h }))
}

pub fn nilif_step<T: Real>(state: &MembraneState<T>, x: &Tensor<T>, cfg: &NiLifConfig) -> Result<(Tensor<T>, MembraneState<T>)> {
    let u = state.h.zip_map(x, |h, x| h + x)?;
    let (d, beta) = (T::lit(cfg.d_max as f64), T::lit(cfg.beta));
    let s = u.map(|v| nilif_quantize(v, cfg.d_max));
    let h = u.zip_map(&s, |u, s| beta * (u - s * d))?;
    Ok((s, MembraneState { u, h }))
}

/// Forward behaviour of the spike function on the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpikeMode {
    /// True quantized spikes.
    #[default]
    Quantized,
    /// Continuous primitive of the surrogate (gradient checks only).
    Relaxed,
}

impl<T: Real> Tape<T> {
    /// NI-LIF spiking layer `SN(·)`: the input is held for `T` steps from a
    /// zero membrane and the emitted spikes are averaged over time.
    pub fn spike(&mut self, x: Var, cfg: &NiLifConfig, mode: SpikeMode) -> Var {
        let d = T::lit(cfg.d_max as f64);
        let beta = T::lit(cfg.beta);
        let steps = cfg.t_steps;
        let inv_t = T::one() / T::lit(steps as f64);
        let xd = self.value(x).data().to_vec();
        let n = xd.len();
        let mut h = vec![T::zero(); n];
        let mut out = vec![T::zero(); n];
        // window[t][i]: u inside [0, D] at step t
        let mut window: Vec<Vec<bool>> = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut w = vec![false; n];
            for i in 0..n {
                let u = h[i] + xd[i];
                let s = match mode {
                    SpikeMode::Quantized => nilif_quantize(u, cfg.d_max),
                    SpikeMode::Relaxed => u.max(T::zero()).min(d) / d,
                };
                w[i] = u >= T::zero() && u <= d;
                h[i] = beta * (u - s * d);
                out[i] += s;
            }
            window.push(w);
        }
        if steps > 1 {
            out.iter_mut().for_each(|v| *v *= inv_t);
        }
        let shape = self.shape(x).to_vec();
        let value = Tensor::new(&shape, out).expect("spike shape");
        self.custom(value, &[x], move |_, _, g, _| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let inv_d = T::one() / d;
            for i in 0..gd.len() {
                let gs = gd[i] * inv_t;
                let mut gh = T::zero();
                let mut acc = T::zero();
                for t in (0..steps).rev() {
                    let ds = if window[t][i] { inv_d } else { T::zero() };
                    let gu = gs * ds + gh * beta * (T::one() - d * ds);
                    acc += gu;
                    gh = gu;
                }
                gx[i] = acc;
            }
            vec![Some(Tensor::new(g.shape(), gx).unwrap())]
        })
    }

    /// Binary LIF spiking layer with a rectangular surrogate of width 1 and
    /// height 1 centred on `V_th`.
    pub fn lif_spike(&mut self, x: Var, cfg: &LifConfig, steps: usize, mode: SpikeMode) -> Var {
        let v_th = T::lit(cfg.v_th);
        let beta = T::lit(cfg.beta);
        let half = T::lit(0.5);
        let steps = steps.max(1);
        let inv_t = T::one() / T::lit(steps as f64);
        let xd = self.value(x).data().to_vec();
        let n = xd.len();
        let mut h = vec![T::zero(); n];
        let mut out = vec![T::zero(); n];
        let mut window: Vec<Vec<bool>> = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut w = vec![false; n];
            for i in 0..n {
                let u = h[i] + xd[i];
                let s = match mode {
                    SpikeMode::Quantized => heaviside(u - v_th),
                    SpikeMode::Relaxed => (u - v_th + half).max(T::zero()).min(T::one()),
                };
                w[i] = (u - v_th).abs() <= half;
                h[i] = beta * (u - s);
                out[i] += s;
            }
            window.push(w);
        }
        if steps > 1 {
            out.iter_mut().for_each(|v| *v *= inv_t);
        }
        let shape = self.shape(x).to_vec();
        let value = Tensor::new(&shape, out).expect("spike shape");
        self.custom(value, &[x], move |_, _, g, _| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            for i in 0..gd.len() {
                let gs = gd[i] * inv_t;
                let mut gh = T::zero();
                let mut acc = T::zero();
                for t in (0..steps).rev() {
                    let ds = if window[t][i] { T::one() } else { T::zero() };
                    let gu = gs * ds + gh * beta * (T::one() - ds);
                    acc += gu;
                    gh = gu;
                }
                gx[i] = acc;
            }
            vec![Some(Tensor::new(g.shape(), gx).unwrap())]
        })
    }
}

/// Non-zero and total element counts of spike tensors, accumulated over
/// batches and timesteps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FiringStats {
    pub nonzero_count: u64,
    pub total_count: u64,
}

impl FiringStats {
    pub fn record<T: Real>(&mut self, spikes: &Tensor<T>) {
        self.nonzero_count += spikes.count_nonzero() as u64;
        self.total_count += spikes.numel() as u64;
    }

    pub fn merge(&mut self, other: &FiringStats) {
        self.nonzero_count += other.nonzero_count;
        self.total_count += other.total_count;
    }
}

pub fn firing_rate(stats: &FiringStats) -> Result<f64> {
    if stats.total_count == 0 {
        return Err(Error::Usage("firing rate of an empty layer record".into()));
    }
    Ok(stats.nonzero_count as f64 / stats.total_count as f64)
}
