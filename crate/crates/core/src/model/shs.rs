//! Hybrid state-space block: spiking depthwise priors around a gated linear
//! recurrence, followed by a spiking feed-forward network with batch norm.

use crate::autodiff::Var;
use crate::energy::LayerGroup;
use crate::error::{Error, Result};
use crate::tensor::Real;

use super::{Forward, ModelConfig, ParamSpec};

const G: LayerGroup = LayerGroup::Shs;

pub(super) const BN_LAYERS: [&str; 2] = ["bn1", "bn2"];

pub(super) fn bn_channels(cfg: &ModelConfig, layer: &str) -> usize {
    match layer {
        "bn1" => cfg.channels() * cfg.mlp_ratio,
        _ => cfg.channels(),
    }
}

pub fn shs_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels();
    let n = cfg.state_dim;
    let hidden = c * cfg.mlp_ratio;
    let mut s = vec![
        ParamSpec::uniform("shs.dw1.weight", &[c, 1, 3, 3], 9),
        ParamSpec::uniform("shs.dw2.weight", &[c, 1, 3, 3], 9),
        ParamSpec::ones("shs.ln.gamma", &[c]),
        ParamSpec::zeros("shs.ln.beta", &[c]),
    ];
    for proj in ["in", "a", "b", "c"] {
        s.push(ParamSpec::uniform(&format!("shs.hsm.{proj}.weight"), &[c, n], c));
    }
    s.push(ParamSpec::zeros("shs.hsm.a.bias", &[n]));
    s.push(ParamSpec::uniform("shs.hsm.out.weight", &[n, c], n));
    s.push(ParamSpec::uniform("shs.ffn1.weight", &[hidden, c, 1, 1], c));
    s.push(ParamSpec::uniform("shs.ffn2.weight", &[c, hidden, 1, 1], hidden));
    for bn in BN_LAYERS {
        let ch = bn_channels(cfg, bn);
        s.push(ParamSpec::ones(&format!("shs.{bn}.gamma"), &[ch]));
        s.push(ParamSpec::zeros(&format!("shs.{bn}.beta"), &[ch]));
    }
    s
}

/// Gated linear recurrence over `B×L×C` tokens:
/// `h_t = a_t⊙h_{t−1} + b_t⊙(x_t W_in)`, `y_t = (c_t⊙h_t) W_out`, with
/// `a_t = σ(x_t W_a + b_a)` and `b_t, c_t` per-token projections.
pub fn hsm_ssd_forward<T: Real>(fw: &mut Forward<'_, T>, seq: Var) -> Result<Var> {
    let u = fw.dense("shs.hsm.in", G, seq)?;
    let a = fw.dense("shs.hsm.a", G, seq)?;
    let a = fw.tape.sigmoid(a);
    let b = fw.dense("shs.hsm.b", G, seq)?;
    let c = fw.dense("shs.hsm.c", G, seq)?;
    let drive = fw.tape.mul(b, u)?;
    let h = fw.tape.linear_recurrence(a, drive)?;
    let y = fw.tape.mul(c, h)?;
    fw.dense("shs.hsm.out", G, y)
}

fn spike_dw<T: Real>(fw: &mut Forward<'_, T>, name: &str, x: Var) -> Result<Var> {
    let s = fw.sn(x);
    let d = fw.dwconv(name, G, s)?;
    fw.tape.add(x, d)
}

/// `B×C×L` features to a refined `B×C×H×W` map.
pub fn shs_forward<T: Real>(fw: &mut Forward<'_, T>, f: Var, h: usize, w: usize) -> Result<Var> {
    let s = fw.tape.shape(f).to_vec();
    let &[b, c, l] = s.as_slice() else {
        return Err(Error::shape("shs", &s, &[0, 0, h * w]));
    };
    if l != h * w {
        return Err(Error::shape("shs", &s, &[b, c, h * w]));
    }
    let x = fw.tape.reshape(f, &[b, c, h, w])?;
    let x1 = spike_dw(fw, "shs.dw1", x)?;

    let seq = fw.flatten_spatial(x1)?;
    let seq = fw.swap_last(seq)?;
    let n = fw.layer_norm("shs.ln", seq)?;
    let y = hsm_ssd_forward(fw, n)?;
    let y = fw.swap_last(y)?;
    let y = fw.tape.reshape(y, &[b, c, h, w])?;
    let x2 = fw.tape.add(x1, y)?;

    let x3 = spike_dw(fw, "shs.dw2", x2)?;

    let s1 = fw.sn(x3);
    let z = fw.conv("shs.ffn1", G, s1, 1, 0)?;
    let z = fw.batch_norm("shs.bn1", z)?;
    let s2 = fw.sn(z);
    let z = fw.conv("shs.ffn2", G, s2, 1, 0)?;
    let z = fw.batch_norm("shs.bn2", z)?;
    fw.tape.add(x3, z)
}
