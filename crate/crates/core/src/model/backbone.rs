//! Shared feature extractor: a stem, two convolutional stages and a stack
//! of spike-driven linear-attention blocks.
//!
//! Resolution is halved three times by folding each 2×2 neighborhood into
//! channels (space-to-depth) ahead of a same-padded 3×3 convolution. A
//! stride-2 odd kernel cannot tile an even extent exactly, so the fold
//! takes the place of striding.
//!
//! Every spiking layer is preceded by a per-position layer norm over
//! channels, which keeps firing rates healthy at initialization without
//! introducing any dependence on other images in the batch.

use crate::autodiff::Var;
use crate::energy::LayerGroup;
use crate::error::{Error, Result};
use crate::tensor::Real;

use super::{Forward, ModelConfig, ParamSpec};

const G: LayerGroup = LayerGroup::Backbone;

fn norm_specs(specs: &mut Vec<ParamSpec>, name: &str, c: usize) {
    specs.push(ParamSpec::ones(&format!("{name}.gamma"), &[c]));
    specs.push(ParamSpec::zeros(&format!("{name}.beta"), &[c]));
}

fn conv_specs(specs: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize) {
    specs.push(ParamSpec::uniform(&format!("{name}.weight"), &[c_out, c_in, 3, 3], c_in * 9));
    specs.push(ParamSpec::zeros(&format!("{name}.bias"), &[c_out]));
}

fn dense_specs(specs: &mut Vec<ParamSpec>, name: &str, i: usize, o: usize, bias: bool) {
    specs.push(ParamSpec::uniform(&format!("{name}.weight"), &[i, o], i));
    if bias {
        specs.push(ParamSpec::zeros(&format!("{name}.bias"), &[o]));
    }
}

pub fn backbone_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let [w0, w1, w2] = cfg.widths;
    let mut s = Vec::new();
    conv_specs(&mut s, "backbone.stem", cfg.in_channels * 4, w0);
    for (stage, (c, next)) in [(w0, w1), (w1, w2)].into_iter().enumerate() {
        for i in 0..cfg.conv_blocks {
            let name = format!("backbone.conv{}.{i}", stage + 1);
            norm_specs(&mut s, &format!("{name}.norm"), c);
            conv_specs(&mut s, &name, c, c);
        }
        let down = format!("backbone.down{}", stage + 1);
        norm_specs(&mut s, &format!("{down}.norm"), c);
        conv_specs(&mut s, &down, c * 4, next);
    }
    let hidden = w2 * cfg.mlp_ratio;
    for i in 0..cfg.transformer_blocks {
        let p = format!("backbone.attn{i}");
        norm_specs(&mut s, &format!("{p}.norm1"), w2);
        for proj in ["q", "k", "v"] {
            dense_specs(&mut s, &format!("{p}.{proj}"), w2, w2, false);
            norm_specs(&mut s, &format!("{p}.{proj}.norm"), w2);
        }
        norm_specs(&mut s, &format!("{p}.norm2"), w2);
        dense_specs(&mut s, &format!("{p}.o"), w2, w2, false);
        norm_specs(&mut s, &format!("{p}.norm3"), w2);
        dense_specs(&mut s, &format!("{p}.mlp1"), w2, hidden, true);
        norm_specs(&mut s, &format!("{p}.mlp1.norm"), hidden);
        dense_specs(&mut s, &format!("{p}.mlp2"), hidden, w2, true);
    }
    norm_specs(&mut s, "backbone.out_norm", w2);
    s
}

/// Layer norm over the channel axis of a `B×C×H×W` map.
fn channel_norm<T: Real>(fw: &mut Forward<'_, T>, name: &str, x: Var) -> Result<Var> {
    let t = fw.tape.permute(x, &[0, 2, 3, 1])?;
    let n = fw.layer_norm(name, t)?;
    fw.tape.permute(n, &[0, 3, 1, 2])
}

/// `B×C×H×W → B×4C×(H/2)×(W/2)`.
fn space_to_depth<T: Real>(fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
    let s = fw.tape.shape(x).to_vec();
    let &[b, c, h, w] = s.as_slice() else {
        return Err(Error::shape("space_to_depth", &s, &[0, 0, 0, 0]));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("cannot halve a {h}x{w} feature map")));
    }
    let x = fw.tape.reshape(x, &[b, c, h / 2, 2, w / 2, 2])?;
    let x = fw.tape.permute(x, &[0, 1, 3, 5, 2, 4])?;
    fw.tape.reshape(x, &[b, c * 4, h / 2, w / 2])
}

fn spike_conv<T: Real>(fw: &mut Forward<'_, T>, name: &str, x: Var, downsample: bool) -> Result<Var> {
    let n = channel_norm(fw, &format!("{name}.norm"), x)?;
    let s = fw.sn(n);
    let s = if downsample { space_to_depth(fw, s)? } else { s };
    fw.conv(name, G, s, 1, 1)
}

/// Spiking projection `SN(LN(s·W))`; the norm restores a unit scale that the
/// `1/D`-valued spikes and small initial weights would otherwise lose.
fn spike_dense<T: Real>(fw: &mut Forward<'_, T>, name: &str, s: Var) -> Result<Var> {
    let p = fw.dense(name, G, s)?;
    let n = fw.layer_norm(&format!("{name}.norm"), p)?;
    Ok(fw.sn(n))
}

/// Linear attention over tokens: `SN(q)·(SN(k)ᵀ·SN(v)) / L`, projected back
/// through the output map.
fn attention_block<T: Real>(fw: &mut Forward<'_, T>, name: &str, x: Var) -> Result<Var> {
    let l = fw.tape.shape(x)[1];
    let n = fw.layer_norm(&format!("{name}.norm1"), x)?;
    let s = fw.sn(n);
    let q = spike_dense(fw, &format!("{name}.q"), s)?;
    let k = spike_dense(fw, &format!("{name}.k"), s)?;
    let v = spike_dense(fw, &format!("{name}.v"), s)?;
    let kt = fw.tape.permute(k, &[0, 2, 1])?;
    let kv = fw.tape.bmm(kt, v)?;
    let a = fw.tape.bmm(q, kv)?;
    let a = fw.tape.scale(a, T::one() / T::lit(l as f64));
    let a = fw.layer_norm(&format!("{name}.norm2"), a)?;
    let a = fw.sn(a);
    let o = fw.dense(&format!("{name}.o"), G, a)?;
    let x = fw.tape.add(x, o)?;

    let n = fw.layer_norm(&format!("{name}.norm3"), x)?;
    let s = fw.sn(n);
    let h = spike_dense(fw, &format!("{name}.mlp1"), s)?;
    let m = fw.dense(&format!("{name}.mlp2"), G, h)?;
    fw.tape.add(x, m)
}

/// Maps `B×C_in×S×S` images to `B×C×L` token features (`L = (S/8)²`).
pub fn backbone_forward<T: Real>(fw: &mut Forward<'_, T>, cfg: &ModelConfig, images: Var) -> Result<Var> {
    let folded = space_to_depth(fw, images)?;
    let mut x = fw.conv("backbone.stem", G, folded, 1, 1)?;
    for stage in 1..=2 {
        for i in 0..cfg.conv_blocks {
            let y = spike_conv(fw, &format!("backbone.conv{stage}.{i}"), x, false)?;
            x = fw.tape.add(x, y)?;
        }
        x = spike_conv(fw, &format!("backbone.down{stage}"), x, true)?;
    }
    let flat = fw.flatten_spatial(x)?;
    let mut t = fw.swap_last(flat)?;
    for i in 0..cfg.transformer_blocks {
        t = attention_block(fw, &format!("backbone.attn{i}"), t)?;
    }
    let t = fw.layer_norm("backbone.out_norm", t)?;
    fw.swap_last(t)
}
