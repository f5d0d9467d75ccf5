//! Positional encoding and the selective-attention refinement block.
//!
//! All projections act on the channel axis of the token layout `B×L×C`;
//! convolutions act on the `B×C×P×P` grid. Two spiking gates modulate the
//! refined features: `G` locally, after the depthwise branch, and `A`
//! globally, computed straight from the block input.

use crate::autodiff::Var;
use crate::energy::LayerGroup;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::{square_side, Forward, ModelConfig, ParamSpec};

const G: LayerGroup = LayerGroup::Ssa;

/// How the two attention gates are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Learned,
    /// Both gates pinned to one, removing the modulation entirely.
    Saturated,
}

pub fn ssa_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels();
    let hidden = c * cfg.mlp_ratio;
    let mut s = vec![ParamSpec::uniform("ssa.cpe.weight", &[c, 1, 3, 3], 9)];
    for ln in ["ssa.ln1", "ssa.ln2", "ssa.ln3"] {
        s.push(ParamSpec::ones(&format!("{ln}.gamma"), &[c]));
        s.push(ParamSpec::zeros(&format!("{ln}.beta"), &[c]));
    }
    for conv in ["ssa.conv1", "ssa.conv_q"] {
        s.push(ParamSpec::uniform(&format!("{conv}.weight"), &[c, c, 1, 1], c));
    }
    for dw in ["ssa.dw1", "ssa.dw_q", "ssa.dw_out"] {
        s.push(ParamSpec::uniform(&format!("{dw}.weight"), &[c, 1, 3, 3], 9));
    }
    for proj in ["ssa.wa", "ssa.wb", "ssa.wc"] {
        s.push(ParamSpec::uniform(&format!("{proj}.weight"), &[c, c], c));
    }
    s.push(ParamSpec::uniform("ssa.mlp1.weight", &[c, hidden], c));
    s.push(ParamSpec::uniform("ssa.mlp2.weight", &[hidden, c], hidden));
    s
}

fn grid_side(shape: &[usize]) -> Result<usize> {
    let &[_, _, l] = shape else {
        return Err(Error::shape("ssa", shape, &[0, 0, 0]));
    };
    square_side(l).ok_or_else(|| Error::Shape {
        op: "ssa",
        lhs: shape.to_vec(),
        rhs: vec![l],
    })
}

/// `B×L×C` tokens to a `B×C×P×P` grid.
fn tokens_to_grid<T: Real>(fw: &mut Forward<'_, T>, t: Var) -> Result<Var> {
    let seq = fw.swap_last(t)?;
    fw.to_grid(seq)
}

/// `B×C×P×P` grid to `B×L×C` tokens.
fn grid_to_tokens<T: Real>(fw: &mut Forward<'_, T>, g: Var) -> Result<Var> {
    let seq = fw.flatten_spatial(g)?;
    fw.swap_last(seq)
}

/// `F + Fla(DW(Res(F)))` on `B×C×L` features with square `L`.
pub fn cpe_forward<T: Real>(fw: &mut Forward<'_, T>, f: Var) -> Result<Var> {
    grid_side(fw.tape.shape(f))?;
    let grid = fw.to_grid(f)?;
    let d = fw.dwconv("ssa.cpe", G, grid)?;
    let d = fw.flatten_spatial(d)?;
    fw.tape.add(f, d)
}

/// Block output together with the gates `A` and `G` (both `B×L×C`).
pub struct SsaTrace {
    pub out: Var,
    pub gate_a: Var,
    pub gate_g: Var,
}

pub fn ssa_forward<T: Real>(fw: &mut Forward<'_, T>, f_plus: Var) -> Result<Var> {
    Ok(ssa_forward_traced(fw, f_plus)?.out)
}

pub fn ssa_forward_traced<T: Real>(fw: &mut Forward<'_, T>, f_plus: Var) -> Result<SsaTrace> {
    grid_side(fw.tape.shape(f_plus))?;
    let tokens = fw.swap_last(f_plus)?;

    // Refined spiking feature from the normalized input.
    let n1 = fw.layer_norm("ssa.ln1", tokens)?;
    let n1 = tokens_to_grid(fw, n1)?;
    let c1 = fw.conv("ssa.conv1", G, n1, 1, 0)?;
    let d1 = fw.dwconv("ssa.dw1", G, c1)?;
    let refined = fw.sn(d1);

    let q = fw.conv("ssa.conv_q", G, refined, 1, 0)?;
    let dq = fw.dwconv("ssa.dw_q", G, q)?;
    let q_local = fw.sn(dq);
    let q_tokens = grid_to_tokens(fw, q)?;
    let q_local = grid_to_tokens(fw, q_local)?;

    let (gate_a, gate_g) = match fw.gate_mode {
        GateMode::Learned => {
            let a = fw.dense("ssa.wa", G, tokens)?;
            let g = fw.dense("ssa.wb", G, q_tokens)?;
            (fw.sn(a), fw.sn(g))
        }
        GateMode::Saturated => {
            let ones = Tensor::full(fw.tape.shape(tokens), T::one());
            let a = fw.tape.constant(ones.clone());
            (a, fw.tape.constant(ones))
        }
    };

    let fused = fw.tape.mul(q_local, gate_g)?;
    let q2 = fw.layer_norm("ssa.ln2", fused)?;
    let s2 = fw.sn(q2);
    let modulated = fw.tape.mul(s2, gate_a)?;
    let pre = fw.tape.add(modulated, q2)?;
    let q3 = fw.dense("ssa.wc", G, pre)?;
    let q3 = fw.swap_last(q3)?;
    let f_pp = fw.tape.add(f_plus, q3)?;

    let grid = fw.to_grid(f_pp)?;
    let d = fw.dwconv("ssa.dw_out", G, grid)?;
    let d = fw.flatten_spatial(d)?;
    let f_tilde = fw.tape.add(f_pp, d)?;

    let t = fw.swap_last(f_tilde)?;
    let n3 = fw.layer_norm("ssa.ln3", t)?;
    let s3 = fw.sn(n3);
    let h = fw.dense("ssa.mlp1", G, s3)?;
    let h = fw.sn(h);
    let m = fw.dense("ssa.mlp2", G, h)?;
    let m = fw.swap_last(m)?;
    let out = fw.tape.add(f_tilde, m)?;
    Ok(SsaTrace { out, gate_a, gate_g })
}
