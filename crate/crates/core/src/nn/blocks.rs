//! Linear, layer-norm and feed-forward building blocks.

use super::param::{Ctx, Init, ParamId, ParamSet};
use crate::error::Result;
use crate::tensor::{Real, Val};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = params.add(&format!("{name}.w"), vec![in_dim, out_dim], Init::Xavier);
        let b = params.add(&format!("{name}.b"), vec![out_dim], Init::Zeros);
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Val) -> Result<Val> {
        let w = cx.p(self.w);
        let out = cx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bv = cx.p(b);
                cx.tape.add_row(out, bv)
            }
            None => Ok(out),
        }
    }
}

pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.add(&format!("{name}.gamma"), vec![dim], Init::Constant(1.0)),
            beta: params.add(&format!("{name}.beta"), vec![dim], Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Val) -> Result<Val> {
        let g = cx.p(self.gamma);
        let b = cx.p(self.beta);
        cx.tape.layer_norm(x, g, b, T::from_f64(LAYER_NORM_EPS))
    }
}

/// layernorm -> linear(d, hidden) -> gelu -> linear(hidden, d).
/// The residual add is the caller's job.
pub struct FfnBlock {
    norm: LayerNorm,
    lin1: Linear,
    lin2: Linear,
}

impl FfnBlock {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, dim: usize, hidden: usize) -> Self {
        FfnBlock {
            norm: LayerNorm::new(params, &format!("{name}.norm"), dim),
            lin1: Linear::new(params, &format!("{name}.lin1"), dim, hidden),
            lin2: Linear::new(params, &format!("{name}.lin2"), hidden, dim),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Val) -> Result<Val> {
        let normed = self.norm.forward(cx, x)?;
        let h = self.lin1.forward(cx, normed)?;
        let h = cx.tape.gelu(h);
        self.lin2.forward(cx, h)
    }
}

/// Post-norm residual sublayer: `LN(x + f(x))`.
pub fn residual_norm<T: Real>(
    cx: &mut Ctx<T>,
    norm: &LayerNorm,
    x: Val,
    fx: Val,
) -> Result<Val> {
    let sum = cx.tape.add(x, fx)?;
    norm.forward(cx, sum)
}
