//! Attention, feed-forward, normalization and embedding building blocks.

mod attention;
mod blocks;
mod param;
mod posembed;

pub use attention::{mean_head_weights, AttnWeights, KvProj, MultiHeadAttention};
pub use blocks::{residual_norm, FfnBlock, LayerNorm, Linear, LAYER_NORM_EPS};
pub use param::{Ctx, GradBuffer, Init, ParamEntry, ParamId, ParamSet};
pub use posembed::{entangle, sinusoidal_2d, sinusoidal_table, PosEmbed};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Val};

/// Standard binary cross-entropy on logits, averaged over entries.
/// Computed as `mean(softplus(z) - z * y)`, which is the stable form of
/// `-mean(y ln p + (1 - y) ln(1 - p))` with `p = sigmoid(z)`.
pub fn bce_with_logits_mean<T: Real>(
    tape: &mut Tape<T>,
    logits: Val,
    targets: &[f64],
) -> Result<Val> {
    let shape = tape.shape(logits).to_vec();
    let numel: usize = shape.iter().product();
    if targets.len() != numel {
        return Err(Error::contract(format!(
            "bce: {} logits vs {} targets",
            numel,
            targets.len()
        )));
    }
    let y = tape.constant(targets.iter().map(|&v| T::from_f64(v)).collect(), shape)?;
    let sp = tape.softplus(logits);
    let zy = tape.mul(logits, y)?;
    let diff = tape.sub(sp, zy)?;
    Ok(tape.mean_all(diff))
}

/// Gradient-checks a module built over a [`ParamSet`]: every parameter
/// plus any extra inputs become finite-difference leaves, and
/// `build_loss` sees them through a normal [`Ctx`].
pub fn grad_check_params<T: Real>(
    params: &ParamSet<T>,
    extra: &[(Vec<T>, Vec<usize>)],
    step: f64,
    tolerance: f64,
    build_loss: impl Fn(&mut Ctx<T>, &[Val]) -> Result<Val>,
) -> Result<crate::tensor::GradReport> {
    let mut leaves: Vec<(Vec<T>, Vec<usize>)> = params
        .iter()
        .map(|(_, e)| (e.data.clone(), e.shape.clone()))
        .collect();
    let n_params = leaves.len();
    leaves.extend_from_slice(extra);
    crate::tensor::grad_check(
        |tape, vals| {
            let bound: Vec<Option<Val>> = vals[..n_params].iter().map(|&v| Some(v)).collect();
            let mut cx = Ctx::from_parts(params, std::mem::take(tape), bound);
            let result = build_loss(&mut cx, &vals[n_params..]);
            *tape = cx.into_tape();
            result
        },
        &leaves,
        step,
        tolerance,
    )
}

#[cfg(test)]
mod tests;
