//! Position embeddings and the content/position entangling rule.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Val};

/// A position embedding as seen by one forward pass: either a table of
/// values on the tape (fixed sinusoidal constants or learned parameters)
/// or the null embedding, which behaves as exact zeros.
#[derive(Clone, Copy)]
pub enum PosEmbed {
    Null,
    Table(Val),
}

/// Combines content with its position embedding. Addition realizes the
/// entangling rule; the null embedding returns the content node itself,
/// so the identity is bit-exact.
pub fn entangle<T: Real>(tape: &mut Tape<T>, content: Val, pos: &PosEmbed) -> Result<Val> {
    match pos {
        PosEmbed::Null => Ok(content),
        PosEmbed::Table(p) => tape.add(content, *p),
    }
}

/// Fixed 2-d sinusoidal embedding over an `h x w` grid, flattened
/// row-major to match feature-token order. The first `d/2` channels
/// encode the row coordinate, the rest the column; each coordinate uses
/// `d/4` sin/cos frequency pairs.
pub fn sinusoidal_2d(h: usize, w: usize, d: usize) -> Result<Vec<f64>> {
    if d % 4 != 0 {
        return Err(Error::config(format!(
            "2-d sinusoidal embedding needs dim divisible by 4, got {d}"
        )));
    }
    let quarter = d / 4;
    let half = d / 2;
    let temperature: f64 = 10000.0;
    let tau = std::f64::consts::TAU;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let y_norm = tau * y as f64 / h as f64;
            let x_norm = tau * x as f64 / w as f64;
            for f in 0..quarter {
                let freq = temperature.powf(f as f64 / quarter as f64);
                out[p * d + 2 * f] = (y_norm / freq).sin();
                out[p * d + 2 * f + 1] = (y_norm / freq).cos();
                out[p * d + half + 2 * f] = (x_norm / freq).sin();
                out[p * d + half + 2 * f + 1] = (x_norm / freq).cos();
            }
        }
    }
    Ok(out)
}

/// Places the sinusoidal table on a tape as an untracked constant.
pub fn sinusoidal_table<T: Real>(
    tape: &mut Tape<T>,
    h: usize,
    w: usize,
    d: usize,
) -> Result<Val> {
    let raw = sinusoidal_2d(h, w, d)?;
    let data: Vec<T> = raw.into_iter().map(T::from_f64).collect();
    tape.constant(data, vec![h * w, d])
}
