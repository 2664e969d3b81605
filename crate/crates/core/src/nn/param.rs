//! Parameter storage and the per-pass binding context.
//!
//! Parameters live outside any tape. A forward pass opens a [`Ctx`],
//! which lazily copies each referenced parameter onto the tape as a
//! tracked leaf. Initialization is keyed by parameter name, so a
//! parameter gets the same initial values for a given seed no matter
//! which model variant instantiates it.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Val};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Uniform(f64),
    /// Xavier/Glorot uniform for a `[fan_in, fan_out]` weight.
    Xavier,
    Constant(f64),
}

#[derive(Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    seed: u64,
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl<T: Real> ParamSet<T> {
    pub fn new(seed: u64) -> Self {
        ParamSet {
            entries: Vec::new(),
            seed,
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamId {
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Constant(c) => vec![T::from_f64(c); numel],
            Init::Uniform(a) => (0..numel)
                .map(|_| T::from_f64(rng.gen_range(-a..a)))
                .collect(),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [i, o] => (*i, *o),
                    _ => (numel, numel),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel)
                    .map(|_| T::from_f64(rng.gen_range(-a..a)))
                    .collect()
            }
        };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            data,
            shape,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Overwrites values by parameter name; shapes must agree.
    pub fn load_values(&mut self, values: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, data) in values {
            let entry = self
                .entries
                .iter_mut()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
            if entry.data.len() != data.len() {
                return Err(Error::contract(format!(
                    "parameter {name} has {} values, checkpoint provides {}",
                    entry.data.len(),
                    data.len()
                )));
            }
            entry.data = data.iter().map(|&v| T::from_f64(v)).collect();
        }
        Ok(())
    }
}

/// One forward/backward pass: a tape plus the parameter bindings made on it.
pub struct Ctx<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Val>>,
}

impl<'p, T: Real> Ctx<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Context over an existing tape with bindings already chosen, used by
    /// the gradient-check harness to substitute its own leaves.
    pub fn from_parts(params: &'p ParamSet<T>, tape: Tape<T>, bound: Vec<Option<Val>>) -> Self {
        assert_eq!(bound.len(), params.len());
        Ctx { tape, params, bound }
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Binds a parameter onto the tape (memoized per pass).
    pub fn p(&mut self, id: ParamId) -> Val {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.params.entry(id);
        let v = self
            .tape
            .leaf(entry.data.clone(), entry.shape.clone())
            .expect("parameter shapes are validated at construction");
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter, aligned with `ParamSet` ids.
    pub fn take_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|v| self.tape.grad(v).map(<[T]>::to_vec)))
            .collect()
    }
}

/// Gradient accumulator aligned with a `ParamSet`.
pub struct GradBuffer<T> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        GradBuffer {
            grads: params
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.data.len()])
                .collect(),
        }
    }

    pub fn accumulate(&mut self, pass: &[Option<Vec<T>>], scale: T) {
        for (acc, g) in self.grads.iter_mut().zip(pass) {
            if let Some(g) = g {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += *v * scale;
                }
            }
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
