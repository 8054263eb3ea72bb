//! Parameterised building blocks: each holds [`ParamId`]s into a
//! [`ParamStore`] and records its forward pass on a [`Tape`].

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Same-padded conv with He-normal weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::randn(&[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
        );
        let bias = bias.then(|| store.register(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self {
            weight,
            bias,
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        x.conv2d(w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.group_norm(
            self.groups,
            tape.param(store, self.gamma),
            tape.param(store, self.beta),
            GN_EPS,
        )
    }
}

/// Multi-head self-attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub heads: usize,
    pub dim: usize,
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
}

impl Mhsa {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {dim} not divisible by {heads} heads"
            )));
        }
        let std = (1.0 / dim as f64).sqrt();
        let mut proj = |p: &str| {
            (
                store.register(format!("{name}.{p}.weight"), Tensor::randn(&[dim, dim], std, rng)),
                store.register(format!("{name}.{p}.bias"), Tensor::zeros(&[dim])),
            )
        };
        Ok(Self {
            heads,
            dim,
            q: proj("q"),
            k: proj("k"),
            v: proj("v"),
            o: proj("o"),
        })
    }

    pub fn output_projection(&self) -> (ParamId, ParamId) {
        self.o
    }

    pub fn value_projection(&self) -> (ParamId, ParamId) {
        self.v
    }

    /// Attends within each sequence of a `[B×L×D]` (or `[L×D]`) input.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let x3 = match shape.len() {
            2 => x.reshape(&[1, shape[0], shape[1]])?,
            3 => x,
            _ => return Err(Error::dim("mhsa", &shape, &[self.dim])),
        };
        if *shape.last().unwrap() != self.dim {
            return Err(Error::dim("mhsa", &shape, &[self.dim]));
        }
        let project = |(w, b): (ParamId, ParamId), input: Var<'t>| {
            input.linear(tape.param(store, w), Some(tape.param(store, b)))
        };
        let q = project(self.q, x3)?;
        let k = project(self.k, x3)?;
        let v = project(self.v, x3)?;
        let attended = q.attention(k, v, self.heads)?;
        project(self.o, attended)?.reshape(&shape)
    }
}
