//! One model definition, two execution modes.
//!
//! Layers are written against [`Graph`]. [`Eager`] evaluates directly on
//! tensors and keeps nothing alive, for inference at full resolution.
//! [`GradTape`] records every op for the backward pass.

use crate::activation::Activation;
use crate::autograd::{self, GradTape, Var};
use crate::conv::{conv2d, Padding};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub trait Graph {
    type V: Clone;

    /// Looks up a named parameter. Repeated lookups of one name share a node.
    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Self::V>;
    fn input(&mut self, value: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn conv2d(
        &mut self,
        x: &Self::V,
        kernel: &Self::V,
        bias: &Self::V,
        stride: usize,
        padding: Padding,
    ) -> Result<Self::V>;
    fn act(&mut self, x: &Self::V, act: Activation) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, k: f32) -> Self::V;
    fn slice_channels(&mut self, x: &Self::V, lo: usize, hi: usize) -> Result<Self::V>;
    fn concat_channels(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn rfft2_stack(&mut self, x: &Self::V) -> Result<Self::V>;
    fn irfft2_unstack(&mut self, x: &Self::V, width_full: usize) -> Result<Self::V>;
    fn mean(&mut self, x: &Self::V) -> Self::V;
}

/// Direct evaluation without recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type V = Tensor;

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Tensor> {
        store.get(name).cloned()
    }

    fn input(&mut self, value: Tensor) -> Tensor {
        value
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn conv2d(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor> {
        conv2d(x, kernel, bias, stride, padding)
    }

    fn act(&mut self, x: &Tensor, act: Activation) -> Tensor {
        if act == Activation::Identity {
            return x.clone();
        }
        x.map(|v| act.apply(v))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn scale(&mut self, x: &Tensor, k: f32) -> Tensor {
        x.scale(k)
    }

    fn slice_channels(&mut self, x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        if lo >= hi || hi > c {
            return Err(crate::GleanError::shape(format!("channel slice {lo}..{hi} of {c}")));
        }
        Tensor::new(vec![hi - lo, h, w], x.data()[lo * h * w..hi * h * w].to_vec())
    }

    fn concat_channels(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat_channels(&refs)
    }

    fn rfft2_stack(&mut self, x: &Tensor) -> Result<Tensor> {
        autograd::rfft2_stack(x)
    }

    fn irfft2_unstack(&mut self, x: &Tensor, width_full: usize) -> Result<Tensor> {
        autograd::irfft2_unstack(x, width_full)
    }

    fn mean(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.mean() as f32)
    }
}

impl Graph for GradTape {
    type V = Var;

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.param_var(name) {
            return Ok(v);
        }
        GradTape::param(self, name, store.get(name)?.clone())
    }

    fn input(&mut self, value: Tensor) -> Var {
        self.constant(value)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        GradTape::value(self, *v)
    }

    fn conv2d(&mut self, x: &Var, kernel: &Var, bias: &Var, stride: usize, padding: Padding) -> Result<Var> {
        GradTape::conv2d(self, *x, *kernel, *bias, stride, padding)
    }

    fn act(&mut self, x: &Var, act: Activation) -> Var {
        GradTape::act(self, *x, act)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        GradTape::add(self, *a, *b)
    }

    fn scale(&mut self, x: &Var, k: f32) -> Var {
        GradTape::scale(self, *x, k)
    }

    fn slice_channels(&mut self, x: &Var, lo: usize, hi: usize) -> Result<Var> {
        GradTape::slice_channels(self, *x, lo, hi)
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        GradTape::concat_channels(self, parts)
    }

    fn rfft2_stack(&mut self, x: &Var) -> Result<Var> {
        GradTape::rfft2_stack(self, *x)
    }

    fn irfft2_unstack(&mut self, x: &Var, width_full: usize) -> Result<Var> {
        GradTape::irfft2_unstack(self, *x, width_full)
    }

    fn mean(&mut self, x: &Var) -> Var {
        GradTape::mean(self, *x)
    }
}
