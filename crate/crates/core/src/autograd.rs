//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node whose inputs have strictly smaller indices, so
//! walking the node list backwards is a reverse topological order. A tape is
//! single-owner; build one per sample and per thread.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex32;

use crate::activation::Activation;
use crate::conv::{conv2d, conv2d_backward, Padding};
use crate::error::{GleanError, Result};
use crate::fft::{self, HalfSpectrum};
use crate::tensor::Tensor;

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    },
    Act {
        x: Var,
        act: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Square(Var),
    Softplus(Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Mean(Var),
    MeanAbsDiff(Var, Var),
    SliceChannels {
        x: Var,
        lo: usize,
    },
    Concat(Vec<Var>),
    Rfft2Stack(Var),
    Irfft2Unstack(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive ops and their values.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Result of [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to any node; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.per_node[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients of all named parameters.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }

    /// Gradients of the named parameters whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable leaf. Names must be unique on a tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(GleanError::contract(format!("duplicate parameter `{name}`")));
        }
        let v = self.push(value, Op::Leaf);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// The node already registered under `name`, if any.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// A non-trainable leaf (inputs, targets, detached values).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(kernel), self.value(bias), stride, padding)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn act(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let y = self.value(x).map(|v| act.apply(v));
        self.push(y, Op::Act { x, act })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let y = self.value(x).scale(k);
        self.push(y, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square(x))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus);
        self.push(y, Op::Softplus(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let y = self.value(x).clamp(lo, hi);
        self.push(y, Op::Clamp { x, lo, hi })
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean() as f32;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// `mean |a - b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.ensure_same_shape(vb, "mean_abs_diff")?;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&p, &q)| (p - q).abs() as f64)
            .sum();
        let m = (s / va.numel() as f64) as f32;
        Ok(self.push(Tensor::scalar(m), Op::MeanAbsDiff(a, b)))
    }

    /// Channels `[lo, hi)` of a `[C, H, W]` node.
    pub fn slice_channels(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if lo >= hi || hi > c {
            return Err(GleanError::shape(format!("channel slice {lo}..{hi} of {c}")));
        }
        let plane = h * w;
        let data = self.value(x).data()[lo * plane..hi * plane].to_vec();
        let y = Tensor::new(vec![hi - lo, h, w], data)?;
        Ok(self.push(y, Op::SliceChannels { x, lo }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&values)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Per-channel `rfft2`, real parts in channels `[0, C)` and imaginary
    /// parts in `[C, 2C)`: `[C, H, W] -> [2C, H, W/2 + 1]`.
    pub fn rfft2_stack(&mut self, x: Var) -> Result<Var> {
        let y = rfft2_stack(self.value(x))?;
        Ok(self.push(y, Op::Rfft2Stack(x)))
    }

    /// Inverse of [`GradTape::rfft2_stack`]: `[2C, H, W/2 + 1] -> [C, H, W]`.
    pub fn irfft2_unstack(&mut self, x: Var, width_full: usize) -> Result<Var> {
        let y = irfft2_unstack(self.value(x), width_full)?;
        Ok(self.push(y, Op::Irfft2Unstack(x)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(GleanError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for (input, contribution) in self.node_vjp(node, &g)? {
                accumulate(&mut grads[input.0], contribution)?;
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            per_node: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn node_vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let cg = conv2d_backward(self.value(*x), self.value(*kernel), *stride, *padding, g)?;
                vec![(*x, cg.input), (*kernel, cg.kernel), (*bias, cg.bias)]
            }
            Op::Act { x, act } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for ((gi, &xi), &yi) in gx.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                    *gi *= act.derivative(xi, yi);
                }
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Scale(x, k) => vec![(*x, g.scale(*k))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Square(x) => vec![(*x, g.zip_map(self.value(*x), |gi, xi| 2.0 * xi * gi)?)],
            Op::Softplus(x) => vec![(
                *x,
                g.zip_map(self.value(*x), |gi, xi| gi * Activation::Sigmoid.apply(xi))?,
            )],
            Op::Clamp { x, lo, hi } => vec![(
                *x,
                g.zip_map(self.value(*x), |gi, xi| {
                    if xi >= *lo && xi <= *hi {
                        gi
                    } else {
                        0.0
                    }
                })?,
            )],
            Op::Mean(x) => {
                let xv = self.value(*x);
                let k = g.item()? / xv.numel() as f32;
                vec![(*x, Tensor::full(xv.shape(), k))]
            }
            Op::MeanAbsDiff(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = g.item()? / va.numel() as f32;
                let ga = va.zip_map(vb, |p, q| {
                    let d = p - q;
                    if d > 0.0 {
                        k
                    } else if d < 0.0 {
                        -k
                    } else {
                        0.0
                    }
                })?;
                let gb = ga.scale(-1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::SliceChannels { x, lo } => {
                let xv = self.value(*x);
                let (_, h, w) = xv.dims3()?;
                let plane = h * w;
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[lo * plane..lo * plane + g.numel()].copy_from_slice(g.data());
                vec![(*x, gx)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).numel();
                    out.push((p, Tensor::new(shape, g.data()[offset..offset + n].to_vec())?));
                    offset += n;
                }
                out
            }
            Op::Rfft2Stack(x) => {
                let (_, h, w) = self.value(*x).dims3()?;
                vec![(*x, rfft2_stack_adjoint(g, h, w)?)]
            }
            Op::Irfft2Unstack(x) => vec![(*x, irfft2_unstack_adjoint(g)?)],
        };
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&contribution),
        None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn split_complex(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (c2, h, wh) = x.dims3()?;
    if c2 % 2 != 0 {
        return Err(GleanError::shape(format!(
            "stacked spectrum needs an even channel count, got {c2}"
        )));
    }
    Ok((c2 / 2, h, wh))
}

fn spectrum_of(x: &Tensor, c: usize, channels: usize, h: usize, width_full: usize) -> Result<HalfSpectrum> {
    let re = x.channel(c);
    let im = x.channel(channels + c);
    let bins = re
        .iter()
        .zip(im)
        .map(|(&r, &i)| Complex32::new(r, i))
        .collect();
    HalfSpectrum::new(h, width_full, bins)
}

fn write_stacked(out: &mut [f32], s: &HalfSpectrum, c: usize, channels: usize) {
    let plane = s.bins().len();
    for (i, b) in s.bins().iter().enumerate() {
        out[c * plane + i] = b.re;
        out[(channels + c) * plane + i] = b.im;
    }
}

/// `[C, H, W] -> [2C, H, W/2 + 1]`.
pub fn rfft2_stack(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let wh = fft::half_width(w);
    let mut out = vec![0.0f32; 2 * c * h * wh];
    for ch in 0..c {
        let s = fft::rfft2_plane(x.channel(ch), h, w)?;
        write_stacked(&mut out, &s, ch, c);
    }
    Tensor::new(vec![2 * c, h, wh], out)
}

/// `[2C, H, W/2 + 1] -> [C, H, W]`.
pub fn irfft2_unstack(x: &Tensor, width_full: usize) -> Result<Tensor> {
    let (c, h, wh) = split_complex(x)?;
    if fft::half_width(width_full) != wh {
        return Err(GleanError::shape(format!(
            "stacked spectrum width {wh} does not match full width {width_full}"
        )));
    }
    let mut out = Vec::with_capacity(c * h * width_full);
    for ch in 0..c {
        let s = spectrum_of(x, ch, c, h, width_full)?;
        out.extend_from_slice(fft::irfft2(&s)?.data());
    }
    Tensor::new(vec![c, h, width_full], out)
}

fn rfft2_stack_adjoint(g: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, _, _) = split_complex(g)?;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let s = spectrum_of(g, ch, c, h, w)?;
        out.extend_from_slice(fft::rfft2_adjoint(&s)?.data());
    }
    Tensor::new(vec![c, h, w], out)
}

fn irfft2_unstack_adjoint(g: &Tensor) -> Result<Tensor> {
    let (c, h, w) = g.dims3()?;
    let wh = fft::half_width(w);
    let mut out = vec![0.0f32; 2 * c * h * wh];
    for ch in 0..c {
        let plane = Tensor::new(vec![h, w], g.channel(ch).to_vec())?;
        let s = fft::irfft2_adjoint(&plane)?;
        write_stacked(&mut out, &s, ch, c);
    }
    Tensor::new(vec![2 * c, h, wh], out)
}
