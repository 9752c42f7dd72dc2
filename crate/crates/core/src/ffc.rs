//! Fast Fourier Convolution.
//!
//! Channels are split into a local block (first `C - C_g`) and a global block
//! (last `C_g`). Four paths mix them:
//!
//! ```text
//! out_local  = act(conv_ll(x_local) + conv_gl(x_global))
//! out_global = act(conv_lg(x_local) + spectral(x_global))
//! ```
//!
//! where `spectral` is rfft2 per channel, real/imaginary stacking, a 1x1
//! convolution, the activation, and irfft2 back to the spatial grid.

use rand::Rng;

use crate::activation::Activation;
use crate::conv::Padding;
use crate::error::{GleanError, Result};
use crate::graph::{Eager, Graph};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfcConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub alpha_in: f32,
    pub alpha_out: f32,
    pub kernel_size: usize,
    pub activation: Activation,
}

impl FfcConfig {
    /// Square block with the reference split (0.5 / 0.5, 3x3, leaky ReLU 0.2).
    pub fn reference(channels: usize) -> Self {
        FfcConfig {
            in_channels: channels,
            out_channels: channels,
            alpha_in: 0.5,
            alpha_out: 0.5,
            kernel_size: 3,
            activation: Activation::LeakyRelu(0.2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(GleanError::config("ffc channel counts must be positive"));
        }
        for (name, a) in [("alpha_in", self.alpha_in), ("alpha_out", self.alpha_out)] {
            if !(0.0..1.0).contains(&a) {
                return Err(GleanError::config(format!("ffc {name}={a} outside [0, 1)")));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(GleanError::config(format!(
                "ffc kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// `(local, global)` input channel counts.
    pub fn input_split(&self) -> (usize, usize) {
        let g = global_channels(self.in_channels, self.alpha_in);
        (self.in_channels - g, g)
    }

    /// `(local, global)` output channel counts.
    pub fn output_split(&self) -> (usize, usize) {
        let g = global_channels(self.out_channels, self.alpha_out);
        (self.out_channels - g, g)
    }

    /// Names (relative to the block prefix) and shapes of every parameter.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (in_l, in_g) = self.input_split();
        let (out_l, out_g) = self.output_split();
        let k = self.kernel_size;
        let mut shapes = Vec::new();
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            if o > 0 && i > 0 {
                shapes.push((format!("{name}.weight"), vec![o, i, k, k]));
                shapes.push((format!("{name}.bias"), vec![o]));
            }
        };
        conv("ll", out_l, in_l, k);
        conv("gl", out_l, in_g, k);
        conv("lg", out_g, in_l, k);
        conv("spectral", 2 * out_g, 2 * in_g, 1);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Uniform `±1/sqrt(fan_in)` weights and zero biases under `prefix`.
    pub fn init_params<R: Rng + ?Sized>(&self, prefix: &str, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let t = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                let bound = 1.0 / fan_in.sqrt();
                Tensor::uniform(&shape, -bound, bound, rng)
            };
            store.insert(format!("{prefix}{name}"), t)?;
        }
        Ok(store)
    }
}

/// Global share of `channels`: `round(alpha * channels)` with exact halves
/// going to the local side, clamped to `[0, channels - 1]`.
pub fn global_channels(channels: usize, alpha: f32) -> usize {
    let x = alpha as f64 * channels as f64;
    let g = if (x - x.floor() - 0.5).abs() < 1e-9 {
        x.floor()
    } else {
        x.round()
    };
    (g.max(0.0) as usize).min(channels.saturating_sub(1))
}

fn conv_path<G: Graph>(
    g: &mut G,
    x: &G::V,
    params: &ParamStore,
    prefix: &str,
) -> Result<G::V> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = g.param(params, &format!("{prefix}.bias"))?;
    g.conv2d(x, &w, &b, 1, Padding::Same)
}

/// Global-to-global path. `prefix` names the block; the 1x1 convolution
/// lives at `{prefix}spectral.*`.
pub fn spectral_transform<G: Graph>(
    g: &mut G,
    x_global: &G::V,
    params: &ParamStore,
    prefix: &str,
    act: Activation,
) -> Result<G::V> {
    let (c, _, w) = g.value(x_global).dims3()?;
    if c == 0 {
        return Err(GleanError::contract("spectral transform on an empty global branch"));
    }
    let stacked = g.rfft2_stack(x_global)?;
    let mixed = conv_path(g, &stacked, params, &format!("{prefix}spectral"))?;
    let mixed = g.act(&mixed, act);
    g.irfft2_unstack(&mixed, w)
}

fn sum_paths<G: Graph>(g: &mut G, a: Option<G::V>, b: Option<G::V>) -> Result<Option<G::V>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(g.add(&a, &b)?),
        (a, b) => a.or(b),
    })
}

/// One FFC layer on `[C_in, H, W]`, resolution preserving.
pub fn ffc_forward<G: Graph>(
    g: &mut G,
    x: &G::V,
    cfg: &FfcConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<G::V> {
    let (c, _, _) = g.value(x).dims3()?;
    if c != cfg.in_channels {
        return Err(GleanError::shape(format!(
            "ffc expects {} input channels, got {c}",
            cfg.in_channels
        )));
    }
    let (in_l, in_g) = cfg.input_split();
    let (out_l, out_g) = cfg.output_split();

    let x_local = g.slice_channels(x, 0, in_l)?;
    let x_global = if in_g > 0 {
        Some(g.slice_channels(x, in_l, c)?)
    } else {
        None
    };

    let ll = Some(conv_path(g, &x_local, params, &format!("{prefix}ll"))?);
    let gl = match &x_global {
        Some(xg) => Some(conv_path(g, xg, params, &format!("{prefix}gl"))?),
        None => None,
    };
    let local = sum_paths(g, ll, gl)?.expect("local branch is never empty");
    let local = g.act(&local, cfg.activation);
    if out_g == 0 {
        debug_assert_eq!(out_l, cfg.out_channels);
        return Ok(local);
    }

    let lg = Some(conv_path(g, &x_local, params, &format!("{prefix}lg"))?);
    let gg = match &x_global {
        Some(xg) => Some(spectral_transform(g, xg, params, prefix, cfg.activation)?),
        None => None,
    };
    let global = sum_paths(g, lg, gg)?.expect("lg path exists when out_g > 0");
    let global = g.act(&global, cfg.activation);
    g.concat_channels(&[local, global])
}

/// Eager convenience wrapper around [`ffc_forward`].
pub fn ffc_apply(x: &Tensor, cfg: &FfcConfig, params: &ParamStore, prefix: &str) -> Result<Tensor> {
    ffc_forward(&mut Eager, x, cfg, params, prefix)
}
