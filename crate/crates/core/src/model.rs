//! Generator (perturbed image -> predicted cloak), discriminator
//! (residual -> realness score), and cloak subtraction.
//!
//! Generator layout:
//!
//! ```text
//! stem   3x3 conv 3 -> C, activation
//! block  x + ffc_b(ffc_a(x))            (num_ffc_blocks times)
//! head   3x3 conv C -> 3, tanh, * output_scale
//! ```
//!
//! Discriminator: strided 3x3 convs with leaky ReLU between them, the last
//! layer producing a one-channel patch map that is averaged to one score.

use rand::Rng;

use crate::activation::Activation;
use crate::conv::Padding;
use crate::error::{GleanError, Result};
use crate::ffc::{ffc_forward, FfcConfig};
use crate::graph::{Eager, Graph};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const GEN_PREFIX: &str = "gen.";
pub const DISC_PREFIX: &str = "disc.";

/// Values may exceed [-1, 1] by this much before the generator refuses them.
const RANGE_SLACK: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub activation: Activation,
    pub output_scale: f32,
    /// One entry per residual FFC block; both layers of a block share it.
    pub blocks: Vec<FfcConfig>,
}

impl GeneratorConfig {
    /// 24 channels, four residual FFC blocks, cloak bounded by 0.25.
    pub fn reference() -> Self {
        Self::uniform(24, 4, 0.5, 0.5, 3, 0.25)
    }

    pub fn uniform(
        stem_channels: usize,
        num_ffc_blocks: usize,
        alpha_in: f32,
        alpha_out: f32,
        ffc_kernel: usize,
        output_scale: f32,
    ) -> Self {
        let block = FfcConfig {
            alpha_in,
            alpha_out,
            kernel_size: ffc_kernel,
            ..FfcConfig::reference(stem_channels)
        };
        GeneratorConfig {
            input_channels: 3,
            stem_channels,
            stem_kernel: 3,
            activation: Activation::LeakyRelu(0.2),
            output_scale,
            blocks: vec![block; num_ffc_blocks],
        }
    }

    pub fn num_ffc_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 3 {
            return Err(GleanError::config("generator input_channels must be 3"));
        }
        if self.stem_channels == 0 {
            return Err(GleanError::config("stem_channels must be positive"));
        }
        if self.stem_kernel.is_multiple_of(2) {
            return Err(GleanError::config("stem kernel must be odd"));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(GleanError::config(format!(
                "output_scale {} must be positive",
                self.output_scale
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_channels != self.stem_channels || b.out_channels != self.stem_channels {
                return Err(GleanError::config(format!(
                    "ffc block {i} must map {0} -> {0} channels",
                    self.stem_channels
                )));
            }
        }
        Ok(())
    }

    /// Full parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, k) = (self.stem_channels, self.stem_kernel);
        let mut out = vec![
            (format!("{GEN_PREFIX}stem.weight"), vec![c, self.input_channels, k, k]),
            (format!("{GEN_PREFIX}stem.bias"), vec![c]),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for layer in ["a", "b"] {
                for (name, shape) in b.param_shapes() {
                    out.push((format!("{GEN_PREFIX}block{i}.{layer}.{name}"), shape));
                }
            }
        }
        out.push((format!("{GEN_PREFIX}head.weight"), vec![self.input_channels, c, k, k]));
        out.push((format!("{GEN_PREFIX}head.bias"), vec![self.input_channels]));
        out
    }

    pub fn param_count(&self) -> usize {
        count(&self.param_shapes())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        init_from_shapes(&self.param_shapes(), rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    /// Output width of every conv layer; the last must be 1.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub strides: Vec<usize>,
    pub activation: Activation,
    /// Feed `[residual, perturbed]` instead of the residual alone.
    pub conditioned: bool,
}

impl DiscriminatorConfig {
    /// 3 -> 16 -> 32 -> 64 -> 1, 3x3, stride 2 everywhere.
    pub fn reference() -> Self {
        DiscriminatorConfig {
            input_channels: 3,
            channels: vec![16, 32, 64, 1],
            kernel_size: 3,
            strides: vec![2, 2, 2, 2],
            activation: Activation::LeakyRelu(0.2),
            conditioned: false,
        }
    }

    fn effective_input_channels(&self) -> usize {
        if self.conditioned {
            2 * self.input_channels
        } else {
            self.input_channels
        }
    }

    /// Spatial dims must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(GleanError::config(
                "discriminator channels and strides must be nonempty and the same length",
            ));
        }
        if self.channels.last() != Some(&1) {
            return Err(GleanError::config("last discriminator layer must have 1 channel"));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(GleanError::config("discriminator widths and strides must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(GleanError::config("discriminator kernel must be odd"));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut c_in = self.effective_input_channels();
        let mut out = Vec::new();
        for (i, &c_out) in self.channels.iter().enumerate() {
            out.push((format!("{DISC_PREFIX}conv{i}.weight"), vec![c_out, c_in, k, k]));
            out.push((format!("{DISC_PREFIX}conv{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        count(&self.param_shapes())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        init_from_shapes(&self.param_shapes(), rng)
    }
}

fn count(shapes: &[(String, Vec<usize>)]) -> usize {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

fn init_from_shapes<R: Rng + ?Sized>(
    shapes: &[(String, Vec<usize>)],
    rng: &mut R,
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let t = if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
            let bound = 1.0 / fan_in.sqrt();
            Tensor::uniform(shape, -bound, bound, rng)
        };
        store.insert(name.clone(), t)?;
    }
    Ok(store)
}

/// Configuration plus parameters for both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct GleanModel {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub params: ParamStore,
}

impl GleanModel {
    pub fn init<R: Rng + ?Sized>(
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        generator.validate()?;
        discriminator.validate()?;
        let mut params = generator.init_params(rng)?;
        params.extend(discriminator.init_params(rng)?)?;
        Ok(GleanModel {
            generator,
            discriminator,
            params,
        })
    }

    /// Checks that parameter names and shapes match both configs.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.params.check_layout(&self.generator.param_shapes(), GEN_PREFIX)?;
        self.params
            .check_layout(&self.discriminator.param_shapes(), DISC_PREFIX)?;
        if self.params.len()
            != self.generator.param_shapes().len() + self.discriminator.param_shapes().len()
        {
            return Err(GleanError::shape("unexpected extra parameters"));
        }
        Ok(())
    }

    /// Predicted cloak for one normalized image, without recording gradients.
    pub fn predict_cloak(&self, perturbed: &Tensor) -> Result<Tensor> {
        check_generator_input(perturbed, true)?;
        let mut g = Eager;
        let x = g.input(perturbed.clone());
        generator_forward(&mut g, &x, &self.generator, &self.params)
    }

    /// Cleaned image for one normalized input.
    pub fn clean_image(&self, perturbed: &Tensor) -> Result<Tensor> {
        clean(perturbed, &self.predict_cloak(perturbed)?)
    }

    pub fn score(&self, residual: &Tensor, perturbed: Option<&Tensor>) -> Result<f32> {
        let mut g = Eager;
        let r = g.input(residual.clone());
        let cond = perturbed.map(|p| g.input(p.clone()));
        let s = discriminator_forward(&mut g, &r, cond.as_ref(), &self.discriminator, &self.params)?;
        s.item()
    }

    /// Sets the generator head to zero so the predicted cloak is exactly zero.
    pub fn zero_generator_head(&mut self) -> Result<()> {
        for name in ["head.weight", "head.bias"] {
            self.params
                .get_mut(&format!("{GEN_PREFIX}{name}"))?
                .data_mut()
                .fill(0.0);
        }
        Ok(())
    }
}

/// Shape and range preconditions of the generator input.
pub fn check_generator_input(x: &Tensor, check_range: bool) -> Result<()> {
    let (c, h, w) = x.dims3()?;
    if c != 3 {
        return Err(GleanError::shape(format!("generator expects 3 channels, got {c}")));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(GleanError::shape(format!(
            "image is {w}x{h}; both sides must be multiples of 8 (pad or crop first)"
        )));
    }
    if check_range && x.data().iter().any(|v| !(v.abs() <= 1.0 + RANGE_SLACK)) {
        return Err(GleanError::contract(
            "generator input must be normalized to [-1, 1]",
        ));
    }
    Ok(())
}

/// Predicted cloak, bounded by `output_scale`, same shape as the input.
pub fn generator_forward<G: Graph>(
    g: &mut G,
    x: &G::V,
    cfg: &GeneratorConfig,
    params: &ParamStore,
) -> Result<G::V> {
    check_generator_input(g.value(x), false)?;
    let w = g.param(params, &format!("{GEN_PREFIX}stem.weight"))?;
    let b = g.param(params, &format!("{GEN_PREFIX}stem.bias"))?;
    let h = g.conv2d(x, &w, &b, 1, Padding::Same)?;
    let mut h = g.act(&h, cfg.activation);

    for (i, block) in cfg.blocks.iter().enumerate() {
        let a = ffc_forward(g, &h, block, params, &format!("{GEN_PREFIX}block{i}.a."))?;
        let y = ffc_forward(g, &a, block, params, &format!("{GEN_PREFIX}block{i}.b."))?;
        h = g.add(&h, &y)?;
    }

    let w = g.param(params, &format!("{GEN_PREFIX}head.weight"))?;
    let b = g.param(params, &format!("{GEN_PREFIX}head.bias"))?;
    let out = g.conv2d(&h, &w, &b, 1, Padding::Same)?;
    let out = g.act(&out, Activation::Tanh);
    Ok(g.scale(&out, cfg.output_scale))
}

/// Scalar realness score of a residual (optionally conditioned on the
/// perturbed image). Pre-activation; the loss interprets it.
pub fn discriminator_forward<G: Graph>(
    g: &mut G,
    residual: &G::V,
    perturbed: Option<&G::V>,
    cfg: &DiscriminatorConfig,
    params: &ParamStore,
) -> Result<G::V> {
    let (c, h, w) = g.value(residual).dims3()?;
    if c != cfg.input_channels {
        return Err(GleanError::shape(format!(
            "discriminator expects {} channels, got {c}",
            cfg.input_channels
        )));
    }
    let m = cfg.required_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(GleanError::shape(format!(
            "discriminator input {h}x{w} must be a multiple of {m}"
        )));
    }
    let mut x = match (cfg.conditioned, perturbed) {
        (false, _) => residual.clone(),
        (true, Some(p)) => {
            g.value(p).ensure_same_shape(g.value(residual), "conditioning image")?;
            g.concat_channels(&[residual.clone(), p.clone()])?
        }
        (true, None) => {
            return Err(GleanError::contract(
                "conditioned discriminator needs the perturbed image",
            ))
        }
    };
    let last = cfg.channels.len() - 1;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let wt = g.param(params, &format!("{DISC_PREFIX}conv{i}.weight"))?;
        let b = g.param(params, &format!("{DISC_PREFIX}conv{i}.bias"))?;
        x = g.conv2d(&x, &wt, &b, stride, Padding::Same)?;
        if i != last {
            x = g.act(&x, cfg.activation);
        }
    }
    Ok(g.mean(&x))
}

/// `clamp(perturbed - cloak, -1, 1)`.
pub fn clean(perturbed: &Tensor, cloak: &Tensor) -> Result<Tensor> {
    perturbed.ensure_same_shape(cloak, "clean")?;
    perturbed.zip_map(cloak, |g, c| (g - c).clamp(-1.0, 1.0))
}
