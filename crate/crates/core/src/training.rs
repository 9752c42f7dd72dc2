//! GAN losses, Adam, learning-rate decay, and the training loop.
//!
//! Each step updates the discriminator on the real residual and the
//! detached generated cloak, then updates the generator against the
//! freshly updated discriminator with an added L1 term.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{softplus, GradTape, Var};
use crate::dataset::SamplePair;
use crate::error::{GleanError, Result};
use crate::graph::Graph;
use crate::metrics::evaluate;
use crate::model::{discriminator_forward, generator_forward, GleanModel, DISC_PREFIX, GEN_PREFIX};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adversarial objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanLoss {
    LeastSquares,
    Bce,
}

impl fmt::Display for GanLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GanLoss::LeastSquares => "lsgan",
            GanLoss::Bce => "bce",
        })
    }
}

impl FromStr for GanLoss {
    type Err = GleanError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsgan" => Ok(GanLoss::LeastSquares),
            "bce" => Ok(GanLoss::Bce),
            other => Err(GleanError::config(format!("unknown loss `{other}` (lsgan|bce)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub lambda_l1: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: GanLoss,
    /// Elementwise gradient bound; `None` disables clipping.
    pub grad_clip: Option<f32>,
    /// Checkpoint period in epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_l1: 100.0,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            loss: GanLoss::LeastSquares,
            grad_clip: None,
            checkpoint_every: 10,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("lambda_l1", self.lambda_l1),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GleanError::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(GleanError::config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(GleanError::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(GleanError::config("batch_size must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(GleanError::config("checkpoint_every must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(GleanError::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Base rate for the first `floor(epochs / 2)` epochs, then linear decay
/// that would reach zero at `epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainingConfig) -> f32 {
    let half = cfg.epochs / 2;
    if epoch < half {
        cfg.learning_rate
    } else {
        let left = cfg.epochs.saturating_sub(epoch) as f64;
        (cfg.learning_rate as f64 * left / (cfg.epochs - half) as f64) as f32
    }
}

// ---------------------------------------------------------------------------
// losses

/// Scalar generator objective on plain numbers.
pub fn generator_loss(loss: GanLoss, d_fake: f32, l1: f32, lambda: f32) -> f32 {
    adversarial_g(loss, d_fake) + lambda * l1
}

/// Scalar discriminator objective on plain numbers.
pub fn discriminator_loss(loss: GanLoss, d_real: f32, d_fake: f32) -> f32 {
    match loss {
        GanLoss::LeastSquares => 0.5 * ((d_real - 1.0).powi(2) + d_fake.powi(2)),
        GanLoss::Bce => softplus(-d_real) + softplus(d_fake),
    }
}

fn adversarial_g(loss: GanLoss, d_fake: f32) -> f32 {
    match loss {
        GanLoss::LeastSquares => (d_fake - 1.0).powi(2),
        GanLoss::Bce => softplus(-d_fake),
    }
}

fn tape_adversarial_g(t: &mut GradTape, loss: GanLoss, d_fake: Var) -> Var {
    match loss {
        GanLoss::LeastSquares => {
            let s = t.add_scalar(d_fake, -1.0);
            t.square(s)
        }
        GanLoss::Bce => {
            let n = t.scale(d_fake, -1.0);
            t.softplus(n)
        }
    }
}

fn tape_discriminator_loss(t: &mut GradTape, loss: GanLoss, real: Var, fake: Var) -> Result<Var> {
    match loss {
        GanLoss::LeastSquares => {
            let r = t.add_scalar(real, -1.0);
            let r = t.square(r);
            let f = t.square(fake);
            let s = t.add(r, f)?;
            Ok(t.scale(s, 0.5))
        }
        GanLoss::Bce => {
            let r = t.scale(real, -1.0);
            let r = t.softplus(r);
            let f = t.softplus(fake);
            t.add(r, f)
        }
    }
}

// ---------------------------------------------------------------------------
// Adam

/// First and second moments for one group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimState {
    /// Zero moments for every parameter of `params` under `prefix`.
    pub fn new(params: &ParamStore, prefix: &str) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        OptimState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn validate(&self, params: &ParamStore) -> Result<()> {
        for (name, m) in &self.m {
            let p = params.get(name)?;
            let v = self
                .v
                .get(name)
                .ok_or_else(|| GleanError::shape(format!("missing second moment for `{name}`")))?;
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(GleanError::shape(format!("optimizer moments for `{name}` do not match")));
            }
        }
        if self.m.len() != self.v.len() {
            return Err(GleanError::shape("optimizer moment sets differ"));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Every tracked parameter moves (zero
/// gradient if absent from `grads`); a non-finite gradient aborts before
/// anything is modified.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f32,
    cfg: &TrainingConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(GleanError::NonFinite(format!("gradient of `{name}`")));
        }
        if !state.m.contains_key(name) {
            return Err(GleanError::contract(format!("`{name}` is not tracked by this optimizer")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - (b1 as f64).powi(t);
    let bc2 = 1.0 - (b2 as f64).powi(t);
    let clip = cfg.grad_clip;
    for (name, m) in state.m.iter_mut() {
        let v = state.v.get_mut(name).expect("moment sets match");
        let p = params.get_mut(name)?;
        let g = grads.get(name);
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let mut gi = g.map_or(0.0, |g| g.data()[i]);
            if let Some(c) = clip {
                gi = gi.clamp(-c, c);
            }
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi as f64 / bc1;
            let v_hat = vi as f64 / bc2;
            pd[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + cfg.adam_eps as f64)) as f32;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// steps

/// Model plus optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: GleanModel,
    pub gen_opt: OptimState,
    pub disc_opt: OptimState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed train steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: GleanModel) -> Self {
        let gen_opt = OptimState::new(&model.params, GEN_PREFIX);
        let disc_opt = OptimState::new(&model.params, DISC_PREFIX);
        TrainState {
            model,
            gen_opt,
            disc_opt,
            epoch: 0,
            step: 0,
        }
    }
}

/// Batch means of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub g_loss: f32,
    pub d_loss: f32,
    pub l1: f32,
}

struct GenPass {
    tape: GradTape,
    fake: Var,
}

fn gen_pass(model: &GleanModel, pair: &SamplePair) -> Result<GenPass> {
    let mut tape = GradTape::new();
    let x = tape.input(pair.perturbed.clone());
    let fake = generator_forward(&mut tape, &x, &model.generator, &model.params)?;
    Ok(GenPass { tape, fake })
}

/// Discriminator loss and its gradients for one sample.
fn disc_grads(
    model: &GleanModel,
    pair: &SamplePair,
    fake: &Tensor,
    loss: GanLoss,
) -> Result<(f32, BTreeMap<String, Tensor>)> {
    let mut t = GradTape::new();
    let cond = t.input(pair.perturbed.clone());
    let cond = model.discriminator.conditioned.then_some(cond);
    let real = t.input(pair.residual.clone());
    let fake = t.input(fake.clone());
    let d_real = discriminator_forward(&mut t, &real, cond.as_ref(), &model.discriminator, &model.params)?;
    let d_fake = discriminator_forward(&mut t, &fake, cond.as_ref(), &model.discriminator, &model.params)?;
    let l = tape_discriminator_loss(&mut t, loss, d_real, d_fake)?;
    let value = t.value(l).item()?;
    Ok((value, t.backward(l)?.params_with_prefix(DISC_PREFIX)))
}

/// Extends a generator pass with the discriminator and the L1 term.
fn gen_grads(
    mut pass: GenPass,
    model: &GleanModel,
    pair: &SamplePair,
    cfg: &TrainingConfig,
) -> Result<(f32, f32, BTreeMap<String, Tensor>)> {
    let t = &mut pass.tape;
    let cond = t.input(pair.perturbed.clone());
    let cond = model.discriminator.conditioned.then_some(cond);
    let d_fake = discriminator_forward(t, &pass.fake, cond.as_ref(), &model.discriminator, &model.params)?;
    let adv = tape_adversarial_g(t, cfg.loss, d_fake);
    let target = t.input(pair.residual.clone());
    let l1 = t.mean_abs_diff(pass.fake, target)?;
    let weighted = t.scale(l1, cfg.lambda_l1);
    let total = t.add(adv, weighted)?;
    let (lv, l1v) = (t.value(total).item()?, t.value(l1).item()?);
    Ok((lv, l1v, t.backward(total)?.params_with_prefix(GEN_PREFIX)))
}

/// Sums per-sample gradients in batch order and divides by the batch size.
fn average(grads: Vec<BTreeMap<String, Tensor>>) -> Result<BTreeMap<String, Tensor>> {
    let n = grads.len() as f32;
    let mut iter = grads.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for g in iter {
        for (name, t) in g {
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(&t)?,
                None => {
                    acc.insert(name, t);
                }
            }
        }
    }
    for t in acc.values_mut() {
        *t = t.scale(1.0 / n);
    }
    Ok(acc)
}

fn check_loss(value: f32, what: &str, step: u64) -> Result<()> {
    if !value.is_finite() {
        return Err(GleanError::NonFinite(format!("{what} at step {step} is {value}")));
    }
    if value < 0.0 {
        return Err(GleanError::contract(format!("{what} at step {step} is negative ({value})")));
    }
    Ok(())
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    state: &mut TrainState,
    batch: &[SamplePair],
    lr: f32,
    cfg: &TrainingConfig,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(GleanError::contract("empty batch"));
    }
    let step = state.step + 1;
    let n = batch.len() as f32;

    let passes: Vec<GenPass> = batch
        .par_iter()
        .map(|p| gen_pass(&state.model, p))
        .collect::<Result<_>>()?;

    let disc: Vec<(f32, BTreeMap<String, Tensor>)> = batch
        .par_iter()
        .zip(passes.par_iter())
        .map(|(p, pass)| disc_grads(&state.model, p, pass.tape.value(pass.fake), cfg.loss))
        .collect::<Result<_>>()?;
    let d_loss = disc.iter().map(|(l, _)| l).sum::<f32>() / n;
    check_loss(d_loss, "discriminator loss", step)?;
    let d_grads = average(disc.into_iter().map(|(_, g)| g).collect())?;
    adam_step(&mut state.model.params, &d_grads, &mut state.disc_opt, lr, cfg)?;

    let model = &state.model;
    let gen: Vec<(f32, f32, BTreeMap<String, Tensor>)> = passes
        .into_par_iter()
        .zip(batch.par_iter())
        .map(|(pass, p)| gen_grads(pass, model, p, cfg))
        .collect::<Result<_>>()?;
    let g_loss = gen.iter().map(|(l, _, _)| l).sum::<f32>() / n;
    let l1 = gen.iter().map(|(_, l, _)| l).sum::<f32>() / n;
    check_loss(g_loss, "generator loss", step)?;
    let g_grads = average(gen.into_iter().map(|(_, _, g)| g).collect())?;
    adam_step(&mut state.model.params, &g_grads, &mut state.gen_opt, lr, cfg)?;

    state.step = step;
    Ok(StepReport { g_loss, d_loss, l1 })
}

// ---------------------------------------------------------------------------
// loop

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub lr: f32,
    pub g_loss: f32,
    pub d_loss: f32,
    pub l1: f32,
    pub val_ssim: f64,
    pub val_psnr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,g_loss,d_loss,l1,val_ssim,val_psnr";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6},{}",
            self.epoch,
            self.lr,
            self.g_loss,
            self.d_loss,
            self.l1,
            self.val_ssim,
            crate::metrics::format_psnr(self.val_psnr)
        )
    }
}

/// Whether the epoch that just completed (1-based) gets a checkpoint.
pub fn checkpoint_due(completed: usize, cfg: &TrainingConfig) -> bool {
    completed.is_multiple_of(cfg.checkpoint_every) || completed == cfg.epochs
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mix = seed ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    idx
}

/// Runs epochs `state.epoch..cfg.epochs`, calling `on_epoch` after each
/// with the updated state and its history row.
pub fn train_loop<F>(
    state: &mut TrainState,
    train: &[SamplePair],
    val: &[SamplePair],
    cfg: &TrainingConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&TrainState, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(GleanError::config("training set is empty"));
    }
    if val.is_empty() {
        return Err(GleanError::config("validation set is empty"));
    }
    if train.len() + val.len() < cfg.batch_size {
        return Err(GleanError::config(format!(
            "dataset of {} pairs is smaller than batch_size {}",
            train.len() + val.len(),
            cfg.batch_size
        )));
    }
    state.model.validate()?;
    state.gen_opt.validate(&state.model.params)?;
    state.disc_opt.validate(&state.model.params)?;

    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, cfg);
        let order = epoch_order(cfg.seed, epoch, train.len());
        let (mut g, mut d, mut l1, mut steps) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SamplePair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let r = train_step(state, &batch, lr, cfg)?;
            g += r.g_loss as f64;
            d += r.d_loss as f64;
            l1 += r.l1 as f64;
            steps += 1;
        }
        let report = evaluate(&state.model, val)?.mean();
        state.epoch += 1;
        let rec = EpochRecord {
            epoch: state.epoch,
            lr,
            g_loss: (g / steps as f64) as f32,
            d_loss: (d / steps as f64) as f32,
            l1: (l1 / steps as f64) as f32,
            val_ssim: report.ssim_cleaned,
            val_psnr: report.psnr_cleaned,
        };
        on_epoch(state, &rec)?;
        history.push(rec);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{normalize, synth_artwork, synth_perturb, PerturbConfig};
    use crate::model::{DiscriminatorConfig, GeneratorConfig};

    fn small_model(seed: u64) -> GleanModel {
        GleanModel::init(
            GeneratorConfig::uniform(8, 1, 0.5, 0.5, 3, 0.25),
            DiscriminatorConfig::reference(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn pair(seed: u64, size: usize) -> SamplePair {
        let o = synth_artwork(seed, size).unwrap();
        let p = synth_perturb(&o, seed + 1, &PerturbConfig::default()).unwrap();
        SamplePair::new(format!("s{seed}"), normalize(&o), normalize(&p)).unwrap()
    }

    #[test]
    fn loss_closed_forms() {
        let ls = GanLoss::LeastSquares;
        assert_eq!(generator_loss(ls, 1.0, 0.0, 100.0), 0.0);
        assert_eq!(generator_loss(ls, 0.0, 0.0, 100.0), 1.0);
        assert!((generator_loss(ls, 1.0, 0.01, 100.0) - 1.0).abs() < 1e-6);
        assert_eq!(discriminator_loss(ls, 1.0, 0.0), 0.0);
        assert_eq!(discriminator_loss(ls, 0.0, 1.0), 1.0);
        assert_eq!(discriminator_loss(ls, 0.5, 0.5), 0.25);
        let ln2 = std::f32::consts::LN_2;
        assert!((discriminator_loss(GanLoss::Bce, 0.0, 0.0) - 2.0 * ln2).abs() < 1e-6);
        assert!((generator_loss(GanLoss::Bce, 0.0, 0.0, 1.0) - ln2).abs() < 1e-6);
    }

    #[test]
    fn tape_losses_agree_with_scalar_forms() {
        for loss in [GanLoss::LeastSquares, GanLoss::Bce] {
            for (r, f) in [(0.3f32, -0.7f32), (1.2, 0.1), (-2.0, 3.0)] {
                let mut t = GradTape::new();
                let rv = t.constant(Tensor::scalar(r));
                let fv = t.constant(Tensor::scalar(f));
                let d = tape_discriminator_loss(&mut t, loss, rv, fv).unwrap();
                let g = tape_adversarial_g(&mut t, loss, fv);
                assert!((t.value(d).item().unwrap() - discriminator_loss(loss, r, f)).abs() < 1e-6);
                assert!((t.value(g).item().unwrap() - generator_loss(loss, f, 0.0, 1.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainingConfig {
            epochs: 100,
            ..Default::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 2e-4);
        assert_eq!(lr_schedule(49, &cfg), 2e-4);
        assert!((lr_schedule(75, &cfg) - 1e-4).abs() < 1e-12);
        assert!((lr_schedule(99, &cfg) - 2e-4 / 50.0).abs() < 1e-12);
        for epochs in 1..40 {
            let cfg = TrainingConfig {
                epochs,
                ..Default::default()
            };
            let lrs: Vec<f32> = (0..epochs).map(|e| lr_schedule(e, &cfg)).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            assert!(lrs.iter().all(|&l| l > 0.0));
            let half = epochs / 2;
            let expected_last = 2e-4 / (epochs - half) as f32;
            assert!((lrs[epochs - 1] - expected_last).abs() < 1e-12);
        }
    }

    fn one_param(value: Vec<f32>) -> (ParamStore, OptimState) {
        let mut p = ParamStore::new();
        p.insert("gen.w", Tensor::new(vec![value.len()], value).unwrap()).unwrap();
        let s = OptimState::new(&p, GEN_PREFIX);
        (p, s)
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let (mut p, mut s) = one_param(vec![0.5, -1.0]);
        let before = p.clone();
        let g = BTreeMap::from([("gen.w".to_string(), Tensor::zeros(&[2]))]);
        adam_step(&mut p, &g, &mut s, 1e-3, &TrainingConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    /// Scalar Adam in f64, written out directly.
    fn scalar_adam(p0: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.5f64, 0.999f64, 1e-8f64);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let cfg = TrainingConfig::default();
        let lr = 2e-4;
        let (mut p, mut s) = one_param(vec![0.3, -0.2, 0.0]);
        let g = BTreeMap::from([("gen.w".to_string(), Tensor::new(vec![3], vec![0.7, -3.0, 1e-3]).unwrap())]);
        adam_step(&mut p, &g, &mut s, lr, &cfg).unwrap();
        let got = p.get("gen.w").unwrap().data().to_vec();
        for (i, (&p0, &gi)) in [0.3f64, -0.2, 0.0].iter().zip(&[0.7f64, -3.0, 1e-3]).enumerate() {
            let expect = scalar_adam(p0, &[gi], lr as f64);
            assert!((got[i] as f64 - expect).abs() < 1e-6, "{i}");
            // first step moves by lr in the direction against the gradient
            assert!(((got[i] as f64 - p0).abs() - lr as f64).abs() < 1e-6);
        }

        let seq = [0.7f32, -0.1, 0.4, 2.0, -1.5];
        let (mut p, mut s) = one_param(vec![0.3]);
        for &gi in &seq {
            let g = BTreeMap::from([("gen.w".to_string(), Tensor::new(vec![1], vec![gi]).unwrap())]);
            adam_step(&mut p, &g, &mut s, lr, &cfg).unwrap();
        }
        let expect = scalar_adam(0.3, &seq.map(|g| g as f64), lr as f64);
        assert!((p.get("gen.w").unwrap().data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_nan_and_names_parameter() {
        let (mut p, mut s) = one_param(vec![0.5]);
        let before = p.clone();
        let g = BTreeMap::from([("gen.w".to_string(), Tensor::new(vec![1], vec![f32::NAN]).unwrap())]);
        let err = adam_step(&mut p, &g, &mut s, 1e-3, &TrainingConfig::default()).unwrap_err();
        assert!(err.to_string().contains("gen.w"));
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn adam_clip_bounds_gradient() {
        let cfg = TrainingConfig {
            grad_clip: Some(1.0),
            ..Default::default()
        };
        let (mut a, mut sa) = one_param(vec![0.0]);
        let (mut b, mut sb) = one_param(vec![0.0]);
        let big = BTreeMap::from([("gen.w".to_string(), Tensor::new(vec![1], vec![50.0]).unwrap())]);
        let one = BTreeMap::from([("gen.w".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap())]);
        for _ in 0..3 {
            adam_step(&mut a, &big, &mut sa, 1e-3, &cfg).unwrap();
            adam_step(&mut b, &one, &mut sb, 1e-3, &cfg).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn step_updates_each_network_in_turn() {
        let mut state = TrainState::new(small_model(1));
        let batch = vec![pair(10, 32), pair(20, 32)];
        let cfg = TrainingConfig::default();
        let gen0 = state.model.params.digest(GEN_PREFIX);
        let disc0 = state.model.params.digest(DISC_PREFIX);
        let r = train_step(&mut state, &batch, 2e-4, &cfg).unwrap();
        assert!(r.g_loss >= 0.0 && r.d_loss >= 0.0 && r.l1 >= 0.0);
        assert!(r.g_loss.is_finite() && r.d_loss.is_finite());
        assert_ne!(state.model.params.digest(GEN_PREFIX), gen0);
        assert_ne!(state.model.params.digest(DISC_PREFIX), disc0);
        assert_eq!((state.step, state.gen_opt.step, state.disc_opt.step), (1, 1, 1));
    }

    #[test]
    fn discriminator_update_leaves_generator_untouched() {
        let state = TrainState::new(small_model(2));
        let p = pair(3, 32);
        let gen0 = state.model.params.digest(GEN_PREFIX);
        let pass = gen_pass(&state.model, &p).unwrap();
        let (_, grads) = disc_grads(&state.model, &p, pass.tape.value(pass.fake), GanLoss::LeastSquares).unwrap();
        assert!(grads.keys().all(|k| k.starts_with(DISC_PREFIX)));
        let mut params = state.model.params.clone();
        let mut opt = state.disc_opt.clone();
        adam_step(&mut params, &grads, &mut opt, 1e-3, &TrainingConfig::default()).unwrap();
        assert_eq!(params.digest(GEN_PREFIX), gen0);
        assert_ne!(params.digest(DISC_PREFIX), state.model.params.digest(DISC_PREFIX));

        let disc0 = state.model.params.digest(DISC_PREFIX);
        let (_, _, ggrads) = gen_grads(pass, &state.model, &p, &TrainingConfig::default()).unwrap();
        assert!(ggrads.keys().all(|k| k.starts_with(GEN_PREFIX)));
        let mut params = state.model.params.clone();
        let mut opt = state.gen_opt.clone();
        adam_step(&mut params, &ggrads, &mut opt, 1e-3, &TrainingConfig::default()).unwrap();
        assert_eq!(params.digest(DISC_PREFIX), disc0);
    }

    #[test]
    fn steps_are_deterministic() {
        let batch = vec![pair(5, 32), pair(6, 32), pair(7, 32)];
        let cfg = TrainingConfig::default();
        let run = || {
            let mut s = TrainState::new(small_model(9));
            let reports: Vec<StepReport> =
                (0..3).map(|_| train_step(&mut s, &batch, 2e-4, &cfg).unwrap()).collect();
            (reports, s)
        };
        let (ra, sa) = run();
        let (rb, sb) = run();
        assert_eq!(ra, rb);
        assert_eq!(sa, sb);
    }

    #[test]
    fn loop_smoke_and_history() {
        let pairs: Vec<SamplePair> = (0..4).map(|i| pair(100 + i, 32)).collect();
        let (train, val) = pairs.split_at(3);
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 2,
            checkpoint_every: 2,
            ..Default::default()
        };
        let mut state = TrainState::new(small_model(4));
        let mut due = Vec::new();
        let hist = train_loop(&mut state, train, val, &cfg, |s, rec| {
            assert_eq!(s.epoch, rec.epoch);
            due.push(checkpoint_due(rec.epoch, &cfg));
            Ok(())
        })
        .unwrap();
        assert_eq!(hist.len(), 3);
        assert_eq!(due, vec![false, true, true]);
        assert!(hist.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert_eq!(state.step, 6);

        // resuming past the end does nothing
        let again = train_loop(&mut state, train, val, &cfg, |_, _| Ok(())).unwrap();
        assert!(again.is_empty());
    }

    #[test]
    fn loop_rejects_empty_data() {
        let mut state = TrainState::new(small_model(4));
        let p = vec![pair(1, 32)];
        let cfg = TrainingConfig::default();
        assert!(train_loop(&mut state, &[], &p, &cfg, |_, _| Ok(())).is_err());
        assert_eq!(state.step, 0);
    }
}
