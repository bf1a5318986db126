//! Block-by-block adversarial style synthesis.
//!
//! For each of the first three blocks: take style gradients of the crop and
//! global inputs, fold the crop gradients into the global one with decay
//! `xi`, and push a noise-initialized copy of the global style one signed
//! step up the loss.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::array::Array;
use crate::backbone::{classify_global, forward_from_block, global_pool, BackboneParams};
use crate::crop::{sample_crops, CropConfig};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::par;
use crate::rng::Rng;
use crate::style::{chained_block_transfer, normalize_vars, restyle_vars, Style, EPS_STYLE};
use crate::tape::Tape;

/// Blocks whose output styles are attacked.
pub const STYLED_BLOCKS: usize = 3;
/// Norms below this are treated as zero by [`l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub xi: f64,
    pub kappa_set: Vec<f64>,
    pub eps_init: f64,
    pub p_attack: f64,
    pub crop: CropConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { xi: 0.1, kappa_set: vec![0.008, 0.08, 0.8], eps_init: 16.0 / 255.0, p_attack: 0.2, crop: CropConfig::default() }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xi < 0.0 || !self.xi.is_finite() {
            return Err(Error::InvalidArgument(format!("xi {} must be >= 0", self.xi)));
        }
        if self.kappa_set.is_empty() || self.kappa_set.iter().any(|&k| k <= 0.0 || !k.is_finite()) {
            return Err(Error::InvalidArgument(format!("kappa set {:?} must be nonempty and positive", self.kappa_set)));
        }
        if !(0.0..=1.0).contains(&self.p_attack) {
            return Err(Error::InvalidArgument(format!("p_attack {} outside [0, 1]", self.p_attack)));
        }
        if self.eps_init < 0.0 {
            return Err(Error::InvalidArgument(format!("eps_init {} must be >= 0", self.eps_init)));
        }
        self.crop.validate()
    }
}

/// Style gradients of one block for every input; crops first, global last.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleGradientSet {
    pub mu: Vec<Array>,
    pub sigma: Vec<Array>,
    /// Natural style of each input at this block, same order.
    pub styles: Vec<Style>,
}

impl StyleGradientSet {
    pub fn n_crops(&self) -> usize {
        self.mu.len() - 1
    }

    pub fn global_style(&self) -> &Style {
        self.styles.last().expect("global entry")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvStyleSet {
    pub styles: Vec<Style>,
}

/// Ensemble gradient `Norm(G_g) + xi * Norm(mean of crop G)` for mu and sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleGradient {
    pub mu: Array,
    pub sigma: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub init: Style,
    pub adv: Style,
    pub kappa_mu: f64,
    pub kappa_sigma: f64,
}

/// Gradients of the classification loss with respect to the block-`block`
/// style of each input, with blocks before it re-styled to `prefix`.
///
/// The style is promoted to a free leaf: the normalized map is taken as a
/// constant and re-scaled by the leaf `(mu, sigma)`, so the gradient sees the
/// style as an independent parameter of the forward pass.
pub fn generate_style_gradients(
    inputs: &[Array],
    labels: &[usize],
    block: usize,
    prefix: &[Style],
    model: &BackboneParams,
) -> Result<StyleGradientSet> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty input set".into()));
    }
    if block == 0 || block > model.blocks.len() {
        return Err(Error::InvalidArgument(format!("block {block} out of range")));
    }
    if prefix.len() < block - 1 {
        return Err(Error::PrefixGap(prefix.len() + 1));
    }
    let prefix = &prefix[..block - 1];
    let per_input = par::map_slice(inputs, |x| -> Result<(Array, Array, Style)> {
        let mut tape = Tape::new();
        let m = model.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = chained_block_transfer(&mut tape, &m, xv, block, prefix)?;
        let norm = normalize_vars(&mut tape, f)?;
        let (mu0, sigma0) = crate::style::style_vars(&mut tape, f)?;
        let style = Style::new(tape.value(mu0).clone(), tape.value(sigma0).clone())?;
        let norm = tape.constant(tape.value(norm).clone());
        let mu = tape.leaf(style.mu.clone());
        let sigma = tape.leaf(style.sigma.clone());
        let styled = restyle_vars(&mut tape, norm, mu, sigma)?;
        let feat =
            if block < m.blocks.len() { forward_from_block(&mut tape, &m, styled, block + 1)? } else { global_pool(&mut tape, styled)? };
        let logits = classify_global(&mut tape, &m, feat)?;
        let loss = cross_entropy(&mut tape, logits, labels)?;
        let g = tape.backward(loss)?;
        Ok((g.wrt(mu), g.wrt(sigma), style))
    });
    let mut set = StyleGradientSet { mu: Vec::new(), sigma: Vec::new(), styles: Vec::new() };
    for r in per_input {
        let (gm, gs, s) = r?;
        if !gm.is_finite() || !gs.is_finite() {
            return Err(Error::NonFinite("style gradient".into()));
        }
        set.mu.push(gm);
        set.sigma.push(gs);
        set.styles.push(s);
    }
    Ok(set)
}

/// Per-sample L2 normalization over the channel axis of a `[B, C]` array;
/// rows with norm below [`NORM_FLOOR`] become zero.
pub fn l2_normalize_rows(g: &Array) -> Array {
    let c = g.shape()[1];
    let mut out = g.data().to_vec();
    for row in out.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < NORM_FLOOR {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Array::new(g.shape().to_vec(), out).expect("same shape")
}

fn mean_of(arrays: &[Array]) -> Array {
    let mut acc = arrays[0].clone();
    for a in &arrays[1..] {
        acc = acc.zip_map(a, |x, y| x + y).expect("equal shapes");
    }
    let k = arrays.len() as f64;
    acc.map(|v| v / k)
}

fn ensemble_one(grads: &[Array], xi: f64) -> Array {
    let (crops, global) = grads.split_at(grads.len() - 1);
    let base = l2_normalize_rows(&global[0]);
    if crops.is_empty() || xi == 0.0 {
        return base;
    }
    let crop = l2_normalize_rows(&mean_of(crops));
    base.zip_map(&crop, |g, c| g + xi * c).expect("equal shapes")
}

pub fn ensemble_gradients(grads: &StyleGradientSet, xi: f64) -> EnsembleGradient {
    EnsembleGradient { mu: ensemble_one(&grads.mu, xi), sigma: ensemble_one(&grads.sigma, xi) }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gaussian-initialize around `global` and take one signed step along the
/// ensemble gradient, with step sizes drawn independently for mu and sigma.
pub fn perturb_style(global: &Style, grad: &EnsembleGradient, cfg: &AttackConfig, rng: &mut Rng) -> Result<Perturbation> {
    if grad.mu.shape() != global.mu.shape() || grad.sigma.shape() != global.sigma.shape() {
        return Err(Error::ShapeMismatch(format!("gradient {:?} for style {:?}", grad.mu.shape(), global.mu.shape())));
    }
    let floor = EPS_STYLE.sqrt();
    let mut noisy = |a: &Array| -> Result<Array> {
        let d = a.data().iter().map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + cfg.eps_init * z
        });
        Array::new(a.shape().to_vec(), d.collect())
    };
    let mu_init = noisy(&global.mu)?;
    let sigma_init = noisy(&global.sigma)?.map(|v| v.max(floor));
    let kappa_mu = *cfg.kappa_set.choose(rng).ok_or_else(|| Error::InvalidArgument("empty kappa set".into()))?;
    let kappa_sigma = *cfg.kappa_set.choose(rng).expect("nonempty");
    let mu_adv = mu_init.zip_map(&grad.mu, |m, g| m + kappa_mu * sign(g))?;
    let sigma_adv = sigma_init.zip_map(&grad.sigma, |s, g| (s + kappa_sigma * sign(g)).max(floor))?;
    Ok(Perturbation { init: Style::new(mu_init, sigma_init)?, adv: Style::new(mu_adv, sigma_adv)?, kappa_mu, kappa_sigma })
}

/// Bernoulli draw deciding whether this episode gets a style change.
pub fn should_attack(p_attack: f64, rng: &mut Rng) -> bool {
    rng.random::<f64>() < p_attack
}

/// Adversarial styles for blocks 1..=3 from a prepared input set
/// (crops first, the clean batch last).
pub fn svasp_attack_on_inputs(
    inputs: &[Array],
    labels: &[usize],
    model: &BackboneParams,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<AdvStyleSet> {
    let mut prefix: Vec<Style> = Vec::with_capacity(STYLED_BLOCKS);
    for block in 1..=STYLED_BLOCKS {
        let grads = generate_style_gradients(inputs, labels, block, &prefix, model)?;
        let ens = ensemble_gradients(&grads, cfg.xi);
        let p = perturb_style(grads.global_style(), &ens, cfg, rng)?;
        prefix.push(p.adv);
    }
    Ok(AdvStyleSet { styles: prefix })
}

/// Full attack on a batch: with probability `1 - p_attack` returns `None`.
pub fn svasp_attack(x: &Array, labels: &[usize], model: &BackboneParams, cfg: &AttackConfig, rng: &mut Rng) -> Result<Option<AdvStyleSet>> {
    cfg.validate()?;
    if !should_attack(cfg.p_attack, rng) {
        return Ok(None);
    }
    let inputs = sample_crops(x, &cfg.crop, rng)?;
    svasp_attack_on_inputs(&inputs, labels, model, cfg, rng).map(Some)
}
