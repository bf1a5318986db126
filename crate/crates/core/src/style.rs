//! Instance-level feature statistics and AdaIN re-styling.

use crate::array::Array;
use crate::backbone::{block_forward, ModelVars};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Variance floor inside the standard deviation.
pub const EPS_STYLE: f64 = 1e-5;

/// Per-sample, per-channel mean and standard deviation, both `[B, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub mu: Array,
    pub sigma: Array,
}

impl Style {
    pub fn new(mu: Array, sigma: Array) -> Result<Self> {
        if mu.shape() != sigma.shape() || mu.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("style mu {:?} sigma {:?}", mu.shape(), sigma.shape())));
        }
        Ok(Self { mu, sigma })
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.mu.shape()[1]
    }
}

/// Style of a `[B, C, H, W]` map on the tape, returned as `[B, C]` vars.
pub fn style_vars(tape: &mut Tape, f: Var) -> Result<(Var, Var)> {
    let s = tape.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::BadRank { expected: 4, got: s });
    }
    let mu = tape.mean_over_axes(f, &[2, 3])?;
    let var = tape.var_over_axes(f, &[2, 3])?;
    let var = tape.add_scalar(var, EPS_STYLE)?;
    let sigma = tape.sqrt(var)?;
    let mu = tape.reshape(mu, &[s[0], s[1]])?;
    let sigma = tape.reshape(sigma, &[s[0], s[1]])?;
    Ok((mu, sigma))
}

pub fn compute_style(f: &Array) -> Result<Style> {
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let (mu, sigma) = style_vars(&mut t, fv)?;
    Style::new(t.value(mu).clone(), t.value(sigma).clone())
}

fn expand(tape: &mut Tape, s: Var, shape: &[usize]) -> Result<Var> {
    let r = tape.reshape(s, &[shape[0], shape[1], 1, 1])?;
    tape.broadcast(r, shape)
}

/// `(F - mu_F) / sigma_F`, with the statistics taken from `f` itself.
pub fn normalize_vars(tape: &mut Tape, f: Var) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    let (mu, sigma) = style_vars(tape, f)?;
    let mu = expand(tape, mu, &shape)?;
    let sigma = expand(tape, sigma, &shape)?;
    let centered = tape.sub(f, mu)?;
    tape.div(centered, sigma)
}

/// Re-style a normalized map: `norm * sigma + mu`, with `[B, C]` style vars.
pub fn restyle_vars(tape: &mut Tape, norm: Var, mu: Var, sigma: Var) -> Result<Var> {
    let shape = tape.shape(norm).to_vec();
    let bc = [shape[0], shape[1]];
    if tape.shape(mu) != bc || tape.shape(sigma) != bc {
        return Err(Error::ShapeMismatch(format!("target style {:?}/{:?} for map {shape:?}", tape.shape(mu), tape.shape(sigma))));
    }
    let mu = expand(tape, mu, &shape)?;
    let sigma = expand(tape, sigma, &shape)?;
    let scaled = tape.mul(norm, sigma)?;
    tape.add(scaled, mu)
}

/// AdaIN on the tape; the target style enters as constants.
pub fn adain_vars(tape: &mut Tape, f: Var, target: &Style) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(Error::BadRank { expected: 4, got: shape });
    }
    if target.mu.shape() != [shape[0], shape[1]] {
        return Err(Error::ShapeMismatch(format!("style {:?} for map {shape:?}", target.mu.shape())));
    }
    let norm = normalize_vars(tape, f)?;
    let mu = tape.constant(target.mu.clone());
    let sigma = tape.constant(target.sigma.clone());
    restyle_vars(tape, norm, mu, sigma)
}

pub fn adain_transfer(f: &Array, target: &Style) -> Result<Array> {
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let out = adain_vars(&mut t, fv, target)?;
    Ok(t.value(out).clone())
}

/// Run blocks `1..=through_block`, re-styling the output of block `i` to
/// `prefix[i - 1]` for every `i <= prefix.len()`.
pub fn chained_block_transfer(tape: &mut Tape, model: &ModelVars, input: Var, through_block: usize, prefix: &[Style]) -> Result<Var> {
    if prefix.len() > through_block {
        return Err(Error::InvalidArgument(format!("{} prefix styles but only {through_block} blocks run", prefix.len())));
    }
    let mut f = input;
    for block in 1..=through_block {
        f = block_forward(tape, model, block, f)?;
        if let Some(style) = prefix.get(block - 1) {
            f = adain_vars(tape, f, style)?;
        }
    }
    Ok(f)
}
