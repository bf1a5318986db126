//! Finite-difference checks of every reverse-mode rule, the style statistics
//! and the style-leaf gradients used by the attack.

use rand::Rng as _;

use crate::array::Array;
use crate::attack::generate_style_gradients;
use crate::backbone::{classify_global, forward_from_block, global_pool, BackboneParams};
use crate::error::Result;
use crate::losses::cross_entropy;
use crate::ops::{apply_primitive, Primitive};
use crate::rng::{Rng, Streams};
use crate::style::{compute_style, normalize_vars, restyle_vars, style_vars, Style};
use crate::tape::{finite_difference_gradient, relative_error, Tape};

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CASES: usize = 20;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Analytic gradients of `sum(prim(inputs) * proj)` with respect to each input.
pub type GradFn = fn(&Primitive, &[Array], &Array) -> Result<Vec<Array>>;

pub fn tape_gradients(prim: &Primitive, inputs: &[Array], proj: &Array) -> Result<Vec<Array>> {
    let mut t = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|a| t.leaf(a.clone())).collect();
    let out = t.apply(prim.clone(), &vars)?;
    let p = t.constant(proj.clone());
    let prod = t.mul(out, p)?;
    let loss = t.sum_all(prod)?;
    let g = t.backward(loss)?;
    Ok(vars.into_iter().map(|v| g.wrt(v)).collect())
}

fn projected(prim: &Primitive, inputs: &[Array], proj: &Array) -> Result<f64> {
    let refs: Vec<&Array> = inputs.iter().collect();
    let out = apply_primitive(prim, &refs)?;
    Ok(out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// Worst relative error over the inputs of one primitive application.
pub fn check_primitive(prim: &Primitive, inputs: &[Array], rng: &mut Rng, grad: GradFn) -> Result<f64> {
    let refs: Vec<&Array> = inputs.iter().collect();
    let shape = apply_primitive(prim, &refs)?.shape().to_vec();
    let proj = uniform(&shape, -1.0, 1.0, rng);
    let analytic = grad(prim, inputs, &proj)?;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |x| {
                let mut probe = inputs.to_vec();
                probe[i] = x.clone();
                projected(prim, &probe, &proj)
            },
            &inputs[i],
            STEP,
        )?;
        worst = worst.max(relative_error(a, &numeric));
    }
    Ok(worst)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in `[lo, hi]` and a random sign.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Array {
    uniform(shape, lo, hi, rng).zip_map(&uniform(shape, -1.0, 1.0, rng), |v, s| v.copysign(s)).expect("shape")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// A random application of the named primitive.
fn primitive_case(name: &str, rng: &mut Rng) -> (Primitive, Vec<Array>) {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
    let s2 = [m, n];
    match name {
        "add" => (Primitive::Add, vec![uniform(&s2, -2.0, 2.0, rng), uniform(&s2, -2.0, 2.0, rng)]),
        "sub" => (Primitive::Sub, vec![uniform(&s2, -2.0, 2.0, rng), uniform(&s2, -2.0, 2.0, rng)]),
        "mul" => (Primitive::Mul, vec![uniform(&s2, -2.0, 2.0, rng), uniform(&s2, -2.0, 2.0, rng)]),
        "div" => (Primitive::Div, vec![uniform(&s2, -2.0, 2.0, rng), away_from_zero(&s2, 0.5, 2.0, rng)]),
        "matmul" => {
            let k = dim(rng, 1, 6);
            (Primitive::MatMul, vec![uniform(&[m, k], -1.0, 1.0, rng), uniform(&[k, n], -1.0, 1.0, rng)])
        }
        "conv2d" => {
            let (b, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 9));
            let (h, w) = (dim(rng, 1, 6), [3, 4, 5, 8][dim(rng, 0, 3)]);
            let mut inputs = vec![uniform(&[b, ci, h, w], -1.0, 1.0, rng), uniform(&[co, ci, 3, 3], -1.0, 1.0, rng)];
            if rng.random_bool(0.5) {
                inputs.push(uniform(&[co], -1.0, 1.0, rng));
            }
            (Primitive::Conv2d, inputs)
        }
        "relu" => (Primitive::Relu, vec![away_from_zero(&s2, 0.01, 2.0, rng)]),
        "avgpool2d" => {
            let (h, w) = (2 * dim(rng, 1, 3), 2 * dim(rng, 1, 3));
            (Primitive::AvgPool2d, vec![uniform(&[m, 2, h, w], -1.0, 1.0, rng)])
        }
        "mean_over_axes" => (Primitive::MeanOverAxes(vec![2, 3]), vec![uniform(&[m, 2, 3, n], -1.0, 1.0, rng)]),
        "var_over_axes" => (Primitive::VarOverAxes(vec![2, 3]), vec![uniform(&[m, 2, 3, n + 1], -1.0, 1.0, rng)]),
        "sum_over_axes" => (Primitive::SumOverAxes(vec![1]), vec![uniform(&[m, 3, n], -1.0, 1.0, rng)]),
        "sqrt" => (Primitive::Sqrt, vec![uniform(&s2, 0.3, 3.0, rng)]),
        "broadcast" => (Primitive::Broadcast(vec![m, 3, n]), vec![uniform(&[m, 1, n], -1.0, 1.0, rng)]),
        "reshape" => (Primitive::Reshape(vec![n, m]), vec![uniform(&s2, -1.0, 1.0, rng)]),
        "concat" => {
            let k = dim(rng, 1, 3);
            (Primitive::Concat(1), vec![uniform(&s2, -1.0, 1.0, rng), uniform(&[m, k], -1.0, 1.0, rng)])
        }
        "scale" => (Primitive::Scale(rng.random_range(-3.0..3.0)), vec![uniform(&s2, -1.0, 1.0, rng)]),
        "exp" => (Primitive::Exp, vec![uniform(&s2, -2.0, 2.0, rng)]),
        "log" => (Primitive::Log, vec![uniform(&s2, 0.2, 3.0, rng)]),
        "softmax" => (Primitive::Softmax, vec![uniform(&s2, -3.0, 3.0, rng)]),
        "log_softmax" => (Primitive::LogSoftmax, vec![uniform(&s2, -3.0, 3.0, rng)]),
        "dropout" => {
            let mask = (0..m * n).map(|_| if rng.random_bool(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
            (Primitive::Dropout(mask), vec![uniform(&s2, -1.0, 1.0, rng)])
        }
        other => panic!("no case generator for {other}"),
    }
}

pub const PRIMITIVES: [&str; 22] = [
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "relu",
    "avgpool2d",
    "mean_over_axes",
    "var_over_axes",
    "sum_over_axes",
    "sqrt",
    "broadcast",
    "reshape",
    "concat",
    "scale",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "dropout",
    "style_stats",
];

fn check_style_stats(rng: &mut Rng) -> Result<f64> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 2, 5), dim(rng, 2, 5)];
    let f = uniform(&shape, -2.0, 2.0, rng);
    let (pm, ps) = (uniform(&shape[..2], -1.0, 1.0, rng), uniform(&shape[..2], -1.0, 1.0, rng));
    let dot = |a: &Array, b: &Array| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let mut t = Tape::new();
    let fv = t.leaf(f.clone());
    let (mu, sigma) = style_vars(&mut t, fv)?;
    let (pmv, psv) = (t.constant(pm.clone()), t.constant(ps.clone()));
    let a = t.mul(mu, pmv)?;
    let b = t.mul(sigma, psv)?;
    let s = t.add(a, b)?;
    let loss = t.sum_all(s)?;
    let analytic = t.backward(loss)?.wrt(fv);
    let numeric = finite_difference_gradient(
        |x| {
            let st = compute_style(x)?;
            Ok(dot(&st.mu, &pm) + dot(&st.sigma, &ps))
        },
        &f,
        STEP,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

/// Classification loss with the block-`block` output re-styled to `(mu, sigma)`.
fn style_leaf_loss(
    x: &Array,
    labels: &[usize],
    block: usize,
    prefix: &[Style],
    model: &BackboneParams,
    mu: &Array,
    sigma: &Array,
) -> Result<f64> {
    let mut t = Tape::new();
    let m = model.register(&mut t, false);
    let xv = t.constant(x.clone());
    let f = crate::style::chained_block_transfer(&mut t, &m, xv, block, prefix)?;
    let norm = normalize_vars(&mut t, f)?;
    let (mu, sigma) = (t.constant(mu.clone()), t.constant(sigma.clone()));
    let styled = restyle_vars(&mut t, norm, mu, sigma)?;
    let feat = if block < m.blocks.len() { forward_from_block(&mut t, &m, styled, block + 1)? } else { global_pool(&mut t, styled)? };
    let logits = classify_global(&mut t, &m, feat)?;
    let loss = cross_entropy(&mut t, logits, labels)?;
    t.value(loss).item()
}

fn check_style_leaves(rng: &mut Rng, case: u64) -> Result<f64> {
    let n_classes = dim(rng, 2, 4);
    let model = BackboneParams::init(n_classes, &mut Streams::new(case).stream("model", &[]));
    let b = dim(rng, 1, 2);
    let x = uniform(&[b, 3, 16, 16], 0.0, 1.0, rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n_classes)).collect();
    let block = dim(rng, 1, 4);
    // prefix styles perturb real block statistics slightly
    let mut prefix = Vec::new();
    {
        let mut t = Tape::new();
        let m = model.register(&mut t, false);
        let mut f = t.constant(x.clone());
        for blk in 1..block {
            f = crate::backbone::block_forward(&mut t, &m, blk, f)?;
            let s = compute_style(t.value(f))?;
            let jm = uniform(s.mu.shape(), 0.9, 1.1, rng);
            let js = uniform(s.mu.shape(), 0.9, 1.1, rng);
            let style = Style::new(s.mu.zip_map(&jm, |a, b| a * b)?, s.sigma.zip_map(&js, |a, b| a * b)?)?;
            f = crate::style::adain_vars(&mut t, f, &style)?;
            prefix.push(style);
        }
    }
    let set = generate_style_gradients(std::slice::from_ref(&x), &labels, block, &prefix, &model)?;
    let (mu0, sigma0) = (&set.styles[0].mu, &set.styles[0].sigma);
    let num_mu = finite_difference_gradient(|m| style_leaf_loss(&x, &labels, block, &prefix, &model, m, sigma0), mu0, STEP)?;
    let num_sigma = finite_difference_gradient(|s| style_leaf_loss(&x, &labels, block, &prefix, &model, mu0, s), sigma0, STEP)?;
    Ok(relative_error(&set.mu[0], &num_mu).max(relative_error(&set.sigma[0], &num_sigma)))
}

/// Run `cases` random checks of one named target. Case `i` of target `name`
/// draws from stream `("gradcheck/name", [i])`.
pub fn check_named(name: &str, cases: usize, seed: u64, grad: GradFn) -> Result<CheckReport> {
    let streams = Streams::new(seed);
    let mut max_rel_err: f64 = 0.0;
    for i in 0..cases {
        let mut rng = streams.stream(&format!("gradcheck/{name}"), &[i as u64]);
        let err = match name {
            "style_stats" => check_style_stats(&mut rng)?,
            "style_leaves" => check_style_leaves(&mut rng, seed ^ i as u64)?,
            _ => {
                let (prim, inputs) = primitive_case(name, &mut rng);
                check_primitive(&prim, &inputs, &mut rng, grad)?
            }
        };
        max_rel_err = max_rel_err.max(err);
    }
    Ok(CheckReport { name: name.to_string(), cases, max_rel_err })
}

/// Every primitive, the style statistics and the style-leaf gradients.
pub fn run_all(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for name in PRIMITIVES.iter().copied().chain(["style_leaves"]) {
        out.push(check_named(name, cases, seed, tape_gradients)?);
    }
    Ok(out)
}

pub fn report_csv(reports: &[CheckReport]) -> String {
    let mut s = String::from("check,cases,max_rel_err,passed\n");
    for r in reports {
        s.push_str(&format!("{},{},{:e},{}\n", r.name, r.cases, r.max_rel_err, r.passed()));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corrupted(prim: &Primitive, inputs: &[Array], proj: &Array) -> Result<Vec<Array>> {
        let mut g = tape_gradients(prim, inputs, proj)?;
        g[0] = g[0].map(|v| v * 1.01);
        Ok(g)
    }

    #[test]
    fn clean_rules_pass() {
        for name in ["matmul", "conv2d", "softmax"] {
            let r = check_named(name, 5, 3, tape_gradients).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        for name in ["mul", "conv2d", "log_softmax"] {
            let r = check_named(name, 3, 3, corrupted).unwrap();
            assert!(!r.passed(), "{r:?}");
            assert!(r.max_rel_err > 5e-3);
        }
    }

    #[test]
    fn style_checks_pass() {
        assert!(check_named("style_stats", 3, 5, tape_gradients).unwrap().passed());
        assert!(check_named("style_leaves", 2, 5, tape_gradients).unwrap().passed());
    }
}
