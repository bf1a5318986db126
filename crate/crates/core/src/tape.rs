//! Reverse-mode differentiation over recorded primitive applications.
//!
//! A [`Tape`] owns every value produced during a forward pass. Values that
//! depend on a gradient-requiring leaf carry a record of the primitive and
//! its inputs; [`Tape::backward`] walks those records in reverse.

use rand::Rng as _;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::ops::{apply_primitive, vjp, Primitive};
use crate::rng::Rng;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Record {
    prim: Primitive,
    inputs: Vec<Var>,
}

struct Node {
    value: Array,
    requires_grad: bool,
    record: Option<Record>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape value that needs one.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
    disconnected: Vec<Var>,
}

impl Gradients {
    /// Gradient of `v`, zero-filled when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Array {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    /// Gradient-requiring leaves the loss never touched.
    pub fn disconnected(&self) -> &[Var] {
        &self.disconnected
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, requires_grad: bool, record: Option<Record>) -> Var {
        self.nodes.push(Node { value, requires_grad, record });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient will be reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, true, None)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Apply a primitive; a record is kept only if some input needs a gradient.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Array> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = apply_primitive(&prim, &values)?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = tracked.then(|| Record { prim, inputs: inputs.to_vec() });
        Ok(self.push(out, tracked, record))
    }

    /// Run the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(rec) = &self.nodes[i].record else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Array> = rec.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = rec.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let parts = vjp(&rec.prim, &inputs, &self.nodes[i].value, &g, &needs)?;
            for (v, part) in rec.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                grads[v.0] = Some(match grads[v.0].take() {
                    Some(acc) => acc.zip_map(&part, |a, b| a + b)?,
                    None => part,
                });
            }
            grads[i] = Some(g);
        }
        let mut disconnected = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && n.record.is_none() && grads[i].is_none() {
                disconnected.push(Var(i));
            }
        }
        if !disconnected.is_empty() {
            log::warn!("{} gradient leaves do not reach the loss", disconnected.len());
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, disconnected })
    }

    // Convenience wrappers.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        match bias {
            Some(b) => self.apply(Primitive::Conv2d, &[x, w, b]),
            None => self.apply(Primitive::Conv2d, &[x, w]),
        }
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn avgpool2d(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::AvgPool2d, &[x])
    }
    pub fn mean_over_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::MeanOverAxes(axes.to_vec()), &[x])
    }
    pub fn var_over_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::VarOverAxes(axes.to_vec()), &[x])
    }
    pub fn sum_over_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::SumOverAxes(axes.to_vec()), &[x])
    }
    /// Sum of every element, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum_over_axes(flat, &[0])
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[x])
    }
    pub fn broadcast(&mut self, x: Var, to: &[usize]) -> Result<Var> {
        if self.shape(x) == to {
            return Ok(x);
        }
        self.apply(Primitive::Broadcast(to.to_vec()), &[x])
    }
    pub fn reshape(&mut self, x: Var, to: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(to.to_vec()), &[x])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat(axis), xs)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[x])
    }
    /// Inverted dropout with a mask drawn from `rng` and stored on the record.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len()).map(|_| if rate > 0.0 && rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep }).collect();
        self.apply(Primitive::Dropout(mask), &[x])
    }
    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Array::full(self.shape(a), c));
        self.add(a, k)
    }
}

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_difference_gradient<F>(f: F, x: &Array, h: f64) -> Result<Array>
where
    F: Fn(&Array) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let d = (up - down) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::NonFinite("finite difference".into()));
        }
        out.push(d);
    }
    Array::new(x.shape().to_vec(), out)
}

/// `||a - b|| / max(||a||, ||b||, floor)`: the error measure used by every
/// gradient check.
pub fn relative_error(a: &Array, b: &Array) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / a.norm().max(b.norm()).max(1e-8)
}
