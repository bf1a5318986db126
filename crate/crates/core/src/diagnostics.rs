//! Gradient-stability and loss-landscape probes.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;

pub const DEFAULT_RADIUS: f64 = 1.0;
pub const DEFAULT_RESOLUTION: usize = 21;

/// `dot(a, b) / (|a| |b|)`, or 0 when either vector is zero.
pub fn gradient_cosine(prev: &[f64], curr: &[f64]) -> Result<f64> {
    if prev.len() != curr.len() {
        return Err(Error::LengthMismatch(prev.len(), curr.len()));
    }
    let dot: f64 = prev.iter().zip(curr).map(|(a, b)| a * b).sum();
    let na = prev.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = curr.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub d1: Vec<Array>,
    pub d2: Vec<Array>,
    pub radius: f64,
    pub resolution: usize,
    /// Row-major over `(alpha, beta)`; non-finite evaluations are `+inf`.
    pub losses: Vec<f64>,
}

impl LandscapeGrid {
    pub fn coord(&self, i: usize) -> f64 {
        grid_coord(self.radius, self.resolution, i)
    }

    pub fn center(&self) -> f64 {
        let c = self.resolution / 2;
        self.losses[c * self.resolution + c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.resolution + j]
    }
}

fn grid_coord(radius: f64, resolution: usize, i: usize) -> f64 {
    if resolution == 1 {
        return 0.0;
    }
    let half = (resolution - 1) as f64;
    radius * (2.0 * i as f64 - half) / half
}

/// Random Gaussian direction with every output-unit slice rescaled to the
/// norm of the matching parameter slice. Conv kernels `[co, ci, kh, kw]` are
/// sliced along the leading axis; dense weights are stored `[in, out]`, so
/// their units are columns. Rank-1 tensors (biases) get a zero direction.
pub fn filter_normalized_direction(params: &[Array], rng: &mut Rng) -> Vec<Array> {
    params
        .iter()
        .map(|p| {
            let d: Vec<f64> = (0..p.len()).map(|_| StandardNormal.sample(rng)).collect();
            let mut d = Array::new(p.shape().to_vec(), d).expect("param shape");
            if p.rank() < 2 {
                return Array::zeros(p.shape());
            }
            let slices = unit_slices(p.shape());
            for idx in &slices {
                let dn = idx.iter().map(|&i| d.data()[i].powi(2)).sum::<f64>().sqrt();
                let pn = idx.iter().map(|&i| p.data()[i].powi(2)).sum::<f64>().sqrt();
                let s = if dn > 0.0 { pn / dn } else { 0.0 };
                idx.iter().for_each(|&i| d.data_mut()[i] *= s);
            }
            d
        })
        .collect()
}

/// Flat indices of each output unit of a weight tensor.
fn unit_slices(shape: &[usize]) -> Vec<Vec<usize>> {
    let n: usize = shape.iter().product();
    if shape.len() == 2 {
        let (rows, cols) = (shape[0], shape[1]);
        (0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()).collect()
    } else {
        let len = n / shape[0];
        (0..shape[0]).map(|u| (u * len..(u + 1) * len).collect()).collect()
    }
}

/// Evaluate `loss_eval` on `params + alpha d1 + beta d2` over `[-r, r]^2`.
/// Grid points run on private copies; `params` is never written.
pub fn loss_landscape<F>(params: &[Array], loss_eval: F, radius: f64, resolution: usize, rng: &mut Rng) -> Result<LandscapeGrid>
where
    F: Fn(&[Array]) -> Result<f64> + Sync,
{
    if resolution.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("resolution {resolution} must be odd")));
    }
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidArgument(format!("radius {radius} must be positive")));
    }
    let d1 = filter_normalized_direction(params, rng);
    let d2 = filter_normalized_direction(params, rng);
    let losses = par::map_range(resolution * resolution, |idx| {
        let (a, b) = (grid_coord(radius, resolution, idx / resolution), grid_coord(radius, resolution, idx % resolution));
        let moved: Vec<Array> = params
            .iter()
            .zip(d1.iter().zip(&d2))
            .map(|(p, (u, v))| {
                let data = p.data().iter().zip(u.data().iter().zip(v.data())).map(|(&p, (&u, &v))| p + a * u + b * v);
                Array::new(p.shape().to_vec(), data.collect()).expect("param shape")
            })
            .collect();
        match loss_eval(&moved) {
            Ok(l) if l.is_finite() => Ok(l),
            Ok(_) | Err(Error::NonFinite(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(LandscapeGrid { d1, d2, radius, resolution, losses })
}

/// Largest rise above the center loss; lower is flatter.
pub fn flatness_score(grid: &LandscapeGrid) -> f64 {
    let c = grid.center();
    grid.losses.iter().map(|l| l - c).fold(f64::NEG_INFINITY, f64::max)
}

pub fn cosine_csv(cosines: &[(usize, f64)]) -> String {
    let mut s = String::from("epoch,cosine\n");
    for (e, c) in cosines {
        writeln!(s, "{e},{c}").expect("string write");
    }
    s
}

pub fn landscape_csv(grid: &LandscapeGrid) -> String {
    let mut s = String::from("alpha,beta,loss\n");
    for i in 0..grid.resolution {
        for j in 0..grid.resolution {
            writeln!(s, "{},{},{}", grid.coord(i), grid.coord(j), grid.at(i, j)).expect("string write");
        }
    }
    s
}

pub fn write_csv(path: &Path, text: &str) -> Result<()> {
    crate::io::write_atomic(path, text.as_bytes())
}
