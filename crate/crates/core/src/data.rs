//! Procedural style-shifted image domains and N-way K-shot episodes.
//!
//! Class identity lives in pattern geometry (stripes, checkers, rings, blobs,
//! crosses, frames). A domain adds a per-channel affine shift and an optional
//! sinusoidal texture on top, which moves the channel statistics of every
//! image without touching its geometry.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CHANNELS: usize = 3;
const CACHE_MAGIC: &[u8; 4] = b"SVDS";
pub const CACHE_VERSION: u32 = 1;
/// Pivot of the per-channel contrast scaling.
const SHIFT_PIVOT: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pattern {
    Stripes { angle: f64, freq: f64 },
    Checker { cells: f64, angle: f64 },
    Rings { freq: f64 },
    Blobs { count: usize, radius: f64 },
    Cross { width: f64 },
    Frame { half: f64, width: f64 },
}

/// Geometry of class generator `id`. Ids 0..8 are source classes, 8..13 are
/// reserved for target domains.
fn pattern(id: usize) -> Pattern {
    match id {
        0 => Pattern::Stripes { angle: 0.0, freq: 3.0 },
        1 => Pattern::Stripes { angle: PI / 2.0, freq: 3.0 },
        2 => Pattern::Stripes { angle: PI / 4.0, freq: 4.0 },
        3 => Pattern::Checker { cells: 4.0, angle: 0.0 },
        4 => Pattern::Rings { freq: 3.0 },
        5 => Pattern::Blobs { count: 1, radius: 0.3 },
        6 => Pattern::Cross { width: 0.18 },
        7 => Pattern::Stripes { angle: 0.0, freq: 6.0 },
        8 => Pattern::Checker { cells: 8.0, angle: PI / 4.0 },
        9 => Pattern::Rings { freq: 6.0 },
        10 => Pattern::Stripes { angle: -PI / 4.0, freq: 2.0 },
        11 => Pattern::Blobs { count: 4, radius: 0.14 },
        12 => Pattern::Frame { half: 0.32, width: 0.1 },
        _ => Pattern::Stripes { angle: (id as f64) * 0.7, freq: 2.0 + (id % 5) as f64 },
    }
}

pub const SOURCE_GENERATORS: std::ops::Range<usize> = 0..8;
pub const TARGET_GENERATORS: std::ops::Range<usize> = 8..13;

fn smooth_step(v: f64) -> f64 {
    // soft 0/1 edge over a small band
    (0.5 + 0.5 * (v * 6.0).tanh()).clamp(0.0, 1.0)
}

struct Jitter {
    angle: f64,
    scale: f64,
    phase: f64,
    dx: f64,
    dy: f64,
    centers: [(f64, f64); 4],
}

fn intensity(p: Pattern, u: f64, v: f64, j: &Jitter) -> f64 {
    // centered, rotated, scaled coordinates
    let (cu, cv) = (u - 0.5 - j.dx, v - 0.5 - j.dy);
    let (s, c) = j.angle.sin_cos();
    let (ru, rv) = ((c * cu - s * cv) * j.scale, (s * cu + c * cv) * j.scale);
    match p {
        Pattern::Stripes { angle, freq } => {
            let t = ru * angle.cos() + rv * angle.sin();
            smooth_step((2.0 * PI * freq * t + j.phase).sin())
        }
        Pattern::Checker { cells, angle } => {
            let (sa, ca) = angle.sin_cos();
            let (a, b) = (ca * ru - sa * rv, sa * ru + ca * rv);
            let w = (PI * cells * a + j.phase).sin() * (PI * cells * b + j.phase).sin();
            smooth_step(w * 2.0)
        }
        Pattern::Rings { freq } => {
            let r = (ru * ru + rv * rv).sqrt();
            smooth_step((2.0 * PI * freq * r + j.phase).sin())
        }
        Pattern::Blobs { count, radius } => {
            let mut m: f64 = 0.0;
            for &(bx, by) in j.centers.iter().take(count) {
                let (du, dv) = (ru - bx * (count > 1) as u8 as f64, rv - by * (count > 1) as u8 as f64);
                let d = (du * du + dv * dv).sqrt();
                m = m.max(smooth_step((radius - d) * 12.0));
            }
            m
        }
        Pattern::Cross { width } => {
            let a = smooth_step((width / 2.0 - ru.abs()) * 12.0);
            let b = smooth_step((width / 2.0 - rv.abs()) * 12.0);
            a.max(b)
        }
        Pattern::Frame { half, width } => {
            let d = ru.abs().max(rv.abs());
            smooth_step((width / 2.0 - (d - half).abs()) * 12.0)
        }
    }
}

/// Per-channel statistics shift plus a sinusoidal texture overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleShift {
    pub mean_offset: [f64; 3],
    pub scale: [f64; 3],
    pub texture_freq: f64,
    pub texture_amp: f64,
}

impl StyleShift {
    pub fn identity() -> Self {
        Self { mean_offset: [0.0; 3], scale: [1.0; 3], texture_freq: 0.0, texture_amp: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    /// Class generator ids; the dataset label of generator `generators[i]` is `i`.
    pub generators: Vec<usize>,
    pub shift: StyleShift,
}

impl Domain {
    pub fn source(shift: StyleShift) -> Self {
        Self { name: "source".into(), generators: SOURCE_GENERATORS.collect(), shift }
    }

    pub fn target(name: &str, shift: StyleShift) -> Self {
        Self { name: name.into(), generators: TARGET_GENERATORS.collect(), shift }
    }
}

/// A labeled image set, `[n, 3, H, W]` with labels in `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Array,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut v = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            v[l].push(i);
        }
        v
    }

    /// Gather images by index into a new `[len, 3, H, W]` batch.
    pub fn gather(&self, idx: &[usize]) -> Array {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Array::new(shape, data).expect("gather shape")
    }

    /// Mean of channel `c` over the whole set.
    pub fn channel_mean(&self, c: usize) -> f64 {
        let (h, w) = self.image_size();
        let plane = h * w;
        let mut acc = 0.0;
        for i in 0..self.len() {
            let base = (i * CHANNELS + c) * plane;
            acc += self.images.data()[base..base + plane].iter().sum::<f64>();
        }
        acc / (self.len() * plane) as f64
    }
}

fn render(domain: &Domain, class: usize, size: usize, rng: &mut Rng, out: &mut [f64]) {
    let p = pattern(domain.generators[class]);
    let mut centers = [(0.0, 0.0); 4];
    for (i, c) in centers.iter_mut().enumerate() {
        let (qx, qy) = ([-0.2, 0.2, -0.2, 0.2][i], [-0.2, -0.2, 0.2, 0.2][i]);
        *c = (qx + rng.random_range(-0.04..0.04), qy + rng.random_range(-0.04..0.04));
    }
    let j = Jitter {
        angle: rng.random_range(-0.17..0.17),
        scale: rng.random_range(0.9..1.1),
        phase: rng.random_range(0.0..2.0 * PI),
        dx: rng.random_range(-0.06..0.06),
        dy: rng.random_range(-0.06..0.06),
        centers,
    };
    let fg = rng.random_range(0.45..0.6);
    let bg = rng.random_range(0.15..0.3);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let tex_phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, 0.02).expect("std");
    let s = &domain.shift;
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let base = bg + (fg - bg) * intensity(p, u, v, &j);
            let tex =
                if s.texture_amp != 0.0 { s.texture_amp * (2.0 * PI * s.texture_freq * (u + 0.5 * v) + tex_phase).sin() } else { 0.0 };
            for c in 0..CHANNELS {
                let raw = base + tint[c] + noise.sample(rng);
                let shifted = (raw - SHIFT_PIVOT) * s.scale[c] + SHIFT_PIVOT + s.mean_offset[c] + tex;
                // stored values are exactly representable in the f32 cache
                out[c * plane + y * size + x] = shifted.clamp(0.0, 1.0) as f32 as f64;
            }
        }
    }
}

/// Render `n_per_class` images of every class of `domain`, class-major.
pub fn generate_domain(domain: &Domain, n_per_class: usize, image_size: usize, rng: &mut Rng) -> Result<LabeledImages> {
    if domain.generators.len() < 2 {
        return Err(Error::InvalidArgument("a domain needs at least 2 classes".into()));
    }
    if image_size < 16 || n_per_class == 0 {
        return Err(Error::InvalidArgument(format!("image size {image_size} < 16 or empty classes")));
    }
    let n = domain.generators.len() * n_per_class;
    let per = CHANNELS * image_size * image_size;
    let mut data = vec![0.0; n * per];
    let mut labels = Vec::with_capacity(n);
    for class in 0..domain.generators.len() {
        for i in 0..n_per_class {
            let idx = class * n_per_class + i;
            render(domain, class, image_size, rng, &mut data[idx * per..(idx + 1) * per]);
            labels.push(class);
        }
    }
    Ok(LabeledImages { images: Array::new(vec![n, CHANNELS, image_size, image_size], data)?, labels, n_classes: domain.generators.len() })
}

/// One few-shot task. Support is class-major; logical labels follow the
/// episode's class order.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    /// Dataset class of each logical label.
    pub classes: Vec<usize>,
    pub support_idx: Vec<usize>,
    pub query_idx: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.support_idx.len() + self.query_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Support then query images, `[NK + NM, 3, H, W]`.
    pub fn images(&self, ds: &LabeledImages) -> Array {
        let idx: Vec<usize> = self.support_idx.iter().chain(&self.query_idx).copied().collect();
        ds.gather(&idx)
    }

    /// Dataset (base-class) labels of support then query.
    pub fn base_labels(&self) -> Vec<usize> {
        self.support_labels.iter().chain(&self.query_labels).map(|&l| self.classes[l]).collect()
    }
}

pub fn sample_episode(ds: &LabeledImages, n_way: usize, k_shot: usize, m_query: usize, rng: &mut Rng) -> Result<Episode> {
    let by_class = ds.by_class();
    let eligible: Vec<usize> = (0..ds.n_classes).filter(|&c| by_class[c].len() >= k_shot + m_query).collect();
    if n_way == 0 || k_shot == 0 || m_query == 0 {
        return Err(Error::InvalidArgument("N, K and M must be positive".into()));
    }
    if eligible.len() < n_way {
        return Err(Error::InsufficientData(format!("{} classes with >= {} instances, need {n_way}", eligible.len(), k_shot + m_query)));
    }
    let classes: Vec<usize> = sample(rng, eligible.len(), n_way).into_iter().map(|i| eligible[i]).collect();
    let mut ep = Episode {
        n_way,
        classes: classes.clone(),
        support_idx: Vec::with_capacity(n_way * k_shot),
        query_idx: Vec::with_capacity(n_way * m_query),
        support_labels: Vec::with_capacity(n_way * k_shot),
        query_labels: Vec::with_capacity(n_way * m_query),
    };
    let mut query = Vec::with_capacity(n_way);
    for (logical, &c) in classes.iter().enumerate() {
        let pool = &by_class[c];
        let picks = sample(rng, pool.len(), k_shot + m_query).into_vec();
        ep.support_idx.extend(picks[..k_shot].iter().map(|&i| pool[i]));
        ep.support_labels.extend(std::iter::repeat_n(logical, k_shot));
        query.push(picks[k_shot..].iter().map(|&i| pool[i]).collect::<Vec<_>>());
    }
    for (logical, q) in query.into_iter().enumerate() {
        ep.query_labels.extend(std::iter::repeat_n(logical, q.len()));
        ep.query_idx.extend(q);
    }
    Ok(ep)
}

/// Write a dataset cache atomically (temp file, then rename).
pub fn write_cache(path: &Path, ds: &LabeledImages) -> Result<()> {
    let (h, w) = ds.image_size();
    let mut buf = Vec::with_capacity(24 + ds.images.len() * 4 + ds.len() * 2);
    buf.extend_from_slice(CACHE_MAGIC);
    for v in [CACHE_VERSION, ds.n_classes as u32, ds.len() as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in ds.images.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &ds.labels {
        let l = u16::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds u16")))?;
        buf.extend_from_slice(&l.to_le_bytes());
    }
    crate::io::write_atomic(path, &buf)
}

pub fn read_cache(path: &Path) -> Result<LabeledImages> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = crate::io::Reader::new(&bytes);
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::Format(format!("{} is not a dataset cache", path.display())));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CACHE_VERSION });
    }
    let (n_classes, n, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let count = n * CHANNELS * h * w;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.f32()? as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.u16()? as usize;
        if l >= n_classes {
            return Err(Error::Format(format!("label {l} >= class count {n_classes}")));
        }
        labels.push(l);
    }
    r.finish()?;
    Ok(LabeledImages { images: Array::new(vec![n, CHANNELS, h, w], data)?, labels, n_classes })
}

/// Shift parameters of every generated domain, written next to the caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub n_per_class: usize,
    pub domains: Vec<Domain>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        crate::io::write_atomic(path, s.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut s = String::new();
        std::fs::File::open(path)?.read_to_string(&mut s)?;
        serde_json::from_str(&s).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use crate::style::compute_style;

    fn rng(tag: u64) -> Rng {
        Streams::new(tag).stream("data", &[])
    }

    #[test]
    fn identity_shift_is_source_statistics() {
        let a = generate_domain(&Domain::source(StyleShift::identity()), 5, 16, &mut rng(1)).unwrap();
        let d = Domain { name: "t".into(), ..Domain::source(StyleShift::identity()) };
        let b = generate_domain(&d, 5, 16, &mut rng(1)).unwrap();
        assert_eq!(a.images, b.images);
        assert!(a.images.data().iter().all(|&v| (0.0..=0.8).contains(&v)));
    }

    #[test]
    fn mean_offset_moves_channel_mean() {
        let base = generate_domain(&Domain::source(StyleShift::identity()), 20, 16, &mut rng(2)).unwrap();
        let mut s = StyleShift::identity();
        s.mean_offset[0] = 0.3;
        let shifted = generate_domain(&Domain::source(s), 20, 16, &mut rng(2)).unwrap();
        let rise = shifted.channel_mean(0) - base.channel_mean(0);
        assert!((rise - 0.3).abs() < 0.02, "{rise}");
        assert!((shifted.channel_mean(1) - base.channel_mean(1)).abs() < 1e-12);
    }

    #[test]
    fn style_centroids_separate_shifted_domains() {
        let a = generate_domain(&Domain::source(StyleShift::identity()), 30, 16, &mut rng(3)).unwrap();
        let shift = StyleShift { mean_offset: [0.2, -0.1, 0.1], scale: [1.5, 0.7, 1.2], texture_freq: 0.0, texture_amp: 0.0 };
        let b = generate_domain(&Domain::source(shift), 30, 16, &mut rng(4)).unwrap();
        let feats = |ds: &LabeledImages| -> Vec<Vec<f64>> {
            let s = compute_style(&ds.images).unwrap();
            (0..ds.len())
                .map(|i| s.mu.data()[i * 3..i * 3 + 3].iter().chain(&s.sigma.data()[i * 3..i * 3 + 3]).copied().collect())
                .collect()
        };
        let (fa, fb) = (feats(&a), feats(&b));
        let half = fa.len() / 2;
        let centroid = |v: &[Vec<f64>]| -> Vec<f64> { (0..6).map(|j| v.iter().map(|r| r[j]).sum::<f64>() / v.len() as f64).collect() };
        // fit on even indices, test on odd
        let even = |v: &[Vec<f64>]| v.iter().step_by(2).cloned().collect::<Vec<_>>();
        let (ca, cb) = (centroid(&even(&fa)), centroid(&even(&fb)));
        let dist = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut correct = 0;
        let mut total = 0;
        for (set, label) in [(&fa, 0), (&fb, 1)] {
            for x in set.iter().skip(1).step_by(2) {
                let pred = if dist(x, &ca) <= dist(x, &cb) { 0 } else { 1 };
                correct += (pred == label) as usize;
                total += 1;
            }
        }
        assert!(half > 0);
        assert!(correct as f64 / total as f64 > 0.95, "{correct}/{total}");
    }

    #[test]
    fn episode_structure() {
        let ds = generate_domain(&Domain::source(StyleShift::identity()), 25, 16, &mut rng(5)).unwrap();
        let ep = sample_episode(&ds, 5, 5, 15, &mut rng(6)).unwrap();
        assert_eq!(ep.len(), 100);
        let full = sample_episode(&ds, 8, 2, 3, &mut rng(7)).unwrap();
        let mut c = full.classes.clone();
        c.sort();
        assert_eq!(c, (0..8).collect::<Vec<_>>());
        assert_eq!(sample_episode(&ds, 5, 5, 15, &mut rng(6)).unwrap(), ep);
    }

    #[test]
    fn insufficient_data() {
        let ds = generate_domain(&Domain::source(StyleShift::identity()), 4, 16, &mut rng(5)).unwrap();
        assert!(matches!(sample_episode(&ds, 5, 2, 3, &mut rng(1)), Err(Error::InsufficientData(_))));
        assert!(matches!(sample_episode(&ds, 9, 1, 1, &mut rng(1)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn cache_round_trip() {
        let ds = generate_domain(&Domain::target("t", StyleShift::identity()), 3, 16, &mut rng(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.svds");
        write_cache(&p, &ds).unwrap();
        assert_eq!(read_cache(&p).unwrap(), ds);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"SVDS");
        assert_eq!(bytes.len(), 24 + ds.images.len() * 4 + ds.len() * 2);
    }

    #[test]
    fn source_and_target_generators_disjoint() {
        let s = Domain::source(StyleShift::identity());
        let t = Domain::target("t", StyleShift::identity());
        assert!(s.generators.iter().all(|g| !t.generators.contains(g)));
    }
}
