//! Random resized crops that, with the clean image, form the attack input set.

use rand::Rng as _;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropConfig {
    pub k: usize,
    pub s_low: f64,
    pub s_high: f64,
    pub aspect_low: f64,
    pub aspect_high: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { k: 2, s_low: 0.2, s_high: 0.4, aspect_low: 3.0 / 4.0, aspect_high: 4.0 / 3.0 }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        let area_ok = self.s_low > 0.0 && self.s_low <= self.s_high && self.s_high <= 1.0;
        let aspect_ok = self.aspect_low > 0.0 && self.aspect_low <= 1.0 && 1.0 <= self.aspect_high;
        if !area_ok || !aspect_ok {
            return Err(Error::InvalidArgument(format!("bad crop config {self:?}")));
        }
        Ok(())
    }
}

/// A crop window in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropRect {
    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        self.height * self.width / (h * w) as f64
    }
}

/// Draw one crop window for an `h x w` image.
pub fn sample_rect(h: usize, w: usize, cfg: &CropConfig, rng: &mut Rng) -> Result<CropRect> {
    let area_frac = if cfg.s_low < cfg.s_high { rng.random_range(cfg.s_low..=cfg.s_high) } else { cfg.s_low };
    let aspect = if cfg.aspect_low < cfg.aspect_high { rng.random_range(cfg.aspect_low..=cfg.aspect_high) } else { cfg.aspect_low };
    let area = area_frac * (h * w) as f64;
    let width = (area * aspect).sqrt().min(w as f64);
    let height = (area / aspect).sqrt().min(h as f64);
    if width < 1.0 || height < 1.0 {
        return Err(Error::DegenerateCrop(format!("{height:.3} x {width:.3} window in {h} x {w}")));
    }
    let top = rng.random::<f64>() * (h as f64 - height);
    let left = rng.random::<f64>() * (w as f64 - width);
    Ok(CropRect { top, left, height, width })
}

/// Bilinearly resample `rect` of one `[C, H, W]` image back to `H x W`.
fn resize_crop(src: &[f64], c: usize, h: usize, w: usize, rect: &CropRect, out: &mut [f64]) {
    let sy = rect.height / h as f64;
    let sx = rect.width / w as f64;
    for y in 0..h {
        let fy = (rect.top + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = (rect.left + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
                let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
                out[ch * h * w + y * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
}

/// Returns `k` independently cropped-and-resized copies of the batch `x`
/// followed by `x` itself. Each image gets its own window per crop.
pub fn sample_crops(x: &Array, cfg: &CropConfig, rng: &mut Rng) -> Result<Vec<Array>> {
    cfg.validate()?;
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::BadRank { expected: 4, got: s.to_vec() });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < 4 || w < 4 {
        return Err(Error::DegenerateCrop(format!("image {h} x {w} smaller than 4 x 4")));
    }
    let per = c * h * w;
    let mut out = Vec::with_capacity(cfg.k + 1);
    for _ in 0..cfg.k {
        let mut data = vec![0.0; x.len()];
        for i in 0..b {
            let rect = sample_rect(h, w, cfg, rng)?;
            resize_crop(&x.data()[i * per..(i + 1) * per], c, h, w, &rect, &mut data[i * per..(i + 1) * per]);
        }
        out.push(Array::new(s.to_vec(), data)?);
    }
    out.push(x.clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    fn image(b: usize, seed: u64) -> Array {
        let mut r = Streams::new(seed).stream("img", &[]);
        Array::new(vec![b, 3, 16, 16], (0..b * 768).map(|_| r.random_range(-1.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn zero_crops_returns_input() {
        let x = image(2, 1);
        let cfg = CropConfig { k: 0, ..Default::default() };
        let out = sample_crops(&x, &cfg, &mut Streams::new(0).stream("c", &[])).unwrap();
        assert_eq!(out, vec![x]);
    }

    #[test]
    fn full_area_crop_is_identity() {
        let x = image(2, 2);
        let cfg = CropConfig { k: 3, s_low: 1.0, s_high: 1.0, aspect_low: 1.0, aspect_high: 1.0 };
        let out = sample_crops(&x, &cfg, &mut Streams::new(0).stream("c", &[])).unwrap();
        assert_eq!(out.len(), 4);
        for crop in &out {
            for (a, b) in crop.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn area_fraction_within_bounds() {
        let cfg = CropConfig::default();
        let mut rng = Streams::new(9).stream("rect", &[]);
        for _ in 0..1000 {
            let r = sample_rect(32, 32, &cfg, &mut rng).unwrap();
            let a = r.area_fraction(32, 32);
            assert!((0.2 - 1e-12..=0.4 + 1e-12).contains(&a), "{a}");
            assert!(r.top >= 0.0 && r.top + r.height <= 32.0);
            assert!(r.left >= 0.0 && r.left + r.width <= 32.0);
        }
    }

    #[test]
    fn tiny_images_rejected() {
        let x = Array::zeros(&[1, 3, 3, 3]);
        let err = sample_crops(&x, &CropConfig::default(), &mut Streams::new(0).stream("c", &[])).unwrap_err();
        assert!(matches!(err, Error::DegenerateCrop(_)));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = CropConfig { s_low: 0.5, s_high: 0.4, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
