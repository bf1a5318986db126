//! Plaintext `key = value` training configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::AttackConfig;
use crate::crop::CropConfig;
use crate::data::{Domain, StyleShift};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Svasp,
    Baseline,
    GlobalOnly,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svasp" => Ok(Self::Svasp),
            "baseline" => Ok(Self::Baseline),
            "global-only" => Ok(Self::GlobalOnly),
            _ => Err(Error::InvalidArgument(format!("unknown variant {s:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Svasp => "svasp",
            Self::Baseline => "baseline",
            Self::GlobalOnly => "global-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: Variant,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub crops: usize,
    pub xi: f64,
    pub lambda: f64,
    pub eps_init: f64,
    pub kappa_set: Vec<f64>,
    pub p_attack: f64,
    pub s_low: f64,
    pub s_high: f64,
    pub aspect_low: f64,
    pub aspect_high: f64,
    pub dropout: f64,
    pub temperature: f64,
    pub image_size: usize,
    pub n_per_class: usize,
    pub eval_episodes: usize,
    pub landscape_radius: f64,
    pub landscape_resolution: usize,
    pub landscape_episodes: usize,
    pub source_shift: StyleShift,
    pub target_shifts: [StyleShift; 3],
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            variant: Variant::Svasp,
            n_way: 5,
            k_shot: 5,
            m_query: 15,
            epochs: 40,
            episodes_per_epoch: 30,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            crops: 2,
            xi: 0.1,
            lambda: 0.2,
            eps_init: 16.0 / 255.0,
            kappa_set: vec![0.008, 0.08, 0.8],
            p_attack: 0.2,
            s_low: 0.2,
            s_high: 0.4,
            aspect_low: 3.0 / 4.0,
            aspect_high: 4.0 / 3.0,
            dropout: 0.5,
            temperature: 64.0,
            image_size: 32,
            n_per_class: 100,
            eval_episodes: 200,
            landscape_radius: 1.0,
            landscape_resolution: 21,
            landscape_episodes: 4,
            source_shift: StyleShift::identity(),
            target_shifts: [
                StyleShift { mean_offset: [0.05, 0.0, -0.05], scale: [1.1, 0.9, 1.0], texture_freq: 0.0, texture_amp: 0.0 },
                StyleShift { mean_offset: [0.15, -0.1, 0.1], scale: [1.4, 0.7, 1.2], texture_freq: 6.0, texture_amp: 0.05 },
                StyleShift { mean_offset: [0.25, -0.15, 0.2], scale: [1.8, 0.5, 1.5], texture_freq: 10.0, texture_amp: 0.1 },
            ],
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',').map(|x| parse_num(x.trim())).collect()
}

fn parse_triple(v: &str) -> std::result::Result<[f64; 3], String> {
    let l = parse_list(v)?;
    l.try_into().map_err(|l: Vec<f64>| format!("expected 3 values, got {}", l.len()))
}

fn parse_pair(v: &str) -> std::result::Result<(f64, f64), String> {
    match parse_list(v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        l => Err(format!("expected 2 values, got {}", l.len())),
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl TrainConfig {
    fn shift_mut(&mut self, domain: &str) -> Option<&mut StyleShift> {
        match domain {
            "source" => Some(&mut self.source_shift),
            "target1" => Some(&mut self.target_shifts[0]),
            "target2" => Some(&mut self.target_shifts[1]),
            "target3" => Some(&mut self.target_shifts[2]),
            _ => None,
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(v)?,
            "variant" => self.variant = v.parse().map_err(|e: Error| e.to_string())?,
            "n_way" => self.n_way = parse_num(v)?,
            "k_shot" => self.k_shot = parse_num(v)?,
            "m_query" => self.m_query = parse_num(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse_num(v)?,
            "lr" => self.lr = parse_num(v)?,
            "betas" => (self.beta1, self.beta2) = parse_pair(v)?,
            "adam_eps" => self.adam_eps = parse_num(v)?,
            "crops" => self.crops = parse_num(v)?,
            "xi" => self.xi = parse_num(v)?,
            "lambda" => self.lambda = parse_num(v)?,
            "eps_init" => self.eps_init = parse_num(v)?,
            "kappa_set" => self.kappa_set = parse_list(v)?,
            "p_attack" => self.p_attack = parse_num(v)?,
            "crop_scale" => (self.s_low, self.s_high) = parse_pair(v)?,
            "crop_aspect" => (self.aspect_low, self.aspect_high) = parse_pair(v)?,
            "dropout" => self.dropout = parse_num(v)?,
            "temperature" => self.temperature = parse_num(v)?,
            "image_size" => self.image_size = parse_num(v)?,
            "n_per_class" => self.n_per_class = parse_num(v)?,
            "eval_episodes" => self.eval_episodes = parse_num(v)?,
            "landscape_radius" => self.landscape_radius = parse_num(v)?,
            "landscape_resolution" => self.landscape_resolution = parse_num(v)?,
            "landscape_episodes" => self.landscape_episodes = parse_num(v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => {
                let (domain, field) = key.split_once('.').ok_or_else(|| format!("unknown key {key:?}"))?;
                let s = self.shift_mut(domain).ok_or_else(|| format!("unknown key {key:?}"))?;
                match field {
                    "offset" => s.mean_offset = parse_triple(v)?,
                    "scale" => s.scale = parse_triple(v)?,
                    "texture" => (s.texture_freq, s.texture_amp) = parse_pair(v)?,
                    _ => return Err(format!("unknown key {key:?}")),
                }
            }
        }
        Ok(())
    }

    /// Parse config text on top of the defaults, then validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig { line: line_no, msg: format!("expected `key = value`, got {line:?}") })?;
            let k = k.trim();
            cfg.set(k, v.trim()).map_err(|msg| Error::InvalidConfig { line: line_no, msg })?;
            lines.push((k.to_string(), line_no));
        }
        cfg.validate().map_err(|e| match e {
            Error::InvalidConfig { line: 0, msg } => {
                let key = msg.split(':').next().unwrap_or("");
                let line = lines.iter().rev().find(|(k, _)| k == key).map_or(0, |&(_, l)| l);
                Error::InvalidConfig { line, msg }
            }
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::InvalidConfig { line: 0, msg: format!("{key}: {why}") });
        if self.n_way < 2 {
            return bad("n_way", "must be at least 2");
        }
        if self.k_shot == 0 || self.m_query == 0 {
            return bad(if self.k_shot == 0 { "k_shot" } else { "m_query" }, "must be positive");
        }
        if self.n_way > 5 {
            return bad("n_way", "target domains have 5 classes");
        }
        if self.n_per_class < self.k_shot + self.m_query {
            return bad("n_per_class", "fewer instances than k_shot + m_query");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas", "must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.dropout) || self.dropout == 1.0 {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.temperature <= 0.0 {
            return bad("temperature", "must be positive");
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return bad("image_size", "must be a positive multiple of 16");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes", "must be positive");
        }
        if self.landscape_resolution.is_multiple_of(2) {
            return bad("landscape_resolution", "must be odd");
        }
        if self.landscape_radius <= 0.0 {
            return bad("landscape_radius", "must be positive");
        }
        if self.landscape_episodes == 0 {
            return bad("landscape_episodes", "must be positive");
        }
        self.crop_config().validate().or_else(|e| bad("crop_scale", &e.to_string()))?;
        self.attack_config().validate().or_else(|e| bad("kappa_set", &e.to_string()))?;
        Ok(())
    }

    pub fn crop_config(&self) -> CropConfig {
        CropConfig { k: self.crops, s_low: self.s_low, s_high: self.s_high, aspect_low: self.aspect_low, aspect_high: self.aspect_high }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            xi: self.xi,
            kappa_set: self.kappa_set.clone(),
            eps_init: self.eps_init,
            p_attack: self.p_attack,
            crop: self.crop_config(),
        }
    }

    /// Effective config for `variant`: baseline never attacks, global-only
    /// drops the crop views and their ensemble weight.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        match variant {
            Variant::Svasp => {}
            Variant::Baseline => c.p_attack = 0.0,
            Variant::GlobalOnly => {
                c.xi = 0.0;
                c.crops = 0;
            }
        }
        c
    }

    pub fn source_domain(&self) -> Domain {
        Domain::source(self.source_shift.clone())
    }

    pub fn target_domains(&self) -> Vec<Domain> {
        self.target_shifts.iter().enumerate().map(|(i, s)| Domain::target(&format!("target{}", i + 1), s.clone())).collect()
    }

    /// Serialize every field; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("variant", self.variant.to_string());
        kv("n_way", self.n_way.to_string());
        kv("k_shot", self.k_shot.to_string());
        kv("m_query", self.m_query.to_string());
        kv("epochs", self.epochs.to_string());
        kv("episodes_per_epoch", self.episodes_per_epoch.to_string());
        kv("lr", self.lr.to_string());
        kv("betas", join(&[self.beta1, self.beta2]));
        kv("adam_eps", self.adam_eps.to_string());
        kv("crops", self.crops.to_string());
        kv("xi", self.xi.to_string());
        kv("lambda", self.lambda.to_string());
        kv("eps_init", self.eps_init.to_string());
        kv("kappa_set", join(&self.kappa_set));
        kv("p_attack", self.p_attack.to_string());
        kv("crop_scale", join(&[self.s_low, self.s_high]));
        kv("crop_aspect", join(&[self.aspect_low, self.aspect_high]));
        kv("dropout", self.dropout.to_string());
        kv("temperature", self.temperature.to_string());
        kv("image_size", self.image_size.to_string());
        kv("n_per_class", self.n_per_class.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("landscape_radius", self.landscape_radius.to_string());
        kv("landscape_resolution", self.landscape_resolution.to_string());
        kv("landscape_episodes", self.landscape_episodes.to_string());
        let shifts =
            std::iter::once(("source", &self.source_shift)).chain(["target1", "target2", "target3"].into_iter().zip(&self.target_shifts));
        for (name, sh) in shifts {
            kv(&format!("{name}.offset"), join(&sh.mean_offset));
            kv(&format!("{name}.scale"), join(&sh.scale));
            kv(&format!("{name}.texture"), join(&[sh.texture_freq, sh.texture_amp]));
        }
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.crops, c.xi, c.lambda, c.p_attack), (2, 0.1, 0.2, 0.2));
        assert_eq!(c.kappa_set, vec![0.008, 0.08, 0.8]);
        assert_eq!(c.eps_init, 16.0 / 255.0);
        assert_eq!((c.s_low, c.s_high), (0.2, 0.4));
        assert_eq!((c.lr, c.beta1, c.beta2, c.adam_eps), (1e-3, 0.9, 0.999, 1e-8));
        c.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut c = TrainConfig::default().with_variant(Variant::GlobalOnly);
        c.lr = 0.1 + 0.2;
        c.target_shifts[1].texture_amp = 1.0 / 3.0;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = TrainConfig::parse("# header\n\nseed = 9 # trailing\nkappa_set = 0.1,0.2\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.kappa_set, vec![0.1, 0.2]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = TrainConfig::parse("seed = 1\n\nlr = fast\n").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { line: 3, .. }), "{e:?}");
        let e = TrainConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { line: 2, .. }), "{e:?}");
        let e = TrainConfig::parse("lambda = 1.5\n").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { line: 1, .. }), "{e:?}");
        let e = TrainConfig::parse("no equals sign\n").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { line: 1, .. }), "{e:?}");
    }

    #[test]
    fn variant_overrides() {
        let c = TrainConfig::default();
        assert_eq!(c.with_variant(Variant::Baseline).p_attack, 0.0);
        let g = c.with_variant(Variant::GlobalOnly);
        assert_eq!((g.xi, g.crops), (0.0, 0));
        assert_eq!(c.with_variant(Variant::Svasp), c);
    }

    #[test]
    fn shift_keys() {
        let c = TrainConfig::parse("target3.offset = 0.3, 0, 0\ntarget3.texture = 4, 0.2\n").unwrap();
        assert_eq!(c.target_shifts[2].mean_offset, [0.3, 0.0, 0.0]);
        assert_eq!((c.target_shifts[2].texture_freq, c.target_shifts[2].texture_amp), (4.0, 0.2));
        assert_eq!(c.target_domains()[2].name, "target3");
    }
}
