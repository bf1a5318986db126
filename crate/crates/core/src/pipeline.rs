//! End-to-end runs shared by the command line and the acceptance suite.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::backbone::{classify_global, relation_classify, BackboneParams};
use crate::config::TrainConfig;
use crate::data::{generate_domain, sample_episode, Domain, Episode, LabeledImages};
use crate::diagnostics::{self, LandscapeGrid};
use crate::error::Result;
use crate::losses;
use crate::rng::Streams;
use crate::tape::Tape;
use crate::train::{self, EpochRecord, TrainOutput};

pub struct Datasets {
    pub source: LabeledImages,
    pub targets: Vec<(String, LabeledImages)>,
}

/// Domain `i` of `[source, targets...]` draws from stream `("data", [i])`.
pub fn generate_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    let streams = Streams::new(cfg.seed);
    let gen = |i: u64, d: &Domain| generate_domain(d, cfg.n_per_class, cfg.image_size, &mut streams.stream("data", &[i]));
    let source = gen(0, &cfg.source_domain())?;
    let mut targets = Vec::new();
    for (i, d) in cfg.target_domains().iter().enumerate() {
        targets.push((d.name.clone(), gen(i as u64 + 1, d)?));
    }
    Ok(Datasets { source, targets })
}

/// Training seeds depend on the seed only, so variants share episodes.
pub fn train_model(cfg: &TrainConfig, source: &LabeledImages) -> Result<TrainOutput> {
    train::train(cfg, source, &Streams::new(cfg.seed).child("train", &[]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub domain: String,
    pub n_episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
}

/// Evaluation episodes depend on the seed and the domain only.
pub fn evaluate(model: &BackboneParams, cfg: &TrainConfig, domain: &str, ds: &LabeledImages) -> Result<EvalEntry> {
    let streams = Streams::new(cfg.seed).child("eval", &[]).child(domain, &[]);
    let r = train::meta_test(model, ds, cfg.eval_episodes, (cfg.n_way, cfg.k_shot, cfg.m_query), cfg.temperature, &streams)?;
    Ok(EvalEntry { domain: domain.to_string(), n_episodes: cfg.eval_episodes, mean_acc: r.mean_acc, ci95: r.ci95 })
}

pub fn eval_json(entries: &[EvalEntry]) -> String {
    let mut s = serde_json::to_string_pretty(entries).expect("serializable");
    s.push('\n');
    s
}

pub fn losses_csv(epochs: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,cls,fsl,dom,con,adv,total,attacks\n");
    for e in epochs {
        let l = &e.loss;
        writeln!(s, "{},{},{},{},{},{},{},{}", e.epoch, l.cls, l.fsl, l.dom, l.con, l.adv, l.total, e.attacks).expect("string write");
    }
    s
}

/// Mean cosine over the last `n` recorded epochs.
pub fn final_cosine(cosines: &[(usize, f64)], n: usize) -> f64 {
    let tail = &cosines[cosines.len().saturating_sub(n)..];
    tail.iter().map(|c| c.1).sum::<f64>() / tail.len().max(1) as f64
}

fn with_tensors(model: &BackboneParams, tensors: &[Array]) -> BackboneParams {
    let mut m = model.clone();
    for (dst, src) in m.tensors_mut().into_iter().zip(tensors) {
        *dst = src.clone();
    }
    m
}

/// Clean classification plus few-shot loss in eval mode, averaged over fixed
/// episodes. This is the loss surface the landscape probe walks.
pub fn probe_loss(model: &BackboneParams, ds: &LabeledImages, episodes: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        let feats = model.embed(&ep.images(ds))?;
        let mut tape = Tape::new();
        let m = model.register(&mut tape, false);
        let ns = ep.support_idx.len();
        let d = feats.shape()[1];
        let f = tape.constant(feats.clone());
        let s = tape.constant(Array::new(vec![ns, d], feats.data()[..ns * d].to_vec())?);
        let q = tape.constant(Array::new(vec![ep.query_idx.len(), d], feats.data()[ns * d..].to_vec())?);
        let pred = classify_global(&mut tape, &m, f)?;
        let cls = losses::cross_entropy(&mut tape, pred, &ep.base_labels())?;
        let logits = relation_classify(&mut tape, s, &ep.support_labels, q, ep.n_way, model.proto_temperature)?;
        let fsl = losses::cross_entropy(&mut tape, logits, &ep.query_labels)?;
        total += tape.value(cls).item()? + tape.value(fsl).item()?;
    }
    Ok(total / episodes.len() as f64)
}

/// Loss landscape around `model` on source episodes and probe directions that
/// depend on the seed only, so two models are compared on equal terms.
pub fn landscape(model: &BackboneParams, cfg: &TrainConfig, source: &LabeledImages) -> Result<LandscapeGrid> {
    let streams = Streams::new(cfg.seed).child("landscape", &[]);
    let episodes = (0..cfg.landscape_episodes)
        .map(|i| sample_episode(source, cfg.n_way, cfg.k_shot, cfg.m_query, &mut streams.stream("episode", &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let params: Vec<Array> = model.tensors().into_iter().cloned().collect();
    let eval = |p: &[Array]| probe_loss(&with_tensors(model, p), source, &episodes);
    diagnostics::loss_landscape(&params, eval, cfg.landscape_radius, cfg.landscape_resolution, &mut streams.stream("directions", &[]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            n_per_class: 20,
            image_size: 16,
            eval_episodes: 3,
            landscape_resolution: 3,
            landscape_episodes: 1,
            ..Default::default()
        }
    }

    #[test]
    fn datasets_are_reproducible() {
        let a = generate_datasets(&tiny()).unwrap();
        let b = generate_datasets(&tiny()).unwrap();
        assert_eq!(a.source.images, b.source.images);
        assert_eq!(a.targets.len(), 3);
        assert_eq!(a.targets[2].1.labels, b.targets[2].1.labels);
    }

    #[test]
    fn probe_center_matches_direct_loss() {
        let cfg = tiny();
        let ds = generate_datasets(&cfg).unwrap();
        let model = train::init_model(ds.source.n_classes, &cfg, &Streams::new(1));
        let g = landscape(&model, &cfg, &ds.source).unwrap();
        let streams = Streams::new(cfg.seed).child("landscape", &[]);
        let ep = sample_episode(&ds.source, 5, 5, 15, &mut streams.stream("episode", &[0])).unwrap();
        assert_eq!(g.center(), probe_loss(&model, &ds.source, &[ep]).unwrap());
        assert!(g.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn final_cosine_averages_tail() {
        let c = [(2, 0.0), (3, 1.0), (4, 0.5)];
        assert_eq!(final_cosine(&c, 2), 0.75);
        assert_eq!(final_cosine(&c, 10), 0.5);
    }
}
