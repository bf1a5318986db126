//! Episodic meta-training and meta-testing.

use log::{debug, info};

use crate::array::Array;
use crate::attack::{should_attack, svasp_attack_on_inputs};
use crate::backbone::{classify_global, forward_from_block, relation_classify, BackboneParams, ModelVars};
use crate::config::TrainConfig;
use crate::crop::sample_crops;
use crate::data::{sample_episode, Episode, LabeledImages};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, Objective, SEEN, UNSEEN};
use crate::optim::Adam;
use crate::par;
use crate::rng::{Rng, Streams};
use crate::style::chained_block_transfer;
use crate::tape::{Tape, Var};

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub attacked: bool,
    /// Flattened gradient of the total loss, in parameter order.
    pub grad: Vec<f64>,
}

fn selection(rows: std::ops::Range<usize>, total: usize) -> Array {
    let n = rows.len();
    let mut d = vec![0.0; n * total];
    for (r, i) in rows.enumerate() {
        d[r * total + i] = 1.0;
    }
    Array::new(vec![n, total], d).expect("selection shape")
}

/// Row selectors for support and query features of an episode batch.
struct Split {
    support: Var,
    query: Var,
}

impl Split {
    fn new(tape: &mut Tape, ep: &Episode) -> Self {
        let (ns, total) = (ep.support_idx.len(), ep.len());
        Self { support: tape.constant(selection(0..ns, total)), query: tape.constant(selection(ns..total, total)) }
    }

    fn episode_logits(&self, tape: &mut Tape, feats: Var, ep: &Episode, temperature: f64) -> Result<Var> {
        let s = tape.matmul(self.support, feats)?;
        let q = tape.matmul(self.query, feats)?;
        relation_classify(tape, s, &ep.support_labels, q, ep.n_way, temperature)
    }
}

fn flatten(grads: &[Array]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().copied()).collect()
}

/// One attack-augmented DCO update on `episode` drawn from `ds`.
pub fn meta_train_step(
    model: &mut BackboneParams,
    ds: &LabeledImages,
    episode: &Episode,
    cfg: &TrainConfig,
    opt: &mut Adam,
    rng: &mut Rng,
) -> Result<StepReport> {
    if episode.classes.iter().any(|&c| c >= model.n_classes()) {
        return Err(Error::LabelOutOfRange { label: *episode.classes.iter().max().unwrap_or(&0), classes: model.n_classes() });
    }
    let x = episode.images(ds);
    let y = episode.base_labels();
    let attack_cfg = cfg.attack_config();
    let attack = should_attack(attack_cfg.p_attack, rng);
    let inputs = sample_crops(&x, &attack_cfg.crop, rng)?;
    let adv_styles = if attack { Some(svasp_attack_on_inputs(&inputs, &y, model, &attack_cfg, rng)?) } else { None };

    let mut tape = Tape::new();
    let m: ModelVars = model.register(&mut tape, true);
    let split = Split::new(&mut tape, episode);
    let t = m.proto_temperature;

    let mut feats = Vec::with_capacity(inputs.len());
    for view in &inputs {
        let v = tape.constant(view.clone());
        feats.push(forward_from_block(&mut tape, &m, v, 1)?);
    }
    let (&global_feat, crop_feats) = feats.split_last().expect("global view present");
    let global_pred = classify_global(&mut tape, &m, global_feat)?;
    let global_fsl = split.episode_logits(&mut tape, global_feat, episode, t)?;
    let mut crop_preds = Vec::with_capacity(crop_feats.len());
    let mut crop_fsl = Vec::with_capacity(crop_feats.len());
    for &f in crop_feats {
        crop_preds.push(classify_global(&mut tape, &m, f)?);
        crop_fsl.push(split.episode_logits(&mut tape, f, episode, t)?);
    }

    let adv = match &adv_styles {
        Some(set) => {
            let xv = tape.constant(x.clone());
            let styled = chained_block_transfer(&mut tape, &m, xv, set.styles.len(), &set.styles)?;
            let f = forward_from_block(&mut tape, &m, styled, set.styles.len() + 1)?;
            Some((f, split.episode_logits(&mut tape, f, episode, t)?))
        }
        None => None,
    };

    let mut dom_feats: Vec<(Var, usize)> = crop_feats.iter().map(|&f| (f, SEEN)).collect();
    dom_feats.push((global_feat, SEEN));
    if let Some((f, _)) = adv {
        dom_feats.push((f, UNSEEN));
    }
    let objective = Objective {
        cls: losses::cls_loss(&mut tape, &crop_preds, global_pred, &y)?,
        fsl: losses::fsl_loss(&mut tape, global_fsl, adv.map(|a| a.1), &episode.query_labels)?,
        dom: losses::dom_loss(&mut tape, &m, &dom_feats, true, rng)?,
        con: losses::con_loss(&mut tape, &crop_preds, global_pred, &crop_fsl, &episode.query_labels, cfg.lambda)?,
        adv: match adv {
            Some((_, a)) => losses::adv_kl_loss(&mut tape, a, global_fsl)?,
            None => losses::zero(&mut tape),
        },
    };
    let (total, breakdown) = objective.total(&mut tape)?;
    let g = tape.backward(total)?;
    let grads: Vec<Array> = m.params().into_iter().map(|p| g.wrt(p)).collect();
    opt.update(model.tensors_mut(), &grads)?;
    Ok(StepReport { loss: breakdown, attacked: attack, grad: flatten(&grads) })
}

/// Epoch-mean loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub attacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: BackboneParams,
    pub epochs: Vec<EpochRecord>,
    /// `(epoch, cosine with the previous epoch's mean gradient)`, from epoch 2 on.
    pub cosines: Vec<(usize, f64)>,
}

fn accumulate(acc: &mut LossBreakdown, l: &LossBreakdown, w: f64) {
    acc.cls += w * l.cls;
    acc.fsl += w * l.fsl;
    acc.dom += w * l.dom;
    acc.con += w * l.con;
    acc.adv += w * l.adv;
    acc.total += w * l.total;
}

pub fn init_model(n_classes: usize, cfg: &TrainConfig, streams: &Streams) -> BackboneParams {
    let mut model = BackboneParams::init(n_classes, &mut streams.stream("init", &[]));
    model.dom_dropout = cfg.dropout;
    model.proto_temperature = cfg.temperature;
    model
}

/// Meta-train a fresh model on `source` for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, source: &LabeledImages, streams: &Streams) -> Result<TrainOutput> {
    let mut model = init_model(source.n_classes, cfg, streams);
    let mut opt = Adam::new(&model.tensors(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut cosines = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    for epoch in 1..=cfg.epochs {
        let mut mean_grad = vec![0.0; model.param_count()];
        let mut loss = LossBreakdown::default();
        let mut attacks = 0;
        let w = 1.0 / cfg.episodes_per_epoch as f64;
        for step in 0..cfg.episodes_per_epoch {
            let idx = [epoch as u64, step as u64];
            let ep = sample_episode(source, cfg.n_way, cfg.k_shot, cfg.m_query, &mut streams.stream("episode", &idx))?;
            let r = meta_train_step(&mut model, source, &ep, cfg, &mut opt, &mut streams.stream("step", &idx))?;
            debug!("epoch {epoch} step {step}: total {:.4} attacked {}", r.loss.total, r.attacked);
            accumulate(&mut loss, &r.loss, w);
            attacks += r.attacked as usize;
            mean_grad.iter_mut().zip(&r.grad).for_each(|(a, g)| *a += w * g);
        }
        if let Some(p) = &prev {
            cosines.push((epoch, crate::diagnostics::gradient_cosine(p, &mean_grad)?));
        }
        info!("epoch {epoch}/{}: total {:.4} (attacks {attacks})", cfg.epochs, loss.total);
        epochs.push(EpochRecord { epoch, loss, attacks });
        prev = Some(mean_grad);
    }
    Ok(TrainOutput { model, epochs, cosines })
}

/// Anything that maps an image batch to per-image feature rows.
pub trait Embedder: Sync {
    fn embed(&self, images: &Array) -> Result<Array>;
}

impl Embedder for BackboneParams {
    fn embed(&self, images: &Array) -> Result<Array> {
        BackboneParams::embed(self, images)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_acc: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

/// Mean and 95% half-width `1.96 * s / sqrt(n)` with the sample deviation;
/// zero half-width for a single value.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

const EMBED_CHUNK: usize = 50;

/// Features of every image in `ds`, `[len, D]`. Inference is per-image, so
/// chunking does not change the values.
pub fn embed_dataset<E: Embedder + ?Sized>(model: &E, ds: &LabeledImages) -> Result<Array> {
    let n = ds.len();
    let chunks = n.div_ceil(EMBED_CHUNK);
    let parts = par::map_range(chunks, |c| {
        let idx: Vec<usize> = (c * EMBED_CHUNK..((c + 1) * EMBED_CHUNK).min(n)).collect();
        model.embed(&ds.gather(&idx))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let d = parts[0].shape()[1];
    let data: Vec<f64> = parts.into_iter().flat_map(Array::into_data).collect();
    Array::new(vec![n, d], data)
}

fn rows(feats: &Array, idx: &[usize]) -> Array {
    let d = feats.shape()[1];
    let data = idx.iter().flat_map(|&i| feats.data()[i * d..(i + 1) * d].iter().copied()).collect();
    Array::new(vec![idx.len(), d], data).expect("row gather")
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Query accuracy of `ep` given precomputed features.
pub fn episode_accuracy(feats: &Array, ep: &Episode, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(rows(feats, &ep.support_idx));
    let q = tape.constant(rows(feats, &ep.query_idx));
    let logits = relation_classify(&mut tape, s, &ep.support_labels, q, ep.n_way, temperature)?;
    let l = tape.value(logits);
    let correct = l.data().chunks(ep.n_way).zip(&ep.query_labels).filter(|(r, &y)| argmax(r) == y).count();
    Ok(correct as f64 / ep.query_labels.len() as f64)
}

/// Plain-forward few-shot evaluation; episode `i` uses stream `("meta_test", [i])`.
pub fn meta_test<E: Embedder + ?Sized>(
    model: &E,
    ds: &LabeledImages,
    n_episodes: usize,
    (n_way, k_shot, m_query): (usize, usize, usize),
    temperature: f64,
    streams: &Streams,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("zero evaluation episodes".into()));
    }
    let feats = embed_dataset(model, ds)?;
    let accs = par::map_range(n_episodes, |i| {
        let ep = sample_episode(ds, n_way, k_shot, m_query, &mut streams.stream("meta_test", &[i as u64]))?;
        episode_accuracy(&feats, &ep, temperature)
    });
    let accuracies = accs.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean_acc, ci95) = mean_ci95(&accuracies);
    Ok(EvalReport { mean_acc, ci95, accuracies })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, Domain, StyleShift};

    struct Constant;
    impl Embedder for Constant {
        fn embed(&self, images: &Array) -> Result<Array> {
            Ok(Array::full(&[images.shape()[0], 4], 1.0))
        }
    }

    /// One-hot of the class, read back from a pixel tag.
    struct Oracle;
    impl Embedder for Oracle {
        fn embed(&self, images: &Array) -> Result<Array> {
            let b = images.shape()[0];
            let per = images.len() / b;
            let mut d = vec![0.0; b * 8];
            for i in 0..b {
                let class = images.data()[i * per].round() as usize;
                d[i * 8 + class] = 1.0;
            }
            Array::new(vec![b, 8], d)
        }
    }

    fn small_source(n: usize) -> LabeledImages {
        generate_domain(&Domain::source(StyleShift::identity()), n, 16, &mut Streams::new(3).stream("d", &[])).unwrap()
    }

    #[test]
    fn constant_features_score_chance() {
        let ds = small_source(20);
        let r = meta_test(&Constant, &ds, 50, (5, 5, 15), 64.0, &Streams::new(1)).unwrap();
        assert!(r.accuracies.iter().all(|&a| a == 0.2));
        assert!((r.mean_acc - 0.2).abs() < 1e-12 && r.ci95 < 1e-12);
    }

    #[test]
    fn oracle_features_are_perfect() {
        let mut ds = small_source(20);
        let per = ds.images.len() / ds.len();
        let labels = ds.labels.clone();
        for (i, l) in labels.into_iter().enumerate() {
            ds.images.data_mut()[i * per] = l as f64;
        }
        let r = meta_test(&Oracle, &ds, 30, (5, 2, 3), 64.0, &Streams::new(1)).unwrap();
        assert_eq!(r.mean_acc, 1.0);
    }

    #[test]
    fn ci_conventions() {
        assert_eq!(mean_ci95(&[0.4]), (0.4, 0.0));
        let (m, c) = mean_ci95(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((c - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn argmax_takes_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { n_way: 3, k_shot: 2, m_query: 2, image_size: 16, p_attack: 1.0, ..TrainConfig::default() }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = small_source(6);
        let cfg = TrainConfig { lr: 0.0, ..tiny_cfg() };
        let streams = Streams::new(5);
        let mut model = init_model(ds.n_classes, &cfg, &streams);
        let before = model.clone();
        let mut opt = Adam::new(&model.tensors(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps);
        let ep = sample_episode(&ds, 3, 2, 2, &mut streams.stream("e", &[])).unwrap();
        let r = meta_train_step(&mut model, &ds, &ep, &cfg, &mut opt, &mut streams.stream("s", &[])).unwrap();
        assert_eq!(model, before);
        assert!(r.attacked && r.loss.total.is_finite() && r.loss.adv >= 0.0);
        let sum = r.loss.cls + r.loss.fsl + r.loss.dom + r.loss.con + r.loss.adv;
        assert!((sum - r.loss.total).abs() < 1e-12);
        assert_eq!(r.grad.len(), model.param_count());
    }

    #[test]
    fn seeded_steps_are_identical() {
        let ds = small_source(6);
        let cfg = tiny_cfg();
        let run = || {
            let streams = Streams::new(8);
            let mut model = init_model(ds.n_classes, &cfg, &streams);
            let mut opt = Adam::new(&model.tensors(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps);
            let ep = sample_episode(&ds, 3, 2, 2, &mut streams.stream("e", &[])).unwrap();
            meta_train_step(&mut model, &ds, &ep, &cfg, &mut opt, &mut streams.stream("s", &[])).unwrap();
            model
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn no_attack_skips_adversarial_terms() {
        let ds = small_source(6);
        let cfg = TrainConfig { p_attack: 0.0, ..tiny_cfg() };
        let streams = Streams::new(5);
        let mut model = init_model(ds.n_classes, &cfg, &streams);
        let mut opt = Adam::new(&model.tensors(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps);
        let ep = sample_episode(&ds, 3, 2, 2, &mut streams.stream("e", &[])).unwrap();
        let r = meta_train_step(&mut model, &ds, &ep, &cfg, &mut opt, &mut streams.stream("s", &[])).unwrap();
        assert!(!r.attacked);
        assert_eq!(r.loss.adv, 0.0);
    }

    #[test]
    fn meta_test_leaves_model_unchanged() {
        let ds = small_source(20);
        let cfg = tiny_cfg();
        let model = init_model(ds.n_classes, &cfg, &Streams::new(1));
        let before = model.clone();
        let a = meta_test(&model, &ds, 3, (5, 5, 15), 64.0, &Streams::new(2)).unwrap();
        let b = meta_test(&model, &ds, 3, (5, 5, 15), 64.0, &Streams::new(2)).unwrap();
        assert_eq!(model, before);
        assert_eq!(a, b);
        assert!(a.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    /// Ten updates on one source episode with the default config.
    #[test]
    fn smoke_run_mostly_decreases() {
        let cfg = TrainConfig::default();
        let streams = Streams::new(cfg.seed);
        let ds = generate_domain(&Domain::source(StyleShift::identity()), 20, 32, &mut streams.stream("data", &[])).unwrap();
        let mut model = init_model(ds.n_classes, &cfg, &streams);
        let mut opt = Adam::new(&model.tensors(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps);
        let ep = sample_episode(&ds, 5, 5, 15, &mut streams.stream("episode", &[0])).unwrap();
        let totals: Vec<f64> = (0..11u64)
            .map(|step| meta_train_step(&mut model, &ds, &ep, &cfg, &mut opt, &mut streams.stream("step", &[step])).unwrap().loss.total)
            .collect();
        let down = totals.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down >= 7, "{down} decreases in {totals:?}");
    }
}
