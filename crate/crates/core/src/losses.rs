//! Discrepancy and consistency objective terms.
//!
//! Every cross-entropy here averages over the batch. Terms are built on the
//! caller's tape so the total can be differentiated in one sweep.

use crate::array::Array;
use crate::backbone::{discriminate_domain, ModelVars};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// Domain label of source-style (global and crop) features.
pub const SEEN: usize = 0;
/// Domain label of adversarially re-styled features.
pub const UNSEEN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub fsl: f64,
    pub dom: f64,
    pub con: f64,
    pub adv: f64,
    pub total: f64,
}

fn logits_shape(tape: &Tape, logits: Var) -> Result<(usize, usize)> {
    match tape.shape(logits) {
        &[b, n] => Ok((b, n)),
        s => Err(Error::BadRank { expected: 2, got: s.to_vec() }),
    }
}

pub fn zero(tape: &mut Tape) -> Var {
    tape.constant(Array::scalar(0.0))
}

/// Mean hard-label cross-entropy.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, n) = logits_shape(tape, logits)?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!("{} labels for {b} rows", labels.len())));
    }
    let mut onehot = vec![0.0; b * n];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::LabelOutOfRange { label: l, classes: n });
        }
        onehot[i * n + l] = 1.0;
    }
    let onehot = tape.constant(Array::new(vec![b, n], onehot)?);
    soft_target_ce(tape, logits, onehot, b)
}

fn soft_target_ce(tape: &mut Tape, logits: Var, target: Var, b: usize) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(ls, target)?;
    let s = tape.sum_all(picked)?;
    tape.scale(s, -1.0 / b as f64)
}

/// Cross-entropy against the softmax of `target_logits`, which is taken as a
/// constant so no gradient flows into the target.
pub fn soft_cross_entropy(tape: &mut Tape, logits: Var, target_logits: Var) -> Result<Var> {
    let (b, _) = logits_shape(tape, logits)?;
    if tape.shape(target_logits) != tape.shape(logits) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", tape.shape(logits), tape.shape(target_logits))));
    }
    let frozen = tape.constant(tape.value(target_logits).clone());
    let q = tape.softmax(frozen)?;
    soft_target_ce(tape, logits, q, b)
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else { return Ok(zero(tape)) };
    let mut acc = first;
    for &t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// `CE(p_g, y) + sum_i CE(p_i, y)`; `crops` are the crop predictions.
pub fn cls_loss(tape: &mut Tape, crops: &[Var], global: Var, y: &[usize]) -> Result<Var> {
    let mut terms = vec![cross_entropy(tape, global, y)?];
    for &p in crops {
        terms.push(cross_entropy(tape, p, y)?);
    }
    sum_terms(tape, &terms)
}

/// `CE(p_g_fsl, y) + CE(p_adv_fsl, y)`, or only the first term without an attack.
pub fn fsl_loss(tape: &mut Tape, global_fsl: Var, adv_fsl: Option<Var>, y_fsl: &[usize]) -> Result<Var> {
    let g = cross_entropy(tape, global_fsl, y_fsl)?;
    match adv_fsl {
        Some(a) => {
            let a = cross_entropy(tape, a, y_fsl)?;
            tape.add(g, a)
        }
        None => Ok(g),
    }
}

/// Sum of domain cross-entropies over `(features, domain label)` pairs.
pub fn dom_loss(tape: &mut Tape, model: &ModelVars, feats: &[(Var, usize)], train_mode: bool, rng: &mut Rng) -> Result<Var> {
    let mut terms = Vec::with_capacity(feats.len());
    for &(f, d) in feats {
        let logits = discriminate_domain(tape, model, f, train_mode, rng)?;
        let rows = tape.shape(logits)[0];
        terms.push(cross_entropy(tape, logits, &vec![d; rows])?);
    }
    sum_terms(tape, &terms)
}

/// `sum_i [ lambda * CE(p_i, softmax(p_g)) + (1 - lambda) * CE(p_i_fsl, y_fsl) ]`.
pub fn con_loss(
    tape: &mut Tape,
    crop_preds: &[Var],
    global_pred: Var,
    crop_fsl_preds: &[Var],
    y_fsl: &[usize],
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if crop_preds.len() != crop_fsl_preds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} crop predictions vs {} crop episode predictions",
            crop_preds.len(),
            crop_fsl_preds.len()
        )));
    }
    let mut terms = Vec::new();
    for (&p, &pf) in crop_preds.iter().zip(crop_fsl_preds) {
        let a = soft_cross_entropy(tape, p, global_pred)?;
        let a = tape.scale(a, lambda)?;
        let b = cross_entropy(tape, pf, y_fsl)?;
        let b = tape.scale(b, 1.0 - lambda)?;
        terms.push(tape.add(a, b)?);
    }
    sum_terms(tape, &terms)
}

/// `1/(NM*N) * sum p_g * log(p_g / p_adv)` over softmax distributions.
pub fn adv_kl_loss(tape: &mut Tape, adv_fsl: Var, global_fsl: Var) -> Result<Var> {
    let (nm, n) = logits_shape(tape, global_fsl)?;
    if tape.shape(adv_fsl) != [nm, n] {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", tape.shape(adv_fsl), [nm, n])));
    }
    let lg = tape.log_softmax(global_fsl)?;
    let la = tape.log_softmax(adv_fsl)?;
    let pg = tape.exp(lg)?;
    let ratio = tape.sub(lg, la)?;
    let prod = tape.mul(pg, ratio)?;
    let s = tape.sum_all(prod)?;
    tape.scale(s, 1.0 / (nm * n) as f64)
}

/// Value-level KL with probabilities floored at 1e-12 before the log.
pub fn kl_value(p_adv: &[f64], p_g: &[f64], rows: usize, n: usize) -> f64 {
    let mut acc = 0.0;
    for (pg, pa) in p_g.iter().zip(p_adv) {
        let pg = pg.max(1e-12);
        let pa = pa.max(1e-12);
        acc += pg * (pg / pa).ln();
    }
    acc / (rows * n) as f64
}

/// The five term vars, summed in order.
pub struct Objective {
    pub cls: Var,
    pub fsl: Var,
    pub dom: Var,
    pub con: Var,
    pub adv: Var,
}

impl Objective {
    pub fn total(&self, tape: &mut Tape) -> Result<(Var, LossBreakdown)> {
        let total = sum_terms(tape, &[self.cls, self.fsl, self.dom, self.con, self.adv])?;
        let v = |x: Var| tape.value(x).data()[0];
        let b = LossBreakdown { cls: v(self.cls), fsl: v(self.fsl), dom: v(self.dom), con: v(self.con), adv: v(self.adv), total: v(total) };
        Ok((total, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneParams;
    use crate::rng::Streams;
    use rand::Rng as _;

    fn logits(t: &mut Tape, rows: usize, n: usize, vals: &[f64]) -> Var {
        t.leaf(Array::new(vec![rows, n], vals.to_vec()).unwrap())
    }

    fn val(t: &Tape, v: Var) -> f64 {
        t.value(v).data()[0]
    }

    /// Direct softmax-CE oracle.
    fn ce_oracle(z: &[f64], n: usize, y: &[usize]) -> f64 {
        let mut acc = 0.0;
        for (row, &l) in z.chunks(n).zip(y) {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            acc += lse - row[l];
        }
        acc / y.len() as f64
    }

    #[test]
    fn cls_uniform_three_views() {
        let mut t = Tape::new();
        let g = logits(&mut t, 2, 4, &[0.0; 8]);
        let c1 = logits(&mut t, 2, 4, &[0.0; 8]);
        let c2 = logits(&mut t, 2, 4, &[0.0; 8]);
        let l = cls_loss(&mut t, &[c1, c2], g, &[0, 3]).unwrap();
        assert!((val(&t, l) - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cls_confident_is_near_zero() {
        let mut t = Tape::new();
        let g = logits(&mut t, 1, 3, &[50.0, 0.0, 0.0]);
        let l = cls_loss(&mut t, &[], g, &[0]).unwrap();
        assert!(val(&t, l) < 1e-20);
    }

    #[test]
    fn cls_matches_oracle() {
        let mut r = Streams::new(4).stream("z", &[]);
        let z: Vec<f64> = (0..10).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut t = Tape::new();
        let g = logits(&mut t, 2, 5, &z);
        let l = cls_loss(&mut t, &[], g, &[1, 4]).unwrap();
        assert!((val(&t, l) - ce_oracle(&z, 5, &[1, 4])).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let mut t = Tape::new();
        let g = logits(&mut t, 1, 3, &[0.0; 3]);
        assert_eq!(cross_entropy(&mut t, g, &[3]).unwrap_err(), Error::LabelOutOfRange { label: 3, classes: 3 });
    }

    #[test]
    fn fsl_uniform_and_doubling() {
        let mut t = Tape::new();
        let g = logits(&mut t, 5, 5, &[0.0; 25]);
        let a = logits(&mut t, 5, 5, &[0.0; 25]);
        let l = fsl_loss(&mut t, g, Some(a), &[0, 1, 2, 3, 4]).unwrap();
        assert!((val(&t, l) - 2.0 * 5f64.ln()).abs() < 1e-12);

        let z = [0.3, -0.2, 1.1, 0.4];
        let g = logits(&mut t, 2, 2, &z);
        let a = logits(&mut t, 2, 2, &z);
        let both = fsl_loss(&mut t, g, Some(a), &[1, 0]).unwrap();
        let single = fsl_loss(&mut t, g, None, &[1, 0]).unwrap();
        assert_eq!(val(&t, both), 2.0 * val(&t, single));
    }

    #[test]
    fn fsl_hand_softmax() {
        // N = 2, M = 1: logits (1, 0), label 0 -> ln(1 + e^-1)
        let mut t = Tape::new();
        let g = logits(&mut t, 1, 2, &[1.0, 0.0]);
        let a = logits(&mut t, 1, 2, &[0.0, 2.0]);
        let l = fsl_loss(&mut t, g, Some(a), &[0]).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln() + (1.0 + 2f64.exp()).ln();
        assert!((val(&t, l) - want).abs() < 1e-12);
    }

    fn head_model() -> BackboneParams {
        BackboneParams::init(4, &mut Streams::new(2).stream("init", &[]))
    }

    #[test]
    fn dom_zero_head_and_additivity() {
        let mut p = head_model();
        p.dom_weight = Array::zeros(&[64, 2]);
        let mut t = Tape::new();
        let m = p.register(&mut t, false);
        let f = t.constant(Array::full(&[3, 64], 0.5));
        let mut rng = Streams::new(0).stream("d", &[]);
        let one = dom_loss(&mut t, &m, &[(f, SEEN)], false, &mut rng).unwrap();
        assert!((val(&t, one) - 2f64.ln()).abs() < 1e-15);

        let p = head_model();
        let m = p.register(&mut t, false);
        let feats = [(f, SEEN), (f, UNSEEN)];
        let single = dom_loss(&mut t, &m, &feats, false, &mut rng).unwrap();
        let doubled = dom_loss(&mut t, &m, &[feats[0], feats[1], feats[0], feats[1]], false, &mut rng).unwrap();
        assert!((val(&t, doubled) - 2.0 * val(&t, single)).abs() < 1e-12);
    }

    #[test]
    fn dom_matches_manual_ce() {
        let p = head_model();
        let mut r = Streams::new(6).stream("f", &[]);
        let feat: Vec<f64> = (0..128).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let m = p.register(&mut t, false);
        let f = t.constant(Array::new(vec![2, 64], feat.clone()).unwrap());
        let l = dom_loss(&mut t, &m, &[(f, UNSEEN)], false, &mut r).unwrap();
        let mut z = vec![0.0; 4];
        for b in 0..2 {
            for j in 0..2 {
                z[b * 2 + j] = p.dom_bias.data()[j] + (0..64).map(|k| feat[b * 64 + k] * p.dom_weight.data()[k * 2 + j]).sum::<f64>();
            }
        }
        assert!((val(&t, l) - ce_oracle(&z, 2, &[1, 1])).abs() < 1e-12);
    }

    #[test]
    fn con_limits() {
        let mut t = Tape::new();
        let g = logits(&mut t, 2, 3, &[0.5, -1.0, 2.0, 0.0, 0.3, -0.7]);
        let c = logits(&mut t, 2, 3, &[0.5, -1.0, 2.0, 0.0, 0.3, -0.7]);
        let cf = logits(&mut t, 2, 2, &[0.1, 0.9, -0.4, 0.2]);
        let y = [1, 0];

        let pure = con_loss(&mut t, &[c], g, &[cf], &y, 0.0).unwrap();
        let ce = cross_entropy(&mut t, cf, &y).unwrap();
        assert_eq!(val(&t, pure), val(&t, ce));

        let ent = con_loss(&mut t, &[c, c], g, &[cf, cf], &y, 1.0).unwrap();
        let z = t.value(g).data().to_vec();
        let mut h = 0.0;
        for row in z.chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            h -= row.iter().map(|v| v.exp() / s * (v.exp() / s).ln()).sum::<f64>();
        }
        assert!((val(&t, ent) - 2.0 * h / 2.0).abs() < 1e-12);
        assert!(con_loss(&mut t, &[c], g, &[cf], &y, 1.5).is_err());
    }

    #[test]
    fn con_target_is_frozen() {
        let mut t = Tape::new();
        let g = logits(&mut t, 1, 3, &[0.5, -1.0, 2.0]);
        let c = logits(&mut t, 1, 3, &[0.0, 1.0, 0.0]);
        let cf = logits(&mut t, 1, 2, &[0.0, 0.0]);
        let l = con_loss(&mut t, &[c], g, &[cf], &[0], 1.0).unwrap();
        let grads = t.backward(l).unwrap();
        assert!(grads.wrt(g).data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(c).max_abs() > 0.0);
    }

    #[test]
    fn kl_examples() {
        let mut t = Tape::new();
        let z = [0.2, -0.1, 0.7, 1.0, 0.0, -2.0];
        let a = logits(&mut t, 2, 3, &z);
        let g = logits(&mut t, 2, 3, &z);
        let l = adv_kl_loss(&mut t, a, g).unwrap();
        assert_eq!(val(&t, l), 0.0);

        // p_g = (0.8, 0.2), p_adv = (0.5, 0.5)
        let g = logits(&mut t, 1, 2, &[4f64.ln(), 0.0]);
        let a = logits(&mut t, 1, 2, &[0.0, 0.0]);
        let l = adv_kl_loss(&mut t, a, g).unwrap();
        let want = 0.5 * (0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln());
        assert!((val(&t, l) - want).abs() < 1e-12);
        assert!((want - 0.09637).abs() < 1e-5);
        assert!((kl_value(&[0.5, 0.5], &[0.8, 0.2], 1, 2) - want).abs() < 1e-15);
    }

    #[test]
    fn total_is_sum_of_terms() {
        let mut t = Tape::new();
        let vals = [0.7, 1.3, 0.25, 2.0, 0.01];
        let v: Vec<Var> = vals.iter().map(|&x| t.constant(Array::scalar(x))).collect();
        let obj = Objective { cls: v[0], fsl: v[1], dom: v[2], con: v[3], adv: v[4] };
        let (_, b) = obj.total(&mut t).unwrap();
        assert!((b.total - (b.cls + b.fsl + b.dom + b.con + b.adv)).abs() < 1e-12);
    }
}
