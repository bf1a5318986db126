//! Four-block convolutional feature extractor and its three heads.
//!
//! Block `i` is conv3x3 -> relu -> avgpool2x2. Blocks are numbered from 1 in
//! the public API because that is how style prefixes refer to them.

use rand_distr::{Distribution, Normal};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

pub const BLOCK_CHANNELS: [usize; 4] = [8, 16, 32, 64];
pub const FEATURE_DIM: usize = 64;
pub const IN_CHANNELS: usize = 3;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const DEFAULT_TEMPERATURE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: Array,
    pub bias: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub blocks: Vec<ConvBlock>,
    /// `[64, N_c]`
    pub fc_weight: Array,
    pub fc_bias: Array,
    /// `[64, 2]`
    pub dom_weight: Array,
    pub dom_bias: Array,
    pub dom_dropout: f64,
    pub proto_temperature: f64,
}

fn normal_array(shape: &[usize], std: f64, rng: &mut Rng) -> Array {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Array::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("init shape")
}

impl BackboneParams {
    /// He-initialized convolutions, small Gaussian heads, zero biases.
    pub fn init(n_classes: usize, rng: &mut Rng) -> Self {
        let mut cin = IN_CHANNELS;
        let blocks = BLOCK_CHANNELS
            .iter()
            .map(|&cout| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let b = ConvBlock { weight: normal_array(&[cout, cin, 3, 3], std, rng), bias: Array::zeros(&[cout]) };
                cin = cout;
                b
            })
            .collect();
        let head_std = (1.0 / FEATURE_DIM as f64).sqrt();
        Self {
            blocks,
            fc_weight: normal_array(&[FEATURE_DIM, n_classes], head_std, rng),
            fc_bias: Array::zeros(&[n_classes]),
            dom_weight: normal_array(&[FEATURE_DIM, 2], head_std, rng),
            dom_bias: Array::zeros(&[2]),
            dom_dropout: DEFAULT_DROPOUT,
            proto_temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.fc_weight.shape()[1]
    }

    /// Names of the trainable tensors, in [`BackboneParams::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=self.blocks.len() {
            names.push(format!("block{i}.weight"));
            names.push(format!("block{i}.bias"));
        }
        names.extend(["fc.weight", "fc.bias", "dom.weight", "dom.bias"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&Array> {
        let mut v: Vec<&Array> = self.blocks.iter().flat_map(|b| [&b.weight, &b.bias]).collect();
        v.extend([&self.fc_weight, &self.fc_bias, &self.dom_weight, &self.dom_bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut v: Vec<&mut Array> = self.blocks.iter_mut().flat_map(|b| [&mut b.weight, &mut b.bias]).collect();
        v.extend([&mut self.fc_weight, &mut self.fc_bias, &mut self.dom_weight, &mut self.dom_bias]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|a| a.len()).sum()
    }

    /// Put every tensor on `tape`, as gradient leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |a: &Array| if trainable { tape.leaf(a.clone()) } else { tape.constant(a.clone()) };
        let blocks = self.blocks.iter().map(|b| (put(&b.weight), put(&b.bias))).collect();
        let fc = (put(&self.fc_weight), put(&self.fc_bias));
        let dom = (put(&self.dom_weight), put(&self.dom_bias));
        ModelVars { blocks, fc, dom, dom_dropout: self.dom_dropout, proto_temperature: self.proto_temperature }
    }

    /// Eval-mode 64-d embeddings of a `[B, 3, H, W]` image batch.
    pub fn embed(&self, images: &Array) -> Result<Array> {
        let mut t = Tape::new();
        let m = self.register(&mut t, false);
        let x = t.constant(images.clone());
        let f = forward_from_block(&mut t, &m, x, 1)?;
        Ok(t.value(f).clone())
    }
}

/// Tape handles for one registration of [`BackboneParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub blocks: Vec<(Var, Var)>,
    pub fc: (Var, Var),
    pub dom: (Var, Var),
    pub dom_dropout: f64,
    pub proto_temperature: f64,
}

impl ModelVars {
    /// Same order as [`BackboneParams::tensors`].
    pub fn params(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.blocks.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend([self.fc.0, self.fc.1, self.dom.0, self.dom.1]);
        v
    }
}

/// Apply block `block` (1-based) to `x`.
pub fn block_forward(tape: &mut Tape, m: &ModelVars, block: usize, x: Var) -> Result<Var> {
    let &(w, b) = m.blocks.get(block.wrapping_sub(1)).ok_or_else(|| Error::InvalidArgument(format!("block {block} out of range")))?;
    let c = tape.conv2d(x, w, Some(b))?;
    let r = tape.relu(c)?;
    tape.avgpool2d(r)
}

fn block_in_channels(m: &ModelVars, tape: &Tape, block: usize) -> usize {
    tape.shape(m.blocks[block - 1].0)[1]
}

/// Blocks `start_block..=4` followed by global average pooling, `[B, 64]`.
pub fn forward_from_block(tape: &mut Tape, m: &ModelVars, f: Var, start_block: usize) -> Result<Var> {
    if !(1..=m.blocks.len()).contains(&start_block) {
        return Err(Error::InvalidArgument(format!("start block {start_block} out of range")));
    }
    let s = tape.shape(f).to_vec();
    let want = block_in_channels(m, tape, start_block);
    if s.len() != 4 || s[1] != want {
        return Err(Error::ShapeMismatch(format!("block {start_block} expects {want} channels, got {s:?}")));
    }
    let mut h = f;
    for block in start_block..=m.blocks.len() {
        h = block_forward(tape, m, block, h)?;
    }
    global_pool(tape, h)
}

pub fn global_pool(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    let p = tape.mean_over_axes(f, &[2, 3])?;
    tape.reshape(p, &[s[0], s[1]])
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let n = tape.shape(b)[0];
    let b2 = tape.reshape(b, &[1, n])?;
    let rows = tape.shape(y)[0];
    let bb = tape.broadcast(b2, &[rows, n])?;
    tape.add(y, bb)
}

/// Global classifier over all base classes.
pub fn classify_global(tape: &mut Tape, m: &ModelVars, feat: Var) -> Result<Var> {
    affine(tape, feat, m.fc.0, m.fc.1)
}

/// Seen/unseen domain logits; dropout only in train mode.
pub fn discriminate_domain(tape: &mut Tape, m: &ModelVars, feat: Var, train_mode: bool, rng: &mut Rng) -> Result<Var> {
    let h = if train_mode && m.dom_dropout > 0.0 { tape.dropout(feat, m.dom_dropout, rng)? } else { feat };
    affine(tape, h, m.dom.0, m.dom.1)
}

/// Prototype logits `-||q - proto_n||^2 / temperature`, `[NM, N]`.
pub fn relation_classify(
    tape: &mut Tape,
    support: Var,
    support_labels: &[usize],
    query: Var,
    n_way: usize,
    temperature: f64,
) -> Result<Var> {
    let ss = tape.shape(support).to_vec();
    let qs = tape.shape(query).to_vec();
    if ss.len() != 2 || qs.len() != 2 || ss[1] != qs[1] || ss[0] != support_labels.len() {
        return Err(Error::ShapeMismatch(format!("support {ss:?} ({} labels), query {qs:?}", support_labels.len())));
    }
    let mut counts = vec![0usize; n_way];
    for &l in support_labels {
        if l >= n_way {
            return Err(Error::LabelOutOfRange { label: l, classes: n_way });
        }
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(missing));
    }
    let mut avg = vec![0.0; n_way * ss[0]];
    for (i, &l) in support_labels.iter().enumerate() {
        avg[l * ss[0] + i] = 1.0 / counts[l] as f64;
    }
    let avg = tape.constant(Array::new(vec![n_way, ss[0]], avg)?);
    let protos = tape.matmul(avg, support)?;
    let (nq, d) = (qs[0], qs[1]);
    let q3 = tape.reshape(query, &[nq, 1, d])?;
    let q3 = tape.broadcast(q3, &[nq, n_way, d])?;
    let p3 = tape.reshape(protos, &[1, n_way, d])?;
    let p3 = tape.broadcast(p3, &[nq, n_way, d])?;
    let diff = tape.sub(q3, p3)?;
    let sq = tape.mul(diff, diff)?;
    let dist = tape.sum_over_axes(sq, &[2])?;
    let dist = tape.reshape(dist, &[nq, n_way])?;
    tape.scale(dist, -1.0 / temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use rand::Rng as _;

    fn model() -> BackboneParams {
        BackboneParams::init(8, &mut Streams::new(1).stream("init", &[]))
    }

    fn images(b: usize, seed: u64) -> Array {
        let mut r = Streams::new(seed).stream("img", &[]);
        Array::new(vec![b, 3, 16, 16], (0..b * 768).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn composition_of_blocks() {
        let p = model();
        let x = images(2, 4);
        let mut t = Tape::new();
        let m = p.register(&mut t, false);
        let xv = t.constant(x);
        let full = forward_from_block(&mut t, &m, xv, 1).unwrap();
        let b1 = block_forward(&mut t, &m, 1, xv).unwrap();
        let rest = forward_from_block(&mut t, &m, b1, 2).unwrap();
        assert_eq!(t.value(full), t.value(rest));
        assert_eq!(t.shape(full), &[2, 64]);
    }

    #[test]
    fn zero_input_is_deterministic() {
        let p = model();
        let z = Array::zeros(&[1, 3, 16, 16]);
        assert_eq!(p.embed(&z).unwrap(), p.embed(&z).unwrap());
    }

    #[test]
    fn wrong_channels_rejected() {
        let p = model();
        let mut t = Tape::new();
        let m = p.register(&mut t, false);
        let x = t.constant(Array::zeros(&[1, 5, 8, 8]));
        assert!(matches!(forward_from_block(&mut t, &m, x, 2), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut p = model();
        p.fc_weight = Array::zeros(p.fc_weight.shape());
        let mut t = Tape::new();
        let m = p.register(&mut t, false);
        let f = t.constant(Array::full(&[3, 64], 0.7));
        let l = classify_global(&mut t, &m, f).unwrap();
        assert!(t.value(l).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_slice_head_copies_features() {
        let mut p = model();
        let mut w = vec![0.0; 64 * 8];
        for i in 0..8 {
            w[i * 8 + i] = 1.0;
        }
        p.fc_weight = Array::new(vec![64, 8], w).unwrap();
        let mut t = Tape::new();
        let m = p.register(&mut t, false);
        let feat: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        let f = t.constant(Array::new(vec![1, 64], feat.clone()).unwrap());
        let l = classify_global(&mut t, &m, f).unwrap();
        assert_eq!(t.value(l).data(), &feat[..8]);
    }

    #[test]
    fn global_head_matches_dense_oracle() {
        let p = model();
        let mut r = Streams::new(2).stream("f", &[]);
        let feat: Vec<f64> = (0..128).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let m = p.register(&mut t, false);
        let f = t.constant(Array::new(vec![2, 64], feat.clone()).unwrap());
        let l = classify_global(&mut t, &m, f).unwrap();
        for b in 0..2 {
            for c in 0..8 {
                let mut acc = p.fc_bias.data()[c];
                for k in 0..64 {
                    acc += feat[b * 64 + k] * p.fc_weight.data()[k * 8 + c];
                }
                assert!((t.value(l).data()[b * 8 + c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn domain_head_dropout_modes() {
        let mut p = model();
        let mut rng = Streams::new(3).stream("d", &[]);
        let mut t = Tape::new();
        let m = p.register(&mut t, false);
        let f = t.constant(Array::full(&[2, 64], 0.3));
        let eval = discriminate_domain(&mut t, &m, f, false, &mut rng).unwrap();
        p.dom_dropout = 0.0;
        let m0 = p.register(&mut t, false);
        let train0 = discriminate_domain(&mut t, &m0, f, true, &mut rng).unwrap();
        assert_eq!(t.value(eval), t.value(train0));
    }

    #[test]
    fn domain_head_dropout_replays_mask() {
        let p = model();
        let mut t = Tape::new();
        let m = p.register(&mut t, false);
        let feat = Array::full(&[1, 64], 1.0);
        let f = t.constant(feat);
        let logits = discriminate_domain(&mut t, &m, f, true, &mut Streams::new(5).stream("d", &[])).unwrap();
        // replay the mask draw
        let mut r = Streams::new(5).stream("d", &[]);
        let mask: Vec<f64> = (0..64).map(|_| if r.random::<f64>() < 0.5 { 0.0 } else { 2.0 }).collect();
        for j in 0..2 {
            let want: f64 = (0..64).map(|k| mask[k] * p.dom_weight.data()[k * 2 + j]).sum::<f64>() + p.dom_bias.data()[j];
            assert!((t.value(logits).data()[j] - want).abs() < 1e-12);
        }
    }

    fn relation(support: &[f64], labels: &[usize], query: &[f64], n: usize, d: usize, temp: f64) -> Result<Array> {
        let mut t = Tape::new();
        let s = t.constant(Array::new(vec![labels.len(), d], support.to_vec())?);
        let q = t.constant(Array::new(vec![query.len() / d, d], query.to_vec())?);
        let l = relation_classify(&mut t, s, labels, q, n, temp)?;
        Ok(t.value(l).clone())
    }

    #[test]
    fn relation_zero_distance_wins() {
        let l = relation(&[0.0, 1.0, 2.0, 0.0, -1.0, 3.0], &[0, 1, 2], &[2.0, 0.0], 3, 2, 1.0).unwrap();
        assert_eq!(l.data()[1], 0.0);
        assert!(l.data()[0] < 0.0 && l.data()[2] < 0.0);
    }

    #[test]
    fn relation_ties_when_equidistant() {
        let l = relation(&[1.0, 0.0, -1.0, 0.0], &[0, 1], &[0.0, 5.0], 2, 2, 1.0).unwrap();
        assert_eq!(l.data()[0], l.data()[1]);
    }

    #[test]
    fn relation_hand_example() {
        // class 0: (0,0),(2,0) -> (1,0); class 1: (0,2),(0,4) -> (0,3)
        let s = [0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 4.0];
        let l = relation(&s, &[0, 1, 0, 1], &[1.0, 1.0], 2, 2, 2.0).unwrap();
        assert!((l.data()[0] - (-1.0 / 2.0)).abs() < 1e-15);
        assert!((l.data()[1] - (-5.0 / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn relation_missing_class() {
        let err = relation(&[0.0, 0.0], &[0], &[1.0, 1.0], 2, 2, 1.0).unwrap_err();
        assert_eq!(err, Error::MissingClass(1));
    }

    #[test]
    fn tensor_names_align() {
        let p = model();
        assert_eq!(p.tensor_names().len(), p.tensors().len());
        let mut t = Tape::new();
        assert_eq!(p.register(&mut t, true).params().len(), p.tensors().len());
    }
}
