use proptest::prelude::*;

use svasp::array::Array;
use svasp::attack::{ensemble_gradients, l2_normalize_rows, perturb_style, AttackConfig, EnsembleGradient, StyleGradientSet};
use svasp::backbone::relation_classify;
use svasp::config::TrainConfig;
use svasp::data::{generate_domain, sample_episode, Domain, StyleShift};
use svasp::diagnostics::gradient_cosine;
use svasp::losses::kl_value;
use svasp::rng::Streams;
use svasp::style::{adain_transfer, compute_style, Style};
use svasp::tape::Tape;

fn vec_f64(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    x.chunks(n)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

fn relation(s: &[f64], labels: &[usize], q: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut t = Tape::new();
    let sv = t.constant(Array::new(vec![labels.len(), d], s.to_vec()).unwrap());
    let qv = t.constant(Array::new(vec![q.len() / d, d], q.to_vec()).unwrap());
    let l = relation_classify(&mut t, sv, labels, qv, n, 64.0).unwrap();
    t.value(l).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_symmetric_bounded_scale_invariant((a, b) in (1usize..20).prop_flat_map(|n| (vec_f64(n), vec_f64(n))), k in 0.1f64..10.0) {
        let c = gradient_cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, gradient_cosine(&b, &a).unwrap());
        let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((gradient_cosine(&scaled, &b).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_and_zero_on_identical(a in vec_f64(12), b in vec_f64(12)) {
        let (pa, pb) = (softmax_rows(&a, 4), softmax_rows(&b, 4));
        prop_assert!(kl_value(&pa, &pb, 3, 4) >= 0.0);
        prop_assert_eq!(kl_value(&pa, &pa, 3, 4), 0.0);
    }

    #[test]
    fn relation_translation_and_query_order(s in vec_f64(12), q in vec_f64(6), shift in vec_f64(3)) {
        let labels = [0, 1, 2, 0];
        let base = relation(&s, &labels, &q, 3, 3);
        let tr = |x: &[f64]| x.chunks(3).flat_map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>()).collect::<Vec<_>>();
        let moved = relation(&tr(&s), &labels, &tr(&q), 3, 3);
        for (x, y) in base.iter().zip(&moved) {
            prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
        let swapped: Vec<f64> = q[3..].iter().chain(&q[..3]).copied().collect();
        let sw = relation(&s, &labels, &swapped, 3, 3);
        prop_assert_eq!(&sw[..3], &base[3..]);
        prop_assert_eq!(&sw[3..], &base[..3]);
    }

    #[test]
    fn adain_with_own_style_is_identity(data in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 16)) {
        let f = Array::new(vec![2, 3, 4, 4], data).unwrap();
        let out = adain_transfer(&f, &compute_style(&f).unwrap()).unwrap();
        for (a, b) in f.data().iter().zip(out.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn normalized_rows_have_unit_or_zero_norm(data in vec_f64(12)) {
        let n = l2_normalize_rows(&Array::new(vec![3, 4], data).unwrap());
        for row in n.data().chunks(4) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_step_is_zero_or_kappa(g in vec_f64(8), mu in vec_f64(8), seed in any::<u64>()) {
        let style = Style::new(Array::new(vec![2, 4], mu).unwrap(), Array::full(&[2, 4], 1.0)).unwrap();
        let grad = EnsembleGradient { mu: Array::new(vec![2, 4], g.clone()).unwrap(), sigma: Array::new(vec![2, 4], g).unwrap() };
        let cfg = AttackConfig::default();
        let p = perturb_style(&style, &grad, &cfg, &mut Streams::new(seed).stream("p", &[])).unwrap();
        for ((a, i), gv) in p.adv.mu.data().iter().zip(p.init.mu.data()).zip(grad.mu.data()) {
            let d = (a - i).abs();
            if *gv == 0.0 {
                prop_assert_eq!(d, 0.0);
            } else {
                prop_assert!((d - p.kappa_mu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ensemble_without_crops_ignores_xi(g in vec_f64(6), xi in 0.0f64..2.0) {
        let a = Array::new(vec![2, 3], g).unwrap();
        let set = StyleGradientSet { mu: vec![a.clone()], sigma: vec![a.clone()], styles: vec![] };
        prop_assert_eq!(ensemble_gradients(&set, xi).mu, l2_normalize_rows(&a));
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), epochs in 1usize..100, xi in 0.0f64..1.0, lr in 1e-5f64..1e-1) {
        let cfg = TrainConfig { seed, epochs, xi, lr, ..Default::default() };
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn episodes_partition_their_classes(n in 2usize..=5, k in 1usize..=5, m in 1usize..=10, seed in any::<u64>()) {
        let ds = generate_domain(&Domain::source(StyleShift::identity()), 16, 16, &mut Streams::new(1).stream("d", &[])).unwrap();
        let ep = sample_episode(&ds, n, k, m, &mut Streams::new(seed).stream("e", &[])).unwrap();
        prop_assert_eq!(ep.len(), n * (k + m));
        let mut counts = vec![(0usize, 0usize); n];
        for &l in &ep.support_labels {
            counts[l].0 += 1;
        }
        for &l in &ep.query_labels {
            counts[l].1 += 1;
        }
        prop_assert!(counts.iter().all(|&c| c == (k, m)));
        prop_assert!(ep.support_idx.iter().all(|i| !ep.query_idx.contains(i)));
        for (&i, &l) in ep.support_idx.iter().zip(&ep.support_labels) {
            prop_assert_eq!(ds.labels[i], ep.classes[l]);
        }
    }
}
