use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unembed::model::{Batch, ModelConfig, MultiTaskModel, TaskSpec, Variant};
use unembed::proxy::subsample_proxies;
use unembed::retrieval::{binarize, hamming, BinaryCode};
use unembed::{Tape, Tensor};

/// Targets drawn from `distinct` classes out of `m`, plus a sample size
/// large enough to hold them.
fn subsample_case() -> impl Strategy<Value = (usize, Vec<usize>, usize, u64)> {
    (1usize..200).prop_flat_map(|m| {
        (
            Just(m),
            prop::collection::vec(0..m, 1..50),
            any::<u64>(),
        )
            .prop_flat_map(|(m, targets, seed)| {
                let distinct = targets.iter().collect::<HashSet<_>>().len();
                (Just(m), Just(targets), distinct..=m, Just(seed))
            })
    })
}

/// Direct transcription of the reference pseudocode: collect the unique
/// labels, fill with uniform draws until the set has `num_samples` members,
/// then map each label to its position with a linear search.
fn literal_reference(targets: &[usize], num_samples: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut sampled: Vec<usize> = Vec::new();
    for &t in targets {
        if !sampled.contains(&t) {
            sampled.push(t);
        }
    }
    while sampled.len() < num_samples {
        let s = rng.random_range(0..num_classes);
        if !sampled.contains(&s) {
            sampled.push(s);
        }
    }
    let mut remapped = Vec::new();
    for &t in targets {
        for (j, &s) in sampled.iter().enumerate() {
            if s == t {
                remapped.push(j);
                break;
            }
        }
    }
    (sampled, remapped)
}

proptest! {
    #[test]
    fn subsample_round_trip_size_and_coverage((m, targets, s, seed) in subsample_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = subsample_proxies(&targets, s, m, &mut rng).unwrap();
        prop_assert_eq!(r.sampled_proxy_idx.len(), s);
        let set: HashSet<usize> = r.sampled_proxy_idx.iter().copied().collect();
        prop_assert_eq!(set.len(), s);
        prop_assert!(set.iter().all(|&c| c < m));
        for (i, &t) in targets.iter().enumerate() {
            prop_assert_eq!(r.sampled_proxy_idx[r.remapped_targets[i]], t);
        }
    }

    #[test]
    fn subsample_agrees_with_literal_reference((m, targets, s, seed) in subsample_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = subsample_proxies(&targets, s, m, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sampled, remapped) = literal_reference(&targets, s, m, &mut rng);
        let distinct = targets.iter().collect::<HashSet<_>>().len();
        prop_assert_eq!(&r.sampled_proxy_idx[..distinct], &sampled[..distinct]);
        prop_assert_eq!(&r.remapped_targets, &remapped);
        if 2 * s <= m {
            // Same rejection loop, same draws.
            prop_assert_eq!(&r.sampled_proxy_idx, &sampled);
        } else {
            let a: HashSet<_> = r.sampled_proxy_idx.iter().collect();
            prop_assert_eq!(a.len(), sampled.len());
        }
    }

    #[test]
    fn pack_unpack_round_trip(bits in prop::collection::vec(any::<bool>(), 1..300)) {
        let code = BinaryCode::from_bits(&bits);
        prop_assert_eq!(code.dim_bits(), bits.len());
        prop_assert_eq!(code.to_bits(), bits.clone());
        let again = BinaryCode::from_words(bits.len(), code.words().to_vec()).unwrap();
        prop_assert_eq!(&again, &code);
        let signs: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        prop_assert_eq!(binarize(&signs).unwrap(), code);
    }

    #[test]
    fn hamming_is_dual_to_sign_dot(a in prop::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<bool> = (0..a.len()).map(|_| rng.random()).collect();
        let (ca, cb) = (BinaryCode::from_bits(&a), BinaryCode::from_bits(&b));
        let dot: i64 = ca.to_signs().iter().zip(cb.to_signs()).map(|(x, y)| (x * y) as i64).sum();
        let h = hamming(&ca, &cb).unwrap() as i64;
        prop_assert_eq!(dot, a.len() as i64 - 2 * h);
    }

    #[test]
    fn cross_entropy_translation_invariant(
        logits in prop::collection::vec(-20.0f64..20.0, 12),
        shifts in prop::collection::vec(-50.0f64..50.0, 3),
        targets in prop::collection::vec(0usize..4, 3),
    ) {
        let loss = |z: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(Tensor::new(&[3, 4], z).unwrap()).unwrap();
            let l = tape.softmax_cross_entropy(v, &targets).unwrap();
            tape.value(l).item()
        };
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, &z)| z + shifts[i / 4]).collect();
        prop_assert!((loss(logits.clone()) - loss(shifted)).abs() < 1e-9);
    }

    #[test]
    fn backward_is_linear_in_summed_losses(
        x in prop::collection::vec(-2.0f64..2.0, 6),
        w in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let xt = Tensor::new(&[2, 3], x).unwrap();
        let wt = Tensor::new(&[3, 2], w).unwrap();
        let first = |tape: &mut Tape<f64>, v| {
            let wv = tape.constant(wt.clone()).unwrap();
            let y = tape.matmul(v, wv).unwrap();
            tape.softmax_cross_entropy(y, &[0, 1]).unwrap()
        };
        let second = |tape: &mut Tape<f64>, v| {
            let y = tape.mul(v, v).unwrap();
            tape.sum(y).unwrap()
        };
        let grad_of = |f: &dyn Fn(&mut Tape<f64>, unembed::Var) -> unembed::Var| {
            let mut tape = Tape::new();
            let v = tape.param(xt.clone()).unwrap();
            let l = f(&mut tape, v);
            tape.backward(l).unwrap();
            tape.grad(v).unwrap().clone()
        };
        let g1 = grad_of(&first);
        let g2 = grad_of(&second);
        let both = grad_of(&|tape, v| {
            let a = first(tape, v);
            let b = second(tape, v);
            tape.add(a, b).unwrap()
        });
        for i in 0..6 {
            prop_assert!((both.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_rows_do_not_change_a_task_loss(
        seed in any::<u64>(),
        mask in prop::collection::vec(any::<bool>(), 8),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let cfg = ModelConfig {
            feature_dim: 5,
            hidden_dims: vec![6],
            embed_dim: 8,
            groups: 2,
            variant: Variant::SmGnR,
            seed,
            ..ModelConfig::default()
        };
        let model = MultiTaskModel::<f64>::new(cfg, vec![TaskSpec::full("a", 4), TaskSpec::full("b", 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Tensor::<f64>::uniform(&[8, 5], -1.0, 1.0, &mut rng);
        let a: Vec<i64> = (0..8).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<i64> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let masked: Vec<i64> = a.iter().zip(&mask).map(|(&l, &keep)| if keep { l } else { -1 }).collect();
        let full = Batch { features: features.clone(), labels: vec![masked, b.clone()] };
        let (per, _) = model.losses(&full, false, &mut rng).unwrap();
        let loss_a = per.iter().find(|(t, _)| t == "a").unwrap().1;

        // Same rows without the absent ones; normalization is per row.
        let kept: Vec<usize> = (0..8).filter(|&i| mask[i]).collect();
        let sub_features = Tensor::from_rows(&kept.iter().map(|&i| features.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let sub = Batch {
            features: sub_features,
            labels: vec![kept.iter().map(|&i| a[i]).collect(), vec![-1; kept.len()]],
        };
        let (per_sub, _) = model.losses(&sub, false, &mut rng).unwrap();
        prop_assert!((loss_a - per_sub[0].1).abs() < 1e-12);
    }
}

#[test]
fn filler_classes_are_uniform() {
    let (m, s, calls) = (100usize, 10usize, 10_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for _ in 0..calls {
        let r = subsample_proxies(&[0], s, m, &mut rng).unwrap();
        assert_eq!(r.sampled_proxy_idx[0], 0);
        for &c in &r.sampled_proxy_idx[1..] {
            *counts.entry(c).or_default() += 1;
        }
    }
    let p = (s - 1) as f64 / (m - 1) as f64;
    let sigma = (p * (1.0 - p) / calls as f64).sqrt();
    for c in 1..m {
        let freq = counts.get(&c).copied().unwrap_or(0) as f64 / calls as f64;
        assert!((freq - p).abs() <= 3.0 * sigma, "class {c}: {freq} vs {p} ± {}", 3.0 * sigma);
    }
}
