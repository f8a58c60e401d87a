use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unembed::config::DatasetKind;
use unembed::data::{split_query_corpus, LabeledDataset, QuerySplit, Record, TaskInfo};
use unembed::embfile::EmbeddingSet;
use unembed::eval::{evaluate, Metric, Mode};
use unembed::Error;

/// Fraction of held-out records whose nearest training class mean carries
/// their label.
fn nearest_center_accuracy(train: &LabeledDataset, test: &LabeledDataset, task: &str) -> f64 {
    let m = train.num_classes(task).unwrap();
    let f = train.feature_dim;
    let mut sums = vec![vec![0.0f64; f]; m];
    let mut counts = vec![0usize; m];
    for (i, r) in train.records.iter().enumerate() {
        let c = train.label(i, task).unwrap();
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(&r.features) {
            *s += v as f64;
        }
    }
    let centers: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let hits = test
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| {
            let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(&r.features).map(|(a, &b)| (a - b as f64).powi(2)).sum() };
            let best = (0..m).min_by(|&a, &b| dist(&centers[a]).total_cmp(&dist(&centers[b]))).unwrap();
            Some(best) == test.label(*i, task)
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn default_suite_is_separable_by_class_means() {
    for kind in DatasetKind::ALL {
        let spec = kind.default_spec();
        let train = kind.generate(&spec).unwrap();
        let test = kind.generate(&spec.held_out(1, 3)).unwrap();
        let acc = nearest_center_accuracy(&train, &test, kind.eval_task());
        assert!(acc >= 0.99, "{kind}: {acc}");
    }
}

fn labeled(labels: &[i64], classes: usize) -> LabeledDataset {
    LabeledDataset {
        name: "toy".into(),
        feature_dim: 1,
        tasks: vec![TaskInfo {
            name: "c".into(),
            num_classes: classes,
        }],
        records: labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Record {
                id: 100 + i as u64,
                features: vec![0.0],
                labels: vec![l],
            })
            .collect(),
    }
}

#[test]
fn exact_copies_are_retrieved_first_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 40;
    let dim = 96;
    let base: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    // Record i and n + i share an embedding and a label; labels repeat so
    // that other same-class items exist too.
    let labels: Vec<i64> = (0..2 * n).map(|i| ((i % n) % 5) as i64).collect();
    let ds = labeled(&labels, 5);
    let values: Vec<f32> = (0..2 * n).flat_map(|i| base[i % n].clone()).collect();
    let set = EmbeddingSet::Float {
        dim,
        ids: ds.records.iter().map(|r| r.id).collect(),
        values,
    };
    let split = QuerySplit {
        queries: (0..n).collect(),
        corpus: (n..2 * n).collect(),
    };
    for mode in [Mode::Float, Mode::Binary] {
        let report = evaluate(&set, &ds, &split, "c", &[Metric::PrecisionAt(1)], mode).unwrap();
        assert_eq!(report.get(Metric::PrecisionAt(1)), Some(1.0), "{mode:?}");
    }
}

#[test]
fn random_codes_score_chance_precision() {
    let classes = 5;
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<i64> = (0..n).map(|i| (i % classes) as i64).collect();
    let ds = labeled(&labels, classes);
    let dim = 64;
    let values: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let set = EmbeddingSet::Float {
        dim,
        ids: ds.records.iter().map(|r| r.id).collect(),
        values,
    }
    .to_binary()
    .unwrap();
    let split = split_query_corpus(&ds, "c", 1000, None, &mut rng).unwrap();
    let p1 = evaluate(&set, &ds, &split, "c", &[Metric::PrecisionAt(1)], Mode::Binary)
        .unwrap()
        .get(Metric::PrecisionAt(1))
        .unwrap();
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / 1000.0).sqrt();
    assert!((p1 - p).abs() <= 3.0 * sigma, "{p1} vs {p} ± {}", 3.0 * sigma);
}

#[test]
fn unlabeled_records_are_listed_by_id() {
    let ds = labeled(&[0, 1, -1, 0, 1, -1], 2);
    let set = EmbeddingSet::Float {
        dim: 1,
        ids: ds.records.iter().map(|r| r.id).collect(),
        values: vec![1.0; 6],
    };
    let split = QuerySplit {
        queries: vec![0, 2],
        corpus: vec![1, 3, 4, 5],
    };
    match evaluate(&set, &ds, &split, "c", &[Metric::RecallAt(1)], Mode::Float) {
        Err(Error::Eval(msg)) => assert!(msg.contains("102") && msg.contains("105"), "{msg}"),
        other => panic!("expected an eval error, got {other:?}"),
    }
}
