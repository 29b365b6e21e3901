mod common;

use std::collections::HashSet;

use common::{pattern_strings, shunting_yard, Eval};
use ngs::dataset::{build_symbol_pools, generate_dataset, sample_formula, Dataset, DatasetSpec, LengthMix};
use ngs::rng::stream;
use ngs::symbol::NUM_SYMBOLS;
use ngs::CompiledGrammar;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Nearest-prototype accuracy among `k` one-hot prototypes under isotropic
/// noise `sigma`: `∫ φ(u) Φ(u + 1/σ)^(k-1) du`, by Simpson's rule.
fn bayes_accuracy(sigma: f64, k: i32) -> f64 {
    let n = Normal::standard();
    let (a, b, steps) = (-12.0, 12.0, 20_000);
    let h = (b - a) / steps as f64;
    let f = |u: f64| n.pdf(u) * n.cdf(u + 1.0 / sigma).powi(k - 1);
    let mut acc = f(a) + f(b);
    for i in 1..steps {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn bayes_ceiling_matches_pool_monte_carlo() {
    let acc = bayes_accuracy(0.3, NUM_SYMBOLS as i32);
    assert!((acc - 0.92564).abs() < 1e-5, "{acc}");
    assert!((bayes_accuracy(0.3, 10) - 0.94229).abs() < 1e-5);
    assert!((bayes_accuracy(0.3, 4) - 0.97551).abs() < 1e-5);

    let spec = DatasetSpec { per_class: 2000, ..DatasetSpec::default() };
    let (pool, _) = build_symbol_pools(&spec);
    let (mut hits, mut total) = (0usize, 0usize);
    for (s, x) in pool.labeled() {
        let guess = (0..NUM_SYMBOLS).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap();
        hits += (guess == s.index()) as usize;
        total += 1;
    }
    let mc = hits as f64 / total as f64;
    let se = (acc * (1.0 - acc) / total as f64).sqrt();
    assert!((mc - acc).abs() <= 4.0 * se, "pool {mc} vs {acc}");
}

#[test]
fn formula_operator_marginal_matches_enumeration() {
    let cg = CompiledGrammar::arithmetic();
    let mut expected = [0.0f64; 4];
    for z in pattern_strings(7) {
        if matches!(shunting_yard(&z), Eval::Ok(_)) {
            expected[z.get(1).index() - 10] += 1.0;
        }
    }
    let total: f64 = expected.iter().sum();
    let draws = 10_000;
    let mut observed = [0.0f64; 4];
    let mut rng = stream(51, &[]);
    for _ in 0..draws {
        let (z, _) = sample_formula(&cg, 7, &mut rng);
        observed[z.get(1).index() - 10] += 1.0;
    }
    let chi2: f64 = observed
        .iter()
        .zip(&expected)
        .map(|(o, e)| {
            let e = e / total * draws as f64;
            (o - e).powi(2) / e
        })
        .sum();
    // df = 3, p = 0.001
    assert!(chi2 < 16.27, "chi2 {chi2}");
}

#[test]
fn desk_scale_counts() {
    let spec = DatasetSpec::desk_scale(0);
    let mix = spec.scaled_mix();
    assert_eq!(mix.iter().map(|m| m.train).sum::<usize>(), 2000);
    assert_eq!(mix.iter().map(|m| m.test).sum::<usize>(), 400);
    assert_eq!(mix.iter().map(|m| m.length).collect::<Vec<_>>(), vec![1, 3, 5, 7]);
}

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        mix: vec![LengthMix { length: 3, train: 60, test: 20 }, LengthMix { length: 7, train: 40, test: 20 }],
        per_class: 30,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn generation_is_reproducible_and_roundtrips() {
    let cg = CompiledGrammar::arithmetic();
    let a = generate_dataset(&cg, &small_spec(3)).unwrap();
    let b = generate_dataset(&cg, &small_spec(3)).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&cg, &small_spec(4)).unwrap();
    assert_ne!(a.train.hidden_truths(), c.train.hidden_truths());

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), a);
}

#[test]
fn splits_are_consistent_and_disjoint() {
    let cg = CompiledGrammar::arithmetic();
    let ds = generate_dataset(&cg, &small_spec(5)).unwrap();
    for split in [&ds.train, &ds.test] {
        for (o, z) in split.observations().iter().zip(split.hidden_truths()) {
            assert_eq!(o.len(), z.len());
            assert_eq!(shunting_yard(z), Eval::Ok(o.y));
        }
    }
    let key = |r: &Vec<f64>| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let train_rows: HashSet<_> = ds.train.observations().iter().flat_map(|o| o.x.rows().iter().map(key)).collect();
    let pool_rows: HashSet<_> = ds.train_pool.labeled().map(|(_, x)| key(&x.to_vec())).collect();
    assert!(train_rows.is_subset(&pool_rows));
    for o in ds.test.observations() {
        for r in o.x.rows() {
            assert!(!pool_rows.contains(&key(r)));
        }
    }
}
