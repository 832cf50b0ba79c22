use mamp::masking::sample_mask;
use mamp::DenseArray;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exact inclusion probabilities of a size-`k` sequential weighted sample
/// without replacement, by enumerating every ordered outcome.
fn enumerated_marginals(p: &[f64], k: usize) -> Vec<f64> {
    fn walk(p: &[f64], k: usize, chosen: &mut Vec<usize>, prob: f64, incl: &mut [f64]) {
        if chosen.len() == k {
            for &i in chosen.iter() {
                incl[i] += prob;
            }
            return;
        }
        let taken: f64 = chosen.iter().map(|&i| p[i]).sum();
        for i in 0..p.len() {
            if !chosen.contains(&i) {
                chosen.push(i);
                walk(p, k, chosen, prob * p[i] / (1.0 - taken), incl);
                chosen.pop();
            }
        }
    }
    let mut incl = vec![0.0; p.len()];
    walk(p, k, &mut Vec::new(), 1.0, &mut incl);
    incl
}

#[test]
fn enumeration_sums_to_sample_size() {
    let p = [0.1, 0.2, 0.3, 0.4];
    for k in 1..=3 {
        let total: f64 = enumerated_marginals(&p, k).iter().sum();
        assert!((total - k as f64).abs() < 1e-12);
    }
    assert!(enumerated_marginals(&[0.25; 4], 2).iter().all(|m| (m - 0.5).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn gumbel_top_k_matches_enumerated_marginals(
        weights in prop::collection::vec(0.05f64..1.0, 2..=6),
        k_seed in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let n = weights.len();
        let k = k_seed.min(n - 1);
        let total: f64 = weights.iter().sum();
        let p: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let probs = DenseArray::new(vec![n], p.clone()).unwrap();
        let exact = enumerated_marginals(&p, k);
        let draws = 200_000;
        let mut counts = vec![0usize; n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..draws {
            for i in sample_mask(&probs, k as f64 / n as f64, &mut rng).unwrap().masked {
                counts[i] += 1;
            }
        }
        for i in 0..n {
            let freq = counts[i] as f64 / draws as f64;
            let se = (exact[i] * (1.0 - exact[i]) / draws as f64).sqrt();
            prop_assert!((freq - exact[i]).abs() <= 4.0 * se, "token {i}: {freq} vs {}", exact[i]);
        }
    }
}
