//! Distributional checks of the samplers and of sampled-candidate evaluation.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssept::dataio::{pad_and_window, split_leave_last_two, UserSequence, WindowConfig};
use ssept::evaluation::{evaluate, sample_candidates, EvalConfig, EvalSplit, Scorer};
use ssept::regularization::sse_replace_traced;
use ssept::training::NegativeSampler;
use ssept::Result;

#[test]
fn sampled_window_starts_are_uniform() {
    let items: Vec<usize> = (1..=30).collect();
    let cfg = WindowConfig {
        max_len: 10,
        sampling_prob: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20_000;
    let mut counts = [0usize; 21];
    for _ in 0..n {
        let w = pad_and_window(&items, &cfg, &mut rng).unwrap();
        assert_eq!(w.len(), 10);
        assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
        counts[w[0]] += 1;
    }
    let p = 1.0 / 20.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (v, &c) in counts.iter().enumerate().skip(1) {
        assert!((c as f64 - n as f64 * p).abs() <= 5.0 * sigma, "start {v}: {c}");
    }
    assert_eq!(counts[0], 0);
}

#[test]
fn sampling_probability_splits_recent_and_sampled_windows() {
    let items: Vec<usize> = (1..=30).collect();
    let cfg = WindowConfig {
        max_len: 10,
        sampling_prob: 0.3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 50_000;
    // the most recent window starts at item 21; sampled starts cover 1..=20
    let recent = (0..n)
        .filter(|_| pad_and_window(&items, &cfg, &mut rng).unwrap()[0] == 21)
        .count();
    let freq = recent as f64 / n as f64;
    assert!((freq - 0.7).abs() < 0.01, "{freq}");
}

#[test]
fn negatives_are_uniform_over_unseen_items() {
    let histories = vec![vec![], vec![2, 5, 7, 11, 19]];
    let sampler = NegativeSampler::new(&histories, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 30_000;
    let mut counts = [0usize; 21];
    for _ in 0..n {
        counts[sampler.sample(1, &mut rng).unwrap()] += 1;
    }
    for &seen in &histories[1] {
        assert_eq!(counts[seen], 0);
    }
    let expected = n as f64 / 15.0;
    let chi2: f64 = (1..=20)
        .filter(|i| !histories[1].contains(i))
        .map(|i| (counts[i] as f64 - expected).powi(2) / expected)
        .sum();
    // 0.1% upper quantile of chi-square with 14 degrees of freedom
    assert!(chi2 < 36.12, "chi2 {chi2}");
}

#[test]
fn candidates_are_distinct_unseen_and_headed_by_the_positive() {
    let history = [1, 3, 4, 9];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for c in [1, 5, 15] {
        let cands = sample_candidates(&history, 9, 20, c, &mut rng).unwrap();
        assert_eq!(cands.len(), c + 1);
        assert_eq!(cands[0], 9);
        let mut sorted = cands.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), c + 1);
        assert!(cands[1..].iter().all(|i| !history.contains(i)));
    }
    assert!(sample_candidates(&history, 9, 20, 17, &mut rng).is_none());
}

#[test]
fn sse_fires_at_each_configured_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for p in [0.01, 0.1, 0.5, 0.92] {
        let n = 100_000;
        let fired = (0..n)
            .filter(|_| sse_replace_traced(3, 50, p, &mut rng).unwrap().1)
            .count();
        let freq = fired as f64 / n as f64;
        assert!((freq - p).abs() <= 0.01, "p={p}: {freq}");
    }
}

struct RandomScorer(RefCell<ChaCha8Rng>);

impl Scorer for RandomScorer {
    fn score_candidates(&self, _: usize, _: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        let mut rng = self.0.borrow_mut();
        Ok(candidates.iter().map(|_| rng.gen::<f64>()).collect())
    }
}

#[test]
fn random_scores_give_chance_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let users = 5_000;
    let seqs: Vec<UserSequence> = (1..=users)
        .map(|u| UserSequence {
            user: u,
            items: (0..6).map(|_| rng.gen_range(1..=400)).collect(),
        })
        .collect();
    let split = split_leave_last_two(&seqs, users, 400);
    let scorer = RandomScorer(RefCell::new(ChaCha8Rng::seed_from_u64(4)));
    let report = evaluate(&scorer, &split, EvalSplit::Test, &EvalConfig::default()).unwrap();
    assert_eq!(report.users, users);
    let p = 10.0 / 101.0;
    let sigma = (p * (1.0 - p) / users as f64).sqrt();
    assert!((report.recall_at_k - p).abs() <= 3.0 * sigma, "{}", report.recall_at_k);
}
