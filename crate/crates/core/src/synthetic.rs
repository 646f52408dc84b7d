//! Seeded synthetic interaction corpora for tests, the demo and benchmarks.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::UserSequence;

/// Two user populations walking the same item set with disjoint transition
/// rules. Each item has `branching` successors per population, drawn uniformly
/// at each rule step, and the two populations' successor sets never overlap.
/// A step follows the user's rule with probability `follow_prob` and is
/// uniform otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPopulation {
    pub users: usize,
    pub items: usize,
    pub length: usize,
    pub branching: usize,
    pub follow_prob: f64,
    pub seed: u64,
}

impl Default for TwoPopulation {
    fn default() -> Self {
        TwoPopulation {
            users: 200,
            items: 40,
            length: 20,
            branching: 6,
            follow_prob: 1.0,
            seed: 0,
        }
    }
}

/// Sequences plus the population (0 or 1) of every user; `groups[u - 1]`
/// belongs to user `u`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Populations {
    pub sequences: Vec<UserSequence>,
    pub groups: Vec<u8>,
}

/// Successor sets of item `i` (1-based) for population `g`.
pub fn successors(cfg: &TwoPopulation, g: u8) -> Vec<Vec<usize>> {
    let order = successor_order(cfg);
    // rotations of one permutation are pairwise disjoint edge sets; population
    // g takes every other rotation
    (0..cfg.items)
        .map(|i| {
            (0..cfg.branching)
                .map(|j| order[(i + 2 * j + g as usize) % cfg.items])
                .collect()
        })
        .collect()
}

fn successor_order(cfg: &TwoPopulation) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (1..=cfg.items).collect();
    order.shuffle(&mut rng);
    order
}

pub fn two_population(cfg: &TwoPopulation) -> Populations {
    assert!(2 * cfg.branching <= cfg.items, "successor sets must fit the item set");
    let successor = [successors(cfg, 0), successors(cfg, 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut sequences = Vec::with_capacity(cfg.users);
    let mut groups = Vec::with_capacity(cfg.users);
    for u in 1..=cfg.users {
        let g = (u % 2) as u8;
        let mut items = vec![rng.gen_range(1..=cfg.items)];
        while items.len() < cfg.length {
            let prev = *items.last().unwrap();
            let next = if rng.gen::<f64>() < cfg.follow_prob {
                *successor[g as usize][prev - 1].choose(&mut rng).unwrap()
            } else {
                rng.gen_range(1..=cfg.items)
            };
            items.push(next);
        }
        sequences.push(UserSequence { user: u, items });
        groups.push(g);
    }
    Populations { sequences, groups }
}

/// Popularity-skewed corpus with local sequential structure: each step either
/// moves to a nearby item index or jumps to a Zipf-distributed popular item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkovCorpus {
    pub users: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

pub fn markov_corpus(cfg: &MarkovCorpus) -> Vec<UserSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<f64> = (1..=cfg.items).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let popular = |rng: &mut ChaCha8Rng| {
        let x = rng.gen::<f64>();
        cdf.partition_point(|&c| c < x).min(cfg.items - 1) + 1
    };
    (1..=cfg.users)
        .map(|u| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut items = vec![popular(&mut rng)];
            while items.len() < len {
                let prev = *items.last().unwrap() as i64;
                let next = if rng.gen::<f64>() < 0.7 {
                    let step = rng.gen_range(1..=3);
                    ((prev - 1 + step).rem_euclid(cfg.items as i64) + 1) as usize
                } else {
                    popular(&mut rng)
                };
                items.push(next);
            }
            UserSequence { user: u, items }
        })
        .collect()
}

/// Renders sequences as a tab-separated `user item timestamp` log using the
/// indices as raw ids and the position as timestamp.
pub fn to_tsv(sequences: &[UserSequence]) -> String {
    let mut s = String::new();
    for seq in sequences {
        for (t, i) in seq.items.iter().enumerate() {
            writeln!(s, "u{}\ti{}\t{}", seq.user, i, t).unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_population_shape_and_determinism() {
        let cfg = TwoPopulation::default();
        let a = two_population(&cfg);
        assert_eq!(a, two_population(&cfg));
        assert_eq!(a.sequences.len(), 200);
        assert!(a.sequences.iter().all(|s| s.items.len() == 20 && s.items.iter().all(|&i| (1..=40).contains(&i))));
        assert_eq!(a.groups.iter().filter(|&&g| g == 0).count(), 100);
        let cfg = TwoPopulation {
            branching: 3,
            follow_prob: 1.0,
            ..cfg
        };
        let (a, b) = (successors(&cfg, 0), successors(&cfg, 1));
        for i in 0..40 {
            assert_eq!(a[i].len(), 3);
            assert!(a[i].iter().all(|x| !b[i].contains(x)));
        }
        let strict = two_population(&cfg);
        for (s, &g) in strict.sequences.iter().zip(&strict.groups) {
            let rule = if g == 0 { &a } else { &b };
            assert!(s.items.windows(2).all(|w| rule[w[0] - 1].contains(&w[1])));
        }
    }

    #[test]
    fn markov_corpus_respects_bounds() {
        let seqs = markov_corpus(&MarkovCorpus {
            users: 30,
            items: 50,
            min_len: 5,
            max_len: 9,
            seed: 1,
        });
        assert_eq!(seqs.len(), 30);
        for s in &seqs {
            assert!((5..=9).contains(&s.items.len()));
            assert!(s.items.iter().all(|&i| (1..=50).contains(&i)));
        }
        assert!(to_tsv(&seqs[..1]).starts_with("u1\ti"));
    }
}
