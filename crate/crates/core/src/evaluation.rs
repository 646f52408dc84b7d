//! Sampled-candidate ranking evaluation: each held-out item is ranked against
//! `C` uniformly drawn items the user never interacted with.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{inference_window, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{infer, score_items, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub k: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 10,
            negatives: 100,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.negatives == 0 {
            return Err(Error::Contract(format!(
                "evaluation needs K ≥ 1 and C ≥ 1 (got K={}, C={})",
                self.k, self.negatives
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
        }
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(EvalSplit::Valid),
            "test" => Ok(EvalSplit::Test),
            _ => Err(Error::Contract(format!("unknown split `{s}`"))),
        }
    }
}

/// The positive plus `c` distinct negatives outside `history` (sorted), or
/// `None` when fewer than `c` such items exist.
pub fn sample_candidates<R: Rng + ?Sized>(
    history: &[usize],
    positive: usize,
    n_items: usize,
    c: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let excluded = |i: usize| i == positive || history.binary_search(&i).is_ok();
    let blocked = history.len() + usize::from(history.binary_search(&positive).is_err());
    let available = n_items.saturating_sub(blocked);
    if available < c {
        return None;
    }
    let mut out = Vec::with_capacity(c + 1);
    out.push(positive);
    if available <= 2 * c {
        let mut pool: Vec<usize> = (1..=n_items).filter(|&i| !excluded(i)).collect();
        let (chosen, _) = pool.partial_shuffle(rng, c);
        out.extend_from_slice(chosen);
    } else {
        let mut seen = HashSet::with_capacity(c);
        while out.len() < c + 1 {
            let i = rng.gen_range(1..=n_items);
            if !excluded(i) && seen.insert(i) {
                out.push(i);
            }
        }
    }
    Some(out)
}

/// Candidates in descending score order, ties broken by ascending item index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub items: Vec<usize>,
    /// 1-based rank of the positive item.
    pub positive_rank: usize,
}

pub fn rank_candidates(candidates: &[usize], scores: &[f64], positive: usize) -> Result<RankedList> {
    if candidates.len() != scores.len() {
        return Err(Error::dim(
            "rank_candidates",
            format!("{} candidates but {} scores", candidates.len(), scores.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Contract(format!("non-finite candidate score {s}")));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].cmp(&candidates[b]))
    });
    let items: Vec<usize> = order.iter().map(|&i| candidates[i]).collect();
    let positive_rank = items
        .iter()
        .position(|&i| i == positive)
        .ok_or_else(|| Error::Contract(format!("positive item {positive} is not a candidate")))?
        + 1;
    Ok(RankedList {
        items,
        positive_rank,
    })
}

/// NDCG@K with one relevant item: `1/log2(rank+1)` inside the top K, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Anything that can score a candidate list given the user's input history.
pub trait Scorer {
    fn score_candidates(&self, user: usize, input_items: &[usize], candidates: &[usize]) -> Result<Vec<f64>>;
}

/// Scores candidates with the transformer from the last hidden state over the
/// [`inference_window`] of the input.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
}

impl Scorer for ModelScorer<'_> {
    fn score_candidates(&self, user: usize, input_items: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        let t = self.params.pos.rows();
        let window = inference_window(input_items, t);
        let inf = infer(self.params, user, &window)?;
        Ok(score_items(inf.last_hidden(), candidates, user, self.params))
    }
}

/// Scores every item by its training interaction count.
#[derive(Debug, Clone)]
pub struct PopRec {
    counts: Vec<u64>,
}

impl PopRec {
    pub fn fit(split: &DatasetSplit) -> Self {
        PopRec {
            counts: split.train_item_counts(),
        }
    }

    pub fn count(&self, item: usize) -> u64 {
        self.counts.get(item).copied().unwrap_or(0)
    }
}

impl Scorer for PopRec {
    fn score_candidates(&self, _user: usize, _input: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|&i| self.count(i) as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserEval {
    pub user: usize,
    pub rank: usize,
    pub ndcg: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub k: usize,
    pub negatives: usize,
    pub ndcg_at_k: f64,
    pub recall_at_k: f64,
    pub users: usize,
    /// Users skipped because fewer than `negatives` candidates were available.
    pub skipped: usize,
    pub per_user: Vec<UserEval>,
}

impl EvalReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "split = {}", self.split.name()).unwrap();
        writeln!(s, "k = {}", self.k).unwrap();
        writeln!(s, "negatives = {}", self.negatives).unwrap();
        writeln!(s, "users = {}", self.users).unwrap();
        writeln!(s, "skipped = {}", self.skipped).unwrap();
        writeln!(s, "ndcg_at_k = {}", self.ndcg_at_k).unwrap();
        writeln!(s, "recall_at_k = {}", self.recall_at_k).unwrap();
        s
    }

    pub fn per_user_csv(&self) -> String {
        let mut s = String::from("user,rank,ndcg,recall\n");
        for u in &self.per_user {
            writeln!(s, "{},{},{},{}", u.user, u.rank, u.ndcg, u.recall).unwrap();
        }
        s
    }
}

/// Independent candidate stream per user, so results do not depend on the
/// order or parallelism with which users are visited.
pub fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    rng
}

/// Model input for a held-out item: training items for validation, training
/// items plus the validation item for test.
pub fn eval_input(split: &DatasetSplit, user: usize, which: EvalSplit) -> Option<(Vec<usize>, usize)> {
    let s = &split.users[user];
    match which {
        EvalSplit::Valid => Some((s.train.clone(), s.valid?)),
        EvalSplit::Test => {
            let mut input = s.train.clone();
            input.push(s.valid?);
            Some((input, s.test?))
        }
    }
}

pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, split: &DatasetSplit, which: EvalSplit, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut per_user = Vec::new();
    let mut skipped = 0;
    for user in split.eval_users() {
        let (input, positive) = eval_input(split, user, which).expect("eval user has valid and test items");
        let mut rng = user_rng(cfg.seed, user);
        let Some(candidates) = sample_candidates(split.history(user), positive, split.n_items, cfg.negatives, &mut rng) else {
            skipped += 1;
            continue;
        };
        let scores = scorer.score_candidates(user, &input, &candidates)?;
        let ranked = rank_candidates(&candidates, &scores, positive)?;
        per_user.push(UserEval {
            user,
            rank: ranked.positive_rank,
            ndcg: ndcg_at_k(ranked.positive_rank, cfg.k),
            recall: recall_at_k(ranked.positive_rank, cfg.k),
        });
    }
    let n = per_user.len();
    let mean = |f: fn(&UserEval) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_user.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(EvalReport {
        split: which,
        k: cfg.k,
        negatives: cfg.negatives,
        ndcg_at_k: mean(|u| u.ndcg),
        recall_at_k: mean(|u| u.recall),
        users: n,
        skipped,
        per_user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{split_leave_last_two, UserSequence};

    #[test]
    fn forced_candidate_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = sample_candidates(&[1, 2, 3], 3, 5, 2, &mut rng).unwrap();
        c.sort_unstable();
        assert_eq!(c, vec![3, 4, 5]);
        assert!(sample_candidates(&[1, 2, 3], 3, 5, 3, &mut rng).is_none());
    }

    #[test]
    fn negatives_are_distinct_and_outside_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let history = [2, 5, 9, 11, 40];
        for c in [1, 10, 30, 45] {
            let cands = sample_candidates(&history, 9, 50, c, &mut rng).unwrap();
            assert_eq!(cands.len(), c + 1);
            assert_eq!(cands[0], 9);
            let negs = &cands[1..];
            let set: HashSet<_> = negs.iter().collect();
            assert_eq!(set.len(), c);
            assert!(negs.iter().all(|n| !history.contains(n) && *n != 9 && (1..=50).contains(n)));
        }
    }

    #[test]
    fn ranking_examples() {
        let r = rank_candidates(&[4, 7, 9], &[0.1, 3.0, -1.0], 7).unwrap();
        assert_eq!(r.positive_rank, 1);
        assert_eq!(r.items, vec![7, 4, 9]);

        let r = rank_candidates(&[8, 3, 5], &[1.0, 1.0, 1.0], 3).unwrap();
        assert_eq!(r.positive_rank, 1);
        assert_eq!(r.items, vec![3, 5, 8]);

        assert!(rank_candidates(&[1, 2], &[0.0, f64::NAN], 1).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert!((ndcg_at_k(2, 10) - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert_eq!(recall_at_k(10, 10), 1.0);
        assert_eq!(recall_at_k(11, 10), 0.0);
    }

    #[test]
    fn poprec_orders_by_training_count_with_index_tiebreak() {
        let seqs = vec![
            UserSequence { user: 1, items: vec![1, 1, 1, 2, 3, 4] },
            UserSequence { user: 2, items: vec![1, 2, 2, 5, 6] },
        ];
        let split = split_leave_last_two(&seqs, 2, 6);
        let pop = PopRec::fit(&split);
        assert_eq!((pop.count(1), pop.count(2), pop.count(3)), (4, 3, 0));
        let s = pop.score_candidates(1, &[], &[2, 1]).unwrap();
        assert_eq!(rank_candidates(&[2, 1], &s, 1).unwrap().positive_rank, 1);
        let s = pop.score_candidates(1, &[], &[5, 3]).unwrap();
        assert_eq!(rank_candidates(&[5, 3], &s, 3).unwrap().positive_rank, 1);
    }

    struct Oracle;
    impl Scorer for Oracle {
        fn score_candidates(&self, _: usize, _: &[usize], c: &[usize]) -> Result<Vec<f64>> {
            // evaluate always places the positive first
            Ok(c.iter().enumerate().map(|(i, _)| if i == 0 { 1.0 } else { 0.0 }).collect())
        }
    }

    #[test]
    fn perfect_scores_hit_the_metric_ceiling() {
        let seqs: Vec<UserSequence> = (1..=5)
            .map(|u| UserSequence { user: u, items: vec![u, u + 1, u + 2, u + 3] })
            .collect();
        let split = split_leave_last_two(&seqs, 5, 40);
        let cfg = EvalConfig { k: 10, negatives: 20, seed: 3 };
        let r = evaluate(&Oracle, &split, EvalSplit::Test, &cfg).unwrap();
        assert_eq!((r.ndcg_at_k, r.recall_at_k, r.users), (1.0, 1.0, 5));
    }

    #[test]
    fn report_text_is_key_value() {
        let r = EvalReport {
            split: EvalSplit::Test,
            k: 10,
            negatives: 100,
            ndcg_at_k: 0.5,
            recall_at_k: 0.75,
            users: 4,
            skipped: 1,
            per_user: vec![UserEval { user: 3, rank: 2, ndcg: 0.6, recall: 1.0 }],
        };
        let t = r.to_text();
        assert!(t.contains("ndcg_at_k = 0.5\n") && t.contains("skipped = 1\n"));
        assert_eq!(r.per_user_csv(), "user,rank,ndcg,recall\n3,2,0.6,1\n");
    }
}
