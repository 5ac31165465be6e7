//! Leave-one-out ranking metrics.

use rayon::prelude::*;
use serde::Serialize;

use crate::datasets::EvalSplit;
use crate::Result;

/// Scores a list of items for one user.
pub trait Scorer: Sync {
    fn scores(&self, user: usize, items: &[u32]) -> Result<Vec<f32>>;
}

impl<F> Scorer for F
where
    F: Fn(usize, &[u32]) -> Result<Vec<f32>> + Sync,
{
    fn scores(&self, user: usize, items: &[u32]) -> Result<Vec<f32>> {
        self(user, items)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RankResult {
    pub user: usize,
    /// 1-based position of the held-out item.
    pub rank: usize,
    pub candidates: usize,
}

/// `1 + #{negatives scoring at least as high}`: ties count against the
/// held-out item.
pub fn rank_from_scores(test_score: f32, negative_scores: &[f32]) -> usize {
    1 + negative_scores.iter().filter(|&&s| s >= test_score).count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Ranks `user`'s held-out item among its candidates; `None` for users
/// without a test case.
pub fn rank_test_item(scorer: &dyn Scorer, user: usize, split: &EvalSplit) -> Result<Option<RankResult>> {
    let Some(case) = &split.test[user] else {
        return Ok(None);
    };
    let mut items = vec![case.item];
    items.extend(split.negatives(user));
    let scores = scorer.scores(user, &items)?;
    Ok(Some(RankResult {
        user,
        rank: rank_from_scores(scores[0], &scores[1..]),
        candidates: items.len(),
    }))
}

/// Mean HR@K and NDCG@K over test users, for every requested cutoff.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricTable {
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
}

impl MetricTable {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        let users = ranks.len();
        let mean = |f: fn(usize, usize) -> f64, k: usize| {
            if users == 0 {
                0.0
            } else {
                ranks.iter().map(|&r| f(r, k)).sum::<f64>() / users as f64
            }
        };
        Self {
            ks: ks.to_vec(),
            hr: ks.iter().map(|&k| mean(hr_at_k, k)).collect(),
            ndcg: ks.iter().map(|&k| mean(ndcg_at_k, k)).collect(),
            users,
        }
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    /// `n@10,h@10,n@20,h@20,...`
    pub fn csv_header(&self) -> String {
        self.ks
            .iter()
            .map(|k| format!("n@{k},h@{k}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Percentages with two decimals, in header order.
    pub fn csv_row(&self) -> String {
        self.ndcg
            .iter()
            .zip(&self.hr)
            .map(|(n, h)| format!("{:.2},{:.2}", n * 100.0, h * 100.0))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Ranks of every test user, in user order.
pub fn test_ranks(scorer: &dyn Scorer, split: &EvalSplit) -> Result<Vec<usize>> {
    let users: Vec<usize> = split.test_users().collect();
    let results: Vec<RankResult> = users
        .par_iter()
        .map(|&u| rank_test_item(scorer, u, split).map(|r| r.expect("test user")))
        .collect::<Result<_>>()?;
    Ok(results.into_iter().map(|r| r.rank).collect())
}

pub fn evaluate(scorer: &dyn Scorer, split: &EvalSplit, ks: &[usize]) -> Result<MetricTable> {
    Ok(MetricTable::from_ranks(&test_ranks(scorer, split)?, ks))
}

/// The `k` best items for `user` outside `exclude` (sorted), best first;
/// equal scores are ordered by item id.
pub fn top_k(scorer: &dyn Scorer, user: usize, num_items: usize, k: usize, exclude: &[u32]) -> Result<Vec<u32>> {
    let items: Vec<u32> = (0..num_items as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let scores = scorer.scores(user, &items)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
    Ok(order.into_iter().take(k).map(|i| items[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{CandidateMode, TestCase};

    #[test]
    fn rank_rules() {
        assert_eq!(rank_from_scores(5.0, &[1.0, 2.0, 3.0]), 1);
        assert_eq!(rank_from_scores(1.0, &[1.0; 99]), 100);
        assert_eq!(rank_from_scores(2.0, &[3.0, 1.0, 2.5]), 3);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(hr_at_k(1, 10), 1.0);
        assert!((ndcg_at_k(3, 10) - 0.5).abs() < 1e-12);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert_eq!(hr_at_k(11, 10), 0.0);
    }

    fn split() -> EvalSplit {
        EvalSplit {
            num_items: 6,
            train: vec![vec![0], vec![1], vec![2]],
            test: vec![
                Some(TestCase {
                    item: 3,
                    sampled_negatives: vec![4, 5],
                }),
                None,
                Some(TestCase {
                    item: 4,
                    sampled_negatives: vec![0, 3],
                }),
            ],
            positives: vec![vec![0, 3], vec![1], vec![2, 4]],
            mode: CandidateMode::Sampled(2),
        }
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let s = split();
        let oracle = |u: usize, items: &[u32]| -> Result<Vec<f32>> {
            let target = s.test[u].as_ref().unwrap().item;
            Ok(items.iter().map(|&i| if i == target { 1.0 } else { 0.0 }).collect())
        };
        let t = evaluate(&oracle, &s, &[1, 10]).unwrap();
        assert_eq!(t.users, 2);
        assert_eq!(t.csv_row(), "100.00,100.00,100.00,100.00");
        assert_eq!(t.csv_header(), "n@1,h@1,n@10,h@10");
    }

    #[test]
    fn top_k_excludes_and_orders() {
        let scorer = |_: usize, items: &[u32]| -> Result<Vec<f32>> {
            Ok(items.iter().map(|&i| if i == 5 { 9.0 } else { 1.0 }).collect())
        };
        assert_eq!(top_k(&scorer, 0, 6, 3, &[0, 1]).unwrap(), vec![5, 2, 3]);
    }
}
