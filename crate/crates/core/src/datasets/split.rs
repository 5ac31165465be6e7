//! Leave-one-out evaluation splits and negative sampling.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::log::InteractionLog;
use crate::numerics::{Purpose, RngStream, StreamKey};
use crate::{Error, Result};

/// How the ranking candidates of a test user are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "negatives")]
pub enum CandidateMode {
    /// Held-out item plus this many sampled non-interacted items.
    Sampled(usize),
    /// Held-out item plus every non-interacted item.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub item: u32,
    /// Empty in [`CandidateMode::Full`]; see [`EvalSplit::negatives`].
    pub sampled_negatives: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub num_items: usize,
    /// Training positives of every user, in time order.
    pub train: Vec<Vec<u32>>,
    /// Held-out case of every user with at least two interactions.
    pub test: Vec<Option<TestCase>>,
    /// All positives of every user (train and test), sorted.
    pub positives: Vec<Vec<u32>>,
    pub mode: CandidateMode,
}

impl EvalSplit {
    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    pub fn test_users(&self) -> impl Iterator<Item = usize> + '_ {
        self.test
            .iter()
            .enumerate()
            .filter_map(|(u, t)| t.as_ref().map(|_| u))
    }

    /// Negative candidates of `user`'s test case.
    pub fn negatives(&self, user: usize) -> Vec<u32> {
        match (self.mode, &self.test[user]) {
            (_, None) => Vec::new(),
            (CandidateMode::Sampled(_), Some(t)) => t.sampled_negatives.clone(),
            (CandidateMode::Full, Some(_)) => complement(&self.positives[user], self.num_items),
        }
    }
}

fn complement(sorted_positives: &[u32], num_items: usize) -> Vec<u32> {
    (0..num_items as u32)
        .filter(|i| sorted_positives.binary_search(i).is_err())
        .collect()
}

/// Uniform sample of `count` distinct items outside `sorted_positives`.
pub fn sample_negatives<R: Rng + ?Sized>(
    sorted_positives: &[u32],
    num_items: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let available = num_items.saturating_sub(sorted_positives.len());
    if count > available {
        return Err(Error::invalid(format!(
            "asked for {count} negatives but only {available} non-interacted items exist"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if count * 4 < available {
        let mut chosen = Vec::with_capacity(count);
        let mut seen = HashSet::with_capacity(count);
        while chosen.len() < count {
            let cand = rng.random_range(0..num_items as u32);
            if sorted_positives.binary_search(&cand).is_err() && seen.insert(cand) {
                chosen.push(cand);
            }
        }
        Ok(chosen)
    } else {
        let pool = complement(sorted_positives, num_items);
        Ok(index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect())
    }
}

/// Holds out the latest interaction of each user with two or more
/// interactions. Sampled negatives are drawn once per user from the
/// evaluation stream of `seed`, so every evaluation of a run sees the same
/// candidate sets.
pub fn leave_one_out_split(log: &InteractionLog, mode: CandidateMode, seed: u64) -> Result<EvalSplit> {
    if log.interactions.is_empty() {
        return Err(Error::Missing("cannot split an empty log".into()));
    }
    let histories = log.user_histories();
    let mut train = Vec::with_capacity(log.num_users);
    let mut test = Vec::with_capacity(log.num_users);
    let mut positives = Vec::with_capacity(log.num_users);
    for (u, hist) in histories.iter().enumerate() {
        let mut items: Vec<u32> = hist.iter().map(|i| i.item).collect();
        let mut all = items.clone();
        all.sort_unstable();
        positives.push(all);
        if items.len() >= 2 {
            let held = items.pop().expect("len >= 2");
            let sampled_negatives = match mode {
                CandidateMode::Sampled(count) => {
                    let mut rng = RngStream::new(seed, StreamKey::new(Purpose::EvalNegatives, u as u64, 0));
                    let have = log.num_items - positives[u].len();
                    sample_negatives(&positives[u], log.num_items, count.min(have), &mut rng)?
                }
                CandidateMode::Full => Vec::new(),
            };
            test.push(Some(TestCase {
                item: held,
                sampled_negatives,
            }));
        } else {
            test.push(None);
        }
        train.push(items);
    }
    Ok(EvalSplit {
        num_items: log.num_items,
        train,
        test,
        positives,
        mode,
    })
}
