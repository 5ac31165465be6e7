//! Seeded synthetic interaction logs with clustered preferences.
//!
//! Items are partitioned into categories with a Zipf-like popularity profile
//! inside each category. Each user favours one or two categories and draws
//! most of their interactions from them.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::log::{InteractionLog, RawRecord};
use crate::numerics::{Purpose, RngStream, StreamKey};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that an interaction comes from a favoured category.
    pub affinity: f64,
    /// Zipf exponent of within-category popularity.
    pub popularity_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// Roughly the shape of the Amazon "Software" category.
    fn default() -> Self {
        Self {
            users: 1826,
            items: 802,
            clusters: 16,
            min_interactions: 4,
            max_interactions: 10,
            affinity: 0.85,
            popularity_exponent: 0.8,
            seed: 2024,
        }
    }
}

fn weighted_pick<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let total = *cumulative.last().expect("non-empty");
    let x = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1)
}

pub fn synthetic_log(cfg: &SyntheticConfig) -> Result<InteractionLog> {
    if cfg.users == 0 || cfg.items == 0 || cfg.clusters == 0 || cfg.clusters > cfg.items {
        return Err(Error::invalid("synthetic log needs users, items and 1..=items clusters"));
    }
    if cfg.min_interactions == 0 || cfg.min_interactions > cfg.max_interactions || cfg.max_interactions > cfg.items {
        return Err(Error::invalid("synthetic interaction range must satisfy 1 <= min <= max <= items"));
    }
    let mut rng = RngStream::new(cfg.seed, StreamKey::new(Purpose::Synthetic, 0, 0));

    let mut order: Vec<usize> = (0..cfg.items).collect();
    order.shuffle(&mut rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.clusters];
    for (pos, &item) in order.iter().enumerate() {
        members[pos % cfg.clusters].push(item);
    }
    let cumulative: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            let mut acc = 0.0;
            (0..m.len())
                .map(|r| {
                    acc += 1.0 / ((r + 1) as f64).powf(cfg.popularity_exponent);
                    acc
                })
                .collect()
        })
        .collect();

    let mut records = Vec::new();
    let mut touched = vec![false; cfg.items];
    let mut histories: Vec<HashSet<usize>> = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let mut urng = RngStream::new(cfg.seed, StreamKey::new(Purpose::Synthetic, u as u64 + 1, 0));
        let primary = urng.random_range(0..cfg.clusters);
        let secondary = if urng.random_bool(0.5) {
            Some(urng.random_range(0..cfg.clusters))
        } else {
            None
        };
        let len = urng.random_range(cfg.min_interactions..=cfg.max_interactions);
        let mut seen = HashSet::with_capacity(len);
        let mut attempts = 0;
        while seen.len() < len && attempts < len * 50 {
            attempts += 1;
            let item = if urng.random_bool(cfg.affinity) {
                let c = match secondary {
                    Some(s) if urng.random_bool(0.3) => s,
                    _ => primary,
                };
                members[c][weighted_pick(&cumulative[c], &mut urng)]
            } else {
                urng.random_range(0..cfg.items)
            };
            if seen.insert(item) {
                records.push(RawRecord {
                    user: u.to_string(),
                    item: item.to_string(),
                    rating: 1.0,
                    timestamp: (seen.len() as i64) * 60,
                });
                touched[item] = true;
            }
        }
        histories.push(seen);
    }
    // every item must exist in the log
    for (item, &hit) in touched.iter().enumerate() {
        if !hit {
            let u = (0..cfg.users)
                .map(|k| (rng.random_range(0..cfg.users) + k) % cfg.users)
                .find(|&u| !histories[u].contains(&item))
                .unwrap_or(0);
            histories[u].insert(item);
            records.push(RawRecord {
                user: u.to_string(),
                item: item.to_string(),
                rating: 1.0,
                timestamp: 0,
            });
        }
    }
    InteractionLog::from_records(records, true)
}
