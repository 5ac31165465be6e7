//! Item attribute features used as pre-training input.
//!
//! Real deployments would encode item text with a sentence encoder; here
//! features either come from a file or are synthesized so that items which
//! co-occur in user histories get correlated vectors.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::log::InteractionLog;
use crate::numerics::{kmeans, DenseMatrix, Purpose, RngStream, StreamKey};
use crate::{Error, Result};

/// Number of latent categories used by the synthetic source.
pub const SYNTHETIC_CLUSTERS: usize = 16;

const SKETCH_DIM: usize = 64;
const NOISE_SCALE: f32 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureProvenance {
    File,
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct ItemFeatureMatrix {
    /// `n × k_p`, row `i` belongs to dense item `i`.
    pub features: DenseMatrix,
    pub provenance: FeatureProvenance,
}

impl ItemFeatureMatrix {
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_items(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    /// `item_id<TAB>v1,v2,...` per line, keyed by raw item id.
    File(PathBuf),
    Synthetic { dim: usize, seed: u64 },
}

pub fn build_item_features(log: &InteractionLog, source: &FeatureSource) -> Result<ItemFeatureMatrix> {
    match source {
        FeatureSource::File(path) => load_feature_file(log, path),
        FeatureSource::Synthetic { dim, seed } => synthetic_features(log, *dim, *seed),
    }
}

fn load_feature_file(log: &InteractionLog, path: &Path) -> Result<ItemFeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let index: std::collections::HashMap<&str, usize> = log
        .item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut rows: Vec<Option<Vec<f32>>> = vec![None; log.num_items];
    let mut dim = None;
    let origin = path.display().to_string();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.clone(),
            line: lineno + 1,
            message,
        };
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `item_id<TAB>values`".into()))?;
        let vec: Vec<f32> = values
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(format!("bad value: {e}")))?;
        if *dim.get_or_insert(vec.len()) != vec.len() {
            return Err(parse_err(format!("row has {} values, expected {}", vec.len(), dim.unwrap())));
        }
        if let Some(&i) = index.get(id.trim()) {
            rows[i] = Some(vec);
        }
    }
    let mut data = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        match row {
            Some(r) => data.push(r),
            None => {
                return Err(Error::Missing(format!(
                    "no feature vector for item `{}` in {origin}",
                    log.item_ids[i]
                )))
            }
        }
    }
    Ok(ItemFeatureMatrix {
        features: DenseMatrix::from_rows(&data)?,
        provenance: FeatureProvenance::File,
    })
}

/// Clusters items by a random projection of their (off-diagonal)
/// co-occurrence rows.
pub fn cooccurrence_clusters(log: &InteractionLog, clusters: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Features, 0, 0));
    let probes: Vec<Vec<f32>> = (0..log.num_items)
        .map(|_| (0..SKETCH_DIM).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect();

    let histories = log.user_histories();
    let mut sketches = vec![vec![0.0f32; SKETCH_DIM]; log.num_items];
    for hist in &histories {
        let mut user_sum = vec![0.0f32; SKETCH_DIM];
        for it in hist {
            crate::numerics::axpy(1.0, &probes[it.item as usize], &mut user_sum);
        }
        for it in hist {
            let s = &mut sketches[it.item as usize];
            crate::numerics::axpy(1.0, &user_sum, s);
            crate::numerics::axpy(-1.0, &probes[it.item as usize], s);
        }
    }
    for s in &mut sketches {
        let norm = crate::numerics::l2_norm(s);
        if norm > 0.0 {
            s.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut krng = RngStream::new(seed, StreamKey::new(Purpose::Features, 1, 0));
    let result = kmeans(&sketches, clusters, crate::numerics::kmeans::DEFAULT_ITERS, &mut krng)?;
    Ok(result.assignments)
}

fn synthetic_features(log: &InteractionLog, dim: usize, seed: u64) -> Result<ItemFeatureMatrix> {
    if dim == 0 {
        return Err(Error::invalid("feature dimension must be positive"));
    }
    let assignment = cooccurrence_clusters(log, SYNTHETIC_CLUSTERS, seed)?;
    let mut rng = RngStream::new(seed, StreamKey::new(Purpose::Features, 2, 0));
    let prototypes: Vec<Vec<f32>> = (0..SYNTHETIC_CLUSTERS)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut data = Vec::with_capacity(log.num_items * dim);
    for &c in &assignment {
        for &p in &prototypes[c] {
            let noise: f32 = StandardNormal.sample(&mut rng);
            data.push(p + NOISE_SCALE * noise);
        }
    }
    Ok(ItemFeatureMatrix {
        features: DenseMatrix::new(log.num_items, dim, data)?,
        provenance: FeatureProvenance::Synthetic,
    })
}
