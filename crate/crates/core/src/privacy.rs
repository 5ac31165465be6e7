//! Laplace-mechanism noise for local and central differential privacy.
//!
//! Noise is parameterized directly by the Laplace scale `δ`; there is no
//! sensitivity calibration. Local noise is added by each client to its upload
//! before aggregation, central noise once by the server to the aggregate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DpMode {
    #[default]
    None,
    Ldp,
    Cdp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub mode: DpMode,
    /// Laplace scale.
    pub delta: f64,
    /// Optional L2 bound on each client's update (difference from the
    /// snapshot it started from).
    pub clip: Option<f64>,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::config("dp.delta", format!("must be a finite value >= 0, got {}", self.delta)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("dp.clip", format!("must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Whether clients add noise. A zero scale never touches any value.
    pub fn local_noise(&self) -> bool {
        self.mode == DpMode::Ldp && self.delta > 0.0
    }

    pub fn central_noise(&self) -> bool {
        self.mode == DpMode::Cdp && self.delta > 0.0
    }
}

/// One Laplace(0, δ) draw by inverting the CDF at a uniform point.
pub fn laplace_sample<R: Rng + ?Sized>(delta: f64, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u > -0.5 {
            return -delta * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// `len` i.i.d. Laplace(0, δ) values; exact zeros for `δ = 0`.
pub fn laplace_noise<R: Rng + ?Sized>(len: usize, delta: f64, rng: &mut R) -> Result<Vec<f32>> {
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::invalid(format!("Laplace scale must be >= 0, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(vec![0.0; len]);
    }
    Ok((0..len).map(|_| laplace_sample(delta, rng) as f32).collect())
}

fn add_noise<R: Rng + ?Sized>(tensors: Vec<&mut [f32]>, delta: f64, rng: &mut R) -> Result<()> {
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::invalid(format!("Laplace scale must be >= 0, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(());
    }
    for t in tensors {
        for v in t.iter_mut() {
            *v += laplace_sample(delta, rng) as f32;
        }
    }
    Ok(())
}

/// Client-side noise on every uploaded tensor.
pub fn apply_ldp<R: Rng + ?Sized>(upload: Vec<&mut [f32]>, delta: f64, rng: &mut R) -> Result<()> {
    add_noise(upload, delta, rng)
}

/// Server-side noise on the aggregated tensors.
pub fn apply_cdp<R: Rng + ?Sized>(aggregate: Vec<&mut [f32]>, delta: f64, rng: &mut R) -> Result<()> {
    add_noise(aggregate, delta, rng)
}

/// Scales `updated - base` down to L2 norm `bound` if it is longer.
pub fn clip_update(updated: Vec<&mut [f32]>, base: &[&[f32]], bound: f64) -> Result<()> {
    if updated.len() != base.len() || updated.iter().zip(base).any(|(u, b)| u.len() != b.len()) {
        return Err(Error::dim("update and snapshot layouts differ"));
    }
    let norm = updated
        .iter()
        .zip(base)
        .flat_map(|(u, b)| u.iter().zip(b.iter()))
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm <= bound {
        return Ok(());
    }
    let s = (bound / norm) as f32;
    for (u, b) in updated.into_iter().zip(base) {
        for (x, y) in u.iter_mut().zip(b.iter()) {
            *x = y + (*x - y) * s;
        }
    }
    Ok(())
}
