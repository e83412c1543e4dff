//! Weight-space perturbation.
//!
//! Current weights are interpolated toward a candidate, `θ ← αθ + (1−α)φ`,
//! where `α = clip(1 − μβ, α_min, α_max)` shrinks as the dormant ratio `β`
//! grows. Candidates come either from a fresh initialisation or from a
//! per-coordinate Gaussian fitted to the best-rewarded agents seen so far.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Module;
use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps slices of a flat weight vector back to named parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn of<M: Module + ?Sized>(module: &M, prefix: &str, keep: &dyn Fn(&str) -> bool) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        module.visit(prefix, &mut |name, t| {
            if keep(name) {
                entries.push(LayoutEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel();
            }
        });
        Self { entries, total: offset }
    }

    pub fn from_entries(entries: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let entries = entries
            .into_iter()
            .map(|(name, shape)| {
                let e = LayoutEntry { name, shape, offset };
                offset += e.len();
                e
            })
            .collect();
        Self { entries, total: offset }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Flat copy of a set of parameters plus the layout that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    layout: Arc<ParamLayout>,
    data: Vec<f64>,
}

impl WeightVector {
    pub fn new(layout: Arc<ParamLayout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total() {
            return dim_err(format!(
                "weight vector of length {} for layout of {}",
                data.len(),
                layout.total()
            ));
        }
        Ok(Self { layout, data })
    }

    /// Deep copy of the parameters of `module` selected by `keep`.
    pub fn flatten<M: Module + ?Sized>(module: &M, prefix: &str, keep: &dyn Fn(&str) -> bool) -> Self {
        let layout = Arc::new(ParamLayout::of(module, prefix, keep));
        Self::flatten_with(module, prefix, layout).expect("layout built from the same module")
    }

    /// Flattens `module` against an existing layout.
    pub fn flatten_with<M: Module + ?Sized>(module: &M, prefix: &str, layout: Arc<ParamLayout>) -> Result<Self> {
        let mut data = vec![0.0; layout.total()];
        let mut seen = 0;
        let mut err = None;
        let mut cursor = 0;
        module.visit(prefix, &mut |name, t| {
            let Some(e) = layout.entries.get(cursor) else { return };
            if e.name != name {
                return;
            }
            cursor += 1;
            if e.shape != t.shape() {
                err = Some(format!("{name}: layout shape {:?} vs {:?}", e.shape, t.shape()));
                return;
            }
            data[e.offset..e.offset + e.len()].copy_from_slice(t.data());
            seen += 1;
        });
        if let Some(e) = err {
            return contract_err(e);
        }
        if seen != layout.entries.len() {
            return contract_err("module does not match weight layout");
        }
        Ok(Self { layout, data })
    }

    /// Writes every slice back into the parameter of the same name.
    pub fn unflatten_into<M: Module + ?Sized>(&self, module: &mut M, prefix: &str) -> Result<()> {
        let mut cursor = 0;
        let mut err = None;
        module.visit_mut(prefix, &mut |name, t| {
            let Some(e) = self.layout.entries.get(cursor) else { return };
            if e.name != name {
                return;
            }
            cursor += 1;
            if e.shape != t.shape() {
                err = Some(format!("{name}: layout shape {:?} vs {:?}", e.shape, t.shape()));
                return;
            }
            t.data_mut().copy_from_slice(&self.data[e.offset..e.offset + e.len()]);
        });
        if let Some(e) = err {
            return contract_err(e);
        }
        if cursor != self.layout.entries.len() {
            return contract_err("module does not match weight layout");
        }
        Ok(())
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_layout(&self, other: &WeightVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopAgent {
    pub weights: WeightVector,
    pub reward: f64,
}

/// Fixed-capacity store of the best-rewarded weight snapshots.
#[derive(Debug, Clone)]
pub struct TopAgentBuffer {
    capacity: usize,
    entries: Vec<TopAgent>,
}

impl TopAgentBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("top-agent buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TopAgent] {
        &self.entries
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.reward).collect()
    }

    /// Appends while below capacity; afterwards replaces the lowest-reward
    /// entry only when `reward` is strictly greater.
    pub fn maybe_insert(&mut self, weights: WeightVector, reward: f64) -> Result<bool> {
        if !reward.is_finite() {
            return contract_err("episode reward must be finite");
        }
        if let Some(first) = self.entries.first() {
            if !first.weights.same_layout(&weights) {
                return contract_err("weight layout differs from stored agents");
            }
        }
        if self.entries.len() < self.capacity {
            self.entries.push(TopAgent { weights, reward });
            return Ok(true);
        }
        let (j, min) = self
            .entries
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bj, bm), (i, e)| if e.reward < bm { (i, e.reward) } else { (bj, bm) });
        if reward > min {
            self.entries[j] = TopAgent { weights, reward };
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Per-coordinate mean and population standard deviation, or `None` when empty.
    pub fn oriented_distribution(&self) -> Option<OrientedDistribution> {
        let first = self.entries.first()?;
        let n = self.entries.len() as f64;
        let dim = first.weights.len();
        let mut mean = vec![0.0; dim];
        for e in &self.entries {
            mean.iter_mut().zip(e.weights.data()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for e in &self.entries {
            var.iter_mut()
                .zip(e.weights.data().iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let std = var.iter().map(|s| (s / n).sqrt()).collect();
        Some(OrientedDistribution {
            mean: WeightVector {
                layout: first.weights.layout.clone(),
                data: mean,
            },
            std,
        })
    }

    /// Restores entries (e.g. from a checkpoint), enforcing capacity.
    pub fn restore(capacity: usize, entries: Vec<TopAgent>) -> Result<Self> {
        let mut b = Self::new(capacity)?;
        if entries.len() > capacity {
            return contract_err("more stored agents than capacity");
        }
        for e in entries {
            b.maybe_insert(e.weights, e.reward)?;
        }
        Ok(b)
    }
}

/// Elementwise Gaussian over weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedDistribution {
    pub mean: WeightVector,
    pub std: Vec<f64>,
}

impl OrientedDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightVector {
        let data = self
            .mean
            .data
            .iter()
            .zip(&self.std)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        WeightVector {
            layout: self.mean.layout.clone(),
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    Oriented,
    Random,
}

/// Draws a perturbation candidate; an empty buffer falls back to `fresh_init`.
/// Returns the candidate and the source that actually produced it.
pub fn sample_candidate<R: Rng + ?Sized>(
    source: CandidateSource,
    buffer: &TopAgentBuffer,
    fresh_init: impl FnOnce(&mut R) -> WeightVector,
    rng: &mut R,
) -> (WeightVector, CandidateSource) {
    match (source, buffer.oriented_distribution()) {
        (CandidateSource::Oriented, Some(dist)) => (dist.sample(rng), CandidateSource::Oriented),
        _ => (fresh_init(rng), CandidateSource::Random),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// μ in `1 − μβ`.
    pub rate: f64,
    /// Env frames between perturbations.
    pub interval_frames: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            alpha_min: 0.2,
            alpha_max: 0.9,
            rate: 2.0,
            interval_frames: 200_000,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.alpha_min
            && self.alpha_min <= self.alpha_max
            && self.alpha_max <= 1.0
            && self.rate > 0.0
            && self.interval_frames > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "need 0 <= alpha_min <= alpha_max <= 1, rate > 0, interval > 0; got {self:?}"
            )))
        }
    }
}

/// `clip(1 − μβ, α_min, α_max)`.
pub fn perturb_factor(beta: f64, cfg: &PerturbConfig) -> f64 {
    (1.0 - cfg.rate * beta).clamp(cfg.alpha_min, cfg.alpha_max)
}

/// `αθ + (1−α)φ` per coordinate.
pub fn apply_perturbation(theta: &WeightVector, phi: &WeightVector, alpha: f64) -> Result<WeightVector> {
    if !theta.same_layout(phi) {
        return contract_err("perturbation candidate layout differs from current weights");
    }
    let data = theta
        .data
        .iter()
        .zip(&phi.data)
        .map(|(t, p)| alpha * t + (1.0 - alpha) * p)
        .collect();
    Ok(WeightVector {
        layout: theta.layout.clone(),
        data,
    })
}
