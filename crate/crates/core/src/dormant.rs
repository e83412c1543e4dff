//! Dormant-neuron diagnostics.
//!
//! A neuron's score is its mean absolute activation over a probe batch,
//! normalised by the layer average of that quantity. A neuron is τ-dormant
//! when its score is at most τ, and the network ratio is the dormant count
//! over the total width of all counted layers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mlp, Tape, Tensor};
use crate::moe::MoeLayer;
use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DormantConfig {
    pub tau: f64,
    pub probe_batch_size: usize,
    /// Count the encoder output alongside the actor hidden layers.
    pub include_encoder: bool,
}

impl Default for DormantConfig {
    fn default() -> Self {
        Self {
            tau: 0.025,
            probe_batch_size: 256,
            include_encoder: false,
        }
    }
}

impl DormantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.probe_batch_size == 0 {
            return Err(Error::Config("probe_batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDormancy {
    pub layer: String,
    pub scores: Vec<f64>,
    pub dormant: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DormantReport {
    pub per_layer: Vec<LayerDormancy>,
    pub ratio: f64,
}

impl DormantReport {
    /// Recomputes the ratio from the per-layer counts.
    pub fn recomputed_ratio(&self) -> f64 {
        let d: usize = self.per_layer.iter().map(|l| l.dormant).sum();
        let n: usize = self.per_layer.iter().map(|l| l.width).sum();
        d as f64 / n as f64
    }
}

/// Anything that can expose its hidden post-activation outputs on a probe batch.
pub trait HiddenActivations {
    /// One `B × width` tensor per counted layer.
    fn hidden_activations(&self, probe: &Tensor) -> Result<Vec<(String, Tensor)>>;
}

impl HiddenActivations for Mlp {
    fn hidden_activations(&self, probe: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let mut tape = Tape::new();
        let x = tape.constant(probe);
        let (_, hidden) = self.forward_with_hidden(&mut tape, x)?;
        Ok(hidden
            .into_iter()
            .enumerate()
            .map(|(i, h)| (format!("hidden{i}"), tape.to_tensor(h)))
            .collect())
    }
}

impl HiddenActivations for MoeLayer {
    fn hidden_activations(&self, probe: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let mut tape = Tape::new();
        let x = tape.constant(probe);
        let out = self.forward_tape(&mut tape, x)?;
        Ok(out
            .expert_hidden
            .into_iter()
            .enumerate()
            .map(|(i, h)| (format!("expert{i}.hidden"), tape.to_tensor(h)))
            .collect())
    }
}

/// Per-neuron scores of a `B × N` activation matrix.
pub fn neuron_scores(outputs: &Tensor) -> Result<Vec<f64>> {
    let (b, n) = outputs.dims2()?;
    if b == 0 {
        return contract_err("neuron scores need a nonempty batch");
    }
    if n == 0 {
        return dim_err("layer has no neurons");
    }
    let mut mean_abs = vec![0.0; n];
    for row in outputs.data().chunks(n) {
        mean_abs.iter_mut().zip(row).for_each(|(m, v)| *m += v.abs());
    }
    mean_abs.iter_mut().for_each(|m| *m /= b as f64);
    let layer_mean = mean_abs.iter().sum::<f64>() / n as f64;
    if layer_mean == 0.0 {
        return Ok(vec![0.0; n]);
    }
    Ok(mean_abs.iter().map(|m| m / layer_mean).collect())
}

/// Builds the report from already-computed layer activations.
pub fn dormant_report(layers: &[(String, Tensor)], tau: f64) -> Result<DormantReport> {
    if layers.is_empty() {
        return contract_err("dormant ratio needs at least one layer");
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    for (name, acts) in layers {
        let scores = neuron_scores(acts)?;
        let dormant = scores.iter().filter(|&&s| s <= tau).count();
        per_layer.push(LayerDormancy {
            layer: name.clone(),
            width: scores.len(),
            dormant,
            scores,
        });
    }
    let d: usize = per_layer.iter().map(|l| l.dormant).sum();
    let n: usize = per_layer.iter().map(|l| l.width).sum();
    Ok(DormantReport {
        per_layer,
        ratio: d as f64 / n as f64,
    })
}

/// τ-dormant ratio of `net` on `probe`.
pub fn dormant_ratio<N: HiddenActivations + ?Sized>(net: &N, probe: &Tensor, tau: f64) -> Result<DormantReport> {
    if probe.shape().first().copied().unwrap_or(0) == 0 {
        return contract_err("empty probe batch");
    }
    let layers = net.hidden_activations(probe)?;
    dormant_report(&layers, tau)
}
