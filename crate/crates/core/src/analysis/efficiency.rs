//! Time-to-threshold and normalised sample efficiency `T_m / T_standard`,
//! where `T_standard` is the slowest crossing time among the methods.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEfficiency {
    pub name: String,
    /// First frame at which the curve reaches the threshold; `None` if never.
    pub time: Option<u64>,
    /// `time / T_standard`; `None` marks the method incomparable.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub threshold: f64,
    pub t_standard: Option<u64>,
    pub methods: Vec<MethodEfficiency>,
}

impl EfficiencyReport {
    pub fn ratio(&self, name: &str) -> Option<f64> {
        self.methods.iter().find(|m| m.name == name).and_then(|m| m.ratio)
    }
}

/// First `x` whose value is at least `threshold`.
pub fn time_to_threshold(curve: &[(u64, f64)], threshold: f64) -> Option<u64> {
    curve.iter().find(|(_, v)| *v >= threshold).map(|(x, _)| *x)
}

/// Lowest final value across curves: the level every method eventually reaches.
pub fn worst_final(curves: &[(String, Vec<(u64, f64)>)]) -> Option<f64> {
    curves
        .iter()
        .filter_map(|(_, c)| c.last().map(|p| p.1))
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
}

pub fn efficiency(curves: &[(String, Vec<(u64, f64)>)], threshold: f64) -> Result<EfficiencyReport> {
    if curves.is_empty() {
        return contract_err("efficiency needs at least one learning curve");
    }
    if curves.iter().any(|(_, c)| c.windows(2).any(|w| w[1].0 < w[0].0)) {
        return contract_err("learning curve x values must be non-decreasing");
    }
    let times = curves.iter().map(|(name, c)| (name.clone(), time_to_threshold(c, threshold))).collect();
    Ok(efficiency_from_times(threshold, times))
}

/// Same report from crossing times that were already measured.
pub fn efficiency_from_times(threshold: f64, times: Vec<(String, Option<u64>)>) -> EfficiencyReport {
    let t_standard = times.iter().filter_map(|(_, t)| *t).max();
    let methods = times
        .into_iter()
        .map(|(name, time)| MethodEfficiency {
            name,
            time,
            ratio: match (time, t_standard) {
                (Some(_), Some(0)) => Some(1.0),
                (Some(t), Some(s)) => Some(t as f64 / s as f64),
                _ => None,
            },
        })
        .collect();
    EfficiencyReport { threshold, t_standard, methods }
}
