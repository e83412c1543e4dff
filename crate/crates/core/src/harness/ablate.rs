//! Four-way ablation over MoE trunk and task-oriented perturbation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::RunConfig;
use super::run::{load_run_metrics, run};
use crate::analysis::{efficiency_from_times, time_to_threshold, EfficiencyReport};
use crate::error::{Error, Result};
use crate::rlcore::metrics::of_kind;
use crate::rlcore::{PerturbMode, TrunkKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MENTOR")]
    Full,
    #[serde(rename = "MENTOR_w/o_TP")]
    NoTp,
    #[serde(rename = "MENTOR_w/o_MoE")]
    NoMoe,
    #[serde(rename = "MENTOR_w/o_TP_MoE")]
    NoTpMoe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoTp, Variant::NoMoe, Variant::NoTpMoe];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "MENTOR",
            Variant::NoTp => "MENTOR_w/o_TP",
            Variant::NoMoe => "MENTOR_w/o_MoE",
            Variant::NoTpMoe => "MENTOR_w/o_TP_MoE",
        }
    }

    /// Label usable as a directory name.
    pub fn dir_name(self) -> String {
        self.label().replace("w/o", "wo")
    }

    pub fn trunk(self) -> TrunkKind {
        match self {
            Variant::Full | Variant::NoTp => TrunkKind::Moe,
            Variant::NoMoe | Variant::NoTpMoe => TrunkKind::Mlp,
        }
    }

    /// Without task-oriented perturbation the MoE agent keeps dormant-ratio
    /// perturbation from a random initializer; with neither component the
    /// agent is the plain actor-critic.
    pub fn perturb(self) -> PerturbMode {
        match self {
            Variant::Full | Variant::NoMoe => PerturbMode::Oriented,
            Variant::NoTp => PerturbMode::Random,
            Variant::NoTpMoe => PerturbMode::Off,
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        RunConfig { trunk: self.trunk(), perturb: self.perturb(), ..base.clone() }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s || v.dir_name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

/// Eval-record field used for learning curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMetric {
    SuccessRate,
    MeanReturn,
}

impl CurveMetric {
    pub fn field(self) -> &'static str {
        match self {
            CurveMetric::SuccessRate => "success_rate",
            CurveMetric::MeanReturn => "mean_return",
        }
    }
}

impl FromStr for CurveMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "success_rate" => Ok(CurveMetric::SuccessRate),
            "mean_return" => Ok(CurveMetric::MeanReturn),
            _ => Err(Error::Config(format!("unknown curve metric {s:?} (expected success_rate or mean_return)"))),
        }
    }
}

/// `(frame, value)` of every eval record in a log.
pub fn learning_curve(log: &[Value], metric: CurveMetric) -> Result<Vec<(u64, f64)>> {
    of_kind(log, "eval")
        .map(|r| {
            let frame = r["frame"].as_u64();
            let v = r[metric.field()].as_f64();
            match (frame, v) {
                (Some(f), Some(v)) => Ok((f, v)),
                _ => Err(Error::Config(format!("eval record without {}", metric.field()))),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub curve: Vec<(u64, f64)>,
    pub time: Option<u64>,
    pub final_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seeds: Vec<SeedResult>,
    /// Median crossing time over seeds; a run that never crosses counts as
    /// slower than every run that does.
    pub median_time: Option<u64>,
    pub median_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: Variant,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub env: String,
    pub metric: CurveMetric,
    pub threshold: f64,
    pub variants: Vec<VariantResult>,
    pub efficiency: EfficiencyReport,
    pub failures: Vec<RunFailure>,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn median_time(&self, v: Variant) -> Option<u64> {
        self.variant(v).and_then(|r| r.median_time)
    }

    /// Whether `a` reaches the threshold no later than `b` (in median).
    /// Never reaching it is slower than any finite time.
    pub fn no_slower(&self, a: Variant, b: Variant) -> bool {
        match (self.median_time(a), self.median_time(b)) {
            (Some(x), Some(y)) => x <= y,
            (Some(_), None) => true,
            (None, None) => self.variant(a).is_some() && self.variant(b).is_some(),
            (None, Some(_)) => false,
        }
    }

    /// MENTOR ≤ w/o TP, MENTOR ≤ w/o MoE, and both ablations ≤ w/o both.
    pub fn ordering_holds(&self) -> bool {
        self.no_slower(Variant::Full, Variant::NoTp)
            && self.no_slower(Variant::Full, Variant::NoMoe)
            && self.no_slower(Variant::NoTp, Variant::NoTpMoe)
            && self.no_slower(Variant::NoMoe, Variant::NoTpMoe)
    }

    pub fn efficiency_csv(&self) -> String {
        let mut out = String::from("method,median_time,ratio\n");
        for m in &self.efficiency.methods {
            let t = m.time.map(|t| t.to_string()).unwrap_or_default();
            let r = m.ratio.map(|r| format!("{r:.4}")).unwrap_or_default();
            out.push_str(&format!("{},{t},{r}\n", m.name));
        }
        out
    }
}

/// Median with `None` ordered after every value; even counts average the
/// middle pair.
pub fn median_time(times: &[Option<u64>]) -> Option<u64> {
    if times.is_empty() {
        return None;
    }
    let mut sorted = times.to_vec();
    sorted.sort_by_key(|t| (t.is_none(), *t));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        match (sorted[n / 2 - 1], sorted[n / 2]) {
            (Some(a), Some(b)) => Some((a + b) / 2),
            _ => None,
        }
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub metric: CurveMetric,
    /// `None` uses the median final value of the worst variant.
    pub threshold: Option<f64>,
    pub workers: usize,
}

/// Runs every variant for every seed, then summarises the completed runs.
/// Failed runs are listed in the report; their siblings are kept.
pub fn ablate(spec: &AblationSpec) -> Result<AblationReport> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    spec.base.validate()?;
    let jobs: Vec<(Variant, u64)> =
        Variant::ALL.iter().flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s))).collect();
    let results: Mutex<Vec<Option<std::result::Result<PathBuf, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..spec.workers.max(1).min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(variant, seed)) = jobs.get(i) else { break };
                let mut cfg = variant.apply(&spec.base);
                cfg.seed = seed;
                cfg.out_dir = spec.out_dir.join(variant.dir_name()).join(format!("seed{seed}")).to_string_lossy().into_owned();
                let r = run(&cfg).map(|a| a.dir).map_err(|e| e.to_string());
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("worker panicked");
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (&(variant, seed), r) in jobs.iter().zip(results) {
        match r {
            Some(Ok(dir)) => runs.push((variant, seed, dir)),
            Some(Err(error)) => failures.push(RunFailure { variant, seed, error }),
            None => failures.push(RunFailure { variant, seed, error: "not run".into() }),
        }
    }
    let report = summarize(&spec.base.env, &runs, spec.metric, spec.threshold, failures)?;
    std::fs::create_dir_all(&spec.out_dir)?;
    write_report(&spec.out_dir, &report)?;
    Ok(report)
}

pub fn write_report(dir: &Path, report: &AblationReport) -> Result<()> {
    std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(report)? + "\n")?;
    std::fs::write(dir.join("efficiency.csv"), report.efficiency_csv())?;
    Ok(())
}

/// Builds the report from finished run directories.
pub fn summarize(
    env: &str,
    runs: &[(Variant, u64, PathBuf)],
    metric: CurveMetric,
    threshold: Option<f64>,
    failures: Vec<RunFailure>,
) -> Result<AblationReport> {
    let mut curves: Vec<(Variant, u64, PathBuf, Vec<(u64, f64)>)> = Vec::new();
    for (v, s, dir) in runs {
        let log = load_run_metrics(dir)?;
        curves.push((*v, *s, dir.clone(), learning_curve(&log, metric)?));
    }
    let finals = |v: Variant| -> Vec<f64> {
        curves.iter().filter(|c| c.0 == v).filter_map(|c| c.3.last().map(|p| p.1)).collect()
    };
    let threshold = match threshold {
        Some(t) => t,
        None => Variant::ALL
            .iter()
            .filter_map(|&v| median(&finals(v)))
            .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.min(x))))
            .ok_or_else(|| Error::Config("no completed runs to summarise".into()))?,
    };
    let mut variants = Vec::new();
    for v in Variant::ALL {
        let seeds: Vec<SeedResult> = curves
            .iter()
            .filter(|c| c.0 == v)
            .map(|(_, seed, dir, curve)| SeedResult {
                seed: *seed,
                dir: dir.clone(),
                time: time_to_threshold(curve, threshold),
                final_value: curve.last().map(|p| p.1),
                curve: curve.clone(),
            })
            .collect();
        if seeds.is_empty() {
            continue;
        }
        let times: Vec<Option<u64>> = seeds.iter().map(|s| s.time).collect();
        variants.push(VariantResult {
            variant: v,
            median_time: median_time(&times),
            median_final: median(&finals(v)),
            seeds,
        });
    }
    let efficiency = efficiency_from_times(
        threshold,
        variants.iter().map(|r| (r.variant.label().to_string(), r.median_time)).collect(),
    );
    Ok(AblationReport { env: env.to_string(), metric, threshold, variants, efficiency, failures })
}
