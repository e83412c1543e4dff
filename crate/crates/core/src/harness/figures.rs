//! Figures rebuilt from run logs. Each figure is written as an SVG with a
//! CSV of the plotted values next to it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::Value;

use super::run::load_run_metrics;
use crate::analysis::plot::{heatmap_svg, line_plot_svg, matrix_csv, series_csv, Series};
use crate::analysis::{conflict_fraction, mean_cosine, usage_matrix_from_log, CosineMatrix, GroupBy};
use crate::error::{Error, Result};
use crate::rlcore::metrics::of_kind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Dormant ratio over training.
    Dormant,
    /// Return of each perturbation candidate next to the agent's eval return.
    Candidate,
    /// Expert usage per group from the final evaluation.
    Usage(GroupBy),
    /// Mean pairwise gradient cosine between groups.
    Conflict,
    /// Eval success rate over training.
    Learning,
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("usage", g)) => Ok(Figure::Usage(g.parse()?)),
            _ => match s {
                "dormant" => Ok(Figure::Dormant),
                "candidate" => Ok(Figure::Candidate),
                "usage" => Ok(Figure::Usage(GroupBy::Task)),
                "conflict" => Ok(Figure::Conflict),
                "learning" => Ok(Figure::Learning),
                _ => Err(Error::Config(format!(
                    "unknown figure {s:?} (expected dormant, candidate, usage[:task|stage|time:W], conflict or learning)"
                ))),
            },
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Figure::Dormant => f.write_str("dormant"),
            Figure::Candidate => f.write_str("candidate"),
            Figure::Usage(g) => write!(f, "usage_{}", g.to_string().replace(':', "")),
            Figure::Conflict => f.write_str("conflict"),
            Figure::Learning => f.write_str("learning"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub svg: String,
    pub csv: String,
}

fn run_label(path: &Path) -> String {
    let p = if path.is_dir() { path } else { path.parent().unwrap_or(path) };
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn missing(metric: &str, run: &str) -> Error {
    Error::Config(format!("run {run} has no `{metric}` records"))
}

/// `(frame, record[field])` over records of `kind` that carry the field.
fn scalar_series(log: &[Value], kind: &str, field: &[&str]) -> Vec<(f64, f64)> {
    of_kind(log, kind)
        .filter_map(|r| {
            let v = field.iter().fold(r, |v, k| &v[*k]).as_f64()?;
            Some((r["frame"].as_f64()?, v))
        })
        .collect()
}

/// Cosine matrices of every conflict measurement in a log.
pub fn cosine_matrices(log: &[Value]) -> Result<Vec<CosineMatrix>> {
    of_kind(log, "conflict")
        .map(|r| {
            Ok(CosineMatrix {
                groups: serde_json::from_value(r["groups"].clone())?,
                values: serde_json::from_value(r["cosine"].clone())?,
            })
        })
        .collect()
}

/// Share of conflict measurements in a log that show a negative cosine.
pub fn log_conflict_fraction(log: &[Value]) -> Result<Option<f64>> {
    Ok(conflict_fraction(&cosine_matrices(log)?))
}

pub fn render(figure: Figure, runs: &[(String, Vec<Value>)]) -> Result<Rendered> {
    if runs.is_empty() {
        return Err(Error::Config("no runs given".into()));
    }
    match figure {
        Figure::Dormant | Figure::Learning => {
            let (kind, field, metric, title, ylabel) = match figure {
                Figure::Dormant => ("snapshot", "beta", "beta", "Dormant ratio", "dormant ratio"),
                _ => ("eval", "success_rate", "success_rate", "Eval success rate", "success rate"),
            };
            let mut series = Vec::new();
            for (name, log) in runs {
                let points = scalar_series(log, kind, &[field]);
                if points.is_empty() {
                    return Err(missing(metric, name));
                }
                series.push(Series { name: name.clone(), points });
            }
            Ok(Rendered { svg: line_plot_svg(title, "frame", ylabel, &series), csv: series_csv(&series) })
        }
        Figure::Candidate => {
            let mut series = Vec::new();
            for (name, log) in runs {
                let cand = scalar_series(log, "perturb", &["candidate", "mean_return"]);
                if cand.is_empty() {
                    return Err(missing("perturb.candidate", name));
                }
                series.push(Series { name: format!("{name} candidate"), points: cand });
                series.push(Series { name: format!("{name} agent"), points: scalar_series(log, "eval", &["mean_return"]) });
            }
            Ok(Rendered {
                svg: line_plot_svg("Perturbation candidate return", "frame", "episode return", &series),
                csv: series_csv(&series),
            })
        }
        Figure::Usage(group_by) => {
            let (name, log) = single(runs, "usage")?;
            let m = usage_matrix_from_log(log, group_by).map_err(|e| Error::Config(format!("run {name}: {e}")))?;
            let rows: Vec<String> = m.labels.iter().map(|l| format!("{} {l}", group_by.to_string())).collect();
            let cols: Vec<String> = (0..m.rows.first().map_or(0, Vec::len)).map(|e| format!("expert {e}")).collect();
            let values: Vec<Vec<Option<f64>>> = m.rows.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
            Ok(Rendered {
                svg: heatmap_svg("Expert usage intensity", &rows, &cols, &values),
                csv: matrix_csv(&rows, &cols, &values),
            })
        }
        Figure::Conflict => {
            let (name, log) = single(runs, "conflict")?;
            let ms = cosine_matrices(log)?;
            let mean = mean_cosine(&ms).ok_or_else(|| missing("conflict", name))?;
            let labels: Vec<String> = mean.groups.iter().map(|g| format!("group {g}")).collect();
            let frac = conflict_fraction(&ms).unwrap_or(0.0);
            Ok(Rendered {
                svg: heatmap_svg(
                    &format!("Gradient cosine (conflict fraction {frac:.3})"),
                    &labels,
                    &labels,
                    &mean.values,
                ),
                csv: matrix_csv(&labels, &labels, &mean.values),
            })
        }
    }
}

fn single<'a>(runs: &'a [(String, Vec<Value>)], what: &str) -> Result<&'a (String, Vec<Value>)> {
    match runs {
        [one] => Ok(one),
        _ => Err(Error::Config(format!("the {what} figure takes exactly one run"))),
    }
}

/// Renders `figure` from run directories (or metrics files) into
/// `<out_dir>/<figure>.svg` and `.csv`.
pub fn plot(figure: Figure, runs: &[PathBuf], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let logs = runs
        .iter()
        .map(|p| Ok((run_label(p), load_run_metrics(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let r = render(figure, &logs)?;
    std::fs::create_dir_all(out_dir)?;
    let svg = out_dir.join(format!("{figure}.svg"));
    let csv = out_dir.join(format!("{figure}.csv"));
    std::fs::write(&svg, r.svg)?;
    std::fs::write(&csv, r.csv)?;
    Ok((svg, csv))
}
