//! Expert-usage matrices aggregated from logged routing decisions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::rlcore::metrics::of_kind;
use crate::rlcore::RouteRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupBy {
    Task,
    Stage,
    /// Episode step bins of the given width.
    TimeBin(usize),
}

impl GroupBy {
    fn label(&self, r: &RouteRecord) -> usize {
        match *self {
            GroupBy::Task => r.task,
            GroupBy::Stage => r.stage,
            GroupBy::TimeBin(w) => r.t / w,
        }
    }
}

impl FromStr for GroupBy {
    type Err = Error;

    /// `task`, `stage`, `time` (bins of 10 steps) or `time:W`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(GroupBy::Task),
            "stage" => Ok(GroupBy::Stage),
            "time" => Ok(GroupBy::TimeBin(10)),
            _ => match s.strip_prefix("time:").map(str::parse::<usize>) {
                Some(Ok(w)) if w > 0 => Ok(GroupBy::TimeBin(w)),
                _ => Err(Error::Config(format!("unknown grouping `{s}` (task, stage, time, time:W)"))),
            },
        }
    }
}

impl fmt::Display for GroupBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupBy::Task => write!(f, "task"),
            GroupBy::Stage => write!(f, "stage"),
            GroupBy::TimeBin(w) => write!(f, "time:{w}"),
        }
    }
}

/// One row per group label (ascending), one column per expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageMatrix {
    pub group_by: GroupBy,
    pub labels: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl UsageMatrix {
    /// Most-used expert of each row (lowest index on ties).
    pub fn dominant(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best }))
            .collect()
    }
}

pub fn usage_matrix(records: &[RouteRecord], group_by: GroupBy) -> Result<UsageMatrix> {
    let Some(first) = records.first() else {
        return contract_err("no routing records");
    };
    let n = first.gates.len();
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        if r.gates.len() != n {
            return dim_err("routing records disagree on expert count");
        }
        let e = acc.entry(group_by.label(r)).or_insert_with(|| (vec![0.0; n], 0));
        e.0.iter_mut().zip(&r.gates).for_each(|(a, g)| *a += g);
        e.1 += 1;
    }
    let (labels, rows) = acc
        .into_iter()
        .map(|(l, (sum, c))| (l, sum.into_iter().map(|s| s / c as f64).collect()))
        .unzip();
    Ok(UsageMatrix { group_by, labels, rows })
}

/// Trunk kind recorded in a run header.
pub fn run_trunk(log: &[Value]) -> Result<String> {
    of_kind(log, "header")
        .next()
        .and_then(|h| h["config"]["agent"]["trunk"].as_str().map(str::to_string))
        .ok_or_else(|| Error::Format("metrics log has no header with a trunk kind".into()))
}

/// Routing records logged by a run; errors for MLP-trunk runs.
pub fn route_records(log: &[Value]) -> Result<Vec<RouteRecord>> {
    let trunk = run_trunk(log)?;
    if trunk != "moe" {
        return Err(Error::Unsupported(format!("expert usage of a run with a `{trunk}` trunk")));
    }
    let recs: Vec<RouteRecord> = of_kind(log, "route")
        .map(|v| serde_json::from_value(v.clone()))
        .collect::<std::result::Result<_, _>>()?;
    if recs.is_empty() {
        return Err(Error::Format("run logged no routing records".into()));
    }
    Ok(recs)
}

/// [`usage_matrix`] over the routing records of a run log.
pub fn usage_matrix_from_log(log: &[Value], group_by: GroupBy) -> Result<UsageMatrix> {
    usage_matrix(&route_records(log)?, group_by)
}
