//! Comparison arithmetic: improvement percentages and Welch's t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Significance level used for the `significant` flag.
pub const ALPHA: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("baseline is zero")]
    ZeroBaseline,
    #[error("sample needs at least 2 values, got {0}")]
    TooFew(usize),
    #[error("non-finite sample value")]
    NonFinite,
    #[error("both samples have zero variance and different means")]
    Degenerate,
}

/// `100 · (baseline − ours) / baseline`; negative when `ours` is worse.
pub fn improvement_pct(ours: f64, baseline: f64) -> Result<f64, StatsError> {
    if baseline == 0.0 {
        return Err(StatsError::ZeroBaseline);
    }
    Ok(100.0 * (baseline - ours) / baseline)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    /// Two-sided.
    pub p_value: f64,
    pub significant: bool,
    /// Both samples constant with equal means; `p = 1` by convention.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::TooFew(s.len()));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok(WelchResult {
                t: 0.0,
                dof: na + nb - 2.0,
                p_value: 1.0,
                significant: false,
                degenerate: true,
            });
        }
        return Err(StatsError::Degenerate);
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).expect("positive dof");
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchResult {
        t,
        dof,
        p_value,
        significant: p_value < ALPHA,
        degenerate: false,
    })
}

/// One metric from repeated seeded runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSample {
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "default_metric")]
    pub metric: String,
    pub values: Vec<f64>,
}

fn default_metric() -> String {
    "mse".into()
}

impl RunSample {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn key(&self) -> (&str, Option<usize>, &str) {
        (&self.dataset, self.horizon, &self.metric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub horizon: Option<usize>,
    pub metric: String,
    pub ours: f64,
    pub baseline: f64,
    pub improvement_pct: f64,
    /// Present when both sides have at least two runs.
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
}

/// Pairs entries by `(dataset, horizon, metric)` and reports mean
/// improvement and, where possible, the Welch p-value.
pub fn compare(ours: &[RunSample], baseline: &[RunSample]) -> Result<Vec<ComparisonRow>, StatsError> {
    let mut rows = Vec::new();
    for o in ours {
        let Some(b) = baseline.iter().find(|b| b.key() == o.key()) else {
            continue;
        };
        if o.values.is_empty() || b.values.is_empty() {
            return Err(StatsError::TooFew(0));
        }
        let (om, bm) = (o.mean(), b.mean());
        let test = if o.values.len() >= 2 && b.values.len() >= 2 {
            Some(welch_t_test(&o.values, &b.values)?)
        } else {
            None
        };
        rows.push(ComparisonRow {
            dataset: o.dataset.clone(),
            horizon: o.horizon,
            metric: o.metric.clone(),
            ours: om,
            baseline: bm,
            improvement_pct: improvement_pct(om, bm)?,
            p_value: test.map(|t| t.p_value),
            significant: test.map(|t| t.significant),
        });
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("dataset,horizon,metric,ours,baseline,improvement_pct,p_value,significant\n");
    for r in rows {
        let opt = |v: Option<String>| v.unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{},{}\n",
            r.dataset,
            opt(r.horizon.map(|h| h.to_string())),
            r.metric,
            r.ours,
            r.baseline,
            r.improvement_pct,
            opt(r.p_value.map(|p| format!("{p:e}"))),
            opt(r.significant.map(|s| s.to_string())),
        ));
    }
    out
}
