//! Evaluation: masked MAE, subgroup summaries, paired tests against
//! baselines, and vertex-level error maps.

mod linreg;
mod wilcoxon;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use linreg::{features, LinearBaseline, NUM_FEATURES};
pub use wilcoxon::{midranks, wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};

use crate::bridge::BridgeSchedule;
use crate::cohort::{Cohort, Diagnosis, Subject};
use crate::cohort::{FieldKind, VertexField};
use crate::error::{Error, Result};
use crate::sampler::{predict_delta, Denoiser, SampleConfig};

pub const REPORT_VERSION: u32 = 1;

/// Mean of `|pred − truth|` over unmasked vertices.
pub fn mae(pred: &VertexField, truth: &VertexField) -> Result<f64> {
    pred.check_compatible(truth)?;
    mae_masked(&pred.to_f64(), &truth.to_f64(), pred.mask())
}

pub fn mae_masked(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "MAE over {} predicted, {} true values and a {}-vertex mask",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let (sum, n) = pred
        .iter()
        .zip(truth)
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| (s + (p - t).abs(), n + 1));
    if n == 0 {
        return Err(Error::Config("MAE over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub subject: String,
    pub visit: usize,
    pub t_months: f64,
    pub dx0: Diagnosis,
    pub dx: Diagnosis,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// Diagnosis at the predicted visit.
    #[default]
    FollowUp,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            n: values.len(),
            mean,
            sd: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub all: Stats,
    /// Only groups present in the data appear.
    pub groups: BTreeMap<Diagnosis, Stats>,
}

pub fn aggregate(results: &[ScanResult], by: GroupBy) -> Result<Aggregate> {
    let all: Vec<f64> = results.iter().map(|r| r.mae).collect();
    let all = Stats::of(&all).ok_or_else(|| Error::Config("cannot aggregate zero scans".into()))?;
    let mut buckets: BTreeMap<Diagnosis, Vec<f64>> = BTreeMap::new();
    for r in results {
        let key = match by {
            GroupBy::FollowUp => r.dx,
            GroupBy::Baseline => r.dx0,
        };
        buckets.entry(key).or_default().push(r.mae);
    }
    let groups = buckets
        .into_iter()
        .filter_map(|(k, v)| Stats::of(&v).map(|s| (k, s)))
        .collect();
    Ok(Aggregate { all, groups })
}

/// Per-scan results of one predictor plus its per-vertex mean absolute
/// error (zero on masked vertices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scans: Vec<ScanResult>,
    pub error_map: Vec<f64>,
}

/// Scores `predict(subject, visit) -> Δτ̂` on every follow-up of `test`.
pub fn evaluate_with<F>(test: &Cohort, mut predict: F) -> Result<Evaluation>
where
    F: FnMut(&Subject, usize) -> Result<Vec<f64>>,
{
    let nv = test.mask.len();
    let mut scans = Vec::with_capacity(test.num_scans());
    let mut err_sum = vec![0.0; nv];
    for s in &test.subjects {
        for (j, v) in s.visits.iter().enumerate() {
            let pred = predict(s, j)?;
            let truth = s.delta(j);
            let m = mae_masked(&pred, &truth, &test.mask)?;
            for k in (0..nv).filter(|&k| test.mask[k]) {
                err_sum[k] += (pred[k] - truth[k]).abs();
            }
            scans.push(ScanResult {
                subject: s.id.clone(),
                visit: j,
                t_months: v.t_months,
                dx0: s.dx0,
                dx: v.dx,
                mae: m,
            });
        }
    }
    if scans.is_empty() {
        return Err(Error::Config("evaluation cohort has no follow-up scans".into()));
    }
    let n = scans.len() as f64;
    Ok(Evaluation {
        scans,
        error_map: err_sum.into_iter().map(|e| e / n).collect(),
    })
}

/// Sampler predictions; dxt-aware models receive each visit's recorded
/// diagnosis.
pub fn evaluate_model(
    den: &dyn Denoiser,
    sched: &BridgeSchedule,
    config: &SampleConfig,
    test: &Cohort,
) -> Result<Evaluation> {
    evaluate_with(test, |s, j| {
        let dxt = den.conditions_on_dxt().then(|| s.visits[j].dx);
        let tau0 = s.baseline.to_f64();
        predict_delta(
            den,
            sched,
            config,
            &tau0,
            &test.mask,
            s.visits[j].t_months,
            &s.condition(dxt),
            &format!("eval/{}/{}", s.id, j),
        )
    })
}

pub fn evaluate_no_change(test: &Cohort) -> Result<Evaluation> {
    let nv = test.mask.len();
    evaluate_with(test, |_, _| Ok(vec![0.0; nv]))
}

pub fn evaluate_linear(lr: &LinearBaseline, test: &Cohort) -> Result<Evaluation> {
    if lr.mask != test.mask {
        return Err(Error::Shape("linear baseline was fitted on a different mask".into()));
    }
    evaluate_with(test, |s, j| Ok(lr.predict(s.visits[j].t_months, &s.condition(None))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub aggregate: Aggregate,
    pub scans: Vec<ScanResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    /// `None` when there are too few non-zero paired differences.
    pub wilcoxon: Option<WilcoxonResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub group_by: GroupBy,
    pub model: MethodReport,
    pub baselines: Vec<MethodReport>,
    /// Model against each baseline on the same scans.
    pub comparisons: Vec<Comparison>,
    /// Per-vertex mean absolute error of the model.
    pub error_map: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn build(model: Evaluation, baselines: Vec<(String, Evaluation)>, group_by: GroupBy) -> Result<Self> {
        let model_mae: Vec<f64> = model.scans.iter().map(|r| r.mae).collect();
        let mut comparisons = Vec::new();
        let mut reports = Vec::new();
        for (name, ev) in baselines {
            let same = ev.scans.len() == model.scans.len()
                && ev
                    .scans
                    .iter()
                    .zip(&model.scans)
                    .all(|(a, b)| a.subject == b.subject && a.visit == b.visit);
            if !same {
                return Err(Error::Shape(format!("baseline {name} was scored on different scans")));
            }
            let other: Vec<f64> = ev.scans.iter().map(|r| r.mae).collect();
            let (wilcoxon, note) = match wilcoxon_signed_rank(&model_mae, &other) {
                Ok(w) => (Some(w), None),
                Err(e) if e.is_validation() => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
            comparisons.push(Comparison {
                baseline: name.clone(),
                wilcoxon,
                note,
            });
            reports.push(MethodReport {
                aggregate: aggregate(&ev.scans, group_by)?,
                name,
                scans: ev.scans,
            });
        }
        Ok(Self {
            version: REPORT_VERSION,
            group_by,
            model: MethodReport {
                name: "model".into(),
                aggregate: aggregate(&model.scans, group_by)?,
                scans: model.scans,
            },
            baselines: reports,
            comparisons,
            error_map: model.error_map,
            warnings: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Writes `<stem>.sbdf` (delta kind) and `<stem>.csv` with one
/// `vertex_index,error_mm` row per unmasked vertex.
pub fn export_error_map(map: &[f64], mask: &[bool], level: u32, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let field = VertexField::from_f64(level, FieldKind::Delta, map, mask)?;
    let sbdf = stem.with_extension("sbdf");
    let csv = stem.with_extension("csv");
    field.write(&sbdf)?;
    let mut out = String::from("vertex_index,error_mm\n");
    for (i, v) in field.values().iter().enumerate().filter(|(i, _)| mask[*i]) {
        let _ = writeln!(out, "{i},{v}");
    }
    std::fs::write(&csv, out).map_err(|e| Error::io(&csv, e))?;
    Ok((sbdf, csv))
}
