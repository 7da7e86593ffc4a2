//! Longitudinal cohort model: subjects with a baseline field and follow-up
//! visits, tabular covariates, training-tuple sampling and subject-level
//! splitting.

mod field;
mod manifest;
mod synthetic;

pub use field::{FieldKind, VertexField, SBDF_HEADER_LEN, SBDF_MAGIC, SBDF_VERSION};
pub use manifest::{load_cohort, save_cohort, Manifest, ManifestSubject, ManifestVisit, MANIFEST_VERSION};
pub use synthetic::{cap_mask, generate_synthetic_cohort, DiseasePatterns, SyntheticConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    CN,
    MCI,
    AD,
}

impl Sex {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::CN, Diagnosis::MCI, Diagnosis::AD];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::F => "F",
            Sex::M => "M",
        })
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Diagnosis::CN => "CN",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        })
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F" => Ok(Sex::F),
            "M" => Ok(Sex::M),
            _ => Err(Error::range("sex", s, "F or M")),
        }
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CN" => Ok(Diagnosis::CN),
            "MCI" => Ok(Diagnosis::MCI),
            "AD" => Ok(Diagnosis::AD),
            _ => Err(Error::range("diagnosis", s, "CN, MCI or AD")),
        }
    }
}

/// Tabular covariates of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub age: f64,
    pub sex: Sex,
    pub dx0: Diagnosis,
    /// Follow-up diagnosis; only used by trajectory-conditioned models.
    pub dxt: Option<Diagnosis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    /// Months since baseline, > 0.
    pub t_months: f64,
    pub dx: Diagnosis,
    pub cth: VertexField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub sex: Sex,
    pub baseline_age: f64,
    pub dx0: Diagnosis,
    pub baseline: VertexField,
    pub visits: Vec<Visit>,
}

impl Subject {
    /// `(dx0, last follow-up dx)`, e.g. MCI→AD for converters.
    pub fn dx_path(&self) -> (Diagnosis, Diagnosis) {
        (self.dx0, self.visits.last().map_or(self.dx0, |v| v.dx))
    }

    pub fn condition(&self, dxt: Option<Diagnosis>) -> Condition {
        Condition {
            age: self.baseline_age,
            sex: self.sex,
            dx0: self.dx0,
            dxt,
        }
    }

    /// `Δτ_t = τ_t − τ_0` for visit `j`, in 64-bit.
    pub fn delta(&self, j: usize) -> Vec<f64> {
        let base = self.baseline.values();
        self.visits[j]
            .cth
            .values()
            .iter()
            .zip(base)
            .map(|(&v, &b)| v as f64 - b as f64)
            .collect()
    }

    fn validate(&self, level: u32, mask: &[bool]) -> Result<()> {
        let schema = |field: &str, msg: String| Error::Schema {
            field: format!("subjects[{}].{field}", self.id),
            msg,
        };
        if self.visits.is_empty() {
            return Err(schema("visits", "each subject needs Mi >= 1 follow-up visits".into()));
        }
        let mut last = 0.0;
        for v in &self.visits {
            if !(v.t_months > last) {
                return Err(schema(
                    "visits",
                    "visit times must be positive and strictly increasing".into(),
                ));
            }
            last = v.t_months;
        }
        for f in std::iter::once(&self.baseline).chain(self.visits.iter().map(|v| &v.cth)) {
            if f.level() != level {
                return Err(Error::LevelMismatch {
                    expected: level,
                    got: f.level(),
                });
            }
            if f.mask() != mask {
                return Err(schema("fields", "field mask differs from cohort mask".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub level: u32,
    pub mask: Vec<bool>,
    pub subjects: Vec<Subject>,
    /// Generator settings when the cohort is synthetic.
    pub generator: Option<SyntheticConfig>,
}

/// One training example `(τ0, Δτ_t, t, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub tau0: Vec<f64>,
    pub delta: Vec<f64>,
    pub t_months: f64,
    pub cond: Condition,
    pub subject: usize,
    pub visit: usize,
}

impl Cohort {
    pub fn validate(&self) -> Result<()> {
        for s in &self.subjects {
            s.validate(self.level, &self.mask)?;
        }
        Ok(())
    }

    pub fn num_scans(&self) -> usize {
        self.subjects.iter().map(|s| s.visits.len()).sum()
    }

    /// All `(subject, visit)` index pairs in cohort order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.subjects
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.visits.len()).map(move |j| (i, j)))
            .collect()
    }

    pub fn tuple(&self, subject: usize, visit: usize, with_dxt: bool) -> TrainingTuple {
        let s = &self.subjects[subject];
        let v = &s.visits[visit];
        TrainingTuple {
            tau0: s.baseline.to_f64(),
            delta: s.delta(visit),
            t_months: v.t_months,
            cond: s.condition(with_dxt.then_some(v.dx)),
            subject,
            visit,
        }
    }

    /// Draws a `(subject, visit)` pair uniformly over all follow-up scans.
    pub fn sample_training_tuple<R: Rng + ?Sized>(&self, rng: &mut R, with_dxt: bool) -> Result<TrainingTuple> {
        let pairs = self.pairs();
        if pairs.is_empty() {
            return Err(Error::Config("cannot sample from an empty cohort".into()));
        }
        let (i, j) = pairs[rng.random_range(0..pairs.len())];
        Ok(self.tuple(i, j, with_dxt))
    }

    fn subset(&self, idx: &[usize]) -> Cohort {
        Cohort {
            level: self.level,
            mask: self.mask.clone(),
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
            generator: self.generator.clone(),
        }
    }

    pub fn subject_ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    /// Subset holding the subjects with the given ids, in cohort order.
    pub fn select(&self, ids: &[String]) -> Result<Cohort> {
        let idx: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.subjects
                    .iter()
                    .position(|s| &s.id == id)
                    .ok_or_else(|| Error::Config(format!("unknown subject id `{id}`")))
            })
            .collect::<Result<_>>()?;
        Ok(self.subset(&idx))
    }
}

/// Train / validation / test cohorts.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Cohort,
    pub val: Cohort,
    pub test: Cohort,
}

/// Subject-level split stratified by sex × diagnosis path × age tercile.
///
/// Within each stratum every split receives `⌊f·n⌋` or `⌊f·n⌋ + 1` subjects;
/// leftover subjects go to the splits furthest behind their global target.
pub fn split_cohort(cohort: &Cohort, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    if cohort.subjects.is_empty() {
        return Err(Error::Config("cannot split an empty cohort".into()));
    }
    let mut ages: Vec<f64> = cohort.subjects.iter().map(|s| s.baseline_age).collect();
    ages.sort_by(f64::total_cmp);
    let n = ages.len();
    let (t1, t2) = (ages[n / 3], ages[(2 * n) / 3]);
    let tercile = |a: f64| {
        if a < t1 {
            0
        } else if a < t2 {
            1
        } else {
            2
        }
    };

    let mut strata: BTreeMap<(Sex, (Diagnosis, Diagnosis), u8), Vec<usize>> = BTreeMap::new();
    for (i, s) in cohort.subjects.iter().enumerate() {
        strata
            .entry((s.sex, s.dx_path(), tercile(s.baseline_age)))
            .or_default()
            .push(i);
    }

    let mut rng = crate::rng::stream(seed, "split");
    let mut deficit = [0.0f64; 3];
    let mut assigned: [Vec<usize>; 3] = Default::default();
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let m = members.len();
        let target: Vec<f64> = fractions.iter().map(|f| f * m as f64).collect();
        let mut counts: Vec<usize> = target.iter().map(|t| t.floor() as usize).collect();
        let mut left = m - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).filter(|&k| fractions[k] > 0.0).collect();
        order.sort_by(|&a, &b| {
            let pa = target[a] - counts[a] as f64 + deficit[a];
            let pb = target[b] - counts[b] as f64 + deficit[b];
            pb.total_cmp(&pa).then(a.cmp(&b))
        });
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        let mut offset = 0;
        for k in 0..3 {
            deficit[k] += target[k] - counts[k] as f64;
            assigned[k].extend_from_slice(&members[offset..offset + counts[k]]);
            offset += counts[k];
        }
    }
    for a in &mut assigned {
        a.sort_unstable();
    }
    Ok(Splits {
        train: cohort.subset(&assigned[0]),
        val: cohort.subset(&assigned[1]),
        test: cohort.subset(&assigned[2]),
    })
}
