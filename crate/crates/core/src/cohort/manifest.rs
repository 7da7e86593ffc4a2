//! JSON cohort manifest pointing at SBDF field files.
//!
//! ```json
//! {
//!   "version": 1,
//!   "level": 2,
//!   "mask": "mask.sbdf",
//!   "generator": { ... },
//!   "subjects": [
//!     { "id": "sub-0000", "sex": "F", "age": 71.3, "dx0": "CN",
//!       "baseline": "fields/sub-0000_base.sbdf",
//!       "visits": [ { "t_months": 12.0, "dx": "CN", "field": "fields/sub-0000_v1.sbdf" } ] }
//!   ]
//! }
//! ```
//!
//! Field paths are relative to the manifest's directory. The mask file is a
//! thickness field holding 1 on valid vertices.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cohort, Diagnosis, FieldKind, Sex, Subject, SyntheticConfig, VertexField, Visit};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub level: u32,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticConfig>,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubject {
    pub id: String,
    pub sex: Sex,
    pub age: f64,
    pub dx0: Diagnosis,
    pub baseline: PathBuf,
    pub visits: Vec<ManifestVisit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVisit {
    pub t_months: f64,
    pub dx: Diagnosis,
    pub field: PathBuf,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Schema {
            field: "manifest".into(),
            msg: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |field: String, msg: &str| Error::Schema { field, msg: msg.into() };
        if self.version != MANIFEST_VERSION {
            return Err(schema("version".into(), "unsupported manifest version"));
        }
        let mut ids = HashSet::new();
        for (i, s) in self.subjects.iter().enumerate() {
            if s.id.is_empty() || !ids.insert(s.id.as_str()) {
                return Err(schema(format!("subjects[{i}].id"), "ids must be non-empty and unique"));
            }
            if !(s.age.is_finite() && s.age > 0.0) {
                return Err(schema(
                    format!("subjects[{i}].age"),
                    "age must be a positive number of years",
                ));
            }
            if s.visits.is_empty() {
                return Err(schema(
                    format!("subjects[{i}].visits"),
                    "each subject needs Mi >= 1 follow-up visits",
                ));
            }
            let mut last = 0.0;
            for (j, v) in s.visits.iter().enumerate() {
                if !(v.t_months.is_finite() && v.t_months > last) {
                    return Err(schema(
                        format!("subjects[{i}].visits[{j}].t_months"),
                        "visit times must be positive and strictly increasing",
                    ));
                }
                last = v.t_months;
            }
        }
        Ok(())
    }
}

fn read_field(root: &Path, rel: &Path) -> Result<VertexField> {
    let path = root.join(rel);
    if !path.is_file() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "field file missing"),
        ));
    }
    VertexField::read(&path).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// Loads and validates a cohort from a manifest file.
pub fn load_cohort(manifest_path: &Path) -> Result<Cohort> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m = Manifest::from_json(&text)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mask_field = read_field(root, &m.mask)?;
    if mask_field.level() != m.level {
        return Err(Error::LevelMismatch {
            expected: m.level,
            got: mask_field.level(),
        });
    }
    let mask = mask_field.mask().to_vec();
    let subjects = m
        .subjects
        .iter()
        .map(|s| {
            let visits = s
                .visits
                .iter()
                .map(|v| {
                    Ok(Visit {
                        t_months: v.t_months,
                        dx: v.dx,
                        cth: read_field(root, &v.field)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Subject {
                id: s.id.clone(),
                sex: s.sex,
                baseline_age: s.age,
                dx0: s.dx0,
                baseline: read_field(root, &s.baseline)?,
                visits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cohort = Cohort {
        level: m.level,
        mask,
        subjects,
        generator: m.generator,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Writes `manifest.json`, `mask.sbdf` and per-scan fields under `dir`.
/// Returns the manifest path.
pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    cohort.validate()?;
    let fields = dir.join("fields");
    std::fs::create_dir_all(&fields).map_err(|e| Error::io(&fields, e))?;
    let ones: Vec<f64> = vec![1.0; cohort.mask.len()];
    VertexField::from_f64(cohort.level, FieldKind::Thickness, &ones, &cohort.mask)?.write(&dir.join("mask.sbdf"))?;

    let mut subjects = Vec::with_capacity(cohort.subjects.len());
    for s in &cohort.subjects {
        let base = PathBuf::from("fields").join(format!("{}_base.sbdf", s.id));
        s.baseline.write(&dir.join(&base))?;
        let mut visits = Vec::with_capacity(s.visits.len());
        for (j, v) in s.visits.iter().enumerate() {
            let rel = PathBuf::from("fields").join(format!("{}_v{}.sbdf", s.id, j + 1));
            v.cth.write(&dir.join(&rel))?;
            visits.push(ManifestVisit {
                t_months: v.t_months,
                dx: v.dx,
                field: rel,
            });
        }
        subjects.push(ManifestSubject {
            id: s.id.clone(),
            sex: s.sex,
            age: s.baseline_age,
            dx0: s.dx0,
            baseline: base,
            visits,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        level: cohort.level,
        mask: PathBuf::from("mask.sbdf"),
        generator: cohort.generator.clone(),
        subjects,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::generate_synthetic_cohort;

    fn cohort() -> Cohort {
        generate_synthetic_cohort(&SyntheticConfig {
            level: 1,
            n_subjects: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_equal() {
        let dir = tempfile::tempdir().unwrap();
        let c = cohort();
        let path = save_cohort(&c, dir.path()).unwrap();
        assert_eq!(load_cohort(&path).unwrap(), c);
    }

    #[test]
    fn missing_visit_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_cohort(&cohort(), dir.path()).unwrap();
        let gone = dir.path().join("fields").join("sub-0002_v2.sbdf");
        std::fs::remove_file(&gone).unwrap();
        let err = load_cohort(&path).unwrap_err();
        assert!(err.to_string().contains("sub-0002_v2.sbdf"), "{err}");
    }

    #[test]
    fn zero_visits_rejected() {
        let text = r#"{"version":1,"level":1,"mask":"m.sbdf","subjects":[
            {"id":"a","sex":"F","age":70,"dx0":"CN","baseline":"b.sbdf","visits":[]}]}"#;
        let err = Manifest::from_json(text).unwrap_err();
        assert!(matches!(&err, Error::Schema { field, .. } if field == "subjects[0].visits"));
        assert!(err.to_string().contains("Mi >= 1"));
    }

    #[test]
    fn schema_errors() {
        for bad in [
            r#"{"version":1,"level":1,"mask":"m","subjects":[],"extra":1}"#,
            r#"{"version":2,"level":1,"mask":"m","subjects":[]}"#,
            r#"{"version":1,"level":1,"mask":"m","subjects":[{"id":"a","sex":"X","age":70,"dx0":"CN","baseline":"b","visits":[]}]}"#,
            r#"{"version":1,"level":1,"mask":"m","subjects":[{"id":"a","sex":"F","age":70,"dx0":"CN","baseline":"b","visits":[{"t_months":12,"dx":"CN","field":"x"},{"t_months":6,"dx":"CN","field":"y"}]}]}"#,
        ] {
            assert!(matches!(Manifest::from_json(bad), Err(Error::Schema { .. })), "{bad}");
        }
    }
}
