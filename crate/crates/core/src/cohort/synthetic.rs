//! Parametric synthetic cohort with known ground-truth thickness change.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Cohort, Diagnosis, FieldKind, Sex, Subject, VertexField, Visit};
use crate::error::{Error, Result};
use crate::icosphere::{build_icosphere, IcosphereMesh};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub level: u32,
    pub n_subjects: usize,
    /// Follow-up times in months; every subject gets every visit.
    pub visit_months: Vec<f64>,
    /// Per-vertex standard deviation of the smooth change noise, mm.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Seed of the diagnosis patterns, shared across cohorts.
    pub pattern_seed: u64,
    pub age_range: [f64; 2],
    /// Annual thinning rates for CN, MCI, AD in mm/yr.
    pub rates: [f64; 3],
    /// Angular radius of the masked cap around the −z pole, degrees.
    pub mask_cap_deg: f64,
    /// Neighbourhood-averaging passes applied to white noise.
    pub noise_smoothing: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            level: 2,
            n_subjects: 240,
            visit_months: vec![12.0, 24.0, 36.0],
            noise_sigma: 0.02,
            seed: 0,
            pattern_seed: 7,
            age_range: [55.0, 90.0],
            rates: [0.01, 0.03, 0.07],
            mask_cap_deg: 25.0,
            noise_smoothing: 2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level > 6 {
            return Err(Error::range("synthetic level", self.level, "0..=6"));
        }
        if self.n_subjects == 0 {
            return Err(Error::range("n_subjects", 0, ">= 1"));
        }
        if self.visit_months.is_empty() {
            return Err(Error::Config("visit_months needs at least one follow-up".into()));
        }
        let mut last = 0.0;
        for &t in &self.visit_months {
            if !(t.is_finite() && t > last) {
                return Err(Error::Config(format!(
                    "visit_months {:?} must be positive and strictly increasing",
                    self.visit_months
                )));
            }
            last = t;
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::range("noise_sigma", self.noise_sigma, ">= 0"));
        }
        let [lo, hi] = self.age_range;
        if !(40.0 <= lo && lo <= hi && hi <= 100.0) {
            return Err(Error::range(
                "age_range",
                format!("{:?}", self.age_range),
                "40 <= lo <= hi <= 100",
            ));
        }
        if self.rates.iter().any(|r| !r.is_finite()) {
            return Err(Error::Config("rates must be finite".into()));
        }
        if !(0.0..180.0).contains(&self.mask_cap_deg) {
            return Err(Error::range("mask_cap_deg", self.mask_cap_deg, "[0, 180)"));
        }
        Ok(())
    }

    pub fn rate(&self, dx: Diagnosis) -> f64 {
        self.rates[dx.index()]
    }

    /// Noise-free change `−(t/12)·[r·P + 0.02·(a−70)/10]` for a visit with
    /// diagnosis `dx`.
    pub fn mean_delta(&self, patterns: &DiseasePatterns, age: f64, dx: Diagnosis, t_months: f64) -> Vec<f64> {
        let r = self.rate(dx);
        let aging = 0.02 * (age - 70.0) / 10.0;
        patterns
            .pattern(dx)
            .iter()
            .zip(&patterns.mask)
            .map(|(&p, &ok)| if ok { -(t_months / 12.0) * (r * p + aging) } else { 0.0 })
            .collect()
    }
}

/// Validity mask removing the spherical cap of `radius_deg` around −z.
pub fn cap_mask(mesh: &IcosphereMesh, radius_deg: f64) -> Vec<bool> {
    let c = radius_deg.to_radians().cos();
    mesh.vertices().iter().map(|v| -v[2] < c).collect()
}

/// Smooth per-diagnosis atrophy patterns, each with mean 1 on unmasked
/// vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct DiseasePatterns {
    pub mask: Vec<bool>,
    patterns: [Vec<f64>; 3],
}

impl DiseasePatterns {
    pub fn new(mesh: &IcosphereMesh, mask: &[bool], pattern_seed: u64) -> Result<Self> {
        let mut rng = stream(pattern_seed, "patterns");
        let mixture = |rng: &mut crate::rng::Rng| {
            let bumps: Vec<Bump> = (0..6).map(|_| Bump::draw(rng, 0.5..1.5, 0.3..0.7)).collect();
            mesh.vertices()
                .iter()
                .map(|v| 0.25 + bumps.iter().map(|b| b.at(v)).sum::<f64>())
                .collect::<Vec<f64>>()
        };
        let a = mixture(&mut rng);
        let b = mixture(&mut rng);
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let normalize = |p: Vec<f64>| -> Result<Vec<f64>> {
            let n = mask.iter().filter(|&&m| m).count();
            if n == 0 {
                return Err(Error::Config("mask leaves no valid vertices".into()));
            }
            let mean = p.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum::<f64>() / n as f64;
            Ok(p.iter()
                .zip(mask)
                .map(|(x, &m)| if m { x / mean } else { 0.0 })
                .collect())
        };
        Ok(DiseasePatterns {
            mask: mask.to_vec(),
            patterns: [normalize(a)?, normalize(ab)?, normalize(b)?],
        })
    }

    pub fn pattern(&self, dx: Diagnosis) -> &[f64] {
        &self.patterns[dx.index()]
    }
}

struct Bump {
    center: [f64; 3],
    weight: f64,
    sigma: f64,
}

impl Bump {
    fn draw<R: Rng + ?Sized>(rng: &mut R, w: std::ops::Range<f64>, s: std::ops::Range<f64>) -> Bump {
        let center = loop {
            let p: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if n > 1e-9 {
                break [p[0] / n, p[1] / n, p[2] / n];
            }
        };
        Bump {
            center,
            weight: rng.random_range(w),
            sigma: rng.random_range(s),
        }
    }

    fn at(&self, v: &[f64; 3]) -> f64 {
        let d2: f64 = (0..3).map(|k| (v[k] - self.center[k]).powi(2)).sum();
        self.weight * (-d2 / (self.sigma * self.sigma)).exp()
    }
}

/// Linear smoothing operator `S = A^passes` with `A` the closed-neighbourhood
/// mean, stored as sparse rows normalised so that `Sz` has unit per-vertex
/// variance for white `z`.
fn noise_operator(mesh: &IcosphereMesh, passes: usize) -> Vec<Vec<(usize, f64)>> {
    let n = mesh.num_vertices();
    let mut rows: Vec<BTreeMap<usize, f64>> = (0..n).map(|v| BTreeMap::from([(v, 1.0)])).collect();
    for _ in 0..passes {
        rows = rows
            .iter()
            .map(|row| {
                // row · A: spread each weight over the closed neighbourhood of its column.
                let mut out = BTreeMap::new();
                for (&k, &w) in row {
                    let nb = mesh.neighbors(k);
                    let share = w / (nb.len() + 1) as f64;
                    for &j in nb.iter().chain(std::iter::once(&k)) {
                        *out.entry(j).or_insert(0.0) += share;
                    }
                }
                out
            })
            .collect();
    }
    rows.into_iter()
        .map(|row| {
            let norm = row.values().map(|w| w * w).sum::<f64>().sqrt();
            row.into_iter().map(|(j, w)| (j, w / norm)).collect()
        })
        .collect()
}

/// Generates a cohort whose visits equal baseline plus ground-truth change.
pub fn generate_synthetic_cohort(config: &SyntheticConfig) -> Result<Cohort> {
    config.validate()?;
    let mesh = build_icosphere(config.level)?;
    let mask = cap_mask(&mesh, config.mask_cap_deg);
    let patterns = DiseasePatterns::new(&mesh, &mask, config.pattern_seed)?;
    let smoother = noise_operator(&mesh, config.noise_smoothing);
    let n = mesh.num_vertices();

    let subjects = (0..config.n_subjects)
        .map(|i| {
            let mut rng = stream(config.seed, &format!("subject/{i}"));
            let [lo, hi] = config.age_range;
            let age = if lo == hi { lo } else { rng.random_range(lo..hi) };
            let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
            let shift = match sex {
                Sex::F => 0.05,
                Sex::M => -0.05,
            };
            let bumps: Vec<Bump> = (0..20).map(|_| Bump::draw(&mut rng, -0.8..0.8, 0.2..0.6)).collect();
            let tau0: Vec<f64> = mesh
                .vertices()
                .iter()
                .map(|v| (2.5 + shift + bumps.iter().map(|b| b.at(v)).sum::<f64>()).clamp(1.0, 4.5))
                .collect();
            let baseline = VertexField::from_f64(config.level, FieldKind::Thickness, &tau0, &mask)?;

            let nv = config.visit_months.len();
            let path = rng.random_range(0..4u8);
            let convert_at = rng.random_range(0..nv);
            let (dx0, visit_dx): (Diagnosis, Box<dyn Fn(usize) -> Diagnosis>) = match path {
                0 => (Diagnosis::CN, Box::new(|_| Diagnosis::CN)),
                1 => (Diagnosis::MCI, Box::new(|_| Diagnosis::MCI)),
                2 => (
                    Diagnosis::MCI,
                    Box::new(move |j| if j >= convert_at { Diagnosis::AD } else { Diagnosis::MCI }),
                ),
                _ => (Diagnosis::AD, Box::new(|_| Diagnosis::AD)),
            };

            let base32 = baseline.to_f64();
            let visits = config
                .visit_months
                .iter()
                .enumerate()
                .map(|(j, &t)| {
                    let dx = visit_dx(j);
                    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let mean = config.mean_delta(&patterns, age, dx, t);
                    let values: Vec<f64> = (0..n)
                        .map(|v| {
                            let xi: f64 = smoother[v].iter().map(|&(k, w)| w * z[k]).sum();
                            base32[v] + mean[v] + config.noise_sigma * xi
                        })
                        .collect();
                    Ok(Visit {
                        t_months: t,
                        dx,
                        cth: VertexField::from_f64(config.level, FieldKind::Thickness, &values, &mask)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Subject {
                id: format!("sub-{i:04}"),
                sex,
                baseline_age: age,
                dx0,
                baseline,
                visits,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let cohort = Cohort {
        level: config.level,
        mask,
        subjects,
        generator: Some(config.clone()),
    };
    cohort.validate()?;
    Ok(cohort)
}
