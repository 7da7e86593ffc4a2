//! Reverse bridge sampling: reconstructs the change field from a baseline
//! under given conditions, and builds per-time trajectories.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::{make_grid, BridgeSchedule, SamplingGrid};
use crate::cohort::{Condition, Diagnosis, FieldKind, Subject, VertexField};
use crate::cosunet::CoSUNet;
use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// Anything that maps `(x_β, β, t, c)` to an estimate of `x_β − Δτ`.
pub trait Denoiser: Sync {
    fn num_vertices(&self) -> usize;

    /// Whether the follow-up diagnosis token was used in training.
    fn conditions_on_dxt(&self) -> bool;

    fn denoise(&self, x: &[f64], beta: usize, t_months: f64, cond: &Condition) -> Result<Vec<f64>>;
}

/// Test double returning `x − Δτ`, the exact minimiser of the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleNet {
    pub delta: Vec<f64>,
}

impl OracleNet {
    pub fn new(delta: Vec<f64>) -> Self {
        OracleNet { delta }
    }
}

impl Denoiser for OracleNet {
    fn num_vertices(&self) -> usize {
        self.delta.len()
    }

    fn conditions_on_dxt(&self) -> bool {
        true
    }

    fn denoise(&self, x: &[f64], _beta: usize, _t: f64, _cond: &Condition) -> Result<Vec<f64>> {
        if x.len() != self.delta.len() {
            return Err(Error::Shape(format!(
                "oracle over {} vertices given {}",
                self.delta.len(),
                x.len()
            )));
        }
        Ok(x.iter().zip(&self.delta).map(|(a, d)| a - d).collect())
    }
}

/// A network together with the weights it serves.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: CoSUNet,
    pub params: ParamSet,
    pub with_dxt: bool,
}

impl Denoiser for Model {
    fn num_vertices(&self) -> usize {
        self.net.num_vertices()
    }

    fn conditions_on_dxt(&self) -> bool {
        self.with_dxt
    }

    fn denoise(&self, x: &[f64], beta: usize, t_months: f64, cond: &Condition) -> Result<Vec<f64>> {
        self.net.predict(&self.params, x, beta, t_months, cond)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Number of grid stages `B̄`, including both endpoints.
    pub stages: usize,
    /// Inject transition noise (η on).
    pub stochastic: bool,
    pub seed: u64,
    /// Stochastic samples averaged per prediction.
    pub repeats: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            stages: 20,
            stochastic: true,
            seed: 0,
            repeats: 1,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::range("sampling stages", self.stages, ">= 2"));
        }
        if self.repeats == 0 {
            return Err(Error::range("repeats", 0, ">= 1"));
        }
        Ok(())
    }

    pub fn grid(&self, horizon: usize) -> Result<SamplingGrid> {
        self.validate()?;
        make_grid(horizon, self.stages)
    }
}

fn check_dxt(den: &dyn Denoiser, cond: &Condition) -> Result<()> {
    if cond.dxt.is_some() && !den.conditions_on_dxt() {
        return Err(Error::Unsupported(
            "a target diagnosis was given but the model was trained without follow-up diagnosis conditioning".into(),
        ));
    }
    Ok(())
}

/// Runs the reverse recursion `x ← ζ1·x + ζ2·τ0 − ζ3·f(x) + √δ̃·η` over the
/// grid, starting from `x = τ0`. `rng = None` switches the noise off.
#[allow(clippy::too_many_arguments)]
pub fn sample_delta(
    den: &dyn Denoiser,
    sched: &BridgeSchedule,
    grid: &SamplingGrid,
    tau0: &[f64],
    mask: &[bool],
    t_months: f64,
    cond: &Condition,
    mut rng: Option<&mut Rng>,
) -> Result<Vec<f64>> {
    if grid.horizon() != sched.horizon() {
        return Err(Error::Config(format!(
            "grid ends at {} but the schedule horizon is {}",
            grid.horizon(),
            sched.horizon()
        )));
    }
    if tau0.len() != mask.len() || tau0.len() != den.num_vertices() {
        return Err(Error::Shape(format!(
            "baseline of {} values, mask of {}, model over {} vertices",
            tau0.len(),
            mask.len(),
            den.num_vertices()
        )));
    }
    check_dxt(den, cond)?;
    let mut x: Vec<f64> = tau0.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    for (beta, next) in grid.pairs() {
        let c = sched.transition_coeffs(beta, next)?;
        let f = den.denoise(&x, beta, t_months, cond)?;
        let sd = c.noise_var.max(0.0).sqrt();
        for i in 0..x.len() {
            if !mask[i] {
                x[i] = 0.0;
                continue;
            }
            let mut v = c.zeta1 * x[i] + c.zeta2 * tau0[i] - c.zeta3 * f[i];
            if let Some(r) = rng.as_deref_mut() {
                let eta: f64 = StandardNormal.sample(r);
                v += sd * eta;
            }
            x[i] = v;
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sampler state at vertex {i} after step {beta} -> {next}"
            )));
        }
    }
    Ok(x)
}

/// Change estimate averaged over `config.repeats` samples, with noise drawn
/// from the stream `(config.seed, stream_name)`.
#[allow(clippy::too_many_arguments)]
pub fn predict_delta(
    den: &dyn Denoiser,
    sched: &BridgeSchedule,
    config: &SampleConfig,
    tau0: &[f64],
    mask: &[bool],
    t_months: f64,
    cond: &Condition,
    stream_name: &str,
) -> Result<Vec<f64>> {
    let grid = config.grid(sched.horizon())?;
    let mut rng = stream(config.seed, stream_name);
    let mut acc = vec![0.0; tau0.len()];
    for _ in 0..config.repeats {
        let r = if config.stochastic { Some(&mut rng) } else { None };
        let d = sample_delta(den, sched, &grid, tau0, mask, t_months, cond, r)?;
        acc.iter_mut().zip(&d).for_each(|(a, v)| *a += v);
    }
    let k = config.repeats as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

/// `τ̂_t = τ0 + Δτ̂`, rounded to storage precision.
pub fn predict_cth(tau0: &VertexField, delta: &[f64]) -> Result<VertexField> {
    if delta.len() != tau0.len() {
        return Err(Error::Shape(format!(
            "{} change values for a {}-vertex baseline",
            delta.len(),
            tau0.len()
        )));
    }
    let values: Vec<f64> = tau0.values().iter().zip(delta).map(|(&b, &d)| b as f64 + d).collect();
    VertexField::from_f64(tau0.level(), FieldKind::Thickness, &values, tau0.mask())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t_months: f64,
    pub target_dx: Option<Diagnosis>,
    pub cth: VertexField,
    pub mean_cth: f64,
}

/// Recorded diagnosis at time `t`: the latest visit at or before `t`, the
/// first visit if `t` precedes all visits, and the last one beyond them.
pub fn recorded_dx(subject: &Subject, t_months: f64) -> Diagnosis {
    subject
        .visits
        .iter()
        .take_while(|v| v.t_months <= t_months)
        .last()
        .or(subject.visits.first())
        .map_or(subject.dx0, |v| v.dx)
}

/// Independent predictions for each time point from the same baseline. With
/// `target_dx` set every point is conditioned on it; otherwise dxt-aware
/// models follow the subject's recorded course.
pub fn trajectory(
    den: &dyn Denoiser,
    sched: &BridgeSchedule,
    config: &SampleConfig,
    subject: &Subject,
    times: &[f64],
    target_dx: Option<Diagnosis>,
) -> Result<Vec<TrajectoryPoint>> {
    if times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "trajectory times {times:?} must be strictly increasing"
        )));
    }
    if target_dx.is_some() && !den.conditions_on_dxt() {
        return Err(Error::Unsupported(
            "counterfactual trajectories need a model trained with follow-up diagnosis conditioning".into(),
        ));
    }
    let tau0 = subject.baseline.to_f64();
    let mask = subject.baseline.mask();
    times
        .iter()
        .map(|&t| {
            let dxt = match target_dx {
                Some(dx) => Some(dx),
                None if den.conditions_on_dxt() => Some(recorded_dx(subject, t)),
                None => None,
            };
            let cond = subject.condition(dxt);
            let name = format!("trajectory/{}/{t}/{dxt:?}", subject.id);
            let delta = predict_delta(den, sched, config, &tau0, mask, t, &cond, &name)?;
            let cth = predict_cth(&subject.baseline, &delta)?;
            let mean_cth = cth.mean_valid();
            Ok(TrajectoryPoint {
                t_months: t,
                target_dx,
                cth,
                mean_cth,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic_cohort, Sex, SyntheticConfig};

    fn cond() -> Condition {
        Condition {
            age: 70.0,
            sex: Sex::M,
            dx0: Diagnosis::CN,
            dxt: None,
        }
    }

    struct ZeroNet(usize);

    impl Denoiser for ZeroNet {
        fn num_vertices(&self) -> usize {
            self.0
        }
        fn conditions_on_dxt(&self) -> bool {
            false
        }
        fn denoise(&self, x: &[f64], _: usize, _: f64, _: &Condition) -> Result<Vec<f64>> {
            Ok(vec![0.0; x.len()])
        }
    }

    #[test]
    fn oracle_recovers_delta_on_every_grid() {
        let sched = BridgeSchedule::new(100).unwrap();
        let n = 30;
        let mask: Vec<bool> = (0..n).map(|i| i % 7 != 0).collect();
        let tau0: Vec<f64> = (0..n)
            .map(|i| if mask[i] { 2.0 + 0.1 * i as f64 } else { 0.0 })
            .collect();
        let delta: Vec<f64> = (0..n).map(|i| if mask[i] { -0.01 * i as f64 } else { 0.0 }).collect();
        let oracle = OracleNet::new(delta.clone());
        for stages in [2, 5, 20, 101] {
            let grid = make_grid(100, stages).unwrap();
            let got = sample_delta(&oracle, &sched, &grid, &tau0, &mask, 12.0, &cond(), None).unwrap();
            for (a, b) in got.iter().zip(&delta) {
                assert!((a - b).abs() <= 1e-9, "{stages}: {a} vs {b}");
            }
            // With noise the last step is still exact: ζ3 = 1, δ̃ = 0.
            let mut rng = stream(1, "sampler");
            let got = sample_delta(&oracle, &sched, &grid, &tau0, &mask, 12.0, &cond(), Some(&mut rng)).unwrap();
            for (a, b) in got.iter().zip(&delta) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn zero_network_four_step_hand_trace() {
        // B = 4, full grid. Step 0→1 uses (1, 0, m1, δ1); later steps have
        // ζ1 = 1 and ζ2 = 0, so a zero output leaves x at τ0 throughout.
        let sched = BridgeSchedule::new(4).unwrap();
        let grid = make_grid(4, 5).unwrap();
        let expected = [0.25, 1.0 / 3.0, 0.5, 1.0];
        for ((b, n), z3) in grid.pairs().zip(expected) {
            let c = sched.transition_coeffs(b, n).unwrap();
            assert!((c.zeta1 - 1.0).abs() < 1e-15 && c.zeta2.abs() < 1e-15);
            assert!((c.zeta3 - z3).abs() < 1e-15, "{b}->{n}: {}", c.zeta3);
        }
        let tau0 = [2.5, 3.0, 0.0];
        let mask = [true, true, false];
        let x = sample_delta(&ZeroNet(3), &sched, &grid, &tau0, &mask, 6.0, &cond(), None).unwrap();
        assert_eq!(x, vec![2.5, 3.0, 0.0]);
    }

    #[test]
    fn dxt_guard_and_predict_cth() {
        let sched = BridgeSchedule::new(10).unwrap();
        let grid = make_grid(10, 3).unwrap();
        let c = Condition {
            dxt: Some(Diagnosis::AD),
            ..cond()
        };
        let err = sample_delta(&ZeroNet(2), &sched, &grid, &[1.0, 1.0], &[true, true], 12.0, &c, None);
        assert!(matches!(err, Err(Error::Unsupported(_))));

        let cohort = generate_synthetic_cohort(&SyntheticConfig {
            level: 1,
            n_subjects: 2,
            ..Default::default()
        })
        .unwrap();
        let s = &cohort.subjects[0];
        let same = predict_cth(&s.baseline, &vec![0.0; s.baseline.len()]).unwrap();
        assert_eq!(same, s.baseline);
        let visit = predict_cth(&s.baseline, &s.delta(1)).unwrap();
        assert_eq!(visit, s.visits[1].cth);
        assert!(predict_cth(&s.baseline, &[0.0]).is_err());
    }

    #[test]
    fn trajectories() {
        let cohort = generate_synthetic_cohort(&SyntheticConfig {
            level: 1,
            n_subjects: 3,
            ..Default::default()
        })
        .unwrap();
        let sched = BridgeSchedule::new(20).unwrap();
        let cfg = SampleConfig {
            stages: 5,
            ..Default::default()
        };
        let s = &cohort.subjects[1];
        let zero = ZeroNet(s.baseline.len());
        assert!(trajectory(&zero, &sched, &cfg, s, &[], None).unwrap().is_empty());
        let pts = trajectory(&zero, &sched, &cfg, s, &[12.0, 24.0], None).unwrap();
        assert_eq!(pts.len(), 2);
        // A zero network leaves the state at τ0, so the change estimate is τ0
        // itself and the prediction doubles the baseline.
        let det = SampleConfig {
            stochastic: false,
            ..cfg.clone()
        };
        let pts = trajectory(&zero, &sched, &det, s, &[12.0], None).unwrap();
        let doubled: Vec<f32> = s.baseline.values().iter().map(|v| 2.0 * v).collect();
        assert_eq!(pts[0].cth.values(), doubled.as_slice());
        assert!(trajectory(&zero, &sched, &cfg, s, &[24.0, 12.0], None).is_err());
        assert!(trajectory(&zero, &sched, &cfg, s, &[12.0], Some(Diagnosis::AD)).is_err());
    }

    #[test]
    fn recorded_dx_follows_visits() {
        let cohort = generate_synthetic_cohort(&SyntheticConfig {
            level: 0,
            n_subjects: 40,
            ..Default::default()
        })
        .unwrap();
        let s = cohort
            .subjects
            .iter()
            .find(|s| s.dx_path() == (Diagnosis::MCI, Diagnosis::AD))
            .expect("a converter");
        for v in &s.visits {
            assert_eq!(recorded_dx(s, v.t_months), v.dx);
        }
        assert_eq!(recorded_dx(s, 1.0), s.visits[0].dx);
        assert_eq!(recorded_dx(s, 600.0), Diagnosis::AD);
    }
}
