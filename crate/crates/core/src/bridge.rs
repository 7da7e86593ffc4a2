//! Closed-form Brownian-bridge algebra between a baseline field (step 0) and
//! a change field (step `B`).
//!
//! The marginal at step `β` is `N((1 − m)·x0 + m·xB, δ)` with `m = β/B` and
//! `δ = 2(m − m²)`. All functions here operate on plain f64 slices with a
//! validity mask; masked entries are always produced as 0.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    horizon: usize,
    m: Vec<f64>,
    delta: Vec<f64>,
}

/// Coefficients of one reverse transition `β → β′`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoeffs {
    /// Weight of the current state.
    pub zeta1: f64,
    /// Weight of the baseline.
    pub zeta2: f64,
    /// Weight of the network output (subtracted).
    pub zeta3: f64,
    /// Variance of the injected noise.
    pub noise_var: f64,
    /// Conditional variance `δ_{β|β′}`.
    pub cond_var: f64,
}

impl BridgeSchedule {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::range("bridge horizon", horizon, ">= 2"));
        }
        let b = horizon as f64;
        let m = (0..=horizon).map(|i| i as f64 / b).collect();
        // 2(m − m²) = 2β(B − β)/B², evaluated from exact integers so that
        // δ[β] = δ[B − β] bit for bit.
        let delta = (0..=horizon)
            .map(|i| (2 * i * (horizon - i)) as f64 / (b * b))
            .collect();
        Ok(BridgeSchedule { horizon, m, delta })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn m(&self, beta: usize) -> f64 {
        self.m[beta]
    }

    pub fn delta(&self, beta: usize) -> f64 {
        self.delta[beta]
    }

    pub fn m_all(&self) -> &[f64] {
        &self.m
    }

    pub fn delta_all(&self) -> &[f64] {
        &self.delta
    }

    fn check_step(&self, beta: usize) -> Result<()> {
        if beta > self.horizon {
            return Err(Error::range("bridge step", beta, format!("0..={}", self.horizon)));
        }
        Ok(())
    }

    /// Mean of the marginal at `beta` for scalar endpoints.
    pub fn marginal_mean(&self, beta: usize, x0: f64, xb: f64) -> f64 {
        (1.0 - self.m[beta]) * x0 + self.m[beta] * xb
    }

    /// `x_β = (1 − m)·τ0 + m·Δτ + √δ·ε` on unmasked entries.
    pub fn forward_sample(
        &self,
        tau0: &[f64],
        delta_tau: &[f64],
        beta: usize,
        eps: &[f64],
        mask: &[bool],
    ) -> Result<Vec<f64>> {
        self.check_step(beta)?;
        check_lengths(&[tau0.len(), delta_tau.len(), eps.len(), mask.len()])?;
        let (m, s) = (self.m[beta], self.delta[beta].sqrt());
        Ok(mask
            .iter()
            .enumerate()
            .map(|(i, &ok)| {
                if ok {
                    (1.0 - m) * tau0[i] + m * delta_tau[i] + s * eps[i]
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Regression target `(1 − m)(τ0 − Δτ) + √δ·ε`, equal to `x_β − Δτ`.
    pub fn training_target(
        &self,
        tau0: &[f64],
        delta_tau: &[f64],
        beta: usize,
        eps: &[f64],
        mask: &[bool],
    ) -> Result<Vec<f64>> {
        self.check_step(beta)?;
        check_lengths(&[tau0.len(), delta_tau.len(), eps.len(), mask.len()])?;
        let (m, s) = (self.m[beta], self.delta[beta].sqrt());
        Ok(mask
            .iter()
            .enumerate()
            .map(|(i, &ok)| {
                if ok {
                    (1.0 - m) * (tau0[i] - delta_tau[i]) + s * eps[i]
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Reverse-transition coefficients for a (possibly non-adjacent) pair
    /// `beta < next` of grid steps.
    pub fn transition_coeffs(&self, beta: usize, next: usize) -> Result<TransitionCoeffs> {
        self.check_step(next)?;
        if beta >= next {
            return Err(Error::range("transition", format!("{beta} -> {next}"), "beta < next"));
        }
        let (mb, mn) = (self.m[beta], self.m[next]);
        let (db, dn) = (self.delta[beta], self.delta[next]);
        if beta == 0 {
            // δ_0 = 0: the δ→0 limit is plain bridge-marginal sampling around
            // the current change estimate.
            return Ok(TransitionCoeffs {
                zeta1: 1.0,
                zeta2: 0.0,
                zeta3: mn,
                noise_var: dn,
                cond_var: 0.0,
            });
        }
        let a = mb / mn;
        let cond_var = db - dn * a * a;
        if next == self.horizon {
            return Ok(TransitionCoeffs {
                zeta1: 1.0,
                zeta2: 0.0,
                zeta3: 1.0,
                noise_var: 0.0,
                cond_var,
            });
        }
        Ok(raw_coeffs(mb, mn, db, dn))
    }
}

/// The unguarded transition formulas; undefined when `δ_β = 0`.
pub fn raw_coeffs(mb: f64, mn: f64, db: f64, dn: f64) -> TransitionCoeffs {
    let a = mb / mn;
    let cond_var = db - dn * a * a;
    TransitionCoeffs {
        zeta1: (dn / db) * a + (cond_var / db) * mn,
        zeta2: 1.0 - mn - (1.0 - mb) * a * (dn / db),
        zeta3: mn * cond_var / db,
        noise_var: cond_var * dn / db,
        cond_var,
    }
}

/// `Δτ̂ = x_β − f(x_β)`.
pub fn delta_estimate(x: &[f64], net_out: &[f64]) -> Result<Vec<f64>> {
    check_lengths(&[x.len(), net_out.len()])?;
    Ok(x.iter().zip(net_out).map(|(a, b)| a - b).collect())
}

fn check_lengths(lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Shape(format!("field lengths differ: {lens:?}")));
    }
    Ok(())
}

/// Strictly increasing bridge steps from 0 to `B` visited during sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingGrid(Vec<usize>);

impl SamplingGrid {
    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    /// Consecutive `(β, β′)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn horizon(&self) -> usize {
        *self.0.last().expect("grid is non-empty")
    }
}

/// `count` evenly spaced steps over `0..=B`, rounded and deduplicated.
pub fn make_grid(horizon: usize, count: usize) -> Result<SamplingGrid> {
    if horizon < 2 {
        return Err(Error::range("bridge horizon", horizon, ">= 2"));
    }
    if count < 2 || count > horizon + 1 {
        return Err(Error::range("grid stage count", count, format!("2..={}", horizon + 1)));
    }
    let span = (count - 1) as f64;
    let mut steps: Vec<usize> = (0..count)
        .map(|i| (i as f64 * horizon as f64 / span).round() as usize)
        .collect();
    steps[0] = 0;
    *steps.last_mut().unwrap() = horizon;
    steps.dedup();
    Ok(SamplingGrid(steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_values() {
        let s = BridgeSchedule::new(1000).unwrap();
        assert_eq!(s.m(500), 0.5);
        assert_eq!(s.delta(500), 0.5);
        let s = BridgeSchedule::new(4).unwrap();
        assert_eq!(s.delta_all(), &[0.0, 0.375, 0.5, 0.375, 0.0]);
        assert!(BridgeSchedule::new(1).is_err());
        for b in [2, 3, 7, 100, 1001] {
            let s = BridgeSchedule::new(b).unwrap();
            assert_eq!((s.delta(0), s.delta(b)), (0.0, 0.0));
            assert_eq!((s.m(0), s.m(b)), (0.0, 1.0));
            for i in 0..=b {
                assert_eq!(s.delta(i), s.delta(b - i));
                assert!(s.delta(i) <= 0.5);
                assert!((s.delta(i) - 2.0 * (s.m(i) - s.m(i) * s.m(i))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_sample_endpoints_and_midpoint() {
        let s = BridgeSchedule::new(10).unwrap();
        let tau0 = [3.0, 2.0];
        let dt = [-0.2, 0.1];
        let eps = [0.7, -1.3];
        let mask = [true, true];
        assert_eq!(s.forward_sample(&tau0, &dt, 0, &eps, &mask).unwrap(), tau0);
        assert_eq!(s.forward_sample(&tau0, &dt, 10, &eps, &mask).unwrap(), dt);
        let x = s.forward_sample(&[3.0], &[-0.2], 5, &[0.0], &[true]).unwrap();
        assert!((x[0] - 1.4).abs() < 1e-15);
        let masked = s.forward_sample(&tau0, &dt, 5, &eps, &[true, false]).unwrap();
        assert_eq!(masked[1], 0.0);
        assert!(s.forward_sample(&tau0, &dt, 11, &eps, &mask).is_err());
        assert!(s.forward_sample(&tau0, &dt[..1], 3, &eps, &mask).is_err());
    }

    #[test]
    fn target_identity() {
        let s = BridgeSchedule::new(40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 64;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        let (tau0, dt, eps) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let mask = vec![true; n];
        for beta in 0..=40 {
            let x = s.forward_sample(&tau0, &dt, beta, &eps, &mask).unwrap();
            let t = s.training_target(&tau0, &dt, beta, &eps, &mask).unwrap();
            for i in 0..n {
                assert!((t[i] - (x[i] - dt[i])).abs() < 1e-14);
            }
        }
        let t = s.training_target(&[1.0], &[0.5], 40, &[2.0], &[true]).unwrap();
        assert_eq!(t, vec![0.0]);
        let t = s.training_target(&[1.0], &[0.5], 20, &[0.0], &[true]).unwrap();
        assert_eq!(t, vec![0.25]);
    }

    #[test]
    fn delta_estimate_identities() {
        assert_eq!(delta_estimate(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(delta_estimate(&[1.0, 2.0], &[1.5, 2.5]).unwrap(), vec![-0.5, -0.5]);
        assert!(delta_estimate(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hand_evaluated_coefficients() {
        let s = BridgeSchedule::new(4).unwrap();
        let c = s.transition_coeffs(2, 3).unwrap();
        assert!((c.zeta1 - 1.0).abs() < 1e-15);
        assert!(c.zeta2.abs() < 1e-15);
        assert!((c.zeta3 - 0.5).abs() < 1e-15);
        assert!((c.noise_var - 0.25).abs() < 1e-15);
        assert!((c.cond_var - 1.0 / 3.0).abs() < 1e-15);

        for next in 1..=4 {
            let c = s.transition_coeffs(0, next).unwrap();
            assert_eq!(
                (c.zeta1, c.zeta2, c.zeta3, c.noise_var),
                (1.0, 0.0, s.m(next), s.delta(next))
            );
        }
        for beta in 1..4 {
            let c = s.transition_coeffs(beta, 4).unwrap();
            assert_eq!((c.zeta1, c.zeta2, c.zeta3, c.noise_var), (1.0, 0.0, 1.0, 0.0));
        }
        assert!(s.transition_coeffs(3, 3).is_err());
        assert!(s.transition_coeffs(3, 5).is_err());
    }

    #[test]
    fn coefficients_match_simplified_closed_form() {
        // With δ = 2m(1 − m) the formulas collapse to ζ1 = 1, ζ2 = 0,
        // ζ3 = (m′ − m)/(1 − m) and δ̃ = 2(m′ − m)(1 − m′)/(1 − m).
        let s = BridgeSchedule::new(50).unwrap();
        for beta in 1..49 {
            for next in beta + 1..50 {
                let c = s.transition_coeffs(beta, next).unwrap();
                let (m, mn) = (s.m(beta), s.m(next));
                assert!((c.zeta1 - 1.0).abs() < 1e-12);
                assert!(c.zeta2.abs() < 1e-12);
                assert!((c.zeta3 - (mn - m) / (1.0 - m)).abs() < 1e-12);
                assert!((c.noise_var - 2.0 * (mn - m) * (1.0 - mn) / (1.0 - m)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_step_branch_is_the_limit() {
        let big = 1_000_000;
        let s = BridgeSchedule::new(big).unwrap();
        let next = big / 4;
        let limit = s.transition_coeffs(0, next).unwrap();
        let near = raw_coeffs(s.m(1), s.m(next), s.delta(1), s.delta(next));
        assert!((near.zeta1 - limit.zeta1).abs() < 1e-5);
        assert!((near.zeta2 - limit.zeta2).abs() < 1e-5);
        assert!((near.zeta3 - limit.zeta3).abs() < 1e-5);
        assert!((near.noise_var - limit.noise_var).abs() < 1e-5);
    }

    #[test]
    fn grids() {
        let g = make_grid(1000, 201).unwrap();
        assert_eq!(g.steps(), (0..=1000).step_by(5).collect::<Vec<_>>().as_slice());
        assert_eq!(make_grid(7, 8).unwrap().steps(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(make_grid(7, 2).unwrap().steps(), &[0, 7]);
        assert!(make_grid(7, 9).is_err());
        assert!(make_grid(7, 1).is_err());
    }

    #[test]
    fn oracle_recursion_lands_on_the_endpoint() {
        let s = BridgeSchedule::new(16).unwrap();
        let (tau0, dt) = (2.7, -0.35);
        for count in [2, 3, 5, 9, 17] {
            let grid = make_grid(16, count).unwrap();
            let mut x = tau0;
            for (b, n) in grid.pairs() {
                let c = s.transition_coeffs(b, n).unwrap();
                x = c.zeta1 * x + c.zeta2 * tau0 - c.zeta3 * (x - dt);
            }
            assert!((x - dt).abs() < 1e-12, "count {count}: {x}");
        }
    }
}
