//! Built-in verification suite: schedule identities, Monte-Carlo composition
//! of the reverse transitions, oracle recovery, finite-difference gradient
//! checks and mesh invariants.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::bridge::{make_grid, BridgeSchedule, TransitionCoeffs};
use crate::cohort::{Condition, Diagnosis, Sex};
use crate::cosunet::{cross_attention, spherical_conv, AttentionWeights, CoSUNet, CoSUNetConfig, LevelTopology};
use crate::diffcore::{grad_check, grad_check_params, Graph, ParamSet, SparseRows, Tensor, Var};
use crate::error::Result;
use crate::icosphere::{build_icosphere, build_stack, edge_count, face_count, vertex_count};
use crate::rng::{stream, Rng};
use crate::sampler::{sample_delta, OracleNet};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or other measured quantity).
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail,
        }
    }

    fn failed(name: &str, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: false,
            value: f64::INFINITY,
            tolerance,
            detail,
        }
    }
}

fn or_failed(name: &str, tolerance: f64, r: Result<Check>) -> Check {
    r.unwrap_or_else(|e| Check::failed(name, tolerance, e.to_string()))
}

/// `δ_0 = δ_B = 0` and `max δ = 1/2` at `m = 1/2` for each horizon.
pub fn schedule_exactness(horizons: &[usize]) -> Check {
    let name = "schedule exactness";
    or_failed(
        name,
        1e-15,
        (|| {
            let mut worst = 0.0f64;
            for &b in horizons {
                let s = BridgeSchedule::new(b)?;
                let d = s.delta_all();
                let (arg, max) = d
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                worst = worst.max(d[0].abs()).max(d[b].abs()).max((max - 0.5).abs());
                if b % 2 == 0 {
                    worst = worst.max((s.m(arg) - 0.5).abs());
                }
            }
            Ok(Check::new(name, worst, 1e-15, format!("horizons {horizons:?}")))
        })(),
    )
}

/// Draws `x_β` from the bridge marginal, applies one reverse transition to
/// `next` with the oracle output, and compares the empirical mean and
/// variance with the marginal at `next`. Returns `(|mean error|, relative
/// variance error)`; the variance error is absolute when `δ_next = 0`.
pub fn composition_errors(
    sched: &BridgeSchedule,
    beta: usize,
    next: usize,
    tau0: f64,
    delta: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let c = sched.transition_coeffs(beta, next)?;
    Ok(composition_errors_with(sched, c, beta, next, tau0, delta, samples, rng))
}

#[allow(clippy::too_many_arguments)]
fn composition_errors_with(
    sched: &BridgeSchedule,
    c: TransitionCoeffs,
    beta: usize,
    next: usize,
    tau0: f64,
    delta: f64,
    samples: usize,
    rng: &mut Rng,
) -> (f64, f64) {
    let (m, s) = (sched.m(beta), sched.delta(beta).sqrt());
    let sd = c.noise_var.max(0.0).sqrt();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let e: f64 = StandardNormal.sample(rng);
        let x = (1.0 - m) * tau0 + m * delta + s * e;
        let f = x - delta;
        let eta: f64 = StandardNormal.sample(rng);
        let y = c.zeta1 * x + c.zeta2 * tau0 - c.zeta3 * f + sd * eta;
        sum += y;
        sum_sq += y * y;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    let want_mean = sched.marginal_mean(next, tau0, delta);
    let want_var = sched.delta(next);
    let var_err = if want_var > 0.0 {
        (var - want_var).abs() / want_var
    } else {
        var
    };
    ((mean - want_mean).abs(), var_err)
}

/// Samples per pair in [`run_all`]. The suite reports the worst of 26
/// pairs, so the count keeps the 2% variance tolerance about six standard
/// errors away from sampling noise.
pub const COMPOSITION_SAMPLES: usize = 200_000;

/// Composition test over all adjacent pairs and `random_pairs` random
/// non-adjacent pairs of a `horizon`-step schedule.
pub fn composition(horizon: usize, samples: usize, random_pairs: usize, seed: u64) -> [Check; 2] {
    let run = || -> Result<(f64, f64, usize)> {
        let sched = BridgeSchedule::new(horizon)?;
        let mut rng = stream(seed, "selfcheck/composition");
        let mut pairs: Vec<(usize, usize)> = (0..horizon).map(|b| (b, b + 1)).collect();
        while pairs.len() < horizon + random_pairs {
            let mut ab = sample(&mut rng, horizon + 1, 2).into_vec();
            ab.sort_unstable();
            if ab[1] - ab[0] >= 2 && !pairs.contains(&(ab[0], ab[1])) {
                pairs.push((ab[0], ab[1]));
            }
        }
        let (tau0, delta) = (2.5, -0.3);
        let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
        for &(b, n) in &pairs {
            let (me, ve) = composition_errors(&sched, b, n, tau0, delta, samples, &mut rng)?;
            mean_err = mean_err.max(me);
            var_err = var_err.max(ve);
        }
        Ok((mean_err, var_err, pairs.len()))
    };
    match run() {
        Ok((me, ve, n)) => [
            Check::new(
                "composition mean",
                me,
                0.01,
                format!("B={horizon}, {n} pairs, {samples} samples"),
            ),
            Check::new(
                "composition variance",
                ve,
                0.02,
                format!("B={horizon}, {n} pairs, {samples} samples"),
            ),
        ],
        Err(e) => [
            Check::failed("composition mean", 0.01, e.to_string()),
            Check::failed("composition variance", 0.02, e.to_string()),
        ],
    }
}

/// Oracle sampling on grids of the given stage counts, with and without
/// injected noise, on a level-2 field.
pub fn oracle_recovery(horizon: usize, stages: &[usize], seed: u64) -> Check {
    let name = "oracle recovery";
    or_failed(
        name,
        1e-9,
        (|| {
            let sched = BridgeSchedule::new(horizon)?;
            let nv = vertex_count(2);
            let mut rng = stream(seed, "selfcheck/oracle");
            let mask: Vec<bool> = (0..nv).map(|i| i % 11 != 3).collect();
            let tau0: Vec<f64> = (0..nv).map(|_| rng.random_range(1.5..4.0)).collect();
            let delta: Vec<f64> = (0..nv)
                .map(|i| if mask[i] { rng.random_range(-0.4..0.1) } else { 0.0 })
                .collect();
            let oracle = OracleNet::new(delta.clone());
            let cond = Condition {
                age: 70.0,
                sex: Sex::F,
                dx0: Diagnosis::CN,
                dxt: None,
            };
            let mut worst = 0.0f64;
            for &k in stages {
                let grid = make_grid(horizon, k)?;
                for noisy in [false, true] {
                    let mut r = stream(seed, &format!("selfcheck/oracle/{k}"));
                    let got = sample_delta(
                        &oracle,
                        &sched,
                        &grid,
                        &tau0,
                        &mask,
                        12.0,
                        &cond,
                        noisy.then_some(&mut r),
                    )?;
                    for (g, d) in got.iter().zip(&delta) {
                        worst = worst.max((g - d).abs());
                    }
                }
            }
            Ok(Check::new(
                name,
                worst,
                1e-9,
                format!("B={horizon}, stages {stages:?}, noise on and off"),
            ))
        })(),
    )
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Contracts `y` with fixed random weights so every output entry carries a
/// distinct gradient.
fn readout(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = stream(seed, "selfcheck/readout");
    let w = g.constant(random(&mut rng, &shape));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Primitive = fn(&mut Graph<'_>, Var) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Vec<usize>, Primitive)> {
    fn fixed(g: &mut Graph<'_>, shape: &[usize], tag: &str) -> Var {
        let mut rng = stream(0, tag);
        g.constant(random(&mut rng, shape))
    }
    vec![
        ("matmul", vec![3, 4], |g, x| {
            let w = fixed(g, &[4, 2], "w");
            g.matmul(x, w)
        }),
        ("matmul rhs", vec![4, 2], |g, x| {
            let a = fixed(g, &[3, 4], "a");
            g.matmul(a, x)
        }),
        ("gather_rows", vec![3, 2], |g, x| {
            g.gather_rows(x, Arc::new(vec![2, 0, 1, 2, 2]))
        }),
        ("sparse_rows", vec![4, 2], |g, x| {
            let map = SparseRows {
                rows: vec![vec![(0, 0.5), (3, 0.5)], vec![], vec![(1, 2.0), (2, -1.0), (1, 0.25)]],
                in_rows: 4,
            };
            g.sparse_rows(x, Arc::new(map))
        }),
        ("add", vec![3, 2], |g, x| {
            let row = fixed(g, &[2], "row");
            let a = g.add(x, row)?;
            g.add(a, x)
        }),
        ("sub", vec![3, 2], |g, x| {
            let col = fixed(g, &[3, 1], "col");
            g.sub(x, col)
        }),
        ("mul", vec![3, 2], |g, x| {
            let s = fixed(g, &[1], "s");
            let a = g.mul(x, x)?;
            g.mul(a, s)
        }),
        ("scale", vec![2, 3], |g, x| Ok(g.scale(x, -1.75))),
        ("silu", vec![2, 3], |g, x| Ok(g.silu(x))),
        ("group_norm", vec![5, 4], |g, x| {
            let gamma = fixed(g, &[4], "gamma");
            let beta = fixed(g, &[4], "beta");
            g.group_norm(x, gamma, beta, 2, None)
        }),
        ("group_norm masked", vec![5, 4], |g, x| {
            let gamma = fixed(g, &[4], "gamma");
            let beta = fixed(g, &[4], "beta");
            g.group_norm(x, gamma, beta, 2, Some(Arc::new(vec![1.0, 0.0, 1.0, 1.0, 0.0])))
        }),
        ("softmax", vec![3, 4], |g, x| Ok(g.softmax(x))),
        ("sum", vec![2, 3], |g, x| {
            let a = g.mul(x, x)?;
            Ok(g.sum(a))
        }),
        ("mean", vec![2, 3], |g, x| {
            let a = g.silu(x);
            Ok(g.mean(a))
        }),
        ("concat", vec![3, 2], |g, x| {
            let other = fixed(g, &[3, 1], "other");
            g.concat(&[x, other, x])
        }),
        ("slice_cols", vec![3, 4], |g, x| g.slice_cols(x, 1, 3)),
        ("transpose", vec![3, 2], |g, x| g.transpose(x)),
        ("reshape", vec![3, 4], |g, x| g.reshape(x, vec![2, 6])),
    ]
}

/// Finite-difference checks of every graph primitive, the two mesh layers,
/// and the full network loss at level 1 with 8 base channels.
pub fn gradients(seed: u64) -> Vec<Check> {
    let tol = 1e-4;
    let mut out = Vec::new();
    for (i, (name, shape, op)) in primitives().into_iter().enumerate() {
        let mut rng = stream(seed, &format!("selfcheck/grad/{name}"));
        let x = random(&mut rng, &shape);
        let r = grad_check(
            |g, v| {
                let y = op(g, v)?;
                readout(g, y, i as u64)
            },
            &x,
            1e-6,
        );
        out.push(match r {
            Ok(e) => Check::new(&format!("grad {name}"), e, tol, format!("input {shape:?}")),
            Err(e) => Check::failed(&format!("grad {name}"), tol, e.to_string()),
        });
    }
    out.push(or_failed("grad mesh layers", tol, layer_gradients(seed)));
    out.push(or_failed("grad full network", tol, network_gradient(seed)));
    out
}

fn get<'a>(g: &mut Graph<'a>, p: &'a ParamSet, name: &str) -> Var {
    g.param(p, p.id(name).expect("parameter inserted by the caller"))
}

fn layer_gradients(seed: u64) -> Result<Check> {
    let mesh = build_icosphere(1)?;
    let mask: Vec<bool> = (0..mesh.num_vertices()).map(|i| i % 9 != 4).collect();
    let topo = LevelTopology::new(&mesh, &mask)?;
    let mut rng = stream(seed, "selfcheck/grad/layers");
    let mut params = ParamSet::new();
    for (name, shape) in [
        ("k", [14, 4]),
        ("b", [1, 4]),
        ("wq", [4, 4]),
        ("wk", [6, 4]),
        ("wv", [6, 4]),
        ("wo", [4, 4]),
    ] {
        params.insert(name, random(&mut rng, &shape));
    }
    let x = random(&mut rng, &[mesh.num_vertices(), 2]);
    let tokens = random(&mut rng, &[5, 6]);
    let err = grad_check_params(
        |g, p| {
            let xv = g.constant(x.clone());
            let t = g.constant(tokens.clone());
            let k = get(g, p, "k");
            let b = get(g, p, "b");
            let y = spherical_conv(g, xv, &topo, k, Some(b))?;
            let w = AttentionWeights {
                wq: get(g, p, "wq"),
                wk: get(g, p, "wk"),
                wv: get(g, p, "wv"),
                wo: get(g, p, "wo"),
                bo: None,
            };
            let a = cross_attention(g, y, t, &w, 2)?;
            readout(g, a, 99)
        },
        &params,
        1e-6,
        1,
    )?;
    Ok(Check::new(
        "grad mesh layers",
        err,
        1e-4,
        "convolution and cross-attention".into(),
    ))
}

fn network_gradient(seed: u64) -> Result<Check> {
    let config = CoSUNetConfig {
        base_channels: 8,
        level_top: 1,
        depth: 1,
        channel_mults: vec![1, 2],
        embed_dim: 8,
        heads: 2,
        positional_embedding: true,
    };
    let nv = vertex_count(1);
    let mask: Vec<bool> = (0..nv).map(|i| i != 5).collect();
    let net = CoSUNet::new(config, &mask, 10)?;
    let mut params = net.init_params(seed);
    let mut rng = stream(seed, "selfcheck/grad/network");
    // Zero-initialised output weights would hide most of the network.
    for name in ["out.conv.w", "out.gain"] {
        if let Some(id) = params.id(name) {
            params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-0.1..0.1));
        }
    }
    let x = Tensor::from_rows(
        nv,
        1,
        (0..nv)
            .map(|i| if mask[i] { rng.random_range(1.5..4.0) } else { 0.0 })
            .collect(),
    )?;
    let target = Tensor::from_rows(nv, 1, (0..nv).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let cond = Condition {
        age: 72.0,
        sex: Sex::M,
        dx0: Diagnosis::MCI,
        dxt: None,
    };
    let stride = 7;
    let err = grad_check_params(
        |g, p| {
            let xv = g.constant(x.clone());
            let y = net.forward(g, p, xv, 4, 24.0, &cond)?;
            let t = g.constant(target.clone());
            let r = g.sub(y, t)?;
            let sq = g.mul(r, r)?;
            Ok(g.mean(sq))
        },
        &params,
        1e-6,
        stride,
    )?;
    Ok(Check::new(
        "grad full network",
        err,
        1e-4,
        format!(
            "level 1, 8 channels, every {stride}th coordinate of {} parameters",
            params.num_scalars()
        ),
    ))
}

/// Counts, Euler characteristic, pentagon count, prefix property and unit
/// norms for levels `0..=max_level`.
pub fn mesh_invariants(max_level: u32) -> Check {
    let name = "mesh invariants";
    or_failed(
        name,
        1e-12,
        (|| {
            let stack = build_stack(max_level)?;
            let mut worst_norm = 0.0f64;
            let mut problems = Vec::new();
            for (l, mesh) in stack.iter().enumerate() {
                let l = l as u32;
                let (v, f, e) = (mesh.num_vertices(), mesh.faces().len(), mesh.edges().len());
                if v != vertex_count(l) || f != face_count(l) || e != edge_count(l) {
                    problems.push(format!("level {l}: counts {v}/{e}/{f}"));
                }
                if v as i64 - e as i64 + f as i64 != 2 {
                    problems.push(format!("level {l}: Euler characteristic"));
                }
                let pentagons = (0..v).filter(|&i| mesh.neighbors(i).len() == 5).count();
                let hexagons = (0..v).filter(|&i| mesh.neighbors(i).len() == 6).count();
                if pentagons != 12 || pentagons + hexagons != v {
                    problems.push(format!("level {l}: {pentagons} pentagons"));
                }
                for p in mesh.vertices() {
                    worst_norm = worst_norm.max(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs());
                }
                if l > 0 {
                    let coarse = &stack[l as usize - 1];
                    if mesh.vertices()[..coarse.num_vertices()] != *coarse.vertices() {
                        problems.push(format!("level {l}: prefix property"));
                    }
                }
            }
            let value = if problems.is_empty() { worst_norm } else { f64::INFINITY };
            let detail = if problems.is_empty() {
                format!("levels 0..={max_level}")
            } else {
                problems.join("; ")
            };
            Ok(Check::new(name, value, 1e-12, detail))
        })(),
    )
}

/// The full suite as run by `sbdm selfcheck`.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = vec![schedule_exactness(&[4, 100, 1000])];
    out.extend(composition(16, COMPOSITION_SAMPLES, 10, seed));
    out.push(oracle_recovery(100, &[2, 5, 101], seed));
    out.extend(gradients(seed));
    out.push(mesh_invariants(5));
    out
}
