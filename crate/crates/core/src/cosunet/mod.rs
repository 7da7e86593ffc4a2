//! Conditional spherical U-Net denoiser `f(x_β, β, t, c)`.
//!
//! Encoder stages run from `level_top` down to `level_top − depth`, each with
//! two residual blocks and a cross-attention layer before mean pooling. The
//! bottleneck holds one residual block and cross-attention; the decoder
//! mirrors the encoder with skip concatenation. `(t, c)` enter only through
//! cross-attention on five condition tokens, `β` only through an additive
//! step embedding.
//!
//! Parameter names (`{s}` is the stage index, `{r}` ∈ {0, 1}):
//!
//! | name                                   | shape            |
//! |----------------------------------------|------------------|
//! | `in.conv.w`, `in.conv.b`               | `[7, C0]`, `[C0]`|
//! | `in.pos`                               | `[V_top, C0]`    |
//! | `step.fc{0,1}.w`, `step.fc{0,1}.b`     | `[d, d]`, `[d]`  |
//! | `cond.time.w/b`, `cond.age.w/b`        | `[1, d]`, `[d]`  |
//! | `cond.sex`, `cond.dx0`, `cond.dxt`     | `[2|3|4, d]`     |
//! | `enc{s}.res{r}.*`, `enc{s}.attn.*`     | see below        |
//! | `mid.res.*`, `mid.attn.*`              |                  |
//! | `dec{s}.up.w/b`, `dec{s}.res{r}.*`, `dec{s}.attn.*` |     |
//! | `out.norm.g/b`, `out.conv.w/b`, `out.gain` | `[C0]`, `[7·C0, 1]`, `[1]` |
//!
//! A residual block `res.*` holds `conv1.w/b`, `norm1.g/b`, `step.w/b`,
//! `conv2.w/b`, `norm2.g/b` and, when its widths differ, `skip.w/b`.
//! Attention `attn.*` holds `q.w [Cs, d]`, `k.w [d, d]`, `v.w [d, d]`,
//! `o.w [d, Cs]`, `o.b [Cs]`.

mod layers;

pub use layers::{
    cross_attention, pooling_map, spherical_conv, step_encoding, unpooling_map, AttentionWeights, LevelTopology,
};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Condition, Diagnosis};
use crate::diffcore::{Graph, ParamSet, SparseRows, Tensor, Var};
use crate::error::{Error, Result};
use crate::icosphere::{build_stack, restriction_map, upsample_map, vertex_count, RING_ARITY};
use layers::param;

/// Number of condition tokens: time, age, sex, baseline dx, target dx.
pub const NUM_TOKENS: usize = 5;
const MAX_GROUPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoSUNetConfig {
    pub base_channels: usize,
    pub level_top: u32,
    pub depth: usize,
    /// Width multipliers for the `depth` encoder stages and the bottleneck.
    pub channel_mults: Vec<usize>,
    pub embed_dim: usize,
    pub heads: usize,
    /// Learned per-vertex offset added after the input convolution.
    pub positional_embedding: bool,
}

impl Default for CoSUNetConfig {
    fn default() -> Self {
        CoSUNetConfig {
            base_channels: 16,
            level_top: 2,
            depth: 2,
            channel_mults: vec![1, 2, 2],
            embed_dim: 32,
            heads: 4,
            positional_embedding: true,
        }
    }
}

fn groups_for(width: usize) -> usize {
    if width < MAX_GROUPS {
        width
    } else {
        (1..=MAX_GROUPS).rev().find(|g| width.is_multiple_of(*g)).unwrap_or(1)
    }
}

impl CoSUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::range("base_channels", 0, ">= 1"));
        }
        if self.depth as u32 > self.level_top {
            return Err(Error::range(
                "depth",
                self.depth,
                format!("<= level_top ({}), pooling stops at level 0", self.level_top),
            ));
        }
        if self.channel_mults.len() != self.depth + 1 || self.channel_mults.contains(&0) {
            return Err(Error::Config(format!(
                "channel_mults needs {} positive entries (stages plus bottleneck), got {:?}",
                self.depth + 1,
                self.channel_mults
            )));
        }
        if self.embed_dim < 4 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::range("embed_dim", self.embed_dim, "even and >= 4"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Channel width of encoder stage `s` (`s = depth` is the bottleneck).
    pub fn width(&self, s: usize) -> usize {
        self.base_channels * self.channel_mults[s]
    }

    pub fn num_vertices(&self) -> usize {
        vertex_count(self.level_top)
    }
}

/// The network topology for one mask; parameters live in a separate
/// [`ParamSet`] so that EMA and optimizer copies share one definition.
#[derive(Debug, Clone)]
pub struct CoSUNet {
    config: CoSUNetConfig,
    horizon: usize,
    /// Level topologies from `level_top` downwards.
    levels: Vec<LevelTopology>,
    pools: Vec<Arc<SparseRows>>,
    unpools: Vec<Arc<SparseRows>>,
}

struct Block {
    prefix: String,
    cin: usize,
    cout: usize,
}

impl CoSUNet {
    /// Builds the mesh pyramid for `mask` (given at `level_top`). Coarse
    /// vertices inherit the validity of their fine counterpart.
    pub fn new(config: CoSUNetConfig, mask: &[bool], horizon: usize) -> Result<Self> {
        config.validate()?;
        let top = config.level_top;
        if mask.len() != vertex_count(top) {
            return Err(Error::Shape(format!(
                "mask has {} entries, level {top} has {}",
                mask.len(),
                vertex_count(top)
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Config("mask leaves no valid vertices".into()));
        }
        let stack = build_stack(top)?;
        let mut levels = Vec::new();
        for s in 0..=config.depth {
            let mesh = &stack[(top as usize) - s];
            levels.push(LevelTopology::new(mesh, &mask[..mesh.num_vertices()])?);
        }
        let mut pools = Vec::new();
        let mut unpools = Vec::new();
        for s in 0..config.depth {
            let (fine, coarse) = (&stack[top as usize - s], &stack[top as usize - s - 1]);
            let (fm, cm) = (&levels[s].mask, &levels[s + 1].mask);
            pools.push(Arc::new(pooling_map(&restriction_map(fine, coarse)?, fm, cm)));
            unpools.push(Arc::new(unpooling_map(&upsample_map(coarse, fine)?, cm, fm)));
        }
        Ok(CoSUNet {
            config,
            horizon,
            levels,
            pools,
            unpools,
        })
    }

    pub fn config(&self) -> &CoSUNetConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn mask(&self) -> &[f64] {
        &self.levels[0].mask
    }

    pub fn num_vertices(&self) -> usize {
        self.levels[0].num_vertices
    }

    fn blocks(&self) -> (Vec<Block>, Vec<(String, usize)>) {
        let c = &self.config;
        let mut blocks = Vec::new();
        let mut attns = Vec::new();
        let mut cin = c.width(0);
        for s in 0..c.depth {
            let w = c.width(s);
            for r in 0..2 {
                blocks.push(Block {
                    prefix: format!("enc{s}.res{r}"),
                    cin,
                    cout: w,
                });
                cin = w;
            }
            attns.push((format!("enc{s}.attn"), w));
        }
        let w = c.width(c.depth);
        blocks.push(Block {
            prefix: "mid.res".into(),
            cin,
            cout: w,
        });
        attns.push(("mid.attn".into(), w));
        for s in (0..c.depth).rev() {
            let w = c.width(s);
            blocks.push(Block {
                prefix: format!("dec{s}.res0"),
                cin: 2 * w,
                cout: w,
            });
            blocks.push(Block {
                prefix: format!("dec{s}.res1"),
                cin: w,
                cout: w,
            });
            attns.push((format!("dec{s}.attn"), w));
        }
        (blocks, attns)
    }

    /// Fresh parameters: Glorot-uniform kernels and projections, zero biases,
    /// N(0, 0.02) tables and positions, unit norm scales, and an all-zero
    /// output convolution and skip gain.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let c = &self.config;
        let d = c.embed_dim;
        let mut rng = crate::rng::stream(seed, "init");
        let mut p = ParamSet::new();
        let glorot = |rng: &mut crate::rng::Rng, fan_in: usize, fan_out: usize| {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_rows(
                fan_in,
                fan_out,
                (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect(),
            )
            .expect("glorot shape")
        };
        let table = |rng: &mut crate::rng::Rng, rows: usize, cols: usize| {
            let n = Normal::new(0.0, 0.02).expect("valid normal");
            Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("table shape")
        };
        let c0 = c.width(0);
        p.insert("in.conv.w", glorot(&mut rng, RING_ARITY, c0));
        p.insert("in.conv.b", Tensor::zeros(&[c0]));
        if c.positional_embedding {
            p.insert("in.pos", table(&mut rng, c.num_vertices(), c0));
        }
        for k in 0..2 {
            p.insert(format!("step.fc{k}.w"), glorot(&mut rng, d, d));
            p.insert(format!("step.fc{k}.b"), Tensor::zeros(&[d]));
        }
        for name in ["time", "age"] {
            p.insert(format!("cond.{name}.w"), glorot(&mut rng, 1, d));
            p.insert(format!("cond.{name}.b"), Tensor::zeros(&[d]));
        }
        p.insert("cond.sex", table(&mut rng, 2, d));
        p.insert("cond.dx0", table(&mut rng, 3, d));
        p.insert("cond.dxt", table(&mut rng, 4, d));

        let (blocks, attns) = self.blocks();
        let mut attn_iter = attns.into_iter();
        let mut emit_attn = |p: &mut ParamSet, rng: &mut crate::rng::Rng| {
            let (prefix, w) = attn_iter.next().expect("attention per stage");
            p.insert(format!("{prefix}.q.w"), glorot(rng, w, d));
            p.insert(format!("{prefix}.k.w"), glorot(rng, d, d));
            p.insert(format!("{prefix}.v.w"), glorot(rng, d, d));
            p.insert(format!("{prefix}.o.w"), glorot(rng, d, w));
            p.insert(format!("{prefix}.o.b"), Tensor::zeros(&[w]));
        };
        let emit_block = |p: &mut ParamSet, rng: &mut crate::rng::Rng, b: &Block| {
            let Block { prefix, cin, cout } = b;
            let (cin, cout) = (*cin, *cout);
            p.insert(format!("{prefix}.conv1.w"), glorot(rng, RING_ARITY * cin, cout));
            p.insert(format!("{prefix}.conv1.b"), Tensor::zeros(&[cout]));
            p.insert(format!("{prefix}.norm1.g"), Tensor::full(&[cout], 1.0));
            p.insert(format!("{prefix}.norm1.b"), Tensor::zeros(&[cout]));
            p.insert(format!("{prefix}.step.w"), glorot(rng, d, cout));
            p.insert(format!("{prefix}.step.b"), Tensor::zeros(&[cout]));
            p.insert(format!("{prefix}.conv2.w"), glorot(rng, RING_ARITY * cout, cout));
            p.insert(format!("{prefix}.conv2.b"), Tensor::zeros(&[cout]));
            p.insert(format!("{prefix}.norm2.g"), Tensor::full(&[cout], 1.0));
            p.insert(format!("{prefix}.norm2.b"), Tensor::zeros(&[cout]));
            if cin != cout {
                p.insert(format!("{prefix}.skip.w"), glorot(rng, cin, cout));
                p.insert(format!("{prefix}.skip.b"), Tensor::zeros(&[cout]));
            }
        };
        let mut bi = blocks.iter();
        for _ in 0..c.depth {
            emit_block(&mut p, &mut rng, bi.next().unwrap());
            emit_block(&mut p, &mut rng, bi.next().unwrap());
            emit_attn(&mut p, &mut rng);
        }
        emit_block(&mut p, &mut rng, bi.next().unwrap());
        emit_attn(&mut p, &mut rng);
        for s in (0..c.depth).rev() {
            let below = if s + 1 == c.depth {
                c.width(c.depth)
            } else {
                c.width(s + 1)
            };
            let w = c.width(s);
            p.insert(format!("dec{s}.up.w"), glorot(&mut rng, RING_ARITY * below, w));
            p.insert(format!("dec{s}.up.b"), Tensor::zeros(&[w]));
            emit_block(&mut p, &mut rng, bi.next().unwrap());
            emit_block(&mut p, &mut rng, bi.next().unwrap());
            emit_attn(&mut p, &mut rng);
        }
        p.insert("out.norm.g", Tensor::full(&[c0], 1.0));
        p.insert("out.norm.b", Tensor::zeros(&[c0]));
        p.insert("out.conv.w", Tensor::zeros(&[RING_ARITY * c0, 1]));
        p.insert("out.conv.b", Tensor::zeros(&[1]));
        p.insert("out.gain", Tensor::zeros(&[1]));
        p
    }

    /// Condition tokens `[5, d]`: time, age, sex, baseline dx, target dx.
    pub fn embed_condition<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        t_months: f64,
        cond: &Condition,
    ) -> Result<Var> {
        if !(t_months.is_finite() && t_months >= 0.0) {
            return Err(Error::range("follow-up time", t_months, ">= 0 months"));
        }
        if !cond.age.is_finite() {
            return Err(Error::NonFinite("age".into()));
        }
        let d = self.config.embed_dim;
        let mut tokens = Vec::with_capacity(NUM_TOKENS);
        for (name, value) in [("time", t_months / 120.0), ("age", (cond.age - 70.0) / 15.0)] {
            let w = param(g, params, &format!("cond.{name}.w"))?;
            let b = param(g, params, &format!("cond.{name}.b"))?;
            let sw = g.scale(w, value);
            tokens.push(g.add(sw, b)?);
        }
        let lookups = [
            ("cond.sex", cond.sex.index()),
            ("cond.dx0", cond.dx0.index()),
            ("cond.dxt", cond.dxt.map_or(3, Diagnosis::index)),
        ];
        for (name, idx) in lookups {
            let table = param(g, params, name)?;
            tokens.push(g.gather_rows(table, Arc::new(vec![idx]))?);
        }
        let row = g.concat(&tokens)?;
        g.reshape(row, vec![NUM_TOKENS, d])
    }

    /// Step embedding `[1, d]`: sinusoid of `β` through Linear → SiLU → Linear.
    pub fn embed_step<'a>(&self, g: &mut Graph<'a>, params: &'a ParamSet, beta: usize) -> Result<Var> {
        if beta > self.horizon {
            return Err(Error::range("bridge step", beta, format!("0..={}", self.horizon)));
        }
        let d = self.config.embed_dim;
        let enc = g.constant(Tensor::from_rows(1, d, step_encoding(beta, d))?);
        let w0 = param(g, params, "step.fc0.w")?;
        let b0 = param(g, params, "step.fc0.b")?;
        let h = g.matmul(enc, w0)?;
        let h = g.add(h, b0)?;
        let h = g.silu(h);
        let w1 = param(g, params, "step.fc1.w")?;
        let b1 = param(g, params, "step.fc1.b")?;
        let h = g.matmul(h, w1)?;
        g.add(h, b1)
    }

    fn norm_act<'a>(&self, g: &mut Graph<'a>, params: &'a ParamSet, x: Var, prefix: &str, s: usize) -> Result<Var> {
        let gamma = param(g, params, &format!("{prefix}.g"))?;
        let beta = param(g, params, &format!("{prefix}.b"))?;
        let groups = groups_for(g.shape(x)[1]);
        let h = g.group_norm(x, gamma, beta, groups, Some(self.levels[s].mask.clone()))?;
        Ok(g.silu(h))
    }

    fn conv<'a>(&self, g: &mut Graph<'a>, params: &'a ParamSet, x: Var, prefix: &str, s: usize) -> Result<Var> {
        let w = param(g, params, &format!("{prefix}.w"))?;
        let b = param(g, params, &format!("{prefix}.b"))?;
        spherical_conv(g, x, &self.levels[s], w, Some(b))
    }

    fn res_block<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        x: Var,
        emb: Var,
        prefix: &str,
        s: usize,
    ) -> Result<Var> {
        let h = self.conv(g, params, x, &format!("{prefix}.conv1"), s)?;
        let h = self.norm_act(g, params, h, &format!("{prefix}.norm1"), s)?;
        let sw = param(g, params, &format!("{prefix}.step.w"))?;
        let sb = param(g, params, &format!("{prefix}.step.b"))?;
        let e = g.matmul(emb, sw)?;
        let e = g.add(e, sb)?;
        let h = g.add(h, e)?;
        let h = self.conv(g, params, h, &format!("{prefix}.conv2"), s)?;
        let h = self.norm_act(g, params, h, &format!("{prefix}.norm2"), s)?;
        let shortcut = match params.id(&format!("{prefix}.skip.w")) {
            Some(id) => {
                let w = g.param(params, id);
                let b = param(g, params, &format!("{prefix}.skip.b"))?;
                let y = g.matmul(x, w)?;
                g.add(y, b)?
            }
            None => x,
        };
        g.add(h, shortcut)
    }

    fn attention<'a>(&self, g: &mut Graph<'a>, params: &'a ParamSet, x: Var, tokens: Var, prefix: &str) -> Result<Var> {
        let w = AttentionWeights {
            wq: param(g, params, &format!("{prefix}.q.w"))?,
            wk: param(g, params, &format!("{prefix}.k.w"))?,
            wv: param(g, params, &format!("{prefix}.v.w"))?,
            wo: param(g, params, &format!("{prefix}.o.w"))?,
            bo: Some(param(g, params, &format!("{prefix}.o.b"))?),
        };
        cross_attention(g, x, tokens, &w, self.config.heads)
    }

    /// Network output `[V, 1]` for a `[V, 1]` input at step `beta`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        params: &'a ParamSet,
        x: Var,
        beta: usize,
        t_months: f64,
        cond: &Condition,
    ) -> Result<Var> {
        let v = self.num_vertices();
        if g.shape(x) != [v, 1] {
            return Err(Error::Shape(format!(
                "network input must be [{v}, 1] at level {}, got {:?}",
                self.config.level_top,
                g.shape(x)
            )));
        }
        let depth = self.config.depth;
        let tokens = self.embed_condition(g, params, t_months, cond)?;
        let emb = self.embed_step(g, params, beta)?;

        let mut h = self.conv(g, params, x, "in.conv", 0)?;
        if let Some(id) = params.id("in.pos") {
            let pos = g.param(params, id);
            let mask = self.levels[0].mask_var(g);
            let pos = g.mul(pos, mask)?;
            h = g.add(h, pos)?;
        }
        let mut skips = Vec::with_capacity(depth);
        for s in 0..depth {
            h = self.res_block(g, params, h, emb, &format!("enc{s}.res0"), s)?;
            h = self.res_block(g, params, h, emb, &format!("enc{s}.res1"), s)?;
            h = self.attention(g, params, h, tokens, &format!("enc{s}.attn"))?;
            skips.push(h);
            h = g.sparse_rows(h, self.pools[s].clone())?;
        }
        h = self.res_block(g, params, h, emb, "mid.res", depth)?;
        h = self.attention(g, params, h, tokens, "mid.attn")?;
        for s in (0..depth).rev() {
            h = g.sparse_rows(h, self.unpools[s].clone())?;
            h = self.conv(g, params, h, &format!("dec{s}.up"), s)?;
            h = g.concat(&[h, skips[s]])?;
            h = self.res_block(g, params, h, emb, &format!("dec{s}.res0"), s)?;
            h = self.res_block(g, params, h, emb, &format!("dec{s}.res1"), s)?;
            h = self.attention(g, params, h, tokens, &format!("dec{s}.attn"))?;
        }
        let h = self.norm_act(g, params, h, "out.norm", 0)?;
        let y = self.conv(g, params, h, "out.conv", 0)?;
        let gain = param(g, params, "out.gain")?;
        let mask = self.levels[0].mask_var(g);
        let xm = g.mul(x, mask)?;
        let skip = g.mul(xm, gain)?;
        g.add(y, skip)
    }

    /// Evaluates the network on plain values without recording gradients.
    pub fn predict(
        &self,
        params: &ParamSet,
        x: &[f64],
        beta: usize,
        t_months: f64,
        cond: &Condition,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_rows(x.len(), 1, x.to_vec())?);
        let y = self.forward(&mut g, params, xv, beta, t_months, cond)?;
        Ok(g.value(y).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Sex;
    use crate::diffcore::{grad_check_params, ParamId};

    fn cond() -> Condition {
        Condition {
            age: 72.0,
            sex: Sex::F,
            dx0: Diagnosis::MCI,
            dxt: None,
        }
    }

    fn small() -> CoSUNetConfig {
        CoSUNetConfig {
            base_channels: 8,
            level_top: 1,
            depth: 1,
            channel_mults: vec![1, 2],
            embed_dim: 8,
            heads: 2,
            positional_embedding: true,
        }
    }

    fn net(config: CoSUNetConfig) -> CoSUNet {
        let n = vertex_count(config.level_top);
        let mask: Vec<bool> = (0..n).map(|i| i != 5).collect();
        CoSUNet::new(config, &mask, 10).unwrap()
    }

    /// Independent enumeration of the documented tensor set.
    fn closed_form_count(c: &CoSUNetConfig) -> usize {
        let d = c.embed_dim;
        let c0 = c.width(0);
        let v = c.num_vertices();
        let block = |cin: usize, cout: usize| {
            let mut n = 7 * cin * cout + cout + 2 * cout + d * cout + cout + 7 * cout * cout + cout + 2 * cout;
            if cin != cout {
                n += cin * cout + cout;
            }
            n
        };
        let attn = |w: usize| w * d + d * d + d * d + d * w + w;
        let mut n = 7 * c0 + c0 + if c.positional_embedding { v * c0 } else { 0 };
        n += 2 * (d * d + d);
        n += 2 * (d + d) + (2 + 3 + 4) * d;
        let mut cin = c0;
        for s in 0..c.depth {
            n += block(cin, c.width(s)) + block(c.width(s), c.width(s)) + attn(c.width(s));
            cin = c.width(s);
        }
        n += block(cin, c.width(c.depth)) + attn(c.width(c.depth));
        for s in (0..c.depth).rev() {
            let w = c.width(s);
            let below = if s + 1 == c.depth {
                c.width(c.depth)
            } else {
                c.width(s + 1)
            };
            n += 7 * below * w + w;
            n += block(2 * w, w) + block(w, w) + attn(w);
        }
        n + 2 * c0 + 7 * c0 + 1 + 1
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for c in [
            CoSUNetConfig {
                level_top: 2,
                depth: 2,
                base_channels: 16,
                channel_mults: vec![1, 1, 1],
                ..Default::default()
            },
            CoSUNetConfig::default(),
            small(),
        ] {
            let p = net(c.clone()).init_params(0);
            assert_eq!(p.num_scalars(), closed_form_count(&c), "{c:?}");
        }
        // level_top 2, depth 2, C 16, mults (1, 1, 1), d 32: written out by hand.
        let c = CoSUNetConfig {
            channel_mults: vec![1, 1, 1],
            ..Default::default()
        };
        assert_eq!(net(c).init_params(0).num_scalars(), 66_962);
    }

    #[test]
    fn init_is_deterministic_and_output_is_zero() {
        let n = net(small());
        let a = n.init_params(3);
        let b = n.init_params(3);
        assert_eq!(a, b);
        assert_ne!(a, n.init_params(4));
        assert!(a.by_name("out.conv.w").unwrap().data().iter().all(|&w| w == 0.0));
        let x: Vec<f64> = (0..42).map(|i| if i == 5 { 0.0 } else { (i as f64).sin() }).collect();
        let y = n.predict(&a, &x, 4, 24.0, &cond()).unwrap();
        assert_eq!(y.len(), 42);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn condition_tokens() {
        let n = net(small());
        let p = n.init_params(1);
        let tokens = |c: &Condition| {
            let mut g = Graph::new();
            let t = n.embed_condition(&mut g, &p, 12.0, c).unwrap();
            assert_eq!(g.shape(t), &[5, 8]);
            g.value(t).to_vec()
        };
        let a = tokens(&cond());
        let b = tokens(&Condition { sex: Sex::M, ..cond() });
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert_eq!(x == y, i / 8 != 2, "token {}", i / 8);
        }
        let with_dxt = tokens(&Condition {
            dxt: Some(Diagnosis::MCI),
            ..cond()
        });
        assert_ne!(a, with_dxt);
        let mut g = Graph::new();
        assert!(n.embed_condition(&mut g, &p, -1.0, &cond()).is_err());
        assert!(n.embed_step(&mut g, &p, 11).is_err());
    }

    #[test]
    fn zeroed_attention_removes_condition_dependence() {
        let n = net(small());
        let mut p = n.init_params(2);
        // Perturb the output layer so the network is not trivially zero.
        for name in ["out.conv.w", "out.gain"] {
            let id = p.id(name).unwrap();
            p.get_mut(id)
                .data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, w)| *w = 0.1 + 0.01 * i as f64);
        }
        let x: Vec<f64> = (0..42)
            .map(|i| if i == 5 { 0.0 } else { (i as f64 * 0.3).cos() })
            .collect();
        let other = Condition {
            age: 60.0,
            sex: Sex::M,
            dx0: Diagnosis::AD,
            dxt: Some(Diagnosis::AD),
        };
        let a = n.predict(&p, &x, 3, 12.0, &cond()).unwrap();
        let b = n.predict(&p, &x, 3, 36.0, &other).unwrap();
        assert_ne!(a, b);
        let ids: Vec<ParamId> = p
            .iter()
            .filter(|(_, name, _)| name.contains(".attn."))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            p.get_mut(id).data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let a = n.predict(&p, &x, 3, 12.0, &cond()).unwrap();
        let b = n.predict(&p, &x, 3, 36.0, &other).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[5], 0.0);
    }

    #[test]
    fn loss_gradient_passes_finite_differences() {
        let n = net(small());
        let mut p = n.init_params(5);
        for name in ["out.conv.w", "out.gain"] {
            let id = p.id(name).unwrap();
            p.get_mut(id)
                .data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, w)| *w = 0.05 * ((i % 7) as f64 - 3.0));
        }
        let x = Tensor::from_rows(
            42,
            1,
            (0..42)
                .map(|i| if i == 5 { 0.0 } else { (i as f64 * 0.7).sin() })
                .collect(),
        )
        .unwrap();
        let target = Tensor::from_rows(42, 1, (0..42).map(|i| (i as f64 * 0.2).cos()).collect()).unwrap();
        let err = grad_check_params(
            |g, params| {
                let xv = g.constant(x.clone());
                let y = n.forward(g, params, xv, 4, 24.0, &cond())?;
                let t = g.constant(target.clone());
                let r = g.sub(y, t)?;
                let sq = g.mul(r, r)?;
                Ok(g.sum(sq))
            },
            &p,
            1e-6,
            7,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn invalid_configs() {
        let mask = vec![true; 42];
        for bad in [
            CoSUNetConfig {
                depth: 2,
                channel_mults: vec![1, 1, 1],
                ..small()
            },
            CoSUNetConfig {
                channel_mults: vec![1],
                ..small()
            },
            CoSUNetConfig { heads: 3, ..small() },
            CoSUNetConfig {
                embed_dim: 7,
                ..small()
            },
        ] {
            assert!(CoSUNet::new(bad, &mask, 10).is_err());
        }
        assert!(CoSUNet::new(small(), &[true; 12], 10).is_err());
    }
}
