//! Building blocks of the spherical U-Net, expressed as graph operations.

use std::sync::Arc;

use crate::diffcore::{Graph, ParamSet, SparseRows, Tensor, Var};
use crate::error::{Error, Result};
use crate::icosphere::{IcosphereMesh, UpsampleSource, RING_ARITY};

/// Per-level connectivity and mask shared by every forward pass.
#[derive(Debug, Clone)]
pub struct LevelTopology {
    pub level: u32,
    pub num_vertices: usize,
    /// `V × 7` neighbour-ring table, row-major.
    pub rings: Arc<Vec<usize>>,
    /// 1 on valid vertices, 0 on masked ones, as a `[V, 1]` column.
    pub mask: Arc<Vec<f64>>,
}

impl LevelTopology {
    pub fn new(mesh: &IcosphereMesh, mask: &[bool]) -> Result<Self> {
        if mask.len() != mesh.num_vertices() {
            return Err(Error::Shape(format!(
                "mask of {} entries for level {} ({} vertices)",
                mask.len(),
                mesh.level(),
                mesh.num_vertices()
            )));
        }
        Ok(LevelTopology {
            level: mesh.level(),
            num_vertices: mesh.num_vertices(),
            rings: Arc::new(mesh.ring_table()),
            mask: Arc::new(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()),
        })
    }

    pub fn all_valid(mesh: &IcosphereMesh) -> Self {
        LevelTopology::new(mesh, &vec![true; mesh.num_vertices()]).expect("full mask matches mesh")
    }

    pub fn mask_var(&self, g: &mut Graph<'_>) -> Var {
        g.constant(Tensor::from_rows(self.num_vertices, 1, self.mask.as_ref().clone()).expect("mask column"))
    }
}

/// Mask-aware mean pooling from `fine` onto `coarse`: each valid coarse
/// vertex averages the valid members of its restriction set.
pub fn pooling_map(map: &[Vec<usize>], fine_mask: &[f64], coarse_mask: &[f64]) -> SparseRows {
    let rows = map
        .iter()
        .zip(coarse_mask)
        .map(|(set, &ok)| {
            let valid: Vec<usize> = set.iter().copied().filter(|&j| fine_mask[j] > 0.0).collect();
            if ok == 0.0 || valid.is_empty() {
                return Vec::new();
            }
            let w = 1.0 / valid.len() as f64;
            valid.into_iter().map(|j| (j, w)).collect()
        })
        .collect();
    SparseRows {
        rows,
        in_rows: fine_mask.len(),
    }
}

/// Mask-aware up-sampling: copies keep their value, midpoints average their
/// valid parents.
pub fn unpooling_map(map: &[UpsampleSource], coarse_mask: &[f64], fine_mask: &[f64]) -> SparseRows {
    let rows = map
        .iter()
        .zip(fine_mask)
        .map(|(src, &ok)| {
            if ok == 0.0 {
                return Vec::new();
            }
            let parents: Vec<usize> = match *src {
                UpsampleSource::Copy(i) => vec![i],
                UpsampleSource::Midpoint(a, b) => vec![a, b],
            };
            let valid: Vec<usize> = parents.into_iter().filter(|&j| coarse_mask[j] > 0.0).collect();
            let w = 1.0 / valid.len().max(1) as f64;
            valid.into_iter().map(|j| (j, w)).collect()
        })
        .collect();
    SparseRows {
        rows,
        in_rows: coarse_mask.len(),
    }
}

pub(crate) fn param<'a>(g: &mut Graph<'a>, params: &'a ParamSet, name: &str) -> Result<Var> {
    let id = params.id(name).ok_or_else(|| Error::Checkpoint {
        name: name.into(),
        msg: "missing parameter".into(),
    })?;
    Ok(g.param(params, id))
}

/// One-hop spherical convolution of a `[V, Cin]` field with a `[7·Cin, Cout]`
/// kernel whose row blocks follow the ring slots (centre first). Masked
/// vertices neither contribute nor receive values.
pub fn spherical_conv(g: &mut Graph<'_>, x: Var, topo: &LevelTopology, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != topo.num_vertices {
        return Err(Error::Shape(format!(
            "level {} convolution over {} vertices applied to {s:?}",
            topo.level, topo.num_vertices
        )));
    }
    let cin = s[1];
    let ks = g.shape(kernel).to_vec();
    if ks.len() != 2 || ks[0] != RING_ARITY * cin {
        return Err(Error::Shape(format!("kernel {ks:?} for {cin} input channels")));
    }
    let mask = topo.mask_var(g);
    let xm = g.mul(x, mask)?;
    let gathered = g.gather_rows(xm, topo.rings.clone())?;
    let flat = g.reshape(gathered, vec![topo.num_vertices, RING_ARITY * cin])?;
    let mut y = g.matmul(flat, kernel)?;
    if let Some(b) = bias {
        y = g.add(y, b)?;
    }
    g.mul(y, mask)
}

/// Multi-head cross-attention from vertex features (queries) to condition
/// tokens (keys and values), added residually to `x`.
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Option<Var>,
}

pub fn cross_attention(g: &mut Graph<'_>, x: Var, tokens: Var, w: &AttentionWeights, heads: usize) -> Result<Var> {
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(tokens, w.wk)?;
    let v = g.matmul(tokens, w.wv)?;
    let d = g.shape(q)[1];
    if heads == 0 || !d.is_multiple_of(heads) || g.shape(k)[1] != d || g.shape(v)[1] != d {
        return Err(Error::Shape(format!("attention width {d} with {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = if heads == 1 { q } else { g.slice_cols(q, lo, hi)? };
        let kh = if heads == 1 { k } else { g.slice_cols(k, lo, hi)? };
        let vh = if heads == 1 { v } else { g.slice_cols(v, lo, hi)? };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        outs.push(g.matmul(attn, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat(&outs)? };
    let mut o = g.matmul(joined, w.wo)?;
    if let Some(b) = w.bo {
        o = g.add(o, b)?;
    }
    g.add(x, o)
}

/// Sinusoidal encoding of an integer step: `d/2` sines then `d/2` cosines
/// with frequencies `1e-4^(i/(d/2 − 1))`.
pub fn step_encoding(beta: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |i: usize| {
        if half <= 1 {
            1.0
        } else {
            1e-4f64.powf(i as f64 / (half - 1) as f64)
        }
    };
    let b = beta as f64;
    let sines = (0..half).map(|i| (b * freq(i)).sin());
    let cosines = (0..half).map(|i| (b * freq(i)).cos());
    sines.chain(cosines).collect()
}
