//! Icosphere meshes built by recursive edge bisection of a regular icosahedron.
//!
//! Vertices introduced at level `L` are appended after the level `L-1`
//! vertices, so every mesh is a prefix-extension of the coarser one. That
//! prefix ordering is what the pooling and up-sampling maps rely on.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Deepest level accepted by [`build_icosphere`] (655,362 vertices).
pub const MAX_LEVEL: u32 = 8;

/// Number of slots in a padded one-hop ring: the centre plus six neighbours.
pub const RING_ARITY: usize = 7;

pub fn vertex_count(level: u32) -> usize {
    10 * 4usize.pow(level) + 2
}

pub fn face_count(level: u32) -> usize {
    20 * 4usize.pow(level)
}

pub fn edge_count(level: u32) -> usize {
    30 * 4usize.pow(level)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcosphereMesh {
    level: u32,
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    rings: Vec<Vec<usize>>,
    /// `parents[i - 12]` is the bisected edge of vertex `i`.
    parents: Vec<[usize; 2]>,
}

fn base_icosahedron() -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let vertices: Vec<[f64; 3]> = raw.iter().map(|p| normalize(*p)).collect();
    let mut faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    // Orient every face counterclockwise seen from outside.
    for f in &mut faces {
        let n = cross(sub(vertices[f[1]], vertices[f[0]]), sub(vertices[f[2]], vertices[f[0]]));
        if dot(n, vertices[f[0]]) < 0.0 {
            f.swap(1, 2);
        }
    }
    (vertices, faces)
}

/// Builds the level-`level` icosphere.
pub fn build_icosphere(level: u32) -> Result<IcosphereMesh> {
    build_stack(level).map(|mut stack| stack.pop().expect("stack is never empty"))
}

/// Builds every mesh from level 0 up to `level`, coarsest first.
pub fn build_stack(level: u32) -> Result<Vec<IcosphereMesh>> {
    if level > MAX_LEVEL {
        return Err(Error::range("icosphere level", level, format!("0..={MAX_LEVEL}")));
    }
    let (vertices, faces) = base_icosahedron();
    let mut mesh = IcosphereMesh::from_parts(0, vertices, faces, Vec::new());
    let mut stack = Vec::with_capacity(level as usize + 1);
    for _ in 0..level {
        let next = mesh.subdivide();
        stack.push(mesh);
        mesh = next;
    }
    stack.push(mesh);
    Ok(stack)
}

impl IcosphereMesh {
    fn from_parts(level: u32, vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>, parents: Vec<[usize; 2]>) -> Self {
        let rings = rings_from_faces(vertices.len(), &faces);
        IcosphereMesh {
            level,
            vertices,
            faces,
            rings,
            parents,
        }
    }

    fn subdivide(&self) -> IcosphereMesh {
        let mut vertices = self.vertices.clone();
        let mut parents = self.parents.clone();
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut faces = Vec::with_capacity(self.faces.len() * 4);

        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (pa, pb) = (vertices[key.0], vertices[key.1]);
                vertices.push(normalize([pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]]));
                parents.push([key.0, key.1]);
                vertices.len() - 1
            })
        };

        for &[a, b, c] in &self.faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            faces.push([a, ab, ca]);
            faces.push([b, bc, ab]);
            faces.push([c, ca, bc]);
            faces.push([ab, bc, ca]);
        }
        IcosphereMesh::from_parts(self.level + 1, vertices, faces, parents)
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Unpadded neighbours of `v`, counterclockwise about the outward normal,
    /// starting at the smallest neighbour index.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.rings[v]
    }

    /// The two endpoints of the edge bisected to create `v`, or `None` for
    /// the twelve icosahedron corners.
    pub fn parent_pair(&self, v: usize) -> Option<[usize; 2]> {
        v.checked_sub(12).and_then(|i| self.parents.get(i).copied())
    }

    /// Undirected edges, each listed once as `(low, high)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(edge_count(self.level));
        for (v, ring) in self.rings.iter().enumerate() {
            edges.extend(ring.iter().filter(|&&n| n > v).map(|&n| (v, n)));
        }
        edges
    }

    /// Fixed-arity ring `[v, n1, …, n6]`; pentagonal vertices repeat `n1`
    /// in the last slot.
    pub fn neighbor_ring(&self, v: usize) -> Result<[usize; RING_ARITY]> {
        let ring = self
            .rings
            .get(v)
            .ok_or_else(|| Error::range("vertex index", v, format!("0..{}", self.num_vertices())))?;
        let mut out = [v; RING_ARITY];
        for (slot, n) in out[1..].iter_mut().zip(ring.iter().cycle()) {
            *slot = *n;
        }
        Ok(out)
    }

    /// Flattened padded rings for all vertices (`V * 7` indices).
    pub fn ring_table(&self) -> Vec<usize> {
        (0..self.num_vertices())
            .flat_map(|v| self.neighbor_ring(v).expect("index in range"))
            .collect()
    }

    /// Wavefront OBJ text for visual inspection.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# icosphere level {}", self.level);
        for p in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", p[0], p[1], p[2]);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }
}

fn rings_from_faces(n: usize, faces: &[[usize; 3]]) -> Vec<Vec<usize>> {
    // next[v] maps neighbour b to the neighbour following it counterclockwise around v.
    let mut next: Vec<Vec<(usize, usize)>> = vec![Vec::with_capacity(6); n];
    for &[a, b, c] in faces {
        next[a].push((b, c));
        next[b].push((c, a));
        next[c].push((a, b));
    }
    next.into_iter()
        .map(|succ| {
            let start = succ.iter().map(|&(b, _)| b).min().expect("vertex has faces");
            let mut ring = Vec::with_capacity(succ.len());
            let mut cur = start;
            loop {
                ring.push(cur);
                cur = succ.iter().find(|&&(b, _)| b == cur).expect("closed fan").1;
                if cur == start {
                    break;
                }
            }
            ring
        })
        .collect()
}

/// Index sets for mean pooling from `fine` onto `coarse`: `{c}` plus the fine
/// neighbours of each coarse vertex `c`.
pub fn restriction_map(fine: &IcosphereMesh, coarse: &IcosphereMesh) -> Result<Vec<Vec<usize>>> {
    check_adjacent(coarse, fine)?;
    Ok((0..coarse.num_vertices())
        .map(|c| std::iter::once(c).chain(fine.neighbors(c).iter().copied()).collect())
        .collect())
}

/// How a fine vertex obtains its value when up-sampling from the coarse level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleSource {
    Copy(usize),
    Midpoint(usize, usize),
}

pub fn upsample_map(coarse: &IcosphereMesh, fine: &IcosphereMesh) -> Result<Vec<UpsampleSource>> {
    check_adjacent(coarse, fine)?;
    let n_coarse = coarse.num_vertices();
    Ok((0..fine.num_vertices())
        .map(|v| {
            if v < n_coarse {
                UpsampleSource::Copy(v)
            } else {
                let [a, b] = fine.parent_pair(v).expect("midpoint vertex has parents");
                UpsampleSource::Midpoint(a, b)
            }
        })
        .collect())
}

/// Applies an up-sampling map to a scalar field.
pub fn upsample_field(map: &[UpsampleSource], coarse: &[f64]) -> Vec<f64> {
    map.iter()
        .map(|s| match *s {
            UpsampleSource::Copy(i) => coarse[i],
            UpsampleSource::Midpoint(a, b) => 0.5 * (coarse[a] + coarse[b]),
        })
        .collect()
}

/// Mean-pools a scalar field through a restriction map.
pub fn restrict_field(map: &[Vec<usize>], fine: &[f64]) -> Vec<f64> {
    map.iter()
        .map(|set| set.iter().map(|&i| fine[i]).sum::<f64>() / set.len() as f64)
        .collect()
}

fn check_adjacent(coarse: &IcosphereMesh, fine: &IcosphereMesh) -> Result<()> {
    if fine.level != coarse.level + 1 {
        return Err(Error::LevelMismatch {
            expected: coarse.level + 1,
            got: fine.level,
        });
    }
    Ok(())
}

/// Shared stack of meshes, coarsest first, as consumed by the network.
pub type MeshStack = Arc<Vec<IcosphereMesh>>;

pub(crate) fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = dot(p, p).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_closed_forms() {
        for level in 0..=4 {
            let mesh = build_icosphere(level).unwrap();
            let (v, e, f) = (mesh.num_vertices(), mesh.edges().len(), mesh.faces().len());
            assert_eq!(v, vertex_count(level));
            assert_eq!(e, edge_count(level));
            assert_eq!(f, face_count(level));
            assert_eq!(v as i64 - e as i64 + f as i64, 2);
        }
        assert_eq!(build_icosphere(3).unwrap().num_vertices(), 642);
        assert_eq!(vertex_count(7), 163_842);
    }

    #[test]
    fn level_guard() {
        assert!(matches!(build_icosphere(9), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn pentagon_padding() {
        let mesh = build_icosphere(2).unwrap();
        for v in 0..mesh.num_vertices() {
            let ring = mesh.neighbor_ring(v).unwrap();
            assert_eq!(ring[0], v);
            if v < 12 {
                assert_eq!(mesh.neighbors(v).len(), 5);
                assert_eq!(ring[1], ring[6]);
            } else {
                assert_eq!(mesh.neighbors(v).len(), 6);
                let mut sorted = ring.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), 7);
            }
        }
        assert!(mesh.neighbor_ring(mesh.num_vertices()).is_err());
    }

    #[test]
    fn handshake_on_level_one() {
        let mesh = build_icosphere(1).unwrap();
        let total: usize = (0..mesh.num_vertices()).map(|v| mesh.neighbors(v).len()).sum();
        assert_eq!(total, 240);
    }

    #[test]
    fn rings_are_counterclockwise() {
        let mesh = build_icosphere(3).unwrap();
        for v in 0..mesh.num_vertices() {
            let p = mesh.vertices()[v];
            let ring = mesh.neighbors(v);
            assert_eq!(ring[0], *ring.iter().min().unwrap());
            for w in 0..ring.len() {
                let a = sub(mesh.vertices()[ring[w]], p);
                let b = sub(mesh.vertices()[ring[(w + 1) % ring.len()]], p);
                assert!(dot(cross(a, b), p) > 0.0, "vertex {v} ring not ccw");
            }
        }
    }

    #[test]
    fn restriction_covers_fine_vertices() {
        let stack = build_stack(1).unwrap();
        let map = restriction_map(&stack[1], &stack[0]).unwrap();
        let mut seen = vec![false; stack[1].num_vertices()];
        for set in &map {
            assert_eq!(set.len(), 6); // all level-0 vertices are pentagonal
            for &i in set {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));

        let stack = build_stack(2).unwrap();
        let map = restriction_map(&stack[2], &stack[1]).unwrap();
        assert_eq!(map[12].len(), 7);
        assert!(restriction_map(&stack[2], &stack[0]).is_err());
    }

    #[test]
    fn upsample_rules() {
        let stack = build_stack(2).unwrap();
        let map = upsample_map(&stack[1], &stack[2]).unwrap();
        assert_eq!(map[5], UpsampleSource::Copy(5));
        let coarse: Vec<f64> = (0..stack[1].num_vertices()).map(|i| i as f64 * 0.3).collect();
        let fine = upsample_field(&map, &coarse);
        for v in stack[1].num_vertices()..stack[2].num_vertices() {
            let [a, b] = stack[2].parent_pair(v).unwrap();
            assert_eq!(fine[v], 0.5 * (coarse[a] + coarse[b]));
        }
        let constant = vec![1.75; stack[1].num_vertices()];
        assert!(upsample_field(&map, &constant).iter().all(|&x| x == 1.75));
        let pooled = restrict_field(
            &restriction_map(&stack[2], &stack[1]).unwrap(),
            &upsample_field(&map, &constant),
        );
        assert!(pooled.iter().all(|&x| (x - 1.75).abs() < 1e-15));
    }

    #[test]
    fn obj_export_lines() {
        let mesh = build_icosphere(1).unwrap();
        let obj = mesh.to_obj();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 42);
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 80);
    }
}
