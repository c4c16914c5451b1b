//! Triangle meshes: marching-cubes extraction, area-weighted sampling, OBJ.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use super::grid::SdfGrid;
use super::mc_tables::{EDGE_TABLE, TRI_TABLE};
use super::vec3::{self, Point};
use super::GeometryError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[u32; 3]>,
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Below this a triangle counts as degenerate and is dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * vec3::norm(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// `n` points uniform by area. Errors on an empty mesh.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Point>, GeometryError> {
        if self.is_empty() {
            return Err(GeometryError::Empty("mesh has no triangles".into()));
        }
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        Ok((0..n)
            .map(|_| {
                let x = rng.gen::<f64>() * acc;
                let t = cdf.partition_point(|&c| c < x).min(cdf.len() - 1);
                let [a, b, c] = self.triangle(t);
                let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                vec3::add(a, vec3::add(vec3::scale(vec3::sub(b, a), u), vec3::scale(vec3::sub(c, a), v)))
            })
            .collect())
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    /// Parse the `v` / `f` subset written by [`Mesh::to_obj`]. Polygon faces
    /// are fanned; `a/b/c` index forms keep the vertex index.
    pub fn from_obj(text: &str) -> Result<Self, GeometryError> {
        let mut m = Mesh::default();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = || GeometryError::Format(format!("obj line {}: `{line}`", ln + 1));
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.take(3).map(str::parse).collect::<Result<_, _>>().map_err(|_| bad())?;
                    if c.len() != 3 {
                        return Err(bad());
                    }
                    m.vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|t| t.split('/').next().unwrap_or("").parse::<u32>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad())?;
                    if idx.len() < 3 || idx.iter().any(|&i| i == 0 || i as usize > m.vertices.len()) {
                        return Err(bad());
                    }
                    for w in 1..idx.len() - 1 {
                        m.triangles.push([idx[0] - 1, idx[w] - 1, idx[w + 1] - 1]);
                    }
                }
                _ => {}
            }
        }
        Ok(m)
    }
}

/// Iso-surface of `grid` at `iso` with the 256-case table. Vertices on
/// shared cell edges are shared, so a closed level set gives a closed mesh.
/// A corner counts as inside when its value is below `iso`.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> Mesh {
    let r = grid.resolution;
    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<usize, u32> = HashMap::new();
    let mut corner_val = [0.0f64; 8];
    let mut cell_vertex = [0u32; 12];
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let mut case = 0usize;
                for (n, c) in CORNERS.iter().enumerate() {
                    let v = grid.get(i + c[0], j + c[1], k + c[2]) as f64;
                    corner_val[n] = v;
                    if v < iso {
                        case |= 1 << n;
                    }
                }
                let edges = EDGE_TABLE[case];
                if edges == 0 {
                    continue;
                }
                for (e, &[a, b]) in EDGES.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let (ca, cb) = (CORNERS[a], CORNERS[b]);
                    let (lo, axis) = if ca <= cb { (ca, axis_of(ca, cb)) } else { (cb, axis_of(ca, cb)) };
                    let key = grid.index(i + lo[0], j + lo[1], k + lo[2]) * 3 + axis;
                    let id = *edge_vertex.entry(key).or_insert_with(|| {
                        let pa = grid.point(i + ca[0], j + ca[1], k + ca[2]);
                        let pb = grid.point(i + cb[0], j + cb[1], k + cb[2]);
                        let (va, vb) = (corner_val[a], corner_val[b]);
                        let t = if (vb - va).abs() < 1e-300 { 0.5 } else { ((iso - va) / (vb - va)).clamp(0.0, 1.0) };
                        mesh.vertices.push(vec3::add(pa, vec3::scale(vec3::sub(pb, pa), t)));
                        (mesh.vertices.len() - 1) as u32
                    });
                    cell_vertex[e] = id;
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [
                        cell_vertex[tri[0] as usize],
                        cell_vertex[tri[1] as usize],
                        cell_vertex[tri[2] as usize],
                    ];
                    mesh.triangles.push(t);
                    if mesh.triangle_area(mesh.triangles.len() - 1) <= MIN_TRIANGLE_AREA {
                        mesh.triangles.pop();
                    }
                }
            }
        }
    }
    mesh
}

fn axis_of(a: [usize; 3], b: [usize; 3]) -> usize {
    (0..3).find(|&x| a[x] != b[x]).expect("edge joins distinct corners")
}
