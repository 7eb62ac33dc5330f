//! Conforming triangular meshes: criss-cross generators for the unit square
//! and the L-shaped domain, facet topology, and newest-vertex bisection.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::error::{invalid, Error, Result};

pub type Point = [f64; 2];

/// An edge of the triangulation.
///
/// `elements[0]` is the lower-indexed adjacent triangle and `normal` is its
/// outward unit normal; `elements[1]` is `None` on the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    pub vertices: [usize; 2],
    pub elements: [Option<usize>; 2],
    /// Local edge index (edge opposite local vertex `i`) inside each adjacent element.
    pub local_edge: [usize; 2],
    pub normal: Point,
    pub length: f64,
    pub is_boundary: bool,
}

impl Facet {
    pub fn first(&self) -> usize {
        self.elements[0].expect("every facet has a first element")
    }

    pub fn second(&self) -> Option<usize> {
        self.elements[1]
    }

    pub fn point(&self, mesh: &Mesh, t: f64) -> Point {
        let a = mesh.vertices[self.vertices[0]];
        let b = mesh.vertices[self.vertices[1]];
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }
}

/// Axis-aligned rectangle `[x0,x1] × [y0,y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
}

/// Immutable triangulation with counter-clockwise triangles.
///
/// Local edge `i` of a triangle is the edge opposite local vertex `i`.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub facets: Vec<Facet>,
    /// Facet index of each local edge.
    pub elem_facets: Vec<[usize; 3]>,
    /// `h_T`, the longest edge of each triangle.
    pub elem_diameter: Vec<f64>,
    /// Mean of the adjacent `h_T` on interior facets, `h_T` on boundary facets.
    pub facet_h: Vec<f64>,
    /// Local index of the edge bisected next (opposite the newest vertex).
    pub refinement_edge: Vec<u8>,
    pub boundary_vertex: Vec<bool>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Mesh {
    /// Builds topology from raw vertex/triangle lists. Clockwise triangles are reoriented.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>, refinement_edge: Vec<u8>) -> Result<Self> {
        if refinement_edge.len() != triangles.len() {
            return Err(invalid("refinement_edge length must match triangle count"));
        }
        let mut triangles = triangles;
        let mut refinement_edge = refinement_edge;
        for (t, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(invalid(format!("triangle {t} references a missing vertex")));
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if area == 0.0 || !area.is_finite() {
                return Err(invalid(format!("triangle {t} is degenerate")));
            }
            if area < 0.0 {
                tri.swap(1, 2);
                refinement_edge[t] = match refinement_edge[t] {
                    1 => 2,
                    2 => 1,
                    e => e,
                };
            }
            if refinement_edge[t] > 2 {
                return Err(invalid(format!("triangle {t}: refinement edge index out of range")));
            }
        }

        let elem_diameter: Vec<f64> = triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|v| vertices[v]);
                dist(a, b).max(dist(b, c)).max(dist(c, a))
            })
            .collect();

        let mut lookup: HashMap<(usize, usize), usize> = HashMap::with_capacity(triangles.len() * 2);
        let mut facets: Vec<Facet> = Vec::with_capacity(triangles.len() * 2);
        let mut elem_facets = vec![[0usize; 3]; triangles.len()];
        for (t, tri) in triangles.iter().enumerate() {
            for i in 0..3 {
                let a = tri[(i + 1) % 3];
                let b = tri[(i + 2) % 3];
                let key = edge_key(a, b);
                match lookup.get(&key) {
                    Some(&f) => {
                        let facet = &mut facets[f];
                        if facet.elements[1].is_some() {
                            return Err(invalid(format!("edge {key:?} shared by more than two triangles")));
                        }
                        facet.elements[1] = Some(t);
                        facet.local_edge[1] = i;
                        facet.is_boundary = false;
                        elem_facets[t][i] = f;
                    }
                    None => {
                        let (pa, pb) = (vertices[a], vertices[b]);
                        let length = dist(pa, pb);
                        let normal = [(pb[1] - pa[1]) / length, -(pb[0] - pa[0]) / length];
                        lookup.insert(key, facets.len());
                        elem_facets[t][i] = facets.len();
                        facets.push(Facet {
                            vertices: [a, b],
                            elements: [Some(t), None],
                            local_edge: [i, 0],
                            normal,
                            length,
                            is_boundary: true,
                        });
                    }
                }
            }
        }

        let facet_h = facets
            .iter()
            .map(|f| match f.elements {
                [Some(a), Some(b)] => 0.5 * (elem_diameter[a] + elem_diameter[b]),
                [Some(a), None] => elem_diameter[a],
                _ => unreachable!(),
            })
            .collect();
        let mut boundary_vertex = vec![false; vertices.len()];
        for f in facets.iter().filter(|f| f.is_boundary) {
            boundary_vertex[f.vertices[0]] = true;
            boundary_vertex[f.vertices[1]] = true;
        }

        Ok(Self { vertices, triangles, facets, elem_facets, elem_diameter, facet_h, refinement_edge, boundary_vertex })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn element_vertices(&self, t: usize) -> [Point; 3] {
        self.triangles[t].map(|v| self.vertices[v])
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.element_vertices(t);
        signed_area(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_elements()).map(|t| self.area(t)).sum()
    }

    pub fn centroid(&self, t: usize) -> Point {
        let [a, b, c] = self.element_vertices(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn max_diameter(&self) -> f64 {
        self.elem_diameter.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_diameter(&self) -> f64 {
        self.elem_diameter.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Outward unit normal of element `t` on facet `f`.
    pub fn outward_normal(&self, t: usize, f: usize) -> Point {
        let facet = &self.facets[f];
        if facet.elements[0] == Some(t) {
            facet.normal
        } else {
            [-facet.normal[0], -facet.normal[1]]
        }
    }

    /// Triangles sharing a facet with `t`.
    pub fn facet_neighbors(&self, t: usize) -> Vec<usize> {
        self.elem_facets[t]
            .iter()
            .filter_map(|&f| {
                let facet = &self.facets[f];
                match facet.elements {
                    [Some(a), Some(b)] => Some(if a == t { b } else { a }),
                    _ => None,
                }
            })
            .collect()
    }

    /// Triangles incident to each vertex.
    pub fn vertex_elements(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_vertices()];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                out[v].push(t);
            }
        }
        out
    }

    /// Smallest interior angle over all triangles, in radians.
    pub fn min_angle(&self) -> f64 {
        let mut best = f64::INFINITY;
        for t in 0..self.num_elements() {
            let p = self.element_vertices(t);
            for i in 0..3 {
                let (a, b, c) = (p[i], p[(i + 1) % 3], p[(i + 2) % 3]);
                let u = [b[0] - a[0], b[1] - a[1]];
                let v = [c[0] - a[0], c[1] - a[1]];
                let cos = (u[0] * v[0] + u[1] * v[1]) / (dist(a, b) * dist(a, c));
                best = best.min(cos.clamp(-1.0, 1.0).acos());
            }
        }
        best
    }

    /// `V − E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices() as i64 - self.num_facets() as i64 + self.num_elements() as i64
    }

    /// Newest-vertex bisection of the marked triangles with conforming closure.
    pub fn refine(&self, marked: &[usize]) -> Mesh {
        self.refine_with_parents(marked).0
    }

    /// As [`Mesh::refine`], also returning the parent index of every new triangle.
    pub fn refine_with_parents(&self, marked: &[usize]) -> (Mesh, Vec<usize>) {
        let ref_key = |t: usize| {
            let tri = self.triangles[t];
            let e = self.refinement_edge[t] as usize;
            edge_key(tri[(e + 1) % 3], tri[(e + 2) % 3])
        };

        let mut marked_edges: HashSet<(usize, usize)> = marked.iter().map(|&t| ref_key(t)).collect();
        if marked_edges.is_empty() {
            return (self.clone(), (0..self.num_elements()).collect());
        }
        // Closure: a triangle with any marked edge must also bisect its refinement edge.
        let mut work: Vec<usize> = (0..self.num_elements()).collect();
        while !work.is_empty() {
            let mut next = Vec::new();
            for t in work {
                let key = ref_key(t);
                if marked_edges.contains(&key) {
                    continue;
                }
                let tri = self.triangles[t];
                let has_marked = (0..3).any(|i| marked_edges.contains(&edge_key(tri[(i + 1) % 3], tri[(i + 2) % 3])));
                if has_marked {
                    marked_edges.insert(key);
                    for &f in &self.elem_facets[t] {
                        next.extend(self.facets[f].elements.iter().flatten().copied());
                    }
                }
            }
            next.sort_unstable();
            next.dedup();
            work = next;
        }

        let mut vertices = self.vertices.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::with_capacity(marked_edges.len());
        let mut edges: Vec<_> = marked_edges.iter().copied().collect();
        edges.sort_unstable();
        for (a, b) in edges {
            let (pa, pb) = (vertices[a], vertices[b]);
            midpoint.insert((a, b), vertices.len());
            vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
        }

        let mut triangles = Vec::with_capacity(self.num_elements() * 2);
        let mut refinement_edge = Vec::with_capacity(self.num_elements() * 2);
        let mut parents = Vec::with_capacity(self.num_elements() * 2);
        for t in 0..self.num_elements() {
            let e = self.refinement_edge[t] as usize;
            let tri = self.triangles[t];
            // Rotate so the refinement edge is opposite local vertex 0.
            let mut stack = vec![[tri[e], tri[(e + 1) % 3], tri[(e + 2) % 3]]];
            while let Some([p0, p1, p2]) = stack.pop() {
                match midpoint.get(&edge_key(p1, p2)) {
                    Some(&m) => {
                        stack.push([m, p2, p0]);
                        stack.push([m, p0, p1]);
                    }
                    None => {
                        triangles.push([p0, p1, p2]);
                        refinement_edge.push(0);
                        parents.push(t);
                    }
                }
            }
        }
        let mesh = Mesh::new(vertices, triangles, refinement_edge).expect("bisection preserves validity");
        (mesh, parents)
    }

    /// Two bisection generations on every triangle; halves `h` on criss-cross meshes.
    pub fn uniform_refine(&self) -> Mesh {
        let all: Vec<usize> = (0..self.num_elements()).collect();
        let once = self.refine(&all);
        let all: Vec<usize> = (0..once.num_elements()).collect();
        once.refine(&all)
    }

    /// Plain-text export: `V F`, then `x y` per vertex, then `i j k` per triangle.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.num_vertices(), self.num_elements())?;
        for v in &self.vertices {
            writeln!(w, "{} {}", v[0], v[1])?;
        }
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    /// Reads the format written by [`Mesh::write_text`]. Refinement edges default to the longest edge.
    pub fn read_text<R: BufRead>(r: R) -> Result<Mesh> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| Error::Parse("unexpected end of mesh file".into()))?.map_err(Error::from)
        };
        let header = next()?;
        let mut it = header.split_whitespace().map(|s| s.parse::<usize>());
        let (nv, nt) = match (it.next(), it.next()) {
            (Some(Ok(a)), Some(Ok(b))) => (a, b),
            _ => return Err(Error::Parse(format!("bad header line {header:?}"))),
        };
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string()));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(e.to_string()));
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let l = next()?;
            let p: Vec<&str> = l.split_whitespace().collect();
            if p.len() != 2 {
                return Err(Error::Parse(format!("bad vertex line {l:?}")));
            }
            vertices.push([parse_f(p[0])?, parse_f(p[1])?]);
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let l = next()?;
            let p: Vec<&str> = l.split_whitespace().collect();
            if p.len() != 3 {
                return Err(Error::Parse(format!("bad triangle line {l:?}")));
            }
            triangles.push([parse_u(p[0])?, parse_u(p[1])?, parse_u(p[2])?]);
        }
        let refinement_edge = triangles
            .iter()
            .map(|t| {
                let p = t.map(|v: usize| vertices.get(v).copied().unwrap_or([0.0, 0.0]));
                let lens = [dist(p[1], p[2]), dist(p[2], p[0]), dist(p[0], p[1])];
                (0..3).max_by(|&a, &b| lens[a].total_cmp(&lens[b])).unwrap() as u8
            })
            .collect();
        Mesh::new(vertices, triangles, refinement_edge)
    }
}

/// Criss-cross triangulation of a union of grid cells `(i, j)` of size `hx × hy`.
fn crisscross_cells(cells: &[(i64, i64)], origin: Point, hx: f64, hy: f64) -> Mesh {
    let mut index: HashMap<(i64, i64), usize> = HashMap::new();
    let mut vertices = Vec::new();
    // Corners live on even doubled-grid coordinates, centers on odd ones.
    let mut vertex = |key: (i64, i64)| -> usize {
        *index.entry(key).or_insert_with(|| {
            vertices.push([origin[0] + 0.5 * hx * key.0 as f64, origin[1] + 0.5 * hy * key.1 as f64]);
            vertices.len() - 1
        })
    };
    let mut sorted: Vec<(i64, i64)> = cells.to_vec();
    sorted.sort_unstable_by_key(|&(i, j)| (j, i));
    for &(i, j) in &sorted {
        for dj in 0..=1 {
            for di in 0..=1 {
                vertex((2 * (i + di), 2 * (j + dj)));
            }
        }
    }
    let mut triangles = Vec::with_capacity(4 * cells.len());
    for &(i, j) in &sorted {
        let sw = vertex((2 * i, 2 * j));
        let se = vertex((2 * i + 2, 2 * j));
        let ne = vertex((2 * i + 2, 2 * j + 2));
        let nw = vertex((2 * i, 2 * j + 2));
        let c = vertex((2 * i + 1, 2 * j + 1));
        triangles.extend([[c, sw, se], [c, se, ne], [c, ne, nw], [c, nw, sw]]);
    }
    let refinement_edge = vec![0u8; triangles.len()];
    Mesh::new(vertices, triangles, refinement_edge).expect("criss-cross construction is valid")
}

/// `n × n` criss-cross mesh of `rect`: each cell split into four triangles by its center.
pub fn make_crisscross(n: usize, rect: Rect) -> Result<Mesh> {
    if n == 0 {
        return Err(invalid("criss-cross mesh needs n ≥ 1"));
    }
    if !(rect.x1 > rect.x0 && rect.y1 > rect.y0) {
        return Err(invalid("rectangle must have positive extent"));
    }
    let cells: Vec<(i64, i64)> = (0..n as i64).flat_map(|j| (0..n as i64).map(move |i| (i, j))).collect();
    let hx = (rect.x1 - rect.x0) / n as f64;
    let hy = (rect.y1 - rect.y0) / n as f64;
    Ok(crisscross_cells(&cells, [rect.x0, rect.y0], hx, hy))
}

/// Criss-cross mesh of `(−1,1)² \ [0,1)×(−1,0]` with `n` cells per unit length.
pub fn make_lshape(n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(invalid("L-shape mesh needs n ≥ 1"));
    }
    let m = 2 * n as i64;
    let half = n as i64;
    let cells: Vec<(i64, i64)> = (0..m)
        .flat_map(|j| (0..m).map(move |i| (i, j)))
        .filter(|&(i, j)| !(i >= half && j < half))
        .collect();
    let h = 1.0 / n as f64;
    Ok(crisscross_cells(&cells, [-1.0, -1.0], h, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> Mesh {
        make_crisscross(n, Rect::UNIT).unwrap()
    }

    fn assert_topology(m: &Mesh) {
        for t in 0..m.num_elements() {
            assert!(m.area(t) > 0.0);
        }
        for (fi, f) in m.facets.iter().enumerate() {
            assert!((f.normal[0].hypot(f.normal[1]) - 1.0).abs() < 1e-14);
            let t = f.first();
            assert_eq!(m.elem_facets[t][f.local_edge[0]], fi);
            // Normal points away from the first element's centroid.
            let c = m.centroid(t);
            let p = f.point(m, 0.5);
            assert!((p[0] - c[0]) * f.normal[0] + (p[1] - c[1]) * f.normal[1] > 0.0);
            match f.elements[1] {
                Some(t2) => {
                    assert!(t < t2);
                    let n2 = m.outward_normal(t2, fi);
                    assert!((n2[0] + f.normal[0]).abs() < 1e-14 && (n2[1] + f.normal[1]).abs() < 1e-14);
                    let expect = 0.5 * (m.elem_diameter[t] + m.elem_diameter[t2]);
                    assert!((m.facet_h[fi] - expect).abs() < 1e-15);
                }
                None => assert_eq!(m.facet_h[fi], m.elem_diameter[t]),
            }
        }
        assert_eq!(m.euler_characteristic(), 1);
    }

    #[test]
    fn crisscross_counts() {
        let m1 = unit(1);
        assert_eq!((m1.num_elements(), m1.num_vertices(), m1.num_facets()), (4, 5, 8));
        assert_eq!(m1.facets.iter().filter(|f| f.is_boundary).count(), 4);
        let m8 = unit(8);
        assert_eq!((m8.num_elements(), m8.num_vertices()), (256, 145));
        for n in 1..=6 {
            let m = unit(n);
            assert_eq!(m.num_vertices(), (n + 1) * (n + 1) + n * n);
            assert_eq!(m.num_elements(), 4 * n * n);
            assert!((m.total_area() - 1.0).abs() < 1e-12);
            assert_topology(&m);
        }
        assert!(make_crisscross(0, Rect::UNIT).is_err());
    }

    #[test]
    fn crisscross_vertices_match_bruteforce_dedup() {
        let m = unit(2);
        let mut pts: Vec<(i64, i64)> = Vec::new();
        for j in 0..2 {
            for i in 0..2 {
                for (di, dj) in [(0, 0), (2, 0), (2, 2), (0, 2), (1, 1)] {
                    pts.push((2 * i + di, 2 * j + dj));
                }
            }
        }
        pts.sort_unstable();
        pts.dedup();
        assert_eq!(pts.len(), 13);
        assert_eq!(m.num_vertices(), 13);
        assert_eq!(m.num_elements(), 16);
    }

    #[test]
    fn lshape_counts() {
        let m1 = make_lshape(1).unwrap();
        assert_eq!(m1.num_elements(), 12);
        let m2 = make_lshape(2).unwrap();
        assert_eq!(m2.num_elements(), 48);
        // Brute force: 12 cells, collect corner and center keys.
        let mut pts = Vec::new();
        for j in 0..4i64 {
            for i in 0..4i64 {
                if i >= 2 && j < 2 {
                    continue;
                }
                for (di, dj) in [(0, 0), (2, 0), (2, 2), (0, 2), (1, 1)] {
                    pts.push((2 * i + di, 2 * j + dj));
                }
            }
        }
        pts.sort_unstable();
        pts.dedup();
        assert_eq!(m2.num_vertices(), pts.len());
        for n in 1..=3 {
            let m = make_lshape(n).unwrap();
            assert!((m.total_area() - 3.0).abs() < 1e-12);
            let origin = m.vertices.iter().position(|p| p[0] == 0.0 && p[1] == 0.0).unwrap();
            assert!(m.boundary_vertex[origin]);
            assert_topology(&m);
        }
    }

    #[test]
    fn empty_marking_is_identity() {
        let m = unit(2);
        let r = m.refine(&[]);
        assert_eq!(r.vertices, m.vertices);
        assert_eq!(r.triangles, m.triangles);
    }

    #[test]
    fn single_triangle_bisection() {
        let m = Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]], vec![0]).unwrap();
        let (r, parents) = m.refine_with_parents(&[0]);
        assert_eq!(r.num_elements(), 2);
        assert_eq!(parents, vec![0, 0]);
        assert!((r.total_area() - 0.5).abs() < 1e-15);
        assert_topology(&r);
    }

    #[test]
    fn two_generations_give_similar_children() {
        let m = unit(1);
        let (once, p1) = m.refine_with_parents(&[0, 1, 2, 3]);
        let all: Vec<usize> = (0..once.num_elements()).collect();
        let (twice, p2) = once.refine_with_parents(&all);
        assert_eq!(twice.num_elements(), 16);
        let mut per_parent = [0usize; 4];
        for (t, &p) in p2.iter().enumerate() {
            let root = p1[p];
            per_parent[root] += 1;
            assert!((twice.area(t) - m.area(root) / 4.0).abs() < 1e-15);
        }
        assert_eq!(per_parent, [4; 4]);
        assert!((twice.min_angle() - m.min_angle()).abs() < 1e-12);
        assert!((twice.max_diameter() - 0.5 * m.max_diameter()).abs() < 1e-12);
    }

    #[test]
    fn uniform_refinement_reproduces_finer_crisscross() {
        let r = unit(1).uniform_refine();
        assert_eq!(r.num_elements(), 16);
        assert_eq!(r.num_vertices(), unit(2).num_vertices());
        assert_topology(&r);
        let mut a = r.vertices.clone();
        let mut b = unit(2).vertices;
        let key = |p: &Point| ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64);
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
    }

    #[test]
    fn minimum_angle_is_stable_under_refinement() {
        let mut m = unit(1);
        let initial = m.min_angle();
        for _ in 0..6 {
            m = m.uniform_refine();
            assert!(m.min_angle() >= initial - 1e-9);
            assert_eq!(m.euler_characteristic(), 1);
            assert!((m.total_area() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.num_elements(), 4 * 4usize.pow(6));
    }

    #[test]
    fn adaptive_refinement_stays_conforming() {
        let mut m = make_lshape(1).unwrap();
        let initial = m.min_angle();
        for _ in 0..8 {
            // Refine elements touching the re-entrant corner.
            let marked: Vec<usize> = (0..m.num_elements())
                .filter(|&t| m.element_vertices(t).iter().any(|p| p[0] == 0.0 && p[1] == 0.0))
                .collect();
            let (r, parents) = m.refine_with_parents(&marked);
            for &t in &marked {
                assert!(parents.iter().filter(|&&p| p == t).count() >= 2);
            }
            m = r;
            assert_topology(&m);
            assert!(m.min_angle() >= initial - 1e-9);
            assert!((m.total_area() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn text_roundtrip() {
        let m = make_lshape(2).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("{} {}\n", m.num_vertices(), m.num_elements())));
        let back = Mesh::read_text(&buf[..]).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.triangles, m.triangles);
    }
}
