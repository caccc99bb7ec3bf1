//! Single-patch tensor-product geometry: the isoparametric map, physical
//! basis derivatives up to second order, Gauss-Legendre quadrature and the
//! faces and edges of the parametric box.

use std::fmt;

use crate::autodiff::{det3, inv3};
use crate::error::{Error, Result};
use crate::splines::{rational_derivatives, BasisEval, KnotVector, TensorBasis, WeightSet};

/// One nonempty knot-span box of the patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub id: usize,
    /// Knot-span index per direction (unused directions hold 0).
    pub spans: [usize; 3],
    /// Parametric extent per direction.
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Element {
    /// Maps reference coordinates in `[-1, 1]^dim` into the span box.
    pub fn map_reference(&self, dim: usize, t: &[f64; 3]) -> [f64; 3] {
        let mut xi = [0.0; 3];
        for d in 0..dim {
            xi[d] = self.lo[d] + 0.5 * (t[d] + 1.0) * (self.hi[d] - self.lo[d]);
        }
        xi
    }

    /// Jacobian of [`map_reference`](Self::map_reference).
    pub fn reference_scale(&self, dim: usize) -> f64 {
        (0..dim).map(|d| 0.5 * (self.hi[d] - self.lo[d])).product()
    }
}

/// A spline patch: knot vectors, control net and weights.
#[derive(Debug, Clone)]
pub struct PatchGeometry {
    dim: usize,
    knots: Vec<KnotVector>,
    control_points: Vec<[f64; 3]>,
    weights: WeightSet,
    elements: Vec<Element>,
}

/// Map value and parametric derivatives at a point:
/// `jac[i][α] = ∂x_i/∂ξ_α`, `hess[i][α][β] = ∂²x_i/∂ξ_α∂ξ_β`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryPoint {
    pub x: [f64; 3],
    pub jac: [[f64; 3]; 3],
    pub hess: [[[f64; 3]; 3]; 3],
}

/// Local basis functions of an element at a point with physical derivatives.
#[derive(Debug, Clone)]
pub struct PhysicalBasis {
    /// Control-point indices of the local functions.
    pub functions: Vec<usize>,
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 3]>,
    pub hessians: Vec<[[f64; 3]; 3]>,
    pub geometry: GeometryPoint,
    /// `det(∂x/∂ξ)` of the `dim × dim` map.
    pub det: f64,
}

impl PatchGeometry {
    pub fn new(knots: Vec<KnotVector>, control_points: Vec<[f64; 3]>, weights: WeightSet) -> Result<Self> {
        let dim = knots.len();
        if !(1..=3).contains(&dim) {
            return Err(Error::invalid("patch dimension must be 1, 2 or 3"));
        }
        let count: usize = knots.iter().map(KnotVector::basis_count).product();
        if control_points.len() != count {
            return Err(Error::invalid(format!(
                "control grid has {} points, basis needs {count}",
                control_points.len()
            )));
        }
        if weights.as_slice().len() != count {
            return Err(Error::invalid(format!(
                "{} weights given for {count} control points",
                weights.as_slice().len()
            )));
        }
        let span_lists: Vec<Vec<usize>> = knots.iter().map(KnotVector::spans).collect();
        let mut elements = Vec::new();
        let n2 = if dim > 2 { span_lists[2].len() } else { 1 };
        let n1 = if dim > 1 { span_lists[1].len() } else { 1 };
        for k in 0..n2 {
            for j in 0..n1 {
                for i in 0..span_lists[0].len() {
                    let idx = [i, j, k];
                    let mut spans = [0; 3];
                    let mut lo = [0.0; 3];
                    let mut hi = [0.0; 3];
                    for d in 0..dim {
                        let s = span_lists[d][idx[d]];
                        spans[d] = s;
                        lo[d] = knots[d].knots()[s];
                        hi[d] = knots[d].knots()[s + 1];
                    }
                    elements.push(Element {
                        id: elements.len(),
                        spans,
                        lo,
                        hi,
                    });
                }
            }
        }
        let patch = Self {
            dim,
            knots,
            control_points,
            weights,
            elements,
        };
        patch.check_invertible()?;
        Ok(patch)
    }

    /// Axis-aligned box `[0, extents]` on the unit parametric cube, control
    /// points at the Greville abscissae so the map is affine.
    pub fn box_patch(extents: &[f64], elements: &[usize], degree: usize) -> Result<Self> {
        if extents.len() != elements.len() {
            return Err(Error::invalid("extents and element counts differ in length"));
        }
        if extents.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::invalid("box extents must be positive"));
        }
        let knots = elements
            .iter()
            .map(|&n| KnotVector::uniform(degree, n, 0.0, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let grev: Vec<Vec<f64>> = knots.iter().map(KnotVector::greville).collect();
        let dim = knots.len();
        let counts: Vec<usize> = knots.iter().map(KnotVector::basis_count).collect();
        let total: usize = counts.iter().product();
        let mut cps = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut x = [0.0; 3];
            for d in 0..dim {
                let i = rem % counts[d];
                rem /= counts[d];
                x[d] = grev[d][i] * extents[d];
            }
            cps.push(x);
        }
        Self::new(knots, cps, WeightSet::uniform(total))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knots(&self) -> &[KnotVector] {
        &self.knots
    }

    pub fn control_points(&self) -> &[[f64; 3]] {
        &self.control_points
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.knots.iter().map(KnotVector::degree).collect()
    }

    /// Basis counts per direction, padded with 1.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [1; 3];
        for (d, kv) in self.knots.iter().enumerate() {
            c[d] = kv.basis_count();
        }
        c
    }

    pub fn control_point_count(&self) -> usize {
        self.control_points.len()
    }

    /// Flat index of control point `(i, j, k)`.
    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        let c = self.counts();
        idx[0] + c[0] * (idx[1] + c[1] * idx[2])
    }

    pub fn grid_index(&self, flat: usize) -> [usize; 3] {
        let c = self.counts();
        [flat % c[0], (flat / c[0]) % c[1], flat / (c[0] * c[1])]
    }

    /// Number of local functions per element, `Π (p_d + 1)`.
    pub fn local_count(&self) -> usize {
        self.knots.iter().map(|k| k.degree() + 1).product()
    }

    /// Control-point indices supported on an element, in local tensor order.
    pub fn element_functions(&self, element: &Element) -> Vec<usize> {
        let mut loc = [1usize; 3];
        for d in 0..self.dim {
            loc[d] = self.knots[d].degree() + 1;
        }
        let mut out = Vec::with_capacity(loc.iter().product());
        for c in 0..loc[2] {
            for b in 0..loc[1] {
                for a in 0..loc[0] {
                    let local = [a, b, c];
                    let mut idx = [0; 3];
                    for d in 0..self.dim {
                        idx[d] = element.spans[d] + 1 - loc[d] + local[d];
                    }
                    out.push(self.flat_index(idx));
                }
            }
        }
        out
    }

    /// Element whose span box contains the parametric point.
    pub fn locate(&self, xi: &[f64; 3]) -> Result<&Element> {
        let mut spans = [0; 3];
        for d in 0..self.dim {
            spans[d] = self.knots[d].find_span(xi[d])?;
        }
        self.elements
            .iter()
            .find(|e| e.spans == spans)
            .ok_or_else(|| Error::invalid("point does not fall in any element"))
    }

    fn basis_evals(&self, element: &Element, xi: &[f64; 3]) -> Vec<BasisEval> {
        (0..self.dim)
            .map(|d| self.knots[d].eval_basis_on_span(element.spans[d], xi[d], 2))
            .collect()
    }

    fn tensor_basis(&self, element: &Element, xi: &[f64; 3]) -> (Vec<usize>, TensorBasis) {
        let functions = self.element_functions(element);
        let evals = self.basis_evals(element, xi);
        let tb = if self.weights.is_polynomial() {
            rational_derivatives(&evals, None)
        } else {
            let w: Vec<f64> = functions.iter().map(|&f| self.weights.as_slice()[f]).collect();
            rational_derivatives(&evals, Some(&w))
        }
        .expect("validated weights and directions");
        (functions, tb)
    }

    fn map_from_basis(&self, functions: &[usize], tb: &TensorBasis) -> GeometryPoint {
        let mut g = GeometryPoint {
            x: [0.0; 3],
            jac: [[0.0; 3]; 3],
            hess: [[[0.0; 3]; 3]; 3],
        };
        for (a, &f) in functions.iter().enumerate() {
            let cp = self.control_points[f];
            for i in 0..3 {
                g.x[i] += tb.values[a] * cp[i];
                for al in 0..3 {
                    g.jac[i][al] += tb.grads[a][al] * cp[i];
                    for be in 0..3 {
                        g.hess[i][al][be] += tb.hessians[a][al][be] * cp[i];
                    }
                }
            }
        }
        g
    }

    /// Physical point and parametric derivatives of the map.
    pub fn geometry_map(&self, element: &Element, xi: &[f64; 3]) -> GeometryPoint {
        let (functions, tb) = self.tensor_basis(element, xi);
        self.map_from_basis(&functions, &tb)
    }

    /// `∂x/∂ξ` padded with identity in unused directions.
    fn padded_jacobian(&self, jac: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut m = *jac;
        for d in self.dim..3 {
            for k in 0..3 {
                m[d][k] = 0.0;
                m[k][d] = 0.0;
            }
            m[d][d] = 1.0;
        }
        m
    }

    /// Local basis with first and second physical derivatives, via
    /// `∇∇N = Jᵀ⁻¹ [∂²N/∂ξ² − ∇N · ∂²x/∂ξ²] J⁻¹`.
    pub fn physical_basis(&self, element: &Element, xi: &[f64; 3]) -> Result<PhysicalBasis> {
        let (functions, tb) = self.tensor_basis(element, xi);
        let geometry = self.map_from_basis(&functions, &tb);
        let jm = self.padded_jacobian(&geometry.jac);
        let det = det3(&jm);
        if !(det > 0.0) {
            return Err(Error::ElementInversion {
                element: element.id,
                det,
            });
        }
        // inv[α][J] = ∂ξ_α/∂X_J
        let inv = inv3(&jm).expect("nonzero determinant");
        let n = functions.len();
        let mut grads = vec![[0.0; 3]; n];
        let mut hessians = vec![[[0.0; 3]; 3]; n];
        for a in 0..n {
            let mut g = [0.0; 3];
            for j in 0..self.dim {
                for al in 0..self.dim {
                    g[j] += tb.grads[a][al] * inv[al][j];
                }
            }
            // bracket[α][β] = ∂²N/∂ξ_α∂ξ_β − Σ_L ∂N/∂X_L ∂²x_L/∂ξ_α∂ξ_β
            let mut bracket = [[0.0; 3]; 3];
            for al in 0..self.dim {
                for be in 0..self.dim {
                    let mut v = tb.hessians[a][al][be];
                    for l in 0..self.dim {
                        v -= g[l] * geometry.hess[l][al][be];
                    }
                    bracket[al][be] = v;
                }
            }
            let mut h = [[0.0; 3]; 3];
            for j in 0..self.dim {
                for k in j..self.dim {
                    let mut v = 0.0;
                    for al in 0..self.dim {
                        for be in 0..self.dim {
                            v += inv[al][j] * bracket[al][be] * inv[be][k];
                        }
                    }
                    h[j][k] = v;
                    h[k][j] = v;
                }
            }
            grads[a] = g;
            hessians[a] = h;
        }
        Ok(PhysicalBasis {
            functions,
            values: tb.values,
            grads,
            hessians,
            geometry,
            det,
        })
    }

    fn check_invertible(&self) -> Result<()> {
        let rule = self.volume_rule();
        for e in &self.elements {
            for t in &rule.points {
                let xi = e.map_reference(self.dim, t);
                let g = self.geometry_map(e, &xi);
                let det = det3(&self.padded_jacobian(&g.jac));
                if !(det > 0.0) {
                    return Err(Error::ElementInversion { element: e.id, det });
                }
            }
        }
        Ok(())
    }

    /// `(p+1)` Gauss points per direction.
    pub fn volume_rule(&self) -> QuadratureRule {
        QuadratureRule::tensor(&self.degrees().iter().map(|p| p + 1).collect::<Vec<_>>())
    }

    /// Total volume (length, area) of the patch by quadrature.
    pub fn volume(&self) -> f64 {
        let rule = self.volume_rule();
        let mut v = 0.0;
        for e in &self.elements {
            let scale = e.reference_scale(self.dim);
            for (t, w) in rule.points.iter().zip(&rule.weights) {
                let xi = e.map_reference(self.dim, t);
                let g = self.geometry_map(e, &xi);
                v += w * scale * det3(&self.padded_jacobian(&g.jac));
            }
        }
        v
    }

    /// Faces (`2·dim`) followed by edges (12 when `dim = 3`).
    pub fn enumerate_boundary(&self) -> Vec<BoundaryEntity> {
        let mut out = Vec::new();
        for dir in 0..self.dim {
            for side in [Side::Min, Side::Max] {
                out.push(BoundaryEntity::Face(Face { dir, side }));
            }
        }
        if self.dim == 3 {
            for free in 0..3 {
                let (d0, d1) = match free {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                for s0 in [Side::Min, Side::Max] {
                    for s1 in [Side::Min, Side::Max] {
                        out.push(BoundaryEntity::Edge(Edge::new(
                            Face { dir: d0, side: s0 },
                            Face { dir: d1, side: s1 },
                        )));
                    }
                }
            }
        }
        out
    }

    /// Elements touching a face.
    pub fn face_elements(&self, face: Face) -> impl Iterator<Item = &Element> {
        let target = self.end_span(face);
        self.elements.iter().filter(move |e| e.spans[face.dir] == target)
    }

    /// Elements touching an edge.
    pub fn edge_elements(&self, edge: Edge) -> impl Iterator<Item = &Element> {
        let t0 = self.end_span(edge.faces[0]);
        let t1 = self.end_span(edge.faces[1]);
        let (d0, d1) = (edge.faces[0].dir, edge.faces[1].dir);
        self.elements
            .iter()
            .filter(move |e| e.spans[d0] == t0 && e.spans[d1] == t1)
    }

    fn end_span(&self, face: Face) -> usize {
        let spans = self.knots[face.dir].spans();
        match face.side {
            Side::Min => spans[0],
            Side::Max => *spans.last().expect("knot vector has a span"),
        }
    }

    /// Parametric coordinate of a face.
    pub fn face_coordinate(&self, face: Face) -> f64 {
        let (lo, hi) = self.knots[face.dir].domain();
        match face.side {
            Side::Min => lo,
            Side::Max => hi,
        }
    }

    /// Control points on a face.
    pub fn face_control_points(&self, face: Face) -> Vec<usize> {
        let target = match face.side {
            Side::Min => 0,
            Side::Max => self.knots[face.dir].basis_count() - 1,
        };
        (0..self.control_point_count())
            .filter(|&f| self.grid_index(f)[face.dir] == target)
            .collect()
    }

    /// Control points on an edge.
    pub fn edge_control_points(&self, edge: Edge) -> Vec<usize> {
        let a = self.face_control_points(edge.faces[0]);
        let b = self.face_control_points(edge.faces[1]);
        a.into_iter().filter(|f| b.contains(f)).collect()
    }

    /// Outward unit normal, surface measure per unit parametric area and the
    /// element thickness along the normal at a point of a face.
    pub fn face_point(&self, face: Face, element: &Element, xi: &[f64; 3]) -> FacePoint {
        let g = self.geometry_map(element, xi);
        let inward = g.jac.map(|row| row[face.dir]);
        let sign = match face.side {
            Side::Min => -1.0,
            Side::Max => 1.0,
        };
        let (mut normal, measure) = match self.dim {
            1 => ([1.0, 0.0, 0.0], 1.0),
            2 => {
                let free = 1 - face.dir;
                let t = [g.jac[0][free], g.jac[1][free]];
                let len = (t[0] * t[0] + t[1] * t[1]).sqrt();
                ([t[1] / len, -t[0] / len, 0.0], len)
            }
            _ => {
                let (a, b) = match face.dir {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let ta = g.jac.map(|row| row[a]);
                let tb = g.jac.map(|row| row[b]);
                let n = cross(&ta, &tb);
                let len = norm(&n);
                ([n[0] / len, n[1] / len, n[2] / len], len)
            }
        };
        if dot(&normal, &inward) * sign < 0.0 {
            normal = normal.map(|v| -v);
        }
        let span_len = element.hi[face.dir] - element.lo[face.dir];
        let thickness = dot(&normal, &inward).abs() * span_len;
        FacePoint {
            x: g.x,
            normal,
            measure,
            thickness,
        }
    }

    /// Unit tangent and length measure per unit parametric length on an edge.
    pub fn edge_point(&self, edge: Edge, element: &Element, xi: &[f64; 3]) -> ([f64; 3], f64, [f64; 3]) {
        let g = self.geometry_map(element, xi);
        let t = g.jac.map(|row| row[edge.free_dir()]);
        let len = norm(&t);
        ([t[0] / len, t[1] / len, t[2] / len], len, g.x)
    }

    /// Face area (length in 2D, 1 in 1D) by quadrature.
    pub fn face_measure(&self, face: Face) -> f64 {
        let rule = self.face_rule(face);
        let mut total = 0.0;
        for e in self.face_elements(face) {
            for (xi, w) in self.face_quadrature_points(face, e, &rule) {
                total += w * self.face_point(face, e, &xi).measure;
            }
        }
        total
    }

    /// Edge length by quadrature.
    pub fn edge_measure(&self, edge: Edge) -> f64 {
        let rule = self.edge_rule(edge);
        let mut total = 0.0;
        for e in self.edge_elements(edge) {
            for (xi, w) in self.edge_quadrature_points(edge, e, &rule) {
                total += w * self.edge_point(edge, e, &xi).1;
            }
        }
        total
    }

    /// Gauss rule over the free directions of a face.
    pub fn face_rule(&self, face: Face) -> QuadratureRule {
        let orders: Vec<usize> = (0..self.dim)
            .filter(|&d| d != face.dir)
            .map(|d| self.knots[d].degree() + 1)
            .collect();
        QuadratureRule::tensor(&orders)
    }

    pub fn edge_rule(&self, edge: Edge) -> QuadratureRule {
        QuadratureRule::tensor(&[self.knots[edge.free_dir()].degree() + 1])
    }

    /// Parametric points and weights (including the parametric scale) of a
    /// face rule on one element.
    pub fn face_quadrature_points(&self, face: Face, element: &Element, rule: &QuadratureRule) -> Vec<([f64; 3], f64)> {
        let free: Vec<usize> = (0..self.dim).filter(|&d| d != face.dir).collect();
        let pinned = self.face_coordinate(face);
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(t, w)| {
                let mut xi = [0.0; 3];
                let mut scale = 1.0;
                for (k, &d) in free.iter().enumerate() {
                    let half = 0.5 * (element.hi[d] - element.lo[d]);
                    xi[d] = element.lo[d] + (t[k] + 1.0) * half;
                    scale *= half;
                }
                xi[face.dir] = pinned;
                (xi, w * scale)
            })
            .collect()
    }

    pub fn edge_quadrature_points(&self, edge: Edge, element: &Element, rule: &QuadratureRule) -> Vec<([f64; 3], f64)> {
        let d = edge.free_dir();
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(t, w)| {
                let mut xi = [0.0; 3];
                let half = 0.5 * (element.hi[d] - element.lo[d]);
                xi[d] = element.lo[d] + (t[0] + 1.0) * half;
                for f in edge.faces {
                    xi[f.dir] = self.face_coordinate(f);
                }
                (xi, w * half)
            })
            .collect()
    }
}

/// Evaluation of a face at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacePoint {
    pub x: [f64; 3],
    pub normal: [f64; 3],
    /// Surface measure per unit parametric area.
    pub measure: f64,
    /// Extent of the adjacent element along the normal.
    pub thickness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Min,
    Max,
}

/// Face of the parametric box where direction `dir` is pinned to one end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Face {
    pub dir: usize,
    pub side: Side,
}

impl Face {
    const AXES: [char; 3] = ['x', 'y', 'z'];

    /// Parses `xmin`, `xmax`, `ymin`, ... .
    pub fn parse(name: &str) -> Option<Face> {
        let mut chars = name.chars();
        let axis = chars.next()?;
        let dir = Self::AXES.iter().position(|&c| c == axis)?;
        let side = match chars.as_str() {
            "min" => Side::Min,
            "max" => Side::Max,
            _ => return None,
        };
        Some(Face { dir, side })
    }
}

impl fmt::Display for Face {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = match self.side {
            Side::Min => "min",
            Side::Max => "max",
        };
        write!(f, "{}{}", Self::AXES[self.dir], side)
    }
}

/// Edge shared by two faces with different pinned directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub faces: [Face; 2],
}

impl Edge {
    pub fn new(a: Face, b: Face) -> Edge {
        let mut faces = [a, b];
        faces.sort_by_key(|f| f.dir);
        Edge { faces }
    }

    pub fn free_dir(&self) -> usize {
        3 - self.faces[0].dir - self.faces[1].dir
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.faces[0], self.faces[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryEntity {
    Face(Face),
    Edge(Edge),
}

/// Tensor-product Gauss-Legendre rule on `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn tensor(orders: &[usize]) -> Self {
        let rules: Vec<(Vec<f64>, Vec<f64>)> = orders.iter().map(|&n| gauss_legendre(n)).collect();
        let mut points = vec![[0.0; 3]];
        let mut weights = vec![1.0];
        for (d, (x, w)) in rules.iter().enumerate() {
            let mut np = Vec::with_capacity(points.len() * x.len());
            let mut nw = Vec::with_capacity(points.len() * x.len());
            for k in 0..x.len() {
                for (p, pw) in points.iter().zip(&weights) {
                    let mut q = *p;
                    q[d] = x[k];
                    np.push(q);
                    nw.push(pw * w[k]);
                }
            }
            points = np;
            weights = nw;
        }
        Self { points, weights }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration on the
/// Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "a Gauss rule needs at least one point");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let legendre = |z: f64| {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            (p0, n as f64 * (z * p0 - p1) / (z * z - 1.0))
        };
        for _ in 0..100 {
            let (p, dp) = legendre(z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let dp = legendre(z).1;
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

pub(crate) fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curved_patch() -> PatchGeometry {
        // quadratic 2x2 patch with a bulged interior and a non-unit weight
        let kx = KnotVector::uniform(2, 2, 0.0, 1.0).unwrap();
        let ky = KnotVector::uniform(2, 2, 0.0, 1.0).unwrap();
        let kz = KnotVector::uniform(2, 1, 0.0, 1.0).unwrap();
        let gx = kx.greville();
        let gz = kz.greville();
        let mut cps = Vec::new();
        let mut w = Vec::new();
        for k in 0..3 {
            for j in 0..4 {
                for i in 0..4 {
                    let mut p = [2.0 * gx[i], 1.5 * gx[j], gz[k]];
                    if (i, j) == (1, 2) {
                        p[0] += 0.15;
                        p[1] -= 0.1;
                        p[2] += 0.05;
                    }
                    if (i, j) == (2, 1) {
                        p[2] += 0.1 * gz[k];
                    }
                    cps.push(p);
                    w.push(if (i, j, k) == (2, 2, 1) { 1.3 } else { 1.0 });
                }
            }
        }
        PatchGeometry::new(vec![kx, ky, kz], cps, WeightSet::new(w).unwrap()).unwrap()
    }

    #[test]
    fn gauss_rules() {
        let (x, w) = gauss_legendre(3);
        assert!((w[0] - 5.0 / 9.0).abs() < 1e-15);
        assert!((w[1] - 8.0 / 9.0).abs() < 1e-15);
        assert!((x[2] - (0.6f64).sqrt()).abs() < 1e-15);
        let odd: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(5)).sum();
        assert!(odd.abs() < 1e-15);
        for n in 1..=8 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..2 * n {
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                assert!((q - exact).abs() < 1e-14, "n={n} deg={deg}");
            }
        }
        let r = QuadratureRule::tensor(&[3, 3, 3]);
        assert_eq!(r.points.len(), 27);
        assert!(
            (r.weights.iter().sum::<f64>() - 8.0).abs() < 1e-13,
            "{}",
            r.weights.iter().sum::<f64>()
        );
    }

    #[test]
    fn affine_box_geometry() {
        let g = PatchGeometry::box_patch(&[1.0, 1.0, 1.0], &[2, 3, 2], 2).unwrap();
        assert_eq!(g.elements().len(), 12);
        assert!((g.volume() - 1.0).abs() < 1e-12);
        for e in g.elements() {
            let xi = e.map_reference(3, &[0.3, -0.2, 0.7]);
            let m = g.geometry_map(e, &xi);
            assert!(m.hess.iter().flatten().flatten().all(|v| v.abs() < 1e-12));
            for d in 0..3 {
                assert!((m.x[d] - xi[d]).abs() < 1e-14);
            }
        }
        let bar = PatchGeometry::box_patch(&[3.0], &[1], 2).unwrap();
        let e = &bar.elements()[0];
        for xi in [0.0, 0.3, 1.0] {
            assert!((bar.geometry_map(e, &[xi, 0.0, 0.0]).jac[0][0] - 3.0).abs() < 1e-14);
        }
        let bx = PatchGeometry::box_patch(&[1.0, 2.0, 10.0], &[2, 2, 5], 3).unwrap();
        assert!((bx.volume() - 20.0).abs() < 1e-12 * 20.0);
    }

    #[test]
    fn perturbed_map_matches_direct_summation() {
        let g = curved_patch();
        let kx = &g.knots()[0];
        let grev = kx.greville();
        let xi = [grev[1], grev[2], 0.5];
        let e = g.locate(&xi).unwrap();
        let m = g.geometry_map(e, &xi);
        // direct rational sum over every control point
        let mut num = [0.0; 3];
        let mut den = 0.0;
        let c = g.counts();
        for f in 0..g.control_point_count() {
            let [i, j, k] = g.grid_index(f);
            let b = |d: usize, idx: usize, x: f64| -> f64 {
                let be = g.knots()[d].eval_basis(x, 0).unwrap();
                let local = idx as isize - be.first_index() as isize;
                if (0..be.values.len() as isize).contains(&local) {
                    be.values[local as usize]
                } else {
                    0.0
                }
            };
            let wf = g.weights().as_slice()[f] * b(0, i, xi[0]) * b(1, j, xi[1]) * b(2, k, xi[2]);
            den += wf;
            for d in 0..3 {
                num[d] += wf * g.control_points()[f][d];
            }
        }
        assert_eq!(c, [4, 4, 3]);
        for d in 0..3 {
            assert!((m.x[d] - num[d] / den).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_second_derivatives_scale_with_h() {
        let g = PatchGeometry::box_patch(&[2.0], &[4], 3).unwrap();
        let e = &g.elements()[1];
        let xi = [0.3, 0.0, 0.0];
        let pb = g.physical_basis(e, &xi).unwrap();
        let be = g.knots()[0].eval_basis(0.3, 2).unwrap();
        // physical length 2 on the unit parametric line: d²/dX² = d²/dξ² / 4
        for a in 0..4 {
            assert!((pb.hessians[a][0][0] - be.d2[a] / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isoparametric_consistency() {
        let g = curved_patch();
        for e in g.elements() {
            let xi = e.map_reference(3, &[0.1, -0.4, 0.6]);
            let pb = g.physical_basis(e, &xi).unwrap();
            let mut x = [0.0; 3];
            let mut grad = [[0.0; 3]; 3];
            let mut hess = [[[0.0; 3]; 3]; 3];
            for (a, &f) in pb.functions.iter().enumerate() {
                let cp = g.control_points()[f];
                for i in 0..3 {
                    x[i] += pb.values[a] * cp[i];
                    for j in 0..3 {
                        grad[i][j] += pb.grads[a][j] * cp[i];
                        for k in 0..3 {
                            hess[i][j][k] += pb.hessians[a][j][k] * cp[i];
                        }
                    }
                }
            }
            for i in 0..3 {
                assert!((x[i] - pb.geometry.x[i]).abs() < 1e-13);
                for j in 0..3 {
                    assert!((grad[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                    for k in 0..3 {
                        // X is reproduced, so its second physical gradient vanishes
                        assert!(hess[i][j][k].abs() < 1e-10, "{}", hess[i][j][k]);
                    }
                }
            }
        }
    }

    #[test]
    fn curved_second_derivatives_match_finite_differences() {
        let g = curved_patch();
        let e = &g.elements()[3];
        let xi0 = e.map_reference(3, &[0.2, 0.1, -0.3]);
        let pb = g.physical_basis(e, &xi0).unwrap();
        // Sample N in physical space: solve x(ξ) = X for ξ by Newton, then
        // take central differences of the physical gradient.
        let grad_at = |target: [f64; 3]| -> Vec<[f64; 3]> {
            let mut xi = xi0;
            for _ in 0..50 {
                let m = g.geometry_map(e, &xi);
                let r = [m.x[0] - target[0], m.x[1] - target[1], m.x[2] - target[2]];
                let inv = inv3(&m.jac).unwrap();
                for a in 0..3 {
                    xi[a] -= (0..3).map(|j| inv[a][j] * r[j]).sum::<f64>();
                }
            }
            g.physical_basis(e, &xi).unwrap().grads
        };
        let h = 1e-5;
        for dir in 0..3 {
            let mut xp = pb.geometry.x;
            let mut xm = pb.geometry.x;
            xp[dir] += h;
            xm[dir] -= h;
            let (gp, gm) = (grad_at(xp), grad_at(xm));
            for a in 0..pb.values.len() {
                for j in 0..3 {
                    let fd = (gp[a][j] - gm[a][j]) / (2.0 * h);
                    let an = pb.hessians[a][j][dir];
                    assert!(
                        (fd - an).abs() <= 1e-5 * an.abs().max(1.0),
                        "a={a} j={j} dir={dir}: {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_of_unit_cube() {
        let g = PatchGeometry::box_patch(&[1.0, 1.0, 1.0], &[2, 2, 2], 2).unwrap();
        let b = g.enumerate_boundary();
        let faces: Vec<Face> = b
            .iter()
            .filter_map(|e| {
                if let BoundaryEntity::Face(f) = e {
                    Some(*f)
                } else {
                    None
                }
            })
            .collect();
        let edges: Vec<Edge> = b
            .iter()
            .filter_map(|e| {
                if let BoundaryEntity::Edge(f) = e {
                    Some(*f)
                } else {
                    None
                }
            })
            .collect();
        assert_eq!(faces.len(), 6);
        assert_eq!(edges.len(), 12);
        for f in &faces {
            let e = g.face_elements(*f).next().unwrap();
            let rule = g.face_rule(*f);
            for (xi, _) in g.face_quadrature_points(*f, e, &rule) {
                let fp = g.face_point(*f, e, &xi);
                assert!((norm(&fp.normal) - 1.0).abs() < 1e-14);
                let mut expect = [0.0; 3];
                expect[f.dir] = if f.side == Side::Max { 1.0 } else { -1.0 };
                for d in 0..3 {
                    assert!((fp.normal[d] - expect[d]).abs() < 1e-14);
                }
                assert!((fp.thickness - 0.5).abs() < 1e-14);
            }
            assert!((g.face_measure(*f) - 1.0).abs() < 1e-12);
        }
        let top_right = Edge::new(Face::parse("xmax").unwrap(), Face::parse("zmax").unwrap());
        assert!(edges.contains(&top_right));
        assert_eq!(
            top_right.faces[0],
            Face {
                dir: 0,
                side: Side::Max
            }
        );
        assert_eq!(
            top_right.faces[1],
            Face {
                dir: 2,
                side: Side::Max
            }
        );
        for e in &edges {
            assert!((g.edge_measure(*e) - 1.0).abs() < 1e-12);
        }
        let slab = PatchGeometry::box_patch(&[2.0, 3.0, 0.5], &[2, 3, 1], 2).unwrap();
        let xy = Face::parse("zmax").unwrap();
        assert!((slab.face_measure(xy) - 6.0).abs() < 1e-12);
        let e = Edge::new(Face::parse("xmin").unwrap(), Face::parse("ymax").unwrap());
        assert!((slab.edge_measure(e) - 0.5).abs() < 1e-12);
        assert_eq!(slab.edge_control_points(e).len(), 3);
    }

    #[test]
    fn bar_end_points() {
        let g = PatchGeometry::box_patch(&[4.0], &[3], 2).unwrap();
        let b = g.enumerate_boundary();
        assert_eq!(b.len(), 2);
        for ent in b {
            let BoundaryEntity::Face(f) = ent else { panic!() };
            let e = g.face_elements(f).next().unwrap();
            let xi = [g.face_coordinate(f), 0.0, 0.0];
            let fp = g.face_point(f, e, &xi);
            let expect = if f.side == Side::Min { -1.0 } else { 1.0 };
            assert_eq!(fp.normal[0], expect);
            assert!((fp.thickness - 4.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_inverted_or_inconsistent_patches() {
        let kv = KnotVector::uniform(1, 1, 0.0, 1.0).unwrap();
        let cps = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(matches!(
            PatchGeometry::new(vec![kv.clone()], cps, WeightSet::uniform(2)),
            Err(Error::ElementInversion { .. })
        ));
        assert!(PatchGeometry::new(vec![kv], vec![[0.0; 3]], WeightSet::uniform(1)).is_err());
    }

    #[test]
    fn face_names_round_trip() {
        for n in ["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"] {
            assert_eq!(Face::parse(n).unwrap().to_string(), n);
        }
        assert!(Face::parse("wmin").is_none());
        assert!(Face::parse("xmid").is_none());
    }
}
