//! Global residual and Jacobian of the gradient-elastic weak form.
//!
//! The discrete equations for every free control-point dof `(a, i)` read
//!
//! ```text
//! R_ai = ∫ (P_iJ N_a,J + B_iJK N_a,JK) dV
//!      − ∫ N_a T_i dS − ∫ DN_a M_i dS − ∫ N_a L_i dC
//!      − ∫ DN_a B_iJK N_J N_K dS + (C/h) ∫ DN_a (Du_i − m̄_i) dS
//! ```
//!
//! where `D = N_J ∂/∂X_J` is the normal derivative on a face and the last two
//! terms appear only on faces carrying a weak `Du` condition. Displacement
//! conditions are imposed strongly on boundary control points.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::kinematics::{compute_kinematics, zero_mat, zero_tens, Mat3, StrainMode, Tens3};
use crate::material::{stresses, MaterialParams};
use crate::mesh::{BoundaryEntity, Edge, Element, Face, PatchGeometry, PhysicalBasis};

/// Default penalty constant of weak `Du` conditions.
pub const DEFAULT_PENALTY: f64 = 5.0;

/// Index pairs `(J, K)`, `J ≤ K`, of a symmetric second gradient.
pub const SYM_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcKind {
    /// Prescribed displacement `ū_i`, imposed on control points.
    DirichletU,
    /// Prescribed normal derivative `m̄_i`, imposed weakly with a penalty.
    DirichletDu,
    Traction,
    Moment,
    LineTraction,
}

/// Boundary datum: a constant or an affine function of the reference position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BcValue {
    Constant(f64),
    Affine {
        #[serde(default)]
        constant: f64,
        gradient: [f64; 3],
    },
}

impl BcValue {
    pub fn at(&self, x: &[f64; 3]) -> f64 {
        match *self {
            BcValue::Constant(v) => v,
            BcValue::Affine { constant, gradient } => {
                constant + gradient[0] * x[0] + gradient[1] * x[1] + gradient[2] * x[2]
            }
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            BcValue::Constant(v) => v.is_finite(),
            BcValue::Affine { constant, gradient } => constant.is_finite() && gradient.iter().all(|g| g.is_finite()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryCondition {
    pub target: BoundaryEntity,
    pub component: usize,
    pub kind: BcKind,
    pub value: BcValue,
    /// Penalty constant `C` for [`BcKind::DirichletDu`].
    pub penalty: f64,
}

impl BoundaryCondition {
    pub fn new(target: BoundaryEntity, component: usize, kind: BcKind, value: BcValue) -> Self {
        Self {
            target,
            component,
            kind,
            value,
            penalty: DEFAULT_PENALTY,
        }
    }

    pub fn on_face(face: &str, component: usize, kind: BcKind, value: f64) -> Result<Self> {
        let f = Face::parse(face).ok_or_else(|| Error::invalid(format!("unknown face `{face}`")))?;
        Ok(Self::new(
            BoundaryEntity::Face(f),
            component,
            kind,
            BcValue::Constant(value),
        ))
    }

    pub fn on_edge(faces: [&str; 2], component: usize, kind: BcKind, value: f64) -> Result<Self> {
        let parse = |n: &str| Face::parse(n).ok_or_else(|| Error::invalid(format!("unknown face `{n}`")));
        let (a, b) = (parse(faces[0])?, parse(faces[1])?);
        if a.dir == b.dir {
            return Err(Error::invalid(format!("faces {a} and {b} do not share an edge")));
        }
        Ok(Self::new(
            BoundaryEntity::Edge(Edge::new(a, b)),
            component,
            kind,
            BcValue::Constant(value),
        ))
    }

    pub fn with_penalty(mut self, c: f64) -> Self {
        self.penalty = c;
        self
    }
}

/// Compressed sparse column matrix with sorted row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Empty pattern from sorted, deduplicated row sets per column.
    pub fn from_pattern(columns: &[Vec<usize>]) -> Self {
        let n = columns.len();
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        for col in columns {
            row_idx.extend_from_slice(col);
            col_ptr.push(row_idx.len());
        }
        let nnz = row_idx.len();
        Self {
            n,
            col_ptr,
            row_idx,
            values: vec![0.0; nnz],
        }
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let n = a.len();
        let cols: Vec<Vec<usize>> = (0..n).map(|c| (0..n).filter(|&r| a[r][c] != 0.0).collect()).collect();
        let mut m = Self::from_pattern(&cols);
        for c in 0..n {
            for k in m.col_ptr[c]..m.col_ptr[c + 1] {
                m.values[k] = a[m.row_idx[k]][c];
            }
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Storage position of `(row, col)`, if structurally present.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.col_ptr[col];
        let hi = self.col_ptr[col + 1];
        self.row_idx[lo..hi].binary_search(&row).ok().map(|k| lo + k)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.position(row, col).map_or(0.0, |k| self.values[k])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.values[k] * x[c];
            }
        }
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.n]; self.n];
        for c in 0..self.n {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                a[self.row_idx[k]][c] = self.values[k];
            }
        }
        a
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖K − Kᵀ‖_F`; the pattern is assumed symmetric.
    pub fn asymmetry(&self) -> f64 {
        let mut s = 0.0;
        for c in 0..self.n {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[k];
                let d = self.values[k] - self.get(c, r);
                s += d * d;
            }
        }
        s.sqrt()
    }
}

/// Displacement field data at a point.
#[derive(Debug, Clone, Copy)]
pub struct FieldSample<T> {
    pub x: [f64; 3],
    pub u: [T; 3],
    pub grad_u: Mat3<T>,
    pub grad_grad_u: Tens3<T>,
}

/// Face quadrature point with the adjacent element's basis.
#[derive(Debug, Clone)]
struct FaceQp {
    basis: PhysicalBasis,
    weight: f64,
    normal: [f64; 3],
    thickness: f64,
}

/// The discrete boundary value problem and its assembly context.
#[derive(Debug, Clone)]
pub struct NonlinearSystem {
    geometry: PatchGeometry,
    material: MaterialParams,
    mode: StrainMode,
    bcs: Vec<BoundaryCondition>,
    ncomp: usize,
    /// Full-load prescribed values of constrained dofs.
    prescribed: Vec<Option<f64>>,
    /// Scales loads and boundary data.
    load_factor: f64,
    pub u: Vec<f64>,
    pattern: SparseMatrix,
    pool: Arc<rayon::ThreadPool>,
}

impl NonlinearSystem {
    pub fn new(
        geometry: PatchGeometry,
        material: MaterialParams,
        mode: StrainMode,
        bcs: Vec<BoundaryCondition>,
    ) -> Result<Self> {
        material.validate()?;
        let ncomp = geometry.dim();
        validate_bcs(&bcs, ncomp)?;
        let ndof = geometry.control_point_count() * ncomp;

        let mut prescribed = vec![None; ndof];
        for bc in bcs.iter().filter(|b| b.kind == BcKind::DirichletU) {
            let cps = match bc.target {
                BoundaryEntity::Face(f) => geometry.face_control_points(f),
                BoundaryEntity::Edge(e) => geometry.edge_control_points(e),
            };
            for cp in cps {
                prescribed[cp * ncomp + bc.component] = Some(bc.value.at(&geometry.control_points()[cp]));
            }
        }

        let mut columns: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); ndof];
        for e in geometry.elements() {
            let dofs = element_dofs(&geometry.element_functions(e), ncomp);
            for &c in &dofs {
                columns[c].extend(dofs.iter().copied());
            }
        }
        let columns: Vec<Vec<usize>> = columns.into_iter().map(|s| s.into_iter().collect()).collect();
        let pattern = SparseMatrix::from_pattern(&columns);

        let mut system = Self {
            geometry,
            material,
            mode,
            bcs,
            ncomp,
            prescribed,
            load_factor: 1.0,
            u: vec![0.0; ndof],
            pattern,
            pool: Arc::new(thread_pool()?),
        };
        system.apply_constraints();
        Ok(system)
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn material(&self) -> &MaterialParams {
        &self.material
    }

    pub fn mode(&self) -> StrainMode {
        self.mode
    }

    pub fn bcs(&self) -> &[BoundaryCondition] {
        &self.bcs
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn ndof(&self) -> usize {
        self.u.len()
    }

    pub fn load_factor(&self) -> f64 {
        self.load_factor
    }

    /// Sets the load factor and moves constrained dofs to their scaled values.
    pub fn set_load_factor(&mut self, lf: f64) {
        self.load_factor = lf;
        self.apply_constraints();
    }

    pub fn is_constrained(&self, dof: usize) -> bool {
        self.prescribed[dof].is_some()
    }

    /// Prescribed value of a constrained dof at the current load factor.
    pub fn prescribed_value(&self, dof: usize) -> Option<f64> {
        self.prescribed[dof].map(|v| v * self.load_factor)
    }

    pub fn apply_constraints(&mut self) {
        for (d, p) in self.prescribed.iter().enumerate() {
            if let Some(v) = p {
                self.u[d] = v * self.load_factor;
            }
        }
    }

    /// Sets the displacement of every control point from a function of its
    /// reference position, then re-applies the constraints.
    pub fn set_initial_guess(&mut self, f: impl Fn(&[f64; 3]) -> [f64; 3]) {
        for cp in 0..self.geometry.control_point_count() {
            let v = f(&self.geometry.control_points()[cp]);
            for i in 0..self.ncomp {
                self.u[cp * self.ncomp + i] = v[i];
            }
        }
        self.apply_constraints();
    }

    /// Global dof indices of an element in local order `a * ncomp + i`.
    pub fn element_dofs(&self, element: &Element) -> Vec<usize> {
        element_dofs(&self.geometry.element_functions(element), self.ncomp)
    }

    pub fn gather(&self, element: &Element, u: &[f64]) -> Vec<f64> {
        self.element_dofs(element).iter().map(|&d| u[d]).collect()
    }

    /// Volume quadrature points of an element with weights including `det J`.
    fn volume_points(&self, element: &Element) -> Result<Vec<(PhysicalBasis, f64)>> {
        let dim = self.geometry.dim();
        let rule = self.geometry.volume_rule();
        let scale = element.reference_scale(dim);
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(t, w)| {
                let xi = element.map_reference(dim, t);
                let pb = self.geometry.physical_basis(element, &xi)?;
                let wt = w * scale * pb.det;
                Ok((pb, wt))
            })
            .collect()
    }

    fn face_points(&self, element: &Element, face: Face) -> Result<Vec<FaceQp>> {
        let rule = self.geometry.face_rule(face);
        self.geometry
            .face_quadrature_points(face, element, &rule)
            .into_iter()
            .map(|(xi, w)| {
                let fp = self.geometry.face_point(face, element, &xi);
                let basis = self.geometry.physical_basis(element, &xi)?;
                Ok(FaceQp {
                    basis,
                    weight: w * fp.measure,
                    normal: fp.normal,
                    thickness: fp.thickness,
                })
            })
            .collect()
    }

    /// Faces of the patch boundary touched by an element that carry BCs
    /// evaluated by quadrature.
    fn element_faces(&self, element: &Element) -> Vec<Face> {
        let mut faces: Vec<Face> = Vec::new();
        for bc in &self.bcs {
            if let BoundaryEntity::Face(f) = bc.target {
                if matches!(bc.kind, BcKind::DirichletU) || faces.contains(&f) {
                    continue;
                }
                if self.geometry.face_elements(f).any(|e| e.id == element.id) {
                    faces.push(f);
                }
            }
        }
        faces
    }

    fn element_edges(&self, element: &Element) -> Vec<Edge> {
        let mut edges: Vec<Edge> = Vec::new();
        for bc in &self.bcs {
            if let (BoundaryEntity::Edge(e), BcKind::LineTraction) = (bc.target, bc.kind) {
                if !edges.contains(&e) && self.geometry.edge_elements(e).any(|x| x.id == element.id) {
                    edges.push(e);
                }
            }
        }
        edges
    }

    /// Interpolated displacement and its first two gradients.
    pub fn sample<T: Scalar>(&self, basis: &PhysicalBasis, local_u: &[T]) -> FieldSample<T> {
        interpolate(basis, local_u, self.ncomp)
    }

    /// Volume contribution `∫ (P_iJ N_a,J + B_iJK N_a,JK) dV` for one element.
    pub fn element_residual<T: Scalar>(&self, element: &Element, local_u: &[T]) -> Result<Vec<T>> {
        let qps = self.volume_points(element)?;
        self.volume_residual(element, &qps, local_u)
    }

    fn volume_residual<T: Scalar>(
        &self,
        element: &Element,
        qps: &[(PhysicalBasis, f64)],
        local_u: &[T],
    ) -> Result<Vec<T>> {
        let nc = self.ncomp;
        let mut r = vec![T::zero(); local_u.len()];
        for (pb, wt) in qps {
            let s = interpolate(pb, local_u, nc);
            let kin = compute_kinematics(&s.grad_u, &s.grad_grad_u, self.mode).map_err(|e| tag_element(e, element))?;
            let st = stresses(&kin, &self.material);
            for a in 0..pb.values.len() {
                let g = &pb.grads[a];
                let h = &pb.hessians[a];
                for i in 0..nc {
                    let mut v = T::zero();
                    for j in 0..3 {
                        v += st.p[i][j] * g[j];
                        for k in 0..3 {
                            v += st.b[i][j][k] * h[j][k];
                        }
                    }
                    r[a * nc + i] += v * *wt;
                }
            }
        }
        Ok(r)
    }

    /// Traction, moment and weak `Du` contributions of one face to an element.
    pub fn face_terms<T: Scalar>(&self, element: &Element, face: Face, local_u: &[T]) -> Result<Vec<T>> {
        let qps = self.face_points(element, face)?;
        self.face_residual(element, face, &qps, local_u)
    }

    fn face_residual<T: Scalar>(&self, element: &Element, face: Face, qps: &[FaceQp], local_u: &[T]) -> Result<Vec<T>> {
        let nc = self.ncomp;
        let lf = self.load_factor;
        let mut r = vec![T::zero(); local_u.len()];
        let bcs: Vec<&BoundaryCondition> = self
            .bcs
            .iter()
            .filter(|b| b.target == BoundaryEntity::Face(face) && b.kind != BcKind::DirichletU)
            .collect();
        let needs_stress = bcs.iter().any(|b| b.kind == BcKind::DirichletDu);
        for qp in qps {
            let pb = &qp.basis;
            let x = pb.geometry.x;
            let dn: Vec<f64> = pb.grads.iter().map(|g| dot3(g, &qp.normal)).collect();
            let mut bnn = [T::zero(); 3];
            let mut du = [T::zero(); 3];
            if needs_stress {
                let s = interpolate(pb, local_u, nc);
                let kin =
                    compute_kinematics(&s.grad_u, &s.grad_grad_u, self.mode).map_err(|e| tag_element(e, element))?;
                let st = stresses(&kin, &self.material);
                for i in 0..nc {
                    for j in 0..3 {
                        du[i] += s.grad_u[i][j] * qp.normal[j];
                        for k in 0..3 {
                            bnn[i] += st.b[i][j][k] * (qp.normal[j] * qp.normal[k]);
                        }
                    }
                }
            }
            for bc in &bcs {
                let i = bc.component;
                let val = bc.value.at(&x) * lf;
                match bc.kind {
                    BcKind::Traction => {
                        for a in 0..pb.values.len() {
                            r[a * nc + i] -= T::from_f64(pb.values[a] * val * qp.weight);
                        }
                    }
                    BcKind::Moment => {
                        for a in 0..pb.values.len() {
                            r[a * nc + i] -= T::from_f64(dn[a] * val * qp.weight);
                        }
                    }
                    BcKind::DirichletDu => {
                        let pen = bc.penalty / qp.thickness;
                        let flux = (du[i] - val) * pen - bnn[i];
                        for a in 0..pb.values.len() {
                            r[a * nc + i] += flux * (dn[a] * qp.weight);
                        }
                    }
                    BcKind::DirichletU | BcKind::LineTraction => {}
                }
            }
        }
        Ok(r)
    }

    /// Line-load work `−∫ N_a L_i dC` of one edge on an element.
    pub fn edge_terms(&self, element: &Element, edge: Edge) -> Vec<f64> {
        let nc = self.ncomp;
        let nloc = self.geometry.local_count() * nc;
        let mut r = vec![0.0; nloc];
        let rule = self.geometry.edge_rule(edge);
        for (xi, w) in self.geometry.edge_quadrature_points(edge, element, &rule) {
            let (_, measure, x) = self.geometry.edge_point(edge, element, &xi);
            let pb = self
                .geometry
                .physical_basis(element, &xi)
                .expect("patch validated at construction");
            for bc in self
                .bcs
                .iter()
                .filter(|b| b.target == BoundaryEntity::Edge(edge) && b.kind == BcKind::LineTraction)
            {
                let val = bc.value.at(&x) * self.load_factor;
                for a in 0..pb.values.len() {
                    r[a * nc + bc.component] -= pb.values[a] * val * w * measure;
                }
            }
        }
        r
    }

    /// Full elemental residual: volume, face and edge terms.
    pub fn local_residual<T: Scalar>(&self, element: &Element, local_u: &[T]) -> Result<Vec<T>> {
        let mut r = self.element_residual(element, local_u)?;
        for f in self.element_faces(element) {
            for (ri, fi) in r.iter_mut().zip(self.face_terms(element, f, local_u)?) {
                *ri += fi;
            }
        }
        for e in self.element_edges(element) {
            for (ri, ei) in r.iter_mut().zip(self.edge_terms(element, e)) {
                *ri = *ri + ei;
            }
        }
        Ok(r)
    }

    /// Dense elemental Jacobian by seeding every local dof (`N` must equal
    /// the local dof count).
    pub fn element_jacobian_ad<const N: usize>(&self, element: &Element, local_u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let lifted = crate::autodiff::lift::<N>(local_u)?;
        let r = self.local_residual(element, &lifted)?;
        crate::autodiff::extract_jacobian(&r, local_u.len())
    }

    /// Elemental residual and (row-major) tangent. The tangent is built from
    /// pointwise derivatives of the generalized stresses with respect to the
    /// displacement gradients.
    pub fn local_tangent(&self, element: &Element, local_u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let nc = self.ncomp;
        let n = local_u.len();
        let qps = self.volume_points(element)?;
        let mut r = self.volume_residual(element, &qps, local_u)?;
        let mut k = vec![0.0; n * n];
        let mlen = if self.material.gradient_modulus() == 0.0 { 3 } else { 9 };
        for (pb, wt) in &qps {
            let s = interpolate(pb, local_u, nc);
            let d = point_tangent(&s.grad_u, &s.grad_grad_u, self.mode, &self.material)
                .map_err(|e| tag_element(e, element))?;
            let g = test_vectors(pb);
            add_volume_tangent(&mut k, &d, &g, *wt, nc, mlen);
        }
        for face in self.element_faces(element) {
            let qps = self.face_points(element, face)?;
            for (ri, fi) in r.iter_mut().zip(self.face_residual(element, face, &qps, local_u)?) {
                *ri += fi;
            }
            for bc in self
                .bcs
                .iter()
                .filter(|b| b.target == BoundaryEntity::Face(face) && b.kind == BcKind::DirichletDu)
            {
                let i = bc.component;
                for qp in &qps {
                    let pb = &qp.basis;
                    let dn: Vec<f64> = pb.grads.iter().map(|g| dot3(g, &qp.normal)).collect();
                    let pen = bc.penalty / qp.thickness * qp.weight;
                    let nloc = pb.values.len();
                    for a in 0..nloc {
                        for b in 0..nloc {
                            k[(a * nc + i) * n + b * nc + i] += pen * dn[a] * dn[b];
                        }
                    }
                    if self.material.gradient_modulus() == 0.0 {
                        continue;
                    }
                    let s = interpolate(pb, local_u, nc);
                    let d = point_tangent(&s.grad_u, &s.grad_grad_u, self.mode, &self.material)
                        .map_err(|e| tag_element(e, element))?;
                    // ∂(B_iJK N_J N_K)/∂q
                    let mut dbnn = [0.0; NQ];
                    for (sidx, &(jj, kk)) in SYM_PAIRS.iter().enumerate() {
                        let nn = qp.normal[jj] * qp.normal[kk];
                        if nn == 0.0 {
                            continue;
                        }
                        for (c, v) in dbnn.iter_mut().enumerate() {
                            *v += nn * d[hess_index(i, sidx)][c];
                        }
                    }
                    let g = test_vectors(pb);
                    for b in 0..nloc {
                        for kc in 0..nc {
                            let mut t = 0.0;
                            for j in 0..3 {
                                t += dbnn[grad_index(kc, j)] * g[b][j];
                            }
                            for sidx in 0..6 {
                                t += dbnn[hess_index(kc, sidx)] * g[b][3 + sidx];
                            }
                            if t == 0.0 {
                                continue;
                            }
                            for a in 0..nloc {
                                k[(a * nc + i) * n + b * nc + kc] -= qp.weight * dn[a] * t;
                            }
                        }
                    }
                }
            }
        }
        for e in self.element_edges(element) {
            for (ri, ei) in r.iter_mut().zip(self.edge_terms(element, e)) {
                *ri += ei;
            }
        }
        Ok((r, k))
    }

    /// Global residual at `u`; constrained entries are zero.
    pub fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        let elements = self.geometry.elements();
        let locals: Vec<Result<Vec<f64>>> = self.pool.install(|| {
            use rayon::prelude::*;
            elements
                .par_iter()
                .map(|e| self.local_residual(e, &self.gather(e, u)))
                .collect()
        });
        let mut r = vec![0.0; self.ndof()];
        for (e, local) in elements.iter().zip(locals) {
            let local = local?;
            for (a, &d) in self.element_dofs(e).iter().enumerate() {
                r[d] += local[a];
            }
        }
        self.zero_constrained(&mut r);
        Ok(r)
    }

    /// Global residual and Jacobian at `u`. Constrained rows and columns are
    /// replaced by identity; their residual entries are zero.
    pub fn assemble(&self, u: &[f64]) -> Result<(Vec<f64>, SparseMatrix)> {
        let elements = self.geometry.elements();
        let mut r = vec![0.0; self.ndof()];
        let mut k = self.pattern.clone();
        const CHUNK: usize = 256;
        for chunk in elements.chunks(CHUNK) {
            let locals: Vec<Result<(Vec<f64>, Vec<f64>)>> = self.pool.install(|| {
                use rayon::prelude::*;
                chunk
                    .par_iter()
                    .map(|e| self.local_tangent(e, &self.gather(e, u)))
                    .collect()
            });
            for (e, local) in chunk.iter().zip(locals) {
                let (lr, lk) = local?;
                let dofs = self.element_dofs(e);
                let n = dofs.len();
                for (a, &ra) in dofs.iter().enumerate() {
                    r[ra] += lr[a];
                }
                for (b, &cb) in dofs.iter().enumerate() {
                    if self.prescribed[cb].is_some() {
                        continue;
                    }
                    let lo = k.col_ptr[cb];
                    let hi = k.col_ptr[cb + 1];
                    for (a, &ra) in dofs.iter().enumerate() {
                        if self.prescribed[ra].is_some() {
                            continue;
                        }
                        let pos = lo + k.row_idx[lo..hi].binary_search(&ra).expect("dof pair in pattern");
                        k.values[pos] += lk[a * n + b];
                    }
                }
            }
        }
        for d in 0..self.ndof() {
            if self.prescribed[d].is_some() {
                let pos = k.position(d, d).expect("diagonal in pattern");
                k.values[pos] = 1.0;
            }
        }
        self.zero_constrained(&mut r);
        Ok((r, k))
    }

    fn zero_constrained(&self, r: &mut [f64]) {
        for (ri, p) in r.iter_mut().zip(&self.prescribed) {
            if p.is_some() {
                *ri = 0.0;
            }
        }
    }
}

fn element_dofs(functions: &[usize], ncomp: usize) -> Vec<usize> {
    functions
        .iter()
        .flat_map(|&f| (0..ncomp).map(move |i| f * ncomp + i))
        .collect()
}

fn tag_element(e: Error, element: &Element) -> Error {
    match e {
        Error::ElementInversion { det, .. } => Error::ElementInversion {
            element: element.id,
            det,
        },
        other => other,
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Worker pool sized by `GRADIGA_THREADS` (all cores when unset).
fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("GRADIGA_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config("GRADIGA_THREADS", format!("expected a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn validate_bcs(bcs: &[BoundaryCondition], ncomp: usize) -> Result<()> {
    for (idx, bc) in bcs.iter().enumerate() {
        let key = |field: &str| format!("bcs[{idx}].{field}");
        if bc.component >= ncomp {
            return Err(Error::config(
                key("component"),
                format!("component {} out of range for a {ncomp}-component field", bc.component),
            ));
        }
        if !bc.value.is_finite() {
            return Err(Error::config(key("value"), "must be finite"));
        }
        let on_edge = matches!(bc.target, BoundaryEntity::Edge(_));
        match bc.kind {
            BcKind::LineTraction if !on_edge => {
                return Err(Error::config(key("kind"), "line_traction attaches only to edges"));
            }
            BcKind::DirichletDu | BcKind::Traction | BcKind::Moment if on_edge => {
                return Err(Error::config(key("kind"), "this condition attaches only to faces"));
            }
            BcKind::DirichletDu if !(bc.penalty > 0.0 && bc.penalty.is_finite()) => {
                return Err(Error::config(key("penalty"), "must be positive"));
            }
            _ => {}
        }
        for (other_idx, other) in bcs.iter().enumerate().take(idx) {
            if other.target != bc.target || other.component != bc.component {
                continue;
            }
            let clash = matches!(
                (other.kind, bc.kind),
                (BcKind::DirichletU, BcKind::Traction)
                    | (BcKind::Traction, BcKind::DirichletU)
                    | (BcKind::DirichletDu, BcKind::Moment)
                    | (BcKind::Moment, BcKind::DirichletDu)
                    | (BcKind::DirichletU, BcKind::DirichletU)
                    | (BcKind::DirichletDu, BcKind::DirichletDu)
            );
            if clash {
                return Err(Error::config(
                    key("kind"),
                    format!("conflicts with bcs[{other_idx}] on the same boundary and component"),
                ));
            }
        }
    }
    Ok(())
}

/// Displacement, gradient and second gradient at a point.
pub fn interpolate<T: Scalar>(pb: &PhysicalBasis, local_u: &[T], ncomp: usize) -> FieldSample<T> {
    let mut u = [T::zero(); 3];
    let mut gu = zero_mat::<T>();
    let mut ggu = zero_tens::<T>();
    for a in 0..pb.values.len() {
        let g = &pb.grads[a];
        let h = &pb.hessians[a];
        for i in 0..ncomp {
            let ua = local_u[a * ncomp + i];
            u[i] += ua * pb.values[a];
            for j in 0..3 {
                gu[i][j] += ua * g[j];
                for k in j..3 {
                    ggu[i][j][k] += ua * h[j][k];
                }
            }
        }
    }
    for row in ggu.iter_mut() {
        for j in 0..3 {
            for k in 0..j {
                row[j][k] = row[k][j];
            }
        }
    }
    FieldSample {
        x: pb.geometry.x,
        u,
        grad_u: gu,
        grad_grad_u: ggu,
    }
}

/// Number of pointwise kinematic unknowns: `u_i,J` and the symmetric `u_i,JK`.
pub const NQ: usize = 27;

pub fn grad_index(i: usize, j: usize) -> usize {
    3 * i + j
}

pub fn hess_index(i: usize, s: usize) -> usize {
    9 + 6 * i + s
}

/// `D = ∂S/∂q` where `q = (u_i,J, u_i,JK for J ≤ K)` and the generalized
/// stress is `S = (P_iJ, c B_iJK)` with `c = 2` on off-diagonal pairs.
pub fn point_tangent(
    grad_u: &Mat3<f64>,
    grad_grad_u: &Tens3<f64>,
    mode: StrainMode,
    material: &MaterialParams,
) -> Result<[[f64; NQ]; NQ]> {
    let mut gu = zero_mat::<Dual<NQ>>();
    let mut ggu = zero_tens::<Dual<NQ>>();
    for i in 0..3 {
        for j in 0..3 {
            gu[i][j] = Dual::variable(grad_u[i][j], grad_index(i, j));
        }
        for (s, &(j, k)) in SYM_PAIRS.iter().enumerate() {
            let v = Dual::variable(grad_grad_u[i][j][k], hess_index(i, s));
            ggu[i][j][k] = v;
            ggu[i][k][j] = v;
        }
    }
    let kin = compute_kinematics(&gu, &ggu, mode)?;
    let st = stresses(&kin, material);
    let mut d = [[0.0; NQ]; NQ];
    for i in 0..3 {
        for j in 0..3 {
            d[grad_index(i, j)] = st.p[i][j].seeds;
        }
        for (s, &(j, k)) in SYM_PAIRS.iter().enumerate() {
            let c = if j == k { 1.0 } else { 2.0 };
            d[hess_index(i, s)] = st.b[i][j][k].seeds.map(|v| c * v);
        }
    }
    Ok(d)
}

/// Per local function: `(N_a,J, N_a,JK over SYM_PAIRS)`.
fn test_vectors(pb: &PhysicalBasis) -> Vec<[f64; 9]> {
    pb.grads
        .iter()
        .zip(&pb.hessians)
        .map(|(g, h)| {
            let mut v = [0.0; 9];
            v[..3].copy_from_slice(g);
            for (s, &(j, k)) in SYM_PAIRS.iter().enumerate() {
                v[3 + s] = h[j][k];
            }
            v
        })
        .collect()
}

/// Adds `wt Gᵀ D G` to the row-major local tangent. `D` is a Hessian, so only
/// the upper triangle is contracted and then mirrored. With `mlen = 3` the
/// hyperstress rows are skipped.
fn add_volume_tangent(k: &mut [f64], d: &[[f64; NQ]; NQ], g: &[[f64; 9]], wt: f64, nc: usize, mlen: usize) {
    let nloc = g.len();
    let n = nloc * nc;
    let idx = |c: usize, m: usize| if m < 3 { grad_index(c, m) } else { hess_index(c, m - 3) };
    // dg[col][i][m] = wt Σ_l D[idx(i,m)][idx(kc,l)] g_b[l]
    let mut dg = vec![[[0.0; 9]; 3]; n];
    for b in 0..nloc {
        for kc in 0..nc {
            let col = &mut dg[b * nc + kc];
            for (i, ci) in col.iter_mut().enumerate().take(nc) {
                for (m, v) in ci.iter_mut().enumerate().take(mlen) {
                    let row = &d[idx(i, m)];
                    let mut s = 0.0;
                    for (l, gl) in g[b].iter().enumerate().take(mlen) {
                        s += row[idx(kc, l)] * gl;
                    }
                    *v = wt * s;
                }
            }
        }
    }
    for col in 0..n {
        for a in 0..nloc {
            let ga = &g[a];
            for i in 0..nc {
                let row = a * nc + i;
                if row > col {
                    break;
                }
                let v = &dg[col][i];
                let mut s = 0.0;
                for m in 0..mlen {
                    s += ga[m] * v[m];
                }
                k[row * n + col] += s;
                if row != col {
                    k[col * n + row] += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn bar(n: usize, p: usize, l: f64, mode: StrainMode) -> NonlinearSystem {
        let g = PatchGeometry::box_patch(&[1.0], &[n], p).unwrap();
        let bcs = vec![
            BoundaryCondition::on_face("xmin", 0, BcKind::DirichletU, 0.0).unwrap(),
            BoundaryCondition::on_face("xmin", 0, BcKind::DirichletDu, 0.0).unwrap(),
            BoundaryCondition::on_face("xmax", 0, BcKind::DirichletDu, 0.0).unwrap(),
            BoundaryCondition::on_face("xmax", 0, BcKind::Traction, 1.0).unwrap(),
        ];
        NonlinearSystem::new(g, MaterialParams::toupin(0.0, 1.0, l), mode, bcs).unwrap()
    }

    fn block(n: [usize; 3], l: f64, weak: bool) -> NonlinearSystem {
        let g = PatchGeometry::box_patch(&[1.0, 1.0, 2.0], &n, 2).unwrap();
        let mut bcs = vec![
            BoundaryCondition::on_face("zmin", 2, BcKind::DirichletU, 0.0).unwrap(),
            BoundaryCondition::on_edge(["xmin", "zmin"], 0, BcKind::DirichletU, 0.0).unwrap(),
            BoundaryCondition::on_edge(["ymin", "zmin"], 1, BcKind::DirichletU, 0.0).unwrap(),
            BoundaryCondition::on_face("zmax", 2, BcKind::Traction, 0.3).unwrap(),
            BoundaryCondition::on_face("zmax", 0, BcKind::Moment, 0.02).unwrap(),
            BoundaryCondition::on_edge(["xmax", "zmax"], 1, BcKind::LineTraction, 0.05).unwrap(),
        ];
        if weak {
            for c in 0..3 {
                bcs.push(BoundaryCondition::on_face("zmin", c, BcKind::DirichletDu, 0.0).unwrap());
            }
            bcs.push(BoundaryCondition::on_face("zmax", 1, BcKind::DirichletDu, 0.01).unwrap());
        }
        NonlinearSystem::new(g, MaterialParams::toupin(1.0, 1.0, l), StrainMode::Finite, bcs).unwrap()
    }

    fn random_u(sys: &NonlinearSystem, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut u: Vec<f64> = (0..sys.ndof()).map(|_| rng.random_range(-scale..scale)).collect();
        for (d, ui) in u.iter_mut().enumerate() {
            if let Some(v) = sys.prescribed_value(d) {
                *ui = v;
            }
        }
        u
    }

    #[test]
    fn stress_free_state_has_zero_residual() {
        let mut sys = block([1, 1, 2], 0.5, true);
        sys.set_load_factor(0.0);
        let r = sys.residual(&vec![0.0; sys.ndof()]).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn point_tangent_matches_element_ad() {
        let sys = block([1, 1, 1], 0.7, true);
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..3 {
            let u = random_u(&sys, 0.05, rng.random());
            let e = &sys.geometry().elements()[0];
            let lu = sys.gather(e, &u);
            let dense = sys.element_jacobian_ad::<81>(e, &lu).unwrap();
            let (r, k) = sys.local_tangent(e, &lu).unwrap();
            let r_plain = sys.local_residual(e, &lu).unwrap();
            let scale = k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for a in 0..81 {
                assert!((r[a] - r_plain[a]).abs() <= 1e-13 * scale.max(1.0));
                for b in 0..81 {
                    assert!((dense[a][b] - k[a * 81 + b]).abs() <= 1e-11 * scale, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let sys = block([1, 1, 2], 0.4, true);
        for seed in 0..20u64 {
            let u = random_u(&sys, 0.03, seed);
            let (_, k) = sys.assemble(&u).unwrap();
            let kd = k.to_dense();
            let h = 1e-6;
            let mut max_rel = 0.0f64;
            let scale = k.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            // a handful of columns per state keeps the test quick
            for c in (seed as usize..sys.ndof()).step_by(37) {
                if sys.is_constrained(c) {
                    continue;
                }
                let mut up = u.clone();
                let mut um = u.clone();
                up[c] += h;
                um[c] -= h;
                let rp = sys.residual(&up).unwrap();
                let rm = sys.residual(&um).unwrap();
                for r in 0..sys.ndof() {
                    let fd = (rp[r] - rm[r]) / (2.0 * h);
                    max_rel = max_rel.max((fd - kd[r][c]).abs() / scale);
                }
            }
            assert!(max_rel <= 1e-6, "seed {seed}: {max_rel}");
        }
    }

    #[test]
    fn value_component_is_bitwise_identical() {
        let sys = bar(2, 2, 0.3, StrainMode::Finite);
        let u = random_u(&sys, 0.1, 5);
        let e = &sys.geometry().elements()[1];
        let lu = sys.gather(e, &u);
        let plain = sys.local_residual(e, &lu).unwrap();
        let dual = sys
            .local_residual(e, &crate::autodiff::lift::<3>(&lu).unwrap())
            .unwrap();
        for (a, b) in plain.iter().zip(&dual) {
            assert_eq!(a.to_bits(), b.value.to_bits());
        }
    }

    #[test]
    fn constant_traction_sums_to_resultant() {
        let g = PatchGeometry::box_patch(&[2.0, 3.0, 1.0], &[2, 3, 1], 2).unwrap();
        let bcs = vec![BoundaryCondition::on_face("zmax", 2, BcKind::Traction, 0.7).unwrap()];
        let sys = NonlinearSystem::new(g, MaterialParams::toupin(1.0, 1.0, 0.0), StrainMode::Finite, bcs).unwrap();
        let r = sys.residual(&vec![0.0; sys.ndof()]).unwrap();
        let total: f64 = r.iter().skip(2).step_by(3).sum();
        assert!((total + 0.7 * 6.0).abs() < 1e-12);
        assert!(r.iter().step_by(3).all(|v| *v == 0.0));
    }

    #[test]
    fn line_load_touches_only_edge_control_points() {
        let g = PatchGeometry::box_patch(&[1.0, 1.0, 1.0], &[2, 2, 2], 2).unwrap();
        let edge = Edge::new(Face::parse("xmax").unwrap(), Face::parse("zmax").unwrap());
        let bcs = vec![BoundaryCondition::new(
            BoundaryEntity::Edge(edge),
            2,
            BcKind::LineTraction,
            BcValue::Constant(1e-5),
        )];
        let sys = NonlinearSystem::new(g, MaterialParams::toupin(1.0, 1.0, 0.1), StrainMode::Finite, bcs).unwrap();
        let r = sys.residual(&vec![0.0; sys.ndof()]).unwrap();
        let on_edge = sys.geometry().edge_control_points(edge);
        let mut total = 0.0;
        for (d, v) in r.iter().enumerate() {
            let cp = d / 3;
            if *v != 0.0 {
                assert!(on_edge.contains(&cp) && d % 3 == 2, "dof {d}");
            }
            total += v;
        }
        assert!((total + 1e-5).abs() < 1e-18);
    }

    #[test]
    fn rigid_translation_is_a_zero_energy_mode() {
        let g = PatchGeometry::box_patch(&[1.0, 1.0, 2.0], &[1, 1, 2], 2).unwrap();
        let mut bcs = Vec::new();
        for c in 0..3 {
            bcs.push(BoundaryCondition::on_face("zmin", c, BcKind::DirichletDu, 0.0).unwrap());
        }
        let sys = NonlinearSystem::new(g, MaterialParams::toupin(1.0, 1.0, 0.8), StrainMode::Finite, bcs).unwrap();
        let u: Vec<f64> = (0..sys.ndof()).map(|d| [0.3, -0.2, 0.5][d % 3]).collect();
        let r = sys.residual(&u).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn symmetric_without_weak_conditions() {
        let sys = block([1, 1, 2], 0.6, false);
        let u = random_u(&sys, 0.05, 11);
        let (_, k) = sys.assemble(&u).unwrap();
        assert!(k.asymmetry() / k.norm() <= 1e-10);
    }

    #[test]
    fn constrained_rows_are_identity() {
        let sys = block([1, 1, 1], 0.2, true);
        let u = random_u(&sys, 0.05, 2);
        let (r, k) = sys.assemble(&u).unwrap();
        for d in 0..sys.ndof() {
            if sys.is_constrained(d) {
                assert_eq!(r[d], 0.0);
                for c in 0..sys.ndof() {
                    assert_eq!(k.get(d, c), if c == d { 1.0 } else { 0.0 });
                    assert_eq!(k.get(c, d), if c == d { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn assembly_is_deterministic() {
        let sys = block([2, 1, 2], 0.5, true);
        let u = random_u(&sys, 0.05, 9);
        let (r1, k1) = sys.assemble(&u).unwrap();
        let (r2, k2) = sys.assemble(&u).unwrap();
        assert!(r1.iter().zip(&r2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(k1
            .values
            .iter()
            .zip(&k2.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn penalty_term_by_hand() {
        // one quadratic element on [0, 1]; u = γ x² gives Du = 2γ at x = 1
        let g = PatchGeometry::box_patch(&[1.0], &[1], 2).unwrap();
        let bcs = vec![BoundaryCondition::on_face("xmax", 0, BcKind::DirichletDu, 0.0).unwrap()];
        let sys = NonlinearSystem::new(g, MaterialParams::toupin(0.0, 1.0, 0.0), StrainMode::Small, bcs).unwrap();
        let gamma = 0.01;
        // Bernstein coefficients of x²: (0, 0, 1)
        let u = [0.0, 0.0, gamma];
        let e = &sys.geometry().elements()[0];
        let face = Face::parse("xmax").unwrap();
        let f = sys.face_terms(e, face, &u).unwrap();
        // DN at x = 1 for the Bernstein basis: (0, -2, 2), h = 1
        let expect = [0.0, -2.0 * 5.0 * 2.0 * gamma, 2.0 * 5.0 * 2.0 * gamma];
        for a in 0..3 {
            assert!((f[a] - expect[a]).abs() < 1e-15, "{a}: {} vs {}", f[a], expect[a]);
        }
    }

    #[test]
    fn bar_internal_force_by_hand() {
        // u = γ x on one element: E = γ + γ²/2, S = 2μE (λ = 0), P = (1+γ) S
        let g = PatchGeometry::box_patch(&[1.0], &[1], 2).unwrap();
        let sys = NonlinearSystem::new(g, MaterialParams::toupin(0.0, 1.0, 0.0), StrainMode::Finite, vec![]).unwrap();
        let gamma = 0.2;
        let u = [0.0, 0.5 * gamma, gamma];
        let r = sys.element_residual(&sys.geometry().elements()[0], &u).unwrap();
        let p = (1.0 + gamma) * 2.0 * (gamma + 0.5 * gamma * gamma);
        // ∫ N_a' dx = N_a(1) - N_a(0)
        let expect = [-p, 0.0, p];
        for a in 0..3 {
            assert!((r[a] - expect[a]).abs() < 1e-14);
        }
    }

    #[test]
    fn conflicting_conditions_are_rejected() {
        let g = PatchGeometry::box_patch(&[1.0, 1.0, 1.0], &[1, 1, 1], 2).unwrap();
        let m = MaterialParams::toupin(1.0, 1.0, 0.1);
        let clash = vec![
            BoundaryCondition::on_face("zmax", 2, BcKind::DirichletU, 0.0).unwrap(),
            BoundaryCondition::on_face("zmax", 2, BcKind::Traction, 1.0).unwrap(),
        ];
        let err = NonlinearSystem::new(g.clone(), m, StrainMode::Finite, clash).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "bcs[1].kind"));
        let clash = vec![
            BoundaryCondition::on_face("zmax", 0, BcKind::Moment, 0.0).unwrap(),
            BoundaryCondition::on_face("zmax", 0, BcKind::DirichletDu, 0.0).unwrap(),
        ];
        assert!(NonlinearSystem::new(g.clone(), m, StrainMode::Finite, clash).is_err());
        let line_on_face = vec![BoundaryCondition::on_face("zmax", 0, BcKind::LineTraction, 1.0).unwrap()];
        assert!(NonlinearSystem::new(g.clone(), m, StrainMode::Finite, line_on_face).is_err());
        let ok = vec![
            BoundaryCondition::on_face("zmax", 0, BcKind::DirichletU, 0.0).unwrap(),
            BoundaryCondition::on_face("zmax", 1, BcKind::Traction, 1.0).unwrap(),
            BoundaryCondition::on_face("zmax", 0, BcKind::DirichletDu, 0.0).unwrap(),
        ];
        assert!(NonlinearSystem::new(g.clone(), m, StrainMode::Finite, ok).is_ok());
        let bad_comp = vec![BoundaryCondition::on_face("zmax", 3, BcKind::Traction, 1.0).unwrap()];
        assert!(matches!(
            NonlinearSystem::new(g, m, StrainMode::Finite, bad_comp),
            Err(Error::Config { key, .. }) if key == "bcs[0].component"
        ));
    }

    #[test]
    fn reference_linearization_is_small_strain_stiffness() {
        let sys_f = block([1, 1, 1], 0.3, false);
        let mut sys_s = sys_f.clone();
        sys_s.mode = StrainMode::Small;
        let z = vec![0.0; sys_f.ndof()];
        let (_, kf) = sys_f.assemble(&z).unwrap();
        let (_, ks) = sys_s.assemble(&z).unwrap();
        for (a, b) in kf.values.iter().zip(&ks.values) {
            assert!((a - b).abs() <= 1e-12 * kf.norm());
        }
    }

    #[test]
    fn bar_fields_are_consistent() {
        let sys = bar(3, 2, 0.5, StrainMode::Small);
        assert_eq!(sys.ndof(), 5);
        assert!(sys.is_constrained(0));
    }
}
