//! Parametric head rig: expression blendshapes, a three-joint skeleton with
//! linear blend skinning, a UV layout and named vertex regions.

mod file;
mod procedural;
mod uv;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

pub use procedural::{procedural_rig, EXPRESSION_NAMES, JAW, NECK, ROOT};
pub use uv::{bind_texels, bind_uv_triangles, TexelBinding, UvMap};

use crate::{Error, Result};

/// Regions every rig must provide.
pub const REGIONS: [&str; 5] = ["face", "mouth", "eyes", "hair", "teeth"];
/// Regions whose Gaussians receive expression-dependent deltas.
pub const DYNAMIC_REGIONS: [&str; 3] = ["face", "mouth", "eyes"];

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rotation center in the rest pose (meters).
    pub pivot: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadRig {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub expr_names: Vec<String>,
    /// `E x V` per-vertex displacements.
    pub expr_basis: Vec<Vec<[f64; 3]>>,
    pub joints: Vec<Joint>,
    /// Row-major `V x J`.
    pub skin_weights: Vec<f64>,
    /// UV coordinates of each face corner, `v` pointing down the UV image.
    pub uv: Vec<[[f64; 2]; 3]>,
    pub regions: BTreeMap<String, Vec<u32>>,
}

/// Expression coefficients and pose.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionParams {
    pub psi: Vec<f64>,
    /// Local joint rotations as unit quaternions `(w, x, y, z)`.
    pub joint_rot: Vec<[f64; 4]>,
    pub global_rot: [f64; 4],
    pub global_trans: [f64; 3],
}

impl ExpressionParams {
    pub fn neutral(n_expr: usize, n_joints: usize) -> Self {
        Self { psi: vec![0.0; n_expr], joint_rot: vec![[1.0, 0.0, 0.0, 0.0]; n_joints], global_rot: [1.0, 0.0, 0.0, 0.0], global_trans: [0.0; 3] }
    }

    pub fn for_rig(rig: &HeadRig) -> Self {
        Self::neutral(rig.num_expr(), rig.joints.len())
    }

    pub fn validate(&self, rig: &HeadRig) -> Result<()> {
        if self.psi.len() != rig.num_expr() {
            return Err(Error::Invalid(format!("expected {} expression coefficients, got {}", rig.num_expr(), self.psi.len())));
        }
        if self.joint_rot.len() != rig.joints.len() {
            return Err(Error::Invalid(format!("expected {} joint rotations, got {}", rig.joints.len(), self.joint_rot.len())));
        }
        for q in self.joint_rot.iter().chain(std::iter::once(&self.global_rot)) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("quaternion {q:?} has norm {n}")));
            }
        }
        Ok(())
    }
}

/// Rotation about an axis, as a `(w, x, y, z)` quaternion.
pub fn axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle);
    [q.w, q.i, q.j, q.k]
}

fn to_unit(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// Rigid transform `x -> r x + t` with the rotation also kept as a quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub q: UnitQuaternion<f64>,
    pub t: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { q: UnitQuaternion::identity(), t: Vector3::zeros() }
    }

    /// Rotation by `q` about `pivot`.
    pub fn about(q: UnitQuaternion<f64>, pivot: Vector3<f64>) -> Self {
        Self { q, t: pivot - q * pivot }
    }

    pub fn rot(&self) -> Matrix3<f64> {
        *self.q.to_rotation_matrix().matrix()
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.q * Vector3::from(p) + self.t;
        [v.x, v.y, v.z]
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self { q: self.q * other.q, t: self.q * other.t + self.t }
    }
}

/// Per-point blended transform produced by skinning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blend {
    /// Weight-blended `3 x 3` linear part (not necessarily a rotation).
    pub a: Matrix3<f64>,
    pub t: Vector3<f64>,
    /// Normalized, sign-aligned blended rotation.
    pub q: UnitQuaternion<f64>,
}

impl HeadRig {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_expr(&self) -> usize {
        self.expr_basis.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn weights(&self, v: usize) -> &[f64] {
        let j = self.joints.len();
        &self.skin_weights[v * j..(v + 1) * j]
    }

    /// Checks structural invariants.
    pub fn validate(&self) -> Result<()> {
        let (nv, nj) = (self.vertices.len(), self.joints.len());
        if self.skin_weights.len() != nv * nj {
            return Err(Error::Invalid("skin weight table size".into()));
        }
        if self.uv.len() != self.faces.len() {
            return Err(Error::Invalid("one UV triangle per face required".into()));
        }
        if self.expr_names.len() != self.expr_basis.len() || self.expr_basis.iter().any(|b| b.len() != nv) {
            return Err(Error::Invalid("blendshape basis size".into()));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= nv) {
                return Err(Error::Invalid(format!("face {i} references a missing vertex")));
            }
            let [a, b, c] = self.uv[i];
            let area = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
            if area.abs() < 1e-12 {
                return Err(Error::Invalid(format!("face {i} has a degenerate UV triangle")));
            }
        }
        for (j, joint) in self.joints.iter().enumerate() {
            if joint.parent.is_some_and(|p| p >= j) {
                return Err(Error::Invalid(format!("joint {j} must come after its parent")));
            }
        }
        for v in 0..nv {
            check_convex(v, self.weights(v))?;
        }
        for (name, set) in &self.regions {
            if set.iter().any(|&v| v as usize >= nv) {
                return Err(Error::Invalid(format!("region {name} references a missing vertex")));
            }
        }
        Ok(())
    }

    /// Template plus the weighted sum of blendshapes (no skinning).
    pub fn deform(&self, psi: &[f64]) -> Result<Vec<[f64; 3]>> {
        if psi.len() != self.num_expr() {
            return Err(Error::Invalid(format!("expected {} expression coefficients, got {}", self.num_expr(), psi.len())));
        }
        let mut out = self.vertices.clone();
        for (w, basis) in psi.iter().zip(&self.expr_basis) {
            if *w == 0.0 {
                continue;
            }
            for (o, d) in out.iter_mut().zip(basis) {
                for k in 0..3 {
                    o[k] += w * d[k];
                }
            }
        }
        Ok(out)
    }

    /// World transform of every joint for a pose. Joint `j` rotates by its
    /// local quaternion about its rest pivot, after its parent's transform;
    /// the global rigid transform is applied last.
    pub fn joint_transforms(&self, expr: &ExpressionParams) -> Result<Vec<RigidTransform>> {
        expr.validate(self)?;
        let global = RigidTransform { q: to_unit(expr.global_rot), t: Vector3::from(expr.global_trans) };
        let mut out: Vec<RigidTransform> = Vec::with_capacity(self.joints.len());
        for (j, joint) in self.joints.iter().enumerate() {
            let local = RigidTransform::about(to_unit(expr.joint_rot[j]), Vector3::from(joint.pivot));
            let parent = joint.parent.map_or(global, |p| out[p]);
            out.push(parent.compose(&local));
        }
        Ok(out)
    }

    pub fn region(&self, name: &str) -> Result<&[u32]> {
        self.regions.get(name).map(Vec::as_slice).ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }

    /// Axis-aligned bounds of the rest template.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Largest side of the rest bounding box.
    pub fn extent(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max)
    }
}

fn check_convex(row: usize, w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&x| x < -1e-6) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NonConvexWeights { vertex: row, sum });
    }
    Ok(())
}

/// Blends joint transforms with one convex weight row. The row is
/// renormalized so rounding in stored weights does not scale points.
pub fn blend(transforms: &[RigidTransform], w: &[f64]) -> Blend {
    let total: f64 = w.iter().sum();
    let lead = (0..w.len()).fold(0, |best, j| if w[j] > w[best] { j } else { best });
    let (r0, t0) = (transforms[lead].rot(), transforms[lead].t);
    // Blending differences from the lead joint keeps coincident joints exact.
    let mut a = r0;
    let mut t = t0;
    let q0 = transforms[lead].q.into_inner();
    let mut q = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for (tr, &wj) in transforms.iter().zip(w) {
        if wj == 0.0 {
            continue;
        }
        let wj = wj / total;
        a += (tr.rot() - r0) * wj;
        t += (tr.t - t0) * wj;
        let qj = tr.q.into_inner();
        let s = if qj.coords.dot(&q0.coords) < 0.0 { -wj } else { wj };
        q += qj * s;
    }
    Blend { a, t, q: UnitQuaternion::new_normalize(q) }
}

/// Linear blend skinning of points (and optionally their orientations).
///
/// `weights` is row-major `M x J`. Each quaternion is left-multiplied by the
/// normalized weighted sum of joint rotations, sign-aligned to the joint with
/// the largest weight.
pub fn lbs(
    transforms: &[RigidTransform],
    points: &[[f64; 3]],
    rotations: Option<&[[f64; 4]]>,
    weights: &[f64],
) -> Result<(Vec<[f64; 3]>, Option<Vec<[f64; 4]>>)> {
    let nj = transforms.len();
    if weights.len() != points.len() * nj {
        return Err(Error::Invalid(format!("weights must be {} x {nj}", points.len())));
    }
    if rotations.is_some_and(|r| r.len() != points.len()) {
        return Err(Error::Invalid("one rotation per point required".into()));
    }
    let mut out_p = Vec::with_capacity(points.len());
    let mut out_q = rotations.map(|r| Vec::with_capacity(r.len()));
    for (i, p) in points.iter().enumerate() {
        let w = &weights[i * nj..(i + 1) * nj];
        check_convex(i, w)?;
        let b = blend(transforms, w);
        let v = b.a * Vector3::from(*p) + b.t;
        out_p.push([v.x, v.y, v.z]);
        if let (Some(rs), Some(oq)) = (rotations, out_q.as_mut()) {
            let q = b.q * to_unit(rs[i]);
            oq.push([q.w, q.i, q.j, q.k]);
        }
    }
    Ok((out_p, out_q))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deform_identity_and_one_hot() {
        let rig = procedural_rig(7);
        let psi = vec![0.0; rig.num_expr()];
        assert_eq!(rig.deform(&psi).unwrap(), rig.vertices);
        let mut one = psi.clone();
        one[2] = 1.0;
        let d = rig.deform(&one).unwrap();
        for (v, (t, b)) in d.iter().zip(rig.vertices.iter().zip(&rig.expr_basis[2])) {
            for k in 0..3 {
                assert_eq!(v[k], t[k] + b[k]);
            }
        }
        assert!(rig.deform(&[0.0]).is_err());
    }

    #[test]
    fn identity_pose_is_identity() {
        let rig = procedural_rig(1);
        let tr = rig.joint_transforms(&ExpressionParams::for_rig(&rig)).unwrap();
        let (p, q) = lbs(&tr, &rig.vertices, Some(&vec![[1.0, 0.0, 0.0, 0.0]; rig.num_vertices()]), &rig.skin_weights).unwrap();
        for (a, b) in p.iter().zip(&rig.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-15);
            }
        }
        assert!(q.unwrap().iter().all(|q| (q[0] - 1.0).abs() < 1e-15));
    }

    #[test]
    fn one_hot_weight_applies_that_joint() {
        let rig = procedural_rig(1);
        let mut e = ExpressionParams::for_rig(&rig);
        e.joint_rot[JAW] = axis_angle([1.0, 0.0, 0.0], 0.3);
        e.joint_rot[NECK] = axis_angle([0.0, 1.0, 0.0], -0.2);
        e.global_trans = [0.01, 0.02, -0.03];
        let tr = rig.joint_transforms(&e).unwrap();
        let p = [0.01, -0.05, 0.07];
        for j in 0..3 {
            let mut w = vec![0.0; 3];
            w[j] = 1.0;
            let (out, _) = lbs(&tr, &[p], None, &w).unwrap();
            let direct = tr[j].rot() * Vector3::from(p) + tr[j].t;
            for k in 0..3 {
                assert!((out[0][k] - direct[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_non_convex_weights() {
        let tr = vec![RigidTransform::identity(); 2];
        assert!(matches!(lbs(&tr, &[[0.0; 3]], None, &[0.7, 0.7]), Err(Error::NonConvexWeights { .. })));
        assert!(lbs(&tr, &[[0.0; 3]], None, &[1.2, -0.2]).is_err());
    }

    #[test]
    fn procedural_rig_is_valid() {
        let rig = procedural_rig(3);
        rig.validate().unwrap();
        assert!((500..=800).contains(&rig.num_vertices()));
        assert!((8..=16).contains(&rig.num_expr()));
        assert_eq!(rig.num_joints(), 3);
        for r in REGIONS {
            assert!(!rig.region(r).unwrap().is_empty(), "{r}");
        }
    }
}
