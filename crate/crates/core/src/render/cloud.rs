//! UV Gaussian maps and their conversion to posed splat clouds.

use nalgebra::Vector3;

use super::GaussianCloud;
use crate::rig::{blend, Blend, ExpressionParams, HeadRig, TexelBinding};
use crate::{Error, Result, Scalar, Tape, Tensor, Var};

/// Per-texel Gaussian attributes, channel-first `C x H x W` tensors:
/// position 3, opacity 1, scale 3, color 3, rotation 4 (w, x, y, z).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMapSet<T> {
    pub position: Tensor<T>,
    pub opacity: Tensor<T>,
    pub scale: Tensor<T>,
    pub color: Tensor<T>,
    pub rotation: Tensor<T>,
}

impl<T: Scalar> GaussianMapSet<T> {
    pub fn height(&self) -> usize {
        self.position.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.position.shape()[2]
    }

    pub fn fields(&self) -> [(&'static str, &Tensor<T>); 5] {
        [("position", &self.position), ("opacity", &self.opacity), ("scale", &self.scale), ("color", &self.color), ("rotation", &self.rotation)]
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for ((name, t), c) in self.fields().into_iter().zip([3, 1, 3, 3, 4]) {
            if t.shape() != [c, h, w] {
                return Err(Error::Shape { op: "gaussian maps", detail: format!("{name} is {:?}, expected {:?}", t.shape(), [c, h, w]) });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> GaussianMapSet<U> {
        GaussianMapSet {
            position: self.position.cast(),
            opacity: self.opacity.cast(),
            scale: self.scale.cast(),
            color: self.color.cast(),
            rotation: self.rotation.cast(),
        }
    }
}

/// Skinning data resolved at the valid texels of a binding.
#[derive(Clone, Debug)]
pub struct TexelSkin {
    pub height: usize,
    pub width: usize,
    /// Flat indices of valid texels, in row-major order.
    pub valid: Vec<usize>,
    /// `M x J` interpolated skin weights.
    pub weights: Vec<f64>,
    /// Per expression, the interpolated blendshape displacement at each valid texel.
    pub expr_basis: Vec<Vec<[f64; 3]>>,
    num_joints: usize,
}

/// Per-texel blended transforms and expression offsets for one pose.
#[derive(Clone, Debug)]
pub struct PosedTexels {
    pub blends: Vec<Blend>,
    pub offset: Vec<[f64; 3]>,
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Matrix `L` with `L r = q * r` for quaternions stored `(w, x, y, z)`.
fn left_mul_matrix(q: [f64; 4]) -> [[f64; 4]; 4] {
    let [w, x, y, z] = q;
    [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
}

impl TexelSkin {
    pub fn new(rig: &HeadRig, binding: &TexelBinding) -> Result<Self> {
        let valid = binding.valid_indices();
        let nj = rig.num_joints();
        let all = rig.texel_skin_weights(binding);
        let weights = valid.iter().flat_map(|&i| all[i * nj..(i + 1) * nj].iter().copied()).collect();
        let expr_basis = rig
            .expr_basis
            .iter()
            .map(|b| rig.uv_position_map(b, binding).map(|m| valid.iter().map(|&i| m.data[i]).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { height: binding.height, width: binding.width, valid, weights, expr_basis, num_joints: nj })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn pose(&self, rig: &HeadRig, expr: &ExpressionParams) -> Result<PosedTexels> {
        let transforms = rig.joint_transforms(expr)?;
        let nj = self.num_joints;
        let blends = (0..self.len()).map(|i| blend(&transforms, &self.weights[i * nj..(i + 1) * nj])).collect();
        let mut offset = vec![[0.0; 3]; self.len()];
        for (basis, &p) in self.expr_basis.iter().zip(&expr.psi) {
            if p == 0.0 {
                continue;
            }
            for (o, d) in offset.iter_mut().zip(basis) {
                for k in 0..3 {
                    o[k] += p * d[k];
                }
            }
        }
        Ok(PosedTexels { blends, offset })
    }

    fn check(&self, maps_hw: (usize, usize)) -> Result<()> {
        if maps_hw != (self.height, self.width) {
            return Err(Error::Shape {
                op: "gather_cloud",
                detail: format!("maps are {:?} but binding is {}x{}", maps_hw, self.height, self.width),
            });
        }
        Ok(())
    }

    /// Valid texels of the maps as a posed cloud.
    pub fn gather(&self, maps: &GaussianMapSet<f64>, posed: &PosedTexels) -> Result<GaussianCloud> {
        maps.check_shapes()?;
        self.check((maps.height(), maps.width()))?;
        let n = maps.height() * maps.width();
        let m = self.len();
        let pick = |t: &Tensor<f64>, c: usize| (0..c).flat_map(|k| self.valid.iter().map(move |&i| t.data()[k * n + i])).collect::<Vec<_>>();
        let mut cloud = GaussianCloud {
            position: pick(&maps.position, 3),
            rotation: pick(&maps.rotation, 4),
            scale: pick(&maps.scale, 3),
            opacity: pick(&maps.opacity, 1),
            color: pick(&maps.color, 3),
        };
        for i in 0..m {
            let b = &posed.blends[i];
            let p = Vector3::new(cloud.position[i], cloud.position[m + i], cloud.position[2 * m + i]) + Vector3::from(posed.offset[i]);
            let v = b.a * p + b.t;
            let r = [0, 1, 2, 3].map(|k| cloud.rotation[k * m + i]);
            let q = quat_mul([b.q.w, b.q.i, b.q.j, b.q.k], r);
            for k in 0..3 {
                cloud.position[k * m + i] = v[k];
            }
            for k in 0..4 {
                cloud.rotation[k * m + i] = q[k];
            }
        }
        Ok(cloud)
    }

    /// Differentiable gather of a `C x H x W` map variable to `C x M`.
    pub fn gather_tape<T: Scalar>(&self, tape: &mut Tape<T>, map: Var) -> Result<Var> {
        let s = tape.shape(map).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape { op: "gather_cloud", detail: format!("map rank {}", s.len()) });
        }
        self.check((s[1], s[2]))?;
        let flat = tape.reshape(map, &[s[0], s[1] * s[2]])?;
        tape.gather(flat, 1, &self.valid)
    }
}

impl PosedTexels {
    /// Differentiable skinning of gathered positions (`3 x M`) and rotations (`4 x M`).
    pub fn apply_tape<T: Scalar>(&self, tape: &mut Tape<T>, position: Var, rotation: Var) -> Result<(Var, Var)> {
        let m = self.blends.len();
        let mut a = vec![T::zero(); 9 * m];
        let mut t = vec![T::zero(); 3 * m];
        let mut l = vec![T::zero(); 16 * m];
        for (i, b) in self.blends.iter().enumerate() {
            let off = b.a * Vector3::from(self.offset[i]) + b.t;
            for r in 0..3 {
                for c in 0..3 {
                    a[(r * 3 + c) * m + i] = T::lit(b.a[(r, c)]);
                }
                t[r * m + i] = T::lit(off[r]);
            }
            let lm = left_mul_matrix([b.q.w, b.q.i, b.q.j, b.q.k]);
            for r in 0..4 {
                for c in 0..4 {
                    l[(r * 4 + c) * m + i] = T::lit(lm[r][c]);
                }
            }
        }
        let a = tape.constant(Tensor::new(vec![3, 3, m], a)?)?;
        let t = tape.constant(Tensor::new(vec![3, m], t)?)?;
        let l = tape.constant(Tensor::new(vec![4, 4, m], l)?)?;
        let ap = tape.mul(a, position)?;
        let ap = tape.sum_axis(ap, 1)?;
        let p = tape.add(ap, t)?;
        let lq = tape.mul(l, rotation)?;
        let q = tape.sum_axis(lq, 1)?;
        Ok((p, q))
    }
}

/// Valid texels of `maps` become splats, skinned to the pose in `expr`.
pub fn gather_cloud(maps: &GaussianMapSet<f64>, binding: &TexelBinding, rig: &HeadRig, expr: &ExpressionParams) -> Result<GaussianCloud> {
    let skin = TexelSkin::new(rig, binding)?;
    let posed = skin.pose(rig, expr)?;
    skin.gather(maps, &posed)
}
