//! Texel-to-surface binding and UV-space rasterization of per-vertex data.

use super::HeadRig;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Barycentric tolerance for "on an edge".
const EDGE_TOL: f64 = 1e-12;

/// For each texel (row-major, row = v, column = u): the face whose UV
/// triangle contains the texel center, and the barycentric coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TexelBinding {
    pub height: usize,
    pub width: usize,
    pub face: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl TexelBinding {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Texel indices of valid texels in row-major order.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    pub fn texel_center(&self, i: usize) -> [f64; 2] {
        let (r, c) = (i / self.width, i % self.width);
        [(c as f64 + 0.5) / self.width as f64, (r as f64 + 0.5) / self.height as f64]
    }

    /// `H x W` validity mask as a tensor of zeros and ones.
    pub fn mask_tensor<T: Scalar>(&self) -> Tensor<T> {
        mask_to_tensor(&self.valid, self.height, self.width)
    }
}

pub(crate) fn mask_to_tensor<T: Scalar>(mask: &[bool], h: usize, w: usize) -> Tensor<T> {
    Tensor::from_parts(vec![h, w], mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect())
}

fn barycentric(p: [f64; 2], t: &[[f64; 2]; 3]) -> [f64; 3] {
    let [a, b, c] = *t;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// Binds texel centers to UV triangles. Centers on a shared edge go to the
/// lower face index; a center strictly inside one triangle and inside another
/// is reported as an overlap.
pub fn bind_uv_triangles(uv: &[[[f64; 2]; 3]], height: usize, width: usize) -> Result<TexelBinding> {
    if height < 8 || width < 8 {
        return Err(Error::Invalid(format!("texel resolution {height}x{width} below 8x8")));
    }
    let n = height * width;
    let mut face = vec![0u32; n];
    let mut bary = vec![[0.0; 3]; n];
    let mut valid = vec![false; n];
    let mut strict = vec![false; n];
    for (f, tri) in uv.iter().enumerate() {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in tri {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let c0 = ((lo[0] * width as f64 - 0.5).floor().max(0.0)) as usize;
        let c1 = ((hi[0] * width as f64 - 0.5).ceil().max(0.0) as usize).min(width - 1);
        let r0 = ((lo[1] * height as f64 - 0.5).floor().max(0.0)) as usize;
        let r1 = ((hi[1] * height as f64 - 0.5).ceil().max(0.0) as usize).min(height - 1);
        if lo[0] > 1.0 || lo[1] > 1.0 || hi[0] < 0.0 || hi[1] < 0.0 {
            continue;
        }
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = [(c as f64 + 0.5) / width as f64, (r as f64 + 0.5) / height as f64];
                let b = barycentric(p, tri);
                if b.iter().any(|&x| x < -EDGE_TOL) {
                    continue;
                }
                let inside_strict = b.iter().all(|&x| x > EDGE_TOL);
                let i = r * width + c;
                if valid[i] {
                    if strict[i] || inside_strict {
                        return Err(Error::Overlap { faces: (face[i] as usize, f), texel: (r, c) });
                    }
                    continue;
                }
                let clamped = b.map(|x| x.max(0.0));
                let s: f64 = clamped.iter().sum();
                valid[i] = true;
                strict[i] = inside_strict;
                face[i] = f as u32;
                bary[i] = clamped.map(|x| x / s);
            }
        }
    }
    Ok(TexelBinding { height, width, face, bary, valid })
}

/// [`bind_uv_triangles`] on a rig's UV layout.
pub fn bind_texels(rig: &HeadRig, height: usize, width: usize) -> Result<TexelBinding> {
    bind_uv_triangles(&rig.uv, height, width)
}

/// A 3-channel UV map with validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct UvMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

impl UvMap {
    /// Channel-first `3 x H x W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let n = self.height * self.width;
        let mut out = vec![T::zero(); 3 * n];
        for (i, v) in self.data.iter().enumerate() {
            for k in 0..3 {
                out[k * n + i] = T::lit(v[k]);
            }
        }
        Tensor::from_parts(vec![3, self.height, self.width], out)
    }
}

impl HeadRig {
    fn check_binding(&self, binding: &TexelBinding) -> Result<()> {
        if binding.valid.iter().zip(&binding.face).any(|(&v, &f)| v && f as usize >= self.faces.len()) {
            return Err(Error::Invalid("binding references faces this rig lacks".into()));
        }
        Ok(())
    }

    /// Barycentric interpolation of per-vertex vectors at every valid texel.
    pub fn uv_position_map(&self, vertices: &[[f64; 3]], binding: &TexelBinding) -> Result<UvMap> {
        if vertices.len() != self.num_vertices() {
            return Err(Error::Invalid(format!("expected {} vertices, got {}", self.num_vertices(), vertices.len())));
        }
        self.check_binding(binding)?;
        let data = (0..binding.len())
            .map(|i| {
                if !binding.valid[i] {
                    return [0.0; 3];
                }
                let f = self.faces[binding.face[i] as usize];
                let b = binding.bary[i];
                let mut p = [0.0; 3];
                for (corner, &v) in f.iter().enumerate() {
                    for k in 0..3 {
                        p[k] += b[corner] * vertices[v as usize][k];
                    }
                }
                p
            })
            .collect();
        Ok(UvMap { height: binding.height, width: binding.width, data, mask: binding.valid.clone() })
    }

    /// Texels bound to a face with at least two vertices in the region.
    pub fn region_mask(&self, name: &str, binding: &TexelBinding) -> Result<Vec<bool>> {
        let set = self.region(name)?;
        self.check_binding(binding)?;
        let mut member = vec![false; self.num_vertices()];
        for &v in set {
            member[v as usize] = true;
        }
        let face_in: Vec<bool> = self.faces.iter().map(|f| f.iter().filter(|&&v| member[v as usize]).count() >= 2).collect();
        Ok((0..binding.len()).map(|i| binding.valid[i] && face_in[binding.face[i] as usize]).collect())
    }

    /// Union of the face, mouth and eye masks.
    pub fn dynamic_mask(&self, binding: &TexelBinding) -> Result<Vec<bool>> {
        let mut out = vec![false; binding.len()];
        for r in super::DYNAMIC_REGIONS {
            for (o, m) in out.iter_mut().zip(self.region_mask(r, binding)?) {
                *o |= m;
            }
        }
        Ok(out)
    }

    /// Row-major `H*W x J` skin weights interpolated at texels (zero rows for invalid texels).
    pub fn texel_skin_weights(&self, binding: &TexelBinding) -> Vec<f64> {
        let nj = self.num_joints();
        let mut out = vec![0.0; binding.len() * nj];
        for i in 0..binding.len() {
            if !binding.valid[i] {
                continue;
            }
            let f = self.faces[binding.face[i] as usize];
            for (corner, &v) in f.iter().enumerate() {
                for (j, w) in self.weights(v as usize).iter().enumerate() {
                    out[i * nj + j] += binding.bary[i][corner] * w;
                }
            }
        }
        out
    }
}
