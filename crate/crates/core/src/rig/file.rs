//! Rig container. All integers are `u32` and all reals `f32`, little-endian.
//!
//! ```text
//! magic     8 bytes "UVHRIG\0\0"
//! version   u32 = 1
//! counts    V, F, E, J, R  (vertices, faces, expressions, joints, regions)
//! vertices  V x 3 f32
//! faces     F x 3 u32
//! exprs     E x (name_len u32, name, V x 3 f32)
//! joints    J x (name_len u32, name, parent u32 (0xFFFFFFFF = none), pivot 3 f32)
//! weights   V x J f32
//! uv        F x 3 x 2 f32
//! regions   R x (name_len u32, name, count u32, count x u32 vertex index)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{HeadRig, Joint};
use crate::checkpoint::Reader;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"UVHRIG\0\0";
const NO_PARENT: u32 = u32::MAX;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format("rig", "name is not utf-8"))
}

fn get_f(r: &mut Reader<'_>) -> Result<f64> {
    Ok(r.f32()? as f64)
}

impl HeadRig {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut o = Vec::new();
        o.extend_from_slice(MAGIC);
        put_u32(&mut o, 1);
        for n in [self.vertices.len(), self.faces.len(), self.expr_basis.len(), self.joints.len(), self.regions.len()] {
            put_u32(&mut o, n as u32);
        }
        for v in &self.vertices {
            v.iter().for_each(|&x| put_f32(&mut o, x));
        }
        for f in &self.faces {
            f.iter().for_each(|&i| put_u32(&mut o, i));
        }
        for (name, basis) in self.expr_names.iter().zip(&self.expr_basis) {
            put_str(&mut o, name);
            for d in basis {
                d.iter().for_each(|&x| put_f32(&mut o, x));
            }
        }
        for j in &self.joints {
            put_str(&mut o, &j.name);
            put_u32(&mut o, j.parent.map_or(NO_PARENT, |p| p as u32));
            j.pivot.iter().for_each(|&x| put_f32(&mut o, x));
        }
        self.skin_weights.iter().for_each(|&w| put_f32(&mut o, w));
        for t in &self.uv {
            t.iter().flatten().for_each(|&x| put_f32(&mut o, x));
        }
        for (name, set) in &self.regions {
            put_str(&mut o, name);
            put_u32(&mut o, set.len() as u32);
            set.iter().for_each(|&v| put_u32(&mut o, v));
        }
        o
    }

    /// Parses and validates a rig container.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("rig", "bad magic"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::format("rig", format!("unsupported version {version}")));
        }
        let mut counts = [0usize; 5];
        for c in &mut counts {
            *c = r.u32()? as usize;
        }
        let [nv, nf, ne, nj, nr] = counts;
        let vec3 = |r: &mut Reader<'_>| -> Result<[f64; 3]> { Ok([get_f(r)?, get_f(r)?, get_f(r)?]) };
        let vertices = (0..nv).map(|_| vec3(&mut r)).collect::<Result<Vec<_>>>()?;
        let faces = (0..nf).map(|_| Ok([r.u32()?, r.u32()?, r.u32()?])).collect::<Result<Vec<_>>>()?;
        let mut expr_names = Vec::with_capacity(ne);
        let mut expr_basis = Vec::with_capacity(ne);
        for _ in 0..ne {
            expr_names.push(get_str(&mut r)?);
            expr_basis.push((0..nv).map(|_| vec3(&mut r)).collect::<Result<Vec<_>>>()?);
        }
        let mut joints = Vec::with_capacity(nj);
        for _ in 0..nj {
            let name = get_str(&mut r)?;
            let p = r.u32()?;
            let pivot = vec3(&mut r)?;
            joints.push(Joint { name, parent: (p != NO_PARENT).then_some(p as usize), pivot });
        }
        let skin_weights = (0..nv * nj).map(|_| get_f(&mut r)).collect::<Result<Vec<_>>>()?;
        let uv = (0..nf)
            .map(|_| {
                let mut t = [[0.0; 2]; 3];
                for c in &mut t {
                    *c = [get_f(&mut r)?, get_f(&mut r)?];
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut regions = BTreeMap::new();
        for _ in 0..nr {
            let name = get_str(&mut r)?;
            let n = r.u32()? as usize;
            regions.insert(name, (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("rig", "trailing bytes"));
        }
        let rig = HeadRig { vertices, faces, expr_names, expr_basis, joints, skin_weights, uv, regions };
        rig.validate()?;
        Ok(rig)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use crate::rig::procedural_rig;

    #[test]
    fn shipped_rig_roundtrips_exactly() {
        let rig = procedural_rig(5);
        let back = crate::rig::HeadRig::from_bytes(&rig.to_bytes()).unwrap();
        assert_eq!(back, rig);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = procedural_rig(0).to_bytes();
        assert!(crate::rig::HeadRig::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }
}
