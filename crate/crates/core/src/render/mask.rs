//! Image-space region masks rasterized from posed rig geometry.

use super::Camera;
use crate::rig::{lbs, ExpressionParams, HeadRig};
use crate::Result;

/// `H x W` mask (0 or 1) of pixels whose nearest surface belongs to the mouth region.
pub fn mouth_mask(rig: &HeadRig, expr: &ExpressionParams, cam: &Camera) -> Result<Vec<f64>> {
    region_image_mask(rig, expr, cam, "mouth")
}

pub(crate) fn region_image_mask(rig: &HeadRig, expr: &ExpressionParams, cam: &Camera, region: &str) -> Result<Vec<f64>> {
    let mut member = vec![false; rig.num_vertices()];
    for &v in rig.region(region)? {
        member[v as usize] = true;
    }
    let verts = rig.deform(&expr.psi)?;
    let (posed, _) = lbs(&rig.joint_transforms(expr)?, &verts, None, &rig.skin_weights)?;
    let proj: Vec<Option<([f64; 2], f64)>> = posed.iter().map(|&p| cam.project_point(p)).collect();
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut hit = vec![0.0; w * h];
    for f in &rig.faces {
        let [Some(a), Some(b), Some(c)] = f.map(|v| proj[v as usize]) else { continue };
        let inside = f.iter().filter(|&&v| member[v as usize]).count() >= 2;
        let (pa, pb, pc) = (a.0, b.0, c.0);
        let area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let lo = |k: usize| pa[k].min(pb[k]).min(pc[k]).floor().max(0.0) as usize;
        let hi = |k: usize, n: usize| (pa[k].max(pb[k]).max(pc[k]).ceil().max(0.0) as usize).min(n);
        for y in lo(1)..hi(1, h) {
            for x in lo(0)..hi(0, w) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let e = |p: [f64; 2], q: [f64; 2]| ((q[0] - p[0]) * (py - p[1]) - (q[1] - p[1]) * (px - p[0])) / area;
                let (l0, l1, l2) = (e(pb, pc), e(pc, pa), e(pa, pb));
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let z = l0 * a.1 + l1 * b.1 + l2 * c.1;
                let i = y * w + x;
                if z < depth[i] {
                    depth[i] = z;
                    hit[i] = if inside { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok(hit)
}
