//! Projection, depth-sorted compositing and its exact adjoint.
//!
//! All arithmetic is carried out in `f64` whatever the storage precision.

use super::{Camera, CloudView};
use crate::par;

/// Added to the diagonal of every projected covariance (pixels squared).
pub const BLUR: f64 = 0.3;
/// Splats are evaluated inside a box of this many standard deviations per axis.
pub const CUTOFF_SIGMA: f64 = 3.0;
/// Contributions with smaller effective opacity are skipped.
pub const ALPHA_MIN: f64 = 1e-4;
/// Compositing stops once transmittance falls below this value.
pub const T_MIN: f64 = 1e-4;
/// Tile edge used by the binned path.
pub const TILE: usize = 16;

/// How pixels find their candidate splats. Both modes produce bit-identical
/// frames; `Binned` only restricts each pixel's candidate list to splats whose
/// box overlaps the pixel's tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RasterMode {
    Exact,
    #[default]
    Binned,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Splat2d {
    pub mean: [f64; 2],
    /// Inverse covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub cov: [f64; 3],
    pub depth: f64,
    pub radius: [f64; 2],
    pub visible: bool,
}

type M3 = [[f64; 3]; 3];

fn matmul3(a: &M3, b: &M3) -> M3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

fn transpose3(a: &M3) -> M3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[j][i];
        }
    }
    o
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)` (the polynomial form;
/// non-unit inputs are not renormalized).
pub fn quat_to_mat(q: [f64; 4]) -> M3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn quat_grad(q: [f64; 4], g: &M3) -> [f64; 4] {
    let [w, x, y, z] = q;
    [
        2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]),
        2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1] - 2.0 * x * g[2][2]),
        2.0 * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1] - 2.0 * y * g[2][2]),
        2.0 * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1] + y * g[1][2] + x * g[2][0] + y * g[2][1]),
    ]
}

struct Geometry {
    t: [f64; 3],
    j: [[f64; 3]; 2],
    r: M3,
    sigma_c: M3,
}

fn geometry(cloud: &CloudView<'_>, cam: &Camera, i: usize) -> Geometry {
    let p = cloud.position(i);
    let t = cam.to_camera(p);
    let r = quat_to_mat(cloud.rotation(i));
    let s = cloud.scale(i);
    let mut sigma3 = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            sigma3[a][b] = (0..3).map(|k| r[a][k] * s[k] * s[k] * r[b][k]).sum();
        }
    }
    let sigma_c = matmul3(&matmul3(&cam.rot, &sigma3), &transpose3(&cam.rot));
    let z = t[2];
    let j = [[cam.fx / z, 0.0, -cam.fx * t[0] / (z * z)], [0.0, cam.fy / z, -cam.fy * t[1] / (z * z)]];
    Geometry { t, j, r, sigma_c }
}

/// Projects every splat. Splats at or behind the near plane are culled.
pub fn project(cloud: &CloudView<'_>, cam: &Camera) -> Vec<Splat2d> {
    par::map_range(cloud.len(), |i| {
        let p = cam.to_camera(cloud.position(i));
        if p[2] <= cam.near {
            return Splat2d::default();
        }
        let g = geometry(cloud, cam, i);
        let mut cov = [0.0; 3];
        let js = |r: usize, c: usize| (0..3).map(|k| (0..3).map(|l| g.j[r][k] * g.sigma_c[k][l] * g.j[c][l]).sum::<f64>()).sum::<f64>();
        cov[0] = js(0, 0) + BLUR;
        cov[1] = js(0, 1);
        cov[2] = js(1, 1) + BLUR;
        let det = cov[0] * cov[2] - cov[1] * cov[1];
        if !(det > 0.0) || !det.is_finite() {
            return Splat2d::default();
        }
        Splat2d {
            mean: [cam.fx * g.t[0] / g.t[2] + cam.cx, cam.fy * g.t[1] / g.t[2] + cam.cy],
            conic: [cov[2] / det, -cov[1] / det, cov[0] / det],
            cov,
            depth: g.t[2],
            radius: [CUTOFF_SIGMA * cov[0].sqrt(), CUTOFF_SIGMA * cov[2].sqrt()],
            visible: true,
        }
    })
}

/// Visible splat indices in compositing order: depth, then index.
pub fn depth_order(splats: &[Splat2d]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).filter(|&i| splats[i as usize].visible).collect();
    order.sort_by(|&a, &b| splats[a as usize].depth.total_cmp(&splats[b as usize].depth).then(a.cmp(&b)));
    order
}

#[derive(Clone, Copy)]
struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn tiles(cam: &Camera, mode: RasterMode) -> Vec<Tile> {
    let edge = match mode {
        RasterMode::Exact => cam.width.max(cam.height),
        RasterMode::Binned => TILE,
    };
    let mut out = Vec::new();
    for y0 in (0..cam.height).step_by(edge) {
        for x0 in (0..cam.width).step_by(edge) {
            out.push(Tile { x0, y0, x1: (x0 + edge).min(cam.width), y1: (y0 + edge).min(cam.height) });
        }
    }
    out
}

fn tile_list(tile: &Tile, order: &[u32], splats: &[Splat2d], mode: RasterMode) -> Vec<u32> {
    if mode == RasterMode::Exact {
        return order.to_vec();
    }
    let (lx, hx) = (tile.x0 as f64 + 0.5, tile.x1 as f64 - 0.5);
    let (ly, hy) = (tile.y0 as f64 + 0.5, tile.y1 as f64 - 0.5);
    order
        .iter()
        .copied()
        .filter(|&i| {
            let s = &splats[i as usize];
            s.mean[0] + s.radius[0] >= lx && s.mean[0] - s.radius[0] <= hx && s.mean[1] + s.radius[1] >= ly && s.mean[1] - s.radius[1] <= hy
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Hit {
    slot: usize,
    g: f64,
    a: f64,
    t: f64,
}

/// Front-to-back walk over one pixel's candidates. Returns the final transmittance.
fn walk(px: f64, py: f64, list: &[u32], splats: &[Splat2d], cloud: &CloudView<'_>, mut visit: impl FnMut(Hit)) -> f64 {
    let mut t = 1.0;
    for (slot, &i) in list.iter().enumerate() {
        let s = &splats[i as usize];
        let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
        if dx.abs() > s.radius[0] || dy.abs() > s.radius[1] {
            continue;
        }
        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
        let g = (-0.5 * q).exp();
        let a = cloud.opacity(i as usize) * g;
        if a < ALPHA_MIN {
            continue;
        }
        visit(Hit { slot, g, a, t });
        t *= 1.0 - a;
        if t < T_MIN {
            break;
        }
    }
    t
}

/// Rendered image as `[r, g, b, alpha]` planes, each `height * width` long.
pub fn render_planes(cloud: &CloudView<'_>, cam: &Camera, bg: [f64; 3], mode: RasterMode) -> Vec<f64> {
    let splats = project(cloud, cam);
    let order = depth_order(&splats);
    composite(cloud, cam, bg, mode, &splats, &order)
}

/// Alpha compositing of already projected and depth-ordered splats.
pub fn composite(cloud: &CloudView<'_>, cam: &Camera, bg: [f64; 3], mode: RasterMode, splats: &[Splat2d], order: &[u32]) -> Vec<f64> {
    let tiles = tiles(cam, mode);
    let blocks = par::map_range(tiles.len(), |ti| {
        let tile = tiles[ti];
        let list = tile_list(&tile, order, splats, mode);
        let mut out = Vec::with_capacity((tile.x1 - tile.x0) * (tile.y1 - tile.y0) * 4);
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let mut c = [0.0; 3];
                let t = walk(x as f64 + 0.5, y as f64 + 0.5, &list, splats, cloud, |h| {
                    let col = cloud.color(list[h.slot] as usize);
                    for k in 0..3 {
                        c[k] += col[k] * h.a * h.t;
                    }
                });
                out.extend([c[0] + t * bg[0], c[1] + t * bg[1], c[2] + t * bg[2], 1.0 - t]);
            }
        }
        out
    });
    let n = cam.width * cam.height;
    let mut planes = vec![0.0; 4 * n];
    for (tile, block) in tiles.iter().zip(blocks) {
        let mut k = 0;
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                for ch in 0..4 {
                    planes[ch * n + y * cam.width + x] = block[k + ch];
                }
                k += 4;
            }
        }
    }
    planes
}

/// Gradients with respect to every splat attribute, channel-first like the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrads {
    pub position: Vec<f64>,
    pub rotation: Vec<f64>,
    pub scale: Vec<f64>,
    pub opacity: Vec<f64>,
    pub color: Vec<f64>,
}

/// Adjoint of [`render_planes`]: `grad` has the layout of its output.
pub fn render_backward(cloud: &CloudView<'_>, cam: &Camera, bg: [f64; 3], mode: RasterMode, grad: &[f64]) -> CloudGrads {
    let m = cloud.len();
    let n = cam.width * cam.height;
    assert_eq!(grad.len(), 4 * n, "render gradient size");
    let splats = project(cloud, cam);
    let order = depth_order(&splats);
    let tiles = tiles(cam, mode);
    // Per tile: the list and per-slot gradients [mean x, mean y, conic a, b, c, opacity, r, g, b].
    let partial = par::map_range(tiles.len(), |ti| {
        let tile = tiles[ti];
        let list = tile_list(&tile, &order, &splats, mode);
        let mut acc = vec![[0.0f64; 9]; list.len()];
        let mut hits = Vec::new();
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let pix = y * cam.width + x;
                let gc = [grad[pix], grad[n + pix], grad[2 * n + pix]];
                let ga = grad[3 * n + pix];
                if gc == [0.0; 3] && ga == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                hits.clear();
                walk(px, py, &list, &splats, cloud, |h| hits.push(h));
                let mut behind = bg;
                let mut behind_a = 0.0;
                for h in hits.iter().rev() {
                    let i = list[h.slot] as usize;
                    let col = cloud.color(i);
                    let g = &mut acc[h.slot];
                    let mut dl_da = ga * h.t * (1.0 - behind_a);
                    for k in 0..3 {
                        g[6 + k] += gc[k] * h.a * h.t;
                        dl_da += gc[k] * h.t * (col[k] - behind[k]);
                        behind[k] = col[k] * h.a + (1.0 - h.a) * behind[k];
                    }
                    behind_a = h.a + (1.0 - h.a) * behind_a;
                    let op = cloud.opacity(i);
                    g[5] += dl_da * h.g;
                    let dl_dg = dl_da * op;
                    let s = &splats[i];
                    let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
                    let [ca, cb, cc] = s.conic;
                    g[0] += dl_dg * h.g * (ca * dx + cb * dy);
                    g[1] += dl_dg * h.g * (cb * dx + cc * dy);
                    g[2] += dl_dg * (-0.5 * h.g * dx * dx);
                    g[3] += dl_dg * (-h.g * dx * dy);
                    g[4] += dl_dg * (-0.5 * h.g * dy * dy);
                }
            }
        }
        (list, acc)
    });
    let mut per = vec![[0.0f64; 9]; m];
    for (list, acc) in partial {
        for (&i, g) in list.iter().zip(acc) {
            for k in 0..9 {
                per[i as usize][k] += g[k];
            }
        }
    }
    let chained = par::map_range(m, |i| {
        if !splats[i].visible {
            return ([0.0; 3], [0.0; 4], [0.0; 3]);
        }
        splat_backward(cloud, cam, i, &splats[i], &per[i])
    });
    let mut out = CloudGrads { position: vec![0.0; 3 * m], rotation: vec![0.0; 4 * m], scale: vec![0.0; 3 * m], opacity: vec![0.0; m], color: vec![0.0; 3 * m] };
    for (i, (gp, gq, gs)) in chained.into_iter().enumerate() {
        for k in 0..3 {
            out.position[k * m + i] = gp[k];
            out.scale[k * m + i] = gs[k];
            out.color[k * m + i] = per[i][6 + k];
        }
        for k in 0..4 {
            out.rotation[k * m + i] = gq[k];
        }
        out.opacity[i] = per[i][5];
    }
    out
}

/// Chains 2D gradients (mean, conic) back to position, rotation and scale.
fn splat_backward(cloud: &CloudView<'_>, cam: &Camera, i: usize, s: &Splat2d, g: &[f64; 9]) -> ([f64; 3], [f64; 4], [f64; 3]) {
    let geo = geometry(cloud, cam, i);
    let [x, y, z] = geo.t;
    // conic -> covariance: dL/dSigma = -K dL/dK K with the off-diagonal gradient split.
    let k = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
    let gk = [[g[2], 0.5 * g[3]], [0.5 * g[3], g[4]]];
    let mut m2 = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            m2[a][b] = -(0..2).map(|p| (0..2).map(|q| k[a][p] * gk[p][q] * k[q][b]).sum::<f64>()).sum::<f64>();
        }
    }
    // Sigma2 = J Sigma_c J^T
    let mut g_sigma_c = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            g_sigma_c[a][b] = (0..2).map(|p| (0..2).map(|q| geo.j[p][a] * m2[p][q] * geo.j[q][b]).sum::<f64>()).sum();
        }
    }
    let mut g_j = [[0.0; 3]; 2];
    for a in 0..2 {
        for b in 0..3 {
            g_j[a][b] = 2.0 * (0..2).map(|p| (0..3).map(|q| m2[a][p] * geo.j[p][q] * geo.sigma_c[q][b]).sum::<f64>()).sum::<f64>();
        }
    }
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut gt = [
        g[0] * fx / z - g_j[0][2] * fx / z2,
        g[1] * fy / z - g_j[1][2] * fy / z2,
        -g[0] * fx * x / z2 - g[1] * fy * y / z2,
    ];
    gt[2] += -g_j[0][0] * fx / z2 + g_j[0][2] * 2.0 * fx * x / z3 - g_j[1][1] * fy / z2 + g_j[1][2] * 2.0 * fy * y / z3;
    let gp = [0, 1, 2].map(|c| (0..3).map(|r| cam.rot[r][c] * gt[r]).sum::<f64>());
    // Sigma_c = W Sigma3 W^T
    let w = cam.rot;
    let m3 = matmul3(&matmul3(&transpose3(&w), &g_sigma_c), &w);
    // Sigma3 = R D R^T
    let sc = cloud.scale(i);
    let mut g_r = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            g_r[a][b] = 2.0 * (0..3).map(|p| m3[a][p] * geo.r[p][b]).sum::<f64>() * sc[b] * sc[b];
        }
    }
    let rtmr = matmul3(&matmul3(&transpose3(&geo.r), &m3), &geo.r);
    let gs = [0, 1, 2].map(|c| 2.0 * sc[c] * rtmr[c][c]);
    let gq = quat_grad(cloud.rotation(i), &g_r);
    (gp, gq, gs)
}
