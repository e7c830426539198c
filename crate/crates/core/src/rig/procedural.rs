//! Deterministic low-poly head: a latitude/longitude ellipsoid with a nose,
//! compact-support expression shapes and two teeth quads.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HeadRig, Joint};

pub const ROOT: usize = 0;
pub const NECK: usize = 1;
pub const JAW: usize = 2;

pub const EXPRESSION_NAMES: [&str; 12] = [
    "mouth_open",
    "smile_l",
    "smile_r",
    "brow_raise_l",
    "brow_raise_r",
    "blink_l",
    "blink_r",
    "pucker",
    "cheek_puff",
    "frown",
    "stretch",
    "nose_wrinkle",
];

const RX: f64 = 0.075;
const RY: f64 = 0.1;
const RZ: f64 = 0.09;
const N_LON: usize = 32;
const N_LAT: usize = 18;
const THETA0: f64 = 0.06 * PI;
const THETA1: f64 = 0.9 * PI;
const V0: f64 = 0.02;
const V1: f64 = 0.84;
const MOUTH_Y: f64 = -0.045;
const EYE: (f64, f64) = (0.03, 0.018);

fn r32(v: f64) -> f64 {
    v as f32 as f64
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// `(1 - (d/r)^2)^2` inside radius `r`, exactly zero outside.
fn bump(dx: f64, dy: f64, r: f64) -> f64 {
    let q = (dx * dx + dy * dy) / (r * r);
    if q >= 1.0 {
        0.0
    } else {
        (1.0 - q) * (1.0 - q)
    }
}

fn surface(theta: f64, u: f64) -> [f64; 3] {
    let phi = 2.0 * PI * (u - 0.5);
    let (x, y, z) = (RX * theta.sin() * phi.sin(), RY * theta.cos(), RZ * theta.sin() * phi.cos());
    // nose ridge
    let nose = if z > 0.0 { 0.012 * (-(x / 0.011).powi(2) - ((y + 0.008) / 0.022).powi(2)).exp() } else { 0.0 };
    [x, y, z + nose]
}

fn expression_disp(k: usize, p: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = p;
    if z <= 0.0 {
        return [0.0; 3];
    }
    let side = |f: &dyn Fn(f64) -> [f64; 3]| {
        let (a, b) = (f(1.0), f(-1.0));
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    };
    match k {
        0 => {
            let w = bump(x, y + 0.06, 0.035);
            if y < MOUTH_Y {
                [0.0, -0.010 * w, -0.002 * w]
            } else {
                [0.0, 0.003 * w, 0.0]
            }
        }
        1 | 2 => {
            let s = if k == 1 { 1.0 } else { -1.0 };
            let w = bump(x - s * 0.028, y - MOUTH_Y, 0.025);
            [s * 0.004 * w, 0.006 * w, -0.002 * w]
        }
        3 | 4 => {
            let s = if k == 3 { 1.0 } else { -1.0 };
            let w = bump(x - s * 0.03, y - 0.045, 0.025);
            [0.0, 0.006 * w, 0.001 * w]
        }
        5 | 6 => {
            let s = if k == 5 { 1.0 } else { -1.0 };
            let w = bump(x - s * EYE.0, y - EYE.1, 0.02);
            [0.0, -0.005 * w, 0.002 * w]
        }
        7 => {
            let w = bump(x, y - MOUTH_Y, 0.03);
            [-0.3 * x * w, 0.0, 0.008 * w]
        }
        8 => side(&|s| {
            let w = bump(x - s * 0.045, y + 0.025, 0.03);
            [s * 0.006 * w, 0.0, 0.004 * w]
        }),
        9 => side(&|s| {
            let wm = bump(x - s * 0.025, y + 0.05, 0.02);
            let wb = bump(x - s * 0.015, y - 0.04, 0.018);
            [0.0, -0.006 * wm - 0.004 * wb, 0.0]
        }),
        10 => side(&|s| {
            let w = bump(x - s * 0.027, y - MOUTH_Y, 0.022);
            [s * 0.007 * w, -0.002 * w, 0.0]
        }),
        11 => {
            let w = bump(x, y - 0.005, 0.02);
            [0.0, 0.004 * w, 0.002 * w]
        }
        _ => unreachable!("expression index"),
    }
}

/// Skin weights `[root, neck, jaw]`: the bulk follows the neck, the lower
/// front face follows the jaw, the bottom ring stays with the root.
fn skin(p: [f64; 3]) -> [f64; 3] {
    let [_, y, z] = p;
    let jaw = r32(smoothstep((MOUTH_Y - 0.002 - y) / 0.012) * smoothstep((z - 0.01) / 0.03));
    let root = r32((1.0 - jaw) * smoothstep((-0.078 - y) / 0.012));
    let neck = r32(1.0 - jaw - root);
    [root, neck, jaw]
}

/// Builds the procedural rig. The seed jitters blendshape amplitudes by up to 10%.
pub fn procedural_rig(seed: u64) -> HeadRig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amps: Vec<f64> = (0..EXPRESSION_NAMES.len()).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect();

    let mut vertices = Vec::new();
    let mut uv_of = Vec::new();
    for i in 0..=N_LAT {
        let theta = THETA0 + (THETA1 - THETA0) * i as f64 / N_LAT as f64;
        let v = V0 + (V1 - V0) * i as f64 / N_LAT as f64;
        for j in 0..=N_LON {
            let u = j as f64 / N_LON as f64;
            vertices.push(surface(theta, u).map(r32));
            uv_of.push([u, v]);
        }
    }
    let idx = |i: usize, j: usize| (i * (N_LON + 1) + j) as u32;
    let mut faces = Vec::new();
    let mut uv = Vec::new();
    for i in 0..N_LAT {
        for j in 0..N_LON {
            let (a, b, c, d) = (idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1));
            for tri in [[a, c, b], [b, c, d]] {
                faces.push(tri);
                uv.push(tri.map(|v| uv_of[v as usize].map(r32)));
            }
        }
    }
    let n_skin = vertices.len();

    // Teeth quads slightly behind the lips, with their own UV islands.
    let z_lip = RZ * (1.0 - (MOUTH_Y / RY).powi(2)).sqrt();
    let zt = z_lip - 0.008;
    let mut teeth = Vec::new();
    for (y0, y1, u0, u1) in [(MOUTH_Y, MOUTH_Y + 0.007, 0.1, 0.45), (MOUTH_Y - 0.007, MOUTH_Y, 0.55, 0.9)] {
        let base = vertices.len() as u32;
        let (v0, v1) = (0.88, 0.97);
        for (x, y, u, v) in [(-0.016, y1, u0, v0), (0.016, y1, u1, v0), (-0.016, y0, u0, v1), (0.016, y0, u1, v1)] {
            vertices.push([x, y, zt].map(r32));
            uv_of.push([u, v]);
        }
        let (tl, tr, bl, br) = (base, base + 1, base + 2, base + 3);
        for tri in [[tl, bl, tr], [tr, bl, br]] {
            faces.push(tri);
            uv.push(tri.map(|v| uv_of[v as usize].map(r32)));
        }
        teeth.extend(base..base + 4);
    }

    let nv = vertices.len();
    let mut skin_weights = Vec::with_capacity(nv * 3);
    for (v, p) in vertices.iter().enumerate() {
        let w = if v < n_skin {
            skin(*p)
        } else if v < n_skin + 4 {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        skin_weights.extend_from_slice(&w);
    }

    let expr_basis = (0..EXPRESSION_NAMES.len())
        .map(|k| {
            vertices
                .iter()
                .enumerate()
                .map(|(v, p)| if v < n_skin { expression_disp(k, *p).map(|d| r32(d * amps[k])) } else { [0.0; 3] })
                .collect()
        })
        .collect();

    let mut regions: BTreeMap<String, Vec<u32>> = ["face", "mouth", "eyes", "hair", "teeth"].iter().map(|r| (r.to_string(), Vec::new())).collect();
    for (v, &[x, y, z]) in vertices.iter().enumerate().take(n_skin) {
        let front = z > -0.01;
        let region = if front && z > 0.0 && x.abs() < 0.03 && (y - MOUTH_Y).abs() < 0.016 {
            Some("mouth")
        } else if front && z > 0.0 && ((x.abs() - EYE.0).powi(2) + (y - EYE.1).powi(2)).sqrt() < 0.016 {
            Some("eyes")
        } else if y > 0.055 || !front {
            Some("hair")
        } else if y > -0.085 {
            Some("face")
        } else {
            None
        };
        if let Some(r) = region {
            regions.get_mut(r).expect("region").push(v as u32);
        }
    }
    regions.get_mut("mouth").expect("mouth").extend(&teeth);
    regions.get_mut("teeth").expect("teeth").extend(&teeth);

    let joints = vec![
        Joint { name: "global".into(), parent: None, pivot: [0.0, -0.1, 0.0].map(r32) },
        Joint { name: "neck".into(), parent: Some(ROOT), pivot: [0.0, -0.09, -0.01].map(r32) },
        Joint { name: "jaw".into(), parent: Some(NECK), pivot: [0.0, -0.025, 0.0].map(r32) },
    ];

    HeadRig {
        vertices,
        faces,
        expr_names: EXPRESSION_NAMES.iter().map(|s| s.to_string()).collect(),
        expr_basis,
        joints,
        skin_weights,
        uv,
        regions,
    }
}
