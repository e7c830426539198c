use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::render_planes;
use super::*;
use crate::{Tape, Tensor};

fn front(focal: f64, size: usize) -> Camera {
    Camera::look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], focal, size, size)
}

fn iso(p: [f64; 3], s: f64, o: f64, c: [f64; 3]) -> ([f64; 3], [f64; 4], [f64; 3], f64, [f64; 3]) {
    (p, [1.0, 0.0, 0.0, 0.0], [s; 3], o, c)
}

fn random_cloud(rng: &mut ChaCha8Rng, m: usize) -> GaussianCloud {
    let rows: Vec<_> = (0..m)
        .map(|_| {
            let p = [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12), rng.random_range(-0.2..0.2)];
            let q = [rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let s = [rng.random_range(0.01..0.04), rng.random_range(0.01..0.04), rng.random_range(0.01..0.04)];
            let c = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            (p, q, s, rng.random_range(0.2..0.9), c)
        })
        .collect();
    GaussianCloud::from_rows(&rows)
}

#[test]
fn isotropic_on_axis_matches_pinhole_covariance() {
    let cam = front(100.0, 32);
    for (z, s) in [(0.0, 0.01), (0.3, 0.02), (-0.2, 0.005)] {
        let c = GaussianCloud::from_rows(&[iso([0.0, 0.0, z], s, 0.5, [1.0; 3])]);
        let sp = project(&c.view().unwrap(), &cam);
        let depth = 1.0 - z;
        let expect = (100.0 / depth).powi(2) * s * s + raster::BLUR;
        assert!(sp[0].visible);
        assert!((sp[0].depth - depth).abs() < 1e-12);
        assert!((sp[0].cov[0] - expect).abs() < 1e-9 && (sp[0].cov[2] - expect).abs() < 1e-9);
        assert!(sp[0].cov[1].abs() < 1e-12);
        assert_eq!(sp[0].mean, [16.0, 16.0]);
    }
}

#[test]
fn behind_camera_is_culled_and_focal_scales_offsets() {
    let cam = front(50.0, 32);
    let c = GaussianCloud::from_rows(&[iso([0.0, 0.0, 2.0], 0.01, 0.5, [1.0; 3]), iso([0.05, -0.03, 0.1], 0.01, 0.5, [1.0; 3])]);
    let a = project(&c.view().unwrap(), &cam);
    assert!(!a[0].visible);
    let cam2 = Camera { fx: 100.0, fy: 100.0, ..cam.clone() };
    let b = project(&c.view().unwrap(), &cam2);
    for k in 0..2 {
        let (oa, ob) = (a[1].mean[k] - 16.0, b[1].mean[k] - 16.0);
        assert!((ob - 2.0 * oa).abs() < 1e-12);
    }
    let f = render(&c, &cam, [0.0; 3]).unwrap();
    assert!(f.alpha.iter().all(|a| a.is_finite()));
}

#[test]
fn empty_cloud_shows_background() {
    let f = render(&GaussianCloud::default(), &front(20.0, 20), [0.2, 0.4, 0.6]).unwrap();
    assert!(f.alpha.iter().all(|&a| a == 0.0));
    for y in 0..20 {
        for x in 0..20 {
            assert_eq!(f.pixel(x, y), [0.2, 0.4, 0.6]);
        }
    }
}

#[test]
fn opaque_splat_shows_its_color_at_center() {
    let cam = Camera { cx: 8.5, cy: 8.5, ..front(16.0, 16) };
    let c = GaussianCloud::from_rows(&[iso([0.0; 3], 0.5, 1.0 - 1e-6, [0.9, 0.2, 0.4])]);
    let f = render(&c, &cam, [0.0, 1.0, 0.0]).unwrap();
    let p = f.pixel(8, 8);
    for (a, b) in p.iter().zip([0.9, 0.2, 0.4]) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn two_splats_match_closed_form() {
    let cam = front(40.0, 24);
    let (s1, z1, o1, c1) = (0.03, 0.1, 0.7, [1.0, 0.2, 0.1]);
    let (s2, z2, o2, c2) = (0.05, -0.2, 0.6, [0.1, 0.5, 0.9]);
    let bg = [0.3, 0.3, 0.3];
    // storage order is back-to-front, so sorting must reorder
    let c = GaussianCloud::from_rows(&[iso([0.0, 0.0, z2], s2, o2, c2), iso([0.0, 0.0, z1], s1, o1, c1)]);
    let f = render_with(&c, &cam, bg, RasterMode::Exact).unwrap();
    let var = |s: f64, z: f64| (40.0 / (1.0 - z)).powi(2) * s * s + 0.3;
    for (x, y) in [(12, 12), (14, 11), (8, 15), (12, 5)] {
        let d2 = (x as f64 + 0.5 - 12.0).powi(2) + (y as f64 + 0.5 - 12.0).powi(2);
        // same 3-sigma box and skip threshold as the kernel
        let alpha = |o: f64, v: f64| {
            let (dx, dy) = (x as f64 + 0.5 - 12.0, y as f64 + 0.5 - 12.0);
            let a = o * (-0.5 * d2 / v).exp();
            if dx.abs() > 3.0 * v.sqrt() || dy.abs() > 3.0 * v.sqrt() || a < 1e-4 { 0.0 } else { a }
        };
        let a1 = alpha(o1, var(s1, z1));
        let a2 = alpha(o2, var(s2, z2));
        let p = f.pixel(x, y);
        for k in 0..3 {
            let e = c1[k] * a1 + c2[k] * a2 * (1.0 - a1) + bg[k] * (1.0 - a1) * (1.0 - a2);
            assert!((p[k] - e).abs() < 1e-6, "pixel ({x},{y})");
        }
        let ea = 1.0 - (1.0 - a1) * (1.0 - a2);
        assert!((f.alpha[y * 24 + x] - ea).abs() < 1e-6);
    }
}

fn weighted(planes: &[f64], w: &[f64]) -> f64 {
    planes.iter().zip(w).map(|(a, b)| a * b).sum()
}

#[test]
fn gradients_match_finite_differences() {
    let cam = Camera::look_at([0.1, -0.05, 1.0], [0.0, 0.0, 0.0], 60.0, 24, 24);
    let bg = [0.1, 0.2, 0.3];
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, 1 + seed as usize);
        let w: Vec<f64> = (0..4 * 24 * 24).map(|_| rng.random_range(0.5..1.5)).collect();
        let g = render_backward(&cloud.view().unwrap(), &cam, bg, RasterMode::Exact, &w);
        let eps = 1e-6;
        let fields: [(&str, fn(&mut GaussianCloud) -> &mut Vec<f64>, &Vec<f64>); 5] = [
            ("position", |c| &mut c.position, &g.position),
            ("rotation", |c| &mut c.rotation, &g.rotation),
            ("scale", |c| &mut c.scale, &g.scale),
            ("opacity", |c| &mut c.opacity, &g.opacity),
            ("color", |c| &mut c.color, &g.color),
        ];
        for (name, field, analytic) in fields {
            let mut worst: f64 = 0.0;
            let mut norm: f64 = 0.0;
            for k in 0..analytic.len() {
                let mut c = cloud.clone();
                field(&mut c)[k] += eps;
                let up = weighted(&render_planes(&c.view().unwrap(), &cam, bg, RasterMode::Exact), &w);
                field(&mut c)[k] -= 2.0 * eps;
                let dn = weighted(&render_planes(&c.view().unwrap(), &cam, bg, RasterMode::Exact), &w);
                let num = (up - dn) / (2.0 * eps);
                worst = worst.max((num - analytic[k]).abs());
                norm = norm.max(num.abs());
            }
            let rel = worst / norm.max(1e-8);
            assert!(rel < 1e-3, "seed {seed} {name}: rel err {rel}");
        }
    }
}

#[test]
fn color_gradient_is_weight_times_transmittance() {
    let cam = front(30.0, 16);
    let c = GaussianCloud::from_rows(&[iso([0.02, 0.01, 0.0], 0.04, 0.8, [0.5; 3])]);
    let f = render(&c, &cam, [0.0; 3]).unwrap();
    let n = 16 * 16;
    let mut seed = vec![0.0; 4 * n];
    seed[..n].fill(1.0);
    let g = render_backward(&c.view().unwrap(), &cam, [0.0; 3], RasterMode::Binned, &seed);
    let expect: f64 = f.alpha.iter().sum();
    assert!((g.color[0] - expect).abs() < 1e-12);
    assert_eq!(g.color[1], 0.0);
}

#[test]
fn distant_pixels_carry_no_gradient() {
    let cam = front(30.0, 32);
    let c = GaussianCloud::from_rows(&[iso([0.0, 0.0, -0.5], 0.001, 0.8, [0.5; 3])]);
    let mut seed = vec![0.0; 4 * 32 * 32];
    seed[0] = 1.0;
    seed[3 * 32 * 32] = 1.0;
    let g = render_backward(&c.view().unwrap(), &cam, [0.2; 3], RasterMode::Binned, &seed);
    for v in [&g.position, &g.rotation, &g.scale, &g.opacity, &g.color] {
        assert!(v.iter().all(|x| x.abs() < 1e-12));
    }
}

#[test]
fn permutation_and_modes_agree() {
    let cam = Camera::look_at([0.2, 0.1, 0.9], [0.0, 0.0, 0.0], 70.0, 40, 36);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&mut rng, 60);
    let a = render_with(&cloud, &cam, [0.1; 3], RasterMode::Exact).unwrap();
    let b = render_with(&cloud, &cam, [0.1; 3], RasterMode::Binned).unwrap();
    assert_eq!(a, b);
    let mut perm: Vec<usize> = (0..60).collect();
    perm.reverse();
    perm.swap(3, 40);
    let c = render(&cloud.permuted(&perm), &cam, [0.1; 3]).unwrap();
    assert_eq!(a, c);
    let w: Vec<f64> = (0..4 * 40 * 36).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ge = render_backward(&cloud.view().unwrap(), &cam, [0.1; 3], RasterMode::Exact, &w);
    let gb = render_backward(&cloud.view().unwrap(), &cam, [0.1; 3], RasterMode::Binned, &w);
    for (x, y) in [(&ge.position, &gb.position), (&ge.rotation, &gb.rotation), (&ge.scale, &gb.scale), (&ge.opacity, &gb.opacity), (&ge.color, &gb.color)] {
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= 1e-5 * scale);
        }
    }
}

#[test]
fn tape_render_matches_direct_path() {
    let cam = front(40.0, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cloud = random_cloud(&mut rng, 5);
    let m = cloud.len();
    let mut tape = Tape::<f64>::new();
    let mut p = |name: &str, v: &Vec<f64>, c: usize| tape.param(name, Tensor::new(vec![c, m], v.clone()).unwrap()).unwrap();
    let vars = SplatVars {
        position: p("p", &cloud.position, 3),
        rotation: p("r", &cloud.rotation, 4),
        scale: p("s", &cloud.scale, 3),
        opacity: p("o", &cloud.opacity, 1),
        color: p("c", &cloud.color, 3),
    };
    let img = render_tape(&mut tape, &vars, &cam, [0.5; 3], RasterMode::Binned).unwrap();
    let f = render(&cloud, &cam, [0.5; 3]).unwrap();
    assert_eq!(tape.value(img).data(), f.planes().as_slice());
    let loss = tape.sum(img).unwrap();
    let g = tape.backward(loss, None).unwrap();
    let direct = render_backward(&cloud.view().unwrap(), &cam, [0.5; 3], RasterMode::Binned, &vec![1.0; 4 * 400]);
    assert_eq!(g.get("p").unwrap().data(), direct.position.as_slice());
    assert_eq!(g.get("o").unwrap().data(), direct.opacity.as_slice());
}

mod gather {
    use super::*;
    use crate::rig::{axis_angle, bind_texels, procedural_rig, ExpressionParams, HeadRig, RigidTransform};
    use nalgebra::{UnitQuaternion, Vector3};

    fn maps(rig: &HeadRig, b: &crate::rig::TexelBinding) -> GaussianMapSet<f64> {
        let (h, w) = (b.height, b.width);
        let pos = rig.uv_position_map(&rig.vertices, b).unwrap().to_tensor();
        let rot = Tensor::from_fn(&[4, h, w], |i| if i < h * w { 1.0 } else { 0.0 });
        GaussianMapSet {
            position: pos,
            opacity: Tensor::full(&[1, h, w], 0.5),
            scale: Tensor::full(&[3, h, w], 0.003),
            color: Tensor::full(&[3, h, w], 0.7),
            rotation: rot,
        }
    }

    #[test]
    fn identity_pose_keeps_map_positions() {
        let rig = procedural_rig(0);
        let b = bind_texels(&rig, 32, 32).unwrap();
        let mp = maps(&rig, &b);
        let cloud = gather_cloud(&mp, &b, &rig, &ExpressionParams::for_rig(&rig)).unwrap();
        let valid = b.valid_indices();
        assert_eq!(cloud.len(), valid.len());
        let m = valid.len();
        for (k, &i) in valid.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(cloud.position[c * m + k], mp.position.data()[c * 1024 + i]);
            }
        }
    }

    #[test]
    fn empty_binding_gives_empty_cloud() {
        let rig = procedural_rig(0);
        let mut b = bind_texels(&rig, 16, 16).unwrap();
        b.valid.fill(false);
        let cloud = gather_cloud(&maps(&rig, &b), &b, &rig, &ExpressionParams::for_rig(&rig)).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn global_pose_moves_cloud_rigidly() {
        let rig = procedural_rig(0);
        let b = bind_texels(&rig, 32, 32).unwrap();
        let mp = maps(&rig, &b);
        let mut expr = ExpressionParams::for_rig(&rig);
        let rest = gather_cloud(&mp, &b, &rig, &expr).unwrap();
        expr.global_rot = axis_angle([0.2, 1.0, 0.1], 0.6);
        expr.global_trans = [0.01, -0.02, 0.03];
        let moved = gather_cloud(&mp, &b, &rig, &expr).unwrap();
        let q = expr.global_rot;
        let g = RigidTransform {
            q: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3])),
            t: Vector3::from(expr.global_trans),
        };
        let m = rest.len();
        for i in 0..m {
            let e = g.apply([rest.position[i], rest.position[m + i], rest.position[2 * m + i]]);
            for k in 0..3 {
                assert!((moved.position[k * m + i] - e[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mouth_mask_sees_the_mouth_from_the_front_only() {
        let rig = procedural_rig(0);
        let expr = ExpressionParams::for_rig(&rig);
        let f = mouth_mask(&rig, &expr, &Camera::orbit(0.0, 0.0, 0.6, 300.0, 64, 64)).unwrap();
        let back = mouth_mask(&rig, &expr, &Camera::orbit(std::f64::consts::PI, 0.0, 0.6, 300.0, 64, 64)).unwrap();
        assert!(f.iter().sum::<f64>() > 5.0);
        assert_eq!(back.iter().sum::<f64>(), 0.0);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn alpha_stays_in_unit_interval(seed in 0u64..1000, m in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cloud = random_cloud(&mut rng, m);
            cloud.opacity.iter_mut().for_each(|o| *o = rng.random_range(0.0..1.0));
            let f = render(&cloud, &front(50.0, 24), [1.0; 3]).unwrap();
            prop_assert!(f.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
            let again = render(&cloud, &front(50.0, 24), [1.0; 3]).unwrap();
            prop_assert_eq!(f, again);
        }
    }
}
