use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use uvhead::rig::{bind_texels, bind_uv_triangles, lbs, procedural_rig, HeadRig, RigidTransform};

fn rig() -> HeadRig {
    procedural_rig(0)
}

fn unit_q(a: [f64; 3], angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(a)), angle)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn deform_is_linear(a in prop::collection::vec(-1.0f64..1.0, 12), b in prop::collection::vec(-1.0f64..1.0, 12)) {
        let rig = rig();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (da, db, ds) = (rig.deform(&a).unwrap(), rig.deform(&b).unwrap(), rig.deform(&sum).unwrap());
        for v in 0..rig.num_vertices() {
            for k in 0..3 {
                prop_assert!((ds[v][k] - (da[v][k] + db[v][k] - rig.vertices[v][k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lbs_commutes_with_global_rigid_motion(
        axes in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.1f64..1.0, -1.0f64..1.0), 4),
        t in (-0.1f64..0.1, -0.1f64..0.1, -0.1f64..0.1),
        w in prop::collection::vec(0.0f64..1.0, 3),
        p in (-0.1f64..0.1, -0.1f64..0.1, -0.1f64..0.1),
    ) {
        let tr: Vec<RigidTransform> = axes[..3]
            .iter()
            .enumerate()
            .map(|(j, a)| RigidTransform { q: unit_q([a.0, a.1, a.2], a.3 * 0.5), t: Vector3::new(0.01 * j as f64, 0.0, -0.02) })
            .collect();
        let a = axes[3];
        let g = RigidTransform { q: unit_q([a.0, a.1, a.2], a.3 * 2.0), t: Vector3::new(t.0, t.1, t.2) };
        let s: f64 = w.iter().sum::<f64>() + 1e-3;
        let w: Vec<f64> = w.iter().map(|x| (x + 1e-3 / 3.0) / s).collect();
        let pts = [[p.0, p.1, p.2]];
        let rot = [[0.9f64.sqrt(), 0.1f64.sqrt(), 0.0, 0.0]];
        let (p1, q1) = lbs(&tr, &pts, Some(&rot), &w).unwrap();
        let moved: Vec<RigidTransform> = tr.iter().map(|x| g.compose(x)).collect();
        let (p2, q2) = lbs(&moved, &pts, Some(&rot), &w).unwrap();
        let expect = g.apply(p1[0]);
        for k in 0..3 {
            prop_assert!((p2[0][k] - expect[k]).abs() < 1e-12);
        }
        let q1 = UnitQuaternion::new_normalize(nalgebra::Quaternion::new(q1.as_ref().unwrap()[0][0], q1.as_ref().unwrap()[0][1], q1.as_ref().unwrap()[0][2], q1.as_ref().unwrap()[0][3]));
        let gq = g.q * q1;
        let q2 = q2.unwrap()[0];
        let dot = gq.w * q2[0] + gq.i * q2[1] + gq.j * q2[2] + gq.k * q2[3];
        prop_assert!((dot.abs() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn shared_rotation_rotates_about_pivot() {
    let rig = rig();
    let pivot = Vector3::new(0.0, -0.05, 0.01);
    let r = RigidTransform::about(unit_q([0.3, 1.0, -0.2], 0.7), pivot);
    let tr = vec![r; rig.num_joints()];
    let (p, _) = lbs(&tr, &rig.vertices, None, &rig.skin_weights).unwrap();
    for (a, v) in p.iter().zip(&rig.vertices) {
        let e = r.q * (Vector3::from(*v) - pivot) + pivot;
        for k in 0..3 {
            assert!((a[k] - e[k]).abs() < 1e-14);
        }
    }
}

#[test]
fn affine_position_field_is_reproduced_at_texel_centers() {
    let rig = rig();
    let b = bind_texels(&rig, 64, 64).unwrap();
    let f = |u: f64, v: f64| [0.3 * u - 0.2 * v + 0.05, -0.7 * u + 0.1, 0.25 * v - 0.4 * u];
    let mut verts = vec![[0.0; 3]; rig.num_vertices()];
    for (face, tri) in rig.faces.iter().zip(&rig.uv) {
        for (c, &v) in face.iter().enumerate() {
            verts[v as usize] = f(tri[c][0], tri[c][1]);
        }
    }
    let m = rig.uv_position_map(&verts, &b).unwrap();
    for i in b.valid_indices() {
        let [u, v] = b.texel_center(i);
        let e = f(u, v);
        for k in 0..3 {
            assert!((m.data[i][k] - e[k]).abs() < 1e-12, "texel {i}");
        }
    }
    assert!(m.mask.iter().zip(&m.data).all(|(&ok, p)| ok || *p == [0.0; 3]));
}

#[test]
fn random_layout_roundtrips_texel_centers() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let n = 6;
    let mut pts = vec![[0.0; 2]; (n + 1) * (n + 1)];
    for i in 0..=n {
        for j in 0..=n {
            let jitter = |r: &mut rand_chacha::ChaCha8Rng, k: usize| if k == 0 || k == n { 0.0 } else { r.random_range(-0.3..0.3) / n as f64 };
            pts[i * (n + 1) + j] = [j as f64 / n as f64 + jitter(&mut rng, j), i as f64 / n as f64 + jitter(&mut rng, i)];
        }
    }
    let mut uv = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (a, b, c, d) = (i * (n + 1) + j, i * (n + 1) + j + 1, (i + 1) * (n + 1) + j, (i + 1) * (n + 1) + j + 1);
            uv.push([pts[a], pts[c], pts[b]]);
            uv.push([pts[b], pts[c], pts[d]]);
        }
    }
    let bind = bind_uv_triangles(&uv, 40, 40).unwrap();
    assert_eq!(bind.valid_count(), 1600);
    for i in bind.valid_indices() {
        let t = uv[bind.face[i] as usize];
        let bc = bind.bary[i];
        let rec = [0, 1].map(|k| (0..3).map(|c| bc[c] * t[c][k]).sum::<f64>());
        let center = bind.texel_center(i);
        for k in 0..2 {
            assert!((rec[k] - center[k]).abs() <= 0.5 / 40.0);
        }
    }
}

#[test]
fn one_hot_expression_changes_only_its_support() {
    let rig = rig();
    let b = bind_texels(&rig, 64, 64).unwrap();
    let neutral = rig.uv_position_map(&rig.vertices, &b).unwrap();
    for k in 0..rig.num_expr() {
        let mut psi = vec![0.0; rig.num_expr()];
        psi[k] = 1.0;
        let m = rig.uv_position_map(&rig.deform(&psi).unwrap(), &b).unwrap();
        let moved: Vec<bool> = rig.expr_basis[k].iter().map(|d| *d != [0.0; 3]).collect();
        let mut changed = 0;
        for i in b.valid_indices() {
            let touched = rig.faces[b.face[i] as usize].iter().any(|&v| moved[v as usize]);
            if m.data[i] != neutral.data[i] {
                changed += 1;
                assert!(touched, "expression {k} texel {i}");
            }
        }
        assert!(changed > 0, "expression {k} has no visible support");
    }
}

#[test]
fn masks_are_idempotent() {
    let rig = rig();
    let b1 = bind_texels(&rig, 64, 64).unwrap();
    let b2 = bind_texels(&rig, 64, 64).unwrap();
    assert_eq!(b1, b2);
    for r in uvhead::rig::REGIONS {
        assert_eq!(rig.region_mask(r, &b1).unwrap(), rig.region_mask(r, &b2).unwrap());
    }
}
