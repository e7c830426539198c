use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::render::render;

fn tiny() -> DataConfig {
    DataConfig { n_ids: 1, n_expr: 2, n_views: 2, image_size: 32, uv_size: 16, seed: 5, ..DataConfig::default() }
}

#[test]
fn single_image_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig { n_expr: 1, n_views: 1, ..tiny() };
    let m = generate_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(m.identities.len(), 1);
    assert_eq!(m.identities[0].frames.len(), 1);
    let d = Dataset::load(dir.path()).unwrap();
    assert_eq!(d.identities[0].images.len(), 1);
    assert!(generate_dataset(&DataConfig { n_views: 0, ..cfg }, dir.path()).is_err());
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&tiny(), a.path()).unwrap();
    generate_dataset(&tiny(), b.path()).unwrap();
    for f in ["manifest.toml", "expressions.csv", "id000/maps.ckpt", "id000/cameras.csv", "id000/e001_v001.png", "id000/e001_v001_mask.png"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    generate_dataset(&DataConfig { seed: 6, ..tiny() }, c.path()).unwrap();
    assert_ne!(std::fs::read(a.path().join("id000/maps.ckpt")).unwrap(), std::fs::read(c.path().join("id000/maps.ckpt")).unwrap());
}

#[test]
fn stored_parameters_re_render_to_stored_pixels() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&tiny(), dir.path()).unwrap();
    let d = Dataset::load(dir.path()).unwrap();
    let binding = d.binding().unwrap();
    let ident = &d.identities[0];
    for e in 0..2 {
        let cloud = gather_cloud(&ident.maps, &binding, &d.rig, &ident.expressions[e]).unwrap();
        for v in 0..2 {
            let frame = render(&cloud, &ident.cameras[v], d.manifest.config.background).unwrap();
            let (img, mask) = ident.frame(e, v);
            let n = 32 * 32;
            for i in 0..n {
                for c in 0..3 {
                    assert_eq!(to_u8(frame.rgb[c * n + i]), (img.data()[c * n + i] * 255.0).round() as u8);
                }
                assert_eq!(frame.alpha[i] >= 0.5, mask.data()[i] == 1.0);
            }
            assert!(mask.data().iter().any(|&m| m == 1.0), "head visible in view {v}");
        }
    }
}

#[test]
fn ground_truth_is_reachable_by_the_activations() {
    let rig = procedural_rig(0);
    let binding = bind_texels(&rig, 32, 32).unwrap();
    let act = crate::recon::Activation::for_rig(&rig, &binding, &ReconConfig { uv_size: 32, ..ReconConfig::default() }).unwrap();
    for seed in 0..5 {
        let id = synthesize_identity(&rig, &binding, seed).unwrap();
        let m = &id.maps;
        let n = 32 * 32;
        for i in binding.valid_indices() {
            assert!(m.opacity.data()[i] > 0.0 && m.opacity.data()[i] < 1.0);
            for k in 0..3 {
                let s = m.scale.data()[k * n + i];
                assert!(s > 0.0 && s < act.s_max);
                assert!((m.position.data()[k * n + i] - act.anchor.data()[k * n + i]).abs() < act.pos_range);
                let c = m.color.data()[k * n + i];
                assert!(c > 0.0 && c < 1.0);
            }
        }
    }
}

#[test]
fn csv_round_trips() {
    let rig = procedural_rig(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<ExpressionParams> = (0..4).map(|_| random_expression(&rig, &mut rng, 0.5, 0.3)).collect();
    let text = expressions_to_csv(&rows).unwrap();
    assert!(text.starts_with("frame,psi0,"));
    assert_eq!(expressions_from_csv(&text, &rig).unwrap(), rows);
    let mut t = ExpressionTable::new(3);
    t.push(0, 0, vec![0.1, 0.2, 0.3]).unwrap();
    t.push(1, 4, vec![-1.0, 0.0, 2.5]).unwrap();
    assert!(t.push(1, 5, vec![0.0]).is_err());
    let csv = t.to_csv().unwrap();
    assert_eq!(csv.lines().next().unwrap(), "id,frame,psi0,psi1,psi2");
    assert_eq!(ExpressionTable::from_csv(&csv).unwrap(), t);
}

fn table_of(rows: &[Vec<f64>]) -> ExpressionTable {
    let mut t = ExpressionTable::new(rows[0].len());
    for (i, r) in rows.iter().enumerate() {
        t.push(0, i, r.clone()).unwrap();
    }
    t
}

#[test]
fn anchor_selection_oracles() {
    let sym = table_of(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.5], vec![0.0, -0.5], vec![0.0, 3.0], vec![0.0, -3.0]]);
    // mean is (0, 0); the farthest rows tie and the lower index wins
    assert_eq!(select_anchors(&sym, 1).unwrap(), vec![4]);
    let mut all = select_anchors(&sym, 6).unwrap();
    all.sort_unstable();
    assert_eq!(all, (0..6).collect::<Vec<_>>());
    assert!(select_anchors(&sym, 0).is_err());
    assert!(select_anchors(&table_of(&[vec![1.0], vec![1.0]]), 2).is_err());

    for seed in 0..10 {
        let (t, labels) = planted_cluster_table(3, 60, 20, 12, seed);
        let anchors = select_anchors(&t, 20).unwrap();
        let hit: std::collections::BTreeSet<usize> = anchors.iter().filter_map(|&a| labels[a]).collect();
        assert!(hit.len() >= 18, "seed {seed}: {} clusters", hit.len());
    }
}

#[test]
fn retrieval_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = ExpressionTable::new(5);
    for id in 0..3 {
        for f in 0..30 {
            let psi = if f == 7 { vec![0.0; 5] } else { (0..5).map(|_| rng.random_range(-1.0..1.0)).collect() };
            t.push(id, f, psi).unwrap();
        }
    }
    let a = t.rows[40].2.clone();
    let r = retrieve_similar(&t, &a, 5).unwrap();
    assert_eq!(r[0].0, FrameRef { identity: 1, frame: 10 });
    assert!((r[0].1 - 1.0).abs() < 1e-12);
    // brute force
    let mut brute: Vec<(bool, f64, usize, usize)> = t.rows.iter().map(|r| (r.2.iter().all(|&v| v == 0.0), cosine(&r.2, &a), r.0, r.1)).collect();
    brute.sort_by(|x, y| x.0.cmp(&y.0).then(y.1.partial_cmp(&x.1).unwrap()).then((x.2, x.3).cmp(&(y.2, y.3))));
    let full = retrieve_similar(&t, &a, t.len()).unwrap();
    for (got, want) in full.iter().zip(&brute) {
        assert_eq!((got.0.identity, got.0.frame), (want.2, want.3));
    }
    assert!(full[full.len() - 3..].iter().all(|(f, _)| f.frame == 7));
    // scaling a row leaves the ranking unchanged
    let mut scaled = t.clone();
    for v in scaled.rows[12].2.iter_mut() {
        *v *= 3.7;
    }
    assert_eq!(retrieve_similar(&scaled, &a, t.len()).unwrap().iter().map(|x| x.0).collect::<Vec<_>>(), full.iter().map(|x| x.0).collect::<Vec<_>>());
    // orthogonal anchor
    let ortho = table_of(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]);
    assert!(retrieve_similar(&ortho, &[0.0, 0.0, 1.0], 2).unwrap().iter().all(|x| x.1 == 0.0));
    assert!(retrieve_similar(&ExpressionTable::new(3), &[1.0, 0.0, 0.0], 1).is_err());
    assert!(retrieve_similar(&ortho, &[0.0, 0.0, 0.0], 1).is_err());
}

#[test]
fn sampler_oracles() {
    let (t, _) = planted_cluster_table(4, 100, 20, 12, 3);
    let cfg = SamplerConfig::default();
    let plan = build_adjusted_sampler(&t, &cfg).unwrap();
    assert!(plan.per_id.values().all(|v| v.len() == 26));
    let frames: Vec<FrameRef> = plan.frames().copied().collect();
    let adjusted = anchor_neighborhood_mass(&t, &frames, &plan.anchors, 0.9);
    let all: Vec<FrameRef> = t.rows.iter().map(|r| FrameRef { identity: r.0, frame: r.1 }).collect();
    let uniform = anchor_neighborhood_mass(&t, &all, &plan.anchors, 0.9);
    assert!(adjusted >= 2.0 * uniform, "{adjusted} vs {uniform}");
    let sampled = uniform_sample(&t, 26, 1);
    assert!(adjusted > anchor_neighborhood_mass(&t, &sampled, &plan.anchors, 0.9));

    // another seed only changes the random slots
    let other = build_adjusted_sampler(&t, &SamplerConfig { seed: 99, ..cfg.clone() }).unwrap();
    for (a, b) in plan.per_id.values().zip(other.per_id.values()) {
        assert_eq!(a[..20], b[..20]);
    }
    assert_ne!(plan, other);

    // exact anchor matches are picked
    for (id, frames) in &plan.per_id {
        for (k, &a) in plan.anchors.iter().enumerate() {
            if t.rows[a].0 == *id {
                assert_eq!(frames[k], FrameRef { identity: *id, frame: t.rows[a].1 });
            }
        }
    }
    let (small, _) = planted_cluster_table(2, 25, 20, 12, 3);
    let err = build_adjusted_sampler(&small, &cfg).unwrap_err().to_string();
    assert!(err.contains("identity 0 has 25 frames"), "{err}");
}

#[test]
fn pca_oracles() {
    let line = table_of(&(0..6).map(|i| vec![i as f64, 2.0 * i as f64, 0.5]).collect::<Vec<_>>());
    let idx: Vec<usize> = (0..6).collect();
    let (p, coords) = pca_project(&line, &idx, 2).unwrap();
    assert!(p.eigenvalues[1].abs() < 1e-12);
    assert!(coords.iter().all(|c| c[1].abs() < 1e-9));

    // exactly planar anchors: distances are preserved
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (u, v) = ([0.6, 0.0, 0.8, 0.0], [0.0, 1.0, 0.0, 0.0]);
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (0..4).map(|k| 0.3 + a * u[k] + b * v[k]).collect()
        })
        .collect();
    let plane = table_of(&rows);
    let (_, c) = pca_project(&plane, &(0..8).collect::<Vec<_>>(), 2).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let d3 = dist2(&rows[i], &rows[j]).sqrt();
            let d2 = dist2(&c[i], &c[j]).sqrt();
            assert!((d3 - d2).abs() < 1e-9);
        }
    }

    // mean reconstruction error equals the trailing eigenvalues
    let rows: Vec<Vec<f64>> = (0..15).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let t = table_of(&rows);
    let idx: Vec<usize> = (0..15).collect();
    let (p, c) = pca_project(&t, &idx, 2).unwrap();
    let err: f64 = (0..15)
        .map(|i| {
            let rec: Vec<f64> = (0..5).map(|k| p.mean[k] + p.components[0][k] * c[i][0] + p.components[1][k] * c[i][1]).collect();
            dist2(&rec, &rows[i])
        })
        .sum::<f64>()
        / 15.0;
    assert!((err - p.eigenvalues[2..].iter().sum::<f64>()).abs() < 1e-10);

    assert!(pca_project(&table_of(&[vec![1.0, 2.0], vec![1.0, 2.0]]), &[0, 1], 2).is_err());
    assert!(pca_project(&t, &[0], 2).is_err());
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
