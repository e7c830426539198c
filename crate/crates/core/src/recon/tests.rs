use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::rig::{bind_texels, procedural_rig};

fn small() -> ReconConfig {
    ReconConfig {
        image_size: 32,
        patch: 8,
        token_dim: 16,
        heads: 2,
        encoder_depth: 1,
        self_depth: 1,
        cross_depth: 1,
        query_h: 4,
        query_w: 4,
        uv_size: 16,
        id_dim: 4,
        decoder_min_width: 8,
        ..ReconConfig::default()
    }
}

fn images<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, size: usize) -> ImageSet<T> {
    ImageSet::unmasked((0..n).map(|_| Tensor::from_fn(&[3, size, size], |_| T::lit(rng.random_range(0.0..1.0)))).collect()).unwrap()
}

fn activation(cfg: &ReconConfig) -> Activation {
    let rig = procedural_rig(0);
    let binding = bind_texels(&rig, cfg.uv_size, cfg.uv_size).unwrap();
    Activation::for_rig(&rig, &binding, cfg).unwrap()
}

fn run<T: Scalar>(net: &ReconNet, p: &ParamStore<T>, set: &ImageSet<T>) -> (Tensor<T>, Tensor<T>) {
    let mut t = Tape::new();
    let b = p.bind(&mut t, false).unwrap();
    let v = net.forward(&mut t, &b, set).unwrap();
    (t.value(v.id).clone(), t.value(v.raw).clone())
}

#[test]
fn default_sizes() {
    let c = ReconConfig::default();
    assert_eq!((c.tokens_per_image(), c.query_count(), c.upsample_stages()), (64, 256, 2));
    let parsed = ReconConfig::from_toml("token_dim = 64\nheads = 2\n").unwrap();
    assert_eq!((parsed.token_dim, parsed.heads, parsed.uv_size), (64, 2, 64));
    assert!(ReconConfig::from_toml("token_dim = 30\nheads = 4\n").is_err());
    assert!(ReconConfig::from_toml("unknown_key = 1\n").is_err());
    assert!(ReconConfig::from_toml("uv_size = 48\n").is_err());
}

#[test]
fn any_count_gives_the_same_shapes() {
    let cfg = small();
    let net = ReconNet::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = net.init::<f32, _>(&mut rng);
    for n in 1..=4 {
        let (id, raw) = run(&net, &p, &images(&mut rng, n, 32));
        assert_eq!(id.shape(), [4, 16, 16]);
        assert_eq!(raw.shape(), [GAUSSIAN_DIM, 16, 16]);
    }
    let mut t = Tape::new();
    let b = p.bind(&mut t, false).unwrap();
    assert!(net.forward(&mut t, &b, &images::<f32>(&mut rng, 0, 32)).is_err());
    assert!(net.forward(&mut t, &b, &images::<f32>(&mut rng, 5, 32)).is_err());
    assert!(net.forward(&mut t, &b, &images::<f32>(&mut rng, 1, 24)).is_err());
}

#[test]
fn image_order_does_not_matter() {
    let net = ReconNet::new(small()).unwrap();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let p = net.init::<f32, _>(&mut rng);
        let set = images(&mut rng, 3, 32);
        let (id, raw) = run(&net, &p, &set);
        for perm in [[2, 0, 1], [1, 0, 2], [2, 1, 0]] {
            let (id2, raw2) = run(&net, &p, &set.permuted(&perm));
            assert!(id.max_abs_diff(&id2) <= 1e-5 && raw.max_abs_diff(&raw2) <= 1e-5);
        }
    }
}

#[test]
fn fusion_is_permutation_equivariant() {
    let net = ReconNet::new(small()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = net.init::<f64, _>(&mut rng);
    let sets: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[16, 16], |_| rng.random_range(-1.0..1.0))).collect();
    let fused = |order: &[usize]| {
        let mut t = Tape::new();
        let b = p.bind(&mut t, false).unwrap();
        let vars: Vec<Var> = order.iter().map(|&i| t.constant(sets[i].clone()).unwrap()).collect();
        let f = net.fuse(&mut t, &b, &vars).unwrap();
        let fq = net.head_query_attend(&mut t, &b, f).unwrap();
        (t.value(f).clone(), t.value(fq).clone())
    };
    let (a, qa) = fused(&[0, 1, 2]);
    let (b, qb) = fused(&[2, 0, 1]);
    let rows = 16 * 16;
    for (blk_a, blk_b) in [(0, 1), (1, 2), (2, 0)] {
        let x = &a.data()[blk_a * rows..(blk_a + 1) * rows];
        let y = &b.data()[blk_b * rows..(blk_b + 1) * rows];
        assert!(x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-10));
    }
    assert!(qa.max_abs_diff(&qb) < 1e-10);
    assert_eq!(qa.shape(), [16, 16]);
    let mut t = Tape::<f64>::new();
    let b = p.bind(&mut t, false).unwrap();
    assert!(net.fuse(&mut t, &b, &[]).is_err());
}

#[test]
fn head_query_ignores_row_order_and_length() {
    let net = ReconNet::new(small()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = net.init::<f64, _>(&mut rng);
    let agg = Tensor::from_fn(&[12, 16], |_| rng.random_range(-1.0..1.0));
    let perm = [5, 3, 11, 0, 1, 9, 2, 4, 10, 6, 8, 7];
    let shuffled = Tensor::from_fn(&[12, 16], |i| agg.data()[perm[i / 16] * 16 + i % 16]);
    let longer = Tensor::from_fn(&[48, 16], |_| rng.random_range(-1.0..1.0));
    let attend = |x: &Tensor<f64>| {
        let mut t = Tape::new();
        let b = p.bind(&mut t, false).unwrap();
        let v = t.constant(x.clone()).unwrap();
        let q = net.head_query_attend(&mut t, &b, v).unwrap();
        t.value(q).clone()
    };
    assert!(attend(&agg).max_abs_diff(&attend(&shuffled)) < 1e-12);
    assert_eq!(attend(&longer).shape(), attend(&agg).shape());
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, a)| (a - m) / (v + 1e-5).sqrt() * g[i] + b[i]).collect()
}

fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout).map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.data()[i * dout + j]).sum::<f64>()).collect()
}

#[test]
fn equal_context_rows_collapse_attention() {
    let cfg = small();
    let net = ReconNet::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = net.init::<f64, _>(&mut rng);
    let row: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ctx = Tensor::from_fn(&[7, 16], |i| row[i % 16]);
    let mut t = Tape::new();
    let b = p.bind(&mut t, false).unwrap();
    let c = t.constant(ctx).unwrap();
    let out = net.head_query_attend(&mut t, &b, c).unwrap();
    let out = t.value(out).clone();

    let g = |n: &str| p.get(n).unwrap();
    let kv = ln(&row, g("cross.block0.ln_ctx.g").data(), g("cross.block0.ln_ctx.b").data());
    let v = affine(&kv, g("cross.block0.attn.v.w"), g("cross.block0.attn.v.b"));
    let o = affine(&v, g("cross.block0.attn.o.w"), g("cross.block0.attn.o.b"));
    let q = g("query.tokens");
    for r in 0..16 {
        let x: Vec<f64> = (0..16).map(|j| q.data()[r * 16 + j] + o[j]).collect();
        let h = ln(&x, g("cross.block0.ln2.g").data(), g("cross.block0.ln2.b").data());
        let h1: Vec<f64> = affine(&h, g("cross.block0.mlp.fc1.w"), g("cross.block0.mlp.fc1.b")).into_iter().map(|z| z / (1.0 + (-z).exp())).collect();
        let m = affine(&h1, g("cross.block0.mlp.fc2.w"), g("cross.block0.mlp.fc2.b"));
        for j in 0..16 {
            assert!((out.data()[r * 16 + j] - (x[j] + m[j])).abs() < 1e-10);
        }
    }
}

#[test]
fn reshape_round_trips() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_fn(&[12, 5], |i| i as f64)).unwrap();
    let uv = reshape_uv(&mut t, x, 3, 4).unwrap();
    assert_eq!(t.shape(uv), [1, 5, 3, 4]);
    // channel c of query (r, col) is token r * 4 + col
    assert_eq!(t.value(uv).data()[2 * 12 + 4 + 3], (7 * 5 + 2) as f64);
    let back = flatten_uv(&mut t, uv).unwrap();
    assert_eq!(t.value(back), t.value(x));
    assert!(reshape_uv(&mut t, x, 3, 3).is_err());
}

#[test]
fn gray_image_gives_identical_patch_tokens() {
    let cfg = small();
    let net = ReconNet::new(cfg).unwrap();
    let p = net.init::<f64, _>(&mut ChaCha8Rng::seed_from_u64(6));
    let mut t = Tape::new();
    let b = p.bind(&mut t, false).unwrap();
    let img = t.constant(Tensor::full(&[3, 32, 32], 0.5)).unwrap();
    let tok = net.encoder.embed(&mut t, &b, img).unwrap();
    let v = t.value(tok);
    assert_eq!(v.shape(), [16, 16]);
    assert!(v.data().chunks(16).all(|r| r == &v.data()[..16]));
}

#[test]
fn injected_features_match_the_builtin_encoder() {
    let net = ReconNet::new(small()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = net.init::<f64, _>(&mut rng);
    let set = images(&mut rng, 2, 32);
    let mut t = Tape::new();
    let b = p.bind(&mut t, false).unwrap();
    let feats = (0..2)
        .map(|i| {
            let x = t.constant(set.images[i].clone()).unwrap();
            let e = ImageEncoder::encode(&net.encoder, &mut t, &b, i, x).unwrap();
            t.value(e).clone()
        })
        .collect();
    let direct = net.forward(&mut t, &b, &set).unwrap();
    let injected = net.forward_with(&mut t, &b, &PrecomputedFeatures { features: feats }, &set).unwrap();
    assert_eq!(t.value(direct.raw), t.value(injected.raw));
}

#[test]
fn zero_raw_maps_activate_to_the_canonical_start() {
    let cfg = small();
    let act = activation(&cfg);
    let raw: Tensor<f64> = Tensor::zeros(&[GAUSSIAN_DIM, 16, 16]);
    let m = act.maps(&raw).unwrap();
    assert!(m.opacity.data().iter().all(|&a| a == 0.5));
    assert!(m.color.data().iter().all(|&c| c == 0.5));
    assert!(m.position.max_abs_diff(&act.anchor) == 0.0);
    assert!(m.scale.data().iter().all(|&s| (s - act.s_init).abs() < 1e-12 && (s - act.scale_of(0.0)).abs() < 1e-15));
    let n = 256;
    for i in 0..n {
        assert!((m.rotation.data()[i] - 1.0).abs() < 1e-9);
        assert!((1..4).all(|k| m.rotation.data()[k * n + i] == 0.0));
    }
    // a zero decoder head through the network reaches the same maps
    let net = ReconNet::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut p = net.init::<f64, _>(&mut rng);
    for name in ["dec.gauss.w", "dec.gauss.b"] {
        let t = p.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let out = net.reconstruct(&p, &images(&mut rng, 2, 32), &act).unwrap();
    assert_eq!(out.maps, m);
}

#[test]
fn ranges_hold_for_arbitrary_raw_values() {
    let cfg = small();
    let act = activation(&cfg);
    let valid: Vec<usize> = (0..256).collect();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mag = [0.1, 1.0, 10.0, 30.0][seed as usize % 4];
        let raw = Tensor::from_fn(&[GAUSSIAN_DIM, 16, 16], |_| rng.random_range(-mag..mag));
        let out = AvatarCanonical::from_raw(Tensor::zeros(&[1, 16, 16]), raw, &act).unwrap();
        out.check_ranges(&act, &valid, 1e-6).unwrap();
    }
}

#[test]
fn ranges_hold_for_random_networks() {
    let cfg = small();
    let act = activation(&cfg);
    let net = ReconNet::new(cfg).unwrap();
    let valid: Vec<usize> = (0..256).collect();
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut p = net.init::<f32, _>(&mut rng);
        // exaggerate the head so activations saturate
        for v in p.get_mut("dec.gauss.w").unwrap().data_mut() {
            *v *= 300.0;
        }
        let mut set = images(&mut rng, 2, 32);
        let out = net.reconstruct(&p, &set, &act).unwrap();
        out.check_ranges(&act, &valid, 1e-5).unwrap();
        // an extra all-background image still decodes to valid maps
        set.images.push(Tensor::zeros(&[3, 32, 32]));
        set.masks.push(Tensor::zeros(&[32, 32]));
        let extra = net.reconstruct(&p, &set, &act).unwrap();
        extra.check_ranges(&act, &valid, 1e-5).unwrap();
        assert!(extra.raw.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = small();
    let act = activation(&cfg);
    let net = ReconNet::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = net.init::<f64, _>(&mut rng);
    let set = images(&mut rng, 2, 32);
    let mut t = Tape::new();
    let b = p.bind(&mut t, true).unwrap();
    let v = net.forward(&mut t, &b, &set).unwrap();
    let m = act.apply(&mut t, v.raw).unwrap();
    let mut loss = None;
    for x in [v.id, m.position, m.opacity, m.scale, m.color, m.rotation] {
        let w = t.constant(Tensor::from_fn(t.shape(x), |_| rng.random_range(-1.0..1.0))).unwrap();
        let y = t.mul(x, w).unwrap();
        let s = t.sum(y).unwrap();
        loss = Some(match loss {
            None => s,
            Some(l) => t.add(l, s).unwrap(),
        });
    }
    let g = t.backward(loss.unwrap(), None).unwrap();
    let (mut nonzero, mut total) = (0usize, 0usize);
    for (name, _) in p.iter() {
        let gr = g.get(name).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(gr.data().iter().any(|&x| x != 0.0), "{name} gradient is all zero");
        nonzero += gr.data().iter().filter(|&&x| x != 0.0).count();
        total += gr.numel();
    }
    assert!(nonzero as f64 > 0.95 * total as f64, "{nonzero}/{total}");
}
