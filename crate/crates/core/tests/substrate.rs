use proptest::prelude::*;
use uvhead::autodiff::{grad_check_op, sample_inputs, CATALOG};
use uvhead::{Tape, Tensor};

#[test]
fn every_catalog_op_passes_grad_check_over_ten_seeds() {
    for op in CATALOG {
        for seed in 0..10 {
            let inputs = sample_inputs(op, seed).unwrap();
            let err = grad_check_op(op, &inputs, 1e-4).unwrap();
            assert!(err < 1e-4, "{op} seed {seed}: {err}");
        }
    }
}

fn small_graph(t: &mut Tape<f64>, x: uvhead::Var, w: uvhead::Var, which: u8) -> uvhead::Var {
    let h = t.matmul(x, w).unwrap();
    let y = match which {
        0 => t.tanh(h).unwrap(),
        1 => t.sigmoid(h).unwrap(),
        _ => t.softmax(h).unwrap(),
    };
    let y2 = t.mul(y, y).unwrap();
    t.sum(y2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_is_linear(xs in prop::collection::vec(-1.0f64..1.0, 12), ws in prop::collection::vec(-1.0f64..1.0, 12),
                          alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let x = Tensor::new(vec![3, 4], xs).unwrap();
        let w = Tensor::new(vec![4, 3], ws).unwrap();
        let grads = |f: &dyn Fn(&mut Tape<f64>, uvhead::Var, uvhead::Var) -> uvhead::Var| {
            let mut t = Tape::new();
            let xv = t.input("x", x.clone()).unwrap();
            let wv = t.param("w", w.clone()).unwrap();
            let out = f(&mut t, xv, wv);
            let g = t.backward(out, None).unwrap();
            (g.get("x").unwrap().clone(), g.get("w").unwrap().clone())
        };
        let (fx, fw) = grads(&|t, x, w| small_graph(t, x, w, 0));
        let (gx, gw) = grads(&|t, x, w| small_graph(t, x, w, 2));
        let (cx, cw) = grads(&|t, x, w| {
            let f = small_graph(t, x, w, 0);
            let g = small_graph(t, x, w, 2);
            let a = t.scale(f, alpha).unwrap();
            let b = t.scale(g, beta).unwrap();
            t.add(a, b).unwrap()
        });
        for (c, (f, g)) in cx.data().iter().chain(cw.data()).zip(fx.data().iter().chain(fw.data()).zip(gx.data().iter().chain(gw.data()))) {
            prop_assert!((c - (alpha * f + beta * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure(xs in prop::collection::vec(-3.0f32..3.0, 2 * 3 * 8 * 8)) {
        let run = || {
            let mut t = Tape::<f32>::new();
            let x = t.constant(Tensor::new(vec![2, 3, 8, 8], xs.clone()).unwrap()).unwrap();
            let w = t.constant(Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 37 % 11) as f32 - 5.0) * 0.1)).unwrap();
            let y = t.conv2d(x, w, None, 1, 1).unwrap();
            let z = t.reshape(y, &[8, 64]).unwrap();
            let s = t.softmax(z).unwrap();
            t.value(s).clone()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.data(), b.data());
    }
}
