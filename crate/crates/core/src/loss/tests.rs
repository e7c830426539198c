use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn img(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0))
}

fn eval2(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> f64 {
    let mut t = Tape::new();
    let x = t.input("a", a.clone()).unwrap();
    let y = t.input("b", b.clone()).unwrap();
    let out = f(&mut t, x, y).unwrap();
    t.value(out).item()
}

/// Direct SSIM: 2D Gaussian window at every valid position.
fn ssim_brute(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let g = gaussian_window(11, 1.5);
    let (oh, ow) = (s[1] - 10, s[2] - 10);
    let mut acc = 0.0;
    for c in 0..s[0] {
        for y in 0..oh {
            for x in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = g[i] * g[j];
                        let k = (c * s[1] + y + i) * s[2] + x + j;
                        let (p, q) = (a.data()[k], b.data()[k]);
                        mx += w * p;
                        my += w * q;
                        xx += w * p * p;
                        yy += w * q * q;
                        xy += w * p * q;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
    }
    1.0 - acc / (s[0] * oh * ow) as f64
}

#[test]
fn l1_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = img(&mut rng, 8, 8);
    assert_eq!(eval2(&a, &a, |t, x, y| l1(t, x, y)), 0.0);
    let shifted = a.map(|v| v + 0.5);
    assert!((eval2(&shifted, &a, |t, x, y| l1(t, x, y)) - 0.5).abs() < 1e-12);
    let b = img(&mut rng, 8, 8);
    let brute: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.numel() as f64;
    assert!((eval2(&a, &b, |t, x, y| l1(t, x, y)) - brute).abs() < 1e-12);
}

#[test]
fn ssim_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = img(&mut rng, 16, 18);
    assert!(eval2(&a, &a, |t, x, y| ssim_loss(t, x, y)).abs() < 1e-12);
    let b = img(&mut rng, 16, 18);
    assert!((eval2(&a, &b, |t, x, y| ssim_loss(t, x, y)) - ssim_brute(&a, &b)).abs() < 1e-10);
    // uniform patches: only the luminance term survives
    let (m, d) = (0.4, 0.05);
    let c0 = Tensor::full(&[3, 12, 12], m);
    let c1 = Tensor::full(&[3, 12, 12], m + d);
    let expect = 1.0 - (2.0 * m * (m + d) + SSIM_C1) / (m * m + (m + d) * (m + d) + SSIM_C1);
    assert!((eval2(&c0, &c1, |t, x, y| ssim_loss(t, x, y)) - expect).abs() < 1e-10);
    let checker = Tensor::from_fn(&[3, 16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
    let anti = checker.map(|v| 1.0 - v);
    let worst = eval2(&checker, &anti, |t, x, y| ssim_loss(t, x, y));
    assert!((worst - ssim_brute(&checker, &anti)).abs() < 1e-10);
    assert!(worst > 1.95, "{worst}");
    let small: Tensor<f64> = Tensor::zeros(&[3, 8, 8]);
    let mut t = Tape::new();
    let x = t.input("x", small).unwrap();
    assert!(ssim_loss(&mut t, x, x).is_err());
}

fn blur(a: &Tensor<f64>, radius: usize) -> Tensor<f64> {
    let s = a.shape().to_vec();
    Tensor::from_fn(&s, |i| {
        let (c, y, x) = (i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]);
        let mut acc = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(radius)..(y + radius + 1).min(s[1]) {
            for xx in x.saturating_sub(radius)..(x + radius + 1).min(s[2]) {
                acc += a.data()[(c * s[1] + yy) * s[2] + xx];
                n += 1.0;
            }
        }
        acc / n
    })
}

#[test]
fn perceptual_default_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = img(&mut rng, 32, 32);
    let metric = SobelPyramid::default();
    assert_eq!(eval2(&a, &a, |t, x, y| perceptual(t, x, y, &metric)), 0.0);
    let d1 = eval2(&blur(&a, 1), &a, |t, x, y| perceptual(t, x, y, &metric));
    let d2 = eval2(&blur(&a, 2), &a, |t, x, y| perceptual(t, x, y, &metric));
    assert!(d1 > 0.0 && d2 > d1, "{d1} {d2}");
}

struct Constant;

impl PerceptualMetric<f64> for Constant {
    fn name(&self) -> &str {
        "constant"
    }
    fn distance(&self, tape: &mut Tape<f64>, _p: Var, _g: Var) -> Result<Var> {
        tape.constant(Tensor::scalar(0.125))
    }
}

#[test]
fn registry_resolves_and_rejects() {
    let mut reg = MetricRegistry::<f64>::default();
    assert!(reg.get("nope").is_err());
    reg.register(Arc::new(Constant));
    let m = reg.get("constant").unwrap();
    let a = Tensor::zeros(&[3, 4, 4]);
    assert_eq!(eval2(&a, &a, |t, x, y| perceptual(t, x, y, m.as_ref())), 0.125);
    assert!(reg.names().any(|n| n == DEFAULT_METRIC));
}

#[test]
fn mouth_term_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (img(&mut rng, 24, 24), img(&mut rng, 24, 24));
    let metric = SobelPyramid::default();
    let full = Tensor::ones(&[24, 24]);
    let plain = eval2(&a, &b, |t, x, y| perceptual(t, x, y, &metric));
    assert_eq!(eval2(&a, &b, |t, x, y| mouth_perceptual(t, x, y, &full, &metric)), plain);
    let none = Tensor::zeros(&[24, 24]);
    assert_eq!(eval2(&a, &b, |t, x, y| mouth_perceptual(t, x, y, &none, &metric)), 0.0);
    let mask = Tensor::from_fn(&[24, 24], |i| if (8..16).contains(&(i / 24)) && (6..18).contains(&(i % 24)) { 1.0 } else { 0.0 });
    let outside = Tensor::from_fn(&[3, 24, 24], |i| if mask.data()[i % 576] == 1.0 { a.data()[i] } else { b.data()[i] });
    assert_eq!(eval2(&a, &outside, |t, x, y| mouth_perceptual(t, x, y, &mask, &metric)), 0.0);
}

#[test]
fn regularizer_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let anchor = img(&mut rng, 6, 7);
    let valid = Tensor::from_fn(&[6, 7], |i| if i % 5 == 0 { 0.0 } else { 1.0 });
    let anchors = RegularizerAnchors { position: anchor.clone(), scale: anchor.clone(), valid: valid.clone() };
    let reg = |p: &Tensor<f64>| {
        let mut t = Tape::new();
        let x = t.input("p", p.clone()).unwrap();
        let (lx, ls) = regularizers(&mut t, x, x, &anchors).unwrap();
        (t.value(lx).item(), t.value(ls).item())
    };
    assert_eq!(reg(&anchor), (0.0, 0.0));
    let d = [0.1, -0.2, 0.05];
    let moved = Tensor::from_fn(&[3, 6, 7], |i| anchor.data()[i] + d[i / 42]);
    let expect = d.iter().map(|v| v * v).sum::<f64>();
    assert!((reg(&moved).0 - expect).abs() < 1e-12);
    let r = img(&mut rng, 6, 7);
    let count = valid.data().iter().filter(|&&v| v == 1.0).count() as f64;
    let brute = (0..3 * 42).filter(|i| valid.data()[i % 42] == 1.0).map(|i| (r.data()[i] - anchor.data()[i]).powi(2)).sum::<f64>() / count;
    assert!((reg(&r).1 - brute).abs() < 1e-12);
}

#[test]
fn total_uses_the_default_weights() {
    let w = LossWeights::default();
    assert_eq!(w.total(&[0.0; 6]).unwrap(), 0.0);
    assert_eq!(w.total(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
    assert_eq!(w.total(&[0.0, 0.0, 0.0, 0.1, 0.0, 0.0]).unwrap(), 1.0);
    assert!(w.total(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    let a = [0.3, 0.2, 0.1, 0.05, 2.0, 0.01];
    let b = [0.1, 0.4, 0.2, 0.02, 1.0, 0.03];
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let lin = w.total(&sum.try_into().unwrap()).unwrap() - w.total(&a).unwrap() - w.total(&b).unwrap();
    assert!(lin.abs() < 1e-12);
    let mut t = Tape::<f64>::new();
    let comps: Vec<Option<Var>> = a.iter().map(|&v| Some(t.constant(Tensor::scalar(v)).unwrap())).collect();
    let tot = total(&mut t, &comps.try_into().unwrap(), &w).unwrap();
    assert!((t.value(tot).item() - w.total(&a).unwrap()).abs() < 1e-15);
    assert!(LossWeights { mouth: -1.0, ..w }.validate().is_err());
}

#[test]
fn loss_csv_has_every_component() {
    let mut log = LossLog::default();
    log.push(0, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 7.0);
    let csv = log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,l1,ssim,lpips,mouth,xyz,scale,total");
    assert_eq!(lines.next().unwrap().split(',').count(), 8);
}
