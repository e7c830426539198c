//! Training objectives on `3 x H x W` images and UV Gaussian maps.

mod perceptual;

use std::fmt::Write as _;
use std::path::Path;

pub use perceptual::{MetricRegistry, PerceptualMetric, SobelPyramid, DEFAULT_METRIC};

use crate::{Error, Result, Scalar, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub mouth: f64,
    pub xyz: f64,
    pub scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, ssim: 0.1, lpips: 0.2, mouth: 10.0, xyz: 0.01, scale: 1.0 }
    }
}

pub const COMPONENTS: [&str; 6] = ["l1", "ssim", "lpips", "mouth", "xyz", "scale"];

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.l1, self.ssim, self.lpips, self.mouth, self.xyz, self.scale]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    /// Weighted sum of component values, in [`COMPONENTS`] order.
    pub fn total(&self, components: &[f64; 6]) -> Result<f64> {
        if let Some(i) = components.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite { op: format!("loss component {}", COMPONENTS[i]) });
        }
        Ok(self.as_array().iter().zip(components).map(|(w, c)| w * c).sum())
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape { op, detail: format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)) });
    }
    Ok(())
}

pub fn l1<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "l1", pred, gt)?;
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Per-pixel SSIM map over valid window positions, `C x 1 x (H-10) x (W-10)`.
fn ssim_map<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "ssim", pred, gt)?;
    let s = tape.shape(pred).to_vec();
    if s.len() != 3 || s[1] < SSIM_WINDOW || s[2] < SSIM_WINDOW {
        return Err(Error::Invalid(format!("ssim needs C x H x W images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {s:?}")));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let gv = tape.constant(Tensor::new(vec![1, 1, SSIM_WINDOW, 1], g.iter().map(|&v| T::lit(v)).collect())?)?;
    let gh = tape.constant(Tensor::new(vec![1, 1, 1, SSIM_WINDOW], g.iter().map(|&v| T::lit(v)).collect())?)?;
    let x = tape.reshape(pred, &[s[0], 1, s[1], s[2]])?;
    let y = tape.reshape(gt, &[s[0], 1, s[1], s[2]])?;
    let blur = |t: &mut Tape<T>, v: Var| -> Result<Var> {
        let a = t.conv2d(v, gv, None, 1, 0)?;
        t.conv2d(a, gh, None, 1, 0)
    };
    let mx = blur(tape, x)?;
    let my = blur(tape, y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let exx = blur(tape, xx)?;
    let eyy = blur(tape, yy)?;
    let exy = blur(tape, xy)?;
    let mxx = tape.mul(mx, mx)?;
    let myy = tape.mul(my, my)?;
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(exx, mxx)?;
    let vy = tape.sub(eyy, myy)?;
    let cxy = tape.sub(exy, mxy)?;
    let n1 = tape.scale(mxy, 2.0)?;
    let n1 = tape.add_scalar(n1, SSIM_C1)?;
    let n2 = tape.scale(cxy, 2.0)?;
    let n2 = tape.add_scalar(n2, SSIM_C2)?;
    let d1 = tape.add(mxx, myy)?;
    let d1 = tape.add_scalar(d1, SSIM_C1)?;
    let d2 = tape.add(vx, vy)?;
    let d2 = tape.add_scalar(d2, SSIM_C2)?;
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    tape.div_pos(num, den)
}

/// `1 - mean SSIM`.
pub fn ssim_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let m = ssim_map(tape, pred, gt)?;
    let mean = tape.mean(m)?;
    let neg = tape.neg(mean)?;
    tape.add_scalar(neg, 1.0)
}

pub fn perceptual<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, metric: &dyn PerceptualMetric<T>) -> Result<Var> {
    same_shape(tape, "perceptual", pred, gt)?;
    metric.distance(tape, pred, gt)
}

/// Perceptual distance between the images restricted to an `H x W` mask.
/// An empty mask yields a constant zero.
pub fn mouth_perceptual<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, mask: &Tensor<T>, metric: &dyn PerceptualMetric<T>) -> Result<Var> {
    same_shape(tape, "mouth_perceptual", pred, gt)?;
    if mask.data().iter().all(|&m| m == T::zero()) {
        log::debug!("event=empty_mouth_mask mouth_term=0");
        return tape.constant(Tensor::scalar(T::zero()));
    }
    let p = tape.mask_mul(pred, mask)?;
    let g = tape.mask_mul(gt, mask)?;
    metric.distance(tape, p, g)
}

/// Mean over valid texels of `|x - anchor|^2` for `C x H x W` maps and an `H x W` mask.
pub fn anchor_penalty<T: Scalar>(tape: &mut Tape<T>, x: Var, anchor: &Tensor<T>, valid: &Tensor<T>) -> Result<Var> {
    if tape.shape(x) != anchor.shape() || tape.shape(x)[1..] != *valid.shape() {
        return Err(Error::Shape {
            op: "regularizer",
            detail: format!("map {:?}, anchor {:?}, mask {:?}", tape.shape(x), anchor.shape(), valid.shape()),
        });
    }
    let count = valid.data().iter().filter(|&&m| m != T::zero()).count();
    if count == 0 {
        return tape.constant(Tensor::scalar(T::zero()));
    }
    let a = tape.constant(anchor.clone())?;
    let d = tape.sub(x, a)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mask_mul(sq, valid)?;
    let s = tape.sum(m)?;
    tape.scale(s, 1.0 / count as f64)
}

/// Anchors for the position and scale penalties.
#[derive(Clone, Debug)]
pub struct RegularizerAnchors<T> {
    pub position: Tensor<T>,
    pub scale: Tensor<T>,
    pub valid: Tensor<T>,
}

/// `(L_xyz, L_scale)`.
pub fn regularizers<T: Scalar>(tape: &mut Tape<T>, position: Var, scale: Var, anchors: &RegularizerAnchors<T>) -> Result<(Var, Var)> {
    let lx = anchor_penalty(tape, position, &anchors.position, &anchors.valid)?;
    let ls = anchor_penalty(tape, scale, &anchors.scale, &anchors.valid)?;
    Ok((lx, ls))
}

/// Weighted combination on the tape; components in [`COMPONENTS`] order.
/// `None` components are absent (contribute nothing).
pub fn total<T: Scalar>(tape: &mut Tape<T>, components: &[Option<Var>; 6], weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut acc: Option<Var> = None;
    for ((c, w), name) in components.iter().zip(weights.as_array()).zip(COMPONENTS) {
        let Some(c) = *c else { continue };
        if !tape.value(c).is_finite() {
            return Err(Error::NonFinite { op: format!("loss component {name}") });
        }
        let term = tape.scale(c, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => tape.constant(Tensor::scalar(T::zero())),
    }
}

/// Per-step loss record, exportable as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<(usize, [f64; 6], f64)>,
}

impl LossLog {
    pub fn push(&mut self, step: usize, components: [f64; 6], total: f64) {
        self.rows.push((step, components, total));
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{},total\n", COMPONENTS.join(","));
        for (step, c, t) in &self.rows {
            let _ = write!(s, "{step}");
            for v in c {
                let _ = write!(s, ",{v:e}");
            }
            let _ = writeln!(s, ",{t:e}");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Every loss exercised by [`grad_check_loss`].
pub const LOSS_CATALOG: &[&str] = &["l1", "ssim", "perceptual", "mouth_perceptual", "xyz", "scale", "total"];

/// Finite-difference check of one loss with respect to its prediction, on
/// random 16x16 inputs (64-bit).
pub fn grad_check_loss(name: &str, seed: u64, eps: f64) -> Result<f64> {
    use crate::autodiff::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16, 16);
    let img = |rng: &mut rand_chacha::ChaCha8Rng| Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));
    let pred = img(&mut rng);
    // keep |pred - gt| away from the kink of the absolute value
    let gt = Tensor::from_fn(&[3, h, w], |i| {
        let d = rng.random_range(0.05..0.3);
        pred.data()[i] + if rng.random_bool(0.5) { d } else { -d }
    });
    let mask = Tensor::from_fn(&[h, w], |i| if (3..12).contains(&(i / w)) && (4..13).contains(&(i % w)) { 1.0 } else { 0.0 });
    let anchor = img(&mut rng);
    // the target is data, so only the prediction is perturbed
    let inputs = vec![("pred".to_string(), pred)];
    let metric = SobelPyramid::default();
    let anchors = RegularizerAnchors { position: anchor.clone(), scale: anchor, valid: mask.clone() };
    let build = |t: &mut Tape<f64>, p: &[Var]| -> Result<Var> {
        let g = t.constant(gt.clone())?;
        let v = [p[0], g];
        match name {
            "l1" => l1(t, v[0], v[1]),
            "ssim" => ssim_loss(t, v[0], v[1]),
            "perceptual" => perceptual(t, v[0], v[1], &metric),
            "mouth_perceptual" => mouth_perceptual(t, v[0], v[1], &mask, &metric),
            "xyz" => Ok(regularizers(t, v[0], v[0], &anchors)?.0),
            "scale" => Ok(regularizers(t, v[0], v[0], &anchors)?.1),
            "total" => {
                let a = l1(t, v[0], v[1])?;
                let b = ssim_loss(t, v[0], v[1])?;
                let c = perceptual(t, v[0], v[1], &metric)?;
                let d = mouth_perceptual(t, v[0], v[1], &mask, &metric)?;
                let (e, f) = regularizers(t, v[0], v[0], &anchors)?;
                total(t, &[Some(a), Some(b), Some(c), Some(d), Some(e), Some(f)], &LossWeights::default())
            }
            _ => Err(Error::Invalid(format!("unknown loss '{name}'"))),
        }
    };
    grad_check(build, &inputs, eps)
}

#[cfg(test)]
mod tests;
