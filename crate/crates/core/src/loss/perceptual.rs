//! Pluggable perceptual distances.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::{Error, Result, Scalar, Tape, Tensor, Var};

/// A differentiable image distance on `3 x H x W` images.
pub trait PerceptualMetric<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var>;
}

/// Multi-scale gradient-magnitude pyramid: at each scale, the mean smoothed
/// absolute difference `d^2 / sqrt(d^2 + 1e-2)` of per-channel Sobel
/// magnitudes; scales are 2x average pooled.
#[derive(Clone, Debug)]
pub struct SobelPyramid {
    pub scales: usize,
}

impl Default for SobelPyramid {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

pub const DEFAULT_METRIC: &str = "sobel-pyramid";

fn kernel<T: Scalar>(tape: &mut Tape<T>, k: usize, v: &[f64]) -> Result<Var> {
    tape.constant(Tensor::new(vec![1, 1, k, k], v.iter().map(|&x| T::lit(x)).collect())?)
}

impl SobelPyramid {
    /// `C x 1 x H x W` planes to Sobel magnitudes.
    fn magnitude<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let kx = kernel(tape, 3, &[-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0])?;
        let ky = kernel(tape, 3, &[-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0])?;
        let gx = tape.conv2d(x, kx, None, 1, 0)?;
        let gy = tape.conv2d(x, ky, None, 1, 0)?;
        let gx2 = tape.mul(gx, gx)?;
        let gy2 = tape.mul(gy, gy)?;
        let s = tape.add(gx2, gy2)?;
        tape.sqrt_eps(s, 1e-4)
    }
}

impl<T: Scalar> PerceptualMetric<T> for SobelPyramid {
    fn name(&self) -> &str {
        DEFAULT_METRIC
    }

    fn distance(&self, tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
        let s = tape.shape(pred).to_vec();
        if s.len() != 3 || tape.shape(gt) != s.as_slice() {
            return Err(Error::Shape { op: "perceptual", detail: format!("{:?} vs {:?}", s, tape.shape(gt)) });
        }
        let pool = kernel(tape, 2, &[0.25; 4])?;
        let mut x = tape.reshape(pred, &[s[0], 1, s[1], s[2]])?;
        let mut y = tape.reshape(gt, &[s[0], 1, s[1], s[2]])?;
        let mut terms = Vec::with_capacity(self.scales);
        for level in 0..self.scales {
            let sh = tape.shape(x).to_vec();
            if sh[2] < 3 || sh[3] < 3 {
                break;
            }
            let mx = self.magnitude(tape, x)?;
            let my = self.magnitude(tape, y)?;
            let d = tape.sub(mx, my)?;
            let d2 = tape.mul(d, d)?;
            let r = tape.sqrt_eps(d2, 1e-2)?;
            let d = tape.div_pos(d2, r)?;
            terms.push(tape.mean(d)?);
            if level + 1 < self.scales && sh[2] >= 2 && sh[3] >= 2 {
                x = tape.conv2d(x, pool, None, 2, 0)?;
                y = tape.conv2d(y, pool, None, 2, 0)?;
            }
        }
        if terms.is_empty() {
            return Err(Error::Invalid("image too small for the gradient pyramid".into()));
        }
        let n = terms.len() as f64;
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        tape.scale(acc, 1.0 / n)
    }
}

/// Named perceptual metrics; the default registry holds [`SobelPyramid`].
pub struct MetricRegistry<T: Scalar> {
    metrics: BTreeMap<String, Arc<dyn PerceptualMetric<T>>>,
}

impl<T: Scalar> Default for MetricRegistry<T> {
    fn default() -> Self {
        let mut r = Self { metrics: BTreeMap::new() };
        r.register(Arc::new(SobelPyramid::default()));
        r
    }
}

impl<T: Scalar> MetricRegistry<T> {
    pub fn register(&mut self, metric: Arc<dyn PerceptualMetric<T>>) {
        self.metrics.insert(metric.name().to_string(), metric);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn PerceptualMetric<T>>> {
        self.metrics.get(name).cloned().ok_or_else(|| Error::Invalid(format!("perceptual metric '{name}' is not registered")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.keys().map(String::as_str)
    }
}
