//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::checkpoint::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `params` that has a gradient.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<f64> {
        let mut sq = 0.0f64;
        for (name, g) in grads.iter() {
            if params.get(name).is_some() {
                sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteGrad { op: "optimizer".into() });
        }
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let (rbc2, eps, f) = (T::lit(1.0 / bc2), T::lit(self.eps), T::lit(factor));
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            if p.shape() != g.shape() {
                return Err(Error::Shape { op: "adam", detail: format!("{name}: {:?} vs {:?}", p.shape(), g.shape()) });
            }
            let n = p.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            for i in 0..n {
                let gi = g.data()[i] * f;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let denom = (v[i] * rbc2).sqrt() + eps;
                p.data_mut()[i] = p.data()[i] - step_size * m[i] / denom;
            }
        }
        Ok(norm)
    }
}

/// Copies `src` into `dst` wherever `keep` is nonzero (broadcast over leading axes).
pub fn restore_masked<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, keep: &[bool]) {
    assert_eq!(dst.shape(), src.shape());
    let n = keep.len();
    for (i, (d, s)) in dst.data_mut().iter_mut().zip(src.data()).enumerate() {
        if keep[i % n] {
            *d = *s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true).unwrap();
        let sq = tape.mul(b.get("x"), b.get("x")).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l, None).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &g).unwrap();
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::new(vec![3], vec![2.0, -3.0, 0.5]).unwrap());
        let mut adam = Adam::new(0.05);
        for _ in 0..600 {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, true).unwrap();
            let c = tape.add_scalar(b.get("x"), -1.0).unwrap();
            let sq = tape.mul(c, c).unwrap();
            let l = tape.sum(sq).unwrap();
            let g = tape.backward(l, None).unwrap();
            adam.step(&mut p, &g).unwrap();
        }
        assert!(p.get("x").unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-2));
    }
}
