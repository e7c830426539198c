//! Per-image tokenizers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::attention::Block;
use super::ReconConfig;
use crate::checkpoint::{Bound, ParamStore};
use crate::nn::Conv;
use crate::{Error, Result, Scalar, Tape, Tensor, Var};

/// Turns one `3 x H x W` image into `L x D` tokens.
pub trait ImageEncoder<T: Scalar>: Send + Sync {
    fn encode(&self, tape: &mut Tape<T>, params: &Bound, index: usize, image: Var) -> Result<Var>;
}

/// Two strided convolutions (4x4, then patch/4) and self-attention blocks, with
/// a learned positional embedding applied inside each image.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub embed1: Conv,
    pub embed2: Conv,
    pub blocks: Vec<Block>,
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
}

impl PatchEncoder {
    pub fn new(cfg: &ReconConfig) -> Self {
        let hidden = (cfg.token_dim / 4).max(8);
        let second = cfg.patch / 4;
        Self {
            embed1: Conv::new("enc.embed1", 3, hidden, 4, 4, 0),
            embed2: Conv::new("enc.embed2", hidden, cfg.token_dim, second, second, 0),
            blocks: (0..cfg.encoder_depth).map(|i| Block::new(&format!("enc.block{i}"), cfg.token_dim, cfg.heads, cfg.mlp_ratio, false)).collect(),
            image_size: cfg.image_size,
            patch: cfg.patch,
            dim: cfg.token_dim,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.embed1.init(store, rng);
        self.embed2.init(store, rng);
        let d = Normal::new(0.0, 0.02).expect("positive std");
        store.insert("enc.pos", Tensor::from_fn(&[self.tokens(), self.dim], |_| T::lit(d.sample(rng))));
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    /// Patch tokens before the positional embedding, `L x D`.
    pub fn embed<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, image: Var) -> Result<Var> {
        let s = t.shape(image).to_vec();
        if s != [3, self.image_size, self.image_size] {
            return Err(Error::Shape { op: "encode_image", detail: format!("expected {:?}, got {s:?}", [3, self.image_size, self.image_size]) });
        }
        let x = t.reshape(image, &[1, 3, s[1], s[2]])?;
        let x = self.embed1.forward(t, b, x)?;
        let x = t.silu(x)?;
        let x = self.embed2.forward(t, b, x)?;
        let x = t.reshape(x, &[self.dim, self.tokens()])?;
        t.transpose(x)
    }
}

impl<T: Scalar> ImageEncoder<T> for PatchEncoder {
    fn encode(&self, t: &mut Tape<T>, b: &Bound, _index: usize, image: Var) -> Result<Var> {
        let x = self.embed(t, b, image)?;
        let mut x = t.add(x, b.get("enc.pos"))?;
        for blk in &self.blocks {
            x = blk.forward(t, b, x, None)?;
        }
        Ok(x)
    }
}

/// Externally computed `L x D` features, one tensor per input image.
#[derive(Clone, Debug)]
pub struct PrecomputedFeatures<T> {
    pub features: Vec<Tensor<T>>,
}

impl<T: Scalar> ImageEncoder<T> for PrecomputedFeatures<T> {
    fn encode(&self, t: &mut Tape<T>, _b: &Bound, index: usize, _image: Var) -> Result<Var> {
        let f = self.features.get(index).ok_or_else(|| Error::Invalid(format!("no precomputed features for image {index}")))?;
        t.constant(f.clone())
    }
}
