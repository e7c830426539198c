//! Feed-forward reconstruction: images to identity features and static Gaussian maps.
//!
//! Images are tokenized one at a time, the token sets are concatenated and
//! fused by self-attention (no cross-image positional encoding, so the model
//! sees a set), learned head queries cross-attend to the fused tokens, and the
//! query grid is decoded to UV maps.

mod attention;
mod decoder;
mod encoder;
#[cfg(test)]
mod tests;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use attention::{Attention, Block};
pub use decoder::{Activation, Decoder, MapVars, GAUSSIAN_DIM, RAW_LAYOUT};
pub use encoder::{ImageEncoder, PatchEncoder, PrecomputedFeatures};

use crate::checkpoint::{Bound, ParamStore};
use crate::render::GaussianMapSet;
use crate::{Error, Result, Scalar, Tape, Tensor, Var};

/// Network sizes. Every key is optional in the TOML form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub image_size: usize,
    pub patch: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub encoder_depth: usize,
    pub self_depth: usize,
    pub cross_depth: usize,
    pub query_h: usize,
    pub query_w: usize,
    pub uv_size: usize,
    pub id_dim: usize,
    pub decoder_min_width: usize,
    pub max_images: usize,
    /// Position offset range as a fraction of the rig extent.
    pub pos_range_frac: f64,
    /// Largest scale as a fraction of the rig extent.
    pub scale_max_frac: f64,
    /// Scale at a zero raw value, as a fraction of the largest scale.
    pub scale_init_frac: f64,
    /// Multiplier on the Gaussian head's initial weights.
    pub head_init: f64,
    pub query_init_std: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            patch: 16,
            token_dim: 128,
            heads: 4,
            mlp_ratio: 2,
            encoder_depth: 2,
            self_depth: 2,
            cross_depth: 2,
            query_h: 16,
            query_w: 16,
            uv_size: 64,
            id_dim: 16,
            decoder_min_width: 32,
            max_images: 4,
            pos_range_frac: 0.1,
            scale_max_frac: 0.05,
            scale_init_frac: 0.4,
            head_init: 0.01,
            query_init_std: 0.5,
        }
    }
}

impl ReconConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("recon config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    pub fn tokens_per_image(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn query_count(&self) -> usize {
        self.query_h * self.query_w
    }

    pub fn upsample_stages(&self) -> usize {
        (self.uv_size / self.query_h).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.patch < 4 || self.patch % 4 != 0 || self.image_size % self.patch != 0 {
            return bad(format!("image size {} and patch {} (patch must be a multiple of 4 dividing the image)", self.image_size, self.patch));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return bad(format!("token_dim {} not divisible by {} heads", self.token_dim, self.heads));
        }
        if self.query_h != self.query_w || self.uv_size % self.query_h != 0 || !(self.uv_size / self.query_h).is_power_of_two() {
            return bad(format!("uv_size {} must be a power-of-two multiple of a square {}x{} query grid", self.uv_size, self.query_h, self.query_w));
        }
        if self.max_images == 0 || self.id_dim == 0 || self.mlp_ratio == 0 {
            return bad("max_images, id_dim and mlp_ratio must be positive".into());
        }
        if !(self.scale_init_frac > 0.0 && self.scale_init_frac < 1.0) || self.scale_max_frac <= 0.0 || self.pos_range_frac <= 0.0 {
            return bad("scale and position fractions out of range".into());
        }
        Ok(())
    }
}

/// Input images (`3 x H x W`, values in [0, 1]) with foreground masks (`H x W`).
#[derive(Clone, Debug)]
pub struct ImageSet<T> {
    pub images: Vec<Tensor<T>>,
    pub masks: Vec<Tensor<T>>,
}

impl<T: Scalar> ImageSet<T> {
    pub fn new(images: Vec<Tensor<T>>, masks: Vec<Tensor<T>>) -> Result<Self> {
        if images.len() != masks.len() {
            return Err(Error::Invalid(format!("{} images but {} masks", images.len(), masks.len())));
        }
        for (i, m) in images.iter().zip(&masks) {
            let s = i.shape();
            if s.len() != 3 || s[0] != 3 || m.shape() != &s[1..] {
                return Err(Error::Shape { op: "image set", detail: format!("image {s:?} mask {:?}", m.shape()) });
            }
        }
        Ok(Self { images, masks })
    }

    /// Images without masking information (everything foreground).
    pub fn unmasked(images: Vec<Tensor<T>>) -> Result<Self> {
        let masks = images.iter().map(|i| Tensor::ones(&i.shape()[1..])).collect();
        Self::new(images, masks)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { images: perm.iter().map(|&i| self.images[i].clone()).collect(), masks: perm.iter().map(|&i| self.masks[i].clone()).collect() }
    }
}

/// Tape variables of one reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct ReconVars {
    /// `id_dim x H x W`.
    pub id: Var,
    /// `14 x H x W`, pre-activation.
    pub raw: Var,
}

/// Identity features plus static maps, with the raw maps kept for dynamic fusion.
#[derive(Clone, Debug)]
pub struct AvatarCanonical {
    pub id: Tensor<f64>,
    pub raw: Tensor<f64>,
    pub maps: GaussianMapSet<f64>,
}

impl AvatarCanonical {
    pub fn from_raw(id: Tensor<f64>, raw: Tensor<f64>, act: &Activation) -> Result<Self> {
        let maps = act.maps(&raw)?;
        Ok(Self { id, raw, maps })
    }

    /// Range invariants at `valid` texels (flat indices); returns the first violation.
    pub fn check_ranges(&self, act: &Activation, valid: &[usize], tol: f64) -> Result<()> {
        let m = &self.maps;
        let n = m.height() * m.width();
        let fail = |what: &str, i: usize| Err(Error::Invalid(format!("{what} out of range at texel {i}")));
        for &i in valid {
            let a = m.opacity.data()[i];
            if !(0.0..=1.0).contains(&a) {
                return fail("opacity", i);
            }
            for k in 0..3 {
                let s = m.scale.data()[k * n + i];
                if !(s > 0.0 && s <= act.s_max) {
                    return fail("scale", i);
                }
                let c = m.color.data()[k * n + i];
                if !(0.0..=1.0).contains(&c) {
                    return fail("color", i);
                }
                let d = (m.position.data()[k * n + i] - act.anchor.data()[k * n + i]).abs();
                if d > act.pos_range + tol {
                    return fail("position", i);
                }
            }
            let q: f64 = (0..4).map(|k| m.rotation.data()[k * n + i].powi(2)).sum();
            if (q.sqrt() - 1.0).abs() > tol {
                return fail("rotation", i);
            }
        }
        Ok(())
    }
}

/// `N_H x D` to `1 x D x Hq x Wq`, row-major over the query grid.
pub fn reshape_uv<T: Scalar>(t: &mut Tape<T>, fq: Var, hq: usize, wq: usize) -> Result<Var> {
    let s = t.shape(fq).to_vec();
    if s.len() != 2 || s[0] != hq * wq {
        return Err(Error::Shape { op: "reshape_uv", detail: format!("{s:?} for a {hq}x{wq} grid") });
    }
    let x = t.transpose(fq)?;
    t.reshape(x, &[1, s[1], hq, wq])
}

/// Inverse of [`reshape_uv`].
pub fn flatten_uv<T: Scalar>(t: &mut Tape<T>, uv: Var) -> Result<Var> {
    let s = t.shape(uv).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Shape { op: "flatten_uv", detail: format!("{s:?}") });
    }
    let x = t.reshape(uv, &[s[1], s[2] * s[3]])?;
    t.transpose(x)
}

#[derive(Clone, Debug)]
pub struct ReconNet {
    pub cfg: ReconConfig,
    pub encoder: PatchEncoder,
    pub fuse: Vec<Block>,
    pub cross: Vec<Block>,
    pub decoder: Decoder,
}

impl ReconNet {
    pub fn new(cfg: ReconConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        Ok(Self {
            encoder: PatchEncoder::new(&cfg),
            fuse: (0..cfg.self_depth).map(|i| Block::new(&format!("fuse.block{i}"), d, cfg.heads, cfg.mlp_ratio, false)).collect(),
            cross: (0..cfg.cross_depth).map(|i| Block::new(&format!("cross.block{i}"), d, cfg.heads, cfg.mlp_ratio, true)).collect(),
            decoder: Decoder::new(&cfg),
            cfg,
        })
    }

    pub fn init<T: Scalar, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, rng);
        for b in self.fuse.iter().chain(&self.cross) {
            b.init(&mut store, rng);
        }
        let d = Normal::new(0.0, self.cfg.query_init_std).expect("positive std");
        store.insert("query.tokens", Tensor::from_fn(&[self.cfg.query_count(), self.cfg.token_dim], |_| T::lit(d.sample(rng))));
        self.decoder.init(&mut store, rng);
        store
    }

    /// Global self-attention over the concatenated token sets.
    pub fn fuse<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, token_sets: &[Var]) -> Result<Var> {
        if token_sets.is_empty() {
            return Err(Error::Invalid("fuse needs at least one token set".into()));
        }
        if token_sets.len() > self.cfg.max_images {
            return Err(Error::Invalid(format!("{} images exceed the maximum of {}", token_sets.len(), self.cfg.max_images)));
        }
        let mut x = t.concat(token_sets, 0)?;
        for blk in &self.fuse {
            x = blk.forward(t, b, x, None)?;
        }
        Ok(x)
    }

    /// Learned head queries attend to the fused tokens; output `N_H x D`.
    pub fn head_query_attend<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, agg: Var) -> Result<Var> {
        let mut q = b.get("query.tokens");
        for blk in &self.cross {
            q = blk.forward(t, b, q, Some(agg))?;
        }
        Ok(q)
    }

    pub fn decode<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, fq: Var) -> Result<ReconVars> {
        let uv = reshape_uv(t, fq, self.cfg.query_h, self.cfg.query_w)?;
        let (id, raw) = self.decoder.forward(t, b, uv)?;
        Ok(ReconVars { id, raw })
    }

    /// The full network on an image set, with the built-in encoder.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, images: &ImageSet<T>) -> Result<ReconVars> {
        self.forward_with(t, b, &self.encoder, images)
    }

    pub fn forward_with<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, encoder: &dyn ImageEncoder<T>, images: &ImageSet<T>) -> Result<ReconVars> {
        if images.is_empty() {
            return Err(Error::Invalid("empty image set".into()));
        }
        let mut sets = Vec::with_capacity(images.len());
        for (i, (img, mask)) in images.images.iter().zip(&images.masks).enumerate() {
            let x = t.constant(img.clone())?;
            let x = t.mask_mul(x, mask)?;
            sets.push(encoder.encode(t, b, i, x)?);
        }
        let agg = self.fuse(t, b, &sets)?;
        let fq = self.head_query_attend(t, b, agg)?;
        self.decode(t, b, fq)
    }

    /// Inference without gradients.
    pub fn reconstruct<T: Scalar>(&self, params: &ParamStore<T>, images: &ImageSet<T>, act: &Activation) -> Result<AvatarCanonical> {
        let mut t = Tape::new();
        let b = params.bind(&mut t, false)?;
        let v = self.forward(&mut t, &b, images)?;
        AvatarCanonical::from_raw(t.value(v.id).cast(), t.value(v.raw).cast(), act)
    }
}
