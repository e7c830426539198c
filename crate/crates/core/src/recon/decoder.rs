//! Convolutional decoding of UV features and the attribute activations.

use rand::Rng;

use super::ReconConfig;
use crate::checkpoint::{Bound, ParamStore};
use crate::nn::{Conv, Upsample};
use crate::render::GaussianMapSet;
use crate::rig::{HeadRig, TexelBinding};
use crate::{Error, Result, Scalar, Tape, Tensor, Var};

/// Raw Gaussian channels: position 0..3, opacity 3, scale 4..7, color 7..10, rotation 10..14.
pub const GAUSSIAN_DIM: usize = 14;
pub const RAW_LAYOUT: [(&str, usize, usize); 5] = [("position", 0, 3), ("opacity", 3, 1), ("scale", 4, 3), ("color", 7, 3), ("rotation", 10, 4)];

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<(Upsample, Conv)>,
    pub id_head: Conv,
    pub gauss_head: Conv,
    pub head_init: f64,
}

impl Decoder {
    pub fn new(cfg: &ReconConfig) -> Self {
        let mut width = cfg.token_dim;
        let mut stages = Vec::new();
        for i in 0..cfg.upsample_stages() {
            let next = (cfg.token_dim >> (i + 1)).max(cfg.decoder_min_width);
            stages.push((Upsample::new(format!("dec.up{i}"), width, next, 2), Conv::same3(format!("dec.conv{i}"), next, next)));
            width = next;
        }
        Self {
            stages,
            id_head: Conv::same3("dec.id", width, cfg.id_dim),
            gauss_head: Conv::same3("dec.gauss", width, GAUSSIAN_DIM),
            head_init: cfg.head_init,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for (u, c) in &self.stages {
            u.init(store, rng);
            c.init(store, rng);
        }
        self.id_head.init(store, rng);
        self.gauss_head.init(store, rng);
        let w = store.get_mut("dec.gauss.w").expect("just inserted");
        let s = T::lit(self.head_init);
        for v in w.data_mut() {
            *v = *v * s;
        }
    }

    /// `1 x D x Hq x Wq` to (`id_dim x H x W`, `14 x H x W`).
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut x = x;
        for (u, c) in &self.stages {
            x = u.forward(t, b, x)?;
            x = t.silu(x)?;
            x = c.forward(t, b, x)?;
            x = t.silu(x)?;
        }
        let id = self.id_head.forward(t, b, x)?;
        let raw = self.gauss_head.forward(t, b, x)?;
        let drop_batch = |t: &mut Tape<T>, v: Var| {
            let s = t.shape(v)[1..].to_vec();
            t.reshape(v, &s)
        };
        Ok((drop_batch(t, id)?, drop_batch(t, raw)?))
    }
}

/// Activated map variables, each `C x H x W`.
#[derive(Clone, Copy, Debug)]
pub struct MapVars {
    pub position: Var,
    pub opacity: Var,
    pub scale: Var,
    pub color: Var,
    pub rotation: Var,
}

impl MapVars {
    pub fn values<T: Scalar>(&self, t: &Tape<T>) -> GaussianMapSet<T> {
        GaussianMapSet {
            position: t.value(self.position).clone(),
            opacity: t.value(self.opacity).clone(),
            scale: t.value(self.scale).clone(),
            color: t.value(self.color).clone(),
            rotation: t.value(self.rotation).clone(),
        }
    }
}

/// Maps raw decoder channels into valid Gaussian attributes:
/// `P = anchor + pos_range * tanh(raw)`, `alpha = sigmoid(raw)`,
/// `S = s_max * (1 - exp(-softplus(raw + beta)))` with `beta` placing `S(0)` at `s_init`,
/// `C = sigmoid(raw)`, `R = normalize(raw + (1, 0, 0, 0))`.
#[derive(Clone, Debug)]
pub struct Activation {
    /// Neutral surface point of each texel, `3 x H x W` (zero at invalid texels).
    pub anchor: Tensor<f64>,
    pub pos_range: f64,
    pub s_max: f64,
    pub s_init: f64,
}

impl Activation {
    pub fn for_rig(rig: &HeadRig, binding: &TexelBinding, cfg: &ReconConfig) -> Result<Self> {
        let anchor = rig.uv_position_map(&rig.vertices, binding)?.to_tensor();
        let extent = rig.extent();
        let s_max = cfg.scale_max_frac * extent;
        Ok(Self { anchor, pos_range: cfg.pos_range_frac * extent, s_max, s_init: cfg.scale_init_frac * s_max })
    }

    pub fn beta(&self) -> f64 {
        let r = self.s_init / self.s_max;
        (r / (1.0 - r)).ln()
    }

    /// The scale activation on a single value.
    pub fn scale_of(&self, raw: f64) -> f64 {
        let z = raw + self.beta();
        let sp = z.max(0.0) + (-z.abs()).exp().ln_1p();
        self.s_max * (1.0 - (-sp).exp())
    }

    pub fn apply<T: Scalar>(&self, t: &mut Tape<T>, raw: Var) -> Result<MapVars> {
        let s = t.shape(raw).to_vec();
        if s.len() != 3 || s[0] != GAUSSIAN_DIM || s[1..] != self.anchor.shape()[1..] {
            return Err(Error::Shape { op: "activate", detail: format!("raw {s:?} vs anchor {:?}", self.anchor.shape()) });
        }
        let n = s[1] * s[2];
        let part = |t: &mut Tape<T>, i: usize| {
            let (_, start, len) = RAW_LAYOUT[i];
            t.slice(raw, 0, start, len)
        };
        let p = part(t, 0)?;
        let p = t.tanh(p)?;
        let p = t.scale(p, self.pos_range)?;
        let anchor = t.constant(self.anchor.cast())?;
        let position = t.add(p, anchor)?;

        let a = part(t, 1)?;
        let opacity = t.sigmoid(a)?;

        let sc = part(t, 2)?;
        let sc = t.add_scalar(sc, self.beta())?;
        let sc = t.softplus(sc)?;
        let sc = t.neg(sc)?;
        let sc = t.exp(sc)?;
        let sc = t.neg(sc)?;
        let sc = t.add_scalar(sc, 1.0)?;
        let scale = t.scale(sc, self.s_max)?;

        let c = part(t, 3)?;
        let color = t.sigmoid(c)?;

        let r = part(t, 4)?;
        let ident = t.constant(Tensor::from_fn(&[4, s[1], s[2]], |i| if i < n { T::one() } else { T::zero() }))?;
        let r = t.add(r, ident)?;
        let sq = t.mul(r, r)?;
        let norm2 = t.sum_axis(sq, 0)?;
        let norm = t.sqrt_eps(norm2, 1e-12)?;
        let one = t.constant(Tensor::ones(&[s[1], s[2]]))?;
        let inv = t.div_pos(one, norm)?;
        let rotation = t.mul(r, inv)?;
        Ok(MapVars { position, opacity, scale, color, rotation })
    }

    /// Activation of a raw map outside of any training tape.
    pub fn maps<T: Scalar>(&self, raw: &Tensor<T>) -> Result<GaussianMapSet<f64>> {
        let mut t = Tape::<f64>::new();
        let r = t.constant(raw.cast())?;
        let m = self.apply(&mut t, r)?;
        Ok(m.values(&t))
    }
}
