//! Expression-conditioned deformation of the static maps.
//!
//! The driving signal is the UV position map of the expression-deformed rig
//! (pose stays in skinning). A UNet decodes raw-space deltas from the identity
//! features and the driving map; the deltas are added to the static raw maps
//! under the dynamic mask and the activations are applied afterwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Bound, ParamStore};
use crate::nn::{Conv, Upsample};
use crate::recon::GAUSSIAN_DIM;
use crate::rig::{HeadRig, TexelBinding};
use crate::{Error, Result, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of stride-2 stages (and of upsampling stages).
    pub stages: usize,
    pub base_width: usize,
    /// Widths stop doubling at `base_width * max_mult`.
    pub max_mult: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 16 + 3, out_channels: GAUSSIAN_DIM, stages: 3, base_width: 16, max_mult: 4 }
    }
}

impl UNetConfig {
    pub fn for_id_dim(id_dim: usize) -> Self {
        Self { in_channels: id_dim + 3, ..Self::default() }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level.min(self.max_mult.trailing_zeros() as usize)
    }

    /// Upper bound, in texels, on how far an input change can travel.
    pub fn receptive_radius(&self) -> usize {
        let mut r = 2; // first and last 3x3
        for i in 1..=self.stages {
            let (fine, coarse) = (1 << (i - 1), 1 << i);
            r += fine + coarse; // stride-2 conv, then 3x3 at the coarse level
            r += coarse + fine; // transposed conv, then 3x3 at the fine level
        }
        r
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    stem: Conv,
    down: Vec<(Conv, Conv)>,
    up: Vec<(Upsample, Conv)>,
    head: Conv,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Self {
        let w = |l| cfg.width(l);
        let stem = Conv::same3("unet.stem", cfg.in_channels, w(0));
        let down = (1..=cfg.stages)
            .map(|i| (Conv::new(format!("unet.down{i}.s2"), w(i - 1), w(i), 3, 2, 1), Conv::same3(format!("unet.down{i}.conv"), w(i), w(i))))
            .collect();
        let up = (1..=cfg.stages)
            .rev()
            .map(|i| (Upsample::new(format!("unet.up{i}.t"), w(i), w(i - 1), 2), Conv::same3(format!("unet.up{i}.conv"), 2 * w(i - 1), w(i - 1))))
            .collect();
        let head = Conv::same3("unet.head", w(0), cfg.out_channels);
        Self { cfg, stem, down, up, head }
    }

    /// Random hidden layers; the output layer starts at zero.
    pub fn init<T: Scalar, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut s = ParamStore::new();
        self.stem.init(&mut s, rng);
        for (a, b) in &self.down {
            a.init(&mut s, rng);
            b.init(&mut s, rng);
        }
        for (a, b) in &self.up {
            a.init(&mut s, rng);
            b.init(&mut s, rng);
        }
        self.head.init_zero(&mut s);
        s
    }

    /// `C_in x H x W -> C_out x H x W`; H and W must be divisible by `2^stages`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let s = t.shape(x).to_vec();
        let f = 1 << self.cfg.stages;
        if s.len() != 3 || s[0] != self.cfg.in_channels || s[1] % f != 0 || s[2] % f != 0 {
            return Err(Error::Shape { op: "unet", detail: format!("input {s:?}, expected {} channels and sides divisible by {f}", self.cfg.in_channels) });
        }
        let x = t.reshape(x, &[1, s[0], s[1], s[2]])?;
        let x = self.stem.forward(t, b, x)?;
        let mut x = t.silu(x)?;
        let mut skips = vec![x];
        for (s2, conv) in &self.down {
            x = s2.forward(t, b, x)?;
            x = t.silu(x)?;
            x = conv.forward(t, b, x)?;
            x = t.silu(x)?;
            skips.push(x);
        }
        skips.pop();
        for (u, conv) in &self.up {
            x = u.forward(t, b, x)?;
            x = t.silu(x)?;
            let skip = skips.pop().expect("one skip per stage");
            x = t.concat(&[x, skip], 1)?;
            x = conv.forward(t, b, x)?;
            x = t.silu(x)?;
        }
        let y = self.head.forward(t, b, x)?;
        t.reshape(y, &[self.cfg.out_channels, s[1], s[2]])
    }
}

/// UV position map of the expression-deformed rig, `3 x H x W` (invalid texels zero).
pub fn build_driving_map<T: Scalar>(rig: &HeadRig, psi: &[f64], binding: &TexelBinding) -> Result<Tensor<T>> {
    let v = rig.deform(psi)?;
    Ok(rig.uv_position_map(&v, binding)?.to_tensor())
}

/// `H x W` 0/1 mask of the dynamic regions.
pub fn dynamic_mask<T: Scalar>(rig: &HeadRig, binding: &TexelBinding) -> Result<Tensor<T>> {
    let m = rig.dynamic_mask(binding)?;
    Ok(Tensor::from_fn(&[binding.height, binding.width], |i| if m[i] { T::one() } else { T::zero() }))
}

/// Raw deltas from identity features (`id_dim x H x W`) and the driving map (`3 x H x W`).
pub fn decode_delta<T: Scalar>(t: &mut Tape<T>, b: &Bound, unet: &UNet, id: Var, driving: Var) -> Result<Var> {
    let (si, sd) = (t.shape(id).to_vec(), t.shape(driving).to_vec());
    if si.len() != 3 || sd.len() != 3 || sd[0] != 3 || si[1..] != sd[1..] {
        return Err(Error::Shape { op: "decode_delta", detail: format!("id {si:?} driving {sd:?}") });
    }
    let x = t.concat(&[id, driving], 0)?;
    unet.forward(t, b, x)
}

/// `raw_static + mask * delta` in raw parameter space. Outside the mask the
/// result is bit-identical to `raw_static`.
pub fn fuse_dynamic<T: Scalar>(t: &mut Tape<T>, raw_static: Var, delta: Var, mask: &Tensor<T>) -> Result<Var> {
    if t.shape(raw_static) != t.shape(delta) {
        return Err(Error::Shape { op: "fuse_dynamic", detail: format!("{:?} vs {:?}", t.shape(raw_static), t.shape(delta)) });
    }
    let d = t.mask_mul(delta, mask)?;
    t.add(raw_static, d)
}
