//! Training, refinement, animation and benchmarking drivers.

mod asset;
mod drive;
mod refine;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use asset::{AssetMeta, AvatarAsset, ASSET_MAGIC, ASSET_VERSION};
pub use drive::{animate, benchmark, drive_frame, BenchReport, FrameTiming, StageStats, STAGES};
pub use refine::{refine, RefineConfig, RefineOutcome, RefineView};
pub use train::{evaluate_psnr, train, TrainConfig, TrainReport};

use crate::checkpoint::{Bound, ParamStore};
use crate::dynamic::{build_driving_map, decode_delta, dynamic_mask, fuse_dynamic, UNet, UNetConfig};
use crate::loss::RegularizerAnchors;
use crate::recon::{Activation, ImageSet, ReconConfig, ReconNet};
use crate::render::{render_tape, Camera, RasterMode, SplatVars, TexelSkin};
use crate::rig::{bind_texels, ExpressionParams, HeadRig, TexelBinding};
use crate::{Error, Result, Tape, Tensor, Var};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub recon: ReconConfig,
    pub unet: UNetConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.recon.validate()?;
        if self.unet.in_channels != self.recon.id_dim + 3 {
            return Err(Error::Invalid(format!("UNet takes {} channels but id_dim + 3 = {}", self.unet.in_channels, self.recon.id_dim + 3)));
        }
        if self.recon.uv_size % (1 << self.unet.stages) != 0 {
            return Err(Error::Invalid(format!("uv_size {} is not divisible by 2^{}", self.recon.uv_size, self.unet.stages)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::format("model config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Both networks and their weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub recon: ReconNet,
    pub unet: UNet,
    pub recon_params: ParamStore<f32>,
    pub unet_params: ParamStore<f32>,
}

pub const MODEL_FILES: [&str; 3] = ["model.toml", "recon.ckpt", "unet.ckpt"];

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let recon = ReconNet::new(cfg.recon.clone())?;
        let unet = UNet::new(cfg.unet.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recon_params = recon.init(&mut rng);
        let unet_params = unet.init(&mut rng);
        Ok(Self { cfg, recon, unet, recon_params, unet_params })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string(&self.cfg).map_err(|e| Error::format("model config", e.to_string()))?;
        std::fs::write(dir.join(MODEL_FILES[0]), text).map_err(|e| Error::io(dir.join(MODEL_FILES[0]), e))?;
        self.recon_params.save(dir.join(MODEL_FILES[1]))?;
        self.unet_params.save(dir.join(MODEL_FILES[2]))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MODEL_FILES[0]);
        let cfg = ModelConfig::from_toml(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        let recon = ReconNet::new(cfg.recon.clone())?;
        let unet = UNet::new(cfg.unet.clone());
        let recon_params = ParamStore::load(dir.join(MODEL_FILES[1]))?;
        let unet_params = ParamStore::load(dir.join(MODEL_FILES[2]))?;
        Ok(Self { cfg, recon, unet, recon_params, unet_params })
    }

    /// Content hash of both weight sets.
    pub fn version(&self) -> String {
        let mut b = self.recon_params.to_bytes();
        b.extend(self.unet_params.to_bytes());
        sha256_hex(&b)
    }

    /// Feed-forward reconstruction.
    pub fn reconstruct(&self, images: &ImageSet<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut t = Tape::new();
        let b = self.recon_params.bind(&mut t, false)?;
        let v = self.recon.forward(&mut t, &b, images)?;
        Ok((t.value(v.id).clone(), t.value(v.raw).clone()))
    }
}

fn tensor_hash(t: &Tensor<f32>) -> String {
    let mut b = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        b.extend(v.to_le_bytes());
    }
    sha256_hex(&b)
}

/// Feed-forward reconstruction packaged with its provenance.
pub fn reconstruct_asset(model: &Model, ctx: &HeadContext, images: &ImageSet<f32>, rig_path: &str, unet_path: &str) -> Result<AvatarAsset> {
    let (id, raw) = model.reconstruct(images)?;
    let meta = AssetMeta {
        model_version: model.version(),
        rig_path: rig_path.to_string(),
        rig_sha256: ctx.rig_hash(),
        binding_sha256: ctx.binding_hash(),
        unet_path: unet_path.to_string(),
        unet_sha256: sha256_hex(&model.unet_params.to_bytes()),
        input_hashes: images.images.iter().map(tensor_hash).collect(),
    };
    let asset = AvatarAsset::new(meta, id, raw)?;
    asset.check_context(ctx)?;
    Ok(asset)
}

/// Everything rig-dependent that the model needs at a given UV resolution.
#[derive(Clone, Debug)]
pub struct HeadContext {
    pub rig: HeadRig,
    pub binding: TexelBinding,
    pub skin: TexelSkin,
    pub act: Activation,
    /// `H x W` dynamic-region mask.
    pub dyn_mask: Tensor<f32>,
    /// `H x W` mouth and teeth texels.
    pub mouth_texels: Tensor<f32>,
    pub anchors: RegularizerAnchors<f32>,
    pub background: [f64; 3],
    pub mode: RasterMode,
}

impl HeadContext {
    pub fn new(rig: HeadRig, recon: &ReconConfig, background: [f64; 3]) -> Result<Self> {
        let binding = bind_texels(&rig, recon.uv_size, recon.uv_size)?;
        let skin = TexelSkin::new(&rig, &binding)?;
        let act = Activation::for_rig(&rig, &binding, recon)?;
        let dyn_mask = dynamic_mask(&rig, &binding)?;
        let mouth = rig.region_mask("mouth", &binding)?;
        let teeth = rig.region_mask("teeth", &binding)?;
        let (h, w) = (binding.height, binding.width);
        let mouth_texels = Tensor::from_fn(&[h, w], |i| if mouth[i] || teeth[i] { 1.0 } else { 0.0 });
        let anchors = RegularizerAnchors {
            position: act.anchor.cast(),
            scale: Tensor::full(&[3, h, w], act.s_init as f32),
            valid: binding.mask_tensor(),
        };
        Ok(Self { rig, binding, skin, act, dyn_mask, mouth_texels, anchors, background, mode: RasterMode::default() })
    }

    /// Hash of the rig bytes, recorded in assets.
    pub fn rig_hash(&self) -> String {
        sha256_hex(&self.rig.to_bytes())
    }

    /// Hash of the texel binding (face indices of valid texels).
    pub fn binding_hash(&self) -> String {
        let mut b = Vec::with_capacity(self.binding.len() * 4);
        for (f, v) in self.binding.face.iter().zip(&self.binding.valid) {
            b.extend((if *v { *f as i64 } else { -1 }).to_le_bytes());
        }
        sha256_hex(&b)
    }
}

/// The differentiable drive path for one frame: driving map, UNet deltas,
/// masked raw-space fusion, activation, gather, skinning and rendering.
/// Returns the `4 x H x W` render.
#[allow(clippy::too_many_arguments)]
pub fn render_frame_tape(
    t: &mut Tape<f32>,
    ctx: &HeadContext,
    unet: &UNet,
    unet_b: &Bound,
    id: Var,
    raw: Var,
    expr: &ExpressionParams,
    cam: &Camera,
) -> Result<Var> {
    let driving = t.constant(build_driving_map(&ctx.rig, &expr.psi, &ctx.binding)?)?;
    let delta = decode_delta(t, unet_b, unet, id, driving)?;
    let raw_dyn = fuse_dynamic(t, raw, delta, &ctx.dyn_mask)?;
    let maps = ctx.act.apply(t, raw_dyn)?;
    let posed = ctx.skin.pose(&ctx.rig, expr)?;
    let pos = ctx.skin.gather_tape(t, maps.position)?;
    let rot = ctx.skin.gather_tape(t, maps.rotation)?;
    let (position, rotation) = posed.apply_tape(t, pos, rot)?;
    let splats = SplatVars {
        position,
        rotation,
        scale: ctx.skin.gather_tape(t, maps.scale)?,
        opacity: ctx.skin.gather_tape(t, maps.opacity)?,
        color: ctx.skin.gather_tape(t, maps.color)?,
    };
    render_tape(t, &splats, cam, ctx.background, ctx.mode)
}

/// Peak signal-to-noise ratio for values in [0, 1].
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse.max(1e-20)).log10()
}
