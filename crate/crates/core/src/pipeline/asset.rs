//! The avatar container.
//!
//! ```text
//! magic     8 bytes "UVHAVTR\0"
//! version   u32     1
//! sections  u32     count, then per section:
//!           tag     4 bytes
//!           length  u64
//!           payload
//! ```
//!
//! Sections, in order: `META` (TOML text of [`AssetMeta`]), `BIND` (u32 height,
//! u32 width, u32 valid texel count), `MAPS` (a parameter checkpoint holding
//! `id`, the identity features, and `raw`, the pre-activation static maps).
//! Integers are little-endian. The rig and UNet weights are referenced by
//! path and SHA-256, not embedded.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, HeadContext, Model};
use crate::checkpoint::{ParamStore, Reader};
use crate::recon::{AvatarCanonical, GAUSSIAN_DIM};
use crate::{Error, Result, Tensor};

pub const ASSET_MAGIC: &[u8; 8] = b"UVHAVTR\0";
pub const ASSET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetMeta {
    pub model_version: String,
    pub rig_path: String,
    pub rig_sha256: String,
    pub binding_sha256: String,
    pub unet_path: String,
    pub unet_sha256: String,
    /// SHA-256 of each input image's pixel data, in input order.
    pub input_hashes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvatarAsset {
    pub meta: AssetMeta,
    /// `id_dim x H x W`.
    pub id: Tensor<f32>,
    /// `14 x H x W`, pre-activation.
    pub raw: Tensor<f32>,
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

impl AvatarAsset {
    pub fn new(meta: AssetMeta, id: Tensor<f32>, raw: Tensor<f32>) -> Result<Self> {
        let (si, sr) = (id.shape(), raw.shape());
        if si.len() != 3 || sr.len() != 3 || sr[0] != GAUSSIAN_DIM || si[1..] != sr[1..] {
            return Err(Error::Shape { op: "avatar asset", detail: format!("id {si:?} raw {sr:?}") });
        }
        Ok(Self { meta, id, raw })
    }

    pub fn height(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.raw.shape()[2]
    }

    /// Activated static maps.
    pub fn canonical(&self, ctx: &HeadContext) -> Result<AvatarCanonical> {
        AvatarCanonical::from_raw(self.id.cast(), self.raw.cast(), &ctx.act)
    }

    /// The asset belongs to this rig and binding.
    pub fn check_context(&self, ctx: &HeadContext) -> Result<()> {
        if self.meta.rig_sha256 != ctx.rig_hash() || self.meta.binding_sha256 != ctx.binding_hash() {
            return Err(Error::Invalid("asset was built for a different rig or UV binding".into()));
        }
        if (self.height(), self.width()) != (ctx.binding.height, ctx.binding.width) {
            return Err(Error::Invalid("asset resolution does not match the binding".into()));
        }
        Ok(())
    }

    /// The asset was decoded with these UNet weights.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.meta.unet_sha256 != sha256_hex(&model.unet_params.to_bytes()) {
            return Err(Error::Invalid("asset references different UNet weights".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ASSET_MAGIC);
        out.extend_from_slice(&ASSET_VERSION.to_le_bytes());
        out.extend_from_slice(&3u32.to_le_bytes());
        let meta = toml::to_string(&self.meta).map_err(|e| Error::format("asset", e.to_string()))?;
        section(&mut out, b"META", meta.as_bytes());
        let mut bind = Vec::new();
        let valid = self.raw.shape()[1..].iter().product::<usize>() as u32;
        for v in [self.height() as u32, self.width() as u32, valid] {
            bind.extend_from_slice(&v.to_le_bytes());
        }
        section(&mut out, b"BIND", &bind);
        let mut maps = ParamStore::new();
        maps.insert("id", self.id.clone());
        maps.insert("raw", self.raw.clone());
        section(&mut out, b"MAPS", &maps.to_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != ASSET_MAGIC {
            return Err(Error::format("asset", "bad magic"));
        }
        let version = r.u32()?;
        if version != ASSET_VERSION {
            return Err(Error::format("asset", format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let (mut meta, mut bind, mut maps) = (None, None, None);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = usize::try_from(r.u64()?).map_err(|_| Error::format("asset", "section too large"))?;
            let payload = r.take(len)?;
            match &tag {
                b"META" => {
                    let text = std::str::from_utf8(payload).map_err(|_| Error::format("asset", "META is not utf-8"))?;
                    meta = Some(toml::from_str::<AssetMeta>(text).map_err(|e| Error::format("asset", e.to_string()))?);
                }
                b"BIND" => {
                    let mut b = Reader { bytes: payload, pos: 0 };
                    bind = Some((b.u32()? as usize, b.u32()? as usize));
                }
                b"MAPS" => maps = Some(ParamStore::<f32>::from_bytes(payload)?),
                _ => return Err(Error::format("asset", format!("unknown section {:?}", String::from_utf8_lossy(&tag)))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("asset", "trailing bytes"));
        }
        let (meta, (h, w), maps) = match (meta, bind, maps) {
            (Some(m), Some(b), Some(p)) => (m, b, p),
            _ => return Err(Error::format("asset", "missing section")),
        };
        let get = |n: &str| maps.get(n).cloned().ok_or_else(|| Error::format("asset", format!("MAPS lacks '{n}'")));
        let asset = Self::new(meta, get("id")?, get("raw")?)?;
        if (asset.height(), asset.width()) != (h, w) {
            return Err(Error::format("asset", "BIND does not match the maps"));
        }
        Ok(asset)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }
}
