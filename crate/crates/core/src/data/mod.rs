//! Synthetic closed-loop datasets and expression-distribution tools.
//!
//! Ground-truth avatars are built directly in UV space on the shared rig:
//! positions are the neutral surface plus a smooth per-identity jitter,
//! colors are band-limited procedural textures over per-region base colors.
//! They are animated with the same blendshape-plus-skinning path the model
//! uses, so a trained model can represent them exactly.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! manifest.toml            index (see DatasetManifest)
//! rig.bin                  shared rig
//! expressions.csv          ExpressionTable over all identities
//! id000/maps.ckpt          ground-truth maps (f64 checkpoint)
//! id000/expressions.csv    per-frame expression parameters
//! id000/cameras.csv        one camera per view
//! id000/e000_v000.png      image of expression 0 from view 0
//! id000/e000_v000_mask.png foreground mask
//! ```

mod sampling;
#[cfg(test)]
mod tests;

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use sampling::{
    anchor_neighborhood_mass, build_adjusted_sampler, cosine, pca_project, planted_cluster_table, retrieve_similar, select_anchors, uniform_sample, FrameRef, Pca,
    SamplerConfig, SamplingPlan,
};

use crate::checkpoint::ParamStore;
use crate::recon::ReconConfig;
use crate::render::{gather_cloud, render, Camera, GaussianMapSet, RenderedFrame};
use crate::rig::{axis_angle, bind_texels, procedural_rig, ExpressionParams, HeadRig, TexelBinding, JAW, NECK};
use crate::{par, Error, Result, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_ids: usize,
    pub n_expr: usize,
    pub n_views: usize,
    pub seed: u64,
    pub image_size: usize,
    pub uv_size: usize,
    pub rig_seed: u64,
    /// Camera distance from the head center, meters.
    pub radius: f64,
    /// Focal length as a multiple of the image size.
    pub focal_frac: f64,
    /// Largest camera elevation, radians.
    pub pitch_max: f64,
    /// Probability that a blendshape is active in a random expression.
    pub expr_density: f64,
    pub jaw_max: f64,
    pub background: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_ids: 1,
            n_expr: 8,
            n_views: 8,
            seed: 0,
            image_size: 128,
            uv_size: 64,
            rig_seed: 0,
            radius: 0.6,
            focal_frac: 2.3,
            pitch_max: 0.35,
            expr_density: 0.4,
            jaw_max: 0.25,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids == 0 || self.n_expr == 0 || self.n_views == 0 || self.image_size == 0 || self.uv_size == 0 {
            return Err(Error::Invalid("dataset counts and sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        self.focal_frac * self.image_size as f64
    }
}

/// One ground-truth head.
#[derive(Clone, Debug)]
pub struct SyntheticIdentity {
    pub seed: u64,
    pub maps: GaussianMapSet<f64>,
}

fn region_priority(rig: &HeadRig, binding: &TexelBinding) -> Result<Vec<usize>> {
    // 0 face, 1 hair, 2 eyes, 3 mouth, 4 teeth; later entries win
    let mut out = vec![0; binding.len()];
    for (k, name) in [(1, "hair"), (2, "eyes"), (3, "mouth"), (4, "teeth")] {
        for (o, m) in out.iter_mut().zip(rig.region_mask(name, binding)?) {
            if m {
                *o = k;
            }
        }
    }
    Ok(out)
}

/// Smooth field over UV: a few random sinusoids, bounded by `amp` in absolute value.
struct Waves {
    terms: Vec<([f64; 2], f64, f64)>,
    amp: f64,
}

impl Waves {
    fn new(rng: &mut ChaCha8Rng, n: usize, max_freq: f64, amp: f64) -> Self {
        let terms = (0..n)
            .map(|_| {
                let f = [rng.random_range(-max_freq..max_freq), rng.random_range(-max_freq..max_freq)];
                (f, rng.random_range(0.0..TAU), rng.random_range(0.3..1.0))
            })
            .collect();
        Self { terms, amp }
    }

    fn at(&self, uv: [f64; 2]) -> f64 {
        let total: f64 = self.terms.iter().map(|t| t.2).sum();
        self.amp / total * self.terms.iter().map(|(f, ph, w)| w * (TAU * (f[0] * uv[0] + f[1] * uv[1]) + ph).sin()).sum::<f64>()
    }
}

/// Ground-truth maps for one identity. Positions stay within a quarter of
/// the model's offset range around the neutral surface and scales below
/// 90% of its largest scale, so the maps are reachable by the activations.
pub fn synthesize_identity(rig: &HeadRig, binding: &TexelBinding, seed: u64) -> Result<SyntheticIdentity> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recon = ReconConfig::default();
    let extent = rig.extent();
    let (pos_range, s_max) = (recon.pos_range_frac * extent, recon.scale_max_frac * extent);
    let (h, w) = (binding.height, binding.width);
    let n = h * w;
    let anchor = rig.uv_position_map(&rig.vertices, binding)?;
    let regions = region_priority(rig, binding)?;

    let jitter: Vec<Waves> = (0..3).map(|_| Waves::new(&mut rng, 3, 1.5, 0.25 * pos_range)).collect();
    let skin = [rng.random_range(0.55..0.9), 0.0, 0.0];
    let skin = [skin[0], skin[0] * rng.random_range(0.7..0.82), skin[0] * rng.random_range(0.55..0.7)];
    let hair_l = rng.random_range(0.08..0.45);
    let hair = [hair_l, hair_l * rng.random_range(0.7..0.9), hair_l * rng.random_range(0.5..0.8)];
    let eyes = [0.85, 0.85, 0.88];
    let mouth = [rng.random_range(0.55..0.75), rng.random_range(0.2..0.3), rng.random_range(0.22..0.32)];
    let teeth = [0.92, 0.9, 0.82];
    let base = [skin, hair, eyes, mouth, teeth];
    let luma = Waves::new(&mut rng, 6, 6.0, 0.12);
    let chroma: Vec<Waves> = (0..3).map(|_| Waves::new(&mut rng, 4, 4.0, 0.04)).collect();

    let mut position = vec![0.0; 3 * n];
    let mut opacity = vec![0.0; n];
    let mut scale = vec![0.0; 3 * n];
    let mut color = vec![0.0; 3 * n];
    let mut rotation = vec![0.0; 4 * n];
    for i in 0..n {
        rotation[i] = 1.0;
        if !binding.valid[i] {
            continue;
        }
        let uv = binding.texel_center(i);
        let l = luma.at(uv);
        for k in 0..3 {
            position[k * n + i] = anchor.data[i][k] + jitter[k].at(uv);
            color[k * n + i] = (base[regions[i]][k] + l + chroma[k].at(uv)).clamp(0.03, 0.97);
        }
        opacity[i] = 0.96;
    }
    // isotropic scale from the distance to valid neighbors
    for i in (0..n).filter(|&i| binding.valid[i]) {
        let (y, x) = (i / w, i % w);
        let mut d = Vec::new();
        for (dy, dx) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                continue;
            }
            let j = yy as usize * w + xx as usize;
            if binding.valid[j] {
                d.push((0..3).map(|k| (position[k * n + i] - position[k * n + j]).powi(2)).sum::<f64>().sqrt());
            }
        }
        let mean = if d.is_empty() { 0.5 * s_max } else { d.iter().sum::<f64>() / d.len() as f64 };
        let s = (0.6 * mean).clamp(0.15 * s_max, 0.9 * s_max);
        for k in 0..3 {
            scale[k * n + i] = s;
        }
    }
    let t = |c: usize, v: Vec<f64>| Tensor::from_parts(vec![c, h, w], v);
    Ok(SyntheticIdentity {
        seed,
        maps: GaussianMapSet { position: t(3, position), opacity: t(1, opacity), scale: t(3, scale), color: t(3, color), rotation: t(4, rotation) },
    })
}

pub fn maps_to_store(maps: &GaussianMapSet<f64>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in maps.fields() {
        s.insert(name, t.clone());
    }
    s
}

pub fn maps_from_store(s: &ParamStore<f64>) -> Result<GaussianMapSet<f64>> {
    let get = |n: &str| s.get(n).cloned().ok_or_else(|| Error::format("maps", format!("missing '{n}'")));
    let m = GaussianMapSet { position: get("position")?, opacity: get("opacity")?, scale: get("scale")?, color: get("color")?, rotation: get("rotation")? };
    m.check_shapes()?;
    Ok(m)
}

/// A random expression: sparse nonnegative blendshape weights, jaw opening
/// and a small neck turn.
pub fn random_expression(rig: &HeadRig, rng: &mut ChaCha8Rng, density: f64, jaw_max: f64) -> ExpressionParams {
    let mut e = ExpressionParams::for_rig(rig);
    for p in e.psi.iter_mut() {
        if rng.random_bool(density) {
            *p = rng.random_range(0.1..1.0);
        }
    }
    e.joint_rot[JAW] = axis_angle([1.0, 0.0, 0.0], rng.random_range(0.0..jaw_max));
    e.joint_rot[NECK] = axis_angle([0.0, 1.0, 0.0], rng.random_range(-0.15..0.15));
    e
}

/// Cameras spread evenly in azimuth over the full circle, with jitter.
pub fn view_cameras(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Vec<Camera> {
    let step = TAU / cfg.n_views as f64;
    (0..cfg.n_views)
        .map(|v| {
            let yaw = step * v as f64 + rng.random_range(-0.25..0.25) * step;
            let pitch = rng.random_range(-cfg.pitch_max..=cfg.pitch_max);
            Camera::orbit(yaw, pitch, cfg.radius, cfg.focal(), cfg.image_size, cfg.image_size)
        })
        .collect()
}

/// Row layout: frame, psi..., joint quaternions (w, x, y, z)..., global rotation, global translation.
pub fn expressions_to_csv(rows: &[ExpressionParams]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = rows.first() {
        let mut head = vec!["frame".to_string()];
        head.extend((0..first.psi.len()).map(|k| format!("psi{k}")));
        for j in 0..first.joint_rot.len() {
            head.extend(["w", "x", "y", "z"].map(|c| format!("joint{j}_{c}")));
        }
        head.extend(["global_w", "global_x", "global_y", "global_z", "tx", "ty", "tz"].map(String::from));
        w.write_record(&head).map_err(csv_err)?;
    }
    for (f, e) in rows.iter().enumerate() {
        let mut rec = vec![f.to_string()];
        rec.extend(e.psi.iter().map(|v| v.to_string()));
        rec.extend(e.joint_rot.iter().flatten().map(|v| v.to_string()));
        rec.extend(e.global_rot.iter().chain(&e.global_trans).map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?).map_err(|e| Error::format("csv", e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

pub fn expressions_from_csv(text: &str, rig: &HeadRig) -> Result<Vec<ExpressionParams>> {
    let (ne, nj) = (rig.num_expr(), rig.num_joints());
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let v: Vec<f64> = rec.iter().map(|s| s.trim().parse::<f64>().map_err(|e| Error::format("expression csv", format!("{s:?}: {e}")))).collect::<Result<_>>()?;
        if v.len() != 1 + ne + 4 * nj + 7 {
            return Err(Error::format("expression csv", format!("row has {} fields, expected {}", v.len(), 1 + ne + 4 * nj + 7)));
        }
        let q = |o: usize| [v[o], v[o + 1], v[o + 2], v[o + 3]];
        let e = ExpressionParams {
            psi: v[1..1 + ne].to_vec(),
            joint_rot: (0..nj).map(|j| q(1 + ne + 4 * j)).collect(),
            global_rot: q(1 + ne + 4 * nj),
            global_trans: [v[5 + ne + 4 * nj], v[6 + ne + 4 * nj], v[7 + ne + 4 * nj]],
        };
        e.validate(rig)?;
        out.push(e);
    }
    Ok(out)
}

/// Expression coefficients of every frame of every identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpressionTable {
    pub dim: usize,
    pub rows: Vec<(usize, usize, Vec<f64>)>,
}

impl ExpressionTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: Vec::new() }
    }

    pub fn push(&mut self, identity: usize, frame: usize, psi: Vec<f64>) -> Result<()> {
        if psi.len() != self.dim {
            return Err(Error::Invalid(format!("psi of length {} in a table of dimension {}", psi.len(), self.dim)));
        }
        self.rows.push((identity, frame, psi));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Columns: id, frame, psi0 ... psi{E-1}.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["id".to_string(), "frame".to_string()];
        head.extend((0..self.dim).map(|k| format!("psi{k}")));
        w.write_record(&head).map_err(csv_err)?;
        for (id, f, psi) in &self.rows {
            let mut rec = vec![id.to_string(), f.to_string()];
            rec.extend(psi.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?).map_err(|e| Error::format("csv", e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let dim = r.headers().map_err(csv_err)?.len().checked_sub(2).ok_or_else(|| Error::format("expression table", "missing columns"))?;
        let mut t = Self::new(dim);
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let bad = |s: &str| Error::format("expression table", format!("bad field {s:?}"));
            let id = rec[0].trim().parse().map_err(|_| bad(&rec[0]))?;
            let frame = rec[1].trim().parse().map_err(|_| bad(&rec[1]))?;
            let psi = rec.iter().skip(2).map(|s| s.trim().parse::<f64>().map_err(|_| bad(s))).collect::<Result<Vec<_>>>()?;
            t.push(id, frame, psi)?;
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub expr: usize,
    pub view: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub id: usize,
    pub seed: u64,
    pub maps: String,
    pub expressions: String,
    pub cameras: String,
    pub frames: Vec<FrameEntry>,
}

/// The text index of a dataset directory. Paths are relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DataConfig,
    pub rig: String,
    pub table: String,
    pub identities: Vec<IdentityEntry>,
}

pub const MANIFEST: &str = "manifest.toml";

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        m.check_files(dir.as_ref())?;
        Ok(m)
    }

    /// Every referenced file exists.
    pub fn check_files(&self, dir: &Path) -> Result<()> {
        let mut files = vec![&self.rig, &self.table];
        for id in &self.identities {
            files.extend([&id.maps, &id.expressions, &id.cameras]);
            for f in &id.frames {
                files.extend([&f.image, &f.mask]);
            }
        }
        for f in files {
            if !dir.join(f).is_file() {
                return Err(Error::format("manifest", format!("missing file {f}")));
            }
        }
        Ok(())
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_rgb(frame: &RenderedFrame, path: &Path) -> Result<()> {
    let img = image::RgbImage::from_fn(frame.width as u32, frame.height as u32, |x, y| image::Rgb(frame.pixel(x as usize, y as usize).map(to_u8)));
    img.save(path).map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })
}

fn save_mask(frame: &RenderedFrame, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(frame.width as u32, frame.height as u32, |x, y| {
        image::Luma([if frame.alpha[y as usize * frame.width + x as usize] >= 0.5 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })
}

/// Channel-first `3 x H x W` image in [0, 1].
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| T::lit(raw[(i % (h * w)) * 3 + i / (h * w)] as f64 / 255.0)))
}

/// `H x W` mask with values 0 or 1.
pub fn load_mask<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[h, w], |i| if raw[i] >= 128 { T::one() } else { T::zero() }))
}

/// Renders every (expression, view) pair of every identity and writes the dataset.
pub fn generate_dataset(cfg: &DataConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let rig = procedural_rig(cfg.rig_seed);
    let binding = bind_texels(&rig, cfg.uv_size, cfg.uv_size)?;
    write(&dir.join("rig.bin"), rig.to_bytes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table = ExpressionTable::new(rig.num_expr());
    let mut identities = Vec::new();
    for id in 0..cfg.n_ids {
        let seed = rng.random::<u64>();
        let mut id_rng = ChaCha8Rng::seed_from_u64(seed);
        let ident = synthesize_identity(&rig, &binding, seed)?;
        let mut exprs = vec![ExpressionParams::for_rig(&rig)];
        while exprs.len() < cfg.n_expr {
            exprs.push(random_expression(&rig, &mut id_rng, cfg.expr_density, cfg.jaw_max));
        }
        let cams = view_cameras(cfg, &mut id_rng);
        let sub = format!("id{id:03}");
        let maps = format!("{sub}/maps.ckpt");
        write(&dir.join(&maps), maps_to_store(&ident.maps).to_bytes())?;
        let expressions = format!("{sub}/expressions.csv");
        write(&dir.join(&expressions), expressions_to_csv(&exprs)?)?;
        let cameras = format!("{sub}/cameras.csv");
        write(&dir.join(&cameras), cams.iter().map(|c| c.to_csv() + "\n").collect::<String>())?;
        for (f, e) in exprs.iter().enumerate() {
            table.push(id, f, e.psi.clone())?;
        }
        let pairs: Vec<(usize, usize)> = (0..exprs.len()).flat_map(|e| (0..cams.len()).map(move |v| (e, v))).collect();
        let clouds = exprs.iter().map(|e| gather_cloud(&ident.maps, &binding, &rig, e)).collect::<Result<Vec<_>>>()?;
        let results = par::map_range(pairs.len(), |k| -> Result<FrameEntry> {
            let (e, v) = pairs[k];
            let frame = render(&clouds[e], &cams[v], cfg.background)?;
            let entry = FrameEntry { expr: e, view: v, image: format!("{sub}/e{e:03}_v{v:03}.png"), mask: format!("{sub}/e{e:03}_v{v:03}_mask.png") };
            save_rgb(&frame, &dir.join(&entry.image))?;
            save_mask(&frame, &dir.join(&entry.mask))?;
            Ok(entry)
        });
        let frames = results.into_iter().collect::<Result<Vec<_>>>()?;
        identities.push(IdentityEntry { id, seed, maps, expressions, cameras, frames });
    }
    let table_path = "expressions.csv".to_string();
    write(&dir.join(&table_path), table.to_csv()?)?;
    let manifest = DatasetManifest { version: 1, config: cfg.clone(), rig: "rig.bin".into(), table: table_path, identities };
    let text = toml::to_string(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    write(&dir.join(MANIFEST), text)?;
    Ok(manifest)
}

/// One identity's ground truth and frames, loaded.
#[derive(Clone, Debug)]
pub struct IdentityData {
    pub id: usize,
    pub maps: GaussianMapSet<f64>,
    pub expressions: Vec<ExpressionParams>,
    pub cameras: Vec<Camera>,
    /// `(expr, view) -> (image, mask)`, indexed `expr * n_views + view`.
    pub images: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl IdentityData {
    pub fn frame(&self, expr: usize, view: usize) -> &(Tensor<f32>, Tensor<f32>) {
        &self.images[expr * self.cameras.len() + view]
    }
}

/// A dataset directory in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub rig: HeadRig,
    pub table: ExpressionTable,
    pub identities: Vec<IdentityData>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = DatasetManifest::load(&dir)?;
        let rig = HeadRig::load(dir.join(&manifest.rig))?;
        let table = ExpressionTable::from_csv(&read(&dir.join(&manifest.table))?)?;
        let mut identities = Vec::new();
        for e in &manifest.identities {
            let maps = maps_from_store(&ParamStore::load(dir.join(&e.maps))?)?;
            let expressions = expressions_from_csv(&read(&dir.join(&e.expressions))?, &rig)?;
            let cameras = read(&dir.join(&e.cameras))?.lines().filter(|l| !l.trim().is_empty()).map(Camera::from_csv).collect::<Result<Vec<_>>>()?;
            let mut images = vec![None; expressions.len() * cameras.len()];
            for f in &e.frames {
                let slot = images.get_mut(f.expr * cameras.len() + f.view).ok_or_else(|| Error::format("manifest", format!("frame ({}, {}) out of range", f.expr, f.view)))?;
                *slot = Some((load_image(dir.join(&f.image))?, load_mask(dir.join(&f.mask))?));
            }
            let images = images.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| Error::format("manifest", "missing (expression, view) frames"))?;
            identities.push(IdentityData { id: e.id, maps, expressions, cameras, images });
        }
        Ok(Self { dir, manifest, rig, table, identities })
    }

    pub fn binding(&self) -> Result<TexelBinding> {
        bind_texels(&self.rig, self.manifest.config.uv_size, self.manifest.config.uv_size)
    }
}
