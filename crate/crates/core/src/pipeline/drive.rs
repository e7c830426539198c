//! Expression-driven rendering of a reconstructed avatar, with per-stage timing.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::{AvatarAsset, HeadContext, Model};
use crate::dynamic::{build_driving_map, decode_delta, fuse_dynamic};
use crate::render::raster::{composite, depth_order, project};
use crate::render::{save_png, Camera, RenderedFrame};
use crate::rig::ExpressionParams;
use crate::{Error, Result, Tape, Tensor};

pub const STAGES: [&str; 5] = ["driving_map", "unet", "lbs", "sort", "composite"];

/// Reference timings quoted for context only (GPU figures).
pub const REFERENCE_NOTES: [(&str, &str); 4] = [("drive_ms", "22"), ("fps", "45"), ("encode_s", "0.4"), ("refine_s", "10")];

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTiming {
    pub frame: usize,
    /// Seconds per stage, in [`STAGES`] order.
    pub seconds: [f64; 5],
}

impl FrameTiming {
    pub fn total(&self) -> f64 {
        self.seconds.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageStats {
    pub stage: String,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl StageStats {
    fn of(stage: &str, seconds: &[f64]) -> Self {
        let mut v: Vec<f64> = seconds.iter().map(|s| s * 1e3).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        let p95 = v[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self { stage: stage.to_string(), mean_ms: v.iter().sum::<f64>() / n as f64, median_ms: median, p95_ms: p95 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub primitives: usize,
    /// One row per stage, then `total`.
    pub stages: Vec<StageStats>,
}

impl BenchReport {
    /// `key=value` lines: one per stage, then reference figures.
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.push(format!(
                "record=bench stage={} frames={} primitives={} mean_ms={:.4} median_ms={:.4} p95_ms={:.4}",
                s.stage, self.frames, self.primitives, s.mean_ms, s.median_ms, s.p95_ms
            ));
        }
        if let Some(t) = self.stages.last() {
            out.push(format!("record=bench stage=fps value={:.2}", 1e3 / t.mean_ms.max(1e-9)));
        }
        for (k, v) in REFERENCE_NOTES {
            out.push(format!("record=reference {k}={v} asserted=false"));
        }
        out
    }
}

/// Drive path with stage timings: driving map, UNet deltas and masked fusion,
/// skinning and gather, projection and depth sort, compositing.
pub fn drive_timed(model: &Model, asset: &AvatarAsset, ctx: &HeadContext, expr: &ExpressionParams, cam: &Camera) -> Result<(RenderedFrame, FrameTiming)> {
    expr.validate(&ctx.rig)?;
    cam.validate()?;
    let mut sec = [0.0; 5];
    let clock = Instant::now();
    let driving: Tensor<f32> = build_driving_map(&ctx.rig, &expr.psi, &ctx.binding)?;
    sec[0] = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let mut t = Tape::new();
    let ub = model.unet_params.bind(&mut t, false)?;
    let id = t.constant(asset.id.clone())?;
    let raw = t.constant(asset.raw.clone())?;
    let drv = t.constant(driving)?;
    let delta = decode_delta(&mut t, &ub, &model.unet, id, drv)?;
    let fused = fuse_dynamic(&mut t, raw, delta, &ctx.dyn_mask)?;
    let maps = ctx.act.maps(t.value(fused))?;
    sec[1] = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let posed = ctx.skin.pose(&ctx.rig, expr)?;
    let cloud = ctx.skin.gather(&maps, &posed)?;
    sec[2] = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let view = cloud.view()?;
    let splats = project(&view, cam);
    let order = depth_order(&splats);
    sec[3] = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let mut rgb = composite(&view, cam, ctx.background, ctx.mode, &splats, &order);
    let alpha = rgb.split_off(3 * cam.width * cam.height);
    sec[4] = clock.elapsed().as_secs_f64();
    Ok((RenderedFrame { width: cam.width, height: cam.height, rgb, alpha }, FrameTiming { frame: 0, seconds: sec }))
}

pub fn drive_frame(model: &Model, asset: &AvatarAsset, ctx: &HeadContext, expr: &ExpressionParams, cam: &Camera) -> Result<RenderedFrame> {
    drive_timed(model, asset, ctx, expr, cam).map(|(f, _)| f)
}

fn timing_csv(rows: &[FrameTiming]) -> String {
    let mut s = format!("frame,{},total\n", STAGES.map(|k| format!("{k}_ms")).join(","));
    for r in rows {
        let _ = write!(s, "{}", r.frame);
        for v in r.seconds {
            let _ = write!(s, ",{:.4}", v * 1e3);
        }
        let _ = writeln!(s, ",{:.4}", r.total() * 1e3);
    }
    s
}

/// Renders one frame per expression into `dir` as `frame_NNNN.png`, plus
/// `timing.csv`. `cameras` is either a single camera or one per frame.
pub fn animate(model: &Model, asset: &AvatarAsset, ctx: &HeadContext, exprs: &[ExpressionParams], cameras: &[Camera], dir: impl AsRef<Path>) -> Result<Vec<FrameTiming>> {
    if exprs.is_empty() {
        return Err(Error::Invalid("expression sequence is empty".into()));
    }
    if cameras.len() != 1 && cameras.len() != exprs.len() {
        return Err(Error::Invalid(format!("{} cameras for {} frames; give one or one per frame", cameras.len(), exprs.len())));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(exprs.len());
    for (k, e) in exprs.iter().enumerate() {
        let cam = &cameras[if cameras.len() == 1 { 0 } else { k }];
        let (frame, mut timing) = drive_timed(model, asset, ctx, e, cam)?;
        save_png(&frame, dir.join(format!("frame_{k:04}.png")))?;
        timing.frame = k;
        rows.push(timing);
    }
    let path = dir.join("timing.csv");
    std::fs::write(&path, timing_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Times `n_frames` drives of the same expression and camera.
pub fn benchmark(model: &Model, asset: &AvatarAsset, ctx: &HeadContext, expr: &ExpressionParams, cam: &Camera, n_frames: usize) -> Result<BenchReport> {
    if n_frames == 0 {
        return Err(Error::Invalid("benchmark needs at least one frame".into()));
    }
    let rows = (0..n_frames).map(|_| drive_timed(model, asset, ctx, expr, cam).map(|(_, t)| t)).collect::<Result<Vec<_>>>()?;
    let mut stages: Vec<StageStats> = STAGES.iter().enumerate().map(|(i, s)| StageStats::of(s, &rows.iter().map(|r| r.seconds[i]).collect::<Vec<_>>())).collect();
    stages.push(StageStats::of("total", &rows.iter().map(FrameTiming::total).collect::<Vec<_>>()));
    Ok(BenchReport { frames: n_frames, primitives: ctx.skin.len(), stages })
}
