//! One function per verb.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use uvhead::autodiff::{grad_check_op, sample_inputs, CATALOG};
use uvhead::data::{expressions_from_csv, generate_dataset, load_image, load_mask, pca_project, select_anchors, DataConfig, Dataset, ExpressionTable, SamplerConfig};
use uvhead::loss::{grad_check_loss, LossWeights, LOSS_CATALOG};
use uvhead::pipeline::{self, AvatarAsset, FrameTiming, HeadContext, Model, ModelConfig, RefineConfig, RefineView, TrainConfig, STAGES};
use uvhead::recon::ImageSet;
use uvhead::render::{save_png, Camera, RenderedFrame};
use uvhead::rig::{ExpressionParams, HeadRig};
use uvhead::Tensor;

use crate::{AnimateArgs, BenchmarkArgs, DatagenArgs, GradcheckArgs, PcaPlotArgs, ReconstructArgs, RefineArgs, TrainArgs};

const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn mask_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}_mask.png"))
}

/// Images with their masks; a missing mask file means the whole frame.
fn load_inputs(paths: &[PathBuf]) -> anyhow::Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let (mut images, mut masks) = (Vec::new(), Vec::new());
    for p in paths {
        let img: Tensor<f32> = load_image(p)?;
        let mp = mask_path(p);
        let mask = if mp.is_file() {
            load_mask(&mp)?
        } else {
            let s = img.shape();
            Tensor::full(&[s[1], s[2]], 1.0)
        };
        log::info!("event=input image={} mask={}", p.display(), if mp.is_file() { mp.display().to_string() } else { "none".into() });
        images.push(img);
        masks.push(mask);
    }
    Ok((images, masks))
}

fn load_cameras(path: &Path) -> anyhow::Result<Vec<Camera>> {
    let text = read_text(path)?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(Camera::from_csv).collect::<uvhead::Result<Vec<_>>>()?)
}

fn load_context(model: &Model, rig: &Path) -> anyhow::Result<HeadContext> {
    let rig = HeadRig::load(rig)?;
    Ok(HeadContext::new(rig, &model.cfg.recon, BACKGROUND)?)
}

/// Model, rig context and asset, checked against each other.
fn load_bundle(model: &Path, rig: &Path, asset: &Path) -> anyhow::Result<(Model, HeadContext, AvatarAsset)> {
    let model = Model::load(model)?;
    let ctx = load_context(&model, rig)?;
    let asset = AvatarAsset::load(asset)?;
    asset.check_context(&ctx)?;
    asset.check_model(&model)?;
    Ok((model, ctx, asset))
}

fn front_camera(model: &Model, radius: f64, focal_frac: f64) -> Camera {
    let s = model.cfg.recon.image_size;
    Camera::orbit(0.0, 0.0, radius, focal_frac * s as f64, s, s)
}

pub fn datagen(a: DatagenArgs) -> anyhow::Result<()> {
    let cfg = DataConfig { n_ids: a.ids, n_expr: a.expressions, n_views: a.views, image_size: a.image_size, uv_size: a.uv_size, seed: a.seed, rig_seed: a.rig_seed, ..DataConfig::default() };
    let start = Instant::now();
    let m = generate_dataset(&cfg, &a.out)?;
    let frames: usize = m.identities.iter().map(|i| i.frames.len()).sum();
    println!("event=datagen out={} identities={} frames={frames} seconds={:.2}", a.out.display(), m.identities.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn parse_held_out(items: &[String]) -> anyhow::Result<Vec<(usize, usize)>> {
    items
        .iter()
        .map(|s| {
            let (e, v) = s.split_once(':').with_context(|| format!("held-out pair '{s}' is not expression:view"))?;
            Ok((e.trim().parse()?, v.trim().parse()?))
        })
        .collect()
}

fn parse_weights(w: &[f64]) -> anyhow::Result<LossWeights> {
    ensure!(w.len() == 6, "expected 6 loss weights (l1,ssim,lpips,mouth,xyz,scale), got {}", w.len());
    Ok(LossWeights { l1: w[0], ssim: w[1], lpips: w[2], mouth: w[3], xyz: w[4], scale: w[5] })
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let data = Dataset::load(&a.data)?;
    let mut model = match (&a.init, &a.model_config) {
        (Some(dir), _) => Model::load(dir)?,
        (None, Some(p)) => Model::new(ModelConfig::from_toml(&read_text(p)?)?, a.seed)?,
        (None, None) => Model::new(ModelConfig::default(), a.seed)?,
    };
    let cfg = TrainConfig {
        lr: a.lr,
        weights: parse_weights(&a.weights)?,
        min_inputs: a.min_inputs,
        max_inputs: a.max_inputs,
        supervision_views: a.supervision_views,
        steps: a.steps,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        clip: a.clip,
        held_out: parse_held_out(&a.held_out)?,
        sampler: SamplerConfig { k_anchor: a.anchors, random_per_id: a.random_per_id, seed: a.seed },
        metric: a.metric,
        log_every: a.log_every,
    };
    let report = pipeline::train(&mut model, &data, &cfg, &a.out)?;
    let last = a.out.join("final");
    model.save(&last)?;
    let final_loss = report.log.rows.last().map(|r| r.2).unwrap_or(f64::NAN);
    println!(
        "event=train_done steps={} final_total={final_loss:.6} checkpoints={} model={} seconds={:.1}",
        cfg.steps,
        report.checkpoints.len(),
        last.display(),
        report.seconds
    );
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs) -> anyhow::Result<()> {
    ensure!((1..=4).contains(&a.images.len()), "reconstruct takes 1 to 4 images, got {}", a.images.len());
    let model = Model::load(&a.model)?;
    let ctx = load_context(&model, &a.rig)?;
    let (images, masks) = load_inputs(&a.images)?;
    let set = ImageSet::new(images, masks)?;
    let start = Instant::now();
    let asset = pipeline::reconstruct_asset(&model, &ctx, &set, &a.rig.display().to_string(), &a.model.join("unet.ckpt").display().to_string())?;
    let encode = start.elapsed().as_secs_f64();
    asset.save(&a.out)?;
    println!("event=reconstruct images={} encode_s={encode:.4} out={} model_version={}", set.len(), a.out.display(), asset.meta.model_version);
    Ok(())
}

pub fn refine(a: RefineArgs) -> anyhow::Result<()> {
    let (model, ctx, asset) = load_bundle(&a.model, &a.rig, &a.asset)?;
    ensure!(!a.images.is_empty(), "refine needs the asset's input images");
    let cams = load_cameras(a.cameras.as_deref().context("--cameras is required")?)?;
    let exprs = expressions_from_csv(&read_text(a.expressions.as_deref().context("--expressions is required")?)?, &ctx.rig)?;
    ensure!(cams.len() == a.images.len() && exprs.len() == a.images.len(), "{} images but {} cameras and {} expressions", a.images.len(), cams.len(), exprs.len());
    let (images, masks) = load_inputs(&a.images)?;
    let views: Vec<RefineView> = images.into_iter().zip(masks).zip(cams).zip(exprs).map(|(((image, mask), camera), expr)| RefineView { image, mask, camera, expr }).collect();
    let cfg = RefineConfig { iters: a.iters, lr: a.lr, decoder_only: a.decoder_only, ..RefineConfig::default() };
    let out = pipeline::refine(&model, &asset, &ctx, &views, &cfg)?;
    out.asset.save(&a.out)?;
    if let Some(dir) = &a.out_model {
        let refined = Model { recon_params: out.recon_params.clone(), ..model };
        refined.save(dir)?;
        println!("event=refined_model path={}", dir.display());
    }
    let drop = if out.l1_before > 0.0 { 1.0 - out.l1_after / out.l1_before } else { 0.0 };
    println!(
        "event=refine iters={} l1_before={:.6} l1_after={:.6} l1_reduction={drop:.4} seconds={:.2} out={}",
        cfg.iters,
        out.l1_before,
        out.l1_after,
        out.seconds,
        a.out.display()
    );
    Ok(())
}

fn summarize(timings: &[FrameTiming]) {
    let n = timings.len().max(1) as f64;
    let mut fields: Vec<String> = STAGES.iter().enumerate().map(|(k, s)| format!("{s}_ms={:.3}", timings.iter().map(|t| t.seconds[k]).sum::<f64>() * 1e3 / n)).collect();
    let total = timings.iter().map(FrameTiming::total).sum::<f64>() / n;
    fields.push(format!("total_ms={:.3} fps={:.2}", total * 1e3, 1.0 / total.max(1e-12)));
    println!("event=animate_timing frames={} {}", timings.len(), fields.join(" "));
}

pub fn animate(a: AnimateArgs) -> anyhow::Result<()> {
    let (model, ctx, asset) = load_bundle(&a.model, &a.rig, &a.asset)?;
    let exprs = match &a.expressions {
        Some(p) => expressions_from_csv(&read_text(p)?, &ctx.rig)?,
        None => Vec::new(),
    };
    let cameras = match (&a.cameras, exprs.is_empty()) {
        (Some(p), _) => load_cameras(p)?,
        (None, false) => vec![front_camera(&model, a.radius, a.focal_frac)],
        (None, true) => {
            let f = front_camera(&model, a.radius, a.focal_frac);
            (0..a.orbit_frames).map(|k| Camera::orbit(std::f64::consts::TAU * k as f64 / a.orbit_frames as f64, 0.0, a.radius, f.fx, f.width, f.height)).collect()
        }
    };
    let exprs = if exprs.is_empty() { vec![ExpressionParams::for_rig(&ctx.rig); cameras.len()] } else { exprs };
    let timings = pipeline::animate(&model, &asset, &ctx, &exprs, &cameras, &a.out)?;
    println!("event=animate frames={} out={}", timings.len(), a.out.display());
    summarize(&timings);
    Ok(())
}

pub fn benchmark(a: BenchmarkArgs) -> anyhow::Result<()> {
    let (model, ctx, asset) = load_bundle(&a.model, &a.rig, &a.asset)?;
    let expr = match &a.expressions {
        Some(p) => expressions_from_csv(&read_text(p)?, &ctx.rig)?.into_iter().next().context("expression file is empty")?,
        None => ExpressionParams::for_rig(&ctx.rig),
    };
    let cam = front_camera(&model, a.radius, a.focal_frac);
    let report = pipeline::benchmark(&model, &asset, &ctx, &expr, &cam, a.frames)?;
    for line in report.to_lines() {
        println!("{line}");
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let wanted = |name: &str| a.only.is_empty() || a.only.iter().any(|o| o == name);
    let mut failed = Vec::new();
    let mut report = |kind: &str, name: &str, errs: &[f64]| {
        let worst = errs.iter().copied().fold(0.0, f64::max);
        let pass = worst <= a.tol;
        println!("record=gradcheck kind={kind} name={name} seeds={} max_rel_err={worst:.3e} pass={pass}", errs.len());
        if !pass {
            failed.push(name.to_string());
        }
    };
    for &op in CATALOG.iter().filter(|o| wanted(o)) {
        let errs = (0..a.seeds).map(|s| grad_check_op(op, &sample_inputs(op, s)?, a.eps)).collect::<uvhead::Result<Vec<_>>>()?;
        report("op", op, &errs);
    }
    for &loss in LOSS_CATALOG.iter().filter(|l| wanted(l)) {
        let errs = (0..a.seeds).map(|s| grad_check_loss(loss, s, a.loss_eps)).collect::<uvhead::Result<Vec<_>>>()?;
        report("loss", loss, &errs);
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(","));
    }
    println!("event=gradcheck status=ok");
    Ok(())
}

/// White canvas with `points` as filled squares.
fn scatter(points: &[([f64; 2], [f64; 3], usize)], size: usize) -> RenderedFrame {
    let n = size * size;
    let mut rgb = vec![1.0; 3 * n];
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for (p, _, _) in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let margin = 0.08 * size as f64;
    let span = (size as f64 - 2.0 * margin).max(1.0);
    for (p, color, r) in points {
        let px = |d: usize| margin + span * (p[d] - lo[d]) / (hi[d] - lo[d]).max(1e-12);
        let (cx, cy) = (px(0) as i64, (size as f64 - px(1)) as i64);
        let r = *r as i64;
        for y in (cy - r).max(0)..=(cy + r).min(size as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(size as i64 - 1) {
                let i = y as usize * size + x as usize;
                for c in 0..3 {
                    rgb[c * n + i] = color[c];
                }
            }
        }
    }
    RenderedFrame { width: size, height: size, rgb, alpha: vec![1.0; n] }
}

pub fn pca_plot(a: PcaPlotArgs) -> anyhow::Result<()> {
    let path = match &a.table {
        Some(p) => p.clone(),
        None => a.data.join(uvhead::data::DatasetManifest::load(&a.data)?.table),
    };
    let table = ExpressionTable::from_csv(&read_text(&path)?)?;
    let anchors = select_anchors(&table, a.anchors.min(table.len()))?;
    let (pca, coords) = pca_project(&table, &anchors, 2)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = String::from("identity,frame,pc1,pc2,anchor\n");
    let mut points = Vec::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        let is_anchor = anchors.contains(&i);
        let (id, frame, _) = &table.rows[i];
        csv.push_str(&format!("{id},{frame},{},{},{}\n", c[0], c[1], is_anchor as u8));
        points.push(([c[0], c[1]], [0.55, 0.55, 0.6], 2));
    }
    for &k in &anchors {
        points.push(([coords[k][0], coords[k][1]], [0.85, 0.1, 0.1], 4));
    }
    let csv_path = a.out.join("pca.csv");
    std::fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let png = a.out.join("pca.png");
    save_png(&scatter(&points, a.size), &png)?;
    let total: f64 = pca.eigenvalues.iter().sum();
    let explained = if total > 0.0 { (pca.eigenvalues[0] + pca.eigenvalues[1]) / total } else { 0.0 };
    println!("event=pca rows={} anchors={} explained_2d={explained:.4} csv={} png={}", table.len(), anchors.len(), csv_path.display(), png.display());
    Ok(())
}
