//! Test-time refinement of the reconstruction network on the input views.
//!
//! The UNet is bound as constants. Mouth and teeth texels of the static maps
//! are pinned to the feed-forward values: on the tape through a mask, and in
//! the output asset by copying the original bytes back.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{render_frame_tape, AvatarAsset, HeadContext, Model};
use crate::checkpoint::ParamStore;
use crate::loss::{l1, perceptual, ssim_loss, LossWeights, MetricRegistry, PerceptualMetric, DEFAULT_METRIC};
use crate::optim::{restore_masked, Adam};
use crate::recon::ImageSet;
use crate::render::Camera;
use crate::rig::ExpressionParams;
use crate::{Error, Result, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub iters: usize,
    pub lr: f64,
    /// Optimize only the map decoder (`dec.*`).
    pub decoder_only: bool,
    /// Only the l1, ssim and lpips weights are used.
    pub weights: LossWeights,
    pub metric: String,
    /// Abort when the loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { iters: 20, lr: 1e-4, decoder_only: false, weights: LossWeights::default(), metric: DEFAULT_METRIC.to_string(), divergence_factor: 10.0 }
    }
}

/// An input image with the camera and expression it was captured under.
#[derive(Clone, Debug)]
pub struct RefineView {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub camera: Camera,
    pub expr: ExpressionParams,
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub asset: AvatarAsset,
    pub recon_params: ParamStore<f32>,
    /// Loss before each update, then the final loss.
    pub losses: Vec<f64>,
    pub l1_before: f64,
    pub l1_after: f64,
    pub seconds: f64,
}

struct Eval {
    tape: Tape<f32>,
    loss: Var,
    l1: f64,
    raw: Tensor<f32>,
    id: Tensor<f32>,
}

/// Reconstruction with the mouth texels replaced by `frozen_raw`, rendered on
/// every view; loss averaged over views.
fn evaluate(model: &Model, params: &ParamStore<f32>, frozen: &ParamStore<f32>, ctx: &HeadContext, views: &[RefineView], frozen_raw: &Tensor<f32>, cfg: &RefineConfig, metric: &dyn PerceptualMetric<f32>) -> Result<Eval> {
    let mut t = Tape::new();
    let mut b = params.bind(&mut t, true)?;
    b.extend(frozen.bind(&mut t, false)?);
    let ub = model.unet_params.bind(&mut t, false)?;
    let images = ImageSet::new(views.iter().map(|v| v.image.clone()).collect(), views.iter().map(|v| v.mask.clone()).collect())?;
    let rv = model.recon.forward(&mut t, &b, &images)?;
    let keep = ctx.mouth_texels.map(|m| 1.0 - m);
    let free = t.mask_mul(rv.raw, &keep)?;
    let pinned = Tensor::from_fn(frozen_raw.shape(), |i| frozen_raw.data()[i] * ctx.mouth_texels.data()[i % ctx.mouth_texels.numel()]);
    let pinned = t.constant(pinned)?;
    let raw = t.add(free, pinned)?;
    let mut acc: Option<Var> = None;
    let mut l1_sum = 0.0;
    for v in views {
        let out = render_frame_tape(&mut t, ctx, &model.unet, &ub, rv.id, raw, &v.expr, &v.camera)?;
        let rgb = t.slice(out, 0, 0, 3)?;
        let gt = t.constant(v.image.clone())?;
        let a = l1(&mut t, rgb, gt)?;
        l1_sum += t.value(a).item() as f64;
        let s = ssim_loss(&mut t, rgb, gt)?;
        let p = perceptual(&mut t, rgb, gt, metric)?;
        let a = t.scale(a, cfg.weights.l1)?;
        let s = t.scale(s, cfg.weights.ssim)?;
        let p = t.scale(p, cfg.weights.lpips)?;
        let sum = t.add(a, s)?;
        let sum = t.add(sum, p)?;
        acc = Some(match acc {
            Some(x) => t.add(x, sum)?,
            None => sum,
        });
    }
    let loss = t.scale(acc.expect("views nonempty"), 1.0 / views.len() as f64)?;
    let value = t.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "refinement loss".into() });
    }
    let (raw, id) = (t.value(raw).clone(), t.value(rv.id).clone());
    Ok(Eval { tape: t, loss, l1: l1_sum / views.len() as f64, raw, id })
}

/// Refines the reconstruction parameters on `views` (which are also the
/// network inputs) and returns the re-decoded asset.
pub fn refine(model: &Model, asset: &AvatarAsset, ctx: &HeadContext, views: &[RefineView], cfg: &RefineConfig) -> Result<RefineOutcome> {
    if views.is_empty() {
        return Err(Error::Invalid("refinement needs at least one view".into()));
    }
    asset.check_context(ctx)?;
    if !(cfg.lr > 0.0) || !(cfg.divergence_factor > 1.0) {
        return Err(Error::Invalid(format!("refine lr must be positive and divergence factor above 1: {cfg:?}")));
    }
    let metric = MetricRegistry::<f32>::default().get(&cfg.metric)?;
    let start = Instant::now();
    let (mut params, frozen) = if cfg.decoder_only {
        let dec = model.recon_params.subset("dec.");
        let mut rest = ParamStore::new();
        for (n, v) in model.recon_params.iter().filter(|(n, _)| !n.starts_with("dec.")) {
            rest.insert(n, v.clone());
        }
        (dec, rest)
    } else {
        (model.recon_params.clone(), ParamStore::new())
    };
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iters + 1);
    let mut e = evaluate(model, &params, &frozen, ctx, views, &asset.raw, cfg, metric.as_ref())?;
    let l1_before = e.l1;
    let initial = e.tape.value(e.loss).item() as f64;
    losses.push(initial);
    for it in 0..cfg.iters {
        let grads = e.tape.backward(e.loss, None)?;
        adam.step(&mut params, &grads)?;
        e = evaluate(model, &params, &frozen, ctx, views, &asset.raw, cfg, metric.as_ref())?;
        let loss = e.tape.value(e.loss).item() as f64;
        log::info!("refine_iter={} loss={loss:.6} l1={:.6}", it + 1, e.l1);
        losses.push(loss);
        let limit = cfg.divergence_factor * initial;
        if loss > limit {
            return Err(Error::Diverged { loss, limit });
        }
    }
    if cfg.iters == 0 {
        let recon_params = model.recon_params.clone();
        return Ok(RefineOutcome { asset: asset.clone(), recon_params, losses, l1_before, l1_after: l1_before, seconds: start.elapsed().as_secs_f64() });
    }
    let mut raw = e.raw;
    let keep: Vec<bool> = ctx.mouth_texels.data().iter().map(|&m| m != 0.0).collect();
    restore_masked(&mut raw, &asset.raw, &keep);
    let refined = AvatarAsset::new(asset.meta.clone(), e.id, raw)?;
    let mut recon_params = frozen;
    recon_params.merge(params);
    Ok(RefineOutcome { asset: refined, recon_params, losses, l1_before, l1_after: e.l1, seconds: start.elapsed().as_secs_f64() })
}
