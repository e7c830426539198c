//! End-to-end training over a synthetic dataset.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{psnr, render_frame_tape, HeadContext, Model};
use crate::checkpoint::Bound;
use crate::data::{build_adjusted_sampler, Dataset, IdentityData, SamplerConfig};
use crate::loss::{l1, mouth_perceptual, perceptual, regularizers, ssim_loss, total, LossLog, LossWeights, MetricRegistry, PerceptualMetric, DEFAULT_METRIC};
use crate::optim::Adam;
use crate::recon::ImageSet;
use crate::render::mouth_mask;
use crate::{Error, Result, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weights: LossWeights,
    pub min_inputs: usize,
    pub max_inputs: usize,
    /// Supervision views per step, each from a distinct expression.
    pub supervision_views: usize,
    pub steps: usize,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// `(expression, view)` pairs never used for inputs or supervision.
    pub held_out: Vec<(usize, usize)>,
    pub sampler: SamplerConfig,
    pub metric: String,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            weights: LossWeights::default(),
            min_inputs: 1,
            max_inputs: 4,
            supervision_views: 4,
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            clip: 1.0,
            held_out: Vec::new(),
            sampler: SamplerConfig::default(),
            metric: DEFAULT_METRIC.to_string(),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.min_inputs == 0 || self.min_inputs > self.max_inputs {
            return Err(Error::Invalid(format!("input count range {}..={} is empty or starts at 0", self.min_inputs, self.max_inputs)));
        }
        if self.supervision_views == 0 {
            return Err(Error::Invalid("supervision_views must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::format("train config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: LossLog,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
}

/// One training example: the input frames and the supervised frames of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub identity: usize,
    pub inputs: Vec<(usize, usize)>,
    pub targets: Vec<(usize, usize)>,
}

/// Per-identity pools of usable expressions, from the adjusted sampler or
/// every expression when an identity has too few frames for it.
fn expression_pools(data: &Dataset, cfg: &TrainConfig) -> Result<Vec<Vec<usize>>> {
    let all = || data.identities.iter().map(|d| (0..d.expressions.len()).collect()).collect();
    match build_adjusted_sampler(&data.table, &cfg.sampler) {
        Ok(plan) => Ok(data
            .identities
            .iter()
            .map(|d| {
                let mut v: Vec<usize> = plan.per_id.get(&d.id).map(|f| f.iter().map(|r| r.frame).collect()).unwrap_or_default();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect()),
        Err(e) => {
            log::warn!("event=sampler_fallback reason={:?}", e.to_string());
            Ok(all())
        }
    }
}

pub fn sample_batch(rng: &mut ChaCha8Rng, data: &Dataset, pools: &[Vec<usize>], cfg: &TrainConfig) -> Result<Batch> {
    let identity = rng.random_range(0..data.identities.len());
    let d = &data.identities[identity];
    let held: BTreeSet<(usize, usize)> = cfg.held_out.iter().copied().collect();
    let frames: Vec<(usize, usize)> =
        pools[identity].iter().flat_map(|&e| (0..d.cameras.len()).map(move |v| (e, v))).filter(|f| !held.contains(f)).collect();
    if frames.is_empty() {
        return Err(Error::Invalid(format!("identity {} has no frames left after hold-out", d.id)));
    }
    let n_in = rng.random_range(cfg.min_inputs..=cfg.max_inputs).min(frames.len());
    let inputs: Vec<(usize, usize)> = frames.choose_multiple(rng, n_in).copied().collect();
    let mut exprs: Vec<usize> = frames.iter().map(|f| f.0).collect::<BTreeSet<_>>().into_iter().collect();
    exprs.shuffle(rng);
    let targets = exprs
        .into_iter()
        .take(cfg.supervision_views)
        .map(|e| {
            let views: Vec<usize> = frames.iter().filter(|f| f.0 == e).map(|f| f.1).collect();
            (e, *views.choose(rng).expect("nonempty"))
        })
        .collect();
    Ok(Batch { identity, inputs, targets })
}

/// Inputs of a batch as an image set.
pub fn batch_images(d: &IdentityData, frames: &[(usize, usize)]) -> Result<ImageSet<f32>> {
    let (images, masks) = frames.iter().map(|&(e, v)| d.frame(e, v).clone()).unzip();
    ImageSet::new(images, masks)
}

/// Cached screen-space mouth masks keyed by `(identity, expression, view)`.
#[derive(Default)]
pub struct MouthCache(HashMap<(usize, usize, usize), Tensor<f32>>);

impl MouthCache {
    pub fn get(&mut self, ctx: &HeadContext, d: &IdentityData, key: (usize, usize, usize)) -> Result<&Tensor<f32>> {
        if !self.0.contains_key(&key) {
            let cam = &d.cameras[key.2];
            let m = mouth_mask(&ctx.rig, &d.expressions[key.1], cam)?;
            let t = Tensor::new(vec![cam.height, cam.width], m.into_iter().map(|v| v as f32).collect())?;
            self.0.insert(key, t);
        }
        Ok(&self.0[&key])
    }
}

/// The tape of one training step, evaluated up to the weighted total.
pub struct StepGraph {
    pub tape: Tape<f32>,
    pub total: Var,
    pub components: [f64; 6],
}

/// Forward pass and loss for one batch with both networks trainable.
pub fn step_graph(model: &Model, ctx: &HeadContext, data: &Dataset, batch: &Batch, metric: &dyn PerceptualMetric<f32>, weights: &LossWeights, mouths: &mut MouthCache) -> Result<StepGraph> {
    let d = &data.identities[batch.identity];
    let mut t = Tape::new();
    let mut b: Bound = model.recon_params.bind(&mut t, true)?;
    let ub = model.unet_params.bind(&mut t, true)?;
    b.extend(ub.clone());
    let images = batch_images(d, &batch.inputs)?;
    let rv = model.recon.forward(&mut t, &b, &images)?;
    let mut sums: [Option<Var>; 6] = [None; 6];
    let mut add = |t: &mut Tape<f32>, k: usize, v: Var| -> Result<()> {
        sums[k] = Some(match sums[k] {
            Some(a) => t.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for &(e, v) in &batch.targets {
        let out = render_frame_tape(&mut t, ctx, &model.unet, &ub, rv.id, rv.raw, &d.expressions[e], &d.cameras[v])?;
        let rgb = t.slice(out, 0, 0, 3)?;
        let gt = t.constant(d.frame(e, v).0.clone())?;
        let c = l1(&mut t, rgb, gt)?;
        add(&mut t, 0, c)?;
        let c = ssim_loss(&mut t, rgb, gt)?;
        add(&mut t, 1, c)?;
        let c = perceptual(&mut t, rgb, gt, metric)?;
        add(&mut t, 2, c)?;
        let mask = mouths.get(ctx, d, (batch.identity, e, v))?;
        let c = mouth_perceptual(&mut t, rgb, gt, mask, metric)?;
        add(&mut t, 3, c)?;
    }
    let n = batch.targets.len() as f64;
    let mut comps: [Option<Var>; 6] = [None; 6];
    for k in 0..4 {
        comps[k] = Some(t.scale(sums[k].expect("at least one target"), 1.0 / n)?);
    }
    let st = ctx.act.apply(&mut t, rv.raw)?;
    let (lx, ls) = regularizers(&mut t, st.position, st.scale, &ctx.anchors)?;
    comps[4] = Some(lx);
    comps[5] = Some(ls);
    let total = total(&mut t, &comps, weights)?;
    let components = comps.map(|c| t.value(c.expect("set")).item() as f64);
    Ok(StepGraph { tape: t, total, components })
}

fn checkpoint(model: &Model, out: &Path, step: usize, list: &mut Vec<PathBuf>) -> Result<()> {
    let dir = out.join(format!("ckpt_{step:06}"));
    model.save(&dir)?;
    log::info!("event=checkpoint step={step} path={}", dir.display());
    list.push(dir);
    Ok(())
}

/// Trains `model` in place. Writes `ckpt_000000` before the first step,
/// periodic and final checkpoints, and `loss.csv` into `out`.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, out: impl AsRef<Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let out = out.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dc = &data.manifest.config;
    if dc.image_size != model.cfg.recon.image_size {
        return Err(Error::Invalid(format!("dataset images are {} px, model expects {}", dc.image_size, model.cfg.recon.image_size)));
    }
    let ctx = HeadContext::new(data.rig.clone(), &model.cfg.recon, dc.background)?;
    let metric = MetricRegistry::<f32>::default().get(&cfg.metric)?;
    let pools = expression_pools(data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let make_adam = || {
        let a = Adam::new(cfg.lr);
        if cfg.clip > 0.0 { a.with_clip(cfg.clip) } else { a }
    };
    let (mut opt_recon, mut opt_unet) = (make_adam(), make_adam());
    let mut mouths = MouthCache::default();
    let mut log = LossLog::default();
    let mut checkpoints = Vec::new();
    checkpoint(model, out, 0, &mut checkpoints)?;
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let batch = sample_batch(&mut rng, data, &pools, cfg)?;
        let g = step_graph(model, &ctx, data, &batch, metric.as_ref(), &cfg.weights, &mut mouths)?;
        let total = g.tape.value(g.total).item() as f64;
        let grads = g.tape.backward(g.total, None)?;
        drop(g.tape);
        let gn_r = opt_recon.step(&mut model.recon_params, &grads)?;
        let gn_u = opt_unet.step(&mut model.unet_params, &grads)?;
        log.push(step, g.components, total);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1 || step == cfg.steps) {
            let c = g.components;
            log::info!(
                "step={step} total={total:.6} l1={:.6} ssim={:.6} lpips={:.6} mouth={:.6} xyz={:.3e} scale={:.3e} grad_recon={gn_r:.4e} grad_unet={gn_u:.4e} elapsed_s={:.1}",
                c[0],
                c[1],
                c[2],
                c[3],
                c[4],
                c[5],
                start.elapsed().as_secs_f64()
            );
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            checkpoint(model, out, step, &mut checkpoints)?;
        }
    }
    if cfg.steps > 0 {
        checkpoint(model, out, cfg.steps, &mut checkpoints)?;
    }
    log.save(out.join("loss.csv"))?;
    Ok(TrainReport { log, checkpoints, seconds: start.elapsed().as_secs_f64() })
}

/// Reconstructs identity `identity` from `inputs`, drives it to `target`'s
/// expression and camera, and scores the render against the ground truth.
pub fn evaluate_psnr(model: &Model, ctx: &HeadContext, data: &Dataset, identity: usize, inputs: &[(usize, usize)], target: (usize, usize)) -> Result<f64> {
    let d = &data.identities[identity];
    let images = batch_images(d, inputs)?;
    let mut t = Tape::new();
    let rb = model.recon_params.bind(&mut t, false)?;
    let ub = model.unet_params.bind(&mut t, false)?;
    let rv = model.recon.forward(&mut t, &rb, &images)?;
    let out = render_frame_tape(&mut t, ctx, &model.unet, &ub, rv.id, rv.raw, &d.expressions[target.0], &d.cameras[target.1])?;
    let rgb = t.slice(out, 0, 0, 3)?;
    let pred: Vec<f64> = t.value(rgb).data().iter().map(|&v| v as f64).collect();
    let gt: Vec<f64> = d.frame(target.0, target.1).0.data().iter().map(|&v| v as f64).collect();
    Ok(psnr(&pred, &gt))
}
