//! Differentiable Gaussian splatting.
//!
//! Splat attributes are stored channel-first: `position` is `3 x M`,
//! `rotation` `4 x M` (w, x, y, z), `scale` `3 x M`, `opacity` `M`, `color` `3 x M`.

mod camera;
mod cloud;
mod export;
mod mask;
mod op;
pub mod raster;

pub use camera::Camera;
pub use cloud::{gather_cloud, GaussianMapSet, PosedTexels, TexelSkin};
pub use export::{save_png, write_turntable};
pub use mask::mouth_mask;
pub use op::{render_tape, SplatVars};
pub use raster::{project, render_backward, CloudGrads, RasterMode, Splat2d};

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub position: Vec<f64>,
    pub rotation: Vec<f64>,
    pub scale: Vec<f64>,
    pub opacity: Vec<f64>,
    pub color: Vec<f64>,
}

/// Borrowed channel-first splat attributes.
#[derive(Clone, Copy)]
pub struct CloudView<'a> {
    m: usize,
    position: &'a [f64],
    rotation: &'a [f64],
    scale: &'a [f64],
    opacity: &'a [f64],
    color: &'a [f64],
}

impl<'a> CloudView<'a> {
    pub fn new(position: &'a [f64], rotation: &'a [f64], scale: &'a [f64], opacity: &'a [f64], color: &'a [f64]) -> Result<Self> {
        let m = opacity.len();
        if position.len() != 3 * m || rotation.len() != 4 * m || scale.len() != 3 * m || color.len() != 3 * m {
            return Err(Error::Shape {
                op: "render",
                detail: format!(
                    "{m} opacities but {}/{}/{}/{} position/rotation/scale/color values",
                    position.len(),
                    rotation.len(),
                    scale.len(),
                    color.len()
                ),
            });
        }
        Ok(Self { m, position, rotation, scale, opacity, color })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    fn col3(&self, d: &[f64], i: usize) -> [f64; 3] {
        [d[i], d[self.m + i], d[2 * self.m + i]]
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.col3(self.position, i)
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.col3(self.scale, i)
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.col3(self.color, i)
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let m = self.m;
        [self.rotation[i], self.rotation[m + i], self.rotation[2 * m + i], self.rotation[3 * m + i]]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        self.opacity[i]
    }
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn view(&self) -> Result<CloudView<'_>> {
        CloudView::new(&self.position, &self.rotation, &self.scale, &self.opacity, &self.color)
    }

    /// Builds a cloud from per-primitive rows.
    pub fn from_rows(rows: &[([f64; 3], [f64; 4], [f64; 3], f64, [f64; 3])]) -> Self {
        let m = rows.len();
        let mut c = Self {
            position: vec![0.0; 3 * m],
            rotation: vec![0.0; 4 * m],
            scale: vec![0.0; 3 * m],
            opacity: vec![0.0; m],
            color: vec![0.0; 3 * m],
        };
        for (i, (p, q, s, o, col)) in rows.iter().enumerate() {
            for k in 0..3 {
                c.position[k * m + i] = p[k];
                c.scale[k * m + i] = s[k];
                c.color[k * m + i] = col[k];
            }
            for k in 0..4 {
                c.rotation[k * m + i] = q[k];
            }
            c.opacity[i] = *o;
        }
        c
    }

    /// Copy with primitives reordered so that new primitive `k` is old `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let m = self.len();
        let pick = |d: &[f64], ch: usize| (0..ch).flat_map(|k| perm.iter().map(move |&i| d[k * m + i])).collect::<Vec<_>>();
        Self {
            position: pick(&self.position, 3),
            rotation: pick(&self.rotation, 4),
            scale: pick(&self.scale, 3),
            opacity: pick(&self.opacity, 1),
            color: pick(&self.color, 3),
        }
    }
}

/// RGB planes (`3 x H x W`) and accumulated alpha (`H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderedFrame {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.rgb[i], self.rgb[n + i], self.rgb[2 * n + i]]
    }

    /// `4 x H x W` planes: RGB then alpha.
    pub fn planes(&self) -> Vec<f64> {
        let mut v = self.rgb.clone();
        v.extend_from_slice(&self.alpha);
        v
    }
}

pub fn render(cloud: &GaussianCloud, cam: &Camera, bg: [f64; 3]) -> Result<RenderedFrame> {
    render_with(cloud, cam, bg, RasterMode::default())
}

pub fn render_with(cloud: &GaussianCloud, cam: &Camera, bg: [f64; 3], mode: RasterMode) -> Result<RenderedFrame> {
    cam.validate()?;
    let mut planes = raster::render_planes(&cloud.view()?, cam, bg, mode);
    let n = cam.width * cam.height;
    let alpha = planes.split_off(3 * n);
    Ok(RenderedFrame { width: cam.width, height: cam.height, rgb: planes, alpha })
}

#[cfg(test)]
mod tests;
