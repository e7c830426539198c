//! The rasterizer as a tape operation.

use super::raster::{render_backward, render_planes, RasterMode};
use super::{Camera, CloudView};
use crate::autodiff::CustomOp;
use crate::{Error, Result, Scalar, Tape, Tensor, Var};

/// Splat attribute variables: position `3 x M`, rotation `4 x M`, scale `3 x M`,
/// opacity `1 x M`, color `3 x M`.
#[derive(Clone, Copy, Debug)]
pub struct SplatVars {
    pub position: Var,
    pub rotation: Var,
    pub scale: Var,
    pub opacity: Var,
    pub color: Var,
}

impl SplatVars {
    fn list(&self) -> [Var; 5] {
        [self.position, self.rotation, self.scale, self.opacity, self.color]
    }
}

struct RenderOp {
    cam: Camera,
    bg: [f64; 3],
    mode: RasterMode,
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn from_f64<T: Scalar>(shape: &[usize], v: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::new(shape.to_vec(), v.into_iter().map(T::lit).collect())
}

impl<T: Scalar> CustomOp<T> for RenderOp {
    fn name(&self) -> &str {
        "render"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let d: Vec<Vec<f64>> = inputs.iter().map(|t| to_f64(t)).collect();
        let view = CloudView::new(&d[0], &d[1], &d[2], &d[3], &d[4])?;
        let g = render_backward(&view, &self.cam, self.bg, self.mode, &to_f64(grad));
        Ok(vec![
            Some(from_f64(inputs[0].shape(), g.position)?),
            Some(from_f64(inputs[1].shape(), g.rotation)?),
            Some(from_f64(inputs[2].shape(), g.scale)?),
            Some(from_f64(inputs[3].shape(), g.opacity)?),
            Some(from_f64(inputs[4].shape(), g.color)?),
        ])
    }
}

/// Renders onto the tape; the result is `4 x H x W` (RGB, then alpha).
pub fn render_tape<T: Scalar>(tape: &mut Tape<T>, splats: &SplatVars, cam: &Camera, bg: [f64; 3], mode: RasterMode) -> Result<Var> {
    cam.validate()?;
    let vars = splats.list();
    let m = tape.shape(splats.opacity).iter().product::<usize>();
    for (v, c) in vars.iter().zip([3, 4, 3, 1, 3]) {
        if tape.shape(*v) != [c, m] {
            return Err(Error::Shape { op: "render", detail: format!("expected {:?}, got {:?}", [c, m], tape.shape(*v)) });
        }
    }
    let d: Vec<Vec<f64>> = vars.iter().map(|&v| to_f64(tape.value(v))).collect();
    let view = CloudView::new(&d[0], &d[1], &d[2], &d[3], &d[4])?;
    let planes = render_planes(&view, cam, bg, mode);
    let out = from_f64(&[4, cam.height, cam.width], planes)?;
    tape.custom(&vars, out, Box::new(RenderOp { cam: cam.clone(), bg, mode }))
}
