//! PNG frames and turntable sequences.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{render, Camera, GaussianCloud, RenderedFrame};
use crate::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(frame: &RenderedFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = image::RgbImage::from_fn(frame.width as u32, frame.height as u32, |x, y| {
        image::Rgb(frame.pixel(x as usize, y as usize).map(to_u8))
    });
    img.save(path).map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })
}

/// Renders `frames` views on a horizontal orbit around the origin, writing
/// `turntable_NNN.png` and an index `turntable.csv` (index, file, yaw, camera).
pub fn write_turntable(cloud: &GaussianCloud, base: &Camera, radius: f64, frames: usize, bg: [f64; 3], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("index,file,yaw,camera\n");
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let yaw = std::f64::consts::TAU * k as f64 / frames.max(1) as f64;
        let cam = Camera::orbit(yaw, 0.0, radius, base.fx, base.width, base.height);
        let frame = render(cloud, &cam, bg)?;
        let name = format!("turntable_{k:03}.png");
        save_png(&frame, dir.join(&name))?;
        let _ = writeln!(index, "{k},{name},{yaw},\"{}\"", cam.to_csv());
        out.push(dir.join(name));
    }
    let manifest = dir.join("turntable.csv");
    std::fs::write(&manifest, index).map_err(|e| Error::io(&manifest, e))?;
    Ok(out)
}
