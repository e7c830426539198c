//! Pinhole cameras (x right, y down, z forward).

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation, row-major.
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
    pub near: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    /// Camera at `eye` looking at `target`, with world `+y` up in the image.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], focal: f64, width: usize, height: usize) -> Self {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, [0.0, 1.0, 0.0]));
        let y = cross(z, x);
        let rot = [x, y, z];
        let trans = [0, 1, 2].map(|r| -(rot[r][0] * eye[0] + rot[r][1] * eye[1] + rot[r][2] * eye[2]));
        Self { fx: focal, fy: focal, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height, rot, trans, near: 0.01 }
    }

    /// Camera on a horizontal circle of `radius` around the origin at azimuth
    /// `yaw` (0 = in front of the face, on `+z`) and elevation `pitch` (radians).
    pub fn orbit(yaw: f64, pitch: f64, radius: f64, focal: f64, width: usize, height: usize) -> Self {
        let eye = [radius * pitch.cos() * yaw.sin(), radius * pitch.sin(), radius * pitch.cos() * yaw.cos()];
        Self::look_at(eye, [0.0, 0.0, 0.0], focal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera focal lengths and image size must be positive".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| self.rot[i][k] * self.rot[j][k]).sum();
                if (d - if i == j { 1.0 } else { 0.0 }).abs() > 1e-6 {
                    return Err(Error::Invalid("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|r| self.rot[r][0] * p[0] + self.rot[r][1] * p[1] + self.rot[r][2] * p[2] + self.trans[r])
    }

    /// Pixel coordinates (pixel centers at half-integers) and depth.
    pub fn project_point(&self, p: [f64; 3]) -> Option<([f64; 2], f64)> {
        let c = self.to_camera(p);
        (c[2] > self.near).then(|| ([self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy], c[2]))
    }

    pub fn with_size(&self, width: usize, height: usize) -> Self {
        let (sx, sy) = (width as f64 / self.width as f64, height as f64 / self.height as f64);
        Self { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy, width, height, ..self.clone() }
    }

    /// One line of comma-separated values: fx, fy, cx, cy, width, height, rot (9), trans (3), near.
    pub fn to_csv(&self) -> String {
        let mut v = vec![self.fx, self.fy, self.cx, self.cy, self.width as f64, self.height as f64];
        v.extend(self.rot.iter().flatten());
        v.extend(self.trans);
        v.push(self.near);
        v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::format("camera", format!("{s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != 19 {
            return Err(Error::format("camera", format!("expected 19 fields, got {}", v.len())));
        }
        let cam = Self {
            fx: v[0],
            fy: v[1],
            cx: v[2],
            cy: v[3],
            width: v[4] as usize,
            height: v[5] as usize,
            rot: [[v[6], v[7], v[8]], [v[9], v[10], v[11]], [v[12], v[13], v[14]]],
            trans: [v[15], v[16], v[17]],
            near: v[18],
        };
        cam.validate()?;
        Ok(cam)
    }
}
