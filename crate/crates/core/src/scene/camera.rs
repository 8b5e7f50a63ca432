use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera frame: +x right, +y down, +z forward. Pixel `(col, row)` has its
/// center at `(col + 0.5, row + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near_clip: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        near_clip: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near_clip,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.near_clip > 0.0) {
            return Err(Error::invalid("near clip must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be non-zero"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if !(err < 1e-6) {
            return Err(Error::invalid(format!(
                "camera rotation is not orthonormal (|RtR - I| = {err:e})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera translation".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("up is parallel to the viewing direction"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            0.01,
            rotation,
            translation,
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Project a camera-frame point to continuous pixel coordinates.
    pub fn project(&self, pc: &Vector3<f64>) -> [f64; 2] {
        [self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy]
    }

    /// Camera-frame point at pixel coordinates `(u, v)` with camera z `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    /// The same camera after the world is moved by `x -> r x + t`.
    pub fn transformed(&self, r: &nalgebra::Rotation3<f64>, t: &Vector3<f64>) -> Camera {
        // x_cam = R x + T = R r^T (x' - t) + T
        let rotation = self.rotation * r.matrix().transpose();
        let translation = self.translation - rotation * t;
        Camera {
            rotation,
            translation,
            ..self.clone()
        }
    }

    /// Cameras evenly spaced on a horizontal ring around `target` (world +z up).
    pub fn ring(
        count: usize,
        radius: f64,
        elevation_deg: f64,
        phase_deg: f64,
        target: Vector3<f64>,
        focal: f64,
        size: usize,
    ) -> Result<Vec<Camera>> {
        let el = elevation_deg.to_radians();
        (0..count)
            .map(|i| {
                let az = phase_deg.to_radians() + std::f64::consts::TAU * i as f64 / count as f64;
                let eye = target
                    + Vector3::new(
                        radius * el.cos() * az.cos(),
                        radius * el.cos() * az.sin(),
                        radius * el.sin(),
                    );
                Camera::look_at(eye, target, Vector3::z(), focal, size, size)
            })
            .collect()
    }
}
