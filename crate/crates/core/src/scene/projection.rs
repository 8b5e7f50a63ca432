use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{Camera, Gaussian3D};

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance `R diag(exp(log_scale))^2 R^T`.
pub fn covariance_from_rs(rotation: &[f64; 4], log_scale: &[f64; 3]) -> Matrix3<f64> {
    let r = quat_to_rotation(rotation);
    let s2 = Vector3::new(
        (2.0 * log_scale[0]).exp(),
        (2.0 * log_scale[1]).exp(),
        (2.0 * log_scale[2]).exp(),
    );
    r * Matrix3::from_diagonal(&s2) * r.transpose()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Pixel coordinates of the projected mean.
    pub mean2d: Vector2<f64>,
    /// Image-plane covariance in px², before low-pass filtering.
    pub cov2d: Matrix2<f64>,
    /// Camera-frame z of the mean.
    pub depth: f64,
    pub visible: bool,
}

/// Jacobian of the pinhole projection evaluated at camera-frame point `t`.
pub(crate) fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

/// Splat one Gaussian onto the image plane: `cov2d = J W Σ Wᵀ Jᵀ`.
pub fn project_gaussian(g: &Gaussian3D, cam: &Camera) -> Projection {
    let t = cam.world_to_camera(&Vector3::from(g.mean));
    if t.z <= cam.near_clip {
        return Projection {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::zeros(),
            depth: t.z,
            visible: false,
        };
    }
    let sigma = covariance_from_rs(&g.rotation, &g.log_scale);
    let j = projection_jacobian(cam, &t);
    let v = cam.rotation * sigma * cam.rotation.transpose();
    let cov = j * v * j.transpose();
    let cov2d = (cov + cov.transpose()) * 0.5;
    let [u, w] = cam.project(&t);
    Projection {
        mean2d: Vector2::new(u, w),
        cov2d,
        depth: t.z,
        visible: true,
    }
}
