//! JSON scene and camera files.
//!
//! Scene:
//! ```json
//! { "background_color": [r, g, b],
//!   "gaussians": [ { "mean": [x, y, z], "quaternion": [w, x, y, z],
//!                    "log_scale": [sx, sy, sz], "opacity_logit": o,
//!                    "color": [r, g, b] } ] }
//! ```
//! Camera: `fx, fy, cx, cy, width, height, near_clip` and `world_to_camera`,
//! the 3×4 matrix `[R | t]` flattened row-major into 12 numbers.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Camera, Scene};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    near_clip: f64,
    world_to_camera: [f64; 12],
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn scene_to_json(scene: &Scene) -> String {
    serde_json::to_string_pretty(scene).expect("scene serializes")
}

pub fn scene_from_json(text: &str) -> std::result::Result<Scene, String> {
    let scene: Scene = serde_json::from_str(text).map_err(|e| e.to_string())?;
    scene.validate().map_err(|e| e.to_string())?;
    Ok(scene)
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    scene_from_json(&read_text(path)?).map_err(|r| Error::format("scene", path, r))
}

pub fn write_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &scene_to_json(scene))
}

pub fn camera_to_json(cam: &Camera) -> String {
    let r = &cam.rotation;
    let t = &cam.translation;
    let file = CameraFile {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width,
        height: cam.height,
        near_clip: cam.near_clip,
        world_to_camera: [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ],
    };
    serde_json::to_string_pretty(&file).expect("camera serializes")
}

pub fn camera_from_json(text: &str) -> std::result::Result<Camera, String> {
    let f: CameraFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let m = &f.world_to_camera;
    let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let translation = Vector3::new(m[3], m[7], m[11]);
    Camera::new(
        f.fx,
        f.fy,
        f.cx,
        f.cy,
        f.width,
        f.height,
        f.near_clip,
        rotation,
        translation,
    )
    .map_err(|e| e.to_string())
}

pub fn read_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let path = path.as_ref();
    camera_from_json(&read_text(path)?).map_err(|r| Error::format("camera", path, r))
}

pub fn write_camera(cam: &Camera, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &camera_to_json(cam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian3D;

    #[test]
    fn scene_roundtrip() {
        let scene = Scene::new(
            vec![Gaussian3D {
                mean: [0.1, -0.2, 0.3],
                rotation: [0.5, 0.5, 0.5, 0.5],
                log_scale: [-1.0, -2.0, -3.0],
                opacity_logit: 0.7,
                color: [0.1, 0.2, 0.3],
            }],
            [0.0, 0.5, 1.0],
        )
        .unwrap();
        let text = scene_to_json(&scene);
        assert!(text.contains("\"quaternion\""));
        assert_eq!(scene_from_json(&text).unwrap(), scene);
    }

    #[test]
    fn camera_roundtrip() {
        let cam = Camera::look_at(
            Vector3::new(1.0, 2.0, 0.5),
            Vector3::zeros(),
            Vector3::z(),
            30.0,
            16,
            12,
        )
        .unwrap();
        let back = camera_from_json(&camera_to_json(&cam)).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn rejects_empty_scene_and_bad_camera() {
        assert!(scene_from_json(r#"{"background_color":[0,0,0],"gaussians":[]}"#).is_err());
        let bad = r#"{"fx":-1,"fy":1,"cx":0,"cy":0,"width":4,"height":4,"near_clip":0.1,
            "world_to_camera":[1,0,0,0, 0,1,0,0, 0,0,1,0]}"#;
        assert!(camera_from_json(bad).is_err());
    }
}
