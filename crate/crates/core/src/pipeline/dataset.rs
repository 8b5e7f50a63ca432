use std::f64::consts::{PI, TAU};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{logit, render, Camera, Gaussian3D, Scene};
use crate::tensor::Tensor;

/// Colorway of a synthetic scene; the discriminant is its condition label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleClass {
    Warm = 1,
    Cool = 2,
    Metal = 3,
}

impl StyleClass {
    pub const ALL: [StyleClass; 3] = [StyleClass::Warm, StyleClass::Cool, StyleClass::Metal];

    pub fn label(self) -> u32 {
        self as u32
    }

    pub fn from_label(label: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == label)
    }

    pub fn name(self) -> &'static str {
        match self {
            StyleClass::Warm => "warm",
            StyleClass::Cool => "cool",
            StyleClass::Metal => "metal",
        }
    }

    /// Color of a primitive with tone `s ∈ [0, 1]`.
    pub fn color(self, s: f64) -> [f64; 3] {
        let (a, b) = match self {
            StyleClass::Warm => ([0.55, 0.08, 0.05], [1.0, 0.80, 0.25]),
            StyleClass::Cool => ([0.05, 0.12, 0.45], [0.35, 0.85, 0.95]),
            StyleClass::Metal => ([0.25, 0.26, 0.28], [0.85, 0.86, 0.88]),
        };
        let s = s.clamp(0.0, 1.0);
        [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryFamily {
    Cluster,
    Ring,
    Column,
    Dumbbell,
}

impl GeometryFamily {
    pub const ALL: [GeometryFamily; 4] = [
        GeometryFamily::Cluster,
        GeometryFamily::Ring,
        GeometryFamily::Column,
        GeometryFamily::Dumbbell,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub num_scenes: usize,
    pub views_per_scene: usize,
    pub image_size: usize,
    pub focal: f64,
    pub ring_radius: f64,
    pub elevation_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scenes: 12,
            views_per_scene: 24,
            image_size: 64,
            focal: 70.0,
            ring_radius: 3.2,
            elevation_deg: 20.0,
        }
    }
}

pub const BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

/// Uncolored geometry: the primitives plus a tone per primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDraft {
    pub family: GeometryFamily,
    pub gaussians: Vec<Gaussian3D>,
    pub tones: Vec<f64>,
}

impl ShapeDraft {
    pub fn colored(&self, style: StyleClass) -> Scene {
        let mut gs = self.gaussians.clone();
        for (g, &t) in gs.iter_mut().zip(&self.tones) {
            g.color = style.color(t);
        }
        Scene::new(gs, BACKGROUND).expect("draft geometry is valid")
    }
}

/// Random object of 20 to 80 Gaussians within roughly the unit ball.
pub fn random_shape(rng: &mut ChaCha8Rng, family: GeometryFamily) -> ShapeDraft {
    let n = rng.random_range(20..=80usize);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let g = |rng: &mut ChaCha8Rng| jitter.sample(rng);
    let tilt = UnitQuaternion::from_euler_angles(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(0.0..TAU),
    );
    let mut means = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    for i in 0..n {
        let (p, dir) = match family {
            GeometryFamily::Cluster => {
                let p = Vector3::new(g(rng), g(rng), g(rng)) * 0.42;
                (p, Vector3::new(g(rng), g(rng), g(rng)))
            }
            GeometryFamily::Ring => {
                let a = TAU * i as f64 / n as f64 + rng.random_range(-0.05..0.05);
                let r = 0.7 + 0.06 * g(rng);
                let p = Vector3::new(r * a.cos(), r * a.sin(), 0.08 * g(rng));
                (p, Vector3::new(-a.sin(), a.cos(), 0.0))
            }
            GeometryFamily::Column => {
                let h = rng.random_range(-0.85..0.85);
                let r = 0.25 + 0.2 * (PI * h).cos().abs();
                let a = rng.random_range(0.0..TAU);
                let p = Vector3::new(r * a.cos() * 0.8, r * a.sin() * 0.8, h);
                (p, Vector3::new(0.0, 0.0, 1.0))
            }
            GeometryFamily::Dumbbell => {
                let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                let p = Vector3::new(0.55 * side, 0.0, 0.0) + Vector3::new(g(rng), g(rng), g(rng)) * 0.25;
                (p, Vector3::new(g(rng), g(rng), g(rng)))
            }
        };
        means.push(tilt * p);
        tangents.push(tilt * dir);
    }
    let freq = Vector3::new(g(rng), g(rng), g(rng)).normalize() * rng.random_range(1.5..3.0);
    let phase = rng.random_range(0.0..TAU);
    let mut gaussians = Vec::with_capacity(n);
    let mut tones = Vec::with_capacity(n);
    for (p, dir) in means.iter().zip(&tangents) {
        let base = rng.random_range(-2.3..-1.6f64);
        let stretch = if matches!(family, GeometryFamily::Ring | GeometryFamily::Column) {
            0.5
        } else {
            rng.random_range(0.0..0.4)
        };
        let axis = if dir.norm() > 1e-9 {
            dir.normalize()
        } else {
            Vector3::x()
        };
        let rot = UnitQuaternion::rotation_between(&Vector3::x(), &axis).unwrap_or_else(UnitQuaternion::identity);
        let q = rot.quaternion();
        let tone = (0.5 + 0.4 * (freq.dot(p) + phase).sin() + 0.08 * g(rng)).clamp(0.0, 1.0);
        tones.push(tone);
        gaussians.push(Gaussian3D {
            mean: [p.x, p.y, p.z],
            rotation: [q.w, q.i, q.j, q.k],
            log_scale: [base + stretch, base - 0.1, base - 0.1],
            opacity_logit: logit(rng.random_range(0.7..0.95)),
            color: [0.0; 3],
        });
    }
    ShapeDraft {
        family,
        gaussians,
        tones,
    }
}

/// One rendered view: color, raw depth and coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub camera: Camera,
    /// `H×W×3`.
    pub image: Tensor,
    /// `H×W` camera z, 0 off the object.
    pub depth: Tensor,
    /// `H×W`.
    pub alpha: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub style: StyleClass,
    pub draft: ShapeDraft,
    pub scene: Scene,
    pub views: Vec<ViewRecord>,
}

impl SceneRecord {
    pub fn label(&self) -> u32 {
        self.style.label()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub scenes: Vec<SceneRecord>,
}

/// Cameras on a horizontal ring around the origin.
pub fn ring_cameras(cfg: &DatasetConfig, count: usize, phase_deg: f64) -> Result<Vec<Camera>> {
    Camera::ring(
        count,
        cfg.ring_radius,
        cfg.elevation_deg,
        phase_deg,
        Vector3::zeros(),
        cfg.focal,
        cfg.image_size,
    )
}

pub fn render_views(scene: &Scene, cameras: &[Camera]) -> Vec<ViewRecord> {
    cameras
        .iter()
        .map(|cam| {
            let v = render(scene, cam);
            ViewRecord {
                camera: cam.clone(),
                image: v.color_tensor(),
                depth: v.depth_tensor(),
                alpha: v.alpha_tensor(),
            }
        })
        .collect()
}

/// Scenes cycle through the style classes, so class counts differ by at most
/// one; geometry family and shape are drawn independently of the class.
pub fn generate_synthetic_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.num_scenes == 0 || cfg.views_per_scene == 0 {
        return Err(Error::invalid("dataset needs at least one scene and one view"));
    }
    if cfg.image_size == 0 || !(cfg.focal > 0.0) || !(cfg.ring_radius > 1.5) {
        return Err(Error::invalid("bad image size, focal length or ring radius"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.num_scenes);
    for i in 0..cfg.num_scenes {
        let style = StyleClass::ALL[i % 3];
        let family = GeometryFamily::ALL[rng.random_range(0..GeometryFamily::ALL.len())];
        let draft = random_shape(&mut rng, family);
        let scene = draft.colored(style);
        let phase = rng.random_range(0.0..360.0);
        let cameras = ring_cameras(cfg, cfg.views_per_scene, phase)?;
        let views = render_views(&scene, &cameras);
        scenes.push(SceneRecord {
            style,
            draft,
            scene,
            views,
        });
    }
    Ok(Dataset {
        config: cfg.clone(),
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            num_scenes: 4,
            views_per_scene: 3,
            ..Default::default()
        }
    }

    #[test]
    fn reproducible() {
        assert_eq!(
            generate_synthetic_dataset(&small()).unwrap(),
            generate_synthetic_dataset(&small()).unwrap()
        );
    }

    #[test]
    fn sizes_and_balance() {
        let cfg = DatasetConfig {
            num_scenes: 7,
            views_per_scene: 2,
            ..Default::default()
        };
        let d = generate_synthetic_dataset(&cfg).unwrap();
        let mut counts = [0usize; 3];
        for s in &d.scenes {
            counts[s.label() as usize - 1] += 1;
            assert!((20..=80).contains(&s.scene.len()));
            assert_eq!(s.views.len(), 2);
            assert_eq!(s.views[0].image.shape(), &[64, 64, 3]);
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn objects_fill_part_of_the_frame() {
        let d = generate_synthetic_dataset(&small()).unwrap();
        for s in &d.scenes {
            for v in &s.views {
                let covered = v.alpha.data().iter().filter(|&&a| a > 0.5).count();
                let frac = covered as f64 / v.alpha.len() as f64;
                assert!(frac > 0.03 && frac < 0.9, "coverage {frac}");
                assert!(v.depth.data().iter().all(|&d| d >= 0.0));
            }
        }
    }

    #[test]
    fn rejects_empty() {
        let mut cfg = small();
        cfg.num_scenes = 0;
        assert!(generate_synthetic_dataset(&cfg).is_err());
    }

    #[test]
    fn palettes_are_distinct() {
        for s in [0.0, 0.5, 1.0] {
            let w = StyleClass::Warm.color(s);
            let c = StyleClass::Cool.color(s);
            assert!(w[0] > c[0] && w[2] < c[2]);
        }
        assert_eq!(StyleClass::from_label(2), Some(StyleClass::Cool));
        assert_eq!(StyleClass::from_label(0), None);
    }
}
