//! TOML job files.
//!
//! ```toml
//! scene = "scene.json"
//! cameras = ["camera_00.json", "camera_01.json"]
//! codec = "codec.toml"            # optional
//! classifier = "classifier.toml"  # optional
//! masks = ["mask_00.png", "mask_01.png"]  # optional, PNG or GTEN
//! source_condition = 1
//! target_condition = 2
//! omega = 7.5
//! lambda = 0.6
//! alignment = true
//! num_references = 4
//! reference_ids = []              # empty: drawn from the seed
//! seed = 0
//! start = "inverted"              # or "random_noise"
//! ddim_steps = 50
//! inversion_iterations = 10       # 0 selects plain inversion
//! optimize_steps = 1000
//! ```
//!
//! Relative paths resolve against the job file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::codec::PatchCodec;
use super::edit::{EditJob, StartMode};
use super::evaluate::StyleClassifier;
use crate::attention::AlignmentConfig;
use crate::diffusion::{Condition, GuidanceConfig, InversionMode};
use crate::error::{Error, Result};
use crate::image::read_png;
use crate::scene::io::{read_camera, read_scene};
use crate::scene::OptimizeConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub scene: PathBuf,
    pub cameras: Vec<PathBuf>,
    #[serde(default)]
    pub codec: Option<PathBuf>,
    #[serde(default)]
    pub classifier: Option<PathBuf>,
    #[serde(default)]
    pub masks: Option<Vec<PathBuf>>,
    pub source_condition: u32,
    pub target_condition: u32,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_true")]
    pub alignment: bool,
    #[serde(default = "default_references")]
    pub num_references: usize,
    #[serde(default)]
    pub reference_ids: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub start: StartMode,
    #[serde(default = "default_ddim_steps")]
    pub ddim_steps: usize,
    #[serde(default = "default_iterations")]
    pub inversion_iterations: usize,
    #[serde(default = "default_optimize_steps")]
    pub optimize_steps: usize,
}

fn default_omega() -> f64 {
    7.5
}
fn default_lambda() -> f64 {
    0.6
}
fn default_true() -> bool {
    true
}
fn default_references() -> usize {
    4
}
fn default_ddim_steps() -> usize {
    50
}
fn default_iterations() -> usize {
    10
}
fn default_optimize_steps() -> usize {
    1000
}

/// A parsed job with every referenced file loaded.
#[derive(Clone, Debug)]
pub struct LoadedJob {
    pub job: EditJob,
    pub ddim_steps: usize,
    /// Whether the codec came from the job file rather than a default.
    pub has_codec: bool,
    pub classifier: Option<StyleClassifier>,
}

fn read_mask(path: &Path) -> Result<Tensor> {
    let t = if path.extension().is_some_and(|e| e == "gten") {
        Tensor::read_gten(path)?
    } else {
        read_png(path)?
    };
    match t.shape() {
        [_, _] => Ok(t),
        [h, w, 3] => {
            let data = t.data().chunks_exact(3).map(|c| c[0]).collect();
            Tensor::new(vec![*h, *w], data)
        }
        s => Err(Error::format("mask", path, format!("unexpected shape {s:?}"))),
    }
}

impl JobSpec {
    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("job serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|r| Error::format("job", path, r))
    }

    /// Load every referenced file. `base` anchors relative paths.
    pub fn load(&self, base: &Path) -> Result<LoadedJob> {
        let at = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        if self.ddim_steps == 0 {
            return Err(Error::invalid("ddim_steps must be positive"));
        }
        let scene = read_scene(at(&self.scene))?;
        let cameras = self
            .cameras
            .iter()
            .map(|c| read_camera(at(c)))
            .collect::<Result<Vec<_>>>()?;
        let codec = match &self.codec {
            Some(p) => PatchCodec::read(at(p))?,
            None => PatchCodec::identity(4)?,
        };
        let classifier = self
            .classifier
            .as_ref()
            .map(|p| StyleClassifier::read(at(p)))
            .transpose()?;
        let masks = self
            .masks
            .as_ref()
            .map(|ms| ms.iter().map(|m| read_mask(&at(m))).collect::<Result<Vec<_>>>())
            .transpose()?;
        let alignment = if self.alignment {
            AlignmentConfig::new(self.lambda, self.reference_ids.clone())?
        } else {
            AlignmentConfig::disabled()
        };
        let job = EditJob {
            scene,
            cameras,
            codec,
            source_condition: Condition(self.source_condition),
            target_condition: Condition(self.target_condition),
            guidance: GuidanceConfig { omega: self.omega },
            alignment,
            num_references: self.num_references,
            masks,
            seed: self.seed,
            start: self.start,
            inversion: match self.inversion_iterations {
                0 => InversionMode::Plain,
                n => InversionMode::FixedPoint { iterations: n },
            },
            optimize: OptimizeConfig {
                steps: self.optimize_steps,
                ..Default::default()
            },
        };
        job.validate()?;
        Ok(LoadedJob {
            job,
            ddim_steps: self.ddim_steps,
            has_codec: self.codec.is_some(),
            classifier,
        })
    }
}

/// Read and load a job file.
pub fn load_job(path: impl AsRef<Path>) -> Result<LoadedJob> {
    let path = path.as_ref();
    let spec = JobSpec::read(path)?;
    spec.load(path.parent().unwrap_or(Path::new(".")))
}
