use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codec::PatchCodec;
use super::dataset::{render_views, ViewRecord};
use super::depth::depth_condition;
use crate::attention::AlignmentConfig;
use crate::denoiser::Denoiser;
use crate::diffusion::{edit_batch, invert_batch, Condition, GuidanceConfig, InversionMode, LatentCode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::snap;
use crate::scene::{optimize_scene, Camera, OptimizeConfig, OptimizeReport, Scene, View};
use crate::tensor::Tensor;

/// Deterministic generator for the named sub-stream of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Where joint denoising starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// DDIM-inverted latents of the source renders.
    #[default]
    Inverted,
    /// Fresh standard normal latents.
    RandomNoise,
}

/// A complete editing request.
#[derive(Clone, Debug)]
pub struct EditJob {
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    pub codec: PatchCodec,
    pub source_condition: Condition,
    pub target_condition: Condition,
    pub guidance: GuidanceConfig,
    /// With empty `reference_ids`, `num_references` views are drawn at random.
    pub alignment: AlignmentConfig,
    pub num_references: usize,
    /// Per-view `H×W` masks; edited pixels are kept where the mask exceeds 0.5.
    pub masks: Option<Vec<Tensor>>,
    pub seed: u64,
    pub start: StartMode,
    pub inversion: InversionMode,
    pub optimize: OptimizeConfig,
}

impl EditJob {
    /// Job with paper defaults: `ω = 7.5`, `λ = 0.6`, four random references.
    pub fn new(scene: Scene, cameras: Vec<Camera>, codec: PatchCodec, source: Condition, target: Condition) -> Self {
        Self {
            scene,
            cameras,
            codec,
            source_condition: source,
            target_condition: target,
            guidance: GuidanceConfig { omega: 7.5 },
            alignment: AlignmentConfig::default(),
            num_references: 4,
            masks: None,
            seed: 0,
            start: StartMode::Inverted,
            inversion: InversionMode::default(),
            optimize: OptimizeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() < 2 {
            return Err(Error::invalid("an edit job needs at least two cameras"));
        }
        self.scene.validate()?;
        let (w, h) = (self.cameras[0].width, self.cameras[0].height);
        let p = self.codec.patch_size;
        for cam in &self.cameras {
            cam.validate()?;
            if (cam.width, cam.height) != (w, h) {
                return Err(Error::invalid("all cameras must share one image size"));
            }
        }
        if w % p != 0 || h % p != 0 {
            return Err(Error::invalid(format!(
                "{w}x{h} images are not divisible by patch size {p}"
            )));
        }
        if !self.guidance.omega.is_finite() {
            return Err(Error::invalid("guidance scale must be finite"));
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.cameras.len() {
                return Err(Error::invalid(format!(
                    "{} masks for {} views",
                    masks.len(),
                    self.cameras.len()
                )));
            }
            for m in masks {
                m.ensure_shape(&[h, w])?;
            }
        }
        self.alignment.validate()?;
        let n = self.cameras.len();
        if let Some(&bad) = self.alignment.reference_ids.iter().find(|&&r| r >= n) {
            return Err(Error::invalid(format!(
                "reference view {bad} out of range for {n} views"
            )));
        }
        if self.alignment.enabled && self.alignment.reference_ids.is_empty() && self.num_references == 0 {
            return Err(Error::invalid("alignment needs at least one reference view"));
        }
        Ok(())
    }

    /// Alignment with concrete, sorted reference ids.
    pub fn resolved_alignment(&self) -> Result<AlignmentConfig> {
        self.validate()?;
        if !self.alignment.enabled {
            return Ok(AlignmentConfig::disabled());
        }
        let mut cfg = self.alignment.clone();
        if cfg.reference_ids.is_empty() {
            let n = self.cameras.len();
            let k = self.num_references.min(n);
            let mut rng = substream(self.seed, "references");
            cfg.reference_ids = rand::seq::index::sample(&mut rng, n, k).into_vec();
        }
        cfg.reference_ids.sort_unstable();
        Ok(cfg)
    }
}

/// Rendered source views and their encoder-side inputs.
#[derive(Clone, Debug)]
pub struct PreparedViews {
    pub views: Vec<ViewRecord>,
    pub latents: Vec<LatentCode>,
    /// Normalized depth on the latent grid, one per view.
    pub depths: Vec<Tensor>,
}

pub fn prepare_views(job: &EditJob) -> Result<PreparedViews> {
    job.validate()?;
    let views = render_views(&job.scene, &job.cameras);
    let latents = views
        .iter()
        .enumerate()
        .map(|(i, v)| job.codec.encode(&v.image, i))
        .collect::<Result<Vec<_>>>()?;
    let size = latents[0].data.shape()[1];
    let depths = views
        .iter()
        .map(|v| depth_condition(&v.depth, &v.alpha, size))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedViews { views, latents, depths })
}

/// Latents at the last grid step from which joint editing starts.
pub fn starting_latents(
    job: &EditJob,
    prepared: &PreparedViews,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<Vec<LatentCode>> {
    match job.start {
        StartMode::Inverted => invert_batch(
            &prepared.latents,
            job.source_condition,
            &prepared.depths,
            denoiser,
            sched,
            job.inversion,
        ),
        StartMode::RandomNoise => Ok(random_latents(job.seed, &prepared.latents, sched)),
    }
}

fn random_latents(seed: u64, like: &[LatentCode], sched: &NoiseSchedule) -> Vec<LatentCode> {
    let mut rng = substream(seed, "start-noise");
    let last = sched.timestep_grid.len() - 1;
    like.iter()
        .map(|z| {
            let data = (0..z.data.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let t = Tensor::new(z.data.shape().to_vec(), data).expect("shape matches length");
            LatentCode::new(t, last, z.view_id)
        })
        .collect()
}

/// Decoded edits clamped to `[0, 1]`.
pub fn decode_views(codec: &PatchCodec, latents: &[LatentCode]) -> Result<Vec<Tensor>> {
    latents
        .iter()
        .map(|z| {
            let mut img = codec.decode(z)?;
            for v in img.data_mut() {
                *v = snap(v.clamp(0.0, 1.0) as f64);
            }
            Ok(img)
        })
        .collect()
}

/// `edited` inside the mask, `original` elsewhere.
pub fn composite(original: &Tensor, edited: &Tensor, mask: &Tensor) -> Result<Tensor> {
    original.ensure_same_shape(edited)?;
    let (h, w) = (original.shape()[0], original.shape()[1]);
    mask.ensure_shape(&[h, w])?;
    let mut out = original.clone();
    for (p, &m) in mask.data().iter().enumerate() {
        if m > 0.5 {
            out.data_mut()[3 * p..3 * p + 3].copy_from_slice(&edited.data()[3 * p..3 * p + 3]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EditOutcome {
    /// Renders of the source scene, with raw depth and coverage.
    pub views: Vec<ViewRecord>,
    pub references: Vec<usize>,
    /// Decoded edits before masking.
    pub decoded: Vec<Tensor>,
    /// Supervision targets after masking.
    pub edited: Vec<Tensor>,
    pub latents: Vec<LatentCode>,
    pub scene: Scene,
    pub optimize: OptimizeReport,
}

/// Joint editing from given start latents, then decoding, masking and scene
/// re-optimization.
pub fn edit_from(
    job: &EditJob,
    prepared: &PreparedViews,
    start: &[LatentCode],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<EditOutcome> {
    let align = job.resolved_alignment()?;
    let latents = edit_batch(
        start,
        job.target_condition,
        &prepared.depths,
        denoiser,
        sched,
        job.guidance,
        &align,
    )?;
    let decoded = decode_views(&job.codec, &latents)?;
    let edited = match &job.masks {
        None => decoded.clone(),
        Some(masks) => prepared
            .views
            .par_iter()
            .zip(&decoded)
            .zip(masks)
            .map(|((v, d), m)| composite(&v.image, d, m))
            .collect::<Result<Vec<_>>>()?,
    };
    let targets: Vec<View> = job
        .cameras
        .iter()
        .zip(&edited)
        .map(|(c, t)| View {
            camera: c.clone(),
            target: t.clone(),
            mask: None,
        })
        .collect();
    let (scene, optimize) = optimize_scene(&job.scene, &targets, &job.optimize)?;
    Ok(EditOutcome {
        views: prepared.views.clone(),
        references: align.reference_ids,
        decoded,
        edited,
        latents,
        scene,
        optimize,
    })
}

/// Render, encode, start (invert or sample), jointly edit, decode, composite
/// and re-optimize. Deterministic in the job seed.
pub fn run_edit(job: &EditJob, denoiser: &dyn Denoiser, sched: &NoiseSchedule) -> Result<EditOutcome> {
    let prepared = prepare_views(job)?;
    let start = starting_latents(job, &prepared, denoiser, sched)?;
    edit_from(job, &prepared, &start, denoiser, sched)
}
