//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_distr::{Distribution, Normal};

use crate::attention::AlignmentConfig;
use crate::denoiser::{
    load_checkpoint, save_checkpoint, train_toy_denoiser, Denoiser, MixtureOracle, ToyConfig, TrainConfig,
};
use crate::diffusion::{build_schedule, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::{tile_grid, write_png};
use crate::pipeline::{
    depth_image, edit_from, evaluate, generate_synthetic_dataset, load_job, prepare_views, read_dataset, render_views,
    reprojection_error, ring_cameras, sha256_hex, starting_latents, substream, training_samples, write_dataset,
    write_manifest, write_view_files, ConsistencyReport, DatasetConfig, EditJob, LoadedJob, PatchCodec, PreparedViews,
    StartMode, StyleClassifier,
};
use crate::scene::io::{read_camera, read_scene, write_scene};
use crate::scene::{optimize_scene, psnr, render, Camera, OptimizeConfig, View};
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(
    name = "gsedit",
    version,
    about = "Multi-view consistent diffusion editing of Gaussian splatting scenes"
)]
pub struct Cli {
    /// Worker thread cap.
    #[arg(long, global = true, env = "GSEDIT_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic multi-view dataset.
    GenData(GenDataArgs),
    /// Train the toy denoiser on a generated dataset.
    TrainDenoiser(TrainArgs),
    /// Fit a jittered copy of a scene back to its renders.
    Reconstruct(ReconstructArgs),
    /// Render a scene from camera files.
    Render(RenderArgs),
    /// Run an edit job.
    Edit(EditArgs),
    /// Compare random-noise, inverted and aligned editing on one job.
    Ablate(EditArgs),
    /// Score edited views against the job's source renders.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub scenes: usize,
    #[arg(long, default_value_t = 24)]
    pub views: usize,
    /// Image side in pixels; the focal length scales with it.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Ground-truth scene to render targets from.
    #[arg(long)]
    pub scene: PathBuf,
    /// Camera files; a default ring is used when absent.
    #[arg(long, num_args = 1..)]
    pub cameras: Vec<PathBuf>,
    /// Ring size when no cameras are given.
    #[arg(long, default_value_t = 12)]
    pub views: usize,
    /// Every k-th view (k-1, 2k-1, ...) is held out.
    #[arg(long, default_value_t = 3)]
    pub holdout_every: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Mean jitter as a fraction of the scene extent.
    #[arg(long, default_value_t = 0.02)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub cameras: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub job: PathBuf,
    /// `oracle` or a checkpoint directory.
    #[arg(long, default_value = "oracle")]
    pub denoiser: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub job: PathBuf,
    /// Directory holding `edited_VV.gten` files.
    #[arg(long)]
    pub edited: PathBuf,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 3,
        Error::NonFinite(_) => 4,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be positive"));
        }
        // a pool may already exist when embedded; the cap is best effort then
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainDenoiser(a) => train(&a),
        Command::Reconstruct(a) => reconstruct(&a),
        Command::Render(a) => render_cmd(&a),
        Command::Edit(a) => edit(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    std::fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(from, e))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let base = DatasetConfig::default();
    let cfg = DatasetConfig {
        seed: a.seed,
        num_scenes: a.scenes,
        views_per_scene: a.views,
        image_size: a.size,
        focal: base.focal * a.size as f64 / base.image_size as f64,
        ..base
    };
    let ds = generate_synthetic_dataset(&cfg)?;
    let images: Vec<Tensor> = ds
        .scenes
        .iter()
        .flat_map(|s| s.views.iter().map(|v| v.image.clone()))
        .collect();
    let codec = PatchCodec::fit(4, &images)?;
    let classifier = StyleClassifier::fit_dataset(&ds)?;
    let files = write_dataset(&ds, &codec, &classifier, &a.out)?;
    let digest = write_manifest(&a.out, &files)?;
    println!("scenes = {}", ds.scenes.len());
    println!("views = {}", images.len());
    println!("files = {}", files.len());
    println!("manifest_sha256 = {digest}");
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_text(&text).map_err(|r| Error::format("training config", p, r))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let codec = PatchCodec::read(a.data.join("codec.toml"))?;
    let scenes = read_dataset(&a.data)?;
    let samples = training_samples(&scenes, &codec)?;
    let shape = samples
        .first()
        .ok_or_else(|| Error::invalid("dataset has no views"))?
        .latent
        .shape()
        .to_vec();
    let toy = ToyConfig {
        latent_channels: shape[0],
        latent_size: shape[1],
        ..Default::default()
    };
    let (model, report) = train_toy_denoiser(&samples, &toy, &cfg)?;
    save_checkpoint(&model, Some(&report), &a.out)?;
    codec.write(a.out.join("codec.toml"))?;
    let clf = a.data.join("classifier.toml");
    if clf.exists() {
        copy_file(&clf, &a.out.join("classifier.toml"))?;
    }
    write_text(&a.out.join("train.toml"), &cfg.to_text())?;
    println!("steps = {}", report.steps);
    println!("validation_mse = {:.6}", report.validation_mse);
    println!("baseline_mse = {:.6}", report.baseline_mse);
    Ok(())
}

fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let truth = read_scene(&a.scene)?;
    let cameras: Vec<Camera> = if a.cameras.is_empty() {
        ring_cameras(&DatasetConfig::default(), a.views, 0.0)?
    } else {
        a.cameras.iter().map(read_camera).collect::<Result<_>>()?
    };
    if a.holdout_every < 2 || cameras.len() < a.holdout_every {
        return Err(Error::invalid(
            "need --holdout-every >= 2 and at least that many cameras",
        ));
    }
    if !(a.jitter >= 0.0 && a.jitter.is_finite()) {
        return Err(Error::invalid("jitter must be a non-negative number"));
    }
    let is_held = |i: usize| i % a.holdout_every == a.holdout_every - 1;
    let views = render_views(&truth, &cameras);
    let train: Vec<View> = views
        .iter()
        .enumerate()
        .filter(|(i, _)| !is_held(*i))
        .map(|(_, v)| View {
            camera: v.camera.clone(),
            target: v.image.clone(),
            mask: None,
        })
        .collect();
    let mut init = truth.clone();
    let noise = Normal::new(0.0, a.jitter * truth.extent()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = substream(a.seed, "jitter");
    for g in &mut init.gaussians {
        for m in &mut g.mean {
            *m += noise.sample(&mut rng);
        }
    }
    let cfg = OptimizeConfig {
        steps: a.steps,
        ..Default::default()
    };
    let (fitted, report) = optimize_scene(&init, &train, &cfg)?;
    let mean_psnr = |held: bool| -> Result<f64> {
        let vals = views
            .iter()
            .enumerate()
            .filter(|(i, _)| is_held(*i) == held)
            .map(|(_, v)| psnr(&render(&fitted, &v.camera).color_tensor(), &v.image))
            .collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let text = format!(
        "train_views = {}\nheldout_views = {}\ninitial_loss = {:.8}\nfinal_loss = {:.8}\ntrain_psnr = {:.4}\nheldout_psnr = {:.4}\n",
        train.len(),
        views.len() - train.len(),
        report.initial_loss,
        report.final_loss,
        mean_psnr(false)?,
        mean_psnr(true)?
    );
    create_dir(&a.out)?;
    write_scene(&init, a.out.join("initial.json"))?;
    write_scene(&fitted, a.out.join("scene.json"))?;
    write_text(&a.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let scene = read_scene(&a.scene)?;
    let cameras = a.cameras.iter().map(read_camera).collect::<Result<Vec<_>>>()?;
    let views = render_views(&scene, &cameras);
    create_dir(&a.out)?;
    for (i, v) in views.iter().enumerate() {
        write_view_files(&a.out, i, v)?;
    }
    println!("views = {}", views.len());
    Ok(())
}

/// A loaded noise predictor with the schedule it was trained for.
pub struct Backend {
    pub denoiser: Box<dyn Denoiser>,
    pub sched: NoiseSchedule,
}

/// `spec` is `oracle` or a checkpoint directory. A checkpoint's codec and
/// classifier fill in whatever the job left unset.
pub fn load_backend(spec: &str, loaded: &mut LoadedJob) -> Result<Backend> {
    let job = &mut loaded.job;
    if spec == "oracle" {
        let sched = build_schedule(1000, loaded.ddim_steps)?;
        let shape = job.codec.latent_shape(job.cameras[0].height, job.cameras[0].width);
        let top = job.source_condition.0.max(job.target_condition.0).max(3);
        let labels: Vec<u32> = (0..=top).collect();
        let denoiser = Box::new(MixtureOracle::standard_normal(&shape, &labels, &sched)?);
        return Ok(Backend { denoiser, sched });
    }
    let dir = PathBuf::from(spec);
    let model = load_checkpoint(&dir)?;
    if !loaded.has_codec {
        let p = dir.join("codec.toml");
        if p.exists() {
            job.codec = PatchCodec::read(p)?;
        }
    }
    if loaded.classifier.is_none() {
        let p = dir.join("classifier.toml");
        if p.exists() {
            loaded.classifier = Some(StyleClassifier::read(p)?);
        }
    }
    job.validate()?;
    let sched = build_schedule(model.config().num_train_steps, loaded.ddim_steps)?;
    Ok(Backend {
        denoiser: Box::new(model),
        sched,
    })
}

fn score(prepared: &PreparedViews, edited: &[Tensor], loaded: &LoadedJob) -> Result<ConsistencyReport> {
    let target = loaded.job.target_condition.0;
    evaluate(&prepared.views, edited, loaded.classifier.as_ref().map(|c| (c, target)))
}

fn edit(a: &EditArgs) -> Result<()> {
    let mut loaded = load_job(&a.job)?;
    let backend = load_backend(&a.denoiser, &mut loaded)?;
    let job = &loaded.job;
    let prepared = prepare_views(job)?;
    let start = starting_latents(job, &prepared, backend.denoiser.as_ref(), &backend.sched)?;
    let outcome = edit_from(job, &prepared, &start, backend.denoiser.as_ref(), &backend.sched)?;
    let report = score(&prepared, &outcome.edited, &loaded)?;
    let rerendered: Vec<Tensor> = job
        .cameras
        .iter()
        .map(|c| render(&outcome.scene, c).color_tensor())
        .collect();
    let mut text = report.to_text();
    let refs: Vec<String> = outcome.references.iter().map(|r| r.to_string()).collect();
    text.push_str(&format!(
        "rerender_reprojection_error = {:.6}\n",
        reprojection_error(&prepared.views, &rerendered)?
    ));
    text.push_str(&format!("references = [{}]\n", refs.join(", ")));
    text.push_str(&format!(
        "optimize_initial_loss = {:.8}\n",
        outcome.optimize.initial_loss
    ));
    text.push_str(&format!("optimize_final_loss = {:.8}\n", outcome.optimize.final_loss));

    create_dir(&a.out)?;
    for (i, v) in prepared.views.iter().enumerate() {
        write_png(&v.image, a.out.join(format!("original_{i:02}.png")))?;
        write_png(
            &depth_image(&v.depth, &v.alpha)?,
            a.out.join(format!("depth_{i:02}.png")),
        )?;
        write_png(&outcome.edited[i], a.out.join(format!("edited_{i:02}.png")))?;
        outcome.edited[i].write_gten(a.out.join(format!("edited_{i:02}.gten")))?;
        write_png(&rerendered[i], a.out.join(format!("rerender_{i:02}.png")))?;
    }
    write_scene(&outcome.scene, a.out.join("scene.json"))?;
    write_text(&a.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Digest of everything an arm receives from the shared preparation stage.
fn input_hash(prepared: &PreparedViews) -> String {
    let mut bytes = Vec::new();
    for ((v, z), d) in prepared.views.iter().zip(&prepared.latents).zip(&prepared.depths) {
        bytes.extend(v.image.to_gten_bytes());
        bytes.extend(v.depth.to_gten_bytes());
        bytes.extend(z.data.to_gten_bytes());
        bytes.extend(d.to_gten_bytes());
    }
    sha256_hex(&bytes)
}

fn ablate(a: &EditArgs) -> Result<()> {
    let mut loaded = load_job(&a.job)?;
    let backend = load_backend(&a.denoiser, &mut loaded)?;
    let (denoiser, sched) = (backend.denoiser.as_ref(), &backend.sched);
    let mut base = loaded.job.clone();
    base.optimize.steps = 0;
    let prepared = prepare_views(&base)?;
    let inverted = starting_latents(
        &EditJob {
            start: StartMode::Inverted,
            ..base.clone()
        },
        &prepared,
        denoiser,
        sched,
    )?;
    let aligned = if base.alignment.enabled {
        base.alignment.clone()
    } else {
        AlignmentConfig::default()
    };
    let arms: [(&str, EditJob); 4] = [
        (
            "identity",
            EditJob {
                target_condition: base.source_condition,
                guidance: GuidanceConfig { omega: 1.0 },
                alignment: AlignmentConfig::disabled(),
                start: StartMode::Inverted,
                ..base.clone()
            },
        ),
        (
            "random_noise",
            EditJob {
                alignment: AlignmentConfig::disabled(),
                start: StartMode::RandomNoise,
                ..base.clone()
            },
        ),
        (
            "inverted",
            EditJob {
                alignment: AlignmentConfig::disabled(),
                start: StartMode::Inverted,
                ..base.clone()
            },
        ),
        (
            "inverted_align",
            EditJob {
                alignment: aligned,
                start: StartMode::Inverted,
                ..base.clone()
            },
        ),
    ];
    let mut text = String::new();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (name, job) in &arms {
        let start = match job.start {
            StartMode::Inverted => inverted.clone(),
            StartMode::RandomNoise => starting_latents(job, &prepared, denoiser, sched)?,
        };
        let out = edit_from(job, &prepared, &start, denoiser, sched)?;
        let report = score(&prepared, &out.edited, &loaded)?;
        text.push_str(&format!("{name}.input_hash = {}\n", input_hash(&prepared)));
        for line in report.to_text().lines() {
            text.push_str(&format!("{name}.{line}\n"));
        }
        rows.push(out.edited);
        reports.push(report);
    }
    let verdict = |ok: bool| if ok { "pass" } else { "fail" };
    let (off, on) = (&reports[2], &reports[3]);
    text.push_str(&format!(
        "verdict_alignment = {} (dispersion {:.6} with alignment, {:.6} without)\n",
        verdict(on.dispersion < off.dispersion),
        on.dispersion,
        off.dispersion
    ));
    text.push_str(&format!(
        "verdict_inversion = {} (edit magnitude {:.6} from inverted latents, {:.6} from random noise)\n",
        verdict(off.edit_magnitude < reports[1].edit_magnitude),
        off.edit_magnitude,
        reports[1].edit_magnitude
    ));
    let grid = tile_grid(&rows)?;
    create_dir(&a.out)?;
    write_png(&grid, a.out.join("grid.png"))?;
    write_text(&a.out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut loaded = load_job(&a.job)?;
    if let Some(p) = &a.classifier {
        loaded.classifier = Some(StyleClassifier::read(p)?);
    }
    let prepared = prepare_views(&loaded.job)?;
    let edited = (0..prepared.views.len())
        .map(|i| Tensor::read_gten(a.edited.join(format!("edited_{i:02}.gten"))))
        .collect::<Result<Vec<_>>>()?;
    let report = score(&prepared, &edited, &loaded)?;
    let text = report.to_text();
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::invalid("x")), 2);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
        assert_eq!(exit_code(&Error::UnknownCondition(9)), 2);
    }

    #[test]
    fn parses_commands() {
        let c = Cli::try_parse_from(["gsedit", "gen-data", "--out", "d"]).unwrap();
        match c.command {
            Command::GenData(a) => {
                assert_eq!(a.views, 24);
                assert_eq!(a.scenes, 12);
            }
            _ => panic!("wrong command"),
        }
        let c = Cli::try_parse_from(["gsedit", "--threads", "2", "edit", "--job", "j", "--out", "o"]).unwrap();
        assert_eq!(c.threads, Some(2));
        assert!(Cli::try_parse_from(["gsedit"]).is_err());
        assert!(Cli::try_parse_from(["gsedit", "render", "--scene", "s", "--out", "o"]).is_err());
    }
}
