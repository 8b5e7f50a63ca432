//! Dataset directories and file manifests.
//!
//! ```text
//! dataset.toml              generation config and per-scene index
//! codec.toml                whitening statistics fitted on every image
//! classifier.toml           style classifier fitted on every image
//! scene_NNN/scene.json
//! scene_NNN/camera_VV.json
//! scene_NNN/image_VV.gten   exact H×W×3 (image_VV.png for viewing)
//! scene_NNN/depth_VV.gten   H×W camera z (depth_VV.png for viewing)
//! scene_NNN/alpha_VV.gten   H×W coverage
//! manifest.toml             sha256 of every file above
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codec::PatchCodec;
use super::dataset::{Dataset, DatasetConfig, GeometryFamily, StyleClass, ViewRecord};
use super::depth::{depth_condition, normalize_depth};
use super::evaluate::StyleClassifier;
use crate::denoiser::TrainingSample;
use crate::error::{Error, Result};
use crate::image::write_png;
use crate::scene::io::{read_camera, read_scene, write_camera, write_scene};
use crate::scene::Scene;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct SceneEntry {
    dir: String,
    style: StyleClass,
    family: GeometryFamily,
    views: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    config: DatasetConfig,
    scenes: Vec<SceneEntry>,
}

/// A scene read back from a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredScene {
    pub style: StyleClass,
    pub scene: Scene,
    pub views: Vec<ViewRecord>,
}

impl StoredScene {
    pub fn label(&self) -> u32 {
        self.style.label()
    }
}

/// Depth as a viewable image: near is bright, background black.
pub fn depth_image(depth: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let n = normalize_depth(depth, alpha)?;
    let data = n.data().iter().map(|&d| 1.0 - d).collect();
    Tensor::new(n.shape().to_vec(), data)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write one view's image, depth and coverage as `<stem>_VV` files under
/// `dir`; returns the file names.
pub fn write_view_files(dir: &Path, index: usize, view: &ViewRecord) -> Result<Vec<String>> {
    let names = [
        format!("image_{index:02}.gten"),
        format!("image_{index:02}.png"),
        format!("depth_{index:02}.gten"),
        format!("depth_{index:02}.png"),
        format!("alpha_{index:02}.gten"),
    ];
    view.image.write_gten(dir.join(&names[0]))?;
    write_png(&view.image, dir.join(&names[1]))?;
    view.depth.write_gten(dir.join(&names[2]))?;
    write_png(&depth_image(&view.depth, &view.alpha)?, dir.join(&names[3]))?;
    view.alpha.write_gten(dir.join(&names[4]))?;
    Ok(names.into())
}

/// Write the dataset with its fitted codec and classifier. Returns every
/// written path relative to `dir`, in writing order.
pub fn write_dataset(
    ds: &Dataset,
    codec: &PatchCodec,
    classifier: &StyleClassifier,
    dir: impl AsRef<Path>,
) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for (i, rec) in ds.scenes.iter().enumerate() {
        let name = format!("scene_{i:03}");
        let sub = dir.join(&name);
        create_dir(&sub)?;
        write_scene(&rec.scene, sub.join("scene.json"))?;
        files.push(format!("{name}/scene.json"));
        for (v, view) in rec.views.iter().enumerate() {
            let cam = format!("camera_{v:02}.json");
            write_camera(&view.camera, sub.join(&cam))?;
            files.push(format!("{name}/{cam}"));
            files.extend(
                write_view_files(&sub, v, view)?
                    .into_iter()
                    .map(|f| format!("{name}/{f}")),
            );
        }
        entries.push(SceneEntry {
            dir: name,
            style: rec.style,
            family: rec.draft.family,
            views: rec.views.len(),
        });
    }
    let index = DatasetIndex {
        config: ds.config.clone(),
        scenes: entries,
    };
    write_text(
        &dir.join("dataset.toml"),
        &toml::to_string(&index).expect("index serializes"),
    )?;
    codec.write(dir.join("codec.toml"))?;
    classifier.write(dir.join("classifier.toml"))?;
    files.extend(["dataset.toml", "codec.toml", "classifier.toml"].map(String::from));
    Ok(files)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<StoredScene>> {
    let dir = dir.as_ref();
    let path = dir.join("dataset.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = toml::from_str(&text).map_err(|e| Error::format("dataset index", &path, e))?;
    index
        .scenes
        .iter()
        .map(|entry| {
            let sub = dir.join(&entry.dir);
            let scene = read_scene(sub.join("scene.json"))?;
            let views = (0..entry.views)
                .map(|v| {
                    let view = ViewRecord {
                        camera: read_camera(sub.join(format!("camera_{v:02}.json")))?,
                        image: Tensor::read_gten(sub.join(format!("image_{v:02}.gten")))?,
                        depth: Tensor::read_gten(sub.join(format!("depth_{v:02}.gten")))?,
                        alpha: Tensor::read_gten(sub.join(format!("alpha_{v:02}.gten")))?,
                    };
                    let (h, w) = (view.camera.height, view.camera.width);
                    view.image.ensure_shape(&[h, w, 3])?;
                    view.depth.ensure_shape(&[h, w])?;
                    view.alpha.ensure_shape(&[h, w])?;
                    Ok(view)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StoredScene {
                style: entry.style,
                scene,
                views,
            })
        })
        .collect()
}

/// One denoiser training sample per stored view.
pub fn training_samples(scenes: &[StoredScene], codec: &PatchCodec) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for s in scenes {
        for v in &s.views {
            let latent = codec.encode(&v.image, 0)?.data;
            let size = latent.shape()[1];
            out.push(TrainingSample {
                latent,
                label: s.label(),
                depth: depth_condition(&v.depth, &v.alpha, size)?,
            });
        }
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    files: Vec<ManifestEntry>,
}

/// Write `manifest.toml` listing each file (relative to `dir`) with its
/// size and digest. Returns the manifest's own digest.
pub fn write_manifest(dir: impl AsRef<Path>, files: &[String]) -> Result<String> {
    let dir = dir.as_ref();
    let files = files
        .iter()
        .map(|f| {
            let p: PathBuf = dir.join(f);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            Ok(ManifestEntry {
                path: f.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let text = toml::to_string(&Manifest { files }).expect("manifest serializes");
    write_text(&dir.join("manifest.toml"), &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::generate_synthetic_dataset;

    #[test]
    fn dataset_roundtrip_and_manifest() {
        let ds = generate_synthetic_dataset(&DatasetConfig {
            num_scenes: 2,
            views_per_scene: 2,
            image_size: 16,
            focal: 18.0,
            ..Default::default()
        })
        .unwrap();
        let imgs: Vec<Tensor> = ds
            .scenes
            .iter()
            .flat_map(|s| s.views.iter().map(|v| v.image.clone()))
            .collect();
        let codec = PatchCodec::fit(4, &imgs).unwrap();
        let clf = StyleClassifier::fit_dataset(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_dataset(&ds, &codec, &clf, dir.path()).unwrap();
        assert_eq!(files.len(), 2 * (1 + 2 * 6) + 3);
        let back = read_dataset(dir.path()).unwrap();
        for (a, b) in back.iter().zip(&ds.scenes) {
            assert_eq!(a.scene, b.scene);
            assert_eq!(a.views, b.views);
            assert_eq!(a.style, b.style);
        }
        let samples = training_samples(&back, &codec).unwrap();
        assert_eq!(samples.len(), 4);
        assert_eq!(samples[0].latent.shape(), &[48, 4, 4]);
        let h1 = write_manifest(dir.path(), &files).unwrap();
        let h2 = write_manifest(dir.path(), &files).unwrap();
        assert_eq!(h1, h2);
        let text = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
        assert!(files.iter().all(|f| text.contains(f.as_str())));
    }

    #[test]
    fn missing_dataset_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
    }
}
