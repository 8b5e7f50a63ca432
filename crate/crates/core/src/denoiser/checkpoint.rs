//! Checkpoint directory layout:
//!
//! ```text
//! manifest.toml       format tag, architecture, tensors in layer order
//! tensors/NNNN.gten   one GTEN file per parameter
//! loss.csv            training loss per step, when a report is given
//! ```

use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::{ToyConfig, ToyDenoiser, TrainReport};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "gsedit-toy-denoiser-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ToyConfig,
    validation_mse: Option<f64>,
    baseline_mse: Option<f64>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Write the model (and optionally its training curve) under `dir`; returns
/// the paths written, relative to `dir`.
pub fn save_checkpoint(
    model: &ToyDenoiser,
    report: Option<&TrainReport>,
    dir: impl AsRef<Path>,
) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let tdir = dir.join("tensors");
    std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut entries = Vec::new();
    let mut written = Vec::new();
    for (i, (name, var)) in model.parameters().iter().enumerate() {
        let file = format!("tensors/{i:04}.gten");
        let data = var.flatten_all()?.to_vec1::<f32>()?;
        Tensor::new(var.dims().to_vec(), data)?.write_gten(dir.join(&file))?;
        entries.push(Entry {
            name: name.clone(),
            shape: var.dims().to_vec(),
            file: file.clone(),
        });
        written.push(file);
    }
    if let Some(r) = report {
        let mut csv = String::from("step,loss\n");
        for (i, l) in r.loss_history.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        let p = dir.join("loss.csv");
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        written.push("loss.csv".into());
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config().clone(),
        validation_mse: report.map(|r| r.validation_mse),
        baseline_mse: report.map(|r| r.baseline_mse),
        tensors: entries,
    };
    let p = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    written.push("manifest.toml".into());
    Ok(written)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ToyDenoiser> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format("checkpoint manifest", &mpath, e))?;
    if manifest.format != FORMAT {
        return Err(Error::format(
            "checkpoint manifest",
            &mpath,
            format!("unknown format {}", manifest.format),
        ));
    }
    let model = ToyDenoiser::new(manifest.config)?;
    if manifest.tensors.len() != model.parameters().len() {
        return Err(Error::format(
            "checkpoint manifest",
            &mpath,
            format!(
                "{} tensors listed, model has {}",
                manifest.tensors.len(),
                model.parameters().len()
            ),
        ));
    }
    for (entry, (name, var)) in manifest.tensors.iter().zip(model.parameters()) {
        if &entry.name != name || entry.shape != var.dims() {
            return Err(Error::format(
                "checkpoint manifest",
                &mpath,
                format!(
                    "entry {} {:?} does not match layer {name} {:?}",
                    entry.name,
                    entry.shape,
                    var.dims()
                ),
            ));
        }
        let t = Tensor::read_gten(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                "GTEN",
                dir.join(&entry.file),
                "shape differs from manifest",
            ));
        }
        var.set(&candle_core::Tensor::from_vec(
            t.into_data(),
            entry.shape.as_slice(),
            &Device::Cpu,
        )?)?;
    }
    Ok(model)
}
