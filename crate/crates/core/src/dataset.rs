//! On-disk image format.
//!
//! Each image is a flat little-endian `f32` file (`<stem>.f32`, row-major)
//! with a JSON sidecar (`<stem>.json`) holding `n`, `role`, `seed`,
//! `dose_factor` and `transform`. A dataset directory additionally holds
//! `manifest.json`, which lists every sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::phantoms::{PairedSample, SampleMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub n: usize,
    pub role: String,
    pub seed: u64,
    /// `None` when the dose is unknown or infinite.
    pub dose_factor: Option<f64>,
    pub transform: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub sidecars: Vec<String>,
}

pub fn encode_f32(img: &ImageTensor) -> Vec<u8> {
    img.data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32(n: usize, bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() != n * n * 4 {
        return Err(Error::Format(format!(
            "expected {} bytes for a {n}x{n} image, found {}",
            n * n * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ImageTensor::new(n, data)
}

fn sidecar_path(image_path: &Path) -> PathBuf {
    image_path.with_extension("json")
}

/// Writes `<stem>.f32` and `<stem>.json` and returns the image path.
pub fn write_image(dir: &Path, stem: &str, img: &ImageTensor, sidecar: &Sidecar) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{stem}.f32"));
    fs::write(&path, encode_f32(img))?;
    fs::write(sidecar_path(&path), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(path)
}

/// Reads an image given either its `.f32` payload or its `.json` sidecar.
pub fn read_image(path: &Path) -> Result<(ImageTensor, Sidecar)> {
    let payload = path.with_extension("f32");
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(&payload))?)?;
    let img = decode_f32(sidecar.n, &fs::read(&payload)?)?;
    Ok((img, sidecar))
}

fn finite_dose(d: f64) -> Option<f64> {
    d.is_finite().then_some(d)
}

/// Writes every pair as `pair_XXXXX_{clean,noisy}` plus `manifest.json`.
pub fn write_pairs(dir: &Path, pairs: &[PairedSample]) -> Result<DatasetManifest> {
    let mut sidecars = Vec::with_capacity(2 * pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        for (role, img) in [("clean", &p.clean), ("noisy", &p.noisy)] {
            let stem = format!("pair_{k:05}_{role}");
            let sc = Sidecar {
                n: img.n(),
                role: role.to_string(),
                seed: p.meta.seed,
                dose_factor: finite_dose(p.meta.dose_factor),
                transform: p.meta.transform,
            };
            write_image(dir, &stem, img, &sc)?;
            sidecars.push(format!("{stem}.json"));
        }
    }
    let manifest = DatasetManifest {
        count: pairs.len(),
        sidecars,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads the pairs listed in `dir/manifest.json`, in manifest order.
pub fn load_pairs(dir: &Path) -> Result<Vec<PairedSample>> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for name in &manifest.sidecars {
        let (img, sc) = read_image(&dir.join(name))?;
        match sc.role.as_str() {
            "clean" => clean.push((img, sc)),
            "noisy" => noisy.push((img, sc)),
            other => return Err(Error::Format(format!("{name}: unknown role `{other}`"))),
        }
    }
    if clean.len() != manifest.count || noisy.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest lists {} pairs but holds {} clean and {} noisy images",
            manifest.count,
            clean.len(),
            noisy.len()
        )));
    }
    clean
        .into_iter()
        .zip(noisy)
        .map(|((c, sc), (y, _))| {
            PairedSample::new(
                c,
                y,
                SampleMeta {
                    seed: sc.seed,
                    dose_factor: sc.dose_factor.unwrap_or(f64::INFINITY),
                    transform: sc.transform,
                },
            )
        })
        .collect()
}
