//! Turns a [`DataSource`] into cached fused features per client plus test items.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{DataSource, FederationConfig};
use crate::error::{Error, Result};
use crate::eval::{synth_dataset, LabeledSample, SynthData, TestItem};
use crate::extract::{fuse_pyramid, read_manifest, write_manifest, FeatureExtractor, ManifestEntry, SampleInput};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::Tensor;

/// Fused feature maps, computed once with the frozen extractor.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub clients: Vec<Vec<Tensor<f32>>>,
    pub test: Vec<TestItem>,
}

impl Dataset {
    /// `(H, W, Cin)` of the fused maps.
    pub fn fused_dims(&self) -> Result<(usize, usize, usize)> {
        let first = self
            .clients
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::contract("dataset has no training samples"))?;
        first.hwc()
    }
}

fn fuse(ex: &FeatureExtractor, input: &SampleInput) -> Result<Tensor<f32>> {
    fuse_pyramid(&ex.extract(input)?)
}

fn test_item(ex: &FeatureExtractor, s: &LabeledSample) -> Result<TestItem> {
    let (h, w, _) = s.image.hwc()?;
    Ok(TestItem {
        fused: fuse(ex, &SampleInput::Image(s.image.clone()))?,
        label: s.label,
        image_dims: (h, w),
        mask: s.mask.clone(),
    })
}

fn from_synth(ex: &FeatureExtractor, data: &SynthData) -> Result<Dataset> {
    let clients = data
        .clients
        .iter()
        .map(|c| c.par_iter().map(|s| fuse(ex, &SampleInput::Image(s.image.clone()))).collect())
        .collect::<Result<_>>()?;
    let test = data.test.par_iter().map(|s| test_item(ex, s)).collect::<Result<_>>()?;
    Ok(Dataset { clients, test })
}

pub fn client_dir(root: &Path, n: usize) -> PathBuf {
    root.join(format!("client_{n}"))
}

/// Input for one manifest row: a pyramid file for the file extractor, the
/// image otherwise.
fn entry_input(ex: &FeatureExtractor, root: &Path, e: &ManifestEntry) -> SampleInput {
    match ex {
        FeatureExtractor::File { .. } => SampleInput::Path(PathBuf::from(format!("{}.fdm", e.sample_id))),
        FeatureExtractor::Synthetic(_) => SampleInput::Path(root.join(&e.path)),
    }
}

fn load_entries(ex: &FeatureExtractor, root: &Path, entries: &[ManifestEntry]) -> Result<Vec<Tensor<f32>>> {
    entries.par_iter().map(|e| fuse(ex, &entry_input(ex, root, e))).collect()
}

fn from_dir(ex: &FeatureExtractor, root: &Path, clients: usize) -> Result<Dataset> {
    let mut out = Vec::with_capacity(clients);
    for n in 0..clients {
        let entries = read_manifest(&client_dir(root, n).join("manifest.json"))?;
        if let Some(bad) = entries.iter().find(|e| e.label != 0) {
            return Err(Error::Format(format!(
                "training sample `{}` of client {n} is labelled anomalous",
                bad.sample_id
            )));
        }
        out.push(load_entries(ex, root, &entries)?);
    }
    let entries = read_manifest(&root.join("test").join("manifest.json"))?;
    let fused = load_entries(ex, root, &entries)?;
    let mut test = Vec::with_capacity(entries.len());
    for (e, fused) in entries.iter().zip(fused) {
        let mask = e.mask_path.as_ref().map(|p| read_tensor(&root.join(p))).transpose()?;
        let image = root.join(&e.path);
        let image_dims = if image.exists() {
            let (h, w, _) = read_tensor(&image)?.hwc()?;
            (h, w)
        } else if let Some(m) = &mask {
            m.rows_cols()?
        } else {
            let (h, w, _) = fused.hwc()?;
            (h, w)
        };
        test.push(TestItem {
            fused,
            label: e.label,
            image_dims,
            mask,
        });
    }
    Ok(Dataset { clients: out, test })
}

/// Builds the dataset described by `cfg` and runs the frozen extractor on
/// every sample.
pub fn load_dataset(cfg: &FederationConfig) -> Result<Dataset> {
    let ex = FeatureExtractor::from_spec(&cfg.extractor)?;
    let ds = match &cfg.data {
        DataSource::Synthetic(spec) => from_synth(&ex, &synth_dataset(spec)?)?,
        DataSource::Dir(root) => from_dir(&ex, root, cfg.clients)?,
    };
    if ds.clients.len() != cfg.clients {
        return Err(Error::contract("dataset client count differs from the config"));
    }
    if let Some(n) = ds.clients.iter().position(|c| c.is_empty()) {
        return Err(Error::contract(format!("client {n} has no training samples")));
    }
    Ok(ds)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_samples(root: &Path, manifest: &Path, samples: &[LabeledSample], ex: Option<&FeatureExtractor>) -> Result<()> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let path = PathBuf::from("images").join(format!("{}.fdm", s.id));
        write_tensor(&root.join(&path), &s.image)?;
        let mask_path = match &s.mask {
            Some(m) => {
                let p = PathBuf::from("masks").join(format!("{}.fdm", s.id));
                write_tensor(&root.join(&p), m)?;
                Some(p)
            }
            None => None,
        };
        if let Some(ex) = ex {
            ex.extract(&SampleInput::Image(s.image.clone()))?
                .write(&root.join("features").join(format!("{}.fdm", s.id)))?;
        }
        entries.push(ManifestEntry {
            sample_id: s.id.clone(),
            path,
            label: s.label,
            mask_path,
        });
    }
    write_manifest(manifest, &entries)
}

/// Writes images, masks, client and test manifests, and (for a synthetic
/// extractor) the feature pyramids under `root/features/`.
pub fn write_synth(root: &Path, data: &SynthData, ex: Option<&FeatureExtractor>) -> Result<()> {
    for sub in ["images", "masks", "features", "test"] {
        mkdir(&root.join(sub))?;
    }
    for (n, samples) in data.clients.iter().enumerate() {
        let dir = client_dir(root, n);
        mkdir(&dir)?;
        write_samples(root, &dir.join("manifest.json"), samples, ex)?;
    }
    write_samples(root, &root.join("test").join("manifest.json"), &data.test, ex)
}
