//! On-disk synthetic datasets: a JSON manifest plus PPM images and PBM masks per split directory.

use std::fs;
use std::path::Path;

use caw_core::grid::BitGrid;
use caw_core::pnm::{decode_pbm, decode_ppm, encode_pbm, encode_ppm};
use caw_core::synth::{generate, split, RgbImage, SynthSample, SynthSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn dir(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: SplitName,
    /// Relative to the dataset directory.
    pub image: String,
    pub concepts: Vec<bool>,
    pub disease: usize,
    /// One relative PBM path per concept, `null` where the concept is absent.
    pub masks: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub fractions: [f64; 3],
    pub samples: Vec<ManifestEntry>,
}

/// A dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    /// Generates `n` samples and assigns splits.
    pub fn synthesize(spec: &SynthSpec, n: usize, fractions: [f64; 3]) -> Result<Self, CliError> {
        let samples = generate(spec, n)?;
        let parts = split(n, fractions, spec.seed)?;
        let mut split_of = vec![SplitName::Train; n];
        for (name, idx) in [
            (SplitName::Train, &parts.train),
            (SplitName::Val, &parts.val),
            (SplitName::Test, &parts.test),
        ] {
            for &i in idx {
                split_of[i] = name;
            }
        }
        let entries = samples
            .iter()
            .enumerate()
            .map(|(id, s)| {
                let dir = split_of[id].dir();
                ManifestEntry {
                    id,
                    split: split_of[id],
                    image: format!("{dir}/{id:06}.ppm"),
                    concepts: s.concepts.clone(),
                    disease: s.disease,
                    masks: s
                        .concepts
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| p.then(|| format!("{dir}/{id:06}_c{k}.pbm")))
                        .collect(),
                }
            })
            .collect();
        Ok(Self {
            manifest: Manifest {
                format_version: DATASET_FORMAT,
                spec: spec.clone(),
                fractions,
                samples: entries,
            },
            samples,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        for s in [SplitName::Train, SplitName::Val, SplitName::Test] {
            let d = dir.join(s.dir());
            fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        }
        for (entry, sample) in self.manifest.samples.iter().zip(&self.samples) {
            write_file(&dir.join(&entry.image), &encode_ppm(&sample.image))?;
            for (k, path) in entry.masks.iter().enumerate() {
                if let Some(p) = path {
                    write_file(&dir.join(p), encode_pbm(&sample.true_masks[k]).as_bytes())?;
                }
            }
        }
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_file(&dir.join(MANIFEST), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(CliError::Data(format!(
                "no dataset at {} (missing {MANIFEST})",
                dir.display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if manifest.format_version != DATASET_FORMAT {
            return Err(CliError::Data(format!(
                "dataset format {} is not supported (expected {DATASET_FORMAT})",
                manifest.format_version
            )));
        }
        let size = manifest.spec.image_size;
        let k = manifest.spec.num_concepts;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            if entry.concepts.len() != k || entry.masks.len() != k {
                return Err(CliError::Data(format!(
                    "sample {} lists the wrong number of concepts",
                    entry.id
                )));
            }
            let image = read_image(&dir.join(&entry.image))?;
            if image.width != size || image.height != size {
                return Err(CliError::Data(format!(
                    "{} is not {size}×{size}",
                    entry.image
                )));
            }
            let true_masks = entry
                .masks
                .iter()
                .map(|m| match m {
                    Some(p) => read_mask(&dir.join(p)),
                    None => Ok(BitGrid::empty(size, size)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            samples.push(SynthSample {
                image,
                concepts: entry.concepts.clone(),
                disease: entry.disease,
                true_masks,
            });
        }
        Ok(Self { manifest, samples })
    }

    pub fn indices(&self, which: SplitName) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_concepts(&self) -> usize {
        self.manifest.spec.num_concepts
    }
}

/// Hex SHA-256 of a dataset directory's manifest file.
pub fn manifest_hash(dir: &Path) -> Result<String, CliError> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn read_image(path: &Path) -> Result<RgbImage, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_mask(path: &Path) -> Result<BitGrid, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    decode_pbm(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
