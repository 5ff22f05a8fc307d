//! In-memory samples and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.json`, one raw little-endian `f32`
//! image per sample (row-major `H×W`) and, for labeled samples, a CSV table
//! with `S` rows of `W` surface positions. Every file is listed with its
//! SHA-256 digest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topo::SurfaceCurveSet;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "layerseg-dataset";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Source volume; samples of one group share geometry.
    pub group: usize,
    /// Row-major `H×W` intensities.
    pub image: Vec<f32>,
    pub surfaces: Option<SurfaceCurveSet<f32>>,
}

impl Sample {
    pub fn is_labeled(&self) -> bool {
        self.surfaces.is_some()
    }

    /// Mirror image and surfaces left to right.
    pub fn flipped(&self, width: usize) -> Self {
        let image = self
            .image
            .chunks(width)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        Self {
            id: self.id.clone(),
            group: self.group,
            image,
            surfaces: self.surfaces.as_ref().map(|s| s.flipped()),
        }
    }

    /// Flips with probability `p`.
    pub fn augmented<R: Rng>(&self, width: usize, p: f64, rng: &mut R) -> Self {
        if rng.gen::<f64>() < p {
            self.flipped(width)
        } else {
            self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub surfaces: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labeled(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.is_labeled())
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled().count()
    }

    pub fn num_groups(&self) -> usize {
        let mut groups: Vec<usize> = self.samples.iter().map(|s| s.group).collect();
        groups.sort_unstable();
        groups.dedup();
        groups.len()
    }

    /// Checks every sample against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let (h, w, s) = (self.height, self.width, self.surfaces);
        for sample in &self.samples {
            if sample.image.len() != h * w {
                return Err(Error::Shape(format!(
                    "sample {}: image has {} values, expected {h}×{w}",
                    sample.id,
                    sample.image.len()
                )));
            }
            if let Some(y) = &sample.surfaces {
                if y.surfaces() != s || y.cols() != w {
                    return Err(Error::Shape(format!(
                        "sample {}: surfaces are {}×{}, expected {s}×{w}",
                        sample.id,
                        y.surfaces(),
                        y.cols()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stacks images into `[N, 1, H, W]`.
    pub fn images_tensor<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) -> Tensor {
        let mut data = Vec::new();
        let mut n = 0;
        for s in samples {
            data.extend_from_slice(&s.image);
            n += 1;
        }
        Tensor::new([n, 1, self.height, self.width], data).expect("image batch shape")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    surfaces: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    group: usize,
    labeled: bool,
    image: String,
    image_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    surfaces: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    surfaces_sha256: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn image_bytes(image: &[f32]) -> Vec<u8> {
    image.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn surfaces_csv(y: &SurfaceCurveSet<f32>) -> String {
    let mut out = String::new();
    for s in 0..y.surfaces() {
        let row: Vec<String> = y.surface(s).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn parse_surfaces_csv(
    text: &str,
    surfaces: usize,
    width: usize,
    file: &Path,
) -> Result<SurfaceCurveSet<f32>> {
    let mut data = Vec::with_capacity(surfaces * width);
    let mut rows = 0;
    for (line_no, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let before = data.len();
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::Dataset(format!(
                    "{}:{}: `{field}` is not a number",
                    file.display(),
                    line_no + 1
                ))
            })?;
            data.push(v);
        }
        if data.len() - before != width {
            return Err(Error::Shape(format!(
                "{}:{}: {} columns, expected {width}",
                file.display(),
                line_no + 1,
                data.len() - before
            )));
        }
        rows += 1;
    }
    if rows != surfaces {
        return Err(Error::Shape(format!(
            "{}: {rows} surface rows, expected {surfaces}",
            file.display()
        )));
    }
    SurfaceCurveSet::new(surfaces, width, data)
}

fn safe_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `dataset` into `dir`, creating it if needed.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (k, sample) in dataset.samples.iter().enumerate() {
        let stem = format!("{k:05}_{}", safe_file_stem(&sample.id));
        let image_name = format!("{stem}.f32");
        let bytes = image_bytes(&sample.image);
        fs::write(dir.join(&image_name), &bytes)?;
        let (surfaces, surfaces_sha256) = match &sample.surfaces {
            Some(y) => {
                let name = format!("{stem}.surfaces.csv");
                let text = surfaces_csv(y);
                fs::write(dir.join(&name), &text)?;
                (Some(name), Some(sha256_hex(text.as_bytes())))
            }
            None => (None, None),
        };
        entries.push(ManifestEntry {
            id: sample.id.clone(),
            group: sample.group,
            labeled: sample.surfaces.is_some(),
            image: image_name,
            image_sha256: sha256_hex(&bytes),
            surfaces,
            surfaces_sha256,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        height: dataset.height,
        width: dataset.width,
        surfaces: dataset.surfaces,
        samples: entries,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn read_file(dir: &Path, name: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(name);
    let bytes = fs::read(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    Ok((path, bytes))
}

fn verify(path: &Path, bytes: &[u8], expected_sha: &str) -> Result<()> {
    let actual = sha256_hex(bytes);
    if actual != expected_sha {
        return Err(Error::Dataset(format!(
            "checksum mismatch for {}: manifest {expected_sha}, file {actual}",
            path.display()
        )));
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], verifying shapes and checksums.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Dataset(format!(
            "missing or unreadable manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        Error::Dataset(format!("invalid manifest {}: {e}", manifest_path.display()))
    })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let (h, w, s) = (manifest.height, manifest.width, manifest.surfaces);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        let (path, bytes) = read_file(dir, &entry.image)?;
        if bytes.len() != h * w * 4 {
            return Err(Error::Shape(format!(
                "{}: {} bytes, expected {h}×{w} f32 values ({} bytes)",
                path.display(),
                bytes.len(),
                h * w * 4
            )));
        }
        verify(&path, &bytes, &entry.image_sha256)?;
        let image = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let surfaces = match (entry.labeled, &entry.surfaces, &entry.surfaces_sha256) {
            (true, Some(name), Some(sha)) => {
                let (path, bytes) = read_file(dir, name)?;
                verify(&path, &bytes, sha)?;
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Dataset(format!("{} is not UTF-8", path.display())))?;
                Some(parse_surfaces_csv(&text, s, w, &path)?)
            }
            (false, None, None) => None,
            _ => {
                return Err(Error::Dataset(format!(
                    "sample {}: labeled flag disagrees with surfaces entry",
                    entry.id
                )))
            }
        };
        samples.push(Sample {
            id: entry.id,
            group: entry.group,
            image,
            surfaces,
        });
    }
    Ok(Dataset {
        height: h,
        width: w,
        surfaces: s,
        samples,
    })
}
