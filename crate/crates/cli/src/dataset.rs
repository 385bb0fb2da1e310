//! On-disk datasets: a JSON manifest next to one PPM image and one PFM depth
//! map per sample.

use std::fs;
use std::path::{Path, PathBuf};

use depth_dissect_core::scene::{generate_sample, Sample, SceneConfig};
use depth_dissect_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::formats::{read_pfm, read_ppm, write_pfm, write_ppm};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub image: String,
    pub depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub h: usize,
    pub w: usize,
    pub split: String,
    /// Paths are relative to the manifest's directory.
    pub samples: Vec<SampleFiles>,
}

impl DatasetManifest {
    fn check(&self, path: &Path) -> Result<()> {
        if self.n == 0 || self.n != self.samples.len() {
            return Err(Error::format(
                path,
                format!(
                    "manifest declares n = {} but lists {} samples",
                    self.n,
                    self.samples.len()
                ),
            ));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::format(
                path,
                format!("bad depth range [{}, {}]", self.d_min, self.d_max),
            ));
        }
        Ok(())
    }
}

/// Render `n` scenes (sample `i` from seed `seed ^ i`) into `out_dir`.
pub fn generate_dataset(
    seed: u64,
    n: usize,
    config: &SceneConfig,
    split: &str,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Invalid("dataset needs at least one sample".into()));
    }
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let sample = generate_sample(seed ^ i as u64, config)?;
        let files = SampleFiles {
            image: format!("{split}_{i:05}.ppm"),
            depth: format!("{split}_{i:05}.pfm"),
        };
        write_ppm(&out_dir.join(&files.image), &sample.image)?;
        write_pfm(&out_dir.join(&files.depth), &sample.depth)?;
        samples.push(files);
    }
    let manifest = DatasetManifest {
        n,
        d_min: config.d_min,
        d_max: config.d_max,
        h: config.height,
        w: config.width,
        split: split.to_string(),
        samples,
    };
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Accepts either the manifest file or the directory holding it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

/// Sequential reader over a manifest's samples.
pub struct DatasetReader {
    root: PathBuf,
    manifest: DatasetManifest,
    next: usize,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let path = manifest_path(path);
        let manifest: DatasetManifest = read_json(&path)?;
        manifest.check(&path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetReader {
            root,
            manifest,
            next: 0,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, files: &SampleFiles) -> Result<Sample> {
        let image_path = self.root.join(&files.image);
        let depth_path = self.root.join(&files.depth);
        let image = read_ppm(&image_path)?;
        let depth = read_pfm(&depth_path)?;
        let (m, s) = (&self.manifest, depth.shape());
        if (s.h, s.w) != (m.h, m.w) || (image.shape().h, image.shape().w) != (m.h, m.w) {
            return Err(Error::format(
                &depth_path,
                format!("sample is not {}×{} as the manifest declares", m.h, m.w),
            ));
        }
        // Holes in external data: anything non-finite or non-positive.
        let valid = depth.map(|d| if d.is_finite() && d > 0.0 { 1.0 } else { 0.0 });
        let depth = Tensor::from_vec(
            s,
            depth
                .data()
                .iter()
                .map(|&d| {
                    if d.is_finite() && d > 0.0 {
                        d
                    } else {
                        m.d_min as f32
                    }
                })
                .collect(),
        )?;
        Ok(Sample::new(image, depth, valid)?)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let files = self.manifest.samples.get(self.next)?.clone();
        self.next += 1;
        Some(self.load(&files))
    }
}

/// Load a whole dataset into memory.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let reader = DatasetReader::open(path)?;
    let manifest = reader.manifest().clone();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holes_become_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let config = SceneConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        generate_dataset(3, 1, &config, "test", dir.path()).unwrap();
        let pfm = dir.path().join("test_00000.pfm");
        let mut depth = read_pfm(&pfm).unwrap();
        depth.data_mut()[0] = f32::NAN;
        depth.data_mut()[1] = 0.0;
        write_pfm(&pfm, &depth).unwrap();
        let (_, samples) = load_dataset(dir.path()).unwrap();
        let valid = samples[0].valid.data();
        assert_eq!(&valid[..3], &[0.0, 0.0, 1.0]);
        assert!(samples[0].depth.data().iter().all(|d| d.is_finite()));
    }

    #[test]
    fn count_mismatch_names_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let config = SceneConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        let mut m = generate_dataset(0, 2, &config, "train", dir.path()).unwrap();
        m.n = 3;
        write_json(&dir.path().join(MANIFEST), &m).unwrap();
        let err = DatasetReader::open(dir.path()).err().unwrap().to_string();
        assert!(err.contains(MANIFEST), "{err}");
    }
}
