//! NRRD case directories and their JSON manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vilu_core::data::{LabelMap, Sample, Split};

use crate::nrrd::{self, Encoding};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

/// One case. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image_path: String,
    pub label_path: String,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    let mut ids: Vec<&str> = entries.iter().map(|e| e.case_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::format(path, format!("duplicate case_id {:?}", w[0])));
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(entries).expect("manifest serialises");
    json.push(b'\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Accepts either a manifest file or a directory containing one.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST)
    } else {
        p.to_path_buf()
    }
}

fn base_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `{case_id}_image.nrrd` / `{case_id}_label.nrrd` pairs and the
/// manifest into `dir`. `image_tags` are written as NRRD key/values on
/// every image.
pub fn write_samples(dir: &Path, samples: &[Sample], encoding: Encoding, image_tags: &[(&str, &str)]) -> Result<Vec<ManifestEntry>> {
    create_dir(dir)?;
    let entries: Vec<ManifestEntry> = samples
        .par_iter()
        .map(|s| {
            let image_path = format!("{}_image.nrrd", s.case_id);
            let label_path = format!("{}_label.nrrd", s.case_id);
            nrrd::write_volume(&dir.join(&image_path), &s.image, encoding, image_tags)?;
            nrrd::write_labels(&dir.join(&label_path), &s.label, encoding)?;
            Ok(ManifestEntry {
                case_id: s.case_id.clone(),
                image_path,
                label_path,
                split: s.split,
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&dir.join(MANIFEST), &entries)?;
    Ok(entries)
}

/// Marks the label map with the smallest class count covering its values
/// (at least 2, at least `min_classes`).
pub fn with_class_count(mut l: LabelMap, min_classes: usize) -> LabelMap {
    let top = l.data.iter().copied().max().unwrap_or(0) as usize + 1;
    l.num_classes = top.max(min_classes).max(2);
    l
}

/// Reads every case of a manifest, in manifest order.
///
/// With `num_classes` set, label values must lie below it; otherwise the
/// count is inferred per case.
pub fn load_samples(manifest: &Path, num_classes: Option<usize>) -> Result<Vec<Sample>> {
    let entries = read_manifest(manifest)?;
    let dir = base_dir(manifest);
    entries
        .par_iter()
        .map(|e| {
            let image = nrrd::read_volume(&dir.join(&e.image_path))?;
            let label_file = dir.join(&e.label_path);
            let label = match num_classes {
                Some(k) => nrrd::read_labels(&label_file, k)?,
                None => with_class_count(nrrd::read_labels(&label_file, 256)?, 2),
            };
            Sample::new(image, label, e.case_id.clone(), e.split).map_err(|err| Error::format(&label_file, err.to_string()))
        })
        .collect()
}

pub fn by_split(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        match s.split {
            Split::Train => train.push(s),
            Split::Val => val.push(s),
            Split::Test => test.push(s),
        }
    }
    (train, val, test)
}
