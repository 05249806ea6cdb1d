//! Case manifests: `id,age,resection,survival_days,flair,t1,t1ce,t2,mask`.
//!
//! Relative volume paths resolve against the manifest's directory.
//! `survival_days` and `mask` may be left empty.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_volume, save_volume, CaseRecord, Resection, MODALITIES};
use crate::error::{Error, Result};
use crate::survival::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub age: f64,
    pub resection: String,
    pub survival_days: Option<f64>,
    pub flair: PathBuf,
    pub t1: PathBuf,
    pub t1ce: PathBuf,
    pub t2: PathBuf,
    pub mask: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn modality_paths(&self) -> [&Path; 4] {
        [&self.flair, &self.t1, &self.t1ce, &self.t2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_entries(&self, entries: Vec<ManifestEntry>) -> Manifest {
        Manifest {
            base_dir: self.base_dir.clone(),
            entries,
        }
    }

    pub fn load_case(&self, entry: &ManifestEntry) -> Result<CaseRecord> {
        let load = |p: &Path| load_volume(self.resolve(p));
        let [f, t1, t1ce, t2] = entry.modality_paths();
        let volumes = [load(f)?, load(t1)?, load(t1ce)?, load(t2)?];
        let tumor_mask = match &entry.mask {
            Some(p) => {
                let m = load(p)?;
                Some(Mask::new(
                    m.shape().to_vec(),
                    m.data().iter().map(|&v| v > 0.5).collect(),
                )?)
            }
            None => None,
        };
        let case = CaseRecord {
            id: entry.id.clone(),
            volumes,
            age_years: entry.age,
            survival_days: entry.survival_days,
            resection: Resection::parse(&entry.resection)?,
            tumor_mask,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn load_all(&self) -> Result<Vec<CaseRecord>> {
        self.entries.iter().map(|e| self.load_case(e)).collect()
    }
}

/// Reads a manifest and checks that ids are unique and every file exists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let expected = [
        "id",
        "age",
        "resection",
        "survival_days",
        "flair",
        "t1",
        "t1ce",
        "t2",
        "mask",
    ];
    if header != expected {
        return Err(Error::format(
            path,
            format!("manifest header {header:?} must be {}", expected.join(",")),
        ));
    }
    let entries = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
    let manifest = Manifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
    };
    let mut seen = HashSet::new();
    let mut missing = Vec::new();
    for e in &manifest.entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Data(format!(
                "duplicate case id {:?} in {}",
                e.id,
                path.display()
            )));
        }
        Resection::parse(&e.resection)?;
        let files = e
            .modality_paths()
            .into_iter()
            .zip(MODALITIES)
            .chain(e.mask.as_deref().map(|m| (m, "mask")));
        for (p, name) in files {
            if !manifest.resolve(p).is_file() {
                missing.push(format!("{} {name}: {}", e.id, p.display()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "manifest references missing files: {}",
            missing.join("; ")
        )));
    }
    Ok(manifest)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    for e in entries {
        writer.serialize(e)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes each case as `{id}_{modality}.svol` (plus `{id}_mask.svol` when a
/// mask is present) under `dir` and returns manifest rows with paths
/// relative to `dir`.
pub fn save_cases(dir: impl AsRef<Path>, cases: &[CaseRecord]) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(cases.len());
    for case in cases {
        case.validate()?;
        let name = |m: &str| PathBuf::from(format!("{}_{m}.svol", case.id));
        for (volume, m) in case.volumes.iter().zip(MODALITIES) {
            save_volume(dir.join(name(m)), volume)?;
        }
        let mask = match &case.tumor_mask {
            Some(mask) => {
                save_volume(dir.join(name("mask")), &mask.to_tensor())?;
                Some(name("mask"))
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: case.id.clone(),
            age: case.age_years,
            resection: case.resection.as_str().into(),
            survival_days: case.survival_days,
            flair: name("flair"),
            t1: name("t1"),
            t1ce: name("t1ce"),
            t2: name("t2"),
            mask,
        });
    }
    Ok(entries)
}
