//! On-disk scene corpora: `scenes/{id}/pan.psr`, `scenes/{id}/ms.psr` and
//! a `manifest.csv` with columns `id,seed,split`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{read_psr, write_psr};
use crate::raster::Sample;
use crate::resample::{wald_degrade, MtfGains};
use crate::synth::{generate_scene, SceneSpec};

pub const MANIFEST: &str = "manifest.csv";
pub const REFERENCE: &str = "ref.psr";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?} in manifest"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

/// Scene ids are derived from seeds, so a scene's files do not depend on
/// which other scenes are in the corpus.
pub fn scene_id(seed: u64) -> String {
    format!("s{seed:06}")
}

/// Entries for `train` scenes with seeds `first..first+train` followed by
/// `test` scenes with the next seeds.
pub fn plan(first: u64, train: usize, test: usize) -> Vec<ManifestEntry> {
    (0..(train + test) as u64)
        .map(|k| ManifestEntry {
            id: scene_id(first + k),
            seed: first + k,
            split: if (k as usize) < train { Split::Train } else { Split::Test },
        })
        .collect()
}

/// Generates and writes every planned scene plus the manifest.
pub fn write_corpus(root: &Path, base: &SceneSpec, entries: &[ManifestEntry]) -> Result<()> {
    for e in entries {
        let scene = generate_scene(&SceneSpec { seed: e.seed, ..base.clone() })?;
        let dir = scene_dir(root, &e.id);
        std::fs::create_dir_all(&dir)?;
        write_psr(&dir.join("pan.psr"), &scene.pan)?;
        write_psr(&dir.join("ms.psr"), &scene.ms)?;
    }
    write_manifest(root, entries)
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let mut w = csv::Writer::from_path(root.join(MANIFEST)).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["id", "seed", "split"]).map_err(|e| Error::Format(e.to_string()))?;
    for e in entries {
        w.write_record([e.id.as_str(), &e.seed.to_string(), e.split.as_str()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(id)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::Format(format!("manifest row has {} fields", rec.len())));
        }
        let seed = rec[1].parse().map_err(|_| Error::Format(format!("bad seed {:?}", &rec[1])))?;
        out.push(ManifestEntry { id: rec[0].to_string(), seed, split: Split::parse(&rec[2])? });
    }
    Ok(out)
}

/// A scene as stored on disk. Scenes of a degraded corpus carry their
/// reference in `ref.psr`.
pub fn read_scene(root: &Path, id: &str, ratio: usize) -> Result<Sample> {
    let dir = scene_dir(root, id);
    let reference = dir.join(REFERENCE);
    let reference = if reference.exists() { Some(read_psr(&reference)?) } else { None };
    Sample::new(read_psr(&dir.join("pan.psr"))?, read_psr(&dir.join("ms.psr"))?, reference, ratio)
}

/// Reduced-resolution version of a scene: read as is from a degraded
/// corpus, degraded on the fly otherwise.
pub fn read_reduced(root: &Path, id: &str, ratio: usize, gains: &MtfGains) -> Result<Sample> {
    let s = read_scene(root, id, ratio)?;
    match s.reference {
        Some(_) => Ok(s),
        None => wald_degrade(&s, gains),
    }
}

/// Writes the reduced-resolution version of every scene of `src` to `dst`.
pub fn write_degraded(src: &Path, dst: &Path, ratio: usize, gains: &MtfGains) -> Result<()> {
    let entries = read_manifest(src)?;
    for e in &entries {
        let s = read_scene(src, &e.id, ratio)?;
        if s.reference.is_some() {
            return Err(Error::invalid(format!("{} is already degraded", src.display())));
        }
        let reduced = wald_degrade(&s, gains)?;
        let dir = scene_dir(dst, &e.id);
        std::fs::create_dir_all(&dir)?;
        write_psr(&dir.join("pan.psr"), &reduced.pan)?;
        write_psr(&dir.join("ms.psr"), &reduced.ms)?;
        if let Some(r) = &reduced.reference {
            write_psr(&dir.join(REFERENCE), r)?;
        }
    }
    write_manifest(dst, &entries)
}

/// Reduced-resolution samples with references, named by scene id.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<(String, Sample)>,
    pub test: Vec<(String, Sample)>,
}

impl Corpus {
    pub fn train_samples(&self) -> Vec<Sample> {
        self.train.iter().map(|(_, s)| s.clone()).collect()
    }

    pub fn test_samples(&self) -> Vec<Sample> {
        self.test.iter().map(|(_, s)| s.clone()).collect()
    }

    pub fn test_names(&self) -> Vec<String> {
        self.test.iter().map(|(n, _)| n.clone()).collect()
    }
}

/// Loads every scene of a corpus and applies the reduced-resolution
/// degradation.
pub fn load_reduced(root: &Path, ratio: usize, gains: &MtfGains) -> Result<Corpus> {
    let mut corpus = Corpus { train: Vec::new(), test: Vec::new() };
    for e in read_manifest(root)? {
        let sample = read_reduced(root, &e.id, ratio, gains)?;
        match e.split {
            Split::Train => corpus.train.push((e.id, sample)),
            Split::Test => corpus.test.push((e.id, sample)),
        }
    }
    Ok(corpus)
}

/// Same as writing and reloading a corpus, without touching the disk.
pub fn generate_reduced(base: &SceneSpec, entries: &[ManifestEntry], gains: &MtfGains) -> Result<Corpus> {
    let mut corpus = Corpus { train: Vec::new(), test: Vec::new() };
    for e in entries {
        let full = generate_scene(&SceneSpec { seed: e.seed, ..base.clone() })?;
        // stored rasters are single precision
        let full = Sample::new(
            full.pan.map(|v| v as f32 as f64),
            full.ms.map(|v| v as f32 as f64),
            None,
            full.ratio,
        )?;
        let sample = wald_degrade(&full, gains)?;
        match e.split {
            Split::Train => corpus.train.push((e.id.clone(), sample)),
            Split::Test => corpus.test.push((e.id.clone(), sample)),
        }
    }
    Ok(corpus)
}
