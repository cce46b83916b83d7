//! Dataset manifest and on-disk layout.
//!
//! A dataset directory holds one PGM per image and per mask, plus a
//! tab-separated `manifest.tsv`:
//!
//! ```text
//! # freespace-manifest v1
//! split	difficulty	seed	image	mask
//! train	positive	1234	train/000000.pgm	train/000000.mask.pgm
//! ```

use std::fs;
use std::path::{Component, Path, PathBuf};

use super::pgm::Pgm;
use super::{Dataset, Difficulty, Sample, SampleMeta};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::CLASS_FREE;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER: &str = "# freespace-manifest v1";
const COLUMNS: &str = "split\tdifficulty\tseed\timage\tmask";
const MASK_MAXVAL: u16 = 255;

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
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub difficulty: Difficulty,
    pub seed: u64,
    /// Relative to the dataset directory.
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn encode(&self) -> String {
        let mut out = format!("{HEADER}\n{COLUMNS}\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.split.as_str(),
                e.difficulty.as_str(),
                e.seed,
                e.image,
                e.mask
            ));
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == HEADER => {}
            _ => return Err(Error::parse(1, format!("expected header {HEADER:?}"))),
        }
        match lines.next() {
            Some((_, l)) if l == COLUMNS => {}
            _ => return Err(Error::parse(2, "expected column header")),
        }
        let mut entries = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::parse(n, format!("expected 5 fields, got {}", fields.len())));
            }
            let split = match fields[0] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::parse(n, format!("unknown split {other:?}"))),
            };
            let difficulty = fields[1]
                .parse()
                .map_err(|_| Error::parse(n, format!("unknown difficulty {:?}", fields[1])))?;
            let seed = fields[2]
                .parse()
                .map_err(|_| Error::parse(n, format!("invalid seed {:?}", fields[2])))?;
            for path in &fields[3..] {
                if !is_safe_relative(path) {
                    return Err(Error::parse(n, format!("unsafe path {path:?}")));
                }
            }
            entries.push(ManifestEntry {
                split,
                difficulty,
                seed,
                image: fields[3].to_string(),
                mask: fields[4].to_string(),
            });
        }
        Ok(Manifest { entries })
    }
}

/// Non-empty relative path without `..`, root or prefix components.
fn is_safe_relative(path: &str) -> bool {
    !path.is_empty()
        && Path::new(path)
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn write_sample(dir: &Path, split: Split, index: usize, sample: &Sample) -> Result<ManifestEntry> {
    if sample.image.shape()[2] != 1 {
        return Err(Error::Config(
            "PGM export supports single-channel images only".into(),
        ));
    }
    let (h, w) = (sample.height(), sample.width());
    let image = format!("{}/{index:06}.pgm", split.as_str());
    let mask = format!("{}/{index:06}.mask.pgm", split.as_str());
    let img = Pgm::from_unit(w, h, u16::MAX, sample.image.data())?;
    let mask_values: Vec<f64> = sample.mask.iter().map(|&m| m as f64).collect();
    let m = Pgm::from_unit(w, h, MASK_MAXVAL, &mask_values)?;
    fs::write(dir.join(&image), img.encode())?;
    fs::write(dir.join(&mask), m.encode())?;
    Ok(ManifestEntry {
        split,
        difficulty: sample.meta.difficulty,
        seed: sample.meta.seed,
        image,
        mask,
    })
}

/// Writes every sample and the manifest under `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir.join("train"))?;
    fs::create_dir_all(dir.join("test"))?;
    let mut manifest = Manifest::default();
    for (i, s) in dataset.train.iter().enumerate() {
        manifest.entries.push(write_sample(dir, Split::Train, i, s)?);
    }
    for (i, s) in dataset.test.iter().enumerate() {
        manifest.entries.push(write_sample(dir, Split::Test, i, s)?);
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.encode())?;
    Ok(manifest)
}

fn read_pgm(path: &PathBuf) -> Result<Pgm> {
    let text = fs::read_to_string(path)?;
    Pgm::decode(&text).map_err(|e| Error::Format {
        what: "PGM",
        msg: format!("{}: {e}", path.display()),
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::decode(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut dataset = Dataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in manifest.entries {
        let img = read_pgm(&dir.join(&e.image))?;
        let mask = read_pgm(&dir.join(&e.mask))?;
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(Error::Format {
                what: "dataset",
                msg: format!("{} and {} differ in size", e.image, e.mask),
            });
        }
        let sample = Sample {
            image: Tensor::new(vec![img.height, img.width, 1], img.to_unit())?,
            mask: mask
                .pixels
                .iter()
                .map(|&p| if p * 2 > mask.maxval { CLASS_FREE } else { 0 })
                .collect(),
            meta: SampleMeta {
                difficulty: e.difficulty,
                seed: e.seed,
            },
        };
        match e.split {
            Split::Train => dataset.train.push(sample),
            Split::Test => dataset.test.push(sample),
        }
    }
    Ok(dataset)
}
