//! On-disk datasets: `manifest.json`, `annotations.jsonl` and `images/{id}_{q,r}.png`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smgeo_core::fusion::ClickPrompt;
use smgeo_core::head::BBox;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::imaging::{load_png, save_png};
use crate::synth::{generate_pair, sample_seed, CrossViewSample, SynthConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// Largest-remainder apportionment of `total` samples by `ratio`.
    pub fn from_ratio(total: usize, ratio: [usize; 3]) -> Self {
        let denom: usize = ratio.iter().sum::<usize>().max(1);
        let mut counts = ratio.map(|r| total * r / denom);
        let mut order = [0, 1, 2];
        order.sort_by_key(|&i| (std::cmp::Reverse(total * ratio[i] % denom), i));
        let missing = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        Self { train: counts[0], val: counts[1], test: counts[2] }
    }

    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub counts: SplitCounts,
    /// `[height, width]`.
    pub query_extent: [usize; 2],
    pub reference_extent: [usize; 2],
    pub generator_seed: u64,
    pub augmentation: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub split: Split,
    pub gt: [f64; 4],
    pub click: [f64; 2],
    pub query_file: String,
    pub ref_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_seed: Option<u64>,
}

impl AnnotationRecord {
    pub fn bbox(&self) -> BBox {
        let [x1, y1, x2, y2] = self.gt;
        BBox { x1, y1, x2, y2 }
    }

    pub fn click_prompt(&self) -> ClickPrompt {
        ClickPrompt::at(self.click[0], self.click[1])
    }

    fn validate(&self, m: &DatasetManifest) -> Result<()> {
        let ctx = |msg: String| Error::Validation(format!("record {}: {msg}", self.id));
        if self.id.is_empty() || self.query_file.is_empty() || self.ref_file.is_empty() {
            return Err(ctx("id and file names must be non-empty".into()));
        }
        let [rh, rw] = m.reference_extent;
        self.bbox().validate_within(rh, rw).map_err(|e| ctx(format!("gt {:?}: {e}", self.gt)))?;
        let [qh, qw] = m.query_extent;
        self.click_prompt().validate(qh, qw).map_err(|e| ctx(e.to_string()))?;
        Ok(())
    }
}

/// Settings for generating a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub counts: SplitCounts,
    pub synth: SynthConfig,
    pub augmentation: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            counts: SplitCounts { train: 2000, val: 570, test: 286 },
            synth: SynthConfig::default(),
            augmentation: AugmentConfig::default(),
        }
    }
}

/// Samples in id order: train, then val, then test.
pub fn generate_dataset(cfg: &DataConfig) -> Result<(DatasetManifest, Vec<(Split, CrossViewSample)>)> {
    cfg.synth.validate()?;
    let mut out = Vec::with_capacity(cfg.counts.total());
    let mut index = 0u64;
    for split in Split::ALL {
        for _ in 0..cfg.counts.get(split) {
            let mut s = generate_pair(sample_seed(cfg.seed, index), &cfg.synth)?;
            s.id = format!("s{index:05}");
            out.push((split, s));
            index += 1;
        }
    }
    let (q, r) = (cfg.synth.query_extent, cfg.synth.reference_extent);
    let manifest = DatasetManifest {
        version: SCHEMA_VERSION,
        counts: cfg.counts,
        query_extent: [q.0, q.1],
        reference_extent: [r.0, r.1],
        generator_seed: cfg.seed,
        augmentation: cfg.augmentation.clone(),
    };
    Ok((manifest, out))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_dataset(manifest: &DatasetManifest, samples: &[(Split, CrossViewSample)], dir: &Path) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut per_split = BTreeMap::new();
    for (split, _) in samples {
        *per_split.entry(*split).or_insert(0usize) += 1;
    }
    for split in Split::ALL {
        let n = per_split.get(&split).copied().unwrap_or(0);
        if n != manifest.counts.get(split) {
            return Err(Error::Validation(format!("{n} {split} samples but the manifest declares {}", manifest.counts.get(split))));
        }
    }
    write_json(&dir.join(MANIFEST_FILE), manifest)?;
    let path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for (split, s) in samples {
        let rec = AnnotationRecord {
            id: s.id.clone(),
            split: *split,
            gt: s.gt.to_array(),
            click: [s.click.u, s.click.v],
            query_file: format!("{IMAGES_DIR}/{}_q.png", s.id),
            ref_file: format!("{IMAGES_DIR}/{}_r.png", s.id),
            scene_seed: Some(s.scene_seed),
        };
        rec.validate(manifest)?;
        save_png(&s.query, &dir.join(&rec.query_file))?;
        save_png(&s.reference, &dir.join(&rec.ref_file))?;
        let line = serde_json::to_string(&rec).expect("serializable");
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// A loaded dataset; images are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<AnnotationRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let version = serde_json::from_str::<serde_json::Value>(&text)
            .map_err(|e| Error::format(&mpath, e.to_string()))?
            .get("version")
            .and_then(|v| v.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::format(&mpath, format!("schema version {version:?}, expected {SCHEMA_VERSION}")));
        }
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;

        let apath = dir.join(ANNOTATIONS_FILE);
        let file = fs::File::open(&apath).map_err(|e| Error::io(&apath, e))?;
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&apath, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationRecord =
                serde_json::from_str(&line).map_err(|e| Error::format(&apath, format!("line {}: {e}", i + 1)))?;
            rec.validate(&manifest)?;
            if !ids.insert(rec.id.clone()) {
                return Err(Error::Validation(format!("duplicate sample id {}", rec.id)));
            }
            records.push(rec);
        }
        for split in Split::ALL {
            let n = records.iter().filter(|r| r.split == split).count();
            if n != manifest.counts.get(split) {
                return Err(Error::Validation(format!(
                    "{n} {split} records but the manifest declares {}",
                    manifest.counts.get(split)
                )));
            }
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn load_sample(&self, rec: &AnnotationRecord) -> Result<CrossViewSample> {
        let load = |file: &str, ext: [usize; 2]| -> Result<image::RgbImage> {
            let path = self.dir.join(file);
            let img = load_png(&path)?;
            if [img.height() as usize, img.width() as usize] != ext {
                return Err(Error::format(&path, format!("image is {}x{}, expected {}x{}", img.width(), img.height(), ext[1], ext[0])));
            }
            Ok(img)
        };
        Ok(CrossViewSample {
            id: rec.id.clone(),
            scene_seed: rec.scene_seed.unwrap_or(0),
            reference: load(&rec.ref_file, self.manifest.reference_extent)?,
            query: load(&rec.query_file, self.manifest.query_extent)?,
            click: rec.click_prompt(),
            gt: rec.bbox(),
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<CrossViewSample>> {
        self.split(split).map(|r| self.load_sample(r)).collect()
    }
}
