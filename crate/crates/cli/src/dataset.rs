//! Data directory layout and the JSON side formats.
//!
//! ```text
//! <data>/hoi_table.json        optional, {"<hoi_id>": [object_id, verb_id], ...}
//! <data>/object_text.isaf      embedding table, one row per object class
//! <data>/verb_text.isaf        one row per verb (verb classification)
//! <data>/hoi_text.isaf         one row per HOI category (HOI classification)
//! <data>/annotations.jsonl     one image per line
//! <data>/detections/<id>.isaf  detection fixture
//! <data>/clip/<id>.isaf        image-encoder fixture
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hoi_core::data::{BBox, CategorySpace, ClipFixture, DetectionFixture, EmbeddingTable, GtInteraction};
use hoi_core::hico::HoiTable;
use hoi_core::scoring::Triplet;
use hoi_core::splits::SplitSpec;
use hoi_core::synth::SynthDataset;
use serde::{Deserialize, Serialize};

use crate::isaf;

pub const TABLE_FILE: &str = "hoi_table.json";
pub const OBJECT_TEXT_FILE: &str = "object_text.isaf";
pub const VERB_TEXT_FILE: &str = "verb_text.isaf";
pub const HOI_TEXT_FILE: &str = "hoi_text.isaf";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const DETECTION_DIR: &str = "detections";
pub const CLIP_DIR: &str = "clip";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub human: [f64; 4],
    pub object: [f64; 4],
    pub object_class: usize,
    pub verb: usize,
}

impl From<&GtRecord> for GtInteraction {
    fn from(r: &GtRecord) -> Self {
        GtInteraction {
            human: BBox::from_array(r.human),
            object: BBox::from_array(r.object),
            object_class: r.object_class,
            verb: r.verb,
        }
    }
}

impl From<&GtInteraction> for GtRecord {
    fn from(g: &GtInteraction) -> Self {
        GtRecord {
            human: g.human.to_array(),
            object: g.object.to_array(),
            object_class: g.object_class,
            verb: g.verb,
        }
    }
}

/// One line of `annotations.jsonl`. Fixture paths are relative to the data
/// directory and default to `detections/<id>.isaf` and `clip/<id>.isaf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    #[serde(default)]
    pub gt: Vec<GtRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<String>,
}

impl Annotation {
    pub fn ground_truth(&self) -> Vec<GtInteraction> {
        self.gt.iter().map(GtInteraction::from).collect()
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ann = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), k + 1))?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<HoiTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let map: BTreeMap<String, (usize, usize)> = serde_json::from_str(&text).context("parsing HOI table")?;
    let mut rows = vec![None; map.len()];
    for (k, v) in map {
        let id: usize = k.parse().with_context(|| format!("HOI id `{k}` is not an integer"))?;
        match rows.get_mut(id) {
            Some(slot) => *slot = Some(v),
            None => bail!("HOI ids must be 0..{}, found {id}", rows.len()),
        }
    }
    let rows: Vec<(usize, usize)> = rows.into_iter().map(|r| r.expect("ids are dense")).collect();
    let num_objects = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let num_verbs = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    Ok(HoiTable::new(rows, num_objects, num_verbs)?)
}

pub fn write_table(path: &Path, table: &HoiTable) -> Result<()> {
    let map: BTreeMap<usize, (usize, usize)> = table.rows().iter().copied().enumerate().collect();
    let map: BTreeMap<String, (usize, usize)> = map.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

/// A data directory with its table and annotation list loaded.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
    pub table: HoiTable,
    pub annotations: Vec<Annotation>,
}

impl DataDir {
    /// `annotations` overrides `<root>/annotations.jsonl`.
    pub fn open(root: &Path, annotations: Option<&Path>) -> Result<Self> {
        if !root.is_dir() {
            bail!("data directory {} does not exist", root.display());
        }
        let table_path = root.join(TABLE_FILE);
        let table = if table_path.exists() {
            read_table(&table_path)?
        } else {
            HoiTable::hico()
        };
        let ann_path = annotations.map_or_else(|| root.join(ANNOTATIONS_FILE), Path::to_path_buf);
        let annotations = read_annotations(&ann_path)?;
        Ok(Self {
            root: root.to_path_buf(),
            table,
            annotations,
        })
    }

    pub fn object_text(&self, dim: usize) -> Result<EmbeddingTable> {
        let path = self.root.join(OBJECT_TEXT_FILE);
        isaf::load_embedding(&path, dim).with_context(|| format!("loading {}", path.display()))
    }

    /// Classifier text table for the category space.
    pub fn class_text(&self, space: CategorySpace, dim: usize) -> Result<EmbeddingTable> {
        let file = match space {
            CategorySpace::Verbs => VERB_TEXT_FILE,
            CategorySpace::Hois => HOI_TEXT_FILE,
        };
        let path = self.root.join(file);
        isaf::load_embedding(&path, dim).with_context(|| format!("loading {}", path.display()))
    }

    pub fn detection(&self, ann: &Annotation, dim: usize) -> Result<DetectionFixture> {
        let rel = ann.detections.clone().unwrap_or_else(|| format!("{DETECTION_DIR}/{}.isaf", ann.image_id));
        let path = self.root.join(rel);
        let mut det = isaf::load_detection(&path, dim).with_context(|| format!("loading {}", path.display()))?;
        det.validate(self.table.num_objects())
            .with_context(|| format!("validating {}", path.display()))?;
        Ok(det)
    }

    /// `None` when the fixture is absent and not required.
    pub fn clip(&self, ann: &Annotation, dim: usize, required: bool) -> Result<Option<ClipFixture>> {
        let rel = ann.clip.clone().unwrap_or_else(|| format!("{CLIP_DIR}/{}.isaf", ann.image_id));
        let path = self.root.join(rel);
        if !path.exists() && !required {
            return Ok(None);
        }
        let clip = isaf::load_clip(&path, dim).with_context(|| format!("loading {}", path.display()))?;
        Ok(Some(clip))
    }
}

/// Writes a synthetic dataset in the data directory layout.
pub fn write_synth(data: &SynthDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join(DETECTION_DIR))?;
    fs::create_dir_all(root.join(CLIP_DIR))?;
    write_table(&root.join(TABLE_FILE), &data.table)?;
    isaf::embedding_to_isaf(&data.object_text).write(&root.join(OBJECT_TEXT_FILE))?;
    isaf::embedding_to_isaf(&data.verb_text).write(&root.join(VERB_TEXT_FILE))?;
    isaf::embedding_to_isaf(&data.hoi_text).write(&root.join(HOI_TEXT_FILE))?;
    let mut anns = Vec::with_capacity(data.images.len());
    for img in &data.images {
        isaf::detection_to_isaf(&img.detection).write(&root.join(DETECTION_DIR).join(format!("{}.isaf", img.id)))?;
        isaf::clip_to_isaf(&img.clip).write(&root.join(CLIP_DIR).join(format!("{}.isaf", img.id)))?;
        anns.push(Annotation {
            image_id: img.id.clone(),
            gt: img.gt.iter().map(GtRecord::from).collect(),
            detections: None,
            clip: None,
        });
    }
    write_jsonl(&root.join(ANNOTATIONS_FILE), &anns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub human: [f64; 4],
    pub object: [f64; 4],
    pub object_class: usize,
    pub verb: usize,
    pub hoi: usize,
    pub score: f64,
}

impl From<&Triplet> for TripletRecord {
    fn from(t: &Triplet) -> Self {
        Self {
            human: t.human_box.to_array(),
            object: t.object_box.to_array(),
            object_class: t.object_class,
            verb: t.verb,
            hoi: t.hoi,
            score: t.score,
        }
    }
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub image_id: String,
    pub triplets: Vec<TripletRecord>,
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), k + 1))?);
    }
    Ok(out)
}

pub fn read_split(path: &Path, num_hois: usize) -> Result<SplitSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let split: SplitSpec = serde_json::from_str(&text).context("parsing split file")?;
    split.validate(num_hois)?;
    Ok(split)
}

pub fn write_split(path: &Path, split: &SplitSpec) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(split)?)?;
    Ok(())
}

/// Per-HOI training counts: a JSON array of integers.
pub fn read_counts(path: &Path) -> Result<Vec<u64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).context("parsing counts file")
}
