//! A small seeded synthetic dataset with the same shapes as the real inputs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BBox, ClipFixture, DetectionFixture, EmbeddingTable, GtInteraction};
use crate::hico::HoiTable;
use crate::tensor::Tensor;

pub const SYNTH_OBJECTS: [&str; 3] = ["person", "ball", "chair"];
pub const SYNTH_VERBS: [&str; 5] = ["carry", "kick", "sit_on", "throw", "talk_to"];
/// `(object, verb)` rows of the synthetic HOI table.
pub const SYNTH_HOIS: [(usize, usize); 7] = [(0, 0), (0, 4), (1, 0), (1, 1), (1, 3), (2, 0), (2, 2)];
pub const SYNTH_IMAGES: usize = 20;
const IMAGE_SIZE: (f64, f64) = (640.0, 480.0);
const GRID: (usize, usize) = (4, 4);
const PATCHES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub detection: DetectionFixture,
    pub clip: ClipFixture,
    pub gt: Vec<GtInteraction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub table: HoiTable,
    pub object_names: Vec<String>,
    pub verb_names: Vec<String>,
    pub object_text: EmbeddingTable,
    /// One row per verb.
    pub verb_text: EmbeddingTable,
    /// One row per HOI category.
    pub hoi_text: EmbeddingTable,
    pub images: Vec<SynthImage>,
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("non-empty shape")
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (w, h) = IMAGE_SIZE;
    let bw = rng.gen_range(60.0..260.0);
    let bh = rng.gen_range(60.0..260.0);
    let x1 = rng.gen_range(0.0..w - bw);
    let y1 = rng.gen_range(0.0..h - bh);
    BBox::new(x1, y1, x1 + bw, y1 + bh)
}

fn jitter(b: BBox, rng: &mut ChaCha8Rng) -> BBox {
    let mut j = || rng.gen_range(-3.0..3.0);
    BBox::new(b.x1 + j(), b.y1 + j(), b.x2 + j(), b.y2 + j()).clamp_to(IMAGE_SIZE.0, IMAGE_SIZE.1)
}

impl SynthDataset {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = HoiTable::new(SYNTH_HOIS.to_vec(), SYNTH_OBJECTS.len(), SYNTH_VERBS.len()).expect("valid table");
        let text = |name: &str, prompts: Vec<String>, rng: &mut ChaCha8Rng| EmbeddingTable {
            name: name.to_string(),
            matrix: uniform(prompts.len(), dim, rng),
            prompts,
        };
        let object_text = text(
            "objects",
            SYNTH_OBJECTS.iter().map(|o| format!("a photo of a {o}")).collect(),
            &mut rng,
        );
        let verb_text = text(
            "verbs",
            SYNTH_VERBS.iter().map(|v| format!("a photo of a person {}", v.replace('_', " "))).collect(),
            &mut rng,
        );
        let hoi_text = text(
            "hois",
            SYNTH_HOIS
                .iter()
                .map(|&(o, v)| format!("a photo of a person {} a {}", SYNTH_VERBS[v].replace('_', " "), SYNTH_OBJECTS[o]))
                .collect(),
            &mut rng,
        );
        let images = (0..SYNTH_IMAGES).map(|i| Self::image(i, dim, &table, &mut rng)).collect();
        Self {
            table,
            object_names: SYNTH_OBJECTS.iter().map(|s| s.to_string()).collect(),
            verb_names: SYNTH_VERBS.iter().map(|s| s.to_string()).collect(),
            object_text,
            verb_text,
            hoi_text,
            images,
        }
    }

    fn image(index: usize, dim: usize, table: &HoiTable, rng: &mut ChaCha8Rng) -> SynthImage {
        let humans = rng.gen_range(1..=2);
        let objects = rng.gen_range(1..=2);
        let mut labels = vec![0; humans];
        labels.extend((0..objects).map(|_| rng.gen_range(1..SYNTH_OBJECTS.len())));
        let n = labels.len();
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
        let scores = (0..n).map(|_| rng.gen_range(0.5..1.0)).collect();
        let mut gt = Vec::new();
        while gt.is_empty() {
            for h in 0..humans {
                for t in (0..n).filter(|&t| t != h) {
                    for v in table.verbs_for_object(labels[t]) {
                        if rng.gen_bool(0.4) {
                            gt.push(GtInteraction {
                                human: jitter(boxes[h], rng),
                                object: jitter(boxes[t], rng),
                                object_class: labels[t],
                                verb: v,
                            });
                        }
                    }
                }
            }
        }
        let detection = DetectionFixture {
            image_size: IMAGE_SIZE,
            boxes,
            labels,
            scores,
            appearance: uniform(n, dim, rng).into_data(),
            feature_map: uniform(GRID.0 * GRID.1, dim, rng),
            grid: GRID,
            dim,
        };
        let clip = ClipFixture {
            global: uniform(1, dim, rng).into_data(),
            patches: uniform(PATCHES, dim, rng),
        };
        SynthImage {
            id: format!("synth_{index:03}"),
            detection,
            clip,
            gt,
        }
    }

    /// Annotation count per HOI category.
    pub fn hoi_counts(&self) -> Vec<u64> {
        crate::splits::count_hois(&self.table, self.images.iter().flat_map(|i| i.gt.iter()))
    }
}
