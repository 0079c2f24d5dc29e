//! Per-image inputs, pair enumeration, hand-crafted spatial encoding, ROI pooling and
//! ground-truth label assignment.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hico::{HoiTable, PERSON};
use crate::math;
use crate::tensor::Tensor;

/// Axis-aligned box in pixels, `(x1, y1)` top-left and `(x2, y2)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    /// Smallest box containing both.
    pub fn union_box(&self, o: &BBox) -> BBox {
        BBox::new(self.x1.min(o.x1), self.y1.min(o.y1), self.x2.max(o.x2), self.y2.max(o.y2))
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Stage-1 detections and backbone features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFixture {
    pub image_size: (f64, f64),
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
    /// `boxes.len() × dim`, row-major.
    pub appearance: Vec<f64>,
    /// Backbone tokens `K_b`, `grid.0 * grid.1` rows (H, W), row-major over H then W.
    pub feature_map: Tensor,
    pub grid: (usize, usize),
    pub dim: usize,
}

impl DetectionFixture {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn appearance_row(&self, i: usize) -> &[f64] {
        &self.appearance[i * self.dim..(i + 1) * self.dim]
    }

    /// Checks structural invariants and clamps boxes into the image.
    pub fn validate(&mut self, num_objects: usize) -> Result<()> {
        let n = self.boxes.len();
        if self.labels.len() != n || self.scores.len() != n || self.appearance.len() != n * self.dim {
            return Err(Error::Config(String::from("detection arrays disagree in length")));
        }
        let (h, w) = self.grid;
        if self.feature_map.shape() != [h * w, self.dim] {
            return Err(Error::Config(format!(
                "feature map shape {:?} does not match grid {h}x{w} and dim {}",
                self.feature_map.shape(),
                self.dim
            )));
        }
        let (iw, ih) = self.image_size;
        if !(iw > 0.0 && ih > 0.0) {
            return Err(Error::Config(String::from("image size must be positive")));
        }
        for (i, b) in self.boxes.iter_mut().enumerate() {
            *b = b.clamp_to(iw, ih);
            if !(b.x1 < b.x2 && b.y1 < b.y2) {
                return Err(Error::Config(format!("detection {i} has an empty box after clamping")));
            }
            if self.labels[i] >= num_objects {
                return Err(Error::OutOfRange {
                    what: "object class",
                    index: self.labels[i],
                    len: num_objects,
                });
            }
            if !(0.0..=1.0).contains(&self.scores[i]) {
                return Err(Error::Config(format!("detection {i} score outside [0, 1]")));
            }
        }
        if self.appearance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(String::from("non-finite appearance feature")));
        }
        Ok(())
    }
}

/// Vision-language image-encoder outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFixture {
    /// Global token `g^v`, length `d`.
    pub global: Vec<f64>,
    /// Patch tokens `K_c`, `P × d`.
    pub patches: Tensor,
}

/// Named embedding matrix with one row per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub name: String,
    pub prompts: Vec<String>,
    pub matrix: Tensor,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        if i >= self.rows() {
            return Err(Error::OutOfRange {
                what: "embedding row",
                index: i,
                len: self.rows(),
            });
        }
        Ok(self.matrix.row(i))
    }
}

/// An ordered (human, target) proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoiPair {
    pub human: usize,
    pub target: usize,
    pub human_box: BBox,
    pub object_box: BBox,
    /// `S_c`, product of the two detection scores.
    pub score: f64,
    pub object_class: usize,
}

/// One annotated interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GtInteraction {
    pub human: BBox,
    pub object: BBox,
    pub object_class: usize,
    pub verb: usize,
}

pub type GroundTruth = Vec<GtInteraction>;

/// Every person detection paired with every other detection, both scoring at
/// least `threshold`, in (human, target) enumeration order.
///
/// When more than `max_pairs` qualify, the highest `S_c` pairs are kept (ties by
/// enumeration order) and returned in enumeration order.
pub fn enumerate_pairs(det: &DetectionFixture, threshold: f64, max_pairs: usize) -> Vec<HoiPair> {
    let keep = |i: usize| det.scores[i] >= threshold;
    let mut pairs = Vec::new();
    for h in (0..det.len()).filter(|&h| det.labels[h] == PERSON && keep(h)) {
        for t in (0..det.len()).filter(|&t| t != h && keep(t)) {
            pairs.push(HoiPair {
                human: h,
                target: t,
                human_box: det.boxes[h],
                object_box: det.boxes[t],
                score: det.scores[h] * det.scores[t],
                object_class: det.labels[t],
            });
        }
    }
    if pairs.len() > max_pairs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by(|&a, &b| pairs[b].score.total_cmp(&pairs[a].score));
        let mut kept = order[..max_pairs].to_vec();
        kept.sort_unstable();
        pairs = kept.into_iter().map(|i| pairs[i]).collect();
    }
    pairs
}

pub const SPATIAL_DIM: usize = 36;

/// Raw pairwise box encoding. Widths and heights are clamped to one pixel so
/// degenerate boxes keep a finite encoding.
pub fn spatial_features(bh: &BBox, bo: &BBox, image_size: (f64, f64)) -> [f64; SPATIAL_DIM] {
    let (iw, ih) = image_size;
    let dims = |b: &BBox| (b.width().max(1.0), b.height().max(1.0));
    let (wh, hh) = dims(bh);
    let (wo, ho) = dims(bo);
    let (cxh, cyh) = bh.center();
    let (cxo, cyo) = bo.center();
    let (ah, ao) = (wh * hh, wo * ho);
    let base = |cx: f64, cy: f64, w: f64, h: f64| [cx / iw, cy / ih, w / iw, h / ih, w * h / (iw * ih), w / h];
    let fh = base(cxh, cyh, wh, hh);
    let fo = base(cxo, cyo, wo, ho);
    let inter = bh.intersection(bo);
    let union = (ah + ao - inter).max(1.0);
    let dx = (cxo - cxh) / iw;
    let dy = (cyo - cyh) / ih;

    let mut f = [0.0; SPATIAL_DIM];
    f[..6].copy_from_slice(&fh);
    f[6..12].copy_from_slice(&fo);
    for k in 0..6 {
        f[12 + k] = fo[k] - fh[k];
        f[18 + k] = fo[k] * fh[k];
    }
    f[24] = (inter / union).clamp(0.0, 1.0);
    f[25] = inter / (iw * ih);
    f[26] = union / (iw * ih);
    f[27] = dx;
    f[28] = dy;
    f[29] = math::sqrt(dx * dx + dy * dy);
    f[30] = if dx == 0.0 && dy == 0.0 { 0.0 } else { math::atan2(dy, dx) };
    f[31] = (cxo - cxh) / wh;
    f[32] = (cyo - cyh) / hh;
    f[33] = inter / ah;
    f[34] = inter / ao;
    f[35] = ao / ah;
    f
}

/// Indices of the spatial features that carry IoU and the center offsets.
pub mod spatial_index {
    pub const IOU: usize = 24;
    pub const OFFSETS: [usize; 6] = [27, 28, 29, 30, 31, 32];
}

/// ROI-Align over an `H × W` token grid: 2×2 bins, one bilinear sample at each bin
/// center, samples averaged. Sample coordinates are clamped into the grid.
pub fn roi_align(feature_map: &Tensor, grid: (usize, usize), bbox: &BBox, image_size: (f64, f64)) -> Vec<f64> {
    let (gh, gw) = grid;
    let d = feature_map.shape()[1];
    let (iw, ih) = image_size;
    let mut out = vec![0.0; d];
    let cell = |r: usize, c: usize| feature_map.row(r * gw + c);
    for by in 0..2 {
        for bx in 0..2 {
            let x = bbox.x1 + (bx as f64 + 0.5) * bbox.width() / 2.0;
            let y = bbox.y1 + (by as f64 + 0.5) * bbox.height() / 2.0;
            let u = (x * gw as f64 / iw - 0.5).clamp(0.0, (gw - 1) as f64);
            let v = (y * gh as f64 / ih - 0.5).clamp(0.0, (gh - 1) as f64);
            let (c0, r0) = (math::floor(u) as usize, math::floor(v) as usize);
            let (c1, r1) = ((c0 + 1).min(gw - 1), (r0 + 1).min(gh - 1));
            let (fu, fv) = (u - c0 as f64, v - r0 as f64);
            let weights = [
                ((1.0 - fu) * (1.0 - fv), r0, c0),
                (fu * (1.0 - fv), r0, c1),
                ((1.0 - fu) * fv, r1, c0),
                (fu * fv, r1, c1),
            ];
            for (w, r, c) in weights {
                if w == 0.0 {
                    continue;
                }
                for (o, &val) in out.iter_mut().zip(cell(r, c)) {
                    *o += 0.25 * w * val;
                }
            }
        }
    }
    out
}

/// Column space of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum CategorySpace {
    /// One column per verb; used for regular training.
    Verbs,
    /// One column per HOI id; used under zero-shot splits.
    Hois,
}

impl CategorySpace {
    pub fn columns(self, table: &HoiTable) -> usize {
        match self {
            CategorySpace::Verbs => table.num_verbs(),
            CategorySpace::Hois => table.len(),
        }
    }

    /// HOI id of (pair object class, column), if that combination is a valid HOI.
    pub fn hoi_of(self, table: &HoiTable, object: usize, column: usize) -> Option<usize> {
        match self {
            CategorySpace::Verbs => table.hoi_id(object, column),
            CategorySpace::Hois => (table.object_of(column) == object).then_some(column),
        }
    }

    /// Verb id represented by `column`.
    pub fn verb_of(self, table: &HoiTable, column: usize) -> usize {
        match self {
            CategorySpace::Verbs => column,
            CategorySpace::Hois => table.verb_of(column),
        }
    }
}

pub const MATCH_IOU: f64 = 0.5;

/// Validity mask row for a pair with object class `object`.
pub fn mask_row(table: &HoiTable, space: CategorySpace, object: usize) -> Vec<f64> {
    let c = space.columns(table);
    (0..c).map(|col| if space.hoi_of(table, object, col).is_some() { 1.0 } else { 0.0 }).collect()
}

/// Binary targets and validity mask, both `pairs.len() × C` row-major.
pub fn assign_labels(
    pairs: &[HoiPair],
    gt: &[GtInteraction],
    table: &HoiTable,
    space: CategorySpace,
) -> (Vec<f64>, Vec<f64>) {
    let c = space.columns(table);
    let mut labels = vec![0.0; pairs.len() * c];
    let mut mask = Vec::with_capacity(pairs.len() * c);
    for (i, p) in pairs.iter().enumerate() {
        mask.extend(mask_row(table, space, p.object_class));
        for g in gt {
            if g.object_class != p.object_class
                || iou(&p.human_box, &g.human) <= MATCH_IOU
                || iou(&p.object_box, &g.object) <= MATCH_IOU
            {
                continue;
            }
            let col = match space {
                CategorySpace::Verbs => table.has(g.object_class, g.verb).then_some(g.verb),
                CategorySpace::Hois => table.hoi_id(g.object_class, g.verb),
            };
            if let Some(col) = col {
                labels[i * c + col] = 1.0;
            }
        }
    }
    (labels, mask)
}
