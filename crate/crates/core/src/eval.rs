//! HOI detection mAP: greedy matching on min(IoU_h, IoU_o) > 0.5 and all-point
//! interpolated AP per HOI category.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{iou, BBox, GtInteraction, MATCH_IOU};
use crate::hico::HoiTable;
use crate::scoring::Triplet;
use crate::splits::SplitSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Setting {
    /// False positives are counted on every test image.
    Default,
    /// For category (o, v) only images annotated with object o count.
    KnownObjects,
}

/// One scored prediction, in emission order within its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub hoi: usize,
    pub human: BBox,
    pub object: BBox,
    pub score: f64,
}

/// One annotated HOI instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub hoi: usize,
    pub human: BBox,
    pub object: BBox,
}

/// Predictions and annotations for one test image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub predictions: Vec<Prediction>,
    pub ground_truth: Vec<GtBox>,
}

/// Annotations mapped to HOI ids; interactions outside the table are dropped.
pub fn gt_boxes(table: &HoiTable, gt: &[GtInteraction]) -> Vec<GtBox> {
    gt.iter()
        .filter_map(|g| {
            table.hoi_id(g.object_class, g.verb).map(|hoi| GtBox {
                hoi,
                human: g.human,
                object: g.object,
            })
        })
        .collect()
}

pub fn to_predictions(triplets: &[Triplet]) -> Vec<Prediction> {
    triplets
        .iter()
        .map(|t| Prediction {
            hoi: t.hoi,
            human: t.human_box,
            object: t.object_box,
            score: t.score,
        })
        .collect()
}

fn pair_overlap(h: &BBox, o: &BBox, gh: &BBox, go: &BBox) -> f64 {
    iou(h, gh).min(iou(o, go))
}

/// TP flags for one category's predictions on one image, visited in the given order.
/// Each prediction takes the unmatched GT with the highest min-IoU, if above 0.5.
pub fn match_predictions(predictions: &[(BBox, BBox)], gt: &[(BBox, BBox)]) -> Vec<bool> {
    let mut used = vec![false; gt.len()];
    predictions
        .iter()
        .map(|(h, o)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (gh, go)) in gt.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let ov = pair_overlap(h, o, gh, go);
                if ov > MATCH_IOU && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((j, ov));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP over score-ordered TP flags; `None` when `num_gt == 0`.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Per-category APs and unweighted means over named category groups.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub setting: Setting,
    /// AP in [0, 1]; `None` for categories without ground truth.
    pub per_category: Vec<Option<f64>>,
    pub num_gt: Vec<usize>,
    /// `(group name, mAP in percent)`; `None` when no category of the group has ground truth.
    pub aggregates: Vec<(String, Option<f64>)>,
}

impl EvalReport {
    pub fn aggregate(&self, name: &str) -> Option<f64> {
        self.aggregates.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
    }
}

/// Mean AP in percent over `categories`, skipping those without ground truth.
pub fn mean_ap(per_category: &[Option<f64>], categories: &[usize]) -> Option<f64> {
    let aps: Vec<f64> = categories.iter().filter_map(|&c| per_category[c]).collect();
    if aps.is_empty() {
        return None;
    }
    Some(100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Groups `rare` / `non-rare` from a list of rare categories.
pub fn rare_groups(rare: &[usize], num_hois: usize) -> Vec<(String, Vec<usize>)> {
    let non_rare = (0..num_hois).filter(|h| !rare.contains(h)).collect();
    vec![(String::from("rare"), rare.to_vec()), (String::from("non-rare"), non_rare)]
}

/// Groups `unseen` / `seen` from a split.
pub fn split_groups(split: &SplitSpec) -> Vec<(String, Vec<usize>)> {
    vec![
        (String::from("unseen"), split.unseen.clone()),
        (String::from("seen"), split.seen.clone()),
    ]
}

/// Evaluates all categories of `table`. A `full` aggregate is always reported first.
pub fn evaluate(images: &[ImageEval], table: &HoiTable, setting: Setting, groups: &[(String, Vec<usize>)]) -> EvalReport {
    let n = table.len();
    let mut num_gt = vec![0usize; n];
    let mut objects_in_image: Vec<Vec<bool>> = Vec::with_capacity(images.len());
    for img in images {
        let mut present = vec![false; table.num_objects()];
        for g in &img.ground_truth {
            num_gt[g.hoi] += 1;
            present[table.object_of(g.hoi)] = true;
        }
        objects_in_image.push(present);
    }

    let mut per_category = vec![None; n];
    for (hoi, slot) in per_category.iter_mut().enumerate() {
        if num_gt[hoi] == 0 {
            continue;
        }
        let object = table.object_of(hoi);
        // (score, image, emission index, tp)
        let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (i, img) in images.iter().enumerate() {
            if setting == Setting::KnownObjects && !objects_in_image[i][object] {
                continue;
            }
            let mut preds: Vec<(usize, &Prediction)> =
                img.predictions.iter().enumerate().filter(|(_, p)| p.hoi == hoi).collect();
            if preds.is_empty() {
                continue;
            }
            preds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
            let boxes: Vec<(BBox, BBox)> = preds.iter().map(|(_, p)| (p.human, p.object)).collect();
            let gt: Vec<(BBox, BBox)> = img
                .ground_truth
                .iter()
                .filter(|g| g.hoi == hoi)
                .map(|g| (g.human, g.object))
                .collect();
            let flags = match_predictions(&boxes, &gt);
            scored.extend(preds.iter().zip(flags).map(|((k, p), f)| (p.score, i, *k, f)));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = scored.iter().map(|s| s.3).collect();
        *slot = average_precision(&flags, num_gt[hoi]);
    }

    let all: Vec<usize> = (0..n).collect();
    let mut aggregates = vec![(String::from("full"), mean_ap(&per_category, &all))];
    for (name, cats) in groups {
        aggregates.push((name.clone(), mean_ap(&per_category, cats)));
    }
    EvalReport {
        setting,
        per_category,
        num_gt,
        aggregates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const B: BBox = BBox::new(0., 0., 10., 10.);
    const O: BBox = BBox::new(20., 0., 30., 10.);

    #[test]
    fn matching_examples() {
        assert_eq!(match_predictions(&[(B, O)], &[(B, O)]), vec![true]);
        assert_eq!(match_predictions(&[(B, O), (B, O)], &[(B, O)]), vec![true, false]);
        // IoU exactly 0.5: box of width 20 containing the 10-wide GT
        let half = BBox::new(0., 0., 20., 10.);
        assert_eq!(iou(&half, &B), 0.5);
        assert_eq!(match_predictions(&[(half, O)], &[(B, O)]), vec![false]);
    }

    #[test]
    fn matching_prefers_best_unmatched() {
        let near = BBox::new(0., 0., 10., 11.);
        let gts = [(near, O), (B, O)];
        // first prediction is exact on the second GT; second prediction then takes the first GT
        assert_eq!(match_predictions(&[(B, O), (B, O)], &gts), vec![true, true]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision(&[true, false], 1), Some(1.0));
        assert_eq!(average_precision(&[false, true], 1), Some(0.5));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[false], 3), Some(0.0));
        // recall 1/2 at precision 1, then 2/2 at precision 2/3
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    fn table() -> HoiTable {
        HoiTable::new(vec![(0, 0), (1, 0), (1, 1)], 2, 2).unwrap()
    }

    #[test]
    fn perfect_predictor_is_full_marks() {
        let img = ImageEval {
            predictions: vec![Prediction {
                hoi: 1,
                human: B,
                object: O,
                score: 0.3,
            }],
            ground_truth: vec![GtBox { hoi: 1, human: B, object: O }],
        };
        let r = evaluate(&[img], &table(), Setting::Default, &[]);
        assert_eq!(r.aggregate("full"), Some(100.0));
        assert_eq!(r.per_category, vec![None, Some(1.0), None]);
    }

    #[test]
    fn known_objects_drops_foreign_false_positives() {
        let fp = Prediction {
            hoi: 1,
            human: B,
            object: O,
            score: 0.9,
        };
        let tp = Prediction { score: 0.5, ..fp };
        let images = [
            ImageEval {
                predictions: vec![fp],
                ground_truth: vec![GtBox { hoi: 0, human: B, object: O }],
            },
            ImageEval {
                predictions: vec![tp],
                ground_truth: vec![GtBox { hoi: 1, human: B, object: O }],
            },
        ];
        let d = evaluate(&images, &table(), Setting::Default, &[]);
        let k = evaluate(&images, &table(), Setting::KnownObjects, &[]);
        assert_eq!(d.per_category[1], Some(0.5));
        assert_eq!(k.per_category[1], Some(1.0));
    }

    #[test]
    fn groups_are_reported() {
        let img = ImageEval {
            predictions: vec![],
            ground_truth: vec![GtBox { hoi: 2, human: B, object: O }],
        };
        let groups = rare_groups(&[0, 2], 3);
        let r = evaluate(&[img], &table(), Setting::Default, &groups);
        assert_eq!(r.aggregate("rare"), Some(0.0));
        assert_eq!(r.aggregate("non-rare"), None);
    }
}
