//! Cosine verb classification, masked focal loss, geometric score fusion and
//! triplet assembly.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{BBox, CategorySpace, HoiPair};
use crate::error::{Error, Result};
use crate::hico::HoiTable;
use crate::math;
use crate::nn::Session;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { alpha: 0.5, gamma: 0.1 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal alpha must lie in [0, 1] and gamma be >= 0, got ({}, {})",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

/// Cosine similarity between rows of `i` (`N × d`) and rows of `v` (`C × d`),
/// divided by `temperature`. These are the logits of `S_v`.
pub fn cosine_logits(g: &mut Graph, i: Var, v: Var, temperature: f64) -> Result<Var> {
    let ni = g.l2_normalize(i, 1)?;
    let nv = g.l2_normalize(v, 1)?;
    let cos = g.matmul_nt(ni, nv)?;
    if temperature == 1.0 {
        return Ok(cos);
    }
    Ok(g.scale(cos, 1.0 / temperature)?)
}

/// `S_v = σ(cos(I, V) / temperature)`, `N × C`.
pub fn verb_scores(i: &Tensor, v: &Tensor, temperature: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (iv, vv) = (g.constant(i.clone())?, g.constant(v.clone())?);
    let logits = cosine_logits(&mut g, iv, vv, temperature)?;
    let s = g.sigmoid(logits)?;
    Ok(g.value(s).clone())
}

/// `-α_t (1 - p_t)^γ ln p_t` for one probability.
pub fn focal_term(p: f64, positive: bool, cfg: FocalConfig) -> f64 {
    let (pt, at) = if positive { (p, cfg.alpha) } else { (1.0 - p, 1.0 - cfg.alpha) };
    let modulator = if cfg.gamma == 0.0 { 1.0 } else { math::powf(1.0 - pt, cfg.gamma) };
    -at * modulator * math::ln(pt)
}

/// Masked focal loss on probabilities, summed over unmasked elements and divided by
/// `max(1, #positives)`.
pub fn focal_loss(scores: &[f64], labels: &[f64], mask: &[f64], cfg: FocalConfig) -> f64 {
    let mut total = 0.0;
    let mut positives = 0usize;
    for ((&p, &y), &m) in scores.iter().zip(labels).zip(mask) {
        if y > 0.5 {
            positives += 1;
        }
        if m != 0.0 {
            total += focal_term(p, y > 0.5, cfg);
        }
    }
    total / positives.max(1) as f64
}

/// Counts positive labels.
pub fn count_positives(labels: &[f64]) -> usize {
    labels.iter().filter(|&&y| y > 0.5).count()
}

/// Graph form of [`focal_loss`] taking logits: returns the unnormalized sum.
pub fn focal_loss_sum(s: &mut Session, logits: Var, labels: &[f64], mask: &[f64], cfg: FocalConfig) -> Result<Var> {
    Ok(s.focal_loss_logits(logits, labels, mask, cfg.alpha, cfg.gamma)?)
}

/// `S_a = S_c^(1-λ) · S_v^λ` for one element.
pub fn fuse(sc: f64, sv: f64, lambda: f64) -> f64 {
    math::powf(sc, 1.0 - lambda) * math::powf(sv, lambda)
}

/// Row-wise fusion of pair confidences `sc` (length N) with `sv` (`N × C`).
pub fn fuse_scores(sc: &[f64], sv: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    if sc.is_empty() {
        return Ok(Vec::new());
    }
    let c = sv.len() / sc.len();
    Ok(sv.iter().enumerate().map(|(k, &v)| fuse(sc[k / c], v, lambda)).collect())
}

/// A scored (human box, object, verb) prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub pair: usize,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb: usize,
    pub hoi: usize,
    pub score: f64,
}

pub const DEFAULT_TOP_K: usize = 100;

/// One candidate per (pair, unmasked column), best first, at most `top_k`.
/// Ties keep ascending (pair, column) order.
pub fn assemble_triplets(
    pairs: &[HoiPair],
    fused: &[f64],
    mask: &[f64],
    table: &HoiTable,
    space: CategorySpace,
    top_k: usize,
) -> Vec<Triplet> {
    let c = space.columns(table);
    let mut out = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        for col in 0..c {
            if mask[i * c + col] == 0.0 {
                continue;
            }
            let Some(hoi) = space.hoi_of(table, p.object_class, col) else {
                continue;
            };
            out.push(Triplet {
                pair: i,
                human_box: p.human_box,
                object_box: p.object_box,
                object_class: p.object_class,
                verb: space.verb_of(table, col),
                hoi,
                score: fused[i * c + col],
            });
        }
    }
    // stable sort keeps the (pair, column) emission order among equal scores
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(top_k);
    out
}
