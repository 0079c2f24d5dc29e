//! Seeded toy problems and finite-difference sweeps over every layer and the
//! full model graph.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BBox, CategorySpace, ClipFixture, DetectionFixture, EmbeddingTable, GtInteraction};
use crate::error::Result;
use crate::hico::HoiTable;
use crate::interaction::{InteractionDecoder, QueryComposer, QueryInputs, QueryToggles};
use crate::model::{prepare_image, training_targets, Model, ModelConfig};
use crate::nn::{
    gradcheck_params, DualCrossAttention, FeedForward, GradCheckReport, LayerNorm, Linear, MultiHeadAttention,
    ParamStore, Session,
};
use crate::scoring::{focal_loss_sum, FocalConfig};
use crate::tensor::{Tensor, FD_STEP};
use crate::verb::{VerbDecoder, VerbToggles};

/// Tolerance on the maximum relative error of every sweep.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("non-empty shape")
}

/// One image with a person, two objects (two pairs) and one annotated interaction,
/// over 2 objects and 3 verbs.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub table: HoiTable,
    pub object_text: EmbeddingTable,
    pub verb_text: EmbeddingTable,
    pub detection: DetectionFixture,
    pub clip: ClipFixture,
    pub gt: Vec<GtInteraction>,
}

impl ToyProblem {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = HoiTable::new(vec![(0, 0), (1, 0), (1, 1), (1, 2)], 2, 3).expect("valid toy table");
        let embed = |name: &str, rows: usize, rng: &mut ChaCha8Rng| EmbeddingTable {
            name: name.to_string(),
            prompts: (0..rows).map(|r| format!("{name} {r}")).collect(),
            matrix: random(rows, dim, rng),
        };
        let object_text = embed("object", 2, &mut rng);
        let verb_text = embed("verb", 3, &mut rng);
        let boxes = vec![
            BBox::new(4.0, 2.0, 30.0, 60.0),
            BBox::new(22.0, 30.0, 58.0, 62.0),
            BBox::new(40.0, 4.0, 76.0, 40.0),
        ];
        let detection = DetectionFixture {
            image_size: (80.0, 64.0),
            boxes: boxes.clone(),
            labels: vec![0, 1, 1],
            scores: vec![0.95, 0.85, 0.6],
            appearance: random(3, dim, &mut rng).into_data(),
            feature_map: random(4, dim, &mut rng),
            grid: (2, 2),
            dim,
        };
        let clip = ClipFixture {
            global: random(1, dim, &mut rng).into_data(),
            patches: random(4, dim, &mut rng),
        };
        let gt = vec![GtInteraction {
            human: boxes[0],
            object: boxes[1],
            object_class: 1,
            verb: 1,
        }];
        Self {
            table,
            object_text,
            verb_text,
            detection,
            clip,
            gt,
        }
    }
}

/// Config for gradient sweeps: two heads, a narrow FFN, both decoders one layer deep.
pub fn sweep_config(dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        heads: 2,
        ffn_hidden: dim,
        if_layers: 1,
        vsi_layers: 1,
        score_threshold: 0.0,
        train_verb_text: true,
        ..ModelConfig::default()
    }
}

/// Gradient check over every trainable parameter of the full model plus focal loss.
pub fn full_graph_gradcheck(config: ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let toy = ToyProblem::new(config.dim, seed);
    let model = Model::new(config, &toy.table, &toy.object_text, &toy.verb_text, seed)?;
    let img = prepare_image(&toy.detection, Some(&toy.clip), &toy.table, &model.config)?
        .expect("toy image has pairs");
    let (labels, mask) = training_targets(&img, &toy.gt, &toy.table, CategorySpace::Verbs, None);
    let cfg = FocalConfig::default();
    gradcheck_params(
        &model.store,
        |s| {
            let logits = model.logits(s, &img)?;
            focal_loss_sum(s, logits, &labels, &mask, cfg)
        },
        FD_STEP,
    )
}

/// Weighted sum turning a matrix output into a scalar with non-uniform gradients.
fn probe(s: &mut Session, y: crate::tensor::Var, w: &Tensor) -> Result<crate::tensor::Var> {
    let w = s.constant(w.clone())?;
    let p = s.hadamard(y, w)?;
    Ok(s.sum(p)?)
}

/// Per-layer gradient checks at width `dim`, each on seeded random inputs.
pub fn layer_gradchecks(dim: usize, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = 2;
    let n = 3;
    let t = 4;
    let x = random(n, dim, &mut rng);
    let mem = random(t, dim, &mut rng);
    let mem2 = random(t, dim, &mut rng);
    let w = random(n, dim, &mut rng);
    let mut out = Vec::new();

    let mut store = ParamStore::new(seed);
    let lin = Linear::new(&mut store, "linear", dim, dim)?;
    out.push((
        "linear".to_string(),
        gradcheck_params(
            &store,
            |s| {
                let xv = s.constant(x.clone())?;
                let y = lin.forward(s, xv)?;
                probe(s, y, &w)
            },
            FD_STEP,
        )?,
    ));

    let mut store = ParamStore::new(seed);
    let ln = LayerNorm::new(&mut store, "layer_norm", dim)?;
    out.push((
        "layer_norm".to_string(),
        gradcheck_params(
            &store,
            |s| {
                let xv = s.constant(x.clone())?;
                let y = ln.forward(s, xv)?;
                probe(s, y, &w)
            },
            FD_STEP,
        )?,
    ));

    let mut store = ParamStore::new(seed);
    let mha = MultiHeadAttention::new(&mut store, "attention", dim, heads)?;
    out.push((
        "multi_head_attention".to_string(),
        gradcheck_params(
            &store,
            |s| {
                let q = s.constant(x.clone())?;
                let k = s.constant(mem.clone())?;
                let y = mha.forward(s, q, k, k)?;
                probe(s, y, &w)
            },
            FD_STEP,
        )?,
    ));

    let mut store = ParamStore::new(seed);
    let dual = DualCrossAttention::new(&mut store, "dual", dim, heads)?;
    out.push((
        "dual_cross_attention".to_string(),
        gradcheck_params(
            &store,
            |s| {
                let q = s.constant(x.clone())?;
                let kb = s.constant(mem.clone())?;
                let kc = s.constant(mem2.clone())?;
                let y = dual.forward(s, q, Some(kb), Some(kc))?.expect("two memories");
                probe(s, y, &w)
            },
            FD_STEP,
        )?,
    ));

    let mut store = ParamStore::new(seed);
    let ffn = FeedForward::new(&mut store, "ffn", dim, 2 * dim, dim)?;
    out.push((
        "feed_forward".to_string(),
        gradcheck_params(
            &store,
            |s| {
                let xv = s.constant(x.clone())?;
                let y = ffn.forward(s, xv)?;
                probe(s, y, &w)
            },
            FD_STEP,
        )?,
    ));

    let appearance = random(n, 2 * dim, &mut rng);
    let spatial = random(n, crate::data::SPATIAL_DIM, &mut rng);
    let global = random(1, dim, &mut rng);
    let roi = random(n, dim, &mut rng);
    let mut store = ParamStore::new(seed);
    let composer = QueryComposer::new(&mut store, "query", dim, QueryToggles::default())?;
    out.push((
        "query_composer".to_string(),
        gradcheck_params(
            &store,
            |s| {
                let inputs = QueryInputs {
                    appearance: s.constant(appearance.clone())?,
                    spatial: s.constant(spatial.clone())?,
                    global: Some(s.constant(global.clone())?),
                    roi: Some(s.constant(roi.clone())?),
                };
                let y = composer.forward(s, &inputs)?;
                probe(s, y, &w)
            },
            FD_STEP,
        )?,
    ));

    let ot = random(n, dim, &mut rng);
    let mut store = ParamStore::new(seed);
    let dec = InteractionDecoder::new(&mut store, "interaction", dim, heads, dim, 1)?;
    out.push((
        "interaction_decoder".to_string(),
        gradcheck_params(
            &store,
            |s| {
                let q = s.constant(x.clone())?;
                let o = s.constant(ot.clone())?;
                let m = s.constant(mem.clone())?;
                let y = dec.forward(s, q, o, m)?;
                probe(s, y, &w)
            },
            FD_STEP,
        )?,
    ));

    let verbs = random(n, dim, &mut rng);
    let mut store = ParamStore::new(seed);
    let vsi = VerbDecoder::new(&mut store, "vsi", dim, heads, dim, 1, VerbToggles::default())?;
    out.push((
        "verb_decoder".to_string(),
        gradcheck_params(
            &store,
            |s| {
                let e = s.constant(verbs.clone())?;
                let g = s.constant(global.clone())?;
                let kb = s.constant(mem.clone())?;
                let kc = s.constant(mem2.clone())?;
                let y = vsi.forward(s, e, g, kb, kc)?;
                probe(s, y, &w)
            },
            FD_STEP,
        )?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_problem_has_two_pairs_one_positive() {
        let toy = ToyProblem::new(8, 0);
        let config = sweep_config(8);
        let img = prepare_image(&toy.detection, Some(&toy.clip), &toy.table, &config).unwrap().unwrap();
        assert_eq!(img.pairs.len(), 2);
        let (labels, _) = training_targets(&img, &toy.gt, &toy.table, CategorySpace::Verbs, None);
        assert_eq!(labels, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layers_pass_at_small_width() {
        for (name, r) in layer_gradchecks(8, 1).unwrap() {
            assert!(r.max_rel_err < GRAD_TOLERANCE, "{name}: {r:?}");
        }
    }

    #[test]
    fn full_graph_passes_at_small_width() {
        let r = full_graph_gradcheck(sweep_config(8), 2).unwrap();
        assert!(r.max_rel_err < GRAD_TOLERANCE, "{r:?}");
    }
}
