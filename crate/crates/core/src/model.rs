//! The full second-stage model: per-pair queries, interaction decoder, verb
//! decoder and cosine classifier.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::{
    assign_labels, enumerate_pairs, mask_row, roi_align, spatial_features, CategorySpace, ClipFixture,
    DetectionFixture, EmbeddingTable, GtInteraction, HoiPair, SPATIAL_DIM,
};
use crate::error::{Error, Result};
use crate::hico::HoiTable;
use crate::interaction::{lookup_object_text, InteractionDecoder, QueryComposer, QueryInputs, QueryToggles};
use crate::nn::{ParamId, ParamStore, Session};
use crate::scoring::{assemble_triplets, cosine_logits, fuse_scores, Triplet};
use crate::splits::SplitSpec;
use crate::tensor::{Tensor, Var};
use crate::verb::{improve_semantics, VerbDecoder, VerbToggles};

pub const MAX_VSI_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub if_layers: usize,
    pub vsi_layers: usize,
    pub query: QueryToggles,
    pub use_objtext: bool,
    pub verb: VerbToggles,
    pub mu: f64,
    pub temperature: f64,
    pub space: CategorySpace,
    pub train_verb_text: bool,
    pub score_threshold: f64,
    pub max_pairs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 8,
            ffn_hidden: 2048,
            if_layers: 2,
            vsi_layers: 2,
            query: QueryToggles::default(),
            use_objtext: true,
            verb: VerbToggles::default(),
            mu: 0.5,
            temperature: 1.0,
            space: CategorySpace::Verbs,
            train_verb_text: false,
            score_threshold: 0.2,
            max_pairs: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.ffn_hidden == 0 {
            return bad("ffn_hidden must be positive".to_string());
        }
        if self.vsi_layers > MAX_VSI_LAYERS {
            return bad(format!("vsi_layers {} outside 0..={MAX_VSI_LAYERS}", self.vsi_layers));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !self.mu.is_finite() {
            return bad("mu must be finite".to_string());
        }
        if self.max_pairs == 0 {
            return bad("max_pairs must be positive".to_string());
        }
        Ok(())
    }

    /// Whether the verb decoder contributes to `V`.
    pub fn vsi_active(&self) -> bool {
        self.vsi_layers > 0 && self.mu != 0.0
    }

    /// Whether per-image image-encoder outputs are consumed.
    pub fn needs_clip(&self) -> bool {
        self.query.use_global || (self.vsi_active() && (self.verb.use_global || self.verb.use_patches))
    }
}

/// Graph-ready inputs for one image with at least one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImage {
    pub pairs: Vec<HoiPair>,
    pub appearance: Tensor,
    pub spatial: Tensor,
    pub roi: Tensor,
    pub global: Tensor,
    pub backbone: Tensor,
    pub patches: Tensor,
    /// `N × C` validity mask from the HOI table.
    pub mask: Vec<f64>,
}

impl PreparedImage {
    pub fn object_classes(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.object_class).collect()
    }
}

/// Enumerates pairs and computes every per-pair input. `None` when no pair qualifies.
pub fn prepare_image(
    det: &DetectionFixture,
    clip: Option<&ClipFixture>,
    table: &HoiTable,
    config: &ModelConfig,
) -> Result<Option<PreparedImage>> {
    let d = config.dim;
    if det.dim != d {
        return Err(Error::Config(format!("detection features are {} wide, model is {d}", det.dim)));
    }
    let pairs = enumerate_pairs(det, config.score_threshold, config.max_pairs);
    if pairs.is_empty() {
        return Ok(None);
    }
    let n = pairs.len();
    let mut appearance = Vec::with_capacity(n * 2 * d);
    let mut spatial = Vec::with_capacity(n * SPATIAL_DIM);
    let mut roi = Vec::with_capacity(n * d);
    let mut mask = Vec::with_capacity(n * config.space.columns(table));
    for p in &pairs {
        appearance.extend_from_slice(det.appearance_row(p.human));
        appearance.extend_from_slice(det.appearance_row(p.target));
        spatial.extend_from_slice(&spatial_features(&p.human_box, &p.object_box, det.image_size));
        let union = p.human_box.union_box(&p.object_box);
        roi.extend(roi_align(&det.feature_map, det.grid, &union, det.image_size));
        mask.extend(mask_row(table, config.space, p.object_class));
    }
    let (global, patches) = match clip {
        Some(c) => {
            if c.global.len() != d || c.patches.shape()[1] != d {
                return Err(Error::Config(format!("image-encoder features must be {d} wide")));
            }
            (Tensor::matrix(1, d, c.global.clone())?, c.patches.clone())
        }
        None if config.needs_clip() => return Err(Error::MissingInput("image-encoder fixture")),
        None => (Tensor::full(&[1, d], 1.0)?, Tensor::zeros(&[1, d])?),
    };
    Ok(Some(PreparedImage {
        pairs,
        appearance: Tensor::matrix(n, 2 * d, appearance)?,
        spatial: Tensor::matrix(n, SPATIAL_DIM, spatial)?,
        roi: Tensor::matrix(n, d, roi)?,
        global,
        backbone: det.feature_map.clone(),
        patches,
        mask,
    }))
}

/// Training targets for a prepared image. Under a zero-shot split the unseen
/// columns are masked out and carry no positives.
pub fn training_targets(
    img: &PreparedImage,
    gt: &[GtInteraction],
    table: &HoiTable,
    space: CategorySpace,
    split: Option<&SplitSpec>,
) -> (Vec<f64>, Vec<f64>) {
    let (mut labels, mut mask) = assign_labels(&img.pairs, gt, table, space);
    if let Some(split) = split.filter(|s| s.kind.is_zero_shot()) {
        let c = space.columns(table);
        let unseen = split.unseen_flags();
        for (k, (l, m)) in labels.iter_mut().zip(mask.iter_mut()).enumerate() {
            let pair = &img.pairs[k / c];
            let hidden = match space.hoi_of(table, pair.object_class, k % c) {
                Some(h) => unseen[h],
                None => false,
            };
            if hidden {
                *l = 0.0;
                *m = 0.0;
            }
        }
    }
    (labels, mask)
}

pub const OBJECT_TEXT: &str = "object_text";
pub const VERB_TEXT: &str = "verb_text";
pub const VERB_WEIGHTS: &str = "verb_weights";

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub composer: QueryComposer,
    pub interaction: InteractionDecoder,
    pub verb_decoder: Option<VerbDecoder>,
    pub object_text: ParamId,
    pub verb_text: ParamId,
    pub verb_weights: ParamId,
}

impl Model {
    /// Builds the architecture with zero text tables; parameters are seeded.
    pub fn build(config: ModelConfig, num_objects: usize, num_columns: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut store = ParamStore::new(seed);
        let composer = QueryComposer::new(&mut store, "query", d, config.query)?;
        let interaction =
            InteractionDecoder::new(&mut store, "interaction", d, config.heads, config.ffn_hidden, config.if_layers)?;
        let verb_decoder = match config.vsi_layers {
            0 => None,
            l => Some(VerbDecoder::new(&mut store, "vsi", d, config.heads, config.ffn_hidden, l, config.verb)?),
        };
        let object_text = store.add(OBJECT_TEXT, Tensor::zeros(&[num_objects, d])?, false)?;
        let verb_text = store.add(VERB_TEXT, Tensor::zeros(&[num_columns, d])?, config.train_verb_text)?;
        let verb_weights = store.add(VERB_WEIGHTS, Tensor::zeros(&[num_columns, d])?, true)?;
        Ok(Self {
            config,
            store,
            composer,
            interaction,
            verb_decoder,
            object_text,
            verb_text,
            verb_weights,
        })
    }

    /// Fresh model whose `W` and `E^t` start from the verb prompt embeddings.
    pub fn new(
        config: ModelConfig,
        table: &HoiTable,
        object_text: &EmbeddingTable,
        verb_text: &EmbeddingTable,
        seed: u64,
    ) -> Result<Self> {
        let columns = config.space.columns(table);
        for (t, rows) in [(object_text, table.num_objects()), (verb_text, columns)] {
            if t.rows() != rows || t.dim() != config.dim {
                return Err(Error::Config(format!(
                    "embedding table `{}` is {}x{}, expected {rows}x{}",
                    t.name,
                    t.rows(),
                    t.dim(),
                    config.dim
                )));
            }
        }
        let mut model = Self::build(config, table.num_objects(), columns, seed)?;
        model.store.assign(OBJECT_TEXT, object_text.matrix.clone())?;
        model.store.assign(VERB_TEXT, verb_text.matrix.clone())?;
        model.store.assign(VERB_WEIGHTS, verb_text.matrix.clone())?;
        Ok(model)
    }

    /// Replaces every parameter from a name-indexed list; names must match exactly.
    pub fn load_params(&mut self, params: Vec<(String, Tensor)>) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                self.store.len()
            )));
        }
        for (name, t) in params {
            self.store.assign(&name, t)?;
        }
        Ok(())
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.store.ids().map(|id| (self.store.name(id), self.store.get(id)))
    }

    pub fn num_columns(&self) -> usize {
        self.store.get(self.verb_weights).shape()[0]
    }

    /// Improved verb semantics `V` (`C × d`) for one image.
    pub fn verb_semantics(&self, s: &mut Session, img: &PreparedImage) -> Result<Var> {
        let w = s.param(self.verb_weights)?;
        let Some(dec) = self.verb_decoder.as_ref().filter(|_| self.config.mu != 0.0) else {
            return Ok(w);
        };
        let e = s.param(self.verb_text)?;
        let g = s.constant(img.global.clone())?;
        let kb = s.constant(img.backbone.clone())?;
        let kc = s.constant(img.patches.clone())?;
        let u = dec.forward(s, e, g, kb, kc)?;
        improve_semantics(s, w, u, self.config.mu)
    }

    /// Interaction features `I` (`N × d`) for one image.
    pub fn interaction_features(&self, s: &mut Session, img: &PreparedImage) -> Result<Var> {
        let inputs = QueryInputs {
            appearance: s.constant(img.appearance.clone())?,
            spatial: s.constant(img.spatial.clone())?,
            global: match self.config.query.use_global {
                true => Some(s.constant(img.global.clone())?),
                false => None,
            },
            roi: match self.config.query.use_roi {
                true => Some(s.constant(img.roi.clone())?),
                false => None,
            },
        };
        let q = self.composer.forward(s, &inputs)?;
        let n = img.pairs.len();
        let ot = if self.config.use_objtext {
            lookup_object_text(self.store.get(self.object_text), &img.object_classes())?
        } else {
            Tensor::zeros(&[n, self.config.dim])?
        };
        let ot = s.constant(ot)?;
        let kb = s.constant(img.backbone.clone())?;
        self.interaction.forward(s, q, ot, kb)
    }

    /// Classification logits, `N × C`.
    pub fn logits(&self, s: &mut Session, img: &PreparedImage) -> Result<Var> {
        let i = self.interaction_features(s, img)?;
        let v = self.verb_semantics(s, img)?;
        cosine_logits(s, i, v, self.config.temperature)
    }

    /// `S_v` for every pair and column, row-major `N × C`.
    pub fn verb_scores(&self, img: &PreparedImage) -> Result<Vec<f64>> {
        let mut s = Session::new(&self.store, false);
        let logits = self.logits(&mut s, img)?;
        let p = s.sigmoid(logits)?;
        Ok(s.value(p).data().to_vec())
    }

    /// Fused, ranked triplets for one image.
    pub fn predict(&self, img: &PreparedImage, table: &HoiTable, lambda: f64, top_k: usize) -> Result<Vec<Triplet>> {
        let sv = self.verb_scores(img)?;
        let sc: Vec<f64> = img.pairs.iter().map(|p| p.score).collect();
        let fused = fuse_scores(&sc, &sv, lambda)?;
        Ok(assemble_triplets(&img.pairs, &fused, &img.mask, table, self.config.space, top_k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BBox;
    use alloc::vec;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            ffn_hidden: 16,
            score_threshold: 0.0,
            ..ModelConfig::default()
        }
    }

    fn setup(seed: u64) -> (HoiTable, EmbeddingTable, EmbeddingTable, DetectionFixture, ClipFixture) {
        let table = HoiTable::new(vec![(0, 0), (1, 0), (1, 1), (1, 2)], 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table_of = |name: &str, rows, rng: &mut ChaCha8Rng| EmbeddingTable {
            name: name.to_string(),
            prompts: (0..rows).map(|r| format!("p{r}")).collect(),
            matrix: rand_t(rows, 8, rng),
        };
        let objects = table_of("objects", 2, &mut rng);
        let verbs = table_of("verbs", 3, &mut rng);
        let det = DetectionFixture {
            image_size: (64.0, 48.0),
            boxes: vec![BBox::new(2., 3., 20., 40.), BBox::new(18., 10., 50., 30.), BBox::new(30., 5., 60., 45.)],
            labels: vec![0, 1, 0],
            scores: vec![0.9, 0.8, 0.7],
            appearance: rand_t(3, 8, &mut rng).into_data(),
            feature_map: rand_t(6, 8, &mut rng),
            grid: (2, 3),
            dim: 8,
        };
        let clip = ClipFixture {
            global: rand_t(1, 8, &mut rng).into_data(),
            patches: rand_t(4, 8, &mut rng),
        };
        (table, objects, verbs, det, clip)
    }

    #[test]
    fn forward_shapes_and_range() {
        let (table, objects, verbs, det, clip) = setup(1);
        let model = Model::new(small_config(), &table, &objects, &verbs, 3).unwrap();
        let img = prepare_image(&det, Some(&clip), &table, &model.config).unwrap().unwrap();
        assert_eq!(img.pairs.len(), 4);
        let sv = model.verb_scores(&img).unwrap();
        assert_eq!(sv.len(), 4 * 3);
        assert!(sv.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn mu_zero_means_v_is_w() {
        let (table, objects, verbs, det, clip) = setup(2);
        let config = ModelConfig { mu: 0.0, ..small_config() };
        let model = Model::new(config, &table, &objects, &verbs, 3).unwrap();
        let img = prepare_image(&det, Some(&clip), &table, &model.config).unwrap().unwrap();
        let mut s = Session::new(&model.store, false);
        let v = model.verb_semantics(&mut s, &img).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(s.value(v)), bits(&verbs.matrix));
    }

    #[test]
    fn missing_clip_reported() {
        let (table, objects, verbs, det, _) = setup(3);
        let model = Model::new(small_config(), &table, &objects, &verbs, 3).unwrap();
        assert_eq!(
            prepare_image(&det, None, &table, &model.config),
            Err(Error::MissingInput("image-encoder fixture"))
        );
        let config = ModelConfig {
            query: QueryToggles {
                use_global: false,
                use_roi: true,
            },
            vsi_layers: 0,
            ..small_config()
        };
        assert!(prepare_image(&det, None, &table, &config).unwrap().is_some());
    }

    #[test]
    fn no_humans_no_pairs() {
        let (table, _, _, mut det, clip) = setup(4);
        det.labels = vec![1, 1, 1];
        assert!(prepare_image(&det, Some(&clip), &table, &small_config()).unwrap().is_none());
    }

    #[test]
    fn table_shape_checked() {
        let (table, objects, verbs, _, _) = setup(5);
        assert!(Model::new(small_config(), &table, &verbs, &verbs, 0).is_err());
        let wide = ModelConfig {
            dim: 16,
            ..small_config()
        };
        assert!(Model::new(wide, &table, &objects, &verbs, 0).is_err());
        let deep = ModelConfig {
            vsi_layers: 4,
            ..small_config()
        };
        assert!(Model::new(deep, &table, &objects, &verbs, 0).is_err());
    }
}
