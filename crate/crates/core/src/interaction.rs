//! Interaction features: fused per-pair queries refined by a decoder whose
//! queries and keys are guided by the pair's object-class text embedding.

use alloc::format;
use alloc::vec::Vec;

use crate::data::SPATIAL_DIM;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, FusionMlp, LayerNorm, Linear, MultiHeadAttention, ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Which optional ingredients enter the fused query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryToggles {
    pub use_global: bool,
    pub use_roi: bool,
}

impl Default for QueryToggles {
    fn default() -> Self {
        Self {
            use_global: true,
            use_roi: true,
        }
    }
}

/// Per-image query ingredients, already on the graph.
#[derive(Debug, Clone, Copy)]
pub struct QueryInputs {
    /// `N × 2d`, human and target appearance side by side.
    pub appearance: Var,
    /// `N × 36` raw spatial encoding.
    pub spatial: Var,
    /// `1 × d` global image token.
    pub global: Option<Var>,
    /// `N × d` union-box ROI features.
    pub roi: Option<Var>,
}

/// Separately normalizes each ingredient, concatenates them and fuses to `d`.
#[derive(Debug, Clone)]
pub struct QueryComposer {
    pub spatial_proj: Linear,
    pub ln_appearance: LayerNorm,
    pub ln_spatial: LayerNorm,
    pub ln_global: Option<LayerNorm>,
    pub ln_roi: Option<LayerNorm>,
    pub fusion: FusionMlp,
    pub dim: usize,
}

impl QueryComposer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, toggles: QueryToggles) -> Result<Self> {
        let spatial_proj = Linear::new(store, &format!("{name}.spatial_proj"), SPATIAL_DIM, dim)?;
        let ln_appearance = LayerNorm::new(store, &format!("{name}.ln_appearance"), 2 * dim)?;
        let ln_spatial = LayerNorm::new(store, &format!("{name}.ln_spatial"), dim)?;
        let ln_global = match toggles.use_global {
            true => Some(LayerNorm::new(store, &format!("{name}.ln_global"), dim)?),
            false => None,
        };
        let ln_roi = match toggles.use_roi {
            true => Some(LayerNorm::new(store, &format!("{name}.ln_roi"), dim)?),
            false => None,
        };
        let width = Self::input_width(dim, toggles);
        let fusion = FusionMlp::new(store, &format!("{name}.fusion"), width, dim, dim)?;
        Ok(Self {
            spatial_proj,
            ln_appearance,
            ln_spatial,
            ln_global,
            ln_roi,
            fusion,
            dim,
        })
    }

    /// Width of the concatenated ingredients: `2d + d` plus `d` per enabled extra.
    pub fn input_width(dim: usize, toggles: QueryToggles) -> usize {
        dim * (3 + usize::from(toggles.use_global) + usize::from(toggles.use_roi))
    }

    pub fn forward(&self, s: &mut Session, inputs: &QueryInputs) -> Result<Var> {
        let n = s.shape(inputs.appearance)[0];
        let mut parts: Vec<Var> = Vec::with_capacity(4);
        parts.push(self.ln_appearance.forward(s, inputs.appearance)?);
        let sp = self.spatial_proj.forward(s, inputs.spatial)?;
        parts.push(self.ln_spatial.forward(s, sp)?);
        if let Some(ln) = &self.ln_global {
            let g = inputs.global.ok_or(Error::MissingInput("global image token"))?;
            let g = s.repeat_rows(g, n)?;
            parts.push(ln.forward(s, g)?);
        }
        if let Some(ln) = &self.ln_roi {
            let r = inputs.roi.ok_or(Error::MissingInput("ROI features"))?;
            parts.push(ln.forward(s, r)?);
        }
        let x = s.concat(&parts, 1)?;
        self.fusion.forward(s, x)
    }
}

/// Rows of `object_text` for each pair's object class.
pub fn lookup_object_text(object_text: &Tensor, classes: &[usize]) -> Result<Tensor> {
    let rows = object_text.shape()[0];
    if let Some(&bad) = classes.iter().find(|&&c| c >= rows) {
        return Err(Error::OutOfRange {
            what: "object class",
            index: bad,
            len: rows,
        });
    }
    Ok(object_text.select_rows(classes)?)
}

#[derive(Debug, Clone)]
pub struct InteractionLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub guide_proj: Linear,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Post-norm decoder stack producing interaction features `I`.
#[derive(Debug, Clone)]
pub struct InteractionDecoder {
    pub layers: Vec<InteractionLayer>,
}

impl InteractionDecoder {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, layers: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                Ok(InteractionLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), dim, heads)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), dim)?,
                    guide_proj: Linear::new(store, &format!("{p}.guide_proj"), 2 * dim, dim)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), dim, heads)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), dim)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), dim, hidden, dim)?,
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `queries` and `object_text` are `N × d`, `memory` is the `T × d` backbone grid.
    pub fn forward(&self, s: &mut Session, queries: Var, object_text: Var, memory: Var) -> Result<Var> {
        let mut x = queries;
        for layer in &self.layers {
            let guided = s.add(x, object_text)?;
            let sa = layer.self_attn.forward(s, guided, guided, x)?;
            let r = s.add(x, sa)?;
            x = layer.norm1.forward(s, r)?;

            let cat = s.concat(&[x, object_text], 1)?;
            let c = layer.guide_proj.forward(s, cat)?;
            let ca = layer.cross_attn.forward(s, c, memory, memory)?;
            let r = s.add(c, ca)?;
            x = layer.norm2.forward(s, r)?;

            let f = layer.ffn.forward(s, x)?;
            let r = s.add(x, f)?;
            x = layer.norm3.forward(s, r)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck_params;
    use crate::tensor::FD_STEP;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    struct Inputs {
        app: Tensor,
        sp: Tensor,
        g: Tensor,
        roi: Tensor,
    }

    fn inputs(n: usize, d: usize, seed: u64) -> Inputs {
        Inputs {
            app: rand_input(n, 2 * d, seed),
            sp: rand_input(n, SPATIAL_DIM, seed + 1),
            g: rand_input(1, d, seed + 2),
            roi: rand_input(n, d, seed + 3),
        }
    }

    fn bind(s: &mut Session, i: &Inputs) -> QueryInputs {
        QueryInputs {
            appearance: s.constant(i.app.clone()).unwrap(),
            spatial: s.constant(i.sp.clone()).unwrap(),
            global: Some(s.constant(i.g.clone()).unwrap()),
            roi: Some(s.constant(i.roi.clone()).unwrap()),
        }
    }

    #[test]
    fn toggles_set_fusion_width() {
        let d = 8;
        for (g, r, w) in [(true, true, 5), (true, false, 4), (false, true, 4), (false, false, 3)] {
            let toggles = QueryToggles {
                use_global: g,
                use_roi: r,
            };
            let mut st = ParamStore::new(0);
            let comp = QueryComposer::new(&mut st, "q", d, toggles).unwrap();
            assert_eq!(comp.fusion.l1.d_in, w * d);
            let mut s = Session::new(&st, false);
            let mut qi = bind(&mut s, &inputs(2, d, 1));
            if !g {
                qi.global = None;
            }
            let q = comp.forward(&mut s, &qi).unwrap();
            assert_eq!(s.shape(q), &[2, d]);
        }
    }

    #[test]
    fn missing_global_is_an_error() {
        let mut st = ParamStore::new(0);
        let comp = QueryComposer::new(&mut st, "q", 8, QueryToggles::default()).unwrap();
        let mut s = Session::new(&st, false);
        let mut qi = bind(&mut s, &inputs(2, 8, 1));
        qi.global = None;
        assert_eq!(comp.forward(&mut s, &qi), Err(Error::MissingInput("global image token")));
    }

    #[test]
    fn identical_pairs_identical_queries() {
        let mut st = ParamStore::new(1);
        let comp = QueryComposer::new(&mut st, "q", 8, QueryToggles::default()).unwrap();
        let one = inputs(1, 8, 5);
        let dup = |t: &Tensor| {
            let mut d = t.data().to_vec();
            d.extend_from_slice(t.data());
            Tensor::matrix(2, t.shape()[1], d).unwrap()
        };
        let two = Inputs {
            app: dup(&one.app),
            sp: dup(&one.sp),
            g: one.g.clone(),
            roi: dup(&one.roi),
        };
        let mut s = Session::new(&st, false);
        let qi = bind(&mut s, &two);
        let q = comp.forward(&mut s, &qi).unwrap();
        assert_eq!(s.value(q).row(0), s.value(q).row(1));
    }

    #[test]
    fn object_text_lookup() {
        let table = rand_input(80, 4, 3);
        let got = lookup_object_text(&table, &[0, 7, 7]).unwrap();
        assert_eq!(got.row(0), table.row(0));
        assert_eq!(got.row(1), got.row(2));
        assert!(matches!(
            lookup_object_text(&table, &[80]),
            Err(Error::OutOfRange { index: 80, .. })
        ));
    }

    #[test]
    fn single_token_cross_attention() {
        let mut st = ParamStore::new(2);
        let dec = InteractionDecoder::new(&mut st, "if", 8, 2, 16, 1).unwrap();
        let mut s = Session::new(&st, false);
        let q = s.constant(rand_input(1, 8, 1)).unwrap();
        let o = s.constant(rand_input(1, 8, 2)).unwrap();
        let kb = s.constant(rand_input(1, 8, 3)).unwrap();
        let x = {
            let guided = s.add(q, o).unwrap();
            let sa = dec.layers[0].self_attn.forward(&mut s, guided, guided, q).unwrap();
            let r = s.add(q, sa).unwrap();
            dec.layers[0].norm1.forward(&mut s, r).unwrap()
        };
        let cat = s.concat(&[x, o], 1).unwrap();
        let c = dec.layers[0].guide_proj.forward(&mut s, cat).unwrap();
        let (_, w) = dec.layers[0].cross_attn.forward_with_weights(&mut s, c, kb, kb).unwrap();
        for h in w {
            assert_eq!(s.value(h).data(), &[1.0]);
        }
    }

    #[test]
    fn decoder_is_pair_equivariant() {
        let mut st = ParamStore::new(4);
        let dec = InteractionDecoder::new(&mut st, "if", 8, 2, 16, 2).unwrap();
        let q = rand_input(3, 8, 1);
        let o = rand_input(3, 8, 2);
        let kb = rand_input(4, 8, 3);
        let run = |q: &Tensor, o: &Tensor| {
            let mut s = Session::new(&st, false);
            let (q, o, kb) = (
                s.constant(q.clone()).unwrap(),
                s.constant(o.clone()).unwrap(),
                s.constant(kb.clone()).unwrap(),
            );
            let y = dec.forward(&mut s, q, o, kb).unwrap();
            s.value(y).clone()
        };
        let base = run(&q, &o);
        let perm = [1, 2, 0];
        let permuted = run(&q.select_rows(&perm).unwrap(), &o.select_rows(&perm).unwrap());
        let expect = base.select_rows(&perm).unwrap();
        for (a, b) in permuted.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composer_and_decoder_grads() {
        let d = 8;
        let mut st = ParamStore::new(6);
        let comp = QueryComposer::new(&mut st, "q", d, QueryToggles::default()).unwrap();
        let dec = InteractionDecoder::new(&mut st, "if", d, 2, 16, 2).unwrap();
        let inp = inputs(3, d, 7);
        let o = rand_input(3, d, 8);
        let kb = rand_input(4, d, 9);
        let w = rand_input(3, d, 10);
        let report = gradcheck_params(
            &st,
            |s| {
                let qi = QueryInputs {
                    appearance: s.constant(inp.app.clone())?,
                    spatial: s.constant(inp.sp.clone())?,
                    global: Some(s.constant(inp.g.clone())?),
                    roi: Some(s.constant(inp.roi.clone())?),
                };
                let q = comp.forward(s, &qi)?;
                let o = s.constant(o.clone())?;
                let kb = s.constant(kb.clone())?;
                let y = dec.forward(s, q, o, kb)?;
                let w = s.constant(w.clone())?;
                let y = s.hadamard(y, w)?;
                Ok(s.sum(y)?)
            },
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
