//! Verb semantic improvement: verb text embeddings cross-attend image features and
//! the result is added to a second learnable embedding.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{DualCrossAttention, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, Session};
use crate::tensor::Var;

/// Ablation switches for the verb decoder inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerbToggles {
    /// Modulate the verb embeddings by the global token; off uses a ones vector.
    pub use_global: bool,
    pub use_backbone: bool,
    pub use_patches: bool,
}

impl Default for VerbToggles {
    fn default() -> Self {
        Self {
            use_global: true,
            use_backbone: true,
            use_patches: true,
        }
    }
}

/// `D = [E ⊙ g, E]`, `C × 2d`. `g` is a `1 × d` row.
pub fn build_verb_queries(s: &mut Session, verb_text: Var, global: Var) -> Result<Var> {
    let d = s.shape(verb_text)[1];
    if s.value(global).numel() != d {
        return Err(Error::Config(format!(
            "global token has {} values, verb embeddings are {d} wide",
            s.value(global).numel()
        )));
    }
    let modulated = s.mul_row(verb_text, global)?;
    Ok(s.concat(&[modulated, verb_text], 1)?)
}

/// `V = W + μU`.
pub fn improve_semantics(s: &mut Session, w: Var, u: Var, mu: f64) -> Result<Var> {
    let scaled = s.scale(u, mu)?;
    Ok(s.add(w, scaled)?)
}

#[derive(Debug, Clone)]
pub struct VerbLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross: DualCrossAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Projects `D` to `d` and runs the post-norm stack, yielding `U`.
#[derive(Debug, Clone)]
pub struct VerbDecoder {
    pub input_proj: Linear,
    pub layers: Vec<VerbLayer>,
    pub toggles: VerbToggles,
}

impl VerbDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        layers: usize,
        toggles: VerbToggles,
    ) -> Result<Self> {
        let input_proj = Linear::new(store, &format!("{name}.input_proj"), 2 * dim, dim)?;
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                Ok(VerbLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), dim, heads)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), dim)?,
                    cross: DualCrossAttention::new(store, &format!("{p}.cross"), dim, heads)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), dim)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), dim, hidden, dim)?,
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input_proj,
            layers,
            toggles,
        })
    }

    /// `verb_text` is `C × d`; `global` is `1 × d`; memories are `T × d`.
    pub fn forward(&self, s: &mut Session, verb_text: Var, global: Var, backbone: Var, patches: Var) -> Result<Var> {
        let global = if self.toggles.use_global {
            global
        } else {
            let d = s.shape(verb_text)[1];
            s.constant(crate::tensor::Tensor::full(&[1, d], 1.0)?)?
        };
        let queries = build_verb_queries(s, verb_text, global)?;
        let mut x = self.input_proj.forward(s, queries)?;
        let mem_b = self.toggles.use_backbone.then_some(backbone);
        let mem_c = self.toggles.use_patches.then_some(patches);
        for layer in &self.layers {
            let sa = layer.self_attn.forward(s, x, x, x)?;
            let r = s.add(x, sa)?;
            x = layer.norm1.forward(s, r)?;

            let r = match layer.cross.forward(s, x, mem_b, mem_c)? {
                Some(ca) => s.add(x, ca)?,
                None => x,
            };
            x = layer.norm2.forward(s, r)?;

            let f = layer.ffn.forward(s, x)?;
            let r = s.add(x, f)?;
            x = layer.norm3.forward(s, r)?;
        }
        Ok(x)
    }
}
