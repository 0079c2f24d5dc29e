//! Parameter storage and the layers shared by both decoders.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{relative_error, Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in creation order, plus the RNG that initializes them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        Ok(ParamId(self.names.len() - 1))
    }

    /// Uniform in `[-bound, bound)`, drawn from the store RNG.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data)?, true)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, value)?, true)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrites a parameter by name, checking the shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }
}

/// A graph bound to a parameter store. Parameters become leaves on first use.
pub struct Session<'p> {
    graph: Graph,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'p> Session<'p> {
    /// `train = false` binds every parameter as a constant.
    pub fn new(store: &'p ParamStore, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            train,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let t = self.store.get(id).clone();
        let v = if self.train && self.store.is_trainable(id) {
            self.graph.leaf(t.requiring_grad())?
        } else {
            self.graph.constant(t)?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Gradients per parameter after `backward`; `None` for parameters never bound
    /// or not trainable.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v).map(<[f64]>::to_vec)))
            .collect()
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

impl Deref for Session<'_> {
    type Target = Graph;
    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

/// `y = x W + b` with `W: d_in × d_out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / math::sqrt(d_in as f64);
        let weight = store.uniform(&format!("{name}.weight"), &[d_in, d_out], bound)?;
        let bias = Some(store.full(&format!("{name}.bias"), &[d_out], 0.0)?);
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// Weight only. Used for key projections, where a bias shifts every logit of a
    /// softmax row equally and so never changes the output.
    pub fn new_no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / math::sqrt(d_in as f64);
        let weight = store.uniform(&format!("{name}.weight"), &[d_in, d_out], bound)?;
        Ok(Self {
            weight,
            bias: None,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let y = s.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b)?;
                Ok(s.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.full(&format!("{name}.gain"), &[d], 1.0)?,
            bias: store.full(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gain)?;
        let b = s.param(self.bias)?;
        Ok(s.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }
}

/// Scaled dot-product attention of already-projected `q`, `k`, `v` split into heads.
/// Returns the concatenated head outputs and the per-head weight matrices.
fn attend(s: &mut Session, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let d = s.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                s.narrow(q, 1, h * dh, dh)?,
                s.narrow(k, 1, h * dh, dh)?,
                s.narrow(v, 1, h * dh, dh)?,
            )
        };
        let logits = s.matmul_nt(qh, kh)?;
        let logits = s.scale(logits, scale)?;
        let a = s.softmax(logits, 1)?;
        outs.push(s.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { s.concat(&outs, 1)? };
    Ok((out, weights))
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    Ok(())
}

/// Multi-head attention with query/key/value/output projections and no positional terms.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d)?,
            k: Linear::new_no_bias(store, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, &format!("{name}.v"), d, d)?,
            o: Linear::new(store, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    pub fn forward(&self, s: &mut Session, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(s, q, k, v)?.0)
    }

    /// Also returns one `Nq × Nk` attention matrix per head.
    pub fn forward_with_weights(&self, s: &mut Session, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
        let qp = self.q.forward(s, q)?;
        let kp = self.k.forward(s, k)?;
        let vp = self.v.forward(s, v)?;
        let (out, weights) = attend(s, qp, kp, vp, self.heads)?;
        Ok((self.o.forward(s, out)?, weights))
    }
}

/// Two cross-attentions into separate memories that share one query projection and
/// sum their outputs. Either memory may be absent.
#[derive(Debug, Clone, Copy)]
pub struct DualCrossAttention {
    pub q: Linear,
    pub k_b: Linear,
    pub v_b: Linear,
    pub o_b: Linear,
    pub k_c: Linear,
    pub v_c: Linear,
    pub o_c: Linear,
    pub heads: usize,
}

impl DualCrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        check_heads(d, heads)?;
        let mut lin = |suffix: &str, bias: bool| {
            let name = format!("{name}.{suffix}");
            match bias {
                true => Linear::new(store, &name, d, d),
                false => Linear::new_no_bias(store, &name, d, d),
            }
        };
        Ok(Self {
            q: lin("q", true)?,
            k_b: lin("k_b", false)?,
            v_b: lin("v_b", true)?,
            o_b: lin("o_b", true)?,
            k_c: lin("k_c", false)?,
            v_c: lin("v_c", true)?,
            o_c: lin("o_c", true)?,
            heads,
        })
    }

    /// Sum of the enabled branches, or `None` when both memories are absent.
    pub fn forward(&self, s: &mut Session, x: Var, mem_b: Option<Var>, mem_c: Option<Var>) -> Result<Option<Var>> {
        if mem_b.is_none() && mem_c.is_none() {
            return Ok(None);
        }
        let qp = self.q.forward(s, x)?;
        let mut total = None;
        for (mem, k, v, o) in [
            (mem_b, &self.k_b, &self.v_b, &self.o_b),
            (mem_c, &self.k_c, &self.v_c, &self.o_c),
        ] {
            let Some(mem) = mem else { continue };
            let kp = k.forward(s, mem)?;
            let vp = v.forward(s, mem)?;
            let (out, _) = attend(s, qp, kp, vp, self.heads)?;
            let out = o.forward(s, out)?;
            total = Some(match total {
                None => out,
                Some(t) => s.add(t, out)?,
            });
        }
        Ok(total)
    }
}

/// Two linear layers with a rectifier between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden)?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = s.relu(h)?;
        self.l2.forward(s, h)
    }
}

/// Position-wise feed-forward block, `d → hidden → d`.
pub type FeedForward = Mlp2;

/// Fuses concatenated query ingredients down to the model width.
pub type FusionMlp = Mlp2;

/// Outcome of comparing parameter gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Checks d f / d θ for every trainable parameter element against central differences.
pub fn gradcheck_params<F>(store: &ParamStore, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::new(store, true);
    let y = f(&mut s)?;
    s.backward(y)?;
    let analytic = s.param_grads();
    drop(s);

    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::new(st, false);
        let y = f(&mut s)?;
        Ok(s.value(y).item())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let grads = analytic[id.0].clone().unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let err = relative_error(grads[k], (fp - fm) / (2.0 * h));
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{}[{k}]", store.name(id));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FD_STEP;

    fn rand_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let build = |seed| {
            let mut st = ParamStore::new(seed);
            Linear::new(&mut st, "l", 512, 8).unwrap();
            st
        };
        let (a, b, c) = (build(0), build(0), build(1));
        let w = |st: &ParamStore| st.get(st.id("l.weight").unwrap()).data().to_vec();
        assert_eq!(
            w(&a).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            w(&b).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(w(&a), w(&c));
        let bound = 1.0 / math::sqrt(512.0);
        assert!(w(&a).iter().all(|v| v.abs() <= bound));
        assert!(a.get(a.id("l.bias").unwrap()).data().iter().all(|&v| v == 0.0));
        assert!((bound - 0.0442).abs() < 1e-4);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut st = ParamStore::new(0);
        Linear::new(&mut st, "x", 2, 2).unwrap();
        assert!(matches!(Linear::new(&mut st, "x", 2, 2), Err(Error::DuplicateParam(_))));
    }

    #[test]
    fn single_key_weights_are_one() {
        let mut st = ParamStore::new(3);
        let mha = MultiHeadAttention::new(&mut st, "a", 16, 8).unwrap();
        let mut s = Session::new(&st, false);
        let q = s.constant(rand_input(5, 16, 1)).unwrap();
        let kv = s.constant(rand_input(1, 16, 2)).unwrap();
        let (_, weights) = mha.forward_with_weights(&mut s, q, kv, kv).unwrap();
        assert_eq!(weights.len(), 8);
        for w in weights {
            assert!(s.value(w).data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn duplicated_keys_match_single_key() {
        let mut st = ParamStore::new(4);
        let mha = MultiHeadAttention::new(&mut st, "a", 16, 4).unwrap();
        let one = rand_input(1, 16, 5);
        let mut three = one.data().to_vec();
        three.extend_from_slice(one.data());
        three.extend_from_slice(one.data());
        let q_t = rand_input(3, 16, 6);
        let run = |kv: Tensor| {
            let mut s = Session::new(&st, false);
            let q = s.constant(q_t.clone()).unwrap();
            let kv = s.constant(kv).unwrap();
            let y = mha.forward(&mut s, q, kv, kv).unwrap();
            s.value(y).data().to_vec()
        };
        let a = run(one);
        let b = run(Tensor::matrix(3, 16, three).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_permutation_properties() {
        let mut st = ParamStore::new(7);
        let mha = MultiHeadAttention::new(&mut st, "a", 8, 2).unwrap();
        let q = rand_input(3, 8, 8);
        let kv = rand_input(4, 8, 9);
        let run = |q: &Tensor, kv: &Tensor| {
            let mut s = Session::new(&st, false);
            let q = s.constant(q.clone()).unwrap();
            let kv = s.constant(kv.clone()).unwrap();
            let y = mha.forward(&mut s, q, kv, kv).unwrap();
            s.value(y).clone()
        };
        let base = run(&q, &kv);
        let perm = [2, 0, 1];
        let pq = run(&q.select_rows(&perm).unwrap(), &kv);
        assert_eq!(pq, base.select_rows(&perm).unwrap());
        let pkv = run(&q, &kv.select_rows(&[3, 1, 0, 2]).unwrap());
        for (x, y) in pkv.data().iter().zip(base.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_projection_grads() {
        let mut st = ParamStore::new(10);
        let mha = MultiHeadAttention::new(&mut st, "a", 16, 8).unwrap();
        let (q, k, v) = (rand_input(3, 16, 11), rand_input(3, 16, 12), rand_input(3, 16, 13));
        let w = rand_input(3, 16, 14);
        let report = gradcheck_params(
            &st,
            |s| {
                let q = s.constant(q.clone())?;
                let k = s.constant(k.clone())?;
                let v = s.constant(v.clone())?;
                let y = mha.forward(s, q, k, v)?;
                let w = s.constant(w.clone())?;
                let y = s.hadamard(y, w)?;
                Ok(s.sum(y)?)
            },
            FD_STEP,
        )
        .unwrap();
        assert_eq!(report.checked, st.num_scalars());
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn dual_cross_attention_branches() {
        let mut st = ParamStore::new(15);
        let dual = DualCrossAttention::new(&mut st, "x", 8, 2).unwrap();
        let x = rand_input(3, 8, 16);
        let tok = rand_input(1, 8, 17);
        let mut s = Session::new(&st, false);
        let xv = s.constant(x).unwrap();
        let t = s.constant(tok).unwrap();
        assert!(dual.forward(&mut s, xv, None, None).unwrap().is_none());
        let both = dual.forward(&mut s, xv, Some(t), Some(t)).unwrap().unwrap();
        // a single token is attended with weight one, so each branch is o(v(t)) per row
        let vb = dual.v_b.forward(&mut s, t).unwrap();
        let ob = dual.o_b.forward(&mut s, vb).unwrap();
        let vc = dual.v_c.forward(&mut s, t).unwrap();
        let oc = dual.o_c.forward(&mut s, vc).unwrap();
        let sum = s.add(ob, oc).unwrap();
        let expect = s.value(sum).data().to_vec();
        for row in s.value(both).data().chunks(8) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut st = ParamStore::new(0);
        let lin = Linear::new(&mut st, "l", 2, 2).unwrap();
        st.set_trainable(lin.weight, false);
        let mut s = Session::new(&st, true);
        let x = s.constant(rand_input(1, 2, 1)).unwrap();
        let y = lin.forward(&mut s, x).unwrap();
        let y = s.sum(y).unwrap();
        s.backward(y).unwrap();
        let g = s.param_grads();
        assert!(g[lin.weight.index()].is_none());
        assert_eq!(g[lin.bias.unwrap().index()].as_deref(), Some(&[1.0, 1.0][..]));
    }
}
