//! Parameters and the transformer building blocks every stage composes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Mask, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Parameter families, used for grad-check coverage and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Instruction,
    Film,
    SemanticEncoder,
    Projection,
    SingleFusion,
    GeometricEncoder,
    Spatial3d,
    AggTokens,
    FusionBlocks,
    ScAttn,
    QueryTokens,
    DynDecoder,
    DepthDecoders,
    ActionHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 14] = [
        ParamGroup::Instruction,
        ParamGroup::Film,
        ParamGroup::SemanticEncoder,
        ParamGroup::Projection,
        ParamGroup::SingleFusion,
        ParamGroup::GeometricEncoder,
        ParamGroup::Spatial3d,
        ParamGroup::AggTokens,
        ParamGroup::FusionBlocks,
        ParamGroup::ScAttn,
        ParamGroup::QueryTokens,
        ParamGroup::DynDecoder,
        ParamGroup::DepthDecoders,
        ParamGroup::ActionHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Instruction => "instruction",
            ParamGroup::Film => "film",
            ParamGroup::SemanticEncoder => "semantic-encoder",
            ParamGroup::Projection => "projection",
            ParamGroup::SingleFusion => "single-fusion",
            ParamGroup::GeometricEncoder => "geometric-encoder",
            ParamGroup::Spatial3d => "spatial3d",
            ParamGroup::AggTokens => "agg-tokens",
            ParamGroup::FusionBlocks => "fusion-blocks",
            ParamGroup::ScAttn => "sc-attn",
            ParamGroup::QueryTokens => "query-tokens",
            ParamGroup::DynDecoder => "dyn-decoder",
            ParamGroup::DepthDecoders => "depth-decoders",
            ParamGroup::ActionHead => "action-head",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }
}

/// Binds parameters onto a fresh tape for one forward pass.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Tape handle for a parameter; frozen parameters enter as constants.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.param(id);
        let v = self.tape.leaf(param.value.clone(), param.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Per-parameter gradients; parameters never bound or never reached are zero.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .iter()
            .map(|(id, p)| match self.bound[id.0] {
                Some(v) => grads.wrt(v),
                None => {
                    let (r, c) = p.value.dims2();
                    Tensor::zeros(r, c)
                }
            })
            .collect()
    }
}

/// Parameter factory with a shared RNG and naming prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub group: ParamGroup,
    pub trainable: bool,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, group: ParamGroup) -> Self {
        Init {
            store,
            rng,
            group,
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn group(&mut self, group: ParamGroup) -> &mut Self {
        self.group = group;
        self
    }

    pub fn randn(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let t = Tensor::randn(rows, cols, std, self.rng);
        self.store.add(name, self.group, t, self.trainable)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, self.group, Tensor::zeros(rows, cols), self.trainable)
    }

    /// A fixed table: stored with the model but never trained.
    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(name, self.group, value, false)
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, self.group, Tensor::filled(rows, cols, 1.0), self.trainable)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear {
        self.linear_std(name, d_in, d_out, bias, 1.0 / (d_in as f64).sqrt())
    }

    pub fn linear_std(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool, std: f64) -> Linear {
        let w = self.randn(&format!("{name}.w"), d_in, d_out, std);
        let b = bias.then(|| self.zeros(&format!("{name}.b"), 1, d_out));
        Linear { w, b, d_in, d_out }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.ones(&format!("{name}.g"), 1, d),
            beta: self.zeros(&format!("{name}.b"), 1, d),
        }
    }

    pub fn attention(&mut self, name: &str, d_q: usize, d_kv: usize, d_model: usize, heads: usize) -> Attention {
        assert!(heads > 0 && d_model % heads == 0, "d_model {d_model} not divisible by {heads} heads");
        Attention {
            q: self.linear(&format!("{name}.q"), d_q, d_model, true),
            // a key bias shifts each score row uniformly and cancels in softmax
            k: self.linear(&format!("{name}.k"), d_kv, d_model, false),
            v: self.linear(&format!("{name}.v"), d_kv, d_model, true),
            o: self.linear(&format!("{name}.o"), d_model, d_q, true),
            heads,
        }
    }

    pub fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden, true),
            down: self.linear(&format!("{name}.down"), hidden, d, true),
        }
    }

    pub fn block(&mut self, name: &str, d: usize, heads: usize, hidden: usize) -> Block {
        Block {
            ln1: self.norm(&format!("{name}.ln1"), d),
            attn: self.attention(&format!("{name}.attn"), d, d, d, heads),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, hidden),
        }
    }

    pub fn cross_block(&mut self, name: &str, d: usize, d_mem: usize, heads: usize, hidden: usize) -> CrossBlock {
        CrossBlock {
            ln_q: self.norm(&format!("{name}.lnq"), d),
            ln_mem: self.norm(&format!("{name}.lnm"), d_mem),
            attn: self.attention(&format!("{name}.attn"), d, d_mem, d, heads),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, hidden),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Layer norm with learned per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = ctx.tape.layer_norm(x, LAYER_NORM_EPS);
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        let y = ctx.tape.mul_row(n, g)?;
        ctx.tape.add_row(y, b)
    }
}

/// Multi-head scaled dot-product attention with optional boolean mask.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn forward(&self, ctx: &mut Ctx, queries: Var, keys: Var, mask: Option<&Mask>) -> Result<Var> {
        let q = self.q.forward(ctx, queries)?;
        let k = self.k.forward(ctx, keys)?;
        let v = self.v.forward(ctx, keys)?;
        let mixed = attend(&mut ctx.tape, q, k, v, self.heads, mask)?;
        self.o.forward(ctx, mixed)
    }
}

/// Head-split attention over already-projected q/k/v.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Result<Var> {
    let (nq, d) = tape.dims(q);
    let nk = tape.dims(k).0;
    if let Some(m) = mask {
        if m.rows() != nq || m.cols() != nk {
            return Err(Error::shape("attention mask", &[nq, nk], &[m.rows(), m.cols()]));
        }
    }
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            full = Mask::full(nq, nk);
            &full
        }
    };
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let p = tape.masked_softmax(scores, mask)?;
        outs.push(tape.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.up.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.down.forward(ctx, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln x)` then `+ ffn(ln x)`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h, mask)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, h)?;
        ctx.tape.add(x, f)
    }
}

/// Pre-norm cross-attention block reading from a memory sequence.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_q: Norm,
    pub ln_mem: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub ffn: FeedForward,
}

impl CrossBlock {
    pub fn forward(&self, ctx: &mut Ctx, x: Var, memory: Var) -> Result<Var> {
        let h = self.ln_q.forward(ctx, x)?;
        let m = self.ln_mem.forward(ctx, memory)?;
        let a = self.attn.forward(ctx, h, m, None)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, h)?;
        ctx.tape.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_params_enter_as_constants() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Init::new(&mut store, &mut rng, ParamGroup::Spatial3d).frozen().linear("f", 3, 2, true);
        let mut ctx = Ctx::new(&store);
        let x = ctx.tape.leaf(Tensor::filled(2, 3, 0.5), true);
        let y = lin.forward(&mut ctx, x).unwrap();
        let s = ctx.tape.sum(y);
        let g = ctx.tape.backward(s).unwrap();
        for t in ctx.param_grads(&g) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(g.wrt(x).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn block_with_zero_value_and_ffn_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Init::new(&mut store, &mut rng, ParamGroup::FusionBlocks).block("b", 8, 2, 16);
        store.set(block.attn.v.w, Tensor::zeros(8, 8)).unwrap();
        store.set(block.ffn.down.w, Tensor::zeros(16, 8)).unwrap();
        let x = Tensor::randn(5, 8, 1.0, &mut rng);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.tape.constant(x.clone());
        let y = block.forward(&mut ctx, xv, None).unwrap();
        assert_eq!(ctx.tape.value(y), &x);
    }
}
