//! Spatiotemporal consistency attention over context and learned query
//! tokens, the training-only dynamic/depth decoders, the action head and the
//! three loss terms.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AttentionMode, WorldConfig};
use crate::encoders::{Role, TokenSet, ViewId};
use crate::error::{Error, Result};
use crate::nn::{Block, CrossBlock, Ctx, Init, Linear, Norm, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Mask, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Obj(ViewId),
    Agg,
    Instruction,
    Dyn(ViewId),
    Dep,
    Action,
}

impl Segment {
    /// Sequence order.
    pub const ORDER: [Segment; 10] = [
        Segment::Obj(ViewId::M),
        Segment::Obj(ViewId::L),
        Segment::Obj(ViewId::R),
        Segment::Agg,
        Segment::Instruction,
        Segment::Dyn(ViewId::M),
        Segment::Dyn(ViewId::L),
        Segment::Dyn(ViewId::R),
        Segment::Dep,
        Segment::Action,
    ];

    pub fn position(self) -> usize {
        Self::ORDER.iter().position(|&s| s == self).expect("every segment is ordered")
    }

    pub fn is_context(self) -> bool {
        matches!(self, Segment::Obj(_) | Segment::Agg | Segment::Instruction)
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Obj(v) => write!(f, "obj({v})"),
            Segment::Agg => f.write_str("agg"),
            Segment::Instruction => f.write_str("instruction"),
            Segment::Dyn(v) => write!(f, "dyn({v})"),
            Segment::Dep => f.write_str("dep"),
            Segment::Action => f.write_str("action"),
        }
    }
}

/// Whether a token of segment `q` may attend to a token of segment `k`.
/// Instruction tokens read only each other, so that nothing reaches the
/// query segments through them.
pub fn visible(q: Segment, k: Segment) -> bool {
    use Segment::*;
    match q {
        Obj(i) => k == Obj(i) || k == Instruction,
        Agg => k == Agg || k == Instruction,
        Instruction => k == Instruction,
        Dyn(i) => k == Obj(i) || k == Instruction || k == Dyn(i),
        Dep => k == Agg || k == Instruction || k == Dep,
        Action => true,
    }
}

/// Per-segment token counts in [`Segment::ORDER`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScLayout {
    pub counts: [usize; 10],
}

impl ScLayout {
    pub fn new(counts: [usize; 10]) -> Self {
        ScLayout { counts }
    }

    pub fn from_slice(counts: &[usize]) -> Result<Self> {
        let counts: [usize; 10] = counts
            .try_into()
            .map_err(|_| Error::contract(format!("SC layout takes 10 counts, got {}", counts.len())))?;
        Ok(ScLayout { counts })
    }

    pub fn count(&self, s: Segment) -> usize {
        self.counts[s.position()]
    }

    pub fn set(&mut self, s: Segment, n: usize) {
        self.counts[s.position()] = n;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn start(&self, s: Segment) -> usize {
        self.counts[..s.position()].iter().sum()
    }

    pub fn range(&self, s: Segment) -> std::ops::Range<usize> {
        let a = self.start(s);
        a..a + self.count(s)
    }

    /// Segment of each sequence position.
    pub fn segments(&self) -> Vec<Segment> {
        Segment::ORDER
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, self.count(s)))
            .collect()
    }

    pub fn context_len(&self) -> usize {
        Segment::ORDER.iter().filter(|s| s.is_context()).map(|&s| self.count(s)).sum()
    }
}

pub fn build_sc_mask(layout: &ScLayout) -> Mask {
    let seg = layout.segments();
    Mask::from_fn(seg.len(), seg.len(), |i, j| visible(seg[i], seg[j]))
}

/// Mask for the configured attention mode; the causal and bidirectional
/// variants exist for ablation.
pub fn build_mask(layout: &ScLayout, mode: AttentionMode) -> Mask {
    let n = layout.total();
    match mode {
        AttentionMode::Sc => build_sc_mask(layout),
        AttentionMode::Causal => Mask::from_fn(n, n, |i, j| j <= i),
        AttentionMode::Bidirectional => Mask::full(n, n),
    }
}

/// Learned query tokens, shared across samples.
#[derive(Clone, Debug)]
pub struct QueryTokens {
    pub dyn_: Vec<(ViewId, ParamId)>,
    pub dep: ParamId,
    pub action: ParamId,
}

/// Query tokens bound on a tape; tests may substitute any values.
#[derive(Clone, Debug)]
pub struct QueryInputs {
    pub dyn_: Vec<(ViewId, Var)>,
    pub dep: Var,
    pub action: Var,
}

impl QueryTokens {
    pub fn bind(&self, ctx: &mut Ctx) -> QueryInputs {
        QueryInputs {
            dyn_: self.dyn_.iter().map(|&(v, p)| (v, ctx.p(p))).collect(),
            dep: ctx.p(self.dep),
            action: ctx.p(self.action),
        }
    }
}

/// Context tokens in model width: per-view object tokens, aggregation tokens
/// and the projected instruction.
#[derive(Clone, Debug)]
pub struct ScContext {
    pub obj: Vec<TokenSet>,
    pub agg: TokenSet,
    pub instruction: Var,
}

#[derive(Clone, Debug)]
pub struct ScStack {
    pub obj_proj: Linear,
    pub agg_proj: Linear,
    pub instr_proj: Linear,
    /// One row per segment kind, in sequence order.
    pub segment_embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln_out: Norm,
    pub mode: AttentionMode,
}

#[derive(Clone, Debug)]
pub struct ScOutput {
    pub layout: ScLayout,
    pub states: Var,
}

impl ScOutput {
    pub fn segment(&self, ctx: &mut Ctx, s: Segment) -> Result<Var> {
        let r = self.layout.range(s);
        ctx.tape.slice_rows(self.states, r.start, r.len())
    }
}

fn stack_rows(ctx: &mut Ctx, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        ctx.tape.concat_rows(parts)
    }
}

/// One parallel pass over `context ⊕ dyn ⊕ dep ⊕ action`.
pub fn sc_forward(ctx: &mut Ctx, stack: &ScStack, context: &ScContext, queries: &QueryInputs) -> Result<ScOutput> {
    let mut layout = ScLayout::default();
    let mut parts: Vec<(Segment, Var)> = Vec::new();
    let mut push = |ctx: &mut Ctx, layout: &mut ScLayout, s: Segment, v: Var| {
        let n = ctx.tape.dims(v).0;
        if layout.count(s) > 0 {
            return Err(Error::contract(format!("segment {s} supplied twice")));
        }
        layout.set(s, n);
        parts.push((s, v));
        Ok(())
    };
    for ts in &context.obj {
        let view = ts.view.ok_or_else(|| Error::contract("object tokens without a view"))?;
        let v = stack.obj_proj.forward(ctx, ts.tokens)?;
        push(ctx, &mut layout, Segment::Obj(view), v)?;
    }
    let v = stack.agg_proj.forward(ctx, context.agg.tokens)?;
    push(ctx, &mut layout, Segment::Agg, v)?;
    let v = stack.instr_proj.forward(ctx, context.instruction)?;
    push(ctx, &mut layout, Segment::Instruction, v)?;
    for &(view, q) in &queries.dyn_ {
        push(ctx, &mut layout, Segment::Dyn(view), q)?;
    }
    push(ctx, &mut layout, Segment::Dep, queries.dep)?;
    push(ctx, &mut layout, Segment::Action, queries.action)?;

    // sequence order is fixed regardless of the order inputs were given in
    parts.sort_by_key(|(s, _)| s.position());
    let table = ctx.p(stack.segment_embed);
    let mut rows = Vec::with_capacity(parts.len());
    for (s, v) in parts {
        let e = ctx.tape.slice_rows(table, s.position(), 1)?;
        rows.push(ctx.tape.add_row(v, e)?);
    }
    let mut x = stack_rows(ctx, &rows)?;
    let mask = build_mask(&layout, stack.mode);
    for block in &stack.blocks {
        x = block.forward(ctx, x, Some(&mask))?;
    }
    let states = stack.ln_out.forward(ctx, x)?;
    Ok(ScOutput { layout, states })
}

/// Learned output slots cross-attending to a memory, then a linear readout.
#[derive(Clone, Debug)]
pub struct SlotDecoder {
    pub slots: ParamId,
    pub blocks: Vec<CrossBlock>,
    pub out: Linear,
}

impl SlotDecoder {
    fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, n_slots: usize, d: usize, heads: usize, layers: usize, d_out: usize) -> Self {
        SlotDecoder {
            slots: init.randn(&format!("{name}.slots"), n_slots, d, 0.5),
            blocks: (0..layers)
                .map(|l| init.cross_block(&format!("{name}.block{l}"), d, d, heads, 2 * d))
                .collect(),
            out: init.linear(&format!("{name}.out"), d, d_out, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, memory: Var) -> Result<Var> {
        let mut x = ctx.p(self.slots);
        for b in &self.blocks {
            x = b.forward(ctx, x, memory)?;
        }
        self.out.forward(ctx, x)
    }
}

/// Predicted next-step features for the selected object tokens of view M,
/// read from the dyn states of every view.
pub fn decode_dynamic(ctx: &mut Ctx, dyn_states: &[Var], decoder: &SlotDecoder) -> Result<Var> {
    if dyn_states.is_empty() {
        return Err(Error::contract("dynamic decoder needs dyn states"));
    }
    let memory = stack_rows(ctx, dyn_states)?;
    decoder.forward(ctx, memory)
}

/// One P x 1 per-patch depth prediction per view, each from its own decoder.
pub fn decode_depth(ctx: &mut Ctx, dep_states: Var, decoders: &[(ViewId, SlotDecoder)]) -> Result<Vec<Var>> {
    decoders.iter().map(|(_, d)| d.forward(ctx, dep_states)).collect()
}

fn same_shape(ctx: &Ctx, op: &str, v: Var, t: &Tensor) -> Result<()> {
    let d = ctx.tape.dims(v);
    if d != t.dims2() {
        return Err(Error::contract(format!("{op}: prediction {:?} vs target {:?}", d, t.dims2())));
    }
    Ok(())
}

/// `||(pred - target) ⊙ mask||²`, summed.
pub fn loss_dyn4d(ctx: &mut Ctx, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    same_shape(ctx, "loss_dyn4d", pred, target)?;
    same_shape(ctx, "loss_dyn4d mask", pred, mask)?;
    let t = ctx.tape.constant(target.clone());
    let m = ctx.tape.constant(mask.clone());
    let d = ctx.tape.sub(pred, t)?;
    let d = ctx.tape.mul(d, m)?;
    let sq = ctx.tape.square(d);
    Ok(ctx.tape.sum(sq))
}

/// Expands a per-token mask to a full token x feature grid.
pub fn token_mask(mask: &[bool], d: usize) -> Tensor {
    Tensor::matrix(
        mask.len(),
        d,
        mask.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d)).collect(),
    )
}

/// `Σ_views ||pred_i - target_i||²`.
pub fn loss_dep4d(ctx: &mut Ctx, preds: &[Var], targets: &[Tensor]) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract(format!("{} depth predictions for {} views", preds.len(), targets.len())));
    }
    let mut total: Option<Var> = None;
    for (&p, t) in preds.iter().zip(targets) {
        same_shape(ctx, "loss_dep4d", p, t)?;
        let tv = ctx.tape.constant(t.clone());
        let d = ctx.tape.sub(p, tv)?;
        let sq = ctx.tape.square(d);
        let s = ctx.tape.sum(sq);
        total = Some(match total {
            Some(acc) => ctx.tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one view"))
}

/// Mean absolute error over the whole chunk.
pub fn loss_action(ctx: &mut Ctx, pred: Var, target: &Tensor) -> Result<Var> {
    same_shape(ctx, "loss_action", pred, target)?;
    let t = ctx.tape.constant(target.clone());
    let d = ctx.tape.sub(pred, t)?;
    let a = ctx.tape.abs(d);
    Ok(ctx.tape.mean(a))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_action: f64,
    pub l_dyn4d: f64,
    pub l_dep4d: f64,
    pub l_total: f64,
}

/// Unweighted sum; the tape-side total uses the same association order.
pub fn total_loss(l_action: f64, l_dyn4d: f64, l_dep4d: f64) -> LossReport {
    LossReport {
        l_action,
        l_dyn4d,
        l_dep4d,
        l_total: l_action + l_dyn4d + l_dep4d,
    }
}

#[derive(Clone, Debug)]
pub struct Thinker {
    pub stack: ScStack,
    pub queries: QueryTokens,
    pub dyn_decoder: SlotDecoder,
    pub depth_decoders: Vec<(ViewId, SlotDecoder)>,
    pub action_head: Linear,
}

/// Shapes the thinker is built for.
#[derive(Clone, Copy, Debug)]
pub struct ThinkerDims {
    /// Width of incoming context tokens.
    pub d_ctx: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_views: usize,
    pub n_dyn: usize,
    pub n_dep: usize,
    pub decoder_layers: usize,
    /// Selected object tokens of view M (dynamic decoder slots).
    pub k_sel: usize,
    /// Width of the dynamic targets.
    pub d_feat: usize,
    pub patches: usize,
    pub chunk: usize,
    pub mode: AttentionMode,
}

impl Thinker {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dims: &ThinkerDims) -> Self {
        let d = dims.d_model;
        let hidden = 2 * d;
        let views = ViewId::first(dims.n_views);
        let mut init = Init::new(store, rng, ParamGroup::ScAttn);
        let stack = ScStack {
            obj_proj: init.linear("sc.obj_proj", dims.d_ctx, d, true),
            agg_proj: init.linear("sc.agg_proj", dims.d_ctx, d, true),
            instr_proj: init.linear("sc.instr_proj", dims.d_ctx, d, true),
            segment_embed: init.randn("sc.segment", Segment::ORDER.len(), d, 0.5),
            blocks: (0..dims.layers)
                .map(|l| init.block(&format!("sc.block{l}"), d, dims.heads, hidden))
                .collect(),
            ln_out: init.norm("sc.ln_out", d),
            mode: dims.mode,
        };
        init.group(ParamGroup::QueryTokens);
        let queries = QueryTokens {
            dyn_: views
                .iter()
                .map(|&v| (v, init.randn(&format!("q.dyn.{v}"), dims.n_dyn, d, 0.5)))
                .collect(),
            dep: init.randn("q.dep", dims.n_dep, d, 0.5),
            action: init.randn("q.action", dims.chunk, d, 0.5),
        };
        init.group(ParamGroup::DynDecoder);
        let dyn_decoder = SlotDecoder::new(&mut init, "dyn_dec", dims.k_sel, d, dims.heads, dims.decoder_layers, dims.d_feat);
        init.group(ParamGroup::DepthDecoders);
        let depth_decoders = views
            .iter()
            .map(|&v| {
                let name = format!("dep_dec.{v}");
                (v, SlotDecoder::new(&mut init, &name, dims.patches, d, dims.heads, dims.decoder_layers, 1))
            })
            .collect();
        init.group(ParamGroup::ActionHead);
        let action_head = init.linear("action_head", d, WorldConfig::ACTION_DIM, true);
        Thinker {
            stack,
            queries,
            dyn_decoder,
            depth_decoders,
            action_head,
        }
    }
}

/// Which auxiliary decoders run on the training path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub dynamic: bool,
    pub depth: bool,
}

impl Heads {
    pub const NONE: Heads = Heads {
        dynamic: false,
        depth: false,
    };
    pub const ALL: Heads = Heads {
        dynamic: true,
        depth: true,
    };
}

#[derive(Clone, Debug)]
pub struct ThinkerOutput {
    pub sc: ScOutput,
    pub actions: Var,
    pub dynamic: Option<Var>,
    pub depth: Option<Vec<Var>>,
}

/// Training path: SC-Attn, action head, and whichever decoders are enabled.
/// Decoders only read SC-Attn states, so `actions` never depends on `heads`.
pub fn thinker_forward(ctx: &mut Ctx, thinker: &Thinker, context: &ScContext, heads: Heads) -> Result<ThinkerOutput> {
    let queries = thinker.queries.bind(ctx);
    let sc = sc_forward(ctx, &thinker.stack, context, &queries)?;
    let a = sc.segment(ctx, Segment::Action)?;
    let actions = thinker.action_head.forward(ctx, a)?;
    let dynamic = if heads.dynamic {
        let mut states = Vec::new();
        for &(view, _) in &queries.dyn_ {
            states.push(sc.segment(ctx, Segment::Dyn(view))?);
        }
        Some(decode_dynamic(ctx, &states, &thinker.dyn_decoder)?)
    } else {
        None
    };
    let depth = if heads.depth {
        let dep = sc.segment(ctx, Segment::Dep)?;
        Some(decode_depth(ctx, dep, &thinker.depth_decoders)?)
    } else {
        None
    };
    Ok(ThinkerOutput {
        sc,
        actions,
        dynamic,
        depth,
    })
}

/// Inference path: SC-Attn and the action head only.
pub fn infer_actions(ctx: &mut Ctx, thinker: &Thinker, context: &ScContext) -> Result<Var> {
    Ok(thinker_forward(ctx, thinker, context, Heads::NONE)?.actions)
}

/// Wraps context parts into token sets; `obj` must be in view order.
pub fn context(obj: Vec<(ViewId, Var)>, agg: Var, instruction: Var) -> ScContext {
    ScContext {
        obj: obj
            .into_iter()
            .map(|(v, t)| TokenSet::learned(t, Some(v), Role::Obj3d))
            .collect(),
        agg: TokenSet::learned(agg, None, Role::Agg3d),
        instruction,
    }
}
