//! Cross-view alignment: instruction-similarity scoring, hard Top-K object
//! selection and per-view cross-attention from spatial features.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;

use crate::config::{AlignerConfig, EncoderConfig};
use crate::encoders::{InstructionEmbedding, Role, SemanticEncoder, TokenSet, ViewId, ViewImage};
use crate::error::{Error, Result};
use crate::nn::{attend, Ctx, FeedForward, Init, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Learned `W_t`, mapping instruction width to token width.
#[derive(Clone, Debug)]
pub struct ProjectionWeights {
    pub w: ParamId,
    pub d_t: usize,
    pub d_v: usize,
}

impl ProjectionWeights {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_t: usize, d_v: usize) -> Self {
        let w = Init::new(store, rng, ParamGroup::Projection).randn("w_t", d_t, d_v, 1.0 / (d_t as f64).sqrt());
        ProjectionWeights { w, d_t, d_v }
    }

    /// `W_t · t` as a 1 x d_v row on the tape.
    pub fn project(&self, ctx: &mut Ctx, t: &InstructionEmbedding) -> Result<Var> {
        let w = ctx.p(self.w);
        ctx.tape.matmul(t.vector, w)
    }
}

/// Cosine scores of every token against one query vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub values: Vec<f64>,
    /// Tokens scored 0 because they (or the query) have zero norm.
    pub degenerate: Vec<usize>,
}

pub fn cosine_scores(tokens: &Tensor, query: &[f64]) -> Result<Scores> {
    let (n, d) = tokens.dims2();
    if query.len() != d {
        return Err(Error::shape("cosine_scores", &[n, d], &[query.len()]));
    }
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut values = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for j in 0..n {
        let row = tokens.row_slice(j);
        let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn == 0.0 || qn == 0.0 {
            values.push(0.0);
            degenerate.push(j);
            continue;
        }
        let dot: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
        values.push((dot / (rn * qn)).clamp(-1.0, 1.0));
    }
    if !degenerate.is_empty() {
        log::warn!("{} zero-norm vectors scored as 0", degenerate.len());
    }
    Ok(Scores { values, degenerate })
}

/// Indices of the `k` largest scores, descending, ties by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::contract(format!("cannot keep {k} of {} tokens", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order.truncate(k);
    Ok(order)
}

pub fn score_tokens(ctx: &mut Ctx, z_sem: &TokenSet, t: &InstructionEmbedding, w: &ProjectionWeights) -> Result<Scores> {
    let q = w.project(ctx, t)?;
    let query = ctx.tape.value(q).data().to_vec();
    cosine_scores(ctx.tape.value(z_sem.tokens), &query)
}

#[derive(Clone, Debug)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub scores: Scores,
    /// Selected rows of `z_sem`; gradients reach only these rows.
    pub tokens: TokenSet,
}

pub fn es_select(
    ctx: &mut Ctx,
    z_sem: &TokenSet,
    t: &InstructionEmbedding,
    w: &ProjectionWeights,
    k: usize,
) -> Result<SelectionResult> {
    let scores = score_tokens(ctx, z_sem, t, w)?;
    let indices = top_k(&scores.values, k)?;
    let rows = ctx.tape.select_rows(z_sem.tokens, &indices)?;
    let patch_index = match &z_sem.patch_index {
        Some(p) => indices.iter().map(|&i| p[i]).collect(),
        None => indices.clone(),
    };
    Ok(SelectionResult {
        tokens: TokenSet {
            tokens: rows,
            view: z_sem.view,
            role: Role::Sem,
            patch_index: Some(patch_index),
        },
        indices,
        scores,
    })
}

/// One fusion layer: `x + FFN(CrossAttn(x, memory))`, no normalization.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct SingleFusionStack {
    /// Spatial width to token width.
    pub kv_proj: Linear,
    pub layers: Vec<FusionLayer>,
    pub heads: usize,
}

impl SingleFusionStack {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_v: usize, d_3d: usize, cfg: &AlignerConfig, ffn_mult: usize) -> Self {
        let mut init = Init::new(store, rng, ParamGroup::SingleFusion);
        let kv_proj = init.linear("sf.kv_proj", d_3d, d_v, true);
        let layers = (0..cfg.fusion_layers)
            .map(|l| {
                let n = format!("sf.layer{l}");
                FusionLayer {
                    q: init.linear(&format!("{n}.q"), d_v, d_v, true),
                    k: init.linear(&format!("{n}.k"), d_v, d_v, false),
                    v: init.linear(&format!("{n}.v"), d_v, d_v, true),
                    o: init.linear(&format!("{n}.o"), d_v, d_v, true),
                    ffn: init.ffn(&format!("{n}.ffn"), d_v, ffn_mult * d_v),
                }
            })
            .collect();
        SingleFusionStack {
            kv_proj,
            layers,
            heads: cfg.heads,
        }
    }

    pub fn from_config<R: Rng>(store: &mut ParamStore, rng: &mut R, enc: &EncoderConfig, cfg: &AlignerConfig) -> Self {
        Self::new(store, rng, enc.d_model, enc.d_model, cfg, enc.ffn_mult)
    }
}

pub fn single_fusion(ctx: &mut Ctx, z_obj: &TokenSet, z_3d: &TokenSet, stack: &SingleFusionStack) -> Result<TokenSet> {
    if z_obj.view != z_3d.view {
        return Err(Error::contract(format!(
            "single fusion pairs view {:?} with spatial view {:?}",
            z_obj.view, z_3d.view
        )));
    }
    if stack.layers.is_empty() {
        return Err(Error::config("single fusion needs at least one layer"));
    }
    let memory = stack.kv_proj.forward(ctx, z_3d.tokens)?;
    let mut x = z_obj.tokens;
    for layer in &stack.layers {
        let q = layer.q.forward(ctx, x)?;
        let k = layer.k.forward(ctx, memory)?;
        let v = layer.v.forward(ctx, memory)?;
        let a = attend(&mut ctx.tape, q, k, v, stack.heads, None)?;
        let a = layer.o.forward(ctx, a)?;
        let f = layer.ffn.forward(ctx, a)?;
        x = ctx.tape.add(x, f)?;
    }
    Ok(z_obj.with_role(x, Role::Obj3d))
}

#[derive(Clone, Debug)]
pub struct AlignedView {
    pub selection: SelectionResult,
    pub tokens: TokenSet,
}

/// Selection then fusion, independently per view. `z_3d` holds each view's
/// final spatial features in the same order as `views`.
#[allow(clippy::too_many_arguments)]
pub fn align_views(
    ctx: &mut Ctx,
    views: &[ViewImage],
    t: &InstructionEmbedding,
    w: &ProjectionWeights,
    k: usize,
    sem: &SemanticEncoder,
    z_3d: &[TokenSet],
    stack: &SingleFusionStack,
) -> Result<BTreeMap<ViewId, AlignedView>> {
    if views.is_empty() || views.len() > 3 {
        return Err(Error::contract(format!("alignment takes 1-3 views, got {}", views.len())));
    }
    if z_3d.len() != views.len() {
        return Err(Error::contract(format!("{} views but {} spatial sets", views.len(), z_3d.len())));
    }
    let mut out = BTreeMap::new();
    for (img, s3d) in views.iter().zip(z_3d) {
        let z_sem = sem.encode(ctx, img, t)?;
        let selection = es_select(ctx, &z_sem, t, w, k)?;
        let tokens = single_fusion(ctx, &selection.tokens, s3d, stack)?;
        if out.insert(img.view, AlignedView { selection, tokens }).is_some() {
            return Err(Error::contract(format!("view {} given twice", img.view)));
        }
    }
    Ok(out)
}
