//! Cross-object fusion: layer-wise blending of geometric and frozen spatial
//! features, and aggregation tokens reading the blend under a block-causal mask.

use rand::Rng;

use crate::config::{BcLayout, EncoderConfig, FuserConfig, ScheduleKind};
use crate::encoders::{Role, TokenSet};
use crate::error::{Error, Result};
use crate::nn::{Block, Ctx, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Mask, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaSchedule {
    pub psi: f64,
    pub delta: f64,
    pub depth: usize,
    pub kind: ScheduleKind,
}

impl AlphaSchedule {
    pub fn new(psi: f64, delta: f64, depth: usize, kind: ScheduleKind) -> Result<Self> {
        if !(psi > 0.0 && psi <= 1.0) || !(delta > 0.0 && delta < 1.0) || depth == 0 {
            return Err(Error::config(format!("invalid schedule psi={psi} delta={delta} depth={depth}")));
        }
        Ok(AlphaSchedule { psi, delta, depth, kind })
    }

    pub fn cosine(psi: f64, delta: f64, depth: usize) -> Result<Self> {
        Self::new(psi, delta, depth, ScheduleKind::Cosine)
    }

    /// `alpha_0 = psi`, `alpha_depth = psi * delta`, non-increasing between.
    pub fn alpha(&self, l: usize) -> Result<f64> {
        if l > self.depth {
            return Err(Error::contract(format!("layer {l} outside 0..={}", self.depth)));
        }
        let x = l as f64 / self.depth as f64;
        let decay = match self.kind {
            ScheduleKind::Cosine => (1.0 + (x * std::f64::consts::PI).cos()) / 2.0,
            ScheduleKind::Linear => 1.0 - x,
        };
        Ok(self.psi * (self.delta + (1.0 - self.delta) * decay))
    }
}

/// `(1 - alpha_l) * geo + alpha_l * spatial`, elementwise.
pub fn group_fuse(ctx: &mut Ctx, z_geo: &TokenSet, z_3d: &TokenSet, l: usize, sched: &AlphaSchedule) -> Result<TokenSet> {
    let (a, b) = (ctx.tape.dims(z_geo.tokens), ctx.tape.dims(z_3d.tokens));
    if a != b {
        return Err(Error::contract(format!("group fusion of {a:?} with {b:?} tokens")));
    }
    let alpha = sched.alpha(l)?;
    let g = ctx.tape.scale(z_geo.tokens, 1.0 - alpha);
    let s = ctx.tape.scale(z_3d.tokens, alpha);
    let fused = ctx.tape.add(g, s)?;
    Ok(z_geo.with_role(fused, Role::Geo3d))
}

/// Geo tokens of all views, then aggregation tokens. Geo rows never see agg
/// rows; agg rows see everything.
pub fn build_bc_mask(n_geo_per_view: usize, n_views: usize, n_agg: usize) -> Mask {
    build_bc_mask_with(BcLayout::TwoBlock, n_geo_per_view, n_views, n_agg)
}

/// `PerViewCausal` further orders the geo blocks M -> L -> R: a view sees
/// itself and earlier views.
pub fn build_bc_mask_with(layout: BcLayout, n_geo_per_view: usize, n_views: usize, n_agg: usize) -> Mask {
    let n_geo = n_geo_per_view * n_views;
    let n = n_geo + n_agg;
    Mask::from_fn(n, n, |i, j| {
        if i >= n_geo {
            return true;
        }
        if j >= n_geo {
            return false;
        }
        match layout {
            BcLayout::TwoBlock => true,
            BcLayout::PerViewCausal => j / n_geo_per_view <= i / n_geo_per_view,
        }
    })
}

#[derive(Clone, Debug)]
pub struct AggregationState {
    pub tokens: Var,
    pub layer: usize,
}

/// One masked self-attention block over `geo ⊕ agg`.
pub fn ig_aggregate(
    ctx: &mut Ctx,
    z_geo3d: &TokenSet,
    agg: &AggregationState,
    block: &Block,
    mask: &Mask,
) -> Result<(TokenSet, AggregationState)> {
    let n_geo = ctx.tape.dims(z_geo3d.tokens).0;
    let n_agg = ctx.tape.dims(agg.tokens).0;
    if mask.rows() != n_geo + n_agg {
        return Err(Error::shape("bc mask", &[n_geo + n_agg], &[mask.rows()]));
    }
    let x = ctx.tape.concat_rows(&[z_geo3d.tokens, agg.tokens])?;
    let y = block.forward(ctx, x, Some(mask))?;
    let geo = ctx.tape.slice_rows(y, 0, n_geo)?;
    let next = ctx.tape.slice_rows(y, n_geo, n_agg)?;
    Ok((
        z_geo3d.with_role(geo, Role::Geo3d),
        AggregationState {
            tokens: next,
            layer: agg.layer + 1,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct CoFuser {
    pub agg_init: ParamId,
    pub blocks: Vec<Block>,
    pub schedule: AlphaSchedule,
    pub layout: BcLayout,
}

impl CoFuser {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, enc: &EncoderConfig, cfg: &FuserConfig) -> Result<Self> {
        let depth = enc.geo_layers;
        let schedule = AlphaSchedule::new(cfg.psi, cfg.delta, depth, cfg.schedule)?;
        let mut init = Init::new(store, rng, ParamGroup::AggTokens);
        let agg_init = init.randn("agg.init", cfg.n_agg, enc.d_model, 0.02);
        init.group(ParamGroup::FusionBlocks);
        let blocks = (0..depth)
            .map(|l| init.block(&format!("ig.block{l}"), enc.d_model, enc.heads, enc.ffn_mult * enc.d_model))
            .collect();
        Ok(CoFuser {
            agg_init,
            blocks,
            schedule,
            layout: cfg.layout,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

/// For `l = 0 .. L'-1`: fuse the output of encoder block `l` of every view,
/// then one aggregation block. `geo[v]` and `s3d[v]` hold `z_0 ..= z_L'`, so
/// block `l` is `geo[v][l + 1]`; the bare patch embedding is never fused.
/// Returns the final aggregation tokens only.
pub fn run_cofuser(ctx: &mut Ctx, geo: &[Vec<TokenSet>], s3d: &[Vec<TokenSet>], fuser: &CoFuser) -> Result<TokenSet> {
    let depth = fuser.depth();
    if geo.is_empty() || geo.len() != s3d.len() {
        return Err(Error::config(format!("{} geometric views vs {} spatial views", geo.len(), s3d.len())));
    }
    if fuser.schedule.depth != depth {
        return Err(Error::config(format!("schedule depth {} vs {depth} blocks", fuser.schedule.depth)));
    }
    for (g, s) in geo.iter().zip(s3d) {
        if g.len() != s.len() || g.len() < depth + 1 {
            return Err(Error::config(format!(
                "{} geometric and {} spatial layers for {depth} fusion blocks",
                g.len(),
                s.len()
            )));
        }
    }
    let n_per_view = ctx.tape.dims(geo[0][1].tokens).0;
    let mut agg = AggregationState {
        tokens: ctx.p(fuser.agg_init),
        layer: 0,
    };
    let n_agg = ctx.tape.dims(agg.tokens).0;
    let mask = build_bc_mask_with(fuser.layout, n_per_view, geo.len(), n_agg);
    for (l, block) in fuser.blocks.iter().enumerate() {
        let mut fused = Vec::with_capacity(geo.len());
        for (g, s) in geo.iter().zip(s3d) {
            if ctx.tape.dims(g[l + 1].tokens).0 != n_per_view {
                return Err(Error::config("views disagree on patch count"));
            }
            fused.push(group_fuse(ctx, &g[l + 1], &s[l + 1], l, &fuser.schedule)?.tokens);
        }
        let joint = ctx.tape.concat_rows(&fused)?;
        let joint = TokenSet::learned(joint, None, Role::Geo3d);
        agg = ig_aggregate(ctx, &joint, &agg, block, &mask)?.1;
    }
    Ok(TokenSet::learned(agg.tokens, None, Role::Agg3d))
}
