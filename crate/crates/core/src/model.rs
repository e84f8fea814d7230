//! The assembled stack: encoders, alignment, fusion and the thinker, plus the
//! training objective for one sample.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::{align_views, ProjectionWeights, SingleFusionStack};
use crate::config::Config;
use crate::encoders::{
    GeometricEncoder, InstructionEmbedding, Role, SemanticEncoder, SpatialEncoder, SpatialFeatures, SpatialInput,
    TokenSet, ViewId, ViewImage,
};
use crate::error::{Error, Result};
use crate::fuser::{run_cofuser, CoFuser};
use crate::nn::{Ctx, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::thinker::{
    context, loss_action, loss_dep4d, loss_dyn4d, thinker_forward, token_mask, Heads, LossReport, Thinker,
    ThinkerDims, ThinkerOutput,
};
use crate::world::{spatial_features, Action, OracleCache, Policy, Rendered, Scene, Step};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: Config,
    pub store: ParamStore,
    pub instructions: ParamId,
    pub spatial: SpatialEncoder,
    pub semantic: SemanticEncoder,
    pub geometric: GeometricEncoder,
    pub projection: ProjectionWeights,
    pub fusion: SingleFusionStack,
    pub cofuser: CoFuser,
    pub thinker: Thinker,
}

/// Where spatial features come from: precomputed values, or the frozen
/// encoder run on the tape.
#[derive(Clone, Copy, Debug)]
pub enum Spatial<'a> {
    Cached(&'a SpatialFeatures),
    Live(&'a [Vec<f64>]),
}

#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub views: &'a [ViewImage],
    pub instruction_id: usize,
    pub spatial: Spatial<'a>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub thinker: ThinkerOutput,
    pub selections: BTreeMap<ViewId, Vec<usize>>,
}

/// A training sample with its selection-independent oracle parts.
#[derive(Clone, Debug)]
pub struct Sample {
    pub views: Vec<ViewImage>,
    pub instruction_id: usize,
    pub spatial: SpatialFeatures,
    pub oracle: OracleCache,
    pub actions: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSwitches {
    pub dynamic: bool,
    pub depth: bool,
}

impl LossSwitches {
    pub fn from_config(cfg: &Config) -> Self {
        LossSwitches {
            dynamic: cfg.train.enable_dyn,
            depth: cfg.train.enable_dep,
        }
    }
}

pub fn actions_tensor(actions: &[Action]) -> Tensor {
    Tensor::matrix(actions.len(), 2, actions.iter().flatten().copied().collect())
}

impl Model {
    /// Trainable parameters draw from `seed`; the frozen spatial stream draws
    /// from its own seed.
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(cfg.encoders.spatial_seed);
        let spatial = SpatialEncoder::new(&mut store, &mut frozen_rng, &cfg.encoders, &cfg.world);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &cfg.encoders;
        let instructions =
            Init::new(&mut store, &mut rng, ParamGroup::Instruction).randn("instructions", cfg.world.n_colors, enc.d_instr, 1.0);
        let semantic = SemanticEncoder::new(&mut store, &mut rng, enc, &cfg.world);
        let geometric = GeometricEncoder::new(&mut store, &mut rng, enc, &cfg.world);
        let projection = ProjectionWeights::new(&mut store, &mut rng, enc.d_instr, enc.d_model);
        let fusion = SingleFusionStack::from_config(&mut store, &mut rng, enc, &cfg.aligner);
        let cofuser = CoFuser::new(&mut store, &mut rng, enc, &cfg.fuser)?;
        let th = &cfg.thinker;
        let dims = ThinkerDims {
            d_ctx: enc.d_model,
            d_model: enc.d_model,
            heads: th.heads,
            layers: th.layers,
            n_views: cfg.world.n_views,
            n_dyn: th.n_dyn,
            n_dep: th.n_dep,
            decoder_layers: th.decoder_layers,
            k_sel: cfg.aligner.k,
            d_feat: enc.d_model,
            patches: cfg.world.patches(),
            chunk: cfg.world.chunk,
            mode: th.attention,
        };
        let thinker = Thinker::new(&mut store, &mut rng, &dims);
        Ok(Model {
            cfg: cfg.clone(),
            store,
            instructions,
            spatial,
            semantic,
            geometric,
            projection,
            fusion,
            cofuser,
            thinker,
        })
    }

    pub fn instruction(&self, ctx: &mut Ctx, id: usize) -> Result<InstructionEmbedding> {
        if id >= self.cfg.world.n_colors {
            return Err(Error::contract(format!("instruction id {id} outside the vocabulary")));
        }
        let table = ctx.p(self.instructions);
        Ok(InstructionEmbedding {
            instruction_id: id,
            vector: ctx.tape.slice_rows(table, id, 1)?,
        })
    }

    fn spatial_tokens(&self, ctx: &mut Ctx, obs: &Observation) -> Result<Vec<Vec<TokenSet>>> {
        match obs.spatial {
            Spatial::Cached(f) => {
                if f.views.len() != obs.views.len() {
                    return Err(Error::contract("cached spatial features cover different views"));
                }
                Ok(f.layers
                    .iter()
                    .zip(&f.views)
                    .map(|(per, &view)| {
                        per.iter()
                            .map(|t| {
                                let v = ctx.tape.constant(t.clone());
                                TokenSet::patches(v, view, Role::Spatial3d, t.rows())
                            })
                            .collect()
                    })
                    .collect())
            }
            Spatial::Live(depth) => {
                if depth.len() != obs.views.len() {
                    return Err(Error::contract("depth given for a different number of views"));
                }
                let inputs: Vec<SpatialInput> = obs
                    .views
                    .iter()
                    .zip(depth)
                    .map(|(image, depth)| SpatialInput { image, depth })
                    .collect();
                self.spatial.encode(ctx, &inputs)
            }
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, obs: &Observation, heads: Heads) -> Result<ModelOutput> {
        if obs.views.len() != self.cfg.world.n_views {
            return Err(Error::contract(format!(
                "model built for {} views, observation has {}",
                self.cfg.world.n_views,
                obs.views.len()
            )));
        }
        let t = self.instruction(ctx, obs.instruction_id)?;
        let s3d = self.spatial_tokens(ctx, obs)?;
        let finals: Vec<TokenSet> = s3d.iter().map(|per| per.last().expect("spatial layers").clone()).collect();
        let aligned = align_views(
            ctx,
            obs.views,
            &t,
            &self.projection,
            self.cfg.aligner.k,
            &self.semantic,
            &finals,
            &self.fusion,
        )?;
        let geo = obs
            .views
            .iter()
            .map(|img| self.geometric.encode(ctx, img))
            .collect::<Result<Vec<_>>>()?;
        let agg = run_cofuser(ctx, &geo, &s3d, &self.cofuser)?;
        let instr = self.projection.project(ctx, &t)?;
        let obj = aligned.iter().map(|(&v, a)| (v, a.tokens.tokens)).collect();
        let ctx_tokens = context(obj, agg.tokens, instr);
        let thinker = thinker_forward(ctx, &self.thinker, &ctx_tokens, heads)?;
        Ok(ModelOutput {
            thinker,
            selections: aligned.into_iter().map(|(v, a)| (v, a.selection.indices)).collect(),
        })
    }

    /// Action chunk only; auxiliary decoders are not evaluated.
    pub fn infer(&self, obs: &Observation) -> Result<Vec<Action>> {
        let mut ctx = Ctx::new(&self.store);
        let out = self.forward(&mut ctx, obs, Heads::NONE)?;
        let a = ctx.tape.value(out.thinker.actions);
        Ok((0..a.rows()).map(|r| [a.get(r, 0), a.get(r, 1)]).collect())
    }

    /// `L_total` on the tape for one sample. Disabled terms are constant zero
    /// and their decoders are never run.
    pub fn loss(&self, ctx: &mut Ctx, obs: &Observation, oracle: &OracleCache, actions: &Tensor, switches: LossSwitches) -> Result<(Var, LossReport)> {
        let heads = Heads {
            dynamic: switches.dynamic,
            depth: switches.depth,
        };
        let out = self.forward(ctx, obs, heads)?;
        let l_action = loss_action(ctx, out.thinker.actions, actions)?;
        let l_dyn = match out.thinker.dynamic {
            Some(pred) => {
                let sel = out
                    .selections
                    .get(&ViewId::M)
                    .ok_or_else(|| Error::contract("dynamic loss needs view M"))?;
                let target = oracle.select(sel)?;
                let mask = token_mask(&target.mask, target.dyn_target.cols());
                loss_dyn4d(ctx, pred, &target.dyn_target, &mask)?
            }
            None => ctx.tape.constant(Tensor::scalar(0.0)),
        };
        let l_dep = match &out.thinker.depth {
            Some(preds) => {
                let targets: Vec<Tensor> = oracle
                    .next_depth
                    .iter()
                    .map(|d| Tensor::matrix(d.len(), 1, d.clone()))
                    .collect();
                loss_dep4d(ctx, preds, &targets)?
            }
            None => ctx.tape.constant(Tensor::scalar(0.0)),
        };
        let partial = ctx.tape.add(l_action, l_dyn)?;
        let total = ctx.tape.add(partial, l_dep)?;
        let v = |ctx: &Ctx, x: Var| ctx.tape.value(x).item();
        let report = LossReport {
            l_action: v(ctx, l_action),
            l_dyn4d: v(ctx, l_dyn),
            l_dep4d: v(ctx, l_dep),
            l_total: v(ctx, total),
        };
        Ok((total, report))
    }

    pub fn sample_loss(&self, ctx: &mut Ctx, sample: &Sample, switches: LossSwitches) -> Result<(Var, LossReport)> {
        let obs = Observation {
            views: &sample.views,
            instruction_id: sample.instruction_id,
            spatial: Spatial::Cached(&sample.spatial),
        };
        self.loss(ctx, &obs, &sample.oracle, &sample.actions, switches)
    }

    /// Precomputes frozen features and oracle caches for one dataset step.
    pub fn prepare(&self, step: &Step) -> Result<Sample> {
        let rendered = Rendered {
            views: step.views.clone(),
            depth: step.depth.clone(),
        };
        let spatial = spatial_features(&rendered, &self.spatial, &self.store)?;
        let oracle = OracleCache::new(&step.scene, &step.next_scene, &self.cfg.world, &self.spatial, &self.store)?;
        Ok(Sample {
            views: step.views.clone(),
            instruction_id: step.scene.instruction_id(),
            spatial,
            oracle,
            actions: actions_tensor(&step.actions),
        })
    }

    pub fn observe(&self, rendered: &Rendered) -> Result<SpatialFeatures> {
        spatial_features(rendered, &self.spatial, &self.store)
    }
}

/// Closed-loop policy backed by the model's inference path.
pub struct ModelPolicy<'m> {
    pub model: &'m Model,
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, scene: &Scene, rendered: &Rendered) -> Result<Vec<Action>> {
        let feats = self.model.observe(rendered)?;
        self.model.infer(&Observation {
            views: &rendered.views,
            instruction_id: scene.instruction_id(),
            spatial: Spatial::Cached(&feats),
        })
    }
}
