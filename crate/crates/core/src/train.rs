//! Optimization harness: Adam over the assembled model, checkpoints,
//! closed-loop evaluation and end-to-end finite-difference checks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TrainConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::model::{LossSwitches, Model, ModelPolicy, Observation, Sample, Spatial};
use crate::nn::{Ctx, ParamGroup, ParamStore};
use crate::tensor::{relative_error, Tensor, DEFAULT_ABS_FLOOR, DEFAULT_STEP, DEFAULT_TOL};
use crate::thinker::LossReport;
use crate::world::{generate_dataset, initial_scene, rollout, Dataset, Policy};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

/// Adam with bias correction; frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| {
                    let (r, c) = p.value.dims2();
                    Tensor::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.param(id).trainable {
                continue;
            }
            let i = id.index();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_action: f64,
    pub l_dyn4d: f64,
    pub l_dep4d: f64,
    pub l_total: f64,
}

impl LossRecord {
    /// Batch means of each term; `l_total` is the sum of the three means.
    fn mean(step: usize, reports: &[LossReport]) -> Self {
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let (l_action, l_dyn4d, l_dep4d) = (avg(|r| r.l_action), avg(|r| r.l_dyn4d), avg(|r| r.l_dep4d));
        LossRecord {
            step,
            l_action,
            l_dyn4d,
            l_dep4d,
            l_total: l_action + l_dyn4d + l_dep4d,
        }
    }
}

/// Mean of the first and last `window` totals.
pub fn smoothed_endpoints(records: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if records.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(records.len());
    let mean = |rs: &[LossRecord]| rs.iter().map(|r| r.l_total).sum::<f64>() / rs.len() as f64;
    Some((mean(&records[..w]), mean(&records[records.len() - w..])))
}

/// Frozen features and oracle caches for every step of every episode.
pub fn prepare_samples(model: &Model, data: &Dataset) -> Result<Vec<Sample>> {
    if data.header.config_hash != model.cfg.world_hash() {
        return Err(Error::config(format!(
            "dataset built for world {} but config describes world {}",
            data.header.config_hash,
            model.cfg.world_hash()
        )));
    }
    data.episodes
        .iter()
        .flat_map(|ep| ep.steps.iter())
        .map(|s| model.prepare(s))
        .collect()
}

/// Cycles through shuffled epochs of sample indices.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Batches {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean gradient of `L_total` over a batch, summed in the given order.
pub fn batch_gradient(model: &Model, samples: &[&Sample], switches: LossSwitches) -> Result<(Vec<Tensor>, Vec<LossReport>)> {
    let mut sum: Vec<Tensor> = model
        .store
        .iter()
        .map(|(_, p)| {
            let (r, c) = p.value.dims2();
            Tensor::zeros(r, c)
        })
        .collect();
    let mut reports = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut ctx = Ctx::new(&model.store);
        let (total, report) = model.sample_loss(&mut ctx, sample, switches)?;
        let grads = ctx.tape.backward(total)?;
        for (acc, g) in sum.iter_mut().zip(ctx.param_grads(&grads)) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        reports.push(report);
    }
    let scale = 1.0 / samples.len() as f64;
    for g in &mut sum {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok((sum, reports))
}

/// Runs `tc.steps` Adam steps in place; one record per step.
pub fn train_model(model: &mut Model, samples: &[Sample], tc: &TrainConfig, mut on_record: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
    if samples.is_empty() && tc.steps > 0 {
        return Err(Error::contract("training needs at least one sample"));
    }
    let switches = LossSwitches {
        dynamic: tc.enable_dyn,
        depth: tc.enable_dep,
    };
    let mut adam = Adam::new(&model.store, tc.lr);
    let mut batches = Batches::new(samples.len(), tc.seed);
    let mut records = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let idx = batches.next(tc.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (grads, reports) = batch_gradient(model, &batch, switches)?;
        if let Some((i, r)) = reports.iter().enumerate().find(|(_, r)| !r.l_total.is_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: format!("sample {} gave {:?}", idx[i], r),
            });
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            let name = &model.store.iter().nth(bad).expect("gradient per parameter").1.name;
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient of {name}"),
            });
        }
        adam.step(&mut model.store, &grads);
        let rec = LossRecord::mean(step, &reports);
        on_record(&rec);
        records.push(rec);
    }
    Ok(records)
}

pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<LossRecord>,
}

pub fn train(cfg: &Config, data: &Dataset, on_record: impl FnMut(&LossRecord)) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg, cfg.train.seed)?;
    let samples = prepare_samples(&model, data)?;
    let records = train_model(&mut model, &samples, &cfg.train, on_record)?;
    Ok(TrainOutcome { model, records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub value: Tensor,
}

/// Trainable parameters only; frozen ones are rebuilt from their seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub step: usize,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: usize) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: model.cfg.model_hash(),
            step,
            params: model
                .store
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn restore(&self, cfg: &Config) -> Result<Model> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!("checkpoint format {} unsupported", self.format_version)));
        }
        if self.config_hash != cfg.model_hash() {
            return Err(Error::config(format!(
                "checkpoint built for model {} but config describes model {}",
                self.config_hash,
                cfg.model_hash()
            )));
        }
        let mut model = Model::new(cfg, cfg.train.seed)?;
        if self.params.len() != model.store.iter().filter(|(_, p)| p.trainable).count() {
            return Err(Error::contract("checkpoint parameter count does not match the model"));
        }
        for saved in &self.params {
            let id = model
                .store
                .find(&saved.name)
                .ok_or_else(|| Error::contract(format!("unknown parameter {}", saved.name)))?;
            if !model.store.param(id).trainable {
                return Err(Error::contract(format!("checkpoint overrides frozen {}", saved.name)));
            }
            model.store.set(id, saved.value.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub n_episodes: usize,
    pub successes: usize,
    /// `None` when no episode ran.
    pub success_rate: Option<f64>,
    pub mean_action_l1: Option<f64>,
}

/// Rolls `policy` out on `n_episodes` fresh scenes drawn from `seed`.
pub fn evaluate_closed_loop<P: Policy + ?Sized>(policy: &mut P, world: &WorldConfig, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut successes = 0;
    let mut l1 = 0.0;
    let mut count = 0;
    for i in 0..n_episodes {
        let stats = rollout(policy, &initial_scene(seed, i, world), world)?;
        successes += stats.success as usize;
        l1 += stats.l1_sum;
        count += stats.l1_count;
    }
    Ok(EvalReport {
        format_version: REPORT_VERSION,
        n_episodes,
        successes,
        success_rate: (n_episodes > 0).then(|| successes as f64 / n_episodes as f64),
        mean_action_l1: (count > 0).then(|| l1 / count as f64),
    })
}

pub fn evaluate_model(model: &Model, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    let world = model.cfg.world.clone();
    evaluate_closed_loop(&mut ModelPolicy { model }, &world, n_episodes, seed)
}

/// Seed for evaluation scenes, disjoint from the training scenes of `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    pub worst: Option<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub format_version: u32,
    pub tolerance: f64,
    pub step: f64,
    pub groups: Vec<GroupCheck>,
    /// Frozen parameters left out of the check set.
    pub excluded: Vec<String>,
    /// Every frozen parameter received an exactly zero gradient.
    pub frozen_zero: bool,
    pub passed: bool,
}

pub const CHECKS_PER_GROUP: usize = 32;

/// First step whose enabled loss terms are all nonzero, so every head is
/// reached by the check; falls back to the first step.
fn active_sample<'d>(model: &Model, data: &'d Dataset, switches: LossSwitches) -> Result<(&'d crate::world::Step, Sample)> {
    let mut first = None;
    for step in data.episodes.iter().flat_map(|e| e.steps.iter()) {
        let sample = model.prepare(step)?;
        let mut ctx = Ctx::new(&model.store);
        let (_, r) = model.sample_loss(&mut ctx, &sample, switches)?;
        if (!switches.dynamic || r.l_dyn4d > 0.0) && (!switches.depth || r.l_dep4d > 0.0) {
            return Ok((step, sample));
        }
        if first.is_none() {
            first = Some((step, sample));
        }
    }
    first.ok_or_else(|| Error::contract("dataset has no steps"))
}

/// Finite-difference check of `L_total` against the tape gradient for a
/// random subset of every trainable parameter group, with the frozen spatial
/// stream evaluated live on the tape.
pub fn run_grad_checks(cfg: &Config, seed: u64) -> Result<GradCheckSummary> {
    let mut model = Model::new(cfg, seed)?;
    let switches = LossSwitches::from_config(cfg);
    let data = generate_dataset(cfg, seed, 8)?;
    let (step, sample) = active_sample(&model, &data, switches)?;

    let loss_at = |model: &Model| -> Result<f64> {
        let mut ctx = Ctx::new(&model.store);
        let obs = Observation {
            views: &sample.views,
            instruction_id: sample.instruction_id,
            spatial: Spatial::Live(&step.depth),
        };
        let (_, r) = model.loss(&mut ctx, &obs, &sample.oracle, &sample.actions, switches)?;
        if !r.l_total.is_finite() {
            return Err(Error::Eval(format!("L_total = {}", r.l_total)));
        }
        Ok(r.l_total)
    };

    let analytic = {
        let mut ctx = Ctx::new(&model.store);
        let obs = Observation {
            views: &sample.views,
            instruction_id: sample.instruction_id,
            spatial: Spatial::Live(&step.depth),
        };
        let (total, _) = model.loss(&mut ctx, &obs, &sample.oracle, &sample.actions, switches)?;
        let g = ctx.tape.backward(total)?;
        ctx.param_grads(&g)
    };

    let mut excluded = Vec::new();
    let mut frozen_zero = true;
    for (id, p) in model.store.iter() {
        if !p.trainable {
            excluded.push(p.name.clone());
            frozen_zero &= analytic[id.index()].data().iter().all(|&v| v == 0.0);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for group in ParamGroup::ALL {
        let elems: Vec<(crate::nn::ParamId, usize)> = model
            .store
            .iter()
            .filter(|(_, p)| p.trainable && p.group == group)
            .flat_map(|(id, p)| (0..p.value.numel()).map(move |e| (id, e)))
            .collect();
        if elems.is_empty() {
            continue;
        }
        let picks = index::sample(&mut rng, elems.len(), CHECKS_PER_GROUP.min(elems.len())).into_vec();
        let mut worst = (0.0, None);
        let mut max_abs: f64 = 0.0;
        for k in picks {
            let (id, e) = elems[k];
            let orig = model.store.get(id).data()[e];
            model.store.get_mut(id).data_mut()[e] = orig + DEFAULT_STEP;
            let up = loss_at(&model)?;
            model.store.get_mut(id).data_mut()[e] = orig - DEFAULT_STEP;
            let down = loss_at(&model)?;
            model.store.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let a = analytic[id.index()].data()[e];
            max_abs = max_abs.max(a.abs());
            let err = relative_error(a, numeric, DEFAULT_ABS_FLOOR);
            if err >= worst.0 {
                worst = (err, Some(format!("{}[{e}]", model.store.param(id).name)));
            }
        }
        groups.push(GroupCheck {
            group,
            checked: CHECKS_PER_GROUP.min(elems.len()),
            max_rel_error: worst.0,
            max_abs_grad: max_abs,
            worst: worst.1,
            passed: worst.0 < DEFAULT_TOL,
        });
    }
    for g in groups.iter().filter(|g| !g.passed) {
        log::warn!("gradient check failed for {}: {:.3e} at {:?}", g.group.name(), g.max_rel_error, g.worst);
    }
    let passed = frozen_zero && groups.iter().all(|g| g.passed);
    Ok(GradCheckSummary {
        format_version: REPORT_VERSION,
        tolerance: DEFAULT_TOL,
        step: DEFAULT_STEP,
        groups,
        excluded,
        frozen_zero,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::ExpertPolicy;

    fn tiny() -> Config {
        let mut cfg = Config::micro();
        cfg.train.steps = 3;
        cfg
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::ActionHead, Tensor::row(vec![1.0, -1.0, 0.5]), true);
        let frozen = store.add("f", ParamGroup::Spatial3d, Tensor::row(vec![2.0]), false);
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Tensor::row(vec![3.0, -0.5, 0.0]), Tensor::row(vec![9.0])]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] + 0.9).abs() < 1e-8);
        assert_eq!(w[2], 0.5);
        assert_eq!(store.get(frozen).data(), &[2.0]);
    }

    #[test]
    fn zero_steps_and_zero_lr_keep_parameters() {
        let cfg = tiny();
        let data = generate_dataset(&cfg, 0, 1).unwrap();
        let mut zero = cfg.clone();
        zero.train.steps = 0;
        let init = Model::new(&cfg, cfg.train.seed).unwrap();
        let out = train(&zero, &data, |_| {}).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(Checkpoint::from_model(&out.model, 0), Checkpoint::from_model(&init, 0));

        let mut still = cfg.clone();
        still.train.lr = 0.0;
        // every batch is a permutation of the whole set: only summation order varies
        still.train.batch_size = data.episodes[0].steps.len();
        let out = train(&still, &data, |_| {}).unwrap();
        assert_eq!(Checkpoint::from_model(&out.model, 0), Checkpoint::from_model(&init, 0));
        assert_eq!(out.records.len(), cfg.train.steps);
        let first = out.records[0].l_total;
        assert!(first > 0.0);
        for r in &out.records {
            assert!((r.l_total - first).abs() <= 1e-12 * first, "{} vs {first}", r.l_total);
        }
    }

    #[test]
    fn loss_stream_is_deterministic() {
        let cfg = tiny();
        let data = generate_dataset(&cfg, 0, 2).unwrap();
        let a = train(&cfg, &data, |_| {}).unwrap();
        let b = train(&cfg, &data, |_| {}).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 3);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = tiny();
        let data = generate_dataset(&cfg, 0, 1).unwrap();
        let out = train(&cfg, &data, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::from_model(&out.model, 3).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().restore(&cfg).unwrap();
        let samples = prepare_samples(&out.model, &data).unwrap();
        for s in &samples {
            let obs = Observation {
                views: &s.views,
                instruction_id: s.instruction_id,
                spatial: Spatial::Cached(&s.spatial),
            };
            assert_eq!(out.model.infer(&obs).unwrap(), back.infer(&obs).unwrap());
        }
        let mut other = cfg.clone();
        other.thinker.layers = 1;
        assert!(matches!(
            Checkpoint::load(&path).unwrap().restore(&other),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn expert_policy_scores_perfectly() {
        let cfg = Config::toy();
        let mut expert = ExpertPolicy { cfg: cfg.world.clone() };
        let r = evaluate_closed_loop(&mut expert, &cfg.world, 20, 5).unwrap();
        assert_eq!(r.success_rate, Some(1.0));
        assert_eq!(r.mean_action_l1, Some(0.0));
        let empty = evaluate_closed_loop(&mut expert, &cfg.world, 0, 5).unwrap();
        assert_eq!(empty.n_episodes, 0);
        assert_eq!(empty.success_rate, None);
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let cfg = tiny();
        let mut other = cfg.clone();
        other.world.gain = 5.0;
        let data = generate_dataset(&other, 0, 1).unwrap();
        assert!(matches!(train(&cfg, &data, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn micro_gradients_match_finite_differences() {
        let s = run_grad_checks(&Config::micro(), 0).unwrap();
        for g in &s.groups {
            eprintln!("{:<18} n={:<3} err={:.2e} |g|max={:.2e} {:?}", g.group.name(), g.checked, g.max_rel_error, g.max_abs_grad, g.worst);
        }
        assert!(s.frozen_zero);
        assert!(!s.excluded.is_empty());
        assert!(s.groups.iter().all(|g| g.max_abs_grad > 0.0));
        assert!(s.passed);
    }

    #[test]
    fn disabled_heads_receive_no_gradient() {
        let mut cfg = Config::micro();
        cfg.train.enable_dyn = false;
        cfg.train.enable_dep = false;
        let s = run_grad_checks(&cfg, 1).unwrap();
        assert!(s.passed);
        for g in &s.groups {
            let silent = matches!(g.group, ParamGroup::DynDecoder | ParamGroup::DepthDecoders);
            assert_eq!(g.max_abs_grad == 0.0, silent, "{:?}", g.group);
        }
    }
}
