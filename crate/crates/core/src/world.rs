//! Planar reach-the-object world rendered from three affine viewpoints, with
//! a proportional-control expert and oracle depth/feature targets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, WorldConfig};
use crate::encoders::{SpatialEncoder, SpatialFeatures, SpatialInput, ViewId, ViewImage};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const SUPERSAMPLE: usize = 4;
const QUANTUM: f64 = 64.0;
const DEPTH_QUANTUM: f64 = 1e4;
const CENTER: [f64; 2] = [0.5, 0.5];
const CAMERA_HEIGHT: [f64; 3] = [1.0, 1.2, 1.3];
const GRIPPER_HEIGHT: f64 = 0.2;
const OBJECT_HEIGHT: f64 = 0.1;
const PLACE_MARGIN: f64 = 0.15;

pub type Action = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub pos: [f64; 2],
    pub color: usize,
    pub radius: f64,
}

/// `objects[target]` is the instruction object; its color is the instruction id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gripper: [f64; 2],
    pub objects: Vec<Object>,
    pub target: usize,
}

impl Scene {
    pub fn instruction_id(&self) -> usize {
        self.objects[self.target].color
    }

    pub fn target_pos(&self) -> [f64; 2] {
        self.objects[self.target].pos
    }

    pub fn distance_to_target(&self) -> f64 {
        let t = self.target_pos();
        (self.gripper[0] - t[0]).hypot(self.gripper[1] - t[1])
    }

    pub fn captured(&self, cfg: &WorldConfig) -> bool {
        self.distance_to_target() <= cfg.capture_radius
    }

    /// Moves the gripper by `step_size * a`, with `a` clipped to [-1, 1] and
    /// the gripper kept inside the workspace.
    pub fn step(&self, a: Action, cfg: &WorldConfig) -> Scene {
        let mut next = self.clone();
        for d in 0..2 {
            next.gripper[d] = (self.gripper[d] + cfg.step_size * a[d].clamp(-1.0, 1.0)).clamp(0.0, 1.0);
        }
        next
    }

    pub fn validate(&self, cfg: &WorldConfig) -> Result<()> {
        let inside = |p: [f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
        if self.target >= self.objects.len() {
            return Err(Error::contract("scene target index out of range"));
        }
        if !inside(self.gripper) || self.objects.iter().any(|o| !inside(o.pos)) {
            return Err(Error::contract("scene entity outside the workspace"));
        }
        if self.objects.iter().any(|o| o.color >= cfg.n_colors) {
            return Err(Error::contract("object color outside the palette"));
        }
        Ok(())
    }

    /// Target of a random color, 1..=max distractors of other colors, all
    /// non-overlapping, and a gripper starting clear of the target.
    pub fn sample<R: Rng>(rng: &mut R, cfg: &WorldConfig) -> Scene {
        let mut colors: Vec<usize> = (0..cfg.n_colors).collect();
        for i in (1..colors.len()).rev() {
            colors.swap(i, rng.random_range(0..=i));
        }
        let max_d = cfg.max_distractors.min(cfg.n_colors - 1);
        let n = 1 + rng.random_range(cfg.min_distractors.min(max_d)..=max_d);
        let mut objects: Vec<Object> = Vec::with_capacity(n);
        for &color in colors.iter().take(n) {
            let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
            let pos = loop {
                let p = [
                    rng.random_range(PLACE_MARGIN..=1.0 - PLACE_MARGIN),
                    rng.random_range(PLACE_MARGIN..=1.0 - PLACE_MARGIN),
                ];
                let clear = objects
                    .iter()
                    .all(|o| (o.pos[0] - p[0]).hypot(o.pos[1] - p[1]) > o.radius + radius + 0.02);
                if clear {
                    break p;
                }
            };
            objects.push(Object { pos, color, radius });
        }
        let target = objects[0].pos;
        let gripper = loop {
            let g = [rng.random_range(0.1..=0.9), rng.random_range(0.1..=0.9)];
            if (g[0] - target[0]).hypot(g[1] - target[1]) > cfg.capture_radius + 0.1 {
                break g;
            }
        };
        Scene {
            gripper,
            objects,
            target: 0,
        }
    }
}

/// Fixed affine map from workspace to view coordinates about the centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewTransform {
    pub a: [[f64; 2]; 2],
}

impl ViewTransform {
    pub fn of(view: ViewId) -> Self {
        let rot = |deg: f64| {
            let (s, c) = deg.to_radians().sin_cos();
            [[c, -s], [s, c]]
        };
        let scale = |sx: f64, sy: f64, m: [[f64; 2]; 2]| [[sx * m[0][0], sx * m[0][1]], [sy * m[1][0], sy * m[1][1]]];
        let a = match view {
            ViewId::M => [[1.0, 0.0], [0.0, 1.0]],
            ViewId::L => scale(0.7, 0.7, rot(25.0)),
            ViewId::R => scale(0.7, 0.65, rot(-30.0)),
        };
        ViewTransform { a }
    }

    pub fn to_view(&self, p: [f64; 2]) -> [f64; 2] {
        let d = [p[0] - CENTER[0], p[1] - CENTER[1]];
        [
            CENTER[0] + self.a[0][0] * d[0] + self.a[0][1] * d[1],
            CENTER[1] + self.a[1][0] * d[0] + self.a[1][1] * d[1],
        ]
    }

    pub fn to_world(&self, q: [f64; 2]) -> [f64; 2] {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        let e = [q[0] - CENTER[0], q[1] - CENTER[1]];
        [
            CENTER[0] + (d * e[0] - b * e[1]) / det,
            CENTER[1] + (-c * e[0] + a * e[1]) / det,
        ]
    }
}

/// Patch index containing a view-space point, row-major over the grid.
pub fn patch_of(q: [f64; 2], cfg: &WorldConfig) -> Option<usize> {
    let g = cfg.grid();
    let (x, y) = (q[0] * g as f64, q[1] * g as f64);
    if x < 0.0 || y < 0.0 || x >= g as f64 || y >= g as f64 {
        return None;
    }
    Some(y as usize * g + x as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub views: Vec<ViewImage>,
    /// Per view, one camera distance per patch.
    pub depth: Vec<Vec<f64>>,
}

fn quantize(v: f64, q: f64) -> f64 {
    (v * q).round() / q
}

/// Images and patch depth for the first `n_views` views. Channel 0 is the
/// gripper; channel `1 + color` holds objects of that color.
pub fn render_views(scene: &Scene, cfg: &WorldConfig) -> Rendered {
    let s = cfg.image_size;
    let c = cfg.channels();
    let p = cfg.patch_size;
    let g = cfg.grid();
    let mut discs: Vec<(usize, [f64; 2], f64, f64)> = vec![(0, scene.gripper, cfg.gripper_radius, GRIPPER_HEIGHT)];
    discs.extend(scene.objects.iter().map(|o| (1 + o.color, o.pos, o.radius, OBJECT_HEIGHT)));

    let mut views = Vec::with_capacity(cfg.n_views);
    let mut depth = Vec::with_capacity(cfg.n_views);
    for &view in ViewId::first(cfg.n_views) {
        let tf = ViewTransform::of(view);
        let mut img = ViewImage::blank(view, s, s, c);
        let mut patch_depth = vec![0.0; g * g];
        let cam = CAMERA_HEIGHT[view.index()];
        for y in 0..s {
            for x in 0..s {
                let mut cover = vec![0.0; discs.len()];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let q = [
                            (x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / s as f64,
                            (y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / s as f64,
                        ];
                        let w = tf.to_world(q);
                        for (k, &(_, centre, r, _)) in discs.iter().enumerate() {
                            if (w[0] - centre[0]).hypot(w[1] - centre[1]) <= r {
                                cover[k] += 1.0;
                            }
                        }
                    }
                }
                let mut top: f64 = 0.0;
                for (k, &(ch, _, _, h)) in discs.iter().enumerate() {
                    let cov = quantize(cover[k] / (SUPERSAMPLE * SUPERSAMPLE) as f64, QUANTUM);
                    if cov > 0.0 {
                        let v = (img.get(y, x, ch) + cov).min(1.0);
                        img.set(y, x, ch, v);
                    }
                    top = top.max(h * cov);
                }
                patch_depth[(y / p) * g + x / p] += (cam - top) / (p * p) as f64;
            }
        }
        views.push(img);
        depth.push(patch_depth.into_iter().map(|d| quantize(d, DEPTH_QUANTUM)).collect());
    }
    Rendered { views, depth }
}

/// Proportional controller toward the target, saturated at +-1.
pub fn expert_action(scene: &Scene, cfg: &WorldConfig) -> Action {
    let t = scene.target_pos();
    [
        (cfg.gain * (t[0] - scene.gripper[0])).clamp(-1.0, 1.0),
        (cfg.gain * (t[1] - scene.gripper[1])).clamp(-1.0, 1.0),
    ]
}

/// Expert chunk from `scene` and the scene after executing it.
pub fn expert_chunk(scene: &Scene, cfg: &WorldConfig) -> (Vec<Action>, Scene) {
    let mut s = scene.clone();
    let mut actions = Vec::with_capacity(cfg.chunk);
    for _ in 0..cfg.chunk {
        let a = expert_action(&s, cfg);
        s = s.step(a, cfg);
        actions.push(a);
    }
    (actions, s)
}

/// One chunk boundary of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub scene: Scene,
    pub next_scene: Scene,
    pub views: Vec<ViewImage>,
    pub depth: Vec<Vec<f64>>,
    pub next_depth: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub index: usize,
    pub instruction_id: usize,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.steps.iter().flat_map(|s| s.actions.iter())
    }
}

/// Rolls out the expert from `initial` for `ceil(H / K)` chunks.
pub fn expert_episode(index: usize, initial: Scene, cfg: &WorldConfig) -> Episode {
    let mut scene = initial;
    let mut steps = Vec::with_capacity(cfg.chunks());
    for _ in 0..cfg.chunks() {
        let (actions, next) = expert_chunk(&scene, cfg);
        let now = render_views(&scene, cfg);
        let later = render_views(&next, cfg);
        steps.push(Step {
            scene: scene.clone(),
            next_scene: next.clone(),
            views: now.views,
            depth: now.depth,
            next_depth: later.depth,
            actions,
        });
        scene = next;
    }
    Episode {
        index,
        instruction_id: steps[0].scene.instruction_id(),
        steps,
    }
}

/// Initial scene of episode `index` under `seed`; every episode draws from
/// its own ChaCha stream.
pub fn initial_scene(seed: u64, index: usize, cfg: &WorldConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    Scene::sample(&mut rng, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub n_episodes: usize,
    pub horizon: usize,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

pub fn generate_dataset(cfg: &Config, seed: u64, n_episodes: usize) -> Result<Dataset> {
    cfg.world.validate()?;
    if n_episodes == 0 {
        return Err(Error::contract("a dataset needs at least one episode"));
    }
    let episodes = (0..n_episodes)
        .map(|i| expert_episode(i, initial_scene(seed, i, &cfg.world), &cfg.world))
        .collect();
    Ok(Dataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            seed,
            config_hash: cfg.world_hash(),
            n_episodes,
            horizon: cfg.world.horizon,
            chunk: cfg.world.chunk,
        },
        episodes,
    })
}

impl Dataset {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for ep in &self.episodes {
            serde_json::to_writer(&mut w, ep)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::contract("empty dataset file"))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::contract(format!("dataset format {} unsupported", header.format_version)));
        }
        let mut episodes = Vec::with_capacity(header.n_episodes);
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                episodes.push(serde_json::from_str(&line)?);
            }
        }
        if episodes.len() != header.n_episodes {
            return Err(Error::contract(format!(
                "header promises {} episodes, file holds {}",
                header.n_episodes,
                episodes.len()
            )));
        }
        Ok(Dataset { header, episodes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Builds the frozen spatial stream exactly as the full model does.
pub fn oracle_encoder(cfg: &Config) -> (ParamStore, SpatialEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoders.spatial_seed);
    let enc = SpatialEncoder::new(&mut store, &mut rng, &cfg.encoders, &cfg.world);
    (store, enc)
}

pub fn spatial_features(rendered: &Rendered, enc: &SpatialEncoder, store: &ParamStore) -> Result<SpatialFeatures> {
    let inputs: Vec<SpatialInput> = rendered
        .views
        .iter()
        .zip(&rendered.depth)
        .map(|(image, depth)| SpatialInput { image, depth })
        .collect();
    enc.features(store, &inputs)
}

/// View-M patches showing any part of the target object.
pub fn target_patches(scene: &Scene, cfg: &WorldConfig) -> Vec<bool> {
    let mut single = cfg.clone();
    single.n_views = 1;
    let mut only = scene.clone();
    only.objects = vec![scene.objects[scene.target]];
    only.target = 0;
    only.gripper = [-1.0, -1.0];
    let img = &render_views(&only, &single).views[0];
    let ch = 1 + scene.instruction_id();
    let means = img.patch_channel_means(cfg.patch_size).expect("validated patch grid");
    (0..cfg.patches()).map(|p| means.get(p, ch) > 0.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleTargets {
    /// Per view, per patch camera distance in the next scene.
    pub depth: Vec<Vec<f64>>,
    /// Next-scene view-M spatial features at the selected patches.
    pub dyn_target: Tensor,
    /// Selected patches overlapping the target object in the current scene.
    pub mask: Vec<bool>,
}

/// Oracle inputs that do not depend on the selection, computed once per step.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCache {
    pub next_depth: Vec<Vec<f64>>,
    pub next_features_m: Tensor,
    pub target_patches: Vec<bool>,
}

impl OracleCache {
    pub fn new(scene: &Scene, next_scene: &Scene, cfg: &WorldConfig, enc: &SpatialEncoder, store: &ParamStore) -> Result<Self> {
        let later = render_views(next_scene, cfg);
        let feats = spatial_features(&later, enc, store)?;
        Ok(OracleCache {
            next_features_m: feats
                .final_layer(ViewId::M)
                .ok_or_else(|| Error::contract("oracle needs view M"))?
                .clone(),
            next_depth: later.depth,
            target_patches: target_patches(scene, cfg),
        })
    }

    pub fn select(&self, selection: &[usize]) -> Result<OracleTargets> {
        let n = self.target_patches.len();
        if let Some(&bad) = selection.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("selected patch {bad} outside {n} patches")));
        }
        Ok(OracleTargets {
            depth: self.next_depth.clone(),
            dyn_target: self.next_features_m.select_rows(selection),
            mask: selection.iter().map(|&i| self.target_patches[i]).collect(),
        })
    }
}

pub fn oracle_targets(
    scene: &Scene,
    next_scene: &Scene,
    selection: &[usize],
    cfg: &WorldConfig,
    enc: &SpatialEncoder,
    store: &ParamStore,
) -> Result<OracleTargets> {
    OracleCache::new(scene, next_scene, cfg, enc, store)?.select(selection)
}

/// Something that maps an observation to an action chunk.
pub trait Policy {
    fn act(&mut self, scene: &Scene, rendered: &Rendered) -> Result<Vec<Action>>;
}

/// The scripted expert, re-planned at each chunk boundary.
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    pub cfg: WorldConfig,
}

impl Policy for ExpertPolicy {
    fn act(&mut self, scene: &Scene, _: &Rendered) -> Result<Vec<Action>> {
        Ok(expert_chunk(scene, &self.cfg).0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RolloutStats {
    pub success: bool,
    pub executed: usize,
    /// Sum of |policy - expert| over every compared action entry.
    pub l1_sum: f64,
    pub l1_count: usize,
}

/// Executes whole chunks until the horizon; success once the gripper is
/// within the capture radius after any executed action. Each chunk is also
/// compared against the expert chunk from the same scene.
pub fn rollout<P: Policy + ?Sized>(policy: &mut P, initial: &Scene, cfg: &WorldConfig) -> Result<RolloutStats> {
    let mut scene = initial.clone();
    let mut stats = RolloutStats::default();
    while stats.executed < cfg.horizon {
        let rendered = render_views(&scene, cfg);
        let chunk = policy.act(&scene, &rendered)?;
        if chunk.is_empty() {
            return Err(Error::contract("policy returned an empty chunk"));
        }
        let (expert, _) = expert_chunk(&scene, cfg);
        for (a, e) in chunk.iter().zip(&expert) {
            stats.l1_sum += (a[0] - e[0]).abs() + (a[1] - e[1]).abs();
            stats.l1_count += 2;
        }
        for a in chunk {
            if stats.executed == cfg.horizon {
                break;
            }
            if !(a[0].is_finite() && a[1].is_finite()) {
                return Err(Error::Eval(format!("non-finite action {a:?}")));
            }
            scene = scene.step(a, cfg);
            stats.executed += 1;
            if scene.captured(cfg) {
                stats.success = true;
                return Ok(stats);
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    fn scene_with(objects: Vec<Object>) -> Scene {
        Scene {
            gripper: [-1.0, -1.0],
            objects,
            target: 0,
        }
    }

    #[test]
    fn sampled_scenes_are_valid() {
        let c = cfg();
        for i in 0..200 {
            let s = initial_scene(3, i, &c);
            s.validate(&c).unwrap();
            assert!((2..=4).contains(&s.objects.len()));
            let mut colors: Vec<usize> = s.objects.iter().map(|o| o.color).collect();
            colors.sort();
            colors.dedup();
            assert_eq!(colors.len(), s.objects.len());
            assert!(!s.captured(&c));
        }
        assert_eq!(initial_scene(3, 5, &c), initial_scene(3, 5, &c));
        assert_ne!(initial_scene(3, 5, &c), initial_scene(3, 6, &c));
    }

    #[test]
    fn transforms_invert() {
        for v in ViewId::ALL {
            let tf = ViewTransform::of(v);
            let p = [0.31, 0.77];
            let back = tf.to_world(tf.to_view(p));
            assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
            assert_eq!(tf.to_view(CENTER), CENTER);
        }
    }

    #[test]
    fn centre_object_lands_in_centre_patches() {
        let c = cfg();
        let r = render_views(
            &scene_with(vec![Object {
                pos: [0.5, 0.5],
                color: 2,
                radius: 0.08,
            }]),
            &c,
        );
        let means = r.views[0].patch_channel_means(4).unwrap();
        // the centre sits on the corner shared by patches 5, 6, 9, 10
        let lit: Vec<usize> = (0..16).filter(|&p| means.get(p, 3) > 0.0).collect();
        assert_eq!(lit, vec![5, 6, 9, 10]);
        for p in &lit {
            assert!((means.get(*p, 3) - means.get(5, 3)).abs() < 1e-12);
        }
    }

    #[test]
    fn footprints_follow_affine_maps() {
        let c = cfg();
        for pos in [[0.3, 0.3], [0.42, 0.62], [0.7, 0.35], [0.58, 0.71]] {
            let r = render_views(
                &scene_with(vec![Object {
                    pos,
                    color: 0,
                    radius: 0.04,
                }]),
                &c,
            );
            for (v, img) in r.views.iter().enumerate() {
                let means = img.patch_channel_means(4).unwrap();
                let best = (0..16).max_by(|&a, &b| means.get(a, 1).total_cmp(&means.get(b, 1))).unwrap();
                let want = patch_of(ViewTransform::of(ViewId::ALL[v]).to_view(pos), &c).unwrap();
                assert_eq!(best, want, "view {v} pos {pos:?}");
            }
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let c = cfg();
        let r = render_views(&scene_with(vec![]), &c);
        for (v, img) in r.views.iter().enumerate() {
            assert!(img.pixels().iter().all(|&p| p == 0.0));
            assert!(r.depth[v].iter().all(|&d| d == CAMERA_HEIGHT[v]));
        }
    }

    #[test]
    fn depth_is_positive_and_lower_over_objects() {
        let c = cfg();
        let s = initial_scene(1, 0, &c);
        let r = render_views(&s, &c);
        let t = target_patches(&s, &c);
        for (v, d) in r.depth.iter().enumerate() {
            assert!(d.iter().all(|&x| x > 0.0 && x <= CAMERA_HEIGHT[v]));
        }
        for (p, &hit) in t.iter().enumerate() {
            if hit {
                assert!(r.depth[0][p] < CAMERA_HEIGHT[0]);
            }
        }
    }

    #[test]
    fn expert_always_succeeds() {
        let c = cfg();
        let mut expert = ExpertPolicy { cfg: c.clone() };
        for i in 0..300 {
            let s = initial_scene(11, i, &c);
            let r = rollout(&mut expert, &s, &c).unwrap();
            assert!(r.success, "episode {i}");
            assert_eq!(r.l1_sum, 0.0);
            assert!(r.executed <= c.horizon);
            let (actions, _) = expert_chunk(&s, &c);
            assert!(actions.iter().flatten().all(|a| (-1.0..=1.0).contains(a)));
        }
    }

    #[test]
    fn chunk_count_and_determinism() {
        let mut c = Config::toy();
        c.world.horizon = 16;
        let d = generate_dataset(&c, 7, 1).unwrap();
        assert_eq!(d.episodes[0].steps.len(), 2);
        assert_eq!(d.episodes[0].actions().count(), 16);

        let mut a = Vec::new();
        let mut b = Vec::new();
        generate_dataset(&c, 7, 3).unwrap().write(&mut a).unwrap();
        generate_dataset(&c, 7, 3).unwrap().write(&mut b).unwrap();
        assert_eq!(a, b);
        let back = Dataset::read(&a[..]).unwrap();
        assert_eq!(back, generate_dataset(&c, 7, 3).unwrap());
        assert!(generate_dataset(&c, 7, 0).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let c = Config::toy();
        let mut buf = Vec::new();
        generate_dataset(&c, 1, 2).unwrap().write(&mut buf).unwrap();
        let cut = buf.iter().rposition(|&b| b == b'\n').unwrap();
        let cut = buf[..cut].iter().rposition(|&b| b == b'\n').unwrap();
        assert!(Dataset::read(&buf[..=cut]).is_err());
    }

    #[test]
    fn oracle_static_case_and_masks() {
        let c = Config::toy();
        let (store, enc) = oracle_encoder(&c);
        let s = initial_scene(2, 0, &c.world);
        let now = spatial_features(&render_views(&s, &c.world), &enc, &store).unwrap();
        let sel: Vec<usize> = (0..16).collect();
        let o = oracle_targets(&s, &s, &sel, &c.world, &enc, &store).unwrap();
        assert_eq!(&o.dyn_target, now.final_layer(ViewId::M).unwrap());
        assert_eq!(o.mask, target_patches(&s, &c.world));
        assert!(o.mask.iter().any(|&m| m));

        let empty: Vec<usize> = (0..16).filter(|&p| !o.mask[p]).take(2).collect();
        let o2 = oracle_targets(&s, &s, &empty, &c.world, &enc, &store).unwrap();
        assert!(o2.mask.iter().all(|&m| !m));
        assert!(oracle_targets(&s, &s, &[16], &c.world, &enc, &store).is_err());
    }

    #[test]
    fn moved_object_shifts_mask_and_target() {
        let c = Config::toy();
        let (store, enc) = oracle_encoder(&c);
        // small object centred in patch 5 (row 1, col 1), moved to patch 6
        let obj = |x: f64| Object {
            pos: [x, 0.375],
            color: 1,
            radius: 0.05,
        };
        let here = scene_with(vec![obj(0.375)]);
        let there = scene_with(vec![obj(0.625)]);
        let a = oracle_targets(&here, &there, &[5, 6], &c.world, &enc, &store).unwrap();
        let b = oracle_targets(&there, &here, &[5, 6], &c.world, &enc, &store).unwrap();
        assert_eq!(a.mask, vec![true, false]);
        assert_eq!(b.mask, vec![false, true]);
        let feats = |s: &Scene| {
            spatial_features(&render_views(s, &c.world), &enc, &store)
                .unwrap()
                .final_layer(ViewId::M)
                .unwrap()
                .clone()
        };
        assert_eq!(a.dyn_target, feats(&there).select_rows(&[5, 6]));
        assert_eq!(b.dyn_target, feats(&here).select_rows(&[5, 6]));
    }
}
