//! Desk-scale stand-ins for the three encoder streams: a FiLM-modulated
//! semantic stream, a trainable geometric stream and a frozen spatial stream
//! that sees oracle depth.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EncoderConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::nn::{Block, Ctx, Init, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewId {
    M,
    L,
    R,
}

impl ViewId {
    pub const ALL: [ViewId; 3] = [ViewId::M, ViewId::L, ViewId::R];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The first `n` views in canonical order (M, L, R).
    pub fn first(n: usize) -> &'static [ViewId] {
        &Self::ALL[..n.min(3)]
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViewId::M => "M",
            ViewId::L => "L",
            ViewId::R => "R",
        };
        f.write_str(s)
    }
}

/// H x W x C image with values in [0, 1], stored row-major (channel fastest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ImageRepr", try_from = "ImageRepr")]
pub struct ViewImage {
    pub view: ViewId,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ImageRepr {
    view: ViewId,
    pixels: Vec<Vec<Vec<f64>>>,
}

impl From<ViewImage> for ImageRepr {
    fn from(img: ViewImage) -> Self {
        let pixels = (0..img.height)
            .map(|y| {
                (0..img.width)
                    .map(|x| {
                        let o = (y * img.width + x) * img.channels;
                        img.pixels[o..o + img.channels].to_vec()
                    })
                    .collect()
            })
            .collect();
        ImageRepr { view: img.view, pixels }
    }
}

impl TryFrom<ImageRepr> for ViewImage {
    type Error = String;

    fn try_from(r: ImageRepr) -> std::result::Result<Self, String> {
        let height = r.pixels.len();
        let width = r.pixels.first().map(Vec::len).unwrap_or(0);
        let channels = r.pixels.first().and_then(|row| row.first()).map(Vec::len).unwrap_or(0);
        let mut pixels = Vec::with_capacity(height * width * channels);
        for row in &r.pixels {
            if row.len() != width {
                return Err("ragged image rows".into());
            }
            for px in row {
                if px.len() != channels {
                    return Err("ragged image channels".into());
                }
                pixels.extend_from_slice(px);
            }
        }
        ViewImage::new(r.view, height, width, channels, pixels).map_err(|e| e.to_string())
    }
}

impl ViewImage {
    pub fn new(view: ViewId, height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height * width * channels == 0 || pixels.len() != height * width * channels {
            return Err(Error::shape("view_image", &[height, width, channels], &[pixels.len()]));
        }
        Ok(ViewImage {
            view,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn blank(view: ViewId, height: usize, width: usize, channels: usize) -> Self {
        ViewImage {
            view,
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    fn check_patch(&self, patch: usize) -> Result<(usize, usize)> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::config(format!(
                "{}x{} image not divisible into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        Ok((self.height / patch, self.width / patch))
    }

    /// Flattened patches, one row per patch in row-major grid order; within a
    /// patch the order is (dy, dx, channel).
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        let (gh, gw) = self.check_patch(patch)?;
        let dim = patch * patch * self.channels;
        let mut data = Vec::with_capacity(gh * gw * dim);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let o = ((py * patch + dy) * self.width + px * patch + dx) * self.channels;
                        data.extend_from_slice(&self.pixels[o..o + self.channels]);
                    }
                }
            }
        }
        Ok(Tensor::matrix(gh * gw, dim, data))
    }

    /// Per-patch mean of every channel.
    pub fn patch_channel_means(&self, patch: usize) -> Result<Tensor> {
        let (gh, gw) = self.check_patch(patch)?;
        let c = self.channels;
        let mut data = vec![0.0; gh * gw * c];
        let norm = 1.0 / (patch * patch) as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let p = (y / patch) * gw + x / patch;
                for ch in 0..c {
                    data[p * c + ch] += self.get(y, x, ch) * norm;
                }
            }
        }
        Ok(Tensor::matrix(gh * gw, c, data))
    }
}

/// Instruction vector `t` looked up from a learned table.
#[derive(Clone, Debug)]
pub struct InstructionEmbedding {
    pub instruction_id: usize,
    pub vector: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sem,
    Geo,
    Spatial3d,
    Obj3d,
    Geo3d,
    Agg3d,
    Dyn,
    Dep,
    Action,
    Instruction,
}

/// A token matrix on the tape tagged with view, role and source patches.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub tokens: Var,
    pub view: Option<ViewId>,
    pub role: Role,
    pub patch_index: Option<Vec<usize>>,
}

impl TokenSet {
    pub fn patches(tokens: Var, view: ViewId, role: Role, n: usize) -> Self {
        TokenSet {
            tokens,
            view: Some(view),
            role,
            patch_index: Some((0..n).collect()),
        }
    }

    pub fn learned(tokens: Var, view: Option<ViewId>, role: Role) -> Self {
        TokenSet {
            tokens,
            view,
            role,
            patch_index: None,
        }
    }

    pub fn with_role(&self, tokens: Var, role: Role) -> Self {
        TokenSet {
            tokens,
            view: self.view,
            role,
            patch_index: self.patch_index.clone(),
        }
    }
}

/// Per-layer instruction-conditioned scale and shift.
#[derive(Clone, Debug)]
pub struct FilmParams {
    pub gamma: Vec<Linear>,
    pub beta: Vec<Linear>,
}

impl FilmParams {
    fn check(&self, layer: usize, d_v: usize) -> Result<()> {
        let (g, b) = (&self.gamma[layer], &self.beta[layer]);
        if g.d_out != d_v || b.d_out != d_v {
            return Err(Error::config(format!(
                "FiLM layer {layer} emits widths {}/{} for {d_v}-wide tokens",
                g.d_out, b.d_out
            )));
        }
        Ok(())
    }
}

fn hidden(cfg: &EncoderConfig) -> usize {
    cfg.ffn_mult * cfg.d_model
}

/// Fixed Fourier features of patch centres on a `grid`×`grid` layout, one
/// row per patch in grid order. Columns alternate sin/cos; the first half
/// encodes x, the second half y, with frequencies `π/2, π, 3π/2, ...` over
/// coordinates in (0, 1).
pub fn grid_position_table(grid: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = Tensor::zeros(grid * grid, d);
    for r in 0..grid {
        for c in 0..grid {
            let row = out.row_mut(r * grid + c);
            for (axis, coord) in [(0, c), (1, r)] {
                let u = (coord as f64 + 0.5) / grid as f64;
                for j in 0..half {
                    let w = std::f64::consts::FRAC_PI_2 * (j / 2 + 1) as f64;
                    row[axis * half + j] = if j % 2 == 0 { (w * u).sin() } else { (w * u).cos() };
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub film: FilmParams,
    pub patch_size: usize,
}

impl SemanticEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, enc: &EncoderConfig, world: &WorldConfig) -> Self {
        let mut init = Init::new(store, rng, ParamGroup::SemanticEncoder);
        let d = enc.d_model;
        let embed = init.linear("sem.embed", world.patch_dim(), d, true);
        let pos = init.constant("sem.pos", grid_position_table(world.grid(), d));
        let blocks = (0..enc.semantic_layers)
            .map(|l| init.block(&format!("sem.block{l}"), d, enc.heads, hidden(enc)))
            .collect();
        init.group(ParamGroup::Film);
        let mut gamma = Vec::new();
        let mut beta = Vec::new();
        for l in 0..enc.semantic_layers {
            gamma.push(init.linear_std(&format!("film{l}.gamma"), enc.d_instr, d, true, 0.1));
            beta.push(init.linear_std(&format!("film{l}.beta"), enc.d_instr, d, true, 0.1));
        }
        SemanticEncoder {
            embed,
            pos,
            blocks,
            film: FilmParams { gamma, beta },
            patch_size: world.patch_size,
        }
    }

    fn embed(&self, ctx: &mut Ctx, img: &ViewImage) -> Result<(Var, usize)> {
        let patches = img.patches(self.patch_size)?;
        let n = patches.rows();
        let x = ctx.tape.constant(patches);
        let z = self.embed.forward(ctx, x)?;
        let pos = ctx.p(self.pos);
        if ctx.tape.dims(pos).0 != n {
            return Err(Error::config(format!("semantic encoder built for a different patch count than {n}")));
        }
        Ok((ctx.tape.add(z, pos)?, n))
    }

    /// Every layer computes `(1 + gamma_l(t)) ⊙ block_l(z) + beta_l(t)`.
    pub fn encode(&self, ctx: &mut Ctx, img: &ViewImage, t: &InstructionEmbedding) -> Result<TokenSet> {
        let (mut z, n) = self.embed(ctx, img)?;
        let d = ctx.tape.dims(z).1;
        for (l, block) in self.blocks.iter().enumerate() {
            self.film.check(l, d)?;
            let a = block.forward(ctx, z, None)?;
            let g = self.film.gamma[l].forward(ctx, t.vector)?;
            let scale = ctx.tape.add_const(g, 1.0);
            let b = self.film.beta[l].forward(ctx, t.vector)?;
            let m = ctx.tape.mul_row(a, scale)?;
            z = ctx.tape.add_row(m, b)?;
        }
        Ok(TokenSet::patches(z, img.view, Role::Sem, n))
    }

    /// Same stack with FiLM switched off.
    pub fn encode_unmodulated(&self, ctx: &mut Ctx, img: &ViewImage) -> Result<TokenSet> {
        let (mut z, n) = self.embed(ctx, img)?;
        for block in &self.blocks {
            z = block.forward(ctx, z, None)?;
        }
        Ok(TokenSet::patches(z, img.view, Role::Sem, n))
    }
}

/// Trainable geometric stream. Layer 0 is the plain patch embedding; the
/// positional and view embeddings are added on entry to the first block.
#[derive(Clone, Debug)]
pub struct GeometricEncoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub view_embed: ParamId,
    pub blocks: Vec<Block>,
    pub patch_size: usize,
}

impl GeometricEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, enc: &EncoderConfig, world: &WorldConfig) -> Self {
        let mut init = Init::new(store, rng, ParamGroup::GeometricEncoder);
        let d = enc.d_model;
        GeometricEncoder {
            embed: init.linear("geo.embed", world.patch_dim(), d, true),
            pos: init.constant("geo.pos", grid_position_table(world.grid(), d)),
            view_embed: init.randn("geo.view", 3, d, 0.5),
            blocks: (0..enc.geo_layers)
                .map(|l| init.block(&format!("geo.block{l}"), d, enc.heads, hidden(enc)))
                .collect(),
            patch_size: world.patch_size,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Features `z_0 ..= z_L'` for one view.
    pub fn encode(&self, ctx: &mut Ctx, img: &ViewImage) -> Result<Vec<TokenSet>> {
        let patches = img.patches(self.patch_size)?;
        let n = patches.rows();
        let x = ctx.tape.constant(patches);
        let z0 = self.embed.forward(ctx, x)?;
        let mut layers = vec![TokenSet::patches(z0, img.view, Role::Geo, n)];
        let pos = ctx.p(self.pos);
        let views = ctx.p(self.view_embed);
        let view_row = ctx.tape.slice_rows(views, img.view.index(), 1)?;
        let mut z = ctx.tape.add(z0, pos)?;
        z = ctx.tape.add_row(z, view_row)?;
        for block in &self.blocks {
            z = block.forward(ctx, z, None)?;
            layers.push(TokenSet::patches(z, img.view, Role::Geo, n));
        }
        Ok(layers)
    }
}

/// One view's input to the frozen spatial stream: the image plus oracle
/// per-patch depth.
#[derive(Clone, Copy, Debug)]
pub struct SpatialInput<'a> {
    pub image: &'a ViewImage,
    pub depth: &'a [f64],
}

/// Frozen spatial stream over all views jointly. Each patch token embeds the
/// raw patch, its oracle depth and its per-channel (object identity) coverage.
#[derive(Clone, Debug)]
pub struct SpatialEncoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub view_embed: ParamId,
    pub blocks: Vec<Block>,
    pub patch_size: usize,
}

/// Plain-tensor spatial features, `layers[view][layer]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatures {
    pub views: Vec<ViewId>,
    pub layers: Vec<Vec<Tensor>>,
}

impl SpatialFeatures {
    pub fn final_layer(&self, view: ViewId) -> Option<&Tensor> {
        let i = self.views.iter().position(|&v| v == view)?;
        self.layers[i].last()
    }
}

impl SpatialEncoder {
    /// Frozen parameters come from their own seed so oracle targets do not
    /// depend on the training seed.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, enc: &EncoderConfig, world: &WorldConfig) -> Self {
        let mut init = Init::new(store, rng, ParamGroup::Spatial3d).frozen();
        let d = enc.d_model;
        let d_in = world.patch_dim() + 1 + world.channels();
        SpatialEncoder {
            embed: init.linear_std("s3d.embed", d_in, d, true, 1.0 / (d_in as f64).sqrt()),
            pos: init.constant("s3d.pos", grid_position_table(world.grid(), d)),
            view_embed: init.randn("s3d.view", 3, d, 0.5),
            blocks: (0..enc.geo_layers)
                .map(|l| init.block(&format!("s3d.block{l}"), d, enc.heads, hidden(enc)))
                .collect(),
            patch_size: world.patch_size,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn inputs(&self, input: &SpatialInput) -> Result<Tensor> {
        let patches = input.image.patches(self.patch_size)?;
        let means = input.image.patch_channel_means(self.patch_size)?;
        let n = patches.rows();
        if input.depth.len() != n {
            return Err(Error::shape("spatial depth", &[n], &[input.depth.len()]));
        }
        let cols = patches.cols() + 1 + means.cols();
        let mut data = Vec::with_capacity(n * cols);
        for p in 0..n {
            data.extend_from_slice(patches.row_slice(p));
            data.push(input.depth[p]);
            data.extend_from_slice(means.row_slice(p));
        }
        Ok(Tensor::matrix(n, cols, data))
    }

    /// Per-view, per-layer features (`z_0 ..= z_L'`), attending across all
    /// views jointly.
    pub fn encode(&self, ctx: &mut Ctx, views: &[SpatialInput]) -> Result<Vec<Vec<TokenSet>>> {
        if views.is_empty() || views.len() > 3 {
            return Err(Error::contract(format!("spatial stream takes 1-3 views, got {}", views.len())));
        }
        let pos = ctx.p(self.pos);
        let view_table = ctx.p(self.view_embed);
        let mut starts = Vec::with_capacity(views.len());
        let mut embedded = Vec::with_capacity(views.len());
        let mut offset = 0;
        for input in views {
            let x = ctx.tape.constant(self.inputs(input)?);
            let z = self.embed.forward(ctx, x)?;
            let n = ctx.tape.dims(z).0;
            let row = ctx.tape.slice_rows(view_table, input.image.view.index(), 1)?;
            let z = ctx.tape.add(z, pos)?;
            embedded.push(ctx.tape.add_row(z, row)?);
            starts.push((offset, n));
            offset += n;
        }
        let mut layers: Vec<Vec<TokenSet>> = views
            .iter()
            .zip(&embedded)
            .zip(&starts)
            .map(|((input, &z), &(_, n))| vec![TokenSet::patches(z, input.image.view, Role::Spatial3d, n)])
            .collect();
        let mut joint = ctx.tape.concat_rows(&embedded)?;
        for block in &self.blocks {
            joint = block.forward(ctx, joint, None)?;
            for (v, &(start, n)) in starts.iter().enumerate() {
                let part = ctx.tape.slice_rows(joint, start, n)?;
                layers[v].push(TokenSet::patches(part, views[v].image.view, Role::Spatial3d, n));
            }
        }
        Ok(layers)
    }

    /// Evaluates the frozen stream off-tape.
    pub fn features(&self, store: &ParamStore, views: &[SpatialInput]) -> Result<SpatialFeatures> {
        let mut ctx = Ctx::new(store);
        let layers = self.encode(&mut ctx, views)?;
        Ok(SpatialFeatures {
            views: views.iter().map(|v| v.image.view).collect(),
            layers: layers
                .iter()
                .map(|per| per.iter().map(|ts| ctx.tape.value(ts.tokens).clone()).collect())
                .collect(),
        })
    }
}
