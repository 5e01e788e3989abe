//! FluNet: patch embedding, a four-stage encoder of attention blocks with
//! spatial patch merging, and a point-wise regression head averaged into a
//! single fluency score.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::conv3d_as_patches;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::graph::{Graph, Var, ZERO_ROW};
use crate::params::{trunc_normal, Bound, ParamSet};
use crate::tensor::Tensor;
use crate::tpsa::{tpsa_attention, TpsaConfig, TpsaParams, TpsaVars, WindowPlan};

/// Activation used inside MLPs and the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    #[default]
    GeluTanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Base channel width `C`; stage `s` runs at `C * 2^s`.
    pub channels: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window_t: usize,
    pub window_s: usize,
    pub gamma: usize,
    /// Stages whose blocks use compressed keys; the others use `gamma = 1`.
    pub tpsa_stages: [bool; 4],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_patch")]
    pub patch: [usize; 3],
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    /// Alternate unshifted and half-window-shifted blocks.
    #[serde(default = "default_true")]
    pub shifted_windows: bool,
    #[serde(default)]
    pub shared_bias: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    /// Per-channel statistics that standardize `[0, 1]` RGB input.
    #[serde(default = "default_input_mean")]
    pub input_mean: [f64; 3],
    #[serde(default = "default_input_std")]
    pub input_std: [f64; 3],
}

fn default_patch() -> [usize; 3] {
    [2, 4, 4]
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_head_hidden() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-5
}
fn default_input_mean() -> [f64; 3] {
    [0.485, 0.456, 0.406]
}
fn default_input_std() -> [f64; 3] {
    [0.229, 0.224, 0.225]
}

impl ModelConfig {
    /// Desk-scale profile: C=24, depths (1,1,2,1), 16 frames of 56x56,
    /// window (4,7,7), gamma 2.
    pub fn toy() -> Self {
        Self {
            channels: 24,
            depths: [1, 1, 2, 1],
            heads: [3, 6, 12, 24],
            window_t: 4,
            window_s: 7,
            gamma: 2,
            tpsa_stages: [true; 4],
            frames: 16,
            height: 56,
            width: 56,
            patch: default_patch(),
            mlp_ratio: 4,
            head_hidden: 64,
            shifted_windows: true,
            shared_bias: false,
            activation: Activation::GeluTanh,
            norm_eps: 1e-5,
            input_mean: default_input_mean(),
            input_std: default_input_std(),
        }
    }

    /// Full-size profile: C=96, depths (2,2,6,2), 128 frames of 224x224,
    /// window (32,7,7), gamma 2.
    pub fn full() -> Self {
        Self {
            channels: 96,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            window_t: 32,
            window_s: 7,
            gamma: 2,
            tpsa_stages: [true; 4],
            frames: 128,
            height: 224,
            width: 224,
            ..Self::toy()
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels << stage
    }

    pub fn stage_attention(&self, stage: usize) -> TpsaConfig {
        TpsaConfig {
            window_t: self.window_t,
            window_s: self.window_s,
            gamma: if self.tpsa_stages[stage] { self.gamma } else { 1 },
            heads: self.heads[stage],
            channels: self.stage_channels(stage),
            shared_bias: self.shared_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("channels and input geometry must be positive".into()));
        }
        if self.patch.contains(&0) || self.mlp_ratio == 0 || self.head_hidden == 0 {
            return Err(Error::Config("patch, mlp ratio and head width must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if !self.input_mean.iter().all(|m| m.is_finite()) || !self.input_std.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config("input mean must be finite and input std positive".into()));
        }
        for s in 0..4 {
            self.stage_attention(s).validate()?;
        }
        Ok(())
    }

    /// Feature grid entering each stage and the encoder output grid.
    pub fn stage_grids(&self) -> [[usize; 3]; 5] {
        let mut g = [[0; 3]; 5];
        g[0] = [
            self.frames.div_ceil(self.patch[0]),
            self.height.div_ceil(self.patch[1]),
            self.width.div_ceil(self.patch[2]),
        ];
        for s in 1..4 {
            let p = g[s - 1];
            g[s] = [p[0], p[1].div_ceil(2), p[2].div_ceil(2)];
        }
        g[4] = g[3];
        g
    }

    /// Shift requested for block `b` of a stage.
    pub fn block_shift(&self, stage: usize, block: usize) -> [usize; 3] {
        if self.shifted_windows && block % 2 == 1 {
            self.stage_attention(stage).half_shift()
        } else {
            [0; 3]
        }
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

/// Freshly initialized parameters: truncated-normal (std 0.02) weights, zero
/// biases, unit norm scales.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let c = cfg.channels;
    let k_in = cfg.patch.iter().product::<usize>() * 3;
    p.insert("patch_embed.weight", trunc_normal(&[k_in, c], 0.02, &mut rng))?;
    p.insert("patch_embed.bias", Tensor::zeros(&[c]))?;
    p.insert("patch_norm.weight", Tensor::full(&[c], 1.0))?;
    p.insert("patch_norm.bias", Tensor::zeros(&[c]))?;
    for s in 0..4 {
        let cs = cfg.stage_channels(s);
        let hidden = cs * cfg.mlp_ratio;
        let attn = cfg.stage_attention(s);
        for b in 0..cfg.depths[s] {
            let pre = block_prefix(s, b);
            p.insert(format!("{pre}.norm1.weight"), Tensor::full(&[cs], 1.0))?;
            p.insert(format!("{pre}.norm1.bias"), Tensor::zeros(&[cs]))?;
            TpsaParams::init(&attn, &mut rng)?.insert_into(&mut p, &format!("{pre}.attn"))?;
            p.insert(format!("{pre}.norm2.weight"), Tensor::full(&[cs], 1.0))?;
            p.insert(format!("{pre}.norm2.bias"), Tensor::zeros(&[cs]))?;
            p.insert(format!("{pre}.mlp.fc1.weight"), trunc_normal(&[cs, hidden], 0.02, &mut rng))?;
            p.insert(format!("{pre}.mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
            p.insert(format!("{pre}.mlp.fc2.weight"), trunc_normal(&[hidden, cs], 0.02, &mut rng))?;
            p.insert(format!("{pre}.mlp.fc2.bias"), Tensor::zeros(&[cs]))?;
        }
        if s < 3 {
            p.insert(format!("stages.{s}.merge.norm.weight"), Tensor::full(&[4 * cs], 1.0))?;
            p.insert(format!("stages.{s}.merge.norm.bias"), Tensor::zeros(&[4 * cs]))?;
            p.insert(
                format!("stages.{s}.merge.reduction.weight"),
                trunc_normal(&[4 * cs, 2 * cs], 0.02, &mut rng),
            )?;
        }
    }
    let ce = cfg.stage_channels(3);
    p.insert("norm.weight", Tensor::full(&[ce], 1.0))?;
    p.insert("norm.bias", Tensor::zeros(&[ce]))?;
    p.insert("head.fc1.weight", trunc_normal(&[ce, cfg.head_hidden], 0.02, &mut rng))?;
    p.insert("head.fc1.bias", Tensor::zeros(&[cfg.head_hidden]))?;
    p.insert("head.fc2.weight", trunc_normal(&[cfg.head_hidden, 1], 0.02, &mut rng))?;
    p.insert("head.fc2.bias", Tensor::zeros(&[1]))?;
    Ok(p)
}

/// Token rows `[T'*H'*W', C]` together with their grid.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub rows: Var,
    pub grid: [usize; 3],
}

fn activation(g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::GeluTanh => g.gelu(x),
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_broadcast(y, b),
        None => Ok(y),
    }
}

/// Window plans shared by every block of the same stage and shift.
#[derive(Clone, Debug)]
pub struct StagePlans {
    plans: Vec<[Arc<WindowPlan>; 2]>,
    merges: Vec<Arc<Vec<u32>>>,
}

impl StagePlans {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let grids = cfg.stage_grids();
        let mut plans = Vec::with_capacity(4);
        let mut merges = Vec::with_capacity(3);
        for s in 0..4 {
            let attn = cfg.stage_attention(s);
            let plain = Arc::new(WindowPlan::new(grids[s], &attn, [0; 3])?);
            let shifted = Arc::new(WindowPlan::new(grids[s], &attn, attn.half_shift())?);
            plans.push([plain, shifted]);
            if s < 3 {
                merges.push(Arc::new(merge_index(grids[s])));
            }
        }
        Ok(Self { plans, merges })
    }

    pub fn plan(&self, stage: usize, shifted: bool) -> &WindowPlan {
        &self.plans[stage][shifted as usize]
    }
}

/// Gather index for 2x2 spatial merging: each output token takes
/// `(2i, 2j)`, `(2i+1, 2j)`, `(2i, 2j+1)`, `(2i+1, 2j+1)`, zero-padding odd edges.
fn merge_index(grid: [usize; 3]) -> Vec<u32> {
    let [t, h, w] = grid;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(t * ho * wo * 4);
    for tt in 0..t {
        for i in 0..ho {
            for j in 0..wo {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (hi, wj) = (2 * i + di, 2 * j + dj);
                    idx.push(if hi < h && wj < w {
                        ((tt * h + hi) * w + wj) as u32
                    } else {
                        ZERO_ROW
                    });
                }
            }
        }
    }
    idx
}

/// Patch embedding followed by layer norm: `[T, H, W, 3]` to a
/// `T/2 x H/4 x W/4` grid of `C`-channel tokens.
pub fn patch_embed(g: &mut Graph, video: Var, p: &Bound, cfg: &ModelConfig) -> Result<FeatureMap> {
    let s = g.shape(video).to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(dim_err!("video must be [T,H,W,3], got {:?}", s));
    }
    if s[..3].contains(&0) {
        return Err(arg_err!("empty video {:?}", s));
    }
    let (y, geo) = conv3d_as_patches(
        g,
        video,
        p.var("patch_embed.weight")?,
        p.var("patch_embed.bias")?,
        cfg.patch,
        cfg.patch,
    )?;
    let rows = g.reshape(y, &[geo.patches(), cfg.channels])?;
    let rows = g.layer_norm(
        rows,
        p.var("patch_norm.weight")?,
        p.var("patch_norm.bias")?,
        cfg.norm_eps,
    )?;
    Ok(FeatureMap {
        rows,
        grid: geo.output,
    })
}

fn block(
    g: &mut Graph,
    x: Var,
    plan: &WindowPlan,
    p: &Bound,
    prefix: &str,
    attn: &TpsaConfig,
    cfg: &ModelConfig,
) -> Result<Var> {
    let n1 = g.layer_norm(
        x,
        p.var(&format!("{prefix}.norm1.weight"))?,
        p.var(&format!("{prefix}.norm1.bias"))?,
        cfg.norm_eps,
    )?;
    let vars = TpsaVars::bind(p, &format!("{prefix}.attn"))?;
    let a = tpsa_attention(g, n1, plan, &vars, attn)?;
    let x = g.add(x, a.out)?;
    let n2 = g.layer_norm(
        x,
        p.var(&format!("{prefix}.norm2.weight"))?,
        p.var(&format!("{prefix}.norm2.bias"))?,
        cfg.norm_eps,
    )?;
    let h = linear(
        g,
        n2,
        p.var(&format!("{prefix}.mlp.fc1.weight"))?,
        Some(p.var(&format!("{prefix}.mlp.fc1.bias"))?),
    )?;
    let h = activation(g, h, cfg.activation)?;
    let h = linear(
        g,
        h,
        p.var(&format!("{prefix}.mlp.fc2.weight"))?,
        Some(p.var(&format!("{prefix}.mlp.fc2.bias"))?),
    )?;
    g.add(x, h)
}

fn patch_merge(g: &mut Graph, x: FeatureMap, index: &Arc<Vec<u32>>, stage: usize, p: &Bound, cfg: &ModelConfig) -> Result<FeatureMap> {
    let cs = cfg.stage_channels(stage);
    let [t, h, w] = x.grid;
    let grid = [t, h.div_ceil(2), w.div_ceil(2)];
    let n: usize = grid.iter().product();
    let y = g.gather_rows(x.rows, index.clone())?;
    let y = g.reshape(y, &[n, 4 * cs])?;
    let y = g.layer_norm(
        y,
        p.var(&format!("stages.{stage}.merge.norm.weight"))?,
        p.var(&format!("stages.{stage}.merge.norm.bias"))?,
        cfg.norm_eps,
    )?;
    let rows = linear(g, y, p.var(&format!("stages.{stage}.merge.reduction.weight"))?, None)?;
    Ok(FeatureMap { rows, grid })
}

/// Four stages of attention blocks; spatial 2x2 merging between stages.
/// Time is never downsampled after the embedding.
pub fn encode(g: &mut Graph, x: FeatureMap, plans: &StagePlans, p: &Bound, cfg: &ModelConfig) -> Result<FeatureMap> {
    let grids = cfg.stage_grids();
    if x.grid != grids[0] {
        return Err(Error::Config(format!(
            "feature grid {:?} does not match configured {:?}",
            x.grid, grids[0]
        )));
    }
    let mut x = x;
    for s in 0..4 {
        let attn = cfg.stage_attention(s);
        for b in 0..cfg.depths[s] {
            let shifted = cfg.block_shift(s, b) != [0; 3];
            let rows = block(g, x.rows, plans.plan(s, shifted), p, &block_prefix(s, b), &attn, cfg)?;
            x.rows = rows;
        }
        if s < 3 {
            x = patch_merge(g, x, &plans.merges[s], s, p, cfg)?;
        }
    }
    let rows = g.layer_norm(x.rows, p.var("norm.weight")?, p.var("norm.bias")?, cfg.norm_eps)?;
    Ok(FeatureMap { rows, grid: x.grid })
}

/// Two point-wise projections down to one channel, then the mean over every
/// token of the grid.
pub fn head_score(g: &mut Graph, x: FeatureMap, p: &Bound, cfg: &ModelConfig) -> Result<Var> {
    let ce = cfg.stage_channels(3);
    if g.shape(x.rows).get(1) != Some(&ce) {
        return Err(dim_err!("head expects {ce} channels, got {:?}", g.shape(x.rows)));
    }
    let h = linear(g, x.rows, p.var("head.fc1.weight")?, Some(p.var("head.fc1.bias")?))?;
    let h = activation(g, h, cfg.activation)?;
    let y = linear(g, h, p.var("head.fc2.weight")?, Some(p.var("head.fc2.bias")?))?;
    g.mean(y)
}

/// Complete scoring path for one standardized video; the returned node is the
/// scalar score.
pub fn forward(g: &mut Graph, video: Var, plans: &StagePlans, p: &Bound, cfg: &ModelConfig) -> Result<Var> {
    let xp = patch_embed(g, video, p, cfg)?;
    let xe = encode(g, xp, plans, p, cfg)?;
    head_score(g, xe, p, cfg)
}

/// Config plus cached window plans; scoring is pure given the parameters.
#[derive(Clone, Debug)]
pub struct FluNet {
    config: ModelConfig,
    plans: Arc<StagePlans>,
}

impl FluNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let plans = Arc::new(StagePlans::new(&config)?);
        Ok(Self { config, plans })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plans(&self) -> &StagePlans {
        &self.plans
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        init_params(&self.config, seed)
    }

    pub fn check_video(&self, video: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.frames, c.height, c.width, 3];
        if video.shape() != want {
            return Err(dim_err!(
                "video shape {:?} does not match configured {:?}",
                video.shape(),
                want
            ));
        }
        Ok(())
    }

    /// `(x - mean) / std` per RGB channel.
    pub fn standardize(&self, video: &Tensor) -> Result<Tensor> {
        self.check_video(video)?;
        let (m, s) = (self.config.input_mean, self.config.input_std);
        let data = video.data().iter().enumerate().map(|(i, v)| (v - m[i % 3]) / s[i % 3]).collect();
        Tensor::new(video.shape().to_vec(), data)
    }

    /// Adds the scoring path for a `[0, 1]` RGB `video` to `g`.
    pub fn forward(&self, g: &mut Graph, video: &Tensor, p: &Bound) -> Result<Var> {
        let v = g.input(self.standardize(video)?)?;
        forward(g, v, &self.plans, p, &self.config)
    }

    pub fn score(&self, params: &ParamSet, video: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g)?;
        let y = self.forward(&mut g, video, &bound)?;
        g.value(y).item()
    }

    /// Scores videos independently in parallel; output order follows input order.
    pub fn score_batch(&self, params: &ParamSet, videos: &[Tensor]) -> Result<Vec<f64>> {
        videos.par_iter().map(|v| self.score(params, v)).collect()
    }
}
