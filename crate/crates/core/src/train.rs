//! Training driver: rank learning on synthesized chains, L1 fine-tuning on
//! labeled videos, and their weighted combination, optimized with AdamW under
//! a warmup-free cosine schedule.

use std::borrow::Cow;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::graph::Graph;
use crate::losses::{ft_loss_graph, joint_loss_graph, rank_loss_graph, DEFAULT_ALPHA, DEFAULT_MARGIN};
use crate::model::FluNet;
use crate::params::ParamSet;
use crate::synth::{synthesize_ranked_set, SynthSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rank,
    Finetune,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    pub drop_rates: Vec<f64>,
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub cosine: bool,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Stop once this many optimizer steps have run (all epochs otherwise).
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Randomly flip anchors in height, width and time before each chain
    /// is synthesized.
    #[serde(default)]
    pub augment: bool,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_margin() -> f64 {
    DEFAULT_MARGIN
}
fn default_intervals() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_clip() -> Option<f64> {
    Some(5.0)
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Full-scale rank-learning settings: batch 16, 30 epochs, lr 3e-4,
    /// weight decay 0.01, seven levels.
    pub fn full_rank() -> Self {
        Self {
            stage: Stage::Rank,
            epochs: 30,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.01,
            alpha: DEFAULT_ALPHA,
            margin: DEFAULT_MARGIN,
            drop_rates: vec![0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9],
            intervals: 5,
            seed: 0,
            cosine: true,
            grad_clip: Some(5.0),
            betas: default_betas(),
            adam_eps: 1e-8,
            max_steps: None,
            augment: false,
        }
    }

    /// Full-scale fine-tuning settings: batch 16, 60 epochs, lr 1e-5,
    /// weight decay 0.05.
    pub fn full_finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            epochs: 60,
            lr: 1e-5,
            weight_decay: 0.05,
            ..Self::full_rank()
        }
    }

    /// Desk-scale rank learning: three levels, batch 4, lr 5e-4.
    pub fn toy_rank() -> Self {
        Self {
            batch_size: 4,
            lr: 5e-4,
            drop_rates: vec![0.1, 0.5, 0.9],
            ..Self::full_rank()
        }
    }

    pub fn toy_finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            epochs: 500,
            batch_size: 1,
            lr: 1e-3,
            weight_decay: 0.0,
            ..Self::toy_rank()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be nonnegative".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid AdamW moments".into()));
        }
        if self.stage != Stage::Finetune {
            self.synth_spec(self.intervals.max(1), 0)?.validate()?;
        }
        Ok(())
    }

    fn synth_spec(&self, frames: usize, seed: u64) -> Result<SynthSpec> {
        Ok(SynthSpec {
            frames,
            drop_rates: self.drop_rates.clone(),
            intervals: self.intervals,
            seed,
        })
    }
}

/// Decoupled-weight-decay Adam. For each parameter `p` with gradient `g`
/// at step `t`:
/// `p <- p (1 - lr wd)`; `m <- b1 m + (1 - b1) g`; `v <- b2 v + (1 - b2) g^2`;
/// `p <- p - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)`.
/// Decay applies to matrices only; biases, norm scales and relative-bias
/// tables are exempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParamSet, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            betas,
            eps,
            weight_decay,
            step: 0,
            m: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            decay: params
                .iter()
                .map(|(n, t)| t.rank() >= 2 && !n.ends_with("rel_bias"))
                .collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(arg_err!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(arg_err!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            let shrink = if self.decay[i] { 1.0 - lr * self.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= shrink;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *w -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Warmup-free cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Global L2 norm of `grads`; when it exceeds `max`, every gradient is scaled
/// so the norm becomes `max`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max {
        if norm > max {
            let s = max / norm;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: AdamW,
    pub step: usize,
    pub epoch: usize,
    pub history: Vec<LogEntry>,
}

impl TrainState {
    pub fn new(params: ParamSet, cfg: &TrainConfig) -> Self {
        let optimizer = AdamW::new(&params, cfg.betas, cfg.adam_eps, cfg.weight_decay);
        Self {
            params,
            optimizer,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.loss).collect()
    }

    /// Writes the history as one JSON object per line.
    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.history {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// One example's loss and parameter gradients.
type Sample = (f64, Vec<Tensor>);

fn gradients(g: &Graph, loss: crate::graph::Var, bound: &crate::params::Bound) -> Result<Sample> {
    let mut grads = g.backward(loss)?;
    let value = g.value(loss).item()?;
    let gs = bound
        .vars()
        .iter()
        .map(|v| grads.take(*v).ok_or_else(|| Error::Numeric("missing parameter gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, gs))
}

/// Per-anchor chain seed: a fresh stutter pattern every epoch.
fn chain_seed(base: u64, epoch: usize, item: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(item as u64)
}

/// Flips a `[T, H, W, C]` video along each of its first three axes with
/// probability one half.
pub fn random_flips(video: &Tensor, seed: u64) -> Result<Tensor> {
    let [t, h, w, c] = video.shape()[..] else {
        return Err(arg_err!("video must be rank 4, got {:?}", video.shape()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip: [bool; 3] = std::array::from_fn(|_| rng.random_bool(0.5));
    let pick = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
    let src = video.data();
    let mut data = Vec::with_capacity(src.len());
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                let base = ((pick(ti, t, flip[0]) * h + pick(hi, h, flip[1])) * w + pick(wi, w, flip[2])) * c;
                data.extend_from_slice(&src[base..base + c]);
            }
        }
    }
    Tensor::new(video.shape().to_vec(), data)
}

fn chain_anchor<'a>(anchor: &'a Tensor, cfg: &TrainConfig, seed: u64) -> Result<Cow<'a, Tensor>> {
    Ok(if cfg.augment {
        Cow::Owned(random_flips(anchor, seed ^ 0xF11F)?)
    } else {
        Cow::Borrowed(anchor)
    })
}

fn rank_sample(net: &FluNet, params: &ParamSet, anchor: &Tensor, cfg: &TrainConfig, seed: u64) -> Result<Sample> {
    let anchor = chain_anchor(anchor, cfg, seed)?;
    let spec = cfg.synth_spec(anchor.shape()[0], seed)?;
    let set = synthesize_ranked_set(&anchor, &spec)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let scores = set
        .videos
        .iter()
        .map(|v| net.forward(&mut g, v, &bound))
        .collect::<Result<Vec<_>>>()?;
    let loss = rank_loss_graph(&mut g, &scores, cfg.margin)?;
    gradients(&g, loss, &bound)
}

fn finetune_sample(net: &FluNet, params: &ParamSet, video: &Tensor, y: f64) -> Result<Sample> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let s = net.forward(&mut g, video, &bound)?;
    let loss = ft_loss_graph(&mut g, &[s], &[y])?;
    gradients(&g, loss, &bound)
}

fn joint_sample(net: &FluNet, params: &ParamSet, video: &Tensor, y: f64, cfg: &TrainConfig, seed: u64) -> Result<Sample> {
    let video = chain_anchor(video, cfg, seed)?;
    let spec = cfg.synth_spec(video.shape()[0], seed)?;
    let set = synthesize_ranked_set(&video, &spec)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let scores = set
        .videos
        .iter()
        .map(|v| net.forward(&mut g, v, &bound))
        .collect::<Result<Vec<_>>>()?;
    let ft = ft_loss_graph(&mut g, &scores[..1], &[y])?;
    let rank = rank_loss_graph(&mut g, &scores, cfg.margin)?;
    let loss = joint_loss_graph(&mut g, rank, ft, cfg.alpha)?;
    gradients(&g, loss, &bound)
}

/// Runs the epoch/batch loop; `sample(params, item, epoch)` yields one
/// example's loss and gradients.
fn run<F>(state: &mut TrainState, n: usize, cfg: &TrainConfig, sample: F) -> Result<()>
where
    F: Fn(&ParamSet, usize, usize) -> Result<Sample> + Sync,
{
    cfg.validate()?;
    if n == 0 {
        return Err(arg_err!("no training examples"));
    }
    let per_epoch = n.div_ceil(cfg.batch_size);
    let planned = cfg.epochs * per_epoch;
    let total = cfg.max_steps.map_or(planned, |m| m.min(planned));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if state.step >= total {
                return Ok(());
            }
            let params = &state.params;
            let samples = batch
                .par_iter()
                .map(|&i| sample(params, i, epoch))
                .collect::<Result<Vec<_>>>()?;
            let inv = 1.0 / samples.len() as f64;
            let mut loss = 0.0;
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (l, gs) in &samples {
                loss += l;
                for (acc, g) in grads.iter_mut().zip(gs) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            loss *= inv;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at step {} (epoch {epoch})",
                    state.step
                )));
            }
            let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient norm at step {}", state.step)));
            }
            let lr = if cfg.cosine { cosine_lr(cfg.lr, state.step, total) } else { cfg.lr };
            state.optimizer.update(&mut state.params, &grads, lr)?;
            if !state.params.all_finite() {
                return Err(Error::Numeric(format!("parameters became non-finite at step {}", state.step)));
            }
            state.history.push(LogEntry {
                step: state.step,
                loss,
                lr,
                grad_norm,
            });
            state.step += 1;
        }
        state.epoch = epoch + 1;
    }
    Ok(())
}

fn check_labels(labeled: &[(Tensor, f64)]) -> Result<()> {
    if let Some((_, y)) = labeled.iter().find(|(_, y)| !(1.0..=5.0).contains(y)) {
        return Err(arg_err!("label {y} outside [1, 5]"));
    }
    Ok(())
}

/// Rank learning on chains synthesized from `anchors`, starting from `state`.
pub fn train_rank(net: &FluNet, anchors: &[Tensor], cfg: &TrainConfig, state: TrainState) -> Result<TrainState> {
    let mut state = state;
    run(&mut state, anchors.len(), cfg, |p, i, epoch| {
        rank_sample(net, p, &anchors[i], cfg, chain_seed(cfg.seed, epoch, i))
    })?;
    Ok(state)
}

/// L1 training on labeled videos, continuing from `init`'s parameters with
/// fresh optimizer moments.
pub fn finetune(net: &FluNet, labeled: &[(Tensor, f64)], cfg: &TrainConfig, init: TrainState) -> Result<TrainState> {
    check_labels(labeled)?;
    let mut state = TrainState::new(init.params, cfg);
    state.history = init.history;
    state.step = 0;
    run(&mut state, labeled.len(), cfg, |p, i, _| {
        let (v, y) = &labeled[i];
        finetune_sample(net, p, v, *y)
    })?;
    Ok(state)
}

/// L1 on each labeled anchor plus `alpha` times the ranking loss of its
/// synthesized chain.
pub fn train_joint(net: &FluNet, labeled: &[(Tensor, f64)], cfg: &TrainConfig, state: TrainState) -> Result<TrainState> {
    check_labels(labeled)?;
    let mut state = state;
    run(&mut state, labeled.len(), cfg, |p, i, epoch| {
        let (v, y) = &labeled[i];
        joint_sample(net, p, v, *y, cfg, chain_seed(cfg.seed, epoch, i))
    })?;
    Ok(state)
}

/// Fraction of adjacent pairs `(i, i+1)` in `chains` scored in the intended
/// order (`s[i] > s[i+1]`).
pub fn rank_accuracy(chains: &[Vec<f64>]) -> f64 {
    let (mut ok, mut total) = (0usize, 0usize);
    for c in chains {
        for w in c.windows(2) {
            total += 1;
            if w[0] > w[1] {
                ok += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        ok as f64 / total as f64
    }
}

/// Scores of every video in each held-out chain, anchor first.
pub fn score_chains(net: &FluNet, params: &ParamSet, anchors: &[Tensor], spec: &SynthSpec) -> Result<Vec<Vec<f64>>> {
    anchors
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let spec = SynthSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            };
            let set = synthesize_ranked_set(a, &spec)?;
            set.videos.iter().map(|v| net.score(params, v)).collect()
        })
        .collect()
}

pub fn eval_rank_accuracy(net: &FluNet, params: &ParamSet, anchors: &[Tensor], spec: &SynthSpec) -> Result<f64> {
    Ok(rank_accuracy(&score_chains(net, params, anchors, spec)?))
}
