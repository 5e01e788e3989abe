//! Temporal permuted self-attention over 3-D windows.
//!
//! Keys and values are projected to `C / gamma` channels, then every run of
//! `gamma` consecutive temporal tokens at one spatial site is folded into the
//! channel axis. The key grid inside a window shrinks from `(D, S, S)` to
//! `(D / gamma, S, S)` while channels return to `C`. With `gamma == 1` this is
//! ordinary (shifted) window self-attention.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{AttentionMask, Graph, Var, ZERO_ROW};
use crate::params::{trunc_normal, Bound, ParamSet};
use crate::tensor::{matmul, permute, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpsaConfig {
    /// Temporal window side `D` on the feature grid.
    pub window_t: usize,
    /// Spatial window side `S`.
    pub window_s: usize,
    /// Key/value compression factor.
    pub gamma: usize,
    pub heads: usize,
    pub channels: usize,
    /// One bias table shared by all heads instead of one per head.
    #[serde(default)]
    pub shared_bias: bool,
}

impl TpsaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window_t == 0 || self.window_s == 0 {
            return bad(format!(
                "window ({}, {}, {}) has zero volume",
                self.window_t, self.window_s, self.window_s
            ));
        }
        if self.gamma == 0 || self.heads == 0 || self.channels == 0 {
            return bad("gamma, heads and channels must be positive".into());
        }
        if self.window_t % self.gamma != 0 {
            return bad(format!(
                "temporal window {} is not divisible by gamma {}",
                self.window_t, self.gamma
            ));
        }
        if self.channels % self.gamma != 0 {
            return bad(format!(
                "channels {} not divisible by gamma {}",
                self.channels, self.gamma
            ));
        }
        if self.channels % self.heads != 0 {
            return bad(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        Ok(())
    }

    pub fn kv_channels(&self) -> usize {
        self.channels / self.gamma
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Relative offsets `(dt, dh, dw)` covered by the bias table. A compressed
    /// key group sits at the temporal coordinate of its first frame, so `dt`
    /// spans `[-(D - gamma), D - 1]`.
    pub fn bias_table_len(&self) -> usize {
        (2 * self.window_t - self.gamma) * (2 * self.window_s - 1) * (2 * self.window_s - 1)
    }

    pub fn bias_heads(&self) -> usize {
        if self.shared_bias {
            1
        } else {
            self.heads
        }
    }

    /// Default cyclic shift for shifted blocks: half a window, with the
    /// temporal part rounded down to a multiple of `gamma` so key groups never
    /// straddle a shift boundary.
    pub fn half_shift(&self) -> [usize; 3] {
        let t = (self.window_t / 2) / self.gamma * self.gamma;
        [t, self.window_s / 2, self.window_s / 2]
    }
}

/// Learnable weights of one attention layer. Projections are stored as
/// `[in, out]` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsaParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    /// `[bias_table_len, bias_heads]`.
    pub bias_table: Tensor,
}

const NAMES: [&str; 9] = [
    "q.weight",
    "q.bias",
    "k.weight",
    "k.bias",
    "v.weight",
    "v.bias",
    "proj.weight",
    "proj.bias",
    "rel_bias",
];

impl TpsaParams {
    pub fn init<R: Rng + ?Sized>(cfg: &TpsaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, ck) = (cfg.channels, cfg.kv_channels());
        Ok(Self {
            w_q: trunc_normal(&[c, c], 0.02, rng),
            b_q: Tensor::zeros(&[c]),
            w_k: trunc_normal(&[c, ck], 0.02, rng),
            b_k: Tensor::zeros(&[ck]),
            w_v: trunc_normal(&[c, ck], 0.02, rng),
            b_v: Tensor::zeros(&[ck]),
            w_out: trunc_normal(&[c, c], 0.02, rng),
            b_out: Tensor::zeros(&[c]),
            bias_table: trunc_normal(&[cfg.bias_table_len(), cfg.bias_heads()], 0.02, rng),
        })
    }

    fn expected_shapes(cfg: &TpsaConfig) -> [Vec<usize>; 9] {
        let (c, ck) = (cfg.channels, cfg.kv_channels());
        [
            vec![c, c],
            vec![c],
            vec![c, ck],
            vec![ck],
            vec![c, ck],
            vec![ck],
            vec![c, c],
            vec![c],
            vec![cfg.bias_table_len(), cfg.bias_heads()],
        ]
    }

    fn fields(&self) -> [&Tensor; 9] {
        [
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_out,
            &self.b_out,
            &self.bias_table,
        ]
    }

    pub fn validate(&self, cfg: &TpsaConfig) -> Result<()> {
        cfg.validate()?;
        for ((name, t), want) in NAMES.iter().zip(self.fields()).zip(Self::expected_shapes(cfg)) {
            if t.shape() != want.as_slice() {
                return Err(dim_err!("{name}: expected {:?}, got {:?}", want, t.shape()));
            }
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.fields().iter().map(|t| t.numel()).sum()
    }

    pub fn insert_into(&self, set: &mut ParamSet, prefix: &str) -> Result<()> {
        for (name, t) in NAMES.iter().zip(self.fields()) {
            set.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph) -> Result<TpsaVars> {
        let mut set = ParamSet::new();
        self.insert_into(&mut set, "attn")?;
        let bound = set.bind(g)?;
        TpsaVars::bind(&bound, "attn")
    }
}

/// Graph handles for a [`TpsaParams`].
#[derive(Clone, Copy, Debug)]
pub struct TpsaVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub bias_table: Var,
}

impl TpsaVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let v = |n: &str| bound.var(&format!("{prefix}.{n}"));
        Ok(Self {
            w_q: v(NAMES[0])?,
            b_q: v(NAMES[1])?,
            w_k: v(NAMES[2])?,
            b_k: v(NAMES[3])?,
            w_v: v(NAMES[4])?,
            b_v: v(NAMES[5])?,
            w_out: v(NAMES[6])?,
            b_out: v(NAMES[7])?,
            bias_table: v(NAMES[8])?,
        })
    }
}

/// Index tables for partitioning one feature grid into windows.
///
/// On an axis where the feature extent does not exceed the configured window
/// the window is clamped to the extent (rounded up to a multiple of `gamma`
/// in time) and that axis is not shifted; otherwise the axis is zero-padded
/// at its trailing edge to a multiple of the window.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub feature: [usize; 3],
    pub window: [usize; 3],
    pub padded: [usize; 3],
    pub shift: [usize; 3],
    pub counts: [usize; 3],
    pub gamma: usize,
    /// Windowed row -> feature token row (or [`ZERO_ROW`] for padding).
    pub partition: Arc<Vec<u32>>,
    /// Feature token row -> windowed row.
    pub merge: Arc<Vec<u32>>,
    /// Key validity per (window, query, key group); `None` when everything is valid.
    pub mask: Option<AttentionMask>,
    /// Flat index into the `[table_len, bias_heads]` table for each
    /// `(head, query, key)` triple.
    pub bias_index: Arc<Vec<u32>>,
}

/// Effective window and padded extent per axis. Axes no longer than the
/// configured window collapse to a single window covering them (temporal
/// extent rounded up to a multiple of gamma); longer axes are zero-padded at
/// the trailing edge to a multiple of the window.
pub fn window_geometry(feature: [usize; 3], cfg: &TpsaConfig) -> ([usize; 3], [usize; 3]) {
    let configured = [cfg.window_t, cfg.window_s, cfg.window_s];
    let mut window = [0; 3];
    let mut padded = [0; 3];
    for a in 0..3 {
        if feature[a] <= configured[a] {
            window[a] = if a == 0 {
                feature[a].div_ceil(cfg.gamma) * cfg.gamma
            } else {
                feature[a]
            };
            padded[a] = window[a];
        } else {
            window[a] = configured[a];
            padded[a] = feature[a].div_ceil(window[a]) * window[a];
        }
    }
    (window, padded)
}

fn region(r: usize, padded: usize, window: usize, shift: usize) -> usize {
    if shift == 0 || r < padded - window {
        0
    } else if r < padded - shift {
        1
    } else {
        2
    }
}

impl WindowPlan {
    pub fn new(feature: [usize; 3], cfg: &TpsaConfig, shift: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        if feature.contains(&0) {
            return Err(dim_err!("empty feature grid {feature:?}"));
        }
        let gamma = cfg.gamma;
        let configured = [cfg.window_t, cfg.window_s, cfg.window_s];
        if shift[0] % gamma != 0 {
            return Err(Error::Config(format!(
                "temporal shift {} is not a multiple of gamma {gamma}",
                shift[0]
            )));
        }
        for a in 0..3 {
            if shift[a] >= configured[a] {
                return Err(Error::Config(format!(
                    "shift {shift:?} must be smaller than the window {configured:?}"
                )));
            }
        }
        let (window, padded) = window_geometry(feature, cfg);
        let eff_shift = [0, 1, 2].map(|a| if feature[a] <= configured[a] { 0 } else { shift[a] });
        let counts = [0, 1, 2].map(|a| padded[a] / window[a]);
        let n_windows: usize = counts.iter().product();
        let [wt, wh, ww] = window;
        let tokens = wt * wh * ww;
        let groups = wt / gamma;
        let sites = wh * ww;
        let keys = groups * sites;

        let mut partition = Vec::with_capacity(n_windows * tokens);
        let mut merge = vec![0u32; feature.iter().product()];
        // per windowed row: is it a real token, and which shift region it lies in
        let mut real = Vec::with_capacity(n_windows * tokens);
        let mut label = Vec::with_capacity(n_windows * tokens);
        for ct in 0..counts[0] {
            for ch in 0..counts[1] {
                for cw in 0..counts[2] {
                    for t in 0..wt {
                        for i in 0..wh {
                            for j in 0..ww {
                                let rolled = [ct * wt + t, ch * wh + i, cw * ww + j];
                                let src = [0, 1, 2].map(|a| (rolled[a] + eff_shift[a]) % padded[a]);
                                let row = partition.len() as u32;
                                let is_real = (0..3).all(|a| src[a] < feature[a]);
                                if is_real {
                                    let flat = (src[0] * feature[1] + src[1]) * feature[2] + src[2];
                                    partition.push(flat as u32);
                                    merge[flat] = row;
                                } else {
                                    partition.push(ZERO_ROW);
                                }
                                real.push(is_real);
                                let l = [0, 1, 2].map(|a| region(rolled[a], padded[a], window[a], eff_shift[a]));
                                label.push(l[0] * 9 + l[1] * 3 + l[2]);
                            }
                        }
                    }
                }
            }
        }

        let mut valid = Vec::with_capacity(n_windows * tokens * keys);
        for w in 0..n_windows {
            let base = w * tokens;
            for q in 0..tokens {
                let qrow = base + q;
                for g in 0..groups {
                    for s in 0..sites {
                        let krow = base + g * gamma * sites + s;
                        let ok = real[krow] && (!real[qrow] || label[qrow] == label[krow]);
                        valid.push(ok);
                    }
                }
            }
        }
        let mask = if valid.iter().all(|&v| v) {
            None
        } else {
            Some(AttentionMask {
                windows: n_windows,
                heads: cfg.heads,
                queries: tokens,
                keys,
                valid,
            })
        };

        let side = 2 * cfg.window_s - 1;
        let hb = cfg.bias_heads();
        let mut bias_index = Vec::with_capacity(hb * tokens * keys);
        for h in 0..hb {
            for t in 0..wt {
                for i in 0..wh {
                    for j in 0..ww {
                        for g in 0..groups {
                            for ki in 0..wh {
                                for kj in 0..ww {
                                    let dt = t + cfg.window_t - gamma - g * gamma;
                                    let dh = i + cfg.window_s - 1 - ki;
                                    let dw = j + cfg.window_s - 1 - kj;
                                    let e = (dt * side + dh) * side + dw;
                                    bias_index.push((e * hb + h) as u32);
                                }
                            }
                        }
                    }
                }
            }
        }

        Ok(Self {
            feature,
            window,
            padded,
            shift: eff_shift,
            counts,
            gamma,
            partition: Arc::new(partition),
            merge: Arc::new(merge),
            mask,
            bias_index: Arc::new(bias_index),
        })
    }

    pub fn windows(&self) -> usize {
        self.counts.iter().product()
    }

    /// Query tokens per window.
    pub fn tokens(&self) -> usize {
        self.window.iter().product()
    }

    /// Key groups per window after temporal permutation.
    pub fn keys(&self) -> usize {
        self.tokens() / self.gamma
    }

    pub fn sites(&self) -> usize {
        self.window[1] * self.window[2]
    }
}

/// Windows of a feature grid, `[N, D*S*S, C]`, plus what is needed to undo
/// the partition.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub windows: Tensor,
    pub plan: WindowPlan,
}

fn gather_rows_plain(src: &Tensor, rows: &[u32], out_shape: Vec<usize>) -> Result<Tensor> {
    let width = src.numel() / src.shape()[0].max(1);
    let mut out = vec![0.0; rows.len() * width];
    for (o, &r) in rows.iter().enumerate() {
        if r != ZERO_ROW {
            let r = r as usize;
            out[o * width..(o + 1) * width].copy_from_slice(&src.data()[r * width..(r + 1) * width]);
        }
    }
    Tensor::new(out_shape, out)
}

/// Splits `x: [T', H', W', C]` into windows after a cyclic shift.
pub fn partition_windows(x: &Tensor, cfg: &TpsaConfig, shift: [usize; 3]) -> Result<WindowSet> {
    let [t, h, w, c] = x.shape()[..] else {
        return Err(dim_err!("feature must be [T,H,W,C], got {:?}", x.shape()));
    };
    let plan = WindowPlan::new([t, h, w], cfg, shift)?;
    let rows = x.reshape(&[t * h * w, c])?;
    let windows = gather_rows_plain(&rows, &plan.partition, vec![plan.windows(), plan.tokens(), c])?;
    Ok(WindowSet { windows, plan })
}

/// Inverse of [`partition_windows`]; padding is dropped and the shift undone.
pub fn merge_windows(set: &WindowSet) -> Result<Tensor> {
    let c = *set.windows.shape().last().unwrap_or(&0);
    let rows = set.windows.reshape(&[set.plan.windows() * set.plan.tokens(), c])?;
    let [t, h, w] = set.plan.feature;
    gather_rows_plain(&rows, &set.plan.merge, vec![t, h, w, c])
}

/// Plain-tensor projections `Q = XW_q + b_q`, `K = XW_k + b_k`, `V = XW_v + b_v`
/// on a window set: `Q` keeps `C` channels, `K` and `V` have `C / gamma`.
pub fn project_qkv(win: &WindowSet, p: &TpsaParams) -> Result<(Tensor, Tensor, Tensor)> {
    let s = win.windows.shape();
    let (n, l, c) = (s[0], s[1], s[2]);
    if p.w_q.shape()[0] != c || p.w_k.shape()[0] != c || p.w_v.shape()[0] != c {
        return Err(dim_err!(
            "window channels {c} do not match projection inputs {:?}",
            p.w_q.shape()
        ));
    }
    let rows = win.windows.reshape(&[n * l, c])?;
    let proj = |w: &Tensor, b: &Tensor| -> Result<Tensor> {
        let mut y = matmul(&rows, w)?;
        let out = w.shape()[1];
        for row in y.data_mut().chunks_mut(out) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        y.into_reshaped(&[n, l, out])
    };
    Ok((proj(&p.w_q, &p.b_q)?, proj(&p.w_k, &p.b_k)?, proj(&p.w_v, &p.b_v)?))
}

/// Folds each run of `gamma` temporal tokens into channels:
/// `[N, D*sites, C/gamma] -> [N, (D/gamma)*sites, C]`, where group `g` holds
/// temporal tokens `g*gamma .. g*gamma + gamma` in t-major channel order.
pub fn permute_temporal(k: &Tensor, window_t: usize, sites: usize, gamma: usize) -> Result<Tensor> {
    let [n, l, cg] = k.shape()[..] else {
        return Err(dim_err!("expected [N, L, C'], got {:?}", k.shape()));
    };
    if gamma == 0 || window_t % gamma != 0 {
        return Err(Error::Config(format!(
            "temporal window {window_t} not divisible by gamma {gamma}"
        )));
    }
    if l != window_t * sites {
        return Err(dim_err!("{l} tokens do not form a {window_t}x{sites} window"));
    }
    let x = k.reshape(&[n, window_t / gamma, gamma, sites, cg])?;
    permute(&x, &[0, 1, 3, 2, 4])?.into_reshaped(&[n, l / gamma, cg * gamma])
}

/// Inverse of [`permute_temporal`].
pub fn unpermute_temporal(kp: &Tensor, window_t: usize, sites: usize, gamma: usize) -> Result<Tensor> {
    let [n, lk, c] = kp.shape()[..] else {
        return Err(dim_err!("expected [N, L', C], got {:?}", kp.shape()));
    };
    if gamma == 0 || window_t % gamma != 0 || c % gamma != 0 || lk * gamma != window_t * sites {
        return Err(Error::Config("inconsistent un-permutation geometry".into()));
    }
    let x = kp.reshape(&[n, window_t / gamma, sites, gamma, c / gamma])?;
    permute(&x, &[0, 1, 3, 2, 4])?.into_reshaped(&[n, lk * gamma, c / gamma])
}

/// Result of [`tpsa_attention`]: output token rows and the attention
/// probabilities `[windows * heads, queries, keys]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Var,
}

/// Attention over token rows `x: [T'*H'*W', C]` laid out as `plan.feature`.
pub fn tpsa_attention(
    g: &mut Graph,
    x: Var,
    plan: &WindowPlan,
    p: &TpsaVars,
    cfg: &TpsaConfig,
) -> Result<AttentionOutput> {
    let c = cfg.channels;
    let tokens: usize = plan.feature.iter().product();
    if g.shape(x) != [tokens, c] {
        return Err(dim_err!(
            "attention input {:?} does not match grid {:?} x {c}",
            g.shape(x),
            plan.feature
        ));
    }
    let (nw, l, lk) = (plan.windows(), plan.tokens(), plan.keys());
    let (heads, dk, gamma) = (cfg.heads, cfg.head_dim(), cfg.gamma);
    let ck = cfg.kv_channels();

    let xw = g.gather_rows(x, plan.partition.clone())?;
    let q = g.matmul(xw, p.w_q)?;
    let q = g.add_broadcast(q, p.b_q)?;
    let k = g.matmul(xw, p.w_k)?;
    let k = g.add_broadcast(k, p.b_k)?;
    let v = g.matmul(xw, p.w_v)?;
    let v = g.add_broadcast(v, p.b_v)?;

    let q = g.reshape(q, &[nw, l, heads, dk])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let q = g.reshape(q, &[nw * heads, l, dk])?;

    let fold = |g: &mut Graph, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[nw, plan.window[0] / gamma, gamma, plan.sites(), ck])?;
        let t = g.permute(t, &[0, 1, 3, 2, 4])?;
        let t = g.reshape(t, &[nw, lk, heads, dk])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[nw * heads, lk, dk])
    };
    let kp = fold(g, k)?;
    let vp = fold(g, v)?;

    let scores = g.bmm(q, kp, true)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let hb = cfg.bias_heads();
    let table = g.reshape(p.bias_table, &[cfg.bias_table_len() * hb, 1])?;
    let bias = g.gather_rows(table, plan.bias_index.clone())?;
    let scores = if cfg.shared_bias {
        let bias = g.reshape(bias, &[l, lk])?;
        g.add_broadcast(scores, bias)?
    } else {
        let bias = g.reshape(bias, &[heads, l, lk])?;
        let s4 = g.reshape(scores, &[nw, heads, l, lk])?;
        let s4 = g.add_broadcast(s4, bias)?;
        g.reshape(s4, &[nw * heads, l, lk])?
    };
    let mask = plan.mask.as_ref().map(|m| AttentionMask {
        heads,
        ..m.clone()
    });
    let probs = g.softmax_masked(scores, mask.as_ref())?;

    let o = g.bmm(probs, vp, false)?;
    let o = g.reshape(o, &[nw, heads, l, dk])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[nw * l, c])?;
    let o = g.matmul(o, p.w_out)?;
    let o = g.add_broadcast(o, p.b_out)?;
    let out = g.gather_rows(o, plan.merge.clone())?;
    Ok(AttentionOutput { out, probs })
}

/// Plain-tensor entry point: `x: [T', H', W', C]` in, same shape out.
pub fn tpsa_forward(x: &Tensor, p: &TpsaParams, cfg: &TpsaConfig, shift: [usize; 3]) -> Result<Tensor> {
    p.validate(cfg)?;
    let [t, h, w, c] = x.shape()[..] else {
        return Err(dim_err!("feature must be [T,H,W,C], got {:?}", x.shape()));
    };
    if c != cfg.channels {
        return Err(dim_err!("input has {c} channels, config expects {}", cfg.channels));
    }
    let plan = WindowPlan::new([t, h, w], cfg, shift)?;
    let mut g = Graph::new();
    let vars = p.register(&mut g)?;
    let xin = g.input(x.reshape(&[t * h * w, c])?)?;
    let out = tpsa_attention(&mut g, xin, &plan, &vars, cfg)?;
    g.value(out.out).reshape(&[t, h, w, c])
}

/// Straightforward per-token loop implementation used as an independent
/// check of [`tpsa_attention`]. Handles any `gamma` by building each key
/// group explicitly from its `gamma` source tokens.
pub mod reference {
    use super::*;

    fn project(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        (0..cout)
            .map(|o| b.data()[o] + (0..cin).map(|i| x[i] * w.data()[i * cout + o]).sum::<f64>())
            .collect()
    }

    struct Axis {
        window: usize,
        padded: usize,
        shift: usize,
    }

    fn axis(extent: usize, window: usize, shift: usize, round_to: usize) -> Axis {
        if extent <= window {
            let w = extent.div_ceil(round_to) * round_to;
            Axis {
                window: w,
                padded: w,
                shift: 0,
            }
        } else {
            Axis {
                window,
                padded: extent.div_ceil(window) * window,
                shift,
            }
        }
    }

    fn segment(r: usize, a: &Axis) -> usize {
        if a.shift == 0 || r < a.padded - a.window {
            0
        } else if r < a.padded - a.shift {
            1
        } else {
            2
        }
    }

    pub fn window_attention(
        x: &Tensor,
        p: &TpsaParams,
        cfg: &TpsaConfig,
        shift: [usize; 3],
    ) -> Result<Tensor> {
        p.validate(cfg)?;
        let [t_n, h_n, w_n, c] = x.shape()[..] else {
            return Err(dim_err!("bad input shape"));
        };
        let gamma = cfg.gamma;
        let axes = [
            axis(t_n, cfg.window_t, shift[0], gamma),
            axis(h_n, cfg.window_s, shift[1], 1),
            axis(w_n, cfg.window_s, shift[2], 1),
        ];
        let extent = [t_n, h_n, w_n];
        let token = |t: usize, h: usize, w: usize| &x.data()[((t * h_n + h) * w_n + w) * c..][..c];
        // rolled coordinate of an original (or padded) coordinate
        let rolled = |a: usize, v: usize| (v + axes[a].padded - axes[a].shift) % axes[a].padded;
        let original = |a: usize, r: usize| (r + axes[a].shift) % axes[a].padded;

        let heads = cfg.heads;
        let dk = cfg.head_dim();
        let side = 2 * cfg.window_s - 1;
        let hb = cfg.bias_heads();
        let mut out = vec![0.0; x.numel()];
        let zeros = vec![0.0; c];
        for t in 0..t_n {
            for h in 0..h_n {
                for w in 0..w_n {
                    let q = project(token(t, h, w), &p.w_q, &p.b_q);
                    let r = [rolled(0, t), rolled(1, h), rolled(2, w)];
                    let win = [0, 1, 2].map(|a| r[a] / axes[a].window);
                    let off = [0, 1, 2].map(|a| r[a] % axes[a].window);
                    let seg = [0, 1, 2].map(|a| segment(r[a], &axes[a]));
                    // candidate key groups in this window
                    let mut keys: Vec<(Vec<f64>, Vec<f64>, [usize; 3])> = Vec::new();
                    for g in 0..axes[0].window / gamma {
                        for ki in 0..axes[1].window {
                            for kj in 0..axes[2].window {
                                let kr = [
                                    win[0] * axes[0].window + g * gamma,
                                    win[1] * axes[1].window + ki,
                                    win[2] * axes[2].window + kj,
                                ];
                                let src = [0, 1, 2].map(|a| original(a, kr[a]));
                                if (0..3).any(|a| src[a] >= extent[a]) {
                                    continue;
                                }
                                if (0..3).any(|a| segment(kr[a], &axes[a]) != seg[a]) {
                                    continue;
                                }
                                let mut kv = Vec::with_capacity(c);
                                let mut vv = Vec::with_capacity(c);
                                for j in 0..gamma {
                                    let tt = original(0, kr[0] + j);
                                    let xs = if tt < t_n { token(tt, src[1], src[2]) } else { &zeros[..] };
                                    kv.extend(project(xs, &p.w_k, &p.b_k));
                                    vv.extend(project(xs, &p.w_v, &p.b_v));
                                }
                                keys.push((kv, vv, [g * gamma, ki, kj]));
                            }
                        }
                    }
                    let mut attended = vec![0.0; c];
                    for head in 0..heads {
                        let hs = head * dk..(head + 1) * dk;
                        let scores: Vec<f64> = keys
                            .iter()
                            .map(|(kv, _, pos)| {
                                let dot: f64 = q[hs.clone()].iter().zip(&kv[hs.clone()]).map(|(a, b)| a * b).sum();
                                let dt = off[0] + cfg.window_t - gamma - pos[0];
                                let dh = off[1] + cfg.window_s - 1 - pos[1];
                                let dw = off[2] + cfg.window_s - 1 - pos[2];
                                let e = (dt * side + dh) * side + dw;
                                let hcol = if cfg.shared_bias { 0 } else { head };
                                dot / (dk as f64).sqrt() + p.bias_table.data()[e * hb + hcol]
                            })
                            .collect();
                        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for ((_, vv, _), e) in keys.iter().zip(&exps) {
                            for ch in hs.clone() {
                                attended[ch] += e / z * vv[ch];
                            }
                        }
                    }
                    let o = project(&attended, &p.w_out, &p.b_out);
                    out[((t * h_n + h) * w_n + w) * c..][..c].copy_from_slice(&o);
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare_with_fd, sample_coordinates};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, s: usize, gamma: usize, heads: usize, c: usize) -> TpsaConfig {
        TpsaConfig {
            window_t: d,
            window_s: s,
            gamma,
            heads,
            channels: c,
            shared_bias: false,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_params(cfg: &TpsaConfig, rng: &mut ChaCha8Rng) -> TpsaParams {
        let mut p = TpsaParams::init(cfg, rng).unwrap();
        for t in [
            &mut p.w_q, &mut p.b_q, &mut p.w_k, &mut p.b_k, &mut p.w_v, &mut p.b_v, &mut p.w_out,
            &mut p.b_out, &mut p.bias_table,
        ] {
            *t = Tensor::from_fn(t.shape(), |_| rng.random_range(-0.5..0.5));
        }
        p
    }

    #[test]
    fn config_invariants() {
        assert!(cfg(4, 7, 2, 3, 24).validate().is_ok());
        assert!(matches!(cfg(3, 7, 2, 3, 24).validate(), Err(Error::Config(_))));
        assert!(matches!(cfg(4, 7, 5, 1, 25).validate(), Err(Error::Config(_))));
        assert!(matches!(cfg(4, 7, 2, 5, 24).validate(), Err(Error::Config(_))));
        assert_eq!(cfg(32, 7, 2, 3, 96).bias_table_len(), 62 * 13 * 13);
        assert_eq!(cfg(8, 7, 1, 3, 96).bias_table_len(), 15 * 13 * 13);
    }

    #[test]
    fn single_window_is_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = cfg(4, 3, 2, 1, 4);
        let x = random(&[4, 3, 3, 4], &mut rng);
        let set = partition_windows(&x, &c, [0; 3]).unwrap();
        assert_eq!(set.plan.windows(), 1);
        assert_eq!(set.windows.data(), x.data());
    }

    #[test]
    fn full_geometry_window_count() {
        let plan = WindowPlan::new([64, 56, 56], &cfg(32, 7, 2, 3, 96), [0; 3]).unwrap();
        assert_eq!(plan.windows(), 2 * 8 * 8);
        assert!(plan.mask.is_none());
    }

    #[test]
    fn partition_merge_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(4, 3, 2, 1, 2);
        for shape in [[8, 6, 6], [5, 7, 4], [3, 2, 9]] {
            let x = random(&[shape[0], shape[1], shape[2], 2], &mut rng);
            for shift in [[0, 0, 0], c.half_shift()] {
                let set = partition_windows(&x, &c, shift).unwrap();
                assert_eq!(merge_windows(&set).unwrap(), x);
            }
        }
    }

    #[test]
    fn qkv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (gamma, kv) in [(1, 96), (2, 48)] {
            let c = cfg(2, 2, gamma, 3, 96);
            let p = TpsaParams::init(&c, &mut rng).unwrap();
            let set = partition_windows(&random(&[2, 2, 2, 96], &mut rng), &c, [0; 3]).unwrap();
            let (q, k, v) = project_qkv(&set, &p).unwrap();
            assert_eq!(q.shape(), &[1, 8, 96]);
            assert_eq!(k.shape(), &[1, 8, kv]);
            assert_eq!(v.shape(), &[1, 8, kv]);
        }
        let c = cfg(2, 2, 2, 1, 4);
        let mut p = TpsaParams::init(&c, &mut rng).unwrap();
        for t in [&mut p.w_q, &mut p.w_k, &mut p.w_v] {
            *t = Tensor::zeros(t.shape());
        }
        let set = partition_windows(&random(&[2, 2, 2, 4], &mut rng), &c, [0; 3]).unwrap();
        let (q, k, v) = project_qkv(&set, &p).unwrap();
        for t in [q, k, v] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn temporal_permutation_index_map() {
        // D=4, gamma=2, one site, C/gamma = 3: value encodes (t, c) as 10t + c
        let k = Tensor::from_fn(&[1, 4, 3], |i| ((i / 3) * 10 + i % 3) as f64);
        let kp = permute_temporal(&k, 4, 1, 2).unwrap();
        assert_eq!(kp.shape(), &[1, 2, 6]);
        assert_eq!(kp.data(), &[0., 1., 2., 10., 11., 12., 20., 21., 22., 30., 31., 32.]);
        assert_eq!(unpermute_temporal(&kp, 4, 1, 2).unwrap(), k);
        assert_eq!(permute_temporal(&k, 4, 1, 1).unwrap(), k);
        assert!(matches!(permute_temporal(&k, 4, 1, 3), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_permutation_with_sites_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random(&[3, 8 * 4, 5], &mut rng);
        let kp = permute_temporal(&k, 8, 4, 4).unwrap();
        assert_eq!(kp.shape(), &[3, 8, 20]);
        // group 1 at site 2 holds t = 4..8 at site 2
        for j in 0..4 {
            for ch in 0..5 {
                let src = k.data()[((4 + j) * 4 + 2) * 5 + ch];
                assert_eq!(kp.data()[(4 + 2) * 20 + j * 5 + ch], src);
            }
        }
        assert_eq!(unpermute_temporal(&kp, 8, 4, 4).unwrap(), k);
    }

    #[test]
    fn gamma_one_matches_vanilla_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(d, s, c, shape) in &[(2, 2, 8, [4, 4, 4]), (4, 3, 8, [8, 6, 5]), (2, 7, 24, [3, 9, 7])] {
            let conf = cfg(d, s, 1, 2, c);
            let p = random_params(&conf, &mut rng);
            let x = random(&[shape[0], shape[1], shape[2], c], &mut rng);
            for shift in [[0; 3], conf.half_shift()] {
                let fast = tpsa_forward(&x, &p, &conf, shift).unwrap();
                let slow = reference::window_attention(&x, &p, &conf, shift).unwrap();
                assert!(fast.max_abs_diff(&slow) < 1e-10, "shift {shift:?}");
            }
        }
    }

    #[test]
    fn compressed_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(d, s, gamma, shape, shared) in &[
            (4, 2, 2, [8, 4, 4], false),
            (4, 3, 2, [7, 5, 6], false),
            (4, 2, 4, [8, 3, 3], true),
            (6, 2, 3, [9, 2, 5], false),
        ] {
            let mut conf = cfg(d, s, gamma, 2, 12);
            conf.shared_bias = shared;
            let p = random_params(&conf, &mut rng);
            let x = random(&[shape[0], shape[1], shape[2], 12], &mut rng);
            for shift in [[0; 3], conf.half_shift()] {
                let fast = tpsa_forward(&x, &p, &conf, shift).unwrap();
                let slow = reference::window_attention(&x, &p, &conf, shift).unwrap();
                assert!(fast.max_abs_diff(&slow) < 1e-10, "{d} {s} {gamma} {shift:?}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_padding_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conf = cfg(4, 3, 2, 2, 8);
        let p = random_params(&conf, &mut rng);
        let feature = [6, 5, 4];
        let plan = WindowPlan::new(feature, &conf, conf.half_shift()).unwrap();
        let mut g = Graph::new();
        let vars = p.register(&mut g).unwrap();
        let x = g.input(random(&[120, 8], &mut rng)).unwrap();
        let out = tpsa_attention(&mut g, x, &plan, &vars, &conf).unwrap();
        let probs = g.value(out.probs);
        let lk = plan.keys();
        let mask = plan.mask.as_ref().expect("padding and shift produce a mask");
        let per_window = plan.tokens() * lk;
        for (r, row) in probs.data().chunks(lk).enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let w = r / (conf.heads * plan.tokens());
            let q = r % plan.tokens();
            for (k, &pv) in row.iter().enumerate() {
                if !mask.valid[w * per_window + q * lk + k] {
                    assert_eq!(pv, 0.0);
                }
            }
        }
        // padded rows must never be attended to
        for w in 0..plan.windows() {
            for kk in 0..lk {
                let krow = w * plan.tokens() + (kk / plan.sites()) * 2 * plan.sites() + kk % plan.sites();
                if plan.partition[krow] == ZERO_ROW {
                    for q in 0..plan.tokens() {
                        assert!(!mask.valid[w * per_window + q * lk + kk]);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_in_time_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conf = cfg(4, 3, 2, 2, 8);
        let mut p = random_params(&conf, &mut rng);
        p.bias_table = Tensor::zeros(p.bias_table.shape());
        let frame = random(&[1, 3, 3, 8], &mut rng);
        let mut data = Vec::new();
        for _ in 0..8 {
            data.extend_from_slice(frame.data());
        }
        let x = Tensor::new(vec![8, 3, 3, 8], data).unwrap();
        let y = tpsa_forward(&x, &p, &conf, [0; 3]).unwrap();
        let per = 3 * 3 * 8;
        for t in 1..8 {
            for i in 0..per {
                assert!((y.data()[t * per + i] - y.data()[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (d, s, gamma) in [(2, 2, 1), (4, 7, 2), (8, 3, 4)] {
            let conf = cfg(d, s, gamma, 2, 8);
            let p = random_params(&conf, &mut rng);
            let x = random(&[5, 4, 9, 8], &mut rng);
            assert_eq!(tpsa_forward(&x, &p, &conf, conf.half_shift()).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conf = cfg(4, 2, 2, 2, 8);
        let p = random_params(&conf, &mut rng);
        let x = random(&[6, 3, 4, 8], &mut rng);
        let weights = random(&[72, 8], &mut rng);
        let plan = WindowPlan::new([6, 3, 4], &conf, conf.half_shift()).unwrap();
        let mut inputs = Vec::new();
        let mut set = ParamSet::new();
        p.insert_into(&mut set, "attn").unwrap();
        inputs.extend(set.tensors().iter().cloned());
        inputs.push(x.reshape(&[72, 8]).unwrap());
        let run = |ts: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect::<Result<_>>()?;
            let tv = TpsaVars {
                w_q: vars[0],
                b_q: vars[1],
                w_k: vars[2],
                b_k: vars[3],
                w_v: vars[4],
                b_v: vars[5],
                w_out: vars[6],
                b_out: vars[7],
                bias_table: vars[8],
            };
            let out = tpsa_attention(&mut g, vars[9], &plan, &tv, &conf)?;
            let w = g.input(weights.clone())?;
            let y = g.mul(out.out, w)?;
            let y = g.mul(y, y)?;
            let loss = g.mean(y)?;
            Ok((g, vars, loss))
        };
        let (g, vars, loss) = run(&inputs).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.take(*v).unwrap()).collect();
        let shapes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
        let coords = sample_coordinates(&shapes, Some(12), 1);
        let f = |ts: &[Tensor]| {
            let (g, _, l) = run(ts)?;
            g.value(l).item()
        };
        let report = compare_with_fd(&f, &inputs, &analytic, &coords, 1e-5, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
