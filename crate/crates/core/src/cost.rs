//! Closed-form compute and parameter accounting.
//!
//! Matrix products are counted in multiply-adds (MACs). Element-wise work is
//! tallied per category and weighted by a [`Convention`] when converting to
//! FLOPs. The MAC count of every component equals what [`Graph::macs`]
//! records when the same computation is actually built.
//!
//! [`Graph::macs`]: crate::graph::Graph::macs

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::tpsa::{window_geometry, TpsaConfig};

/// FLOPs charged per unit of each counted quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convention {
    pub flops_per_mac: f64,
    /// Per normalized element (mean, variance, scale, shift).
    pub norm: f64,
    /// Per softmax entry (exp, sum, divide).
    pub softmax: f64,
    /// Per activation evaluation.
    pub activation: f64,
    /// Per element-wise add or scale (biases, residuals, score scaling).
    pub elementwise: f64,
}

impl Default for Convention {
    fn default() -> Self {
        Self {
            flops_per_mac: 2.0,
            norm: 5.0,
            softmax: 3.0,
            activation: 8.0,
            elementwise: 1.0,
        }
    }
}

impl Convention {
    /// One fused multiply-add counted as a single operation; element-wise
    /// work ignored.
    pub fn macs_only() -> Self {
        Self {
            flops_per_mac: 1.0,
            norm: 0.0,
            softmax: 0.0,
            activation: 0.0,
            elementwise: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub macs: u64,
    pub norm_elems: u64,
    pub softmax_elems: u64,
    pub activation_elems: u64,
    pub elementwise_elems: u64,
    /// All learnable scalars, including relative-bias tables.
    pub params: u64,
    /// The part of `params` held in relative-bias tables; depends on the
    /// window size while every other parameter does not.
    pub bias_table_params: u64,
}

impl Cost {
    pub fn flops(&self, conv: &Convention) -> f64 {
        conv.flops_per_mac * self.macs as f64
            + conv.norm * self.norm_elems as f64
            + conv.softmax * self.softmax_elems as f64
            + conv.activation * self.activation_elems as f64
            + conv.elementwise * self.elementwise_elems as f64
    }

    pub fn gflops(&self, conv: &Convention) -> f64 {
        self.flops(conv) / 1e9
    }

    pub fn weight_params(&self) -> u64 {
        self.params - self.bias_table_params
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(mut self, o: Cost) -> Cost {
        self += o;
        self
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.macs += o.macs;
        self.norm_elems += o.norm_elems;
        self.softmax_elems += o.softmax_elems;
        self.activation_elems += o.activation_elems;
        self.elementwise_elems += o.elementwise_elems;
        self.params += o.params;
        self.bias_table_params += o.bias_table_params;
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Cost of one attention layer over a feature grid `[T', H', W']`,
/// including padded window positions.
pub fn count_cost(cfg: &TpsaConfig, feature: [usize; 3]) -> Result<Cost> {
    cfg.validate()?;
    let (window, padded) = window_geometry(feature, cfg);
    let nw: usize = (0..3).map(|a| padded[a] / window[a]).product();
    let l: usize = window.iter().product();
    let lk = l / cfg.gamma;
    let rows = nw * l;
    let (c, ck) = (cfg.channels, cfg.kv_channels());
    let entries = nw * cfg.heads * l * lk;
    let bias_table = cfg.bias_table_len() * cfg.bias_heads();
    Ok(Cost {
        // Q, K, V projections; scores and value products summed over heads
        // (heads * d_k = C); output projection.
        macs: u(rows * c * c) + 2 * u(rows * c * ck) + 2 * u(nw * l * lk * c) + u(rows * c * c),
        norm_elems: 0,
        softmax_elems: u(entries),
        activation_elems: 0,
        // projection biases, score scaling, relative bias
        elementwise_elems: u(rows * (2 * c + 2 * ck)) + 2 * u(entries),
        params: u(2 * c * c + 2 * c * ck + 2 * c + 2 * ck + bias_table),
        bias_table_params: u(bias_table),
    })
}

fn layer_norm(n: usize, c: usize) -> Cost {
    Cost {
        norm_elems: u(n * c),
        params: u(2 * c),
        ..Cost::default()
    }
}

fn linear(n: usize, cin: usize, cout: usize, bias: bool) -> Cost {
    Cost {
        macs: u(n * cin * cout),
        elementwise_elems: if bias { u(n * cout) } else { 0 },
        params: u(cin * cout + if bias { cout } else { 0 }),
        ..Cost::default()
    }
}

fn activation(n: usize, c: usize) -> Cost {
    Cost {
        activation_elems: u(n * c),
        ..Cost::default()
    }
}

fn residual(n: usize, c: usize) -> Cost {
    Cost {
        elementwise_elems: u(n * c),
        ..Cost::default()
    }
}

/// Per-component breakdown of a model's cost.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    pub embed: Cost,
    pub stages: [Cost; 4],
    pub merges: [Cost; 3],
    pub head: Cost,
    pub total: Cost,
}

pub fn model_cost(cfg: &ModelConfig) -> Result<ModelCost> {
    cfg.validate()?;
    let grids = cfg.stage_grids();
    let tokens = |g: [usize; 3]| g.iter().product::<usize>();
    let c = cfg.channels;
    let n0 = tokens(grids[0]);
    let k_in = cfg.patch.iter().product::<usize>() * 3;
    let embed = linear(n0, k_in, c, true) + layer_norm(n0, c);

    let mut stages = [Cost::default(); 4];
    let mut merges = [Cost::default(); 3];
    for s in 0..4 {
        let cs = cfg.stage_channels(s);
        let n = tokens(grids[s]);
        let hidden = cs * cfg.mlp_ratio;
        let attn = count_cost(&cfg.stage_attention(s), grids[s])?;
        let block = layer_norm(n, cs)
            + attn
            + residual(n, cs)
            + layer_norm(n, cs)
            + linear(n, cs, hidden, true)
            + activation(n, hidden)
            + linear(n, hidden, cs, true)
            + residual(n, cs);
        for _ in 0..cfg.depths[s] {
            stages[s] += block;
        }
        if s < 3 {
            let m = tokens(grids[s + 1]);
            merges[s] = layer_norm(m, 4 * cs) + linear(m, 4 * cs, 2 * cs, false);
        }
    }

    let ce = cfg.stage_channels(3);
    let n = tokens(grids[4]);
    let hh = cfg.head_hidden;
    let head = layer_norm(n, ce)
        + linear(n, ce, hh, true)
        + activation(n, hh)
        + linear(n, hh, 1, true)
        + residual(n, 1);

    let mut total = embed + head;
    for s in stages {
        total += s;
    }
    for m in merges {
        total += m;
    }
    Ok(ModelCost {
        embed,
        stages,
        merges,
        head,
        total,
    })
}
