//! Margin ranking loss over a fluency chain, L1 fine-tuning loss, and their
//! weighted sum. Each comes as a plain function over scores and as a graph
//! builder over score nodes; both sum in the same order and agree exactly.

use std::sync::Arc;

use crate::error::{arg_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Margin used when none is configured.
pub const DEFAULT_MARGIN: f64 = 0.4;
/// Weight of the ranking term in joint training.
pub const DEFAULT_ALPHA: f64 = 0.3;

fn check_chain(len: usize, beta: f64) -> Result<()> {
    if len < 2 {
        return Err(arg_err!("a rank chain needs at least two scores, got {len}"));
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(arg_err!("margin must be finite and nonnegative, got {beta}"));
    }
    Ok(())
}

/// `(1/K) * sum_i max(0, y[i+1] - y[i] + beta)` for scores ordered from most
/// to least fluent.
pub fn rank_loss(scores: &[f64], beta: f64) -> Result<f64> {
    check_chain(scores.len(), beta)?;
    let k = scores.len() - 1;
    let total: f64 = scores.windows(2).map(|w| (w[1] - w[0] + beta).max(0.0)).sum();
    Ok(total / k as f64)
}

/// Mean absolute error.
pub fn ft_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(arg_err!(
            "prediction/target lengths {} and {} must match and be nonzero",
            pred.len(),
            target.len()
        ));
    }
    let total: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.len() as f64)
}

pub fn joint_loss(rank: f64, ft: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(arg_err!("alpha must be nonnegative, got {alpha}"));
    }
    Ok(ft + alpha * rank)
}

/// Graph form of [`rank_loss`] over scalar score nodes.
pub fn rank_loss_graph(g: &mut Graph, scores: &[Var], beta: f64) -> Result<Var> {
    check_chain(scores.len(), beta)?;
    let k = scores.len() - 1;
    let s = g.stack(scores)?;
    let s = g.reshape(s, &[k + 1, 1])?;
    let upper = g.gather_rows(s, Arc::new((0..k as u32).collect()))?;
    let lower = g.gather_rows(s, Arc::new((1..=k as u32).collect()))?;
    let d = g.sub(lower, upper)?;
    let d = g.add_scalar(d, beta)?;
    let h = g.hinge(d)?;
    g.mean(h)
}

/// Mean of per-chain ranking losses.
pub fn rank_loss_batch_graph(g: &mut Graph, chains: &[Vec<Var>], beta: f64) -> Result<Var> {
    if chains.is_empty() {
        return Err(arg_err!("no chains to rank"));
    }
    let per = chains
        .iter()
        .map(|c| rank_loss_graph(g, c, beta))
        .collect::<Result<Vec<_>>>()?;
    let s = g.stack(&per)?;
    g.mean(s)
}

/// Graph form of [`ft_loss`].
pub fn ft_loss_graph(g: &mut Graph, pred: &[Var], target: &[f64]) -> Result<Var> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(arg_err!(
            "prediction/target lengths {} and {} must match and be nonzero",
            pred.len(),
            target.len()
        ));
    }
    let p = g.stack(pred)?;
    let t = g.input(Tensor::new(vec![target.len()], target.to_vec())?)?;
    let d = g.sub(p, t)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// `ft + alpha * rank` over loss nodes.
pub fn joint_loss_graph(g: &mut Graph, rank: Var, ft: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(arg_err!("alpha must be nonnegative, got {alpha}"));
    }
    let r = g.scale(rank, alpha)?;
    g.add(ft, r)
}
