//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of the adjoints it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor for the relative error, so that near-zero gradients
    /// are compared in absolute terms.
    pub floor: f64,
    /// Coordinates sampled per input; `None` checks every coordinate.
    pub samples_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
            samples_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Picks `(input, flat index)` coordinates to probe.
pub fn sample_coordinates(shapes: &[usize], per_input: Option<usize>, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (i, &numel) in shapes.iter().enumerate() {
        match per_input {
            Some(k) if k < numel => {
                for _ in 0..k {
                    coords.push((i, rng.random_range(0..numel)));
                }
            }
            _ => coords.extend((0..numel).map(|j| (i, j))),
        }
    }
    coords
}

/// Compares `analytic` gradients of `loss` against central differences at
/// the given coordinates. Probes run in parallel; each perturbs its own copy.
pub fn compare_with_fd<F>(
    loss: &F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
    floor: f64,
) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<f64> + Sync,
{
    let results: Vec<Result<Mismatch>> = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut probe = inputs.to_vec();
            let base = probe[i].data()[j];
            probe[i].data_mut()[j] = base + h;
            let plus = loss(&probe)?;
            probe[i].data_mut()[j] = base - h;
            let minus = loss(&probe)?;
            Ok(Mismatch {
                input: i,
                index: j,
                analytic: analytic[i].data()[j],
                numeric: (plus - minus) / (2.0 * h),
            })
        })
        .collect();
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for r in results {
        let m = r?;
        report.checked += 1;
        let err = relative_error(m.analytic, m.numeric, floor);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(m);
        }
    }
    Ok(report)
}

/// Builds the graph once per evaluation with every input registered as a
/// trainable leaf, then checks all (or sampled) coordinates.
pub fn check_graph_gradients(
    build: &(dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Sync),
    inputs: &[Tensor],
    cfg: &GradCheck,
) -> Result<GradReport> {
    let eval = |ts: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = ts
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = eval(inputs)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.take(*v).expect("every param has a gradient"))
        .collect();
    let shapes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let coords = sample_coordinates(&shapes, cfg.samples_per_input, cfg.seed);
    let f = |ts: &[Tensor]| -> Result<f64> {
        let (g, _, loss) = eval(ts)?;
        g.value(loss).item()
    };
    compare_with_fd(&f, inputs, &analytic, &coords, cfg.h, cfg.floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 2e-9, 1e-6) - 1e-3).abs() < 1e-12);
        assert!((relative_error(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // analytic claims d(x^3)/dx = 2x
        let inputs = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let wrong = vec![Tensor::new(vec![2], vec![2.0, 4.0]).unwrap()];
        let f = |ts: &[Tensor]| Ok(ts[0].data().iter().map(|x| x * x * x).sum());
        let coords = sample_coordinates(&[2], None, 0);
        let r = compare_with_fd(&f, &inputs, &wrong, &coords, 1e-5, 1e-6).unwrap();
        assert!(r.max_rel_err > 0.3);
        assert_eq!(r.checked, 2);
    }
}
