//! Central finite-difference check of graph gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward code it verifies.

use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

use super::graph::{Graph, Var};

/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probed: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compare analytic and central-difference gradients of `build` with respect
/// to each tensor in `inputs`, on `probes` distinct coordinates drawn with `seed`
/// (all coordinates when there are fewer).
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, probes: usize, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= probes {
        coords
    } else {
        let mut r = rng::seeded(seed);
        rand::seq::index::sample(&mut r, coords.len(), probes)
            .into_iter()
            .map(|k| coords[k])
            .collect()
    };

    let mut report = GradCheckReport {
        probed: chosen.len(),
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, k) in chosen {
        let orig = work[i].data()[k];
        work[i].data_mut()[k] = orig + h;
        let up = eval(&work)?;
        work[i].data_mut()[k] = orig - h;
        let down = eval(&work)?;
        work[i].data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i].data()[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((i, k, a, numeric));
        }
    }
    Ok(report)
}
