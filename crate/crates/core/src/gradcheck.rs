//! Finite-difference verification of reverse-mode gradients.
//!
//! For every element of every differentiable leaf, the tape is replayed at
//! `x ± h` and the central difference is compared against the analytic
//! gradient from [`Graph::backward`]. Relative error uses a floored
//! denominator so near-zero gradients do not blow up the ratio:
//!
//! `rel = |analytic - cd| / max(|analytic|, |cd|, floor)`
//!
//! The floor sets the crossover to an absolute comparison: central
//! differences carry roundoff noise of roughly `ε·|f| / (2h)` no matter how
//! small the true derivative is, so gradients below the floor are compared
//! against `floor × tolerance` absolutely instead of blowing up the ratio.
//!
//! Replays run in parallel, but results are collected in task order, so the
//! report is identical from run to run.

use rayon::prelude::*;

use crate::graph::{Graph, GraphError, Result, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor in the relative-error formula. Gradients with
    /// magnitude below this are effectively checked absolutely; the default
    /// sits well above the difference quotient's roundoff noise.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all checked elements.
    pub max_rel_err: f64,
    /// Leaf name and flat element index where the maximum occurred.
    pub worst_leaf: String,
    pub worst_index: usize,
    /// Analytic and central-difference values at the worst element.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Total elements checked.
    pub checked: usize,
}

/// Check every element of every differentiable leaf feeding `output`.
///
/// `output` must be a scalar. The graph is cloned per worker; the caller's
/// graph is left untouched.
pub fn grad_check(graph: &Graph, output: Var, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if graph.value(output).numel() != 1 {
        return Err(GraphError::InvalidShape {
            detail: format!(
                "grad_check needs a scalar output, got shape {:?}",
                graph.value(output).shape()
            ),
        });
    }
    let analytic = graph.backward(output)?;
    let leaves = graph.param_leaves();

    // One task per leaf element, in a fixed order.
    let mut tasks: Vec<(usize, usize)> = Vec::new();
    for (li, (_, shape)) in leaves.iter().enumerate() {
        let numel: usize = shape.iter().product();
        for ei in 0..numel {
            tasks.push((li, ei));
        }
    }
    if tasks.is_empty() {
        return Err(GraphError::InvalidShape {
            detail: "grad_check found no differentiable leaves".into(),
        });
    }

    let h = cfg.step;
    let results: Vec<Result<f64>> = tasks
        .par_iter()
        .map_init(
            || graph.clone(),
            |g, &(li, ei)| {
                let name = &leaves[li].0;
                let base = graph.leaf_value(name)?.clone();

                let mut plus = base.clone();
                plus.data_mut()[ei] += h;
                g.set_leaf(name, plus)?;
                g.recompute()?;
                let f_plus = g.value(output).item();

                let mut minus = base.clone();
                minus.data_mut()[ei] -= h;
                g.set_leaf(name, minus)?;
                g.recompute()?;
                let f_minus = g.value(output).item();

                // Restore so later tasks on this worker start clean.
                g.set_leaf(name, base)?;

                Ok((f_plus - f_minus) / (2.0 * h))
            },
        )
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_leaf: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: tasks.len(),
    };
    for (&(li, ei), res) in tasks.iter().zip(results) {
        let cd = res?;
        let name = &leaves[li].0;
        let a = analytic.get(name).expect("backward covers every leaf").data()[ei];
        let denom = a.abs().max(cd.abs()).max(cfg.floor);
        let rel = (a - cd).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_leaf = name.clone();
            report.worst_index = ei;
            report.worst_analytic = a;
            report.worst_numeric = cd;
        }
    }
    Ok(report)
}
