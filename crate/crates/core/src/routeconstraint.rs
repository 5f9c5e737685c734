//! Route-assignment constraints for the multi-expert adapter.
//!
//! Per-token route weights are pooled into one sharpened distribution per
//! sample and block. Two KL losses act on batch statistics of those pooled
//! distributions: the balanced assignment loss pulls the batch mean toward
//! uniform (against winner-takes-all collapse), and the category-aware
//! balanced assignment loss pulls the pseudo-old and pseudo-new conditional
//! means toward disjoint expert groups.
//!
//! The category targets contain exact zeros off their group, which would
//! make the KL infinite for any softmax output. Targets are therefore
//! smoothed as `(1-δ) target + δ uniform` with δ = 1e-6, which keeps the
//! optimum in place while the loss stays finite and differentiable.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Default target smoothing δ.
pub const TARGET_SMOOTHING: f64 = 1e-6;

/// Weights of the combined route-assignment loss
/// `beta * balanced + alpha * category_balanced`.
#[derive(Debug, Clone)]
pub struct ConstraintWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Pooling temperature for per-sample route distributions.
    pub tau_gate: f64,
}

impl Default for ConstraintWeights {
    fn default() -> Self {
        ConstraintWeights {
            alpha: 0.1,
            beta: 0.1,
            tau_gate: 0.1,
        }
    }
}

impl ConstraintWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "constraint weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.tau_gate <= 0.0 {
            return Err(Error::Config(format!(
                "gate temperature must be positive, got {}",
                self.tau_gate
            )));
        }
        Ok(())
    }
}

/// Pool one sample's per-token route weights (`[V, T]`) into a sharpened
/// `[1, T]` distribution: `softmax(mean_v(omega_v) / tau_gate)`.
pub fn pool_sample_route(token_weights: &Tensor, tau_gate: f64) -> Result<Tensor> {
    if tau_gate <= 0.0 {
        return Err(Error::Kernel(
            crate::error::KernelError::NonPositiveTemperature(tau_gate),
        ));
    }
    let (v, _) = token_weights.shape();
    if v == 0 {
        return Err(Error::Config("cannot pool zero tokens".into()));
    }
    Ok(token_weights.mean_rows().softmax_rows(tau_gate)?)
}

/// Balanced assignment loss: KL of each block's batch-mean pooled
/// distribution against uniform, summed over adapted blocks. Each entry of
/// `pooled_per_block` stacks one block's per-sample pooled rows (`[N, T]`).
pub fn balanced_assignment_loss(graph: &Graph, pooled_per_block: &[Tensor]) -> Result<Tensor> {
    if pooled_per_block.is_empty() {
        return Err(Error::Config("no adapted blocks to balance".into()));
    }
    let mut total: Option<Tensor> = None;
    for pooled in pooled_per_block {
        let (n, t) = pooled.shape();
        if n == 0 {
            return Err(Error::Config("empty batch in balanced assignment loss".into()));
        }
        let mean = pooled.mean_rows();
        let uniform = graph.constant(vec![1.0 / t as f64; t], 1, t);
        let kl = mean.kl_div(&uniform)?;
        total = Some(match total {
            Some(acc) => acc.add(&kl)?,
            None => kl,
        });
    }
    Ok(total.expect("at least one block"))
}

/// Per-sample pseudo-labels: ground truth where labeled, otherwise the
/// arg-max prediction with ties broken toward the lowest class index.
pub fn pseudo_labels(predictions: &Tensor, labels: &[u32], labeled: &[bool]) -> Result<Vec<usize>> {
    let (n, k) = predictions.shape();
    if labels.len() != n || labeled.len() != n {
        return Err(Error::Config("pseudo-label metadata disagrees with batch size".into()));
    }
    let vals = predictions.values();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if labeled[i] {
            out.push(labels[i] as usize);
        } else {
            let row = &vals[i * k..(i + 1) * k];
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Batch route statistics for one block: the overall mean plus the
/// pseudo-label-conditioned means (absent when a group has no samples).
pub struct RouteStats {
    pub mean_all: Tensor,
    pub mean_old: Option<(Tensor, usize)>,
    pub mean_new: Option<(Tensor, usize)>,
}

/// Split the pooled rows by pseudo-label group and average each side.
/// Differentiable through the pooled weights; the selection itself is a
/// constant within the step.
pub fn conditioned_route_means(
    pooled: &Tensor,
    pseudo: &[usize],
    old_classes: &BTreeSet<usize>,
) -> Result<RouteStats> {
    let (n, _) = pooled.shape();
    if pseudo.len() != n {
        return Err(Error::Config(format!(
            "{} pseudo-labels for {} pooled rows",
            pseudo.len(),
            n
        )));
    }
    let old_idx: Vec<usize> = (0..n).filter(|&i| old_classes.contains(&pseudo[i])).collect();
    let new_idx: Vec<usize> = (0..n).filter(|&i| !old_classes.contains(&pseudo[i])).collect();
    let mean_all = pooled.mean_rows();
    let mean_of = |idx: &[usize]| -> Result<Option<(Tensor, usize)>> {
        if idx.is_empty() {
            return Ok(None);
        }
        Ok(Some((pooled.gather_rows(idx)?.mean_rows(), idx.len())))
    };
    Ok(RouteStats {
        mean_all,
        mean_old: mean_of(&old_idx)?,
        mean_new: mean_of(&new_idx)?,
    })
}

/// Target route distributions: uniform over all experts, and uniform over
/// each group with zero mass outside it, smoothed toward uniform by δ.
#[derive(Debug, Clone)]
pub struct TargetDistributions {
    pub uniform: Vec<f64>,
    /// Absent when the corresponding expert group is empty.
    pub old: Option<Vec<f64>>,
    pub new: Option<Vec<f64>>,
}

impl TargetDistributions {
    pub fn new(
        old_experts: &BTreeSet<usize>,
        new_experts: &BTreeSet<usize>,
        num_experts: usize,
        smoothing: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("smoothing {smoothing} outside [0, 1)")));
        }
        let t = num_experts;
        let group_target = |group: &BTreeSet<usize>| -> Option<Vec<f64>> {
            if group.is_empty() {
                return None;
            }
            let inside = 1.0 / group.len() as f64;
            Some(
                (0..t)
                    .map(|e| {
                        let exact = if group.contains(&e) { inside } else { 0.0 };
                        (1.0 - smoothing) * exact + smoothing / t as f64
                    })
                    .collect(),
            )
        };
        Ok(TargetDistributions {
            uniform: vec![1.0 / t as f64; t],
            old: group_target(old_experts),
            new: group_target(new_experts),
        })
    }
}

/// Category-aware balanced assignment loss over adapted blocks: KL of each
/// group's conditional mean against its (smoothed) target. Absent groups
/// contribute nothing.
pub fn category_balanced_loss(
    graph: &Graph,
    stats_per_block: &[RouteStats],
    targets: &TargetDistributions,
) -> Result<Tensor> {
    let mut total = graph.scalar(0.0);
    for stats in stats_per_block {
        let t = stats.mean_all.cols();
        for (mean, target) in [
            (&stats.mean_old, &targets.old),
            (&stats.mean_new, &targets.new),
        ] {
            if let (Some((mean, _count)), Some(target)) = (mean, target) {
                let target = graph.constant(target.clone(), 1, t);
                total = total.add(&mean.kl_div(&target)?)?;
            }
        }
    }
    Ok(total)
}

/// The weighted route-assignment loss and its parts.
pub struct RouteLossParts {
    pub balanced: Tensor,
    pub category: Tensor,
    pub total: Tensor,
}

/// `beta * L_balanced + alpha * L_category` over the adapted blocks.
/// `pooled_per_block[l]` holds the pooled `[N, T]` rows of block `l`.
pub fn route_assignment_loss(
    graph: &Graph,
    pooled_per_block: &[Tensor],
    pseudo: &[usize],
    old_classes: &BTreeSet<usize>,
    targets: &TargetDistributions,
    weights: &ConstraintWeights,
) -> Result<RouteLossParts> {
    weights.validate()?;
    let balanced = balanced_assignment_loss(graph, pooled_per_block)?;
    let stats: Vec<RouteStats> = pooled_per_block
        .iter()
        .map(|pooled| conditioned_route_means(pooled, pseudo, old_classes))
        .collect::<Result<_>>()?;
    let category = category_balanced_loss(graph, &stats, targets)?;
    let total = balanced
        .scale(weights.beta)
        .add(&category.scale(weights.alpha))?;
    Ok(RouteLossParts {
        balanced,
        category,
        total,
    })
}
