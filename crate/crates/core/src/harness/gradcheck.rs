//! Analytic-vs-numeric gradient verification of the full objective.
//!
//! Central finite differences are taken against a closure that holds the
//! teacher targets and route pseudo-labels fixed at their base-point
//! values. That matches the implemented loss exactly: the teacher branch is
//! gradient-detached and the arg-max selection is constant within a step,
//! so the analytic gradient of the real loss equals the gradient of the
//! fixed closure, while the closure is smooth enough to difference.

use crate::data::batch_iter;
use crate::error::{Error, Result};
use crate::routeconstraint::pseudo_labels;
use crate::tensor::Graph;

use super::model::{build_model, forward_batch};
use super::train::step_loss;
use super::RunConfig;

/// Verification result for one parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub params_checked: usize,
    /// Frozen groups are listed but not differenced.
    pub skipped: bool,
}

impl GroupReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.skipped || self.max_rel_err < tolerance
    }
}

fn group_of(name: &str) -> &'static str {
    if name.contains(".expert") {
        "experts"
    } else if name.contains(".router") {
        "router"
    } else if name.starts_with("prototypes") {
        "prototypes"
    } else if name.starts_with("head.") {
        "projection head"
    } else {
        "backbone"
    }
}

/// Check every trainable parameter group of the configured model against
/// central finite differences at step `h = 1e-5`. Returns one report per
/// group; the caller decides pass/fail against its tolerance.
pub fn grad_check(cfg: &RunConfig) -> Result<Vec<GroupReport>> {
    grad_check_inner(cfg, None)
}

/// `corrupt_group`: negative-control hook that flips the sign of one
/// group's analytic gradients before comparison; the check must then fail.
pub(crate) fn grad_check_inner(
    cfg: &RunConfig,
    corrupt_group: Option<&str>,
) -> Result<Vec<GroupReport>> {
    cfg.validate()?;
    let split = cfg.load_split()?;
    let model = build_model(cfg, split.num_classes())?;
    if model.store.trainable_scalars() > 5000 {
        return Err(Error::Config(
            "gradient checking enumerates every trainable scalar; use a tiny configuration".into(),
        ));
    }
    let batches = batch_iter(&split, cfg.opt.batch_size, cfg.opt.augment, 1)?;
    let batch = &batches[0];

    // Base-point teacher and pseudo-labels, held fixed while differencing.
    let (teacher_fixed, pseudo_fixed) = {
        let graph = Graph::new();
        let fwd = forward_batch(&model, &graph, batch, &cfg.loss, cfg.constraint.tau_gate, None)?;
        let teacher = fwd.teacher.values();
        let stacked = graph.concat_rows(&[fwd.p_a.clone(), fwd.p_b.clone()])?;
        let labels2: Vec<u32> = batch.labels.iter().chain(batch.labels.iter()).copied().collect();
        let labeled2: Vec<bool> = batch.labeled.iter().chain(batch.labeled.iter()).copied().collect();
        let pseudo = pseudo_labels(&stacked, &labels2, &labeled2)?;
        (teacher, pseudo)
    };

    let eval_loss = |model: &super::model::Model| -> Result<f64> {
        let graph = Graph::new();
        let fwd = forward_batch(
            model,
            &graph,
            batch,
            &cfg.loss,
            cfg.constraint.tau_gate,
            Some(&teacher_fixed),
        )?;
        let losses = step_loss(
            model,
            &fwd,
            batch,
            &cfg.loss,
            &cfg.constraint,
            &split.old_classes,
            cfg.oracle_pseudo,
            Some(&pseudo_fixed),
        )?;
        Ok(losses.total.scalar()?)
    };

    // Analytic gradients at the base point.
    model.store.zero_grads();
    {
        let graph = Graph::new();
        let fwd = forward_batch(
            &model,
            &graph,
            batch,
            &cfg.loss,
            cfg.constraint.tau_gate,
            Some(&teacher_fixed),
        )?;
        let losses = step_loss(
            &model,
            &fwd,
            batch,
            &cfg.loss,
            &cfg.constraint,
            &split.old_classes,
            cfg.oracle_pseudo,
            Some(&pseudo_fixed),
        )?;
        losses.total.backward().map_err(Error::Kernel)?;
    }

    let h = 1e-5;
    let mut groups: Vec<(String, f64, usize, bool)> = Vec::new();
    let mut bump = |group: &str, err: f64, skipped: bool| {
        if let Some(g) = groups.iter_mut().find(|(name, ..)| name == group) {
            g.1 = g.1.max(err);
            g.2 += 1;
            g.3 &= skipped;
        } else {
            groups.push((group.to_string(), err, 1, skipped));
        }
    };

    for param in model.store.iter() {
        let (name, trainable, n) = {
            let p = param.borrow();
            (p.name.clone(), p.trainable, p.len())
        };
        let group = group_of(&name);
        if !trainable {
            bump(group, 0.0, true);
            continue;
        }
        let analytic = param.borrow().grad.clone();
        let flip = corrupt_group == Some(group);
        for e in 0..n {
            let base = param.borrow().values[e];
            param.borrow_mut().values[e] = base + h;
            let plus = eval_loss(&model)?;
            param.borrow_mut().values[e] = base - h;
            let minus = eval_loss(&model)?;
            param.borrow_mut().values[e] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = if flip { -analytic[e] } else { analytic[e] };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            bump(group, rel, false);
        }
    }

    Ok(groups
        .into_iter()
        .map(|(group, max_rel_err, params_checked, skipped)| GroupReport {
            group,
            max_rel_err,
            params_checked,
            skipped,
        })
        .collect())
}
