//! The assembled trainable model: frozen backbone, optional adapter stack,
//! projection head, and class prototypes, all registered in one parameter
//! store (whose order fixes the checkpoint layout).

use crate::backbone::{encode, init_backbone, Backbone};
use crate::data::BatchViews;
use crate::error::{Error, Result};
use crate::mea::{count_tunable_params, init_mea, MeaStack};
use crate::objectives::{init_projection_head, init_prototypes, predict, LossWeights, ProjectionHead, Prototypes};
use crate::routeconstraint::pool_sample_route;
use crate::tensor::{Graph, ParamStore, Tensor};

use super::RunConfig;

pub struct Model {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub mea: Option<MeaStack>,
    pub head: ProjectionHead,
    pub prototypes: Prototypes,
    pub num_classes: usize,
}

/// Head widths are derived from the embedding width. The hidden layer is
/// kept narrow (d/2): a wide head can satisfy the contrastive losses on its
/// own, leaving the shared features the prototypes score unseparated.
fn head_dims(embed_dim: usize) -> (usize, usize) {
    ((embed_dim / 2).max(8), (embed_dim / 2).max(8))
}

/// Build and seed every component. Seeds derive from the run seed so one
/// value pins the whole model.
pub fn build_model(cfg: &RunConfig, num_classes: usize) -> Result<Model> {
    cfg.validate()?;
    if num_classes == 0 {
        return Err(Error::Config("model needs at least one class".into()));
    }
    let mut store = ParamStore::new();
    let mut bb_cfg = cfg.backbone.clone();
    bb_cfg.seed = cfg.seed;
    let backbone = init_backbone(&bb_cfg, &mut store)?;
    let mea = match &cfg.mea {
        Some(mcfg) => Some(init_mea(mcfg, bb_cfg.embed_dim, &mut store, cfg.seed.wrapping_add(1))?),
        None => None,
    };
    let (hidden, proj) = head_dims(bb_cfg.embed_dim);
    let head = init_projection_head(bb_cfg.embed_dim, hidden, proj, &mut store, cfg.seed.wrapping_add(2))?;
    let prototypes = init_prototypes(num_classes, bb_cfg.embed_dim, &mut store, cfg.seed.wrapping_add(3))?;
    Ok(Model {
        store,
        backbone,
        mea,
        head,
        prototypes,
        num_classes,
    })
}

impl Model {
    /// Trainable-parameter accounting: (adapter stack, prototypes,
    /// projection head, unfrozen backbone). The first three are closed-form
    /// counts; they must agree exactly with the enumerated store.
    pub fn param_counts(&self, cfg: &RunConfig) -> Result<(usize, usize, usize, usize)> {
        let d = self.backbone.cfg.embed_dim;
        let mea_count = cfg
            .mea
            .as_ref()
            .map(|m| count_tunable_params(m, d))
            .unwrap_or(0);
        let proto_count = self.num_classes * d;
        let (hidden, proj) = head_dims(d);
        let head_count = hidden * d + hidden + proj * hidden + proj;

        let enumerate = |prefix: &str| -> usize {
            self.store
                .trainable_with_prefix(prefix)
                .iter()
                .map(|p| p.borrow().len())
                .sum()
        };
        if enumerate("mea.") != mea_count {
            return Err(Error::Numeric(format!(
                "adapter parameter count {} does not match the enumerated {}",
                mea_count,
                enumerate("mea.")
            )));
        }
        if enumerate("prototypes") != proto_count {
            return Err(Error::Numeric("prototype count mismatch".into()));
        }
        if enumerate("head.") != head_count {
            return Err(Error::Numeric("projection head count mismatch".into()));
        }
        let backbone_trainable = enumerate("block") + enumerate("embed.") + enumerate("final.");
        Ok((mea_count, proto_count, head_count, backbone_trainable))
    }
}

/// Everything one training step's forward pass produces.
pub struct BatchForward {
    pub graph: Graph,
    /// Normalized projections of the two views, `[B, proj]`.
    pub z_a: Tensor,
    pub z_b: Tensor,
    /// Class predictions of the two views at the student temperature.
    pub p_a: Tensor,
    pub p_b: Tensor,
    /// Gradient-detached teacher targets from view B at the sharper
    /// temperature (supervises view A).
    pub teacher: Tensor,
    /// Per adapted block: pooled route rows for all `2B` view instances
    /// (view A rows then view B rows).
    pub pooled_per_block: Vec<Tensor>,
    /// Largest deviation from 1 of any route-weight row sum seen in this
    /// pass (per-token and pooled), for the simplex invariant.
    pub route_simplex_dev: f64,
}

fn simplex_dev(t: &Tensor) -> f64 {
    let (r, c) = t.shape();
    let v = t.values();
    let mut worst = 0.0f64;
    for i in 0..r {
        let sum: f64 = v[i * c..(i + 1) * c].iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

/// Forward both views of a batch. `teacher_override` replaces the teacher
/// targets with fixed constants (used by the gradient checker, which must
/// hold the stop-gradient branch constant while differencing).
pub fn forward_batch(
    model: &Model,
    graph: &Graph,
    batch: &BatchViews,
    loss_w: &LossWeights,
    tau_gate: f64,
    teacher_override: Option<&[f64]>,
) -> Result<BatchForward> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let cfg = &model.backbone.cfg;
    let adapted = model.mea.as_ref().map(|m| m.cfg.adapted_blocks).unwrap_or(0);

    let mut h_a = Vec::with_capacity(b);
    let mut h_b = Vec::with_capacity(b);
    let mut pooled: Vec<Vec<Tensor>> = vec![Vec::with_capacity(2 * b); adapted];
    let mut dev = 0.0f64;

    let mut run_view = |tokens: &Vec<f64>, sink: &mut Vec<Tensor>| -> Result<()> {
        let t = graph.constant(tokens.clone(), cfg.token_count, cfg.input_dim);
        let trace = encode(graph, &model.backbone, &t, model.mea.as_ref())?;
        sink.push(trace.class_feature.clone());
        let mut adapted_seen = 0;
        for w in trace.route_weights.iter().flatten() {
            dev = dev.max(simplex_dev(w));
            let p = pool_sample_route(w, tau_gate)?;
            dev = dev.max(simplex_dev(&p));
            pooled[adapted_seen].push(p);
            adapted_seen += 1;
        }
        Ok(())
    };
    for tokens in &batch.view_a {
        run_view(tokens, &mut h_a)?;
    }
    for tokens in &batch.view_b {
        run_view(tokens, &mut h_b)?;
    }

    let h_a = graph.concat_rows(&h_a)?;
    let h_b = graph.concat_rows(&h_b)?;
    let z_a = model.head.project_normalized(graph, &h_a)?;
    let z_b = model.head.project_normalized(graph, &h_b)?;
    let p_a = predict(graph, &h_a, &model.prototypes, loss_w.tau_student)?;
    let p_b = predict(graph, &h_b, &model.prototypes, loss_w.tau_student)?;
    let teacher = match teacher_override {
        Some(values) => {
            if values.len() != b * model.num_classes {
                return Err(Error::Config("teacher override has the wrong size".into()));
            }
            graph.constant(values.to_vec(), b, model.num_classes)
        }
        None => predict(graph, &h_b, &model.prototypes, loss_w.tau_teacher)?.detach(),
    };

    let pooled_per_block = pooled
        .into_iter()
        .map(|rows| graph.concat_rows(&rows))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    Ok(BatchForward {
        graph: graph.clone(),
        z_a,
        z_b,
        p_a,
        p_b,
        teacher,
        pooled_per_block,
        route_simplex_dev: dev,
    })
}

/// Evaluation-time forward of clean (unaugmented) samples: class
/// predictions plus pooled route rows per adapted block.
pub struct EvalForward {
    /// Arg-max class per sample.
    pub preds: Vec<usize>,
    /// Full prediction rows, `[N, K]`.
    pub probs: Vec<f64>,
    /// Per adapted block: pooled route rows `[N, T]` (plain values).
    pub pooled_per_block: Vec<Vec<f64>>,
    pub route_simplex_dev: f64,
}

pub fn forward_eval(
    model: &Model,
    samples: &[&crate::data::Sample],
    loss_w: &LossWeights,
    tau_gate: f64,
) -> Result<EvalForward> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let cfg = &model.backbone.cfg;
    let adapted = model.mea.as_ref().map(|m| m.cfg.adapted_blocks).unwrap_or(0);
    let t_experts = model.mea.as_ref().map(|m| m.cfg.num_experts).unwrap_or(0);
    let graph = Graph::new();
    let mut h_rows = Vec::with_capacity(samples.len());
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); adapted];
    let mut dev = 0.0f64;
    for s in samples {
        let t = graph.constant(s.tokens.clone(), cfg.token_count, cfg.input_dim);
        let trace = encode(&graph, &model.backbone, &t, model.mea.as_ref())?;
        h_rows.push(trace.class_feature.clone());
        for (i, w) in trace.route_weights.iter().flatten().enumerate() {
            dev = dev.max(simplex_dev(w));
            let p = pool_sample_route(w, tau_gate)?;
            dev = dev.max(simplex_dev(&p));
            pooled[i].extend(p.values());
        }
    }
    let h = graph.concat_rows(&h_rows)?;
    let p = predict(&graph, &h, &model.prototypes, loss_w.tau_student)?;
    let probs = p.values();
    let k = model.num_classes;
    let preds = (0..samples.len())
        .map(|i| {
            let row = &probs[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let _ = t_experts;
    Ok(EvalForward {
        preds,
        probs,
        pooled_per_block: pooled,
        route_simplex_dev: dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;
    use crate::harness::{DataSource, RunConfig};

    #[test]
    fn param_accounting_is_exact() {
        let cfg = RunConfig::desk(11);
        let model = build_model(&cfg, 8).unwrap();
        let (mea_n, proto_n, head_n, bb_n) = model.param_counts(&cfg).unwrap();
        assert!(mea_n > 0);
        assert_eq!(proto_n, 8 * cfg.backbone.embed_dim);
        assert!(head_n > 0);
        assert_eq!(bb_n, 0, "backbone must be frozen");
        let total = model.store.trainable_scalars();
        assert_eq!(total, mea_n + proto_n + head_n);
    }

    #[test]
    fn forward_batch_produces_consistent_shapes() {
        let cfg = RunConfig::tiny(3);
        let spec = match &cfg.data {
            DataSource::Spec(s) => s.clone(),
            _ => unreachable!(),
        };
        let split = generate(&spec).unwrap();
        let model = build_model(&cfg, spec.num_classes).unwrap();
        let batches = crate::data::batch_iter(&split, 8, 0.1, 1).unwrap();
        let g = Graph::new();
        let fwd = forward_batch(&model, &g, &batches[0], &cfg.loss, 0.1, None).unwrap();
        let b = batches[0].len();
        assert_eq!(fwd.p_a.shape(), (b, 4));
        assert_eq!(fwd.teacher.shape(), (b, 4));
        assert_eq!(fwd.pooled_per_block.len(), 1);
        assert_eq!(fwd.pooled_per_block[0].shape(), (2 * b, 2));
        assert!(fwd.route_simplex_dev < 1e-9);
    }

    #[test]
    fn eval_forward_predicts_over_all_classes() {
        let cfg = RunConfig::tiny(5);
        let spec = match &cfg.data {
            DataSource::Spec(s) => s.clone(),
            _ => unreachable!(),
        };
        let split = generate(&spec).unwrap();
        let model = build_model(&cfg, spec.num_classes).unwrap();
        let samples: Vec<&crate::data::Sample> = split.unlabeled.iter().collect();
        let out = forward_eval(&model, &samples, &cfg.loss, 0.1).unwrap();
        assert_eq!(out.preds.len(), samples.len());
        assert!(out.preds.iter().all(|p| *p < 4));
        assert_eq!(out.pooled_per_block.len(), 1);
        assert_eq!(out.pooled_per_block[0].len(), samples.len() * 2);
    }
}
