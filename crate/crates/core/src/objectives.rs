//! Representation and classification objectives.
//!
//! Two contrastive representation losses (self-supervised over all samples,
//! supervised over labeled ones), a prototype classifier scored by cosine
//! similarity, and self-distilled classification losses with an entropy
//! regularizer. A balancing factor λ mixes the supervised and unsupervised
//! halves.
//!
//! Contrastive terms are cross-entropies over the second-view candidates:
//! for anchor `z_i` the candidate set is every `z'_n` in the batch, with the
//! anchor's own pair `z'_i` as the positive. Keeping the positive in the
//! denominator keeps every term non-negative.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, ParamRef, ParamStore, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Loss hyperparameters. Temperatures must be positive; `lambda` in [0, 1];
/// `entropy_weight` non-negative.
#[derive(Debug, Clone)]
pub struct LossWeights {
    /// Mixing factor between unsupervised (1-λ) and supervised (λ) halves.
    pub lambda: f64,
    /// Entropy regularizer weight ε.
    pub entropy_weight: f64,
    /// Temperature of the self-supervised contrastive loss.
    pub tau_unsup: f64,
    /// Temperature of the supervised contrastive loss.
    pub tau_sup: f64,
    /// Student temperature of the prototype classifier.
    pub tau_student: f64,
    /// Sharper temperature used to form teacher pseudo-targets.
    pub tau_teacher: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.35,
            entropy_weight: 1.0,
            tau_unsup: 0.07,
            tau_sup: 0.07,
            tau_student: 0.1,
            tau_teacher: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.entropy_weight < 0.0 {
            return Err(Error::Config(format!(
                "entropy weight {} is negative",
                self.entropy_weight
            )));
        }
        for (name, t) in [
            ("tau_unsup", self.tau_unsup),
            ("tau_sup", self.tau_sup),
            ("tau_student", self.tau_student),
            ("tau_teacher", self.tau_teacher),
        ] {
            if t <= 0.0 {
                return Err(Error::Config(format!("temperature {name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Two-layer projection head `d -> hidden -> out`; its output is always
/// consumed l2-normalized.
pub struct ProjectionHead {
    pub w1: ParamRef,
    pub b1: ParamRef,
    pub w2: ParamRef,
    pub b2: ParamRef,
}

pub fn init_projection_head(
    embed_dim: usize,
    hidden: usize,
    out_dim: usize,
    store: &mut ParamStore,
    seed: u64,
) -> Result<ProjectionHead> {
    if hidden == 0 || out_dim == 0 {
        return Err(Error::Config("projection head widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Hidden biases start slightly positive so every ReLU unit is alive at
    // initialization; tightly clustered input features can otherwise leave
    // a near-degenerate set of live units.
    Ok(ProjectionHead {
        w1: store.register(Param::gaussian("head.w1", hidden, embed_dim, 0.02, &mut rng, true)),
        b1: store.register(Param::new("head.b1", vec![0.01; hidden], 1, hidden, true)),
        w2: store.register(Param::gaussian("head.w2", out_dim, hidden, 0.02, &mut rng, true)),
        b2: store.register(Param::zeros("head.b2", 1, out_dim, true)),
    })
}

impl ProjectionHead {
    /// `z = g(h) / ||g(h)||` per row.
    pub fn project_normalized(&self, graph: &Graph, h: &Tensor) -> Result<Tensor> {
        let hidden = crate::backbone::linear(graph, h, &self.w1, &self.b1)?.relu();
        let out = crate::backbone::linear(graph, &hidden, &self.w2, &self.b2)?;
        Ok(out.l2_normalize_rows()?)
    }
}

/// Learnable per-class prototype vectors.
pub struct Prototypes {
    /// `[K, d]`, trainable, excluded from weight decay.
    pub c: ParamRef,
}

pub fn init_prototypes(
    num_classes: usize,
    embed_dim: usize,
    store: &mut ParamStore,
    seed: u64,
) -> Result<Prototypes> {
    if num_classes == 0 {
        return Err(Error::Config("need at least one prototype".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Param::gaussian("prototypes", num_classes, embed_dim, 0.02, &mut rng, true);
    // Decay would shrink prototype norms against the entropy regularizer's
    // spread pressure; cosine scoring ignores the norm anyway.
    p.weight_decay = false;
    Ok(Prototypes {
        c: store.register(p),
    })
}

/// Prototype prediction: softmax over cosine similarities at the student
/// temperature. Differentiable through both features and prototypes.
pub fn predict(graph: &Graph, h: &Tensor, prototypes: &Prototypes, temperature: f64) -> Result<Tensor> {
    let h_hat = h.l2_normalize_rows()?;
    let c_hat = graph.param(&prototypes.c).l2_normalize_rows()?;
    let sims = h_hat.matmul(&c_hat.transpose())?;
    Ok(sims.softmax_rows(temperature)?)
}

fn check_normalized(label: &str, z: &Tensor) -> Result<()> {
    let (r, c) = z.shape();
    let v = z.values();
    for i in 0..r {
        let norm: f64 = v[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "{label} row {i} has norm {norm}, expected 1 within 1e-6"
            )));
        }
    }
    Ok(())
}

/// Self-supervised contrastive loss over two views:
/// `mean_i -log( exp(z_i . z'_i / tau) / sum_n exp(z_i . z'_n / tau) )`.
pub fn rep_loss_unsup(graph: &Graph, z: &Tensor, z_prime: &Tensor, tau: f64) -> Result<Tensor> {
    let (b, d) = z.shape();
    if z_prime.shape() != (b, d) {
        return Err(Error::Config(format!(
            "view shapes differ: {:?} vs {:?}",
            z.shape(),
            z_prime.shape()
        )));
    }
    if b < 2 {
        return Err(Error::Config(
            "contrastive loss needs at least 2 samples (the negative set is empty otherwise)".into(),
        ));
    }
    check_normalized("z", z)?;
    check_normalized("z'", z_prime)?;
    let probs = z.matmul(&z_prime.transpose())?.softmax_rows(tau)?;
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye = graph.constant(eye, b, b);
    Ok(probs.log()?.mul(&eye)?.sum().scale(-1.0 / b as f64))
}

/// Supervised contrastive loss: for each labeled anchor, sum the
/// cross-entropy terms of its same-label positives among the labeled
/// second-view features, averaged over the labeled anchor count. Anchors
/// without positives contribute zero. An entirely unlabeled batch yields 0.
pub fn rep_loss_sup(
    graph: &Graph,
    z: &Tensor,
    z_prime: &Tensor,
    labels: &[u32],
    labeled: &[bool],
    tau: f64,
) -> Result<Tensor> {
    let (b, d) = z.shape();
    if z_prime.shape() != (b, d) || labels.len() != b || labeled.len() != b {
        return Err(Error::Config("supervised loss inputs disagree on batch size".into()));
    }
    check_normalized("z", z)?;
    check_normalized("z'", z_prime)?;
    let n_labeled = labeled.iter().filter(|l| **l).count();
    if n_labeled == 0 {
        eprintln!("warning: supervised contrastive loss saw no labeled samples; defined as 0");
        return Ok(graph.scalar(0.0));
    }
    let probs = z.matmul(&z_prime.transpose())?.softmax_rows(tau)?;
    let mut mask = vec![0.0; b * b];
    for i in 0..b {
        if !labeled[i] {
            continue;
        }
        for q in 0..b {
            if q != i && labeled[q] && labels[q] == labels[i] {
                mask[i * b + q] = 1.0;
            }
        }
    }
    let mask = graph.constant(mask, b, b);
    Ok(probs
        .log()?
        .mul(&mask)?
        .sum()
        .scale(-1.0 / n_labeled as f64))
}

/// The two classification losses.
pub struct ClsLosses {
    /// Self-distilled cross-entropy minus the entropy regularizer.
    pub unsup: Tensor,
    /// Cross-entropy of labeled samples against their ground truth.
    pub sup: Tensor,
}

/// `teacher` must be gradient-detached pseudo-targets from the other view.
/// `p` and `p_prime` are the two views' predictions (rows on the simplex);
/// the mean prediction entropy is computed over both.
pub fn cls_losses(
    graph: &Graph,
    p: &Tensor,
    p_prime: &Tensor,
    teacher: &Tensor,
    labels: &[u32],
    labeled: &[bool],
    entropy_weight: f64,
) -> Result<ClsLosses> {
    if entropy_weight < 0.0 {
        return Err(Error::Config(format!(
            "entropy weight {entropy_weight} is negative"
        )));
    }
    let (b, k) = p.shape();
    if p_prime.shape() != (b, k) || teacher.shape() != (b, k) {
        return Err(Error::Config("prediction shapes disagree".into()));
    }
    if labels.len() != b || labeled.len() != b {
        return Err(Error::Config("label metadata disagrees with batch size".into()));
    }
    let log_p = p.log()?;
    let ce_unsup = teacher.detach().mul(&log_p)?.sum().scale(-1.0 / b as f64);
    // Mean prediction over both views, then its entropy.
    let p_bar = graph.concat_rows(&[p.clone(), p_prime.clone()])?.mean_rows();
    let entropy = p_bar.mul(&p_bar.log()?)?.sum().scale(-1.0);
    let unsup = ce_unsup.add(&entropy.scale(-entropy_weight))?;

    let n_labeled = labeled.iter().filter(|l| **l).count();
    let sup = if n_labeled == 0 {
        eprintln!("warning: supervised classification loss saw no labeled samples; defined as 0");
        graph.scalar(0.0)
    } else {
        let mut onehot = vec![0.0; b * k];
        for i in 0..b {
            if labeled[i] {
                let y = labels[i] as usize;
                if y >= k {
                    return Err(Error::Config(format!("label {y} outside the {k} classes")));
                }
                onehot[i * k + y] = 1.0;
            }
        }
        let onehot = graph.constant(onehot, b, k);
        log_p.mul(&onehot)?.sum().scale(-1.0 / n_labeled as f64)
    };
    Ok(ClsLosses { unsup, sup })
}

/// The four mixed loss components plus their λ-weighted total.
pub struct ObjectiveParts {
    pub rep_unsup: Tensor,
    pub rep_sup: Tensor,
    pub cls_unsup: Tensor,
    pub cls_sup: Tensor,
    pub total: Tensor,
}

/// Mix the four components: `(1-λ)(rep_u + cls_u) + λ(rep_s + cls_s)`.
pub fn mix_objective(
    rep_unsup: Tensor,
    rep_sup: Tensor,
    cls_unsup: Tensor,
    cls_sup: Tensor,
    lambda: f64,
) -> Result<ObjectiveParts> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let unsup = rep_unsup.add(&cls_unsup)?.scale(1.0 - lambda);
    let sup = rep_sup.add(&cls_sup)?.scale(lambda);
    let total = unsup.add(&sup)?;
    Ok(ObjectiveParts {
        rep_unsup,
        rep_sup,
        cls_unsup,
        cls_sup,
        total,
    })
}
