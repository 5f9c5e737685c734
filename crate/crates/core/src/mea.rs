//! Multi-expert adapter: bottleneck experts behind a softmax router, fused
//! residually with the frozen FFN of each adapted block.
//!
//! Per token, the router turns the post-norm FFN input into a weight vector
//! over `T` experts; each expert is a down-project / ReLU / up-project
//! bottleneck, and the scaled, weight-mixed expert outputs are added to the
//! frozen FFN branch. Adapters are placed in the last `P` backbone blocks.
//!
//! Expert weights start at exactly zero effect (zero up-projections), so an
//! untrained adapter reproduces the frozen backbone. A single-expert
//! configuration carries no router: its weight is the constant 1.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ffn_forward, layer_norm, linear, FfnParams, LayerNormParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, ParamRef, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct MeaConfig {
    /// Expert count `T`.
    pub num_experts: usize,
    /// Bottleneck width, strictly below the embedding width.
    pub bottleneck_dim: usize,
    /// Scale factor `s` applied to the mixed expert output.
    pub scale: f64,
    /// Number of trailing backbone blocks that carry adapters (`P`).
    pub adapted_blocks: usize,
    /// Router softmax temperature.
    pub router_temp: f64,
    /// Experts reserved for old-class traffic.
    pub old_experts: BTreeSet<usize>,
    /// Experts reserved for new-class traffic.
    pub new_experts: BTreeSet<usize>,
}

impl MeaConfig {
    /// Standard grouping: the first half of the experts is the old group.
    pub fn new(
        num_experts: usize,
        bottleneck_dim: usize,
        scale: f64,
        adapted_blocks: usize,
        router_temp: f64,
    ) -> Result<Self> {
        let old_experts: BTreeSet<usize> = (0..num_experts / 2.max(1)).collect();
        let new_experts: BTreeSet<usize> = (num_experts / 2.max(1)..num_experts).collect();
        let cfg = MeaConfig {
            num_experts,
            bottleneck_dim,
            scale,
            adapted_blocks,
            router_temp,
            old_experts,
            new_experts,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("expert count must be positive".into()));
        }
        if self.bottleneck_dim == 0 {
            return Err(Error::Config("bottleneck width must be positive".into()));
        }
        if self.adapted_blocks == 0 {
            return Err(Error::Config("adapter must cover at least one block".into()));
        }
        if self.router_temp <= 0.0 {
            return Err(Error::Config(format!(
                "router temperature must be positive, got {}",
                self.router_temp
            )));
        }
        if self.scale < 0.0 {
            return Err(Error::Config(format!("scale must be non-negative, got {}", self.scale)));
        }
        if !self.old_experts.is_disjoint(&self.new_experts) {
            return Err(Error::Config("expert groups overlap".into()));
        }
        let union: BTreeSet<usize> = self.old_experts.union(&self.new_experts).copied().collect();
        let all: BTreeSet<usize> = (0..self.num_experts).collect();
        if union != all {
            return Err(Error::Config(format!(
                "expert groups {:?} + {:?} must partition 0..{}",
                self.old_experts, self.new_experts, self.num_experts
            )));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct ExpertParams {
    pub w_down: ParamRef,
    pub b_down: ParamRef,
    pub w_up: ParamRef,
    pub b_up: ParamRef,
}

#[derive(Clone)]
pub struct RouterParams {
    pub w_route: ParamRef,
}

pub struct MeaBlock {
    pub experts: Vec<ExpertParams>,
    /// Absent for a single expert, whose weight is constant.
    pub router: Option<RouterParams>,
}

pub struct MeaStack {
    pub cfg: MeaConfig,
    /// One adapter per adapted block; entry `i` serves backbone block
    /// `L - P + i`.
    pub blocks: Vec<MeaBlock>,
}

/// Initialize adapters for the last `P` blocks. Down-projections are
/// Gaussian(0, 0.02), up-projections and biases are zero (an untrained
/// adapter contributes exactly nothing), routers are Gaussian(0, 0.02).
pub fn init_mea(cfg: &MeaConfig, embed_dim: usize, store: &mut ParamStore, seed: u64) -> Result<MeaStack> {
    cfg.validate()?;
    if cfg.bottleneck_dim >= embed_dim {
        return Err(Error::Config(format!(
            "bottleneck width {} must be below the embedding width {}",
            cfg.bottleneck_dim, embed_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, dh) = (embed_dim, cfg.bottleneck_dim);
    let mut blocks = Vec::with_capacity(cfg.adapted_blocks);
    for b in 0..cfg.adapted_blocks {
        let mut experts = Vec::with_capacity(cfg.num_experts);
        for t in 0..cfg.num_experts {
            let prefix = format!("mea.block{b}.expert{t}");
            experts.push(ExpertParams {
                w_down: store.register(Param::gaussian(
                    &format!("{prefix}.w_down"),
                    dh,
                    d,
                    0.02,
                    &mut rng,
                    true,
                )),
                b_down: store.register(Param::zeros(&format!("{prefix}.b_down"), 1, dh, true)),
                w_up: store.register(Param::zeros(&format!("{prefix}.w_up"), d, dh, true)),
                b_up: store.register(Param::zeros(&format!("{prefix}.b_up"), 1, d, true)),
            });
        }
        let router = (cfg.num_experts > 1).then(|| RouterParams {
            w_route: store.register(Param::gaussian(
                &format!("mea.block{b}.router"),
                cfg.num_experts,
                d,
                0.02,
                &mut rng,
                true,
            )),
        });
        blocks.push(MeaBlock { experts, router });
    }
    Ok(MeaStack {
        cfg: cfg.clone(),
        blocks,
    })
}

/// Router weights for every token row: `softmax(x . W_route^T / temp)`.
pub fn route(graph: &Graph, x: &Tensor, router: &RouterParams, temp: f64) -> Result<Tensor> {
    if temp <= 0.0 {
        return Err(Error::Kernel(
            crate::error::KernelError::NonPositiveTemperature(temp),
        ));
    }
    let wt = graph.param(&router.w_route).transpose();
    Ok(x.matmul(&wt)?.softmax_rows(temp)?)
}

/// One expert's bottleneck: `ReLU(x . W_down^T + b_down) . W_up^T + b_up`.
pub fn expert_forward(graph: &Graph, x: &Tensor, expert: &ExpertParams) -> Result<Tensor> {
    let hidden = linear(graph, x, &expert.w_down, &expert.b_down)?.relu();
    linear(graph, &hidden, &expert.w_up, &expert.b_up)
}

impl MeaBlock {
    /// The adapted FFN of one block: frozen FFN plus residual plus the
    /// scaled, router-mixed expert outputs. Always returns the per-token
    /// route weights; with `scale == 0` the expert branch is skipped
    /// entirely so the output is bit-identical to the plain block.
    pub fn adapted_ffn(
        &self,
        graph: &Graph,
        x_tilde: &Tensor,
        ln2: &LayerNormParams,
        ffn: &FfnParams,
        cfg: &MeaConfig,
    ) -> Result<(Tensor, Tensor)> {
        if self.experts.len() != cfg.num_experts {
            return Err(Error::Config(format!(
                "block holds {} experts, config says {}",
                self.experts.len(),
                cfg.num_experts
            )));
        }
        let (v, _) = x_tilde.shape();
        let u = layer_norm(graph, x_tilde, ln2)?;
        let base = ffn_forward(graph, &u, ffn)?.add(x_tilde)?;

        let omega = match &self.router {
            Some(router) => route(graph, &u, router, cfg.router_temp)?,
            None => graph.constant(vec![1.0; v], v, 1),
        };
        if cfg.scale == 0.0 {
            return Ok((base, omega));
        }

        let mut mixed: Option<Tensor> = None;
        for (t, expert) in self.experts.iter().enumerate() {
            let out = expert_forward(graph, &u, expert)?;
            let weighted = out.row_scale(&omega.slice_cols(t, 1)?)?;
            mixed = Some(match mixed {
                Some(acc) => acc.add(&weighted)?,
                None => weighted,
            });
        }
        let delta = mixed.expect("at least one expert").scale(cfg.scale);
        Ok((base.add(&delta)?, omega))
    }
}

/// Tunable parameters of the adapter stack: `P` blocks of `T` experts
/// (`2 d d_hat + d + d_hat` each) plus, for more than one expert, a `T x d`
/// router per block. The classifier and projection head are not included.
pub fn count_tunable_params(cfg: &MeaConfig, embed_dim: usize) -> usize {
    let d = embed_dim;
    let dh = cfg.bottleneck_dim;
    let per_expert = 2 * d * dh + d + dh;
    let router = if cfg.num_experts > 1 { cfg.num_experts * d } else { 0 };
    cfg.adapted_blocks * (cfg.num_experts * per_expert + router)
}
