//! Ablation runner: trains configuration variants on shared data and seed,
//! and tabulates the accuracy decomposition per variant.

use crate::error::Result;
use crate::mea::MeaConfig;

use super::{train, RunConfig};

/// The studied variants, from the frozen baseline to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Frozen backbone plus head/prototypes only.
    Baseline,
    /// One adapter expert per block, no routing losses.
    SingleAdapter,
    /// Multi-expert adapter, no routing losses.
    Mea,
    /// Multi-expert adapter plus the balanced assignment loss.
    MeaBalanced,
    /// Multi-expert adapter plus both assignment losses.
    MeaFull,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::SingleAdapter,
        Variant::Mea,
        Variant::MeaBalanced,
        Variant::MeaFull,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SingleAdapter => "single_adapter",
            Variant::Mea => "mea",
            Variant::MeaBalanced => "mea_ba",
            Variant::MeaFull => "mea_ba_cba",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Derive this variant's run configuration from the full-method config.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            Variant::Baseline => {
                cfg.mea = None;
                cfg.constraint.alpha = 0.0;
                cfg.constraint.beta = 0.0;
            }
            Variant::SingleAdapter => {
                let m = base.mea.clone().expect("ablation base needs an adapter config");
                cfg.mea = Some(MeaConfig::new(
                    1,
                    m.bottleneck_dim,
                    m.scale,
                    m.adapted_blocks,
                    m.router_temp,
                )?);
                cfg.constraint.alpha = 0.0;
                cfg.constraint.beta = 0.0;
            }
            Variant::Mea => {
                cfg.constraint.alpha = 0.0;
                cfg.constraint.beta = 0.0;
            }
            Variant::MeaBalanced => {
                cfg.constraint.alpha = 0.0;
            }
            Variant::MeaFull => {}
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: &'static str,
    pub experts: usize,
    pub bottleneck: usize,
    pub balanced_loss: bool,
    pub category_loss: bool,
    pub acc_all: f64,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("variant,experts,bottleneck,loss_ba,loss_cba,acc_all,acc_old,acc_new\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{},{}\n",
            r.variant,
            r.experts,
            r.bottleneck,
            u8::from(r.balanced_loss),
            u8::from(r.category_loss),
            r.acc_all,
            fmt(r.acc_old),
            fmt(r.acc_new),
        ));
    }
    out
}

/// Run every requested variant with the shared seed and data source; write
/// `ablation.csv` under the base config's output directory.
pub fn ablate(base: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(&base.out_dir)?;
    let mut rows = Vec::new();
    for v in variants {
        let mut cfg = v.apply(base)?;
        cfg.out_dir = base.out_dir.join(v.name());
        let outcome = train(&cfg)?;
        let (experts, bottleneck) = cfg
            .mea
            .as_ref()
            .map(|m| (m.num_experts, m.bottleneck_dim))
            .unwrap_or((0, 0));
        rows.push(AblationRow {
            variant: v.name(),
            experts,
            bottleneck,
            balanced_loss: cfg.constraint.beta > 0.0,
            category_loss: cfg.constraint.alpha > 0.0,
            acc_all: outcome.report.acc_all,
            acc_old: outcome.report.acc_old,
            acc_new: outcome.report.acc_new,
        });
    }
    std::fs::write(base.out_dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}
