//! Run configuration, the training loop, and the evaluation/ablation/grad
//! check entry points behind the CLI.
//!
//! Configuration is flat `key=value` text with sectioned prefixes
//! (`backbone.*`, `mea.*`, `loss.*`, `data.*`, `opt.*`, plus top-level
//! `seed` and `out`). Unknown keys are errors. Every module precondition is
//! validated before a run starts.

mod ablate;
mod checkpoint;
mod gradcheck;
mod model;
mod optimizer;
mod schedule;
mod train;

pub use ablate::{ablate, ablation_csv, AblationRow, Variant};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GroupReport};
pub use model::{build_model, forward_batch, forward_eval, BatchForward, EvalForward, Model};
pub use optimizer::SgdMomentum;
pub use schedule::CosineSchedule;
pub use train::{evaluate_split, train, write_eval_reports, StepRecord, TrainOutcome};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::data::{Balance, DatasetSpec};
use crate::error::{Error, Result};
use crate::mea::MeaConfig;
use crate::objectives::LossWeights;
use crate::routeconstraint::ConstraintWeights;

/// Optimizer and loop settings.
#[derive(Debug, Clone)]
pub struct OptConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Two-view augmentation strength.
    pub augment: f64,
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} is negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay {} is negative",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.augment < 0.0 {
            return Err(Error::Config(format!(
                "augmentation strength {} is negative",
                self.augment
            )));
        }
        Ok(())
    }
}

/// Where the training data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Spec(DatasetSpec),
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    /// Absent for the frozen-backbone-plus-head baseline.
    pub mea: Option<MeaConfig>,
    pub loss: LossWeights,
    pub constraint: ConstraintWeights,
    /// Use ground-truth labels as pseudo-labels for the route constraint
    /// (oracle mode for controlled runs).
    pub oracle_pseudo: bool,
    pub data: DataSource,
    pub opt: OptConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Desk-scale default: 6 blocks of width 64, 4 experts over the last 3
    /// blocks, 10 classes at 20 samples each, 20 epochs. One full run takes
    /// well under five minutes on a single core.
    pub fn desk(seed: u64) -> Self {
        let backbone = BackboneConfig {
            num_blocks: 6,
            embed_dim: 64,
            num_heads: 4,
            token_count: 6,
            input_dim: 24,
            mlp_hidden: 128,
            seed,
            unfreeze_last_block: false,
        };
        let data = DatasetSpec {
            num_classes: 10,
            num_old_classes: 5,
            labeled_fraction: 0.5,
            samples_per_class: 20,
            token_count: 6,
            feature_dim: 24,
            separation: 1.0,
            noise: 0.05,
            balance: Balance::Balanced,
            seed,
        };
        RunConfig {
            backbone,
            mea: Some(MeaConfig::new(4, 16, 0.4, 3, 1.0).expect("valid desk adapter")),
            loss: LossWeights {
                // Softer distillation than the full-scale defaults: with a
                // random frozen backbone, sharp teachers and a sharp
                // student lock early cluster merges in before the entropy
                // pressure can spread them over all prototypes.
                entropy_weight: 2.0,
                tau_teacher: 0.08,
                tau_student: 0.15,
                ..LossWeights::default()
            },
            constraint: ConstraintWeights::default(),
            oracle_pseudo: false,
            data: DataSource::Spec(data),
            opt: OptConfig {
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 5e-5,
                epochs: 30,
                batch_size: 32,
                augment: 0.1,
            },
            seed,
            out_dir: PathBuf::from("run-out"),
        }
    }

    /// Tiny everything (dims at most 8): the gradient-check configuration.
    pub fn tiny(seed: u64) -> Self {
        let backbone = BackboneConfig {
            num_blocks: 2,
            embed_dim: 8,
            num_heads: 2,
            token_count: 3,
            input_dim: 5,
            mlp_hidden: 8,
            seed,
            unfreeze_last_block: false,
        };
        let data = DatasetSpec {
            num_classes: 4,
            num_old_classes: 2,
            labeled_fraction: 0.5,
            samples_per_class: 4,
            token_count: 3,
            feature_dim: 5,
            separation: 1.0,
            noise: 0.1,
            balance: Balance::Balanced,
            seed,
        };
        RunConfig {
            backbone,
            mea: Some(MeaConfig::new(2, 4, 0.5, 1, 1.0).expect("valid tiny adapter")),
            loss: LossWeights::default(),
            constraint: ConstraintWeights {
                alpha: 0.5,
                beta: 0.5,
                tau_gate: 0.1,
            },
            oracle_pseudo: false,
            data: DataSource::Spec(data),
            opt: OptConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                epochs: 1,
                batch_size: 8,
                augment: 0.1,
            },
            seed,
            out_dir: PathBuf::from("run-out"),
        }
    }

    /// Published full-scale hyperparameter rows, by dataset name. These are
    /// constructible for inspection and parameter accounting; training them
    /// needs the real pretrained backbone and datasets.
    pub fn paper_preset(name: &str, seed: u64) -> Result<Self> {
        // (s, P, alpha, beta, tau_r) per dataset; T=8, d_hat=64, tau_g=0.1
        // everywhere.
        let (s, p, alpha, beta, tau_r) = match name {
            "cub" => (0.4, 6, 0.03, 0.1, 5.0),
            "aircraft" => (0.4, 8, 0.1, 0.1, 10.0),
            "scars" => (0.4, 6, 0.1, 0.1, 10.0),
            "cifar10" => (0.2, 6, 0.05, 0.05, 10.0),
            "cifar100" => (0.8, 8, 0.05, 0.05, 10.0),
            "imagenet100" => (0.4, 8, 0.06, 0.2, 10.0),
            "herbarium19" => (0.4, 8, 0.05, 0.05, 10.0),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other}; expected one of cub, aircraft, scars, cifar10, cifar100, imagenet100, herbarium19"
                )))
            }
        };
        let mut cfg = RunConfig::desk(seed);
        cfg.backbone = BackboneConfig::paper_scale(seed);
        cfg.mea = Some(MeaConfig::new(8, 64, s, p, tau_r)?);
        cfg.constraint = ConstraintWeights {
            alpha,
            beta,
            tau_gate: 0.1,
        };
        cfg.opt = OptConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-5,
            epochs: 200,
            batch_size: 128,
            augment: 0.2,
        };
        Ok(cfg)
    }

    /// Validate every module precondition up front.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(mea) = &self.mea {
            mea.validate()?;
            if mea.adapted_blocks > self.backbone.num_blocks {
                return Err(Error::Config(format!(
                    "adapter spans {} blocks but the backbone has {}",
                    mea.adapted_blocks, self.backbone.num_blocks
                )));
            }
            if mea.bottleneck_dim >= self.backbone.embed_dim {
                return Err(Error::Config(format!(
                    "bottleneck {} must be below the embedding width {}",
                    mea.bottleneck_dim, self.backbone.embed_dim
                )));
            }
        }
        self.loss.validate()?;
        self.constraint.validate()?;
        self.opt.validate()?;
        if let DataSource::Spec(spec) = &self.data {
            spec.validate()?;
            if spec.token_count != self.backbone.token_count
                || spec.feature_dim != self.backbone.input_dim
            {
                return Err(Error::Config(format!(
                    "data tokens {}x{} do not match the backbone input {}x{}",
                    spec.token_count,
                    spec.feature_dim,
                    self.backbone.token_count,
                    self.backbone.input_dim
                )));
            }
        }
        Ok(())
    }

    /// Old classes of the configured dataset (`0..num_old_classes`).
    pub fn old_class_set(spec: &DatasetSpec) -> BTreeSet<usize> {
        (0..spec.num_old_classes).collect()
    }

    /// Canonical text form; also what the config hash covers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("out={}\n", self.out_dir.display()));
        let b = &self.backbone;
        s.push_str(&format!("backbone.blocks={}\n", b.num_blocks));
        s.push_str(&format!("backbone.dim={}\n", b.embed_dim));
        s.push_str(&format!("backbone.heads={}\n", b.num_heads));
        s.push_str(&format!("backbone.tokens={}\n", b.token_count));
        s.push_str(&format!("backbone.input_dim={}\n", b.input_dim));
        s.push_str(&format!("backbone.mlp_hidden={}\n", b.mlp_hidden));
        s.push_str(&format!("backbone.unfreeze_last_block={}\n", b.unfreeze_last_block));
        match &self.mea {
            None => s.push_str("mea.enabled=false\n"),
            Some(m) => {
                s.push_str("mea.enabled=true\n");
                s.push_str(&format!("mea.experts={}\n", m.num_experts));
                s.push_str(&format!("mea.bottleneck={}\n", m.bottleneck_dim));
                s.push_str(&format!("mea.scale={}\n", m.scale));
                s.push_str(&format!("mea.blocks={}\n", m.adapted_blocks));
                s.push_str(&format!("mea.router_temp={}\n", m.router_temp));
                let olds: Vec<String> = m.old_experts.iter().map(|e| e.to_string()).collect();
                s.push_str(&format!("mea.old_experts={}\n", olds.join(",")));
            }
        }
        let l = &self.loss;
        s.push_str(&format!("loss.lambda={}\n", l.lambda));
        s.push_str(&format!("loss.epsilon={}\n", l.entropy_weight));
        s.push_str(&format!("loss.tau_unsup={}\n", l.tau_unsup));
        s.push_str(&format!("loss.tau_sup={}\n", l.tau_sup));
        s.push_str(&format!("loss.tau_student={}\n", l.tau_student));
        s.push_str(&format!("loss.tau_teacher={}\n", l.tau_teacher));
        s.push_str(&format!("loss.alpha={}\n", self.constraint.alpha));
        s.push_str(&format!("loss.beta={}\n", self.constraint.beta));
        s.push_str(&format!("loss.tau_gate={}\n", self.constraint.tau_gate));
        s.push_str(&format!("loss.oracle_pseudo={}\n", self.oracle_pseudo));
        match &self.data {
            DataSource::File(p) => s.push_str(&format!("data.file={}\n", p.display())),
            DataSource::Spec(d) => {
                s.push_str(&format!("data.classes={}\n", d.num_classes));
                s.push_str(&format!("data.old_classes={}\n", d.num_old_classes));
                s.push_str(&format!("data.labeled_fraction={}\n", d.labeled_fraction));
                s.push_str(&format!("data.per_class={}\n", d.samples_per_class));
                s.push_str(&format!("data.tokens={}\n", d.token_count));
                s.push_str(&format!("data.dim={}\n", d.feature_dim));
                s.push_str(&format!("data.separation={}\n", d.separation));
                s.push_str(&format!("data.noise={}\n", d.noise));
                match d.balance {
                    Balance::Balanced => s.push_str("data.balance=balanced\n"),
                    Balance::LongTailed { ratio } => {
                        s.push_str("data.balance=long_tailed\n");
                        s.push_str(&format!("data.tail_ratio={ratio}\n"));
                    }
                }
                s.push_str(&format!("data.seed={}\n", d.seed));
            }
        }
        let o = &self.opt;
        s.push_str(&format!("opt.lr={}\n", o.lr));
        s.push_str(&format!("opt.momentum={}\n", o.momentum));
        s.push_str(&format!("opt.weight_decay={}\n", o.weight_decay));
        s.push_str(&format!("opt.epochs={}\n", o.epochs));
        s.push_str(&format!("opt.batch={}\n", o.batch_size));
        s.push_str(&format!("opt.augment={}\n", o.augment));
        s
    }

    /// Parse `key=value` lines over the desk defaults. Unknown keys are
    /// errors, not warnings.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::apply_text(RunConfig::desk(0), text)
    }

    /// Apply `key=value` lines on top of an existing configuration (the
    /// CLI's `--set` overrides and config files share this path).
    pub fn apply_text(base: RunConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut mea_enabled = cfg.mea.is_some();
        let mut explicit_old_experts: Option<BTreeSet<usize>> = None;
        let mut data_file: Option<PathBuf> = None;
        let mut data_spec_touched = false;
        let base_source = cfg.data.clone();
        let mut data_spec = match &cfg.data {
            DataSource::Spec(s) => s.clone(),
            DataSource::File(_) => DatasetSpec::separable(cfg.seed),
        };
        let mut mea = cfg
            .mea
            .clone()
            .unwrap_or_else(|| MeaConfig::new(4, 12, 0.4, 3, 1.0).expect("valid default adapter"));

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.starts_with("data.") && key != "data.file" {
                data_spec_touched = true;
            }
            let bad = |what: &str| Error::Config(format!("line {}: {key}: {what}", lineno + 1));
            let as_usize = || value.parse::<usize>().map_err(|_| bad("not an integer"));
            let as_u64 = || value.parse::<u64>().map_err(|_| bad("not an integer"));
            let as_f64 = || value.parse::<f64>().map_err(|_| bad("not a number"));
            let as_bool = || match value {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(bad("not a boolean")),
            };
            match key {
                "seed" => cfg.seed = as_u64()?,
                "out" => cfg.out_dir = PathBuf::from(value),
                "backbone.blocks" => cfg.backbone.num_blocks = as_usize()?,
                "backbone.dim" => cfg.backbone.embed_dim = as_usize()?,
                "backbone.heads" => cfg.backbone.num_heads = as_usize()?,
                "backbone.tokens" => cfg.backbone.token_count = as_usize()?,
                "backbone.input_dim" => cfg.backbone.input_dim = as_usize()?,
                "backbone.mlp_hidden" => cfg.backbone.mlp_hidden = as_usize()?,
                "backbone.unfreeze_last_block" => cfg.backbone.unfreeze_last_block = as_bool()?,
                "mea.enabled" => mea_enabled = as_bool()?,
                "mea.experts" => mea.num_experts = as_usize()?,
                "mea.bottleneck" => mea.bottleneck_dim = as_usize()?,
                "mea.scale" => mea.scale = as_f64()?,
                "mea.blocks" => mea.adapted_blocks = as_usize()?,
                "mea.router_temp" => mea.router_temp = as_f64()?,
                "mea.old_experts" => {
                    let mut set = BTreeSet::new();
                    for part in value.split(',').filter(|p| !p.is_empty()) {
                        set.insert(part.trim().parse::<usize>().map_err(|_| bad("bad expert id"))?);
                    }
                    explicit_old_experts = Some(set);
                }
                "loss.lambda" => cfg.loss.lambda = as_f64()?,
                "loss.epsilon" => cfg.loss.entropy_weight = as_f64()?,
                "loss.tau_unsup" => cfg.loss.tau_unsup = as_f64()?,
                "loss.tau_sup" => cfg.loss.tau_sup = as_f64()?,
                "loss.tau_student" => cfg.loss.tau_student = as_f64()?,
                "loss.tau_teacher" => cfg.loss.tau_teacher = as_f64()?,
                "loss.alpha" => cfg.constraint.alpha = as_f64()?,
                "loss.beta" => cfg.constraint.beta = as_f64()?,
                "loss.tau_gate" => cfg.constraint.tau_gate = as_f64()?,
                "loss.oracle_pseudo" => cfg.oracle_pseudo = as_bool()?,
                "data.file" => data_file = Some(PathBuf::from(value)),
                "data.classes" => data_spec.num_classes = as_usize()?,
                "data.old_classes" => data_spec.num_old_classes = as_usize()?,
                "data.labeled_fraction" => data_spec.labeled_fraction = as_f64()?,
                "data.per_class" => data_spec.samples_per_class = as_usize()?,
                "data.tokens" => data_spec.token_count = as_usize()?,
                "data.dim" => data_spec.feature_dim = as_usize()?,
                "data.separation" => data_spec.separation = as_f64()?,
                "data.noise" => data_spec.noise = as_f64()?,
                "data.balance" => {
                    data_spec.balance = match value {
                        "balanced" => Balance::Balanced,
                        "long_tailed" => Balance::LongTailed { ratio: 0.85 },
                        _ => return Err(bad("expected balanced or long_tailed")),
                    }
                }
                "data.tail_ratio" => {
                    if let Balance::LongTailed { ref mut ratio } = data_spec.balance {
                        *ratio = as_f64()?;
                    } else {
                        return Err(bad("tail_ratio requires data.balance=long_tailed"));
                    }
                }
                "data.seed" => data_spec.seed = as_u64()?,
                "opt.lr" => cfg.opt.lr = as_f64()?,
                "opt.momentum" => cfg.opt.momentum = as_f64()?,
                "opt.weight_decay" => cfg.opt.weight_decay = as_f64()?,
                "opt.epochs" => cfg.opt.epochs = as_usize()?,
                "opt.batch" => cfg.opt.batch_size = as_usize()?,
                "opt.augment" => cfg.opt.augment = as_f64()?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown configuration key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }

        cfg.backbone.seed = cfg.seed;
        cfg.mea = if mea_enabled {
            // Re-derive the default group split for the configured expert
            // count, then apply an explicit old-group override.
            let mut rebuilt = MeaConfig::new(
                mea.num_experts,
                mea.bottleneck_dim,
                mea.scale,
                mea.adapted_blocks,
                mea.router_temp,
            )?;
            if let Some(old) = explicit_old_experts {
                let all: BTreeSet<usize> = (0..rebuilt.num_experts).collect();
                rebuilt.new_experts = all.difference(&old).copied().collect();
                rebuilt.old_experts = old;
                rebuilt.validate()?;
            }
            Some(rebuilt)
        } else {
            None
        };
        cfg.data = if let Some(p) = data_file {
            DataSource::File(p)
        } else if data_spec_touched {
            DataSource::Spec(data_spec)
        } else {
            base_source
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Load or generate the dataset this run trains on.
    pub fn load_split(&self) -> Result<crate::data::GcdSplit> {
        let split = match &self.data {
            DataSource::Spec(spec) => crate::data::generate(spec)?,
            DataSource::File(path) => crate::data::load(path)?,
        };
        let spec = &split.spec;
        if spec.token_count != self.backbone.token_count
            || spec.feature_dim != self.backbone.input_dim
        {
            return Err(Error::Config(format!(
                "dataset tokens {}x{} do not match the backbone input {}x{}",
                spec.token_count, spec.feature_dim, self.backbone.token_count, self.backbone.input_dim
            )));
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_preserves_the_config() {
        let cfg = RunConfig::desk(7);
        let text = cfg.to_text();
        let parsed = RunConfig::from_text(&text).unwrap();
        assert_eq!(parsed.to_text(), text);
        assert_eq!(parsed.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::from_text("bogus.key=1\n").unwrap_err();
        assert!(err.to_string().contains("unknown configuration key"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(RunConfig::from_text("justakey\n").is_err());
        assert!(RunConfig::from_text("opt.lr=abc\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::from_text("# comment\n\nseed=3\n").unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn cub_preset_matches_the_published_row() {
        let cfg = RunConfig::paper_preset("cub", 0).unwrap();
        let mea = cfg.mea.as_ref().unwrap();
        assert_eq!(mea.scale, 0.4);
        assert_eq!(mea.adapted_blocks, 6);
        assert_eq!(mea.num_experts, 8);
        assert_eq!(mea.bottleneck_dim, 64);
        assert_eq!(cfg.constraint.alpha, 0.03);
        assert_eq!(cfg.constraint.beta, 0.1);
        assert_eq!(mea.router_temp, 5.0);
        assert_eq!(cfg.constraint.tau_gate, 0.1);
        assert_eq!(cfg.opt.lr, 0.1);
        assert_eq!(cfg.opt.batch_size, 128);
        assert_eq!(cfg.opt.epochs, 200);
        // Old/new expert groups split four and four.
        assert_eq!(mea.old_experts.len(), 4);
        assert_eq!(mea.new_experts.len(), 4);
        assert!(RunConfig::paper_preset("nonesuch", 0).is_err());
    }

    #[test]
    fn validation_runs_every_module_check() {
        let mut cfg = RunConfig::desk(0);
        cfg.backbone.embed_dim = 50; // not divisible by 4 heads
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk(0);
        if let Some(m) = cfg.mea.as_mut() {
            m.adapted_blocks = 99;
        }
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk(0);
        cfg.loss.tau_student = -0.1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk(0);
        cfg.opt.batch_size = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk(0);
        if let DataSource::Spec(ref mut d) = cfg.data {
            d.token_count += 1; // disagrees with the backbone
        }
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn explicit_expert_groups_are_honored() {
        let text = "mea.experts=4\nmea.old_experts=0,2\nmea.bottleneck=12\n";
        let cfg = RunConfig::from_text(text).unwrap();
        let mea = cfg.mea.unwrap();
        assert_eq!(mea.old_experts, [0, 2].into_iter().collect());
        assert_eq!(mea.new_experts, [1, 3].into_iter().collect());
    }

    #[test]
    fn disabling_the_adapter_yields_a_baseline_config() {
        let cfg = RunConfig::from_text("mea.enabled=false\n").unwrap();
        assert!(cfg.mea.is_none());
    }
}
