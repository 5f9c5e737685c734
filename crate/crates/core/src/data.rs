//! Synthetic dataset generation for category discovery at desk scale.
//!
//! Samples are token sequences drawn around per-class archetypes: class `k`
//! owns a `token_count x feature_dim` archetype matrix, and each sample adds
//! seeded Gaussian noise to it. The split follows the standard protocol: a
//! subset of classes is "old"; a fraction of each old class is labeled; new
//! classes appear only unlabeled. Everything is a deterministic function of
//! the spec and its seed.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Class-size profile of the generated dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Balance {
    /// Every class holds `samples_per_class` samples.
    Balanced,
    /// Class `k` holds `max(2, round(samples_per_class * ratio^k))` samples,
    /// mirroring long-tailed collections.
    LongTailed { ratio: f64 },
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    /// Total number of classes `K`.
    pub num_classes: usize,
    /// Number of old (partially labeled) classes; the rest are new.
    pub num_old_classes: usize,
    /// Fraction of each old class that is labeled, in (0, 1].
    pub labeled_fraction: f64,
    pub samples_per_class: usize,
    pub token_count: usize,
    pub feature_dim: usize,
    /// Scale of the class archetypes; larger means better separated classes.
    pub separation: f64,
    /// Standard deviation of per-sample noise around the archetype.
    pub noise: f64,
    pub balance: Balance,
    pub seed: u64,
}

impl DatasetSpec {
    /// Well-separated small dataset: 8 classes (4 old), 16 samples per
    /// class, noise well below the archetype scale.
    pub fn separable(seed: u64) -> Self {
        DatasetSpec {
            num_classes: 8,
            num_old_classes: 4,
            labeled_fraction: 0.5,
            samples_per_class: 16,
            token_count: 6,
            feature_dim: 24,
            separation: 1.0,
            noise: 0.05,
            balance: Balance::Balanced,
            seed,
        }
    }

    /// Same split ratios as the CIFAR100 protocol: 80% of classes are old.
    pub fn cifar100_style(seed: u64) -> Self {
        DatasetSpec {
            num_classes: 10,
            num_old_classes: 8,
            ..DatasetSpec::separable(seed)
        }
    }

    /// Long-tailed preset with geometrically shrinking class sizes.
    pub fn long_tailed(seed: u64) -> Self {
        DatasetSpec {
            balance: Balance::LongTailed { ratio: 0.85 },
            ..DatasetSpec::separable(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_old_classes == 0 || self.num_old_classes >= self.num_classes {
            return Err(Error::Config(format!(
                "old class count {} must be in [1, {})",
                self.num_old_classes, self.num_classes
            )));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled fraction {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        if self.separation <= 0.0 {
            return Err(Error::Config(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::Config(format!(
                "noise must be non-negative, got {}",
                self.noise
            )));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config(
                "need at least 2 samples per class so every old class has both a labeled and an unlabeled sample".into(),
            ));
        }
        if self.token_count == 0 || self.feature_dim == 0 {
            return Err(Error::Config("token_count and feature_dim must be positive".into()));
        }
        if let Balance::LongTailed { ratio } = self.balance {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::Config(format!("long-tail ratio {ratio} outside (0, 1]")));
            }
        }
        Ok(())
    }

    fn class_size(&self, class: usize) -> usize {
        match self.balance {
            Balance::Balanced => self.samples_per_class,
            Balance::LongTailed { ratio } => {
                let n = (self.samples_per_class as f64) * ratio.powi(class as i32);
                (n.round() as usize).max(2)
            }
        }
    }
}

/// One sample: a token sequence plus labeling metadata. The true class is
/// kept for evaluation; training code must consult it only when `labeled`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u32,
    /// Row-major `token_count x feature_dim`.
    pub tokens: Vec<f64>,
    pub label: u32,
    pub labeled: bool,
}

/// Labeled/unlabeled split with its class sets.
#[derive(Debug, Clone)]
pub struct GcdSplit {
    pub spec: DatasetSpec,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub old_classes: BTreeSet<usize>,
    pub new_classes: BTreeSet<usize>,
}

impl GcdSplit {
    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.labeled.iter().chain(self.unlabeled.iter())
    }
}

/// Generate a dataset and its split, deterministically from the spec seed.
pub fn generate(spec: &DatasetSpec) -> Result<GcdSplit> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tokens_len = spec.token_count * spec.feature_dim;

    // Class archetypes: independent Gaussian token matrices scaled by the
    // separation, so expected pairwise distances grow with it.
    let archetypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..tokens_len).map(|_| spec.separation * normal(&mut rng)).collect())
        .collect();

    let old_classes: BTreeSet<usize> = (0..spec.num_old_classes).collect();
    let new_classes: BTreeSet<usize> = (spec.num_old_classes..spec.num_classes).collect();

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut next_id = 0u32;
    for class in 0..spec.num_classes {
        let n = spec.class_size(class);
        // Labeled count clamped so each old class keeps at least one
        // unlabeled sample (the evaluation set must cover old classes).
        let n_labeled = if old_classes.contains(&class) {
            (((n as f64) * spec.labeled_fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        for j in 0..n {
            let tokens: Vec<f64> = archetypes[class]
                .iter()
                .map(|a| a + spec.noise * normal(&mut rng))
                .collect();
            let sample = Sample {
                id: next_id,
                tokens,
                label: class as u32,
                labeled: j < n_labeled,
            };
            next_id += 1;
            if sample.labeled {
                labeled.push(sample);
            } else {
                unlabeled.push(sample);
            }
        }
    }
    Ok(GcdSplit {
        spec: spec.clone(),
        labeled,
        unlabeled,
        old_classes,
        new_classes,
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Two independent perturbations of one sample: additive Gaussian noise plus
/// random token dropout-to-mean. Strength 0 returns the original twice.
/// Deterministic in (sample id, seed).
pub fn augment_two_views(
    sample: &Sample,
    token_count: usize,
    feature_dim: usize,
    strength: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if strength < 0.0 {
        return Err(Error::Config(format!("augmentation strength {strength} is negative")));
    }
    if strength == 0.0 {
        return Ok((sample.tokens.clone(), sample.tokens.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(sample.id as u64 + 1)));
    let drop_prob = (0.5 * strength).min(0.5);
    let mut make_view = || {
        let mut view = sample.tokens.clone();
        for v in view.iter_mut() {
            *v += strength * normal(&mut rng);
        }
        // Token dropout: replace a whole token with the mean token.
        let mean_token: Vec<f64> = (0..feature_dim)
            .map(|j| {
                (0..token_count).map(|t| sample.tokens[t * feature_dim + j]).sum::<f64>()
                    / token_count as f64
            })
            .collect();
        for t in 0..token_count {
            if rng.gen_range(0.0..1.0) < drop_prob {
                view[t * feature_dim..(t + 1) * feature_dim].copy_from_slice(&mean_token);
            }
        }
        view
    };
    let a = make_view();
    let b = make_view();
    Ok((a, b))
}

/// A mini-batch carrying two augmented views per sample.
#[derive(Debug, Clone)]
pub struct BatchViews {
    pub ids: Vec<u32>,
    /// Per sample, row-major `token_count x feature_dim`.
    pub view_a: Vec<Vec<f64>>,
    pub view_b: Vec<Vec<f64>>,
    pub labeled: Vec<bool>,
    /// True class per sample; meaningful for training only where `labeled`.
    pub labels: Vec<u32>,
}

impl BatchViews {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled[i]).collect()
    }
}

/// Shuffled epoch iterator over mixed labeled/unlabeled batches. Each epoch
/// covers every sample exactly once; the last batch may be short.
pub fn batch_iter(
    split: &GcdSplit,
    batch_size: usize,
    augment_strength: f64,
    epoch_seed: u64,
) -> Result<Vec<BatchViews>> {
    if batch_size < 2 {
        return Err(Error::Config(
            "batch size must be at least 2 (contrastive losses need a negative)".into(),
        ));
    }
    let mut order: Vec<&Sample> = split.all_samples().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);

    let spec = &split.spec;
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut batch = BatchViews {
            ids: Vec::with_capacity(chunk.len()),
            view_a: Vec::with_capacity(chunk.len()),
            view_b: Vec::with_capacity(chunk.len()),
            labeled: Vec::with_capacity(chunk.len()),
            labels: Vec::with_capacity(chunk.len()),
        };
        for s in chunk {
            let (a, b) = augment_two_views(
                s,
                spec.token_count,
                spec.feature_dim,
                augment_strength,
                epoch_seed,
            )?;
            batch.ids.push(s.id);
            batch.view_a.push(a);
            batch.view_b.push(b);
            batch.labeled.push(s.labeled);
            batch.labels.push(s.label);
        }
        batches.push(batch);
    }
    Ok(batches)
}

// ── .gcd file format ─────────────────────────────────────────────────
//
// Text header of `key=value` lines between `gcd-dataset v1` and `end_header`,
// then one binary record per sample: id (u32 LE), label (i32 LE), labeled
// flag (u32 LE), then token_count*feature_dim f64 LE values.

pub fn save(split: &GcdSplit, path: &Path) -> Result<()> {
    let spec = &split.spec;
    let mut header = String::new();
    header.push_str("gcd-dataset v1\n");
    header.push_str(&format!("num_classes={}\n", spec.num_classes));
    header.push_str(&format!("num_old_classes={}\n", spec.num_old_classes));
    header.push_str(&format!("labeled_fraction={}\n", spec.labeled_fraction));
    header.push_str(&format!("samples_per_class={}\n", spec.samples_per_class));
    header.push_str(&format!("token_count={}\n", spec.token_count));
    header.push_str(&format!("feature_dim={}\n", spec.feature_dim));
    header.push_str(&format!("separation={}\n", spec.separation));
    header.push_str(&format!("noise={}\n", spec.noise));
    let (balance, ratio) = match spec.balance {
        Balance::Balanced => ("balanced", 1.0),
        Balance::LongTailed { ratio } => ("long_tailed", ratio),
    };
    header.push_str(&format!("balance={balance}\n"));
    header.push_str(&format!("tail_ratio={ratio}\n"));
    header.push_str(&format!("seed={}\n", spec.seed));
    header.push_str(&format!(
        "num_samples={}\n",
        split.labeled.len() + split.unlabeled.len()
    ));
    header.push_str("record=id:u32le,label:i32le,labeled:u32le,tokens:f64le\n");
    header.push_str("end_header\n");

    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    for s in split.all_samples() {
        f.write_all(&s.id.to_le_bytes())?;
        f.write_all(&(s.label as i32).to_le_bytes())?;
        f.write_all(&(s.labeled as u32).to_le_bytes())?;
        for v in &s.tokens {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<GcdSplit> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = find_header_end(&bytes)
        .ok_or_else(|| Error::Io(format!("{}: missing end_header marker", path.display())))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Io("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("gcd-dataset v1") {
        return Err(Error::Io(format!(
            "{}: not a gcd-dataset v1 file",
            path.display()
        )));
    }
    let mut kv = std::collections::BTreeMap::new();
    for line in lines {
        if line == "end_header" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Io(format!("malformed header line: {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::Io(format!("header missing key {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Io(format!("header key {k} is not an integer")))
    };
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Io(format!("header key {k} is not a number")))
    };
    let balance = match get("balance")?.as_str() {
        "balanced" => Balance::Balanced,
        "long_tailed" => Balance::LongTailed {
            ratio: parse_f64("tail_ratio")?,
        },
        other => return Err(Error::Io(format!("unknown balance kind {other}"))),
    };
    let spec = DatasetSpec {
        num_classes: parse_usize("num_classes")?,
        num_old_classes: parse_usize("num_old_classes")?,
        labeled_fraction: parse_f64("labeled_fraction")?,
        samples_per_class: parse_usize("samples_per_class")?,
        token_count: parse_usize("token_count")?,
        feature_dim: parse_usize("feature_dim")?,
        separation: parse_f64("separation")?,
        noise: parse_f64("noise")?,
        balance,
        seed: parse_usize("seed")? as u64,
    };
    spec.validate()?;
    let num_samples = parse_usize("num_samples")?;

    let tokens_len = spec.token_count * spec.feature_dim;
    let record_len = 4 + 4 + 4 + 8 * tokens_len;
    let body = &bytes[header_end..];
    if body.len() != num_samples * record_len {
        return Err(Error::Io(format!(
            "body holds {} bytes, expected {} ({} records of {})",
            body.len(),
            num_samples * record_len,
            num_samples,
            record_len
        )));
    }

    let old_classes: BTreeSet<usize> = (0..spec.num_old_classes).collect();
    let new_classes: BTreeSet<usize> = (spec.num_old_classes..spec.num_classes).collect();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for r in 0..num_samples {
        let rec = &body[r * record_len..(r + 1) * record_len];
        let id = u32::from_le_bytes(rec[0..4].try_into().unwrap());
        let label = i32::from_le_bytes(rec[4..8].try_into().unwrap());
        let flag = u32::from_le_bytes(rec[8..12].try_into().unwrap());
        if label < 0 || label as usize >= spec.num_classes {
            return Err(Error::Io(format!("record {r}: label {label} out of range")));
        }
        let is_labeled = match flag {
            0 => false,
            1 => true,
            other => return Err(Error::Io(format!("record {r}: bad labeled flag {other}"))),
        };
        if is_labeled && !old_classes.contains(&(label as usize)) {
            return Err(Error::Io(format!(
                "record {r}: labeled sample carries new class {label}"
            )));
        }
        let mut tokens = Vec::with_capacity(tokens_len);
        for t in 0..tokens_len {
            let off = 12 + t * 8;
            tokens.push(f64::from_le_bytes(rec[off..off + 8].try_into().unwrap()));
        }
        let sample = Sample {
            id,
            tokens,
            label: label as u32,
            labeled: is_labeled,
        };
        if is_labeled {
            labeled.push(sample);
        } else {
            unlabeled.push(sample);
        }
    }
    Ok(GcdSplit {
        spec,
        labeled,
        unlabeled,
        old_classes,
        new_classes,
    })
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let marker = b"end_header\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
}
