//! Adaptive prototypical feedback: builds the replay batch by a two-stage
//! quota scheme. Stage one draws sample pairs from easily-confused class
//! pairs in proportion to the confusion distribution and mixes each pair;
//! stage two fills the rest of the batch with uniform draws self-mixed
//! against a shuffled copy of themselves.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::prototypes::PairProbability;
use crate::stream::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApfConfig {
    /// Fraction of the replay batch drawn by confusion-pair quotas.
    pub alpha: f64,
    /// Replay batch size `m`.
    pub replay_batch_size: usize,
    /// Symmetric Beta parameter for the mixing coefficient; 1.0 is uniform.
    pub mixup_concentration: f64,
}

impl ApfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        if self.replay_batch_size == 0 {
            return Err(Error::Config("replay_batch_size must be >= 1".into()));
        }
        if !(self.mixup_concentration > 0.0) {
            return Err(Error::Config("mixup_concentration must be > 0".into()));
        }
        Ok(())
    }
}

/// Which stage of the sampler produced a replay entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaySource {
    /// Stage one: drawn from a confusion-pair quota.
    ConfusionPair,
    /// Stage two: uniform draw (self-mixed).
    Uniform,
}

/// Convex combination of two samples, with both parent labels retained for
/// soft-target cross-entropy. Plain samples are represented with `lambda = 1`
/// and both labels equal.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub features: Vec<f64>,
    pub label_a: usize,
    pub label_b: usize,
    pub lambda: f64,
    pub source: ReplaySource,
}

impl MixedSample {
    pub fn from_plain(sample: &Sample) -> Self {
        Self {
            features: sample.features.clone(),
            label_a: sample.label,
            label_b: sample.label,
            lambda: 1.0,
            source: ReplaySource::Uniform,
        }
    }

    /// The label used for prototype grouping and the instance loss: the one
    /// holding the larger share of the mixture.
    pub fn dominant_label(&self) -> usize {
        if self.lambda >= 0.5 {
            self.label_a
        } else {
            self.label_b
        }
    }

    /// Soft cross-entropy target over `num_classes` classes.
    pub fn soft_target(&self, num_classes: usize) -> Vec<f64> {
        let mut t = vec![0.0; num_classes];
        t[self.label_a] += self.lambda;
        t[self.label_b] += 1.0 - self.lambda;
        t
    }
}

/// `lambda * x_a + (1 - lambda) * x_b`, keeping both labels.
pub fn mixup(x_a: &Sample, x_b: &Sample, lambda: f64) -> Result<MixedSample> {
    if x_a.features.len() != x_b.features.len() {
        return Err(Error::Shape(format!(
            "mixup of {}-dim and {}-dim samples",
            x_a.features.len(),
            x_b.features.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    let features = x_a
        .features
        .iter()
        .zip(&x_b.features)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok(MixedSample {
        features,
        label_a: x_a.label,
        label_b: x_b.label,
        lambda,
        source: ReplaySource::Uniform,
    })
}

/// Draws the replay batch.
///
/// Stage one walks confusion pairs in descending probability, drawing
/// `floor(P_ij * n_apf + 0.5)` sample pairs per class pair (`n_apf` =
/// `alpha * m` rounded) and mixing each pair with `lambda ~ Beta(c, c)`.
/// Pairs whose classes have vanished from the bank forfeit their quota to
/// stage two. Stage two draws the remainder uniformly without replacement
/// and mixes each draw with a shuffled partner from the same draw
/// (self-pairing allowed). Without a confusion distribution the whole batch
/// is stage two. The output always holds `min(m, bank size)` entries.
pub fn apf_sample<R: Rng>(
    bank: &MemoryBank,
    probabilities: Option<&PairProbability>,
    cfg: &ApfConfig,
    rng: &mut R,
) -> Result<Vec<MixedSample>> {
    cfg.validate()?;
    let target = cfg.replay_batch_size.min(bank.len());
    let mut out: Vec<MixedSample> = Vec::with_capacity(target);
    if target == 0 {
        return Ok(out);
    }
    let beta = Beta::new(cfg.mixup_concentration, cfg.mixup_concentration)
        .map_err(|e| Error::Config(format!("mixup beta: {e}")))?;

    if let Some(p) = probabilities {
        let n_apf = (cfg.alpha * cfg.replay_batch_size as f64).round() as usize;
        if n_apf > 0 {
            for (class_a, class_b, prob) in p.by_descending_probability() {
                let quota = (prob * n_apf as f64 + 0.5).floor() as usize;
                let quota = quota.min(target - out.len());
                if quota == 0 {
                    continue;
                }
                let (xs_a, xs_b) = match bank.samples_of_classes(class_a, class_b, quota, rng) {
                    Ok(pairs) => pairs,
                    // Quota falls through to stage two.
                    Err(Error::ClassUnavailable(_)) => continue,
                    Err(e) => return Err(e),
                };
                for (a, b) in xs_a.iter().zip(&xs_b) {
                    let lambda = beta.sample(rng);
                    let mut mixed = mixup(a, b, lambda)?;
                    mixed.source = ReplaySource::ConfusionPair;
                    out.push(mixed);
                }
                if out.len() == target {
                    break;
                }
            }
        }
    }

    let remaining = target - out.len();
    if remaining > 0 {
        let base = bank.sample_uniform(remaining, rng);
        let mut partners: Vec<usize> = (0..base.len()).collect();
        partners.shuffle(rng);
        for (i, sample) in base.iter().enumerate() {
            let lambda = beta.sample(rng);
            out.push(mixup(sample, &base[partners[i]], lambda)?);
        }
    }
    Ok(out)
}
