//! Synthetic scored datasets with a known split of every reward into a
//! quality term and a characteristic-driven bias term.
//!
//! # Random stream
//!
//! All randomness comes from one SplitMix64 generator seeded with
//! `SynthConfig::seed`:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! return z ^ (z >> 31)
//! ```
//!
//! A uniform draw in [0, 1) is `(next >> 11) * 2^-53`. A standard normal
//! draw consumes two uniforms `u1, u2` and returns
//! `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`.
//!
//! Samples are generated prompt by prompt, response slot by slot. For each
//! response: first the characteristic (one uniform, or one normal for
//! log-normal), then the quality noise (one normal). Slot `j` of every prompt
//! is answered by group `j % n_groups`.

use std::f64::consts::PI;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::calibrate::{pair_margin, CalibratedSet, Preference};
use crate::dataset::{PreferencePair, SampleSet, ScoredSample, LENGTH};
use crate::error::{Error, Result};
use crate::metrics::spearman;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CharDistribution {
    Uniform { lo: f64, hi: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

/// Bias as a function of the characteristic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BiasShape {
    /// `slope * c`
    Linear { slope: f64 },
    /// `1 / (1 + exp(-scale * (c - midpoint)))`
    Logistic { scale: f64, midpoint: f64 },
    /// `amplitude * sin(2 pi c / period)`
    Sine { amplitude: f64, period: f64 },
    None,
}

impl BiasShape {
    pub fn eval(&self, c: f64) -> f64 {
        match *self {
            BiasShape::Linear { slope } => slope * c,
            BiasShape::Logistic { scale, midpoint } => {
                crate::metrics::sigmoid(scale * (c - midpoint))
            }
            BiasShape::Sine { amplitude, period } => amplitude * (2.0 * PI * c / period).sin(),
            BiasShape::None => 0.0,
        }
    }

    /// Lipschitz constant of the bias over the whole real line.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            BiasShape::Linear { slope } => slope.abs(),
            BiasShape::Logistic { scale, .. } => scale.abs() / 4.0,
            BiasShape::Sine { amplitude, period } => 2.0 * PI * amplitude.abs() / period,
            BiasShape::None => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_groups: usize,
    /// Responses per prompt; pairs compare the best and worst of them.
    pub n_responses: usize,
    pub seed: u64,
    pub c_distribution: CharDistribution,
    pub bias_shape: BiasShape,
    /// Mean true reward per group; empty means 0 for every group.
    pub quality_means: Vec<f64>,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 10_000,
            n_groups: 1,
            n_responses: 2,
            seed: 0,
            c_distribution: CharDistribution::Uniform {
                lo: 100.0,
                hi: 3000.0,
            },
            bias_shape: BiasShape::Linear { slope: 0.002 },
            quality_means: Vec::new(),
            noise_std: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::config("n_samples must be at least 2"));
        }
        if self.n_groups == 0 {
            return Err(Error::config("n_groups must be at least 1"));
        }
        if self.n_responses < 2 || self.n_responses > self.n_samples {
            return Err(Error::config("n_responses must be between 2 and n_samples"));
        }
        if !self.quality_means.is_empty() && self.quality_means.len() != self.n_groups {
            return Err(Error::config(format!(
                "expected {} quality means, got {}",
                self.n_groups,
                self.quality_means.len()
            )));
        }
        if self.quality_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("quality means must be finite"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be a non-negative finite number"));
        }
        match self.c_distribution {
            CharDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::config(format!("uniform needs finite lo < hi, got ({lo}, {hi})")));
                }
            }
            CharDistribution::Lognormal { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::config(format!(
                        "lognormal needs finite mu and sigma >= 0, got ({mu}, {sigma})"
                    )));
                }
            }
        }
        let finite = match self.bias_shape {
            BiasShape::Linear { slope } => slope.is_finite(),
            BiasShape::Logistic { scale, midpoint } => scale.is_finite() && midpoint.is_finite(),
            BiasShape::Sine { amplitude, period } => {
                if !(period > 0.0) {
                    return Err(Error::config("sine period must be positive"));
                }
                amplitude.is_finite() && period.is_finite()
            }
            BiasShape::None => true,
        };
        if !finite {
            return Err(Error::config("bias parameters must be finite"));
        }
        Ok(())
    }
}

/// The split behind one observed reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub characteristic: f64,
    pub true_reward: f64,
    pub bias_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthTruth {
    pub records: Vec<TruthRecord>,
}

impl SynthTruth {
    pub fn true_rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.true_reward).collect()
    }

    pub fn characteristics(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.characteristic).collect()
    }

    /// Rewards equal to the truth, as a calibrated set.
    pub fn as_calibrated(&self) -> CalibratedSet {
        CalibratedSet::new(
            self.records
                .iter()
                .map(|r| crate::calibrate::CalibratedSample {
                    id: r.id.clone(),
                    raw_reward: r.true_reward + r.bias_value,
                    bias_estimate: r.bias_value,
                    calibrated_reward: r.true_reward,
                    calibrated_flag: true,
                })
                .collect(),
        )
        .expect("generated ids are unique")
    }
}

/// Seeded SplitMix64 stream with the draw conventions documented above.
pub struct SynthRng(SplitMix64);

impl SynthRng {
    pub fn new(seed: u64) -> Self {
        SynthRng(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * PI * u2).cos()
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<(SampleSet, Vec<PreferencePair>, SynthTruth)> {
    cfg.validate()?;
    let mut rng = SynthRng::new(cfg.seed);
    let n_prompts = cfg.n_samples / cfg.n_responses;
    let mut samples = Vec::with_capacity(n_prompts * cfg.n_responses);
    let mut truth = Vec::with_capacity(samples.capacity());
    let mut pairs = Vec::with_capacity(n_prompts);

    for prompt in 0..n_prompts {
        let first = samples.len();
        for slot in 0..cfg.n_responses {
            let group = slot % cfg.n_groups;
            let c = match cfg.c_distribution {
                CharDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.uniform(),
                CharDistribution::Lognormal { mu, sigma } => (mu + sigma * rng.normal()).exp(),
            };
            let quality = cfg.quality_means.get(group).copied().unwrap_or(0.0);
            let true_reward = quality + cfg.noise_std * rng.normal();
            let bias_value = cfg.bias_shape.eval(c);
            let id = format!("s{}", samples.len());
            samples.push(
                ScoredSample::new(id.clone(), true_reward + bias_value)
                    .with_group(format!("g{group}"))
                    .with_prompt(format!("p{prompt}"))
                    .with_characteristic(LENGTH, c),
            );
            truth.push(TruthRecord {
                id,
                characteristic: c,
                true_reward,
                bias_value,
            });
        }
        // best against worst by true reward; first occurrence wins ties
        let slots = &truth[first..];
        let best = (0..slots.len())
            .reduce(|a, b| if slots[b].true_reward > slots[a].true_reward { b } else { a })
            .expect("at least two responses");
        let worst = (0..slots.len())
            .reduce(|a, b| if slots[b].true_reward < slots[a].true_reward { b } else { a })
            .expect("at least two responses");
        if slots[best].true_reward > slots[worst].true_reward {
            pairs.push(PreferencePair::new(
                pairs.len().to_string(),
                slots[best].id.clone(),
                slots[worst].id.clone(),
            )?);
        }
    }

    Ok((
        SampleSet::new(samples)?,
        pairs,
        SynthTruth { records: truth },
    ))
}

/// How well a calibration recovers the latent truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Mean absolute difference between calibrated and true pair margins.
    pub margin_mae: f64,
    /// Agreement of calibrated preferences with true-reward preferences;
    /// ties score one half.
    pub accuracy: f64,
    /// Spearman correlation of calibrated rewards with the characteristic,
    /// `None` when undefined.
    pub residual_spearman: Option<f64>,
}

pub fn recovery_report(
    truth: &SynthTruth,
    calibrated: &CalibratedSet,
    pairs: &[PreferencePair],
) -> Result<RecoveryReport> {
    if calibrated.len() != truth.records.len() {
        return Err(Error::input(format!(
            "truth has {} records but {} calibrated samples were given",
            truth.records.len(),
            calibrated.len()
        )));
    }
    let mut true_set = Vec::with_capacity(truth.records.len());
    let mut rewards = Vec::with_capacity(truth.records.len());
    for r in &truth.records {
        let c = calibrated
            .get(&r.id)
            .ok_or_else(|| Error::input(format!("calibrated set has no sample {:?}", r.id)))?;
        rewards.push(c.calibrated_reward);
        true_set.push(r);
    }
    let oracle = truth.as_calibrated();

    if pairs.is_empty() {
        return Err(Error::input("recovery report needs at least one pair"));
    }
    let (mut abs_err, mut agree) = (0.0, 0.0);
    for p in pairs {
        let ours = pair_margin(calibrated, p)?;
        let theirs = pair_margin(&oracle, p)?;
        abs_err += (ours.margin - theirs.margin).abs();
        agree += if ours.preferred == theirs.preferred {
            1.0
        } else if ours.preferred == Preference::Tie || theirs.preferred == Preference::Tie {
            0.5
        } else {
            0.0
        };
    }
    let n = pairs.len() as f64;
    let residual_spearman = spearman(&rewards, &truth.characteristics()).ok();
    Ok(RecoveryReport {
        margin_mae: abs_err / n,
        accuracy: agree / n,
        residual_spearman,
    })
}
