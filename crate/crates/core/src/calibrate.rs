//! Calibration methods: raw rewards, length penalty, neighbourhood means,
//! LOWESS, and LOWESS on top of the length penalty.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{self, PreferencePair, SampleSet, LENGTH};
use crate::error::{Error, Result};
use crate::lowess::{self, LowessConfig};
use crate::matrix::Matrix;

/// Datasets at least this large default to the narrower bandwidth.
pub const LARGE_DATASET: usize = 10_000;
/// Datasets larger than this default to interpolation-skipping.
pub const DELTA_DATASET: usize = 50_000;
/// Clamp applied to judge probabilities before taking the logit.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Original,
    Penalty,
    RcMean,
    RcLwr,
    RcLwrPenalty,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Original,
        Method::Penalty,
        Method::RcMean,
        Method::RcLwr,
        Method::RcLwrPenalty,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Penalty => "penalty",
            Method::RcMean => "rc-mean",
            Method::RcLwr => "rc-lwr",
            Method::RcLwrPenalty => "rc-lwr-penalty",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Method selector and every numeric knob. Unset LOWESS knobs are resolved
/// from the dataset size by [`CalibrationConfig::lowess_for`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub method: Method,
    pub characteristics: Vec<String>,
    /// Length penalty per character.
    pub alpha: f64,
    /// Neighbourhood radius for rc-mean; `None` derives it from the pairs.
    pub d: Option<f64>,
    pub min_neighbors: usize,
    /// Calibration constant scaling the subtracted bias.
    pub gamma: f64,
    pub bandwidth: Option<f64>,
    pub iterations: usize,
    pub delta: Option<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            method: Method::RcLwr,
            characteristics: vec![LENGTH.to_string()],
            alpha: 0.001,
            d: None,
            min_neighbors: 10,
            gamma: 1.0,
            bandwidth: None,
            iterations: 3,
            delta: None,
        }
    }
}

impl CalibrationConfig {
    pub fn with_method(method: Method) -> Self {
        CalibrationConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.characteristics.is_empty() {
            return Err(Error::config("at least one characteristic is required"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.min_neighbors < 1 {
            return Err(Error::config("min_neighbors must be at least 1"));
        }
        if !self.gamma.is_finite() {
            return Err(Error::config("gamma must be finite"));
        }
        if let Some(d) = self.d {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::config(format!("d must be positive, got {d}")));
            }
        }
        if self.method == Method::RcMean && self.characteristics.len() > 1 {
            return Err(Error::config("rc-mean calibrates one characteristic at a time"));
        }
        if let Some(f) = self.bandwidth {
            LowessConfig::new(f, self.iterations, self.delta.unwrap_or(0.0))?;
        } else if let Some(delta) = self.delta {
            LowessConfig::new(1.0, self.iterations, delta)?;
        }
        Ok(())
    }

    /// LOWESS settings for `n` points whose characteristic spans `range`:
    /// f = 1/3 from 10,000 points up and 0.9 below; delta = 1% of the range
    /// above 50,000 points and 0 otherwise.
    pub fn lowess_for(&self, n: usize, range: f64) -> Result<LowessConfig> {
        let bandwidth = self.bandwidth.unwrap_or(if n >= LARGE_DATASET {
            1.0 / 3.0
        } else {
            0.9
        });
        let delta = self
            .delta
            .unwrap_or(if n > DELTA_DATASET { 0.01 * range } else { 0.0 });
        LowessConfig::new(bandwidth, self.iterations, delta)
    }
}

/// Outcome of calibrating one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSample {
    pub id: String,
    pub raw_reward: f64,
    pub bias_estimate: f64,
    pub calibrated_reward: f64,
    /// False when rc-mean left the sample alone for lack of neighbours.
    pub calibrated_flag: bool,
}

impl CalibratedSample {
    fn new(id: &str, raw: f64, bias: f64, gamma: f64, flag: bool) -> Self {
        let calibrated_reward = if flag { raw - gamma * bias } else { raw };
        CalibratedSample {
            id: id.to_string(),
            raw_reward: raw,
            bias_estimate: if flag { bias } else { 0.0 },
            calibrated_reward,
            calibrated_flag: flag,
        }
    }
}

/// Calibrated samples in input order, indexed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibratedSet {
    samples: Vec<CalibratedSample>,
    index: HashMap<String, usize>,
}

impl CalibratedSet {
    pub fn new(samples: Vec<CalibratedSample>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(CalibratedSet { samples, index })
    }

    /// The uncalibrated view of `set`: bias 0 everywhere.
    pub fn raw(set: &SampleSet) -> Self {
        build(set, &set.rewards(), &vec![0.0; set.len()], None, 1.0)
    }

    pub fn samples(&self) -> &[CalibratedSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CalibratedSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn calibrated_rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.calibrated_reward).collect()
    }
}

fn build(
    set: &SampleSet,
    raw: &[f64],
    bias: &[f64],
    flags: Option<&[bool]>,
    gamma: f64,
) -> CalibratedSet {
    let samples = set
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let flag = flags.is_none_or(|f| f[i]);
            CalibratedSample::new(&s.id, raw[i], bias[i], gamma, flag)
        })
        .collect();
    CalibratedSet::new(samples).expect("sample set ids are unique")
}

/// A quarter of the mean absolute characteristic gap across pairs.
pub fn auto_threshold(pairs: &[PreferencePair], set: &SampleSet, characteristic: &str) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::input("cannot derive a threshold from an empty pair list"));
    }
    let mut total = 0.0;
    for p in pairs {
        let a = lookup(set, &p.better_id)?.characteristic(characteristic)?;
        let b = lookup(set, &p.worse_id)?.characteristic(characteristic)?;
        total += (a - b).abs();
    }
    Ok(total / pairs.len() as f64 / 4.0)
}

fn lookup<'a>(set: &'a SampleSet, id: &str) -> Result<&'a dataset::ScoredSample> {
    set.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
}

/// `reward - alpha * length`.
pub fn calibrate_penalty(set: &SampleSet, alpha: f64) -> Result<CalibratedSet> {
    let bias = penalty_bias(set, alpha)?;
    Ok(build(set, &set.rewards(), &bias, None, 1.0))
}

fn penalty_bias(set: &SampleSet, alpha: f64) -> Result<Vec<f64>> {
    Ok(dataset::extract_characteristic(set, LENGTH)?
        .into_iter()
        .map(|len| alpha * len)
        .collect())
}

/// Subtracts the mean reward of all samples whose characteristic lies
/// strictly within `d`. Samples with fewer than `min_neighbors` such samples
/// (counting themselves) are left uncalibrated.
pub fn calibrate_mean(
    set: &SampleSet,
    characteristic: &str,
    d: f64,
    min_neighbors: usize,
) -> Result<CalibratedSet> {
    let (bias, flags) = mean_bias(set, characteristic, d, min_neighbors)?;
    Ok(build(set, &set.rewards(), &bias, Some(&flags), 1.0))
}

fn mean_bias(
    set: &SampleSet,
    characteristic: &str,
    d: f64,
    min_neighbors: usize,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if !(d > 0.0) {
        return Err(Error::config(format!("d must be positive, got {d}")));
    }
    let c = dataset::extract_characteristic(set, characteristic)?;
    let rewards = set.rewards();
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| c[a].total_cmp(&c[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| c[i]).collect();
    let mut prefix = Vec::with_capacity(c.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &i in &order {
        acc += rewards[i];
        prefix.push(acc);
    }

    let mut bias = vec![0.0; c.len()];
    let mut flags = vec![false; c.len()];
    for (i, &ci) in c.iter().enumerate() {
        let lo = sorted.partition_point(|&v| ci - v >= d);
        let hi = sorted.partition_point(|&v| v - ci < d);
        let count = hi - lo;
        if count >= min_neighbors {
            bias[i] = (prefix[hi] - prefix[lo]) / count as f64;
            flags[i] = true;
        }
    }
    Ok((bias, flags))
}

/// Subtracts `gamma` times the LOWESS estimate of reward given the
/// characteristic(s). Several characteristics are z-scored and smoothed
/// jointly.
pub fn calibrate_lwr(
    set: &SampleSet,
    characteristics: &[String],
    cfg: &CalibrationConfig,
) -> Result<CalibratedSet> {
    let rewards = set.rewards();
    let bias = lwr_bias(set, characteristics, cfg, &rewards)?;
    Ok(build(set, &rewards, &bias, None, cfg.gamma))
}

fn lwr_bias(
    set: &SampleSet,
    characteristics: &[String],
    cfg: &CalibrationConfig,
    rewards: &[f64],
) -> Result<Vec<f64>> {
    if set.len() < 2 {
        return Err(Error::input("LOWESS calibration needs at least 2 samples"));
    }
    let columns = characteristics
        .iter()
        .map(|name| dataset::extract_characteristic(set, name))
        .collect::<Result<Vec<_>>>()?;
    match columns.as_slice() {
        [] => Err(Error::config("at least one characteristic is required")),
        [c] => {
            let lcfg = cfg.lowess_for(c.len(), range(c))?;
            let curve = lowess::lowess_fit(c, rewards, &lcfg)?;
            Ok(c.iter().map(|&v| curve.predict(v)).collect())
        }
        many => {
            let x = dataset::zscore_normalize(&Matrix::from_columns(many)?);
            let lcfg = cfg.lowess_for(set.len(), 0.0)?;
            lowess::lowess_fit_multi(&x, rewards, &lcfg)
        }
    }
}

/// The LOWESS curve of raw reward against a single characteristic, as used
/// by rc-lwr.
pub fn lwr_curve(set: &SampleSet, characteristic: &str, cfg: &CalibrationConfig) -> Result<lowess::FittedCurve> {
    if set.len() < 2 {
        return Err(Error::input("LOWESS calibration needs at least 2 samples"));
    }
    let c = dataset::extract_characteristic(set, characteristic)?;
    let lcfg = cfg.lowess_for(c.len(), range(&c))?;
    lowess::lowess_fit(&c, &set.rewards(), &lcfg)
}

fn range(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Runs the configured method. rc-mean without an explicit `d` derives it
/// from `pairs`.
pub fn calibrate(
    set: &SampleSet,
    cfg: &CalibrationConfig,
    pairs: Option<&[PreferencePair]>,
) -> Result<CalibratedSet> {
    cfg.validate()?;
    let rewards = set.rewards();
    let gamma = cfg.gamma;
    match cfg.method {
        Method::Original => Ok(CalibratedSet::raw(set)),
        Method::Penalty => {
            let bias = penalty_bias(set, cfg.alpha)?;
            Ok(build(set, &rewards, &bias, None, gamma))
        }
        Method::RcMean => {
            let name = &cfg.characteristics[0];
            let d = match (cfg.d, pairs) {
                (Some(d), _) => d,
                (None, Some(pairs)) => auto_threshold(pairs, set, name)?,
                (None, None) => {
                    return Err(Error::config(
                        "rc-mean needs either an explicit d or preference pairs",
                    ))
                }
            };
            let (bias, flags) = mean_bias(set, name, d, cfg.min_neighbors)?;
            Ok(build(set, &rewards, &bias, Some(&flags), gamma))
        }
        Method::RcLwr => {
            let bias = lwr_bias(set, &cfg.characteristics, cfg, &rewards)?;
            Ok(build(set, &rewards, &bias, None, gamma))
        }
        Method::RcLwrPenalty => {
            // the smoother sees the penalised rewards; the total bias is the
            // penalty plus what the smoother finds on top of it
            let penalty = penalty_bias(set, cfg.alpha)?;
            let penalised: Vec<f64> = rewards.iter().zip(&penalty).map(|(r, p)| r - p).collect();
            let smooth = lwr_bias(set, &cfg.characteristics, cfg, &penalised)?;
            let bias: Vec<f64> = penalty.iter().zip(&smooth).map(|(p, s)| p + s).collect();
            Ok(build(set, &rewards, &bias, None, gamma))
        }
    }
}

const BIAS_FIELD: &str = "bias_estimate";
const CALIBRATED_FIELD: &str = "calibrated_reward";
const FLAG_FIELD: &str = "calibrated_flag";

/// Writes each input record followed by its calibration fields, one JSON
/// object per line, in input order.
pub fn write_calibrated_jsonl<W: Write>(
    mut writer: W,
    set: &SampleSet,
    calibrated: &CalibratedSet,
) -> Result<()> {
    for s in set {
        let c = calibrated
            .get(&s.id)
            .ok_or_else(|| Error::UnknownId(s.id.clone()))?;
        let mut sample = s.clone();
        for field in [BIAS_FIELD, CALIBRATED_FIELD, FLAG_FIELD] {
            sample.extra.remove(field);
        }
        let Value::Object(mut record) = serde_json::to_value(&sample)? else {
            unreachable!("samples serialize to objects");
        };
        record.insert(BIAS_FIELD.into(), Value::from(c.bias_estimate));
        record.insert(CALIBRATED_FIELD.into(), Value::from(c.calibrated_reward));
        record.insert(FLAG_FIELD.into(), Value::from(c.calibrated_flag));
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Recovers the calibration written by [`write_calibrated_jsonl`]. Records
/// without calibration fields count as uncalibrated (bias 0).
pub fn read_calibrated(set: &SampleSet) -> Result<CalibratedSet> {
    let samples = set
        .iter()
        .map(|s| {
            let number = |field: &str| -> Result<Option<f64>> {
                match s.extra.get(field) {
                    None | Some(Value::Null) => Ok(None),
                    Some(v) => v.as_f64().map(Some).ok_or_else(|| {
                        Error::input(format!("sample {:?}: {field} is not a number", s.id))
                    }),
                }
            };
            let flag = match s.extra.get(FLAG_FIELD) {
                None | Some(Value::Null) => true,
                Some(Value::Bool(b)) => *b,
                Some(_) => {
                    return Err(Error::input(format!(
                        "sample {:?}: {FLAG_FIELD} is not a boolean",
                        s.id
                    )))
                }
            };
            let calibrated_reward = number(CALIBRATED_FIELD)?.unwrap_or(s.reward);
            Ok(CalibratedSample {
                id: s.id.clone(),
                raw_reward: s.reward,
                bias_estimate: number(BIAS_FIELD)?.unwrap_or(0.0),
                calibrated_reward,
                calibrated_flag: flag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CalibratedSet::new(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    Better,
    Worse,
    Tie,
}

/// Margin of the labelled-better side over the labelled-worse side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin {
    pub margin: f64,
    pub preferred: Preference,
}

/// Calibrated margin for one pair. If either side was left uncalibrated the
/// raw rewards of both sides are compared instead.
pub fn pair_margin(calibrated: &CalibratedSet, pair: &PreferencePair) -> Result<Margin> {
    let get = |id: &str| {
        calibrated
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    };
    let (b, w) = (get(&pair.better_id)?, get(&pair.worse_id)?);
    let margin = if b.calibrated_flag && w.calibrated_flag {
        b.calibrated_reward - w.calibrated_reward
    } else {
        b.raw_reward - w.raw_reward
    };
    let preferred = if margin > 0.0 {
        Preference::Better
    } else if margin < 0.0 {
        Preference::Worse
    } else {
        Preference::Tie
    };
    Ok(Margin { margin, preferred })
}

/// Reward margin implied by a Bradley-Terry preference probability.
pub fn margin_from_prob(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::input(format!("probability must be in [0, 1], got {p}")));
    }
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok((p / (1.0 - p)).ln())
}
