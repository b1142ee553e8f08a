//! Evaluation metrics for raw and calibrated rewards.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::calibrate::{pair_margin, CalibratedSet, Preference};
use crate::dataset::{PreferencePair, SampleSet};
use crate::error::{Error, Result};

/// Separates a model name from its prompting variant in group names, as in
/// `model@concise`.
pub const VARIANT_SEPARATOR: char = '@';

/// Mean over pairs of 1 (better preferred), 0 (worse preferred) or 0.5 (tie).
pub fn pairwise_accuracy(pairs: &[PreferencePair], calibrated: &CalibratedSet) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::input("accuracy needs at least one pair"));
    }
    let mut score = 0.0;
    for p in pairs {
        score += match pair_margin(calibrated, p)?.preferred {
            Preference::Better => 1.0,
            Preference::Worse => 0.0,
            Preference::Tie => 0.5,
        };
    }
    Ok(score / pairs.len() as f64)
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::input(format!(
            "correlation inputs differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than 2 observations".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::input(format!(
            "correlation inputs differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean Bradley-Terry probability of beating the baseline, prompt by prompt.
pub fn bt_win_rate(rewards: &[f64], baseline: &[f64]) -> Result<f64> {
    if rewards.len() != baseline.len() {
        return Err(Error::input(format!(
            "win rate needs aligned rewards ({} vs {})",
            rewards.len(),
            baseline.len()
        )));
    }
    if rewards.is_empty() {
        return Err(Error::input("win rate needs at least one prompt"));
    }
    let total: f64 = rewards
        .iter()
        .zip(baseline)
        .map(|(r, b)| sigmoid(r - b))
        .sum();
    Ok(total / rewards.len() as f64)
}

/// Average over groups of the coefficient of variation (sample standard
/// deviation over mean) of the group's three variant win rates.
pub fn gameability(win_rates: &BTreeMap<String, [f64; 3]>) -> Result<f64> {
    if win_rates.is_empty() {
        return Err(Error::input("gameability needs at least one group"));
    }
    let mut total = 0.0;
    for (group, rates) in win_rates {
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::input(format!("group {group:?} has a win rate outside [0, 1]")));
        }
        let mean = rates.iter().sum::<f64>() / 3.0;
        if mean == 0.0 {
            return Err(Error::input(format!("group {group:?} has mean win rate 0")));
        }
        let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 2.0;
        total += var.sqrt() / mean;
    }
    Ok(total / win_rates.len() as f64)
}

/// Fraction of pairs whose outcome (better, worse or tie) changes between
/// two reward assignments.
pub fn overturn_fraction(
    pairs: &[PreferencePair],
    before: &CalibratedSet,
    after: &CalibratedSet,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::input("overturn fraction needs at least one pair"));
    }
    let mut flipped = 0usize;
    for p in pairs {
        if pair_margin(before, p)?.preferred != pair_margin(after, p)?.preferred {
            flipped += 1;
        }
    }
    Ok(flipped as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedGroup {
    pub group: String,
    pub win_rate: f64,
}

/// Per-group calibrated rewards keyed by prompt, in file order.
struct GroupRewards {
    prompts: Vec<String>,
    by_prompt: HashMap<String, f64>,
}

fn group_rewards(set: &SampleSet, calibrated: &CalibratedSet) -> Result<BTreeMap<String, GroupRewards>> {
    let mut groups: BTreeMap<String, GroupRewards> = BTreeMap::new();
    for s in set {
        let group = s
            .group
            .as_ref()
            .ok_or_else(|| Error::input(format!("sample {:?} has no group", s.id)))?;
        let prompt = s
            .prompt_id
            .as_ref()
            .ok_or_else(|| Error::input(format!("sample {:?} has no prompt_id", s.id)))?;
        let reward = calibrated
            .get(&s.id)
            .ok_or_else(|| Error::UnknownId(s.id.clone()))?
            .calibrated_reward;
        let entry = groups.entry(group.clone()).or_insert_with(|| GroupRewards {
            prompts: Vec::new(),
            by_prompt: HashMap::new(),
        });
        if entry.by_prompt.insert(prompt.clone(), reward).is_some() {
            return Err(Error::input(format!(
                "group {group:?} answers prompt {prompt:?} more than once"
            )));
        }
        entry.prompts.push(prompt.clone());
    }
    Ok(groups)
}

/// Win rate of every group against `baseline`, best first; equal win rates
/// are ordered by group name.
pub fn rank_models(
    set: &SampleSet,
    calibrated: &CalibratedSet,
    baseline: &str,
) -> Result<Vec<RankedGroup>> {
    let groups = group_rewards(set, calibrated)?;
    let base = groups
        .get(baseline)
        .ok_or_else(|| Error::input(format!("baseline group {baseline:?} not found")))?;
    let base_rewards: Vec<f64> = base.prompts.iter().map(|p| base.by_prompt[p]).collect();

    let mut ranked = Vec::with_capacity(groups.len());
    for (name, g) in &groups {
        let missing: Vec<&str> = base
            .prompts
            .iter()
            .filter(|p| !g.by_prompt.contains_key(*p))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::input(format!(
                "group {name:?} is missing prompt_ids: {}",
                missing.join(", ")
            )));
        }
        if let Some(extra) = g.prompts.iter().find(|p| !base.by_prompt.contains_key(*p)) {
            return Err(Error::input(format!(
                "group {name:?} answers prompt {extra:?} that the baseline does not"
            )));
        }
        let rewards: Vec<f64> = base.prompts.iter().map(|p| g.by_prompt[p]).collect();
        ranked.push(RankedGroup {
            group: name.clone(),
            win_rate: bt_win_rate(&rewards, &base_rewards)?,
        });
    }
    ranked.sort_by(|a, b| {
        b.win_rate
            .total_cmp(&a.win_rate)
            .then_with(|| a.group.cmp(&b.group))
    });
    Ok(ranked)
}

/// Gameability from win rates of `model@variant` groups. Only models that
/// have all three variants contribute.
pub fn variant_gameability(
    win_rates: &BTreeMap<String, f64>,
    variants: &[String; 3],
) -> Result<f64> {
    let mut triples = BTreeMap::new();
    for group in win_rates.keys() {
        let Some((model, _)) = group.rsplit_once(VARIANT_SEPARATOR) else {
            continue;
        };
        if triples.contains_key(model) {
            continue;
        }
        let lookup = |v: &String| win_rates.get(&format!("{model}{VARIANT_SEPARATOR}{v}")).copied();
        if let [Some(a), Some(b), Some(c)] = [lookup(&variants[0]), lookup(&variants[1]), lookup(&variants[2])] {
            triples.insert(model.to_string(), [a, b, c]);
        }
    }
    if triples.is_empty() {
        return Err(Error::input(format!(
            "no group has all three variants {}",
            variants.join(", ")
        )));
    }
    gameability(&triples)
}

/// Everything `evaluate` reports for one calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `None` when the characteristic or the calibrated rewards are constant.
    pub spearman_vs_characteristic: Option<f64>,
    pub win_rates: BTreeMap<String, f64>,
    pub gameability: Option<f64>,
    pub overturn_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman_vs_external: Option<f64>,
    pub n_pairs: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    pub characteristic: Option<String>,
    pub baseline: Option<String>,
    pub variants: Option<[String; 3]>,
    /// External per-group scores, e.g. an arena rating.
    pub external_ranking: Option<BTreeMap<String, f64>>,
}

/// Builds the report. Overturns are measured against the raw rewards in
/// `set`.
pub fn evaluate(
    set: &SampleSet,
    calibrated: &CalibratedSet,
    pairs: &[PreferencePair],
    opts: &EvaluateOptions,
) -> Result<MetricsReport> {
    set.resolve_pairs(pairs)?;
    let accuracy = pairwise_accuracy(pairs, calibrated)?;
    let overturn = overturn_fraction(pairs, &CalibratedSet::raw(set), calibrated)?;

    let spearman_vs_characteristic = match &opts.characteristic {
        Some(name) => {
            let c = crate::dataset::extract_characteristic(set, name)?;
            let rewards: Vec<f64> = set
                .iter()
                .map(|s| {
                    calibrated
                        .get(&s.id)
                        .map(|c| c.calibrated_reward)
                        .ok_or_else(|| Error::UnknownId(s.id.clone()))
                })
                .collect::<Result<_>>()?;
            match spearman(&rewards, &c) {
                Ok(v) => Some(v),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            }
        }
        None => None,
    };

    let win_rates: BTreeMap<String, f64> = match &opts.baseline {
        Some(b) => rank_models(set, calibrated, b)?
            .into_iter()
            .map(|g| (g.group, g.win_rate))
            .collect(),
        None => BTreeMap::new(),
    };

    let gameability = match &opts.variants {
        Some(v) if !win_rates.is_empty() => Some(variant_gameability(&win_rates, v)?),
        Some(_) => return Err(Error::config("gameability needs a baseline group")),
        None => None,
    };

    let spearman_vs_external = match &opts.external_ranking {
        Some(ext) if !win_rates.is_empty() => {
            let (ours, theirs): (Vec<f64>, Vec<f64>) = win_rates
                .iter()
                .filter_map(|(g, w)| ext.get(g).map(|e| (*w, *e)))
                .unzip();
            Some(spearman(&ours, &theirs)?)
        }
        Some(_) => return Err(Error::config("external ranking comparison needs a baseline group")),
        None => None,
    };

    Ok(MetricsReport {
        accuracy,
        spearman_vs_characteristic,
        win_rates,
        gameability,
        overturn_fraction: Some(overturn),
        spearman_vs_external,
        n_pairs: pairs.len(),
        n_samples: set.len(),
    })
}
