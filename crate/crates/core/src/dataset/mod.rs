//! Scored samples, preference pairs, and the readers/writers for them.
//!
//! Samples arrive as JSONL (one object per line) or CSV (header row with
//! `id`, `reward`, optional `group`, `prompt_id`, `text`, and `c_<name>`
//! columns carrying explicit characteristic values).

mod features;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub use features::{char_length, markdown_features, zscore_normalize};

/// Characteristic names that can be computed from raw text.
pub const LENGTH: &str = "length";
pub const MARKDOWN: &str = "markdown";

/// One scored response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub characteristics: BTreeMap<String, f64>,
    pub reward: f64,
    /// Fields not understood by this crate, carried through untouched.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ScoredSample {
    pub fn new(id: impl Into<String>, reward: f64) -> Self {
        ScoredSample {
            id: id.into(),
            group: None,
            prompt_id: None,
            text: None,
            characteristics: BTreeMap::new(),
            reward,
            extra: Map::new(),
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn with_characteristic(mut self, name: impl Into<String>, value: f64) -> Self {
        self.characteristics.insert(name.into(), value);
        self
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }

    pub fn with_prompt(mut self, prompt_id: impl Into<String>) -> Self {
        self.prompt_id = Some(prompt_id.into());
        self
    }

    /// Value of a characteristic; an explicit value wins over extraction
    /// from text.
    pub fn characteristic(&self, name: &str) -> Result<f64> {
        if let Some(&v) = self.characteristics.get(name) {
            return Ok(v);
        }
        match (name, self.text.as_deref()) {
            (LENGTH, Some(text)) => Ok(char_length(text)),
            (MARKDOWN, Some(text)) => Ok(markdown_features(text)),
            _ => Err(Error::MissingCharacteristic {
                id: self.id.clone(),
                name: name.to_string(),
            }),
        }
    }
}

/// `better_id` was judged better than `worse_id` for the same prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub better_id: String,
    pub worse_id: String,
}

impl PreferencePair {
    pub fn new(
        pair_id: impl Into<String>,
        better_id: impl Into<String>,
        worse_id: impl Into<String>,
    ) -> Result<Self> {
        let pair = PreferencePair {
            pair_id: pair_id.into(),
            better_id: better_id.into(),
            worse_id: worse_id.into(),
        };
        if pair.better_id == pair.worse_id {
            return Err(Error::input(format!(
                "pair {:?} compares sample {:?} with itself",
                pair.pair_id, pair.better_id
            )));
        }
        Ok(pair)
    }
}

/// Ordered, id-indexed collection of samples. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    samples: Vec<ScoredSample>,
    index: HashMap<String, usize>,
}

impl SampleSet {
    pub fn new(samples: Vec<ScoredSample>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (pos, s) in samples.iter().enumerate() {
            validate_sample(s)?;
            if index.insert(s.id.clone(), pos).is_some() {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(SampleSet { samples, index })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ScoredSample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ScoredSample> {
        self.samples.iter()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&ScoredSample> {
        self.position(id).map(|p| &self.samples[p])
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.reward).collect()
    }

    /// Checks that every id referenced by `pairs` exists in this set.
    pub fn resolve_pairs(&self, pairs: &[PreferencePair]) -> Result<()> {
        for p in pairs {
            for id in [&p.better_id, &p.worse_id] {
                if !self.index.contains_key(id.as_str()) {
                    return Err(Error::UnknownId(id.clone()));
                }
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a SampleSet {
    type Item = &'a ScoredSample;
    type IntoIter = std::slice::Iter<'a, ScoredSample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

fn validate_sample(s: &ScoredSample) -> Result<()> {
    if s.id.is_empty() {
        return Err(Error::input("sample id is empty"));
    }
    if !s.reward.is_finite() {
        return Err(Error::input(format!("sample {:?} has a non-finite reward", s.id)));
    }
    if let Some((name, _)) = s.characteristics.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::input(format!(
            "sample {:?} has a non-finite value for characteristic {name:?}",
            s.id
        )));
    }
    Ok(())
}

/// Vector of one characteristic, aligned with the sample order.
pub fn extract_characteristic(set: &SampleSet, name: &str) -> Result<Vec<f64>> {
    set.iter().map(|s| s.characteristic(name)).collect()
}

/// Copies of the samples with every named characteristic stored explicitly.
/// Values already present are kept, so annotating twice is a no-op.
pub fn annotate_characteristics(set: &SampleSet, names: &[String]) -> Result<Vec<ScoredSample>> {
    set.iter()
        .map(|s| {
            let mut out = s.clone();
            for name in names {
                let v = s.characteristic(name)?;
                out.characteristics.insert(name.clone(), v);
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    Jsonl,
    Csv,
}

impl SampleFormat {
    /// `.csv` files are CSV, everything else is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => SampleFormat::Csv,
            _ => SampleFormat::Jsonl,
        }
    }
}

pub fn parse_samples<R: Read>(reader: R, format: SampleFormat) -> Result<SampleSet> {
    let samples = match format {
        SampleFormat::Jsonl => parse_samples_jsonl(reader)?,
        SampleFormat::Csv => parse_samples_csv(reader)?,
    };
    SampleSet::new(samples)
}

#[derive(Deserialize)]
struct RawSample {
    id: Option<String>,
    reward: Option<f64>,
    #[serde(default)]
    group: Option<String>,
    #[serde(default)]
    prompt_id: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    characteristics: Option<BTreeMap<String, f64>>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn parse_samples_jsonl<R: Read>(reader: R) -> Result<Vec<ScoredSample>> {
    let mut samples = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let id = raw.id.ok_or_else(|| Error::parse(lineno, "missing id"))?;
        let reward = raw.reward.ok_or_else(|| Error::parse(lineno, "missing reward"))?;
        let sample = ScoredSample {
            id,
            group: raw.group,
            prompt_id: raw.prompt_id,
            text: raw.text,
            characteristics: raw.characteristics.unwrap_or_default(),
            reward,
            extra: raw.extra,
        };
        check_record(&sample, lineno, &mut seen)?;
        samples.push(sample);
    }
    Ok(samples)
}

fn check_record(
    sample: &ScoredSample,
    lineno: usize,
    seen: &mut HashMap<String, usize>,
) -> Result<()> {
    validate_sample(sample).map_err(|e| Error::parse(lineno, e.to_string()))?;
    if let Some(first) = seen.insert(sample.id.clone(), lineno) {
        return Err(Error::parse(
            lineno,
            format!("duplicate sample id {:?} (first seen at line {first})", sample.id),
        ));
    }
    Ok(())
}

fn parse_samples_csv<R: Read>(reader: R) -> Result<Vec<ScoredSample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("id").ok_or_else(|| Error::parse(1, "CSV header has no id column"))?;
    let reward_col =
        col("reward").ok_or_else(|| Error::parse(1, "CSV header has no reward column"))?;
    let group_col = col("group");
    let prompt_col = col("prompt_id");
    let text_col = col("text");
    let char_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("c_").map(|name| (i, name.to_string())))
        .collect();

    let mut samples = Vec::new();
    let mut seen = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        // line 1 is the header
        let lineno = i + 2;
        let record = record.map_err(|e| Error::parse(lineno, e.to_string()))?;
        let field = |c: Option<usize>| {
            c.and_then(|c| record.get(c))
                .filter(|v| !v.is_empty())
                .map(str::to_string)
        };
        let id = field(Some(id_col)).ok_or_else(|| Error::parse(lineno, "missing id"))?;
        let reward = field(Some(reward_col))
            .ok_or_else(|| Error::parse(lineno, "missing reward"))?
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::parse(lineno, format!("bad reward: {e}")))?;
        let mut characteristics = BTreeMap::new();
        for (c, name) in &char_cols {
            if let Some(v) = field(Some(*c)) {
                let v = v.trim().parse::<f64>().map_err(|e| {
                    Error::parse(lineno, format!("bad value for characteristic {name:?}: {e}"))
                })?;
                characteristics.insert(name.clone(), v);
            }
        }
        let sample = ScoredSample {
            id,
            group: field(group_col),
            prompt_id: field(prompt_col),
            text: field(text_col),
            characteristics,
            reward,
            extra: Map::new(),
        };
        check_record(&sample, lineno, &mut seen)?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_samples_jsonl<W: Write>(mut writer: W, samples: &[ScoredSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawPair {
    #[serde(default)]
    pair_id: Option<Value>,
    better_id: Option<String>,
    worse_id: Option<String>,
}

/// Reads preference pairs from JSONL. A missing `pair_id` is replaced by the
/// pair's zero-based position in the file.
pub fn parse_pairs<R: Read>(reader: R) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPair =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let pair_id = match raw.pair_id {
            None | Some(Value::Null) => pairs.len().to_string(),
            Some(Value::String(s)) => s,
            Some(Value::Number(n)) => n.to_string(),
            Some(other) => {
                return Err(Error::parse(lineno, format!("bad pair_id {other}")));
            }
        };
        let better = raw
            .better_id
            .ok_or_else(|| Error::parse(lineno, "missing better_id"))?;
        let worse = raw
            .worse_id
            .ok_or_else(|| Error::parse(lineno, "missing worse_id"))?;
        let pair = PreferencePair::new(pair_id, better, worse)
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_pairs_jsonl<W: Write>(mut writer: W, pairs: &[PreferencePair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jsonl(s: &str) -> Result<SampleSet> {
        parse_samples(s.as_bytes(), SampleFormat::Jsonl)
    }

    #[test]
    fn parses_single_record() {
        let set = jsonl(r#"{"id":"a","reward":1.5,"text":"hi"}"#).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.samples()[0].reward, 1.5);
        assert_eq!(set.samples()[0].text.as_deref(), Some("hi"));
    }

    #[test]
    fn missing_reward_names_line() {
        let err = jsonl(r#"{"id":"a"}"#).unwrap_err();
        assert_eq!(err.to_string(), "missing reward at line 1");
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = jsonl("{\"id\":\"a\",\"reward\":1}\n{\"id\":\"a\",\"reward\":2}").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = jsonl("{\"id\":\"a\",\"reward\":1}\n{not json").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_fields_are_kept_but_ignored() {
        let set = jsonl(r#"{"id":"a","reward":1,"model":"m","score_raw":[1,2]}"#).unwrap();
        let s = &set.samples()[0];
        assert_eq!(s.extra.get("model"), Some(&Value::from("m")));
    }

    #[test]
    fn csv_with_characteristic_columns() {
        let data = "id,reward,group,text,c_length\na,1.0,g,\"hello, world\",42\nb,-2,,,\n";
        let set = parse_samples(data.as_bytes(), SampleFormat::Csv).unwrap();
        assert_eq!(set.len(), 2);
        let a = set.get("a").unwrap();
        assert_eq!(a.text.as_deref(), Some("hello, world"));
        assert_eq!(a.characteristics["length"], 42.0);
        let b = set.get("b").unwrap();
        assert_eq!(b.group, None);
        assert!(b.characteristics.is_empty());
    }

    #[test]
    fn csv_non_finite_reward_rejected() {
        let data = "id,reward\na,NaN\n";
        let err = parse_samples(data.as_bytes(), SampleFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn pairs_auto_numbered_in_order() {
        let data = "{\"better_id\":\"a\",\"worse_id\":\"b\"}\n\
                    {\"pair_id\":\"x\",\"better_id\":\"c\",\"worse_id\":\"d\"}\n\
                    {\"better_id\":\"e\",\"worse_id\":\"f\"}\n";
        let pairs = parse_pairs(data.as_bytes()).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].pair_id, "0");
        assert_eq!((pairs[0].better_id.as_str(), pairs[0].worse_id.as_str()), ("a", "b"));
        assert_eq!(pairs[1].pair_id, "x");
        assert_eq!(pairs[2].pair_id, "2");
    }

    #[test]
    fn self_pair_rejected() {
        assert!(parse_pairs(r#"{"better_id":"a","worse_id":"a"}"#.as_bytes()).is_err());
    }

    #[test]
    fn unresolvable_pair_id_named() {
        let set = jsonl(r#"{"id":"a","reward":1}"#).unwrap();
        let pairs = parse_pairs(r#"{"better_id":"a","worse_id":"zz"}"#.as_bytes()).unwrap();
        let err = set.resolve_pairs(&pairs).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn explicit_characteristic_wins() {
        let set = jsonl(r#"{"id":"a","reward":0,"text":"ab","characteristics":{"length":42}}"#)
            .unwrap();
        assert_eq!(extract_characteristic(&set, LENGTH).unwrap(), vec![42.0]);
    }

    #[test]
    fn length_from_text() {
        let set = jsonl(r#"{"id":"a","reward":0,"text":"abc"}"#).unwrap();
        assert_eq!(extract_characteristic(&set, LENGTH).unwrap(), vec![3.0]);
    }

    #[test]
    fn missing_characteristic_names_sample() {
        let set = jsonl(r#"{"id":"s7","reward":0}"#).unwrap();
        let err = extract_characteristic(&set, LENGTH).unwrap_err();
        assert!(err.to_string().contains("s7"));
        let set = jsonl(r#"{"id":"s8","reward":0,"text":"x"}"#).unwrap();
        assert!(extract_characteristic(&set, "politeness").is_err());
    }
}
