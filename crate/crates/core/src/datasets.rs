//! Loaders for the five benchmark corpora, FiQA score quantization, SEntFiN
//! entity filtering, and count validation against the published statistics.
//!
//! Raw corpora are not shipped; point the loaders at local copies. Each
//! corpus has a [`ColumnMap::preset`] for its usual distribution format, and
//! every field of the map can be overridden.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::label::{LabelScheme, Message, MessageError, SentimentLabel};

pub const FIQA_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("row {row}: invalid JSON: {source}")]
    Json {
        row: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("column `{column}` not found")]
    MissingColumn { column: String },
    #[error("row {row}: cannot map label `{value}`")]
    UnmappableLabel { row: usize, value: String },
    #[error("row {row}: record has no sentiment score")]
    MissingScore { row: usize },
    #[error("row {row}: score {score} outside [-1, 1]")]
    ScoreOutOfRange { row: usize, score: f64 },
    #[error("dataset {0} has no usable records")]
    EmptyDataset(DatasetName),
    #[error("unknown dataset `{0}` (expected one of fpb, stocksen, cmc, fiqa, sentfin)")]
    UnknownDataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Fpb,
    StockSen,
    Cmc,
    FiQA,
    SEntFiN,
}

impl DatasetName {
    pub const ALL: [DatasetName; 5] = [Self::Fpb, Self::StockSen, Self::Cmc, Self::FiQA, Self::SEntFiN];

    pub fn scheme(self) -> LabelScheme {
        match self {
            Self::Fpb | Self::SEntFiN => LabelScheme::Ternary,
            Self::StockSen | Self::Cmc | Self::FiQA => LabelScheme::Binary,
        }
    }

    /// Post-processing counts from the published statistics table.
    pub fn expected_stats(self) -> DatasetStats {
        let (p, n, u) = match self {
            Self::Fpb => (570, 303, 1391),
            Self::StockSen => (4542, 1676, 0),
            Self::Cmc => (12022, 1523, 0),
            Self::FiQA => (507, 264, 0),
            Self::SEntFiN => (2832, 2373, 2701),
        };
        DatasetStats {
            positive: p,
            negative: n,
            neutral: u,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Self::Fpb => "fpb",
            Self::StockSen => "stocksen",
            Self::Cmc => "cmc",
            Self::FiQA => "fiqa",
            Self::SEntFiN => "sentfin",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::Fpb => "FPB",
            Self::StockSen => "StockSen",
            Self::Cmc => "CMC",
            Self::FiQA => "FiQA",
            Self::SEntFiN => "SEntFiN",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for DatasetName {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "fpb" | "financialphrasebank" | "phrasebank" => Self::Fpb,
            "stocksen" => Self::StockSen,
            "cmc" => Self::Cmc,
            "fiqa" => Self::FiQA,
            "sentfin" | "sentfin10" => Self::SEntFiN,
            _ => return Err(DatasetError::UnknownDataset(s.to_owned())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub id: String,
    pub text: String,
    pub gold: SentimentLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub source: DatasetName,
}

impl LabeledRecord {
    pub fn to_message(&self) -> Result<Message, MessageError> {
        let m = Message::new(self.id.clone(), self.text.clone())?;
        Ok(match &self.target {
            Some(t) => m.with_target(t.clone()),
            None => m,
        })
    }
}

/// A row the loader skipped, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based data row (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: DatasetName,
    pub scheme: LabelScheme,
    pub records: Vec<LabeledRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<RejectedRow>,
}

impl Dataset {
    pub fn new(name: DatasetName, records: Vec<LabeledRecord>) -> Self {
        Self {
            name,
            scheme: name.scheme(),
            records,
            rejected: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stats(&self) -> DatasetStats {
        let mut s = DatasetStats::default();
        for r in &self.records {
            *s.count_mut(r.gold) += 1;
        }
        s
    }

    /// Writes the post-processed records, one JSON object per line.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn read_snapshot(name: DatasetName, path: &Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| DatasetError::Io {
                path: path.to_owned(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|source| DatasetError::Json { row: i + 1, source })?);
        }
        if records.is_empty() {
            return Err(DatasetError::EmptyDataset(name));
        }
        Ok(Self::new(name, records))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub positive: usize,
    pub negative: usize,
    pub neutral: usize,
}

impl DatasetStats {
    pub fn count(&self, label: SentimentLabel) -> usize {
        match label {
            SentimentLabel::Positive => self.positive,
            SentimentLabel::Negative => self.negative,
            SentimentLabel::Neutral => self.neutral,
        }
    }

    fn count_mut(&mut self, label: SentimentLabel) -> &mut usize {
        match label {
            SentimentLabel::Positive => &mut self.positive,
            SentimentLabel::Negative => &mut self.negative,
            SentimentLabel::Neutral => &mut self.neutral,
        }
    }

    pub fn total(&self) -> usize {
        self.positive + self.negative + self.neutral
    }
}

/// Physical layout of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FileFormat {
    /// Delimiter-separated values. Without headers, columns are named by
    /// zero-based index ("0", "1", ...).
    Delimited {
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default = "default_true")]
        has_headers: bool,
    },
    /// One JSON object per line.
    JsonLines,
    /// `sentence@label` lines; exposes columns `sentence` and `label`.
    AtSeparated,
}

fn default_delimiter() -> char {
    ','
}

fn default_true() -> bool {
    true
}

/// Where a record's gold label comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// A label string such as `positive` or `bullish`.
    Label(String),
    /// A real score in [-1, 1], quantized with [`quantize_fiqa`].
    Score(String),
    /// A JSON object mapping entity to label string.
    EntityMap(String),
}

/// How multi-entity headlines are reduced to one label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityFilter {
    /// Keep headlines with one entity, or several that all agree.
    #[default]
    Unanimous,
    /// Keep only single-entity headlines.
    SingleEntity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub format: FileFormat,
    pub text: String,
    pub label: LabelSource,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub entity_filter: EntityFilter,
    #[serde(default = "default_threshold")]
    pub score_threshold: f64,
    /// Fail on the first unmappable label instead of skipping the row.
    #[serde(default)]
    pub strict: bool,
}

fn default_threshold() -> f64 {
    FIQA_THRESHOLD
}

impl ColumnMap {
    /// Layout of each corpus as commonly distributed.
    pub fn preset(name: DatasetName) -> Self {
        let csv = FileFormat::Delimited {
            delimiter: ',',
            has_headers: true,
        };
        let (format, text, label, target, id) = match name {
            DatasetName::Fpb => (FileFormat::AtSeparated, "sentence", LabelSource::Label("label".into()), None, None),
            DatasetName::StockSen | DatasetName::Cmc => (csv, "text", LabelSource::Label("label".into()), None, None),
            DatasetName::FiQA => (
                FileFormat::JsonLines,
                "sentence",
                LabelSource::Score("sentiment_score".into()),
                Some("target"),
                Some("id"),
            ),
            DatasetName::SEntFiN => (csv, "Title", LabelSource::EntityMap("Decisions".into()), None, Some("S No.")),
        };
        Self {
            format,
            text: text.into(),
            label,
            target: target.map(Into::into),
            id: id.map(Into::into),
            entity_filter: EntityFilter::default(),
            score_threshold: FIQA_THRESHOLD,
            strict: false,
        }
    }
}

/// Case-insensitive label mapping shared by every corpus.
pub fn map_label(raw: &str) -> Option<SentimentLabel> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "positive" | "bullish" => Some(SentimentLabel::Positive),
        "negative" | "bearish" => Some(SentimentLabel::Negative),
        "neutral" => Some(SentimentLabel::Neutral),
        _ => None,
    }
}

/// A record before label quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord {
    pub row: usize,
    pub id: String,
    pub text: String,
    pub score: Option<f64>,
    pub target: Option<String>,
}

/// Keeps records with `|score| > threshold` and labels them by sign.
pub fn quantize_fiqa(records: &[ScoredRecord], threshold: f64) -> Result<Dataset, DatasetError> {
    let mut kept = Vec::new();
    for r in records {
        let score = r.score.ok_or(DatasetError::MissingScore { row: r.row })?;
        if !(-1.0..=1.0).contains(&score) {
            return Err(DatasetError::ScoreOutOfRange { row: r.row, score });
        }
        if score.abs() > threshold {
            kept.push(LabeledRecord {
                id: r.id.clone(),
                text: r.text.clone(),
                gold: if score > 0.0 {
                    SentimentLabel::Positive
                } else {
                    SentimentLabel::Negative
                },
                score: Some(score),
                target: r.target.clone(),
                source: DatasetName::FiQA,
            });
        }
    }
    Ok(Dataset::new(DatasetName::FiQA, kept))
}

/// One raw row as column name to string value.
type Row = BTreeMap<String, String>;

fn decode(bytes: Vec<u8>) -> String {
    match String::from_utf8(bytes) {
        Ok(s) => s,
        // the phrase bank ships as latin-1
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect(),
    }
}

fn read_rows(path: &Path, format: &FileFormat) -> Result<(Vec<String>, Vec<Row>, Vec<RejectedRow>), DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    let content = decode(bytes);
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    let columns = match format {
        FileFormat::AtSeparated => {
            for (i, line) in content.lines().enumerate() {
                let line = line.trim_end_matches('\r');
                if line.trim().is_empty() {
                    continue;
                }
                match line.rsplit_once('@') {
                    Some((sentence, label)) => rows.push(Row::from([
                        ("sentence".to_owned(), sentence.to_owned()),
                        ("label".to_owned(), label.to_owned()),
                        ("__row".to_owned(), (i + 1).to_string()),
                    ])),
                    None => rejected.push(RejectedRow {
                        row: i + 1,
                        reason: "missing `@` separator".into(),
                    }),
                }
            }
            vec!["sentence".into(), "label".into()]
        }
        FileFormat::JsonLines => {
            let mut columns = std::collections::BTreeSet::new();
            for (i, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let value: Value = serde_json::from_str(line).map_err(|source| DatasetError::Json { row: i + 1, source })?;
                let Value::Object(obj) = value else {
                    rejected.push(RejectedRow {
                        row: i + 1,
                        reason: "line is not a JSON object".into(),
                    });
                    continue;
                };
                let mut row = Row::new();
                for (k, v) in obj {
                    let s = match v {
                        Value::String(s) => s,
                        Value::Null => continue,
                        other => other.to_string(),
                    };
                    columns.insert(k.clone());
                    row.insert(k, s);
                }
                row.insert("__row".into(), (i + 1).to_string());
                rows.push(row);
            }
            columns.into_iter().collect()
        }
        FileFormat::Delimited { delimiter, has_headers } => {
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(u8::try_from(*delimiter).unwrap_or(b','))
                .has_headers(*has_headers)
                .flexible(true)
                .from_reader(content.as_bytes());
            let headers: Vec<String> = if *has_headers {
                reader
                    .headers()
                    .map_err(|source| DatasetError::Csv {
                        path: path.to_owned(),
                        source,
                    })?
                    .iter()
                    .map(|h| h.trim_start_matches('\u{feff}').trim().to_owned())
                    .collect()
            } else {
                Vec::new()
            };
            let mut width = headers.len();
            for (i, record) in reader.records().enumerate() {
                let record = record.map_err(|source| DatasetError::Csv {
                    path: path.to_owned(),
                    source,
                })?;
                let mut row = Row::new();
                for (j, field) in record.iter().enumerate() {
                    let key = headers.get(j).cloned().unwrap_or_else(|| j.to_string());
                    row.insert(key, field.to_owned());
                }
                width = width.max(record.len());
                row.insert("__row".into(), (i + 1).to_string());
                rows.push(row);
            }
            if *has_headers {
                headers
            } else {
                (0..width).map(|j| j.to_string()).collect()
            }
        }
    };
    Ok((columns, rows, rejected))
}

fn resolve_column<'a>(columns: &'a [String], wanted: &str) -> Result<&'a str, DatasetError> {
    columns
        .iter()
        .find(|c| *c == wanted)
        .or_else(|| columns.iter().find(|c| c.eq_ignore_ascii_case(wanted)))
        .map(String::as_str)
        .ok_or_else(|| DatasetError::MissingColumn { column: wanted.to_owned() })
}

/// Reduces a SEntFiN-style `{"entity": "label", ...}` map to one label.
fn entity_label(raw: &str, filter: EntityFilter) -> Result<(SentimentLabel, Option<String>), String> {
    let map: BTreeMap<String, String> = serde_json::from_str(raw)
        .or_else(|_| serde_json::from_str(&raw.replace('\'', "\"")))
        .map_err(|e| format!("entity map is not a JSON object: {e}"))?;
    let mut labels = Vec::with_capacity(map.len());
    for (entity, label) in &map {
        labels.push(map_label(label).ok_or_else(|| format!("cannot map label `{label}` for entity `{entity}`"))?);
    }
    match (labels.as_slice(), filter) {
        ([], _) => Err("entity map is empty".into()),
        ([only], _) => Ok((*only, map.keys().next().cloned())),
        (_, EntityFilter::SingleEntity) => Err(format!("{} entities", labels.len())),
        ([first, rest @ ..], EntityFilter::Unanimous) => {
            if rest.iter().all(|l| l == first) {
                Ok((*first, None))
            } else {
                Err("entities disagree".into())
            }
        }
    }
}

/// Reads raw records with scores, for corpora labelled by [`LabelSource::Score`].
pub fn load_scored(path: &Path, map: &ColumnMap) -> Result<Vec<ScoredRecord>, DatasetError> {
    let LabelSource::Score(score_col) = &map.label else {
        return Err(DatasetError::MissingColumn {
            column: "score".into(),
        });
    };
    let (columns, rows, _) = read_rows(path, &map.format)?;
    let text_col = resolve_column(&columns, &map.text)?;
    let score_col = resolve_column(&columns, score_col)?;
    let target_col = map.target.as_deref().map(|c| resolve_column(&columns, c)).transpose()?;
    let id_col = map.id.as_deref().map(|c| resolve_column(&columns, c)).transpose()?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let n: usize = row["__row"].parse().unwrap_or(0);
        let score = match row.get(score_col).map(|s| s.trim()) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<f64>().map_err(|_| DatasetError::UnmappableLabel {
                row: n,
                value: s.to_owned(),
            })?),
        };
        out.push(ScoredRecord {
            row: n,
            id: id_col
                .and_then(|c| row.get(c).cloned())
                .unwrap_or_else(|| format!("fiqa-{n}")),
            text: row.get(text_col).cloned().unwrap_or_default(),
            score,
            target: target_col.and_then(|c| row.get(c).cloned()).filter(|t| !t.is_empty()),
        });
    }
    Ok(out)
}

/// Suffixes repeated ids with `#2`, `#3`, ... so every record is addressable.
fn uniquify_ids(records: &mut [LabeledRecord]) {
    let mut seen: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for r in records {
        let n = seen.entry(r.id.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            r.id = format!("{}#{n}", r.id);
        }
    }
}

/// Loads and post-processes a corpus. Rows that cannot be labelled are
/// listed in [`Dataset::rejected`] unless `map.strict` is set.
pub fn load_dataset(name: DatasetName, path: &Path, map: &ColumnMap) -> Result<Dataset, DatasetError> {
    if let LabelSource::Score(_) = map.label {
        let mut dataset = quantize_fiqa(&load_scored(path, map)?, map.score_threshold)?;
        dataset.name = name;
        dataset.scheme = name.scheme();
        dataset.records.iter_mut().for_each(|r| r.source = name);
        uniquify_ids(&mut dataset.records);
        return if dataset.is_empty() {
            Err(DatasetError::EmptyDataset(name))
        } else {
            Ok(dataset)
        };
    }

    let (columns, rows, mut rejected) = read_rows(path, &map.format)?;
    let text_col = resolve_column(&columns, &map.text)?;
    let label_col = match &map.label {
        LabelSource::Label(c) | LabelSource::EntityMap(c) | LabelSource::Score(c) => resolve_column(&columns, c)?,
    };
    let target_col = map.target.as_deref().map(|c| resolve_column(&columns, c)).transpose()?;
    let id_col = map.id.as_deref().map(|c| resolve_column(&columns, c)).transpose()?;
    let scheme = name.scheme();

    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let n: usize = row["__row"].parse().unwrap_or(0);
        let raw = row.get(label_col).map(String::as_str).unwrap_or("");
        let labelled = match &map.label {
            LabelSource::EntityMap(_) => entity_label(raw, map.entity_filter),
            _ => map_label(raw)
                .map(|l| (l, None))
                .ok_or_else(|| format!("cannot map label `{}`", raw.trim())),
        };
        let (gold, entity) = match labelled {
            Ok(v) if scheme.admits(v.0) => v,
            Ok((l, _)) => {
                rejected.push(RejectedRow {
                    row: n,
                    reason: format!("label {l} not admissible under the {scheme} scheme"),
                });
                continue;
            }
            Err(reason) => {
                if map.strict {
                    return Err(DatasetError::UnmappableLabel {
                        row: n,
                        value: raw.trim().to_owned(),
                    });
                }
                rejected.push(RejectedRow { row: n, reason });
                continue;
            }
        };
        let text = row.get(text_col).map(|t| t.trim()).unwrap_or("");
        if text.is_empty() {
            rejected.push(RejectedRow {
                row: n,
                reason: "empty text".into(),
            });
            continue;
        }
        records.push(LabeledRecord {
            id: id_col
                .and_then(|c| row.get(c))
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| format!("{}-{n}", name.slug())),
            text: text.to_owned(),
            gold,
            score: None,
            target: target_col
                .and_then(|c| row.get(c).cloned())
                .filter(|t| !t.is_empty())
                .or(entity),
            source: name,
        });
    }
    rejected.sort_by_key(|r| r.row);
    uniquify_ids(&mut records);
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset(name));
    }
    Ok(Dataset {
        name,
        scheme,
        records,
        rejected,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMismatch {
    pub label: SentimentLabel,
    pub expected: usize,
    pub actual: usize,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub dataset: DatasetName,
    pub expected: DatasetStats,
    pub actual: DatasetStats,
    pub mismatches: Vec<CountMismatch>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "{verdict} {}", self.dataset)?;
        for label in self.dataset.scheme().labels() {
            let (e, a) = (self.expected.count(*label), self.actual.count(*label));
            writeln!(f, "  {:<9} expected {:>6} actual {:>6} delta {:>+6}", label, e, a, a as i64 - e as i64)?;
        }
        let (e, a) = (self.expected.total(), self.actual.total());
        write!(f, "  {:<9} expected {:>6} actual {:>6} delta {:>+6}", "total", e, a, a as i64 - e as i64)
    }
}

/// Compares label counts against the published table.
pub fn validate_stats(dataset: &Dataset) -> ValidationReport {
    let expected = dataset.name.expected_stats();
    let actual = dataset.stats();
    let mismatches = SentimentLabel::ALL
        .into_iter()
        .filter(|&l| expected.count(l) != actual.count(l))
        .map(|label| CountMismatch {
            label,
            expected: expected.count(label),
            actual: actual.count(label),
            delta: actual.count(label) as i64 - expected.count(label) as i64,
        })
        .collect();
    ValidationReport {
        dataset: dataset.name,
        expected,
        actual,
        mismatches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, name: &str, content: &[u8]) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(content).unwrap();
        p
    }

    #[test]
    fn names_and_schemes() {
        assert_eq!("FPB".parse::<DatasetName>().unwrap(), DatasetName::Fpb);
        assert_eq!("SEntFiN".parse::<DatasetName>().unwrap(), DatasetName::SEntFiN);
        assert!("imdb".parse::<DatasetName>().is_err());
        assert_eq!(DatasetName::Fpb.scheme(), LabelScheme::Ternary);
        assert_eq!(DatasetName::SEntFiN.scheme(), LabelScheme::Ternary);
        for n in [DatasetName::StockSen, DatasetName::Cmc, DatasetName::FiQA] {
            assert_eq!(n.scheme(), LabelScheme::Binary);
        }
        let totals: Vec<usize> = DatasetName::ALL.iter().map(|n| n.expected_stats().total()).collect();
        assert_eq!(totals, [2264, 6218, 13545, 771, 7906]);
    }

    #[test]
    fn label_mapping() {
        assert_eq!(map_label("Bullish"), Some(SentimentLabel::Positive));
        assert_eq!(map_label(" BEARISH "), Some(SentimentLabel::Negative));
        assert_eq!(map_label("neutral"), Some(SentimentLabel::Neutral));
        assert_eq!(map_label("mixed"), None);
    }

    #[test]
    fn fpb_latin1_at_format() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"Profit rose to EUR 5 mn .@positive\n".to_vec();
        bytes.extend_from_slice(b"Caf\xe9 chain @ Helsinki closes stores .@negative\n");
        bytes.extend_from_slice(b"The company is based in Espoo .@neutral\nno separator here\n");
        let p = write(&dir, "fpb.txt", &bytes);
        let d = load_dataset(DatasetName::Fpb, &p, &ColumnMap::preset(DatasetName::Fpb)).unwrap();
        assert_eq!(d.scheme, LabelScheme::Ternary);
        assert_eq!(d.len(), 3);
        assert_eq!(d.records[1].text, "Café chain @ Helsinki closes stores .");
        assert_eq!(d.records[1].gold, SentimentLabel::Negative);
        assert_eq!(d.records[0].id, "fpb-1");
        assert_eq!(d.rejected, [RejectedRow { row: 4, reason: "missing `@` separator".into() }]);
    }

    #[test]
    fn csv_labels_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.csv", b"text,label\n$AAPL to the moon,bullish\n$TSLA dumping,Bearish\nmeh,neutral\nodd,???\n");
        let d = load_dataset(DatasetName::StockSen, &p, &ColumnMap::preset(DatasetName::StockSen)).unwrap();
        assert_eq!(d.records.iter().map(|r| r.gold).collect::<Vec<_>>(), [SentimentLabel::Positive, SentimentLabel::Negative]);
        assert_eq!(d.rejected.len(), 2);
        assert_eq!(d.rejected[0].row, 3);
        assert!(d.rejected[0].reason.contains("not admissible"));

        let strict = ColumnMap { strict: true, ..ColumnMap::preset(DatasetName::StockSen) };
        let err = load_dataset(DatasetName::StockSen, &p, &strict).unwrap_err();
        assert!(matches!(err, DatasetError::UnmappableLabel { row: 4, ref value } if value == "???"));
    }

    #[test]
    fn missing_column_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.csv", b"body,label\nx,bullish\n");
        let err = load_dataset(DatasetName::Cmc, &p, &ColumnMap::preset(DatasetName::Cmc)).unwrap_err();
        assert!(matches!(err, DatasetError::MissingColumn { ref column } if column == "text"));
        let p = write(&dir, "e.csv", b"text,label\nx,garbage\n");
        let err = load_dataset(DatasetName::Cmc, &p, &ColumnMap::preset(DatasetName::Cmc)).unwrap_err();
        assert!(matches!(err, DatasetError::EmptyDataset(DatasetName::Cmc)));
    }

    #[test]
    fn headerless_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.tsv", b"bullish\tBTC breaks out\nbearish\tETH slides\n");
        let map = ColumnMap {
            format: FileFormat::Delimited { delimiter: '\t', has_headers: false },
            text: "1".into(),
            label: LabelSource::Label("0".into()),
            ..ColumnMap::preset(DatasetName::Cmc)
        };
        let d = load_dataset(DatasetName::Cmc, &p, &map).unwrap();
        assert_eq!(d.records[1].text, "ETH slides");
        assert_eq!(d.records[1].gold, SentimentLabel::Negative);
    }

    #[test]
    fn fiqa_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "fiqa.jsonl",
            br#"{"id":"a","sentence":"Up big","sentiment_score":0.55,"target":"AAPL"}
{"id":"b","sentence":"Flat","sentiment_score":0.30,"target":"MSFT"}
{"id":"c","sentence":"Down","sentiment_score":-0.301}
{"id":"d","sentence":"Meh","sentiment_score":"-0.2"}
{"id":"a","sentence":"Up again","sentiment_score":0.9,"target":"AAPL"}
"#,
        );
        let d = load_dataset(DatasetName::FiQA, &p, &ColumnMap::preset(DatasetName::FiQA)).unwrap();
        assert_eq!(d.scheme, LabelScheme::Binary);
        assert_eq!(d.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "c", "a#2"]);
        assert_eq!(d.records[0].gold, SentimentLabel::Positive);
        assert_eq!(d.records[0].target.as_deref(), Some("AAPL"));
        assert_eq!(d.records[1].gold, SentimentLabel::Negative);
        assert_eq!(d.records[1].score, Some(-0.301));

        let missing = [ScoredRecord { row: 7, id: "x".into(), text: "t".into(), score: None, target: None }];
        assert!(matches!(quantize_fiqa(&missing, 0.3), Err(DatasetError::MissingScore { row: 7 })));
        let wild = [ScoredRecord { score: Some(1.5), ..missing[0].clone() }];
        assert!(matches!(quantize_fiqa(&wild, 0.3), Err(DatasetError::ScoreOutOfRange { .. })));
    }

    #[test]
    fn sentfin_entity_filter() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "sentfin.csv",
            br#"S No.,Title,Decisions,Words
1,SpiceJet to issue shares,"{""SpiceJet"": ""neutral""}",5
2,Sensex and Nifty fall,"{""Sensex"": ""negative"", ""Nifty"": ""negative""}",4
3,Gold up silver down,"{""Gold"": ""positive"", ""silver"": ""negative""}",4
"#,
        );
        let d = load_dataset(DatasetName::SEntFiN, &p, &ColumnMap::preset(DatasetName::SEntFiN)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.records[0].id, "1");
        assert_eq!(d.records[0].target.as_deref(), Some("SpiceJet"));
        assert_eq!(d.records[1].gold, SentimentLabel::Negative);
        assert_eq!(d.rejected[0].row, 3);

        let single = ColumnMap { entity_filter: EntityFilter::SingleEntity, ..ColumnMap::preset(DatasetName::SEntFiN) };
        assert_eq!(load_dataset(DatasetName::SEntFiN, &p, &single).unwrap().len(), 1);
    }

    #[test]
    fn validation_reports_deltas() {
        let rec = |gold| LabeledRecord {
            id: "x".into(),
            text: "t".into(),
            gold,
            score: None,
            target: None,
            source: DatasetName::FiQA,
        };
        let mut records: Vec<_> = std::iter::repeat_with(|| rec(SentimentLabel::Positive)).take(507).collect();
        records.extend(std::iter::repeat_with(|| rec(SentimentLabel::Negative)).take(264));
        let mut d = Dataset::new(DatasetName::FiQA, records);
        assert!(validate_stats(&d).passed());
        d.records.push(rec(SentimentLabel::Negative));
        let r = validate_stats(&d);
        assert!(!r.passed());
        assert_eq!(r.mismatches, [CountMismatch { label: SentimentLabel::Negative, expected: 264, actual: 265, delta: 1 }]);
        assert!(r.to_string().starts_with("FAIL FiQA"));
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.csv", b"text,label\nup,bullish\ndown,bearish\n");
        let d = load_dataset(DatasetName::StockSen, &p, &ColumnMap::preset(DatasetName::StockSen)).unwrap();
        let snap = dir.path().join("snap.jsonl");
        d.write_snapshot(std::fs::File::create(&snap).unwrap()).unwrap();
        assert_eq!(Dataset::read_snapshot(DatasetName::StockSen, &snap).unwrap(), d);
    }

    #[test]
    fn column_map_from_toml_like_json() {
        let map: ColumnMap = serde_json::from_value(serde_json::json!({
            "format": {"kind": "delimited", "delimiter": ";"},
            "text": "msg",
            "label": {"label": "sentiment"}
        }))
        .unwrap();
        assert_eq!(map.format, FileFormat::Delimited { delimiter: ';', has_headers: true });
        assert_eq!(map.score_threshold, FIQA_THRESHOLD);
    }

    proptest! {
        #[test]
        fn quantization_properties(scores in prop::collection::vec(-1.0f64..=1.0, 0..60), threshold in 0.0f64..0.9) {
            let input: Vec<ScoredRecord> = scores.iter().enumerate().map(|(i, &s)| ScoredRecord {
                row: i + 1, id: i.to_string(), text: format!("text {i}"), score: Some(s), target: None,
            }).collect();
            let out = quantize_fiqa(&input, threshold).unwrap();
            prop_assert!(out.len() <= input.len());
            prop_assert_eq!(out.len(), scores.iter().filter(|s| s.abs() > threshold).count());
            for r in &out.records {
                let src = &input[r.id.parse::<usize>().unwrap()];
                prop_assert_eq!(&r.text, &src.text);
                prop_assert!(r.score.unwrap().abs() > threshold);
                prop_assert_eq!(r.gold == SentimentLabel::Positive, r.score.unwrap() > 0.0);
                prop_assert!(out.scheme.admits(r.gold));
            }
        }

        #[test]
        fn loading_is_idempotent_and_ordered(rows in prop::collection::vec(("[a-z]{1,12}", prop::sample::select(vec!["positive", "negative", "neutral", "bogus"])), 1..30)) {
            let dir = tempfile::tempdir().unwrap();
            let mut body = String::new();
            for (t, l) in &rows {
                body.push_str(&format!("{t} .@{l}\n"));
            }
            let p = write(&dir, "f.txt", body.as_bytes());
            let map = ColumnMap::preset(DatasetName::Fpb);
            let a = load_dataset(DatasetName::Fpb, &p, &map);
            let b = load_dataset(DatasetName::Fpb, &p, &map);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(&a, &b);
                    let expected: Vec<String> = rows.iter().filter(|(_, l)| *l != "bogus").map(|(t, _)| format!("{t} .")).collect();
                    prop_assert_eq!(a.records.iter().map(|r| r.text.clone()).collect::<Vec<_>>(), expected);
                    prop_assert!(a.records.iter().all(|r| a.scheme.admits(r.gold)));
                }
                (Err(_), Err(_)) => prop_assert!(rows.iter().all(|(_, l)| *l == "bogus")),
                _ => prop_assert!(false, "non-deterministic load"),
            }
        }
    }
}
