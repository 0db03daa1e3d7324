//! Metrics, dataset evaluation, leave-one-agent-out ablation, and reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::agents::{disable_agents, AgentSpec};
use crate::backend::ChatBackend;
use crate::datasets::{Dataset, DatasetName, LabeledRecord};
use crate::discussion::{run_had, run_naive, DiscussionConfig, DiscussionError, DiscussionTranscript};
use crate::label::{LabelScheme, SentimentLabel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records were evaluated")]
    EmptyRun,
    #[error("label {label} is outside the {scheme} scheme")]
    InadmissibleLabel { label: SentimentLabel, scheme: LabelScheme },
    #[error("duplicate record id `{0}`")]
    DuplicateRecordId(String),
    #[error("{0}")]
    Precondition(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("aborted after {failures} consecutive failures, last: {last_error}")]
    Aborted { failures: usize, last_error: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Counts indexed by (gold, predicted) over the labels of one scheme.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct ConfusionMatrix {
    scheme: LabelScheme,
    counts: [[u64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    scheme: LabelScheme,
    labels: Vec<SentimentLabel>,
    /// Rows are gold labels, columns predictions, both in `labels` order.
    counts: Vec<Vec<u64>>,
}

impl From<ConfusionMatrix> for MatrixRepr {
    fn from(cm: ConfusionMatrix) -> Self {
        let labels = cm.scheme.labels().to_vec();
        let counts = labels
            .iter()
            .map(|&g| labels.iter().map(|&p| cm.get(g, p)).collect())
            .collect();
        Self {
            scheme: cm.scheme,
            labels,
            counts,
        }
    }
}

impl TryFrom<MatrixRepr> for ConfusionMatrix {
    type Error = String;

    fn try_from(r: MatrixRepr) -> Result<Self, String> {
        let mut cm = ConfusionMatrix::new(r.scheme);
        if r.counts.len() != r.labels.len() {
            return Err("confusion matrix is not square".into());
        }
        for (g, row) in r.labels.iter().zip(&r.counts) {
            if row.len() != r.labels.len() {
                return Err("confusion matrix is not square".into());
            }
            for (p, &n) in r.labels.iter().zip(row) {
                if !(r.scheme.admits(*g) && r.scheme.admits(*p)) {
                    return Err(format!("label outside the {} scheme", r.scheme));
                }
                cm.counts[*g as usize][*p as usize] = n;
            }
        }
        Ok(cm)
    }
}

impl ConfusionMatrix {
    pub fn new(scheme: LabelScheme) -> Self {
        Self {
            scheme,
            counts: [[0; 3]; 3],
        }
    }

    pub fn from_pairs(
        scheme: LabelScheme,
        pairs: impl IntoIterator<Item = (SentimentLabel, SentimentLabel)>,
    ) -> Result<Self, EvalError> {
        let mut cm = Self::new(scheme);
        for (g, p) in pairs {
            cm.record(g, p)?;
        }
        Ok(cm)
    }

    pub fn scheme(&self) -> LabelScheme {
        self.scheme
    }

    pub fn record(&mut self, gold: SentimentLabel, predicted: SentimentLabel) -> Result<(), EvalError> {
        for label in [gold, predicted] {
            if !self.scheme.admits(label) {
                return Err(EvalError::InadmissibleLabel {
                    label,
                    scheme: self.scheme,
                });
            }
        }
        self.counts[gold as usize][predicted as usize] += 1;
        Ok(())
    }

    /// Adds another matrix of the same scheme.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.scheme, other.scheme, "merging matrices of different schemes");
        for g in 0..3 {
            for p in 0..3 {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }

    pub fn get(&self, gold: SentimentLabel, predicted: SentimentLabel) -> u64 {
        self.counts[gold as usize][predicted as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    /// Records whose gold label is `label`.
    pub fn support(&self, label: SentimentLabel) -> u64 {
        self.counts[label as usize].iter().sum()
    }

    pub fn predicted(&self, label: SentimentLabel) -> u64 {
        self.counts.iter().map(|row| row[label as usize]).sum()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    match cm.total() {
        0 => Err(EvalError::EmptyRun),
        total => Ok(cm.correct() as f64 / total as f64),
    }
}

/// F1 of one class; 0 when the class is never predicted correctly.
pub fn class_f1(cm: &ConfusionMatrix, label: SentimentLabel) -> f64 {
    let tp = cm.get(label, label);
    if tp == 0 {
        return 0.0;
    }
    let fp = cm.predicted(label) - tp;
    let fn_ = cm.support(label) - tp;
    (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
}

/// Unweighted mean of per-class F1 over classes with gold support.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    let supported: Vec<f64> = cm
        .scheme
        .labels()
        .iter()
        .filter(|&&l| cm.support(l) > 0)
        .map(|&l| class_f1(cm, l))
        .collect();
    if supported.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    Ok(supported.iter().sum::<f64>() / supported.len() as f64)
}

/// Macro F1 for the ternary scheme, positive-class F1 for the binary one.
pub fn headline_f1(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    match cm.scheme {
        LabelScheme::Ternary => macro_f1(cm),
        LabelScheme::Binary if cm.total() == 0 => Err(EvalError::EmptyRun),
        LabelScheme::Binary => Ok(class_f1(cm, SentimentLabel::Positive)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: SentimentLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub positive_f1: f64,
    /// The F-1 column of the results tables.
    pub headline_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl Metrics {
    pub fn compute(cm: &ConfusionMatrix) -> Result<Self, EvalError> {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class = cm
            .scheme
            .labels()
            .iter()
            .map(|&label| ClassMetrics {
                label,
                precision: ratio(cm.get(label, label), cm.predicted(label)),
                recall: ratio(cm.get(label, label), cm.support(label)),
                f1: class_f1(cm, label),
                support: cm.support(label),
            })
            .collect();
        Ok(Self {
            accuracy: accuracy(cm)?,
            macro_f1: macro_f1(cm)?,
            positive_f1: class_f1(cm, SentimentLabel::Positive),
            headline_f1: headline_f1(cm)?,
            per_class,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Naive,
    Had,
}

impl std::str::FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Self::Naive),
            "had" => Ok(Self::Had),
            _ => Err(format!("unknown mode `{s}` (expected naive or had)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub discussion: DiscussionConfig,
    /// Records evaluated concurrently.
    pub parallelism: usize,
    /// Consecutive failed records tolerated before the run aborts.
    pub failure_budget: usize,
    /// Transcripts go to `<dir>/<dataset>-<mode>.jsonl`; existing ones are
    /// reused, which makes runs resumable.
    pub transcript_dir: Option<PathBuf>,
    pub config_hash: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            discussion: DiscussionConfig::default(),
            parallelism: 4,
            failure_budget: 5,
            transcript_dir: None,
            config_hash: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub id: String,
    pub error: String,
}

/// Deterministic summary of one run. Timing and cache traffic live in
/// [`RunStats`] so that reports of replayed runs compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetName,
    /// `naive`, `had`, or `had-minus-<ids>`.
    pub mode: String,
    pub scheme: LabelScheme,
    pub records_total: usize,
    pub records_evaluated: usize,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<RecordFailure>,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    /// Predictions per source (summative, majority, naive, fallback_default).
    pub sources: BTreeMap<String, usize>,
    /// Model calls the transcripts account for.
    pub calls: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_transcripts(
        dataset: &Dataset,
        mode: String,
        transcripts: &[DiscussionTranscript],
        failed: Vec<RecordFailure>,
        aborted: bool,
        config_hash: Option<String>,
    ) -> Result<Self, EvalError> {
        let gold: HashMap<&str, SentimentLabel> = dataset.records.iter().map(|r| (r.id.as_str(), r.gold)).collect();
        let mut cm = ConfusionMatrix::new(dataset.scheme);
        let mut sources = BTreeMap::new();
        let mut calls = 0;
        for t in transcripts {
            let g = t.gold.or_else(|| gold.get(t.message_id.as_str()).copied());
            let Some(g) = g else { continue };
            cm.record(g, t.final_label)?;
            let source = serde_json::to_value(t.source).expect("source serializes");
            *sources.entry(source.as_str().unwrap_or_default().to_owned()).or_insert(0) += 1;
            calls += u64::from(t.call_count);
        }
        Ok(Self {
            dataset: dataset.name,
            mode,
            scheme: dataset.scheme,
            records_total: dataset.len(),
            records_evaluated: cm.total() as usize,
            complete: !aborted && failed.is_empty() && cm.total() as usize == dataset.len(),
            failed,
            metrics: Metrics::compute(&cm)?,
            confusion: cm,
            sources,
            calls,
            config_hash,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.complete { "" } else { " (INCOMPLETE)" };
        writeln!(
            f,
            "{} {}: {} of {} records evaluated{status}",
            self.dataset, self.mode, self.records_evaluated, self.records_total
        )?;
        let m = &self.metrics;
        writeln!(
            f,
            "Acc. {}  F-1 {}  (macro F-1 {}, positive F-1 {})",
            pct(m.accuracy),
            pct(m.headline_f1),
            pct(m.macro_f1),
            pct(m.positive_f1)
        )?;
        let labels = self.scheme.labels();
        write!(f, "{:<10}", "gold\\pred")?;
        for l in labels {
            write!(f, " {:>9}", l.as_str())?;
        }
        writeln!(f)?;
        for &g in labels {
            write!(f, "{:<10}", g.as_str())?;
            for &p in labels {
                write!(f, " {:>9}", self.confusion.get(g, p))?;
            }
            writeln!(f)?;
        }
        for c in &m.per_class {
            writeln!(
                f,
                "{:<10} P {}  R {}  F-1 {}  support {}",
                c.label.as_str(),
                pct(c.precision),
                pct(c.recall),
                pct(c.f1),
                c.support
            )?;
        }
        let sources: Vec<String> = self.sources.iter().map(|(k, v)| format!("{k} {v}")).collect();
        writeln!(f, "Sources: {}", sources.join(", "))?;
        writeln!(f, "Model calls: {}", self.calls)?;
        if let Some(h) = &self.config_hash {
            writeln!(f, "Config: {h}")?;
        }
        for fail in &self.failed {
            writeln!(f, "Failed {}: {}", fail.id, fail.error)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub elapsed_ms: u128,
    /// Records taken from an earlier transcript file.
    pub resumed: usize,
    /// Model calls issued by this invocation, cache hits included.
    pub calls_issued: u64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// In dataset order.
    pub transcripts: Vec<DiscussionTranscript>,
    pub stats: RunStats,
}

pub fn mode_label(mode: PipelineMode, roster: &[AgentSpec]) -> String {
    match mode {
        PipelineMode::Naive => "naive".into(),
        PipelineMode::Had => {
            let off: Vec<&str> = roster.iter().filter(|a| !a.enabled).map(|a| a.id.as_str()).collect();
            if off.is_empty() {
                "had".into()
            } else {
                format!("had-minus-{}", off.join("-"))
            }
        }
    }
}

fn read_transcripts(path: &Path) -> Result<Vec<DiscussionTranscript>, EvalError> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(t) => out.push(t),
            // an interrupted run can leave a torn last line
            Err(e) => warn!(path = %path.display(), error = %e, "skipping malformed transcript line"),
        }
    }
    Ok(out)
}

fn append_line<T: Serialize>(file: &mut std::fs::File, path: &Path, value: &T) -> Result<(), EvalError> {
    let mut line = serde_json::to_vec(value).expect("transcript serializes");
    line.push(b'\n');
    file.write_all(&line).map_err(io_err(path))
}

async fn run_record(
    record: &LabeledRecord,
    mode: PipelineMode,
    roster: &[AgentSpec],
    backend: &dyn ChatBackend,
    config: &DiscussionConfig,
) -> Result<DiscussionTranscript, String> {
    let message = record.to_message().map_err(|e| e.to_string())?;
    let mut t = match mode {
        PipelineMode::Naive => run_naive(&message, backend, config)
            .await
            .map(|o| o.into_transcript(&message)),
        PipelineMode::Had => run_had(&message, roster, backend, config).await,
    }
    .map_err(|e: DiscussionError| e.to_string())?;
    t.gold = Some(record.gold);
    Ok(t)
}

/// Runs one pipeline over every record and scores it.
pub async fn evaluate(
    dataset: &Dataset,
    mode: PipelineMode,
    roster: &[AgentSpec],
    backend: &dyn ChatBackend,
    config: &EvalConfig,
) -> Result<EvalOutcome, EvalError> {
    let started = Instant::now();
    if dataset.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let mut seen = HashSet::new();
    for r in &dataset.records {
        if !seen.insert(r.id.as_str()) {
            return Err(EvalError::DuplicateRecordId(r.id.clone()));
        }
    }
    let label = mode_label(mode, roster);
    let discussion = DiscussionConfig {
        scheme: dataset.scheme,
        ..config.discussion.clone()
    };

    // resume: keep earlier transcripts for records that are still present
    let mut done: HashMap<String, DiscussionTranscript> = HashMap::new();
    let mut sink = None;
    if let Some(dir) = &config.transcript_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("{}-{label}.jsonl", dataset.name.slug()));
        for t in read_transcripts(&path)? {
            if seen.contains(t.message_id.as_str()) {
                done.insert(t.message_id.clone(), t);
            }
        }
        let mut file = std::fs::File::create(&path).map_err(io_err(&path))?;
        for r in &dataset.records {
            if let Some(t) = done.get(&r.id) {
                append_line(&mut file, &path, t)?;
            }
        }
        sink = Some((file, path));
    }
    let resumed = done.len();
    if resumed > 0 {
        info!(dataset = %dataset.name, mode = %label, resumed, "resuming from transcripts");
    }

    let pending: Vec<&LabeledRecord> = dataset.records.iter().filter(|r| !done.contains_key(&r.id)).collect();
    let mut results = stream::iter(pending)
        .map(|record| {
            let discussion = &discussion;
            async move { (record, run_record(record, mode, roster, backend, discussion).await) }
        })
        .buffered(config.parallelism.max(1));

    let mut failed = Vec::new();
    let mut consecutive = 0;
    let mut aborted = None;
    let mut calls_issued = 0u64;
    while let Some((record, result)) = results.next().await {
        match result {
            Ok(t) => {
                consecutive = 0;
                calls_issued += u64::from(t.call_count);
                if let Some((file, path)) = &mut sink {
                    append_line(file, path, &t)?;
                }
                done.insert(record.id.clone(), t);
            }
            Err(error) => {
                warn!(record = %record.id, %error, "record failed");
                consecutive += 1;
                failed.push(RecordFailure {
                    id: record.id.clone(),
                    error: error.clone(),
                });
                if consecutive >= config.failure_budget.max(1) {
                    aborted = Some(error);
                    break;
                }
            }
        }
    }
    drop(results);

    let transcripts: Vec<DiscussionTranscript> =
        dataset.records.iter().filter_map(|r| done.remove(&r.id)).collect();
    if transcripts.is_empty() {
        return Err(match aborted {
            Some(last_error) => EvalError::Aborted {
                failures: consecutive,
                last_error,
            },
            None => EvalError::EmptyRun,
        });
    }
    let report = EvalReport::from_transcripts(
        dataset,
        label,
        &transcripts,
        failed,
        aborted.is_some(),
        config.config_hash.clone(),
    )?;
    Ok(EvalOutcome {
        report,
        transcripts,
        stats: RunStats {
            elapsed_ms: started.elapsed().as_millis(),
            resumed,
            calls_issued,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Row label, e.g. `w/o A3`.
    pub setting: String,
    pub removed: String,
    /// metric(without agent) - metric(full), as fractions.
    pub accuracy_delta: f64,
    pub f1_delta: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: DatasetName,
    pub full: EvalReport,
    pub naive: EvalReport,
    /// naive minus full.
    pub naive_accuracy_delta: f64,
    pub naive_f1_delta: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn complete(&self) -> bool {
        self.full.complete && self.naive.complete && self.rows.iter().all(|r| r.report.complete)
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn signed_pct(x: f64) -> String {
    let v = x * 100.0;
    // keep "-0.00" from appearing for tiny negatives
    if v.abs() < 0.005 {
        format!("{}0.00", if v < 0.0 { "-" } else { "+" })
    } else {
        format!("{v:+.2}")
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8} {:>8}", self.dataset, "Acc.", "F-1")?;
        writeln!(f, "{:<12} {:>8} {:>8}", "HAD", pct(self.full.metrics.accuracy), pct(self.full.metrics.headline_f1))?;
        writeln!(
            f,
            "{:<12} {:>8} {:>8}",
            "Naive",
            signed_pct(self.naive_accuracy_delta),
            signed_pct(self.naive_f1_delta)
        )?;
        for row in &self.rows {
            writeln!(f, "{:<12} {:>8} {:>8}", row.setting, signed_pct(row.accuracy_delta), signed_pct(row.f1_delta))?;
        }
        Ok(())
    }
}

/// Full discussion, naive baseline, and one run per removed agent.
pub async fn run_ablation(
    dataset: &Dataset,
    roster: &[AgentSpec],
    backend: &dyn ChatBackend,
    config: &EvalConfig,
) -> Result<AblationReport, EvalError> {
    let enabled: Vec<&AgentSpec> = roster.iter().filter(|a| a.enabled).collect();
    if enabled.len() < 2 {
        return Err(EvalError::Precondition(format!(
            "ablation needs at least 2 enabled agents, roster has {}",
            enabled.len()
        )));
    }
    let full = evaluate(dataset, PipelineMode::Had, roster, backend, config).await?.report;
    let naive = evaluate(dataset, PipelineMode::Naive, roster, backend, config).await?.report;
    let mut rows = Vec::with_capacity(enabled.len());
    for agent in enabled {
        let reduced = disable_agents(roster, &[agent.id.as_str()])
            .map_err(|e| EvalError::Precondition(e.to_string()))?;
        let report = evaluate(dataset, PipelineMode::Had, &reduced, backend, config).await?.report;
        rows.push(AblationRow {
            setting: format!("w/o {}", agent.id),
            removed: agent.id.clone(),
            accuracy_delta: report.metrics.accuracy - full.metrics.accuracy,
            f1_delta: report.metrics.headline_f1 - full.metrics.headline_f1,
            report,
        });
    }
    Ok(AblationReport {
        dataset: dataset.name,
        naive_accuracy_delta: naive.metrics.accuracy - full.metrics.accuracy,
        naive_f1_delta: naive.metrics.headline_f1 - full.metrics.headline_f1,
        full,
        naive,
        rows,
    })
}

/// Results table with one row per mode and an Acc./F-1 pair per dataset.
pub fn format_results_table(reports: &[EvalReport]) -> String {
    let mut datasets: Vec<DatasetName> = reports.iter().map(|r| r.dataset).collect();
    datasets.sort();
    datasets.dedup();
    let mut modes: Vec<&str> = Vec::new();
    for r in reports {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    let mut out = format!("{:<16}", "Mode");
    for d in &datasets {
        let _ = write!(out, " {:>8} {:>8}", format!("{d} Acc."), "F-1");
    }
    out.push('\n');
    for mode in modes {
        let _ = write!(out, "{mode:<16}");
        for d in &datasets {
            match reports.iter().find(|r| r.dataset == *d && r.mode == mode) {
                Some(r) => {
                    let _ = write!(out, " {:>8} {:>8}", pct(r.metrics.accuracy), pct(r.metrics.headline_f1));
                }
                None => {
                    let _ = write!(out, " {:>8} {:>8}", "--", "--");
                }
            }
        }
        out.push('\n');
    }
    out
}

fn agent_order(id: &str) -> (String, u64) {
    let digits: String = id.chars().rev().take_while(|c| c.is_ascii_digit()).collect::<String>().chars().rev().collect();
    let prefix = id[..id.len() - digits.len()].to_owned();
    (prefix, digits.parse().unwrap_or(0))
}

fn capitalize(label: SentimentLabel) -> String {
    let s = label.as_str();
    s[..1].to_ascii_uppercase() + &s[1..]
}

/// Human-readable case box: message, each agent's opinion, the summative
/// reply, and the final label. Agents that failed are listed as missing.
pub fn emit_case_report(transcript: &DiscussionTranscript) -> String {
    let mut out = String::new();
    let title = match transcript.gold {
        Some(g) => format!("Case {} ({g})", transcript.message_id),
        None => format!("Case {}", transcript.message_id),
    };
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "Message: {}", transcript.text);
    if let Some(target) = &transcript.target {
        let _ = writeln!(out, "Target: {target}");
    }
    let multi_round = transcript.rounds() > 1;

    enum Entry<'a> {
        Opinion(&'a crate::discussion::AgentOpinion),
        Missing(&'a crate::discussion::AgentFailure),
    }
    let mut entries: Vec<(u32, (String, u64), Entry)> = transcript
        .opinions
        .iter()
        .map(|o| (o.round, agent_order(&o.agent_id), Entry::Opinion(o)))
        .chain(
            transcript
                .failures
                .iter()
                .map(|f| (f.round, agent_order(&f.agent_id), Entry::Missing(f))),
        )
        .collect();
    entries.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let mut current_round = 0;
    for (round, _, entry) in &entries {
        if multi_round && *round != current_round {
            current_round = *round;
            let _ = writeln!(out, "Round {round}:");
        }
        match entry {
            Entry::Opinion(o) => {
                let parsed = o.parsed.label.map(capitalize).unwrap_or_else(|| "Unparseable".into());
                let _ = writeln!(out, "({}) {} [parsed: {parsed}]", o.agent_id, o.text.trim());
            }
            Entry::Missing(f) => {
                let _ = writeln!(out, "({}) MISSING: no opinion ({})", f.agent_id, f.error);
            }
        }
    }
    if let Some(summary) = &transcript.summative_text {
        let _ = writeln!(out, "Result: {}", summary.trim());
    }
    let source = serde_json::to_value(transcript.source).expect("source serializes");
    let _ = write!(
        out,
        "Final: {} (via {})",
        transcript.final_label,
        source.as_str().unwrap_or_default()
    );
    if let Some(g) = transcript.gold {
        let _ = write!(out, ", gold {g}, {}", if g == transcript.final_label { "correct" } else { "wrong" });
    }
    out.push('\n');
    out
}

/// JSON form of a case report; identical to the transcript schema.
pub fn case_report_json(transcript: &DiscussionTranscript) -> String {
    serde_json::to_string_pretty(transcript).expect("transcript serializes")
}

/// Writes a report as `<stem>.json` and `<stem>.txt` under `dir`.
pub fn write_report_files(dir: &Path, stem: &str, json: &str, text: &str) -> Result<(PathBuf, PathBuf), EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json_path = dir.join(format!("{stem}.json"));
    let text_path = dir.join(format!("{stem}.txt"));
    std::fs::write(&json_path, format!("{json}\n")).map_err(io_err(&json_path))?;
    std::fs::write(&text_path, text).map_err(io_err(&text_path))?;
    Ok((json_path, text_path))
}
