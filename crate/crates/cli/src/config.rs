//! Run configuration: TOML file, command-line overrides, and the hash that
//! identifies a configuration in every report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use had_core::agents::{default_roster, disable_agents, validate_roster, AgentSpec, ExpertIdentity};
use had_core::backend::{HttpBackendConfig, RetryPolicy};
use had_core::datasets::{ColumnMap, DatasetName};
use had_core::discussion::{Aggregation, DiscussionConfig, RequestParams};
use had_core::SentimentLabel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key. Empty for none.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub requests_per_minute: Option<u32>,
    pub fixtures: Option<PathBuf>,
}

impl Default for BackendSection {
    fn default() -> Self {
        let http = HttpBackendConfig::default();
        let request = RequestParams::default();
        Self {
            kind: BackendKind::Http,
            endpoint: http.endpoint,
            model: request.model,
            api_key_env: http.api_key_env.unwrap_or_default(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            max_attempts: http.retry.max_attempts,
            base_delay_ms: http.retry.base_delay.as_millis() as u64,
            max_delay_ms: http.retry.max_delay.as_millis() as u64,
            timeout_ms: http.timeout.as_millis() as u64,
            max_in_flight: http.max_in_flight,
            requests_per_minute: None,
            fixtures: None,
        }
    }
}

impl BackendSection {
    pub fn http_config(&self) -> HttpBackendConfig {
        HttpBackendConfig {
            endpoint: self.endpoint.clone(),
            api_key_env: Some(self.api_key_env.clone()).filter(|s| !s.is_empty()),
            timeout: Duration::from_millis(self.timeout_ms),
            retry: RetryPolicy {
                max_attempts: self.max_attempts,
                base_delay: Duration::from_millis(self.base_delay_ms),
                max_delay: Duration::from_millis(self.max_delay_ms),
            },
            max_in_flight: self.max_in_flight,
            requests_per_minute: self.requests_per_minute,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RosterSection {
    /// Replaces the built-in roster when non-empty.
    pub agents: Vec<AgentSpec>,
    pub disable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscussionSection {
    pub max_rounds: u32,
    pub aggregation: Aggregation,
    pub consensus_early_stop: bool,
    /// Agent calls in flight per record.
    pub parallelism: usize,
    pub binary_tie_break: SentimentLabel,
    pub binary_fallback: SentimentLabel,
    pub anonymize_experts: bool,
}

impl Default for DiscussionSection {
    fn default() -> Self {
        let d = DiscussionConfig::default();
        Self {
            max_rounds: d.max_rounds,
            aggregation: d.aggregation,
            consensus_early_stop: d.consensus_early_stop,
            parallelism: d.parallelism,
            binary_tie_break: d.binary_tie_break,
            binary_fallback: d.binary_fallback,
            anonymize_experts: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Records in flight at once.
    pub parallelism: usize,
    pub failure_budget: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            parallelism: 4,
            failure_budget: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub cache_dir: PathBuf,
    pub transcript_dir: PathBuf,
    pub report_dir: PathBuf,
    pub no_cache: bool,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self::under(Path::new("had-out"))
    }
}

impl PathsSection {
    pub fn under(base: &Path) -> Self {
        Self {
            cache_dir: base.join("cache"),
            transcript_dir: base.join("transcripts"),
            report_dir: base.join("reports"),
            no_cache: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSection,
    pub roster: RosterSection,
    pub discussion: DiscussionSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
    /// Column-map overrides keyed by dataset slug (`fpb`, `fiqa`, ...).
    pub datasets: BTreeMap<String, ColumnMap>,
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<BackendKind>,
    pub aggregation: Option<Aggregation>,
    pub rounds: Option<u32>,
    pub disable_agents: Vec<String>,
    pub fixtures: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub no_cache: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(f) = &o.fixtures {
            self.backend.fixtures = Some(f.clone());
            self.backend.kind = BackendKind::Scripted;
        }
        if let Some(k) = o.backend {
            self.backend.kind = k;
        }
        if let Some(a) = o.aggregation {
            self.discussion.aggregation = a;
        }
        if let Some(r) = o.rounds {
            self.discussion.max_rounds = r;
        }
        self.roster.disable.extend(o.disable_agents.iter().cloned());
        if let Some(out) = &o.out {
            let no_cache = self.paths.no_cache;
            self.paths = PathsSection::under(out);
            self.paths.no_cache = no_cache;
        }
        self.paths.no_cache |= o.no_cache;
    }

    pub fn validate(&self) -> Result<()> {
        if self.discussion.parallelism == 0 || self.eval.parallelism == 0 || self.backend.max_in_flight == 0 {
            bail!("parallelism settings must be at least 1");
        }
        if self.discussion.max_rounds == 0 {
            bail!("discussion.max_rounds must be at least 1");
        }
        if self.backend.max_tokens == 0 {
            bail!("backend.max_tokens must be at least 1");
        }
        if !(self.backend.temperature.is_finite() && self.backend.temperature >= 0.0) {
            bail!("backend.temperature must be a non-negative number");
        }
        for label in [self.discussion.binary_tie_break, self.discussion.binary_fallback] {
            if label == SentimentLabel::Neutral {
                bail!("binary tie-break and fallback must be positive or negative");
            }
        }
        if self.backend.kind == BackendKind::Scripted && self.backend.fixtures.is_none() {
            bail!("the scripted backend needs a fixture file (--fixtures or backend.fixtures)");
        }
        for key in self.datasets.keys() {
            key.parse::<DatasetName>()
                .with_context(|| format!("[datasets.{key}] in config"))?;
        }
        self.roster()?;
        Ok(())
    }

    pub fn roster(&self) -> Result<Vec<AgentSpec>> {
        let base = if self.roster.agents.is_empty() {
            default_roster()
        } else {
            self.roster.agents.clone()
        };
        validate_roster(&base)?;
        Ok(disable_agents(&base, &self.roster.disable)?)
    }

    pub fn discussion(&self) -> DiscussionConfig {
        let d = &self.discussion;
        DiscussionConfig {
            max_rounds: d.max_rounds,
            aggregation: d.aggregation,
            consensus_early_stop: d.consensus_early_stop,
            parallelism: d.parallelism,
            binary_tie_break: d.binary_tie_break,
            binary_fallback: d.binary_fallback,
            expert_identity: if d.anonymize_experts {
                ExpertIdentity::Anonymous
            } else {
                ExpertIdentity::Named
            },
            request: RequestParams {
                model: self.backend.model.clone(),
                temperature: self.backend.temperature,
                max_tokens: self.backend.max_tokens,
            },
            ..DiscussionConfig::default()
        }
    }

    pub fn column_map(&self, name: DatasetName) -> ColumnMap {
        self.datasets
            .iter()
            .find(|(k, _)| k.parse::<DatasetName>().ok() == Some(name))
            .map(|(_, m)| m.clone())
            .unwrap_or_else(|| ColumnMap::preset(name))
    }

    /// SHA-256 over everything that can change a prediction. Paths are left
    /// out; the fixture file contributes its content digest instead.
    pub fn hash(&self) -> Result<String> {
        let mut backend = serde_json::to_value(&self.backend)?;
        if let Some(path) = &self.backend.fixtures {
            let bytes = std::fs::read(path).with_context(|| format!("reading fixtures {}", path.display()))?;
            backend["fixtures"] = hex::encode(Sha256::digest(&bytes)).into();
        }
        let canonical = serde_json::json!({
            "backend": backend,
            "roster": self.roster()?,
            "discussion": self.discussion,
            "datasets": self.datasets,
        });
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.roster().unwrap().len(), 5);
        assert_eq!(c.backend.api_key_env, "OPENAI_API_KEY");
    }

    #[test]
    fn toml_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("had.toml");
        std::fs::write(
            &path,
            r#"
[backend]
model = "local-model"
endpoint = "http://localhost:8080/v1/chat/completions"
api_key_env = ""

[discussion]
max_rounds = 2
aggregation = "majority"

[roster]
disable = ["A5"]

[datasets.fpb]
text = "sentence"
label = { label = "label" }
format = { kind = "delimited", delimiter = "\t" }
"#,
        )
        .unwrap();
        let o = Overrides {
            rounds: Some(3),
            disable_agents: vec!["A3".into()],
            out: Some(dir.path().join("out")),
            ..Default::default()
        };
        let c = RunConfig::load(Some(&path), &o).unwrap();
        assert_eq!(c.discussion.max_rounds, 3);
        assert_eq!(c.discussion.aggregation, Aggregation::MajorityVote);
        let enabled: Vec<_> = c.roster().unwrap().into_iter().filter(|a| a.enabled).map(|a| a.id).collect();
        assert_eq!(enabled, ["A1", "A2", "A4"]);
        assert_eq!(c.paths.report_dir, dir.path().join("out/reports"));
        assert_eq!(c.backend.http_config().api_key_env, None);
        assert_eq!(c.discussion().request.model, "local-model");
        assert!(matches!(
            c.column_map(DatasetName::Fpb).format,
            had_core::datasets::FileFormat::Delimited { delimiter: '\t', .. }
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = |toml_text: &str| {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.toml");
            std::fs::write(&p, toml_text).unwrap();
            RunConfig::load(Some(&p), &Overrides::default()).is_err()
        };
        assert!(bad("[discussion]\nparallelism = 0\n"));
        assert!(bad("[discussion]\nbinary_tie_break = \"neutral\"\n"));
        assert!(bad("[roster]\ndisable = [\"A9\"]\n"));
        assert!(bad("[backend]\nkind = \"scripted\"\n"));
        assert!(bad("[backend]\nunknown_key = 1\n"));
        assert!(bad("[datasets.imdb]\ntext = \"t\"\nlabel = { label = \"l\" }\nformat = { kind = \"json_lines\" }\n"));
    }

    #[test]
    fn hash_ignores_paths_but_tracks_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths = PathsSection::under(Path::new("/elsewhere"));
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.discussion.max_rounds = 2;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = a.clone();
        c.roster.disable.push("A2".into());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn hash_tracks_fixture_content_not_path() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
        std::fs::write(&p1, "{}").unwrap();
        std::fs::write(&p2, "{}").unwrap();
        let mut a = RunConfig::default();
        a.backend.kind = BackendKind::Scripted;
        a.backend.fixtures = Some(p1.clone());
        let mut b = a.clone();
        b.backend.fixtures = Some(p2.clone());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        std::fs::write(&p2, r#"{"messages":{}}"#).unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
