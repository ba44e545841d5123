//! Definition generation for novel senses.
//!
//! One request per novel sense: all NEW-period usages predicted into the
//! sense are rendered as a numbered list of quotations into a per-language
//! prompt, sent to a chat-completion backend, and the answer is cut at the
//! first sentence terminator and capped at `max_words` words.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{Period, TargetWord};
use crate::error::{Error, Result};
use crate::mapping::SensePrediction;
use crate::metrics::tokenize;

pub const DEFAULT_MAX_WORDS: usize = 10;
pub const DEFAULT_IN_FLIGHT: usize = 4;
pub const DEFAULT_API_KEY_ENV: &str = "SENSEMAP_API_KEY";

/// Characters that end the first sentence of a model answer.
pub const SENTENCE_TERMINATORS: &[char] = &['.', '!', '?', '…', '。', '！', '？'];

const PLACEHOLDERS: [&str; 3] = ["{target_word}", "{lang}", "{quotations}"];

const BUILTIN_TEMPLATES: [(&str, &str); 4] = [
    ("de", include_str!("../templates/de.toml")),
    ("en", include_str!("../templates/en.toml")),
    ("fi", include_str!("../templates/fi.toml")),
    ("ru", include_str!("../templates/ru.toml")),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub language: String,
    /// Substituted for `{lang}`.
    pub language_name: String,
    pub instruction_text: String,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
}

fn default_max_words() -> usize {
    DEFAULT_MAX_WORDS
}

impl PromptTemplate {
    pub fn new(
        language: impl Into<String>,
        language_name: impl Into<String>,
        instruction_text: impl Into<String>,
        max_words: usize,
    ) -> Result<Self> {
        let t = PromptTemplate {
            language: language.into(),
            language_name: language_name.into(),
            instruction_text: instruction_text.into(),
            max_words,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for p in PLACEHOLDERS {
            let n = self.instruction_text.matches(p).count();
            if n != 1 {
                return Err(Error::Template(format!(
                    "placeholder {p} must occur exactly once, found {n}"
                )));
            }
        }
        if self.max_words == 0 {
            return Err(Error::Template("max_words must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        let t: PromptTemplate = toml::from_str(src).map_err(|e| Error::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&src).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Shipped template for a language code (`en`, `fi`, `ru`, `de`; ISO
    /// 639-2 codes and English names are accepted too).
    pub fn builtin(language: &str) -> Result<Self> {
        let code = match language.trim().to_lowercase().as_str() {
            "en" | "eng" | "english" => "en",
            "fi" | "fin" | "finnish" => "fi",
            "ru" | "rus" | "russian" => "ru",
            "de" | "deu" | "ger" | "german" => "de",
            other => {
                return Err(Error::Template(format!(
                    "no built-in template for language `{other}`"
                )))
            }
        };
        let src = BUILTIN_TEMPLATES
            .iter()
            .find(|(c, _)| *c == code)
            .map(|(_, s)| *s)
            .expect("every code has a template");
        Self::from_toml_str(src)
    }
}

/// Prompt templates by dataset language, with an optional fallback for
/// languages that have none.
#[derive(Debug, Clone, Default)]
pub struct Templates {
    by_language: BTreeMap<String, PromptTemplate>,
    fallback: Option<PromptTemplate>,
}

impl Templates {
    /// Use one template for every language.
    pub fn single(tmpl: PromptTemplate) -> Self {
        Templates {
            by_language: BTreeMap::new(),
            fallback: Some(tmpl),
        }
    }

    /// Built-in templates for each of `languages`; languages without one
    /// fall back to the English template.
    pub fn builtin_for<'a>(languages: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut by_language = BTreeMap::new();
        for lang in languages {
            match PromptTemplate::builtin(lang) {
                Ok(t) => {
                    by_language.insert(lang.to_string(), t);
                }
                Err(_) => log::warn!("no prompt template for language `{lang}`, using English"),
            }
        }
        Ok(Templates {
            by_language,
            fallback: Some(PromptTemplate::builtin("en")?),
        })
    }

    pub fn for_language(&self, language: &str) -> Result<&PromptTemplate> {
        self.by_language
            .get(language)
            .or(self.fallback.as_ref())
            .ok_or_else(|| Error::Template(format!("no template for language `{language}`")))
    }
}

/// Substitute the placeholders in a single pass, so placeholder-like text
/// inside the lemma or the quotations is left alone.
pub fn render_prompt<S: AsRef<str>>(tmpl: &PromptTemplate, lemma: &str, usages: &[S]) -> Result<String> {
    if usages.is_empty() {
        return Err(Error::EmptyInput("no usages to quote in the prompt"));
    }
    let quotations = usages
        .iter()
        .enumerate()
        .map(|(i, u)| format!("{}. {}", i + 1, u.as_ref().split_whitespace().collect::<Vec<_>>().join(" ")))
        .collect::<Vec<_>>()
        .join("\n");
    let mut out = String::with_capacity(tmpl.instruction_text.len() + quotations.len());
    let mut rest = tmpl.instruction_text.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = PLACEHOLDERS.iter().find(|p| tail.starts_with(**p));
        match hit {
            Some(p) => {
                out.push_str(match *p {
                    "{target_word}" => lemma,
                    "{lang}" => &tmpl.language_name,
                    _ => &quotations,
                });
                rest = &tail[p.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Cut at the first sentence terminator (kept), then keep at most
/// `max_words` whitespace-separated words.
pub fn truncate_definition(raw: &str, max_words: usize) -> String {
    let first = match raw.find(SENTENCE_TERMINATORS) {
        Some(i) => {
            let end = i + raw[i..].chars().next().map_or(0, char::len_utf8);
            &raw[..end]
        }
        None => raw,
    };
    first
        .split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NovelSenseUsages {
    pub novel_sense_id: String,
    pub lemma: String,
    /// Sorted by usage id.
    pub usage_ids: Vec<String>,
    pub texts: Vec<String>,
}

/// Group the NEW-period usages predicted into novel senses by sense id.
/// Matched usages are ignored.
pub fn collect_novel_usages(
    preds: &[SensePrediction],
    dataset: &[TargetWord],
) -> Result<BTreeMap<String, NovelSenseUsages>> {
    let by_lemma: HashMap<&str, &TargetWord> = dataset.iter().map(|t| (t.lemma.as_str(), t)).collect();
    let mut groups: BTreeMap<String, (String, BTreeSet<String>)> = BTreeMap::new();
    for p in preds.iter().filter(|p| p.is_novel) {
        let target = by_lemma
            .get(p.lemma.as_str())
            .ok_or_else(|| Error::Invalid(format!("prediction for unknown lemma `{}`", p.lemma)))?;
        let usage = target.usage(&p.usage_id).ok_or_else(|| {
            Error::Invalid(format!("prediction references unknown usage `{}`", p.usage_id))
        })?;
        if usage.period != Period::New {
            continue;
        }
        let entry = groups
            .entry(p.predicted_sense_id.clone())
            .or_insert_with(|| (p.lemma.clone(), BTreeSet::new()));
        if entry.0 != p.lemma {
            return Err(Error::Invalid(format!(
                "novel sense `{}` predicted for both `{}` and `{}`",
                p.predicted_sense_id, entry.0, p.lemma
            )));
        }
        entry.1.insert(p.usage_id.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(id, (lemma, ids))| {
            let target = by_lemma[lemma.as_str()];
            let usage_ids: Vec<String> = ids.into_iter().collect();
            let texts = usage_ids
                .iter()
                .map(|u| target.usage(u).expect("checked above").text.clone())
                .collect();
            let group = NovelSenseUsages {
                novel_sense_id: id.clone(),
                lemma,
                usage_ids,
                texts,
            };
            (id, group)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub model: String,
    pub temperature: f64,
    pub endpoint: String,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    #[serde(with = "duration_secs")]
    pub initial_backoff: Duration,
    #[serde(with = "duration_secs")]
    pub max_backoff: Duration,
    pub max_tokens: u32,
    pub in_flight: usize,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            timeout: Duration::from_secs(60),
            max_retries: 4,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
            max_tokens: 64,
            in_flight: DEFAULT_IN_FLIGHT,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }
}

impl GenerationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Invalid(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.in_flight == 0 {
            return Err(Error::Invalid("in-flight cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based): doubles from
    /// `initial_backoff`, capped at `max_backoff`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(30)).unwrap_or(u32::MAX);
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub novel_sense_id: String,
    pub lemma: String,
    /// Selects the prompt template.
    pub language: String,
    pub usages: Vec<String>,
    /// Graph neighbors of the sense cluster, most similar first; only the
    /// stub backend looks at them.
    #[serde(default)]
    pub neighbor_words: Vec<String>,
}

impl GenerationRequest {
    pub fn from_group(group: &NovelSenseUsages, language: &str) -> Self {
        GenerationRequest {
            novel_sense_id: group.novel_sense_id.clone(),
            lemma: group.lemma.clone(),
            language: language.to_string(),
            usages: group.texts.clone(),
            neighbor_words: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDefinition {
    pub novel_sense_id: String,
    pub lemma: String,
    pub text: String,
    pub raw_text: String,
    pub model: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx.
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("empty model response")]
    Empty,
    #[error("{0}")]
    Fatal(String),
}

pub trait Backend: Sync {
    fn model(&self) -> &str;
    fn complete(&self, req: &GenerationRequest, prompt: &str) -> std::result::Result<String, BackendError>;
}

/// Deterministic offline answer: the top three graph neighbors when known,
/// otherwise the three most frequent non-target tokens of the usages
/// (ties in lexicographic order).
pub fn stub_generate<S: AsRef<str>>(lemma: &str, usages: &[S], neighbor_words: &[String]) -> String {
    let words: Vec<String> = if !neighbor_words.is_empty() {
        neighbor_words.iter().take(3).cloned().collect()
    } else {
        let target = lemma.to_lowercase();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for u in usages {
            for t in tokenize(u.as_ref()) {
                if t != target {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.into_iter().take(3).map(|(w, _)| w).collect()
    };
    if words.is_empty() {
        format!("sense of {lemma}.")
    } else {
        format!("sense of {lemma} near: {}.", words.join(", "))
    }
}

#[derive(Debug, Clone, Default)]
pub struct StubBackend;

impl Backend for StubBackend {
    fn model(&self) -> &str {
        "stub"
    }

    fn complete(&self, req: &GenerationRequest, _prompt: &str) -> std::result::Result<String, BackendError> {
        Ok(stub_generate(&req.lemma, &req.usages, &req.neighbor_words))
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    temperature: f64,
    max_tokens: u32,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: Option<ChatChoiceMessage>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

impl HttpBackend {
    /// The API key is read from the environment variable named in
    /// `settings.api_key_env`; a missing variable sends no credentials.
    pub fn from_env(settings: &GenerationSettings) -> Result<Self> {
        let api_key = std::env::var(&settings.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending requests without credentials", settings.api_key_env);
        }
        Self::new(settings, api_key)
    }

    pub fn new(settings: &GenerationSettings, api_key: Option<String>) -> Result<Self> {
        settings.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| Error::Runtime(format!("http client: {e}")))?;
        Ok(HttpBackend {
            client,
            endpoint: settings.endpoint.clone(),
            model: settings.model.clone(),
            temperature: settings.temperature,
            max_tokens: settings.max_tokens,
            api_key,
        })
    }
}

impl Backend for HttpBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, _req: &GenerationRequest, prompt: &str) -> std::result::Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let detail = format!("HTTP {status}: {}", resp.text().unwrap_or_default().trim());
            return Err(match status.as_u16() {
                401 | 403 => BackendError::Auth(detail),
                408 | 409 | 425 | 429 | 500..=599 => BackendError::Transient(detail),
                _ => BackendError::Fatal(detail),
            });
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| BackendError::Fatal(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message)
            .and_then(|m| m.content)
            .filter(|c| !c.trim().is_empty())
            .ok_or(BackendError::Empty)
    }
}

/// Render, call the backend with retries on transient failures, truncate.
pub fn generate(
    req: &GenerationRequest,
    tmpl: &PromptTemplate,
    backend: &dyn Backend,
    settings: &GenerationSettings,
) -> Result<GeneratedDefinition> {
    let prompt = render_prompt(tmpl, &req.lemma, &req.usages)?;
    let started = Instant::now();
    let mut attempt = 0u32;
    loop {
        let fail = |source| Error::Generation {
            novel_sense_id: req.novel_sense_id.clone(),
            attempts: attempt + 1,
            source,
        };
        match backend.complete(req, &prompt) {
            Ok(raw) => {
                let text = truncate_definition(&raw, tmpl.max_words);
                if !text.chars().any(char::is_alphanumeric) {
                    return Err(fail(BackendError::Empty));
                }
                return Ok(GeneratedDefinition {
                    novel_sense_id: req.novel_sense_id.clone(),
                    lemma: req.lemma.clone(),
                    text,
                    raw_text: raw,
                    model: backend.model().to_string(),
                    latency_ms: started.elapsed().as_millis() as u64,
                });
            }
            Err(BackendError::Transient(msg)) if attempt < settings.max_retries => {
                let delay = settings.backoff(attempt);
                log::warn!(
                    "{}: {msg}; retry {} of {} in {delay:?}",
                    req.novel_sense_id,
                    attempt + 1,
                    settings.max_retries
                );
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(e) => return Err(fail(e)),
        }
    }
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    /// Sorted by novel sense id.
    pub generated: Vec<GeneratedDefinition>,
    pub failures: Vec<(String, Error)>,
}

/// Run requests with at most `settings.in_flight` concurrent calls. Every
/// request ends up either generated or in `failures`.
pub fn run_batch(
    requests: &[GenerationRequest],
    templates: &Templates,
    backend: &dyn Backend,
    settings: &GenerationSettings,
) -> Result<BatchOutcome> {
    settings.validate()?;
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(requests.len()));
    let workers = settings.in_flight.min(requests.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(i) else { break };
                let r = templates
                    .for_language(&req.language)
                    .and_then(|tmpl| generate(req, tmpl, backend, settings));
                results.lock().unwrap_or_else(|p| p.into_inner()).push((req.novel_sense_id.clone(), r));
            });
        }
    });
    let mut outcome = BatchOutcome::default();
    for (id, r) in results.into_inner().unwrap_or_else(|p| p.into_inner()) {
        match r {
            Ok(d) => outcome.generated.push(d),
            Err(e) => outcome.failures.push((id, e)),
        }
    }
    outcome.generated.sort_by(|a, b| a.novel_sense_id.cmp(&b.novel_sense_id));
    outcome.failures.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(outcome)
}

/// One line of the definitions JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionRecord {
    pub novel_sense_id: String,
    pub lemma: String,
    pub definition: String,
    pub model: String,
    /// Untruncated model answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_definition: Option<String>,
}

impl From<&GeneratedDefinition> for DefinitionRecord {
    fn from(d: &GeneratedDefinition) -> Self {
        DefinitionRecord {
            novel_sense_id: d.novel_sense_id.clone(),
            lemma: d.lemma.clone(),
            definition: d.text.clone(),
            model: d.model.clone(),
            raw_definition: Some(d.raw_text.clone()),
        }
    }
}

pub fn load_definitions(path: &Path) -> Result<Vec<DefinitionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DefinitionRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i as u64 + 1, e.to_string()))?;
        if !seen.insert(rec.novel_sense_id.clone()) {
            return Err(Error::parse(
                path,
                i as u64 + 1,
                format!("duplicate novel_sense_id `{}`", rec.novel_sense_id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn definitions_to_jsonl(records: &[DefinitionRecord]) -> String {
    let mut sorted: Vec<&DefinitionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.novel_sense_id.cmp(&b.novel_sense_id));
    let mut out = String::new();
    for r in sorted {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Default)]
pub struct ResumeOutcome {
    pub reused: Vec<String>,
    pub batch: BatchOutcome,
}

/// Generate definitions into `path`, reusing records already present for
/// the requested ids. Records for ids no longer requested are dropped.
/// Successful definitions are written even when some requests fail, so a
/// rerun only retries the failures.
pub fn generate_to_file(
    path: &Path,
    requests: &[GenerationRequest],
    templates: &Templates,
    backend: &dyn Backend,
    settings: &GenerationSettings,
) -> Result<ResumeOutcome> {
    let wanted: BTreeSet<&str> = requests.iter().map(|r| r.novel_sense_id.as_str()).collect();
    let existing = if path.exists() { load_definitions(path)? } else { Vec::new() };
    let mut kept = Vec::new();
    for rec in existing {
        if wanted.contains(rec.novel_sense_id.as_str()) {
            kept.push(rec);
        } else {
            log::warn!("dropping definition for `{}`: no longer predicted", rec.novel_sense_id);
        }
    }
    let done: BTreeSet<String> = kept.iter().map(|r| r.novel_sense_id.clone()).collect();
    let todo: Vec<GenerationRequest> = requests
        .iter()
        .filter(|r| !done.contains(&r.novel_sense_id))
        .cloned()
        .collect();
    let batch = run_batch(&todo, templates, backend, settings)?;
    kept.extend(batch.generated.iter().map(DefinitionRecord::from));
    crate::corpus::write_atomic(path, definitions_to_jsonl(&kept).as_bytes())?;
    Ok(ResumeOutcome {
        reused: done.into_iter().collect(),
        batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Span, UsageRecord};
    use proptest::prelude::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn en() -> PromptTemplate {
        PromptTemplate::builtin("en").unwrap()
    }

    fn fast() -> GenerationSettings {
        GenerationSettings {
            initial_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(4),
            max_retries: 3,
            timeout: Duration::from_secs(5),
            ..Default::default()
        }
    }

    #[test]
    fn builtin_templates_validate() {
        for lang in ["en", "fi", "ru", "de", "FIN", "German"] {
            let t = PromptTemplate::builtin(lang).unwrap();
            assert_eq!(t.max_words, 10);
        }
        assert!(PromptTemplate::builtin("sv").is_err());
    }

    #[test]
    fn template_selection_by_language() {
        let t = Templates::builtin_for(["fi", "und"]).unwrap();
        assert_eq!(t.for_language("fi").unwrap().language, "fi");
        assert_eq!(t.for_language("und").unwrap().language, "en");
        assert!(Templates::default().for_language("fi").is_err());
    }

    #[test]
    fn template_placeholders_checked() {
        assert!(PromptTemplate::new("en", "English", "{target_word} {lang}", 10).is_err());
        assert!(PromptTemplate::new("en", "English", "{target_word} {lang} {quotations} {lang}", 10).is_err());
        assert!(PromptTemplate::new("en", "English", "{target_word} {lang} {quotations}", 0).is_err());
        assert!(PromptTemplate::new("en", "English", "{target_word} {lang} {quotations}", 3).is_ok());
    }

    #[test]
    fn prompt_numbering() {
        let p = render_prompt(&en(), "kupari", &["one"]).unwrap();
        assert!(p.contains("1. one") && !p.contains("2. "));
        assert!(p.contains("kupari in English"));
        let p = render_prompt(&en(), "kupari", &["b first", "a second"]).unwrap();
        assert!(p.contains("1. b first\n2. a second"));
        assert_eq!(p, render_prompt(&en(), "kupari", &["b first", "a second"]).unwrap());
        assert!(render_prompt::<&str>(&en(), "kupari", &[]).is_err());
    }

    #[test]
    fn prompt_does_not_expand_inside_values() {
        let t = PromptTemplate::new("en", "English", "{target_word}|{lang}|{quotations}|{other}", 10).unwrap();
        let p = render_prompt(&t, "{lang}", &["say {quotations}\nnow"]).unwrap();
        assert_eq!(p, "{lang}|English|1. say {quotations} now|{other}");
    }

    #[test]
    fn truncation_rules() {
        assert_eq!(truncate_definition("A metal coin. Extra trailing text.", 10), "A metal coin.");
        let fourteen = "one two three four five six seven eight nine ten eleven twelve thirteen fourteen";
        assert_eq!(
            truncate_definition(fourteen, 10),
            "one two three four five six seven eight nine ten"
        );
        assert_eq!(truncate_definition("  Rahayksikkö!  Toinen.", 10), "Rahayksikkö!");
        assert_eq!(truncate_definition("Что-то вроде… нет", 10), "Что-то вроде…");
        assert_eq!(truncate_definition("", 10), "");
    }

    fn dataset() -> Vec<TargetWord> {
        let usage = |id: &str, text: &str, period| UsageRecord {
            usage_id: id.into(),
            text: text.into(),
            period,
            target_span: Some(Span { start: 0, end: 1 }),
            gold_sense_id: None,
        };
        vec![TargetWord {
            lemma: "w".into(),
            language: "en".into(),
            sense_inventory: vec![],
            unrecorded_glosses: vec![],
            usages: vec![
                usage("a", "w old", Period::Old),
                usage("b", "w b text", Period::New),
                usage("c", "w c text", Period::New),
                usage("d", "w d text", Period::New),
                usage("e", "w e text", Period::New),
            ],
        }]
    }

    fn pred(u: &str, sense: &str, novel: bool) -> SensePrediction {
        SensePrediction {
            usage_id: u.into(),
            lemma: "w".into(),
            predicted_sense_id: sense.into(),
            is_novel: novel,
            similarity: 0.1,
        }
    }

    #[test]
    fn novel_usage_grouping() {
        let mut preds = vec![
            pred("d", "w_novel_1", true),
            pred("b", "w_novel_1", true),
            pred("e", "w_novel_2", true),
            pred("c", "w_novel_1", true),
            pred("a", "g1", false),
        ];
        let m = collect_novel_usages(&preds, &dataset()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m["w_novel_1"].usage_ids, ["b", "c", "d"]);
        assert_eq!(m["w_novel_2"].texts, ["w e text"]);
        preds.reverse();
        assert_eq!(collect_novel_usages(&preds, &dataset()).unwrap(), m);
        assert!(collect_novel_usages(&[pred("a", "g1", false)], &dataset()).unwrap().is_empty());
        assert!(collect_novel_usages(&[pred("zz", "w_novel_1", true)], &dataset()).is_err());
    }

    #[test]
    fn stub_outputs() {
        let s = stub_generate("w", &["x y y z", "W"], &[]);
        assert_eq!(s, "sense of w near: y, x, z.");
        let n: Vec<String> = ["coin", "metal", "copper", "tin"].map(String::from).to_vec();
        assert_eq!(stub_generate("w", &["x"], &n), "sense of w near: coin, metal, copper.");
        assert_eq!(stub_generate::<&str>("w", &[], &[]), "sense of w.");
    }

    struct Scripted {
        answers: Mutex<Vec<std::result::Result<String, BackendError>>>,
        calls: AtomicUsize,
    }

    impl Backend for Scripted {
        fn model(&self) -> &str {
            "scripted"
        }
        fn complete(&self, _: &GenerationRequest, _: &str) -> std::result::Result<String, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.answers.lock().unwrap().remove(0)
        }
    }

    fn request(id: &str) -> GenerationRequest {
        GenerationRequest {
            novel_sense_id: id.into(),
            lemma: "w".into(),
            language: "en".into(),
            usages: vec!["w here".into()],
            neighbor_words: vec![],
        }
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let b = Scripted {
            answers: Mutex::new(vec![
                Err(BackendError::Transient("503".into())),
                Err(BackendError::Transient("503".into())),
                Ok("A coin. More".into()),
            ]),
            calls: AtomicUsize::new(0),
        };
        let d = generate(&request("n1"), &en(), &b, &fast()).unwrap();
        assert_eq!(d.text, "A coin.");
        assert_eq!(d.raw_text, "A coin. More");
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_and_exhaustion_are_terminal() {
        let b = Scripted {
            answers: Mutex::new(vec![Err(BackendError::Auth("401".into()))]),
            calls: AtomicUsize::new(0),
        };
        let e = generate(&request("n1"), &en(), &b, &fast()).unwrap_err();
        assert!(matches!(e, Error::Generation { attempts: 1, source: BackendError::Auth(_), .. }));
        let b = Scripted {
            answers: Mutex::new((0..4).map(|_| Err(BackendError::Transient("t".into()))).collect()),
            calls: AtomicUsize::new(0),
        };
        let e = generate(&request("n9"), &en(), &b, &fast()).unwrap_err();
        assert!(e.to_string().contains("n9"));
        assert!(matches!(e, Error::Generation { attempts: 4, .. }));
        let b = Scripted {
            answers: Mutex::new(vec![Ok(" ... ".into())]),
            calls: AtomicUsize::new(0),
        };
        let e = generate(&request("n1"), &en(), &b, &fast()).unwrap_err();
        assert!(matches!(e, Error::Generation { source: BackendError::Empty, .. }));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let s = GenerationSettings {
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_millis(350),
            ..Default::default()
        };
        assert_eq!(s.backoff(0), Duration::from_millis(100));
        assert_eq!(s.backoff(1), Duration::from_millis(200));
        assert_eq!(s.backoff(2), Duration::from_millis(350));
        assert_eq!(s.backoff(40), Duration::from_millis(350));
    }

    #[test]
    fn resume_regenerates_only_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("defs.jsonl");
        let reqs: Vec<_> = ["n2", "n1", "n3"].iter().map(|i| request(i)).collect();
        let first = generate_to_file(&path, &reqs, &Templates::single(en()), &StubBackend, &fast()).unwrap();
        assert_eq!(first.batch.generated.len(), 3);
        let content = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert!(lines[0].contains("\"n1\"") && lines[2].contains("\"n3\""));
        let pruned = format!("{}\n{}\n", lines[0], lines[2]);
        std::fs::write(&path, pruned).unwrap();
        let second = generate_to_file(&path, &reqs, &Templates::single(en()), &StubBackend, &fast()).unwrap();
        assert_eq!(second.reused, ["n1", "n3"]);
        assert_eq!(second.batch.generated.len(), 1);
        assert_eq!(second.batch.generated[0].novel_sense_id, "n2");
        assert_eq!(std::fs::read_to_string(&path).unwrap(), content);
    }

    /// Serve canned HTTP responses, one per connection, recording bodies.
    fn fake_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<(String, String)>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let body_start = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(i) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        break i + 4;
                    }
                };
                let head = String::from_utf8_lossy(&buf[..body_start]).to_lowercase();
                let len: usize = head
                    .lines()
                    .find_map(|l| l.strip_prefix("content-length:"))
                    .map(|v| v.trim().parse().unwrap())
                    .unwrap_or(0);
                while buf.len() < body_start + len {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                }
                bodies.push((head, String::from_utf8_lossy(&buf[body_start..body_start + len]).into_owned()));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn chat_ok(text: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    #[test]
    fn http_backend_retries_and_truncates() {
        let (url, server) = fake_server(vec![
            (503, "{}".into()),
            (429, "{}".into()),
            (200, chat_ok("Kolikko, joka on tehty kuparista. Lisää tekstiä")),
        ]);
        let settings = GenerationSettings {
            endpoint: url,
            model: "test-model".into(),
            ..fast()
        };
        let backend = HttpBackend::new(&settings, Some("secret".into())).unwrap();
        let d = generate(&request("w_novel_1"), &PromptTemplate::builtin("fi").unwrap(), &backend, &settings).unwrap();
        assert_eq!(d.text, "Kolikko, joka on tehty kuparista.");
        assert_eq!(d.model, "test-model");
        let bodies = server.join().unwrap();
        assert_eq!(bodies.len(), 3);
        assert!(bodies[2].0.contains("authorization: bearer secret"));
        let json: serde_json::Value = serde_json::from_str(&bodies[2].1).unwrap();
        assert_eq!(json["model"], "test-model");
        assert_eq!(json["temperature"], 0.0);
        assert_eq!(json["messages"][0]["role"], "user");
        assert!(json["messages"][0]["content"].as_str().unwrap().contains("1. w here"));
    }

    #[test]
    fn http_backend_auth_failure_is_terminal() {
        let (url, server) = fake_server(vec![(401, "{\"error\":\"bad key\"}".into())]);
        let settings = GenerationSettings { endpoint: url, ..fast() };
        let backend = HttpBackend::new(&settings, None).unwrap();
        let e = generate(&request("n1"), &en(), &backend, &settings).unwrap_err();
        assert!(matches!(e, Error::Generation { source: BackendError::Auth(_), attempts: 1, .. }), "{e}");
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn http_backend_empty_choice() {
        let (url, server) = fake_server(vec![(200, "{\"choices\":[]}".into())]);
        let settings = GenerationSettings { endpoint: url, ..fast() };
        let backend = HttpBackend::new(&settings, None).unwrap();
        let e = generate(&request("n1"), &en(), &backend, &settings).unwrap_err();
        assert!(matches!(e, Error::Generation { source: BackendError::Empty, .. }));
        server.join().unwrap();
    }

    proptest! {
        #[test]
        fn truncation_invariants(raw in "[a-zA-Z .!?,\\n]{0,120}", max in 1usize..15) {
            let t = truncate_definition(&raw, max);
            prop_assert!(t.split_whitespace().count() <= max);
            let body = t.trim_end_matches(SENTENCE_TERMINATORS);
            prop_assert!(!body.contains(SENTENCE_TERMINATORS), "{t:?}");
            prop_assert!(t.chars().filter(|c| SENTENCE_TERMINATORS.contains(c)).count() <= 1);
        }
    }
}
