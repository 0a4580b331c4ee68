//! Response collection and the line-delimited instance store.
//!
//! An instance file is UTF-8 JSON lines: a schema header line followed by
//! one [`StoryInstance`] per line.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::prompt_corpus::{CharacterSlot, Domain, PowerCondition, PromptIndex, PromptSpec};

pub const SCHEMA_NAME: &str = "bias-audit/instances";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: missing or unsupported schema header: {found}")]
    Header { path: PathBuf, found: String },
    #[error("{path}: line {line}: field `{field}`: {message}")]
    Malformed { path: PathBuf, line: usize, field: String, message: String },
    #[error("{path}: line {line}: query is not a known prompt")]
    UnknownQuery { path: PathBuf, line: usize },
    #[error("serialization failed: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct SchemaHeader {
    schema: String,
    version: u32,
}

fn header_line() -> String {
    format!("{{\"schema\":\"{SCHEMA_NAME}\",\"version\":{SCHEMA_VERSION}}}")
}

mod timestamp {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::AutoSi, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw).map(|t| t.with_timezone(&Utc)).map_err(serde::de::Error::custom)
    }
}

/// One generated story plus its (optional) labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryInstance {
    pub model_id: String,
    pub prompt_id: String,
    pub sample_index: u32,
    #[serde(with = "timestamp")]
    pub timestamp: DateTime<Utc>,
    pub domain: Domain,
    pub power_condition: PowerCondition,
    pub subject_desc: String,
    #[serde(default)]
    pub object_desc: Option<String>,
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_response: Option<String>,
    #[serde(default)]
    pub subject_references: Vec<String>,
    #[serde(default)]
    pub object_references: Vec<String>,
    #[serde(default)]
    pub subject_name: Option<String>,
    #[serde(default)]
    pub object_name: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

pub const FLAG_AMBIGUOUS: &str = "ambiguous";
pub const FLAG_RELABEL: &str = "relabel";

/// Dedup key: model, prompt and sample ordinal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct InstanceKey {
    pub model_id: String,
    pub prompt_id: String,
    pub sample_index: u32,
}

impl StoryInstance {
    pub fn new(
        model_id: &str,
        spec: &PromptSpec,
        sample_index: u32,
        response: String,
        timestamp: DateTime<Utc>,
    ) -> Self {
        Self {
            model_id: model_id.to_string(),
            prompt_id: spec.id.clone(),
            sample_index,
            timestamp,
            domain: spec.domain,
            power_condition: spec.condition,
            subject_desc: spec.subject_desc.clone(),
            object_desc: spec.object_desc.clone(),
            query: spec.text.clone(),
            response,
            label_query: None,
            label_response: None,
            subject_references: Vec::new(),
            object_references: Vec::new(),
            subject_name: None,
            object_name: None,
            flags: Vec::new(),
        }
    }

    pub fn key(&self) -> InstanceKey {
        InstanceKey {
            model_id: self.model_id.clone(),
            prompt_id: self.prompt_id.clone(),
            sample_index: self.sample_index,
        }
    }

    pub fn character_count(&self) -> usize {
        if self.object_desc.is_some() {
            2
        } else {
            1
        }
    }

    pub fn name(&self, slot: CharacterSlot) -> Option<&str> {
        match slot {
            CharacterSlot::First => self.subject_name.as_deref(),
            CharacterSlot::Second => self.object_name.as_deref(),
        }
    }

    pub fn references(&self, slot: CharacterSlot) -> &[String] {
        match slot {
            CharacterSlot::First => &self.subject_references,
            CharacterSlot::Second => &self.object_references,
        }
    }

    pub fn set_character(&mut self, slot: CharacterSlot, name: Option<String>, references: Vec<String>) {
        match slot {
            CharacterSlot::First => {
                self.subject_name = name;
                self.subject_references = references;
            }
            CharacterSlot::Second => {
                self.object_name = name;
                self.object_references = references;
            }
        }
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    pub fn add_flag(&mut self, flag: &str) {
        if !self.has_flag(flag) {
            self.flags.push(flag.to_string());
        }
    }

    /// Checks that the query is a corpus prompt consistent with `prompt_id`.
    pub fn matches_corpus(&self, index: &PromptIndex) -> bool {
        index.by_id(&self.prompt_id).is_some_and(|s| s.text == self.query)
    }
}

/// Single-writer sink for instance files.
pub struct InstanceWriter<W: Write> {
    out: W,
    written: u64,
}

impl InstanceWriter<BufWriter<File>> {
    /// Creates (truncating) a file and writes the schema header.
    pub fn create(path: &Path) -> Result<Self, StoreError> {
        let f = File::create(path).map_err(|source| StoreError::Io { path: path.into(), source })?;
        let mut w = Self { out: BufWriter::new(f), written: 0 };
        writeln!(w.out, "{}", header_line()).map_err(|source| StoreError::Io { path: path.into(), source })?;
        Ok(w)
    }

    /// Opens a file for appending, writing the header only if it is empty.
    pub fn append(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io { path: path.into(), source };
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        let empty = f.metadata().map_err(io)?.len() == 0;
        let mut w = Self { out: BufWriter::new(f), written: 0 };
        if empty {
            writeln!(w.out, "{}", header_line()).map_err(io)?;
        }
        Ok(w)
    }
}

impl<W: Write> InstanceWriter<W> {
    pub fn from_writer(mut out: W) -> Result<Self, StoreError> {
        writeln!(out, "{}", header_line()).map_err(|source| StoreError::Io { path: PathBuf::new(), source })?;
        Ok(Self { out, written: 0 })
    }

    pub fn write(&mut self, instance: &StoryInstance) -> Result<(), StoreError> {
        serde_json::to_writer(&mut self.out, instance)?;
        self.out.write_all(b"\n").map_err(|source| StoreError::Io { path: PathBuf::new(), source })?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn flush(&mut self) -> Result<(), StoreError> {
        self.out.flush().map_err(|source| StoreError::Io { path: PathBuf::new(), source })
    }

    pub fn into_inner(mut self) -> Result<W, StoreError> {
        self.flush()?;
        Ok(self.out)
    }
}

/// Streaming reader. In lenient mode iteration ends quietly at the first
/// fault, which is kept in [`InstanceReader::fault`]; otherwise the fault is
/// yielded as an error and iteration ends.
pub struct InstanceReader<R: BufRead> {
    path: PathBuf,
    lines: std::io::Lines<R>,
    line: usize,
    lenient: bool,
    done: bool,
    fault: Option<StoreError>,
}

impl InstanceReader<BufReader<File>> {
    pub fn open(path: &Path, lenient: bool) -> Result<Self, StoreError> {
        let f = File::open(path).map_err(|source| StoreError::Io { path: path.into(), source })?;
        Self::new(BufReader::new(f), path, lenient)
    }
}

impl<R: BufRead> InstanceReader<R> {
    pub fn new(reader: R, path: &Path, lenient: bool) -> Result<Self, StoreError> {
        let mut lines = reader.lines();
        let first = match lines.next() {
            Some(Ok(l)) => l,
            Some(Err(source)) => return Err(StoreError::Io { path: path.into(), source }),
            None => String::new(),
        };
        let ok = serde_json::from_str::<SchemaHeader>(first.trim_start_matches('\u{feff}'))
            .is_ok_and(|h| h.schema == SCHEMA_NAME && h.version == SCHEMA_VERSION);
        if !ok {
            return Err(StoreError::Header { path: path.into(), found: first.chars().take(80).collect() });
        }
        Ok(Self { path: path.into(), lines, line: 1, lenient, done: false, fault: None })
    }

    /// The fault that ended lenient iteration, if any.
    pub fn fault(&self) -> Option<&StoreError> {
        self.fault.as_ref()
    }

    pub fn lines_read(&self) -> usize {
        self.line
    }

    fn parse(&self, text: &str) -> Result<StoryInstance, StoreError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().to_string();
            let field = if path == "." { message.split('`').nth(1).unwrap_or("<record>").to_string() } else { path };
            StoreError::Malformed { path: self.path.clone(), line: self.line, field, message }
        })
    }
}

impl<R: BufRead> Iterator for InstanceReader<R> {
    type Item = Result<StoryInstance, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(source) => {
                    self.line += 1;
                    return self.fail(StoreError::Io { path: self.path.clone(), source });
                }
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return match self.parse(&text) {
                Ok(i) => Some(Ok(i)),
                Err(e) => self.fail(e),
            };
        }
    }
}

impl<R: BufRead> InstanceReader<R> {
    fn fail(&mut self, e: StoreError) -> Option<Result<StoryInstance, StoreError>> {
        self.done = true;
        if self.lenient {
            log::warn!("stopping at fault: {e}");
            self.fault = Some(e);
            None
        } else {
            Some(Err(e))
        }
    }
}

pub fn write_instances(instances: &[StoryInstance], path: &Path) -> Result<(), StoreError> {
    let mut w = InstanceWriter::create(path)?;
    for i in instances {
        w.write(i)?;
    }
    w.flush()
}

pub fn read_instances(path: &Path) -> Result<Vec<StoryInstance>, StoreError> {
    InstanceReader::open(path, false)?.collect()
}

/// Reads up to the first fault; returns the records and the fault.
pub fn read_instances_lenient(path: &Path) -> Result<(Vec<StoryInstance>, Option<StoreError>), StoreError> {
    let mut r = InstanceReader::open(path, true)?;
    let records: Vec<StoryInstance> = r.by_ref().collect::<Result<_, _>>()?;
    Ok((records, r.fault.take()))
}

/// Rejects instances whose query is not in the corpus.
pub fn validate_against_corpus(
    instances: &[StoryInstance],
    index: &PromptIndex,
    path: &Path,
) -> Result<(), StoreError> {
    match instances.iter().position(|i| !i.matches_corpus(index)) {
        Some(pos) => Err(StoreError::UnknownQuery { path: path.into(), line: pos + 2 }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("permanent: {0}")]
    Permanent(String),
}

impl ClientError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ClientError::Transient(_))
    }
}

/// Prompt text to story text.
pub trait TextClient: Send + Sync {
    fn generate(&self, model_id: &str, prompt: &PromptSpec, seed: u64) -> Result<String, ClientError>;
}

#[derive(Debug, Deserialize)]
struct ReplayRecord {
    prompt_id: String,
    response: String,
}

/// Serves recorded responses in file order per prompt id.
pub struct ReplayClient {
    queues: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayClient {
    pub fn from_records(records: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut queues: HashMap<String, VecDeque<String>> = HashMap::new();
        for (id, resp) in records {
            queues.entry(id).or_default().push_back(resp);
        }
        Self { queues: Mutex::new(queues) }
    }

    /// Loads a replay file: either an instance file or JSON lines of
    /// `{"prompt_id": .., "response": ..}`.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io { path: path.into(), source };
        let lines = BufReader::new(File::open(path).map_err(io)?).lines();
        let mut records = Vec::new();
        let mut line_no = 0;
        for line in lines {
            let line = line.map_err(io)?;
            line_no += 1;
            if line.trim().is_empty() || (line_no == 1 && serde_json::from_str::<SchemaHeader>(&line).is_ok()) {
                continue;
            }
            let de = &mut serde_json::Deserializer::from_str(&line);
            let rec: ReplayRecord = serde_path_to_error::deserialize(de).map_err(|e| StoreError::Malformed {
                path: path.into(),
                line: line_no,
                field: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
            records.push((rec.prompt_id, rec.response));
        }
        Ok(Self::from_records(records))
    }

    pub fn next_for(&self, prompt_id: &str) -> Result<String, ClientError> {
        let mut q = self.queues.lock().expect("replay queue poisoned");
        match q.get_mut(prompt_id) {
            None => Err(ClientError::Permanent(format!("unknown prompt id {prompt_id}"))),
            Some(queue) => queue
                .pop_front()
                .ok_or_else(|| ClientError::Permanent(format!("replay supply exhausted for {prompt_id}"))),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queues.lock().expect("replay queue poisoned").values().map(VecDeque::len).sum()
    }
}

impl TextClient for ReplayClient {
    fn generate(&self, _model_id: &str, prompt: &PromptSpec, _seed: u64) -> Result<String, ClientError> {
        self.next_for(&prompt.id)
    }
}

/// Generic HTTP text-completion endpoint: POSTs `{"model","prompt","seed"}`
/// and reads the story from the JSON pointer `response_pointer`.
pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    response_pointer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_pointer")]
    pub response_pointer: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_pointer() -> String {
    "/text".into()
}

fn default_timeout() -> u64 {
    60
}

impl EndpointConfig {
    pub fn new(url: &str) -> Self {
        Self {
            url: url.into(),
            api_key_env: None,
            response_pointer: default_pointer(),
            timeout_secs: default_timeout(),
        }
    }
}

impl HttpClient {
    pub fn new(config: &EndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = config.api_key_env.as_deref().and_then(|v| {
            let key = std::env::var(v).ok();
            if key.is_none() {
                log::warn!("environment variable {v} is not set; sending requests without credentials");
            }
            key
        });
        Self { agent, endpoint: config.url.clone(), api_key, response_pointer: config.response_pointer.clone() }
    }

    /// POSTs a JSON body and returns the string at the response pointer.
    pub fn post_json(&self, body: &serde_json::Value) -> Result<String, ClientError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ClientError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(ClientError::Transient(format!("http status {status}")));
        }
        if status >= 400 {
            return Err(ClientError::Permanent(format!("http status {status}")));
        }
        let value: serde_json::Value =
            resp.body_mut().read_json().map_err(|e| ClientError::Permanent(format!("bad response body: {e}")))?;
        value
            .pointer(&self.response_pointer)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| ClientError::Permanent(format!("no string at {}", self.response_pointer)))
    }
}

impl TextClient for HttpClient {
    fn generate(&self, model_id: &str, prompt: &PromptSpec, seed: u64) -> Result<String, ClientError> {
        self.post_json(&serde_json::json!({ "model": model_id, "prompt": prompt.text, "seed": seed }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionPlan {
    pub models: Vec<String>,
    #[serde(default = "default_samples")]
    pub samples_per_prompt: u32,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_retries")]
    pub retry_budget: u32,
    #[serde(default)]
    pub seed: u64,
    /// Base delay before the first retry; doubles per attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_samples() -> u32 {
    1000
}
fn default_parallel() -> usize {
    8
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    200
}

impl CollectionPlan {
    pub fn new(models: Vec<String>, samples_per_prompt: u32) -> Self {
        Self {
            models,
            samples_per_prompt,
            max_parallel: default_parallel(),
            retry_budget: default_retries(),
            seed: 0,
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.models.is_empty() {
            return Err("plan lists no models".into());
        }
        if self.samples_per_prompt == 0 {
            return Err("samples_per_prompt must be at least 1".into());
        }
        if self.max_parallel == 0 {
            return Err("max_parallel must be at least 1".into());
        }
        Ok(())
    }

    pub fn expected_count(&self, prompts: usize) -> u64 {
        u64::from(self.samples_per_prompt) * prompts as u64 * self.models.len() as u64
    }

    fn sample_seed(&self, model: usize, prompt: usize, sample: u32) -> u64 {
        let mut x = self.seed ^ ((model as u64) << 48) ^ ((prompt as u64) << 32) ^ u64::from(sample);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PromptTally {
    pub success: u64,
    pub failed: u64,
    pub skipped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CollectionReport {
    pub expected: u64,
    pub success: u64,
    pub failed: u64,
    pub skipped_existing: u64,
    pub retries: u64,
    pub wall_time_secs: f64,
    /// Keyed by `model_id/prompt_id`.
    pub per_prompt: BTreeMap<String, PromptTally>,
    /// Prompts left short after retries were exhausted.
    pub short_prompts: Vec<String>,
    pub errors: Vec<String>,
}

impl CollectionReport {
    pub fn is_complete(&self) -> bool {
        self.failed == 0 && self.success + self.skipped_existing == self.expected
    }
}

const MAX_REPORTED_ERRORS: usize = 50;

/// Keys already present in an instance file (for resume).
pub fn existing_keys(path: &Path) -> Result<HashSet<InstanceKey>, StoreError> {
    if !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true) {
        return Ok(HashSet::new());
    }
    let mut keys = HashSet::new();
    let mut r = InstanceReader::open(path, true)?;
    for inst in r.by_ref() {
        keys.insert(inst?.key());
    }
    if let Some(f) = r.fault() {
        log::warn!("resume scan stopped early: {f}");
    }
    Ok(keys)
}

/// Runs the plan against `client`, writing each new instance to `sink`.
/// (model, prompt) pairs run concurrently up to `max_parallel`; samples of a
/// pair run in order, so replay clients keep their per-prompt order. Keys
/// in `existing` are skipped.
pub fn collect<C, W>(
    client: &C,
    plan: &CollectionPlan,
    prompts: &[PromptSpec],
    sink: &mut InstanceWriter<W>,
    existing: &HashSet<InstanceKey>,
    exec: Exec,
) -> Result<CollectionReport, StoreError>
where
    C: TextClient + ?Sized,
    W: Write + Send,
{
    let started = Instant::now();
    let tasks: Vec<(usize, usize)> =
        (0..plan.models.len()).flat_map(|m| (0..prompts.len()).map(move |p| (m, p))).collect();
    let sink = Mutex::new(sink);

    struct TaskOutcome {
        key: String,
        tally: PromptTally,
        retries: u64,
        errors: Vec<String>,
        write_error: Option<StoreError>,
    }

    let outcomes = exec.map_bounded(plan.max_parallel, &tasks, |&(m, p)| {
        let model = &plan.models[m];
        let spec = &prompts[p];
        let mut out = TaskOutcome {
            key: format!("{model}/{}", spec.id),
            tally: PromptTally::default(),
            retries: 0,
            errors: Vec::new(),
            write_error: None,
        };
        for sample in 0..plan.samples_per_prompt {
            let key = InstanceKey { model_id: model.clone(), prompt_id: spec.id.clone(), sample_index: sample };
            if existing.contains(&key) {
                out.tally.skipped += 1;
                continue;
            }
            let seed = plan.sample_seed(m, p, sample);
            let mut attempt = 0;
            let result = loop {
                match client.generate(model, spec, seed) {
                    Err(ClientError::Transient(msg)) if attempt < plan.retry_budget => {
                        let delay = plan.backoff_ms.saturating_mul(1 << attempt.min(16));
                        log::debug!("{}: transient failure ({msg}); retrying in {delay} ms", out.key);
                        std::thread::sleep(Duration::from_millis(delay));
                        attempt += 1;
                        out.retries += 1;
                    }
                    other => break other,
                }
            };
            match result {
                Ok(text) => {
                    let inst = StoryInstance::new(model, spec, sample, text, Utc::now());
                    let mut guard = sink.lock().expect("sink poisoned");
                    if let Err(e) = guard.write(&inst) {
                        out.write_error = Some(e);
                        return out;
                    }
                    out.tally.success += 1;
                }
                Err(e) => {
                    out.tally.failed += 1;
                    out.errors.push(format!("{} sample {sample}: {e}", out.key));
                }
            }
        }
        out
    });

    let mut report = CollectionReport { expected: plan.expected_count(prompts.len()), ..Default::default() };
    for o in outcomes {
        if let Some(e) = o.write_error {
            return Err(e);
        }
        report.success += o.tally.success;
        report.failed += o.tally.failed;
        report.skipped_existing += o.tally.skipped;
        report.retries += o.retries;
        if o.tally.failed > 0 {
            report.short_prompts.push(o.key.clone());
        }
        for e in o.errors {
            if report.errors.len() < MAX_REPORTED_ERRORS {
                report.errors.push(e);
            }
        }
        report.per_prompt.insert(o.key, o.tally);
    }
    sink.into_inner().expect("sink poisoned").flush()?;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_corpus::generate_prompts;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn fixed_time() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2023-07-01T12:00:00Z").unwrap().with_timezone(&Utc)
    }

    fn sample_instance() -> StoryInstance {
        let prompts = generate_prompts().unwrap();
        let spec = prompts.iter().find(|p| p.id == "learning-laden-8").unwrap();
        let mut i = StoryInstance::new(
            "model-a",
            spec,
            3,
            "John was the star student in Maria's math class. Maria’s “quiet” struggle, née José. 日本".into(),
            fixed_time(),
        );
        i.subject_name = Some("John".into());
        i.object_references = vec!["her".into()];
        i
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.jsonl");
        let mut empty = sample_instance();
        empty.response = String::new();
        empty.sample_index = 4;
        empty.add_flag(FLAG_RELABEL);
        let xs = vec![sample_instance(), empty];
        write_instances(&xs, &path).unwrap();
        assert_eq!(read_instances(&path).unwrap(), xs);
    }

    #[test]
    fn malformed_line_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.jsonl");
        write_instances(&[sample_instance()], &path).unwrap();
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.push_str(&content.lines().nth(1).unwrap().replace("\"sample_index\":3", "\"sample_index\":\"x\""));
        content.push('\n');
        content.push_str(content.clone().lines().nth(1).unwrap());
        content.push('\n');
        std::fs::write(&path, content).unwrap();
        match read_instances(&path) {
            Err(StoreError::Malformed { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "sample_index");
            }
            other => panic!("expected malformed error, got {other:?}"),
        }
        let (records, fault) = read_instances_lenient(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert!(fault.is_some());
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.jsonl");
        std::fs::write(&path, format!("{}\n{{\"model_id\":\"m\"}}\n", header_line())).unwrap();
        match read_instances(&path) {
            Err(StoreError::Malformed { line: 2, field, .. }) => assert_eq!(field, "prompt_id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_is_required() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.jsonl");
        std::fs::write(&path, "{\"model_id\":\"m\"}\n").unwrap();
        assert!(matches!(read_instances(&path), Err(StoreError::Header { .. })));
    }

    #[test]
    fn replay_serves_in_order_then_exhausts() {
        let c = ReplayClient::from_records(vec![
            ("learning-neutral-8".to_string(), "a".to_string()),
            ("labor-neutral-1".to_string(), "x".to_string()),
            ("learning-neutral-8".to_string(), "b".to_string()),
            ("learning-neutral-8".to_string(), "c".to_string()),
        ]);
        assert_eq!(c.next_for("learning-neutral-8").unwrap(), "a");
        assert_eq!(c.next_for("labor-neutral-1").unwrap(), "x");
        assert_eq!(c.next_for("learning-neutral-8").unwrap(), "b");
        assert_eq!(c.next_for("learning-neutral-8").unwrap(), "c");
        assert!(c.next_for("learning-neutral-8").unwrap_err().to_string().contains("exhausted"));
        assert!(c.next_for("love-laden-1").unwrap_err().to_string().contains("unknown"));
    }

    struct Counting(AtomicU32);

    impl TextClient for Counting {
        fn generate(&self, model: &str, prompt: &PromptSpec, seed: u64) -> Result<String, ClientError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(format!("{model} {} {seed}", prompt.id))
        }
    }

    struct Failing {
        transient: bool,
        calls: AtomicU32,
    }

    impl TextClient for Failing {
        fn generate(&self, _: &str, _: &PromptSpec, _: u64) -> Result<String, ClientError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.transient {
                Err(ClientError::Transient("busy".into()))
            } else {
                Err(ClientError::Permanent("refused".into()))
            }
        }
    }

    struct Flaky(AtomicU32);

    impl TextClient for Flaky {
        fn generate(&self, _: &str, _: &PromptSpec, _: u64) -> Result<String, ClientError> {
            if self.0.fetch_add(1, Ordering::SeqCst) % 2 == 0 {
                Err(ClientError::Transient("blip".into()))
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn collection_counts_and_resume() {
        let prompts = generate_prompts().unwrap();
        let mut plan = CollectionPlan::new(vec!["m1".into()], 2);
        plan.backoff_ms = 0;
        let client = Counting(AtomicU32::new(0));
        let mut sink = InstanceWriter::from_writer(Vec::new()).unwrap();
        let report = collect(&client, &plan, &prompts, &mut sink, &HashSet::new(), Exec::Parallel).unwrap();
        assert_eq!(report.success, 200);
        assert!(report.is_complete());
        let bytes = sink.into_inner().unwrap();
        let written: Vec<StoryInstance> =
            InstanceReader::new(bytes.as_slice(), Path::new("mem"), false).unwrap().collect::<Result<_, _>>().unwrap();
        assert_eq!(written.len(), 200);
        let index = PromptIndex::new(prompts.clone());
        assert!(written.iter().all(|i| i.matches_corpus(&index)));

        let mut existing: HashSet<InstanceKey> = written.iter().map(StoryInstance::key).collect();
        existing.retain(|k| k.sample_index == 0);
        let mut sink = InstanceWriter::from_writer(Vec::new()).unwrap();
        let again = collect(&client, &plan, &prompts, &mut sink, &existing, Exec::Sequential).unwrap();
        assert_eq!((again.success, again.skipped_existing), (100, 100));
        assert_eq!(client.0.load(Ordering::SeqCst), 300);
    }

    #[test]
    fn collection_records_failures() {
        let prompts = generate_prompts().unwrap();
        let mut plan = CollectionPlan::new(vec!["m1".into()], 2);
        plan.backoff_ms = 0;
        plan.retry_budget = 2;
        let client = Failing { transient: true, calls: AtomicU32::new(0) };
        let mut sink = InstanceWriter::from_writer(Vec::new()).unwrap();
        let report = collect(&client, &plan, &prompts, &mut sink, &HashSet::new(), Exec::Parallel).unwrap();
        assert_eq!((report.success, report.failed), (0, 200));
        assert_eq!(client.calls.load(Ordering::SeqCst), 600);
        assert_eq!(report.short_prompts.len(), 100);
        assert!(!report.is_complete());

        let client = Failing { transient: false, calls: AtomicU32::new(0) };
        let mut sink = InstanceWriter::from_writer(Vec::new()).unwrap();
        let report = collect(&client, &plan, &prompts[..3], &mut sink, &HashSet::new(), Exec::Sequential).unwrap();
        assert_eq!(report.failed, 6);
        assert_eq!(client.calls.load(Ordering::SeqCst), 6);

        let client = Flaky(AtomicU32::new(0));
        let mut sink = InstanceWriter::from_writer(Vec::new()).unwrap();
        let report = collect(&client, &plan, &prompts[..3], &mut sink, &HashSet::new(), Exec::Sequential).unwrap();
        assert_eq!((report.success, report.retries), (6, 6));
    }

    #[test]
    fn plan_arithmetic_and_validation() {
        let plan: CollectionPlan = serde_json::from_str(r#"{"models":["a","b"]}"#).unwrap();
        assert_eq!(plan.samples_per_prompt, 1000);
        assert_eq!(plan.expected_count(100), 200_000);
        assert!(CollectionPlan::new(vec![], 1).validate().is_err());
        assert!(CollectionPlan::new(vec!["a".into()], 0).validate().is_err());
    }
}
