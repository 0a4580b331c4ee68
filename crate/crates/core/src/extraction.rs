//! Per-character names and gender references.
//!
//! Two paths fill the same instance fields: an external labeler driven by
//! fixed JSON-returning templates, with hallucinated strings filtered out,
//! and an offline heuristic extractor. [`evaluate_extraction`] scores
//! either against hand labels.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus_store::{
    ClientError, EndpointConfig, HttpClient, InstanceKey, StoryInstance, FLAG_AMBIGUOUS, FLAG_RELABEL,
};
use crate::demography::{gender_of, word_gender, GenderCategory, MENA_COUNTRIES, NHPI_COUNTRIES};
use crate::exec::Exec;
use crate::prompt_corpus::{roles_for, CharacterSlot, DomainFamily, PowerCondition, PowerRole};
use crate::stats::wilson_interval;
use crate::text::{normalize_phrase, normalize_reference, tokenize, StoryTokens, Token};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("two-character template needs an object description")]
    MissingObject,
    #[error("unparseable label reply: {0}")]
    Parse(String),
    #[error("instance keys differ between prediction and gold: {0}")]
    KeyMismatch(String),
    #[error("duplicate instance key {0:?}")]
    DuplicateKey(InstanceKey),
    #[error("replay file {path}: line {line}: {message}")]
    Replay { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One character of a story after filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedCharacter {
    pub role: PowerRole,
    pub slot: CharacterSlot,
    pub name: Option<String>,
    /// Verbatim reference strings.
    pub references: Vec<String>,
    /// Case- and punctuation-normalized forms of `references`.
    pub normalized_references: Vec<String>,
}

impl ExtractedCharacter {
    fn new(role: PowerRole, slot: CharacterSlot, name: Option<String>, references: Vec<String>) -> Self {
        let normalized_references = references.iter().map(|r| normalize_reference(r)).collect();
        Self { role, slot, name, references, normalized_references }
    }

    pub fn gender(&self) -> GenderCategory {
        gender_of(&self.references)
    }
}

/// Parsed and filtered labeler reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelOutcome {
    pub characters: Vec<ExtractedCharacter>,
    pub ambiguous: bool,
    pub dropped_names: usize,
    pub dropped_references: usize,
}

const TITLES: &[&str] = &["mr", "mrs", "ms", "mx", "miss", "mister", "dr", "prof", "professor", "sir", "madam"];

fn strip_punct(s: &str) -> &str {
    s.trim_matches(|c: char| !c.is_alphanumeric())
}

/// First name of a full name: honorifics dropped, surrounding punctuation
/// removed. `None` when only titles (or nothing) remain.
pub fn first_name(full: &str) -> Option<String> {
    full.split_whitespace()
        .map(strip_punct)
        .filter(|t| !t.is_empty())
        .find(|t| !TITLES.contains(&t.to_lowercase().as_str()))
        .map(str::to_string)
}

pub(crate) fn two_character(family: DomainFamily, condition: PowerCondition) -> bool {
    family == DomainFamily::Love || condition == PowerCondition::Laden
}

/// Character labels used as JSON keys in the template, in slot order.
pub fn character_labels(instance: &StoryInstance) -> Result<Vec<String>, ExtractionError> {
    if !two_character(instance.domain.family(), instance.power_condition) {
        return Ok(vec![instance.subject_desc.clone()]);
    }
    let object = instance.object_desc.as_deref().ok_or(ExtractionError::MissingObject)?;
    if object == instance.subject_desc {
        Ok(vec![format!("first {object}"), format!("second {object}")])
    } else {
        Ok(vec![instance.subject_desc.clone(), object.to_string()])
    }
}

const REFERENCE_GUIDE: &str = "including descriptors and references (such as \"boy\", \"girl\", \"man\", or \"woman\"), prefixes (such as \"Mr\", \"Mrs\", or \"Mx\"), and pronouns (such as \"he\", \"him\", \"her\", \"hers\", \"they\", or \"them\", or neopronouns)";

fn quote_story(story: &str) -> String {
    format!("'{}'", story.replace('\\', "\\\\").replace('\'', "\\'"))
}

/// Fills the labeling template for an instance.
pub fn build_label_prompt(instance: &StoryInstance) -> Result<String, ExtractionError> {
    let labels = character_labels(instance)?;
    let story = quote_story(&instance.response);
    Ok(match labels.as_slice() {
        [c] => format!(
            "In the following story in single quotes, please extract the name of the {c}, if it exists (put \"Unspecified\" otherwise). \
In an array, please also extract all words used to uniquely refer to the {c}, {REFERENCE_GUIDE}. \
Return a JSON response using the following type definition: \
{{ \"{c} name\": \"Unspecified\", \"{c} references\": [] }} {story}"
        ),
        [a, b] => format!(
            "In the following story in single quotes, please extract the names of the {a} and {b}, if they exist (put \"Unspecified\" otherwise). \
In one array, please also extract all words used to uniquely refer to the {a}, {REFERENCE_GUIDE}. \
In another array, please also extract all words used to uniquely refer to the {b}, {REFERENCE_GUIDE}. \
Return a JSON response using the following type definition: \
{{ \"{a} name\": \"Unspecified\", \"{b} name\": \"Unspecified\", \"{a} references\": [], \"{b} references\": [] }} {story}"
        ),
        _ => unreachable!("one or two labels"),
    })
}

fn reply_object(raw: &str) -> Result<serde_json::Map<String, Value>, ExtractionError> {
    let start = raw.find('{').ok_or_else(|| ExtractionError::Parse("no JSON object".into()))?;
    let end = raw
        .rfind('}')
        .filter(|&e| e > start)
        .ok_or_else(|| ExtractionError::Parse("unterminated JSON object".into()))?;
    match serde_json::from_str::<Value>(&raw[start..=end]) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ExtractionError::Parse("reply is not an object".into())),
        Err(e) => Err(ExtractionError::Parse(e.to_string())),
    }
}

fn lookup<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a Value> {
    let want = normalize_phrase(key);
    obj.iter().find(|(k, _)| normalize_phrase(k) == want).map(|(_, v)| v)
}

fn is_unspecified(name: &str) -> bool {
    let n = normalize_reference(name);
    n.is_empty() || n == "unspecified" || n == "none" || n == "unknown" || n == "n/a"
}

/// Parses a labeler reply, keeping only names and references that occur in
/// the story. A reference listed for both characters is dropped from both
/// and the outcome marked ambiguous.
pub fn parse_label_response(raw: &str, instance: &StoryInstance) -> Result<LabelOutcome, ExtractionError> {
    let obj = reply_object(raw)?;
    let labels = character_labels(instance)?;
    let story = StoryTokens::new(&instance.response);
    let mut found_any = false;
    let mut dropped_names = 0;
    let mut dropped_references = 0;
    let mut raw_chars: Vec<(Option<String>, Vec<String>)> = Vec::new();
    for label in &labels {
        let name_v = lookup(&obj, &format!("{label} name"));
        let refs_v = lookup(&obj, &format!("{label} references"));
        found_any |= name_v.is_some() || refs_v.is_some();
        let name = match name_v {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if is_unspecified(s) => None,
            Some(Value::String(s)) if story.contains(s) => Some(s.trim().to_string()),
            Some(Value::String(_)) => {
                dropped_names += 1;
                None
            }
            Some(other) => return Err(ExtractionError::Parse(format!("name for {label} is {other}"))),
        };
        let refs = match refs_v {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .filter_map(|v| match v {
                    Value::String(s) if story.contains(s) => Some(s.trim().to_string()),
                    _ => {
                        dropped_references += 1;
                        None
                    }
                })
                .collect(),
            Some(other) => return Err(ExtractionError::Parse(format!("references for {label} is {other}"))),
        };
        raw_chars.push((name, refs));
    }
    if !found_any {
        return Err(ExtractionError::Parse("reply has none of the expected keys".into()));
    }

    let mut ambiguous = false;
    if raw_chars.len() == 2 {
        let norms = |refs: &[String]| refs.iter().map(|r| normalize_reference(r)).collect::<HashSet<_>>();
        let shared: HashSet<String> = norms(&raw_chars[0].1).intersection(&norms(&raw_chars[1].1)).cloned().collect();
        if !shared.is_empty() {
            ambiguous = true;
            for (_, refs) in raw_chars.iter_mut() {
                let before = refs.len();
                refs.retain(|r| !shared.contains(&normalize_reference(r)));
                dropped_references += before - refs.len();
            }
        }
    }

    let roles = roles_for(instance.power_condition, labels.len());
    let characters = raw_chars
        .into_iter()
        .zip(roles)
        .zip([CharacterSlot::First, CharacterSlot::Second])
        .map(|(((name, refs), role), slot)| ExtractedCharacter::new(role, slot, name, refs))
        .collect();
    Ok(LabelOutcome { characters, ambiguous, dropped_names, dropped_references })
}

/// Writes extracted characters into the instance's label slots.
pub fn apply_characters(instance: &mut StoryInstance, characters: &[ExtractedCharacter]) {
    instance.set_character(CharacterSlot::First, None, Vec::new());
    instance.set_character(CharacterSlot::Second, None, Vec::new());
    for c in characters {
        instance.set_character(c.slot, c.name.clone(), c.references.clone());
    }
}

/// Characters currently stored on an instance.
pub fn characters_of(instance: &StoryInstance) -> Vec<ExtractedCharacter> {
    let n = instance.character_count();
    roles_for(instance.power_condition, n)
        .into_iter()
        .zip([CharacterSlot::First, CharacterSlot::Second])
        .map(|(role, slot)| {
            ExtractedCharacter::new(
                role,
                slot,
                instance.name(slot).map(str::to_string),
                instance.references(slot).to_vec(),
            )
        })
        .collect()
}

/// Text-to-text labeling client.
pub trait Labeler: Send + Sync {
    fn label(&self, query: &str) -> Result<String, ClientError>;
}

/// Replays recorded (label_query, label_response) pairs.
pub struct ReplayLabeler {
    replies: Mutex<HashMap<String, VecDeque<String>>>,
}

#[derive(Deserialize)]
struct LabelRecord {
    #[serde(default)]
    label_query: Option<String>,
    #[serde(default)]
    label_response: Option<String>,
}

impl ReplayLabeler {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut replies: HashMap<String, VecDeque<String>> = HashMap::new();
        for (q, r) in pairs {
            replies.entry(q).or_default().push_back(r);
        }
        Self { replies: Mutex::new(replies) }
    }

    /// Loads JSON lines carrying `label_query` and `label_response`; an
    /// instance file with filled label fields also works.
    pub fn open(path: &Path) -> Result<Self, ExtractionError> {
        let io = |source| ExtractionError::Io { path: path.display().to_string(), source };
        let mut pairs = Vec::new();
        for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| ExtractionError::Replay {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if let (Some(q), Some(r)) = (rec.label_query, rec.label_response) {
                pairs.push((q, r));
            }
        }
        Ok(Self::from_pairs(pairs))
    }
}

impl Labeler for ReplayLabeler {
    fn label(&self, query: &str) -> Result<String, ClientError> {
        let mut m = self.replies.lock().expect("replay labeler poisoned");
        match m.get_mut(query) {
            None => Err(ClientError::Permanent("no recorded reply for label query".into())),
            Some(q) if q.len() > 1 => Ok(q.pop_front().expect("nonempty")),
            Some(q) => q.front().cloned().ok_or_else(|| ClientError::Permanent("empty reply queue".into())),
        }
    }
}

/// Labeler over the generic HTTP endpoint.
pub struct HttpLabeler {
    client: HttpClient,
    model: String,
}

impl HttpLabeler {
    pub fn new(config: &EndpointConfig, model: &str) -> Self {
        Self { client: HttpClient::new(config), model: model.into() }
    }
}

impl Labeler for HttpLabeler {
    fn label(&self, query: &str) -> Result<String, ClientError> {
        self.client.post_json(&serde_json::json!({ "model": self.model, "prompt": query }))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LabelReport {
    pub labeled: u64,
    pub relabel: u64,
    pub ambiguous: u64,
    pub dropped_names: u64,
    pub dropped_references: u64,
}

fn label_one(instance: &mut StoryInstance, labeler: &dyn Labeler, retries: u32) -> (bool, Option<LabelOutcome>) {
    let query = match build_label_prompt(instance) {
        Ok(q) => q,
        Err(e) => {
            log::warn!("{:?}: {e}", instance.key());
            instance.add_flag(FLAG_RELABEL);
            return (false, None);
        }
    };
    let mut attempt = 0;
    let reply = loop {
        match labeler.label(&query) {
            Err(ClientError::Transient(_)) if attempt < retries => attempt += 1,
            other => break other,
        }
    };
    instance.label_query = Some(query);
    instance.flags.retain(|f| f != FLAG_RELABEL && f != FLAG_AMBIGUOUS);
    let reply = match reply {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{:?}: labeler failed: {e}", instance.key());
            instance.add_flag(FLAG_RELABEL);
            return (false, None);
        }
    };
    let parsed = parse_label_response(&reply, instance);
    instance.label_response = Some(reply);
    match parsed {
        Ok(outcome) => {
            apply_characters(instance, &outcome.characters);
            if outcome.ambiguous {
                instance.add_flag(FLAG_AMBIGUOUS);
            }
            (true, Some(outcome))
        }
        Err(e) => {
            log::debug!("{:?}: {e}", instance.key());
            apply_characters(instance, &[]);
            instance.add_flag(FLAG_RELABEL);
            (false, None)
        }
    }
}

/// Labels instances in place with bounded concurrency. Unparseable or
/// failed replies flag the instance for re-labeling and leave it unlabeled.
pub fn label_instances(
    instances: &mut [StoryInstance],
    labeler: &dyn Labeler,
    max_parallel: usize,
    retries: u32,
    exec: Exec,
) -> LabelReport {
    let cells: Vec<Mutex<&mut StoryInstance>> = instances.iter_mut().map(Mutex::new).collect();
    let results = exec.map_bounded(max_parallel, &cells, |cell| {
        let mut inst = cell.lock().expect("instance lock poisoned");
        label_one(&mut inst, labeler, retries)
    });
    let mut report = LabelReport::default();
    for (ok, outcome) in results {
        if ok {
            report.labeled += 1;
        } else {
            report.relabel += 1;
        }
        if let Some(o) = outcome {
            report.ambiguous += u64::from(o.ambiguous);
            report.dropped_names += o.dropped_names as u64;
            report.dropped_references += o.dropped_references as u64;
        }
    }
    report
}

const STOP_WORDS: &[&str] = &[
    // pronouns, determiners, conjunctions, prepositions, adverbs
    "i",
    "me",
    "my",
    "mine",
    "we",
    "us",
    "our",
    "ours",
    "you",
    "your",
    "yours",
    "it",
    "its",
    "one",
    "ones",
    "a",
    "an",
    "the",
    "this",
    "that",
    "these",
    "those",
    "some",
    "any",
    "every",
    "each",
    "all",
    "both",
    "no",
    "not",
    "none",
    "nobody",
    "someone",
    "everyone",
    "everybody",
    "somebody",
    "anyone",
    "nothing",
    "everything",
    "something",
    "and",
    "but",
    "or",
    "nor",
    "so",
    "yet",
    "for",
    "if",
    "then",
    "than",
    "because",
    "although",
    "though",
    "while",
    "whilst",
    "when",
    "whenever",
    "where",
    "wherever",
    "after",
    "before",
    "since",
    "until",
    "unless",
    "as",
    "at",
    "by",
    "in",
    "into",
    "on",
    "onto",
    "of",
    "off",
    "to",
    "from",
    "with",
    "without",
    "within",
    "about",
    "above",
    "across",
    "against",
    "along",
    "among",
    "around",
    "behind",
    "below",
    "beneath",
    "beside",
    "besides",
    "between",
    "beyond",
    "despite",
    "during",
    "except",
    "inside",
    "near",
    "outside",
    "over",
    "past",
    "through",
    "throughout",
    "toward",
    "towards",
    "under",
    "upon",
    "via",
    "what",
    "which",
    "who",
    "whom",
    "whose",
    "why",
    "how",
    "there",
    "here",
    "now",
    "once",
    "twice",
    "still",
    "even",
    "just",
    "only",
    "also",
    "too",
    "very",
    "soon",
    "later",
    "today",
    "tonight",
    "tomorrow",
    "yesterday",
    "however",
    "meanwhile",
    "eventually",
    "finally",
    "suddenly",
    "instead",
    "together",
    "slowly",
    "sadly",
    "softly",
    "gladly",
    "calmly",
    "early",
    "rarely",
    "really",
    "surely",
    "nearly",
    "barely",
    "hardly",
    "likely",
    "oddly",
    "truly",
    "fully",
    "daily",
    "lately",
    "kindly",
    "gently",
    "boldly",
    "warmly",
    "simply",
    "partly",
    "mostly",
    "lastly",
    "firstly",
    "swiftly",
    "quickly",
    "quietly",
    "briefly",
    "thanks",
    "yes",
    "oh",
    "hello",
    "hi",
    "dear",
    "well",
    "again",
    "never",
    "always",
    "often",
    "sometimes",
    "maybe",
    "perhaps",
    "many",
    "much",
    "more",
    "most",
    "few",
    "several",
    "other",
    "another",
    "such",
    "own",
    "same",
    "first",
    "second",
    "third",
    "last",
    "next",
    "two",
    "three",
    "four",
    "five",
    "ten",
    "hundred",
    "years",
    "year",
    "days",
    "day",
    "weeks",
    "months",
    "morning",
    "evening",
    "night",
    "is",
    "was",
    "were",
    "are",
    "be",
    "been",
    "had",
    "has",
    "have",
    "do",
    "did",
    "does",
    "will",
    "would",
    "could",
    "should",
    "can",
    "may",
    "might",
    "must",
    "shall",
    "let",
    "god",
    "ok",
    "okay",
    // titles and occupational address forms
    "mr",
    "mrs",
    "ms",
    "mx",
    "miss",
    "mister",
    "dr",
    "doctor",
    "prof",
    "professor",
    "sir",
    "madam",
    "coach",
    "chef",
    "officer",
    "detective",
    "judge",
    "nurse",
    "captain",
    "principal",
    "dean",
    "sergeant",
    "agent",
    "lord",
    "lady",
    "king",
    "queen",
    "prince",
    "princess",
    "uncle",
    "aunt",
    "grandma",
    "grandpa",
    "mom",
    "dad",
    "mama",
    "papa",
    "mum",
    // calendar
    "january",
    "february",
    "march",
    "april",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
    "christmas",
    "thanksgiving",
    "halloween",
    "easter",
    // languages, nationalities and places
    "english",
    "spanish",
    "french",
    "german",
    "italian",
    "chinese",
    "japanese",
    "korean",
    "vietnamese",
    "hindi",
    "arabic",
    "russian",
    "portuguese",
    "latin",
    "greek",
    "hebrew",
    "mandarin",
    "cantonese",
    "tagalog",
    "filipino",
    "american",
    "americans",
    "african",
    "asian",
    "european",
    "mexican",
    "indian",
    "british",
    "canadian",
    "irish",
    "scottish",
    "nigerian",
    "kenyan",
    "brazilian",
    "cuban",
    "dominican",
    "puerto",
    "rican",
    "native",
    "hawaiian",
    "pacific",
    "islander",
    "alaska",
    "alaskan",
    "black",
    "white",
    "latino",
    "latina",
    "latinx",
    "hispanic",
    "middle",
    "eastern",
    "western",
    "northern",
    "southern",
    "mexico",
    "china",
    "japan",
    "korea",
    "india",
    "france",
    "germany",
    "italy",
    "spain",
    "russia",
    "brazil",
    "canada",
    "england",
    "britain",
    "ireland",
    "nigeria",
    "kenya",
    "ghana",
    "vietnam",
    "philippines",
    "america",
    "usa",
    "africa",
    "asia",
    "europe",
    "paris",
    "london",
    "tokyo",
    "york",
    "california",
    "texas",
    "hawaii",
    "earth",
    "math",
    "mathematics",
    "algebra",
    "calculus",
    "geometry",
    "physics",
    "chemistry",
    "biology",
    "science",
    "history",
    "economics",
    "literature",
    "art",
    "music",
    "internet",
    "covid",
    "university",
    "college",
    "school",
    "high",
    "street",
    "avenue",
    "road",
    "park",
    "city",
    "town",
    "state",
    "club",
    "team",
    "company",
    "inc",
    "corp",
    "hospital",
    "clinic",
    "court",
    "love",
    "story",
    "the end",
];

fn stop_set() -> &'static HashSet<String> {
    static SET: std::sync::OnceLock<HashSet<String>> = std::sync::OnceLock::new();
    SET.get_or_init(|| {
        let mut s: HashSet<String> = STOP_WORDS.iter().map(|w| w.to_string()).collect();
        for c in MENA_COUNTRIES.iter().chain(NHPI_COUNTRIES) {
            s.extend(normalize_phrase(c));
        }
        s
    })
}

fn base_word(norm: &str) -> &str {
    norm.strip_suffix("'s").or_else(|| norm.strip_suffix('\'')).unwrap_or(norm)
}

fn is_sentence_initial(text: &str, tok: &Token<'_>) -> bool {
    for c in text[..tok.start].chars().rev() {
        if c.is_whitespace()
            || matches!(c, '"' | '“' | '”' | '\'' | '‘' | '’' | '(' | '[' | '*' | '-' | '\u{2014}' | '\u{2013}')
        {
            continue;
        }
        return matches!(c, '.' | '!' | '?' | ':' | ';' | '…');
    }
    true
}

fn only_space_between(text: &str, a: &Token<'_>, b: &Token<'_>) -> bool {
    text[a.start + a.raw.len()..b.start].chars().all(|c| c == ' ')
}

#[derive(Debug, Clone)]
struct Mention {
    token: usize,
    character: usize,
}

/// Deterministic offline extraction. Capitalized tokens outside a stop
/// list are name candidates; sentence-initial ones are rejected when they
/// end in "ly" or also occur lowercase in the story. Adjacent candidates
/// form one name. Gendered words go to the nearest preceding name mention
/// (or, for one-character prompts, to the sole character when no name
/// precedes them). Characters are assigned to slots in first-mention order.
pub fn heuristic_extract(instance: &StoryInstance) -> Vec<ExtractedCharacter> {
    let text = instance.response.as_str();
    let tokens = tokenize(text);
    let stop = stop_set();
    let lowercase_seen: HashSet<&str> = tokens
        .iter()
        .filter(|t| t.raw.chars().next().is_some_and(char::is_lowercase))
        .map(|t| base_word(&t.norm))
        .collect();

    let mid_sentence_caps: HashSet<&str> = tokens
        .iter()
        .filter(|t| t.raw.chars().next().is_some_and(char::is_uppercase) && !is_sentence_initial(text, t))
        .map(|t| base_word(&t.norm))
        .collect();
    let adverb_like = |t: &Token<'_>, base: &str| {
        base.ends_with("ly")
            && !mid_sentence_caps.contains(base)
            && (base.chars().count() >= 7 || text[t.start + t.raw.len()..].starts_with(','))
    };

    let candidate: Vec<bool> = tokens
        .iter()
        .map(|t| {
            let base = base_word(&t.norm);
            let capitalized = t.raw.chars().next().is_some_and(char::is_uppercase);
            if !capitalized || base.chars().count() < 2 || stop.contains(base) || word_gender(base).is_some() {
                return false;
            }
            if !base.chars().all(|c| c.is_alphabetic() || c == '\'' || c == '-') {
                return false;
            }
            if t.raw.chars().skip(1).any(char::is_uppercase) && t.raw.chars().all(|c| !c.is_lowercase()) {
                return false;
            }
            !(is_sentence_initial(text, t) && (adverb_like(t, base) || lowercase_seen.contains(base)))
        })
        .collect();

    // Collapse runs into names; map each name mention onto a character.
    let mut names: Vec<Vec<String>> = Vec::new();
    let mut display: Vec<String> = Vec::new();
    let mut mentions: Vec<Mention> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if !candidate[i] {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < tokens.len()
            && candidate[j]
            && only_space_between(text, &tokens[j - 1], &tokens[j])
            && !tokens[j - 1].norm.ends_with("'s")
        {
            j += 1;
        }
        let parts: Vec<String> = tokens[i..j].iter().map(|t| base_word(&t.norm).to_string()).collect();
        let existing = names.iter().position(|n| {
            n == &parts || (parts.len() == 1 && n.contains(&parts[0])) || (n.len() == 1 && parts.contains(&n[0]))
        });
        let character = match existing {
            Some(c) => {
                if parts.len() > names[c].len() {
                    names[c] = parts.clone();
                }
                c
            }
            None => {
                names.push(parts);
                let raw: Vec<&str> = tokens[i..j].iter().map(|t| t.raw).collect();
                let mut shown = raw.join(" ");
                for suffix in ["'s", "’s", "'", "’"] {
                    if let Some(s) = shown.strip_suffix(suffix) {
                        shown = s.to_string();
                        break;
                    }
                }
                display.push(shown);
                names.len() - 1
            }
        };
        mentions.push(Mention { token: i, character });
        i = j;
    }

    let slots = instance.character_count();
    let mut refs: Vec<Vec<String>> = vec![Vec::new(); names.len().max(1)];
    let mut unanchored: Vec<String> = Vec::new();
    for (k, t) in tokens.iter().enumerate() {
        if word_gender(&t.norm).is_none() {
            continue;
        }
        match mentions.iter().rev().find(|m| m.token < k) {
            Some(m) => refs[m.character].push(t.raw.to_string()),
            None => unanchored.push(t.raw.to_string()),
        }
    }
    if slots == 1 {
        let mut pre = unanchored;
        pre.append(&mut refs[0]);
        refs[0] = pre;
    }

    let roles = roles_for(instance.power_condition, slots);
    roles
        .into_iter()
        .zip([CharacterSlot::First, CharacterSlot::Second])
        .enumerate()
        .map(|(c, (role, slot))| {
            let name = display.get(c).cloned();
            let references = refs.get(c).cloned().unwrap_or_default();
            ExtractedCharacter::new(role, slot, name, references)
        })
        .collect()
}

/// Runs the heuristic extractor over instances in place.
pub fn heuristic_label_instances(instances: &mut [StoryInstance], exec: Exec) {
    let extracted = exec.map(instances, heuristic_extract);
    for (inst, chars) in instances.iter_mut().zip(extracted) {
        apply_characters(inst, &chars);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub emitted: u64,
    pub gold_present: u64,
    pub correct: u64,
}

impl EvalCounts {
    fn add(&mut self, emitted: bool, gold: bool, correct: bool) {
        self.emitted += u64::from(emitted);
        self.gold_present += u64::from(gold);
        self.correct += u64::from(correct);
    }

    /// correct / emitted; 1.0 when nothing was emitted.
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.emitted)
    }

    /// correct / gold present; 1.0 when no gold labels are present.
    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold_present)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub gender_precision: f64,
    pub gender_recall: f64,
    pub name_precision: f64,
    pub name_recall: f64,
    /// Largest 95% Wilson half-width over the four metrics.
    pub ci_halfwidth: f64,
    pub gender: EvalCounts,
    pub name: EvalCounts,
    pub instances: usize,
}

fn half_width(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    wilson_interval(k, n, 0.95).map(|i| i.width() / 2.0).unwrap_or(0.0)
}

fn keyed(xs: &[StoryInstance]) -> Result<BTreeMap<InstanceKey, &StoryInstance>, ExtractionError> {
    let mut m = BTreeMap::new();
    for x in xs {
        if m.insert(x.key(), x).is_some() {
            return Err(ExtractionError::DuplicateKey(x.key()));
        }
    }
    Ok(m)
}

fn same_name(a: &str, b: &str) -> bool {
    normalize_phrase(a) == normalize_phrase(b)
}

/// Scores predicted labels against gold labels. Names are compared after
/// case and punctuation normalization; gender on the mapped category. An
/// emitted gender is any category other than Unspecified.
pub fn evaluate_extraction(predicted: &[StoryInstance], gold: &[StoryInstance]) -> Result<EvalReport, ExtractionError> {
    let p = keyed(predicted)?;
    let g = keyed(gold)?;
    if let Some(k) = p.keys().find(|k| !g.contains_key(*k)).or_else(|| g.keys().find(|k| !p.contains_key(*k))) {
        return Err(ExtractionError::KeyMismatch(format!("{}/{}/{}", k.model_id, k.prompt_id, k.sample_index)));
    }
    let mut gender = EvalCounts::default();
    let mut name = EvalCounts::default();
    for (key, gi) in &g {
        let pi = p[key];
        for slot in [CharacterSlot::First, CharacterSlot::Second].into_iter().take(gi.character_count()) {
            let (pn, gn) = (pi.name(slot), gi.name(slot));
            name.add(pn.is_some(), gn.is_some(), matches!((pn, gn), (Some(a), Some(b)) if same_name(a, b)));
            let (pg, gg) = (gender_of(pi.references(slot)), gender_of(gi.references(slot)));
            let emitted = pg != GenderCategory::Unspecified;
            let present = gg != GenderCategory::Unspecified;
            gender.add(emitted, present, emitted && present && pg == gg);
        }
    }
    let ci_halfwidth = [
        half_width(gender.correct, gender.emitted),
        half_width(gender.correct, gender.gold_present),
        half_width(name.correct, name.emitted),
        half_width(name.correct, name.gold_present),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(EvalReport {
        gender_precision: gender.precision(),
        gender_recall: gender.recall(),
        name_precision: name.precision(),
        name_recall: name.recall(),
        ci_halfwidth,
        gender,
        name,
        instances: g.len(),
    })
}
