//! The fixed corpus of 100 open-ended story prompts.
//!
//! Scenario rows live in `resources/scenarios.tsv`, one row per table line,
//! and are verified against a SHA-256 digest before use. Each row stores the
//! prompt text after the shared prefix; friend and sibling scenarios share
//! one row that is expanded by substituting the relationship word.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Every prompt starts with this prefix.
pub const PROMPT_PREFIX: &str = "Write a story, 100 words or less, of ";

const SCENARIOS: &str = include_str!("../resources/scenarios.tsv");
const SCENARIOS_SHA256: &str = "c229a89a7a0f4f0569ee14ae55f3dbbaafe93d9a3b65d5f4c25eaca10947b533";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("scenario resource checksum mismatch: expected {expected}, found {found}")]
    Integrity { expected: String, found: String },
    #[error("scenario resource line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("prompt {id} has no second character")]
    InvalidSlot { id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LoveKind {
    Partners,
    Friends,
    Siblings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Learning,
    Labor,
    Love(LoveKind),
}

/// Domain without the Love subtype; the unit reports are grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainFamily {
    Learning,
    Labor,
    Love,
}

impl Domain {
    pub fn family(self) -> DomainFamily {
        match self {
            Domain::Learning => DomainFamily::Learning,
            Domain::Labor => DomainFamily::Labor,
            Domain::Love(_) => DomainFamily::Love,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Learning => "learning",
            Domain::Labor => "labor",
            Domain::Love(LoveKind::Partners) => "love-partners",
            Domain::Love(LoveKind::Friends) => "love-friends",
            Domain::Love(LoveKind::Siblings) => "love-siblings",
        }
    }
}

impl DomainFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainFamily::Learning => "Learning",
            DomainFamily::Labor => "Labor",
            DomainFamily::Love => "Love",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for DomainFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "learning" => Domain::Learning,
            "labor" => Domain::Labor,
            "love-partners" => Domain::Love(LoveKind::Partners),
            "love-friends" => Domain::Love(LoveKind::Friends),
            "love-siblings" => Domain::Love(LoveKind::Siblings),
            other => return Err(format!("unknown domain {other:?}")),
        })
    }
}

impl Serialize for Domain {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerCondition {
    Neutral,
    Laden,
}

impl PowerCondition {
    pub fn as_str(self) -> &'static str {
        match self {
            PowerCondition::Neutral => "neutral",
            PowerCondition::Laden => "laden",
        }
    }
}

impl FromStr for PowerCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neutral" => Ok(PowerCondition::Neutral),
            "laden" => Ok(PowerCondition::Laden),
            other => Err(format!("unknown power condition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerRole {
    Baseline,
    Dominant,
    Subordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CharacterSlot {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub domain: Domain,
    pub condition: PowerCondition,
    pub scenario_index: u32,
    pub subject_desc: String,
    pub object_desc: Option<String>,
    pub text: String,
}

impl PromptSpec {
    pub fn character_count(&self) -> usize {
        if self.object_desc.is_some() {
            2
        } else {
            1
        }
    }

    /// Roles of the prompt's characters in slot order.
    pub fn roles(&self) -> Vec<PowerRole> {
        roles_for(self.condition, self.character_count())
    }
}

pub(crate) fn roles_for(condition: PowerCondition, characters: usize) -> Vec<PowerRole> {
    match (condition, characters) {
        (PowerCondition::Laden, _) => vec![PowerRole::Dominant, PowerRole::Subordinate],
        (PowerCondition::Neutral, 1) => vec![PowerRole::Baseline],
        (PowerCondition::Neutral, _) => vec![PowerRole::Baseline, PowerRole::Baseline],
    }
}

/// Power role of a character slot: under the laden condition the first
/// character is dominant and the second subordinate; neutral prompts only
/// have baseline characters.
pub fn role_of(spec: &PromptSpec, slot: CharacterSlot) -> Result<PowerRole, CorpusError> {
    if slot == CharacterSlot::Second && spec.object_desc.is_none() {
        return Err(CorpusError::InvalidSlot { id: spec.id.clone() });
    }
    Ok(match (spec.condition, slot) {
        (PowerCondition::Neutral, _) => PowerRole::Baseline,
        (PowerCondition::Laden, CharacterSlot::First) => PowerRole::Dominant,
        (PowerCondition::Laden, CharacterSlot::Second) => PowerRole::Subordinate,
    })
}

/// Stable id: `<domain>-<condition>-<scenario_index>`, with the Love
/// subtypes sharing the `love` domain name.
pub fn prompt_id(family: DomainFamily, condition: PowerCondition, index: u32) -> String {
    format!("{}-{}-{}", family.as_str().to_lowercase(), condition.as_str(), index)
}

/// All 100 prompts: Learning, Labor, Love; neutral before laden; ascending
/// scenario index.
pub fn generate_prompts() -> Result<Vec<PromptSpec>, CorpusError> {
    parse_scenarios(SCENARIOS, SCENARIOS_SHA256)
}

pub(crate) fn parse_scenarios(data: &str, expected_sha: &str) -> Result<Vec<PromptSpec>, CorpusError> {
    let found = hex::encode(Sha256::digest(data.as_bytes()));
    if found != expected_sha {
        return Err(CorpusError::Integrity { expected: expected_sha.to_string(), found });
    }
    let mut specs = Vec::with_capacity(100);
    for (i, line) in data.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: &str| CorpusError::Malformed { line: line_no, reason: reason.to_string() };
        let cols: Vec<&str> = line.split('\t').collect();
        let [domain, condition, index, subject, object, tail] = cols[..] else {
            return Err(malformed("expected 6 tab-separated columns"));
        };
        let condition: PowerCondition = condition.parse().map_err(|e: String| malformed(&e))?;
        let object = (object != "-").then_some(object);
        let mut push = |domain: Domain, index: &str, rel: Option<(&str, &str)>| -> Result<(), CorpusError> {
            let index: u32 = index.parse().map_err(|_| malformed("bad scenario index"))?;
            let fill = |s: &str| match rel {
                Some((one, many)) => s.replace("{rels}", many).replace("{rel}", one),
                None => s.to_string(),
            };
            specs.push(PromptSpec {
                id: prompt_id(domain.family(), condition, index),
                domain,
                condition,
                scenario_index: index,
                subject_desc: fill(subject),
                object_desc: object.map(fill),
                text: format!("{PROMPT_PREFIX}{}", fill(tail)),
            });
            Ok(())
        };
        match domain {
            "love-shared" => {
                let (friend, sibling) = index.split_once('/').ok_or_else(|| malformed("shared row needs a/b index"))?;
                push(Domain::Love(LoveKind::Friends), friend, Some(("friend", "friends")))?;
                push(Domain::Love(LoveKind::Siblings), sibling, Some(("sibling", "siblings")))?;
            }
            d => {
                let domain: Domain = d.parse().map_err(|e: String| malformed(&e))?;
                push(domain, index, None)?;
            }
        }
    }
    specs.sort_by_key(|s| (s.domain.family(), s.condition, s.scenario_index));
    Ok(specs)
}

/// Lookup of prompts by id and by exact text.
#[derive(Debug, Clone)]
pub struct PromptIndex {
    specs: Vec<PromptSpec>,
    by_id: HashMap<String, usize>,
    by_text: HashMap<String, usize>,
}

impl PromptIndex {
    pub fn new(specs: Vec<PromptSpec>) -> Self {
        let by_id = specs.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        let by_text = specs.iter().enumerate().map(|(i, s)| (s.text.clone(), i)).collect();
        Self { specs, by_id, by_text }
    }

    pub fn standard() -> Result<Self, CorpusError> {
        Ok(Self::new(generate_prompts()?))
    }

    pub fn by_id(&self, id: &str) -> Option<&PromptSpec> {
        self.by_id.get(id).map(|&i| &self.specs[i])
    }

    pub fn by_text(&self, text: &str) -> Option<&PromptSpec> {
        self.by_text.get(text).map(|&i| &self.specs[i])
    }

    pub fn specs(&self) -> &[PromptSpec] {
        &self.specs
    }
}
