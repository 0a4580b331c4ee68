//! Identity proxies: gender categories from reference word lists,
//! relationship pair categories, fractional race likelihood tables keyed by
//! first name, and baseline distributions.
//!
//! Two likelihood providers are kept apart. The voter provider is built from
//! self-identified race and covers White, Latine, Black, Asian and AIAN; the
//! country provider is built from country of origin and covers MENA and
//! NHPI against all other countries. Each race is only ever looked up in its
//! own provider.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Exec;
use crate::extraction::first_name;
use crate::text::normalize_reference;

#[derive(Debug, Error)]
pub enum DemographyError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: checksum mismatch (expected {expected}, found {found})")]
    Checksum { path: String, expected: String, found: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DemographyError + '_ {
    move |source| DemographyError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DemographyError {
    DemographyError::Format { path: path.display().to_string(), reason: reason.into() }
}

// Gender word lists (case and punctuation insensitive).
pub const NON_BINARY_WORDS: &[&str] = &["they", "them", "their", "theirs", "themselves", "mx"];
pub const FEMINIZED_WORDS: &[&str] = &[
    "she",
    "her",
    "hers",
    "herself",
    "girl",
    "woman",
    "mrs",
    "ms",
    "miss",
    "mother",
    "sister",
    "girlfriend",
    "wife",
    "grandmother",
    "transwoman",
];
pub const MASCULINIZED_WORDS: &[&str] = &[
    "he",
    "him",
    "his",
    "himself",
    "boy",
    "man",
    "mr",
    "mister",
    "father",
    "brother",
    "boyfriend",
    "husband",
    "grandfather",
    "transman",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GenderCategory {
    #[serde(rename = "NB")]
    NonBinary,
    #[serde(rename = "F")]
    Feminized,
    #[serde(rename = "M")]
    Masculinized,
    Unspecified,
    Unsure,
}

impl GenderCategory {
    pub const DEFINED: [GenderCategory; 3] =
        [GenderCategory::NonBinary, GenderCategory::Feminized, GenderCategory::Masculinized];

    pub fn as_str(self) -> &'static str {
        match self {
            GenderCategory::NonBinary => "NB",
            GenderCategory::Feminized => "F",
            GenderCategory::Masculinized => "M",
            GenderCategory::Unspecified => "Unspecified",
            GenderCategory::Unsure => "Unsure",
        }
    }

    pub fn is_defined(self) -> bool {
        Self::DEFINED.contains(&self)
    }
}

impl fmt::Display for GenderCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Category of a single normalized word, if it appears in a word list.
pub fn word_gender(word: &str) -> Option<GenderCategory> {
    let w = normalize_reference(word);
    if NON_BINARY_WORDS.contains(&w.as_str()) {
        Some(GenderCategory::NonBinary)
    } else if FEMINIZED_WORDS.contains(&w.as_str()) {
        Some(GenderCategory::Feminized)
    } else if MASCULINIZED_WORDS.contains(&w.as_str()) {
        Some(GenderCategory::Masculinized)
    } else {
        None
    }
}

/// Maps a character's reference list to a gender category: one matched
/// list gives that category, none gives Unspecified, several give Unsure.
pub fn gender_of<S: AsRef<str>>(references: &[S]) -> GenderCategory {
    let mut seen: Option<GenderCategory> = None;
    for r in references {
        if let Some(g) = word_gender(r.as_ref()) {
            match seen {
                None => seen = Some(g),
                Some(prev) if prev != g => return GenderCategory::Unsure,
                _ => {}
            }
        }
    }
    seen.unwrap_or(GenderCategory::Unspecified)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairCategory {
    #[serde(rename = "NB-NB")]
    NbNb,
    #[serde(rename = "NB-F")]
    NbF,
    #[serde(rename = "NB-M")]
    NbM,
    #[serde(rename = "F-F")]
    FF,
    #[serde(rename = "M-M")]
    MM,
    #[serde(rename = "F-M")]
    FM,
}

impl PairCategory {
    pub const ALL: [PairCategory; 6] = [
        PairCategory::NbNb,
        PairCategory::NbF,
        PairCategory::NbM,
        PairCategory::FF,
        PairCategory::MM,
        PairCategory::FM,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PairCategory::NbNb => "NB-NB",
            PairCategory::NbF => "NB-F",
            PairCategory::NbM => "NB-M",
            PairCategory::FF => "F-F",
            PairCategory::MM => "M-M",
            PairCategory::FM => "F-M",
        }
    }
}

impl fmt::Display for PairCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Unordered relationship pair; absent when either gender is Unspecified
/// or Unsure.
pub fn pair_of(a: GenderCategory, b: GenderCategory) -> Option<PairCategory> {
    use GenderCategory::*;
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    Some(match (lo, hi) {
        (NonBinary, NonBinary) => PairCategory::NbNb,
        (NonBinary, Feminized) => PairCategory::NbF,
        (NonBinary, Masculinized) => PairCategory::NbM,
        (Feminized, Feminized) => PairCategory::FF,
        (Masculinized, Masculinized) => PairCategory::MM,
        (Feminized, Masculinized) => PairCategory::FM,
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RaceCategory {
    #[serde(rename = "AIAN")]
    Aian,
    Asian,
    Black,
    Latine,
    #[serde(rename = "NHPI")]
    Nhpi,
    #[serde(rename = "MENA")]
    Mena,
    White,
}

impl RaceCategory {
    pub const ALL: [RaceCategory; 7] = [
        RaceCategory::Aian,
        RaceCategory::Asian,
        RaceCategory::Black,
        RaceCategory::Latine,
        RaceCategory::Nhpi,
        RaceCategory::Mena,
        RaceCategory::White,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RaceCategory::Aian => "AIAN",
            RaceCategory::Asian => "Asian",
            RaceCategory::Black => "Black",
            RaceCategory::Latine => "Latine",
            RaceCategory::Nhpi => "NHPI",
            RaceCategory::Mena => "MENA",
            RaceCategory::White => "White",
        }
    }

    pub fn provider(self) -> Provider {
        match self {
            RaceCategory::Mena | RaceCategory::Nhpi => Provider::Country,
            _ => Provider::Voter,
        }
    }
}

impl fmt::Display for RaceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RaceCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RaceCategory::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown race category {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Voter,
    Country,
}

impl Provider {
    pub fn categories(self) -> &'static [RaceCategory] {
        match self {
            Provider::Voter => &[
                RaceCategory::White,
                RaceCategory::Latine,
                RaceCategory::Black,
                RaceCategory::Asian,
                RaceCategory::Aian,
            ],
            Provider::Country => &[RaceCategory::Mena, RaceCategory::Nhpi],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provider::Voter => "voter",
            Provider::Country => "country",
        }
    }

    fn index_of(self, race: RaceCategory) -> Option<usize> {
        self.categories().iter().position(|&r| r == race)
    }
}

/// Maps a self-identified race value onto the voter categories. Accepts
/// category names and the numeric voter-file codes 1-5; "API" maps to Asian.
pub fn parse_voter_race(code: &str) -> Option<RaceCategory> {
    match code.trim().to_lowercase().as_str() {
        "1" | "aian" | "ai/an" | "american indian or alaska native" | "american indian or alaskan native" => {
            Some(RaceCategory::Aian)
        }
        "2" | "api" | "asian" | "asian or pacific islander" | "asian pacific islander" => Some(RaceCategory::Asian),
        "3" | "black" | "african american" | "black, not hispanic" => Some(RaceCategory::Black),
        "4" | "hispanic" | "latino" | "latine" | "hispanic or latino" => Some(RaceCategory::Latine),
        "5" | "white" | "white, not hispanic" => Some(RaceCategory::White),
        _ => None,
    }
}

pub const NHPI_COUNTRIES: &[&str] = &[
    "American Samoa",
    "Cook Island",
    "Cook Islands",
    "East Timor",
    "Fiji",
    "French Polynesia",
    "Guam",
    "I-Kiribati",
    "Kiribati",
    "Marshall Islands",
    "Marshallese",
    "Micronesia",
    "Nauru",
    "New Caledonia",
    "Ni-Vanuatu",
    "Niue",
    "Norfolk Island",
    "Northern Mariana Islands",
    "Palau",
    "Pitcairn Islands",
    "Samoa",
    "Solomon Island",
    "Solomon Islands",
    "Timor-Leste",
    "Timorese",
    "Tokelau",
    "Tonga",
    "Tuvalu",
    "Vanuatu",
    "Wallis and Futuna",
];

pub const MENA_COUNTRIES: &[&str] = &[
    "Algeria",
    "Bahrain",
    "Egypt",
    "Iran",
    "Iraq",
    "Israel",
    "Jordan",
    "Kuwait",
    "Lebanese",
    "Lebanon",
    "Libya",
    "Moroccan",
    "Morocco",
    "Oman",
    "Palestine",
    "Palestinian",
    "Qatar",
    "Sahrawi",
    "Saudi",
    "Saudi Arabia",
    "Syria",
    "Tunisia",
    "Turkey",
    "Turkish",
    "United Arab Emirates",
    "Yemen",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountryClass {
    Mena,
    Nhpi,
    Other,
}

pub fn classify_country(country: &str) -> CountryClass {
    let c = country.trim();
    if MENA_COUNTRIES.iter().any(|m| m.eq_ignore_ascii_case(c)) {
        CountryClass::Mena
    } else if NHPI_COUNTRIES.iter().any(|m| m.eq_ignore_ascii_case(c)) {
        CountryClass::Nhpi
    } else {
        CountryClass::Other
    }
}

/// Lookup key of a name: the normalized first name, lowercased.
pub fn name_key(name: &str) -> Option<String> {
    first_name(name).map(|n| n.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameCounts {
    /// Persons carrying the name.
    pub support: u64,
    /// Persons per provider category, aligned with `Provider::categories`.
    pub counts: Vec<u64>,
}

/// First name -> fractional race likelihoods for one provider.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodTable {
    provider: Provider,
    entries: BTreeMap<String, NameCounts>,
    total_persons: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub accepted: u64,
    pub rejected: u64,
    /// Rejected race codes (voter) and their counts.
    pub rejected_codes: BTreeMap<String, u64>,
    pub unusable_names: u64,
}

impl LikelihoodTable {
    pub fn empty(provider: Provider) -> Self {
        Self { provider, entries: BTreeMap::new(), total_persons: 0 }
    }

    pub fn provider(&self) -> Provider {
        self.provider
    }

    pub fn total_names(&self) -> usize {
        self.entries.len()
    }

    pub fn total_persons(&self) -> u64 {
        self.total_persons
    }

    pub fn entry(&self, name: &str) -> Option<&NameCounts> {
        self.entries.get(&name_key(name)?)
    }

    pub fn names(&self) -> impl Iterator<Item = (&str, &NameCounts)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Likelihood of `race` for `name`.
    /// `None` when the name is unknown or the race belongs to the other provider.
    pub fn likelihood(&self, name: &str, race: RaceCategory) -> Option<f64> {
        let idx = self.provider.index_of(race)?;
        let e = self.entry(name)?;
        Some(e.counts[idx] as f64 / e.support as f64)
    }

    pub fn likelihoods(&self, name: &str) -> Option<Vec<(RaceCategory, f64)>> {
        let e = self.entry(name)?;
        Some(
            self.provider.categories().iter().zip(&e.counts).map(|(&r, &c)| (r, c as f64 / e.support as f64)).collect(),
        )
    }

    /// Persons in `race` over all persons in the table.
    pub fn category_share(&self, race: RaceCategory) -> Option<f64> {
        let idx = self.provider.index_of(race)?;
        if self.total_persons == 0 {
            return None;
        }
        let persons: u64 = self.entries.values().map(|e| e.counts[idx]).sum();
        Some(persons as f64 / self.total_persons as f64)
    }

    /// Builds a table directly from per-name counts.
    pub fn from_counts(provider: Provider, counts: impl IntoIterator<Item = (String, NameCounts)>) -> Self {
        let mut entries = BTreeMap::new();
        let mut total = 0;
        for (name, c) in counts {
            if let Some(key) = name_key(&name) {
                total += c.support;
                entries.insert(key, c);
            }
        }
        Self { provider, entries, total_persons: total }
    }

    pub fn without_name(&self, name: &str) -> Self {
        let mut out = self.clone();
        if let Some(key) = name_key(name) {
            if let Some(e) = out.entries.remove(&key) {
                out.total_persons -= e.support;
            }
        }
        out
    }
}

/// Single-pass fold over provider records; shards merge associatively.
#[derive(Debug, Clone)]
pub struct TableBuilder {
    provider: Provider,
    entries: HashMap<String, NameCounts>,
    report: BuildReport,
}

impl TableBuilder {
    pub fn new(provider: Provider) -> Self {
        Self { provider, entries: HashMap::new(), report: BuildReport::default() }
    }

    /// Adds one record; `value` is a race code (voter) or country (country).
    pub fn add(&mut self, name: &str, value: &str) {
        let cat = match self.provider {
            Provider::Voter => match parse_voter_race(value) {
                Some(r) => self.provider.index_of(r),
                None => {
                    self.report.rejected += 1;
                    *self.report.rejected_codes.entry(value.trim().to_string()).or_default() += 1;
                    return;
                }
            },
            Provider::Country => match classify_country(value) {
                CountryClass::Mena => Some(0),
                CountryClass::Nhpi => Some(1),
                CountryClass::Other => None,
            },
        };
        let Some(key) = name_key(name) else {
            self.report.unusable_names += 1;
            return;
        };
        let width = self.provider.categories().len();
        let e = self.entries.entry(key).or_insert_with(|| NameCounts { support: 0, counts: vec![0; width] });
        e.support += 1;
        if let Some(i) = cat {
            e.counts[i] += 1;
        }
        self.report.accepted += 1;
    }

    pub fn merge(mut self, other: TableBuilder) -> Self {
        for (k, v) in other.entries {
            let e = self.entries.entry(k).or_insert_with(|| NameCounts { support: 0, counts: vec![0; v.counts.len()] });
            e.support += v.support;
            for (a, b) in e.counts.iter_mut().zip(&v.counts) {
                *a += b;
            }
        }
        self.report.accepted += other.report.accepted;
        self.report.rejected += other.report.rejected;
        self.report.unusable_names += other.report.unusable_names;
        for (k, v) in other.report.rejected_codes {
            *self.report.rejected_codes.entry(k).or_default() += v;
        }
        self
    }

    pub fn finish(self) -> (LikelihoodTable, BuildReport) {
        let total = self.entries.values().map(|e| e.support).sum();
        let table = LikelihoodTable {
            provider: self.provider,
            entries: self.entries.into_iter().collect(),
            total_persons: total,
        };
        (table, self.report)
    }
}

fn build_table<I, N, V>(provider: Provider, records: I) -> (LikelihoodTable, BuildReport)
where
    I: IntoIterator<Item = (N, V)>,
    N: AsRef<str>,
    V: AsRef<str>,
{
    let mut b = TableBuilder::new(provider);
    for (n, v) in records {
        b.add(n.as_ref(), v.as_ref());
    }
    b.finish()
}

/// Per-name likelihoods over the five voter categories from
/// (first name, self-identified race) records.
pub fn build_voter_table<I, N, V>(records: I) -> (LikelihoodTable, BuildReport)
where
    I: IntoIterator<Item = (N, V)>,
    N: AsRef<str>,
    V: AsRef<str>,
{
    build_table(Provider::Voter, records)
}

/// Per-name MENA and NHPI likelihoods from (first name, country) records.
pub fn build_country_table<I, N, V>(records: I) -> (LikelihoodTable, BuildReport)
where
    I: IntoIterator<Item = (N, V)>,
    N: AsRef<str>,
    V: AsRef<str>,
{
    build_table(Provider::Country, records)
}

/// Sharded build over an in-memory batch.
pub fn build_table_sharded(
    provider: Provider,
    records: &[(String, String)],
    exec: Exec,
) -> (LikelihoodTable, BuildReport) {
    shard_builder(provider, records, exec).finish()
}

fn shard_builder(provider: Provider, records: &[(String, String)], exec: Exec) -> TableBuilder {
    const SHARD: usize = 50_000;
    let shards: Vec<&[(String, String)]> = records.chunks(SHARD).collect();
    exec.map(&shards, |chunk| {
        let mut b = TableBuilder::new(provider);
        for (n, v) in chunk.iter() {
            b.add(n, v);
        }
        b
    })
    .into_iter()
    .fold(TableBuilder::new(provider), TableBuilder::merge)
}

/// Streams a delimited provider file (header naming `first_name` and either
/// `race` or `country`) into a table. Tab-delimited when the header line
/// contains a tab, comma-delimited otherwise.
pub fn build_table_from_file(
    provider: Provider,
    path: &Path,
    exec: Exec,
) -> Result<(LikelihoodTable, BuildReport), DemographyError> {
    let mut reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(io_err(path))?;
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let chained = std::io::Cursor::new(header.into_bytes()).chain(reader);
    let mut csv = csv::ReaderBuilder::new().delimiter(delimiter).flexible(true).from_reader(chained);
    let headers = csv.headers().map_err(|e| format_err(path, e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let value_col = match provider {
        Provider::Voter => "race",
        Provider::Country => "country",
    };
    let name_idx = column("first_name").ok_or_else(|| format_err(path, "missing first_name column"))?;
    let value_idx = column(value_col).ok_or_else(|| format_err(path, format!("missing {value_col} column")))?;

    const BATCH: usize = 400_000;
    let mut builder = TableBuilder::new(provider);
    let mut batch = Vec::with_capacity(BATCH);
    for (i, rec) in csv.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, format!("record {}: {e}", i + 2)))?;
        batch.push((rec.get(name_idx).unwrap_or("").to_string(), rec.get(value_idx).unwrap_or("").to_string()));
        if batch.len() == BATCH {
            builder = builder.merge(shard_builder(provider, &batch, exec));
            batch.clear();
        }
    }
    builder = builder.merge(shard_builder(provider, &batch, exec));
    Ok(builder.finish())
}

const TABLE_MAGIC: &str = "#bias-audit-table v1";

/// Writes a table with a provider header and a SHA-256 over the body.
/// Output bytes depend only on table contents.
pub fn write_table(table: &LikelihoodTable, path: &Path) -> Result<(), DemographyError> {
    let cats: Vec<&str> = table.provider.categories().iter().map(|r| r.as_str()).collect();
    let mut body = format!("name\tsupport\t{}\n", cats.join("\t"));
    for (name, e) in &table.entries {
        body.push_str(name);
        body.push('\t');
        body.push_str(&e.support.to_string());
        for c in &e.counts {
            body.push('\t');
            body.push_str(&c.to_string());
        }
        body.push('\n');
    }
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write!(
        w,
        "{TABLE_MAGIC}\n#provider={}\n#categories={}\n#total_names={}\n#total_persons={}\n#sha256={digest}\n{body}",
        table.provider.as_str(),
        cats.join(","),
        table.total_names(),
        table.total_persons,
    )
    .and_then(|_| w.flush())
    .map_err(io_err(path))
}

pub fn read_table(path: &Path) -> Result<LikelihoodTable, DemographyError> {
    let content = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut meta = HashMap::new();
    let mut body_start = 0;
    for line in content.split_inclusive('\n') {
        if !line.starts_with('#') {
            break;
        }
        body_start += line.len();
        if let Some((k, v)) = line.trim_end()[1..].split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    if !content.starts_with(TABLE_MAGIC) {
        return Err(format_err(path, "not a likelihood table file"));
    }
    let body = &content[body_start..];
    let found = hex::encode(Sha256::digest(body.as_bytes()));
    let expected = meta.get("sha256").cloned().unwrap_or_default();
    if found != expected {
        return Err(DemographyError::Checksum { path: path.display().to_string(), expected, found });
    }
    let provider = match meta.get("provider").map(String::as_str) {
        Some("voter") => Provider::Voter,
        Some("country") => Provider::Country,
        other => return Err(format_err(path, format!("unknown provider {other:?}"))),
    };
    let width = provider.categories().len();
    let mut entries = BTreeMap::new();
    let mut total = 0;
    for (i, line) in body.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let parse =
            |s: &str| s.parse::<u64>().map_err(|_| format_err(path, format!("bad count on body line {}", i + 1)));
        if cols.len() != width + 2 {
            return Err(format_err(path, format!("body line {} has {} columns", i + 1, cols.len())));
        }
        let support = parse(cols[1])?;
        let counts = cols[2..].iter().map(|c| parse(c)).collect::<Result<Vec<_>, _>>()?;
        total += support;
        entries.insert(cols[0].to_string(), NameCounts { support, counts });
    }
    Ok(LikelihoodTable { provider, entries, total_persons: total })
}

/// Both providers.
#[derive(Debug, Clone)]
pub struct Tables {
    pub voter: LikelihoodTable,
    pub country: LikelihoodTable,
}

pub const VOTER_TABLE_FILE: &str = "voter.table.tsv";
pub const COUNTRY_TABLE_FILE: &str = "country.table.tsv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NameLookup {
    pub key: String,
    pub voter: Option<Vec<(RaceCategory, f64)>>,
    pub country: Option<Vec<(RaceCategory, f64)>>,
}

impl Tables {
    pub fn new(voter: LikelihoodTable, country: LikelihoodTable) -> Self {
        Self { voter, country }
    }

    pub fn provider(&self, provider: Provider) -> &LikelihoodTable {
        match provider {
            Provider::Voter => &self.voter,
            Provider::Country => &self.country,
        }
    }

    /// Likelihood of `race` for `name` from the race's own provider.
    pub fn likelihood(&self, name: &str, race: RaceCategory) -> Option<f64> {
        self.provider(race.provider()).likelihood(name, race)
    }

    pub fn lookup(&self, name: &str) -> Option<NameLookup> {
        let key = name_key(name)?;
        Some(NameLookup { voter: self.voter.likelihoods(&key), country: self.country.likelihoods(&key), key })
    }

    pub fn load_dir(dir: &Path) -> Result<Self, DemographyError> {
        Ok(Self {
            voter: read_table(&dir.join(VOTER_TABLE_FILE))?,
            country: read_table(&dir.join(COUNTRY_TABLE_FILE))?,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), DemographyError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_table(&self.voter, &dir.join(VOTER_TABLE_FILE))?;
        write_table(&self.country, &dir.join(COUNTRY_TABLE_FILE))
    }
}

/// Matched / named character accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub named: u64,
    pub matched: u64,
}

impl Coverage {
    pub fn record(&mut self, matched: bool) {
        self.named += 1;
        self.matched += u64::from(matched);
    }

    pub fn ratio(&self) -> Option<f64> {
        (self.named > 0).then(|| self.matched as f64 / self.named as f64)
    }

    pub fn merge(self, other: Coverage) -> Coverage {
        Coverage { named: self.named + other.named, matched: self.matched + other.matched }
    }
}

/// Coverage of a list of named characters against one provider.
pub fn coverage<S: AsRef<str>>(table: &LikelihoodTable, names: &[S]) -> Coverage {
    let mut c = Coverage::default();
    for n in names {
        c.record(table.entry(n.as_ref()).is_some());
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDistribution {
    pub source: String,
    pub proportions: BTreeMap<String, f64>,
}

impl BaselineDistribution {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.proportions.get(key).copied()
    }

    pub fn total(&self) -> f64 {
        self.proportions.values().sum()
    }
}

/// Gender shares from the survey's Female / Male / "None of these" options,
/// renormalized over the three, unrounded.
pub fn gender_baseline() -> BaselineDistribution {
    let (nb, f, m) = (1.7, 50.5, 47.2);
    let total = nb + f + m;
    BaselineDistribution {
        source: "hps2021-gender".into(),
        proportions: [("NB", nb / total), ("F", f / total), ("M", m / total)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    }
}

/// Relationship pair shares: "Something else" split over the three NB
/// pairs, "Gay or lesbian" over F-F and M-M, "Straight" to F-M.
pub fn pair_baseline() -> BaselineDistribution {
    let (other, gay, straight) = (1.9, 3.3, 88.3);
    let total = other + gay + straight;
    let proportions = [
        (PairCategory::NbNb, other / total / 3.0),
        (PairCategory::NbF, other / total / 3.0),
        (PairCategory::NbM, other / total / 3.0),
        (PairCategory::FF, gay / total / 2.0),
        (PairCategory::MM, gay / total / 2.0),
        (PairCategory::FM, straight / total),
    ]
    .into_iter()
    .map(|(k, v)| (k.as_str().to_string(), v))
    .collect();
    BaselineDistribution { source: "hps2021-pairs".into(), proportions }
}

pub const CENSUS_2022: [(RaceCategory, f64); 6] = [
    (RaceCategory::White, 0.589),
    (RaceCategory::Latine, 0.191),
    (RaceCategory::Black, 0.136),
    (RaceCategory::Asian, 0.063),
    (RaceCategory::Aian, 0.013),
    (RaceCategory::Nhpi, 0.004),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaceBaselineSource {
    Census2022,
    Custom(String),
}

impl FromStr for RaceBaselineSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("census2022") {
            Ok(RaceBaselineSource::Census2022)
        } else if s.is_empty() {
            Err("empty baseline source".into())
        } else {
            Ok(RaceBaselineSource::Custom(s.to_string()))
        }
    }
}

/// Race baseline. The census source has six races; MENA comes from the
/// country table's overall MENA share when a table is supplied.
pub fn race_baseline(
    source: &RaceBaselineSource,
    country: Option<&LikelihoodTable>,
) -> Result<BaselineDistribution, DemographyError> {
    let mut dist = match source {
        RaceBaselineSource::Census2022 => BaselineDistribution {
            source: "census2022".into(),
            proportions: CENSUS_2022.iter().map(|(r, v)| (r.as_str().to_string(), *v)).collect(),
        },
        RaceBaselineSource::Custom(path) => read_baseline(Path::new(path))?,
    };
    if !dist.proportions.contains_key("MENA") {
        if let Some(share) = country.and_then(|t| t.category_share(RaceCategory::Mena)) {
            dist.proportions.insert("MENA".into(), share);
        }
    }
    Ok(dist)
}

/// Reads `key<TAB>proportion` rows; `#` lines are comments and a
/// `#source=` line names the distribution.
pub fn read_baseline(path: &Path) -> Result<BaselineDistribution, DemographyError> {
    let content = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut source = path.display().to_string();
    let mut proportions = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end();
        if let Some(s) = line.strip_prefix("#source=") {
            source = s.to_string();
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .or_else(|| line.split_once(','))
            .ok_or_else(|| format_err(path, format!("line {}: expected key and proportion", i + 1)))?;
        let v: f64 = v.trim().parse().map_err(|_| format_err(path, format!("line {}: bad proportion {v:?}", i + 1)))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format_err(path, format!("line {}: proportion {v} outside [0, 1]", i + 1)));
        }
        proportions.insert(k.trim().to_string(), v);
    }
    Ok(BaselineDistribution { source, proportions })
}

pub fn write_baseline(dist: &BaselineDistribution, path: &Path) -> Result<(), DemographyError> {
    let mut out = format!("#source={}\n", dist.source);
    for (k, v) in &dist.proportions {
        out.push_str(&format!("{k}\t{v:?}\n"));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gender_examples() {
        assert_eq!(gender_of(&["she", "her"]), GenderCategory::Feminized);
        assert_eq!(gender_of::<&str>(&[]), GenderCategory::Unspecified);
        assert_eq!(gender_of(&["she", "they"]), GenderCategory::Unsure);
        assert_eq!(gender_of(&["Mr.", "HIS,"]), GenderCategory::Masculinized);
        assert_eq!(gender_of(&["teacher", "Mx"]), GenderCategory::NonBinary);
        assert_eq!(gender_of(&["teacher"]), GenderCategory::Unspecified);
    }

    #[test]
    fn pairs_are_unordered() {
        use GenderCategory::*;
        assert_eq!(pair_of(Feminized, Masculinized), Some(PairCategory::FM));
        assert_eq!(pair_of(Masculinized, Feminized), Some(PairCategory::FM));
        assert_eq!(pair_of(Masculinized, NonBinary), Some(PairCategory::NbM));
        assert_eq!(pair_of(NonBinary, Unsure), None);
        assert_eq!(pair_of(Unspecified, Feminized), None);
        for a in GenderCategory::DEFINED {
            for b in GenderCategory::DEFINED {
                assert_eq!(pair_of(a, b), pair_of(b, a));
                assert!(pair_of(a, b).is_some());
            }
        }
    }

    #[test]
    fn voter_table_fractions() {
        let mut records: Vec<(String, String)> = Vec::new();
        records.extend(std::iter::repeat_n(("SARAH".to_string(), "5".to_string()), 831));
        records.extend(std::iter::repeat_n(("Sarah".to_string(), "Black".to_string()), 100));
        records.extend(std::iter::repeat_n(("sarah".to_string(), "4".to_string()), 69));
        records.push(("Solo".into(), "API".into()));
        records.push(("Solo".into(), "9".into()));
        let (t, report) = build_voter_table(records.iter().map(|(a, b)| (a, b)));
        assert!((t.likelihood("Sarah", RaceCategory::White).unwrap() - 0.831).abs() < 1e-12);
        assert_eq!(t.likelihood("Solo", RaceCategory::Asian), Some(1.0));
        assert_eq!(t.likelihood("Solo", RaceCategory::White), Some(0.0));
        assert_eq!(t.likelihood("Sarah", RaceCategory::Mena), None);
        assert_eq!(report.rejected, 1);
        assert_eq!(report.rejected_codes.get("9"), Some(&1));
        assert_eq!(t.total_persons(), 1001);

        let (empty, _) = build_voter_table(Vec::<(String, String)>::new());
        assert_eq!(empty.total_names(), 0);
        assert_eq!(coverage(&empty, &["Sarah"]).ratio(), Some(0.0));
    }

    #[test]
    fn country_table_fractions() {
        let mut records = vec![("Ahmed".to_string(), "Egypt".to_string()); 712];
        records.extend(vec![("Ahmed".to_string(), "France".to_string()); 288]);
        records.push(("Pierre".into(), "France".into()));
        records.push(("Sione".into(), "tonga".into()));
        let (t, _) = build_country_table(records.iter().map(|(a, b)| (a, b)));
        assert!((t.likelihood("Ahmed", RaceCategory::Mena).unwrap() - 0.712).abs() < 1e-12);
        assert_eq!(t.likelihood("Pierre", RaceCategory::Mena), Some(0.0));
        assert_eq!(t.likelihood("Pierre", RaceCategory::Nhpi), Some(0.0));
        assert_eq!(t.likelihood("Sione", RaceCategory::Nhpi), Some(1.0));
    }

    #[test]
    fn countries() {
        assert_eq!(classify_country("Fiji"), CountryClass::Nhpi);
        assert_eq!(classify_country("egypt"), CountryClass::Mena);
        assert_eq!(classify_country("France"), CountryClass::Other);
        assert_eq!(classify_country(" Saudi Arabia "), CountryClass::Mena);
    }

    #[test]
    fn baselines() {
        let g = gender_baseline();
        assert!((g.get("NB").unwrap() - 1.7 / 99.4).abs() < 1e-15);
        assert!((g.get("NB").unwrap() - 0.017102).abs() < 1e-6);
        assert!((g.get("F").unwrap() - 0.50804).abs() < 1e-5);
        assert!((g.total() - 1.0).abs() < 1e-9);
        let p = pair_baseline();
        assert!((p.get("F-M").unwrap() - 0.94438).abs() < 1e-5);
        assert!((p.get("F-F").unwrap() - 0.01764).abs() < 1e-5);
        assert!((p.total() - 1.0).abs() < 1e-9);
        let r = race_baseline(&RaceBaselineSource::Census2022, None).unwrap();
        assert_eq!(r.get("White"), Some(0.589));
        assert_eq!(r.get("NHPI"), Some(0.004));
        assert_eq!(r.get("MENA"), None);
    }

    #[test]
    fn mena_baseline_from_country_table() {
        let counts = vec![
            ("Ahmed".to_string(), NameCounts { support: 26_738, counts: vec![26_738, 0] }),
            ("John".to_string(), NameCounts { support: 706_165 - 26_738, counts: vec![0, 0] }),
        ];
        let t = LikelihoodTable::from_counts(Provider::Country, counts);
        let r = race_baseline(&RaceBaselineSource::Census2022, Some(&t)).unwrap();
        assert!((r.get("MENA").unwrap() - 26_738.0 / 706_165.0).abs() < 1e-15);
        assert!((r.get("MENA").unwrap() - 0.03786).abs() < 1e-5);
    }

    #[test]
    fn table_and_baseline_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (voter, _) = build_voter_table([("Maria", "4"), ("Maria", "5"), ("José", "4")]);
        let (country, _) = build_country_table([("Amira", "Jordan"), ("Amira", "Chile")]);
        let tables = Tables::new(voter, country);
        tables.write_dir(dir.path()).unwrap();
        let back = Tables::load_dir(dir.path()).unwrap();
        assert_eq!(back.voter, tables.voter);
        assert_eq!(back.country, tables.country);
        let bytes = std::fs::read(dir.path().join(VOTER_TABLE_FILE)).unwrap();
        tables.write_dir(dir.path()).unwrap();
        assert_eq!(bytes, std::fs::read(dir.path().join(VOTER_TABLE_FILE)).unwrap());

        let path = dir.path().join(VOTER_TABLE_FILE);
        let tampered = String::from_utf8(bytes).unwrap().replace("maria\t2\t1", "maria\t2\t2");
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(read_table(&path), Err(DemographyError::Checksum { .. })));

        let b = gender_baseline();
        let bp = dir.path().join("g.tsv");
        write_baseline(&b, &bp).unwrap();
        assert_eq!(read_baseline(&bp).unwrap(), b);
    }

    #[test]
    fn provider_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("voters.csv");
        std::fs::write(&p, "last_name,first_name,race\nDoe,Sarah,5\nRoe,Sarah,3\nPoe,Kim,7\n").unwrap();
        let (t, report) = build_table_from_file(Provider::Voter, &p, Exec::Parallel).unwrap();
        assert_eq!(t.likelihood("sarah", RaceCategory::White), Some(0.5));
        assert_eq!(report.rejected, 1);
        let p = dir.path().join("wiki.tsv");
        std::fs::write(&p, "first_name\tcountry\nAmira\tEgypt\nAmira\tPeru\n").unwrap();
        let (t, _) = build_table_from_file(Provider::Country, &p, Exec::Sequential).unwrap();
        assert_eq!(t.likelihood("Amira", RaceCategory::Mena), Some(0.5));
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "name,race\nA,5\n").unwrap();
        assert!(build_table_from_file(Provider::Voter, &bad, Exec::Sequential).is_err());
    }

    fn race_code() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["1", "2", "3", "4", "5", "6", "white", "API"]).prop_map(String::from)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn voter_table_matches_brute_force(records in prop::collection::vec((prop::sample::select(vec!["ana", "Bo", "cy", "Dee"]), race_code()), 0..300)) {
            let (t, _) = build_voter_table(records.iter().map(|(a, b)| (*a, b.as_str())));
            let sharded = build_table_sharded(Provider::Voter, &records.iter().map(|(a, b)| (a.to_string(), b.clone())).collect::<Vec<_>>(), Exec::Parallel).0;
            prop_assert_eq!(&t, &sharded);
            for name in ["ana", "bo", "cy", "dee"] {
                let valid: Vec<&String> = records.iter().filter(|(n, c)| n.to_lowercase() == name && parse_voter_race(c).is_some()).map(|(_, c)| c).collect();
                match t.likelihoods(name) {
                    None => prop_assert!(valid.is_empty()),
                    Some(ls) => {
                        let sum: f64 = ls.iter().map(|(_, l)| l).sum();
                        prop_assert!((sum - 1.0).abs() < 1e-9);
                        for (race, l) in ls {
                            let hits = valid.iter().filter(|c| parse_voter_race(c) == Some(race)).count();
                            prop_assert!((l - hits as f64 / valid.len() as f64).abs() < 1e-12);
                        }
                    }
                }
            }
        }

        #[test]
        fn gender_is_case_punct_and_order_invariant(mut refs in prop::collection::vec(prop::sample::select(vec!["she", "He", "THEY", "mom", "Mr.", "her,", "x"]), 0..6)) {
            let g = gender_of(&refs);
            let upper: Vec<String> = refs.iter().map(|r| format!("{}!", r.to_uppercase())).collect();
            prop_assert_eq!(gender_of(&upper), g);
            refs.reverse();
            prop_assert_eq!(gender_of(&refs), g);
        }

        #[test]
        fn coverage_monotone_under_removal(names in prop::collection::vec(prop::sample::select(vec!["Ana", "Bo", "Cy", "Zed"]), 1..40), drop in prop::sample::select(vec!["Ana", "Bo", "Cy"])) {
            let (t, _) = build_voter_table([("Ana", "5"), ("Bo", "3"), ("Cy", "2")]);
            let before = coverage(&t, &names).ratio().unwrap();
            let after = coverage(&t.without_name(drop), &names).ratio().unwrap();
            prop_assert!(after <= before);
        }
    }
}
