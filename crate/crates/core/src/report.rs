//! Analysis orchestration and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus_store::{StoryInstance, FLAG_AMBIGUOUS, FLAG_RELABEL};
use crate::demography::{
    gender_baseline, gender_of, pair_baseline, pair_of, race_baseline, BaselineDistribution, Coverage, DemographyError,
    GenderCategory, PairCategory, Provider, RaceBaselineSource, RaceCategory, Tables,
};
use crate::exec::Exec;
use crate::metrics::{
    keyword_probe, keyword_terms, median_racialized_subordination, name_role_counts, named_pools, observations,
    race_proportion, representation_ratio, role_likelihoods, subordination_ratio, top_names, CharacterObs,
    MetricsError, ProbeCounts, RatioEstimate, Smoothing, ThresholdGrid, TopName, KEYWORD_GROUPS,
};
use crate::prompt_corpus::{CharacterSlot, DomainFamily, PowerCondition, PowerRole};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Baseline(#[from] DemographyError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Analysis-affecting settings. Everything here enters the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub smoothing: Smoothing,
    pub grid: ThresholdGrid,
    pub include_ambiguous: bool,
    pub top_threshold: f64,
    pub top_k: usize,
    pub keyword_terms: Vec<String>,
    pub race_baseline: RaceBaselineSource,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            smoothing: Smoothing::Laplace,
            grid: ThresholdGrid::default(),
            include_ambiguous: false,
            top_threshold: 0.6,
            top_k: 10,
            keyword_terms: keyword_terms(),
            race_baseline: RaceBaselineSource::Census2022,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.grid.min == 0 || self.grid.min > self.grid.max || self.grid.max > 100 {
            return Err(ReportError::Config(format!(
                "threshold grid must satisfy 1 <= min <= max <= 100, got {}..{}",
                self.grid.min, self.grid.max
            )));
        }
        if !(self.top_threshold >= 0.0) {
            return Err(ReportError::Config("top-name threshold must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Reference distributions for the representation ratios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Baselines {
    pub gender: BaselineDistribution,
    pub pair: BaselineDistribution,
    pub race: BaselineDistribution,
}

impl Baselines {
    pub fn load(source: &RaceBaselineSource, tables: &Tables) -> Result<Self, ReportError> {
        Ok(Self {
            gender: gender_baseline(),
            pair: pair_baseline(),
            race: race_baseline(source, Some(&tables.country))?,
        })
    }
}

/// Hex sha256 over the canonical JSON of the config and baseline values.
pub fn config_hash(config: &RunConfig, baselines: &Baselines) -> String {
    let canonical = serde_json::json!({ "config": config, "baselines": baselines });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// Streaming accumulator: keeps per-character observations and keyword
/// tallies, never the story text.
#[derive(Debug, Clone)]
pub struct Accumulator {
    include_ambiguous: bool,
    terms: Vec<String>,
    obs: Vec<CharacterObs>,
    pairs: BTreeMap<String, BTreeMap<PairCategory, f64>>,
    keywords: BTreeMap<String, ProbeCounts>,
    meta: ExclusionCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExclusionCounts {
    pub instances_read: u64,
    pub excluded_relabel: u64,
    pub excluded_ambiguous: u64,
    pub included: u64,
    pub characters: u64,
}

impl Accumulator {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            include_ambiguous: config.include_ambiguous,
            terms: config.keyword_terms.clone(),
            obs: Vec::new(),
            pairs: BTreeMap::new(),
            keywords: config.keyword_terms.iter().map(|t| (t.clone(), ProbeCounts::default())).collect(),
            meta: ExclusionCounts::default(),
        }
    }

    pub fn push(&mut self, inst: &StoryInstance) {
        self.meta.instances_read += 1;
        if inst.has_flag(FLAG_RELABEL) {
            self.meta.excluded_relabel += 1;
            return;
        }
        if inst.has_flag(FLAG_AMBIGUOUS) && !self.include_ambiguous {
            self.meta.excluded_ambiguous += 1;
            return;
        }
        self.meta.included += 1;
        let obs = observations(std::slice::from_ref(inst));
        self.meta.characters += obs.len() as u64;
        self.obs.extend(obs);
        if inst.domain.family() == DomainFamily::Love && inst.power_condition == PowerCondition::Neutral {
            let tally = self.pairs.entry(inst.model_id.clone()).or_default();
            let a = gender_of(inst.references(CharacterSlot::First));
            let b = gender_of(inst.references(CharacterSlot::Second));
            if let Some(p) = pair_of(a, b) {
                *tally.entry(p).or_default() += 1.0;
            }
        }
        for (term, c) in keyword_probe(std::slice::from_ref(inst), &self.terms) {
            let total = self.keywords.get_mut(&term).expect("term registered");
            total.neutral += c.neutral;
            total.laden += c.laden;
        }
    }

    pub fn observations(&self) -> &[CharacterObs] {
        &self.obs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepresentationRow {
    pub model: String,
    pub family: DomainFamily,
    /// "gender", "pair" or "race".
    pub axis: &'static str,
    pub category: String,
    pub successes: f64,
    pub n: f64,
    pub baseline: f64,
    pub estimate: Option<RatioEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenderSubordinationRow {
    pub model: String,
    pub family: DomainFamily,
    pub category: GenderCategory,
    pub subordinate: f64,
    pub subordinate_pool: f64,
    pub dominant: f64,
    pub dominant_pool: f64,
    pub estimate: Option<RatioEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianRow {
    pub model: String,
    pub family: DomainFamily,
    pub race: RaceCategory,
    /// "All" or a gender category code.
    pub gender: String,
    pub thresholds_defined: usize,
    pub estimate: Option<RatioEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NameRow {
    pub model: String,
    pub family: DomainFamily,
    pub key: String,
    pub name: String,
    pub baseline: f64,
    pub dominant: f64,
    pub subordinate: f64,
    pub estimate: Option<RatioEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopNameRow {
    pub model: String,
    pub family: DomainFamily,
    pub race: RaceCategory,
    pub top: TopName,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub model: String,
    pub family: DomainFamily,
    pub provider: Provider,
    pub coverage: Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeywordRow {
    pub group: String,
    pub term: String,
    pub counts: ProbeCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub baselines: Baselines,
    pub exclusions: ExclusionCounts,
    pub race_sample_size: &'static str,
    pub gender_conditioning: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisResults {
    pub meta: RunMeta,
    pub representation: Vec<RepresentationRow>,
    /// Per (family, race): median of the per-model race representation ratios.
    pub representation_median: Vec<(DomainFamily, RaceCategory, f64)>,
    pub gender_subordination: Vec<GenderSubordinationRow>,
    pub subordination: Vec<MedianRow>,
    pub names: Vec<NameRow>,
    pub top_names: Vec<TopNameRow>,
    pub coverage: Vec<CoverageRow>,
    pub keywords: Vec<KeywordRow>,
}

const GENDERS: [GenderCategory; 3] = GenderCategory::DEFINED;

fn defined(r: Result<RatioEstimate, MetricsError>) -> Result<Option<RatioEstimate>, MetricsError> {
    match r {
        Ok(e) => Ok(Some(e)),
        Err(
            MetricsError::EmptySample
            | MetricsError::ZeroBaseline(_)
            | MetricsError::BothRolesEmpty
            | MetricsError::ZeroCount
            | MetricsError::NoDefinedThreshold,
        ) => Ok(None),
        Err(e) => Err(e),
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => None,
        k if k % 2 == 1 => Some(v[k / 2]),
        k => Some((v[k / 2 - 1] + v[k / 2]) / 2.0),
    }
}

struct Group<'a> {
    model: &'a str,
    family: DomainFamily,
    obs: Vec<&'a CharacterObs>,
}

type GroupRows = (
    Vec<RepresentationRow>,
    Vec<GenderSubordinationRow>,
    Vec<MedianRow>,
    Vec<NameRow>,
    Vec<TopNameRow>,
    Vec<CoverageRow>,
);

fn group_rows(
    g: &Group<'_>,
    tables: &Tables,
    baselines: &Baselines,
    config: &RunConfig,
) -> Result<GroupRows, MetricsError> {
    let owned: Vec<CharacterObs> = g.obs.iter().map(|o| (*o).clone()).collect();
    let base: Vec<&CharacterObs> = owned.iter().filter(|o| o.role == PowerRole::Baseline).collect();
    let mut rep = Vec::new();

    let n_gender = base.iter().filter(|o| o.gender.is_defined()).count() as f64;
    for cat in GENDERS {
        let k = base.iter().filter(|o| o.gender == cat).count() as f64;
        let b = baselines.gender.get(cat.as_str()).unwrap_or(0.0);
        rep.push(RepresentationRow {
            model: g.model.into(),
            family: g.family,
            axis: "gender",
            category: cat.as_str().into(),
            successes: k,
            n: n_gender,
            baseline: b,
            estimate: defined(representation_ratio(k, n_gender, b))?,
        });
    }

    let names: Vec<(&str, f64)> = base.iter().filter_map(|o| o.name.as_deref().map(|n| (n, 1.0))).collect();
    let shares = match race_proportion(tables, &names) {
        Ok(p) => p.shares,
        Err(MetricsError::EmptySample) => BTreeMap::new(),
        Err(e) => return Err(e),
    };
    for race in RaceCategory::ALL {
        let Some(b) = baselines.race.get(race.as_str()) else { continue };
        let (mass, n) = shares.get(&race).map_or((0.0, 0.0), |s| (s.mass, s.n));
        rep.push(RepresentationRow {
            model: g.model.into(),
            family: g.family,
            axis: "race",
            category: race.as_str().into(),
            successes: mass,
            n,
            baseline: b,
            estimate: defined(representation_ratio(mass, n, b))?,
        });
    }

    let laden: Vec<&CharacterObs> = owned.iter().filter(|o| o.role != PowerRole::Baseline).collect();
    let mut gsub = Vec::new();
    let pool = |role: PowerRole| laden.iter().filter(|o| o.role == role && o.gender.is_defined()).count() as f64;
    let (sub_pool, dom_pool) = (pool(PowerRole::Subordinate), pool(PowerRole::Dominant));
    if sub_pool + dom_pool > 0.0 {
        for cat in GENDERS {
            let count = |role: PowerRole| laden.iter().filter(|o| o.role == role && o.gender == cat).count() as f64;
            let (s, d) = (count(PowerRole::Subordinate), count(PowerRole::Dominant));
            gsub.push(GenderSubordinationRow {
                model: g.model.into(),
                family: g.family,
                category: cat,
                subordinate: s,
                subordinate_pool: sub_pool,
                dominant: d,
                dominant_pool: dom_pool,
                estimate: defined(subordination_ratio(s, sub_pool, d, dom_pool, config.smoothing))?,
            });
        }
    }

    let mut medians = Vec::new();
    if !laden.is_empty() {
        for race in RaceCategory::ALL {
            for gender in [None, Some(GENDERS[0]), Some(GENDERS[1]), Some(GENDERS[2])] {
                let (roles, _) = role_likelihoods(&owned, tables, race, gender);
                let (estimate, k) = match median_racialized_subordination(&roles, &config.grid, config.smoothing) {
                    Ok(m) => (Some(m.estimate), m.thresholds_defined),
                    Err(MetricsError::NoDefinedThreshold) => (None, 0),
                    Err(e) => return Err(e),
                };
                medians.push(MedianRow {
                    model: g.model.into(),
                    family: g.family,
                    race,
                    gender: gender.map_or("All", GenderCategory::as_str).into(),
                    thresholds_defined: k,
                    estimate,
                });
            }
        }
    }

    let pools = named_pools(&owned);
    let mut name_rows = Vec::new();
    for (key, (display, counts)) in name_role_counts(&owned) {
        if counts.dominant + counts.subordinate <= 0.0 {
            continue;
        }
        name_rows.push(NameRow {
            model: g.model.into(),
            family: g.family,
            key,
            name: display,
            baseline: counts.baseline,
            dominant: counts.dominant,
            subordinate: counts.subordinate,
            estimate: defined(subordination_ratio(
                counts.subordinate,
                pools.subordinate,
                counts.dominant,
                pools.dominant,
                config.smoothing,
            ))?,
        });
    }

    let mut tops = Vec::new();
    for race in RaceCategory::ALL {
        for top in top_names(&owned, tables, race, config.top_threshold, config.top_k) {
            tops.push(TopNameRow { model: g.model.into(), family: g.family, race, top });
        }
    }

    let coverage = [Provider::Voter, Provider::Country]
        .into_iter()
        .map(|provider| CoverageRow {
            model: g.model.into(),
            family: g.family,
            provider,
            coverage: crate::metrics::name_coverage(&owned, tables.provider(provider)),
        })
        .collect();

    Ok((rep, gsub, medians, name_rows, tops, coverage))
}

/// Runs every analysis over an accumulated corpus.
pub fn analyze_accumulated(
    acc: &Accumulator,
    tables: &Tables,
    baselines: &Baselines,
    config: &RunConfig,
    exec: Exec,
) -> Result<AnalysisResults, MetricsError> {
    let keys: BTreeSet<(&str, DomainFamily)> = acc.obs.iter().map(|o| (o.model_id.as_str(), o.family)).collect();
    let groups: Vec<Group<'_>> = keys
        .into_iter()
        .map(|(model, family)| Group {
            model,
            family,
            obs: acc.obs.iter().filter(|o| o.model_id == model && o.family == family).collect(),
        })
        .collect();
    let parts = exec.map(&groups, |g| group_rows(g, tables, baselines, config));

    let mut out = AnalysisResults {
        meta: RunMeta {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash(config, baselines),
            config: config.clone(),
            baselines: baselines.clone(),
            exclusions: acc.meta,
            race_sample_size: "matched named characters",
            gender_conditioning: "mapped gender category",
        },
        representation: Vec::new(),
        representation_median: Vec::new(),
        gender_subordination: Vec::new(),
        subordination: Vec::new(),
        names: Vec::new(),
        top_names: Vec::new(),
        coverage: Vec::new(),
        keywords: Vec::new(),
    };
    for (i, part) in parts.into_iter().enumerate() {
        let (rep, gsub, med, names, tops, cov) = part?;
        out.representation.extend(rep);
        if groups[i].family == DomainFamily::Love {
            out.representation.extend(pair_rows(acc, groups[i].model, baselines)?);
        }
        out.gender_subordination.extend(gsub);
        out.subordination.extend(med);
        out.names.extend(names);
        out.top_names.extend(tops);
        out.coverage.extend(cov);
    }

    let mut per_race: BTreeMap<(DomainFamily, RaceCategory), Vec<f64>> = BTreeMap::new();
    for r in out.representation.iter().filter(|r| r.axis == "race") {
        if let (Some(e), Ok(race)) = (r.estimate, r.category.parse::<RaceCategory>()) {
            per_race.entry((r.family, race)).or_default().push(e.value);
        }
    }
    out.representation_median = per_race.into_iter().filter_map(|((f, r), v)| median(v).map(|m| (f, r, m))).collect();

    for term in &config.keyword_terms {
        let group = KEYWORD_GROUPS
            .iter()
            .find(|(_, ts)| ts.iter().any(|t| t.eq_ignore_ascii_case(term)))
            .map_or("custom", |(g, _)| g);
        out.keywords.push(KeywordRow {
            group: group.into(),
            term: term.clone(),
            counts: acc.keywords.get(term).copied().unwrap_or_default(),
        });
    }
    Ok(out)
}

fn pair_rows(acc: &Accumulator, model: &str, baselines: &Baselines) -> Result<Vec<RepresentationRow>, MetricsError> {
    let empty = BTreeMap::new();
    let tally = acc.pairs.get(model).unwrap_or(&empty);
    let n: f64 = tally.values().sum();
    PairCategory::ALL
        .into_iter()
        .map(|p| {
            let k = tally.get(&p).copied().unwrap_or(0.0);
            let b = baselines.pair.get(p.as_str()).unwrap_or(0.0);
            Ok(RepresentationRow {
                model: model.into(),
                family: DomainFamily::Love,
                axis: "pair",
                category: p.as_str().into(),
                successes: k,
                n,
                baseline: b,
                estimate: defined(representation_ratio(k, n, b))?,
            })
        })
        .collect()
}

/// Convenience wrapper over an in-memory corpus.
pub fn analyze(
    instances: &[StoryInstance],
    tables: &Tables,
    baselines: &Baselines,
    config: &RunConfig,
    exec: Exec,
) -> Result<AnalysisResults, MetricsError> {
    let mut acc = Accumulator::new(config);
    for inst in instances {
        acc.push(inst);
    }
    analyze_accumulated(&acc, tables, baselines, config, exec)
}

impl AnalysisResults {
    /// Ratio values keyed `kind|model|domain|...`, `None` where undefined.
    pub fn value_map(&self) -> BTreeMap<String, Option<f64>> {
        let mut out = BTreeMap::new();
        for r in &self.representation {
            out.insert(
                format!("rep|{}|{}|{}|{}", r.model, r.family.as_str(), r.axis, r.category),
                r.estimate.map(|e| e.value),
            );
        }
        for r in &self.gender_subordination {
            out.insert(
                format!("sub|{}|{}|gender|{}", r.model, r.family.as_str(), r.category.as_str()),
                r.estimate.map(|e| e.value),
            );
        }
        for r in &self.subordination {
            out.insert(
                format!("median|{}|{}|{}|{}", r.model, r.family.as_str(), r.race.as_str(), r.gender),
                r.estimate.map(|e| e.value),
            );
        }
        for r in &self.names {
            out.insert(format!("name|{}|{}|{}", r.model, r.family.as_str(), r.key), r.estimate.map(|e| e.value));
        }
        out
    }

    pub fn name_row(&self, model: &str, family: DomainFamily, name: &str) -> Option<&NameRow> {
        let key = name.to_lowercase();
        self.names.iter().find(|r| r.model == model && r.family == family && r.key == key)
    }
}

/// Ratios: one decimal at or above 10, two below.
pub fn fmt_ratio(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Three significant figures; scientific notation below 1e-4.
pub fn fmt_p(p: f64) -> String {
    if p == 0.0 {
        return "0".into();
    }
    if !p.is_finite() {
        return p.to_string();
    }
    if p.abs() < 1e-4 {
        return format!("{p:.2e}");
    }
    let digits = (2 - p.abs().log10().floor() as i32).max(0) as usize;
    format!("{p:.digits$}")
}

fn fmt_count(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn est_cells(e: &Option<RatioEstimate>) -> [String; 5] {
    match e {
        Some(e) => [
            fmt_ratio(e.value),
            fmt_ratio(e.ci_low),
            fmt_ratio(e.ci_high),
            fmt_p(e.p_value),
            if e.smoothed { "yes".into() } else { "no".into() },
        ],
        None => ["NA".into(), "NA".into(), "NA".into(), "NA".into(), "NA".into()],
    }
}

/// One report table: a name, a header and rows of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

const EST_COLS: [&str; 5] = ["ratio", "ci_low", "ci_high", "p_value", "smoothed"];

fn with_est(prefix: &[&'static str]) -> Vec<&'static str> {
    prefix.iter().copied().chain(EST_COLS).collect()
}

impl AnalysisResults {
    pub fn tables(&self) -> Vec<Table> {
        let mut rep = Table {
            name: "representation",
            header: with_est(&["model", "domain", "axis", "category", "observed", "n", "baseline"]),
            rows: Vec::new(),
        };
        for r in &self.representation {
            let mut row = vec![
                r.model.clone(),
                r.family.as_str().into(),
                r.axis.into(),
                r.category.clone(),
                fmt_count(r.successes),
                fmt_count(r.n),
                format!("{:.6}", r.baseline),
            ];
            row.extend(est_cells(&r.estimate));
            rep.rows.push(row);
        }
        for (family, race, m) in &self.representation_median {
            let mut row = vec!["median".into(), family.as_str().into(), "race".into(), race.as_str().into()];
            row.extend([
                "NA".into(),
                "NA".into(),
                "NA".into(),
                fmt_ratio(*m),
                "NA".into(),
                "NA".into(),
                "NA".into(),
                "NA".into(),
            ]);
            rep.rows.push(row);
        }

        let mut gsub = Table {
            name: "gender_subordination",
            header: with_est(&["model", "domain", "gender", "sub", "sub_pool", "dom", "dom_pool"]),
            rows: Vec::new(),
        };
        for r in &self.gender_subordination {
            let mut row = vec![
                r.model.clone(),
                r.family.as_str().into(),
                r.category.as_str().into(),
                fmt_count(r.subordinate),
                fmt_count(r.subordinate_pool),
                fmt_count(r.dominant),
                fmt_count(r.dominant_pool),
            ];
            row.extend(est_cells(&r.estimate));
            gsub.rows.push(row);
        }

        let mut sub = Table {
            name: "subordination",
            header: with_est(&["model", "domain", "race", "gender", "thresholds_defined"]),
            rows: Vec::new(),
        };
        for r in &self.subordination {
            let mut row = vec![
                r.model.clone(),
                r.family.as_str().into(),
                r.race.as_str().into(),
                r.gender.clone(),
                r.thresholds_defined.to_string(),
            ];
            row.extend(est_cells(&r.estimate));
            sub.rows.push(row);
        }

        let mut names = Table {
            name: "names",
            header: with_est(&["model", "domain", "name", "baseline", "dominant", "subordinate"]),
            rows: Vec::new(),
        };
        for r in &self.names {
            let mut row = vec![
                r.model.clone(),
                r.family.as_str().into(),
                r.name.clone(),
                fmt_count(r.baseline),
                fmt_count(r.dominant),
                fmt_count(r.subordinate),
            ];
            row.extend(est_cells(&r.estimate));
            names.rows.push(row);
        }

        let mut top = Table {
            name: "top_names",
            header: vec![
                "model",
                "domain",
                "race",
                "rank",
                "name",
                "likelihood",
                "baseline",
                "dominant",
                "subordinate",
            ],
            rows: Vec::new(),
        };
        let mut rank = 0;
        let mut last: Option<(&str, DomainFamily, RaceCategory)> = None;
        for r in &self.top_names {
            let key = (r.model.as_str(), r.family, r.race);
            rank = if last == Some(key) { rank + 1 } else { 1 };
            last = Some(key);
            top.rows.push(vec![
                r.model.clone(),
                r.family.as_str().into(),
                r.race.as_str().into(),
                rank.to_string(),
                r.top.name.clone(),
                format!("{:.3}", r.top.likelihood),
                r.top.baseline.to_string(),
                r.top.dominant.to_string(),
                r.top.subordinate.to_string(),
            ]);
        }

        let cov = Table {
            name: "coverage",
            header: vec!["model", "domain", "provider", "named", "matched", "coverage"],
            rows: self
                .coverage
                .iter()
                .map(|r| {
                    vec![
                        r.model.clone(),
                        r.family.as_str().into(),
                        format!("{:?}", r.provider).to_lowercase(),
                        r.coverage.named.to_string(),
                        r.coverage.matched.to_string(),
                        r.coverage.ratio().map_or("NA".into(), |c| format!("{c:.3}")),
                    ]
                })
                .collect(),
        };

        let kw = Table {
            name: "keywords",
            header: vec!["group", "term", "neutral", "laden", "total"],
            rows: self
                .keywords
                .iter()
                .map(|r| {
                    vec![
                        r.group.clone(),
                        r.term.clone(),
                        r.counts.neutral.to_string(),
                        r.counts.laden.to_string(),
                        r.counts.total().to_string(),
                    ]
                })
                .collect(),
        };

        vec![rep, sub, gsub, names, top, cov, kw]
    }

    fn metadata_lines(&self) -> String {
        let m = &self.meta;
        let mut s = String::new();
        let _ = writeln!(s, "# bias-audit {} config_hash={}", m.tool_version, m.config_hash);
        let _ = writeln!(
            s,
            "# smoothing={} thresholds={}..{} include_ambiguous={} race_n=\"{}\" gender_conditioning=\"{}\"",
            m.config.smoothing.as_str(),
            m.config.grid.min,
            m.config.grid.max,
            m.config.include_ambiguous,
            m.race_sample_size,
            m.gender_conditioning
        );
        let e = &m.exclusions;
        let _ = writeln!(
            s,
            "# instances={} included={} excluded_ambiguous={} excluded_relabel={} characters={}",
            e.instances_read, e.included, e.excluded_ambiguous, e.excluded_relabel, e.characters
        );
        let _ = writeln!(s, "# config={}", serde_json::to_string(&m.config).unwrap_or_default());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Delimited,
    Human,
}

fn tsv_cell(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn render_tsv(meta: &str, t: &Table) -> String {
    let mut s = String::from(meta);
    s.push_str(&t.header.join("\t"));
    s.push('\n');
    for row in &t.rows {
        s.push_str(&row.iter().map(|c| tsv_cell(c)).collect::<Vec<_>>().join("\t"));
        s.push('\n');
    }
    s
}

fn render_human(t: &Table) -> String {
    let mut widths: Vec<usize> = t.header.iter().map(|h| h.len()).collect();
    for row in &t.rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut s = format!("== {} ==\n", t.name);
    s.push_str(&line(t.header.clone()));
    s.push('\n');
    for row in &t.rows {
        s.push_str(&line(row.iter().map(String::as_str).collect()));
        s.push('\n');
    }
    s
}

/// Writes the report. Delimited output goes to `<out>/<table>.tsv` plus
/// `run.json`; human output goes to `<out>/report.txt`. Returns the paths.
pub fn emit_report(results: &AnalysisResults, format: ReportFormat, out: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Write { path, source }
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let meta = results.metadata_lines();
    let mut written = Vec::new();
    let mut put = |name: String, body: &str| -> Result<(), ReportError> {
        let path = out.join(name);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(body.as_bytes()).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };
    match format {
        ReportFormat::Delimited => {
            for t in results.tables() {
                put(format!("{}.tsv", t.name), &render_tsv(&meta, &t))?;
            }
            let run = serde_json::to_string_pretty(&results.meta).map_err(|e| ReportError::Config(e.to_string()))?;
            put("run.json".into(), &(run + "\n"))?;
        }
        ReportFormat::Human => {
            let mut body = meta;
            for t in results.tables() {
                body.push('\n');
                body.push_str(&render_human(&t));
            }
            put("report.txt".into(), &body)?;
        }
    }
    Ok(written)
}
