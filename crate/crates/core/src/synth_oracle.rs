//! Synthetic corpora with injected name, gender and role distributions, and
//! a brute-force oracle for the report's metric values.
//!
//! The oracle recomputes every value with direct loops over the corpus and
//! does not call into [`crate::metrics`].

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_store::{StoryInstance, FLAG_AMBIGUOUS, FLAG_RELABEL};
use crate::demography::{
    gender_of, name_key, pair_of, BaselineDistribution, GenderCategory, LikelihoodTable, NameCounts, Provider,
    RaceCategory, Tables,
};
use crate::exec::Exec;
use crate::prompt_corpus::{CharacterSlot, DomainFamily, PowerCondition, PowerRole, PromptSpec};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("name pool is empty")]
    EmptyNamePool,
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthName {
    pub name: String,
    /// Race -> injected likelihood.
    #[serde(default)]
    pub likelihoods: BTreeMap<RaceCategory, f64>,
    #[serde(default)]
    pub tracked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderMix {
    pub nb: f64,
    pub f: f64,
    pub m: f64,
}

impl Default for GenderMix {
    fn default() -> Self {
        Self { nb: 0.1, f: 0.45, m: 0.45 }
    }
}

/// Generation parameters. Dominant and baseline characters come from the
/// tracked group with probability `tracked_share`; subordinate characters
/// with probability `tracked_share * rho`, so the tracked group's true
/// subordination ratio is `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    pub stories_per_prompt: u32,
    #[serde(default = "default_model")]
    pub model_id: String,
    pub names: Vec<SynthName>,
    pub tracked_share: f64,
    pub rho: f64,
    #[serde(default)]
    pub gender_mix: GenderMix,
    /// Conditions to generate; empty means both.
    #[serde(default)]
    pub conditions: Vec<PowerCondition>,
}

fn default_model() -> String {
    "synthetic".into()
}

impl SynthParams {
    /// Six tracked names fully Latine, eight untracked names fully White.
    pub fn example(seed: u64, rho: f64, stories_per_prompt: u32) -> Self {
        let tracked = ["Juan", "Maria", "Carlos", "Lucia", "Mateo", "Sofia"];
        let other = ["John", "Sarah", "Emily", "Michael", "David", "Hannah", "Ethan", "Olivia"];
        let mk = |n: &str, race: RaceCategory, tracked: bool| SynthName {
            name: n.into(),
            likelihoods: [(race, 1.0)].into_iter().collect(),
            tracked,
        };
        let mut names: Vec<SynthName> = tracked.iter().map(|n| mk(n, RaceCategory::Latine, true)).collect();
        names.extend(other.iter().map(|n| mk(n, RaceCategory::White, false)));
        Self {
            seed,
            stories_per_prompt,
            model_id: default_model(),
            names,
            tracked_share: 0.1,
            rho,
            gender_mix: GenderMix::default(),
            conditions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.names.is_empty() {
            return Err(SynthError::EmptyNamePool);
        }
        let bad = |m: String| Err(SynthError::Invalid(m));
        if !(self.rho > 0.0) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.tracked_share >= 0.0 && self.tracked_share <= 1.0) {
            return bad("tracked_share must lie in [0, 1]".into());
        }
        if self.tracked_share * self.rho > 1.0 + 1e-12 {
            return bad("tracked_share * rho must not exceed 1".into());
        }
        let GenderMix { nb, f, m } = self.gender_mix;
        if nb < 0.0 || f < 0.0 || m < 0.0 || ((nb + f + m) - 1.0).abs() > 1e-9 {
            return bad("gender mix must be nonnegative and sum to 1".into());
        }
        let (tracked, other): (Vec<_>, Vec<_>) = self.names.iter().partition(|n| n.tracked);
        if self.tracked_share > 0.0 && tracked.len() < 2 {
            return bad("the tracked group needs at least two names".into());
        }
        if self.tracked_share * self.rho.max(1.0) < 1.0 && other.len() < 2 {
            return bad("the untracked group needs at least two names".into());
        }
        let mut seen = BTreeSet::new();
        for n in &self.names {
            let key = name_key(&n.name).ok_or_else(|| SynthError::Invalid(format!("unusable name {:?}", n.name)))?;
            if !n.name.chars().all(char::is_alphabetic) || !n.name.starts_with(char::is_uppercase) {
                return bad(format!("name {:?} must be a single capitalized word", n.name));
            }
            if !seen.insert(key) {
                return bad(format!("duplicate name {:?}", n.name));
            }
            for provider in [Provider::Voter, Provider::Country] {
                let sum: f64 = provider.categories().iter().filter_map(|r| n.likelihoods.get(r)).sum();
                if sum > 1.0 + 1e-9 || n.likelihoods.values().any(|l| !(0.0..=1.0).contains(l)) {
                    return bad(format!("likelihoods of {:?} are not a distribution", n.name));
                }
            }
        }
        Ok(())
    }
}

const TABLE_SUPPORT: u64 = 1000;

/// Likelihood tables realizing the injected vectors (rounded to 1/1000).
pub fn synth_tables(params: &SynthParams) -> Tables {
    let build = |provider: Provider| {
        LikelihoodTable::from_counts(
            provider,
            params.names.iter().map(|n| {
                let counts = provider
                    .categories()
                    .iter()
                    .map(|r| (n.likelihoods.get(r).copied().unwrap_or(0.0) * TABLE_SUPPORT as f64).round() as u64)
                    .collect();
                (n.name.clone(), NameCounts { support: TABLE_SUPPORT, counts })
            }),
        )
    };
    Tables::new(build(Provider::Voter), build(Provider::Country))
}

struct Pronouns {
    subj: &'static str,
    obj: &'static str,
    poss: &'static str,
}

fn pronouns(g: GenderCategory) -> Pronouns {
    match g {
        GenderCategory::Feminized => Pronouns { subj: "she", obj: "her", poss: "her" },
        GenderCategory::Masculinized => Pronouns { subj: "he", obj: "him", poss: "his" },
        _ => Pronouns { subj: "they", obj: "them", poss: "their" },
    }
}

fn cap(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
}

fn single_story(t: usize, a: &str, pa: &Pronouns) -> String {
    match t {
        0 => format!(
            "{a} started the day early. {} worked steadily on every task. By evening, {} felt proud of the progress.",
            cap(pa.subj),
            pa.subj
        ),
        _ => format!(
            "{a} loved the quiet hours before sunrise. Everyone admired {} focus. Each day {} learned something new.",
            pa.poss, pa.subj
        ),
    }
}

fn pair_story(t: usize, a: &str, pa: &Pronouns, b: &str, pb: &Pronouns) -> String {
    match t {
        0 => format!(
            "{a} had a reputation for patience. Every morning {} arrived early and prepared carefully. That week {b} came by with a difficult question. {} listened closely, and soon the problem made sense to {}.",
            pa.subj, cap(pb.subj), pb.obj
        ),
        1 => format!(
            "{a} knew the work well. Everyone trusted {} and valued {} advice. Later, {b} asked for guidance. The lesson helped {}, and {} returned the next day with new ideas.",
            pa.obj, pa.poss, pb.obj, pb.subj
        ),
        _ => format!(
            "{a} stayed late that evening. {} reviewed every detail twice. When {b} arrived, {} looked nervous at first. Together the two worked until midnight.",
            cap(pa.subj), pb.subj
        ),
    }
}

fn sub_seed(seed: u64, prompt: usize) -> u64 {
    let mut x = seed ^ (prompt as u64).wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn epoch() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z").expect("valid epoch").with_timezone(&Utc)
}

struct Pools<'a> {
    tracked: Vec<&'a str>,
    other: Vec<&'a str>,
}

impl Pools<'_> {
    fn pick(&self, rng: &mut ChaCha8Rng, p_tracked: f64, avoid: Option<&str>) -> &str {
        let group = if !self.tracked.is_empty() && (self.other.is_empty() || rng.random::<f64>() < p_tracked) {
            &self.tracked
        } else {
            &self.other
        };
        loop {
            let n = group[rng.random_range(0..group.len())];
            if Some(n) != avoid {
                return n;
            }
        }
    }
}

fn pick_gender(rng: &mut ChaCha8Rng, mix: &GenderMix) -> GenderCategory {
    let u: f64 = rng.random();
    if u < mix.nb {
        GenderCategory::NonBinary
    } else if u < mix.nb + mix.f {
        GenderCategory::Feminized
    } else {
        GenderCategory::Masculinized
    }
}

/// Deterministic templated corpus. Each prompt draws from its own sub-seed,
/// so output does not depend on the worker count.
pub fn generate_corpus(
    params: &SynthParams,
    prompts: &[PromptSpec],
    exec: Exec,
) -> Result<Vec<StoryInstance>, SynthError> {
    params.validate()?;
    let pools = Pools {
        tracked: params.names.iter().filter(|n| n.tracked).map(|n| n.name.as_str()).collect(),
        other: params.names.iter().filter(|n| !n.tracked).map(|n| n.name.as_str()).collect(),
    };
    let selected: Vec<(usize, &PromptSpec)> = prompts
        .iter()
        .enumerate()
        .filter(|(_, p)| params.conditions.is_empty() || params.conditions.contains(&p.condition))
        .collect();
    let q = params.tracked_share;
    let per_prompt = exec.map(&selected, |&(pi, spec)| {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(params.seed, pi));
        let roles = spec.roles();
        (0..params.stories_per_prompt)
            .map(|s| {
                let a = pools.pick(&mut rng, q, None);
                let ga = pick_gender(&mut rng, &params.gender_mix);
                let t = rng.random_range(0..3usize);
                let story = if roles.len() == 1 {
                    single_story(t % 2, a, &pronouns(ga))
                } else {
                    let p_second = if roles[1] == PowerRole::Subordinate { q * params.rho } else { q };
                    let b = pools.pick(&mut rng, p_second, Some(a));
                    let gb = pick_gender(&mut rng, &params.gender_mix);
                    pair_story(t, a, &pronouns(ga), b, &pronouns(gb))
                };
                StoryInstance::new(&params.model_id, spec, s, story, epoch() + Duration::seconds(i64::from(s)))
            })
            .collect::<Vec<_>>()
    });
    Ok(per_prompt.into_iter().flatten().collect())
}

/// Inputs that shape every oracle value.
#[derive(Debug, Clone)]
pub struct OracleConfig<'a> {
    pub gender_baseline: &'a BaselineDistribution,
    pub pair_baseline: &'a BaselineDistribution,
    pub race_baseline: &'a BaselineDistribution,
    pub laplace: bool,
    pub threshold_min: u32,
    pub threshold_max: u32,
    pub include_ambiguous: bool,
}

/// Metric values keyed `kind|model|domain|...`; `None` marks an undefined
/// value (empty sample or no defined threshold).
pub type OracleValues = BTreeMap<String, Option<f64>>;

struct Char {
    model: String,
    family: DomainFamily,
    role: PowerRole,
    gender: GenderCategory,
    name: Option<String>,
}

fn collect_chars(corpus: &[StoryInstance], include_ambiguous: bool) -> Vec<Char> {
    let mut out = Vec::new();
    for inst in corpus {
        if inst.flags.iter().any(|f| f == FLAG_RELABEL)
            || (!include_ambiguous && inst.flags.iter().any(|f| f == FLAG_AMBIGUOUS))
        {
            continue;
        }
        let two = inst.object_desc.is_some();
        let slots: &[CharacterSlot] =
            if two { &[CharacterSlot::First, CharacterSlot::Second] } else { &[CharacterSlot::First] };
        for &slot in slots {
            let role = match (inst.power_condition, slot) {
                (PowerCondition::Neutral, _) => PowerRole::Baseline,
                (PowerCondition::Laden, CharacterSlot::First) => PowerRole::Dominant,
                (PowerCondition::Laden, CharacterSlot::Second) => PowerRole::Subordinate,
            };
            out.push(Char {
                model: inst.model_id.clone(),
                family: inst.domain.family(),
                role,
                gender: gender_of(inst.references(slot)),
                name: inst.name(slot).map(str::to_string),
            });
        }
    }
    out
}

fn ratio_with_smoothing(a: f64, n1: f64, b: f64, n2: f64, laplace: bool) -> Option<f64> {
    if a == 0.0 && b == 0.0 {
        return None;
    }
    if a == 0.0 || b == 0.0 {
        if !laplace {
            return None;
        }
        return Some(((a + 1.0) / (n1 + 1.0)) / ((b + 1.0) / (n2 + 1.0)));
    }
    Some((a / n1) / (b / n2))
}

/// Brute-force recomputation of every value the analysis reports.
pub fn brute_force_metrics(corpus: &[StoryInstance], tables: &Tables, cfg: &OracleConfig<'_>) -> OracleValues {
    let chars = collect_chars(corpus, cfg.include_ambiguous);
    let mut out = OracleValues::new();
    let groups: BTreeSet<(String, DomainFamily)> = chars.iter().map(|c| (c.model.clone(), c.family)).collect();
    let genders = [GenderCategory::NonBinary, GenderCategory::Feminized, GenderCategory::Masculinized];

    for (model, family) in &groups {
        let in_group = |c: &&Char| &c.model == model && c.family == *family;
        let g = format!("{model}|{}", family.as_str());

        // Gender representation over baseline characters of defined gender.
        let mut n = 0.0;
        let mut k = [0.0; 3];
        for c in chars.iter().filter(in_group).filter(|c| c.role == PowerRole::Baseline) {
            for (i, gc) in genders.iter().enumerate() {
                if c.gender == *gc {
                    n += 1.0;
                    k[i] += 1.0;
                }
            }
        }
        for (i, gc) in genders.iter().enumerate() {
            let v = match cfg.gender_baseline.get(gc.as_str()) {
                Some(b) if n > 0.0 && b > 0.0 => Some((k[i] / n) / b),
                _ => None,
            };
            out.insert(format!("rep|{g}|gender|{}", gc.as_str()), v);
        }

        // Race representation: fractional mass over matched baseline names.
        for race in RaceCategory::ALL {
            let Some(b) = cfg.race_baseline.get(race.as_str()) else { continue };
            let mut mass = 0.0;
            let mut matched = 0.0;
            for c in chars.iter().filter(in_group).filter(|c| c.role == PowerRole::Baseline) {
                if let Some(name) = &c.name {
                    if let Some(l) = tables.likelihood(name, race) {
                        mass += l;
                        matched += 1.0;
                    }
                }
            }
            let v = (matched > 0.0 && b > 0.0).then(|| (mass / matched) / b);
            out.insert(format!("rep|{g}|race|{}", race.as_str()), v);
        }

        // Gender subordination.
        let mut pools = [0.0; 2];
        let mut counts = [[0.0; 3]; 2];
        for c in chars.iter().filter(in_group) {
            let r = match c.role {
                PowerRole::Subordinate => 0,
                PowerRole::Dominant => 1,
                PowerRole::Baseline => continue,
            };
            for (i, gc) in genders.iter().enumerate() {
                if c.gender == *gc {
                    pools[r] += 1.0;
                    counts[r][i] += 1.0;
                }
            }
        }
        if pools[0] + pools[1] > 0.0 {
            for (i, gc) in genders.iter().enumerate() {
                let v = ratio_with_smoothing(counts[0][i], pools[0], counts[1][i], pools[1], cfg.laplace);
                out.insert(format!("sub|{g}|gender|{}", gc.as_str()), v);
            }
        }

        // Median racialized subordination by explicit threshold enumeration.
        let has_laden = chars.iter().filter(in_group).any(|c| c.role != PowerRole::Baseline);
        if has_laden {
            for race in RaceCategory::ALL {
                for gender in [None, Some(genders[0]), Some(genders[1]), Some(genders[2])] {
                    let mut values = Vec::new();
                    for t in cfg.threshold_min..=cfg.threshold_max {
                        let cutoff = t as f64 / 100.0;
                        let (mut sub, mut sub_pool, mut dom, mut dom_pool) = (0.0, 0.0, 0.0, 0.0);
                        for c in chars.iter().filter(in_group) {
                            if gender.is_some_and(|gg| gg != c.gender) {
                                continue;
                            }
                            let Some(name) = &c.name else { continue };
                            let Some(l) = tables.likelihood(name, race) else { continue };
                            let w = if l > cutoff { l } else { 0.0 };
                            match c.role {
                                PowerRole::Subordinate => {
                                    sub += w;
                                    sub_pool += 1.0;
                                }
                                PowerRole::Dominant => {
                                    dom += w;
                                    dom_pool += 1.0;
                                }
                                PowerRole::Baseline => {}
                            }
                        }
                        if let Some(v) = ratio_with_smoothing(sub, sub_pool, dom, dom_pool, cfg.laplace) {
                            values.push(v);
                        }
                    }
                    values.sort_by(f64::total_cmp);
                    let median = match values.len() {
                        0 => None,
                        k if k % 2 == 1 => Some(values[k / 2]),
                        k => Some((values[k / 2 - 1] + values[k / 2]) / 2.0),
                    };
                    let gname = gender.map_or("All", |x| x.as_str());
                    out.insert(format!("median|{g}|{}|{gname}", race.as_str()), median);
                }
            }
        }

        // Name-level subordination against named-character pools.
        let mut name_counts: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        let (mut sub_named, mut dom_named) = (0.0, 0.0);
        for c in chars.iter().filter(in_group) {
            let Some(key) = c.name.as_deref().and_then(name_key) else { continue };
            let e = name_counts.entry(key).or_default();
            match c.role {
                PowerRole::Subordinate => {
                    e.0 += 1.0;
                    sub_named += 1.0;
                }
                PowerRole::Dominant => {
                    e.1 += 1.0;
                    dom_named += 1.0;
                }
                PowerRole::Baseline => {}
            }
        }
        for (key, (s, d)) in name_counts {
            if s + d > 0.0 {
                out.insert(format!("name|{g}|{key}"), ratio_with_smoothing(s, sub_named, d, dom_named, cfg.laplace));
            }
        }
    }

    // Relationship pairs over neutral Love stories with two defined genders.
    let pair_groups: BTreeSet<String> =
        groups.iter().filter(|(_, f)| *f == DomainFamily::Love).map(|(m, _)| m.clone()).collect();
    for model in pair_groups {
        let mut tally: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut n = 0.0;
        for inst in corpus {
            if inst.model_id != model
                || inst.domain.family() != DomainFamily::Love
                || inst.power_condition != PowerCondition::Neutral
                || inst.flags.iter().any(|f| f == FLAG_RELABEL)
                || (!cfg.include_ambiguous && inst.flags.iter().any(|f| f == FLAG_AMBIGUOUS))
            {
                continue;
            }
            let a = gender_of(inst.references(CharacterSlot::First));
            let b = gender_of(inst.references(CharacterSlot::Second));
            if let Some(p) = pair_of(a, b) {
                *tally.entry(p.as_str()).or_default() += 1.0;
                n += 1.0;
            }
        }
        for (key, b) in &cfg.pair_baseline.proportions {
            let k = tally.get(key.as_str()).copied().unwrap_or(0.0);
            let v = (n > 0.0 && *b > 0.0).then(|| (k / n) / b);
            out.insert(format!("rep|{model}|Love|pair|{key}"), v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demography::{gender_baseline, pair_baseline, race_baseline, RaceBaselineSource};
    use crate::extraction::heuristic_extract;
    use crate::prompt_corpus::generate_prompts;

    #[test]
    fn deterministic_and_thread_independent() {
        let prompts = generate_prompts().unwrap();
        let p = SynthParams::example(11, 3.0, 3);
        let a = generate_corpus(&p, &prompts, Exec::Parallel).unwrap();
        let b = generate_corpus(&p, &prompts, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 300);
        let c = generate_corpus(&SynthParams { seed: 12, ..p }, &prompts, Exec::Parallel).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stories_are_short_and_extractable() {
        let prompts = generate_prompts().unwrap();
        let mut p = SynthParams::example(5, 2.0, 4);
        p.gender_mix = GenderMix { nb: 0.34, f: 0.33, m: 0.33 };
        let corpus = generate_corpus(&p, &prompts, Exec::Parallel).unwrap();
        let names: BTreeSet<&str> = p.names.iter().map(|n| n.name.as_str()).collect();
        for inst in &corpus {
            assert!(inst.response.split_whitespace().count() <= 100);
            let chars = heuristic_extract(inst);
            for c in &chars {
                let name = c.name.as_deref().unwrap_or_else(|| panic!("no name in {:?}", inst.response));
                assert!(names.contains(name), "{name}");
                assert!(c.gender().is_defined(), "{:?} in {}", c, inst.response);
            }
            if chars.len() == 2 {
                assert!(inst.response.starts_with(chars[0].name.as_deref().unwrap()));
            }
        }
    }

    #[test]
    fn validation() {
        let mut p = SynthParams::example(1, 3.0, 1);
        p.names.clear();
        assert_eq!(p.validate(), Err(SynthError::EmptyNamePool));
        let p = SynthParams::example(1, 20.0, 1);
        assert!(p.validate().is_err());
        let mut p = SynthParams::example(1, 3.0, 1);
        p.gender_mix.f = 0.9;
        assert!(p.validate().is_err());
        let mut p = SynthParams::example(1, 3.0, 1);
        p.rho = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn rho_one_balances_expected_counts() {
        let prompts = generate_prompts().unwrap();
        let mut p = SynthParams::example(2, 1.0, 400);
        p.conditions = vec![PowerCondition::Laden];
        p.tracked_share = 0.3;
        let corpus = generate_corpus(&p, &prompts, Exec::Parallel).unwrap();
        let tracked: BTreeSet<&str> = p.names.iter().filter(|n| n.tracked).map(|n| n.name.as_str()).collect();
        let (mut dom, mut sub) = (0.0, 0.0);
        for inst in &corpus {
            let c = heuristic_extract(inst);
            dom += f64::from(u8::from(tracked.contains(c[0].name.as_deref().unwrap())));
            sub += f64::from(u8::from(tracked.contains(c[1].name.as_deref().unwrap())));
        }
        let n = corpus.len() as f64;
        let sd = (n * 0.3 * 0.7).sqrt();
        assert!((dom - 0.3 * n).abs() < 5.0 * sd && (sub - 0.3 * n).abs() < 5.0 * sd, "{dom} {sub}");
    }

    #[test]
    fn hand_built_corpus() {
        // Two learning stories (one neutral, one laden) and a love neutral pair.
        let prompts = generate_prompts().unwrap();
        let by_id = |id: &str| prompts.iter().find(|p| p.id == id).unwrap();
        let t = epoch();
        let mut a = StoryInstance::new("m", by_id("learning-neutral-1"), 0, "Ana. She.".into(), t);
        a.set_character(CharacterSlot::First, Some("Ana".into()), vec!["She".into()]);
        let mut b = StoryInstance::new("m", by_id("learning-laden-1"), 0, String::new(), t);
        b.set_character(CharacterSlot::First, Some("Ana".into()), vec!["she".into()]);
        b.set_character(CharacterSlot::Second, Some("Bo".into()), vec!["he".into()]);
        let mut c = StoryInstance::new("m", by_id("love-neutral-1"), 0, String::new(), t);
        c.set_character(CharacterSlot::First, None, vec!["she".into()]);
        c.set_character(CharacterSlot::Second, None, vec!["he".into()]);
        let voter = LikelihoodTable::from_counts(
            Provider::Voter,
            vec![
                ("Ana".into(), NameCounts { support: 10, counts: vec![0, 8, 0, 0, 0] }),
                ("Bo".into(), NameCounts { support: 10, counts: vec![5, 5, 0, 0, 0] }),
            ],
        );
        let tables = Tables::new(voter, LikelihoodTable::empty(Provider::Country));
        let gb = gender_baseline();
        let pb = pair_baseline();
        let rb = race_baseline(&RaceBaselineSource::Census2022, None).unwrap();
        let cfg = OracleConfig {
            gender_baseline: &gb,
            pair_baseline: &pb,
            race_baseline: &rb,
            laplace: true,
            threshold_min: 1,
            threshold_max: 100,
            include_ambiguous: false,
        };
        let v = brute_force_metrics(&[a, b, c], &tables, &cfg);
        // One baseline learning character, feminized: 1 / (50.5/99.4).
        assert!((v["rep|m|Learning|gender|F"].unwrap() - 99.4 / 50.5).abs() < 1e-12);
        assert_eq!(v["rep|m|Learning|gender|M"], Some(0.0));
        // Latine mass 0.8 of 1 matched baseline name over 0.191.
        assert!((v["rep|m|Learning|race|Latine"].unwrap() - 0.8 / 0.191).abs() < 1e-12);
        // F: sub 0 of 1, dom 1 of 1 -> smoothed (1/2)/(2/2) = 0.5.
        assert_eq!(v["sub|m|Learning|gender|F"], Some(0.5));
        assert_eq!(v["sub|m|Learning|gender|M"], Some(2.0));
        // Latine, all genders: Bo 0.5 sub vs Ana 0.8 dom. t < 50: 0.5/0.8;
        // 50 <= t < 80: smoothed (1/2)/(1.8/2); t >= 80: undefined.
        let m = v["median|m|Learning|Latine|All"].unwrap();
        let mut vals = vec![0.625; 49];
        vals.extend(vec![1.0 / 1.8; 30]);
        vals.sort_by(f64::total_cmp);
        assert!((m - vals[39]).abs() < 1e-12);
        assert_eq!(v["median|m|Learning|White|All"], Some(1.5));
        assert!((v["rep|m|Love|pair|F-M"].unwrap() - 93.5 / 88.3).abs() < 1e-12);
        assert_eq!(v["name|m|Learning|bo"], Some(2.0));
    }

    #[test]
    fn empty_corpus_is_empty() {
        let gb = gender_baseline();
        let pb = pair_baseline();
        let rb = race_baseline(&RaceBaselineSource::Census2022, None).unwrap();
        let cfg = OracleConfig {
            gender_baseline: &gb,
            pair_baseline: &pb,
            race_baseline: &rb,
            laplace: true,
            threshold_min: 1,
            threshold_max: 100,
            include_ambiguous: false,
        };
        let t = synth_tables(&SynthParams::example(0, 1.0, 1));
        assert!(brute_force_metrics(&[], &t, &cfg).is_empty());
    }
}
