use std::collections::BTreeMap;

use bias_audit::corpus_store::{StoryInstance, FLAG_AMBIGUOUS, FLAG_RELABEL};
use bias_audit::demography::{RaceBaselineSource, RaceCategory};
use bias_audit::exec::Exec;
use bias_audit::extraction::heuristic_label_instances;
use bias_audit::metrics::{Smoothing, ThresholdGrid};
use bias_audit::prompt_corpus::{generate_prompts, CharacterSlot, PowerCondition};
use bias_audit::report::{analyze, Baselines, RunConfig};
use bias_audit::synth_oracle::{
    brute_force_metrics, generate_corpus, synth_tables, GenderMix, OracleConfig, SynthName, SynthParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRACKED: &[&str] = &["Juan", "Maria", "Priya", "Jamal", "Amari", "Ahmed", "Hiroshi"];
const OTHER: &[&str] = &["John", "Sarah", "Emily", "Michael", "Hannah", "Ethan", "Olivia", "Noah"];

fn random_likelihoods(rng: &mut ChaCha8Rng) -> BTreeMap<RaceCategory, f64> {
    let voter =
        [RaceCategory::White, RaceCategory::Latine, RaceCategory::Black, RaceCategory::Asian, RaceCategory::Aian];
    let weights: Vec<f64> =
        voter.iter().map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random::<f64>() }).collect();
    let total: f64 = weights.iter().sum::<f64>() + rng.random::<f64>() * 0.2;
    let mut out: BTreeMap<RaceCategory, f64> = if total == 0.0 {
        BTreeMap::new()
    } else {
        voter.iter().zip(&weights).map(|(r, w)| (*r, (w / total * 1000.0).floor() / 1000.0)).collect()
    };
    if rng.random_bool(0.3) {
        out.insert(RaceCategory::Mena, rng.random_range(0..=1000) as f64 / 1000.0);
    }
    out
}

fn random_params(rng: &mut ChaCha8Rng) -> SynthParams {
    let mut names = Vec::new();
    for (pool, tracked) in [(TRACKED, true), (OTHER, false)] {
        for n in pool.iter().take(rng.random_range(2..=pool.len())) {
            names.push(SynthName { name: n.to_string(), likelihoods: random_likelihoods(rng), tracked });
        }
    }
    let rho = [0.25, 0.5, 1.0, 2.0, 4.0][rng.random_range(0..5)];
    let tracked_share = rng.random_range(0.0..=1.0f64).min(1.0 / rho);
    let nb = rng.random_range(0.0..0.3);
    let f = rng.random_range(0.0..(1.0 - nb));
    let conditions = match rng.random_range(0..3) {
        0 => vec![PowerCondition::Laden],
        1 => vec![PowerCondition::Neutral],
        _ => vec![],
    };
    SynthParams {
        seed: rng.random(),
        stories_per_prompt: rng.random_range(1..=2),
        model_id: ["alpha", "beta"][rng.random_range(0..2)].into(),
        names,
        tracked_share,
        rho,
        gender_mix: GenderMix { nb, f, m: 1.0 - nb - f },
        conditions,
    }
}

/// Drops, relabels and flags a random subset so that unnamed characters and
/// exclusions are exercised.
fn perturb(corpus: &mut [StoryInstance], rng: &mut ChaCha8Rng) {
    for inst in corpus.iter_mut() {
        match rng.random_range(0..20) {
            0 => inst.add_flag(FLAG_RELABEL),
            1 => inst.add_flag(FLAG_AMBIGUOUS),
            2 => {
                let refs = inst.references(CharacterSlot::First).to_vec();
                inst.set_character(CharacterSlot::First, None, refs);
            }
            3 => {
                let name = inst.name(CharacterSlot::First).map(str::to_string);
                inst.set_character(CharacterSlot::First, name, vec!["she".into(), "he".into()]);
            }
            _ => {}
        }
    }
}

#[test]
fn analysis_matches_brute_force_on_random_corpora() {
    let prompts = generate_prompts().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut compared = 0usize;
    for case in 0..1000 {
        let params = random_params(&mut rng);
        params.validate().unwrap_or_else(|e| panic!("case {case}: {e}"));
        let tables = synth_tables(&params);
        let mut corpus = generate_corpus(&params, &prompts, Exec::Sequential).unwrap();
        assert!(corpus.len() <= 200);
        heuristic_label_instances(&mut corpus, Exec::Sequential);
        perturb(&mut corpus, &mut rng);

        let min = rng.random_range(1..=60);
        let config = RunConfig {
            smoothing: if rng.random_bool(0.75) { Smoothing::Laplace } else { Smoothing::Off },
            grid: ThresholdGrid { min, max: rng.random_range(min..=100) },
            include_ambiguous: rng.random_bool(0.5),
            ..RunConfig::default()
        };
        let baselines = Baselines::load(&RaceBaselineSource::Census2022, &tables).unwrap();
        let ours = analyze(&corpus, &tables, &baselines, &config, Exec::Parallel).unwrap().value_map();
        let oracle = brute_force_metrics(
            &corpus,
            &tables,
            &OracleConfig {
                gender_baseline: &baselines.gender,
                pair_baseline: &baselines.pair,
                race_baseline: &baselines.race,
                laplace: config.smoothing == Smoothing::Laplace,
                threshold_min: config.grid.min,
                threshold_max: config.grid.max,
                include_ambiguous: config.include_ambiguous,
            },
        );
        assert_eq!(ours.keys().collect::<Vec<_>>(), oracle.keys().collect::<Vec<_>>(), "case {case}");
        for (k, want) in &oracle {
            match (want, ours[k]) {
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "case {case} {k}: oracle {a} vs {b}")
                }
                (a, b) => assert_eq!(*a, b, "case {case} {k}"),
            }
        }
        compared += oracle.len();
    }
    assert!(compared > 10_000, "only {compared} values compared");
}
