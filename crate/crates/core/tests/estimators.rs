use bias_audit::corpus_store::StoryInstance;
use bias_audit::demography::{RaceCategory, Tables};
use bias_audit::exec::Exec;
use bias_audit::extraction::heuristic_label_instances;
use bias_audit::metrics::{median_racialized_subordination, role_likelihoods, Smoothing, ThresholdGrid};
use bias_audit::prompt_corpus::{generate_prompts, PowerCondition, PromptSpec};
use bias_audit::report::{Accumulator, RunConfig};
use bias_audit::stats::{log_ratio_interval, wilson_interval};
use bias_audit::synth_oracle::{generate_corpus, synth_tables, SynthParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

fn binomial(rng: &mut ChaCha8Rng, n: u64, p: f64) -> u64 {
    Binomial::new(n, p).unwrap().sample(rng)
}

#[test]
fn wilson_coverage_near_nominal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in [0.05, 0.5, 0.9] {
        let trials = 20_000;
        let hits =
            (0..trials).filter(|_| wilson_interval(binomial(&mut rng, 200, p), 200, 0.95).unwrap().contains(p)).count();
        let cov = hits as f64 / trials as f64;
        assert!((0.93..=0.97).contains(&cov), "p={p}: {cov}");
    }
}

#[test]
fn log_ratio_coverage_with_supported_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (p1, n1, p2, n2) in [(0.1, 400, 0.2, 400), (0.3, 200, 0.3, 300), (0.05, 1000, 0.15, 500)] {
        let truth = p1 / p2;
        let (mut kept, mut hits) = (0, 0);
        while kept < 5000 {
            let a = binomial(&mut rng, n1, p1);
            let b = binomial(&mut rng, n2, p2);
            if a < 10 || b < 10 {
                continue;
            }
            kept += 1;
            hits += usize::from(log_ratio_interval(a, n1, b, n2, 0.95).unwrap().contains(truth));
        }
        let cov = hits as f64 / kept as f64;
        assert!((0.93..=0.97).contains(&cov), "({p1},{n1},{p2},{n2}): {cov}");
    }
}

fn laden_prompts() -> Vec<PromptSpec> {
    generate_prompts().unwrap().into_iter().filter(|p| p.condition == PowerCondition::Laden).collect()
}

fn estimate(corpus: &[StoryInstance], tables: &Tables) -> f64 {
    let mut acc = Accumulator::new(&RunConfig::default());
    for inst in corpus {
        acc.push(inst);
    }
    let (roles, _) = role_likelihoods(acc.observations(), tables, RaceCategory::Latine, None);
    median_racialized_subordination(&roles, &ThresholdGrid::default(), Smoothing::Laplace).unwrap().estimate.value
}

fn mean_log_error(rho: f64, stories: u32, seeds: u64, prompts: &[PromptSpec]) -> f64 {
    let per_prompt = stories / prompts.len() as u32;
    let mut total = 0.0;
    for seed in 0..seeds {
        let mut p = SynthParams::example(seed * 7919 + stories as u64, rho, per_prompt);
        p.tracked_share = 0.1f64.min(1.0 / rho);
        p.conditions = vec![PowerCondition::Laden];
        let tables = synth_tables(&p);
        let mut corpus = generate_corpus(&p, prompts, Exec::Parallel).unwrap();
        heuristic_label_instances(&mut corpus, Exec::Parallel);
        total += (estimate(&corpus, &tables) / rho).ln().abs();
    }
    total / seeds as f64
}

#[test]
fn estimator_recovers_injected_ratio() {
    let prompts = laden_prompts();
    for rho in [0.25, 1.0, 3.0, 50.0] {
        let errors: Vec<f64> = [(1_000, 12), (10_000, 6), (100_000, 2)]
            .into_iter()
            .map(|(n, seeds)| mean_log_error(rho, n, seeds, &prompts))
            .collect();
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "rho={rho}: {errors:?}");
        assert!(errors[2] < 0.08, "rho={rho}: {errors:?}");
    }
}

#[test]
fn scrambled_roles_give_unit_ratio() {
    let prompts = laden_prompts();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = SynthParams::example(rng.random(), 1.0, 400);
    p.conditions = vec![PowerCondition::Laden];
    let tables = synth_tables(&p);
    let mut corpus = generate_corpus(&p, &prompts, Exec::Parallel).unwrap();
    heuristic_label_instances(&mut corpus, Exec::Parallel);
    let est = estimate(&corpus, &tables);
    assert!((est.ln()).abs() < 0.15, "{est}");
}
