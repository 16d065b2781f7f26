use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rmablab_core::environment::{generate_cohort, CohortConfig, TransitionModel};
use rmablab_core::reward_dsl::parse;
use rmablab_core::whittle::{simulate_policy, whittle_index, ArmMdp, SimConfig};

const EXPR: &str = "state * (1 + 100 * agent_feats[0] + 100 * agent_feats[1]) + (agent_feats[30] or 0.5) / 2";

fn whittle(c: &mut Criterion) {
    let mdp = ArmMdp {
        transitions: TransitionModel::from_passive(0.2, 0.7, 0.15, 0.05),
        reward: [0.0, 1.0],
        beta: 0.9,
    };
    c.bench_function("whittle_index", |b| {
        b.iter(|| whittle_index(black_box(&mdp), 1, 1e-4, 1e-6).unwrap())
    });
}

fn dsl(c: &mut Criterion) {
    c.bench_function("parse", |b| b.iter(|| parse(black_box(EXPR)).unwrap()));
    let ast = parse(EXPR).unwrap();
    let mut feats = [0.0; 34];
    feats[0] = 1.0;
    feats[30] = 1.0;
    c.bench_function("evaluate", |b| b.iter(|| ast.evaluate(black_box(1), black_box(&feats)).unwrap()));
}

fn simulate(c: &mut Criterion) {
    let cohort = generate_cohort(100, 0.2, 7, &CohortConfig::default()).unwrap();
    let ast = parse(EXPR).unwrap();
    let cfg = SimConfig::default();
    let mut group = c.benchmark_group("simulate_policy");
    group.sample_size(20);
    group.bench_function("n100_b20_t12_e10", |b| {
        b.iter(|| simulate_policy(black_box(&cohort), &ast, &cfg, 11).unwrap())
    });
    group.finish();
}

criterion_group!(benches, whittle, dsl, simulate);
criterion_main!(benches);
