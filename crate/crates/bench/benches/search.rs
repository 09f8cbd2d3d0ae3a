use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use cit_core::backends::{synth_roles, EasyRule, SynthWorldSpec};
use cit_core::beam::{run_beam_search, BeamParams};
use cit_core::cit::{cluster_pairwise, normalized_entropy, CitConfig, ClusterSet};
use cit_core::costlab::{CostLedger, Phase, Recorder};
use cit_core::error::RoleError;
use cit_core::mcts::{run_mcts, MctsParams, MctsStyle};
use cit_core::roles::{EquivalenceRole, TransitionMode};
use cit_core::{Action, ActionSource, RoleKind, RoleSet, State};

fn world(k: usize, depth: usize, easy: EasyRule) -> RoleSet {
    synth_roles(
        Arc::new(SynthWorldSpec::new(k, depth, easy, 42.0, 9)),
        TransitionMode::Concatenate,
    )
}

fn bench_beam(c: &mut Criterion) {
    let baseline = world(3, 5, EasyRule::Prefix(0));
    let chained = world(3, 5, EasyRule::Prefix(3));
    c.bench_function("beam_baseline_k3_b5_d5", |b| {
        b.iter(|| {
            let ledger = CostLedger::new("bench");
            let params = BeamParams::new(3, 5, 5);
            run_beam_search(black_box("Find the number."), &params, &baseline, &ledger, 9).unwrap()
        })
    });
    c.bench_function("beam_chained_k3_b5_d5", |b| {
        b.iter(|| {
            let ledger = CostLedger::new("bench");
            let mut params = BeamParams::new(3, 5, 5);
            params.cit = Some(CitConfig::bn_dp());
            run_beam_search(black_box("Find the number."), &params, &chained, &ledger, 9).unwrap()
        })
    });
}

fn bench_mcts(c: &mut Criterion) {
    let roles = world(3, 4, EasyRule::Prefix(0));
    for style in [MctsStyle::Rap, MctsStyle::Rest] {
        let name = match style {
            MctsStyle::Rap => "mcts_rap_n20_k3_d4",
            MctsStyle::Rest => "mcts_rest_n20_k3_d4",
        };
        c.bench_function(name, |b| {
            b.iter(|| {
                let ledger = CostLedger::new("bench");
                let params = MctsParams::new(20, 3, 4, style);
                run_mcts(black_box("Find the number."), &params, &roles, &ledger, 9).unwrap()
            })
        });
    }
}

struct ModOracle {
    modulus: usize,
}

impl EquivalenceRole for ModOracle {
    fn same(
        &self,
        _context: &State,
        a: &Action,
        b: &Action,
        rec: &Recorder,
    ) -> Result<bool, RoleError> {
        rec.record(RoleKind::Equivalence, 1, 1, 0.0, false);
        let i: usize = a.text.trim_start_matches("item ").parse().unwrap();
        let j: usize = b.text.trim_start_matches("item ").parse().unwrap();
        Ok(i % self.modulus == j % self.modulus)
    }
}

fn bench_clustering(c: &mut Criterion) {
    let mut roles = world(2, 2, EasyRule::Prefix(0));
    roles.equivalence = Some(Arc::new(ModOracle { modulus: 3 }));
    let candidates: Vec<Action> =
        (0..12).map(|i| Action::new(format!("item {i}"), ActionSource::Policy)).collect();
    let state = State::root("ctx");
    c.bench_function("cluster_pairwise_n12", |b| {
        b.iter(|| {
            let ledger = CostLedger::new("bench");
            let rec = Recorder::new(&ledger, Phase::Bn, 0);
            cluster_pairwise(&roles, &state, black_box(&candidates), &rec).unwrap()
        })
    });

    let counts: Vec<u64> = (1..=8).collect();
    let canonicals: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
    let set = ClusterSet::from_counts(canonicals, counts);
    c.bench_function("normalized_entropy_8_clusters", |b| {
        b.iter(|| normalized_entropy(black_box(&set)))
    });
}

criterion_group!(benches, bench_beam, bench_mcts, bench_clustering);
criterion_main!(benches);
