use proptest::prelude::*;
use prosody_eval::sweep::{default_grid, evaluation_sentences, plan_sweep, sweep_utterance_count};
use prosody_eval::EvalError;

#[test]
fn footnote_count() {
    assert_eq!(sweep_utterance_count(5, 9, 199, 2, 199, true), 16_517);
}

#[test]
fn desk_default_count() {
    assert_eq!(sweep_utterance_count(5, 9, 20, 1, 0, true), 820);
    let plan = plan_sweep(20, &default_grid(), &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(plan.jobs.len(), 820);
    assert_eq!(plan.points.len(), 45);
    assert!(plan.points.iter().all(|p| p.jobs.len() == 20));
}

#[test]
fn minimal_count() {
    assert_eq!(sweep_utterance_count(1, 1, 1, 1, 0, false), 1);
    assert_eq!(sweep_utterance_count(1, 1, 1, 1, 0, true), 1);
    let plan = plan_sweep(1, &[0.5], &[2]).unwrap();
    assert_eq!(plan.jobs.len(), 1);
    assert_eq!(plan.jobs[0].bias, [0.0, 0.0, 0.5, 0.0, 0.0]);
}

#[test]
fn default_grid_values() {
    assert_eq!(default_grid(), vec![-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0]);
}

#[test]
fn zero_jobs_are_shared_across_dimensions() {
    let plan = plan_sweep(3, &[0.0, 1.0, -1.0], &[0, 4]).unwrap();
    let zero: Vec<_> = plan.points.iter().filter(|p| p.target == 0.0).collect();
    assert_eq!(zero.len(), 2);
    assert_eq!(zero[0].jobs, zero[1].jobs);
    // Points come out with the grid sorted ascending within each dimension.
    let targets: Vec<f64> = plan.points.iter().filter(|p| p.dim == 0).map(|p| p.target).collect();
    assert_eq!(targets, vec![-1.0, 0.0, 1.0]);
}

#[test]
fn bad_plans_are_rejected() {
    assert!(matches!(plan_sweep(0, &[0.0], &[0]), Err(EvalError::Empty(_))));
    assert!(matches!(plan_sweep(1, &[], &[0]), Err(EvalError::Empty(_))));
    assert!(matches!(plan_sweep(1, &[0.0], &[]), Err(EvalError::Empty(_))));
    assert!(matches!(plan_sweep(1, &[1.5], &[0]), Err(EvalError::GridRange(_))));
    assert!(matches!(plan_sweep(1, &[0.0], &[5]), Err(EvalError::Dimension(5))));
}

#[test]
fn evaluation_sentences_are_framed_and_seeded() {
    let a = evaluation_sentences(4, 99).unwrap();
    assert_eq!(a, evaluation_sentences(4, 99).unwrap());
    assert_ne!(a, evaluation_sentences(4, 98).unwrap());
    for s in &a {
        assert_eq!((s[0], s[s.len() - 1]), (0, 0));
        assert!(s[1..s.len() - 1].iter().all(|&id| (1..20).contains(&id)));
    }
}

proptest! {
    #[test]
    fn enumeration_matches_formula(
        dims in proptest::sample::subsequence(vec![0usize, 1, 2, 3, 4], 1..=5),
        steps in proptest::collection::btree_set(-8i32..=8, 1..=9),
        sentences in 1usize..6,
    ) {
        let grid: Vec<f64> = steps.iter().map(|&k| k as f64 / 8.0).collect();
        let plan = plan_sweep(sentences, &grid, &dims).unwrap();
        let expected = sweep_utterance_count(dims.len(), grid.len(), sentences, 1, 0, steps.contains(&0));
        prop_assert_eq!(plan.jobs.len(), expected);
        prop_assert_eq!(plan.points.len(), dims.len() * grid.len());
    }

    #[test]
    fn formula_with_systems_and_baseline(d in 1usize..8, g in 1usize..12, s in 1usize..300, n in 1usize..4, b in 0usize..300) {
        let full = d * g * s * n + b;
        prop_assert_eq!(sweep_utterance_count(d, g, s, n, b, false), full);
        prop_assert_eq!(sweep_utterance_count(d, g, s, n, b, true), full - (d - 1) * n * s);
    }
}
