use proptest::prelude::*;
use trajimit::constraints::{gaussian_kl, DiagGaussian};
use trajimit::evaluation::{l2_metrics, sample_l2, Distribution, Track};
use trajimit::macro_goal::GridSpec;
use trajimit::observation::{gumbel, gumbel_softmax_with_noise};
use trajimit::roles::{reindex, solve_assignment, RolePermutation};
use trajimit::synthetic::{generate_scenario, min_jerk_segment, ScenarioSpec};
use trajimit::trajectory::Vec2;

fn square(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-50.0..50.0f64, n), n)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn track(n_frames: usize, n_agents: usize) -> impl Strategy<Value = Track> {
    let frame = || prop::collection::vec(prop::collection::vec([-20.0..20.0f64, -20.0..20.0f64], n_agents), n_frames);
    (frame(), frame(), frame()).prop_map(|(p, v, a)| {
        let conv = |x: Vec<Vec<[f64; 2]>>| x.into_iter().map(|f| f.into_iter().collect::<Vec<Vec2>>()).collect();
        Track { positions: conv(p), velocities: conv(v), accelerations: conv(a) }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_is_optimal_and_a_permutation(cost in (1usize..6).prop_flat_map(square)) {
        let a = solve_assignment(&cost).unwrap();
        let n = cost.len();
        let mut seen = vec![false; n];
        for &r in &a.permutation.0 {
            prop_assert!(!seen[r]);
            seen[r] = true;
        }
        let total: f64 = a.permutation.0.iter().enumerate().map(|(k, &r)| cost[k][r]).sum();
        prop_assert!((total - a.total).abs() < 1e-9);
        let best = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(k, &r)| cost[k][r]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        prop_assert!((a.total - best).abs() < 1e-9);
    }

    #[test]
    fn reindex_then_inverse_is_identity(perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(), seed in 0u64..1000) {
        let spec = ScenarioSpec { n_frames: 12, seed, ..ScenarioSpec::default() };
        let (seq, _) = generate_scenario(&spec).unwrap();
        let p = RolePermutation::new(perm).unwrap();
        let there = reindex(&seq, &p).unwrap();
        let back = reindex(&there, &p.inverse()).unwrap();
        prop_assert_eq!(&back.frames, &seq.frames);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(
        m1 in prop::collection::vec(-5.0..5.0f64, 3),
        m2 in prop::collection::vec(-5.0..5.0f64, 3),
        v1 in prop::collection::vec(0.01..10.0f64, 3),
        v2 in prop::collection::vec(0.01..10.0f64, 3),
    ) {
        let p = DiagGaussian::new(m1.clone(), v1.clone());
        let q = DiagGaussian::new(m2, v2);
        prop_assert!(gaussian_kl(&p, &q).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gumbel_softmax_is_a_distribution(
        logits in prop::collection::vec(-10.0..10.0f64, 1..8),
        u in prop::collection::vec(1e-9..1.0f64, 8),
        tau in 0.05..5.0f64,
    ) {
        let eps: Vec<f64> = u[..logits.len()].iter().map(|&x| gumbel(x)).collect();
        let s = gumbel_softmax_with_noise(&logits, &eps, tau);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn best_never_exceeds_mean(truth in track(4, 2), a in track(4, 2), b in track(4, 2), c in track(4, 2)) {
        let m = l2_metrics(&[a, b, c], &truth).unwrap();
        for d in 0..3 {
            prop_assert!(m.best[d] <= m.mean[d] + 1e-12);
        }
    }

    #[test]
    fn l2_is_translation_invariant(truth in track(3, 2), pred in track(3, 2), dx in -30.0..30.0f64, dy in -30.0..30.0f64) {
        let shift = |t: &Track| {
            let mut t = t.clone();
            t.positions.iter_mut().flatten().for_each(|p| { p[0] += dx; p[1] += dy; });
            t
        };
        let before = sample_l2(&pred, &truth, 0).unwrap();
        let after = sample_l2(&shift(&pred), &shift(&truth), 0).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn quartiles_are_ordered(values in prop::collection::vec(-100.0..100.0f64, 1..50)) {
        let d = Distribution::of(&values);
        prop_assert!(d.min <= d.whisker_low && d.whisker_low <= d.q1);
        prop_assert!(d.q1 <= d.median && d.median <= d.q3);
        prop_assert!(d.q3 <= d.whisker_high && d.whisker_high <= d.max);
    }

    #[test]
    fn grid_cells_are_in_range(x in -50.0..150.0f64, y in -50.0..100.0f64) {
        for grid in [GridSpec::basketball(), GridSpec::soccer()] {
            prop_assert!(grid.cell_of([x, y]) < grid.n_cells());
        }
    }

    #[test]
    fn min_jerk_hits_both_endpoints(x0 in [-10.0..10.0f64, -10.0..10.0f64], xf in [-10.0..10.0f64, -10.0..10.0f64], frames in 2usize..40) {
        let dt = 0.1;
        let p = min_jerk_segment(x0, xf, frames as f64 * dt, dt).unwrap();
        prop_assert_eq!(p[0], x0);
        let last = p[p.len() - 1];
        prop_assert!((last[0] - xf[0]).abs() < 1e-12 && (last[1] - xf[1]).abs() < 1e-12);
    }

    #[test]
    fn scenarios_stay_on_court(seed in 0u64..500, noise in 0.0..0.5f64) {
        let spec = ScenarioSpec { n_frames: 30, noise, seed, ..ScenarioSpec::default() };
        let (seq, mask) = generate_scenario(&spec).unwrap();
        for frame in &seq.frames {
            for a in frame {
                prop_assert!(spec.court.contains(a.position));
            }
        }
        for row in &mask.rows {
            prop_assert_eq!(row.iter().map(|&b| b as usize).sum::<usize>(), 3);
        }
    }
}
