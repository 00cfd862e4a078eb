//! Invariants of the filter, localization, noise and snapshot layers.

use lpf::experiment::snapshot::{read_snapshot, write_snapshot};
use lpf::filter::{
    assign_children, ess, find_temperature_log, normalize_weights, sus_counts, tempered_log,
};
use lpf::grid::{restrict_field, Decomposition, GridSpec, IndexBox, StaggeredState};
use lpf::localization::{gaspari_cohn, merge_global};
use lpf::metrics::crps;
use lpf::noise::{ModeCoefficients, NoiseBasis};
use lpf::observations::GridPoint;
use proptest::prelude::*;

fn log_weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..5.0, 1..40)
}

fn state(d: usize, vals: &[f64]) -> StaggeredState {
    let g = GridSpec::new(d).unwrap();
    let mut s = StaggeredState::zeros(&g);
    let mut it = vals.iter().cycle();
    for a in [&mut s.u, &mut s.v, &mut s.eta] {
        a.iter_mut().for_each(|x| *x = *it.next().unwrap());
    }
    s.apply_boundary_conditions();
    s
}

proptest! {
    #[test]
    fn normalised_weights_sum_to_one_and_ignore_shifts(lw in log_weights(), shift in -50.0f64..50.0) {
        let w = normalize_weights(&lw).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = lw.iter().map(|x| x + shift).collect();
        let v = normalize_weights(&shifted).unwrap();
        for (a, b) in w.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ess_lies_between_one_and_n(lw in log_weights()) {
        let w = normalize_weights(&lw).unwrap();
        let e = ess(&w);
        prop_assert!(e >= 1.0 - 1e-9 && e <= w.len() as f64 + 1e-9);
    }

    #[test]
    fn tempering_composes_multiplicatively(lw in log_weights(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let once = tempered_log(&lw, a * b).unwrap();
        let inner: Vec<f64> = tempered_log(&lw, a).unwrap().iter().map(|x| x.ln()).collect();
        let twice = tempered_log(&inner, b).unwrap();
        for (x, y) in once.iter().zip(&twice) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn temperature_respects_bracket(lw in log_weights(), remaining in 0.05f64..=1.0, frac in 0.1f64..0.95) {
        let n = lw.len() as f64;
        let n_ess = (frac * n).max(1.0);
        let tol = 1e-6;
        let delta = find_temperature_log(&lw, n_ess, remaining, tol, 0.0).unwrap();
        prop_assert!(delta >= tol.min(remaining) - 1e-15 && delta <= remaining);
        if delta < remaining && delta > tol {
            // The bisection keeps the lower end of the bracket on the feasible side.
            let e = ess(&tempered_log(&lw, delta).unwrap());
            prop_assert!(e >= n_ess - 1e-6);
        }
    }

    #[test]
    fn sus_counts_are_floor_or_ceil(lw in log_weights(), u in 0.0f64..1.0) {
        let w = normalize_weights(&lw).unwrap();
        let n = w.len();
        let c = sus_counts(&w, u / n as f64);
        prop_assert_eq!(c.iter().sum::<usize>(), n);
        for (&ci, &wi) in c.iter().zip(&w) {
            // floor or ceil of N w, allowing for rounding at integer boundaries
            prop_assert!((ci as f64 - n as f64 * wi).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn children_replace_exactly_the_unselected(lw in log_weights(), u in 0.0f64..1.0) {
        let w = normalize_weights(&lw).unwrap();
        let c = sus_counts(&w, u / w.len() as f64);
        let family = assign_children(&c);
        let mut slots: Vec<usize> = family.iter().map(|&(child, _)| child).collect();
        slots.sort_unstable();
        let empty: Vec<usize> = (0..c.len()).filter(|&i| c[i] == 0).collect();
        prop_assert_eq!(slots, empty);
        for (p, &ci) in c.iter().enumerate() {
            let copies = family.iter().filter(|&&(_, q)| q == p).count();
            prop_assert_eq!(copies, ci.saturating_sub(1));
        }
    }

    #[test]
    fn crps_is_nonnegative_and_reduces_to_absolute_error(m in prop::collection::vec(-3.0f64..3.0, 1..15), t in -4.0f64..4.0) {
        prop_assert!(crps(&m, t) >= -1e-12);
        prop_assert!((crps(&m[..1], t) - (m[0] - t).abs()).abs() < 1e-12);
    }

    #[test]
    fn quadratic_variation_ignores_order_within_a_mode(c in prop::collection::vec(0.0f64..1.0, 4 * 6)) {
        let g = GridSpec::new(16).unwrap();
        let modes = |rot: usize| -> Vec<ModeCoefficients> {
            c.chunks(4)
                .map(|q| {
                    let r = |i: usize| q[(i + rot) % 4];
                    ModeCoefficients { alpha: r(0), beta: r(1), gamma: r(2), delta: r(3) }
                })
                .collect()
        };
        let a = NoiseBasis::from_coefficients(&g, 0.1, 2.0, modes(0)).unwrap().quad_variation_rate();
        let b = NoiseBasis::from_coefficients(&g, 0.1, 2.0, modes(3)).unwrap().quad_variation_rate();
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn decomposition_partitions_the_interior(per_axis in 1usize..5, base in 6usize..20, h in 0usize..3, wrap in any::<bool>()) {
        let d = per_axis * base;
        let grid = GridSpec::new(d).unwrap();
        let dec = Decomposition::new(grid, per_axis * per_axis, h, wrap).unwrap();
        let mut hits = vec![0u32; (d + 2) * (d + 2)];
        for (b, _) in dec.pieces() {
            for (i, j) in b.points(&grid) {
                hits[i * (d + 2) + j] += 1;
            }
        }
        for i in 1..=d {
            for j in 1..=d {
                prop_assert_eq!(hits[i * (d + 2) + j], 1);
            }
        }
    }

    #[test]
    fn merging_consistent_blocks_is_the_identity(vals in prop::collection::vec(-2.0f64..2.0, 50), h in 1usize..4) {
        let d = 24;
        let s = state(d, &vals);
        let grid = GridSpec::new(d).unwrap();
        let dec = Decomposition::new(grid, 4, h, true).unwrap();
        let blocks: Vec<_> = dec.boxes.iter().map(|&b| restrict_field(&s, b, &grid).unwrap()).collect();
        let merged = merge_global(&blocks.iter().collect::<Vec<_>>(), &dec).unwrap();
        for i in 1..=d {
            for j in 1..=d {
                prop_assert_eq!(merged.eta[[i, j]], s.eta[[i, j]]);
                prop_assert_eq!(merged.u[[i, j]], s.u[[i, j]]);
            }
        }
    }

    #[test]
    fn damping_is_one_inside_and_decreasing_outside(x in 1usize..=32, y in 1usize..=32, alpha in 0.0f64..200.0) {
        let grid = GridSpec::new(32).unwrap();
        let b = IndexBox::new(5, 14, 5, 14);
        let p = GridPoint { x, y };
        let r = gaspari_cohn(&b, p, alpha, &grid, true);
        prop_assert!((0.0..=1.0).contains(&r));
        if b.contains(&grid, x, y) {
            prop_assert_eq!(r, 1.0);
        } else {
            prop_assert!(gaspari_cohn(&b, p, alpha + 1.0, &grid, true) <= r);
        }
    }

    #[test]
    fn snapshots_round_trip_bit_exactly(d in 2usize..10, vals in prop::collection::vec(any::<f64>(), 1..30)) {
        let s = state(d, &vals);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &s).unwrap();
        let back = read_snapshot(&buf[..]).unwrap();
        for (a, b) in [(&s.u, &back.u), (&s.v, &back.v), (&s.eta, &back.eta)] {
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
