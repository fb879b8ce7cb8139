mod common;

use cake_core::engine::{
    decode_simulate, prefill_cascade, prefill_oneshot, EngineConfig, SourceKind, SyntheticSource,
};
use cake_core::eviction::{build_indicator, layer_indicator, PoolKind, PoolSpec};
use cake_core::stats::{spatial_dispersion, temporal_shift, StatSubmatrix};
use cake_core::trace::{synth_generate, AttentionTrace, Pattern, SyntheticSpec};

fn trace(
    pattern: Pattern,
    layers: usize,
    seq_len: usize,
    window: usize,
    seed: u64,
    sharpness: f64,
) -> AttentionTrace {
    synth_generate(&SyntheticSpec {
        pattern,
        layers,
        heads: 2,
        seq_len,
        window,
        seed,
        sharpness,
    })
    .unwrap()
}

fn head_rows(t: &AttentionTrace, layer: usize, head: usize) -> Vec<Vec<f64>> {
    t.block(layer, head)
        .iter_rows()
        .map(|r| r.iter().map(|&x| f64::from(x)).collect())
        .collect()
}

#[test]
fn indicator_matches_straight_line_recomputation() {
    let t = trace(Pattern::Mixed, 4, 96, 12, 21, 2.5);
    for pool in [
        PoolSpec::IDENTITY,
        PoolSpec::default(),
        PoolSpec::new(PoolKind::Avg, 5).unwrap(),
    ] {
        for layer in 0..4 {
            let windows = t.layer_windows::<f64>(layer).unwrap();
            let lib = layer_indicator(&windows, 200.0, pool).unwrap();
            let per_head: Vec<Vec<f64>> = (0..2)
                .map(|h| {
                    common::indicator_scores(
                        &head_rows(&t, layer, h),
                        84,
                        200.0,
                        pool.kernel,
                        pool.kind == PoolKind::Max,
                    )
                })
                .collect();
            assert_eq!(lib.omega_count(), 12);
            for (i, s) in lib.scores()[..84].iter().enumerate() {
                let expected = (per_head[0][i] + per_head[1][i]) / 2.0;
                let got = s.finite().unwrap();
                assert!(
                    (got - expected).abs() <= 1e-12 * expected.abs().max(1e-300),
                    "{got} vs {expected}"
                );
            }
            let single = build_indicator(&windows[1], 200.0, pool).unwrap();
            for (s, want) in single.scores()[..84].iter().zip(&per_head[1]) {
                assert!((s.finite().unwrap() - want).abs() <= 1e-12 * want.abs().max(1e-300));
            }
        }
    }
}

#[test]
fn focused_static_with_extreme_sharpness_has_no_shift() {
    let t = trace(Pattern::FocusedStatic, 1, 64, 8, 3, 200.0);
    for w in t.layer_windows::<f64>(0).unwrap() {
        let v = temporal_shift(&w.stat_submatrix().unwrap()).unwrap();
        assert!(v < 1e-12, "{v}");
    }
}

#[test]
fn dispersed_with_vanishing_sharpness_is_near_uniform() {
    let t = trace(Pattern::Dispersed, 1, 64, 8, 3, 1e-6);
    let target = 56f64.ln();
    for w in t.layer_windows::<f64>(0).unwrap() {
        let sub = w.stat_submatrix().unwrap();
        for r in 0..sub.rows() {
            let row = sub.row(r);
            let mass: f64 = row.iter().sum();
            // raw submatrix rows carry mass 56/(q+1); the row entropy of the
            // same row renormalized over the 56 older columns is ~ln 56
            let normalized: Vec<f64> = row.iter().map(|x| x / mass).collect();
            let m = cake_core::matrix::Matrix::from_rows(&[normalized]).unwrap();
            let h = spatial_dispersion(&StatSubmatrix::new(&m).unwrap()).unwrap();
            assert!((h - target).abs() / target < 0.02, "row {r}: {h}");

            let q = 64 - 8 + r;
            let uniform_raw = 56.0 * ((q + 1) as f64).ln() / (q + 1) as f64;
            let single = cake_core::matrix::Matrix::from_rows(&[row.to_vec()]).unwrap();
            let raw = spatial_dispersion(&StatSubmatrix::new(&single).unwrap()).unwrap();
            assert!(
                (raw - uniform_raw).abs() / uniform_raw < 0.02,
                "row {r}: {raw}"
            );
        }
    }
}

#[test]
fn shifting_hotspots_shift_more_than_static_ones() {
    for seed in 0..10 {
        let shift = |p| {
            let t = trace(p, 1, 128, 16, seed, 4.0);
            t.layer_windows::<f64>(0)
                .unwrap()
                .iter()
                .map(|w| temporal_shift(&w.stat_submatrix().unwrap()).unwrap())
                .sum::<f64>()
        };
        assert!(shift(Pattern::Shifting) > shift(Pattern::FocusedStatic));
    }
}

#[test]
fn cascade_keep_sets_match_brute_force_single_eviction() {
    let t = trace(Pattern::Mixed, 8, 256, 8, 99, 3.0);
    let cfg = EngineConfig::<f64>::new(8 * 60);
    let cascade = prefill_cascade(&t, &cfg).unwrap();
    let oneshot = prefill_oneshot(&t, &cfg).unwrap();
    for (a, b) in cascade
        .final_budgets
        .budgets
        .iter()
        .zip(&oneshot.final_budgets.budgets)
    {
        assert!(a.abs_diff(*b) <= 1);
    }
    for layer in 0..8 {
        let per_head: Vec<Vec<f64>> = (0..2)
            .map(|h| common::indicator_scores(&head_rows(&t, layer, h), 248, 200.0, 7, true))
            .collect();
        let mut tagged: Vec<Option<f64>> = (0..248)
            .map(|i| Some((per_head[0][i] + per_head[1][i]) / 2.0))
            .collect();
        tagged.extend([None; 8]);
        let budget = cascade.final_budgets.budgets[layer];
        assert_eq!(
            cascade.caches[layer].positions(),
            common::keep_set(&tagged, budget).as_slice()
        );
        if budget == oneshot.final_budgets.budgets[layer] {
            assert_eq!(cascade.caches[layer], oneshot.caches[layer]);
        }
    }
}

#[test]
fn uniform_decode_matches_re_simulation() {
    let t = trace(Pattern::Mixed, 3, 64, 8, 5, 3.0);
    let prefill = prefill_cascade(&t, &EngineConfig::<f64>::new(120)).unwrap();
    let mut src = SyntheticSource::new(SourceKind::Uniform, 0);
    let steps = 80;
    let d = decode_simulate(&prefill, &mut src, steps, 200.0, PoolSpec::default()).unwrap();
    for layer in 0..3 {
        let (positions, sizes) = common::decode_uniform(
            prefill.caches[layer].positions(),
            64,
            8,
            prefill.final_budgets.budgets[layer],
            steps,
            200.0,
            7,
        );
        assert_eq!(d.final_positions[layer], positions, "layer {layer}");
        let lib_sizes: Vec<usize> = d.per_step_sizes.iter().map(|s| s[layer]).collect();
        assert_eq!(lib_sizes, sizes);
    }
}
