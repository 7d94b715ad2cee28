use proptest::prelude::*;
use vidmask_core::decoder::*;
use vidmask_core::model::{Geometry, MaskVit, ModelConfig, TokenGrid, Window};
use vidmask_core::rng::{splitmix64, Generator};
use vidmask_core::Array;

/// Logits that depend on position and on the current grid contents, so that
/// every decoding step sees a different distribution.
struct HashPredictor {
    seed: u64,
}

impl TokenPredictor for HashPredictor {
    fn predict(&self, grids: &[&TokenGrid], _actions: Option<&Array>) -> vidmask_core::Result<Array> {
        let g0 = grids[0];
        let k = g0.codebook_size;
        let mut data = Vec::new();
        for g in grids {
            let state = g.indices.iter().fold(self.seed, |h, &t| splitmix64(h ^ t as u64));
            for p in 0..g.len() {
                let mut gen = Generator::new(splitmix64(state ^ p as u64));
                data.extend((0..k).map(|_| (gen.normal() * 2.0) as f32));
            }
        }
        Array::new(vec![grids.len(), g0.frames, g0.height, g0.width, k], data)
    }
}

fn geo(frames: usize, h: usize, w: usize) -> Geometry {
    Geometry {
        frames,
        height: h,
        width: w,
    }
}

fn context_grid(g: Geometry, k: usize, context: usize, goal: bool, seed: u64) -> TokenGrid {
    let mut gen = Generator::new(seed);
    let tokens: Vec<usize> = (0..g.tokens()).map(|_| gen.below(k)).collect();
    TokenGrid::with_masked_future(g, k, context, goal, &tokens).unwrap()
}

fn schedule(kind: ScheduleKind, iterations: usize, temperature: f64) -> MaskSchedule {
    MaskSchedule {
        kind,
        iterations,
        temperature,
        top_p: None,
    }
}

#[test]
fn gamma_boundaries_and_monotonicity() {
    for kind in ScheduleKind::ALL {
        assert_eq!(gamma(kind, 0.0).unwrap(), 1.0, "{kind}");
        assert_eq!(gamma(kind, 1.0).unwrap(), 0.0, "{kind}");
        let mut prev = 1.0;
        for i in 1..=1000 {
            let g = gamma(kind, i as f64 / 1000.0).unwrap();
            assert!(g < prev, "{kind} not decreasing at {i}");
            prev = g;
        }
        assert!(gamma(kind, -0.01).is_err());
        assert!(gamma(kind, 1.01).is_err());
    }
}

#[test]
fn curvature_signs_by_second_differences() {
    let n = 200;
    let h = 1.0 / n as f64;
    for kind in ScheduleKind::ALL {
        for i in 1..n {
            let u = i as f64 * h;
            let d2 = gamma(kind, u + h).unwrap() - 2.0 * gamma(kind, u).unwrap() + gamma(kind, u - h).unwrap();
            match kind.curvature() {
                -1 => assert!(d2 < 0.0, "{kind} at {u}: {d2}"),
                1 => assert!(d2 > 0.0, "{kind} at {u}: {d2}"),
                _ => assert!(d2.abs() < 1e-12, "{kind} at {u}: {d2}"),
            }
        }
    }
    let concave: Vec<_> = ScheduleKind::ALL.into_iter().filter(|k| k.curvature() < 0).map(|k| k.name()).collect();
    assert_eq!(concave, ["cosine", "square", "cubic", "exponential"]);
    assert_eq!(ScheduleKind::Sqrt.curvature(), 1);
}

#[test]
fn closed_form_examples() {
    let k = EXP_SHARPNESS;
    let want = (k.exp() - (k * 0.5).exp()) / (k.exp() - 1.0);
    assert!((gamma(ScheduleKind::Exponential, 0.5).unwrap() - want).abs() < 1e-15);
    assert!((gamma(ScheduleKind::Cubic, 0.5).unwrap() - 0.875).abs() < 1e-15);
    assert!((gamma(ScheduleKind::Linear, 0.3).unwrap() - 0.7).abs() < 1e-15);
}

#[test]
fn tokens_to_mask_examples() {
    for kind in ScheduleKind::ALL {
        assert_eq!(tokens_to_mask(kind, 8, 0, 384).unwrap(), 384);
        assert_eq!(tokens_to_mask(kind, 8, 8, 384).unwrap(), 0);
    }
    assert_eq!(tokens_to_mask(ScheduleKind::Cosine, 8, 4, 384).unwrap(), 272);
    let linear: Vec<usize> = (0..=4).map(|t| tokens_to_mask(ScheduleKind::Linear, 4, t, 100).unwrap()).collect();
    assert_eq!(linear, [100, 75, 50, 25, 0]);
    assert!(tokens_to_mask(ScheduleKind::Linear, 4, 5, 100).is_err());
    assert!(tokens_to_mask(ScheduleKind::Linear, 0, 0, 100).is_err());
}

proptest! {
    #[test]
    fn mask_counts_non_increasing(kind in 0usize..6, iterations in 1usize..64, n in 0usize..2000) {
        let kind = ScheduleKind::ALL[kind];
        let counts: Vec<usize> = (0..=iterations).map(|t| tokens_to_mask(kind, iterations, t, n).unwrap()).collect();
        prop_assert_eq!(counts[0], n);
        prop_assert_eq!(counts[iterations], 0);
        for w in counts.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }
}

#[test]
fn zero_temperature_matches_sort_oracle() {
    let g = geo(4, 3, 3);
    let k = 16;
    for seed in 0..5 {
        let grid = context_grid(g, k, 1, false, seed);
        let pred = HashPredictor { seed };
        let logits = pred.predict(&[&grid], None).unwrap();
        let sched = schedule(ScheduleKind::Cosine, 4, 0.0);
        let mut state = DecodeState::new(grid.clone()).unwrap();
        let mut gen = Generator::new(seed + 7);
        let mut oracle_gen = gen.clone();
        select_tokens(logits.data(), &mut state, &sched, &mut gen).unwrap();

        // Independent oracle: inverse-CDF sample per masked position in order,
        // score by log-probability, sort descending, keep the quota.
        let n_pred = 27;
        let quota = n_pred - (std::f64::consts::FRAC_PI_8.cos() * n_pred as f64).ceil() as usize;
        let mut scored = Vec::new();
        for p in 9..36 {
            let row: Vec<f64> = logits.data()[p * k..(p + 1) * k].iter().map(|&x| x as f64).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let u = oracle_gen.uniform();
            let (mut cum, mut tok) = (0.0, k - 1);
            for (c, x) in row.iter().enumerate() {
                cum += (x - m).exp() / z;
                if u < cum {
                    tok = c;
                    break;
                }
            }
            scored.push(((row[tok] - m) - z.ln(), p, tok));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut want = grid.indices.clone();
        for (i, &(_, p, tok)) in scored.iter().enumerate() {
            want[p] = if i < quota { tok } else { k };
        }
        assert_eq!(state.grid.indices, want, "seed {seed}");
        assert_eq!(state.kept_count(), 9 + quota);
    }
}

#[test]
fn single_iteration_fills_everything() {
    let g = geo(3, 2, 2);
    let grid = context_grid(g, 8, 1, false, 1);
    let counter = CountingPredictor::new(&HashPredictor { seed: 1 });
    let out = iterative_decode(&counter, grid, &schedule(ScheduleKind::Cosine, 1, 4.5), None, &mut Generator::new(0))
        .unwrap();
    assert_eq!(counter.calls(), 1);
    assert_eq!(out.masked_count(), 0);
}

#[test]
fn completeness_for_all_schedules_and_step_counts() {
    let g = geo(4, 2, 3);
    let n_pred = 18;
    for kind in ScheduleKind::ALL {
        for iterations in [1, 2, 4, 8, n_pred] {
            for goal in [false, true] {
                let grid = context_grid(g, 12, 1, goal, 3);
                let counter = CountingPredictor::new(&HashPredictor { seed: 5 });
                let out = iterative_decode_batch(
                    &counter,
                    vec![grid.clone(), grid.clone()],
                    &schedule(kind, iterations, 2.0),
                    None,
                    &mut Generator::new(9),
                )
                .unwrap();
                assert_eq!(counter.calls(), iterations, "{kind} T={iterations}");
                assert_eq!(out.forward_passes, iterations);
                for (b, done) in out.grids.iter().enumerate() {
                    assert_eq!(done.masked_count(), 0, "{kind} T={iterations}");
                    assert!(done.indices.iter().all(|&t| t < 12));
                    let per = 6;
                    assert_eq!(done.indices[..per], grid.indices[..per], "context changed");
                    if goal {
                        assert_eq!(done.indices[3 * per..], grid.indices[3 * per..], "goal changed");
                    }
                    let total: usize = out.kept_per_step[b].iter().sum();
                    assert_eq!(total, if goal { 12 } else { n_pred });
                }
            }
        }
    }
}

#[test]
fn linear_with_one_step_per_token_keeps_one_each_step() {
    let g = geo(3, 2, 2);
    let grid = context_grid(g, 8, 1, false, 4);
    let out = iterative_decode_batch(
        &HashPredictor { seed: 2 },
        vec![grid],
        &schedule(ScheduleKind::Linear, 8, 4.5),
        None,
        &mut Generator::new(1),
    )
    .unwrap();
    assert_eq!(out.kept_per_step[0], vec![1; 8]);
    assert_eq!(out.grids[0].masked_count(), 0);
}

#[test]
fn kept_tokens_never_change() {
    let g = geo(4, 3, 3);
    let k = 10;
    let pred = HashPredictor { seed: 11 };
    for kind in ScheduleKind::ALL {
        let sched = schedule(kind, 6, 4.5);
        let mut state = DecodeState::new(context_grid(g, k, 2, false, 8)).unwrap();
        let mut gen = Generator::new(3);
        let mut history: Vec<Option<usize>> = state.kept.iter().zip(&state.grid.indices).map(|(&k, &t)| k.then_some(t)).collect();
        let mut kept_before = state.kept_count();
        for _ in 0..sched.iterations {
            let logits = pred.predict(&[&state.grid], None).unwrap();
            select_tokens(logits.data(), &mut state, &sched, &mut gen).unwrap();
            assert!(state.kept_count() >= kept_before);
            kept_before = state.kept_count();
            for p in 0..state.grid.len() {
                match history[p] {
                    Some(t) => {
                        assert!(state.kept[p]);
                        assert_eq!(state.grid.indices[p], t, "{kind}: kept token at {p} changed");
                    }
                    None if state.kept[p] => history[p] = Some(state.grid.indices[p]),
                    None => assert_eq!(state.grid.indices[p], k, "unkept position not re-masked"),
                }
            }
        }
        assert!(state.is_complete());
        assert!(select_tokens(&vec![0.0; state.grid.len() * k], &mut state, &sched, &mut gen).is_err());
    }
}

#[test]
fn logits_shape_is_checked() {
    let grid = context_grid(geo(2, 2, 2), 4, 1, false, 0);
    let mut state = DecodeState::new(grid).unwrap();
    let r = select_tokens(&[0.0; 5], &mut state, &MaskSchedule::default(), &mut Generator::new(0));
    assert!(r.is_err());
}

#[test]
fn invalid_schedules_are_rejected() {
    let grid = context_grid(geo(2, 2, 2), 4, 1, false, 0);
    let pred = HashPredictor { seed: 0 };
    for bad in [
        schedule(ScheduleKind::Cosine, 0, 1.0),
        schedule(ScheduleKind::Cosine, 4, -1.0),
        MaskSchedule {
            top_p: Some(0.0),
            ..MaskSchedule::default()
        },
    ] {
        assert!(iterative_decode(&pred, grid.clone(), &bad, None, &mut Generator::new(0)).is_err());
    }
}

#[test]
fn decoding_is_seed_deterministic() {
    let g = geo(4, 3, 3);
    let grid = context_grid(g, 16, 1, false, 6);
    let pred = HashPredictor { seed: 4 };
    let run = |seed| iterative_decode(&pred, grid.clone(), &MaskSchedule::default(), None, &mut Generator::new(seed)).unwrap();
    assert_eq!(run(1), run(1));
    assert_ne!(run(1).indices, run(2).indices);
}

#[test]
fn top_p_decoding_only_samples_from_nucleus() {
    let g = geo(2, 2, 2);
    let grid = context_grid(g, 6, 1, false, 2);
    // Position-independent logits with one dominant class.
    struct Peaked;
    impl TokenPredictor for Peaked {
        fn predict(&self, grids: &[&TokenGrid], _: Option<&Array>) -> vidmask_core::Result<Array> {
            let n = grids[0].len();
            let row = [5.0f32, 0.0, 0.0, 0.0, 0.0, 0.0];
            Array::new(vec![grids.len(), 2, 2, 2, 6], row.repeat(n * grids.len()))
        }
    }
    let sched = MaskSchedule {
        top_p: Some(0.9),
        ..MaskSchedule::default()
    };
    for seed in 0..20 {
        let out = iterative_decode(&Peaked, grid.clone(), &sched, None, &mut Generator::new(seed)).unwrap();
        assert!(out.indices[4..].iter().all(|&t| t == 0));
    }
}

#[test]
fn real_model_decode_contract() {
    let cfg = ModelConfig {
        blocks: 1,
        embed_dim: 16,
        heads: 2,
        ff_dim: 32,
        frames: 4,
        grid_height: 4,
        grid_width: 4,
        spatial_window: Window::new(1, 4, 4),
        st_window: Window::new(4, 2, 2),
        codebook_size: 8,
        ..ModelConfig::default()
    };
    let model = MaskVit::new(cfg.clone(), &mut Generator::new(0)).unwrap();
    let grid = context_grid(cfg.geometry(), 8, 2, false, 0);
    let counter = CountingPredictor::new(&model);
    let sched = MaskSchedule::default();
    let out = iterative_decode_batch(&counter, vec![grid.clone(); 3], &sched, None, &mut Generator::new(5)).unwrap();
    assert_eq!(counter.calls(), sched.iterations);
    for g in &out.grids {
        assert_eq!(g.masked_count(), 0);
        assert_eq!(g.indices[..32], grid.indices[..32]);
    }
    let again = iterative_decode_batch(&model, vec![grid; 3], &sched, None, &mut Generator::new(5)).unwrap();
    assert_eq!(out.grids, again.grids);
}

#[test]
fn forward_pass_accounting() {
    let cases = [((15, 16, 16, 24), 3840, 160.0), ((25, 16, 16, 48), 6400, 6400.0 / 48.0), ((10, 16, 16, 5), 2560, 512.0)];
    for ((f, h, w, t), ar, speedup) in cases {
        let c = count_forward_passes(f, h, w, t).unwrap();
        assert_eq!(c.autoregressive, ar);
        assert_eq!(c.iterative, t);
        assert_eq!(c.speedup, speedup);
    }
    assert_eq!(format!("{:.1}", count_forward_passes(25, 16, 16, 48).unwrap().speedup), "133.3");
    assert!(count_forward_passes(0, 16, 16, 5).is_err());
    assert!(count_forward_passes(10, 16, 16, 0).is_err());
}
