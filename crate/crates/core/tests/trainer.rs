use proptest::prelude::*;
use vidmask_core::harness::synth::Split;
use vidmask_core::model::{Geometry, MaskVit, ModelConfig, TokenGrid, Window};
use vidmask_core::rng::Generator;
use vidmask_core::trainer::*;
use vidmask_core::{Array, Tape};

fn toy_config(k: usize) -> ModelConfig {
    ModelConfig {
        blocks: 1,
        embed_dim: 32,
        heads: 2,
        ff_dim: 64,
        frames: 4,
        grid_height: 4,
        grid_width: 4,
        spatial_window: Window::new(1, 4, 4),
        st_window: Window::new(4, 2, 2),
        codebook_size: k,
        ..ModelConfig::default()
    }
}

/// Static clips: one random frame repeated, so the future is a copy of the context.
fn static_corpus(count: usize, k: usize, seed: u64) -> TokenCorpus {
    let geometry = Geometry {
        frames: 4,
        height: 4,
        width: 4,
    };
    let mut gen = Generator::new(seed);
    let videos = (0..count)
        .map(|_| {
            let frame: Vec<usize> = (0..16).map(|_| gen.below(k)).collect();
            frame.repeat(4)
        })
        .collect();
    let splits = (0..count).map(|i| if i % 5 == 0 { Split::Val } else { Split::Train }).collect();
    TokenCorpus {
        geometry,
        codebook_size: k,
        videos,
        actions: None,
        splits,
    }
}

#[test]
fn fixed_ratio_mask_count() {
    let cand: Vec<usize> = (128..512).collect();
    for seed in 0..10 {
        let plan = sample_mask(&mut Generator::new(seed), &cand, MaskMode::fixed(0.75).unwrap());
        assert_eq!(plan.positions.len(), 288);
    }
}

#[test]
fn variable_ratio_mean() {
    let mut gen = Generator::new(42);
    let cand: Vec<usize> = (0..10).collect();
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let plan = sample_mask(&mut gen, &cand, MaskMode::Variable);
        assert!((0.5..1.0).contains(&plan.ratio));
        sum += plan.ratio;
    }
    let mean = sum / n as f64;
    assert!((0.74..=0.76).contains(&mean), "{mean}");
}

proptest! {
    #[test]
    fn plans_obey_count_law(seed in any::<u64>(), start in 0usize..64, n in 1usize..400, fixed in proptest::option::of(0.01f64..0.99)) {
        let cand: Vec<usize> = (start..start + n).collect();
        let mode = fixed.map(|r| MaskMode::fixed(r).unwrap()).unwrap_or(MaskMode::Variable);
        let plan = sample_mask(&mut Generator::new(seed), &cand, mode);
        prop_assert_eq!(plan.positions.len(), (plan.ratio * n as f64 + 1e-9).floor() as usize);
        prop_assert!(plan.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.positions.iter().all(|&p| p >= start && p < start + n));
    }

    #[test]
    fn context_positions_are_never_masked(seed in any::<u64>(), context in 1usize..4, goal in any::<bool>()) {
        let (frames, per) = (5usize, 6usize);
        let cand = future_positions(frames, per, context, goal);
        let plan = sample_mask(&mut Generator::new(seed), &cand, MaskMode::Variable);
        let video: Vec<usize> = (0..frames * per).map(|i| i % 7).collect();
        let input = apply_plan(&video, &plan, 7);
        prop_assert_eq!(&input[..context * per], &video[..context * per]);
        if goal {
            prop_assert_eq!(&input[(frames - 1) * per..], &video[(frames - 1) * per..]);
        }
        let masked = input.iter().filter(|&&t| t == 7).count();
        prop_assert_eq!(masked, plan.positions.len());
    }
}

#[test]
fn goal_mode_never_masks_final_frame() {
    let cand = future_positions(8, 64, 2, true);
    assert_eq!(cand.len(), 5 * 64);
    assert!(cand.iter().all(|&p| (128..448).contains(&p)));
    let mut gen = Generator::new(0);
    for _ in 0..1000 {
        let plan = sample_mask(&mut gen, &cand, MaskMode::Variable);
        assert!(plan.positions.iter().all(|&p| p < 448));
    }
}

#[test]
fn untrained_loss_is_near_uniform() {
    let cfg = ModelConfig {
        codebook_size: 128,
        ..toy_config(128)
    };
    let model: MaskVit = MaskVit::new(cfg, &mut Generator::new(3)).unwrap();
    let corpus = static_corpus(8, 128, 1);
    let cand = future_positions(4, 16, 1, false);
    let mut gen = Generator::new(5);
    let plans: Vec<MaskPlan> = (0..8).map(|_| sample_mask(&mut gen, &cand, MaskMode::Variable)).collect();
    let videos: Vec<&[usize]> = corpus.videos.iter().map(|v| v.as_slice()).collect();
    let loss = mvm_loss(&model, &Tape::no_grad(), &videos, &plans, None, None).unwrap();
    let l = loss.value().item() as f64;
    assert!((l - 128f64.ln()).abs() < 0.3, "{l}");
}

#[test]
fn single_masked_position_equals_direct_nll() {
    let model: MaskVit<f64> = MaskVit::new(toy_config(16), &mut Generator::new(1)).unwrap();
    let corpus = static_corpus(1, 16, 2);
    let video = &corpus.videos[0];
    for p in [16, 37, 63] {
        let plan = MaskPlan {
            ratio: 1.0 / 48.0,
            positions: vec![p],
        };
        let loss = mvm_loss(&model, &Tape::no_grad(), &[video], std::slice::from_ref(&plan), None, None).unwrap();
        let input = apply_plan(video, &plan, 16);
        let grid = TokenGrid::new(corpus.geometry, 16, 1, false, input).unwrap();
        let logits = model.logits(&[&grid], None).unwrap();
        let row = &logits.data()[p * 16..(p + 1) * 16];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let direct = lse - row[video[p]];
        assert!((loss.value().item() - direct).abs() < 1e-12, "{p}");
    }
}

#[test]
fn empty_plan_gives_zero_loss() {
    let model: MaskVit = MaskVit::new(toy_config(16), &mut Generator::new(1)).unwrap();
    let corpus = static_corpus(2, 16, 2);
    let videos: Vec<&[usize]> = corpus.videos.iter().map(|v| v.as_slice()).collect();
    let empty = MaskPlan {
        ratio: 0.0,
        positions: vec![],
    };
    let loss = mvm_loss(&model, &Tape::no_grad(), &videos, &[empty.clone(), empty], None, None).unwrap();
    assert_eq!(loss.value().item(), 0.0);
}

#[test]
fn unmasked_logits_do_not_affect_loss() {
    let mut gen = Generator::new(9);
    let (n, k) = (24, 10);
    let logits = Array::<f64>::from_fn(vec![n, k], |_| gen.normal());
    let targets: Vec<usize> = (0..n).map(|_| gen.below(k)).collect();
    let selected: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let tape = Tape::no_grad();
    let base = tape.constant(logits.clone()).cross_entropy(&targets, &selected).unwrap().value().item();
    for row in (0..n).filter(|i| !selected[*i]) {
        let mut perturbed = logits.clone();
        for c in 0..k {
            perturbed.data_mut()[row * k + c] += gen.normal() * 10.0;
        }
        let l = tape.constant(perturbed).cross_entropy(&targets, &selected).unwrap().value().item();
        assert_eq!(l, base);
    }
}

#[test]
fn mismatched_video_length_is_rejected() {
    let model: MaskVit = MaskVit::new(toy_config(16), &mut Generator::new(1)).unwrap();
    let short = vec![0usize; 10];
    let plan = MaskPlan {
        ratio: 0.5,
        positions: vec![],
    };
    assert!(mvm_loss(&model, &Tape::no_grad(), &[&short], &[plan], None, None).is_err());
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        steps: 150,
        lr: 3e-3,
        warmup: 10,
        context_frames: 1,
        seed,
        log_every: 50,
        eval_clips: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn training_learns_and_is_deterministic() {
    let corpus = static_corpus(60, 16, 4);
    let run = || {
        let mut model = MaskVit::new(toy_config(16), &mut Generator::new(0)).unwrap();
        let mut csv = Vec::new();
        let report = train(&mut model, &corpus, &quick_config(7), Some(&mut csv), None).unwrap();
        (report, String::from_utf8(csv).unwrap(), model)
    };
    let (a, csv_a, model) = run();
    let (b, csv_b, _) = run();
    assert_eq!(a.losses, b.losses);
    assert_eq!(csv_a, csv_b);
    assert_eq!(model.steps_trained(), 150);
    assert!(a.final_val_nll < 0.6 * a.initial_val_nll, "{} -> {}", a.initial_val_nll, a.final_val_nll);
    let lines: Vec<&str> = csv_a.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("150,"));
    assert_eq!(lines[1].split(',').count(), 4);
}

#[test]
fn different_seeds_give_different_curves() {
    let corpus = static_corpus(20, 16, 4);
    let mut cfg = quick_config(1);
    cfg.steps = 5;
    let mut m1 = MaskVit::new(toy_config(16), &mut Generator::new(0)).unwrap();
    let r1 = train(&mut m1, &corpus, &cfg, None, None).unwrap();
    cfg.seed = 2;
    let mut m2 = MaskVit::new(toy_config(16), &mut Generator::new(0)).unwrap();
    let r2 = train(&mut m2, &corpus, &cfg, None, None).unwrap();
    assert_ne!(r1.losses, r2.losses);
}

#[test]
fn training_rejects_bad_inputs() {
    let mut model = MaskVit::new(toy_config(16), &mut Generator::new(0)).unwrap();
    let mut only_val = static_corpus(3, 16, 0);
    only_val.splits = vec![Split::Val; 3];
    assert!(train(&mut model, &only_val, &quick_config(0), None, None).is_err());

    let wrong_k = static_corpus(10, 8, 0);
    assert!(train(&mut model, &wrong_k, &quick_config(0), None, None).is_err());

    let corpus = static_corpus(10, 16, 0);
    let mut cfg = quick_config(0);
    cfg.conditioning = Conditioning::Action;
    assert!(train(&mut model, &corpus, &cfg, None, None).is_err());
    let mut cfg = quick_config(0);
    cfg.context_frames = 4;
    assert!(train(&mut model, &corpus, &cfg, None, None).is_err());
    let mut cfg = quick_config(0);
    cfg.fixed_ratio = Some(1.0);
    assert!(train(&mut model, &corpus, &cfg, None, None).is_err());
}

#[test]
fn checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = static_corpus(10, 16, 0);
    let mut cfg = quick_config(0);
    cfg.steps = 4;
    cfg.checkpoint_every = 2;
    let mut model = MaskVit::new(toy_config(16), &mut Generator::new(0)).unwrap();
    train(&mut model, &corpus, &cfg, None, Some(dir.path())).unwrap();
    assert!(dir.path().join("step_000002").is_dir());
    assert!(dir.path().join("step_000004").is_dir());
    let back: MaskVit = MaskVit::load(dir.path()).unwrap();
    assert_eq!(back.steps_trained(), 4);
}

#[test]
fn eval_plans_are_model_independent() {
    let cand: Vec<usize> = (16..64).collect();
    let a = eval_plan(3, 5, &cand, 0.95).unwrap();
    assert_eq!(a, eval_plan(3, 5, &cand, 0.95).unwrap());
    assert_eq!(a.positions.len(), 45);
    assert_ne!(a.positions, eval_plan(3, 6, &cand, 0.95).unwrap().positions);
}

#[test]
fn corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = static_corpus(6, 16, 3);
    let mut gen = Generator::new(0);
    corpus.actions = Some((0..6).map(|_| Array::from_fn(vec![4, 3], |_| gen.normal() as f32)).collect());
    corpus.save(dir.path()).unwrap();
    let back = TokenCorpus::load(dir.path()).unwrap();
    assert_eq!(back.videos, corpus.videos);
    assert_eq!(back.splits, corpus.splits);
    assert_eq!(back.geometry, corpus.geometry);
    assert_eq!(back.codebook_size, 16);
    assert_eq!(back.actions, corpus.actions);
    assert_eq!(back.action_batch(&[1, 2]).unwrap().shape(), &[2, 4, 3]);
}

#[test]
fn conditioning_parses() {
    assert_eq!("goal".parse::<Conditioning>().unwrap(), Conditioning::Goal);
    assert_eq!("action".parse::<Conditioning>().unwrap(), Conditioning::Action);
    assert!("both".parse::<Conditioning>().is_err());
}
