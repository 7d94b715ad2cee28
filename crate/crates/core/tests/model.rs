mod common;

use common::reference::dense_attention;
use common::{param_grad_check, project, random_array};
use vidmask_core::model::{Block, Geometry, MaskVit, ModelConfig, TokenGrid, WindowAttention, Window};
use vidmask_core::rng::Generator;
use vidmask_core::tensor::ParamStore;
use vidmask_core::{Array, Tape};

fn attention_layer(dim: usize, heads: usize, window: Window, seed: u64) -> (ParamStore<f64>, WindowAttention) {
    let mut store = ParamStore::new();
    let mut gen = Generator::new(seed);
    let layer = WindowAttention::new(&mut store, "attn", dim, heads, window, &mut gen);
    // Larger weights than the training init so that attention is far from uniform.
    let mut g = Generator::new(seed ^ 0x55);
    for p in store.iter_mut() {
        p.value = Array::from_fn(p.value.shape().to_vec(), |_| g.normal() * 0.5);
    }
    (store, layer)
}

fn run(store: &ParamStore<f64>, layer: &WindowAttention, x: &Array<f64>) -> Array<f64> {
    let tape = Tape::no_grad();
    layer.forward(&tape, store, &tape.constant(x.clone())).unwrap().value().clone()
}

#[test]
fn full_window_matches_dense_reference() {
    for seed in 0..5 {
        let mut gen = Generator::new(100 + seed);
        let (t, h, w, d) = (3, 4, 2, 8);
        let x = random_array(&[2, t, h, w, d], &mut gen);
        let (store, layer) = attention_layer(d, 2, Window::new(t, h, w), seed);
        let got = run(&store, &layer, &x);
        let want = dense_attention(&store, &layer, &x);
        assert!(got.max_abs_diff(&want) < 1e-10, "seed {seed}");
    }
}

#[test]
fn spatial_window_at_one_frame_is_full_attention() {
    let mut gen = Generator::new(7);
    let x = random_array(&[1, 1, 4, 4, 8], &mut gen);
    let (store, layer) = attention_layer(8, 4, Window::new(1, 4, 4), 3);
    assert!(run(&store, &layer, &x).max_abs_diff(&dense_attention(&store, &layer, &x)) < 1e-10);
}

#[test]
fn tiled_windows_match_masked_reference() {
    let mut gen = Generator::new(8);
    let x = random_array(&[2, 4, 4, 4, 8], &mut gen);
    for win in [Window::new(4, 2, 2), Window::new(1, 4, 4), Window::new(2, 1, 4), Window::new(4, 1, 1)] {
        let (store, layer) = attention_layer(8, 2, win, 5);
        let got = run(&store, &layer, &x);
        assert!(got.max_abs_diff(&dense_attention(&store, &layer, &x)) < 1e-10, "{win}");
    }
}

#[test]
fn spatial_window_does_not_mix_frames() {
    let mut gen = Generator::new(9);
    let x = random_array(&[1, 2, 4, 4, 8], &mut gen);
    let (store, layer) = attention_layer(8, 2, Window::new(1, 4, 4), 1);
    let base = run(&store, &layer, &x);
    let mut zeroed = x.clone();
    zeroed.data_mut()[16 * 8..].iter_mut().for_each(|v| *v = 0.0);
    let out = run(&store, &layer, &zeroed);
    assert_eq!(&base.data()[..16 * 8], &out.data()[..16 * 8]);
}

#[test]
fn temporal_column_window_mixes_only_same_position() {
    let mut gen = Generator::new(10);
    let (t, h, w, d) = (4, 3, 3, 4);
    let x = random_array(&[1, t, h, w, d], &mut gen);
    let (store, layer) = attention_layer(d, 2, Window::new(t, 1, 1), 2);
    let base = run(&store, &layer, &x);
    // zero every column except (1, 2)
    let mut masked = x.clone();
    for tt in 0..t {
        for y in 0..h {
            for xx in 0..w {
                if (y, xx) != (1, 2) {
                    let o = ((tt * h + y) * w + xx) * d;
                    masked.data_mut()[o..o + d].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    let out = run(&store, &layer, &masked);
    for tt in 0..t {
        let o = ((tt * h + 1) * w + 2) * d;
        assert_eq!(&base.data()[o..o + d], &out.data()[o..o + d]);
    }
}

#[test]
fn each_tile_equals_running_it_alone() {
    let mut gen = Generator::new(11);
    let (t, h, w, d) = (4, 8, 8, 8);
    let x = random_array(&[1, t, h, w, d], &mut gen);
    let (store, layer) = attention_layer(d, 2, Window::new(t, 4, 4), 4);
    let full = run(&store, &layer, &x);
    for ty in 0..2 {
        for tx in 0..2 {
            let tile = Array::from_fn(vec![1, t, 4, 4, d], |i| {
                let e = i % d;
                let xx = (i / d) % 4;
                let y = (i / (d * 4)) % 4;
                let tt = i / (d * 16);
                x.at(&[0, tt, ty * 4 + y, tx * 4 + xx, e])
            });
            let alone = run(&store, &layer, &tile);
            for tt in 0..t {
                for y in 0..4 {
                    for xx in 0..4 {
                        for e in 0..d {
                            assert_eq!(
                                alone.at(&[0, tt, y, xx, e]),
                                full.at(&[0, tt, ty * 4 + y, tx * 4 + xx, e])
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn out_of_tile_perturbation_leaves_tile_unchanged() {
    let mut gen = Generator::new(12);
    let (t, h, w, d) = (2, 4, 4, 4);
    let x = random_array(&[1, t, h, w, d], &mut gen);
    let (store, layer) = attention_layer(d, 1, Window::new(t, 2, 2), 6);
    let base = run(&store, &layer, &x);
    let mut pert = x.clone();
    let in_tile = |y: usize, xx: usize| y < 2 && xx < 2;
    for tt in 0..t {
        for y in 0..h {
            for xx in 0..w {
                if !in_tile(y, xx) {
                    let o = ((tt * h + y) * w + xx) * d;
                    pert.data_mut()[o] += 3.0;
                }
            }
        }
    }
    let out = run(&store, &layer, &pert);
    let mut changed = false;
    for tt in 0..t {
        for y in 0..h {
            for xx in 0..w {
                let o = ((tt * h + y) * w + xx) * d;
                if in_tile(y, xx) {
                    assert_eq!(&base.data()[o..o + d], &out.data()[o..o + d]);
                } else {
                    changed |= base.data()[o..o + d] != out.data()[o..o + d];
                }
            }
        }
    }
    assert!(changed);
}

#[test]
fn single_token_window_is_value_path() {
    let mut gen = Generator::new(13);
    let x = random_array(&[1, 2, 2, 2, 4], &mut gen);
    let (store, layer) = attention_layer(4, 2, Window::new(1, 1, 1), 7);
    let got = run(&store, &layer, &x);
    let tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let want = layer
        .out
        .forward(&tape, &store, &layer.v.forward(&tape, &store, &xv).unwrap())
        .unwrap();
    assert!(got.max_abs_diff(want.value()) < 1e-12);
}

#[test]
fn window_must_divide_grid() {
    let (store, layer) = attention_layer(4, 1, Window::new(2, 3, 2), 0);
    let tape = Tape::no_grad();
    let x = tape.constant(Array::zeros(vec![1, 2, 4, 4, 4]));
    assert!(layer.forward(&tape, &store, &x).is_err());
}

#[test]
fn attention_scores_shrink_with_local_windows() {
    let geo = Geometry {
        frames: 16,
        height: 16,
        width: 16,
    };
    let mut store = ParamStore::<f32>::new();
    let mut gen = Generator::new(0);
    let local = WindowAttention::new(&mut store, "a", 8, 1, Window::new(16, 4, 4), &mut gen);
    let full = WindowAttention::new(&mut store, "b", 8, 1, geo.full_window(), &mut gen);
    assert_eq!(local.score_elements(1, geo), 16 * 256 * 256);
    assert_eq!(full.score_elements(1, geo), 4096 * 4096);
    assert!(local.score_elements(1, geo) < full.score_elements(1, geo));
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        embed_dim: 8,
        heads: 2,
        ff_dim: 16,
        frames: 3,
        grid_height: 2,
        grid_width: 2,
        spatial_window: Window::new(1, 2, 2),
        st_window: Window::new(3, 1, 2),
        dropout: 0.0,
        codebook_size: 5,
        action_dim: 0,
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        blocks: 1,
        ..tiny_config()
    };
    let mut store = ParamStore::<f64>::new();
    let mut gen = Generator::new(21);
    let block = Block::new(&mut store, "b", &cfg, &mut gen);
    for p in store.iter_mut() {
        let mut g = Generator::new(p.value.len() as u64);
        p.value.data_mut().iter_mut().for_each(|v| *v += g.normal() * 0.3);
    }
    let x = random_array(&[1, 3, 2, 2, 8], &mut gen);
    let err = param_grad_check(&store, |tape, store| {
        let y = block.forward(tape, store, &tape.constant(x.clone()), None).unwrap();
        project(tape, &y, 5)
    });
    assert!(err < 1e-4, "block rel err {err}");
}

#[test]
fn model_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        blocks: 1,
        action_dim: 2,
        ..tiny_config()
    };
    let mut gen = Generator::new(22);
    let mut model = MaskVit::<f64>::new(cfg, &mut gen).unwrap();
    for p in model.params_mut().iter_mut() {
        let mut g = Generator::new(p.value.len() as u64 + 1);
        p.value.data_mut().iter_mut().for_each(|v| *v += g.normal() * 0.3);
    }
    let tokens: Vec<usize> = (0..12).map(|i| (i * 3) % 6).collect();
    let actions = random_array(&[1, 3, 2], &mut gen);
    let targets: Vec<usize> = (0..12).map(|i| i % 5).collect();
    let selected: Vec<bool> = tokens.iter().map(|&t| t == 5).collect();
    let store = model.params().clone();
    let err = param_grad_check(&store, |tape, store| {
        let mut m = model.clone();
        *m.params_mut() = store.clone();
        m.forward(tape, &tokens, 1, Some(&actions), None)
            .unwrap()
            .cross_entropy(&targets, &selected)
            .unwrap()
    });
    assert!(err < 1e-4, "model rel err {err}");
}

#[test]
fn zero_output_projections_make_block_identity() {
    let cfg = tiny_config();
    let mut store = ParamStore::<f64>::new();
    let mut gen = Generator::new(23);
    let block = Block::new(&mut store, "b", &cfg, &mut gen);
    for p in store.iter_mut() {
        if p.name.contains(".o.") || p.name.contains(".down.") {
            p.value.fill(0.0);
        }
    }
    let x = random_array(&[2, 3, 2, 2, 8], &mut gen);
    let tape = Tape::no_grad();
    let y = block.forward(&tape, &store, &tape.constant(x.clone()), None).unwrap();
    assert_eq!(y.value(), &x);
}

#[test]
fn stacked_blocks_compose() {
    let cfg = tiny_config();
    let model = MaskVit::<f64>::new(cfg, &mut Generator::new(24)).unwrap();
    let tokens: Vec<usize> = (0..24).map(|i| i % 6).collect();
    let tape = Tape::no_grad();
    let logits = model.forward(&tape, &tokens, 2, None, None).unwrap();
    let mut h = model.embed(&tape, &tokens, 2, None).unwrap();
    for b in model.blocks() {
        h = b.forward(&tape, model.params(), &h, None).unwrap();
    }
    let again = model.forward(&tape, &tokens, 2, None, None).unwrap();
    assert_eq!(logits.value(), again.value());
    let twice = {
        let b0 = &model.blocks()[0];
        let b1 = &model.blocks()[1];
        let e = model.embed(&tape, &tokens, 2, None).unwrap();
        let h0 = b0.forward(&tape, model.params(), &e, None).unwrap();
        b1.forward(&tape, model.params(), &h0, None).unwrap()
    };
    assert_eq!(h.value(), twice.value());
}

#[test]
fn logits_cover_codebook_only_and_are_pure() {
    let cfg = tiny_config();
    let model = MaskVit::<f32>::new(cfg.clone(), &mut Generator::new(25)).unwrap();
    let grid = TokenGrid::with_masked_future(cfg.geometry(), 5, 1, false, &[0, 1, 2, 3]).unwrap();
    let a = model.logits(&[&grid], None).unwrap();
    assert_eq!(a.shape(), &[1, 3, 2, 2, 5]);
    assert_eq!(model.logits(&[&grid], None).unwrap(), a);
}

#[test]
fn context_token_reaches_masked_positions() {
    let cfg = tiny_config();
    let model = MaskVit::<f32>::new(cfg.clone(), &mut Generator::new(26)).unwrap();
    let geo = cfg.geometry();
    let g1 = TokenGrid::with_masked_future(geo, 5, 1, false, &[0, 1, 2, 3]).unwrap();
    let g2 = TokenGrid::with_masked_future(geo, 5, 1, false, &[4, 1, 2, 3]).unwrap();
    let a = model.logits(&[&g1], None).unwrap();
    let b = model.logits(&[&g2], None).unwrap();
    // masked positions are frames 1 and 2
    assert!(a.data()[4 * 5..] != b.data()[4 * 5..]);
}

#[test]
fn embedding_properties() {
    let cfg = ModelConfig {
        action_dim: 3,
        ..tiny_config()
    };
    let mut model = MaskVit::<f64>::new(cfg.clone(), &mut Generator::new(27)).unwrap();
    let bias_id = model.params().find("embed.action.b").unwrap();
    model.params_mut().value_mut(bias_id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
    let tape = Tape::no_grad();
    let mut tokens = vec![1, 2, 3, 4];
    tokens.extend([5; 8]);
    let with = model.embed(&tape, &tokens, 1, Some(&Array::zeros(vec![1, 3, 3]))).unwrap();
    let without = model.embed(&tape, &tokens, 1, None).unwrap();
    let bias = model.params().value(bias_id).data().to_vec();
    for (r, (a, b)) in with.value().data().chunks(8).zip(without.value().data().chunks(8)).enumerate() {
        for j in 0..8 {
            assert!((a[j] - b[j] - bias[j]).abs() < 1e-15, "row {r}");
        }
    }

    // single-position change touches one row
    let mut other = tokens.clone();
    other[2] = 0;
    let acts = Array::from_fn(vec![1, 3, 3], |i| i as f64 * 0.1);
    let e1 = model.embed(&tape, &tokens, 1, Some(&acts)).unwrap();
    let e2 = model.embed(&tape, &other, 1, Some(&acts)).unwrap();
    for r in 0..12 {
        let same = e1.value().data()[r * 8..(r + 1) * 8] == e2.value().data()[r * 8..(r + 1) * 8];
        assert_eq!(same, r != 2);
    }

    // frame reordering: each row minus its time embedding depends only on the frame's content
    let time = model.params().value(model.params().find("embed.time").unwrap()).clone();
    let perm = [2, 0, 1];
    let mut ptoks = vec![0; 12];
    let mut pacts = Array::zeros(vec![1, 3, 3]);
    for (t, &src) in perm.iter().enumerate() {
        ptoks[t * 4..(t + 1) * 4].copy_from_slice(&tokens[src * 4..(src + 1) * 4]);
        for a in 0..3 {
            pacts.data_mut()[t * 3 + a] = acts.data()[src * 3 + a];
        }
    }
    let ep = model.embed(&tape, &ptoks, 1, Some(&pacts)).unwrap();
    for (t, &src) in perm.iter().enumerate() {
        for p in 0..4 {
            for j in 0..8 {
                let a = ep.value().data()[(t * 4 + p) * 8 + j] - time.data()[t * 8 + j];
                let b = e1.value().data()[(src * 4 + p) * 8 + j] - time.data()[src * 8 + j];
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
    assert!(model.embed(&tape, &tokens, 1, Some(&Array::zeros(vec![1, 2, 3]))).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = MaskVit::<f32>::new(tiny_config(), &mut Generator::new(28)).unwrap();
    model.save(dir.path()).unwrap();
    let back = MaskVit::<f32>::load(dir.path()).unwrap();
    assert_eq!(back.config(), model.config());
    for (a, b) in model.params().iter().zip(back.params().iter()) {
        assert_eq!(a.value, b.value);
    }
}
