use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use vidmask_core::decoder::{count_forward_passes, iterative_decode, CountingPredictor, MaskSchedule};
use vidmask_core::harness::config::KvConfig;
use vidmask_core::harness::dump::{write_rgb, write_rgb_frames};
use vidmask_core::harness::eval::{evaluate, EvalProtocol};
use vidmask_core::harness::synth::{generate_dataset, spec_header, MotionLaw, Split, SyntheticVideoSpec, VideoDataset};
use vidmask_core::model::{MaskVit, ModelConfig, TokenGrid, Window};
use vidmask_core::planner::{
    run_episode, LearnedPredictor, OraclePredictor, PlannerConfig, Policy, PushEnv, PushEnvConfig, RolloutPredictor,
};
use vidmask_core::rng::{splitmix64, Generator};
use vidmask_core::tensor::{write_vtf, IntArray, VtfTensor};
use vidmask_core::tokenizer::{train_tokenizer, TokenizerConfig, TokenizerModel, TokenizerTrainConfig};
use vidmask_core::trainer::{context_grid, tokenize_dataset, train, Conditioning, TokenCorpus, TrainConfig};
use vidmask_core::{Error, Result};

use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let mut kv = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    if let Some(seed) = cli.seed {
        kv.set("seed", seed);
    }
    let out = cli.out;
    match cli.command {
        Command::GenData => gen_data(kv, &required_out(out, "gen-data")?),
        Command::TrainVq => train_vq(kv, &required_out(out, "train-vq")?),
        Command::Train => train_model(kv, &required_out(out, "train")?),
        Command::Predict => predict(kv, &required_out(out, "predict")?),
        Command::DecodeBench => decode_bench(kv, out.as_deref()),
        Command::Plan { trials, dump } => plan(kv, out.as_deref(), trials, dump.as_deref()),
        Command::Eval => eval(kv, out.as_deref()),
    }
}

fn required_out(out: Option<PathBuf>, cmd: &str) -> Result<PathBuf> {
    let dir = out.ok_or_else(|| Error::Config(format!("{cmd} needs --out")))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// CSV sink: `<out>/<name>` when an output directory is given, stdout otherwise.
fn csv_sink(out: Option<&Path>, name: &str) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Box::new(BufWriter::new(File::create(dir.join(name))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn gen_data(mut kv: KvConfig, out: &Path) -> Result<()> {
    let count: usize = kv.take_or("count", 100)?;
    let spec = SyntheticVideoSpec::take_from(&mut kv)?;
    let mut header = spec_header(&spec);
    let push = if spec.motion == MotionLaw::Push {
        let p = PushEnvConfig::take_from(&mut kv)?;
        header.insert("object_radius".into(), p.object_radius.to_string());
        header.insert("effector_radius".into(), p.effector_radius.to_string());
        header.insert("action_scale".into(), p.action_scale.to_string());
        header.insert("max_step".into(), p.max_step.to_string());
        p
    } else {
        PushEnvConfig::default()
    };
    kv.finish()?;
    let ds = generate_dataset(&spec, count, &push)?;
    ds.save(out, &header)?;
    println!("wrote {} clips to {}", ds.len(), out.display());
    Ok(())
}

fn train_vq(mut kv: KvConfig, out: &Path) -> Result<()> {
    let data: PathBuf = kv.require("data")?;
    let clips: usize = kv.take_or("clips", 0)?;
    let (ds, header) = VideoDataset::load(&data)?;
    if !kv.contains("frame_size") {
        if let Some(s) = header.get("frame_size") {
            kv.set("frame_size", s);
        }
    }
    let config = TokenizerConfig::take_from(&mut kv)?;
    let train = TokenizerTrainConfig::take_from(&mut kv)?;
    kv.finish()?;
    let mut idx = ds.indices(Split::Train);
    if clips > 0 {
        idx.truncate(clips);
    }
    let frames = ds.frame_stack(&idx)?;
    let (_, report) = train_tokenizer(&frames, config, &train, Some(out))?;
    let mut csv = BufWriter::new(File::create(out.join("curve.csv"))?);
    writeln!(csv, "step,recon,total")?;
    for (step, recon, total) in &report.curve {
        writeln!(csv, "{step},{recon:.6e},{total:.6e}")?;
    }
    csv.flush()?;
    println!(
        "recon {:.6e} -> {:.6e}, dead entries {}",
        report.initial_recon, report.final_recon, report.dead_entries
    );
    Ok(())
}

fn load_corpus(kv: &mut KvConfig) -> Result<(VideoDataset, TokenizerModel, TokenCorpus)> {
    let data: PathBuf = kv.require("data")?;
    let tok: PathBuf = kv.require("tokenizer")?;
    let (ds, _) = VideoDataset::load(&data)?;
    let tokenizer = TokenizerModel::load(&tok)?;
    let corpus = tokenize_dataset(&tokenizer, &ds)?;
    Ok((ds, tokenizer, corpus))
}

fn train_model(mut kv: KvConfig, out: &Path) -> Result<()> {
    let (_, _, corpus) = load_corpus(&mut kv)?;
    let tc = TrainConfig::take_from(&mut kv)?;
    let g = corpus.geometry;
    if g.height != g.width {
        return Err(Error::Config("token grids must be square".into()));
    }
    let defaults = [
        ("frames", g.frames),
        ("grid", g.height),
        ("codebook_size", corpus.codebook_size),
        (
            "action_dim",
            if tc.conditioning == Conditioning::Action { corpus.action_dim() } else { 0 },
        ),
    ];
    for (k, v) in defaults {
        if !kv.contains(k) {
            kv.set(k, v);
        }
    }
    let config = ModelConfig::take_from(&mut kv)?;
    kv.finish()?;
    let mut model = MaskVit::new(config, &mut Generator::new(splitmix64(tc.seed)))?;
    corpus.save(&out.join("tokens"))?;
    let mut csv = BufWriter::new(File::create(out.join("metrics.csv"))?);
    let report = train(&mut model, &corpus, &tc, Some(&mut csv), Some(&out.join("model")))?;
    csv.flush()?;
    println!(
        "masked_nll {:.4} -> {:.4} after {} steps",
        report.initial_val_nll,
        report.final_val_nll,
        report.losses.len()
    );
    Ok(())
}

fn load_model(kv: &mut KvConfig, corpus: &TokenCorpus) -> Result<MaskVit> {
    let dir: PathBuf = kv.require("model")?;
    let model = MaskVit::load(&dir)?;
    if model.config().geometry() != corpus.geometry || model.config().codebook_size != corpus.codebook_size {
        return Err(Error::InvalidShape("model geometry does not match the tokenized corpus".into()));
    }
    Ok(model)
}

fn predict(mut kv: KvConfig, out: &Path) -> Result<()> {
    let (_, tokenizer, corpus) = load_corpus(&mut kv)?;
    let model = load_model(&mut kv, &corpus)?;
    let clips: usize = kv.take_or("clips", 4)?;
    let context: usize = kv.take_or("context_frames", 2)?;
    let conditioning: Conditioning = kv.take_or("conditioning", Conditioning::None)?;
    let raw: bool = kv.take_or("raw", false)?;
    let seed: u64 = kv.take_or("seed", 0)?;
    let schedule = MaskSchedule::take_from(&mut kv)?;
    kv.finish()?;
    let g = corpus.geometry;
    let goal = conditioning == Conditioning::Goal;
    for clip in corpus.indices(Split::Val).into_iter().take(clips) {
        let grid = context_grid(&corpus, clip, context, goal)?;
        let actions = match conditioning {
            Conditioning::Action => Some(
                corpus
                    .action_batch(&[clip])
                    .ok_or_else(|| Error::Config("action conditioning needs a corpus with actions".into()))?,
            ),
            _ => None,
        };
        let mut gen = Generator::new(splitmix64(seed ^ splitmix64(clip as u64)));
        let decoded = iterative_decode(&model, grid, &schedule, actions.as_ref(), &mut gen)?;
        let video = tokenizer.decode(&decoded.indices, g.frames, g.height, g.width)?;
        let stem = format!("pred_{clip:05}");
        write_vtf(&out.join(format!("{stem}.vtf")), &VtfTensor::F32(video.clone()))?;
        let tokens = IntArray::new(
            vec![g.frames, g.height, g.width],
            decoded.indices.iter().map(|&t| t as i32).collect(),
        )?;
        write_vtf(&out.join(format!("{stem}.tokens.vtf")), &VtfTensor::I32(tokens))?;
        if raw {
            write_rgb_frames(out, &stem, &video)?;
        }
    }
    Ok(())
}

fn eval(mut kv: KvConfig, out: Option<&Path>) -> Result<()> {
    let (ds, tokenizer, corpus) = load_corpus(&mut kv)?;
    let model = load_model(&mut kv, &corpus)?;
    let clips: usize = kv.take_or("clips", 0)?;
    let d = EvalProtocol::default();
    let protocol = EvalProtocol {
        context_frames: kv.take_or("context_frames", d.context_frames)?,
        trials: kv.take_or("trials", d.trials)?,
        conditioning: kv.take_or("conditioning", d.conditioning)?,
        nll_ratio: kv.take_or("nll_ratio", d.nll_ratio)?,
        seed: kv.take_or("seed", d.seed)?,
        schedule: MaskSchedule::take_from(&mut kv)?,
    };
    kv.finish()?;
    let mut val = corpus.indices(Split::Val);
    if clips > 0 {
        val.truncate(clips);
    }
    let report = evaluate(&model, &tokenizer, &ds, &corpus, &val, &protocol)?;
    let mut sink = csv_sink(out, "eval.csv")?;
    report.write_csv(&mut sink)?;
    sink.flush()?;
    Ok(())
}

/// Largest divisor of `n` not above `cap`.
fn divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Decodes once with a small random model; returns counted passes and seconds.
fn time_decode(context: usize, frames: usize, grid: usize, schedule: &MaskSchedule, seed: u64) -> Result<(usize, f64)> {
    let total = context + frames;
    let side = divisor_at_most(grid, 4);
    let config = ModelConfig {
        embed_dim: 16,
        heads: 2,
        ff_dim: 32,
        blocks: 1,
        frames: total,
        grid_height: grid,
        grid_width: grid,
        spatial_window: Window::new(1, grid, grid),
        st_window: Window::new(total, side, side),
        dropout: 0.0,
        codebook_size: 64,
        action_dim: 0,
    };
    let mut gen = Generator::new(seed);
    let model = MaskVit::new(config, &mut gen.fork(1))?;
    let mut ctx_gen = gen.fork(2);
    let tokens: Vec<usize> = (0..context * grid * grid).map(|_| ctx_gen.below(64)).collect();
    let grid = TokenGrid::with_masked_future(model.config().geometry(), 64, context, false, &tokens)?;
    let counter = CountingPredictor::new(&model);
    let start = Instant::now();
    iterative_decode(&counter, grid, schedule, None, &mut gen.fork(3))?;
    Ok((counter.calls(), start.elapsed().as_secs_f64()))
}

fn decode_bench(mut kv: KvConfig, out: Option<&Path>) -> Result<()> {
    let frames: usize = kv.take_or("frames", 15)?;
    let grid: usize = kv.take_or("grid", 16)?;
    let context: usize = kv.take_or("context_frames", 1)?;
    let measure: bool = kv.take_or("measure", true)?;
    let table: bool = kv.take_or("table", false)?;
    let seed: u64 = kv.take_or("seed", 0)?;
    if !kv.contains("iterations") {
        kv.set("iterations", 24);
    }
    let schedule = MaskSchedule::take_from(&mut kv)?;
    kv.finish()?;
    let settings = if table {
        vec![(15, 24), (25, 48), (10, 5)]
    } else {
        vec![(frames, schedule.iterations)]
    };
    let mut sink = csv_sink(out, "decode_bench.csv")?;
    writeln!(
        sink,
        "geometry,schedule,iterations,temperature,autoregressive_passes,iterative_passes,wall_clock_s,speedup"
    )?;
    for (f, iterations) in settings {
        let count = count_forward_passes(f, grid, grid, iterations)?;
        let sched = MaskSchedule { iterations, ..schedule };
        let (passes, wall) = if measure {
            let (p, s) = time_decode(context, f, grid, &sched, seed)?;
            (p, format!("{s:.4}"))
        } else {
            (count.iterative, "na".to_string())
        };
        writeln!(
            sink,
            "{f}x{grid}x{grid},{},{iterations},{},{},{passes},{wall},{:.1}",
            sched.kind, sched.temperature, count.autoregressive, count.speedup
        )?;
    }
    sink.flush()?;
    Ok(())
}

fn plan(mut kv: KvConfig, out: Option<&Path>, trials: usize, dump: Option<&Path>) -> Result<()> {
    let kind: String = kv.take_or("predictor", "learned".to_string())?;
    let tok_dir: Option<PathBuf> = kv.take("tokenizer")?;
    let model_dir: Option<PathBuf> = kv.take("model")?;
    let decode_batch: usize = kv.take_or("decode_batch", 64)?;
    let task_seed: u64 = kv.take_or("task_seed", 1)?;
    let task_offset: usize = kv.take_or("task_offset", 0)?;
    let seed: u64 = kv.take_or("seed", 0)?;
    let schedule = MaskSchedule::take_from(&mut kv)?;
    let env = PushEnv::new(PushEnvConfig::take_from(&mut kv)?)?;
    let config = PlannerConfig::take_from(&mut kv)?;
    kv.finish()?;

    let learned = match kind.as_str() {
        "learned" => {
            let (Some(t), Some(m)) = (&tok_dir, &model_dir) else {
                return Err(Error::Config("predictor=learned needs `tokenizer` and `model`".into()));
            };
            Some((TokenizerModel::load(t)?, MaskVit::load(m)?))
        }
        "oracle" | "random" => {
            if tok_dir.is_some() || model_dir.is_some() {
                return Err(Error::Config(format!("`tokenizer` and `model` do not apply to predictor={kind}")));
            }
            None
        }
        other => return Err(Error::Config(format!("unknown predictor `{other}` (learned|oracle|random)"))),
    };
    let oracle = OraclePredictor { env: env.clone() };
    let learned_pred = learned.as_ref().map(|(tokenizer, model)| LearnedPredictor {
        model,
        tokenizer,
        schedule,
        batch: decode_batch,
    });
    let predictor: Option<&dyn RolloutPredictor> = match kind.as_str() {
        "learned" => learned_pred.as_ref().map(|p| p as &dyn RolloutPredictor),
        "oracle" => Some(&oracle),
        _ => None,
    };
    let policy = match predictor {
        Some(p) => Policy::Cem(p),
        None => Policy::Random,
    };

    let mut sink = csv_sink(out, "plan.csv")?;
    writeln!(sink, "trial,task,success,final_distance,seconds_per_cem_iteration")?;
    let mut successes = 0;
    for trial in 0..trials {
        let index = task_offset + trial;
        let task = env.task(task_seed, index);
        let mut gen = Generator::new(splitmix64(seed ^ splitmix64(index as u64)));
        let episode = run_episode(&env, &task, &policy, &config, &mut gen)?;
        successes += usize::from(episode.success);
        let secs = if episode.iteration_seconds.is_empty() {
            "na".to_string()
        } else {
            let s = &episode.iteration_seconds;
            format!("{:.6}", s.iter().sum::<f64>() / s.len() as f64)
        };
        writeln!(
            sink,
            "{trial},{index},{},{:.6},{secs}",
            u8::from(episode.success),
            episode.final_distance
        )?;
        if let Some(root) = dump {
            let dir = root.join(format!("trial_{trial:03}"));
            fs::create_dir_all(&dir)?;
            write_vtf(&dir.join("executed.vtf"), &VtfTensor::F32(episode.frames.clone()))?;
            write_rgb_frames(&dir, "executed", &episode.frames)?;
            let goal = env.render_goal(task.goal);
            write_vtf(&dir.join("goal.vtf"), &VtfTensor::F32(goal.clone()))?;
            write_rgb(&dir.join("goal.rgb"), &goal)?;
            if let Some(p) = predictor {
                for (k, (ctx, best)) in episode.plans.iter().enumerate() {
                    let mut g = Generator::new(splitmix64(seed ^ splitmix64((index * 1000 + k) as u64)));
                    let rollout = p.rollouts(ctx, std::slice::from_ref(best), &mut g)?.remove(0);
                    let stem = format!("plan_{k:02}");
                    write_vtf(&dir.join(format!("{stem}.vtf")), &VtfTensor::F32(rollout.clone()))?;
                    write_vtf(&dir.join(format!("{stem}.actions.vtf")), &VtfTensor::F32(best.cast::<f32>()))?;
                    write_rgb_frames(&dir, &stem, &rollout)?;
                }
            }
        }
    }
    sink.flush()?;
    eprintln!("success {successes}/{trials}");
    Ok(())
}
