//! `vidmask` command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod commands;

const SCHEMAS: &str = "\
Config files hold `key=value` lines; `#` starts a comment. Unknown keys are errors.
`--seed` overrides the `seed` key.

CSV schemas:
  train-vq      curve.csv        step,recon,total
  train         metrics.csv      step,loss,lr,masked_nll
  eval          eval.csv         clip,psnr,ssim,copy_last_psnr,copy_last_ssim,masked_nll
                                 (last row: clip=mean)
  decode-bench  decode_bench.csv geometry,schedule,iterations,temperature,autoregressive_passes,iterative_passes,wall_clock_s,speedup
  plan          plan.csv         trial,task,success,final_distance,seconds_per_cem_iteration

Errors print one line to stderr, `error: code=<kind> msg=\"<text>\"`; exit 2 on usage errors, 1 otherwise.";

#[derive(Parser, Debug)]
#[command(name = "vidmask", version, about = "Masked video-token prediction and visual planning", after_help = SCHEMAS)]
struct Cli {
    /// Config file of `key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the config's `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic clips plus manifest.
    ///
    /// Keys: count, frame_size, clip_len, objects, radius_min, radius_max, speed_min,
    /// speed_max, motion (bounce|push), val_fraction, seed; for motion=push also
    /// object_radius, effector_radius, action_scale, max_step, goal_offset, start_gap,
    /// success_threshold.
    GenData,
    /// Trains the frame tokenizer; writes a checkpoint and curve.csv.
    ///
    /// Keys: data, clips (training clips used, 0 = all), frame_size, channels, downsample,
    /// codebook_size, embed_dim, hidden, commitment, steps, batch_size, lr, warmup,
    /// revive_every, seed.
    TrainVq,
    /// Trains the masked token model; writes `model/`, `tokens/` and metrics.csv.
    ///
    /// Keys: data, tokenizer, blocks, embed_dim, heads, ff_dim, spatial_window, st_window,
    /// dropout (geometry, codebook_size and action_dim default to the corpus), batch_size,
    /// steps, lr, warmup, conditioning (none|action|goal), context_frames, fixed_ratio,
    /// seed, log_every, eval_ratio, eval_clips, checkpoint_every, clip_norm.
    Train,
    /// Decodes validation clips; writes pred_NNNNN.vtf and pred_NNNNN.tokens.vtf.
    ///
    /// Keys: data, tokenizer, model, clips, context_frames, conditioning, schedule,
    /// iterations, temperature, top_p, raw (also write .rgb frames), seed.
    Predict,
    /// Forward-pass accounting of iterative decoding against token-by-token generation.
    ///
    /// Keys: frames (predicted frames, default 15), grid (16), context_frames (1),
    /// schedule, iterations (24), temperature, top_p, measure (time a small random model,
    /// default true), table (emit the three reference settings instead), seed.
    DecodeBench,
    /// Visual MPC on the pushing task.
    ///
    /// Keys: predictor (learned|oracle|random), tokenizer, model, decode_batch, schedule,
    /// iterations, temperature, top_p, horizon, samples, cem_iterations, elite_fraction,
    /// beta, cost_weights, init_mean, init_var, initial_action, gripper_dim, replan_every,
    /// total_steps, task_seed, task_offset, seed and the push environment keys of gen-data.
    Plan {
        /// Episodes to run.
        #[arg(long, default_value_t = 30)]
        trials: usize,
        /// Directory for executed frames, goal images and planned rollouts.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Best-of-trials PSNR/SSIM and masked NLL on validation clips.
    ///
    /// Keys: data, tokenizer, model, clips (0 = all), trials, context_frames, conditioning,
    /// nll_ratio, schedule, iterations, temperature, top_p, seed.
    Eval,
}

fn escape(msg: &str) -> String {
    msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("usage error");
            let msg = line.strip_prefix("error: ").unwrap_or(line);
            eprintln!("error: code=usage msg=\"{}\"", escape(msg));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: code={} msg=\"{}\"", e.kind(), escape(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
