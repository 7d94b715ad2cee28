use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vidmask(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidmask"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn vidmask")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.cfg"), "count=5\nclip_len=4\nframe_size=16\n").unwrap();
    let o = vidmask(&["gen-data", "--config", "c.cfg", "--out", "d/"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("d/manifest.txt")).unwrap();
    assert!(manifest.contains("count=5"));
    assert!(dir.path().join("d/clip_00004.vtf").exists());
}

#[test]
fn gen_data_is_reproducible_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("c.cfg"), "count=3\nclip_len=3\nframe_size=16\nseed=4\n").unwrap();
    for out in ["a", "b"] {
        assert!(vidmask(&["gen-data", "--config", "c.cfg", "--out", out], p).status.success());
    }
    assert!(vidmask(&["gen-data", "--config", "c.cfg", "--seed", "5", "--out", "c"], p).status.success());
    let read = |d: &str| fs::read(p.join(d).join("clip_00001.vtf")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert!(fs::read_to_string(p.join("c/manifest.txt")).unwrap().contains("seed=5"));
}

#[test]
fn push_data_carries_actions() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.cfg"), "count=2\nclip_len=5\nframe_size=16\nmotion=push\ngoal_offset=0.2\n").unwrap();
    let o = vidmask(&["gen-data", "--config", "c.cfg", "--out", "d"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("d/clip_00001.actions.vtf").exists());
}

#[test]
fn unknown_flag_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = vidmask(&["gen-data", "--frobnicate", "3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: code=usage"), "{err}");
    assert!(err.contains("--frobnicate"), "{err}");
}

#[test]
fn unknown_subcommand_and_config_key_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = vidmask(&["render"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("render"));

    fs::write(dir.path().join("c.cfg"), "count=1\ncolour=red\n").unwrap();
    let o = vidmask(&["gen-data", "--config", "c.cfg", "--out", "d"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: code=config"), "{err}");
    assert!(err.contains("colour"), "{err}");
}

#[test]
fn help_documents_csv_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let o = vidmask(&["--help"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for header in [
        "step,recon,total",
        "step,loss,lr,masked_nll",
        "clip,psnr,ssim,copy_last_psnr,copy_last_ssim,masked_nll",
        "trial,task,success,final_distance,seconds_per_cem_iteration",
    ] {
        assert!(text.contains(header), "missing {header}");
    }
}

#[test]
fn decode_bench_reference_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let o = vidmask(&["decode-bench", "--out", "r"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("r/decode_bench.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "15x16x16");
    assert_eq!(row[4], "3840");
    assert_eq!(row[2], "24");
    // Counted by instrumenting the model, not computed.
    assert_eq!(row[5], "24");
    assert_eq!(row[7], "160.0");
}

#[test]
fn decode_bench_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.cfg"), "table=true\nmeasure=false\n").unwrap();
    let o = vidmask(&["decode-bench", "--config", "t.cfg"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let speedups: Vec<&str> = out.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(speedups, ["160.0", "133.3", "512.0"]);
}

#[test]
fn plan_oracle_and_random_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("o.cfg"), "predictor=oracle\nsamples=40\n").unwrap();
    let o = vidmask(&["plan", "--config", "o.cfg", "--trials", "2", "--dump", "dump", "--out", "r"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(p.join("r/plan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(p.join("dump/trial_001/goal.rgb").exists());
    assert!(p.join("dump/trial_001/plan_04.vtf").exists());
    // 16×16 RGB plus the two extents.
    assert_eq!(fs::metadata(p.join("dump/trial_000/executed_015.rgb")).unwrap().len(), 8 + 16 * 16 * 3);

    fs::write(p.join("r.cfg"), "predictor=random\n").unwrap();
    let o = vidmask(&["plan", "--config", "r.cfg", "--trials", "3"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next().unwrap(), "trial,task,success,final_distance,seconds_per_cem_iteration");
    assert!(out.lines().skip(1).all(|l| l.ends_with(",na")));

    fs::write(p.join("l.cfg"), "predictor=learned\n").unwrap();
    let o = vidmask(&["plan", "--config", "l.cfg"], p);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("g.cfg"), "count=10\nclip_len=4\nframe_size=16\nval_fraction=0.3\n").unwrap();
    fs::write(p.join("vq.cfg"), "data=d\nsteps=10\ncodebook_size=16\nembed_dim=8\nhidden=8\nbatch_size=4\n").unwrap();
    fs::write(
        p.join("tr.cfg"),
        "data=d\ntokenizer=tok\nsteps=3\nembed_dim=16\nheads=2\nff_dim=32\nblocks=1\nlog_every=1\n",
    )
    .unwrap();
    fs::write(p.join("p.cfg"), "data=d\ntokenizer=tok\nmodel=m/model\nclips=1\nraw=true\niterations=4\n").unwrap();
    fs::write(p.join("e.cfg"), "data=d\ntokenizer=tok\nmodel=m/model\ntrials=2\niterations=4\n").unwrap();
    for (cmd, cfg, out) in [
        ("gen-data", "g.cfg", "d"),
        ("train-vq", "vq.cfg", "tok"),
        ("train", "tr.cfg", "m"),
        ("predict", "p.cfg", "p"),
        ("eval", "e.cfg", "e"),
    ] {
        let o = vidmask(&[cmd, "--config", cfg, "--out", out], p);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    assert!(fs::read_to_string(p.join("tok/curve.csv")).unwrap().starts_with("step,recon,total\n"));
    let metrics = fs::read_to_string(p.join("m/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let preds: Vec<_> = fs::read_dir(p.join("p")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(preds.iter().any(|n| n.to_string_lossy().ends_with(".tokens.vtf")));
    let eval = fs::read_to_string(p.join("e/eval.csv")).unwrap();
    assert!(eval.lines().last().unwrap().starts_with("mean,"));

    // Same config and seed, same report.
    assert!(vidmask(&["eval", "--config", "e.cfg", "--out", "e2"], p).status.success());
    assert_eq!(eval, fs::read_to_string(p.join("e2/eval.csv")).unwrap());
}
