//! Synthetic video corpora: discs moving at constant velocity with wall bounce.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::{parse_field, KvConfig};
use crate::planner::{generate_push_dataset, PushEnv, PushEnvConfig};
use crate::rng::{splitmix64, Generator};
use crate::tensor::{read_manifest, read_vtf, write_manifest, write_vtf, Array, VtfTensor};

pub const PALETTE: [[f32; 3]; 6] = [
    [0.95, 0.25, 0.2],
    [0.2, 0.85, 0.3],
    [0.25, 0.4, 0.95],
    [0.95, 0.85, 0.2],
    [0.9, 0.3, 0.9],
    [0.2, 0.9, 0.9],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionLaw {
    /// Constant velocity, reflected at the walls.
    Bounce,
    /// Effector pushing a disc under random actions (see `planner::PushEnv`).
    Push,
}

impl std::str::FromStr for MotionLaw {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bounce" => Ok(MotionLaw::Bounce),
            "push" => Ok(MotionLaw::Push),
            other => Err(format!("unknown motion law `{other}` (bounce|push)")),
        }
    }
}

impl std::fmt::Display for MotionLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MotionLaw::Bounce => "bounce",
            MotionLaw::Push => "push",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideoSpec {
    pub frame_size: usize,
    pub clip_len: usize,
    pub objects: usize,
    /// Disc radius range in units of the frame extent.
    pub radius: (f64, f64),
    /// Per-axis speed range (extent per frame).
    pub speed: (f64, f64),
    pub motion: MotionLaw,
    pub background: [f32; 3],
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticVideoSpec {
    fn default() -> Self {
        Self {
            frame_size: 32,
            clip_len: 8,
            objects: 2,
            radius: (0.1, 0.16),
            speed: (0.02, 0.06),
            motion: MotionLaw::Bounce,
            background: [0.05, 0.05, 0.05],
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticVideoSpec {
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            frame_size: kv.take_or("frame_size", d.frame_size)?,
            clip_len: kv.take_or("clip_len", d.clip_len)?,
            objects: kv.take_or("objects", d.objects)?,
            radius: (
                kv.take_or("radius_min", d.radius.0)?,
                kv.take_or("radius_max", d.radius.1)?,
            ),
            speed: (
                kv.take_or("speed_min", d.speed.0)?,
                kv.take_or("speed_max", d.speed.1)?,
            ),
            motion: kv.take_or("motion", d.motion)?,
            background: d.background,
            val_fraction: kv.take_or("val_fraction", d.val_fraction)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.clip_len == 0 {
            return Err(Error::Config("frame_size and clip_len must be positive".into()));
        }
        if !(0.0 < self.radius.0 && self.radius.0 <= self.radius.1 && self.radius.1 < 0.5) {
            return Err(Error::Config("radius range must satisfy 0 < min <= max < 0.5".into()));
        }
        if !(0.0 <= self.speed.0 && self.speed.0 <= self.speed.1 && self.speed.1 < 1.0 - 2.0 * self.radius.1) {
            return Err(Error::Config("speed range must be non-negative and below the free span".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Initial state of one moving disc.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub radius: f64,
    pub color: [f32; 3],
}

pub fn sample_discs(spec: &SyntheticVideoSpec, gen: &mut Generator) -> Vec<Disc> {
    (0..spec.objects)
        .map(|_| {
            let radius = gen.uniform_range(spec.radius.0, spec.radius.1);
            let pos = [
                gen.uniform_range(radius, 1.0 - radius),
                gen.uniform_range(radius, 1.0 - radius),
            ];
            let mut vel = [0.0; 2];
            for v in &mut vel {
                let s = gen.uniform_range(spec.speed.0, spec.speed.1);
                *v = if gen.uniform() < 0.5 { -s } else { s };
            }
            Disc {
                pos,
                vel,
                radius,
                color: PALETTE[gen.below(PALETTE.len())],
            }
        })
        .collect()
}

/// Advances a disc one frame, reflecting off the walls.
pub fn step_disc(d: &mut Disc) {
    let (lo, hi) = (d.radius, 1.0 - d.radius);
    for a in 0..2 {
        let mut p = d.pos[a] + d.vel[a];
        if p > hi {
            p = 2.0 * hi - p;
            d.vel[a] = -d.vel[a];
        } else if p < lo {
            p = 2.0 * lo - p;
            d.vel[a] = -d.vel[a];
        }
        d.pos[a] = p;
    }
}

/// Anti-aliased disc rendering into an `[S, S, 3]` frame over `background`.
pub fn render_discs(size: usize, background: [f32; 3], discs: &[(f64, f64, f64, [f32; 3])]) -> Vec<f32> {
    let mut img = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        img.extend_from_slice(&background);
    }
    let s = size as f64;
    for &(cx, cy, r, color) in discs {
        let (px, py, pr) = (cx * s, cy * s, r * s);
        let y0 = ((py - pr - 1.0).floor().max(0.0)) as usize;
        let y1 = ((py + pr + 1.0).ceil().min(s)) as usize;
        let x0 = ((px - pr - 1.0).floor().max(0.0)) as usize;
        let x1 = ((px + pr + 1.0).ceil().min(s)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - px;
                let dy = y as f64 + 0.5 - py;
                let cover = (pr - (dx * dx + dy * dy).sqrt() + 0.5).clamp(0.0, 1.0) as f32;
                if cover > 0.0 {
                    let o = (y * size + x) * 3;
                    for c in 0..3 {
                        img[o + c] = img[o + c] * (1.0 - cover) + color[c] * cover;
                    }
                }
            }
        }
    }
    img
}

/// One bounce clip `[T, S, S, 3]` plus the per-frame disc centres.
pub fn bounce_clip(spec: &SyntheticVideoSpec, gen: &mut Generator) -> (Array, Vec<Vec<[f64; 2]>>) {
    let mut discs = sample_discs(spec, gen);
    let mut frames = Vec::new();
    let mut centres = Vec::new();
    for t in 0..spec.clip_len {
        if t > 0 {
            discs.iter_mut().for_each(step_disc);
        }
        let draw: Vec<_> = discs.iter().map(|d| (d.pos[0], d.pos[1], d.radius, d.color)).collect();
        frames.extend(render_discs(spec.frame_size, spec.background, &draw));
        centres.push(discs.iter().map(|d| d.pos).collect());
    }
    let s = spec.frame_size;
    (
        Array::new(vec![spec.clip_len, s, s, 3], frames).expect("clip layout"),
        centres,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// Seed-stable assignment of clip `index`.
    pub fn assign(seed: u64, index: usize, val_fraction: f64) -> Self {
        let h = splitmix64(seed ^ splitmix64(index as u64 + 1));
        if (h >> 11) as f64 / (1u64 << 53) as f64 <= val_fraction && val_fraction > 0.0 {
            Split::Val
        } else {
            Split::Train
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Clips `[T, H, W, C]` with optional per-frame actions `[T, A]`.
#[derive(Clone, Debug, Default)]
pub struct VideoDataset {
    pub clips: Vec<Array>,
    pub actions: Option<Vec<Array>>,
    pub splits: Vec<Split>,
}

impl VideoDataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Frames of the selected clips stacked as `[N·T, H, W, C]`.
    pub fn frame_stack(&self, clips: &[usize]) -> Result<Array> {
        let Some(&first) = clips.first() else {
            return Err(Error::EmptyDataset);
        };
        let shape = self.clips[first].shape().to_vec();
        let mut data = Vec::new();
        for &i in clips {
            data.extend_from_slice(self.clips[i].data());
        }
        Array::new(
            vec![clips.len() * shape[0], shape[1], shape[2], shape[3]],
            data,
        )
    }

    pub fn save(&self, dir: &Path, header: &BTreeMap<String, String>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut m = header.clone();
        m.insert("count".into(), self.len().to_string());
        for (i, clip) in self.clips.iter().enumerate() {
            let name = format!("clip_{i:05}");
            write_vtf(&dir.join(format!("{name}.vtf")), &VtfTensor::F32(clip.clone()))?;
            if let Some(actions) = &self.actions {
                write_vtf(
                    &dir.join(format!("{name}.actions.vtf")),
                    &VtfTensor::F32(actions[i].clone()),
                )?;
            }
            m.insert(format!("split.{name}"), self.splits[i].as_str().into());
        }
        m.insert("has_actions".into(), self.actions.is_some().to_string());
        write_manifest(&dir.join("manifest.txt"), &m)
    }

    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let m = read_manifest(&dir.join("manifest.txt"))?;
        let count: usize = parse_field("count", m.get("count").map(String::as_str).unwrap_or("0"))?;
        let has_actions = m.get("has_actions").map(|s| s == "true").unwrap_or(false);
        let mut ds = VideoDataset {
            actions: has_actions.then(Vec::new),
            ..Default::default()
        };
        for i in 0..count {
            let name = format!("clip_{i:05}");
            let path = dir.join(format!("{name}.vtf"));
            ds.clips.push(read_vtf(&path)?.into_f32(&path)?);
            if let Some(actions) = &mut ds.actions {
                let p = dir.join(format!("{name}.actions.vtf"));
                actions.push(read_vtf(&p)?.into_f32(&p)?);
            }
            let split = match m.get(&format!("split.{name}")).map(String::as_str) {
                Some("val") => Split::Val,
                Some("train") => Split::Train,
                _ => {
                    return Err(Error::Format {
                        path: dir.join("manifest.txt"),
                        reason: format!("missing split for {name}"),
                    })
                }
            };
            ds.splits.push(split);
        }
        Ok((ds, m))
    }
}

pub fn spec_header(spec: &SyntheticVideoSpec) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("frame_size".into(), spec.frame_size.to_string());
    m.insert("clip_len".into(), spec.clip_len.to_string());
    m.insert("objects".into(), spec.objects.to_string());
    m.insert("motion".into(), spec.motion.to_string());
    m.insert("seed".into(), spec.seed.to_string());
    m
}

/// Generates `count` bounce clips; clip `i` depends only on `(seed, i)`.
pub fn generate_bounce_dataset(spec: &SyntheticVideoSpec, count: usize) -> VideoDataset {
    let mut ds = VideoDataset::default();
    for i in 0..count {
        let mut gen = Generator::new(splitmix64(spec.seed.wrapping_add(i as u64)));
        ds.clips.push(bounce_clip(spec, &mut gen).0);
        ds.splits.push(Split::assign(spec.seed, i, spec.val_fraction));
    }
    ds
}

/// Dispatches on the motion law. Push clips use `push` with the frame size
/// taken from `spec`.
pub fn generate_dataset(spec: &SyntheticVideoSpec, count: usize, push: &PushEnvConfig) -> Result<VideoDataset> {
    spec.validate()?;
    match spec.motion {
        MotionLaw::Bounce => Ok(generate_bounce_dataset(spec, count)),
        MotionLaw::Push => {
            let env = PushEnv::new(PushEnvConfig {
                frame_size: spec.frame_size,
                ..push.clone()
            })?;
            Ok(generate_push_dataset(&env, spec.clip_len, count, spec.seed, spec.val_fraction))
        }
    }
}
