use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::parse_field;
use crate::harness::synth::{Split, VideoDataset};
use crate::model::Geometry;
use crate::tensor::{read_manifest, read_vtf, write_manifest, write_vtf, Array, IntArray, VtfTensor};
use crate::tokenizer::TokenizerModel;

/// Tokenized videos: one `T·h·w` index vector per clip.
#[derive(Clone, Debug)]
pub struct TokenCorpus {
    pub geometry: Geometry,
    pub codebook_size: usize,
    pub videos: Vec<Vec<usize>>,
    /// Per-clip `[T, A]` actions.
    pub actions: Option<Vec<Array>>,
    pub splits: Vec<Split>,
}

impl TokenCorpus {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn action_dim(&self) -> usize {
        self.actions
            .as_ref()
            .and_then(|a| a.first())
            .map(|a| a.last_dim())
            .unwrap_or(0)
    }

    /// `[B, T, A]` actions of the listed clips.
    pub fn action_batch(&self, clips: &[usize]) -> Option<Array> {
        let actions = self.actions.as_ref()?;
        let mut data = Vec::new();
        for &c in clips {
            data.extend_from_slice(actions[c].data());
        }
        Some(Array::new(vec![clips.len(), self.geometry.frames, self.action_dim()], data).expect("action layout"))
    }

    /// Number of codebook entries that occur anywhere in the corpus.
    pub fn distinct_tokens(&self) -> usize {
        let mut seen = vec![false; self.codebook_size];
        for v in &self.videos {
            for &t in v {
                seen[t] = true;
            }
        }
        seen.iter().filter(|&&s| s).count()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let g = self.geometry;
        let mut m = BTreeMap::new();
        m.insert("count".to_string(), self.len().to_string());
        m.insert("frames".to_string(), g.frames.to_string());
        m.insert("height".to_string(), g.height.to_string());
        m.insert("width".to_string(), g.width.to_string());
        m.insert("codebook_size".to_string(), self.codebook_size.to_string());
        m.insert("has_actions".to_string(), self.actions.is_some().to_string());
        for (i, v) in self.videos.iter().enumerate() {
            let name = format!("clip_{i:05}");
            let ints = IntArray::new(
                vec![g.frames, g.height, g.width],
                v.iter().map(|&t| t as i32).collect(),
            )?;
            write_vtf(&dir.join(format!("{name}.tokens.vtf")), &VtfTensor::I32(ints))?;
            if let Some(a) = &self.actions {
                write_vtf(&dir.join(format!("{name}.actions.vtf")), &VtfTensor::F32(a[i].clone()))?;
            }
            let split = match self.splits[i] {
                Split::Train => "train",
                Split::Val => "val",
            };
            m.insert(format!("split.{name}"), split.to_string());
        }
        write_manifest(&dir.join("manifest.txt"), &m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let m = read_manifest(&mpath)?;
        let get = |k: &str| {
            m.get(k).map(String::as_str).ok_or_else(|| Error::Format {
                path: mpath.clone(),
                reason: format!("missing `{k}`"),
            })
        };
        let geometry = Geometry {
            frames: parse_field("frames", get("frames")?)?,
            height: parse_field("height", get("height")?)?,
            width: parse_field("width", get("width")?)?,
        };
        let codebook_size: usize = parse_field("codebook_size", get("codebook_size")?)?;
        let count: usize = parse_field("count", get("count")?)?;
        let has_actions = get("has_actions")? == "true";
        let mut corpus = TokenCorpus {
            geometry,
            codebook_size,
            videos: Vec::with_capacity(count),
            actions: has_actions.then(Vec::new),
            splits: Vec::with_capacity(count),
        };
        for i in 0..count {
            let name = format!("clip_{i:05}");
            let p = dir.join(format!("{name}.tokens.vtf"));
            let ints = read_vtf(&p)?.into_i32(&p)?;
            if ints.shape != [geometry.frames, geometry.height, geometry.width] {
                return Err(Error::Format {
                    path: p,
                    reason: format!("token grid shape {:?}", ints.shape),
                });
            }
            let mut v = Vec::with_capacity(ints.data.len());
            for &t in &ints.data {
                if t < 0 || t as usize >= codebook_size {
                    return Err(Error::Format {
                        path: p,
                        reason: format!("token {t} outside codebook"),
                    });
                }
                v.push(t as usize);
            }
            corpus.videos.push(v);
            if let Some(a) = &mut corpus.actions {
                let p = dir.join(format!("{name}.actions.vtf"));
                a.push(read_vtf(&p)?.into_f32(&p)?);
            }
            corpus.splits.push(match get(&format!("split.{name}"))? {
                "val" => Split::Val,
                _ => Split::Train,
            });
        }
        Ok(corpus)
    }
}

/// Quantizes every clip of `videos` frame by frame.
pub fn tokenize_dataset(tokenizer: &TokenizerModel, videos: &VideoDataset) -> Result<TokenCorpus> {
    let cfg = tokenizer.config();
    let (h, w) = cfg.grid();
    let frames = videos.clips.first().map(|c| c.shape()[0]).unwrap_or(0);
    let mut out = Vec::with_capacity(videos.len());
    for clip in &videos.clips {
        let s = clip.shape();
        if s.len() != 4 || s[0] != frames || s[1] != cfg.frame_height || s[2] != cfg.frame_width || s[3] != cfg.channels {
            return Err(Error::InvalidShape(format!(
                "clip {s:?} does not match tokenizer frames {}x{}x{}",
                cfg.frame_height, cfg.frame_width, cfg.channels
            )));
        }
        out.push(tokenizer.tokenize(clip)?);
    }
    Ok(TokenCorpus {
        geometry: Geometry {
            frames,
            height: h,
            width: w,
        },
        codebook_size: cfg.codebook_size,
        videos: out,
        actions: videos.actions.clone(),
        splits: videos.splits.clone(),
    })
}
