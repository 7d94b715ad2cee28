use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::config::{parse_field, KvConfig};

/// Attention tile extent `t × y × x` in tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub t: usize,
    pub y: usize,
    pub x: usize,
}

impl Window {
    pub const fn new(t: usize, y: usize, x: usize) -> Self {
        Self { t, y, x }
    }

    pub fn tokens(&self) -> usize {
        self.t * self.y * self.x
    }

    /// Size of the relative-offset table `(2t−1)(2y−1)(2x−1)`.
    pub fn relative_span(&self) -> usize {
        (2 * self.t - 1) * (2 * self.y - 1) * (2 * self.x - 1)
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.y, self.x)
    }
}

impl FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('x').collect();
        let parsed: std::result::Result<Vec<usize>, _> = parts.iter().map(|p| p.trim().parse()).collect();
        match parsed.as_deref() {
            Ok(&[t, y, x]) if t > 0 && y > 0 && x > 0 => Ok(Window::new(t, y, x)),
            _ => Err(format!("window `{s}` is not of the form TxHxW with positive extents")),
        }
    }
}

/// Token-grid extent of one video: `frames × height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn full_window(&self) -> Window {
        Window::new(self.frames, self.height, self.width)
    }

    pub fn check_window(&self, w: Window) -> Result<()> {
        if self.frames % w.t != 0 || self.height % w.y != 0 || self.width % w.x != 0 {
            return Err(Error::InvalidShape(format!(
                "window {w} does not tile grid {}x{}x{}",
                self.frames, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub frames: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub spatial_window: Window,
    pub st_window: Window,
    pub dropout: f64,
    pub codebook_size: usize,
    /// Action vector length; 0 disables action conditioning.
    pub action_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            embed_dim: 128,
            heads: 4,
            ff_dim: 512,
            frames: 8,
            grid_height: 8,
            grid_width: 8,
            spatial_window: Window::new(1, 8, 8),
            st_window: Window::new(8, 4, 4),
            dropout: 0.0,
            codebook_size: 128,
            action_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn geometry(&self) -> Geometry {
        Geometry {
            frames: self.frames,
            height: self.grid_height,
            width: self.grid_width,
        }
    }

    /// Index of the reserved `[MASK]` token.
    pub fn mask_token(&self) -> usize {
        self.codebook_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.embed_dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("blocks, embed_dim, heads and ff_dim must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        let g = self.geometry();
        if g.tokens() == 0 {
            return Err(Error::Config("grid extents must be positive".into()));
        }
        for w in [self.spatial_window, self.st_window] {
            g.check_window(w).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("blocks", self.blocks.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("heads", self.heads.to_string());
        put("ff_dim", self.ff_dim.to_string());
        put("frames", self.frames.to_string());
        put("grid_height", self.grid_height.to_string());
        put("grid_width", self.grid_width.to_string());
        put("spatial_window", self.spatial_window.to_string());
        put("st_window", self.st_window.to_string());
        put("dropout", self.dropout.to_string());
        put("codebook_size", self.codebook_size.to_string());
        put("action_dim", self.action_dim.to_string());
        m
    }

    pub fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            m.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("model manifest lacks `{k}`")))
        };
        let cfg = Self {
            blocks: parse_field("blocks", get("blocks")?)?,
            embed_dim: parse_field("embed_dim", get("embed_dim")?)?,
            heads: parse_field("heads", get("heads")?)?,
            ff_dim: parse_field("ff_dim", get("ff_dim")?)?,
            frames: parse_field("frames", get("frames")?)?,
            grid_height: parse_field("grid_height", get("grid_height")?)?,
            grid_width: parse_field("grid_width", get("grid_width")?)?,
            spatial_window: parse_field("spatial_window", get("spatial_window")?)?,
            st_window: parse_field("st_window", get("st_window")?)?,
            dropout: parse_field("dropout", get("dropout")?)?,
            codebook_size: parse_field("codebook_size", get("codebook_size")?)?,
            action_dim: parse_field("action_dim", get("action_dim")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads model keys from a config file. The grid defaults follow `grid`
    /// (square) and the spatial window defaults to a whole frame.
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let grid: usize = kv.take_or("grid", d.grid_height)?;
        let frames = kv.take_or("frames", d.frames)?;
        let cfg = Self {
            blocks: kv.take_or("blocks", d.blocks)?,
            embed_dim: kv.take_or("embed_dim", d.embed_dim)?,
            heads: kv.take_or("heads", d.heads)?,
            ff_dim: kv.take_or("ff_dim", d.ff_dim)?,
            frames,
            grid_height: grid,
            grid_width: grid,
            spatial_window: kv.take_or("spatial_window", Window::new(1, grid, grid))?,
            st_window: kv.take_or("st_window", Window::new(frames, 4.min(grid), 4.min(grid)))?,
            dropout: kv.take_or("dropout", d.dropout)?,
            codebook_size: kv.take_or("codebook_size", d.codebook_size)?,
            action_dim: kv.take_or("action_dim", d.action_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_parses_and_prints() {
        let w: Window = "8x4x4".parse().unwrap();
        assert_eq!(w, Window::new(8, 4, 4));
        assert_eq!(w.to_string(), "8x4x4");
        assert_eq!(w.relative_span(), 15 * 7 * 7);
        assert!("8x4".parse::<Window>().is_err());
        assert!("0x4x4".parse::<Window>().is_err());
    }

    #[test]
    fn non_dividing_window_is_rejected() {
        let cfg = ModelConfig {
            st_window: Window::new(8, 3, 4),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = ModelConfig {
            action_dim: 5,
            dropout: 0.1,
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_manifest(&cfg.to_manifest()).unwrap(), cfg);
    }
}
