//! Generator (dense flow network and rendering network) and the image and
//! mouth discriminators.
//!
//! All activations are `[N, C, H, W]`. Shape traces report `(H, W, C)` to
//! match the usual way architecture tables are written.

mod discriminator;
mod generator;
mod layers;
mod warp;

pub use discriminator::{DiscOutput, Discriminator};
pub use generator::{Encoded, FlowNet, Generator, GeneratorInput, GeneratorOutput, RenderNet};
pub use layers::{
    pixel_shuffle, pixel_unshuffle, AdainBlock, Builder, Conv, Linear, SpadeBlock, SpectralState,
    IN_EPS, LRELU_SLOPE,
};
pub use warp::{bilinear_warp, downsample_flow, warp_kernel, warp_kernel_backward};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One row of a forward shape trace: block label and `(H, W, C)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub block: String,
    pub shape: (usize, usize, usize),
}

impl TraceRow {
    pub fn new(block: impl Into<String>, shape: &[usize]) -> Self {
        TraceRow {
            block: block.into(),
            shape: (shape[2], shape[3], shape[1]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture preset `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub preset: Preset,
    pub resolution: usize,
    /// Encoder widths at full, half and quarter resolution. Each must be
    /// four times the previous one for the pixel-shuffle decoder.
    pub widths: [usize; 3],
    pub spade_hidden: usize,
    /// Past driving frames stacked with the current one.
    pub past_frames: usize,
    pub audio_dim: usize,
    pub disc_base: usize,
    pub disc_layers: usize,
    pub mouth_crop: usize,
}

impl ArchConfig {
    pub fn paper() -> Self {
        ArchConfig {
            preset: Preset::Paper,
            resolution: 256,
            widths: [32, 128, 512],
            spade_hidden: 128,
            past_frames: 2,
            audio_dim: 300,
            disc_base: 64,
            disc_layers: 4,
            mouth_crop: 64,
        }
    }

    pub fn desk() -> Self {
        ArchConfig {
            preset: Preset::Desk,
            resolution: 64,
            widths: [8, 32, 128],
            spade_hidden: 32,
            past_frames: 2,
            audio_dim: 300,
            disc_base: 16,
            disc_layers: 4,
            mouth_crop: 16,
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn driving_channels(&self) -> usize {
        3 * (self.past_frames + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let [c1, c2, c3] = self.widths;
        if c2 != 4 * c1 || c3 != 4 * c2 {
            return Err(Error::InvalidArgument(format!(
                "widths {:?} must grow by 4x per level",
                self.widths
            )));
        }
        if !self.resolution.is_multiple_of(4) || self.resolution < 8 {
            return Err(Error::InvalidArgument(format!(
                "resolution {} must be a multiple of 4",
                self.resolution
            )));
        }
        if self.mouth_crop == 0 || self.mouth_crop > self.resolution {
            return Err(Error::InvalidArgument(format!(
                "mouth crop {} does not fit resolution {}",
                self.mouth_crop, self.resolution
            )));
        }
        if self.disc_layers < 2 || self.disc_base == 0 || self.spade_hidden == 0 {
            return Err(Error::InvalidArgument(
                "degenerate discriminator or head size".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
