//! Media shapes, latent token arithmetic and bucket catalogs.
//!
//! A clip of `frames × height × width` pixels is compressed by the VAE into
//! `((frames − 1)/λ + 1) × (height/η) × (width/γ)` latent tokens. Inputs that
//! do not divide evenly are rejected rather than rounded.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Raw media dimensions. `frames == 1` is a still image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MediaShape {
    pub frames: u32,
    pub height: u32,
    pub width: u32,
}

impl MediaShape {
    pub fn new(frames: u32, height: u32, width: u32) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                frames,
                height,
                width,
            });
        }
        Ok(Self {
            frames,
            height,
            width,
        })
    }

    pub fn image(height: u32, width: u32) -> Result<Self> {
        Self::new(1, height, width)
    }
}

/// VAE compression factors plus the fixed text-token prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatentGeometry {
    pub temporal_factor: u32,
    pub width_factor: u32,
    pub height_factor: u32,
    pub text_tokens: u64,
}

impl Default for LatentGeometry {
    fn default() -> Self {
        Self {
            temporal_factor: 8,
            width_factor: 16,
            height_factor: 16,
            text_tokens: 0,
        }
    }
}

impl LatentGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_factor == 0 || self.width_factor == 0 || self.height_factor == 0 {
            return Err(Error::InvalidGeometry);
        }
        Ok(())
    }
}

/// A group of samples sharing one shape and therefore one sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bucket {
    pub shape: MediaShape,
    pub seq_len: u64,
    pub sample_count: u64,
}

pub fn latent_frames(frames: u32, temporal_factor: u32) -> Result<u64> {
    if frames == 0 {
        return Err(Error::InvalidShape {
            frames,
            height: 1,
            width: 1,
        });
    }
    if temporal_factor == 0 {
        return Err(Error::InvalidGeometry);
    }
    let rest = frames - 1;
    if !rest.is_multiple_of(temporal_factor) {
        return Err(Error::NonDivisibleFrames {
            frames_minus_one: rest,
            factor: temporal_factor,
        });
    }
    Ok(u64::from(rest / temporal_factor) + 1)
}

fn spatial(axis: &'static str, value: u32, factor: u32) -> Result<u64> {
    if !value.is_multiple_of(factor) {
        return Err(Error::NonDivisibleSpatial {
            axis,
            value,
            factor,
        });
    }
    Ok(u64::from(value / factor))
}

/// Latent visual tokens of one sample, excluding text.
pub fn visual_tokens(shape: MediaShape, geom: &LatentGeometry) -> Result<u64> {
    geom.validate()?;
    let shape = MediaShape::new(shape.frames, shape.height, shape.width)?;
    let t = latent_frames(shape.frames, geom.temporal_factor)?;
    let h = spatial("height", shape.height, geom.height_factor)?;
    let w = spatial("width", shape.width, geom.width_factor)?;
    t.checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or(Error::Overflow("visual tokens"))
}

/// Logical sequence length `S = S_text + S_visual`.
pub fn sequence_length(shape: MediaShape, geom: &LatentGeometry) -> Result<u64> {
    visual_tokens(shape, geom)?
        .checked_add(geom.text_tokens)
        .ok_or(Error::Overflow("sequence length"))
}

/// Builds one bucket per shape, ordered by ascending sequence length and then
/// by `(frames, height, width)`.
pub fn build_catalog(shapes: &[(MediaShape, u64)], geom: &LatentGeometry) -> Result<Vec<Bucket>> {
    if shapes.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let mut buckets = shapes
        .iter()
        .map(|&(shape, sample_count)| {
            Ok(Bucket {
                shape,
                seq_len: sequence_length(shape, geom)?,
                sample_count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    buckets.sort_by_key(|b| (b.seq_len, b.shape));
    if let Some(w) = buckets.windows(2).find(|w| w[0].shape == w[1].shape) {
        let s = w[0].shape;
        return Err(Error::DuplicateShape {
            frames: s.frames,
            height: s.height,
            width: s.width,
        });
    }
    Ok(buckets)
}
