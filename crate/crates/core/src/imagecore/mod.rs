//! Raster types, the seeded random stream and on-disk formats shared by every
//! pipeline stage.
//!
//! All rasters are row-major with the origin at the top-left corner and `y`
//! increasing downward, which is also the PGM sample order.

mod f32map;
mod pgm;
mod rng;

pub use f32map::{read_f32map, write_f32map, F32MapHeader};
pub use pgm::{
    read_framestack, read_mask_pgm, read_pgm, write_framestack, write_mask_pgm, write_pgm,
    FrameManifest,
};
pub use rng::{RngState, RngStream};

use crate::error::{Error, Result};

/// Single-channel floating point raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl Image {
    /// Wraps raw (possibly unnormalized) data.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
            normalized: false,
        })
    }

    /// Wraps data that must already lie in `[0, 1]`; sets the normalized flag.
    pub fn new_normalized(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        let mut img = Image::new(width, height, data)?;
        if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "value {v} outside [0,1] in normalized image"
            )));
        }
        img.normalized = true;
        Ok(img)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
            normalized: true,
        }
    }

    /// Builds an image by evaluating `f(x, y)` at each pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        let normalized = data.iter().all(|v| (0.0..=1.0).contains(v));
        Image {
            width,
            height,
            data,
            normalized,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub(crate) fn require_normalized(&self, op: &str) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::invalid(format!("{op} requires a normalized image")))
        }
    }

    pub(crate) fn require_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{op}: pixel ({}, {}) is {}",
                i % self.width,
                i / self.width,
                self.data[i]
            ))),
        }
    }

    /// Replaces the data, recomputing the normalized flag from the values.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Image {
        debug_assert_eq!(data.len(), self.data.len());
        let normalized = data.iter().all(|v| (0.0..=1.0).contains(v));
        Image {
            width: self.width,
            height: self.height,
            data,
            normalized,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// One- or two-channel raster stored as consecutive channel planes.
///
/// With two channels, plane 0 is the perfusion map and plane 1 the enhanced
/// structural image.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl MultiChannelImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "multi-channel image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(MultiChannelImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_planes(planes: &[&Image]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::invalid("at least one channel plane is required"))?;
        let (w, h) = (first.width(), first.height());
        let mut data = Vec::with_capacity(w * h * planes.len());
        for (c, p) in planes.iter().enumerate() {
            if p.width() != w || p.height() != h {
                return Err(Error::DimensionMismatch(format!(
                    "channel {c} is {}x{}, channel 0 is {w}x{h}",
                    p.width(),
                    p.height()
                )));
            }
            data.extend_from_slice(p.data());
        }
        MultiChannelImage::new(w, h, planes.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Copies one channel out as an [`Image`].
    pub fn channel(&self, c: usize) -> Result<Image> {
        if c >= self.channels {
            return Err(Error::invalid(format!(
                "channel {c} out of range ({} channels)",
                self.channels
            )));
        }
        let plane = self.plane(c).to_vec();
        let normalized = plane.iter().all(|v| (0.0..=1.0).contains(v));
        let mut img = Image::new(self.width, self.height, plane)?;
        img.normalized = normalized;
        Ok(img)
    }
}

impl From<Image> for MultiChannelImage {
    fn from(img: Image) -> Self {
        MultiChannelImage {
            width: img.width,
            height: img.height,
            channels: 1,
            data: img.data,
        }
    }
}

/// Aligned video clip of one retinal field: `frames` planes of raw intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    width: usize,
    height: usize,
    frames: usize,
    data: Vec<f32>,
}

impl FrameStack {
    pub fn new(width: usize, height: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if frames < 2 {
            return Err(Error::invalid(format!("need >=2 frames, got {frames}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * frames {
            return Err(Error::DimensionMismatch(format!(
                "{frames} frames of {width}x{height} need {} values, got {}",
                width * height * frames,
                data.len()
            )));
        }
        Ok(FrameStack {
            width,
            height,
            frames,
            data,
        })
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::invalid(format!(
                "need >=2 frames, got {}",
                frames.len()
            )));
        }
        let (w, h) = (frames[0].width(), frames[0].height());
        let mut data = Vec::with_capacity(w * h * frames.len());
        for (i, f) in frames.iter().enumerate() {
            if f.width() != w || f.height() != h {
                return Err(Error::DimensionMismatch(format!(
                    "frame {i} is {}x{}, frame 0 is {w}x{h}",
                    f.width(),
                    f.height()
                )));
            }
            data.extend_from_slice(f.data());
        }
        FrameStack::new(w, h, frames.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_image(&self, i: usize) -> Image {
        Image::from_fn(self.width, self.height, |x, y| {
            self.frame(i)[y * self.width + x]
        })
    }
}

/// Foreground/background segmentation, one byte (0 or 1) per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        BinaryMask {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Coordinates of foreground pixels in raster order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i % w, i / w))
    }

    /// Mask as a normalized image (0.0 / 1.0).
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
            normalized: true,
        }
    }
}

pub(crate) fn check_same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_bad_length() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn normalized_flag_tracks_range() {
        assert!(Image::new_normalized(1, 2, vec![0.0, 1.5]).is_err());
        assert!(Image::new_normalized(1, 2, vec![0.0, 1.0])
            .unwrap()
            .is_normalized());
        assert!(!Image::new(1, 1, vec![3.0]).unwrap().is_normalized());
    }

    #[test]
    fn framestack_needs_two_frames() {
        let err = FrameStack::new(2, 2, 1, vec![0.0; 4]).unwrap_err();
        assert!(err.to_string().contains("need >=2 frames"));
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
        let m = BinaryMask::new(2, 1, vec![0, 1]).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.foreground().collect::<Vec<_>>(), vec![(1, 0)]);
    }

    #[test]
    fn channel_extraction_is_exact() {
        let a = Image::from_fn(4, 4, |x, y| (x + 4 * y) as f32 / 16.0);
        let b = Image::from_fn(4, 4, |x, _| x as f32 / 4.0);
        let mc = MultiChannelImage::from_planes(&[&a, &b]).unwrap();
        assert_eq!(mc.channel(0).unwrap().data(), a.data());
        assert_eq!(mc.channel(1).unwrap().data(), b.data());
        assert!(mc.channel(2).is_err());
    }
}
