//! Domain styles as averaged low-frequency Fourier amplitudes.
//!
//! A style window `W_beta` is the axis-aligned rectangle of
//! `max(1, round(beta * H)) x max(1, round(beta * W))` bins centered on the
//! zero frequency of the center-shifted spectrum. When an extent is even the
//! top/left half is the shorter one. A [`StyleToken`] stores the mean
//! amplitude inside that window over one step's training images, and the
//! [`StyleBank`] keeps one token per completed step.
//!
//! Stylizing swaps the window amplitudes of an image for the token's values
//! and keeps the phase and every amplitude outside the window. For odd
//! window extents the swapped spectrum stays Hermitian and the inverse
//! transform is exactly real. For even extents the outermost row/column of
//! the window has no mirror inside it, so taking the real part averages that
//! bin with its mirror; phases are still preserved.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;

use crate::binio::{ByteReader, ByteWriter};
use crate::numerics::{fft2, ifft2_real, ifftshift_index, ComplexPlane, Grid, Tensor3};
use crate::{Error, Result};

pub const BANK_MAGIC: &[u8; 4] = b"STYB";
pub const BANK_VERSION: u32 = 1;
const STYLE_CHANNELS: usize = 3;

/// Window extent along one axis for a given beta.
pub fn window_extent(beta: f64, n: usize) -> usize {
    ((beta * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1))
}

/// `(window_h, window_w)` for an image size.
pub fn window_dims(beta: f64, h: usize, w: usize) -> (usize, usize) {
    (window_extent(beta, h), window_extent(beta, w))
}

/// First shifted-coordinate index covered by a window of `extent` on an axis of `n`.
pub fn window_origin(extent: usize, n: usize) -> usize {
    n / 2 - (extent - 1) / 2
}

/// Unshifted `(row, col)` spectrum indices covered by the window, in
/// row-major window order.
pub fn window_bins(beta: f64, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (wh, ww) = window_dims(beta, h, w);
    let (top, left) = (window_origin(wh, h), window_origin(ww, w));
    let mut bins = Vec::with_capacity(wh * ww);
    for i in 0..wh {
        for j in 0..ww {
            bins.push((ifftshift_index(top + i, h), ifftshift_index(left + j, w)));
        }
    }
    bins
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::config(
            "beta",
            format!("beta must lie in (0, 1), got {beta}"),
        ));
    }
    Ok(())
}

/// Average amplitude window of one step's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleToken {
    pub step_index: u32,
    pub beta: f64,
    pub window_h: usize,
    pub window_w: usize,
    /// `window_h x window_w x 3`, channel-fastest, shifted-window order.
    pub values: Vec<f32>,
}

impl StyleToken {
    #[inline]
    pub fn value(&self, i: usize, j: usize, c: usize) -> f32 {
        self.values[(i * self.window_w + j) * STYLE_CHANNELS + c]
    }

    fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let dims = window_dims(self.beta, h, w);
        if dims != (self.window_h, self.window_w) {
            return Err(Error::Shape(format!(
                "token window {}x{} does not fit a {h}x{w} image at beta {} (expected {}x{})",
                self.window_h, self.window_w, self.beta, dims.0, dims.1
            )));
        }
        Ok(())
    }
}

/// Mean amplitude window over `images`.
pub fn extract_style(images: &[Tensor3<f32>], beta: f64, step_index: u32) -> Result<StyleToken> {
    check_beta(beta)?;
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyDataset("no images to extract a style from".into()))?;
    let (h, w, c) = first.shape();
    if c != STYLE_CHANNELS {
        return Err(Error::Shape(format!(
            "style extraction expects 3 channels, got {c}"
        )));
    }
    let bins = window_bins(beta, h, w);
    let (window_h, window_w) = window_dims(beta, h, w);
    let mut sums = vec![0f64; bins.len() * STYLE_CHANNELS];
    for img in images {
        if img.shape() != (h, w, c) {
            return Err(Error::Shape(format!(
                "image {:?} differs from {:?}",
                img.shape(),
                (h, w, c)
            )));
        }
        for ch in 0..STYLE_CHANNELS {
            let spec = fft2(&img.plane(ch))?;
            for (b, &(u, v)) in bins.iter().enumerate() {
                sums[b * STYLE_CHANNELS + ch] += spec.get(u, v).norm();
            }
        }
    }
    let n = images.len() as f64;
    Ok(StyleToken {
        step_index,
        beta,
        window_h,
        window_w,
        values: sums.iter().map(|s| (s / n) as f32).collect(),
    })
}

/// Image spectra kept around so several tokens can be applied to one image
/// without repeating the forward transform.
pub struct Stylizer {
    height: usize,
    width: usize,
    spectra: Vec<ComplexPlane>,
}

impl Stylizer {
    pub fn new(image: &Tensor3<f32>) -> Result<Self> {
        if image.channels() != STYLE_CHANNELS {
            return Err(Error::Shape(format!(
                "stylization expects 3 channels, got {}",
                image.channels()
            )));
        }
        let spectra = (0..STYLE_CHANNELS)
            .map(|c| fft2(&image.plane(c)))
            .collect::<Result<_>>()?;
        Ok(Self {
            height: image.height(),
            width: image.width(),
            spectra,
        })
    }

    /// Stylized image before clamping, in double precision.
    pub fn apply_unclamped(&self, token: &StyleToken) -> Result<Vec<Grid<f64>>> {
        token.check_image(self.height, self.width)?;
        let bins = window_bins(token.beta, self.height, self.width);
        let mut planes = Vec::with_capacity(STYLE_CHANNELS);
        for (ch, spec) in self.spectra.iter().enumerate() {
            let mut swapped = spec.clone();
            for (b, &(u, v)) in bins.iter().enumerate() {
                let target = token.values[b * STYLE_CHANNELS + ch] as f64;
                let z = spec.get(u, v);
                let a = z.norm();
                let replaced = if a > 0.0 {
                    z * (target / a)
                } else {
                    Complex64::new(target, 0.0)
                };
                swapped.set(u, v, replaced);
            }
            planes.push(ifft2_real(&swapped)?);
        }
        Ok(planes)
    }

    /// Stylized image clamped to `[0, 1]`.
    pub fn apply(&self, token: &StyleToken) -> Result<Tensor3<f32>> {
        let mut planes = self.apply_unclamped(token)?;
        for p in &mut planes {
            for v in &mut p.data {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Tensor3::from_planes(&planes)
    }
}

/// Replaces the image's amplitude window with the token's, keeping phase and
/// the window complement; output clamped to `[0, 1]`.
pub fn apply_style(image: &Tensor3<f32>, token: &StyleToken) -> Result<Tensor3<f32>> {
    Stylizer::new(image)?.apply(token)
}

/// [`apply_style`] without the final clamp.
pub fn apply_style_unclamped(image: &Tensor3<f32>, token: &StyleToken) -> Result<Tensor3<f64>> {
    let planes = Stylizer::new(image)?.apply_unclamped(token)?;
    let (h, w) = (image.height(), image.width());
    let mut out = Tensor3::zeros(h, w, STYLE_CHANNELS);
    for (c, p) in planes.iter().enumerate() {
        for (i, &v) in p.data.iter().enumerate() {
            out.data_mut()[i * STYLE_CHANNELS + c] = v;
        }
    }
    Ok(out)
}

/// Ordered, append-only collection of per-step style tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBank {
    image_h: usize,
    image_w: usize,
    beta: f64,
    tokens: BTreeMap<u32, StyleToken>,
}

impl StyleBank {
    pub fn new(image_h: usize, image_w: usize, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if image_h == 0 || image_w == 0 {
            return Err(Error::Dimension(format!(
                "bank image size {image_h}x{image_w}"
            )));
        }
        Ok(Self {
            image_h,
            image_w,
            beta,
            tokens: BTreeMap::new(),
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, step: u32) -> Option<&StyleToken> {
        self.tokens.get(&step)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &StyleToken> {
        self.tokens.values()
    }

    /// Appends the token of the next step. Steps are contiguous from 0.
    pub fn with_token(mut self, token: StyleToken) -> Result<Self> {
        let expected = self.tokens.len() as u32;
        if token.step_index != expected {
            return Err(Error::Protocol(format!(
                "style bank holds steps 0..{expected}; cannot add step {}",
                token.step_index
            )));
        }
        if token.beta != self.beta {
            return Err(Error::Protocol(format!(
                "token beta {} != bank beta {}",
                token.beta, self.beta
            )));
        }
        token.check_image(self.image_h, self.image_w)?;
        if token.values.len() != token.window_h * token.window_w * STYLE_CHANNELS {
            return Err(Error::Shape(
                "token value count does not match its window".into(),
            ));
        }
        self.tokens.insert(token.step_index, token);
        Ok(self)
    }

    /// Stylizes an image of the bank's configured size with the style of `step`.
    pub fn apply(&self, image: &Tensor3<f32>, step: u32) -> Result<Tensor3<f32>> {
        if (image.height(), image.width()) != (self.image_h, self.image_w) {
            return Err(Error::Shape(format!(
                "image {}x{} vs bank {}x{}",
                image.height(),
                image.width(),
                self.image_h,
                self.image_w
            )));
        }
        let token = self
            .get(step)
            .ok_or_else(|| Error::Protocol(format!("no style stored for step {step}")))?;
        apply_style(image, token)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.u32(self.image_h as u32);
        w.u32(self.image_w as u32);
        w.f64(self.beta);
        w.u32(self.tokens.len() as u32);
        for t in self.tokens.values() {
            w.u32(t.step_index);
            w.u32(t.window_h as u32);
            w.u32(t.window_w as u32);
            for &v in &t.values {
                w.f32(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(BANK_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != BANK_VERSION {
            return Err(Error::format(
                at,
                format!("unsupported style bank version {version}"),
            ));
        }
        let image_h = r.u32("image_h")? as usize;
        let image_w = r.u32("image_w")? as usize;
        let at = r.offset();
        let beta = r.f64("beta")?;
        let mut bank =
            StyleBank::new(image_h, image_w, beta).map_err(|e| Error::format(at, e.to_string()))?;
        let count = r.u32("token_count")?;
        for _ in 0..count {
            let at = r.offset();
            let step_index = r.u32("step_index")?;
            let window_h = r.u32("window_h")? as usize;
            let window_w = r.u32("window_w")? as usize;
            if (window_h, window_w) != window_dims(beta, image_h, image_w) {
                return Err(Error::format(
                    at,
                    format!("token window {window_h}x{window_w} inconsistent with header"),
                ));
            }
            let values = r.f32_vec(window_h * window_w * STYLE_CHANNELS, "token values")?;
            if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::format(
                    at,
                    "token holds a negative or non-finite amplitude",
                ));
            }
            let token = StyleToken {
                step_index,
                beta,
                window_h,
                window_w,
                values,
            };
            bank = bank
                .with_token(token)
                .map_err(|e| Error::format(at, e.to_string()))?;
        }
        r.expect_end()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
