//! Series and image containers, token sequences, and the invertible
//! transforms between them.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Below this population standard deviation a series is treated as constant.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Temporal,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Temporal => "temporal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub norm_stats: Option<NormStats>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("time series must be nonempty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("time series values must be finite".into()));
        }
        Ok(Self {
            values,
            norm_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

/// `height x width x channels` raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image must be at least 1x1".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Columns `[x0, x0 + width)` at full height.
    pub fn crop_columns(&self, x0: usize, width: usize) -> Result<Image> {
        if x0 + width > self.width || width == 0 {
            return Err(Error::GeometryMismatch(format!(
                "column crop [{x0}, {}) outside width {}",
                x0 + width,
                self.width
            )));
        }
        let mut pixels = Vec::with_capacity(self.height * width * self.channels);
        for y in 0..self.height {
            let start = (y * self.width + x0) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + width * self.channels]);
        }
        Ok(Image {
            height: self.height,
            width,
            channels: self.channels,
            pixels,
        })
    }

    /// Horizontal concatenation of equally tall images.
    pub fn hconcat(parts: &[Image]) -> Result<Image> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        if parts
            .iter()
            .any(|p| p.height != first.height || p.channels != first.channels)
        {
            return Err(Error::GeometryMismatch("hconcat needs equal height and channels".into()));
        }
        let width: usize = parts.iter().map(|p| p.width).sum();
        let mut pixels = Vec::with_capacity(first.height * width * first.channels);
        for y in 0..first.height {
            for p in parts {
                let start = y * p.width * p.channels;
                pixels.extend_from_slice(&p.pixels[start..start + p.width * p.channels]);
            }
        }
        Ok(Image {
            height: first.height,
            width,
            channels: first.channels,
            pixels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenGeometry {
    Visual {
        height: usize,
        width: usize,
        patch: usize,
        channels: usize,
    },
    Temporal {
        /// Original series length before any padding.
        len: usize,
        segment: usize,
        /// Number of replicated values prepended by lenient segmentation.
        pad: usize,
    },
}

impl TokenGeometry {
    pub fn modality(&self) -> Modality {
        match self {
            TokenGeometry::Visual { .. } => Modality::Visual,
            TokenGeometry::Temporal { .. } => Modality::Temporal,
        }
    }
}

/// `N x P` token matrix plus the geometry needed to invert it.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub geometry: TokenGeometry,
}

impl TokenSequence {
    pub fn origin(&self) -> Modality {
        self.geometry.modality()
    }

    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SegmentMode {
    #[default]
    Strict,
    Lenient,
}

/// Split an image into non-overlapping `patch x patch` tokens, patches in
/// row-major order and each token flattened as (row, column, channel).
pub fn patchify_image(img: &Image, patch: usize) -> Result<TokenSequence> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(Error::NonDivisibleGeometry {
            height: img.height,
            width: img.width,
            patch,
        });
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let features = patch * patch * img.channels;
    let mut tokens = Matrix::zeros(gh * gw, features);
    for py in 0..gh {
        for px in 0..gw {
            let row = tokens.row_mut(py * gw + px);
            let mut k = 0;
            for dy in 0..patch {
                let start = ((py * patch + dy) * img.width + px * patch) * img.channels;
                let run = &img.pixels[start..start + patch * img.channels];
                row[k..k + run.len()].copy_from_slice(run);
                k += run.len();
            }
        }
    }
    Ok(TokenSequence {
        tokens,
        geometry: TokenGeometry::Visual {
            height: img.height,
            width: img.width,
            patch,
            channels: img.channels,
        },
    })
}

/// Inverse of [`patchify_image`]; values are clamped to `[0, 1]`.
pub fn unpatchify_image(seq: &TokenSequence) -> Result<Image> {
    let TokenGeometry::Visual {
        height,
        width,
        patch,
        channels,
    } = seq.geometry
    else {
        return Err(Error::GeometryMismatch("tokens are not visual".into()));
    };
    let (n, p) = seq.tokens.shape();
    if patch == 0
        || height % patch != 0
        || width % patch != 0
        || n * p != height * width * channels
        || n != (height / patch) * (width / patch)
        || p != patch * patch * channels
    {
        return Err(Error::GeometryMismatch(format!(
            "{n}x{p} tokens cannot form a {height}x{width}x{channels} image with patch {patch}"
        )));
    }
    let gw = width / patch;
    let mut pixels = vec![0.0; height * width * channels];
    for t in 0..n {
        let (py, px) = (t / gw, t % gw);
        let row = seq.tokens.row(t);
        let run_len = patch * channels;
        for dy in 0..patch {
            let start = ((py * patch + dy) * width + px * patch) * channels;
            for (dst, &src) in pixels[start..start + run_len]
                .iter_mut()
                .zip(&row[dy * run_len..(dy + 1) * run_len])
            {
                *dst = src.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image {
        height,
        width,
        channels,
        pixels,
    })
}

/// Cut a series into consecutive segments of `segment` values.
///
/// Lenient mode left-pads with the first value up to the next multiple of
/// `segment`; the pad length travels in the geometry so [`assemble_series`]
/// can strip it.
pub fn segment_series(x: &TimeSeries, segment: usize, mode: SegmentMode) -> Result<TokenSequence> {
    let len = x.values.len();
    if segment == 0 {
        return Err(Error::InvalidArgument("segment length must be positive".into()));
    }
    if len == 0 {
        return Err(Error::InvalidArgument("empty series".into()));
    }
    let pad = match mode {
        SegmentMode::Strict if !len.is_multiple_of(segment) => {
            return Err(Error::NonDivisibleLength { len, segment })
        }
        SegmentMode::Strict => 0,
        SegmentMode::Lenient => (segment - len % segment) % segment,
    };
    let mut padded = Vec::with_capacity(len + pad);
    padded.extend(std::iter::repeat_n(x.values[0], pad));
    padded.extend_from_slice(&x.values);
    let n = padded.len() / segment;
    Ok(TokenSequence {
        tokens: Matrix::from_vec(n, segment, padded)?,
        geometry: TokenGeometry::Temporal { len, segment, pad },
    })
}

/// Concatenate temporal tokens back into a series, dropping any left pad.
pub fn assemble_series(seq: &TokenSequence) -> Result<TimeSeries> {
    let TokenGeometry::Temporal { len, segment, pad } = seq.geometry else {
        return Err(Error::GeometryMismatch("tokens are not temporal".into()));
    };
    let (n, p) = seq.tokens.shape();
    if p != segment || n * p != len + pad {
        return Err(Error::GeometryMismatch(format!(
            "{n}x{p} tokens do not cover length {len} with segment {segment} and pad {pad}"
        )));
    }
    Ok(TimeSeries {
        values: seq.tokens.data[pad..].to_vec(),
        norm_stats: None,
    })
}

/// Standardize to zero mean and unit population std, recording the stats.
pub fn instance_normalize(x: &TimeSeries) -> TimeSeries {
    let stats = norm_stats_of(&x.values);
    TimeSeries {
        values: x.values.iter().map(|&v| stats.normalize(v)).collect(),
        norm_stats: Some(stats),
    }
}

pub fn norm_stats_of(values: &[f64]) -> NormStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    NormStats {
        mean,
        std: if std < NORM_EPS { 1.0 } else { std },
    }
}

/// Undo [`instance_normalize`]; a series without stats is returned as is.
pub fn denormalize(x: &TimeSeries) -> TimeSeries {
    match x.norm_stats {
        Some(stats) => TimeSeries {
            values: x.values.iter().map(|&v| stats.denormalize(v)).collect(),
            norm_stats: None,
        },
        None => x.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_image(h: usize, w: usize, c: usize) -> Image {
        let n = h * w * c;
        Image::new(h, w, c, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn patchify_token_counts() {
        let img = Image::filled(256, 256, 1, 0.5);
        let seq = patchify_image(&img, 16).unwrap();
        assert_eq!(seq.tokens.shape(), (256, 256));

        let zeros = Image::filled(4, 4, 1, 0.0);
        let seq = patchify_image(&zeros, 2).unwrap();
        assert_eq!(seq.tokens.shape(), (4, 4));
        assert!(seq.tokens.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = Image::filled(5, 4, 1, 0.0);
        assert!(matches!(
            patchify_image(&img, 2),
            Err(Error::NonDivisibleGeometry { .. })
        ));
    }

    #[test]
    fn patch_layout_is_row_major() {
        let img = ramp_image(4, 4, 1);
        let seq = patchify_image(&img, 2).unwrap();
        // second patch is the top-right 2x2 block
        assert_eq!(seq.tokens.row(1), &[img.get(0, 2, 0), img.get(0, 3, 0), img.get(1, 2, 0), img.get(1, 3, 0)]);
    }

    #[test]
    fn unpatchify_round_trip_rgb() {
        let img = ramp_image(8, 8, 3);
        let back = unpatchify_image(&patchify_image(&img, 4).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn unpatchify_clamps() {
        let mut seq = patchify_image(&Image::filled(4, 4, 1, 0.0), 2).unwrap();
        seq.tokens.data.iter_mut().for_each(|v| *v = 1.5);
        let img = unpatchify_image(&seq).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn unpatchify_geometry_mismatch() {
        let seq = TokenSequence {
            tokens: Matrix::zeros(4, 4),
            geometry: TokenGeometry::Visual {
                height: 8,
                width: 8,
                patch: 2,
                channels: 1,
            },
        };
        assert!(matches!(unpatchify_image(&seq), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn strict_segments() {
        let x = TimeSeries::new((1..=8).map(f64::from).collect()).unwrap();
        let seq = segment_series(&x, 2, SegmentMode::Strict).unwrap();
        assert_eq!(seq.tokens.data, (1..=8).map(f64::from).collect::<Vec<_>>());
        assert_eq!(seq.tokens.shape(), (4, 2));
        let short = TimeSeries::new(vec![0.0; 7]).unwrap();
        assert!(matches!(
            segment_series(&short, 2, SegmentMode::Strict),
            Err(Error::NonDivisibleLength { len: 7, segment: 2 })
        ));
    }

    #[test]
    fn lenient_pads_left_with_first_value() {
        let x = TimeSeries::new(vec![5.0, 1.0, 2.0, 3.0, 4.0, 6.0, 7.0]).unwrap();
        let seq = segment_series(&x, 2, SegmentMode::Lenient).unwrap();
        assert_eq!(seq.tokens.rows, 4);
        assert_eq!(seq.tokens.row(0), &[5.0, 5.0]);
        assert_eq!(assemble_series(&seq).unwrap().values, x.values);
    }

    #[test]
    fn assemble_rejects_visual() {
        let seq = patchify_image(&Image::filled(2, 2, 1, 0.0), 1).unwrap();
        assert!(matches!(assemble_series(&seq), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn normalize_small_cases() {
        let x = TimeSeries::new(vec![1.0, 2.0, 3.0]).unwrap();
        let z = instance_normalize(&x);
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in z.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }

        let c = instance_normalize(&TimeSeries::new(vec![5.0; 3]).unwrap());
        assert_eq!(c.values, vec![0.0; 3]);
        assert_eq!(c.norm_stats, Some(NormStats { mean: 5.0, std: 1.0 }));

        let again = instance_normalize(&z);
        for (a, b) in again.values.iter().zip(&z.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn patchify_inverts(gh in 1usize..4, gw in 1usize..4, f in 1usize..4, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let (h, w) = (gh * f, gw * f);
            let mut s = seed;
            let pixels = (0..h * w * c).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            }).collect();
            let img = Image::new(h, w, c, pixels).unwrap();
            let seq = patchify_image(&img, f).unwrap();
            prop_assert_eq!(seq.tokens.rows, gh * gw);
            prop_assert_eq!(unpatchify_image(&seq).unwrap(), img);
        }

        #[test]
        fn segment_inverts(values in prop::collection::vec(-1e6f64..1e6, 1..64), l in 1usize..9) {
            let x = TimeSeries::new(values).unwrap();
            let seq = segment_series(&x, l, SegmentMode::Lenient).unwrap();
            prop_assert!(seq.tokens.rows * l >= x.len());
            prop_assert!((seq.tokens.rows - 1) * l < x.len());
            prop_assert_eq!(&assemble_series(&seq).unwrap().values, &x.values);
            if x.len() % l == 0 {
                let strict = segment_series(&x, l, SegmentMode::Strict).unwrap();
                prop_assert_eq!(assemble_series(&strict).unwrap().values, x.values);
            }
        }

        #[test]
        fn normalize_inverts(values in prop::collection::vec(-1e3f64..1e3, 2..64)) {
            let x = TimeSeries::new(values).unwrap();
            prop_assume!(x.variance().sqrt() > 1e-6);
            let back = denormalize(&instance_normalize(&x));
            let scale = x.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in back.values.iter().zip(&x.values) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
    }
}
