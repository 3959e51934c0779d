//! Cross-modal pipelines over a frozen bundle: series/image conversion,
//! outpainting forecasts, latent style fusion, and evaluation metrics.

use crate::autoencoder::{decode_traced, encode_traced};
use crate::error::{Error, Result};
use crate::quantizer::{quantize, QuantizeResult};
use crate::tensor::Matrix;
use crate::tokenize::{
    assemble_series, norm_stats_of, unpatchify_image, Image, NormStats, TimeSeries, TokenSequence,
};
use crate::training::{BundleConfig, TokenizerBundle};

fn require_frozen(bundle: &TokenizerBundle) -> Result<()> {
    if bundle.frozen {
        Ok(())
    } else {
        Err(Error::NotFrozen)
    }
}

fn quantize_tokens(bundle: &TokenizerBundle, seq: &TokenSequence) -> Result<QuantizeResult> {
    let (e, _) = encode_traced(bundle.autoencoder(seq.origin()), seq)?;
    quantize(&e, &bundle.codebook)
}

fn decode_image(bundle: &TokenizerBundle, q: &Matrix) -> Result<Image> {
    let (tokens, _) = decode_traced(&bundle.visual, q)?;
    unpatchify_image(&TokenSequence {
        tokens,
        geometry: bundle.config.visual_geometry(),
    })
}

fn decode_series(bundle: &TokenizerBundle, q: &Matrix, stats: &NormStats) -> Result<TimeSeries> {
    let (tokens, _) = decode_traced(&bundle.temporal, q)?;
    let z = assemble_series(&TokenSequence {
        tokens,
        geometry: bundle.config.temporal_geometry(),
    })?;
    Ok(TimeSeries {
        values: z.values.iter().map(|&v| stats.denormalize(v)).collect(),
        norm_stats: None,
    })
}

/// Series to image through the temporal encoder, the shared codebook and
/// the visual decoder.
pub fn series_to_image(x: &TimeSeries, bundle: &TokenizerBundle) -> Result<Image> {
    series_to_image_with_stats(x, bundle).map(|(img, _)| img)
}

/// [`series_to_image`], also returning the normalization it applied.
pub fn series_to_image_with_stats(x: &TimeSeries, bundle: &TokenizerBundle) -> Result<(Image, NormStats)> {
    let stats = norm_stats_of(&x.values);
    Ok((series_to_image_using(x, &stats, bundle)?, stats))
}

/// Render a series normalized by externally supplied statistics.
pub fn series_to_image_using(x: &TimeSeries, stats: &NormStats, bundle: &TokenizerBundle) -> Result<Image> {
    require_frozen(bundle)?;
    let z = TimeSeries {
        values: x.values.iter().map(|&v| stats.normalize(v)).collect(),
        norm_stats: Some(*stats),
    };
    let seq = bundle.segment_normalized(&z)?;
    let qr = quantize_tokens(bundle, &seq)?;
    decode_image(bundle, &qr.q.data)
}

/// Image to series through the visual encoder, the shared codebook and the
/// temporal decoder, denormalized with `stats`.
pub fn image_to_series(img: &Image, bundle: &TokenizerBundle, stats: &NormStats) -> Result<TimeSeries> {
    require_frozen(bundle)?;
    let seq = bundle.tokenize_image(img)?;
    let qr = quantize_tokens(bundle, &seq)?;
    decode_series(bundle, &qr.q.data, stats)
}

/// Decode the sum of both quantized grids with the visual decoder.
pub fn stylize(img: &Image, x: &TimeSeries, bundle: &TokenizerBundle) -> Result<Image> {
    require_frozen(bundle)?;
    let qv = quantize_tokens(bundle, &bundle.tokenize_image(img)?)?;
    let (ts, _) = bundle.tokenize_series(x)?;
    let qt = quantize_tokens(bundle, &ts)?;
    let mut sum = qt.q.data;
    sum.add_assign(&qv.q.data);
    decode_image(bundle, &sum)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForecastConfig {
    pub context_length: usize,
    pub horizon: usize,
    pub w_obs: usize,
    pub w_out: usize,
}

impl ForecastConfig {
    /// Number of observation-width blocks painted to the right.
    pub fn future_blocks(&self) -> usize {
        self.w_out / self.w_obs - 1
    }

    pub fn validate(&self, bundle: &TokenizerBundle) -> Result<()> {
        self.validate_against(&bundle.config)
    }

    pub fn validate_against(&self, c: &BundleConfig) -> Result<()> {
        if self.w_obs == 0 || self.w_out <= self.w_obs || !self.w_out.is_multiple_of(self.w_obs) {
            return Err(Error::Config(format!(
                "w_out = {} must be a multiple of w_obs = {} and larger",
                self.w_out, self.w_obs
            )));
        }
        if self.w_obs != c.image_width {
            return Err(Error::GeometryMismatch(format!(
                "w_obs = {} but the bundle renders width {}",
                self.w_obs, c.image_width
            )));
        }
        if self.context_length != c.series_len {
            return Err(Error::GeometryMismatch(format!(
                "context length {} but the bundle takes series of length {}",
                self.context_length, c.series_len
            )));
        }
        if self.horizon == 0 || self.horizon.div_ceil(self.context_length) != self.future_blocks() {
            return Err(Error::Config(format!(
                "horizon {} does not fill {} future blocks of length {}",
                self.horizon,
                self.future_blocks(),
                self.context_length
            )));
        }
        Ok(())
    }
}

/// Extends an image to the right. Implementations must leave the input
/// columns untouched and keep pixels in `[0, 1]`.
pub trait Outpainter {
    fn outpaint(&self, img: &Image, target_width: usize) -> Result<Image>;
}

/// Paints a known future rendered with the observation's statistics.
pub struct OracleOutpainter<'a> {
    pub future: &'a TimeSeries,
    pub stats: NormStats,
    pub bundle: &'a TokenizerBundle,
}

impl Outpainter for OracleOutpainter<'_> {
    fn outpaint(&self, img: &Image, target_width: usize) -> Result<Image> {
        let len = self.bundle.config.series_len;
        let blocks = (target_width - img.width) / img.width;
        let mut parts = vec![img.clone()];
        for k in 0..blocks {
            let chunk = padded_chunk(&self.future.values, k * len, len);
            parts.push(series_to_image_using(&TimeSeries::new(chunk)?, &self.stats, self.bundle)?);
        }
        Image::hconcat(&parts)?.crop_columns(0, target_width)
    }
}

/// `values[start..start + len]`, padded by repeating the last available value.
fn padded_chunk(values: &[f64], start: usize, len: usize) -> Vec<f64> {
    let last = *values.last().expect("nonempty series");
    (start..start + len).map(|i| values.get(i).copied().unwrap_or(last)).collect()
}

/// Repeats the trailing block of one dominant period.
#[derive(Clone, Copy, Debug, Default)]
pub struct TileOutpainter;

impl TileOutpainter {
    /// Lag in `[2, W/2]` maximizing column autocorrelation; near-ties go to
    /// the smaller lag.
    pub fn period(img: &Image) -> usize {
        let w = img.width;
        let cols: Vec<Vec<f64>> = (0..w)
            .map(|x| {
                let mut col = Vec::with_capacity(img.height * img.channels);
                for y in 0..img.height {
                    for c in 0..img.channels {
                        col.push(img.get(y, x, c));
                    }
                }
                col
            })
            .collect();
        let len = cols[0].len() as f64;
        let mean = cols.iter().flatten().sum::<f64>() / (len * w as f64);
        let mut best: Option<(usize, f64)> = None;
        for lag in (2..=w / 2).filter(|&lag| lag < w) {
            let pairs = w - lag;
            let r = (0..pairs)
                .map(|x| {
                    cols[x]
                        .iter()
                        .zip(&cols[x + lag])
                        .map(|(a, b)| (a - mean) * (b - mean))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / pairs as f64;
            match best {
                Some((_, b)) if r <= b + 1e-12 * (1.0 + b.abs()) => {}
                _ => best = Some((lag, r)),
            }
        }
        best.map_or(w.min(2), |(lag, _)| lag)
    }
}

impl Outpainter for TileOutpainter {
    fn outpaint(&self, img: &Image, target_width: usize) -> Result<Image> {
        let w = img.width;
        let p = Self::period(img).min(w);
        let mut out = Image::filled(img.height, target_width, img.channels, 0.0);
        for y in 0..img.height {
            for x in 0..target_width {
                let src = if x < w { x } else { w - p + (x - w) % p };
                for c in 0..img.channels {
                    out.set(y, x, c, img.get(y, src, c));
                }
            }
        }
        Ok(out)
    }
}

/// Render the observation, outpaint it, and decode the new columns block by
/// block with the observation's normalization.
pub fn forecast(
    x_obs: &TimeSeries,
    cfg: &ForecastConfig,
    bundle: &TokenizerBundle,
    outpainter: &dyn Outpainter,
) -> Result<TimeSeries> {
    require_frozen(bundle)?;
    cfg.validate(bundle)?;
    if x_obs.len() != cfg.context_length {
        return Err(Error::GeometryMismatch(format!(
            "observation has length {}, expected {}",
            x_obs.len(),
            cfg.context_length
        )));
    }
    let (img, stats) = series_to_image_with_stats(x_obs, bundle)?;
    let painted = outpainter.outpaint(&img, cfg.w_out)?;
    if painted.height != img.height || painted.width != cfg.w_out || painted.channels != img.channels {
        return Err(Error::OutpainterContractViolation);
    }
    if painted.crop_columns(0, img.width)? != img || painted.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::OutpainterContractViolation);
    }
    let mut values = Vec::with_capacity(cfg.future_blocks() * cfg.context_length);
    for k in 1..=cfg.future_blocks() {
        let block = painted.crop_columns(k * cfg.w_obs, cfg.w_obs)?;
        values.extend(image_to_series(&block, bundle, &stats)?.values);
    }
    let last = *values.last().expect("at least one block");
    values.resize(cfg.horizon, last);
    TimeSeries::new(values)
}

/// Mean squared and mean absolute error.
pub fn eval_forecast(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("cannot score empty forecasts".into()));
    }
    let n = pred.len() as f64;
    let (se, ae) = pred.iter().zip(truth).fold((0.0, 0.0), |(se, ae), (p, t)| {
        let d = p - t;
        (se + d * d, ae + d.abs())
    });
    Ok((se / n, ae / n))
}

/// Channels-by-time sample of a multivariate series.
pub type MultiSeries = Vec<Vec<f64>>;

fn check_set(set: &[MultiSeries], d: usize, t: usize) -> Result<()> {
    for s in set {
        if s.len() != d || s.iter().any(|c| c.len() != t) {
            return Err(Error::ShapeMismatch(format!("every sample must be {d} channels x {t} steps")));
        }
    }
    Ok(())
}

/// Correlation matrix pooled over every sample and time step. A channel
/// without variance gets zero correlation with everything.
pub fn correlation_matrix(set: &[MultiSeries]) -> Vec<Vec<f64>> {
    let d = set[0].len();
    let count: f64 = set.iter().map(|s| s[0].len() as f64).sum();
    let means: Vec<f64> = (0..d)
        .map(|i| set.iter().flat_map(|s| s[i].iter()).sum::<f64>() / count)
        .collect();
    let cov = |i: usize, j: usize| {
        set.iter()
            .map(|s| s[i].iter().zip(&s[j]).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / count
            - means[i] * means[j]
    };
    let var: Vec<f64> = (0..d).map(|i| cov(i, i)).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let denom = (var[i] * var[j]).sqrt();
                    if var[i] <= 0.0 || var[j] <= 0.0 || denom == 0.0 {
                        0.0
                    } else {
                        cov(i, j) / denom
                    }
                })
                .collect()
        })
        .collect()
}

/// `(1/10) sum_{i,j} |rho^real_ij - rho^synth_ij|`.
pub fn correlational_score(real: &[MultiSeries], synth: &[MultiSeries]) -> Result<f64> {
    let first = real.first().ok_or(Error::EmptyCorpus)?;
    if synth.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let d = first.len();
    if d < 2 {
        return Err(Error::ShapeMismatch(format!("need at least 2 channels, got {d}")));
    }
    let t = first[0].len();
    check_set(real, d, t)?;
    check_set(synth, d, t)?;
    let (r, f) = (correlation_matrix(real), correlation_matrix(synth));
    let total: f64 = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| (r[i][j] - f[i][j]).abs())
        .sum();
    Ok(total / 10.0)
}
