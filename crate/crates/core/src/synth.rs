//! Procedural corpora: oriented stripes and blobs for images, sinusoid
//! mixtures with trend and noise for series, and a labelled 3-class
//! benchmark linking stripe orientations to series periods.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tokenize::{Image, TimeSeries};

/// Standard normal draw via Box-Muller.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StripeSpec {
    /// Direction of intensity variation, radians from the x axis.
    pub angle: f64,
    /// Spatial period in pixels.
    pub period: f64,
    pub phase: f64,
    pub contrast: f64,
    pub noise: f64,
}

pub fn stripe_image<R: Rng>(height: usize, width: usize, spec: StripeSpec, rng: &mut R) -> Image {
    let (c, s) = (spec.angle.cos(), spec.angle.sin());
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 * c + y as f64 * s;
            let v = 0.5 + 0.5 * spec.contrast * (2.0 * PI * u / spec.period + spec.phase).sin();
            pixels.push((v + spec.noise * gaussian(rng)).clamp(0.0, 1.0));
        }
    }
    Image::new(height, width, 1, pixels).expect("pixels clamped to [0, 1]")
}

/// Sum of 1-3 Gaussian blobs on a dark background.
pub fn blob_image<R: Rng>(height: usize, width: usize, rng: &mut R) -> Image {
    let count = rng.gen_range(1..=3);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.0..height as f64),
                rng.gen_range(1.5..(width.min(height) as f64 / 3.0).max(2.0)),
                rng.gen_range(0.4..0.9),
            )
        })
        .collect();
    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut v = 0.1;
            for &(cx, cy, r, a) in &blobs {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                v += a * (-d2 / (2.0 * r * r)).exp();
            }
            pixels.push((v + 0.02 * gaussian(rng)).clamp(0.0, 1.0));
        }
    }
    Image::new(height, width, 1, pixels).expect("pixels clamped to [0, 1]")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesSpec {
    pub base_period: f64,
    pub trend: f64,
    pub noise: f64,
}

/// `sum_k a_k sin(2 pi k t / P + phi_k)` over 1-3 harmonics, plus a linear
/// trend and Gaussian noise.
pub fn sine_mixture<R: Rng>(len: usize, spec: SeriesSpec, rng: &mut R) -> TimeSeries {
    let harmonics = rng.gen_range(1..=3);
    let comps: Vec<(f64, f64, f64)> = (1..=harmonics)
        .map(|k| {
            let amp = rng.gen_range(0.5..1.0) / k as f64;
            (k as f64, amp, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let offset = rng.gen_range(-1.0..1.0);
    let values = (0..len)
        .map(|t| {
            let t = t as f64;
            let periodic: f64 = comps
                .iter()
                .map(|&(k, a, phi)| a * (2.0 * PI * k * t / spec.base_period + phi).sin())
                .sum();
            offset + periodic + spec.trend * t + spec.noise * gaussian(rng)
        })
        .collect();
    TimeSeries::new(values).expect("finite values")
}

/// Unlabelled warmup corpora: `count` images and `count` series.
#[derive(Clone, Debug)]
pub struct WarmupCorpus {
    pub series: Vec<TimeSeries>,
    pub images: Vec<Image>,
}

pub fn warmup_corpus(count: usize, height: usize, width: usize, series_len: usize, seed: u64) -> WarmupCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|i| {
            if i % 4 == 3 {
                blob_image(height, width, &mut rng)
            } else {
                let spec = StripeSpec {
                    angle: rng.gen_range(0.0..PI),
                    period: rng.gen_range(3.0..12.0),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    contrast: rng.gen_range(0.5..0.9),
                    noise: 0.02,
                };
                stripe_image(height, width, spec, &mut rng)
            }
        })
        .collect();
    let series = (0..count)
        .map(|_| {
            let spec = SeriesSpec {
                base_period: rng.gen_range(4.0..32.0),
                trend: rng.gen_range(-0.01..0.01),
                noise: 0.05,
            };
            sine_mixture(series_len, spec, &mut rng)
        })
        .collect();
    WarmupCorpus { series, images }
}

/// Stripe orientation of visual class `k`.
pub const CLASS_ANGLES: [f64; 3] = [0.0, PI / 2.0, PI / 4.0];
/// Period shared by series class `c` and its planted visual partner.
pub const CLASS_PERIODS: [f64; 3] = [4.0, 8.0, 16.0];

/// Labelled benchmark. Series class `c` has base period
/// `CLASS_PERIODS[c]`; its partner is visual class `planted[c]`, whose
/// stripes have orientation `CLASS_ANGLES[planted[c]]` and the same
/// spatial period.
#[derive(Clone, Debug)]
pub struct ClassBenchmark {
    pub planted: [usize; 3],
    pub series: Vec<(TimeSeries, usize)>,
    pub images: Vec<(Image, usize)>,
}

impl ClassBenchmark {
    pub fn classes(&self) -> usize {
        3
    }

    /// Series grouped by class, in generation order.
    pub fn series_by_class(&self) -> Vec<Vec<TimeSeries>> {
        group(&self.series)
    }

    pub fn images_by_class(&self) -> Vec<Vec<Image>> {
        group(&self.images)
    }
}

fn group<T: Clone>(items: &[(T, usize)]) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new(); 3];
    for (x, c) in items {
        out[*c].push(x.clone());
    }
    out
}

fn invert(planted: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (c, &k) in planted.iter().enumerate() {
        inv[k] = c;
    }
    inv
}

pub fn class_series<R: Rng>(class: usize, len: usize, rng: &mut R) -> TimeSeries {
    let spec = SeriesSpec {
        base_period: CLASS_PERIODS[class] * rng.gen_range(0.95..1.05),
        trend: rng.gen_range(-0.005..0.005),
        noise: 0.05,
    };
    sine_mixture(len, spec, rng)
}

pub fn class_image<R: Rng>(visual_class: usize, period: f64, height: usize, width: usize, rng: &mut R) -> Image {
    let spec = StripeSpec {
        angle: CLASS_ANGLES[visual_class] + rng.gen_range(-0.05..0.05),
        period: period * rng.gen_range(0.95..1.05),
        phase: rng.gen_range(0.0..2.0 * PI),
        contrast: rng.gen_range(0.6..0.9),
        noise: 0.02,
    };
    stripe_image(height, width, spec, rng)
}

/// `per_class` samples of each class in each modality, interleaved by class.
pub fn class_benchmark(
    per_class: usize,
    height: usize,
    width: usize,
    series_len: usize,
    planted: [usize; 3],
    seed: u64,
) -> ClassBenchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partner_of_visual = invert(planted);
    let mut series = Vec::with_capacity(3 * per_class);
    let mut images = Vec::with_capacity(3 * per_class);
    for _ in 0..per_class {
        for c in 0..3 {
            series.push((class_series(c, series_len, &mut rng), c));
        }
        for k in 0..3 {
            let period = CLASS_PERIODS[partner_of_visual[k]];
            images.push((class_image(k, period, height, width, &mut rng), k));
        }
    }
    ClassBenchmark {
        planted,
        series,
        images,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_are_seeded() {
        let a = warmup_corpus(8, 16, 16, 64, 1);
        let b = warmup_corpus(8, 16, 16, 64, 1);
        assert_eq!(a.series, b.series);
        assert_eq!(a.images, b.images);
        assert_ne!(a.series, warmup_corpus(8, 16, 16, 64, 2).series);
        assert!(a.images.iter().all(|i| i.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
    }

    #[test]
    fn benchmark_labels_follow_planted_map() {
        let bench = class_benchmark(4, 16, 16, 64, [2, 0, 1], 9);
        assert_eq!(bench.series.len(), 12);
        let by_class = bench.images_by_class();
        assert!(by_class.iter().all(|c| c.len() == 4));
        assert_eq!(invert([2, 0, 1]), [1, 2, 0]);
    }

    #[test]
    fn vertical_stripes_are_constant_down_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = StripeSpec {
            angle: 0.0,
            period: 4.0,
            phase: 0.3,
            contrast: 0.8,
            noise: 0.0,
        };
        let img = stripe_image(4, 8, spec, &mut rng);
        for x in 0..8 {
            for y in 1..4 {
                assert_eq!(img.get(y, x, 0), img.get(0, x, 0));
            }
        }
    }
}
