//! Oracle suites run by the `selftest` command.
//!
//! Each check compares library output with an independent brute-force or
//! closed-form answer on seeded random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{AutoencoderParams, EmbeddingGrid};
use crate::classpair::{hungarian_assign, jsd};
use crate::convert::{correlational_score, forecast, series_to_image_with_stats, ForecastConfig, TileOutpainter};
use crate::error::Result;
use crate::gradcheck::objective_check;
use crate::io::checkpoint::{bundle_from_checkpoint, bundle_to_checkpoint, Checkpoint};
use crate::io::pnm::{image_from_bytes, image_to_bytes};
use crate::io::series_csv::{parse_series_csv, write_series_csv};
use crate::par::Exec;
use crate::quantizer::{init_codebooks, lookup, quantize, MultiHeadCodebook};
use crate::tensor::Matrix;
use crate::tokenize::{norm_stats_of, Image, Modality, SegmentMode, TimeSeries, TokenSequence};
use crate::training::{compute_losses_with, BundleConfig, TokenizerBundle};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check("quantizer-oracle", quantizer_oracle(seed)),
        check("hungarian-oracle", hungarian_oracle(seed)),
        check("jsd-properties", jsd_properties(seed)),
        check("objective-gradient", objective_gradient(seed)),
        check("checkpoint-round-trip", checkpoint_round_trip(seed)),
        check("pnm-round-trip", pnm_round_trip(seed)),
        check("csv-round-trip", csv_round_trip(seed)),
        check("tile-forecast", tile_forecast()),
        check("correlational-score", correlation_cases()),
        check("exec-determinism", exec_determinism(seed)),
    ]
}

fn quantizer_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let mut mismatches = 0;
    for _ in 0..300 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let sub = rng.gen_range(1..4);
        let codes = rng.gen_range(2..=32);
        let tokens = rng.gen_range(1..6);
        let data = (0..heads * codes * sub).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let book = MultiHeadCodebook::new(heads, codes, sub, data)?;
        let e = EmbeddingGrid {
            data: Matrix::from_vec(
                tokens,
                heads * sub,
                (0..tokens * heads * sub).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            )?,
            modality: Modality::Visual,
        };
        let r = quantize(&e, &book)?;
        let mut residual = 0.0;
        for i in 0..tokens {
            for m in 0..heads {
                let v = &e.data.row(i)[m * sub..(m + 1) * sub];
                let dist = |k: usize| -> f64 { book.code(m, k).iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum() };
                let best = (0..codes).fold(0, |b, k| if dist(k) < dist(b) { k } else { b });
                if r.indices.get(i, m) != best {
                    mismatches += 1;
                }
                residual += dist(best);
            }
        }
        if lookup(&r.indices, &book)? != r.q.data || (residual - r.residual_sq).abs() > 1e-12 * (1.0 + residual) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("300 calls, {mismatches} mismatches")))
}

fn brute_force_assignment(c: &Matrix) -> f64 {
    fn go(c: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.rows {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.cols {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, used, acc + c.get(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.cols], 0.0, &mut best);
    best
}

fn hungarian_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4A);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=5 {
        for m in n..=5 {
            for _ in 0..20 {
                let c = Matrix::from_vec(n, m, (0..n * m).map(|_| rng.gen_range(0..10) as f64).collect())?;
                let a = hungarian_assign(&c)?;
                let recomputed: f64 = a.mapping.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
                worst = worst.max((a.cost - brute_force_assignment(&c)).abs());
                worst = worst.max((a.cost - recomputed).abs());
                cases += 1;
            }
        }
    }
    Ok((worst == 0.0, format!("{cases} matrices, worst gap {worst:e}")))
}

fn random_histogram(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() }).collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        let mut v = vec![0.0; k];
        v[0] = 1.0;
        return v;
    }
    raw.iter().map(|v| v / total).collect()
}

fn jsd_properties(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x15D);
    let ln2 = std::f64::consts::LN_2;
    let mut failures = 0;
    for _ in 0..300 {
        let k = rng.gen_range(2..12);
        let p = random_histogram(&mut rng, k);
        let q = random_histogram(&mut rng, k);
        let (pq, qp) = (jsd(&p, &q), jsd(&q, &p));
        if pq != qp || pq < 0.0 || pq > ln2 + 1e-12 || jsd(&p, &p).abs() > 1e-12 {
            failures += 1;
        }
    }
    let delta = jsd(&[1.0, 0.0], &[0.0, 1.0]);
    if (delta - ln2).abs() > 1e-12 {
        failures += 1;
    }
    Ok((failures == 0, format!("300 pairs, {failures} violations")))
}

fn tiny_config() -> BundleConfig {
    BundleConfig {
        image_height: 4,
        image_width: 4,
        channels: 1,
        patch: 2,
        series_len: 8,
        segment: 2,
        mode: SegmentMode::Strict,
        dim: 4,
        heads: 2,
        codes: 4,
        depth: 1,
    }
}

fn random_bundle(rng: &mut ChaCha8Rng, config: BundleConfig) -> Result<(TokenizerBundle, Vec<TokenSequence>)> {
    let mut b = TokenizerBundle::init(config, rng.gen())?;
    let series: Vec<TokenSequence> = (0..4)
        .map(|_| {
            let x = TimeSeries::new((0..config.series_len).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            Ok(b.tokenize_series(&x)?.0)
        })
        .collect::<Result<_>>()?;
    let sample: Vec<EmbeddingGrid> = series
        .iter()
        .map(|t| crate::autoencoder::encode_traced(&b.temporal, t).map(|(e, _)| e))
        .collect::<Result<_>>()?;
    b.codebook = init_codebooks(&sample, config.heads, config.codes, rng.gen())?;
    Ok((b, series))
}

fn objective_gradient(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (b, batch) = random_bundle(&mut rng, tiny_config())?;
        worst = worst.max(objective_check(&b, &batch[..2], 1e-6)?);
    }
    Ok((worst < 1e-4, format!("5 instances, worst relative error {worst:.2e}")))
}

fn checkpoint_round_trip(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC4);
    let (mut b, _) = random_bundle(&mut rng, tiny_config())?;
    b.freeze();
    let bytes = bundle_to_checkpoint(&b).to_bytes()?;
    let back = bundle_from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    let again = bundle_to_checkpoint(&back).to_bytes()?;
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let detected = matches!(Checkpoint::from_bytes(&flipped), Err(crate::Error::ChecksumMismatch));
    Ok((back == b && again == bytes && detected, format!("{} bytes", bytes.len())))
}

fn pnm_round_trip(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E);
    let mut ok = true;
    for channels in [1, 3] {
        let img = Image::new(5, 7, channels, (0..35 * channels).map(|_| rng.gen::<f64>()).collect())?;
        let first = image_to_bytes(&img)?;
        let second = image_to_bytes(&image_from_bytes(&first)?)?;
        ok &= first == second;
    }
    Ok((ok, "P5 and P6".into()))
}

fn csv_round_trip(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC5);
    let series: Vec<TimeSeries> = (0..3)
        .map(|_| TimeSeries::new((0..20).map(|_| rng.gen_range(-1e6..1e6)).collect()))
        .collect::<Result<_>>()?;
    let mut buf = Vec::new();
    write_series_csv(&mut buf, &series)?;
    let back = parse_series_csv(&String::from_utf8_lossy(&buf), None)?;
    Ok((back == series, "3 columns x 20 rows".into()))
}

/// Depth-0 bundle whose codes hold the sinusoid's two phases per head, so
/// conversion is exact and tiling reduces to seasonal naive.
fn lossless_bundle(x: &TimeSeries) -> Result<TokenizerBundle> {
    let stats = norm_stats_of(&x.values);
    let mut codes = Vec::new();
    for m in 0..4 {
        codes.push(stats.normalize(x.values[m]));
        codes.push(stats.normalize(x.values[m + 4]));
    }
    let config = BundleConfig {
        image_height: 2,
        image_width: 16,
        channels: 1,
        patch: 2,
        series_len: 32,
        segment: 4,
        mode: SegmentMode::Strict,
        dim: 4,
        heads: 4,
        codes: 2,
        depth: 0,
    };
    let mut b = TokenizerBundle::from_parts(
        config,
        AutoencoderParams::affine(Modality::Visual, 4, 4.0, -2.0),
        AutoencoderParams::identity(Modality::Temporal, 4),
        MultiHeadCodebook::new(4, 2, 1, codes)?,
    )?;
    b.freeze();
    Ok(b)
}

fn tile_forecast() -> Result<(bool, String)> {
    let x = TimeSeries::new(
        (0..32)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 8.0 + 0.3).sin())
            .collect(),
    )?;
    let b = lossless_bundle(&x)?;
    let cfg = ForecastConfig {
        context_length: 32,
        horizon: 64,
        w_obs: 16,
        w_out: 48,
    };
    let (img, _) = series_to_image_with_stats(&x, &b)?;
    let pred = forecast(&x, &cfg, &b, &TileOutpainter)?;
    let worst = pred
        .values
        .iter()
        .enumerate()
        .map(|(t, v)| (v - x.values[24 + t % 8]).abs())
        .fold(0.0, f64::max);
    Ok((
        worst <= 1e-9 && pred.len() == 64,
        format!("period {}, worst deviation {worst:.1e}", TileOutpainter::period(&img)),
    ))
}

fn correlation_cases() -> Result<(bool, String)> {
    let x: Vec<f64> = (0..40).map(|t| (t as f64 * 0.4).cos() + 0.01 * t as f64).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let same = vec![vec![x.clone(), x.clone()]];
    let flipped = vec![vec![x.clone(), neg]];
    let zero = correlational_score(&same, &same)?;
    let opposite = correlational_score(&same, &flipped)?;
    // two off-diagonal entries move from +1 to -1: (2 + 2) / 10
    Ok((
        zero.abs() <= 1e-10 && (opposite - 0.4).abs() <= 1e-10,
        format!("identical {zero:.1e}, opposite {opposite:.12}"),
    ))
}

fn exec_determinism(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDE);
    let (b, batch) = random_bundle(&mut rng, tiny_config())?;
    let s = compute_losses_with(Exec::Sequential, &batch, &b)?;
    let p = compute_losses_with(Exec::Parallel, &batch, &b)?;
    let same = s.loss == p.loss && s.grads.autoencoder == p.grads.autoencoder && s.grads.codebook == p.grads.codebook;
    Ok((same, "sequential and parallel losses and gradients".into()))
}
