//! Desk-scale experiment setups shared by the CLI and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{train_alignment, AlignConfig, AlignOutcome, Direction};
use crate::classpair::{build_paired_dataset, extract_subsets, pair_classes, ClassPairing};
use crate::convert::series_to_image_using;
use crate::error::Result;
use crate::synth::{class_benchmark, sine_mixture, warmup_corpus, ClassBenchmark, SeriesSpec, WarmupCorpus};
use crate::tokenize::{norm_stats_of, Image, TimeSeries};
use crate::training::{BundleConfig, TokenizerBundle};

/// Warmup corpus size per modality.
pub const CORPUS_SIZE: usize = 256;
/// Held-out series for round-trip evaluation.
pub const HELDOUT_SIZE: usize = 64;
/// Visual partner of each series class in the benchmark.
pub const PLANTED: [usize; 3] = [2, 0, 1];
/// Labelled samples per class and modality.
pub const BENCH_PER_CLASS: usize = 50;

pub fn training_corpus(cfg: &BundleConfig, seed: u64) -> WarmupCorpus {
    warmup_corpus(CORPUS_SIZE, cfg.image_height, cfg.image_width, cfg.series_len, seed)
}

pub fn heldout_corpus(cfg: &BundleConfig, seed: u64) -> WarmupCorpus {
    warmup_corpus(HELDOUT_SIZE, cfg.image_height, cfg.image_width, cfg.series_len, seed.wrapping_add(4200))
}

pub fn train_benchmark(cfg: &BundleConfig, seed: u64) -> ClassBenchmark {
    class_benchmark(
        BENCH_PER_CLASS,
        cfg.image_height,
        cfg.image_width,
        cfg.series_len,
        PLANTED,
        seed.wrapping_add(7),
    )
}

pub fn test_benchmark(cfg: &BundleConfig, seed: u64) -> ClassBenchmark {
    class_benchmark(
        BENCH_PER_CLASS,
        cfg.image_height,
        cfg.image_width,
        cfg.series_len,
        PLANTED,
        seed.wrapping_add(99),
    )
}

/// Sine mixtures long enough to hold a context window and its horizon.
pub fn forecast_series(len: usize, count: usize, seed: u64) -> Vec<TimeSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(31));
    (0..count)
        .map(|_| {
            let spec = SeriesSpec {
                base_period: rng.gen_range(4.0..16.0),
                trend: 0.0,
                noise: 0.02,
            };
            sine_mixture(len, spec, &mut rng)
        })
        .collect()
}

/// A long series and the wide image rendered from it block by block with
/// one global normalization, so columns track time proportionally.
pub fn synchronized_stream(bundle: &TokenizerBundle, blocks: usize, seed: u64) -> Result<(TimeSeries, Image)> {
    let len = bundle.config.series_len;
    let series = forecast_series(len * blocks, 1, seed).remove(0);
    let stats = norm_stats_of(&series.values);
    let parts = series
        .values
        .chunks(len)
        .map(|c| series_to_image_using(&TimeSeries::new(c.to_vec())?, &stats, bundle))
        .collect::<Result<Vec<_>>>()?;
    Ok((series, Image::hconcat(&parts)?))
}

/// Histogram pairing of the labelled benchmark and the alignment model
/// trained on the resulting class pairs.
pub fn classification_pipeline(
    bundle: &TokenizerBundle,
    bench: &ClassBenchmark,
    config: &AlignConfig,
) -> Result<(ClassPairing, AlignOutcome)> {
    let (ts, vs) = extract_subsets(&bench.series_by_class(), &bench.images_by_class(), bundle)?;
    let pairing = pair_classes(&ts, &vs, bundle.config.codes)?;
    let pairs = build_paired_dataset(&ts, &vs, &pairing.assignment, config.seed)?;
    let config = AlignConfig {
        direction: Direction::TemporalToVisual,
        ..*config
    };
    let outcome = train_alignment(&pairs, bundle, &config)?;
    Ok((pairing, outcome))
}
