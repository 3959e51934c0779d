use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timeartist::alignment::{
    build_sliding_pairs, train_alignment, train_alignment_from, AlignConfig, AlignmentModel, Direction, PairedSample,
    Provenance,
};
use timeartist::classpair::{classify_series, pair_classes, extract_subsets};
use timeartist::convert::{forecast, image_to_series, series_to_image_with_stats, ForecastConfig, TileOutpainter};
use timeartist::io::checkpoint::bundle_to_checkpoint;
use timeartist::par::Exec;
use timeartist::pipeline::{forecast_series, synchronized_stream, train_benchmark, training_corpus};
use timeartist::quantizer::IndexSequence;
use timeartist::training::{run_warmup, run_warmup_with, BundleConfig, TokenizerBundle, WarmupConfig, WarmupOutcome};

fn short_warmup(steps: usize) -> WarmupOutcome {
    let bc = BundleConfig::default();
    let corpus = training_corpus(&bc, 42);
    let cfg = WarmupConfig {
        steps,
        ..WarmupConfig::default()
    };
    run_warmup(&corpus.series, &corpus.images, bc, &cfg).unwrap()
}

fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    values[end - window..end].iter().sum::<f64>() / window as f64
}

#[test]
fn warmup_loss_trends_down() {
    let outcome = short_warmup(2000);
    let totals: Vec<f64> = outcome.log.iter().map(|l| l.total).collect();
    assert!(moving_average(&totals, 2000, 100) < moving_average(&totals, 100, 100));
}

#[test]
fn warmup_is_identical_across_executors() {
    let bc = BundleConfig::default();
    let corpus = training_corpus(&bc, 3);
    let cfg = WarmupConfig {
        steps: 40,
        seed: 3,
        ..WarmupConfig::default()
    };
    let s = run_warmup_with(Exec::Sequential, &corpus.series, &corpus.images, bc, &cfg).unwrap();
    let p = run_warmup_with(Exec::Parallel, &corpus.series, &corpus.images, bc, &cfg).unwrap();
    assert_eq!(s.bundle, p.bundle);
    assert_eq!(s.log, p.log);
}

#[test]
fn alignment_leaves_bundle_untouched() {
    let bundle = short_warmup(200).bundle;
    let before = bundle_to_checkpoint(&bundle).to_bytes().unwrap();
    let (series, image) = synchronized_stream(&bundle, 3, 5).unwrap();
    let pairs = build_sliding_pairs(&series, &image, bundle.config.series_len, 8, &bundle).unwrap();
    let cfg = AlignConfig {
        steps: 50,
        ..AlignConfig::default()
    };
    train_alignment(&pairs, &bundle, &cfg).unwrap();
    assert_eq!(bundle_to_checkpoint(&bundle).to_bytes().unwrap(), before);
}

#[test]
fn repeated_pair_loss_average_never_rises() {
    let (tokens, heads, codes) = (16, 4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut draw = || IndexSequence::new(tokens, heads, (0..tokens * heads).map(|_| rng.gen_range(0..codes)).collect()).unwrap();
    let pair = PairedSample::new(draw(), draw(), Provenance::SlidingWindow).unwrap();
    let cfg = AlignConfig {
        steps: 2000,
        batch_size: 1,
        ..AlignConfig::default()
    };
    let init = AlignmentModel::init(Direction::TemporalToVisual, tokens, heads, codes, 16, cfg.seed);
    let losses = train_alignment_from(init, &[pair], &cfg, Exec::default()).unwrap().losses;
    let mut prev = f64::INFINITY;
    for end in 200..=losses.len() {
        let avg = moving_average(&losses, end, 200);
        assert!(avg <= prev, "moving average rose at step {end}: {prev} -> {avg}");
        prev = avg;
    }
}

#[test]
fn forecast_length_matches_horizon() {
    let bundle = short_warmup(100).bundle;
    let ctx = 64;
    for (horizon, w_out) in [(1, 32), (64, 32), (96, 48), (128, 48), (192, 64)] {
        let cfg = ForecastConfig {
            context_length: ctx,
            horizon,
            w_obs: 16,
            w_out,
        };
        let obs = forecast_series(ctx, 1, horizon as u64).remove(0);
        let pred = forecast(&obs, &cfg, &bundle, &TileOutpainter).unwrap();
        assert_eq!(pred.len(), horizon);
    }
}

#[test]
fn pipelines_are_referentially_transparent() {
    let bundle = short_warmup(100).bundle;
    let x = forecast_series(bundle.config.series_len, 1, 9).remove(0);
    let (img_a, stats_a) = series_to_image_with_stats(&x, &bundle).unwrap();
    let (img_b, stats_b) = series_to_image_with_stats(&x, &bundle).unwrap();
    assert_eq!(img_a, img_b);
    assert_eq!(stats_a, stats_b);
    assert_eq!(
        image_to_series(&img_a, &bundle, &stats_a).unwrap(),
        image_to_series(&img_b, &bundle, &stats_b).unwrap()
    );

    let bench = train_benchmark(&bundle.config, 1);
    let (ts, vs) = extract_subsets(&bench.series_by_class(), &bench.images_by_class(), &bundle).unwrap();
    let first = pair_classes(&ts, &vs, bundle.config.codes).unwrap();
    let second = pair_classes(&ts, &vs, bundle.config.codes).unwrap();
    assert_eq!(first.assignment, second.assignment);

    let model = AlignmentModel::init(
        Direction::TemporalToVisual,
        bundle.config.tokens(),
        bundle.config.heads,
        bundle.config.codes,
        8,
        3,
    );
    let refs = bench.images_by_class();
    for (s, _) in bench.series.iter().take(6) {
        assert_eq!(
            classify_series(s, &model, &bundle, &refs).unwrap(),
            classify_series(s, &model, &bundle, &refs).unwrap()
        );
    }
}

#[test]
fn unfrozen_bundle_is_refused_by_conversion() {
    let bundle = TokenizerBundle::init(BundleConfig::default(), 1).unwrap();
    let x = forecast_series(bundle.config.series_len, 1, 1).remove(0);
    assert!(series_to_image_with_stats(&x, &bundle).is_err());
}
