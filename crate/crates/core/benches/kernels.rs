use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timeartist::autoencoder::EmbeddingGrid;
use timeartist::classpair::{cost_matrix_with, histogram_of, IndexHistogram};
use timeartist::par::Exec;
use timeartist::pipeline::training_corpus;
use timeartist::quantizer::{quantize_with, IndexSequence, MultiHeadCodebook};
use timeartist::tensor::Matrix;
use timeartist::tokenize::{Modality, TokenSequence};
use timeartist::training::{compute_losses_with, BundleConfig, TokenizerBundle};

fn execs() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("sequential", Exec::Sequential)];
    if Exec::available() {
        v.push(("parallel", Exec::Parallel));
    }
    v
}

fn bench_quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, heads, codes, sub) = (1024, 4, 64, 8);
    let book = MultiHeadCodebook::new(heads, codes, sub, (0..heads * codes * sub).map(|_| rng.gen()).collect()).unwrap();
    let e = EmbeddingGrid {
        data: Matrix::from_vec(n, heads * sub, (0..n * heads * sub).map(|_| rng.gen()).collect()).unwrap(),
        modality: Modality::Visual,
    };
    let mut group = c.benchmark_group("quantize");
    for (name, exec) in execs() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| quantize_with(exec, black_box(&e), &book).unwrap())
        });
    }
    group.finish();
}

fn bench_losses(c: &mut Criterion) {
    let bc = BundleConfig::default();
    let corpus = training_corpus(&bc, 2);
    let mut bundle = TokenizerBundle::init(bc, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    bundle.codebook.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let batch: Vec<TokenSequence> = corpus.images[..32].iter().map(|i| bundle.tokenize_image(i).unwrap()).collect();
    let mut group = c.benchmark_group("compute_losses");
    for (name, exec) in execs() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| compute_losses_with(exec, black_box(&batch), &bundle).unwrap())
        });
    }
    group.finish();
}

fn bench_cost_matrix(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (tokens, heads, codes) = (16, 4, 64);
    let mut hists = |count: usize| -> Vec<IndexHistogram> {
        (0..count)
            .map(|_| {
                let samples: Vec<IndexSequence> = (0..20)
                    .map(|_| {
                        IndexSequence::new(tokens, heads, (0..tokens * heads).map(|_| rng.gen_range(0..codes)).collect())
                            .unwrap()
                    })
                    .collect();
                histogram_of(&samples, codes).unwrap()
            })
            .collect()
    };
    let (t, v) = (hists(24), hists(24));
    let mut group = c.benchmark_group("cost_matrix");
    for (name, exec) in execs() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| cost_matrix_with(exec, black_box(&t), &v).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_quantize, bench_losses, bench_cost_matrix);
criterion_main!(benches);
