//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.

use std::time::Instant;

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timeartist::alignment::Direction;
use timeartist::autoencoder::{AutoencoderParams, EmbeddingGrid, ParamSet};
use timeartist::classpair::{classify_series, hungarian_assign, js_divergence, jsd, IndexHistogram};
use timeartist::convert::{
    correlational_score, eval_forecast, forecast, image_to_series, series_to_image_with_stats, ForecastConfig,
    OracleOutpainter, TileOutpainter,
};
use timeartist::io::checkpoint::{
    bundle_from_checkpoint, bundle_to_checkpoint, model_from_checkpoint, model_to_checkpoint, Checkpoint,
};
use timeartist::io::config::RunConfig;
use timeartist::io::pnm::{image_from_bytes, image_to_bytes};
use timeartist::io::series_csv::{parse_series_csv, write_series_csv};
use timeartist::pipeline::{
    classification_pipeline, forecast_series, heldout_corpus, test_benchmark, train_benchmark, training_corpus,
    PLANTED,
};
use timeartist::quantizer::{codebook_losses, init_codebooks, lookup, quantize, MultiHeadCodebook};
use timeartist::tensor::Matrix;
use timeartist::tokenize::{norm_stats_of, Image, Modality, SegmentMode, TimeSeries, TokenSequence};
use timeartist::training::{
    compute_losses, run_warmup, BundleConfig, TokenizerBundle, WarmupConfig, WarmupOutcome,
};

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FD_STEP: f64 = 1e-6;
const GRAD_TIME_LIMIT_S: f64 = 60.0;
const STE_TOL: f64 = 1e-10;
const CS_STEP: f64 = 1e-30;
const JSD_TOL: f64 = 1e-12;
const WARMUP_LOSS_RATIO: f64 = 0.2;
const WARMUP_MIN_UTIL: f64 = 0.5;
const WARMUP_TIME_LIMIT_S: f64 = 300.0;
const ROUND_TRIP_RATIO: f64 = 0.3;
const ORACLE_FORECAST_RATIO: f64 = 1.05;
const TILE_TOL: f64 = 1e-9;
const CLASSIFY_MIN_ACC: f64 = 0.9;
const CORR_TOL: f64 = 1e-10;
const CORR_OPPOSITE_EXPECTED: f64 = 0.8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// Complex-valued reference forward pass, written independently of the
// library's kernels. Real evaluation uses zero imaginary parts.

#[derive(Clone)]
struct CMat {
    r: usize,
    c: usize,
    d: Vec<C>,
}

impl CMat {
    fn real(m: &Matrix) -> Self {
        Self {
            r: m.rows,
            c: m.cols,
            d: m.data.iter().map(|&v| C::new(v, 0.0)).collect(),
        }
    }

    fn at(&self, i: usize, j: usize) -> C {
        self.d[i * self.c + j]
    }

    fn mul(&self, o: &CMat) -> CMat {
        assert_eq!(self.c, o.r);
        let mut d = vec![C::new(0.0, 0.0); self.r * o.c];
        for i in 0..self.r {
            for k in 0..self.c {
                let a = self.at(i, k);
                for j in 0..o.c {
                    d[i * o.c + j] += a * o.at(k, j);
                }
            }
        }
        CMat { r: self.r, c: o.c, d }
    }

    fn add_row(&mut self, b: &CMat) {
        for i in 0..self.r {
            for j in 0..self.c {
                self.d[i * self.c + j] += b.d[j];
            }
        }
    }

    fn plus(&self, o: &CMat) -> CMat {
        CMat {
            r: self.r,
            c: self.c,
            d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(),
        }
    }

    fn minus(&self, o: &CMat) -> CMat {
        CMat {
            r: self.r,
            c: self.c,
            d: self.d.iter().zip(&o.d).map(|(a, b)| a - b).collect(),
        }
    }

    /// Sum of squares without conjugation, so it stays holomorphic.
    fn sq(&self) -> C {
        self.d.iter().map(|v| v * v).sum()
    }
}

struct CBlock {
    mix: CMat,
    w: CMat,
    b: CMat,
}

struct CAe {
    embed_w: CMat,
    embed_b: CMat,
    enc: Vec<CBlock>,
    dec: Vec<CBlock>,
    out_w: CMat,
    out_b: CMat,
}

/// Rebuilds the autoencoder from a flat vector laid out like `ae.flatten()`.
fn unflatten(ae: &AutoencoderParams, theta: &[C]) -> CAe {
    let mut offset = 0;
    let mut named = Vec::new();
    for (name, m) in ae.tensors() {
        let n = m.data.len();
        named.push((
            name,
            CMat {
                r: m.rows,
                c: m.cols,
                d: theta[offset..offset + n].to_vec(),
            },
        ));
        offset += n;
    }
    let take = |key: &str| named.iter().find(|(n, _)| n == key).unwrap_or_else(|| panic!("{key}")).1.clone();
    let blocks = |prefix: &str, depth: usize| {
        (0..depth)
            .map(|i| CBlock {
                mix: take(&format!("{prefix}.block{i}.mix")),
                w: take(&format!("{prefix}.block{i}.weight")),
                b: take(&format!("{prefix}.block{i}.bias")),
            })
            .collect()
    };
    CAe {
        embed_w: take("encoder.embed_w"),
        embed_b: take("encoder.embed_b"),
        enc: blocks("encoder", ae.encoder.blocks.len()),
        dec: blocks("decoder", ae.decoder.blocks.len()),
        out_w: take("decoder.out_w"),
        out_b: take("decoder.out_b"),
    }
}

fn stack(blocks: &[CBlock], mut h: CMat) -> CMat {
    for b in blocks {
        let mut z = h.mul(&b.w);
        z.add_row(&b.b);
        z.d.iter_mut().for_each(|v| *v = v.tanh());
        h = h.plus(&b.mix.mul(&z));
    }
    h
}

fn c_encode(ae: &CAe, x: &CMat) -> CMat {
    let mut h = x.mul(&ae.embed_w);
    h.add_row(&ae.embed_b);
    stack(&ae.enc, h)
}

fn c_decode(ae: &CAe, z: &CMat) -> CMat {
    let mut out = stack(&ae.dec, z.clone()).mul(&ae.out_w);
    out.add_row(&ae.out_b);
    out
}

/// Reference nearest-code search; ties go to the smallest index.
fn brute_indices(e: &[f64], cols: usize, book: &MultiHeadCodebook) -> Vec<usize> {
    let rows = e.len() / cols;
    let mut out = Vec::new();
    for i in 0..rows {
        for m in 0..book.heads {
            let v = &e[i * cols + m * book.sub_dim..i * cols + (m + 1) * book.sub_dim];
            let mut best = (0, f64::INFINITY);
            for k in 0..book.codes {
                let start = (m * book.codes + k) * book.sub_dim;
                let d: f64 = book.data[start..start + book.sub_dim]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            out.push(best.0);
        }
    }
    out
}

struct Frozen {
    e0: Vec<CMat>,
    q0: Vec<CMat>,
    idx: Vec<Vec<usize>>,
}

#[derive(Clone, Copy)]
struct Terms {
    recon: bool,
    vq: bool,
}

struct Instance {
    bundle: TokenizerBundle,
    batch: Vec<TokenSequence>,
    modality: Modality,
}

impl Instance {
    fn ae(&self) -> &AutoencoderParams {
        self.bundle.autoencoder(self.modality)
    }

    fn theta(&self) -> Vec<f64> {
        let mut t = self.ae().flatten();
        t.extend_from_slice(&self.bundle.codebook.data);
        t
    }

    fn frozen(&self) -> Frozen {
        let theta: Vec<C> = self.theta().iter().map(|&v| C::new(v, 0.0)).collect();
        let ae = unflatten(self.ae(), &theta);
        let book = &self.bundle.codebook;
        let mut f = Frozen {
            e0: Vec::new(),
            q0: Vec::new(),
            idx: Vec::new(),
        };
        for x in &self.batch {
            let e = c_encode(&ae, &CMat::real(&x.tokens));
            let re: Vec<f64> = e.d.iter().map(|v| v.re).collect();
            let idx = brute_indices(&re, e.c, book);
            let mut q = e.clone();
            for i in 0..e.r {
                for m in 0..book.heads {
                    for s in 0..book.sub_dim {
                        q.d[i * e.c + m * book.sub_dim + s] =
                            C::new(book.code(m, idx[i * book.heads + m])[s], 0.0);
                    }
                }
            }
            f.e0.push(e);
            f.q0.push(q);
            f.idx.push(idx);
        }
        f
    }

    /// Stop-gradient surrogate of the warmup objective at `theta`.
    fn surrogate(&self, frozen: &Frozen, theta: &[C], terms: Terms) -> C {
        let ae_params = self.ae();
        let na = ae_params.param_count();
        let ae = unflatten(ae_params, &theta[..na]);
        let book = &theta[na..];
        let (heads, codes, sub) = (self.bundle.codebook.heads, self.bundle.codebook.codes, self.bundle.codebook.sub_dim);
        let (mut recon, mut vq) = (C::new(0.0, 0.0), C::new(0.0, 0.0));
        for (b, x) in self.batch.iter().enumerate() {
            let xt = CMat::real(&x.tokens);
            let e = c_encode(&ae, &xt);
            if terms.recon {
                let dec_in = e.plus(&frozen.q0[b].minus(&frozen.e0[b]));
                recon += c_decode(&ae, &dec_in).minus(&xt).sq();
            }
            if terms.vq {
                let mut q = e.clone();
                for i in 0..e.r {
                    for m in 0..heads {
                        let k = frozen.idx[b][i * heads + m];
                        for s in 0..sub {
                            q.d[i * e.c + m * sub + s] = book[(m * codes + k) * sub + s];
                        }
                    }
                }
                vq += frozen.e0[b].minus(&q).sq() + frozen.q0[b].minus(&e).sq();
            }
        }
        let bsz = self.batch.len() as f64;
        let n = self.batch[0].tokens.rows as f64;
        let p = ae_params.features() as f64;
        let d = ae_params.dim() as f64;
        recon / (bsz * n * p) + vq / (bsz * n * d)
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let tokens = [4usize, 6, 8][rng.gen_range(0..3)];
    let heads = [1usize, 2, 4][rng.gen_range(0..3)];
    let sub = rng.gen_range(1..=16 / heads);
    let dim = heads * sub;
    let segment = rng.gen_range(2..=4);
    let config = BundleConfig {
        image_height: 4,
        image_width: tokens,
        channels: 1,
        patch: 2,
        series_len: tokens * segment,
        segment,
        mode: SegmentMode::Strict,
        dim,
        heads,
        codes: rng.gen_range(2..=8),
        depth: rng.gen_range(0..=2),
    };
    let mut bundle = TokenizerBundle::init(config, rng.gen()).expect("valid config");
    let modality = if rng.gen_bool(0.5) { Modality::Visual } else { Modality::Temporal };
    let batch: Vec<TokenSequence> = (0..3)
        .map(|_| match modality {
            Modality::Temporal => {
                let x = TimeSeries::new((0..config.series_len).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
                bundle.tokenize_series(&x).unwrap().0
            }
            Modality::Visual => {
                let px = (0..4 * tokens).map(|_| rng.gen::<f64>()).collect();
                bundle.tokenize_image(&Image::new(4, tokens, 1, px).unwrap()).unwrap()
            }
        })
        .collect();
    let sample: Vec<EmbeddingGrid> = batch
        .iter()
        .map(|t| timeartist::autoencoder::encode_traced(bundle.autoencoder(modality), t).unwrap().0)
        .collect();
    bundle.codebook = init_codebooks(&sample, heads, config.codes, rng.gen()).unwrap();
    for v in bundle.codebook.data.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    Instance { bundle, batch, modality }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut worst_elem, mut worst_norm, mut worst_value) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let inst = random_instance(&mut rng);
        let out = compute_losses(&inst.batch, &inst.bundle).unwrap();
        let mut analytic = out.grads.autoencoder.flatten();
        analytic.extend_from_slice(&out.grads.codebook.data);
        let frozen = inst.frozen();
        let theta = inst.theta();
        let all = Terms { recon: true, vq: true };
        let at = |t: &[f64]| -> f64 {
            let c: Vec<C> = t.iter().map(|&v| C::new(v, 0.0)).collect();
            inst.surrogate(&frozen, &c, all).re
        };
        worst_value = worst_value.max((at(&theta) - out.loss.total).abs());
        let mut probe = theta.clone();
        let (mut diff2, mut num2) = (0.0, 0.0);
        for i in 0..theta.len() {
            probe[i] = theta[i] + GRAD_FD_STEP;
            let up = at(&probe);
            probe[i] = theta[i] - GRAD_FD_STEP;
            let down = at(&probe);
            probe[i] = theta[i];
            let numeric = (up - down) / (2.0 * GRAD_FD_STEP);
            worst_elem = worst_elem.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
            diff2 += (analytic[i] - numeric).powi(2);
            num2 += numeric * numeric;
        }
        worst_norm = worst_norm.max(diff2.sqrt() / num2.sqrt().max(1e-12));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_elem <= GRAD_REL_TOL && worst_norm <= GRAD_REL_TOL && worst_value <= 1e-12 && secs < GRAD_TIME_LIMIT_S,
        format!(
            "20 instances, worst elementwise {worst_elem:.2e}, worst normwise {worst_norm:.2e}, \
             surrogate/loss gap {worst_value:.1e}, {secs:.1}s (tol {GRAD_REL_TOL:e}, < {GRAD_TIME_LIMIT_S}s)"
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let (mut idx_bad, mut q_bad, mut loss_bad) = (0, 0, 0);
    for call in 0..1000 {
        let heads = rng.gen_range(1..=4);
        let sub = rng.gen_range(1..=4);
        let codes = rng.gen_range(2..=64);
        let tokens = rng.gen_range(1..=8);
        let mut data: Vec<f64> = (0..heads * codes * sub).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if call % 5 == 0 {
            // duplicated codes force exact ties
            for m in 0..heads {
                let k = rng.gen_range(1..codes);
                for s in 0..sub {
                    data[(m * codes + k) * sub + s] = data[(m * codes) * sub + s];
                }
            }
        }
        let book = MultiHeadCodebook::new(heads, codes, sub, data).unwrap();
        let mut e: Vec<f64> = (0..tokens * heads * sub).map(|_| rng.gen_range(-1.5..1.5)).collect();
        if call % 7 == 0 {
            // embeddings sitting exactly on codes
            for i in 0..tokens {
                for m in 0..heads {
                    let k = rng.gen_range(0..codes);
                    for s in 0..sub {
                        e[i * heads * sub + m * sub + s] = book.code(m, k)[s];
                    }
                }
            }
        }
        let grid = EmbeddingGrid {
            data: Matrix::from_vec(tokens, heads * sub, e.clone()).unwrap(),
            modality: Modality::Temporal,
        };
        let r = quantize(&grid, &book).unwrap();
        let want = brute_indices(&e, heads * sub, &book);
        idx_bad += usize::from(r.indices.indices != want);
        let looked = lookup(&r.indices, &book).unwrap();
        q_bad += usize::from(looked.data.iter().zip(&r.q.data.data).any(|(a, b)| a.to_bits() != b.to_bits()));
        let residual: f64 = e.iter().zip(&looked.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let (lq, lc) = codebook_losses(&grid, &r).unwrap();
        let tol = 1e-12 * (1.0 + residual);
        loss_bad += usize::from(
            (r.residual_sq - residual).abs() > tol || (lq - r.residual_sq).abs() > tol || (lc - r.residual_sq).abs() > tol,
        );
    }
    outcome(
        idx_bad == 0 && q_bad == 0 && loss_bad == 0,
        format!("1000 calls: {idx_bad} index mismatches, {q_bad} lookup mismatches, {loss_bad} loss mismatches"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let inst = random_instance(&mut rng);
        let out = compute_losses(&inst.batch, &inst.bundle).unwrap();
        let enc_grad = out.grads.autoencoder.encoder.flatten();
        let frozen = inst.frozen();
        let theta: Vec<C> = inst.theta().iter().map(|&v| C::new(v, 0.0)).collect();
        let scale = enc_grad.iter().fold(1.0f64, |a, g| a.max(g.abs()));
        let mut probe = theta.clone();
        for (i, g) in enc_grad.iter().enumerate() {
            probe[i] = theta[i] + C::new(0.0, CS_STEP);
            let recon = inst.surrogate(&frozen, &probe, Terms { recon: true, vq: false }).im / CS_STEP;
            let commit = inst.surrogate(&frozen, &probe, Terms { recon: false, vq: true }).im / CS_STEP;
            probe[i] = theta[i];
            worst = worst.max(((g - commit) - recon).abs() / scale);
        }
    }
    outcome(
        worst <= STE_TOL,
        format!("20 instances, worst |decoder-path - identity-backward| / max|g| = {worst:.2e} (tol {STE_TOL:e})"),
    )
}

fn brute_min(c: &Matrix) -> f64 {
    fn go(c: &Matrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == c.rows {
            if acc < *best {
                *best = acc;
            }
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

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let (mut shapes, mut bad) = (0, 0);
    for rows in 1..=7 {
        for cols in rows..=7 {
            shapes += 1;
            for _ in 0..100 {
                let c = Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen::<f64>()).collect()).unwrap();
                let a = hungarian_assign(&c).unwrap();
                let mut seen = vec![false; cols];
                let injective = a.mapping.iter().all(|&j| !std::mem::replace(&mut seen[j], true));
                let sum: f64 = a.mapping.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
                if !injective || a.cost != brute_min(&c) || sum != a.cost {
                    bad += 1;
                }
            }
        }
    }
    outcome(bad == 0, format!("{shapes} shapes x 100 matrices, {bad} mismatches against exhaustive search"))
}

fn random_hist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..k).map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen::<f64>() }).collect();
        let t: f64 = raw.iter().sum();
        if t > 0.0 {
            return raw.iter().map(|v| v / t).collect();
        }
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let ln2 = std::f64::consts::LN_2;
    let mut violations = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=64);
        let p = random_hist(&mut rng, k);
        let q = random_hist(&mut rng, k);
        let (pq, qp) = (jsd(&p, &q), jsd(&q, &p));
        let equal = p == q;
        let ok = (pq - qp).abs() <= JSD_TOL
            && pq >= 0.0
            && pq <= ln2 + JSD_TOL
            && jsd(&p, &p).abs() <= JSD_TOL
            && (equal || pq > JSD_TOL);
        violations += usize::from(!ok);
    }
    let delta = jsd(&[1.0, 0.0], &[0.0, 1.0]);
    let h0 = IndexHistogram::from_counts(2, 3, vec![5, 0, 0, 5, 0, 0]).unwrap();
    let h1 = IndexHistogram::from_counts(2, 3, vec![0, 5, 0, 0, 5, 0]).unwrap();
    let delta_heads = js_divergence(&h0, &h1).unwrap();
    let delta_ok = (delta - ln2).abs() <= JSD_TOL && (delta_heads - ln2).abs() <= JSD_TOL;
    outcome(
        violations == 0 && delta_ok,
        format!("1000 pairs, {violations} violations; delta pair {delta:.15} (ln 2 = {ln2:.15})"),
    )
}

fn criterion_6(w: &WarmupOutcome, secs: f64) -> Outcome {
    let visual: Vec<f64> = w.log.iter().filter(|l| l.modality == Modality::Visual).map(|l| l.total).collect();
    let temporal: Vec<f64> = w.log.iter().filter(|l| l.modality == Modality::Temporal).map(|l| l.total).collect();
    let rv = visual.last().unwrap() / visual[0];
    let rt = temporal.last().unwrap() / temporal[0];
    let min_util = w.tail_utilization.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        rv <= WARMUP_LOSS_RATIO && rt <= WARMUP_LOSS_RATIO && min_util >= WARMUP_MIN_UTIL && secs < WARMUP_TIME_LIMIT_S,
        format!(
            "final/initial visual {rv:.3}, temporal {rt:.3} (<= {WARMUP_LOSS_RATIO}); utilization {:?} (>= {WARMUP_MIN_UTIL}); {secs:.1}s",
            w.tail_utilization.iter().map(|u| (u * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn criterion_7(bundle: &TokenizerBundle) -> Outcome {
    let held = heldout_corpus(&bundle.config, 42);
    let mut total = 0.0;
    for x in &held.series {
        let (img, stats) = series_to_image_with_stats(x, bundle).unwrap();
        let back = image_to_series(&img, bundle, &stats).unwrap();
        total += eval_forecast(&back.values, &x.values).unwrap().0 / x.variance();
    }
    let mean = total / held.series.len() as f64;
    outcome(
        mean <= ROUND_TRIP_RATIO,
        format!("mean mse/var over {} held-out series {mean:.4} (<= {ROUND_TRIP_RATIO})", held.series.len()),
    )
}

/// Depth-0 bundle whose codes are the sinusoid's two phases per head.
fn lossless_bundle(x: &TimeSeries) -> TokenizerBundle {
    let stats = norm_stats_of(&x.values);
    let mut codes = Vec::new();
    for m in 0..4 {
        codes.push((x.values[m] - stats.mean) / stats.std);
        codes.push((x.values[m + 4] - stats.mean) / stats.std);
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
        MultiHeadCodebook::new(4, 2, 1, codes).unwrap(),
    )
    .unwrap();
    b.freeze();
    b
}

fn reconstruct(values: &[f64], bundle: &TokenizerBundle) -> Vec<f64> {
    values
        .chunks(bundle.config.series_len)
        .flat_map(|c| {
            let x = TimeSeries::new(c.to_vec()).unwrap();
            let (img, stats) = series_to_image_with_stats(&x, bundle).unwrap();
            image_to_series(&img, bundle, &stats).unwrap().values
        })
        .collect()
}

fn criterion_8(bundle: &TokenizerBundle) -> Outcome {
    let cfg = ForecastConfig {
        context_length: 64,
        horizon: 128,
        w_obs: 16,
        w_out: 48,
    };
    let (mut fc, mut rc) = (0.0, 0.0);
    let series = forecast_series(192, 64, 4242);
    for s in &series {
        let obs = TimeSeries::new(s.values[..64].to_vec()).unwrap();
        let future = TimeSeries::new(s.values[64..].to_vec()).unwrap();
        let oracle = OracleOutpainter {
            future: &future,
            stats: norm_stats_of(&obs.values),
            bundle,
        };
        let pred = forecast(&obs, &cfg, bundle, &oracle).unwrap();
        fc += eval_forecast(&pred.values, &future.values).unwrap().0;
        rc += eval_forecast(&reconstruct(&future.values, bundle), &future.values).unwrap().0;
    }
    let ratio = fc / rc;

    let period = 8.0;
    let x = TimeSeries::new((0..32).map(|t| (2.0 * std::f64::consts::PI * t as f64 / period + 0.3).sin()).collect())
        .unwrap();
    let lossless = lossless_bundle(&x);
    let tile_cfg = ForecastConfig {
        context_length: 32,
        horizon: 64,
        w_obs: 16,
        w_out: 48,
    };
    let pred = forecast(&x, &tile_cfg, &lossless, &TileOutpainter).unwrap();
    let naive: Vec<f64> = (0..64).map(|t| x.values[32 - 8 + t % 8]).collect();
    let tile_err = pred.values.iter().zip(&naive).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        ratio <= ORACLE_FORECAST_RATIO && tile_err <= TILE_TOL && pred.len() == 64,
        format!(
            "oracle forecast mse / future reconstruction mse = {ratio:.4} (<= {ORACLE_FORECAST_RATIO}) over {} series; \
             tiling vs seasonal naive max error {tile_err:.1e} (<= {TILE_TOL:e})",
            series.len()
        ),
    )
}

fn criterion_9(bundle: &TokenizerBundle) -> Outcome {
    let bench = train_benchmark(&bundle.config, 42);
    let (pairing, trained) =
        classification_pipeline(bundle, &bench, &RunConfig::default().align_config(Direction::TemporalToVisual))
            .unwrap();
    let refs = bench.images_by_class();
    let test = test_benchmark(&bundle.config, 42);
    let correct = test
        .series
        .iter()
        .filter(|(x, c)| classify_series(x, &trained.model, bundle, &refs).unwrap() == PLANTED[*c])
        .count();
    let acc = correct as f64 / test.series.len() as f64;
    let recovered = pairing.assignment.mapping == PLANTED;
    let costs: Vec<String> = pairing.cost.data.iter().map(|v| format!("{v:.3}")).collect();
    outcome(
        recovered && acc >= CLASSIFY_MIN_ACC,
        format!(
            "assignment {:?} vs planted {:?}; accuracy {acc:.3} on {} series (>= {CLASSIFY_MIN_ACC}); cost [{}]",
            pairing.assignment.mapping,
            PLANTED,
            test.series.len(),
            costs.join(", ")
        ),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    std::process::Command::new(env!("CARGO_BIN_EXE_timeartist"))
        .args(args)
        .output()
        .map_or(-1, |o| o.status.code().unwrap_or(-1))
}

fn criterion_10(bundle: &TokenizerBundle) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("run1"), dir.path().join("run2"));
    let codes = [
        run_cli(&["warmup", "--out", a.to_str().unwrap()]),
        run_cli(&["warmup", "--out", b.to_str().unwrap()]),
    ];
    let ca = std::fs::read(a.join("bundle.tart")).unwrap_or_default();
    let cb = std::fs::read(b.join("bundle.tart")).unwrap_or_default();
    let identical = codes == [0, 0] && !ca.is_empty() && ca == cb;

    let mut trips = Vec::new();
    let bytes = bundle_to_checkpoint(bundle).to_bytes().unwrap();
    let back = bundle_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    trips.push(("bundle", back == *bundle && bundle_to_checkpoint(&back).to_bytes().unwrap() == bytes));
    let from_cli = bundle_from_checkpoint(&Checkpoint::from_bytes(&ca).unwrap()).unwrap();
    trips.push(("cli bundle", from_cli == *bundle));

    let model = timeartist::alignment::AlignmentModel::init(Direction::VisualToTemporal, 16, 4, 16, 16, 9);
    let mbytes = model_to_checkpoint(&model).to_bytes().unwrap();
    let mback = model_from_checkpoint(&Checkpoint::from_bytes(&mbytes).unwrap()).unwrap();
    trips.push(("alignment", mback == model && model_to_checkpoint(&mback).to_bytes().unwrap() == mbytes));

    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for ch in [1, 3] {
        let img = Image::new(6, 5, ch, (0..30 * ch).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let first = image_to_bytes(&img).unwrap();
        let again = image_to_bytes(&image_from_bytes(&first).unwrap()).unwrap();
        trips.push((if ch == 1 { "pgm" } else { "ppm" }, first == again));
    }
    let series: Vec<TimeSeries> = (0..3)
        .map(|_| TimeSeries::new((0..17).map(|_| rng.gen_range(-1e3..1e3) / 7.0).collect()).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_series_csv(&mut buf, &series).unwrap();
    trips.push(("csv", parse_series_csv(std::str::from_utf8(&buf).unwrap(), None).unwrap() == series));
    let cfg = RunConfig {
        seed: 7,
        learning_rate: 0.0123,
        ..RunConfig::default()
    };
    trips.push(("config", RunConfig::parse(&cfg.to_text()).unwrap() == cfg));
    let trips_ok = trips.iter().all(|(_, ok)| *ok);

    let selftest = run_cli(&["selftest"]);
    let failed: Vec<&str> = trips.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        identical && trips_ok && selftest == 0,
        format!(
            "warmup exits {codes:?}, checkpoints identical: {identical}; round trips failing: {failed:?}; selftest exit {selftest}"
        ),
    )
}

fn criterion_11() -> Outcome {
    let x: Vec<f64> = (0..64).map(|t| (t as f64 * 0.37).sin() + 0.2 * (t as f64 * 0.11).cos()).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let real = vec![vec![x.clone(), x.clone()]];
    let synth = vec![vec![x.clone(), neg]];
    let identical = correlational_score(&real, &real).unwrap();
    let opposite = correlational_score(&real, &synth).unwrap();
    outcome(
        identical.abs() <= CORR_TOL && (opposite - CORR_OPPOSITE_EXPECTED).abs() <= CORR_TOL,
        format!(
            "identical {identical:.3e} (expected 0); rho=+1 vs rho=-1 gives {opposite:.12} \
             (expected {CORR_OPPOSITE_EXPECTED}, tol {CORR_TOL:e})"
        ),
    )
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let report = |id: u8, name: &str, o: &Outcome| {
        println!("{} criterion {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    macro_rules! crit {
        ($id:expr, $name:expr, $e:expr) => {{
            let o = $e;
            report($id, $name, &o);
            results.push(($id, $name, o));
        }};
    }
    crit!(1, "gradient suite", criterion_1());
    crit!(2, "quantizer oracle", criterion_2());
    crit!(3, "straight-through check", criterion_3());
    crit!(4, "hungarian oracle", criterion_4());
    crit!(5, "jsd properties", criterion_5());

    let bc = BundleConfig::default();
    let corpus = training_corpus(&bc, 42);
    let start = Instant::now();
    let warm = run_warmup(&corpus.series, &corpus.images, bc, &WarmupConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    crit!(6, "warmup convergence", criterion_6(&warm, secs));
    crit!(7, "round-trip conversion", criterion_7(&warm.bundle));
    crit!(8, "forecast pipeline", criterion_8(&warm.bundle));
    crit!(9, "end-to-end classification", criterion_9(&warm.bundle));
    crit!(10, "determinism and persistence", criterion_10(&warm.bundle));
    crit!(11, "correlational score", criterion_11());

    let failed: Vec<u8> = results.iter().filter(|(_, _, o)| !o.pass).map(|(id, _, _)| *id).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
