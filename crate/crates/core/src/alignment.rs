//! Index-to-index alignment between the temporal and visual modalities.
//!
//! Each position embeds its `M` indices (one table per head, summed) plus a
//! learned positional vector, passes through one single-head self-attention
//! block with a residual connection, and projects to `K` logits per head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{encode_traced, ParamSet};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::quantizer::{quantize, IndexSequence};
use crate::tensor::Matrix;
use crate::tokenize::{Image, Modality, TimeSeries};
use crate::training::{EpochSampler, TokenizerBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    TemporalToVisual,
    VisualToTemporal,
}

impl Direction {
    pub fn source(self) -> Modality {
        match self {
            Direction::TemporalToVisual => Modality::Temporal,
            Direction::VisualToTemporal => Modality::Visual,
        }
    }

    pub fn target(self) -> Modality {
        match self {
            Direction::TemporalToVisual => Modality::Visual,
            Direction::VisualToTemporal => Modality::Temporal,
        }
    }

    pub fn reverse(self) -> Self {
        match self {
            Direction::TemporalToVisual => Direction::VisualToTemporal,
            Direction::VisualToTemporal => Direction::TemporalToVisual,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Direction::TemporalToVisual => 0,
            Direction::VisualToTemporal => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Direction::TemporalToVisual),
            1 => Ok(Direction::VisualToTemporal),
            t => Err(Error::CorruptCheckpoint(format!("unknown direction tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    pub direction: Direction,
    pub tokens: usize,
    pub heads: usize,
    pub codes: usize,
    /// `(M K) x E`; row `m K + k` embeds code `k` of head `m`.
    pub embed: Matrix,
    /// `N x E`.
    pub pos: Matrix,
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    /// `E x (M K)`; columns `m K .. (m + 1) K` are head `m`'s projection.
    pub out_w: Matrix,
    pub out_b: Matrix,
}

impl ParamSet for AlignmentModel {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("align.embed".into(), &self.embed),
            ("align.pos".into(), &self.pos),
            ("align.w_query".into(), &self.w_query),
            ("align.w_key".into(), &self.w_key),
            ("align.w_value".into(), &self.w_value),
            ("align.out_w".into(), &self.out_w),
            ("align.out_b".into(), &self.out_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.embed,
            &mut self.pos,
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect(),
    }
}

impl AlignmentModel {
    pub fn zeros(direction: Direction, tokens: usize, heads: usize, codes: usize, width: usize) -> Self {
        Self {
            direction,
            tokens,
            heads,
            codes,
            embed: Matrix::zeros(heads * codes, width),
            pos: Matrix::zeros(tokens, width),
            w_query: Matrix::zeros(width, width),
            w_key: Matrix::zeros(width, width),
            w_value: Matrix::zeros(width, width),
            out_w: Matrix::zeros(width, heads * codes),
            out_b: Matrix::zeros(1, heads * codes),
        }
    }

    /// Uniform `[-1/sqrt(E), 1/sqrt(E)]` weights, zero output bias.
    pub fn init(direction: Direction, tokens: usize, heads: usize, codes: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (width.max(1) as f64).sqrt();
        Self {
            direction,
            tokens,
            heads,
            codes,
            embed: uniform(heads * codes, width, s, &mut rng),
            pos: uniform(tokens, width, s, &mut rng),
            w_query: uniform(width, width, s, &mut rng),
            w_key: uniform(width, width, s, &mut rng),
            w_value: uniform(width, width, s, &mut rng),
            out_w: uniform(width, heads * codes, s, &mut rng),
            out_b: Matrix::zeros(1, heads * codes),
        }
    }

    pub fn width(&self) -> usize {
        self.embed.cols
    }

    fn check_input(&self, src: &IndexSequence) -> Result<()> {
        if src.tokens != self.tokens || src.heads != self.heads {
            return Err(Error::ShapeMismatch(format!(
                "index grid {}x{} for a model over {}x{}",
                src.tokens, src.heads, self.tokens, self.heads
            )));
        }
        src.check_bounds(self.codes)
    }
}

/// Per-position, per-head logits: `N x (M K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignLogits {
    pub heads: usize,
    pub codes: usize,
    pub data: Matrix,
}

impl AlignLogits {
    pub fn get(&self, token: usize, head: usize, code: usize) -> f64 {
        self.data.get(token, head * self.codes + code)
    }

    pub fn head_row(&self, token: usize, head: usize) -> &[f64] {
        &self.data.row(token)[head * self.codes..(head + 1) * self.codes]
    }

    /// Argmax per position and head; ties go to the smallest index.
    pub fn argmax(&self) -> IndexSequence {
        let tokens = self.data.rows;
        let mut indices = Vec::with_capacity(tokens * self.heads);
        for i in 0..tokens {
            for m in 0..self.heads {
                let row = self.head_row(i, m);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                indices.push(best);
            }
        }
        IndexSequence {
            tokens,
            heads: self.heads,
            indices,
        }
    }
}

struct Forward {
    h0: Matrix,
    query: Matrix,
    key: Matrix,
    value: Matrix,
    attn: Matrix,
    h1: Matrix,
    logits: Matrix,
}

fn softmax_rows(s: &mut Matrix) {
    for r in 0..s.rows {
        let row = s.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn forward(model: &AlignmentModel, src: &IndexSequence) -> Forward {
    let e = model.width();
    let mut h0 = model.pos.clone();
    for i in 0..model.tokens {
        let row = h0.row_mut(i);
        for m in 0..model.heads {
            let emb = model.embed.row(m * model.codes + src.get(i, m));
            for (h, v) in row.iter_mut().zip(emb) {
                *h += v;
            }
        }
    }
    let query = h0.matmul(&model.w_query);
    let key = h0.matmul(&model.w_key);
    let value = h0.matmul(&model.w_value);
    let mut attn = query.matmul_t(&key);
    attn.scale(1.0 / (e as f64).sqrt());
    softmax_rows(&mut attn);
    let mut h1 = attn.matmul(&value);
    h1.add_assign(&h0);
    let mut logits = h1.matmul(&model.out_w);
    logits.add_row_vector(&model.out_b);
    Forward {
        h0,
        query,
        key,
        value,
        attn,
        h1,
        logits,
    }
}

pub fn align_predict(model: &AlignmentModel, src: &IndexSequence) -> Result<(AlignLogits, IndexSequence)> {
    model.check_input(src)?;
    let logits = AlignLogits {
        heads: model.heads,
        codes: model.codes,
        data: forward(model, src).logits,
    };
    let argmax = logits.argmax();
    Ok((logits, argmax))
}

/// Mean cross-entropy over positions and heads, with its gradient scaled by
/// `weight`.
pub fn cross_entropy_grad(
    model: &AlignmentModel,
    src: &IndexSequence,
    target: &IndexSequence,
    weight: f64,
) -> Result<(f64, AlignmentModel)> {
    model.check_input(src)?;
    model.check_input(target)?;
    let f = forward(model, src);
    let (n, heads, codes) = (model.tokens, model.heads, model.codes);
    let count = (n * heads) as f64;

    let mut loss = 0.0;
    let mut g_logits = Matrix::zeros(n, heads * codes);
    for i in 0..n {
        for m in 0..heads {
            let row = &f.logits.row(i)[m * codes..(m + 1) * codes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let t = target.get(i, m);
            loss += max + sum.ln() - row[t];
            let g = &mut g_logits.row_mut(i)[m * codes..(m + 1) * codes];
            for (k, gk) in g.iter_mut().enumerate() {
                let p = (row[k] - max).exp() / sum;
                *gk = weight * (p - if k == t { 1.0 } else { 0.0 }) / count;
            }
        }
    }
    loss /= count;

    let mut grads = model.zeroed();
    grads.out_w = f.h1.t_matmul(&g_logits);
    grads.out_b = g_logits.col_sums();
    let g_h1 = g_logits.matmul_t(&model.out_w);

    // h1 = h0 + P V
    let mut g_h0 = g_h1.clone();
    let g_attn = g_h1.matmul_t(&f.value);
    let g_value = f.attn.t_matmul(&g_h1);
    grads.w_value = f.h0.t_matmul(&g_value);
    g_h0.add_assign(&g_value.matmul_t(&model.w_value));

    // softmax rows, then S = Q K^T / sqrt(E)
    let c = 1.0 / (model.width() as f64).sqrt();
    let mut g_s = Matrix::zeros(n, n);
    for i in 0..n {
        let p = f.attn.row(i);
        let gp = g_attn.row(i);
        let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
        for (j, gs) in g_s.row_mut(i).iter_mut().enumerate() {
            *gs = c * p[j] * (gp[j] - dot);
        }
    }
    let g_query = g_s.matmul(&f.key);
    let g_key = g_s.t_matmul(&f.query);
    grads.w_query = f.h0.t_matmul(&g_query);
    grads.w_key = f.h0.t_matmul(&g_key);
    g_h0.add_assign(&g_query.matmul_t(&model.w_query));
    g_h0.add_assign(&g_key.matmul_t(&model.w_key));

    for i in 0..n {
        let g = g_h0.row(i).to_vec();
        for m in 0..heads {
            for (d, v) in grads.embed.row_mut(m * codes + src.get(i, m)).iter_mut().zip(&g) {
                *d += v;
            }
        }
    }
    grads.pos = g_h0;
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    SlidingWindow,
    ClassAssigned { temporal_class: usize, visual_class: usize },
}

/// A (source, target) index pair. Pairs built by this module are always
/// temporal-to-visual; [`PairedSample::reversed`] flips them.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub source: IndexSequence,
    pub target: IndexSequence,
    pub provenance: Provenance,
}

impl PairedSample {
    pub fn new(source: IndexSequence, target: IndexSequence, provenance: Provenance) -> Result<Self> {
        if source.tokens != target.tokens || source.heads != target.heads {
            return Err(Error::ShapeMismatch(format!(
                "pair of {}x{} and {}x{} grids",
                source.tokens, source.heads, target.tokens, target.heads
            )));
        }
        Ok(Self {
            source,
            target,
            provenance,
        })
    }

    pub fn reversed(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
            provenance: self.provenance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignConfig {
    pub direction: Direction,
    pub width: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            direction: Direction::TemporalToVisual,
            width: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            steps: 2000,
            batch_size: 16,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignOutcome {
    pub model: AlignmentModel,
    /// Mean batch cross-entropy before each update.
    pub losses: Vec<f64>,
}

/// Seeded minibatch SGD (with optional momentum) on mean cross-entropy.
/// The bundle only supplies shapes and is never modified.
pub fn train_alignment(pairs: &[PairedSample], bundle: &TokenizerBundle, config: &AlignConfig) -> Result<AlignOutcome> {
    require_frozen(bundle)?;
    let c = &bundle.config;
    let init = AlignmentModel::init(config.direction, c.tokens(), c.heads, c.codes, config.width, config.seed);
    train_alignment_from(init, pairs, config, Exec::default())
}

/// Training loop starting from an explicit model.
pub fn train_alignment_from(
    mut model: AlignmentModel,
    pairs: &[PairedSample],
    config: &AlignConfig,
    exec: Exec,
) -> Result<AlignOutcome> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.steps == 0 || config.batch_size == 0 || !(config.learning_rate >= 0.0) {
        return Err(Error::Config("alignment needs steps, batch size >= 1 and lr >= 0".into()));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::Config(format!("momentum {} outside [0, 1)", config.momentum)));
    }
    let mut sampler = EpochSampler::new(pairs.len(), ChaCha8Rng::seed_from_u64(config.seed ^ 0xA11C));
    let mut velocity = model.zeroed();
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = sampler.next_batch(config.batch_size);
        let weight = 1.0 / batch.len() as f64;
        let parts = par::try_map(exec, &batch, |&i| {
            cross_entropy_grad(&model, &pairs[i].source, &pairs[i].target, weight)
        })?;
        let mut loss = 0.0;
        let mut grads = model.zeroed();
        for (l, g) in parts {
            loss += l * weight;
            grads.axpy(1.0, &g);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        losses.push(loss);
        velocity.scale_all(config.momentum);
        velocity.axpy(1.0, &grads);
        model.axpy(-config.learning_rate, &velocity);
    }
    Ok(AlignOutcome { model, losses })
}

fn require_frozen(bundle: &TokenizerBundle) -> Result<()> {
    if bundle.frozen {
        Ok(())
    } else {
        Err(Error::NotFrozen)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Sample<'a> {
    Series(&'a TimeSeries),
    Image(&'a Image),
}

/// Indices selected when quantizing the encoded sample.
pub fn extract_indices(x: Sample<'_>, bundle: &TokenizerBundle) -> Result<IndexSequence> {
    require_frozen(bundle)?;
    let seq = match x {
        Sample::Series(s) => bundle.tokenize_series(s)?.0,
        Sample::Image(img) => bundle.tokenize_image(img)?,
    };
    let (e, _) = encode_traced(bundle.autoencoder(seq.origin()), &seq)?;
    Ok(quantize(&e, &bundle.codebook)?.indices)
}

/// Horizontal crop offset for series offset `start`.
pub fn proportional_offset(start: usize, series_len: usize, image_width: usize, crop_width: usize) -> usize {
    let x = start * image_width / series_len;
    x.min(image_width - crop_width)
}

/// Synchronized windows: series slices of length `window` every `stride`
/// steps, each paired with a full-height image crop of the bundle's width
/// at the proportional horizontal offset.
pub fn build_sliding_pairs(
    series: &TimeSeries,
    image: &Image,
    window: usize,
    stride: usize,
    bundle: &TokenizerBundle,
) -> Result<Vec<PairedSample>> {
    build_sliding_pairs_with(Exec::default(), series, image, window, stride, bundle)
}

pub fn build_sliding_pairs_with(
    exec: Exec,
    series: &TimeSeries,
    image: &Image,
    window: usize,
    stride: usize,
    bundle: &TokenizerBundle,
) -> Result<Vec<PairedSample>> {
    let c = &bundle.config;
    let total = series.len();
    if window > total {
        return Err(Error::WindowTooLarge { window, len: total });
    }
    if window != c.series_len {
        return Err(Error::GeometryMismatch(format!(
            "window {window} differs from the bundle's series length {}",
            c.series_len
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if image.height != c.image_height || image.width < c.image_width {
        return Err(Error::GeometryMismatch(format!(
            "image {}x{} cannot supply {}x{} crops",
            image.height, image.width, c.image_height, c.image_width
        )));
    }
    let count = (total - window) / stride + 1;
    par::try_map_range(exec, count, |k| {
        let start = k * stride;
        let slice = TimeSeries::new(series.values[start..start + window].to_vec())?;
        let x0 = proportional_offset(start, total, image.width, c.image_width);
        let crop = image.crop_columns(x0, c.image_width)?;
        PairedSample::new(
            extract_indices(Sample::Series(&slice), bundle)?,
            extract_indices(Sample::Image(&crop), bundle)?,
            Provenance::SlidingWindow,
        )
    })
}
