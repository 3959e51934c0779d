//! Warmup: reconstruction training of both autoencoders and the shared
//! codebook on unimodal batches, ending in a frozen [`TokenizerBundle`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{
    decode_traced, decoder_backward, encode_traced, encoder_backward, AeShape, AutoencoderParams, EmbeddingGrid,
    ParamSet,
};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::quantizer::{
    commit_loss_embedding_grad, init_codebooks, quant_loss_code_grad, quantize, utilization, IndexSequence,
    MultiHeadCodebook,
};
use crate::tokenize::{
    instance_normalize, patchify_image, segment_series, Image, Modality, NormStats, SegmentMode, TimeSeries,
    TokenGeometry, TokenSequence,
};

/// Geometry and model sizes shared by both modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BundleConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    pub series_len: usize,
    pub segment: usize,
    pub mode: SegmentMode,
    pub dim: usize,
    pub heads: usize,
    pub codes: usize,
    pub depth: usize,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch: 4,
            series_len: 64,
            segment: 4,
            mode: SegmentMode::Strict,
            dim: 16,
            heads: 4,
            codes: 16,
            depth: 2,
        }
    }
}

impl BundleConfig {
    pub fn tokens(&self) -> usize {
        (self.image_height / self.patch.max(1)) * (self.image_width / self.patch.max(1))
    }

    pub fn features(&self, modality: Modality) -> usize {
        match modality {
            Modality::Visual => self.patch * self.patch * self.channels,
            Modality::Temporal => self.segment,
        }
    }

    pub fn ae_shape(&self, modality: Modality) -> AeShape {
        AeShape {
            tokens: self.tokens(),
            features: self.features(modality),
            dim: self.dim,
            depth: self.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch == 0 || !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} must divide the {}x{} image",
                self.patch, self.image_height, self.image_width
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.segment == 0 || self.series_len == 0 {
            return bad("segment and series length must be positive".into());
        }
        let temporal_tokens = self.series_len.div_ceil(self.segment);
        if self.mode == SegmentMode::Strict && !self.series_len.is_multiple_of(self.segment) {
            return bad(format!(
                "series length {} is not a multiple of segment {}",
                self.series_len, self.segment
            ));
        }
        if temporal_tokens != self.tokens() {
            return bad(format!(
                "series gives {temporal_tokens} tokens but the image gives {}",
                self.tokens()
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("D = {} must be divisible by M = {}", self.dim, self.heads));
        }
        if self.codes < 2 {
            return bad("K must be at least 2".into());
        }
        Ok(())
    }

    pub fn visual_geometry(&self) -> TokenGeometry {
        TokenGeometry::Visual {
            height: self.image_height,
            width: self.image_width,
            patch: self.patch,
            channels: self.channels,
        }
    }

    pub fn temporal_geometry(&self) -> TokenGeometry {
        let padded = self.series_len.div_ceil(self.segment) * self.segment;
        TokenGeometry::Temporal {
            len: self.series_len,
            segment: self.segment,
            pad: padded - self.series_len,
        }
    }
}

/// Both autoencoders plus the shared codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerBundle {
    pub config: BundleConfig,
    pub visual: AutoencoderParams,
    pub temporal: AutoencoderParams,
    pub codebook: MultiHeadCodebook,
    pub frozen: bool,
}

impl TokenizerBundle {
    /// Freshly initialized autoencoders; the codebook starts at zero until
    /// [`init_codebooks`] seeds it from real embeddings.
    pub fn init(config: BundleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = AutoencoderParams::init(Modality::Visual, config.ae_shape(Modality::Visual), &mut rng);
        let temporal = AutoencoderParams::init(Modality::Temporal, config.ae_shape(Modality::Temporal), &mut rng);
        Ok(Self {
            config,
            visual,
            temporal,
            codebook: MultiHeadCodebook::zeros(config.heads, config.codes, config.dim / config.heads),
            frozen: false,
        })
    }

    /// Assemble a bundle from explicit parts, checking that shapes agree.
    pub fn from_parts(
        config: BundleConfig,
        visual: AutoencoderParams,
        temporal: AutoencoderParams,
        codebook: MultiHeadCodebook,
    ) -> Result<Self> {
        config.validate()?;
        for (ae, m) in [(&visual, Modality::Visual), (&temporal, Modality::Temporal)] {
            if ae.modality != m || ae.features() != config.features(m) || ae.dim() != config.dim {
                return Err(Error::ShapeMismatch(format!("{} autoencoder does not fit the config", m.name())));
            }
            if ae.mixing_tokens().is_some_and(|n| n != config.tokens()) {
                return Err(Error::ShapeMismatch(format!("{} mixing size differs from N", m.name())));
            }
        }
        if codebook.heads != config.heads || codebook.codes != config.codes || codebook.dim() != config.dim {
            return Err(Error::ShapeMismatch("codebook does not fit the config".into()));
        }
        Ok(Self {
            config,
            visual,
            temporal,
            codebook,
            frozen: false,
        })
    }

    pub fn autoencoder(&self, modality: Modality) -> &AutoencoderParams {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Temporal => &self.temporal,
        }
    }

    pub fn autoencoder_mut(&mut self, modality: Modality) -> &mut AutoencoderParams {
        match modality {
            Modality::Visual => &mut self.visual,
            Modality::Temporal => &mut self.temporal,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Instance-normalize and segment a series for the temporal encoder.
    pub fn tokenize_series(&self, x: &TimeSeries) -> Result<(TokenSequence, NormStats)> {
        let z = instance_normalize(x);
        let stats = z.norm_stats.expect("normalize records stats");
        Ok((self.segment_normalized(&z)?, stats))
    }

    /// Segment an already-normalized series, checking the token count.
    pub fn segment_normalized(&self, z: &TimeSeries) -> Result<TokenSequence> {
        let seq = segment_series(z, self.config.segment, self.config.mode)?;
        if seq.tokens.rows != self.config.tokens() {
            return Err(Error::GeometryMismatch(format!(
                "series of length {} gives {} tokens, bundle expects {}",
                z.len(),
                seq.tokens.rows,
                self.config.tokens()
            )));
        }
        Ok(seq)
    }

    pub fn tokenize_image(&self, img: &Image) -> Result<TokenSequence> {
        let c = &self.config;
        if img.height != c.image_height || img.width != c.image_width || img.channels != c.channels {
            return Err(Error::GeometryMismatch(format!(
                "image is {}x{}x{}, bundle expects {}x{}x{}",
                img.height, img.width, img.channels, c.image_height, c.image_width, c.channels
            )));
        }
        patchify_image(img, c.patch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub quant: f64,
    pub commit: f64,
    pub total: f64,
    pub modality: Modality,
}

/// Gradients for one modality's autoencoder and the shared codebook.
#[derive(Clone, Debug)]
pub struct BundleGrads {
    pub modality: Modality,
    pub autoencoder: AutoencoderParams,
    pub codebook: MultiHeadCodebook,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: LossBreakdown,
    pub grads: BundleGrads,
    /// Selected indices per batch item, in batch order.
    pub indices: Vec<IndexSequence>,
}

struct ItemOutput {
    recon: f64,
    residual: f64,
    autoencoder: AutoencoderParams,
    codebook: MultiHeadCodebook,
    indices: IndexSequence,
}

fn item_forward_backward(
    ae: &AutoencoderParams,
    book: &MultiHeadCodebook,
    x: &TokenSequence,
    recon_weight: f64,
    vq_weight: f64,
) -> Result<ItemOutput> {
    let (e, etrace) = encode_traced(ae, x)?;
    let qr = quantize(&e, book)?;
    let (out, dtrace) = decode_traced(ae, &qr.q.data)?;
    let diff = out.sub(&x.tokens);
    let recon = diff.squared_norm();

    let mut g_out = diff;
    g_out.scale(2.0 * recon_weight);
    let (g_dec, g_q) = decoder_backward(&ae.decoder, &dtrace, &g_out);
    // straight-through: dL/dq is handed to the encoder output unchanged
    let mut g_e = g_q;
    g_e.add_assign(&commit_loss_embedding_grad(&e, &qr, vq_weight));
    let g_enc = encoder_backward(&ae.encoder, &etrace, &g_e);

    let mut g_book = MultiHeadCodebook::zeros(book.heads, book.codes, book.sub_dim);
    quant_loss_code_grad(&e, &qr, vq_weight, &mut g_book);

    if !recon.is_finite() || !qr.residual_sq.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(ItemOutput {
        recon,
        residual: qr.residual_sq,
        autoencoder: AutoencoderParams {
            modality: ae.modality,
            encoder: g_enc,
            decoder: g_dec,
        },
        codebook: g_book,
        indices: qr.indices,
    })
}

/// Batch objective `recon + quant + commit` and its gradients. Each term is
/// a mean over the batch and over elements: `recon` averages
/// `(x - x_hat)^2` over `N x P` token values, `quant` and `commit` average
/// `(sg[e] - q)^2` and `(sg[q] - e)^2` over the `N x D` embedding entries.
pub fn compute_losses(batch: &[TokenSequence], bundle: &TokenizerBundle) -> Result<LossOutput> {
    compute_losses_with(Exec::default(), batch, bundle)
}

pub fn compute_losses_with(exec: Exec, batch: &[TokenSequence], bundle: &TokenizerBundle) -> Result<LossOutput> {
    let modality = batch.first().ok_or(Error::EmptyCorpus)?.origin();
    if batch.iter().any(|t| t.origin() != modality) {
        return Err(Error::MixedModalityBatch);
    }
    let ae = bundle.autoencoder(modality);
    let book = &bundle.codebook;
    let weight = 1.0 / batch.len() as f64;
    let n = batch[0].tokens.rows as f64;
    let recon_weight = weight / (n * ae.features() as f64);
    let vq_weight = weight / (n * ae.dim() as f64);
    let items = par::try_map(exec, batch, |x| item_forward_backward(ae, book, x, recon_weight, vq_weight))?;

    // fixed-order reduction
    let mut iter = items.into_iter();
    let first = iter.next().expect("nonempty batch");
    let (mut recon, mut residual) = (first.recon, first.residual);
    let mut g_ae = first.autoencoder;
    let mut g_book = first.codebook;
    let mut indices = vec![first.indices];
    for item in iter {
        recon += item.recon;
        residual += item.residual;
        g_ae.axpy(1.0, &item.autoencoder);
        for (g, v) in g_book.data.iter_mut().zip(&item.codebook.data) {
            *g += v;
        }
        indices.push(item.indices);
    }
    let recon = recon * recon_weight;
    let quant = residual * vq_weight;
    let commit = quant;
    Ok(LossOutput {
        loss: LossBreakdown {
            recon,
            quant,
            commit,
            total: recon + quant + commit,
            modality,
        },
        grads: BundleGrads {
            modality,
            autoencoder: g_ae,
            codebook: g_book,
        },
        indices,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Momentum(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 2000,
            batch_size: 16,
            seed: 42,
            optimizer: Optimizer::Momentum(0.9),
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be at least 1".into()));
        }
        if let Optimizer::Momentum(beta) = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("momentum {beta} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Mutable training state: the bundle plus optimizer buffers.
#[derive(Clone, Debug)]
pub struct WarmupState {
    pub bundle: TokenizerBundle,
    pub step: usize,
    velocity_visual: Option<AutoencoderParams>,
    velocity_temporal: Option<AutoencoderParams>,
    velocity_codes: Option<Vec<f64>>,
}

impl WarmupState {
    pub fn new(bundle: TokenizerBundle) -> Self {
        Self {
            bundle,
            step: 0,
            velocity_visual: None,
            velocity_temporal: None,
            velocity_codes: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub indices: Vec<IndexSequence>,
}

/// One optimizer update on a unimodal batch. Only that modality's
/// autoencoder and the shared codebook move.
pub fn warmup_step(batch: &[TokenSequence], state: &mut WarmupState, config: &WarmupConfig) -> Result<StepOutput> {
    warmup_step_with(Exec::default(), batch, state, config)
}

pub fn warmup_step_with(
    exec: Exec,
    batch: &[TokenSequence],
    state: &mut WarmupState,
    config: &WarmupConfig,
) -> Result<StepOutput> {
    if state.bundle.frozen {
        return Err(Error::FrozenBundle);
    }
    let out = compute_losses_with(exec, batch, &state.bundle)?;
    let lr = config.learning_rate;
    let modality = out.grads.modality;
    let LossOutput { loss, grads, indices } = out;
    let mut g_ae = grads.autoencoder;
    let mut g_codes = grads.codebook.data;

    if let Optimizer::Momentum(beta) = config.optimizer {
        let slot = match modality {
            Modality::Visual => &mut state.velocity_visual,
            Modality::Temporal => &mut state.velocity_temporal,
        };
        let v = slot.get_or_insert_with(|| g_ae.zeroed());
        v.scale_all(beta);
        v.axpy(1.0, &g_ae);
        g_ae = v.clone();
        let vc = state.velocity_codes.get_or_insert_with(|| vec![0.0; g_codes.len()]);
        for (v, g) in vc.iter_mut().zip(&g_codes) {
            *v = beta * *v + g;
        }
        g_codes = vc.clone();
    }

    state.bundle.autoencoder_mut(modality).axpy(-lr, &g_ae);
    for (c, g) in state.bundle.codebook.data.iter_mut().zip(&g_codes) {
        *c -= lr * g;
    }
    state.step += 1;
    Ok(StepOutput { loss, indices })
}

#[derive(Clone, Debug)]
pub struct WarmupOutcome {
    pub bundle: TokenizerBundle,
    pub log: Vec<LossBreakdown>,
    /// Per-head utilization over the final (up to) 100 steps.
    pub tail_utilization: Vec<f64>,
}

/// Steps whose indices feed [`WarmupOutcome::tail_utilization`].
pub const UTILIZATION_WINDOW: usize = 100;

/// Endless seeded shuffle over a corpus, reshuffling every epoch.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub(crate) fn new(len: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            cursor: len,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Embeddings used to seed the codebook: the first few samples of each
/// corpus pushed through the untrained encoders.
fn seed_embeddings(
    bundle: &TokenizerBundle,
    visual: &[TokenSequence],
    temporal: &[TokenSequence],
    count: usize,
) -> Result<Vec<EmbeddingGrid>> {
    let mut out = Vec::new();
    for i in 0..count {
        if let Some(v) = visual.get(i) {
            out.push(encode_traced(&bundle.visual, v)?.0);
        }
        if let Some(t) = temporal.get(i) {
            out.push(encode_traced(&bundle.temporal, t)?.0);
        }
    }
    Ok(out)
}

/// Alternate visual (even steps) and temporal (odd steps) batches, then
/// freeze. The result is a pure function of the inputs and configs.
pub fn run_warmup(
    series: &[TimeSeries],
    images: &[Image],
    bundle_config: BundleConfig,
    config: &WarmupConfig,
) -> Result<WarmupOutcome> {
    run_warmup_with(Exec::default(), series, images, bundle_config, config)
}

pub fn run_warmup_with(
    exec: Exec,
    series: &[TimeSeries],
    images: &[Image],
    bundle_config: BundleConfig,
    config: &WarmupConfig,
) -> Result<WarmupOutcome> {
    if series.is_empty() || images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.validate()?;
    let mut bundle = TokenizerBundle::init(bundle_config, config.seed)?;
    let temporal: Vec<TokenSequence> = series
        .iter()
        .map(|x| bundle.tokenize_series(x).map(|(t, _)| t))
        .collect::<Result<_>>()?;
    let visual: Vec<TokenSequence> = images.iter().map(|i| bundle.tokenize_image(i)).collect::<Result<_>>()?;

    let sample = seed_embeddings(&bundle, &visual, &temporal, 32)?;
    bundle.codebook = init_codebooks(&sample, bundle_config.heads, bundle_config.codes, config.seed ^ 0xC0DE)?;

    let mut samplers = [
        EpochSampler::new(visual.len(), ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1))),
        EpochSampler::new(temporal.len(), ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2))),
    ];
    let mut state = WarmupState::new(bundle);
    let mut log = Vec::with_capacity(config.steps);
    let mut tail: Vec<IndexSequence> = Vec::new();
    for step in 0..config.steps {
        let (corpus, sampler) = if step % 2 == 0 {
            (&visual, &mut samplers[0])
        } else {
            (&temporal, &mut samplers[1])
        };
        let batch: Vec<TokenSequence> = sampler
            .next_batch(config.batch_size)
            .into_iter()
            .map(|i| corpus[i].clone())
            .collect();
        let out = warmup_step_with(exec, &batch, &mut state, config)?;
        if !out.loss.total.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        log.push(out.loss);
        if step + UTILIZATION_WINDOW >= config.steps {
            tail.extend(out.indices);
        }
    }
    let mut bundle = state.bundle;
    bundle.freeze();
    let tail_utilization = utilization(&tail, &bundle.codebook)?;
    Ok(WarmupOutcome {
        bundle,
        log,
        tail_utilization,
    })
}
