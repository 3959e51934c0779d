//! Per-modality encoder/decoder stacks with analytic gradients.
//!
//! Encoder: a per-token affine embedding `P -> D` followed by `depth` residual
//! blocks. Each block computes `h' = h + A tanh(h W + b)` where `A` is an
//! `N x N` token-mixing matrix. The decoder mirrors it: `depth` blocks on the
//! quantized grid followed by an affine `D -> P` readout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::tokenize::{Modality, TokenGeometry, TokenSequence};

/// Continuous `N x D` latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrid {
    pub data: Matrix,
    pub modality: Modality,
}

impl EmbeddingGrid {
    pub fn tokens(&self) -> usize {
        self.data.rows
    }

    pub fn dim(&self) -> usize {
        self.data.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AeShape {
    /// Token count `N`.
    pub tokens: usize,
    /// Raw features per token `P`.
    pub features: usize,
    /// Embedding width `D`.
    pub dim: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub mix: Matrix,
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub embed_w: Matrix,
    pub embed_b: Matrix,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub blocks: Vec<Block>,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderParams {
    pub modality: Modality,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Named parameter tensors in a fixed order. Flattening, optimizer updates
/// and persistence all walk this order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, m) in self.tensors() {
            out.extend_from_slice(&m.data);
        }
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.data.len();
            m.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length");
    }

    /// `self += alpha * other`, tensor by tensor.
    fn axpy(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, m)| m.data.clone()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.data.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    fn scale_all(&mut self, s: f64) {
        for m in self.tensors_mut() {
            m.scale(s);
        }
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.scale_all(0.0);
        z
    }
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-s..=s)).collect(),
    }
}

impl Block {
    fn init(shape: &AeShape, rng: &mut impl Rng) -> Self {
        Self {
            mix: uniform(shape.tokens, shape.tokens, shape.tokens, rng),
            weight: uniform(shape.dim, shape.dim, shape.dim, rng),
            bias: uniform(1, shape.dim, shape.dim, rng),
        }
    }
}

impl AutoencoderParams {
    /// Uniform `[-s, s]` initialization with `s = 1/sqrt(fan_in)`.
    pub fn init(modality: Modality, shape: AeShape, rng: &mut impl Rng) -> Self {
        let encoder = Encoder {
            embed_w: uniform(shape.features, shape.dim, shape.features, rng),
            embed_b: uniform(1, shape.dim, shape.features, rng),
            blocks: (0..shape.depth).map(|_| Block::init(&shape, rng)).collect(),
        };
        let decoder = Decoder {
            blocks: (0..shape.depth).map(|_| Block::init(&shape, rng)).collect(),
            out_w: uniform(shape.dim, shape.features, shape.dim, rng),
            out_b: uniform(1, shape.features, shape.dim, rng),
        };
        Self {
            modality,
            encoder,
            decoder,
        }
    }

    /// Depth-0 autoencoder whose encoder is `x * scale + shift` per feature
    /// and whose decoder inverts it (`D = P`).
    pub fn affine(modality: Modality, features: usize, scale: f64, shift: f64) -> Self {
        let mut embed_w = Matrix::identity(features);
        embed_w.scale(scale);
        let mut out_w = Matrix::identity(features);
        out_w.scale(1.0 / scale);
        Self {
            modality,
            encoder: Encoder {
                embed_w,
                embed_b: Matrix::filled(1, features, shift),
                blocks: Vec::new(),
            },
            decoder: Decoder {
                blocks: Vec::new(),
                out_w,
                out_b: Matrix::filled(1, features, -shift / scale),
            },
        }
    }

    pub fn identity(modality: Modality, features: usize) -> Self {
        Self::affine(modality, features, 1.0, 0.0)
    }

    pub fn shape(&self, tokens: usize) -> AeShape {
        AeShape {
            tokens,
            features: self.encoder.embed_w.rows,
            dim: self.encoder.embed_w.cols,
            depth: self.encoder.blocks.len(),
        }
    }

    pub fn features(&self) -> usize {
        self.encoder.embed_w.rows
    }

    pub fn dim(&self) -> usize {
        self.encoder.embed_w.cols
    }

    /// Token count fixed by the mixing matrices, if any block exists.
    pub fn mixing_tokens(&self) -> Option<usize> {
        self.encoder
            .blocks
            .first()
            .or(self.decoder.blocks.first())
            .map(|b| b.mix.rows)
    }
}

fn block_tensors<'a>(prefix: &str, blocks: &'a [Block], out: &mut Vec<(String, &'a Matrix)>) {
    for (i, b) in blocks.iter().enumerate() {
        out.push((format!("{prefix}.block{i}.mix"), &b.mix));
        out.push((format!("{prefix}.block{i}.weight"), &b.weight));
        out.push((format!("{prefix}.block{i}.bias"), &b.bias));
    }
}

fn block_tensors_mut<'a>(blocks: &'a mut [Block], out: &mut Vec<&'a mut Matrix>) {
    for b in blocks.iter_mut() {
        out.push(&mut b.mix);
        out.push(&mut b.weight);
        out.push(&mut b.bias);
    }
}

impl ParamSet for Encoder {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("encoder.embed_w".to_string(), &self.embed_w),
            ("encoder.embed_b".to_string(), &self.embed_b),
        ];
        block_tensors("encoder", &self.blocks, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        block_tensors_mut(&mut self.blocks, &mut out);
        out
    }
}

impl ParamSet for Decoder {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        block_tensors("decoder", &self.blocks, &mut out);
        out.push(("decoder.out_w".to_string(), &self.out_w));
        out.push(("decoder.out_b".to_string(), &self.out_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        block_tensors_mut(&mut self.blocks, &mut out);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }
}

impl ParamSet for AutoencoderParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.tensors();
        out.extend(self.decoder.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.decoder.tensors_mut());
        out
    }
}

/// Activations kept from a forward pass through a block stack.
#[derive(Clone, Debug)]
pub struct StackTrace {
    /// Block inputs `h_0 .. h_{depth-1}` followed by the final output.
    pub hidden: Vec<Matrix>,
    /// `tanh` outputs per block.
    pub acts: Vec<Matrix>,
}

fn stack_forward(blocks: &[Block], h0: Matrix) -> StackTrace {
    let mut hidden = Vec::with_capacity(blocks.len() + 1);
    let mut acts = Vec::with_capacity(blocks.len());
    let mut h = h0;
    for b in blocks {
        let mut z = h.matmul(&b.weight);
        z.add_row_vector(&b.bias);
        let a = z.map(f64::tanh);
        let mut next = b.mix.matmul(&a);
        next.add_assign(&h);
        hidden.push(h);
        acts.push(a);
        h = next;
    }
    hidden.push(h);
    StackTrace { hidden, acts }
}

/// Returns the gradient w.r.t. the stack input; block gradients go to `grads`.
fn stack_backward(blocks: &[Block], trace: &StackTrace, grad_out: Matrix, grads: &mut [Block]) -> Matrix {
    let mut g = grad_out;
    for (i, b) in blocks.iter().enumerate().rev() {
        let a = &trace.acts[i];
        let h = &trace.hidden[i];
        grads[i].mix = g.matmul_t(a);
        let ga = b.mix.t_matmul(&g);
        let mut gz = ga;
        for (v, av) in gz.data.iter_mut().zip(&a.data) {
            *v *= 1.0 - av * av;
        }
        grads[i].weight = h.t_matmul(&gz);
        grads[i].bias = gz.col_sums();
        let gh = gz.matmul_t(&b.weight);
        g.add_assign(&gh);
    }
    g
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub input: Matrix,
    pub stack: StackTrace,
}

#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub input: Matrix,
    pub stack: StackTrace,
}

fn check_tokens(params: &AutoencoderParams, tokens: &TokenSequence) -> Result<()> {
    if tokens.origin() != params.modality {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens fed to the {} encoder",
            tokens.origin().name(),
            params.modality.name()
        )));
    }
    check_grid(params, tokens.tokens.rows, tokens.tokens.cols, params.features())
}

fn check_grid(params: &AutoencoderParams, rows: usize, cols: usize, expect_cols: usize) -> Result<()> {
    if cols != expect_cols {
        return Err(Error::ShapeMismatch(format!(
            "expected {expect_cols} features per token, got {cols}"
        )));
    }
    if let Some(n) = params.mixing_tokens() {
        if n != rows {
            return Err(Error::ShapeMismatch(format!("expected {n} tokens, got {rows}")));
        }
    }
    Ok(())
}

pub fn encode_traced(params: &AutoencoderParams, tokens: &TokenSequence) -> Result<(EmbeddingGrid, EncoderTrace)> {
    check_tokens(params, tokens)?;
    let enc = &params.encoder;
    let mut h0 = tokens.tokens.matmul(&enc.embed_w);
    h0.add_row_vector(&enc.embed_b);
    let stack = stack_forward(&enc.blocks, h0);
    let out = stack.hidden.last().cloned().expect("stack output");
    Ok((
        EmbeddingGrid {
            data: out,
            modality: params.modality,
        },
        EncoderTrace {
            input: tokens.tokens.clone(),
            stack,
        },
    ))
}

pub fn encode(modality: Modality, tokens: &TokenSequence, params: &AutoencoderParams) -> Result<EmbeddingGrid> {
    if modality != params.modality {
        return Err(Error::ShapeMismatch("encoder modality mismatch".into()));
    }
    encode_traced(params, tokens).map(|(e, _)| e)
}

pub fn decode_traced(params: &AutoencoderParams, q: &Matrix) -> Result<(Matrix, DecoderTrace)> {
    check_grid(params, q.rows, q.cols, params.dim())?;
    let dec = &params.decoder;
    let stack = stack_forward(&dec.blocks, q.clone());
    let mut out = stack.hidden.last().expect("stack output").matmul(&dec.out_w);
    out.add_row_vector(&dec.out_b);
    Ok((
        out,
        DecoderTrace {
            input: q.clone(),
            stack,
        },
    ))
}

/// Decode a quantized grid into raw token values (unclamped).
pub fn decode(
    modality: Modality,
    q: &EmbeddingGrid,
    params: &AutoencoderParams,
    geometry: TokenGeometry,
) -> Result<TokenSequence> {
    if modality != params.modality || geometry.modality() != modality {
        return Err(Error::ShapeMismatch("decoder modality mismatch".into()));
    }
    let (tokens, _) = decode_traced(params, &q.data)?;
    Ok(TokenSequence { tokens, geometry })
}

/// Parameter gradients of the encoder given `dL/de`.
pub fn encoder_backward(enc: &Encoder, trace: &EncoderTrace, grad_e: &Matrix) -> Encoder {
    let mut grads = enc.zeroed();
    let g0 = stack_backward(&enc.blocks, &trace.stack, grad_e.clone(), &mut grads.blocks);
    grads.embed_w = trace.input.t_matmul(&g0);
    grads.embed_b = g0.col_sums();
    grads
}

/// Parameter gradients of the decoder and `dL/dq` given `dL/d(output)`.
pub fn decoder_backward(dec: &Decoder, trace: &DecoderTrace, grad_out: &Matrix) -> (Decoder, Matrix) {
    let mut grads = dec.zeroed();
    let top = trace.stack.hidden.last().expect("stack output");
    grads.out_w = top.t_matmul(grad_out);
    grads.out_b = grad_out.col_sums();
    let g_top = grad_out.matmul_t(&dec.out_w);
    let gq = stack_backward(&dec.blocks, &trace.stack, g_top, &mut grads.blocks);
    (grads, gq)
}
