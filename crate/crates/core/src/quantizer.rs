//! Shared multi-head vector quantizer.
//!
//! A `D`-wide embedding is split into `M` sub-vectors of width `D/M`; head
//! `m` snaps its sub-vector to the nearest of its own `K` codes and the
//! selected codes are concatenated back into a `D`-wide vector. The joint
//! space therefore holds up to `K^M` distinct vectors per token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::EmbeddingGrid;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadCodebook {
    pub heads: usize,
    pub codes: usize,
    pub sub_dim: usize,
    /// `heads x codes x sub_dim`, contiguous.
    pub data: Vec<f64>,
}

impl MultiHeadCodebook {
    pub fn new(heads: usize, codes: usize, sub_dim: usize, data: Vec<f64>) -> Result<Self> {
        if heads == 0 || codes < 2 || sub_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs M >= 1, K >= 2, D/M >= 1 (got {heads}, {codes}, {sub_dim})"
            )));
        }
        if data.len() != heads * codes * sub_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {heads}x{codes}x{sub_dim} codebook",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("codebook entries must be finite".into()));
        }
        Ok(Self {
            heads,
            codes,
            sub_dim,
            data,
        })
    }

    pub fn zeros(heads: usize, codes: usize, sub_dim: usize) -> Self {
        Self {
            heads,
            codes,
            sub_dim,
            data: vec![0.0; heads * codes * sub_dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.heads * self.sub_dim
    }

    #[inline]
    pub fn code(&self, head: usize, k: usize) -> &[f64] {
        let start = (head * self.codes + k) * self.sub_dim;
        &self.data[start..start + self.sub_dim]
    }

    #[inline]
    pub fn code_mut(&mut self, head: usize, k: usize) -> &mut [f64] {
        let start = (head * self.codes + k) * self.sub_dim;
        &mut self.data[start..start + self.sub_dim]
    }

    /// Nearest code of `head` to `v`; ties go to the smallest index.
    pub fn nearest(&self, head: usize, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.codes {
            let d: f64 = self
                .code(head, k)
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }
}

/// `N x M` grid of selected code indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexSequence {
    pub tokens: usize,
    pub heads: usize,
    /// Row-major: token `i`, head `m` at `i * heads + m`.
    pub indices: Vec<usize>,
}

impl IndexSequence {
    pub fn new(tokens: usize, heads: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != tokens * heads {
            return Err(Error::ShapeMismatch(format!(
                "{} indices for a {tokens}x{heads} grid",
                indices.len()
            )));
        }
        Ok(Self {
            tokens,
            heads,
            indices,
        })
    }

    pub fn filled(tokens: usize, heads: usize, k: usize) -> Self {
        Self {
            tokens,
            heads,
            indices: vec![k; tokens * heads],
        }
    }

    #[inline]
    pub fn get(&self, token: usize, head: usize) -> usize {
        self.indices[token * self.heads + head]
    }

    pub fn check_bounds(&self, codes: usize) -> Result<()> {
        match self.indices.iter().find(|&&k| k >= codes) {
            Some(&index) => Err(Error::IndexOutOfRange { index, codes }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    pub q: EmbeddingGrid,
    pub indices: IndexSequence,
    /// `sum ||e - q||^2` over the grid.
    pub residual_sq: f64,
}

fn check_dim(e: &EmbeddingGrid, book: &MultiHeadCodebook) -> Result<()> {
    if e.dim() != book.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding width {} but codebook covers {} x {}",
            e.dim(),
            book.heads,
            book.sub_dim
        )));
    }
    Ok(())
}

pub fn quantize(e: &EmbeddingGrid, book: &MultiHeadCodebook) -> Result<QuantizeResult> {
    quantize_with(Exec::default(), e, book)
}

/// [`quantize`] with an explicit execution strategy (tokens are independent).
pub fn quantize_with(exec: Exec, e: &EmbeddingGrid, book: &MultiHeadCodebook) -> Result<QuantizeResult> {
    check_dim(e, book)?;
    let per_token = par::map_range(exec, e.tokens(), |i| {
        let row = e.data.row(i);
        (0..book.heads)
            .map(|m| book.nearest(m, &row[m * book.sub_dim..(m + 1) * book.sub_dim]).0)
            .collect::<Vec<_>>()
    });
    let indices = IndexSequence {
        tokens: e.tokens(),
        heads: book.heads,
        indices: per_token.into_iter().flatten().collect(),
    };
    let q = lookup(&indices, book)?;
    let residual_sq = e.data.sub(&q).squared_norm();
    Ok(QuantizeResult {
        q: EmbeddingGrid {
            data: q,
            modality: e.modality,
        },
        indices,
        residual_sq,
    })
}

/// Concatenate the codes named by `indices` into an `N x D` grid.
pub fn lookup(indices: &IndexSequence, book: &MultiHeadCodebook) -> Result<Matrix> {
    if indices.heads != book.heads {
        return Err(Error::ShapeMismatch(format!(
            "{} index heads for a {}-head codebook",
            indices.heads, book.heads
        )));
    }
    indices.check_bounds(book.codes)?;
    let mut out = Matrix::zeros(indices.tokens, book.dim());
    for i in 0..indices.tokens {
        let row = out.row_mut(i);
        for m in 0..book.heads {
            row[m * book.sub_dim..(m + 1) * book.sub_dim].copy_from_slice(book.code(m, indices.get(i, m)));
        }
    }
    Ok(out)
}

/// `(||sg[e] - q||^2, ||sg[q] - e||^2)`; equal in value, they differ only in
/// which side receives gradient (see [`quant_loss_code_grad`] and
/// [`commit_loss_embedding_grad`]).
pub fn codebook_losses(e: &EmbeddingGrid, result: &QuantizeResult) -> Result<(f64, f64)> {
    if e.data.shape() != result.q.data.shape() {
        return Err(Error::ShapeMismatch("embedding and quantized grid differ".into()));
    }
    let r = e.data.sub(&result.q.data).squared_norm();
    Ok((r, r))
}

/// Gradient of the quantization loss w.r.t. the codebook, scaled by `weight`
/// and accumulated into `grad`. The embedding side is stopped.
pub fn quant_loss_code_grad(
    e: &EmbeddingGrid,
    result: &QuantizeResult,
    weight: f64,
    grad: &mut MultiHeadCodebook,
) {
    let s = grad.sub_dim;
    for i in 0..e.tokens() {
        let row = e.data.row(i);
        let qrow = result.q.data.row(i);
        for m in 0..grad.heads {
            let k = result.indices.get(i, m);
            let g = grad.code_mut(m, k);
            for d in 0..s {
                g[d] += weight * 2.0 * (qrow[m * s + d] - row[m * s + d]);
            }
        }
    }
}

/// Gradient of the commitment loss w.r.t. the embedding; the codes are stopped.
pub fn commit_loss_embedding_grad(e: &EmbeddingGrid, result: &QuantizeResult, weight: f64) -> Matrix {
    let mut g = e.data.sub(&result.q.data);
    g.scale(2.0 * weight);
    g
}

/// Per-head fraction of codes selected at least once across `history`.
pub fn utilization(history: &[IndexSequence], book: &MultiHeadCodebook) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut seen = vec![false; book.heads * book.codes];
    for seq in history {
        if seq.heads != book.heads {
            return Err(Error::ShapeMismatch("index heads differ from codebook".into()));
        }
        seq.check_bounds(book.codes)?;
        for i in 0..seq.tokens {
            for m in 0..seq.heads {
                seen[m * book.codes + seq.get(i, m)] = true;
            }
        }
    }
    Ok((0..book.heads)
        .map(|m| {
            let used = seen[m * book.codes..(m + 1) * book.codes].iter().filter(|&&s| s).count();
            used as f64 / book.codes as f64
        })
        .collect())
}

/// k-means++ seeding per head over the matching sub-vectors of every token in
/// `sample`, without Lloyd refinement.
pub fn init_codebooks(sample: &[EmbeddingGrid], heads: usize, codes: usize, seed: u64) -> Result<MultiHeadCodebook> {
    let dim = sample
        .first()
        .map(|e| e.dim())
        .ok_or(Error::InsufficientSamples { needed: codes, found: 0 })?;
    if heads == 0 || dim % heads != 0 {
        return Err(Error::ShapeMismatch(format!("width {dim} is not divisible by {heads} heads")));
    }
    if sample.iter().any(|e| e.dim() != dim) {
        return Err(Error::ShapeMismatch("sample grids differ in width".into()));
    }
    let sub_dim = dim / heads;
    let mut book = MultiHeadCodebook::new(heads, codes, sub_dim, vec![0.0; heads * codes * sub_dim])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for m in 0..heads {
        let points: Vec<&[f64]> = sample
            .iter()
            .flat_map(|e| (0..e.tokens()).map(move |i| &e.data.row(i)[m * sub_dim..(m + 1) * sub_dim]))
            .collect();
        let mut distinct: Vec<&[f64]> = Vec::new();
        for p in &points {
            if !distinct.iter().any(|d| d == p) {
                distinct.push(p);
                if distinct.len() >= codes {
                    break;
                }
            }
        }
        if distinct.len() < codes {
            return Err(Error::InsufficientSamples {
                needed: codes,
                found: distinct.len(),
            });
        }

        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let first = rng.gen_range(0..points.len());
        book.code_mut(m, 0).copy_from_slice(points[first]);
        let mut d2: Vec<f64> = points.iter().map(|p| sq(p, points[first])).collect();
        for k in 1..codes {
            // distinct points guarantee an unchosen point with positive weight
            let total: f64 = d2.iter().sum();
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (j, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(j);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can exhaust `target`; fall back to the last candidate
            let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive weight"));
            book.code_mut(m, k).copy_from_slice(points[pick]);
            for (j, p) in points.iter().enumerate() {
                d2[j] = d2[j].min(sq(p, points[pick]));
            }
        }
    }
    Ok(book)
}
