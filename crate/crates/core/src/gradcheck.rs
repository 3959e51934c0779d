//! Central-difference gradient checking.

use crate::autoencoder::{decode_traced, encode_traced, ParamSet};
use crate::error::{Error, Result};
use crate::quantizer::{lookup, quantize, IndexSequence};
use crate::tensor::Matrix;
use crate::tokenize::TokenSequence;
use crate::training::{compute_losses, TokenizerBundle};

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
///
/// `f` returns the loss and its analytic gradient at a parameter vector.
pub fn gradient_check<F>(f: F, theta: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, analytic) = f(theta)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    compare_numeric(|t| f(t).map(|(l, _)| l), &analytic, theta, step)
}

/// Compares `analytic` with central differences of `loss` around `theta`.
pub fn compare_numeric<F>(loss: F, analytic: &[f64], theta: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss);
    }
    if analytic.len() != theta.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let up = loss(&probe)?;
        probe[i] = theta[i] - step;
        let down = loss(&probe)?;
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Stop-gradient operands of the warmup objective, frozen at a base point.
#[derive(Clone, Debug)]
pub struct FrozenPoint {
    pub embeddings: Vec<Matrix>,
    pub quantized: Vec<Matrix>,
    pub indices: Vec<IndexSequence>,
}

impl FrozenPoint {
    pub fn capture(bundle: &TokenizerBundle, batch: &[TokenSequence]) -> Result<Self> {
        let modality = batch.first().ok_or(Error::EmptyCorpus)?.origin();
        let ae = bundle.autoencoder(modality);
        let mut out = Self {
            embeddings: Vec::new(),
            quantized: Vec::new(),
            indices: Vec::new(),
        };
        for x in batch {
            let (e, _) = encode_traced(ae, x)?;
            let qr = quantize(&e, &bundle.codebook)?;
            out.embeddings.push(e.data);
            out.quantized.push(qr.q.data);
            out.indices.push(qr.indices);
        }
        Ok(out)
    }
}

/// Flat parameters seen by the objective check: the batch modality's
/// autoencoder followed by the codebook.
pub fn objective_params(bundle: &TokenizerBundle, batch: &[TokenSequence]) -> Result<Vec<f64>> {
    let modality = batch.first().ok_or(Error::EmptyCorpus)?.origin();
    let mut theta = bundle.autoencoder(modality).flatten();
    theta.extend_from_slice(&bundle.codebook.data);
    Ok(theta)
}

/// Warmup objective with `sg[.]` operands and indices taken from `frozen`.
///
/// The decoder reads `e + (q0 - e0)`, so the value matches the true loss at
/// the base point and its exact gradient is the straight-through gradient.
pub fn surrogate_loss(
    bundle: &TokenizerBundle,
    batch: &[TokenSequence],
    frozen: &FrozenPoint,
    theta: &[f64],
) -> Result<f64> {
    let modality = batch.first().ok_or(Error::EmptyCorpus)?.origin();
    let mut ae = bundle.autoencoder(modality).clone();
    let na = ae.param_count();
    ae.load_flat(&theta[..na]);
    let mut book = bundle.codebook.clone();
    book.data.copy_from_slice(&theta[na..]);

    let (mut recon, mut quant, mut commit) = (0.0, 0.0, 0.0);
    for (i, x) in batch.iter().enumerate() {
        let (e, _) = encode_traced(&ae, x)?;
        let q = lookup(&frozen.indices[i], &book)?;
        let mut dec_in = e.data.clone();
        dec_in.add_assign(&frozen.quantized[i].sub(&frozen.embeddings[i]));
        let (out, _) = decode_traced(&ae, &dec_in)?;
        recon += out.sub(&x.tokens).squared_norm();
        quant += frozen.embeddings[i].sub(&q).squared_norm();
        commit += frozen.quantized[i].sub(&e.data).squared_norm();
    }
    let b = batch.len() as f64;
    let n = batch[0].tokens.rows as f64;
    let recon_w = 1.0 / (b * n * ae.features() as f64);
    let vq_w = 1.0 / (b * n * ae.dim() as f64);
    Ok(recon * recon_w + (quant + commit) * vq_w)
}

/// Worst relative error between the analytic gradient of the batch
/// objective (autoencoder and codebook) and central differences of the
/// stop-gradient surrogate.
pub fn objective_check(bundle: &TokenizerBundle, batch: &[TokenSequence], step: f64) -> Result<f64> {
    let out = compute_losses(batch, bundle)?;
    let mut analytic = out.grads.autoencoder.flatten();
    analytic.extend_from_slice(&out.grads.codebook.data);
    let theta = objective_params(bundle, batch)?;
    let frozen = FrozenPoint::capture(bundle, batch)?;
    compare_numeric(|t| surrogate_loss(bundle, batch, &frozen, t), &analytic, &theta, step)
}
