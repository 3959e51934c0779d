//! Class-level pairing: per-class index histograms, Jensen-Shannon costs,
//! an exact assignment solver, paired-dataset construction, and a
//! nearest-centroid image classifier.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{align_predict, extract_indices, AlignmentModel, Direction, PairedSample, Provenance, Sample};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::quantizer::{lookup, IndexSequence};
use crate::tensor::Matrix;
use crate::tokenize::{unpatchify_image, Image, TimeSeries, TokenSequence};
use crate::training::TokenizerBundle;

/// Per-head code counts and their row-normalized frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexHistogram {
    pub heads: usize,
    pub codes: usize,
    /// `M x K`, row-major.
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
    /// Observations per head.
    pub total: u64,
}

impl IndexHistogram {
    pub fn from_counts(heads: usize, codes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != heads * codes || heads == 0 {
            return Err(Error::ShapeMismatch(format!("{} counts for {heads}x{codes}", counts.len())));
        }
        let total: u64 = counts[..codes].iter().sum();
        if total == 0 || (1..heads).any(|m| counts[m * codes..(m + 1) * codes].iter().sum::<u64>() != total) {
            return Err(Error::InvalidArgument("every head needs the same positive total".into()));
        }
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self {
            heads,
            codes,
            counts,
            probs,
            total,
        })
    }

    pub fn head(&self, m: usize) -> &[f64] {
        &self.probs[m * self.codes..(m + 1) * self.codes]
    }
}

/// Histogram of already-extracted index grids.
pub fn histogram_of(samples: &[IndexSequence], codes: usize) -> Result<IndexHistogram> {
    let first = samples.first().ok_or(Error::EmptySubset)?;
    let heads = first.heads;
    let mut counts = vec![0u64; heads * codes];
    for s in samples {
        if s.heads != heads {
            return Err(Error::ShapeMismatch("index grids differ in head count".into()));
        }
        s.check_bounds(codes)?;
        for i in 0..s.tokens {
            for m in 0..heads {
                counts[m * codes + s.get(i, m)] += 1;
            }
        }
    }
    IndexHistogram::from_counts(heads, codes, counts)
}

/// Histogram of the indices a frozen bundle assigns to a class subset.
pub fn index_histogram(subset: &[Sample<'_>], bundle: &TokenizerBundle) -> Result<IndexHistogram> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let indices: Vec<IndexSequence> = subset.iter().map(|&s| extract_indices(s, bundle)).collect::<Result<_>>()?;
    histogram_of(&indices, bundle.config.codes)
}

fn kl_to_mixture(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / (0.5 * (a + b))).ln())
        .sum()
}

/// Jensen-Shannon divergence of two distributions, natural log.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    0.5 * kl_to_mixture(p, q) + 0.5 * kl_to_mixture(q, p)
}

/// Mean over heads of the per-head Jensen-Shannon divergence.
pub fn js_divergence(p: &IndexHistogram, q: &IndexHistogram) -> Result<f64> {
    if p.heads != q.heads || p.codes != q.codes {
        return Err(Error::ShapeMismatch(format!(
            "histograms {}x{} and {}x{}",
            p.heads, p.codes, q.heads, q.codes
        )));
    }
    Ok((0..p.heads).map(|m| jsd(p.head(m), q.head(m))).sum::<f64>() / p.heads as f64)
}

/// `C[m][n] = js_divergence(temporal[m], visual[n])`.
pub fn cost_matrix(temporal: &[IndexHistogram], visual: &[IndexHistogram]) -> Result<Matrix> {
    cost_matrix_with(Exec::default(), temporal, visual)
}

pub fn cost_matrix_with(exec: Exec, temporal: &[IndexHistogram], visual: &[IndexHistogram]) -> Result<Matrix> {
    let cols = visual.len();
    let entries = par::try_map_range(exec, temporal.len() * cols, |i| {
        js_divergence(&temporal[i / cols], &visual[i % cols])
    })?;
    Matrix::from_vec(temporal.len(), cols, entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `mapping[m]` is the visual class paired with temporal class `m`.
    pub mapping: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost injective row-to-column matching on rows `rows` and
/// columns `cols` (shortest augmenting paths with potentials).
fn min_cost_matching(c: &Matrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: 1-based row matched to column j
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c.get(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn mapping_cost(c: &Matrix, mapping: &[usize]) -> f64 {
    mapping.iter().enumerate().map(|(r, &j)| c.get(r, j)).sum()
}

/// Optimal injective assignment of rows to columns. Among optimal
/// mappings the lexicographically smallest is returned.
pub fn hungarian_assign(c: &Matrix) -> Result<Assignment> {
    let (n, m) = c.shape();
    if n > m {
        return Err(Error::InfeasibleShape { rows: n, cols: m });
    }
    if !c.is_finite() {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            mapping: Vec::new(),
            cost: 0.0,
        });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = mapping_cost(c, &min_cost_matching(c, &all_rows, &all_cols));
    let tol = 1e-12 * (1.0 + best.abs());

    // fix rows in order, each to the smallest column that keeps optimality
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        let rest_rows: Vec<usize> = (r + 1..n).collect();
        let mut chosen = None;
        for j in (0..m).filter(|j| !fixed.contains(j)) {
            let rest_cols: Vec<usize> = (0..m).filter(|k| *k != j && !fixed.contains(k)).collect();
            let tail = if rest_rows.is_empty() {
                Vec::new()
            } else {
                min_cost_matching(c, &rest_rows, &rest_cols)
            };
            let mut candidate = fixed.clone();
            candidate.push(j);
            candidate.extend(tail);
            if mapping_cost(c, &candidate) <= best + tol {
                chosen = Some(j);
                break;
            }
        }
        fixed.push(chosen.expect("some column extends an optimal mapping"));
    }
    Ok(Assignment {
        cost: mapping_cost(c, &fixed),
        mapping: fixed,
    })
}

/// Pair the samples of every matched class pair. The smaller side is first
/// covered once in shuffled order, then topped up by uniform draws with
/// replacement, so every sample of the larger side appears exactly once.
pub fn build_paired_dataset(
    temporal: &[Vec<IndexSequence>],
    visual: &[Vec<IndexSequence>],
    assignment: &Assignment,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    if assignment.mapping.len() != temporal.len() {
        return Err(Error::InvalidArgument(format!(
            "assignment covers {} classes, {} temporal subsets given",
            assignment.mapping.len(),
            temporal.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (tc, &vc) in assignment.mapping.iter().enumerate() {
        let ts = &temporal[tc];
        let vs = visual
            .get(vc)
            .ok_or_else(|| Error::InvalidArgument(format!("visual class {vc} missing")))?;
        if ts.is_empty() || vs.is_empty() {
            return Err(Error::EmptySubset);
        }
        let (large, small) = (ts.len().max(vs.len()), ts.len().min(vs.len()));
        let mut picks: Vec<usize> = (0..small).collect();
        picks.shuffle(&mut rng);
        picks.extend((small..large).map(|_| rng.gen_range(0..small)));
        let provenance = Provenance::ClassAssigned {
            temporal_class: tc,
            visual_class: vc,
        };
        for (i, &j) in picks.iter().enumerate() {
            let (t, v) = if ts.len() >= vs.len() { (&ts[i], &vs[j]) } else { (&ts[j], &vs[i]) };
            out.push(PairedSample::new(t.clone(), v.clone(), provenance)?);
        }
    }
    Ok(out)
}

/// A frozen image classifier.
pub trait ImageClassifier {
    fn classify(&self, img: &Image) -> Result<usize>;
}

/// Nearest class centroid by mean squared pixel distance; ties go to the
/// smallest class id.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidClassifier {
    pub centroids: Vec<Image>,
}

impl CentroidClassifier {
    pub fn new(references: &[Vec<Image>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::NoReferences(0));
        }
        let mut centroids = Vec::with_capacity(references.len());
        for (class, refs) in references.iter().enumerate() {
            let first = refs.first().ok_or(Error::NoReferences(class))?;
            let mut sum = vec![0.0; first.pixels.len()];
            for img in refs {
                if (img.height, img.width, img.channels) != (first.height, first.width, first.channels) {
                    return Err(Error::GeometryMismatch(format!("class {class} references differ in shape")));
                }
                for (s, p) in sum.iter_mut().zip(&img.pixels) {
                    *s += p;
                }
            }
            let n = refs.len() as f64;
            centroids.push(Image::new(
                first.height,
                first.width,
                first.channels,
                sum.into_iter().map(|s| (s / n).clamp(0.0, 1.0)).collect(),
            )?);
        }
        Ok(Self { centroids })
    }
}

impl ImageClassifier for CentroidClassifier {
    fn classify(&self, img: &Image) -> Result<usize> {
        let mut best = (0, f64::INFINITY);
        for (class, c) in self.centroids.iter().enumerate() {
            if c.pixels.len() != img.pixels.len() {
                return Err(Error::GeometryMismatch("image and centroid sizes differ".into()));
            }
            let d = c.pixels.iter().zip(&img.pixels).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / c.pixels.len() as f64;
            if d < best.1 {
                best = (class, d);
            }
        }
        Ok(best.0)
    }
}

/// Series to image through the alignment model: temporal indices, aligned
/// visual indices, code lookup, visual decoder.
pub fn aligned_image(x: &TimeSeries, model: &AlignmentModel, bundle: &TokenizerBundle) -> Result<Image> {
    if model.direction != Direction::TemporalToVisual {
        return Err(Error::InvalidArgument("classification needs a temporal-to-visual model".into()));
    }
    let src = extract_indices(Sample::Series(x), bundle)?;
    let (_, target) = align_predict(model, &src)?;
    let q = lookup(&target, &bundle.codebook)?;
    let (tokens, _) = crate::autoencoder::decode_traced(&bundle.visual, &q)?;
    unpatchify_image(&TokenSequence {
        tokens,
        geometry: bundle.config.visual_geometry(),
    })
}

pub fn classify_series(
    x: &TimeSeries,
    model: &AlignmentModel,
    bundle: &TokenizerBundle,
    references: &[Vec<Image>],
) -> Result<usize> {
    classify_series_with(x, model, bundle, &CentroidClassifier::new(references)?)
}

pub fn classify_series_with(
    x: &TimeSeries,
    model: &AlignmentModel,
    bundle: &TokenizerBundle,
    classifier: &dyn ImageClassifier,
) -> Result<usize> {
    classifier.classify(&aligned_image(x, model, bundle)?)
}

/// Histograms, cost matrix and assignment for labelled subsets.
#[derive(Clone, Debug)]
pub struct ClassPairing {
    pub temporal: Vec<IndexHistogram>,
    pub visual: Vec<IndexHistogram>,
    pub cost: Matrix,
    pub assignment: Assignment,
}

pub fn pair_classes(
    temporal: &[Vec<IndexSequence>],
    visual: &[Vec<IndexSequence>],
    codes: usize,
) -> Result<ClassPairing> {
    let temporal: Vec<IndexHistogram> = temporal.iter().map(|s| histogram_of(s, codes)).collect::<Result<_>>()?;
    let visual: Vec<IndexHistogram> = visual.iter().map(|s| histogram_of(s, codes)).collect::<Result<_>>()?;
    let cost = cost_matrix(&temporal, &visual)?;
    let assignment = hungarian_assign(&cost)?;
    Ok(ClassPairing {
        temporal,
        visual,
        cost,
        assignment,
    })
}

/// Index grids of every series and image subset.
pub fn extract_subsets(
    series: &[Vec<TimeSeries>],
    images: &[Vec<Image>],
    bundle: &TokenizerBundle,
) -> Result<(Vec<Vec<IndexSequence>>, Vec<Vec<IndexSequence>>)> {
    let t = series
        .iter()
        .map(|s| par::try_map(Exec::default(), s, |x| extract_indices(Sample::Series(x), bundle)))
        .collect::<Result<_>>()?;
    let v = images
        .iter()
        .map(|s| par::try_map(Exec::default(), s, |x| extract_indices(Sample::Image(x), bundle)))
        .collect::<Result<_>>()?;
    Ok((t, v))
}

/// `modality,class,head,code,count,prob` rows.
pub fn write_histograms_csv<W: Write>(out: W, temporal: &[IndexHistogram], visual: &[IndexHistogram]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["modality", "class", "head", "code", "count", "prob"])
        .map_err(csv_err)?;
    for (name, hists) in [("temporal", temporal), ("visual", visual)] {
        for (class, h) in hists.iter().enumerate() {
            for m in 0..h.heads {
                for k in 0..h.codes {
                    let i = m * h.codes + k;
                    w.write_record([
                        name.to_string(),
                        class.to_string(),
                        m.to_string(),
                        k.to_string(),
                        h.counts[i].to_string(),
                        format!("{:e}", h.probs[i]),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `temporal_class,visual_class,cost` rows.
pub fn write_assignment_csv<W: Write>(out: W, assignment: &Assignment, cost: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["temporal_class", "visual_class", "cost"]).map_err(csv_err)?;
    for (t, &v) in assignment.mapping.iter().enumerate() {
        w.write_record([t.to_string(), v.to_string(), format!("{:e}", cost.get(t, v))])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
