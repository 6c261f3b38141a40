//! Decomposition metrics: Hoyer sparsity of aggregate-normalised encodings
//! and the fixed-factor axis-alignment score.

use crate::dist::Prior;
use crate::error::{Error, Result};
use crate::model::VaeModel;
use crate::rng::{RngHub, Stream};
use crate::tensor::Tensor;
use rand::Rng;

/// (√d − ‖y‖₁/‖y‖₂) / (√d − 1): 0 for a fully dense vector, 1 for a fully
/// sparse one.
pub fn hoyer(y: &[f64]) -> Result<f64> {
    let d = y.len();
    if d < 2 {
        return Err(Error::InvalidSpec(format!(
            "the sparsity ratio needs at least 2 entries, got {}",
            d
        )));
    }
    let l1: f64 = y.iter().map(|v| v.abs()).sum();
    let l2: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return Err(Error::Domain {
            op: "hoyer",
            detail: "the zero vector has no defined sparsity".into(),
        });
    }
    let sd = (d as f64).sqrt();
    Ok((sd - l1 / l2) / (sd - 1.0))
}

/// Posterior means over a dataset together with the per-dimension aggregate
/// standard deviation (computed over the same rows, population form).
#[derive(Clone, Debug)]
pub struct EncodingMatrix {
    means: Tensor,
    std: Vec<f64>,
}

impl EncodingMatrix {
    pub fn new(means: Tensor) -> Result<Self> {
        if means.rank() != 2 || means.nrows() == 0 {
            return Err(Error::Shape {
                op: "encoding_matrix",
                detail: format!("need a nonempty n×D matrix, got {:?}", means.shape()),
            });
        }
        let std = column_std(&means);
        Ok(EncodingMatrix { means, std })
    }

    /// Encodes every row of `data` through the model's posterior means.
    pub fn from_model(model: &VaeModel, data: &Tensor) -> Result<Self> {
        let posteriors = model.encode_batch(data)?;
        let rows: Vec<Vec<f64>> = posteriors.iter().map(|q| q.mean().to_vec()).collect();
        EncodingMatrix::new(Tensor::from_rows(&rows)?)
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn aggregate_std(&self) -> &[f64] {
        &self.std
    }
}

/// Mean Hoyer sparsity over rows, with dead dimensions reported.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub score: f64,
    /// Dimensions whose aggregate standard deviation fell below 1e-8 and
    /// were left out of the normalised rows.
    pub excluded_dims: Vec<usize>,
}

const SPARSITY_STD_FLOOR: f64 = 1e-8;

/// (1/n) Σᵢ Hoyer(z̄ᵢ) with z̄_d = z_d/σ(z_d) over the surviving dimensions.
pub fn sparsity_score(enc: &EncodingMatrix) -> Result<SparsityReport> {
    let (n, d) = (enc.means.nrows(), enc.means.ncols());
    let surviving: Vec<usize> = (0..d).filter(|&j| enc.std[j] >= SPARSITY_STD_FLOOR).collect();
    let excluded: Vec<usize> = (0..d).filter(|&j| enc.std[j] < SPARSITY_STD_FLOOR).collect();
    if surviving.len() < 2 {
        return Err(Error::Domain {
            op: "sparsity_score",
            detail: format!(
                "only {} dimension(s) carry signal; the ratio needs at least 2",
                surviving.len()
            ),
        });
    }
    let mut total = 0.0;
    let mut row = Vec::with_capacity(surviving.len());
    for i in 0..n {
        row.clear();
        for &j in &surviving {
            row.push(enc.means.get2(i, j) / enc.std[j]);
        }
        total += hoyer(&row)?;
    }
    Ok(SparsityReport { score: total / n as f64, excluded_dims: excluded })
}

/// Maps one observation to a latent code row.
pub trait LatentCoder {
    fn latent_dim(&self) -> usize;
    fn code(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl LatentCoder for VaeModel {
    fn latent_dim(&self) -> usize {
        VaeModel::latent_dim(self)
    }

    fn code(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode(x)?.mean().to_vec())
    }
}

/// z = M·x, for oracle codes with known alignment.
#[derive(Clone, Debug)]
pub struct LinearCode {
    matrix: Tensor,
}

impl LinearCode {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::Shape {
                op: "linear_code",
                detail: format!("need a matrix, got {:?}", matrix.shape()),
            });
        }
        Ok(LinearCode { matrix })
    }
}

impl LatentCoder for LinearCode {
    fn latent_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn code(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.matrix.ncols() {
            return Err(Error::Shape {
                op: "linear_code",
                detail: format!("matrix takes {} inputs, got {}", self.matrix.ncols(), x.len()),
            });
        }
        Ok((0..self.matrix.nrows())
            .map(|i| (0..x.len()).map(|j| self.matrix.get2(i, j) * x[j]).sum())
            .collect())
    }
}

/// A dataset whose rows carry known generative factors, addressable by
/// (factor, value).
pub trait FactorSource {
    fn num_factors(&self) -> usize;
    /// Number of values factor `factor` takes.
    fn cardinality(&self, factor: usize) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn item(&self, index: usize) -> &[f64];
    /// Indices of the items whose `factor` equals `value`.
    fn matching(&self, factor: usize, value: usize) -> &[usize];
}

#[derive(Clone, Copy, Debug)]
pub struct DisentanglementOptions {
    /// Number of votes M.
    pub votes: usize,
    /// Items per fixed-factor batch L.
    pub fixed_batch: usize,
    /// Aggregate-std threshold below which a dimension counts as collapsed.
    pub collapse_threshold: f64,
}

impl Default for DisentanglementOptions {
    fn default() -> Self {
        DisentanglementOptions { votes: 800, fixed_batch: 64, collapse_threshold: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct DisentanglementReport {
    /// Fraction of votes the majority classifier gets right.
    pub score: f64,
    /// Dimensions pruned before voting.
    pub collapsed_dims: Vec<usize>,
    pub collapse_threshold: f64,
    pub votes: usize,
}

/// Axis-alignment score: per vote, fix one generative factor, encode a batch
/// sampled under it, and record which (aggregate-normalised) latent
/// dimension has the smallest variance; a majority classifier from dimension
/// to factor is then scored on the votes themselves.
///
/// Votes draw only factors that actually vary (cardinality ≥ 2); at least
/// two such factors must exist. Each vote runs on its own rng substream, so
/// the result does not depend on evaluation order.
pub fn disentanglement_score<C, S>(
    coder: &C,
    data: &S,
    opts: &DisentanglementOptions,
    hub: &RngHub,
) -> Result<DisentanglementReport>
where
    C: LatentCoder + ?Sized,
    S: FactorSource + ?Sized,
{
    let varying: Vec<usize> = (0..data.num_factors()).filter(|&k| data.cardinality(k) >= 2).collect();
    if varying.len() < 2 {
        return Err(Error::InvalidSpec(format!(
            "the alignment score needs at least 2 varying factors, found {}",
            varying.len()
        )));
    }
    if opts.fixed_batch < 2 {
        return Err(Error::InvalidSpec(format!(
            "fixed-factor batches need at least 2 items, got {}",
            opts.fixed_batch
        )));
    }
    if opts.votes < data.num_factors() {
        return Err(Error::InvalidSpec(format!(
            "{} votes cannot cover {} factors",
            opts.votes,
            data.num_factors()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidSpec("the factor dataset is empty".into()));
    }

    let n = data.len();
    let d = coder.latent_dim();
    let mut codes = Tensor::zeros(vec![n, d]);
    for i in 0..n {
        let z = coder.code(data.item(i))?;
        if z.len() != d {
            return Err(Error::Shape {
                op: "disentanglement",
                detail: format!("coder returned {} values, declared {}", z.len(), d),
            });
        }
        for (j, &v) in z.iter().enumerate() {
            codes.set2(i, j, v);
        }
    }
    let std = column_std(&codes);
    let surviving: Vec<usize> =
        (0..d).filter(|&j| std[j] >= opts.collapse_threshold).collect();
    let collapsed: Vec<usize> =
        (0..d).filter(|&j| std[j] < opts.collapse_threshold).collect();
    if surviving.is_empty() {
        return Err(Error::Domain {
            op: "disentanglement",
            detail: "every latent dimension collapsed below the aggregate-std threshold".into(),
        });
    }

    // counts[s][k]: votes naming surviving dimension s under fixed factor k.
    let mut counts = vec![vec![0usize; data.num_factors()]; surviving.len()];
    let mut batch: Vec<usize> = Vec::with_capacity(opts.fixed_batch);
    for vote in 0..opts.votes {
        let mut rng = hub.substream(Stream::Metric, vote as u64);
        let k = varying[rng.gen_range(0..varying.len())];
        let v = rng.gen_range(0..data.cardinality(k));
        let pool = data.matching(k, v);
        if pool.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "no items carry value {} of factor {}",
                v, k
            )));
        }
        batch.clear();
        for _ in 0..opts.fixed_batch {
            batch.push(pool[rng.gen_range(0..pool.len())]);
        }

        let mut best = 0usize;
        let mut best_var = f64::INFINITY;
        for (s, &j) in surviving.iter().enumerate() {
            let mean: f64 =
                batch.iter().map(|&i| codes.get2(i, j)).sum::<f64>() / opts.fixed_batch as f64;
            let var: f64 = batch
                .iter()
                .map(|&i| (codes.get2(i, j) - mean).powi(2))
                .sum::<f64>()
                / opts.fixed_batch as f64
                / (std[j] * std[j]);
            if var < best_var {
                best_var = var;
                best = s;
            }
        }
        counts[best][k] += 1;
    }

    let mut correct = 0usize;
    for per_dim in &counts {
        if let Some(&top) = per_dim.iter().max() {
            correct += top;
        }
    }
    Ok(DisentanglementReport {
        score: correct as f64 / opts.votes as f64,
        collapsed_dims: collapsed,
        collapse_threshold: opts.collapse_threshold,
        votes: opts.votes,
    })
}

/// Exclusive KL between the model's aggregate encoding and an arbitrary
/// reference prior, reported with its standard error. Thin re-export-style
/// wrapper so metric consumers need not reach into the divergence module.
pub fn aggregate_prior_kl<R: Rng + ?Sized>(
    model: &VaeModel,
    data: &Tensor,
    prior: &Prior,
    samples: usize,
    rng: &mut R,
) -> Result<crate::divergence::DivergenceEstimate> {
    crate::divergence::exclusive_kl_from_entropy(model, data, prior, samples, rng)
}

fn column_std(m: &Tensor) -> Vec<f64> {
    let (n, d) = (m.nrows(), m.ncols());
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| m.get2(i, j)).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|i| (m.get2(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        out.push(var.sqrt());
    }
    out
}
