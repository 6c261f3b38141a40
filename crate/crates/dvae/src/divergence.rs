//! Estimators of the mismatch between the aggregate encoding
//! q(z) = (1/n) Σᵢ q(z|xᵢ) and the prior, plus brute-force oracles and the
//! biased nested entropy estimator they are compared against.
//!
//! Everything here works on plain values; the differentiable forms used in
//! training are assembled on the tape by the objective builders, which
//! mirror these formulas term for term.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dist::{logsumexp, GaussianPosterior, Prior};
use crate::error::{Error, Result};
use crate::model::VaeModel;
use crate::tensor::Tensor;

/// Length scales of the dimension-wise Cauchy kernel.
pub const CAUCHY_SCALES: [f64; 6] = [0.2, 0.4, 1.0, 2.0, 4.0, 10.0];

/// A Monte-Carlo divergence value with its standard error when one exists.
#[derive(Clone, Copy, Debug)]
pub struct DivergenceEstimate {
    pub value: f64,
    /// Standard error of the mean; absent for single-sample estimates.
    pub standard_error: Option<f64>,
    pub samples: usize,
}

impl DivergenceEstimate {
    fn from_terms(terms: &[f64]) -> Self {
        let m = terms.len();
        let value = terms.iter().sum::<f64>() / m as f64;
        let standard_error = if m >= 2 {
            let var = terms.iter().map(|t| (t - value).powi(2)).sum::<f64>() / (m - 1) as f64;
            Some((var / m as f64).sqrt())
        } else {
            None
        };
        DivergenceEstimate { value, standard_error, samples: m }
    }
}

/// KL(p(z) ∥ q(z)) estimated with J prior samples against the aggregate
/// encoding of `data`:
/// (1/J) Σⱼ [ log p(zⱼ) − log( (1/n) Σᵢ q(zⱼ|xᵢ) ) ], zⱼ ∼ p(z).
pub fn inclusive_kl_estimate<R: Rng + ?Sized>(
    model: &VaeModel,
    data: &Tensor,
    j: usize,
    rng: &mut R,
) -> Result<DivergenceEstimate> {
    let n = data.nrows();
    if j < 1 || n < 1 {
        return Err(Error::InvalidSpec(format!(
            "inclusive KL needs at least one prior sample and one data point, got J={}, n={}",
            j, n
        )));
    }
    let posteriors = model.encode_batch(data)?;
    let mut terms = Vec::with_capacity(j);
    let mut logq = vec![0.0; n];
    for _ in 0..j {
        let z = model.prior.sample(rng);
        for (i, q) in posteriors.iter().enumerate() {
            logq[i] = q.log_prob(&z)?;
        }
        let log_mix = logsumexp(&logq) - (n as f64).ln();
        if !log_mix.is_finite() {
            return Err(Error::Numeric(
                "aggregate encoding underflows at a prior sample; the mixture is too far from the prior".into(),
            ));
        }
        terms.push(model.prior.log_prob(&z)? - log_mix);
    }
    Ok(DivergenceEstimate::from_terms(&terms))
}

/// The dimension-wise sum-of-Cauchy kernel
/// k(x, y) = Σ_d Σ_ℓ σ_ℓ / (σ_ℓ + (x_d − y_d)²).
pub fn cauchy_kernel(x: &[f64], y: &[f64], scales: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let s2 = (a - b) * (a - b);
            scales.iter().map(|&sc| sc / (sc + s2)).sum::<f64>()
        })
        .sum()
}

fn check_mmd_inputs(z: &Tensor, w: &Tensor, scales: &[f64]) -> Result<()> {
    if z.nrows() == 0 || w.nrows() == 0 {
        return Err(Error::InvalidSpec("MMD needs at least one sample on each side".into()));
    }
    if z.ncols() != w.ncols() {
        return Err(Error::Shape {
            op: "mmd_dimwise_cauchy",
            detail: format!("sample dims differ: {} vs {}", z.ncols(), w.ncols()),
        });
    }
    if scales.is_empty() || scales.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidSpec("kernel scales must be positive and non-empty".into()));
    }
    Ok(())
}

/// V-statistic MMD² between sample sets Z (from the aggregate encoding) and
/// W (from the prior) under the dimension-wise Cauchy kernel.
pub fn mmd_dimwise_cauchy(z: &Tensor, w: &Tensor, scales: &[f64]) -> Result<f64> {
    check_mmd_inputs(z, w, scales)?;
    let (m, mp) = (z.nrows(), w.nrows());
    let mut zz = 0.0;
    for a in 0..m {
        for b in 0..m {
            zz += cauchy_kernel(z.row(a), z.row(b), scales);
        }
    }
    let mut ww = 0.0;
    for a in 0..mp {
        for b in 0..mp {
            ww += cauchy_kernel(w.row(a), w.row(b), scales);
        }
    }
    let mut zw = 0.0;
    for a in 0..m {
        for b in 0..mp {
            zw += cauchy_kernel(z.row(a), w.row(b), scales);
        }
    }
    Ok(zz / (m * m) as f64 + ww / (mp * mp) as f64 - 2.0 * zw / (m * mp) as f64)
}

/// MMD² together with its gradient in the Z samples (W is held fixed).
pub fn mmd_dimwise_cauchy_with_grad(
    z: &Tensor,
    w: &Tensor,
    scales: &[f64],
) -> Result<(f64, Tensor)> {
    check_mmd_inputs(z, w, scales)?;
    let (m, mp, d) = (z.nrows(), w.nrows(), z.ncols());
    let value = mmd_dimwise_cauchy(z, w, scales)?;
    let mut grad = Tensor::zeros(vec![m, d]);
    // dk/dx_d(x, y) = Σ_ℓ −2 σ_ℓ (x_d − y_d) / (σ_ℓ + (x_d − y_d)²)².
    let pair_grad = |x: &[f64], y: &[f64], out: &mut [f64], scale: f64| {
        for dd in 0..d {
            let diff = x[dd] - y[dd];
            let s2 = diff * diff;
            let g: f64 = scales.iter().map(|&sc| -2.0 * sc * diff / ((sc + s2) * (sc + s2))).sum();
            out[dd] += scale * g;
        }
    };
    for a in 0..m {
        let mut row = vec![0.0; d];
        // Both (a,b) and (b,a) appearances of z_a in the Z–Z double sum add
        // the same derivative, hence the factor 2.
        for b in 0..m {
            pair_grad(z.row(a), z.row(b), &mut row, 2.0 / (m * m) as f64);
        }
        for b in 0..mp {
            pair_grad(z.row(a), w.row(b), &mut row, -2.0 / (m * mp) as f64);
        }
        for dd in 0..d {
            grad.set2(a, dd, row[dd]);
        }
    }
    Ok((value, grad))
}

/// The nested minibatch entropy estimator:
/// Ĥ = −(1/B) Σ_b log q̂(z_b) with
/// q̂(z_b) = q(z_b|x_b)/n + ((n−1)/(n(B−1))) Σ_{b'≠b} q(z_b|x_{b'}),
/// z_b one reparameterised sample per batch element (noise rows `eps`).
pub fn naive_aggregate_entropy(
    model: &VaeModel,
    batch: &Tensor,
    n_total: usize,
    eps: &Tensor,
) -> Result<f64> {
    let b = batch.nrows();
    if b < 2 {
        return Err(Error::InvalidSpec(format!(
            "the nested entropy estimator needs a batch of at least 2, got {}",
            b
        )));
    }
    if n_total < b {
        return Err(Error::InvalidSpec(format!(
            "dataset size {} smaller than batch size {}",
            n_total, b
        )));
    }
    if eps.shape() != [b, model.latent_dim()] {
        return Err(Error::Shape {
            op: "naive_aggregate_entropy",
            detail: format!(
                "noise must be [{}, {}], got {:?}",
                b,
                model.latent_dim(),
                eps.shape()
            ),
        });
    }
    let posteriors = model.encode_batch(batch)?;
    let n = n_total as f64;
    let own_logw = -n.ln();
    let other_logw = ((n - 1.0) / (n * (b as f64 - 1.0))).ln();
    let mut total = 0.0;
    let mut comps = Vec::with_capacity(b);
    for (bi, q) in posteriors.iter().enumerate() {
        let z = q.sample(eps.row(bi))?;
        comps.clear();
        for (bj, qj) in posteriors.iter().enumerate() {
            let w = if bi == bj { own_logw } else { other_logw };
            comps.push(w + qj.log_prob(&z)?);
        }
        total += logsumexp(&comps);
    }
    Ok(-total / b as f64)
}

const ORACLE_COMPONENT_CAP: usize = 4096;

fn mixture_posteriors(model: &VaeModel, data: &Tensor) -> Result<Vec<GaussianPosterior>> {
    let n = data.nrows();
    if n == 0 || n > ORACLE_COMPONENT_CAP {
        return Err(Error::InvalidSpec(format!(
            "aggregate-encoding oracle supports 1..={} components, got {}",
            ORACLE_COMPONENT_CAP, n
        )));
    }
    model.encode_batch(data)
}

fn sample_mixture<R: Rng + ?Sized>(
    posteriors: &[GaussianPosterior],
    d: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let i = rng.gen_range(0..posteriors.len());
    let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    posteriors[i].sample(&eps)
}

fn log_mixture(posteriors: &[GaussianPosterior], z: &[f64], scratch: &mut Vec<f64>) -> Result<f64> {
    scratch.clear();
    for q in posteriors {
        scratch.push(q.log_prob(z)?);
    }
    Ok(logsumexp(scratch) - (posteriors.len() as f64).ln())
}

/// Brute-force H[q(z)] for a dataset small enough to hold the full
/// n-component aggregate mixture: −(1/M) Σ_m log q(z_m), z_m ∼ q(z).
pub fn oracle_aggregate_entropy<R: Rng + ?Sized>(
    model: &VaeModel,
    data: &Tensor,
    m_samples: usize,
    rng: &mut R,
) -> Result<DivergenceEstimate> {
    if m_samples < 1 {
        return Err(Error::InvalidSpec("entropy oracle needs at least one sample".into()));
    }
    let posteriors = mixture_posteriors(model, data)?;
    let d = model.latent_dim();
    let mut terms = Vec::with_capacity(m_samples);
    let mut scratch = Vec::new();
    for _ in 0..m_samples {
        let z = sample_mixture(&posteriors, d, rng)?;
        terms.push(-log_mixture(&posteriors, &z, &mut scratch)?);
    }
    Ok(DivergenceEstimate::from_terms(&terms))
}

/// KL(q(z) ∥ p(z)) via the entropy identity
/// KL = −H[q(z)] − E_{q(z)}[log p(z)], with both expectations sharing one
/// sample stream so the reported standard error covers the whole estimate.
pub fn exclusive_kl_from_entropy<R: Rng + ?Sized>(
    model: &VaeModel,
    data: &Tensor,
    prior: &Prior,
    m_samples: usize,
    rng: &mut R,
) -> Result<DivergenceEstimate> {
    if m_samples < 1 {
        return Err(Error::InvalidSpec("KL oracle needs at least one sample".into()));
    }
    let posteriors = mixture_posteriors(model, data)?;
    let d = model.latent_dim();
    let mut terms = Vec::with_capacity(m_samples);
    let mut scratch = Vec::new();
    for _ in 0..m_samples {
        let z = sample_mixture(&posteriors, d, rng)?;
        terms.push(log_mixture(&posteriors, &z, &mut scratch)? - prior.log_prob(&z)?);
    }
    Ok(DivergenceEstimate::from_terms(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Likelihood;
    use crate::model::Mlp;
    use crate::rng::{RngHub, Stream};
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> rand_chacha::ChaCha12Rng {
        RngHub::new(seed).stream(Stream::Metric)
    }

    /// A model whose encoder copies its input straight into
    /// [mean | log-variance], so tests can dictate posteriors exactly.
    fn pass_through_model(d: usize, prior: Prior) -> VaeModel {
        VaeModel::new(
            Mlp::identity(2 * d),
            Mlp::identity(d),
            prior,
            Likelihood::GaussianFixedScale { variance: 1.0 },
        )
        .unwrap()
    }

    fn rows(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn inclusive_kl_of_prior_against_itself_is_zero() {
        let m = pass_through_model(2, Prior::isotropic_gaussian(2, 1.0).unwrap());
        let data = rows(&[vec![0.0, 0.0, 0.0, 0.0]]);
        let est = inclusive_kl_estimate(&m, &data, 4000, &mut rng(1)).unwrap();
        let se = est.standard_error.unwrap();
        assert!(est.value.abs() <= 3.0 * se, "value {} se {}", est.value, se);
    }

    #[test]
    fn inclusive_kl_matches_grid_quadrature_for_two_components() {
        let d = 2;
        let prior = Prior::isotropic_gaussian(d, 1.0).unwrap();
        let m = pass_through_model(d, prior.clone());
        // Posterior 1: N((0.8, -0.4), diag(0.49, 1.21)); posterior 2:
        // N((-1.0, 0.5), diag(1.0, 0.25)).
        let x1 = vec![0.8, -0.4, 0.49_f64.ln(), 1.21_f64.ln()];
        let x2 = vec![-1.0, 0.5, 0.0, 0.25_f64.ln()];
        let data = rows(&[x1.clone(), x2.clone()]);

        let comp = |x: &[f64], z: &[f64]| -> f64 {
            let mut lp = 0.0;
            for k in 0..d {
                let var = x[d + k].exp();
                lp += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (z[k] - x[k]).powi(2) / var);
            }
            lp
        };
        let (lo, hi, steps) = (-8.0_f64, 8.0_f64, 400_usize);
        let h = (hi - lo) / steps as f64;
        let mut oracle = 0.0;
        for i in 0..=steps {
            for jj in 0..=steps {
                let z = [lo + i as f64 * h, lo + jj as f64 * h];
                let lp = prior.log_prob(&z).unwrap();
                let lq = logsumexp(&[comp(&x1, &z), comp(&x2, &z)]) - 2.0_f64.ln();
                let mut w = lp.exp() * (lp - lq);
                if i == 0 || i == steps {
                    w *= 0.5;
                }
                if jj == 0 || jj == steps {
                    w *= 0.5;
                }
                oracle += w * h * h;
            }
        }

        let est = inclusive_kl_estimate(&m, &data, 100_000, &mut rng(2)).unwrap();
        let se = est.standard_error.unwrap();
        assert!(
            (est.value - oracle).abs() <= 3.0 * se,
            "estimate {} vs oracle {} (se {})",
            est.value,
            oracle,
            se
        );
    }

    #[test]
    fn inclusive_kl_grows_when_means_leave_the_prior() {
        let m = pass_through_model(1, Prior::isotropic_gaussian(1, 1.0).unwrap());
        let near = rows(&[vec![0.3, 0.0], vec![-0.2, 0.0]]);
        let far = rows(&[vec![6.0, 0.0], vec![7.0, 0.0]]);
        let e_near = inclusive_kl_estimate(&m, &near, 20_000, &mut rng(3)).unwrap();
        let e_far = inclusive_kl_estimate(&m, &far, 20_000, &mut rng(3)).unwrap();
        assert!(e_far.value > e_near.value + 1.0);
    }

    #[test]
    fn inclusive_kl_is_permutation_invariant_given_matched_draws() {
        // Same prior draws, reordered dataset: only the summation order
        // inside the log-sum-exp changes.
        let m = pass_through_model(1, Prior::isotropic_gaussian(1, 1.0).unwrap());
        let data = rows(&[vec![0.5, -0.3], vec![-1.0, 0.2], vec![0.1, 0.4]]);
        let perm = rows(&[vec![0.1, 0.4], vec![0.5, -0.3], vec![-1.0, 0.2]]);
        let a = inclusive_kl_estimate(&m, &data, 500, &mut rng(4)).unwrap();
        let b = inclusive_kl_estimate(&m, &perm, 500, &mut rng(4)).unwrap();
        assert_relative_eq!(a.value, b.value, max_relative = 1e-12);
    }

    #[test]
    fn mmd_on_identical_sets_is_exactly_zero() {
        let z = rows(&[vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.7, 0.1]]);
        let v = mmd_dimwise_cauchy(&z, &z.clone(), &CAUCHY_SCALES).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mmd_single_pair_single_scale_hand_value() {
        // k(0,0) + k(1,1) − 2 k(0,1) = 1 + 1 − 2·(1/2) = 1.
        let z = rows(&[vec![0.0]]);
        let w = rows(&[vec![1.0]]);
        let v = mmd_dimwise_cauchy(&z, &w, &[1.0]).unwrap();
        assert_relative_eq!(v, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn kernel_at_zero_distance_counts_scales() {
        let v = cauchy_kernel(&[0.7], &[0.7], &CAUCHY_SCALES);
        assert_eq!(v, 6.0);
    }

    #[test]
    fn mmd_is_symmetric_in_its_sample_sets() {
        let mut r = rng(5);
        let z = Tensor::new(vec![4, 2], (0..8).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        let w = Tensor::new(vec![5, 2], (0..10).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        let a = mmd_dimwise_cauchy(&z, &w, &CAUCHY_SCALES).unwrap();
        let b = mmd_dimwise_cauchy(&w, &z, &CAUCHY_SCALES).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-13);
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut r = rng(6);
        let z = Tensor::new(vec![3, 2], (0..6).map(|_| r.gen_range(-1.5..1.5)).collect()).unwrap();
        let w = Tensor::new(vec![4, 2], (0..8).map(|_| r.gen_range(-1.5..1.5)).collect()).unwrap();
        let (_, grad) = mmd_dimwise_cauchy_with_grad(&z, &w, &CAUCHY_SCALES).unwrap();
        let h = 1e-6;
        for idx in 0..z.numel() {
            let mut zp = z.clone();
            zp.data_mut()[idx] += h;
            let mut zm = z.clone();
            zm.data_mut()[idx] -= h;
            let fd = (mmd_dimwise_cauchy(&zp, &w, &CAUCHY_SCALES).unwrap()
                - mmd_dimwise_cauchy(&zm, &w, &CAUCHY_SCALES).unwrap())
                / (2.0 * h);
            assert_relative_eq!(grad.data()[idx], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn nested_estimator_collapses_on_identical_encoders() {
        let m = pass_through_model(1, Prior::isotropic_gaussian(1, 1.0).unwrap());
        let batch = rows(&[vec![0.4, -0.3], vec![0.4, -0.3]]);
        let eps = rows(&[vec![0.9], vec![-1.7]]);
        let got = naive_aggregate_entropy(&m, &batch, 2, &eps).unwrap();
        let posteriors = m.encode_batch(&batch).unwrap();
        let mut expect = 0.0;
        for (b, q) in posteriors.iter().enumerate() {
            let z = q.sample(eps.row(b)).unwrap();
            expect += q.log_prob(&z).unwrap();
        }
        let expect = -expect / 2.0;
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }

    #[test]
    fn nested_estimator_needs_a_real_batch() {
        let m = pass_through_model(1, Prior::isotropic_gaussian(1, 1.0).unwrap());
        let one = rows(&[vec![0.0, 0.0]]);
        let eps = rows(&[vec![0.0]]);
        assert!(naive_aggregate_entropy(&m, &one, 8, &eps).is_err());
        let two = rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let eps2 = rows(&[vec![0.0], vec![0.0]]);
        assert!(naive_aggregate_entropy(&m, &two, 1, &eps2).is_err());
    }

    #[test]
    fn full_batch_estimator_agrees_with_oracle() {
        let n = 8;
        let m = pass_through_model(1, Prior::isotropic_gaussian(1, 1.0).unwrap());
        let mut r = rng(7);
        let data = Tensor::from_rows(
            &(0..n)
                .map(|_| vec![r.gen_range(-2.0..2.0), r.gen_range(-0.5..0.5)])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let oracle = oracle_aggregate_entropy(&m, &data, 40_000, &mut r).unwrap();
        let draws = 10_000;
        let mut terms = Vec::with_capacity(draws);
        for _ in 0..draws {
            let eps = Tensor::new(
                vec![n, 1],
                (0..n).map(|_| StandardNormal.sample(&mut r)).collect(),
            )
            .unwrap();
            terms.push(naive_aggregate_entropy(&m, &data, n, &eps).unwrap());
        }
        let est = DivergenceEstimate::from_terms(&terms);
        let se = (est.standard_error.unwrap().powi(2)
            + oracle.standard_error.unwrap().powi(2))
        .sqrt();
        assert!(
            (est.value - oracle.value).abs() <= 3.0 * se,
            "estimator mean {} vs oracle {} (se {})",
            est.value,
            oracle.value,
            se
        );
    }

    #[test]
    fn separated_encoders_reveal_the_log_n_bias() {
        // Unit-variance encoders spaced 100 apart: the estimator converges
        // to log n + H[q(z|x)] instead of the aggregate entropy.
        let n = 1024;
        let b = 64;
        let m = pass_through_model(1, Prior::isotropic_gaussian(1, 1.0).unwrap());
        let data = Tensor::from_rows(
            &(0..n).map(|i| vec![100.0 * i as f64, 0.0]).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut r = rng(8);
        let mut acc = 0.0;
        let reps = 200;
        for _ in 0..reps {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..b {
                let jj = r.gen_range(i..n);
                idx.swap(i, jj);
            }
            let batch = Tensor::from_rows(
                &idx[..b].iter().map(|&i| data.row(i).to_vec()).collect::<Vec<_>>(),
            )
            .unwrap();
            let eps = Tensor::new(
                vec![b, 1],
                (0..b).map(|_| StandardNormal.sample(&mut r)).collect(),
            )
            .unwrap();
            acc += naive_aggregate_entropy(&m, &batch, n, &eps).unwrap();
        }
        let mean = acc / reps as f64;
        let gauss_entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        let predicted = (n as f64).ln() + gauss_entropy;
        assert!(
            (mean - predicted).abs() < 0.1,
            "mean {} vs log n + H = {}",
            mean,
            predicted
        );
    }

    #[test]
    fn oracle_entropy_limits() {
        let m = pass_through_model(1, Prior::isotropic_gaussian(1, 1.0).unwrap());
        let gauss_entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();

        let single = rows(&[vec![0.7, 0.0]]);
        let e1 = oracle_aggregate_entropy(&m, &single, 20_000, &mut rng(9)).unwrap();
        assert!((e1.value - gauss_entropy).abs() <= 3.0 * e1.standard_error.unwrap());

        let far = rows(&[vec![-60.0, 0.0], vec![60.0, 0.0]]);
        let e2 = oracle_aggregate_entropy(&m, &far, 20_000, &mut rng(10)).unwrap();
        let expect = 2.0_f64.ln() + gauss_entropy;
        assert!((e2.value - expect).abs() <= 3.0 * e2.standard_error.unwrap());

        let same = rows(&[vec![1.2, 0.0], vec![1.2, 0.0]]);
        let e3 = oracle_aggregate_entropy(&m, &same, 20_000, &mut rng(11)).unwrap();
        assert!((e3.value - gauss_entropy).abs() <= 3.0 * e3.standard_error.unwrap());
    }

    #[test]
    fn exclusive_kl_of_matched_aggregate_is_zero() {
        let prior = Prior::isotropic_gaussian(1, 1.0).unwrap();
        let m = pass_through_model(1, prior.clone());
        let data = rows(&[vec![0.0, 0.0]]);
        let e = exclusive_kl_from_entropy(&m, &data, &prior, 20_000, &mut rng(12)).unwrap();
        assert!(e.value.abs() <= 3.0 * e.standard_error.unwrap());
    }

    #[test]
    fn exclusive_kl_matches_quadrature_for_shifted_aggregate() {
        let prior = Prior::isotropic_gaussian(1, 1.0).unwrap();
        let m = pass_through_model(1, prior.clone());
        let mu = [3.0 + 0.0, 3.0 + 1.0];
        let data = rows(&[vec![mu[0], 0.0], vec![mu[1], 0.0]]);

        let (lo, hi, steps) = (-10.0_f64, 16.0_f64, 65_000_usize);
        let h = (hi - lo) / steps as f64;
        let mut oracle = 0.0;
        for i in 0..=steps {
            let z = [lo + i as f64 * h];
            let lq = logsumexp(&[
                crate::dist::log_normal_pdf(z[0], mu[0], 1.0),
                crate::dist::log_normal_pdf(z[0], mu[1], 1.0),
            ]) - 2.0_f64.ln();
            let lp = prior.log_prob(&z).unwrap();
            let mut w = lq.exp() * (lq - lp);
            if i == 0 || i == steps {
                w *= 0.5;
            }
            oracle += w * h;
        }

        let e = exclusive_kl_from_entropy(&m, &data, &prior, 60_000, &mut rng(13)).unwrap();
        assert!(
            (e.value - oracle).abs() <= 3.0 * e.standard_error.unwrap(),
            "estimate {} vs oracle {} (se {})",
            e.value,
            oracle,
            e.standard_error.unwrap()
        );
    }

    #[test]
    fn exclusive_kl_is_nonnegative_within_noise() {
        let prior = Prior::isotropic_gaussian(2, 1.0).unwrap();
        let m = pass_through_model(2, prior.clone());
        let mut r = rng(14);
        for _ in 0..50 {
            let n = r.gen_range(1..5);
            let data = Tensor::from_rows(
                &(0..n)
                    .map(|_| {
                        vec![
                            r.gen_range(-2.0..2.0),
                            r.gen_range(-2.0..2.0),
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                        ]
                    })
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let e = exclusive_kl_from_entropy(&m, &data, &prior, 2_000, &mut r).unwrap();
            assert!(
                e.value >= -3.0 * e.standard_error.unwrap(),
                "KL estimate {} below noise floor",
                e.value
            );
        }
    }
}
