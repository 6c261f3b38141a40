//! Tape graphs for the objective terms.
//!
//! Every builder mirrors a plain-value formula elsewhere in the crate and
//! returns per-row columns (n×1) unless noted. Log-sum-exp uses a detached
//! row maximum: the max enters as a constant, which leaves the gradient of
//! the composite exactly the softmax-weighted one.

use crate::dist::{Likelihood, Prior, BERNOULLI_MEAN_EPS};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LOG_2PI: f64 = 1.8378770664093453;

/// z = μ + exp(lv/2) ∘ ε for one shared-noise tensor.
pub(crate) fn reparam_rows(t: &mut Tape, mean: Var, log_var: Var, eps: &Tensor) -> Result<Var> {
    let half = t.scale(log_var, 0.5)?;
    let sigma = t.exp(half)?;
    let e = t.constant(eps.clone())?;
    let noise = t.mul(sigma, e)?;
    t.add(mean, noise)
}

/// Per-row log-likelihood of the decoder means against fixed targets.
pub(crate) fn likelihood_log_prob_rows(
    t: &mut Tape,
    lik: &Likelihood,
    mean: Var,
    x: &Tensor,
) -> Result<Var> {
    let p = t.shape(mean)[1];
    if x.shape() != t.shape(mean) {
        return Err(Error::Shape {
            op: "likelihood_rows",
            detail: format!("targets {:?} vs decoder output {:?}", x.shape(), t.shape(mean)),
        });
    }
    match lik {
        Likelihood::BernoulliMean => {
            // Exact clamp to [eps, 1−eps] out of relu pieces:
            // lo + relu(m − lo) − relu(m − hi).
            let lo = BERNOULLI_MEAN_EPS;
            let hi = 1.0 - BERNOULLI_MEAN_EPS;
            let above_lo = t.offset(mean, -lo)?;
            let r1 = t.relu(above_lo)?;
            let above_hi = t.offset(mean, -hi)?;
            let r2 = t.relu(above_hi)?;
            let span = t.sub(r1, r2)?;
            let m = t.offset(span, lo)?;
            let one_minus_m = {
                let neg = t.negate(m)?;
                t.offset(neg, 1.0)?
            };
            let xc = t.constant(x.clone())?;
            let one_minus_x = t.constant(x.map(|v| 1.0 - v))?;
            let log_m = t.log(m)?;
            let log_1m = t.log(one_minus_m)?;
            let on = t.mul(xc, log_m)?;
            let off = t.mul(one_minus_x, log_1m)?;
            let ll = t.add(on, off)?;
            t.row_sums(ll)
        }
        Likelihood::GaussianFixedScale { variance } => {
            let xc = t.constant(x.clone())?;
            let diff = t.sub(mean, xc)?;
            let sq = t.square(diff)?;
            let ss = t.row_sums(sq)?;
            let scaled = t.scale(ss, -0.5 / variance)?;
            t.offset(scaled, -0.5 * p as f64 * (LOG_2PI + variance.ln()))
        }
        Likelihood::LaplaceFixedScale { scale } => {
            let xc = t.constant(x.clone())?;
            let diff = t.sub(mean, xc)?;
            let neg = t.negate(diff)?;
            let rp = t.relu(diff)?;
            let rn = t.relu(neg)?;
            let absd = t.add(rp, rn)?;
            let ss = t.row_sums(absd)?;
            let scaled = t.scale(ss, -1.0 / scale)?;
            t.offset(scaled, -(p as f64) * (2.0 * scale).ln())
        }
    }
}

/// Closed-form KL(q(z|x) ∥ p) rows for Gaussian priors. `prior_lv` carries
/// the log-variance leaf when the prior is learnable.
pub(crate) fn gaussian_kl_rows(
    t: &mut Tape,
    mean: Var,
    log_var: Var,
    prior: &Prior,
    prior_lv: Option<Var>,
) -> Result<Var> {
    match prior {
        Prior::IsotropicGaussian { variance, .. } => {
            // ½ Σ_d [ (exp(lv) + μ²)/σ² − 1 − lv + ln σ² ].
            let var = t.exp(log_var)?;
            let musq = t.square(mean)?;
            let num = t.add(var, musq)?;
            let scaled = t.scale(num, 1.0 / variance)?;
            let inner = t.sub(scaled, log_var)?;
            let inner = t.offset(inner, variance.ln() - 1.0)?;
            let ss = t.row_sums(inner)?;
            t.scale(ss, 0.5)
        }
        Prior::DiagGaussian { log_variances, .. } => {
            // ½ Σ_d [ exp(lv − lv_p) + μ² e^{−lv_p} − 1 − lv + lv_p ].
            let lvp = match prior_lv {
                Some(v) => v,
                None => t.constant(Tensor::new(
                    vec![1, log_variances.len()],
                    log_variances.clone(),
                )?)?,
            };
            let neg_lvp = t.negate(lvp)?;
            let shifted = t.broadcast_add_rowvec(log_var, neg_lvp)?;
            let ratio = t.exp(shifted)?;
            let musq = t.square(mean)?;
            let inv_var = t.exp(neg_lvp)?;
            let mu_term = t.broadcast_mul_rowvec(musq, inv_var)?;
            let and_mu = t.add(ratio, mu_term)?;
            let minus_lv = t.sub(and_mu, log_var)?;
            let plus_lvp = t.broadcast_add_rowvec(minus_lv, lvp)?;
            let inner = t.offset(plus_lvp, -1.0)?;
            let ss = t.row_sums(inner)?;
            t.scale(ss, 0.5)
        }
        _ => Err(Error::Incompatible(
            "closed-form KL is only available against Gaussian priors".into(),
        )),
    }
}

/// Monte-Carlo KL rows for one shared-noise sample:
/// log q(z|x) − log p(z) with z = μ + σ∘ε. The log q part reduces to
/// −½ Σ_d (ln 2π + lv + ε²) because (z−μ)²/σ² = ε² exactly.
pub(crate) fn mc_kl_rows(
    t: &mut Tape,
    log_var: Var,
    z: Var,
    eps: &Tensor,
    prior: &Prior,
) -> Result<Var> {
    let eps_sq = t.constant(eps.map(|v| v * v))?;
    let inner = t.add(log_var, eps_sq)?;
    let inner = t.offset(inner, LOG_2PI)?;
    let ss = t.row_sums(inner)?;
    let log_q = t.scale(ss, -0.5)?;
    let log_p = prior_log_prob_rows(t, prior, z, None)?;
    t.sub(log_q, log_p)
}

/// ½ Σ_d (lv + ln 2πe) rows: the entropy of each diagonal posterior.
pub(crate) fn encoder_entropy_rows(t: &mut Tape, log_var: Var) -> Result<Var> {
    let d = t.shape(log_var)[1] as f64;
    let ss = t.row_sums(log_var)?;
    let half = t.scale(ss, 0.5)?;
    t.offset(half, 0.5 * d * (LOG_2PI + 1.0))
}

/// log p(z) rows for every prior family. `prior_lv` supplies the leaf for
/// a learnable diagonal Gaussian; all other families are fixed.
pub(crate) fn prior_log_prob_rows(
    t: &mut Tape,
    prior: &Prior,
    z: Var,
    prior_lv: Option<Var>,
) -> Result<Var> {
    let d = t.shape(z)[1];
    if prior.dim() != d {
        return Err(Error::Shape {
            op: "prior_log_prob_rows",
            detail: format!("prior dim {} vs z dim {}", prior.dim(), d),
        });
    }
    match prior {
        Prior::IsotropicGaussian { variance, .. } => {
            let sq = t.square(z)?;
            let ss = t.row_sums(sq)?;
            let quad = t.scale(ss, -0.5 / variance)?;
            t.offset(quad, -0.5 * d as f64 * (LOG_2PI + variance.ln()))
        }
        Prior::DiagGaussian { log_variances, .. } => {
            let lvp = match prior_lv {
                Some(v) => v,
                None => t.constant(Tensor::new(
                    vec![1, log_variances.len()],
                    log_variances.clone(),
                )?)?,
            };
            let neg_lvp = t.negate(lvp)?;
            let inv_var = t.exp(neg_lvp)?;
            let sq = t.square(z)?;
            let quad = t.broadcast_mul_rowvec(sq, inv_var)?;
            let with_lvp = t.broadcast_add_rowvec(quad, lvp)?;
            let inner = t.offset(with_lvp, LOG_2PI)?;
            let ss = t.row_sums(inner)?;
            t.scale(ss, -0.5)
        }
        Prior::StudentTProduct { dof, .. } => {
            let c = crate::dist::student_t_log_norm(*dof);
            let sq = t.square(z)?;
            let scaled = t.scale(sq, 1.0 / dof)?;
            let shifted = t.offset(scaled, 1.0)?;
            let lg = t.log(shifted)?;
            let ss = t.row_sums(lg)?;
            let tail = t.scale(ss, -0.5 * (dof + 1.0))?;
            t.offset(tail, d as f64 * c)
        }
        Prior::GaussianMixture { weights, means, variances } => {
            let mut cols: Option<Var> = None;
            for ((w, m), v) in weights.iter().zip(means).zip(variances) {
                let neg_mean = t.constant(Tensor::new(vec![1, d], m.iter().map(|x| -x).collect())?)?;
                let centered = t.broadcast_add_rowvec(z, neg_mean)?;
                let sq = t.square(centered)?;
                let inv_var = t.constant(Tensor::new(vec![1, d], v.iter().map(|x| 1.0 / x).collect())?)?;
                let quad = t.broadcast_mul_rowvec(sq, inv_var)?;
                let ss = t.row_sums(quad)?;
                let half = t.scale(ss, -0.5)?;
                let norm: f64 = v.iter().map(|x| LOG_2PI + x.ln()).sum::<f64>() * -0.5;
                let col = t.offset(half, norm + w.ln())?;
                cols = Some(match cols {
                    None => col,
                    Some(acc) => t.concat(acc, col)?,
                });
            }
            let stacked = cols.expect("validated mixtures are nonempty");
            row_logsumexp(t, stacked)
        }
        Prior::SpikeSlab { spike_weight, spike_variance, .. } => {
            // Elementwise two-component log-sum-exp, then a row sum.
            let sq = t.square(z)?;
            let spike_quad = t.scale(sq, -0.5 / spike_variance)?;
            let spike = t.offset(
                spike_quad,
                spike_weight.ln() - 0.5 * (LOG_2PI + spike_variance.ln()),
            )?;
            let slab_quad = t.scale(sq, -0.5)?;
            let slab = t.offset(slab_quad, (1.0 - spike_weight).ln() - 0.5 * LOG_2PI)?;
            let mx = {
                let sv = t.value(spike).clone();
                let lv = t.value(slab).clone();
                let m = sv.zip_map(&lv, "elementwise_max", f64::max)?;
                t.constant(m)?
            };
            let s_sh = t.sub(spike, mx)?;
            let l_sh = t.sub(slab, mx)?;
            let es = t.exp(s_sh)?;
            let el = t.exp(l_sh)?;
            let total = t.add(es, el)?;
            let lg = t.log(total)?;
            let lse = t.add(lg, mx)?;
            t.row_sums(lse)
        }
    }
}

/// Row-wise log-sum-exp of an (n × c) matrix, as an (n × 1) column.
pub(crate) fn row_logsumexp(t: &mut Tape, m: Var) -> Result<Var> {
    let (r, c) = {
        let s = t.shape(m);
        (s[0], s[1])
    };
    let mx = {
        let mv = t.value(m);
        let mut col = Vec::with_capacity(r);
        for i in 0..r {
            col.push(
                mv.data()[i * c..(i + 1) * c]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max),
            );
        }
        t.constant(Tensor::new(vec![r, 1], col)?)?
    };
    let ones = t.constant(Tensor::full(vec![1, c], 1.0))?;
    let mb = t.matmul(mx, ones)?;
    let sh = t.sub(m, mb)?;
    let ex = t.exp(sh)?;
    let rs = t.row_sums(ex)?;
    let lg = t.log(rs)?;
    t.add(lg, mx)
}

/// The inclusive-KL estimate as a scalar graph node:
/// (1/J) Σⱼ [ log p(zⱼ) − ( LSEᵢ log q(zⱼ|xᵢ) − log n ) ]
/// with fixed prior draws Z (J × D) and the (μ, lv) encoder heads.
///
/// The J×n log-density matrix is assembled from three fused products:
/// Σ_d (z_d − μ_d)² e^{−lv_d} = [Z² Aᵀ − 2 Z (μ∘A)ᵀ]ⱼᵢ + Σ_d(μ² A)ᵢ
/// with A = e^{−lv}.
pub(crate) fn inclusive_kl_graph(
    t: &mut Tape,
    mean: Var,
    log_var: Var,
    prior_draws: &Tensor,
    prior: &Prior,
) -> Result<Var> {
    let (n, d) = {
        let s = t.shape(mean);
        (s[0], s[1])
    };
    if prior_draws.ncols() != d {
        return Err(Error::Shape {
            op: "inclusive_kl_graph",
            detail: format!("prior draws are {}-dimensional, posterior is {}", prior_draws.ncols(), d),
        });
    }
    let neg_lv = t.negate(log_var)?;
    let a = t.exp(neg_lv)?;
    let at = t.transpose(a)?;
    let z_sq = t.constant(prior_draws.map(|v| v * v))?;
    let term_zz = t.matmul(z_sq, at)?;
    let mu_a = t.mul(mean, a)?;
    let mu_a_t = t.transpose(mu_a)?;
    let two_z = t.constant(prior_draws.map(|v| 2.0 * v))?;
    let term_cross = t.matmul(two_z, mu_a_t)?;
    let quad_head = t.sub(term_zz, term_cross)?;

    let mu_sq = t.square(mean)?;
    let mu_sq_a = t.mul(mu_sq, a)?;
    let with_lv = t.add(mu_sq_a, log_var)?;
    let per_i = t.row_sums(with_lv)?;
    let per_i_row = t.transpose(per_i)?;
    let quad = t.broadcast_add_rowvec(quad_head, per_i_row)?;
    let shifted = t.offset(quad, d as f64 * LOG_2PI)?;
    let log_q_matrix = t.scale(shifted, -0.5)?;

    let lse = row_logsumexp(t, log_q_matrix)?;
    let log_mix = t.offset(lse, -(n as f64).ln())?;
    let zc = t.constant(prior_draws.clone())?;
    let log_p = prior_log_prob_rows(t, prior, zc, None)?;
    let per_j = t.sub(log_p, log_mix)?;
    t.mean(per_j)
}
