//! Training objectives: the ELBO, its β-weighted variant, the
//! entropy-regularised form, and the decomposed objective that adds an
//! explicit divergence between the aggregate encoding and the prior.
//!
//! Every objective is a scalar to maximise. Evaluation consumes a
//! [`NoiseBundle`] drawn up front, so two objectives fed the same bundle see
//! identical reparameterised samples and identical prior draws.

mod graph;

use crate::dist::Prior;
use crate::divergence::{mmd_dimwise_cauchy_with_grad, CAUCHY_SCALES};
use crate::error::{Error, Result};
use crate::model::{ModelVars, VaeModel};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// How the decomposed objective measures the mismatch between the aggregate
/// encoding q(z) and the prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    /// KL(p(z) ∥ q(z)) estimated from prior draws scored under the batch
    /// mixture; differentiated through the tape.
    InclusiveKl,
    /// Dimension-wise Cauchy-kernel MMD between encoded samples and prior
    /// draws; value and gradient are analytic.
    MmdDimwise,
}

/// The objective family and its weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Elbo,
    BetaVae { beta: f64 },
    EntropyRegElbo { beta: f64 },
    Decomp { alpha: f64, beta: f64, divergence: DivergenceKind },
}

fn default_recon_samples() -> usize {
    1
}

/// An objective plus the number of reconstruction samples K.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    #[serde(flatten)]
    pub kind: ObjectiveKind,
    #[serde(default = "default_recon_samples")]
    pub recon_samples: usize,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, recon_samples: usize) -> Self {
        ObjectiveSpec { kind, recon_samples }
    }

    /// Checks the weights and the prior the objective will run against.
    pub fn validate(&self, prior: &Prior) -> Result<()> {
        if self.recon_samples < 1 {
            return Err(Error::InvalidSpec(
                "objectives need at least one reconstruction sample".into(),
            ));
        }
        match &self.kind {
            ObjectiveKind::Elbo => Ok(()),
            ObjectiveKind::BetaVae { beta } => check_positive_beta(*beta),
            ObjectiveKind::EntropyRegElbo { beta } => {
                check_positive_beta(*beta)?;
                if !prior.is_gaussian() {
                    return Err(Error::Incompatible(
                        "the entropy-regularised objective rewrites a Gaussian-prior model; \
                         this prior is not Gaussian"
                            .into(),
                    ));
                }
                Ok(())
            }
            ObjectiveKind::Decomp { alpha, beta, .. } => {
                if !alpha.is_finite() || *alpha < 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "divergence weight α must be finite and ≥ 0, got {}",
                        alpha
                    )));
                }
                if !beta.is_finite() || *beta < 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "KL weight β must be finite and ≥ 0, got {}",
                        beta
                    )));
                }
                if *alpha > 0.0 && prior.learnable() {
                    return Err(Error::Incompatible(
                        "divergence estimates treat prior draws as fixed, so a learnable prior \
                         cannot take gradients through the α term"
                            .into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

fn check_positive_beta(beta: f64) -> Result<()> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::InvalidSpec(format!("β must be finite and > 0, got {}", beta)));
    }
    Ok(())
}

/// Pre-drawn noise: K standard-normal tensors for reparameterisation and,
/// when an estimator scores fixed prior samples, the draws themselves.
#[derive(Clone, Debug)]
pub struct NoiseBundle {
    /// K tensors of shape (batch × latent dim).
    pub reparam: Vec<Tensor>,
    /// Draws from the prior, one per row.
    pub prior_samples: Option<Tensor>,
}

impl NoiseBundle {
    /// K standard-normal tensors of shape (n × d).
    pub fn standard<R: Rng + ?Sized>(n: usize, d: usize, k: usize, rng: &mut R) -> Result<Self> {
        if n == 0 || d == 0 || k == 0 {
            return Err(Error::InvalidSpec(format!(
                "noise bundle needs positive batch, latent dimension, and sample count; \
                 got n = {}, d = {}, k = {}",
                n, d, k
            )));
        }
        let reparam = (0..k)
            .map(|_| {
                Tensor::new(
                    vec![n, d],
                    (0..n * d).map(|_| StandardNormal.sample(rng)).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NoiseBundle { reparam, prior_samples: None })
    }

    /// Attaches `j` prior draws for divergence estimation.
    pub fn with_prior_draws<R: Rng + ?Sized>(
        mut self,
        prior: &Prior,
        j: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if j == 0 {
            return Err(Error::InvalidSpec("at least one prior draw is needed".into()));
        }
        let rows: Vec<Vec<f64>> = (0..j).map(|_| prior.sample(rng)).collect();
        self.prior_samples = Some(Tensor::from_rows(&rows)?);
        Ok(self)
    }
}

/// The scalar pieces of one objective evaluation. `objective` is the value
/// to maximise; the rest are reported for monitoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObjectiveTerms {
    pub objective: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub divergence: Option<f64>,
    pub mean_encoder_entropy: f64,
}

/// Terms plus gradients of the objective, aligned with
/// [`VaeModel::param_slices`].
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub terms: ObjectiveTerms,
    pub grads: Vec<Tensor>,
}

struct BuiltGraph {
    tape: Tape,
    mv: ModelVars,
    root: Var,
    first_z: Var,
    terms: ObjectiveTerms,
    /// Seed for a second backward pass when part of the objective lives off
    /// the tape (the MMD term): −α · ∂MMD/∂Z.
    off_tape_seed: Option<Tensor>,
}

fn build_graph(
    model: &VaeModel,
    spec: &ObjectiveSpec,
    x: &Tensor,
    noise: &NoiseBundle,
) -> Result<BuiltGraph> {
    spec.validate(&model.prior)?;
    let n = x.nrows();
    let d = model.latent_dim();
    if n == 0 || x.ncols() != model.data_dim() {
        return Err(Error::Shape {
            op: "objective",
            detail: format!(
                "batch {:?} does not match data dimension {}",
                x.shape(),
                model.data_dim()
            ),
        });
    }
    if noise.reparam.len() != spec.recon_samples {
        return Err(Error::InvalidSpec(format!(
            "noise bundle holds {} reparameterisation draws, objective wants K = {}",
            noise.reparam.len(),
            spec.recon_samples
        )));
    }
    for eps in &noise.reparam {
        if eps.shape() != [n, d] {
            return Err(Error::Shape {
                op: "objective",
                detail: format!("noise must be [{}, {}], got {:?}", n, d, eps.shape()),
            });
        }
    }

    let mut t = Tape::new();
    let mv = model.leaf_vars(&mut t)?;
    let xc = t.constant(x.clone())?;
    let (mean, log_var) = model.encode_tape(&mut t, xc, &mv)?;

    let k = spec.recon_samples;
    let mut zs = Vec::with_capacity(k);
    let mut recon_acc: Option<Var> = None;
    for eps in &noise.reparam {
        let z = graph::reparam_rows(&mut t, mean, log_var, eps)?;
        zs.push(z);
        let dec = model.decode_tape(&mut t, z, &mv)?;
        let rows = graph::likelihood_log_prob_rows(&mut t, &model.likelihood, dec, x)?;
        let s = t.mean(rows)?;
        recon_acc = Some(match recon_acc {
            None => s,
            Some(acc) => t.add(acc, s)?,
        });
    }
    let recon = t.scale(recon_acc.expect("K ≥ 1 was validated"), 1.0 / k as f64)?;

    let kl_rows = if model.prior.is_gaussian() {
        graph::gaussian_kl_rows(&mut t, mean, log_var, &model.prior, mv.prior_log_var)?
    } else {
        let mut acc: Option<Var> = None;
        for (z, eps) in zs.iter().zip(&noise.reparam) {
            let r = graph::mc_kl_rows(&mut t, log_var, *z, eps, &model.prior)?;
            acc = Some(match acc {
                None => r,
                Some(a) => t.add(a, r)?,
            });
        }
        t.scale(acc.expect("K ≥ 1 was validated"), 1.0 / k as f64)?
    };
    let kl = t.mean(kl_rows)?;

    let ent_rows = graph::encoder_entropy_rows(&mut t, log_var)?;
    let ent = t.mean(ent_rows)?;

    let mut divergence = None;
    let mut off_tape_seed = None;
    let mut off_tape_value = 0.0;
    let root = match &spec.kind {
        ObjectiveKind::Elbo => t.sub(recon, kl)?,
        ObjectiveKind::BetaVae { beta } => {
            let weighted = t.scale(kl, *beta)?;
            t.sub(recon, weighted)?
        }
        ObjectiveKind::EntropyRegElbo { beta } => {
            let base = t.sub(recon, kl)?;
            let log_det = t.row_sums(log_var)?;
            let mean_log_det = t.mean(log_det)?;
            let reg = t.scale(mean_log_det, 0.5 * (beta - 1.0))?;
            t.add(base, reg)?
        }
        ObjectiveKind::Decomp { alpha, beta, divergence: kind } => {
            let weighted = t.scale(kl, *beta)?;
            let base = t.sub(recon, weighted)?;
            if *alpha == 0.0 {
                base
            } else {
                let draws = noise.prior_samples.as_ref().ok_or_else(|| {
                    Error::InvalidSpec(
                        "the decomposed objective needs prior draws in the noise bundle \
                         when α > 0"
                            .into(),
                    )
                })?;
                match kind {
                    DivergenceKind::InclusiveKl => {
                        let est =
                            graph::inclusive_kl_graph(&mut t, mean, log_var, draws, &model.prior)?;
                        divergence = Some(t.value(est).item()?);
                        let weighted = t.scale(est, *alpha)?;
                        t.sub(base, weighted)?
                    }
                    DivergenceKind::MmdDimwise => {
                        let z0 = t.value(zs[0]).clone();
                        let (value, grad) =
                            mmd_dimwise_cauchy_with_grad(&z0, draws, &CAUCHY_SCALES)?;
                        divergence = Some(value);
                        off_tape_value = -alpha * value;
                        off_tape_seed = Some(grad.map(|g| -alpha * g));
                        base
                    }
                }
            }
        }
    };

    let terms = ObjectiveTerms {
        objective: t.value(root).item()? + off_tape_value,
        reconstruction: t.value(recon).item()?,
        kl: t.value(kl).item()?,
        divergence,
        mean_encoder_entropy: t.value(ent).item()?,
    };
    let finite = terms.objective.is_finite()
        && terms.reconstruction.is_finite()
        && terms.kl.is_finite()
        && terms.mean_encoder_entropy.is_finite()
        && terms.divergence.map_or(true, f64::is_finite);
    if !finite {
        return Err(Error::NonFinite { op: "objective" });
    }
    Ok(BuiltGraph { tape: t, mv, root, first_z: zs[0], terms, off_tape_seed })
}

/// Evaluates the objective on one batch with fixed noise.
pub fn evaluate(
    model: &VaeModel,
    spec: &ObjectiveSpec,
    x: &Tensor,
    noise: &NoiseBundle,
) -> Result<ObjectiveTerms> {
    Ok(build_graph(model, spec, x, noise)?.terms)
}

/// Evaluates the objective and its gradients with respect to every trainable
/// parameter, in [`VaeModel::param_slices`] order.
pub fn evaluate_with_grads(
    model: &VaeModel,
    spec: &ObjectiveSpec,
    x: &Tensor,
    noise: &NoiseBundle,
) -> Result<ObjectiveEval> {
    let built = build_graph(model, spec, x, noise)?;
    let main = built.tape.backward(built.root)?;
    let extra = match built.off_tape_seed {
        Some(seed) => Some(built.tape.backward_seeded(built.first_z, seed)?),
        None => None,
    };
    let mut grads = Vec::new();
    for v in built.mv.all() {
        let shape = built.tape.shape(v).to_vec();
        let mut g = main.get_or_zeros(v, &shape);
        if let Some(more) = extra.as_ref().and_then(|e| e.get(v)) {
            g = g.zip_map(more, "gradient_merge", |a, b| a + b)?;
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "objective_gradients" });
        }
        grads.push(g);
    }
    Ok(ObjectiveEval { terms: built.terms, grads })
}

/// Mean ELBO over the batch; K is taken from the bundle.
pub fn elbo(model: &VaeModel, x: &Tensor, noise: &NoiseBundle) -> Result<f64> {
    let spec = ObjectiveSpec::new(ObjectiveKind::Elbo, noise.reparam.len());
    Ok(evaluate(model, &spec, x, noise)?.objective)
}

/// ELBO with the KL term weighted by β.
pub fn beta_vae(model: &VaeModel, x: &Tensor, beta: f64, noise: &NoiseBundle) -> Result<f64> {
    let spec = ObjectiveSpec::new(ObjectiveKind::BetaVae { beta }, noise.reparam.len());
    Ok(evaluate(model, &spec, x, noise)?.objective)
}

/// ELBO plus ((β−1)/2)·log|S(x)| averaged over the batch, S the posterior
/// covariance.
pub fn entropy_reg_elbo(
    model: &VaeModel,
    x: &Tensor,
    beta: f64,
    noise: &NoiseBundle,
) -> Result<f64> {
    let spec = ObjectiveSpec::new(ObjectiveKind::EntropyRegElbo { beta }, noise.reparam.len());
    Ok(evaluate(model, &spec, x, noise)?.objective)
}

/// Reconstruction − β·KL − α·D(q(z), p(z)).
pub fn decomp_objective(
    model: &VaeModel,
    x: &Tensor,
    alpha: f64,
    beta: f64,
    divergence: DivergenceKind,
    noise: &NoiseBundle,
) -> Result<f64> {
    let spec =
        ObjectiveSpec::new(ObjectiveKind::Decomp { alpha, beta, divergence }, noise.reparam.len());
    Ok(evaluate(model, &spec, x, noise)?.objective)
}
