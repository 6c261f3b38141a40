//! Encoder/decoder networks and the assembled VAE.
//!
//! A [`VaeModel`] bundles an encoder MLP whose last layer emits mean and
//! log-variance rows, a decoder MLP, a prior, and a likelihood. Two
//! network transformations are first-class: [`VaeModel::rescale_networks`]
//! scales the posterior and inversely scales the decoder input, and
//! [`VaeModel::rotate_networks`] conjugates the latent space by a rotation.
//! Both leave the data-space behaviour of matched samples unchanged, which
//! is what the verification harness checks.

use rand::Rng;

use crate::dist::{GaussianPosterior, Likelihood, Prior};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tape::{Tape, Var};
use crate::tensor::{identity, Tensor};

/// Elementwise nonlinearity applied after a layer's affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softplus,
    Sigmoid,
}

impl Activation {
    fn apply_scalar(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Softplus => {
                // ln(1 + e^v) without overflow for large v.
                if v > 30.0 {
                    v + (-v).exp().ln_1p()
                } else {
                    v.exp().ln_1p()
                }
            }
            Activation::Sigmoid => crate::tape::stable_sigmoid(v),
        }
    }

    fn apply_tape(self, t: &mut Tape, h: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(h),
            Activation::Relu => t.relu(h),
            Activation::Tanh => t.tanh(h),
            Activation::Softplus => t.softplus(h),
            Activation::Sigmoid => t.sigmoid(h),
        }
    }
}

/// One affine layer: weight is (fan_in × fan_out), bias is a (1 × fan_out)
/// row added to every output row.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// A plain fully-connected network operating on row-major batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Builds a network with the given layer widths. Hidden layers use
    /// `hidden`, the last layer uses `output`. Weights and biases start
    /// uniform in ±1/√fan_in.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!(
                "network needs at least input and output widths, all nonzero; got {:?}",
                dims
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = Tensor::new(
                vec![fan_in, fan_out],
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect(),
            )?;
            let bias = Tensor::new(
                vec![1, fan_out],
                (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect(),
            )?;
            layers.push(Layer { weight, bias, activation: hidden });
        }
        layers.last_mut().expect("at least one layer").activation = output;
        Ok(Mlp { layers })
    }

    /// Assembles a network from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("network needs at least one layer".into()));
        }
        for l in &layers {
            if l.weight.rank() != 2 || l.bias.shape() != [1, l.weight.ncols()] {
                return Err(Error::Shape {
                    op: "mlp_from_layers",
                    detail: format!(
                        "weight {:?} needs bias shape [1, {}], got {:?}",
                        l.weight.shape(),
                        l.weight.ncols(),
                        l.bias.shape()
                    ),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].weight.ncols() != pair[1].weight.nrows() {
                return Err(Error::Shape {
                    op: "mlp_from_layers",
                    detail: format!(
                        "layer output width {} does not feed layer input width {}",
                        pair[0].weight.ncols(),
                        pair[1].weight.nrows()
                    ),
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// A single-layer network computing the identity on `dim` inputs.
    pub fn identity(dim: usize) -> Self {
        let layer = Layer {
            weight: identity(dim),
            bias: Tensor::zeros(vec![1, dim]),
            activation: Activation::Identity,
        };
        Mlp { layers: vec![layer] }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.shape()[1]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Forward pass over a batch of rows; checks the result stays finite.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.ncols() != self.in_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                detail: format!(
                    "input {:?} does not match network input width {}",
                    x.shape(),
                    self.in_dim()
                ),
            });
        }
        let mut h = x.clone();
        for l in &self.layers {
            let mut a = h.matmul(&l.weight)?;
            let (n, d) = (a.nrows(), a.ncols());
            let b = l.bias.data();
            let data = a.data_mut();
            for i in 0..n {
                for j in 0..d {
                    data[i * d + j] = l.activation.apply_scalar(data[i * d + j] + b[j]);
                }
            }
            h = a;
        }
        if !h.is_finite() {
            return Err(Error::NonFinite { op: "mlp_forward" });
        }
        Ok(h)
    }

    /// Forward pass on a tape. `vars` must come from [`Mlp::leaf_vars`] (or
    /// share its layout: weight then bias per layer).
    pub fn forward_tape(&self, t: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        if vars.len() != 2 * self.layers.len() {
            return Err(Error::Shape {
                op: "mlp_forward_tape",
                detail: format!(
                    "expected {} parameter nodes, got {}",
                    2 * self.layers.len(),
                    vars.len()
                ),
            });
        }
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let a = t.matmul(h, vars[2 * i])?;
            let a = t.broadcast_add_rowvec(a, vars[2 * i + 1])?;
            h = l.activation.apply_tape(t, a)?;
        }
        Ok(h)
    }

    /// Registers every parameter as a tape leaf, in parameter order.
    pub fn leaf_vars(&self, t: &mut Tape) -> Result<Vec<Var>> {
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            vars.push(t.leaf(l.weight.clone())?);
            vars.push(t.leaf(l.bias.clone())?);
        }
        Ok(vars)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// Latent-space change of variables carried by a transformed model.
#[derive(Clone, Debug)]
pub enum PosteriorTransform {
    /// Mean scaled by √β, covariance by β; decoder sees z/√β.
    Rescale { beta: f64 },
    /// Mean rotated to Rμ; the covariance factor becomes the exact product
    /// R·L so matched noise maps through both models without refactoring.
    Rotate { r: Tensor },
}

/// A VAE: encoder, decoder, prior, likelihood, and an optional latent
/// transform installed by [`VaeModel::rescale_networks`] or
/// [`VaeModel::rotate_networks`].
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub prior: Prior,
    pub likelihood: Likelihood,
    latent_dim: usize,
    transform: Option<PosteriorTransform>,
    /// Matrix applied to z before the decoder; always the inverse of the
    /// posterior-side map.
    pre_decoder: Option<Tensor>,
}

impl VaeModel {
    pub fn new(encoder: Mlp, decoder: Mlp, prior: Prior, likelihood: Likelihood) -> Result<Self> {
        let latent_dim = decoder.in_dim();
        if encoder.out_dim() != 2 * latent_dim {
            return Err(Error::Shape {
                op: "vae_new",
                detail: format!(
                    "encoder emits {} values but mean and log-variance for {} latents need {}",
                    encoder.out_dim(),
                    latent_dim,
                    2 * latent_dim
                ),
            });
        }
        if prior.dim() != latent_dim {
            return Err(Error::Shape {
                op: "vae_new",
                detail: format!(
                    "prior is {}-dimensional, decoder expects {}",
                    prior.dim(),
                    latent_dim
                ),
            });
        }
        likelihood.validate()?;
        Ok(VaeModel {
            encoder,
            decoder,
            prior,
            likelihood,
            latent_dim,
            transform: None,
            pre_decoder: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn transform(&self) -> Option<&PosteriorTransform> {
        self.transform.as_ref()
    }

    /// Posterior for a single observation.
    pub fn encode(&self, x: &[f64]) -> Result<GaussianPosterior> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let out = self.encoder.forward(&xt)?;
        let d = self.latent_dim;
        let mean: Vec<f64> = out.data()[..d].to_vec();
        let log_var: Vec<f64> = out.data()[d..].to_vec();
        match &self.transform {
            None => GaussianPosterior::diagonal(mean, log_var),
            Some(PosteriorTransform::Rescale { beta }) => {
                let s = beta.sqrt();
                let mean = mean.iter().map(|m| s * m).collect();
                let log_var = log_var.iter().map(|lv| lv + beta.ln()).collect();
                GaussianPosterior::diagonal(mean, log_var)
            }
            Some(PosteriorTransform::Rotate { r }) => {
                let rotated_mean = matvec(r, &mean)?;
                let mut factor = Tensor::zeros(vec![d, d]);
                for i in 0..d {
                    for j in 0..d {
                        factor.set2(i, j, r.get2(i, j) * (0.5 * log_var[j]).exp());
                    }
                }
                Ok(GaussianPosterior::from_factor_unchecked(rotated_mean, factor))
            }
        }
    }

    /// Posteriors for every row of a batch.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Vec<GaussianPosterior>> {
        (0..x.nrows()).map(|i| self.encode(x.row(i))).collect()
    }

    /// Decoder mean for one latent vector, through the pre-decoder map.
    pub fn decode_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        let z = match &self.pre_decoder {
            Some(p) => matvec(p, z)?,
            None => z.to_vec(),
        };
        let zt = Tensor::new(vec![1, z.len()], z)?;
        Ok(self.decoder.forward(&zt)?.into_data())
    }

    /// log p(x | z) under the model's likelihood.
    pub fn decode_log_prob(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        let mean = self.decode_mean(z)?;
        self.likelihood.log_prob(x, &mean)
    }

    /// The rescaling transformation: posterior mean √β μ, covariance β S,
    /// decoder input z/√β. Composes with an existing rescale.
    pub fn rescale_networks(&self, beta: f64) -> Result<VaeModel> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidSpec(format!("rescaling needs β > 0, got {}", beta)));
        }
        let mut m = self.clone();
        match &self.transform {
            None => {
                m.transform = Some(PosteriorTransform::Rescale { beta });
            }
            Some(PosteriorTransform::Rescale { beta: prev }) => {
                m.transform = Some(PosteriorTransform::Rescale { beta: prev * beta });
            }
            Some(PosteriorTransform::Rotate { .. }) => {
                return Err(Error::Incompatible(
                    "cannot rescale a rotated model; the posterior is no longer diagonal".into(),
                ));
            }
        }
        let inv = scaled_identity(self.latent_dim, 1.0 / beta.sqrt());
        m.pre_decoder = Some(compose_pre_decoder(&self.pre_decoder, &inv)?);
        Ok(m)
    }

    /// The rotation transformation: posterior N(Rμ, R S Rᵀ) via the exact
    /// factor R L, decoder input Rᵀ z. Composes with an existing rotation.
    pub fn rotate_networks(&self, r: &Tensor) -> Result<VaeModel> {
        let d = self.latent_dim;
        if r.shape() != [d, d] {
            return Err(Error::Shape {
                op: "rotate_networks",
                detail: format!("rotation must be {}×{}, got {:?}", d, d, r.shape()),
            });
        }
        let defect = linalg::orthogonality_defect(r)?;
        if defect > 1e-10 {
            return Err(Error::Domain {
                op: "rotate_networks",
                detail: format!("matrix is not orthogonal (defect {:.2e})", defect),
            });
        }
        let det = linalg::det(r)?;
        if (det - 1.0).abs() > 1e-10 {
            return Err(Error::Domain {
                op: "rotate_networks",
                detail: format!("matrix is not a proper rotation (det {})", det),
            });
        }
        let mut m = self.clone();
        match &self.transform {
            None => {
                m.transform = Some(PosteriorTransform::Rotate { r: r.clone() });
            }
            Some(PosteriorTransform::Rotate { r: prev }) => {
                m.transform = Some(PosteriorTransform::Rotate { r: r.matmul(prev)? });
            }
            Some(PosteriorTransform::Rescale { .. }) => {
                return Err(Error::Incompatible(
                    "cannot rotate a rescaled model; undo the rescaling first".into(),
                ));
            }
        }
        m.pre_decoder = Some(compose_pre_decoder(&self.pre_decoder, &r.transpose()?)?);
        Ok(m)
    }

    /// Registers all trainable parameters as tape leaves, in the same order
    /// as [`VaeModel::param_slices_mut`]: encoder layers, decoder layers,
    /// then prior log-variances when the prior is learnable.
    pub fn leaf_vars(&self, t: &mut Tape) -> Result<ModelVars> {
        let encoder = self.encoder.leaf_vars(t)?;
        let decoder = self.decoder.leaf_vars(t)?;
        let prior_log_var = match &self.prior {
            Prior::DiagGaussian { log_variances, learnable: true } => {
                let lv = Tensor::new(vec![1, log_variances.len()], log_variances.clone())?;
                Some(t.leaf(lv)?)
            }
            _ => None,
        };
        Ok(ModelVars { encoder, decoder, prior_log_var })
    }

    /// Mutable views of every trainable parameter, in leaf order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for p in self.encoder.params_mut() {
            out.push(p.data_mut());
        }
        for p in self.decoder.params_mut() {
            out.push(p.data_mut());
        }
        if let Prior::DiagGaussian { log_variances, learnable: true } = &mut self.prior {
            out.push(log_variances.as_mut_slice());
        }
        out
    }

    /// Immutable views of every trainable parameter, in leaf order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for p in self.encoder.params() {
            out.push(p.data());
        }
        for p in self.decoder.params() {
            out.push(p.data());
        }
        if let Prior::DiagGaussian { log_variances, learnable: true } = &self.prior {
            out.push(log_variances.as_slice());
        }
        out
    }

    /// Encoder forward on a tape: returns (mean rows, log-variance rows),
    /// with any rescaling folded in. Rotated models have full-covariance
    /// posteriors and no tape form.
    pub fn encode_tape(&self, t: &mut Tape, x: Var, mv: &ModelVars) -> Result<(Var, Var)> {
        let out = self.encoder.forward_tape(t, x, &mv.encoder)?;
        let d = self.latent_dim;
        let mean = t.slice(out, 0, d)?;
        let log_var = t.slice(out, d, d)?;
        match &self.transform {
            None => Ok((mean, log_var)),
            Some(PosteriorTransform::Rescale { beta }) => {
                let mean = t.scale(mean, beta.sqrt())?;
                let log_var = t.offset(log_var, beta.ln())?;
                Ok((mean, log_var))
            }
            Some(PosteriorTransform::Rotate { .. }) => Err(Error::Incompatible(
                "rotated models have full-covariance posteriors with no tape form".into(),
            )),
        }
    }

    /// Decoder forward on a tape, through the pre-decoder map.
    pub fn decode_tape(&self, t: &mut Tape, z: Var, mv: &ModelVars) -> Result<Var> {
        let z = match &self.pre_decoder {
            Some(p) => {
                let c = t.constant(p.transpose()?)?;
                t.matmul(z, c)?
            }
            None => z,
        };
        self.decoder.forward_tape(t, z, &mv.decoder)
    }
}

/// Tape leaves for one model, in parameter order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub prior_log_var: Option<Var>,
}

impl ModelVars {
    /// All leaves flattened, matching `param_slices` order.
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.encoder.iter().chain(&self.decoder).copied().collect();
        if let Some(p) = self.prior_log_var {
            v.push(p);
        }
        v
    }
}

fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = (a.nrows(), a.ncols());
    if d != x.len() {
        return Err(Error::Shape {
            op: "matvec",
            detail: format!("matrix has {} columns, vector has {}", d, x.len()),
        });
    }
    let data = a.data();
    Ok((0..n).map(|i| (0..d).map(|j| data[i * d + j] * x[j]).sum()).collect())
}

fn scaled_identity(d: usize, s: f64) -> Tensor {
    let mut t = identity(d);
    for v in t.data_mut() {
        *v *= s;
    }
    t
}

/// New map comes after the existing one along the decode path, so the
/// composite applies `existing · addition` to z.
fn compose_pre_decoder(existing: &Option<Tensor>, addition: &Tensor) -> Result<Tensor> {
    match existing {
        Some(p) => p.matmul(addition),
        None => Ok(addition.clone()),
    }
}
