use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix, PsdMatrix};
use crate::model::SdeModel;
use crate::types::StateVector;

use super::kernel::SqExpKernel;

/// Diagonal jitter added to every Gram matrix.
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Gram matrices with a larger condition estimate are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Inducing locations Z with drift values U_F (M × d) and amplitude values U_b.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    pub locations: Vec<Vec<f64>>,
    pub drift_values: Vec<Vec<f64>>,
    pub amplitude_values: Vec<f64>,
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Serialized form of an [`NpsdeModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpsdeParams {
    pub dim: usize,
    pub drift_kernel: SqExpKernel,
    pub amplitude_kernel: SqExpKernel,
    pub inducing: InducingSet,
    /// Diagonal of the observation noise covariance R.
    pub noise_variance: Vec<f64>,
    pub jitter: f64,
}

/// Offsets of each parameter block inside the flat vector θ.
///
/// Layout: U_F (row-major M × d), U_b (M), log σ²_F, log ℓ_F (d),
/// log σ²_b, log ℓ_b (d), log R_ii (d).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThetaLayout {
    pub dim: usize,
    pub inducing: usize,
}

impl ThetaLayout {
    pub fn drift_value(&self, m: usize, i: usize) -> usize {
        m * self.dim + i
    }
    pub fn amplitude_value(&self, m: usize) -> usize {
        self.inducing * self.dim + m
    }
    /// Index 0 is log σ², index 1 + j is log ℓ_j.
    pub fn drift_hyper(&self, k: usize) -> usize {
        self.inducing * (self.dim + 1) + k
    }
    pub fn amplitude_hyper(&self, k: usize) -> usize {
        self.inducing * (self.dim + 1) + 1 + self.dim + k
    }
    pub fn noise(&self, i: usize) -> usize {
        self.inducing * (self.dim + 1) + 2 * (1 + self.dim) + i
    }
    pub fn len(&self) -> usize {
        self.inducing * (self.dim + 1) + 3 * self.dim + 2
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// First index of the log-hyperparameter block (kernels then noise).
    pub fn hyper_start(&self) -> usize {
        self.inducing * (self.dim + 1)
    }
}

/// Gram-matrix quantities reused by every evaluation of one GP interpolant.
#[derive(Clone, Debug)]
struct GpCache {
    kinv: Matrix,
    /// K⁻¹ U, M × outputs.
    alpha: Matrix,
    /// K⁻¹ (∂K/∂η) α per log-hyperparameter.
    hyper_alpha: Vec<Matrix>,
    /// ∂/∂η of Σ_cols log N(u_col; 0, K) per log-hyperparameter.
    prior_hyper_grad: Vec<f64>,
    log_prior: f64,
}

impl GpCache {
    fn new(kernel: &SqExpKernel, z: &[Vec<f64>], values: &Matrix, jitter: f64) -> Result<Self> {
        let k = kernel.gram(z, jitter);
        let chol = Cholesky::new(&k)?;
        let condition = chol.condition_estimate();
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Conditioning { condition });
        }
        let kinv = chol.inverse();
        let alpha = kinv.matmul(values);
        let m = z.len() as f64;
        let outputs = values.cols();
        let mut log_prior = -0.5 * outputs as f64 * (chol.log_det() + m * (2.0 * std::f64::consts::PI).ln());
        for c in 0..outputs {
            log_prior -= 0.5 * (0..z.len()).map(|a| values[(a, c)] * alpha[(a, c)]).sum::<f64>();
        }
        let mut hyper_alpha = Vec::with_capacity(kernel.hyper_count());
        let mut prior_hyper_grad = Vec::with_capacity(kernel.hyper_count());
        for h in 0..kernel.hyper_count() {
            let dk = kernel.gram_hyper_derivative(z, h);
            let dk_alpha = dk.matmul(&alpha);
            let trace: f64 = (0..z.len()).map(|a| (0..z.len()).map(|b| kinv[(a, b)] * dk[(b, a)]).sum::<f64>()).sum();
            let mut quad = 0.0;
            for c in 0..outputs {
                quad += (0..z.len()).map(|a| alpha[(a, c)] * dk_alpha[(a, c)]).sum::<f64>();
            }
            prior_hyper_grad.push(0.5 * quad - 0.5 * outputs as f64 * trace);
            hyper_alpha.push(kinv.matmul(&dk_alpha));
        }
        Ok(Self { kinv, alpha, hyper_alpha, prior_hyper_grad, log_prior })
    }
}

/// Sparse-GP SDE: F(x) = k_F(x, Z) K_F⁻¹ U_F and D(x) = ½ b(x)² I with
/// b(x) = k_b(x, Z) K_b⁻¹ U_b.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "NpsdeParams", into = "NpsdeParams")]
pub struct NpsdeModel {
    params: NpsdeParams,
    drift_cache: GpCache,
    amplitude_cache: GpCache,
}

impl PartialEq for NpsdeModel {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl TryFrom<NpsdeParams> for NpsdeModel {
    type Error = Error;
    fn try_from(p: NpsdeParams) -> Result<Self> {
        NpsdeModel::new(p)
    }
}

impl From<NpsdeModel> for NpsdeParams {
    fn from(m: NpsdeModel) -> Self {
        m.params
    }
}

/// Values and derivatives of F and b at one state, as needed by the
/// sensitivity recursion.
#[derive(Clone, Debug)]
pub struct LocalDerivatives {
    pub drift: Vec<f64>,
    /// ∂F_i/∂x_j.
    pub drift_jacobian: Matrix,
    /// ∂F_i/∂θ_p, d × P.
    pub drift_theta: Matrix,
    pub amplitude: f64,
    pub amplitude_grad: Vec<f64>,
    /// ∂b/∂θ_p.
    pub amplitude_theta: Vec<f64>,
    kx: Vec<f64>,
    weights: Vec<f64>,
}

impl LocalDerivatives {
    pub fn new(layout: ThetaLayout) -> Self {
        let (d, p) = (layout.dim, layout.len());
        Self {
            drift: vec![0.0; d],
            drift_jacobian: Matrix::zeros(d, d),
            drift_theta: Matrix::zeros(d, p),
            amplitude: 0.0,
            amplitude_grad: vec![0.0; d],
            amplitude_theta: vec![0.0; p],
            kx: vec![0.0; layout.inducing],
            weights: vec![0.0; layout.inducing],
        }
    }
}

impl NpsdeModel {
    pub fn new(params: NpsdeParams) -> Result<Self> {
        let d = params.dim;
        let ind = &params.inducing;
        let m = ind.len();
        if d == 0 || m == 0 {
            return Err(Error::InvalidArgument("dimension and inducing count must be positive".into()));
        }
        if ind.locations.iter().any(|z| z.len() != d)
            || ind.drift_values.len() != m
            || ind.drift_values.iter().any(|u| u.len() != d)
            || ind.amplitude_values.len() != m
            || params.noise_variance.len() != d
            || params.drift_kernel.dim() != d
            || params.amplitude_kernel.dim() != d
        {
            return Err(Error::Shape("npSDE parameter blocks disagree with the dimension".into()));
        }
        if params.noise_variance.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument("noise variances must be positive".into()));
        }
        for a in 0..m {
            for b in 0..a {
                if ind.locations[a] == ind.locations[b] {
                    return Err(Error::InvalidArgument(format!("inducing locations {b} and {a} coincide")));
                }
            }
        }
        let u_f = Matrix::from_rows(&ind.drift_values);
        let u_b = Matrix::from_row_slice(m, 1, &ind.amplitude_values);
        let drift_cache = GpCache::new(&params.drift_kernel, &ind.locations, &u_f, params.jitter)?;
        let amplitude_cache = GpCache::new(&params.amplitude_kernel, &ind.locations, &u_b, params.jitter)?;
        Ok(Self { params, drift_cache, amplitude_cache })
    }

    pub fn params(&self) -> &NpsdeParams {
        &self.params
    }

    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout { dim: self.params.dim, inducing: self.params.inducing.len() }
    }

    /// Flat parameter vector θ in [`ThetaLayout`] order.
    pub fn theta(&self) -> Vec<f64> {
        let p = &self.params;
        let mut t: Vec<f64> = p.inducing.drift_values.iter().flatten().copied().collect();
        t.extend(&p.inducing.amplitude_values);
        for k in [&p.drift_kernel, &p.amplitude_kernel] {
            t.push(k.variance.ln());
            t.extend(k.lengthscales.iter().map(|l| l.ln()));
        }
        t.extend(p.noise_variance.iter().map(|r| r.ln()));
        t
    }

    /// The same inducing locations with parameters θ.
    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        let lay = self.layout();
        if theta.len() != lay.len() {
            return Err(Error::Shape(format!("θ has {} entries, expected {}", theta.len(), lay.len())));
        }
        let (d, m) = (lay.dim, lay.inducing);
        let mut p = self.params.clone();
        p.inducing.drift_values = (0..m).map(|a| (0..d).map(|i| theta[lay.drift_value(a, i)]).collect()).collect();
        p.inducing.amplitude_values = (0..m).map(|a| theta[lay.amplitude_value(a)]).collect();
        p.drift_kernel = SqExpKernel::new(
            theta[lay.drift_hyper(0)].exp(),
            (0..d).map(|j| theta[lay.drift_hyper(1 + j)].exp()).collect(),
        )?;
        p.amplitude_kernel = SqExpKernel::new(
            theta[lay.amplitude_hyper(0)].exp(),
            (0..d).map(|j| theta[lay.amplitude_hyper(1 + j)].exp()).collect(),
        )?;
        p.noise_variance = (0..d).map(|i| theta[lay.noise(i)].exp()).collect();
        NpsdeModel::new(p)
    }

    /// Scalar amplitude b(x).
    pub fn amplitude(&self, x: &[f64]) -> f64 {
        let kx = self.params.amplitude_kernel.cross(x, &self.params.inducing.locations);
        kx.iter().enumerate().map(|(m, k)| k * self.amplitude_cache.alpha[(m, 0)]).sum()
    }

    /// Prior variance of the drift GP at x given the inducing values,
    /// k(x, x) − k(x, Z) K⁻¹ k(Z, x). Reported only.
    pub fn drift_conditional_variance(&self, x: &[f64]) -> f64 {
        let kx = self.params.drift_kernel.cross(x, &self.params.inducing.locations);
        let kinv_kx = self.drift_cache.kinv.mul_vec(&kx);
        self.params.drift_kernel.variance - kx.iter().zip(&kinv_kx).map(|(a, b)| a * b).sum::<f64>()
    }

    /// log P(θ): GP priors on U_F columns and U_b, standard normal on every
    /// log-hyperparameter.
    pub fn log_prior(&self) -> f64 {
        let lay = self.layout();
        let theta = self.theta();
        let hyper: f64 = theta[lay.hyper_start()..]
            .iter()
            .map(|e| -0.5 * e * e - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        self.drift_cache.log_prior + self.amplitude_cache.log_prior + hyper
    }

    pub fn log_prior_gradient(&self) -> Vec<f64> {
        let lay = self.layout();
        let theta = self.theta();
        let (d, m) = (lay.dim, lay.inducing);
        let mut g = vec![0.0; lay.len()];
        for a in 0..m {
            for i in 0..d {
                g[lay.drift_value(a, i)] = -self.drift_cache.alpha[(a, i)];
            }
            g[lay.amplitude_value(a)] = -self.amplitude_cache.alpha[(a, 0)];
        }
        for k in 0..=d {
            g[lay.drift_hyper(k)] = self.drift_cache.prior_hyper_grad[k];
            g[lay.amplitude_hyper(k)] = self.amplitude_cache.prior_hyper_grad[k];
        }
        for (p, t) in theta.iter().enumerate().skip(lay.hyper_start()) {
            g[p] -= t;
        }
        g
    }

    /// F, b and their state and parameter derivatives at x.
    pub fn local(&self, x: &[f64]) -> LocalDerivatives {
        let mut out = LocalDerivatives::new(self.layout());
        self.local_into(x, &mut out);
        out
    }

    /// [`NpsdeModel::local`] into a reused buffer made for this layout.
    pub fn local_into(&self, x: &[f64], out: &mut LocalDerivatives) {
        let lay = self.layout();
        let (d, m) = (lay.dim, lay.inducing);
        let z = &self.params.inducing.locations;

        let kf = &self.params.drift_kernel;
        let cf = &self.drift_cache;
        fill_cross(kf, x, z, &cf.kinv, &mut out.kx, &mut out.weights);
        out.drift.iter_mut().for_each(|v| *v = 0.0);
        out.drift_jacobian.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        for a in 0..m {
            for i in 0..d {
                out.drift[i] += out.kx[a] * cf.alpha[(a, i)];
                out.drift_theta[(i, lay.drift_value(a, i))] = out.weights[a];
            }
            for j in 0..d {
                let dk = -out.kx[a] * (x[j] - z[a][j]) / kf.lengthscales[j].powi(2);
                for i in 0..d {
                    out.drift_jacobian[(i, j)] += dk * cf.alpha[(a, i)];
                }
            }
        }
        for h in 0..kf.hyper_count() {
            for i in 0..d {
                let mut v = 0.0;
                for a in 0..m {
                    v += out.kx[a] * (kf.hyper_factor(x, &z[a], h) * cf.alpha[(a, i)] - cf.hyper_alpha[h][(a, i)]);
                }
                out.drift_theta[(i, lay.drift_hyper(h))] = v;
            }
        }

        let kb = &self.params.amplitude_kernel;
        let cb = &self.amplitude_cache;
        fill_cross(kb, x, z, &cb.kinv, &mut out.kx, &mut out.weights);
        out.amplitude = 0.0;
        out.amplitude_grad.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..m {
            out.amplitude += out.kx[a] * cb.alpha[(a, 0)];
            out.amplitude_theta[lay.amplitude_value(a)] = out.weights[a];
            for j in 0..d {
                out.amplitude_grad[j] -= out.kx[a] * (x[j] - z[a][j]) / kb.lengthscales[j].powi(2) * cb.alpha[(a, 0)];
            }
        }
        for h in 0..kb.hyper_count() {
            out.amplitude_theta[lay.amplitude_hyper(h)] = (0..m)
                .map(|a| out.kx[a] * (kb.hyper_factor(x, &z[a], h) * cb.alpha[(a, 0)] - cb.hyper_alpha[h][(a, 0)]))
                .sum();
        }
    }
}

fn fill_cross(kernel: &SqExpKernel, x: &[f64], z: &[Vec<f64>], kinv: &Matrix, kx: &mut [f64], weights: &mut [f64]) {
    for (k, za) in kx.iter_mut().zip(z) {
        *k = kernel.eval(x, za);
    }
    for (a, w) in weights.iter_mut().enumerate() {
        *w = kinv.row(a).iter().zip(kx.iter()).map(|(p, q)| p * q).sum();
    }
}

/// F(x) = K_F(x, Z) K_F(Z, Z)⁻¹ U_F.
pub fn gp_interp_drift(model: &NpsdeModel, x: &[f64]) -> StateVector {
    let kx = model.params.drift_kernel.cross(x, &model.params.inducing.locations);
    let alpha = &model.drift_cache.alpha;
    StateVector::new((0..model.params.dim).map(|i| kx.iter().enumerate().map(|(a, k)| k * alpha[(a, i)]).sum()).collect())
}

/// D(x) = ½ b(x)² I.
pub fn gp_interp_diffusion(model: &NpsdeModel, x: &[f64]) -> PsdMatrix {
    let b = model.amplitude(x);
    PsdMatrix::scalar_identity(model.params.dim, 0.5 * b * b)
}

impl SdeModel for NpsdeModel {
    fn dim(&self) -> usize {
        self.params.dim
    }

    fn drift(&self, x: &[f64]) -> StateVector {
        gp_interp_drift(self, x)
    }

    fn diffusion(&self, x: &[f64]) -> PsdMatrix {
        gp_interp_diffusion(self, x)
    }

    fn drift_jacobian(&self, x: &[f64]) -> Matrix {
        self.local(x).drift_jacobian
    }
}
