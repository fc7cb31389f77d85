//! Gaussian-mixture score on the mean-centered subspace and a numerical
//! comparison of score-matching and denoising gradients.

use denoise_tensor::{shifted_softplus, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("point is not mean-centered (largest axis mean {0:e})")]
    NotCentered(f64),
    #[error("expected a vector of length {expected}, got {found}")]
    Length { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

const CENTER_TOL: f64 = 1e-9;

fn axis_means(x: &[f64]) -> [f64; 3] {
    let n = (x.len() / 3).max(1) as f64;
    let mut m = [0.0; 3];
    for p in x.chunks_exact(3) {
        for k in 0..3 {
            m[k] += p[k];
        }
    }
    m.map(|v| v / n)
}

/// Subtracts the per-axis mean over atoms from a flattened `3N` vector
/// (`[x0, y0, z0, x1, ...]`).
pub fn project_mean_center(x: &[f64]) -> Vec<f64> {
    let m = axis_means(x);
    x.chunks_exact(3)
        .flat_map(|p| [p[0] - m[0], p[1] - m[1], p[2] - m[2]])
        .collect()
}

fn is_centered(x: &[f64]) -> Result<(), OracleError> {
    let scale = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let worst = axis_means(x).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if worst > CENTER_TOL * scale {
        return Err(OracleError::NotCentered(worst));
    }
    Ok(())
}

/// Orthonormal basis of the mean-centered subspace, by Gram-Schmidt on
/// random combinations of the difference vectors `e(i,k) - e(N-1,k)`.
pub fn orthonormal_basis(n_atoms: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let dim = 3 * n_atoms;
    let spanning: Vec<Vec<f64>> = (0..n_atoms.saturating_sub(1))
        .flat_map(|i| {
            (0..3).map(move |k| {
                let mut v = vec![0.0; dim];
                v[3 * i + k] = 1.0;
                v[3 * (n_atoms - 1) + k] = -1.0;
                v
            })
        })
        .collect();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spanning.len());
    for _ in 0..spanning.len() {
        let mut v = vec![0.0; dim];
        for s in &spanning {
            let c: f64 = StandardNormal.sample(rng);
            v.iter_mut().zip(s).for_each(|(a, b)| *a += c * b);
        }
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(a, bb)| *a -= d * bb);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        basis.push(v);
    }
    basis
}

/// Equal-weight isotropic Gaussian mixture over mean-centered structures.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    centers: Vec<Vec<f64>>,
    sigma: f64,
    n_atoms: usize,
}

impl MixtureModel {
    pub fn new(centers: Vec<Vec<f64>>, sigma: f64) -> Result<Self, OracleError> {
        let first = centers
            .first()
            .ok_or_else(|| OracleError::InvalidMixture("no centers".into()))?;
        if first.is_empty() || first.len() % 3 != 0 {
            return Err(OracleError::InvalidMixture(format!("center length {} is not 3N", first.len())));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(OracleError::InvalidMixture(format!("sigma must be positive, got {sigma}")));
        }
        for c in &centers {
            if c.len() != first.len() {
                return Err(OracleError::InvalidMixture("centers differ in atom count".into()));
            }
            is_centered(c)?;
        }
        let n_atoms = first.len() / 3;
        Ok(Self { centers, sigma, n_atoms })
    }

    /// Mixture with `n_centers` random centered structures whose coordinates
    /// are standard normal times `spread`.
    pub fn random(n_centers: usize, n_atoms: usize, sigma: f64, spread: f64, rng: &mut impl Rng) -> Result<Self, OracleError> {
        let centers = (0..n_centers)
            .map(|_| {
                let x: Vec<f64> = (0..3 * n_atoms)
                    .map(|_| spread * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
                    .collect();
                project_mean_center(&x)
            })
            .collect();
        Self::new(centers, sigma)
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn dim(&self) -> usize {
        3 * self.n_atoms
    }

    pub fn subspace_dim(&self) -> usize {
        3 * self.n_atoms - 3
    }

    fn check(&self, x: &[f64]) -> Result<(), OracleError> {
        if x.len() != self.dim() {
            return Err(OracleError::Length {
                expected: self.dim(),
                found: x.len(),
            });
        }
        is_centered(x)
    }

    /// `-|x - x_i|^2 / (2 sigma^2)` per center.
    fn exponents(&self, x: &[f64]) -> Vec<f64> {
        let s2 = 2.0 * self.sigma * self.sigma;
        self.centers
            .iter()
            .map(|c| -c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s2)
            .collect()
    }

    fn log_sum_exp(a: &[f64]) -> f64 {
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    }

    /// Posterior weight of each center at `x`.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        self.check(x)?;
        let a = self.exponents(x);
        let lse = Self::log_sum_exp(&a);
        Ok(a.iter().map(|v| (v - lse).exp()).collect())
    }

    /// Log density on the `(3N-3)`-dimensional subspace.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, OracleError> {
        self.check(x)?;
        let d = self.subspace_dim() as f64;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * self.sigma * self.sigma).ln();
        Ok(norm + Self::log_sum_exp(&self.exponents(x)) - (self.centers.len() as f64).ln())
    }

    /// Draws a center index uniformly and adds projected Gaussian noise.
    /// Returns `(center index, noisy point)`.
    pub fn sample(&self, rng: &mut impl Rng) -> (usize, Vec<f64>) {
        let k = rng.random_range(0..self.centers.len());
        let eps: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let eps = project_mean_center(&eps);
        let x = self.centers[k].iter().zip(&eps).map(|(c, e)| c + self.sigma * e).collect();
        (k, x)
    }
}

/// Gradient of the mixture log density: `sum_i w_i (x_i - x) / sigma^2`.
pub fn mixture_score(m: &MixtureModel, x: &[f64]) -> Result<Vec<f64>, OracleError> {
    let w = m.weights(x)?;
    let inv = 1.0 / (m.sigma * m.sigma);
    let mut s = vec![0.0; x.len()];
    for (wi, c) in w.iter().zip(&m.centers) {
        for ((sj, cj), xj) in s.iter_mut().zip(c).zip(x) {
            *sj += wi * (cj - xj) * inv;
        }
    }
    Ok(s)
}

/// Denoising target `(x - x~) / sigma^2` for noisy point `x~` drawn from `x`.
pub fn denoising_target(center: &[f64], noisy: &[f64], sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (sigma * sigma);
    center.iter().zip(noisy).map(|(c, x)| (c - x) * inv).collect()
}

/// Two-layer network `ssp(x W1 + b1) W2 + b2` from `R^d` to `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TinyNet {
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |rows: usize, cols: usize, std: f64| {
            let d = (0..rows * cols)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
                .collect();
            Tensor::new(vec![rows, cols], d).expect("sized")
        };
        let w1 = draw(dim, hidden, 1.0 / (dim as f64).sqrt());
        let b1 = draw(1, hidden, 0.1).reshape(vec![hidden]).expect("sized");
        let w2 = draw(hidden, dim, 1.0 / (hidden as f64).sqrt());
        let b2 = draw(1, dim, 0.1).reshape(vec![dim]).expect("sized");
        Self { w1, b1, w2, b2 }
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn dims(&self) -> (usize, usize) {
        (self.w1.rows(), self.w1.cols())
    }

    /// Gradient of `delta . f(x)` with respect to all parameters, flattened
    /// in the order w1, b1, w2, b2.
    fn vjp(&self, x: &[f64], delta: &[f64], out: &mut [f64]) {
        let (d, h) = self.dims();
        let (w1, b1, w2) = (self.w1.data(), self.b1.data(), self.w2.data());
        let mut z = b1.to_vec();
        for k in 0..d {
            for i in 0..h {
                z[i] += x[k] * w1[k * h + i];
            }
        }
        let act: Vec<f64> = z.iter().map(|&v| shifted_softplus(v)).collect();
        let (gw1, rest) = out.split_at_mut(d * h);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h * d);
        gb2.copy_from_slice(delta);
        let mut dz = vec![0.0; h];
        for i in 0..h {
            let mut acc = 0.0;
            for j in 0..d {
                gw2[i * d + j] = act[i] * delta[j];
                acc += w2[i * d + j] * delta[j];
            }
            // derivative of softplus is the logistic function
            dz[i] = acc / (1.0 + (-z[i]).exp());
        }
        gb1.copy_from_slice(&dz);
        for k in 0..d {
            for i in 0..h {
                gw1[k * h + i] = x[k] * dz[i];
            }
        }
    }
}

/// Outcome of [`j1_j2_gradient_gap`].
#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    /// `max_p |g1_p - g2_p| / (|g2| / sqrt(P) + 1e-12)`.
    pub gap: f64,
    /// Largest per-parameter Monte-Carlo standard error of `g1_p - g2_p`, on
    /// the same normalized scale as `gap`.
    pub standard_error: f64,
    pub grad_norm_j1: f64,
    pub grad_norm_j2: f64,
    pub loss_j1: f64,
    pub loss_j2: f64,
    pub n_params: usize,
    pub n_samples: usize,
}

impl GapReport {
    /// Gap within `k` standard errors of zero.
    pub fn within(&self, k: f64) -> bool {
        self.gap <= k * self.standard_error
    }
}

const GAP_CHUNK: usize = 2048;

/// Gradients of the score-matching loss `J1 = E |f(x~) - score(x~)|^2 / 2`
/// and the denoising loss `J2 = E |f(x~) - (x - x~)/sigma^2|^2 / 2`, estimated
/// on the same `(x, x~)` samples.
pub fn j1_j2_gradient_gap(
    net: &TinyNet,
    mixture: &MixtureModel,
    n_samples: usize,
    seed: u64,
) -> Result<GapReport, OracleError> {
    let (d, _) = net.dims();
    if d != mixture.dim() {
        return Err(OracleError::Length {
            expected: mixture.dim(),
            found: d,
        });
    }
    let p = net.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g1 = vec![0.0; p];
    let mut g2 = vec![0.0; p];
    let (mut l1, mut l2) = (0.0, 0.0);
    let mut sum_sq = vec![0.0; p];
    let mut per_sample = vec![0.0; p];
    let scale = 1.0 / n_samples as f64;
    let mut done = 0;
    while done < n_samples {
        let b = GAP_CHUNK.min(n_samples - done);
        let (mut xs, mut t1, mut t2) = (Vec::with_capacity(b * d), Vec::with_capacity(b * d), Vec::with_capacity(b * d));
        for _ in 0..b {
            let (k, x) = mixture.sample(&mut rng);
            let s1 = mixture_score(mixture, &x)?;
            let s2 = denoising_target(&mixture.centers[k], &x, mixture.sigma);
            let delta: Vec<f64> = s2.iter().zip(&s1).map(|(a, c)| a - c).collect();
            net.vjp(&x, &delta, &mut per_sample);
            sum_sq.iter_mut().zip(&per_sample).for_each(|(a, v)| *a += v * v);
            xs.extend_from_slice(&x);
            t1.extend(s1);
            t2.extend(s2);
        }
        let (a, la) = chunk_grad(net, &xs, &t1, b, scale)?;
        let (c, lc) = chunk_grad(net, &xs, &t2, b, scale)?;
        g1.iter_mut().zip(a).for_each(|(x, v)| *x += v);
        g2.iter_mut().zip(c).for_each(|(x, v)| *x += v);
        l1 += la;
        l2 += lc;
        done += b;
    }
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm(&g2) / (p as f64).sqrt() + 1e-12;
    let gap = g1.iter().zip(&g2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / denom;
    let n = n_samples as f64;
    let se = g1
        .iter()
        .zip(&g2)
        .zip(&sum_sq)
        .map(|((a, b), s)| {
            let mean = a - b;
            let var = (s / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
            (var / n).sqrt()
        })
        .fold(0.0, f64::max)
        / denom;
    Ok(GapReport {
        gap,
        standard_error: se,
        grad_norm_j1: norm(&g1),
        grad_norm_j2: norm(&g2),
        loss_j1: l1,
        loss_j2: l2,
        n_params: p,
        n_samples,
    })
}

/// Tape gradient of `scale * sum_s |f(x_s) - t_s|^2 / 2` over one chunk.
fn chunk_grad(net: &TinyNet, xs: &[f64], targets: &[f64], b: usize, scale: f64) -> Result<(Vec<f64>, f64), OracleError> {
    let (d, _) = net.dims();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![b, d], xs.to_vec())?);
    let t = tape.constant(Tensor::new(vec![b, d], targets.to_vec())?);
    let w1 = tape.param(net.w1.clone());
    let b1 = tape.param(net.b1.clone());
    let w2 = tape.param(net.w2.clone());
    let b2 = tape.param(net.b2.clone());
    let z = tape.matmul(x, w1)?;
    let z = tape.add_bias(z, b1)?;
    let h = tape.shifted_softplus(z);
    let y = tape.matmul(h, w2)?;
    let y = tape.add_bias(y, b2)?;
    let r = tape.sub(y, t)?;
    let sq = tape.square(r);
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5 * scale);
    let grads = tape.grad(loss, &[w1, b1, w2, b2])?;
    let flat = grads.into_iter().flat_map(Tensor::into_data).collect();
    Ok((flat, tape.value(loss).item()))
}
