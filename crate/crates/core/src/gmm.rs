//! Gaussian mixture over demonstrated actions, fitted by EM, used to snap a
//! predicted action to the nearest component mean.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Action dimensions the mixture models; `None` means all of them.
    pub omega: Option<Vec<usize>>,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            k: 6,
            tol: 1e-8,
            max_iter: 500,
            seed: 0,
            omega: None,
        }
    }
}

/// A fitted mixture. `means` and `covariances` live in the `omega`
/// subspace; covariances are row-major `dim x dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    pub omega: Vec<usize>,
    /// Blend factor λ: `a* = (1 - λ) a + λ μ`. 1.0 snaps to the mean.
    #[serde(default = "one")]
    pub blend: f64,
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub log_likelihood: Vec<f64>,
    #[serde(default)]
    pub ridge: f64,
}

fn one() -> f64 {
    1.0
}

/// Lower Cholesky factor of a row-major SPD matrix.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::numeric("cholesky", format!("matrix is not positive definite (pivot {i}: {s})")));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L y = b` by forward substitution.
fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * n + p] * y[p];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// `sqrt((a - μ)ᵀ Σ⁻¹ (a - μ))` through the Cholesky factor of `Σ`.
pub fn mahalanobis(a: &[f64], mean: &[f64], cov: &[f64]) -> Result<f64> {
    let n = mean.len();
    if a.len() != n || cov.len() != n * n {
        return Err(Error::dim("mahalanobis", format!("point {} / mean {n} / cov {}", a.len(), cov.len())));
    }
    let l = cholesky(cov, n)?;
    let diff: Vec<f64> = a.iter().zip(mean).map(|(x, m)| x - m).collect();
    let y = solve_lower(&l, n, &diff);
    Ok(y.iter().map(|v| v * v).sum::<f64>().sqrt())
}

struct Component {
    mean: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
}

impl Component {
    fn new(mean: Vec<f64>, cov: &[f64], d: usize) -> Result<Self> {
        let chol = cholesky(cov, d)?;
        let log_det = 2.0 * (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>();
        Ok(Self { mean, chol, log_det })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let y = solve_lower(&self.chol, d, &diff);
        let q: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (d as f64 * (2.0 * PI).ln() + self.log_det + q)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn covariance(points: &[Vec<f64>], resp: Option<(&[f64], usize, usize)>, mean: &[f64]) -> (Vec<f64>, f64) {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    let mut mass = 0.0;
    for (i, p) in points.iter().enumerate() {
        let w = match resp {
            Some((r, k, j)) => r[i * k + j],
            None => 1.0,
        };
        mass += w;
        for a in 0..d {
            let da = p[a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += w * da * (p[b] - mean[b]);
            }
        }
    }
    if mass > 0.0 {
        cov.iter_mut().for_each(|c| *c /= mass);
    }
    (cov, mass)
}

impl GmmModel {
    /// Fits by EM. Every M-step adds `ε_Σ I` to each covariance, with
    /// `ε_Σ = 1e-6 · tr(Σ̂) / d` from the pooled sample covariance.
    pub fn fit(samples: &[Vec<f64>], opts: &GmmOptions) -> Result<Self> {
        let full_dim = samples.first().map(|s| s.len()).unwrap_or(0);
        if full_dim == 0 {
            return Err(Error::Input("GMM needs non-empty samples of dimension at least 1".into()));
        }
        if opts.k == 0 || samples.len() < opts.k {
            return Err(Error::Input(format!("GMM with {} components needs at least that many samples, got {}", opts.k, samples.len())));
        }
        if samples.iter().any(|s| s.len() != full_dim) {
            return Err(Error::dim("fit_gmm", "samples have differing dimensions"));
        }
        let omega = opts.omega.clone().unwrap_or_else(|| (0..full_dim).collect());
        if omega.is_empty() || omega.iter().any(|&i| i >= full_dim) {
            return Err(Error::Config(format!("omega {omega:?} is not a subset of 0..{full_dim}")));
        }
        let points: Vec<Vec<f64>> = samples.iter().map(|s| omega.iter().map(|&i| s[i]).collect()).collect();
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("GMM samples must be finite".into()));
        }
        let d = omega.len();
        let n = points.len();
        let k = opts.k;

        let global_mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let (global_cov, _) = covariance(&points, None, &global_mean);
        let trace: f64 = (0..d).map(|i| global_cov[i * d + i]).sum();
        let degenerate = trace <= 0.0;
        let ridge = if degenerate { 1e-6 } else { 1e-6 * trace / d as f64 };
        let ridged = |mut c: Vec<f64>| {
            for i in 0..d {
                c[i * d + i] += ridge;
            }
            c
        };

        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut means = kmeans_pp(&points, k, &mut rng);
        let mut covs: Vec<Vec<f64>> = (0..k).map(|_| ridged(global_cov.clone())).collect();
        let mut weights = vec![1.0 / k as f64; k];
        let mut history = Vec::new();
        let mut resp = vec![0.0; n * k];
        let mut row = vec![0.0; k];
        for _ in 0..=opts.max_iter {
            // E-step: responsibilities and the log-likelihood of the current parameters.
            let comps = means
                .iter()
                .zip(&covs)
                .map(|(m, c)| Component::new(m.clone(), c, d))
                .collect::<Result<Vec<_>>>()?;
            let mut ll = 0.0;
            for (i, p) in points.iter().enumerate() {
                for j in 0..k {
                    row[j] = if weights[j] > 0.0 { weights[j].ln() + comps[j].log_pdf(p) } else { f64::NEG_INFINITY };
                }
                let lse = log_sum_exp(&row);
                ll += lse;
                for j in 0..k {
                    resp[i * k + j] = (row[j] - lse).exp();
                }
            }
            let converged = history.last().is_some_and(|&prev: &f64| ll - prev < opts.tol);
            history.push(ll);
            if converged || history.len() > opts.max_iter {
                break;
            }
            // M-step.
            for j in 0..k {
                let mass: f64 = (0..n).map(|i| resp[i * k + j]).sum();
                if mass <= 0.0 {
                    weights[j] = 0.0;
                    continue;
                }
                let mean: Vec<f64> = (0..d)
                    .map(|a| points.iter().enumerate().map(|(i, p)| resp[i * k + j] * p[a]).sum::<f64>() / mass)
                    .collect();
                let (cov, _) = covariance(&points, Some((&resp, k, j)), &mean);
                weights[j] = mass / n as f64;
                means[j] = mean;
                covs[j] = ridged(cov);
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(Self {
            k,
            dim: d,
            weights,
            means,
            covariances: covs,
            omega,
            blend: 1.0,
            degenerate,
            log_likelihood: history,
            ridge,
        })
    }

    pub fn distances(&self, a_omega: &[f64]) -> Result<Vec<f64>> {
        (0..self.k)
            .map(|j| mahalanobis(a_omega, &self.means[j], &self.covariances[j]))
            .collect()
    }

    /// Index of the Mahalanobis-nearest component; ties go to the lowest index.
    pub fn nearest(&self, a_omega: &[f64]) -> Result<(usize, f64)> {
        let dist = self.distances(a_omega)?;
        let mut best = (0, dist[0]);
        for (j, &l) in dist.iter().enumerate().skip(1) {
            if l < best.1 {
                best = (j, l);
            }
        }
        Ok(best)
    }

    /// Refines an action restricted to `omega`: the nearest mean, blended
    /// with the input when `blend < 1`.
    pub fn refine(&self, a_omega: &[f64]) -> Result<Vec<f64>> {
        let (j, _) = self.nearest(a_omega)?;
        let mu = &self.means[j];
        if self.blend == 1.0 {
            return Ok(mu.clone());
        }
        Ok(a_omega.iter().zip(mu).map(|(a, m)| (1.0 - self.blend) * a + self.blend * m).collect())
    }

    /// Applies [`GmmModel::refine`] to the `omega` entries of a full action.
    pub fn refine_action(&self, action: &[f64]) -> Result<Vec<f64>> {
        if let Some(&bad) = self.omega.iter().find(|&&i| i >= action.len()) {
            return Err(Error::dim("refine_action", format!("omega index {bad} outside action of length {}", action.len())));
        }
        let sub: Vec<f64> = self.omega.iter().map(|&i| action[i]).collect();
        let refined = self.refine(&sub)?;
        let mut out = action.to_vec();
        for (&i, v) in self.omega.iter().zip(refined) {
            out[i] = v;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.weights.len() != self.k
            || self.means.len() != self.k
            || self.covariances.len() != self.k
            || self.omega.len() != self.dim
            || self.means.iter().any(|m| m.len() != self.dim)
            || self.covariances.iter().any(|c| c.len() != self.dim * self.dim)
        {
            return Err(Error::Config("GMM arrays are inconsistent with k and dim".into()));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config(format!("blend {} must lie in [0, 1]", self.blend)));
        }
        for c in &self.covariances {
            cholesky(c, self.dim)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
