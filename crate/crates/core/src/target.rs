//! Target distributions and the isotropic Gaussian-mixture family.
//!
//! A mixture is closed under the Ornstein-Uhlenbeck forward process, so the
//! exact law at any forward time, and therefore its score, is available in
//! closed form. That makes mixtures the reference targets for checking the
//! non-parametric score estimator.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::counter::GradientCounter;
use crate::error::{check_dim, Error, Result};
use crate::particles::ParticleSet;
use crate::rng::RngStream;

/// An unnormalized density `exp(-f*)` together with its gradient oracle.
pub trait TargetDistribution: Sync {
    fn dim(&self) -> usize;

    /// `log p*(x)` up to an additive constant.
    fn log_density(&self, x: &[f64]) -> Result<f64>;

    /// `-∇f*(x)`. Every call is one gradient evaluation and must be recorded
    /// on `counter`.
    fn grad_log_density(&self, x: &[f64], counter: &mut GradientCounter) -> Result<Vec<f64>>;

    /// Lipschitz constant of the score.
    fn smoothness(&self) -> f64;

    /// Second moment `E‖x‖²` under the target.
    fn second_moment(&self) -> f64;

    /// Exact score of the forward OU law at time `t`, when known in closed form.
    /// Never touches a gradient counter.
    fn diffused_score(&self, _t: f64, _x: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

/// Mixture of isotropic Gaussians `Σ w_i N(μ_i, σ_i² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    // cached log w_i, one per component
    log_weights: Vec<f64>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::new(raw.weights, raw.means, raw.variances)
    }
}

impl From<GaussianMixture> for RawMixture {
    fn from(g: GaussianMixture) -> Self {
        RawMixture {
            weights: g.weights,
            means: g.means,
            variances: g.variances,
        }
    }
}

/// Radius of the benchmark ring.
pub const BENCHMARK_RADIUS: f64 = 2.0;
/// Per-mode isotropic variance of the benchmark mixture.
pub const BENCHMARK_VARIANCE: f64 = 0.02;
/// Center of the benchmark ring. The ring passes through the origin, so the
/// modes sit at very different distances from where particles start.
pub const BENCHMARK_CENTER: [f64; 2] = [2.0, 0.0];

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if means.len() != m || variances.len() != m {
            return Err(Error::invalid(format!(
                "mixture has {m} weights but {} means and {} variances",
                means.len(),
                variances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        for mu in &means {
            check_dim(d, mu.len())?;
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("mixture means must be finite"));
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(
                "mixture variances must be strictly positive",
            ));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            means,
            variances,
            log_weights,
        })
    }

    /// `N(0, I_d)` as a one-component mixture.
    pub fn standard_normal(d: usize) -> Self {
        Self::new(vec![1.0], vec![vec![0.0; d]], vec![1.0]).expect("valid standard normal")
    }

    /// Equal-weight modes spaced evenly on a circle in the plane.
    pub fn ring(modes: usize, center: [f64; 2], radius: f64, variance: f64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::invalid("ring needs at least one mode"));
        }
        let means = (0..modes)
            .map(|i| {
                let (c, s) = unit_direction(i, modes);
                vec![center[0] + radius * c, center[1] + radius * s]
            })
            .collect();
        Self::new(
            vec![1.0 / modes as f64; modes],
            means,
            vec![variance; modes],
        )
    }

    /// The six-mode planar benchmark.
    pub fn benchmark() -> Self {
        Self::ring(6, BENCHMARK_CENTER, BENCHMARK_RADIUS, BENCHMARK_VARIANCE)
            .expect("valid benchmark")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Per-component log joint terms `log w_i + log N(x; μ_i, σ_i² I)`.
    fn component_logs(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        for (i, mu) in self.means.iter().enumerate() {
            let var = self.variances[i];
            let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i] = self.log_weights[i] - 0.5 * d * (2.0 * PI * var).ln() - 0.5 * sq / var;
        }
    }

    /// Responsibilities (posterior component probabilities) written into
    /// `out`; returns the log-density as a by-product.
    fn responsibilities(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.component_logs(x, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
        max + sum.ln()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let mut buf = vec![0.0; self.n_components()];
        self.component_logs(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// Score without touching any counter.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut resp = vec![0.0; self.n_components()];
        self.responsibilities(x, &mut resp);
        let mut g = vec![0.0; x.len()];
        for (i, mu) in self.means.iter().enumerate() {
            let c = resp[i] / self.variances[i];
            if c == 0.0 {
                continue;
            }
            for ((gk, m), xk) in g.iter_mut().zip(mu).zip(x) {
                *gk += c * (m - xk);
            }
        }
        Ok(g)
    }

    /// Exact law of the forward OU process at time `t` started from this
    /// mixture: means `e^{-t}μ_i`, variances `e^{-2t}σ_i² + 1 - e^{-2t}`.
    pub fn diffuse(&self, t: f64) -> Result<Self> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!(
                "diffusion time must be nonnegative, got {t}"
            )));
        }
        let shrink = (-t).exp();
        let decay = (-2.0 * t).exp();
        let noise = -(-2.0 * t).exp_m1();
        Ok(Self {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|mu| mu.iter().map(|m| shrink * m).collect())
                .collect(),
            variances: self.variances.iter().map(|v| decay * v + noise).collect(),
            log_weights: self.log_weights.clone(),
        })
    }

    /// `∇ log p_t(x)` for the diffused mixture.
    pub fn analytic_score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.diffuse(t)?.score(x)
    }

    /// Index of the component whose mean is closest to `x`.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, mu) in self.means.iter().enumerate() {
            let d: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// `n` i.i.d. exact draws.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> ParticleSet {
        let d = self.dim();
        let mut points = Vec::with_capacity(n * d);
        if n > 0 {
            let pick = WeightedIndex::new(&self.weights).expect("weights validated");
            for _ in 0..n {
                let i = pick.sample(rng.rng());
                let sd = self.variances[i].sqrt();
                for &m in &self.means[i] {
                    points.push(m + sd * rng.normal());
                }
            }
        }
        ParticleSet::from_flat(d, points).expect("consistent dimensions")
    }
}

impl TargetDistribution for GaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        GaussianMixture::log_density(self, x)
    }

    fn grad_log_density(&self, x: &[f64], counter: &mut GradientCounter) -> Result<Vec<f64>> {
        let g = self.score(x)?;
        counter.record();
        Ok(g)
    }

    /// Bound on the spectral norm of the score Jacobian.
    ///
    /// The Jacobian is `-Σ r_i I/σ_i² + Cov_r[(μ_i - x)/σ_i²]`. With equal
    /// variances the covariance term is bounded by `D²/(4σ⁴)` (`D` the largest
    /// distance between means), which gives a tight bound. With unequal
    /// variances the covariance term grows with `‖x‖`, and the same expression
    /// evaluated at the smallest variance is only a working value.
    fn smoothness(&self) -> f64 {
        let vmin = self.variances.iter().copied().fold(f64::INFINITY, f64::min);
        let mut diam2: f64 = 0.0;
        for (i, a) in self.means.iter().enumerate() {
            for b in &self.means[i + 1..] {
                let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                diam2 = diam2.max(d2);
            }
        }
        let spread = diam2 / (4.0 * vmin * vmin);
        (1.0 / vmin).max(spread - 1.0 / vmin)
    }

    fn second_moment(&self) -> f64 {
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), v)| w * (mu.iter().map(|m| m * m).sum::<f64>() + d * v))
            .sum()
    }

    fn diffused_score(&self, t: f64, x: &[f64]) -> Option<Result<Vec<f64>>> {
        Some(self.analytic_score(t, x))
    }
}

/// `(cos, sin)` of `2πi/n`, exact when `n` divides 12.
fn unit_direction(i: usize, n: usize) -> (f64, f64) {
    if 12 % n == 0 {
        let h = 3f64.sqrt() / 2.0;
        let k = (i * (12 / n)) % 12;
        let c = [1.0, h, 0.5, 0.0, -0.5, -h, -1.0, -h, -0.5, 0.0, 0.5, h][k];
        let s = [0.0, 0.5, h, 1.0, h, 0.5, 0.0, -0.5, -h, -1.0, -h, -0.5][k];
        return (c, s);
    }
    let a = 2.0 * PI * i as f64 / n as f64;
    (a.cos(), a.sin())
}

/// `log Σ exp(v_i)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(g: &GaussianMixture, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[k] += h;
                m[k] -= h;
                (g.log_density(&p).unwrap() - g.log_density(&m).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    #[test]
    fn standard_normal_at_origin() {
        let g = GaussianMixture::standard_normal(1);
        let v = g.log_density(&[0.0]).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair_at_origin() {
        let a = 1.5;
        let g =
            GaussianMixture::new(vec![0.5, 0.5], vec![vec![a], vec![-a]], vec![0.7, 0.7]).unwrap();
        let single = GaussianMixture::new(vec![1.0], vec![vec![a]], vec![0.7]).unwrap();
        let lhs = g.log_density(&[0.0]).unwrap();
        let rhs = single.log_density(&[0.0]).unwrap();
        assert!((lhs - rhs).abs() < 1e-14);
        let grad = g.score(&[0.0]).unwrap();
        assert!(grad[0].abs() < 1e-14);
    }

    #[test]
    fn benchmark_density_matches_direct_summation() {
        // Direct summation of the six Gaussian densities, no log-sum-exp.
        let g = GaussianMixture::benchmark();
        for mu in g.means() {
            let direct: f64 = g
                .means()
                .iter()
                .map(|c| {
                    let sq = (mu[0] - c[0]).powi(2) + (mu[1] - c[1]).powi(2);
                    (1.0 / 6.0) * (-sq / (2.0 * BENCHMARK_VARIANCE)).exp()
                        / (2.0 * PI * BENCHMARK_VARIANCE)
                })
                .sum();
            let v = g.log_density(mu).unwrap();
            assert!((v - direct.ln()).abs() < 1e-13, "{v} vs {}", direct.ln());
        }
    }

    #[test]
    fn far_field_stays_finite() {
        let g = GaussianMixture::benchmark();
        let x = [1e4, -3e4];
        assert!(g.log_density(&x).unwrap().is_finite());
        assert!(g.score(&x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gaussian_score_and_counter() {
        let g = GaussianMixture::standard_normal(2);
        let mut c = GradientCounter::new();
        let s = g.grad_log_density(&[2.0, 0.0], &mut c).unwrap();
        assert_eq!(s, vec![-2.0, 0.0]);
        assert_eq!(c.total(), 1);
        g.grad_log_density(&[1.0, 1.0], &mut c).unwrap();
        assert_eq!(c.total(), 2);
    }

    #[test]
    fn three_mode_gradient_matches_finite_differences() {
        let g = GaussianMixture::new(
            vec![0.2, 0.5, 0.3],
            vec![
                vec![0.0, 1.0, -1.0],
                vec![2.0, -0.5, 0.3],
                vec![-1.0, -1.0, 1.0],
            ],
            vec![0.5, 1.2, 0.8],
        )
        .unwrap();
        let x = [0.4, 0.1, -0.2];
        let a = g.score(&x).unwrap();
        let fd = fd_grad(&g, &x, 1e-5);
        let err: Vec<f64> = a.iter().zip(&fd).map(|(p, q)| p - q).collect();
        assert!(norm(&err) <= 1e-5 * norm(&a), "{a:?} vs {fd:?}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let g = GaussianMixture::benchmark();
        assert!(matches!(
            g.log_density(&[0.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
        let mut c = GradientCounter::new();
        assert!(g.grad_log_density(&[0.0, 0.0, 0.0], &mut c).is_err());
        assert_eq!(c.total(), 0);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(
            GaussianMixture::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0])
                .is_err()
        );
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
        assert!(GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![0.0], vec![1.0, 2.0]],
            vec![1.0, 1.0]
        )
        .is_err());
    }

    #[test]
    fn diffuse_identity_and_unit_variance() {
        let g = GaussianMixture::benchmark();
        assert_eq!(g.diffuse(0.0).unwrap(), g);
        let unit =
            GaussianMixture::new(vec![0.5, 0.5], vec![vec![3.0], vec![-1.0]], vec![1.0, 1.0])
                .unwrap();
        let t: f64 = 0.7;
        let d = unit.diffuse(t).unwrap();
        assert!(d.variances().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!((d.means()[0][0] - 3.0 * (-t).exp()).abs() < 1e-15);
        assert!(g.diffuse(-0.1).is_err());
    }

    #[test]
    fn diffuse_reaches_stationary_law() {
        let d = GaussianMixture::benchmark().diffuse(20.0).unwrap();
        for (mu, v) in d.means().iter().zip(d.variances()) {
            assert!(mu.iter().all(|m| m.abs() < 1e-8));
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn analytic_score_single_gaussian() {
        let (mu, var, t): (f64, f64, f64) = (1.7, 0.3, 0.4);
        let g = GaussianMixture::new(vec![1.0], vec![vec![mu]], vec![var]).unwrap();
        let x = -0.6;
        let expect = -(x - (-t).exp() * mu) / ((-2.0 * t).exp() * var + 1.0 - (-2.0 * t).exp());
        let s = g.analytic_score(t, &[x]).unwrap();
        assert!((s[0] - expect).abs() < 1e-14);
        let std = GaussianMixture::standard_normal(3);
        let y = [0.3, -2.0, 1.1];
        let s = std.analytic_score(1.3, &y).unwrap();
        for (a, b) in s.iter().zip(&y) {
            assert!((a + b).abs() < 1e-14);
        }
    }

    #[test]
    fn json_roundtrip_uses_fixed_field_names() {
        let g = GaussianMixture::benchmark();
        let s = serde_json::to_string(&g).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys.len(), 3);
        for k in ["weights", "means", "variances"] {
            assert!(keys.contains(&k));
        }
        let back: GaussianMixture = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        let bad = r#"{"weights":[0.3],"means":[[0.0]],"variances":[1.0]}"#;
        assert!(serde_json::from_str::<GaussianMixture>(bad).is_err());
    }

    #[test]
    fn ground_truth_moments_and_counts() {
        let g = GaussianMixture::standard_normal(2);
        let s = g.sample(1000, &mut RngStream::new(5));
        assert_eq!(s.len(), 1000);
        for k in 0..2 {
            let col: Vec<f64> = s.rows().map(|r| r[k]).collect();
            let mean = col.iter().sum::<f64>() / 1000.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0;
            assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1, "{mean} {var}");
        }
        assert!(g.sample(0, &mut RngStream::new(5)).is_empty());

        // Six equal modes: 1000 ± 3·sqrt(6000·(1/6)(5/6)) ≈ 1000 ± 87; the
        // looser ±120 band is the pre-registered check.
        let b = GaussianMixture::benchmark();
        let s = b.sample(6000, &mut RngStream::new(9));
        let mut counts = [0usize; 6];
        for r in s.rows() {
            counts[b.nearest_mode(r)] += 1;
        }
        for c in counts {
            assert!((880..=1120).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn benchmark_smoothness_bounds_jacobian() {
        let g = GaussianMixture::benchmark();
        let l = g.smoothness();
        let mut rng = RngStream::new(3);
        let h = 1e-5;
        for _ in 0..200 {
            let x = [2.0 + 3.0 * rng.normal(), 3.0 * rng.normal()];
            // Jacobian columns by central differences of the score.
            let mut jac = [[0.0; 2]; 2];
            for k in 0..2 {
                let mut p = x;
                let mut m = x;
                p[k] += h;
                m[k] -= h;
                let sp = g.score(&p).unwrap();
                let sm = g.score(&m).unwrap();
                for row in 0..2 {
                    jac[row][k] = (sp[row] - sm[row]) / (2.0 * h);
                }
            }
            // symmetric 2x2 spectral norm
            let (a, b, c) = (jac[0][0], 0.5 * (jac[0][1] + jac[1][0]), jac[1][1]);
            let disc = ((a - c) * (a - c) / 4.0 + b * b).sqrt();
            let spec = ((a + c) / 2.0 + disc)
                .abs()
                .max(((a + c) / 2.0 - disc).abs());
            assert!(spec <= l * (1.0 + 1e-4), "{spec} > {l}");
        }
    }
}
