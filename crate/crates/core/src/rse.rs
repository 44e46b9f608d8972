//! Recursive score estimation.
//!
//! The score of the forward law at gap `t'` into segment `k` is a posterior
//! mean:
//!
//! ```text
//! ∇log p_{k,t'}(x) = E_{x₀ ~ q(·|x)} [ -(x - e^{-t'} x₀) / (1 - e^{-2t'}) ]
//! ```
//!
//! with `q(x₀|x) ∝ p_{k,0}(x₀) · exp(-‖x - e^{-t'}x₀‖² / 2(1 - e^{-2t'}))`.
//! The estimator draws `n` chains, each running `m` Langevin steps on `q`.
//! The Langevin drift needs `∇log p_{k,0} = ∇log p_{k-1,S}`, which is
//! estimated the same way one segment down, until segment `-1` where the
//! exact target gradient is returned.

use crate::counter::GradientCounter;
use crate::error::{Error, Result};
use crate::ou::{q_init_sample, tilt_into};
use crate::rng::RngStream;
use crate::schedule::ScheduleParams;
use crate::target::TargetDistribution;

/// Any coordinate beyond this magnitude aborts a run.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEstimate {
    pub value: Vec<f64>,
    /// Gradient-oracle calls consumed by this estimate.
    pub grad_calls: u64,
    /// Largest inner-particle norm seen, including recursive calls.
    pub max_particle_norm: f64,
}

/// One recorded call: `(segment, reverse_iter, depth)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub segment: i64,
    pub reverse_iter: usize,
    pub depth: usize,
}

struct Recursion<'a, T: ?Sized> {
    params: &'a ScheduleParams,
    target: &'a T,
    rng: &'a mut RngStream,
    counter: &'a mut GradientCounter,
    trace: Option<&'a mut Vec<TraceEntry>>,
    max_norm: f64,
}

impl<T: TargetDistribution + ?Sized> Recursion<'_, T> {
    fn run(
        &mut self,
        k: i64,
        r: usize,
        x: &[f64],
        tol: Option<f64>,
        depth: usize,
    ) -> Result<Vec<f64>> {
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.push(TraceEntry {
                segment: k,
                reverse_iter: r,
                depth,
            });
        }
        if k < 0 {
            return self.target.grad_log_density(x, self.counter);
        }
        let params = self.params;
        let t = params.gap(r);
        let tau = params.tau.at(tol, t)?;
        let n = params.samples.at(tol)?;
        let anchor_norm = norm(x);
        let m = params.inner_iters.at(tol, anchor_norm)?;
        let child_tol = tol.map(|e| e / params.tolerance.map_or(1.0, |t| t.divisor));

        let shrink = (-t).exp();
        let denom = -(-2.0 * t).exp_m1();
        let noise_sd = (2.0 * tau).sqrt();
        let d = x.len();
        let mut acc = vec![0.0; d];
        let mut tilt = vec![0.0; d];
        let scale = 1.0 / n as f64;
        for i in 0..n as usize {
            let mut xp = q_init_sample(x, t, self.rng)?;
            guard(&xp, k, r, i, 0)?;
            for j in 0..m as usize {
                let v = self.run(k - 1, 0, &xp, child_tol, depth + 1)?;
                tilt_into(x, &xp, t, &mut tilt);
                for ((p, vi), ti) in xp.iter_mut().zip(&v).zip(&tilt) {
                    *p += tau * (vi + ti) + noise_sd * self.rng.normal();
                }
                guard(&xp, k, r, i, j)?;
                self.max_norm = self.max_norm.max(norm(&xp));
            }
            for ((a, xa), p) in acc.iter_mut().zip(x).zip(&xp) {
                *a += scale * (-(xa - shrink * p) / denom);
            }
        }
        Ok(acc)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn guard(x: &[f64], k: i64, r: usize, i: usize, j: usize) -> Result<()> {
    if x.iter()
        .all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND)
    {
        Ok(())
    } else {
        Err(Error::Divergence {
            segment: k,
            reverse_iter: r,
            chain: i,
            inner_step: j,
        })
    }
}

/// Estimates `∇log p_{k, S - rη}(x)`; `k = -1` returns `-∇f*(x)` exactly.
pub fn estimate_score<T: TargetDistribution + ?Sized>(
    k: i64,
    r: usize,
    x: &[f64],
    params: &ScheduleParams,
    target: &T,
    rng: &mut RngStream,
    counter: &mut GradientCounter,
) -> Result<ScoreEstimate> {
    estimate(k, r, x, params, target, rng, counter, None)
}

/// Like [`estimate_score`], also recording every recursive call.
pub fn estimate_score_traced<T: TargetDistribution + ?Sized>(
    k: i64,
    r: usize,
    x: &[f64],
    params: &ScheduleParams,
    target: &T,
    rng: &mut RngStream,
    counter: &mut GradientCounter,
) -> Result<(ScoreEstimate, Vec<TraceEntry>)> {
    let mut trace = Vec::new();
    let est = estimate(k, r, x, params, target, rng, counter, Some(&mut trace))?;
    Ok((est, trace))
}

#[allow(clippy::too_many_arguments)]
fn estimate<T: TargetDistribution + ?Sized>(
    k: i64,
    r: usize,
    x: &[f64],
    params: &ScheduleParams,
    target: &T,
    rng: &mut RngStream,
    counter: &mut GradientCounter,
    trace: Option<&mut Vec<TraceEntry>>,
) -> Result<ScoreEstimate> {
    if k < -1 {
        return Err(Error::invalid(format!(
            "segment index must be at least -1, got {k}"
        )));
    }
    if k >= 0 && r >= params.iters {
        return Err(Error::invalid(format!(
            "reverse iteration {r} outside [0, {})",
            params.iters
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("score requested at a non-finite point"));
    }
    let before = counter.total();
    let mut rec = Recursion {
        params,
        target,
        rng,
        counter,
        trace,
        max_norm: norm(x),
    };
    let value = rec.run(k, r, x, params.top_tolerance(), 0)?;
    let max_particle_norm = rec.max_norm;
    Ok(ScoreEstimate {
        value,
        grad_calls: counter.total() - before,
        max_particle_norm,
    })
}

/// Score used by the Langevin tail: `-∇f*(x)` directly.
pub fn deep_score_v2<T: TargetDistribution + ?Sized>(
    x: &[f64],
    target: &T,
    counter: &mut GradientCounter,
) -> Result<Vec<f64>> {
    target.grad_log_density(x, counter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ou::{max_segment_length, DriftVariant};
    use crate::schedule::{IterRule, SampleRule, TauRule};
    use crate::target::GaussianMixture;

    fn fixed(n: u64, m: u64, tau: f64, s: f64, iters: usize) -> ScheduleParams {
        ScheduleParams {
            segment_len: s,
            segments: 3,
            eta: s / iters as f64,
            iters,
            tau: TauRule::Fixed(tau),
            samples: SampleRule::Fixed(n),
            inner_iters: IterRule::Fixed(m),
            tolerance: None,
            log_delta: None,
            variant: DriftVariant::Paper,
            ula_tail: 0,
            ula_tail_step: 0.0,
        }
    }

    #[test]
    fn base_case_is_exact_gradient() {
        let g = GaussianMixture::benchmark();
        let p = fixed(1, 1, 0.01, 0.2, 10);
        let mut c = GradientCounter::new();
        let x = [0.3, -1.2];
        let est = estimate_score(-1, 0, &x, &p, &g, &mut RngStream::new(0), &mut c).unwrap();
        assert_eq!(est.grad_calls, 1);
        assert_eq!(est.value, g.score(&x).unwrap());
        let mut c2 = GradientCounter::new();
        assert_eq!(deep_score_v2(&x, &g, &mut c2).unwrap(), est.value);
        assert_eq!(c2.total(), 1);
        // at a mode center the responsibility-weighted score still matches
        let mu = g.means()[2].clone();
        assert_eq!(
            deep_score_v2(&mu, &g, &mut c2).unwrap(),
            g.score(&mu).unwrap()
        );
    }

    #[test]
    fn gaussian_deep_score() {
        let g = GaussianMixture::standard_normal(2);
        let mut c = GradientCounter::new();
        assert_eq!(
            deep_score_v2(&[1.5, -0.5], &g, &mut c).unwrap(),
            vec![-1.5, 0.5]
        );
    }

    #[test]
    fn single_inner_step_costs_one_gradient() {
        let g = GaussianMixture::benchmark();
        let p = fixed(1, 1, 0.01, 0.2, 10);
        let mut c = GradientCounter::new();
        let est =
            estimate_score(0, 4, &[1.0, 0.0], &p, &g, &mut RngStream::new(1), &mut c).unwrap();
        assert_eq!(est.grad_calls, 1);
        assert_eq!(c.total(), 1);
    }

    #[test]
    fn call_tree_descends_one_segment_at_a_time() {
        let g = GaussianMixture::standard_normal(2);
        let p = fixed(2, 1, 0.01, 0.2, 10);
        let mut c = GradientCounter::new();
        let (_, trace) =
            estimate_score_traced(2, 5, &[0.1, 0.2], &p, &g, &mut RngStream::new(2), &mut c)
                .unwrap();
        assert_eq!(
            trace[0],
            TraceEntry {
                segment: 2,
                reverse_iter: 5,
                depth: 0
            }
        );
        for e in &trace[1..] {
            assert_eq!(e.reverse_iter, 0);
            assert_eq!(e.segment, 2 - e.depth as i64);
        }
        let max_depth = trace.iter().map(|e| e.depth).max().unwrap();
        assert_eq!(max_depth + 1, 4); // k + 2 levels
        assert!(trace.iter().filter(|e| e.segment == -1).count() as u64 == c.total());
    }

    #[test]
    fn deterministic_given_seed() {
        let g = GaussianMixture::benchmark();
        let p = fixed(2, 3, 0.01, 0.2, 10);
        let run = || {
            let mut c = GradientCounter::new();
            estimate_score(1, 3, &[0.5, 0.5], &p, &g, &mut RngStream::new(77), &mut c).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.max_particle_norm > 0.0);
    }

    #[test]
    fn argument_errors() {
        let g = GaussianMixture::standard_normal(1);
        let p = fixed(1, 1, 0.01, 0.2, 10);
        let mut c = GradientCounter::new();
        let mut rng = RngStream::new(0);
        assert!(estimate_score(-2, 0, &[0.0], &p, &g, &mut rng, &mut c).is_err());
        assert!(estimate_score(0, 10, &[0.0], &p, &g, &mut rng, &mut c).is_err());
        assert!(estimate_score(0, 0, &[f64::NAN], &p, &g, &mut rng, &mut c).is_err());
    }

    #[test]
    fn divergence_is_reported_with_location() {
        // A huge inner step on a narrow target throws the chain off.
        let g = GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![1e-4]).unwrap();
        let p = fixed(1, 50, 5.0, 0.2, 10);
        let mut c = GradientCounter::new();
        let err = estimate_score(0, 2, &[1.0], &p, &g, &mut RngStream::new(0), &mut c).unwrap_err();
        match err {
            Error::Divergence {
                segment,
                reverse_iter,
                chain,
                ..
            } => {
                assert_eq!((segment, reverse_iter, chain), (0, 2, 0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gaussian_estimate_is_close_to_true_score() {
        // N(0, I) in 2-D, t' = S for L = 1. The exact posterior is
        // N(e^{-t'} x, (1 - e^{-2t'}) I), so the estimator's per-coordinate
        // standard deviation is sqrt(e^{-2t'} / ((1 - e^{-2t'}) n)) = sqrt(2/n)
        // ≈ 0.088 at n = 256. The per-point bound is 4 standard deviations of
        // the 2-D error radius (exceeded with probability e^{-8}).
        let g = GaussianMixture::standard_normal(2);
        let s = max_segment_length(1.0);
        let tau = crate::ou::ConcavityBounds::at(s).max_inner_step();
        let p = fixed(256, 200, tau, s, 1);
        let sd = (2.0f64 / 256.0).sqrt();
        let mut rng = RngStream::new(2024);
        let mut sq_sum = 0.0;
        let pts = 20;
        for i in 0..pts {
            let a = 2.0 * std::f64::consts::PI * i as f64 / pts as f64;
            let rad = 2.0 * (i as f64 + 1.0) / pts as f64;
            let x = [rad * a.cos(), rad * a.sin()];
            let mut c = GradientCounter::new();
            let est = estimate_score(0, 0, &x, &p, &g, &mut rng, &mut c).unwrap();
            let err = ((est.value[0] + x[0]).powi(2) + (est.value[1] + x[1]).powi(2)).sqrt();
            assert!(err < 4.0 * sd, "point {i}: error {err}");
            sq_sum += err * err;
        }
        // Mean squared error is ≈ 2·sd²·(1 + small ULA bias).
        let mse = sq_sum / pts as f64;
        assert!(mse < 2.0 * 2.0 * sd * sd, "{mse}");
    }

    #[test]
    fn exact_posterior_draws_make_the_estimator_unbiased() {
        // Replacing the inner chain by exact draws from N(e^{-t'}x, (1-e^{-2t'})I).
        let t: f64 = 0.2;
        let x = 1.3;
        let denom = -(-2.0 * t).exp_m1();
        let mut rng = RngStream::new(8);
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let x0 = (-t).exp() * x + denom.sqrt() * rng.normal();
                -(x - (-t).exp() * x0) / denom
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean + x).abs() < 3.0 * se, "{mean} vs {}", -x);
    }
}
