//! Sample-quality metrics: RBF-kernel MMD and per-mode statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::particles::ParticleSet;
use crate::rng::{Domain, RngStream};
use crate::target::GaussianMixture;

/// Largest pooled sample used by the median heuristic.
pub const BANDWIDTH_SUBSAMPLE: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    /// `sqrt(max(0, MMD²))`.
    pub mmd: f64,
    pub mmd_squared: f64,
    pub bandwidth: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub estimator: String,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Median pairwise distance of the pooled sample `x ∪ y`.
///
/// A zero result (all points identical) is returned as is; [`mmd_rbf`]
/// rejects it.
///
/// Pools larger than [`BANDWIDTH_SUBSAMPLE`] are subsampled without
/// replacement from a stream keyed by `seed`.
pub fn median_heuristic(x: &ParticleSet, y: &ParticleSet, seed: u64) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    let pool: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    if pool.len() < 2 {
        return Err(Error::invalid("median heuristic needs at least two points"));
    }
    let chosen: Vec<&[f64]> = if pool.len() > BANDWIDTH_SUBSAMPLE {
        let mut rng = RngStream::derive(seed, Domain::Bandwidth, 0);
        let mut idx =
            rand::seq::index::sample(rng.rng(), pool.len(), BANDWIDTH_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    } else {
        pool
    };
    let mut dists = Vec::with_capacity(chosen.len() * (chosen.len() - 1) / 2);
    for (i, a) in chosen.iter().enumerate() {
        for b in &chosen[i + 1..] {
            dists.push(sq_dist(a, b).sqrt());
        }
    }
    let mid = dists.len() / 2;
    let (_, upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if dists.len() % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    Ok(median)
}

/// Pairwise (cascade) summation of row totals.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// `Σ_i Σ_j k(a_i, b_j)`, rows summed in parallel and combined pairwise.
fn kernel_sum(a: &ParticleSet, b: &ParticleSet, gamma: f64) -> f64 {
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            b.rows()
                .map(|bj| (-gamma * sq_dist(ai, bj)).exp())
                .sum::<f64>()
        })
        .collect();
    pairwise_sum(&rows)
}

/// `Σ_i Σ_j k(a_i, a_j)` using symmetry; the diagonal contributes `n`.
fn self_kernel_sum(a: &ParticleSet, gamma: f64) -> f64 {
    let n = a.len();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            (i + 1..n)
                .map(|j| (-gamma * sq_dist(ai, a.row(j))).exp())
                .sum::<f64>()
        })
        .collect();
    2.0 * pairwise_sum(&rows) + n as f64
}

fn canonical_order<'a>(
    x: &'a ParticleSet,
    y: &'a ParticleSet,
) -> (&'a ParticleSet, &'a ParticleSet) {
    let key = |s: &ParticleSet| s.len();
    let ord = key(x).cmp(&key(y)).then_with(|| {
        x.as_flat()
            .iter()
            .zip(y.as_flat())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if ord.is_gt() {
        (y, x)
    } else {
        (x, y)
    }
}

/// Biased (V-statistic) MMD with kernel `exp(-‖a-b‖²/(2σ²))`.
///
/// The inputs are put in a canonical order first, so the result is exactly
/// symmetric in `x` and `y`.
pub fn mmd_rbf(x: &ParticleSet, y: &ParticleSet, bandwidth: f64) -> Result<MmdReport> {
    check_dim(x.dim(), y.dim())?;
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("MMD needs non-empty samples"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::DegenerateBandwidth(bandwidth));
    }
    if !x.all_finite() || !y.all_finite() {
        return Err(Error::invalid("MMD inputs contain non-finite values"));
    }
    let (a, b) = canonical_order(x, y);
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let kaa = self_kernel_sum(a, gamma) / (na * na);
    let kbb = self_kernel_sum(b, gamma) / (nb * nb);
    let kab = kernel_sum(a, b, gamma) / (na * nb);
    let mmd2 = kaa + kbb - 2.0 * kab;
    Ok(MmdReport {
        mmd: mmd2.max(0.0).sqrt(),
        mmd_squared: mmd2,
        bandwidth,
        n_x: x.len(),
        n_y: y.len(),
        estimator: "biased".into(),
    })
}

/// Per-mode assignment counts and within-mode moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub counts: Vec<usize>,
    /// Per-coordinate mean of the particles assigned to each mode.
    pub means: Vec<Option<Vec<f64>>>,
    /// Per-coordinate population variance; `None` for empty modes.
    pub variances: Vec<Option<Vec<f64>>>,
}

impl ModeStats {
    /// Per-mode variance averaged over coordinates.
    pub fn mean_variances(&self) -> Vec<Option<f64>> {
        self.variances
            .iter()
            .map(|v| v.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    }
}

/// Assigns each particle to its nearest component mean.
pub fn mode_stats(set: &ParticleSet, mixture: &GaussianMixture) -> Result<ModeStats> {
    let d = mixture.means()[0].len();
    check_dim(d, set.dim())?;
    let m = mixture.n_components();
    let mut counts = vec![0usize; m];
    let mut sums = vec![vec![0.0; d]; m];
    let mut labels = Vec::with_capacity(set.len());
    for x in set.rows() {
        let k = mixture.nearest_mode(x);
        labels.push(k);
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(x) {
            *s += v;
        }
    }
    let means: Vec<Option<Vec<f64>>> = (0..m)
        .map(|k| (counts[k] > 0).then(|| sums[k].iter().map(|s| s / counts[k] as f64).collect()))
        .collect();
    let mut ss = vec![vec![0.0; d]; m];
    for (x, &k) in set.rows().zip(&labels) {
        let mu = means[k].as_ref().expect("assigned mode has a mean");
        for ((s, v), c) in ss[k].iter_mut().zip(x).zip(mu) {
            *s += (v - c) * (v - c);
        }
    }
    let variances = (0..m)
        .map(|k| (counts[k] > 0).then(|| ss[k].iter().map(|s| s / counts[k] as f64).collect()))
        .collect();
    Ok(ModeStats {
        counts,
        means,
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: Vec<Vec<f64>>) -> ParticleSet {
        ParticleSet::from_rows(rows[0].len(), rows).unwrap()
    }

    #[test]
    fn identical_samples_have_zero_mmd() {
        let x = GaussianMixture::benchmark().sample(300, &mut RngStream::new(1));
        let r = mmd_rbf(&x, &x, 0.7).unwrap();
        assert!(r.mmd_squared.abs() < 1e-12, "{}", r.mmd_squared);
    }

    #[test]
    fn two_point_closed_form() {
        let x = set(vec![vec![0.0]]);
        let y = set(vec![vec![1.0]]);
        let r = mmd_rbf(&x, &y, 1.0).unwrap();
        let want = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((r.mmd_squared - want).abs() < 1e-15);
        assert_eq!(r.mmd, want.sqrt());
    }

    #[test]
    fn matches_direct_double_sum() {
        let mut rng = RngStream::new(4);
        let x = GaussianMixture::standard_normal(3).sample(40, &mut rng);
        let y = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0, 2.0], vec![-1.0, 0.5, 0.0]],
            vec![0.3, 0.6],
        )
        .unwrap()
        .sample(25, &mut rng);
        let sigma = 1.3;
        let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
        let mean = |p: &ParticleSet, q: &ParticleSet| {
            let mut s = 0.0;
            for a in p.rows() {
                for b in q.rows() {
                    s += k(a, b);
                }
            }
            s / (p.len() * q.len()) as f64
        };
        let want = mean(&x, &x) + mean(&y, &y) - 2.0 * mean(&x, &y);
        let got = mmd_rbf(&x, &y, sigma).unwrap().mmd_squared;
        assert!((got - want).abs() < 1e-12, "{got} {want}");
    }

    #[test]
    fn far_apart_gaussians_match_self_kernel_expectation() {
        let mut rng = RngStream::new(12);
        let x = GaussianMixture::standard_normal(1).sample(2000, &mut rng);
        let y = GaussianMixture::new(vec![1.0], vec![vec![10.0]], vec![1.0])
            .unwrap()
            .sample(2000, &mut rng);
        // E k(x, x') for N(0,1) pairs and sigma = 1 is 1/sqrt(3).
        let want = 2.0 / 3f64.sqrt();
        let got = mmd_rbf(&x, &y, 1.0).unwrap().mmd_squared;
        assert!((got - want).abs() < 0.05, "{got} {want}");
    }

    #[test]
    fn increases_with_shift() {
        let x = GaussianMixture::standard_normal(2).sample(400, &mut RngStream::new(1));
        let base = GaussianMixture::standard_normal(2).sample(400, &mut RngStream::new(2));
        let mut last = -1.0;
        for shift in [0.0, 1.0, 2.0, 4.0] {
            let rows = base.rows().map(|r| vec![r[0] + shift, r[1]]).collect();
            let y = ParticleSet::from_rows(2, rows).unwrap();
            let m = mmd_rbf(&x, &y, 1.0).unwrap().mmd;
            assert!(m > last, "{shift}: {m} <= {last}");
            last = m;
        }
    }

    #[test]
    fn bandwidth_extremes() {
        let g = GaussianMixture::benchmark();
        let x = g.sample(300, &mut RngStream::new(1));
        let y = GaussianMixture::standard_normal(2).sample(300, &mut RngStream::new(2));
        let wide = mmd_rbf(&x, &y, 1e6).unwrap().mmd;
        let mid = mmd_rbf(&x, &y, 1.0).unwrap().mmd;
        assert!(wide < 1e-5 && wide < mid, "{wide} {mid}");
        let narrow = mmd_rbf(&x, &y, 1e-6).unwrap().mmd_squared;
        assert!(
            (narrow - (1.0 / 300.0 + 1.0 / 300.0)).abs() < 1e-12,
            "{narrow}"
        );
    }

    #[test]
    fn ground_truth_bandwidth_sits_between_chord_clusters() {
        // Six equal modes on a ring: same-mode and adjacent pairs make up
        // exactly half of all pairs, so the median falls in the gap between
        // the adjacent chord (radius) and the next chord (√3·radius) and
        // moves within it as the mode counts fluctuate.
        let g = GaussianMixture::benchmark();
        let r = crate::target::BENCHMARK_RADIUS;
        for seed in 1..=4 {
            let a = g.sample(1000, &mut RngStream::new(seed));
            let s = median_heuristic(&a, &a, 0).unwrap();
            assert!(s > 0.8 * r && s < 1.05 * 3f64.sqrt() * r, "{seed}: {s}");
        }
    }

    #[test]
    fn exactly_symmetric() {
        let mut rng = RngStream::new(8);
        let x = GaussianMixture::benchmark().sample(200, &mut rng);
        let y = GaussianMixture::standard_normal(2).sample(150, &mut rng);
        assert_eq!(
            mmd_rbf(&x, &y, 0.9).unwrap().mmd,
            mmd_rbf(&y, &x, 0.9).unwrap().mmd
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = set(vec![vec![0.0, 1.0]]);
        let y = set(vec![vec![0.0]]);
        assert!(matches!(
            mmd_rbf(&x, &y, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            mmd_rbf(&x, &x, 0.0),
            Err(Error::DegenerateBandwidth(_))
        ));
        assert!(mmd_rbf(&x, &ParticleSet::empty(2), 1.0).is_err());
        let same = set(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let bw = median_heuristic(&same, &same, 0).unwrap();
        assert_eq!(bw, 0.0);
        assert!(matches!(
            mmd_rbf(&same, &same, bw),
            Err(Error::DegenerateBandwidth(_))
        ));
        let one = set(vec![vec![1.0, 1.0]]);
        assert!(matches!(
            median_heuristic(&one, &ParticleSet::empty(2), 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn median_of_two_points_is_their_distance() {
        let x = set(vec![vec![0.0, 0.0]]);
        let y = set(vec![vec![3.0, 0.0]]);
        assert_eq!(median_heuristic(&x, &y, 0).unwrap(), 3.0);
    }

    #[test]
    fn median_of_small_pool() {
        let x = set(vec![vec![0.0], vec![1.0]]);
        let y = set(vec![vec![3.0]]);
        // distances 1, 2, 3
        assert_eq!(median_heuristic(&x, &y, 0).unwrap(), 2.0);
        let y2 = set(vec![vec![3.0], vec![7.0]]);
        // distances 1, 2, 3, 4, 6, 7
        assert_eq!(median_heuristic(&x, &y2, 0).unwrap(), 3.5);
    }

    #[test]
    fn subsampled_median_is_deterministic() {
        let mut rng = RngStream::new(2);
        let x = GaussianMixture::benchmark().sample(1500, &mut rng);
        let y = GaussianMixture::benchmark().sample(1500, &mut rng);
        let a = median_heuristic(&x, &y, 5).unwrap();
        assert_eq!(a, median_heuristic(&x, &y, 5).unwrap());
        assert!(a > 0.5 && a < 4.0, "{a}");
    }

    #[test]
    fn mode_stats_counts_and_variances() {
        let g = GaussianMixture::benchmark();
        let s = g.sample(6000, &mut RngStream::new(3));
        let st = mode_stats(&s, &g).unwrap();
        assert_eq!(st.counts.iter().sum::<usize>(), 6000);
        for v in st.variances.iter().flatten() {
            for c in v {
                assert!((c - 0.02).abs() < 0.004, "{c}");
            }
        }
        let one = set(vec![g.means()[0].clone()]);
        let st = mode_stats(&one, &g).unwrap();
        assert_eq!(st.counts[0], 1);
        assert_eq!(st.variances[0], Some(vec![0.0, 0.0]));
        assert!(st.variances[1].is_none());
        assert_eq!(st.means[0].as_deref(), Some(g.means()[0].as_slice()));
    }
}
