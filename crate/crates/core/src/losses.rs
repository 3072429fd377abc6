//! Training losses: squared error summed over grid locations, the tilted
//! (pinball) loss for quantile fitting, and the joint objective that adds
//! the two so a single network fits mean and quantiles together.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strictly increasing quantile levels in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileLevels {
    levels: Vec<f64>,
}

impl QuantileLevels {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("QuantileLevels", "need at least one level"));
        }
        for (i, &t) in levels.iter().enumerate() {
            if !(0.0 < t && t < 1.0) {
                return Err(Error::invalid(
                    "QuantileLevels",
                    format!("level {} = {} outside (0,1)", i, t),
                ));
            }
            if i > 0 && levels[i - 1] >= t {
                return Err(Error::invalid(
                    "QuantileLevels",
                    format!("levels must be strictly increasing at index {}", i),
                ));
            }
        }
        Ok(QuantileLevels { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn count(&self) -> usize {
        self.levels.len()
    }

    /// Position of a level, if present (exact float match).
    pub fn index_of(&self, tau: f64) -> Option<usize> {
        self.levels.iter().position(|&t| t == tau)
    }
}

/// Per-target mean prediction plus J quantile predictions.
///
/// `quantiles` carries one extra trailing axis of extent J over the shape
/// of `mean`. Monotonicity across J is not enforced; crossings are a
/// measured diagnostic, not an invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle {
    pub mean: Tensor,
    pub quantiles: Tensor,
}

impl ForecastBundle {
    pub fn new(mean: Tensor, quantiles: Tensor) -> Result<Self> {
        let qs = quantiles.shape();
        if qs.len() != mean.rank() + 1 || qs[..qs.len() - 1] != *mean.shape() {
            return Err(Error::shape(
                "ForecastBundle",
                "quantile shape",
                format!("{:?} x J", mean.shape()),
                format!("{:?}", qs),
            ));
        }
        Ok(ForecastBundle { mean, quantiles })
    }

    pub fn quantile_count(&self) -> usize {
        *self.quantiles.shape().last().unwrap()
    }

    /// Number of prediction points (grid cells, or cells x times).
    pub fn point_count(&self) -> usize {
        self.mean.len()
    }

    /// Quantile values of level index `j`, flattened over points.
    pub fn quantile_level(&self, j: usize) -> Tensor {
        self.quantiles.select_last_axis(j)
    }
}

/// Squared error summed over all locations.
pub fn l2_grid(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return Err(Error::shape(
            "l2_grid",
            "shape",
            format!("{:?}", y.shape()),
            format!("{:?}", y_hat.shape()),
        ));
    }
    Ok(y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Tilted (pinball) loss of a residual `r = y - q_hat`:
/// `max(tau * r, (tau - 1) * r)`.
pub fn tilted(tau: f64, r: f64) -> Result<f64> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::invalid(
            "tilted",
            format!("tau must lie in (0,1), got {}", tau),
        ));
    }
    Ok((tau * r).max((tau - 1.0) * r))
}

/// Joint objective: for every location, squared mean error plus the sum of
/// tilted losses of each quantile head. Equals `l2_grid` plus the per-level
/// tilted sums exactly.
pub fn joint_objective(y: &Tensor, bundle: &ForecastBundle, levels: &QuantileLevels) -> Result<f64> {
    if y.shape() != bundle.mean.shape() {
        return Err(Error::shape(
            "joint_objective",
            "target shape",
            format!("{:?}", bundle.mean.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    let j = levels.count();
    if bundle.quantile_count() != j {
        return Err(Error::shape(
            "joint_objective",
            "quantile level count",
            j,
            bundle.quantile_count(),
        ));
    }
    let mut total = 0.0;
    let q = bundle.quantiles.data();
    for (p, (&yv, &mv)) in y.data().iter().zip(bundle.mean.data()).enumerate() {
        let e = yv - mv;
        total += e * e;
        for (jj, &tau) in levels.levels().iter().enumerate() {
            total += tilted(tau, yv - q[p * j + jj])?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn levels_validation() {
        assert!(QuantileLevels::new(vec![]).is_err());
        assert!(QuantileLevels::new(vec![0.0]).is_err());
        assert!(QuantileLevels::new(vec![0.5, 0.5]).is_err());
        assert!(QuantileLevels::new(vec![0.8, 0.2]).is_err());
        let ok = QuantileLevels::new(vec![0.05, 0.2, 0.8, 0.95]).unwrap();
        assert_eq!(ok.count(), 4);
    }

    #[test]
    fn l2_grid_basics() {
        let y = Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap();
        assert_eq!(l2_grid(&y, &y).unwrap(), 0.0);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(l2_grid(&y, &zero).unwrap(), 2.0);
        let single = Tensor::scalar(3.0);
        let pred = Tensor::scalar(1.0);
        assert_eq!(l2_grid(&single, &pred).unwrap(), 4.0);
        assert!(l2_grid(&y, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn tilted_values() {
        assert!((tilted(0.9, 2.0).unwrap() - 1.8).abs() < 1e-15);
        assert!((tilted(0.9, -2.0).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(tilted(0.3, 0.0).unwrap(), 0.0);
        assert!(tilted(0.0, 1.0).is_err());
        assert!(tilted(1.0, 1.0).is_err());
    }

    #[test]
    fn tilted_nonnegative_convex_homogeneous() {
        let mut rng = seeded(8);
        for _ in 0..200 {
            let tau: f64 = rng.random_range(0.01..0.99);
            let r: f64 = rng.random_range(-5.0..5.0);
            let v = tilted(tau, r).unwrap();
            assert!(v >= 0.0);
            assert_eq!(v == 0.0, r == 0.0);
            // positive homogeneity
            let alpha: f64 = rng.random_range(0.0..3.0);
            let lhs = tilted(tau, alpha * r).unwrap();
            assert!((lhs - alpha * v).abs() < 1e-12 * (1.0 + lhs.abs()));
            // convexity along a random chord
            let r2: f64 = rng.random_range(-5.0..5.0);
            let lam: f64 = rng.random_range(0.0..1.0);
            let mid = tilted(tau, lam * r + (1.0 - lam) * r2).unwrap();
            let hull = lam * v + (1.0 - lam) * tilted(tau, r2).unwrap();
            assert!(mid <= hull + 1e-12);
        }
    }

    /// The minimizer of the summed tilted loss over constants is an
    /// empirical tau-quantile; compare against a dense grid search.
    #[test]
    fn pinball_minimizer_is_empirical_quantile() {
        let mut rng = seeded(13);
        for trial in 0..20 {
            let n = 25;
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let tau = [0.1, 0.25, 0.5, 0.75, 0.9][trial % 5];

            let objective = |c: f64| -> f64 {
                ys.iter().map(|&y| tilted(tau, y - c).unwrap()).sum()
            };
            // Grid search oracle over the sample range.
            let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min) - 0.1;
            let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.1;
            let steps = 4000;
            let mut best_c = lo;
            let mut best_v = f64::INFINITY;
            for s in 0..=steps {
                let c = lo + (hi - lo) * s as f64 / steps as f64;
                let v = objective(c);
                if v < best_v {
                    best_v = v;
                    best_c = c;
                }
            }
            // An empirical tau-quantile: order statistic at ceil(tau * n).
            let mut sorted = ys.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = ((tau * n as f64).ceil() as usize).clamp(1, n) - 1;
            let empirical = sorted[k];
            // The empirical quantile is a true minimizer, so it can only
            // improve on any grid point; and the grid approaches its loss
            // to within Lipschitz constant (<= n) times the grid step.
            let o_emp = objective(empirical);
            assert!(
                o_emp <= best_v + 1e-9,
                "trial {}: empirical {} worse than grid {}",
                trial,
                o_emp,
                best_v
            );
            let step = (hi - lo) / steps as f64;
            assert!(
                best_v - o_emp <= n as f64 * step,
                "trial {}: grid min {} too far above empirical {} (c = {})",
                trial,
                best_v,
                o_emp,
                best_c
            );
        }
    }

    #[test]
    fn joint_objective_direct_substitution() {
        let levels = QuantileLevels::new(vec![0.9]).unwrap();
        let y = Tensor::scalar(1.0);
        let bundle = ForecastBundle::new(
            Tensor::scalar(0.0),
            Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap(),
        )
        .unwrap();
        let v = joint_objective(&y, &bundle, &levels).unwrap();
        assert!((v - 1.9).abs() < 1e-15);

        // Perfect predictions give zero.
        let perfect = ForecastBundle::new(
            Tensor::scalar(1.0),
            Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(joint_objective(&y, &perfect, &levels).unwrap(), 0.0);
    }

    #[test]
    fn joint_objective_equals_componentwise_recomputation() {
        let mut rng = seeded(29);
        let levels = QuantileLevels::new(vec![0.05, 0.2, 0.8, 0.95]).unwrap();
        for _ in 0..10 {
            let (m, n) = (3, 4);
            let y = Tensor::from_vec(
                vec![m, n],
                (0..m * n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let mean = Tensor::from_vec(
                vec![m, n],
                (0..m * n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let q = Tensor::from_vec(
                vec![m, n, 4],
                (0..m * n * 4).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let bundle = ForecastBundle::new(mean.clone(), q.clone()).unwrap();
            let joint = joint_objective(&y, &bundle, &levels).unwrap();

            let mut expect = l2_grid(&y, &mean).unwrap();
            for (jj, &tau) in levels.levels().iter().enumerate() {
                let qj = bundle.quantile_level(jj);
                for (yi, qi) in y.data().iter().zip(qj.data()) {
                    expect += tilted(tau, yi - qi).unwrap();
                }
            }
            assert!(
                (joint - expect).abs() < 1e-12,
                "additivity violated: {} vs {}",
                joint,
                expect
            );
        }
    }

    #[test]
    fn joint_objective_rejects_level_mismatch() {
        let levels = QuantileLevels::new(vec![0.1, 0.9]).unwrap();
        let y = Tensor::scalar(1.0);
        let bundle = ForecastBundle::new(
            Tensor::scalar(0.0),
            Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap(),
        )
        .unwrap();
        assert!(joint_objective(&y, &bundle, &levels).is_err());
    }

    #[test]
    fn bundle_shape_validation() {
        let mean = Tensor::zeros(&[2, 2]);
        let bad = Tensor::zeros(&[3, 2, 1]);
        assert!(ForecastBundle::new(mean, bad).is_err());
    }
}
