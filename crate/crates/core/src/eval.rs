//! Quantile evaluation suite: point error, tilted test loss, crossing
//! diagnostics, interval coverage/width, and repeat aggregation.

use crate::error::{Error, Result};
use crate::losses::{tilted, ForecastBundle, QuantileLevels};
use crate::tensor::Tensor;

/// Coverage and width of one prediction interval.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntervalStats {
    pub lower_tau: f64,
    pub upper_tau: f64,
    /// Nominal coverage `upper_tau - lower_tau`.
    pub alpha: f64,
    /// Fraction of targets inside the interval (inclusive bounds).
    pub icp: f64,
    /// Mean interval length; can be negative if the inputs cross.
    pub mil: f64,
}

/// Metrics of one evaluated model on one test set.
///
/// `tilted_total` sums the tilted loss over every point and level;
/// `tilted_per_point` divides by the point count so its magnitude is
/// comparable to the per-point MAE/RMSE columns.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub tilted_total: f64,
    pub tilted_per_point: f64,
    pub crossing_loss: f64,
    pub num_crosses: u64,
    pub intervals: Vec<IntervalStats>,
    pub n_points: usize,
}

/// Mean absolute error and root mean squared error.
pub fn point_metrics(y: &[f64], y_hat: &[f64]) -> Result<(f64, f64)> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::invalid(
            "point_metrics",
            format!("need matching nonempty arrays, got {} and {}", y.len(), y_hat.len()),
        ));
    }
    let n = y.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (a, b) in y.iter().zip(y_hat) {
        let r = a - b;
        abs += r.abs();
        sq += r * r;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Tilted loss summed over all test points and all levels.
pub fn tilted_test_loss(
    bundle: &ForecastBundle,
    y: &Tensor,
    levels: &QuantileLevels,
) -> Result<f64> {
    if y.shape() != bundle.mean.shape() {
        return Err(Error::shape(
            "tilted_test_loss",
            "target shape",
            format!("{:?}", bundle.mean.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    let j = levels.count();
    if bundle.quantile_count() != j {
        return Err(Error::shape(
            "tilted_test_loss",
            "level count",
            j,
            bundle.quantile_count(),
        ));
    }
    let q = bundle.quantiles.data();
    let mut total = 0.0;
    for (p, &yv) in y.data().iter().enumerate() {
        for (jj, &tau) in levels.levels().iter().enumerate() {
            total += tilted(tau, yv - q[p * j + jj])?;
        }
    }
    Ok(total)
}

/// Crossing loss and crossing count over adjacent level pairs.
///
/// The loss sums `max(0, q_j - q_{j+1})` over every point and adjacent
/// pair; the count uses strict inequality, so ties contribute neither.
pub fn crossing_metrics(bundle: &ForecastBundle) -> Result<(f64, u64)> {
    let j = bundle.quantile_count();
    if j < 2 {
        return Err(Error::invalid(
            "crossing_metrics",
            format!("need at least 2 quantile levels, got {}", j),
        ));
    }
    let q = bundle.quantiles.data();
    let mut loss = 0.0;
    let mut count = 0u64;
    for p in 0..bundle.point_count() {
        let row = &q[p * j..(p + 1) * j];
        for jj in 0..j - 1 {
            let gap = row[jj] - row[jj + 1];
            if gap > 0.0 {
                loss += gap;
                count += 1;
            }
        }
    }
    Ok((loss, count))
}

/// Interval coverage (inclusive bounds) and mean interval length.
pub fn interval_metrics(lower: &[f64], upper: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if y.is_empty() || lower.len() != y.len() || upper.len() != y.len() {
        return Err(Error::invalid(
            "interval_metrics",
            "need matching nonempty arrays",
        ));
    }
    let n = y.len() as f64;
    let mut inside = 0usize;
    let mut width = 0.0;
    for ((&lo, &hi), &yv) in lower.iter().zip(upper).zip(y) {
        if lo <= yv && yv <= hi {
            inside += 1;
        }
        width += hi - lo;
    }
    Ok((inside as f64 / n, width / n))
}

/// Full per-model report: point metrics on the mean head, tilted and
/// crossing diagnostics on the quantile heads, and one coverage entry per
/// requested `(lower_tau, upper_tau)` pair. Every requested level must be
/// one of the bundle's levels.
pub fn compute_report(
    y: &Tensor,
    bundle: &ForecastBundle,
    levels: &QuantileLevels,
    interval_pairs: &[(f64, f64)],
) -> Result<MetricsReport> {
    let (mae, rmse) = point_metrics(y.data(), bundle.mean.data())?;
    let tilted_total = tilted_test_loss(bundle, y, levels)?;
    let n_points = y.len();
    let (crossing_loss, num_crosses) = if levels.count() >= 2 {
        crossing_metrics(bundle)?
    } else {
        (0.0, 0)
    };
    let mut intervals = Vec::with_capacity(interval_pairs.len());
    for &(lo_tau, hi_tau) in interval_pairs {
        let lo_idx = levels.index_of(lo_tau).ok_or_else(|| {
            Error::invalid(
                "compute_report",
                format!("interval level {} not among model levels {:?}", lo_tau, levels.levels()),
            )
        })?;
        let hi_idx = levels.index_of(hi_tau).ok_or_else(|| {
            Error::invalid(
                "compute_report",
                format!("interval level {} not among model levels {:?}", hi_tau, levels.levels()),
            )
        })?;
        let lower = bundle.quantile_level(lo_idx);
        let upper = bundle.quantile_level(hi_idx);
        let (icp, mil) = interval_metrics(lower.data(), upper.data(), y.data())?;
        intervals.push(IntervalStats {
            lower_tau: lo_tau,
            upper_tau: hi_tau,
            alpha: hi_tau - lo_tau,
            icp,
            mil,
        });
    }
    Ok(MetricsReport {
        mae,
        rmse,
        tilted_total,
        tilted_per_point: tilted_total / n_points as f64,
        crossing_loss,
        num_crosses,
        intervals,
        n_points,
    })
}

/// Sample mean and sample standard deviation (n-1 denominator; 0 for a
/// single value).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// Interval statistics aggregated over repeats.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntervalAggregate {
    pub lower_tau: f64,
    pub upper_tau: f64,
    pub alpha: f64,
    pub icp: MeanStd,
    pub mil: MeanStd,
}

/// Per-field mean and standard deviation over repeated runs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregateReport {
    pub repeats: usize,
    pub mae: MeanStd,
    pub rmse: MeanStd,
    pub tilted_total: MeanStd,
    pub tilted_per_point: MeanStd,
    pub crossing_loss: MeanStd,
    pub num_crosses: MeanStd,
    pub intervals: Vec<IntervalAggregate>,
}

/// Aggregate repeated evaluations; reports must share the interval layout.
/// Order of the input reports does not matter.
pub fn aggregate_repeats(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::invalid("aggregate_repeats", "no reports"));
    }
    let layout: Vec<(f64, f64)> = reports[0]
        .intervals
        .iter()
        .map(|i| (i.lower_tau, i.upper_tau))
        .collect();
    for r in reports {
        let this: Vec<(f64, f64)> = r.intervals.iter().map(|i| (i.lower_tau, i.upper_tau)).collect();
        if this != layout {
            return Err(Error::invalid(
                "aggregate_repeats",
                "reports have differing interval layouts",
            ));
        }
    }
    let field = |f: fn(&MetricsReport) -> f64| -> MeanStd {
        mean_std(&reports.iter().map(f).collect::<Vec<_>>())
    };
    let intervals = layout
        .iter()
        .enumerate()
        .map(|(k, &(lo, hi))| IntervalAggregate {
            lower_tau: lo,
            upper_tau: hi,
            alpha: hi - lo,
            icp: mean_std(&reports.iter().map(|r| r.intervals[k].icp).collect::<Vec<_>>()),
            mil: mean_std(&reports.iter().map(|r| r.intervals[k].mil).collect::<Vec<_>>()),
        })
        .collect();
    Ok(AggregateReport {
        repeats: reports.len(),
        mae: field(|r| r.mae),
        rmse: field(|r| r.rmse),
        tilted_total: field(|r| r.tilted_total),
        tilted_per_point: field(|r| r.tilted_per_point),
        crossing_loss: field(|r| r.crossing_loss),
        num_crosses: field(|r| r.num_crosses as f64),
        intervals,
    })
}

fn interval_label(alpha: f64) -> String {
    format!("{:.0}%", alpha * 100.0)
}

/// Flat CSV table with one row per model, mirroring the familiar column
/// layout: MAE, RMSE, Tilted Loss (per point), Crossing Loss, Num.
/// Crosses, then ICP/MIL per interval.
pub fn reports_to_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("method,mae,rmse,tilted_loss,crossing_loss,num_crosses");
    if let Some((_, first)) = rows.first() {
        for iv in &first.intervals {
            let label = interval_label(iv.alpha);
            out.push_str(&format!(",icp_{},mil_{}", label, label));
        }
    }
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            name, r.mae, r.rmse, r.tilted_per_point, r.crossing_loss, r.num_crosses
        ));
        for iv in &r.intervals {
            out.push_str(&format!(",{},{}", iv.icp, iv.mil));
        }
        out.push('\n');
    }
    out
}

/// CSV table of aggregated repeats with `mean (± std)` cells.
pub fn aggregates_to_csv(rows: &[(String, AggregateReport)]) -> String {
    let cell = |m: &MeanStd| format!("{:.4} (± {:.4})", m.mean, m.std);
    let mut out = String::from("method,mae,rmse,tilted_loss,crossing_loss,num_crosses");
    if let Some((_, first)) = rows.first() {
        for iv in &first.intervals {
            let label = interval_label(iv.alpha);
            out.push_str(&format!(",icp_{},mil_{}", label, label));
        }
    }
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            name,
            cell(&r.mae),
            cell(&r.rmse),
            cell(&r.tilted_per_point),
            cell(&r.crossing_loss),
            cell(&r.num_crosses)
        ));
        for iv in &r.intervals {
            out.push_str(&format!(",{},{}", cell(&iv.icp), cell(&iv.mil)));
        }
        out.push('\n');
    }
    out
}
