//! Response confidence from instruction attention, and decile calibration
//! reports against an outcome metric.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::SegmentScores;

pub const BINS: usize = 10;

/// `1 - s_ins`: how much of the query's attention went to retrieved content.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ConfidenceScore(f64);

impl ConfidenceScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn confidence(scores: &SegmentScores) -> ConfidenceScore {
    ConfidenceScore(1.0 - scores.instruction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BinMode {
    /// `[0, 0.1), [0.1, 0.2), ..., [0.9, 1.0]`.
    #[default]
    FixedInterval,
    /// Ten groups of (nearly) equal size after sorting by confidence.
    Quantile,
}

impl std::str::FromStr for BinMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(BinMode::FixedInterval),
            "quantile" => Ok(BinMode::Quantile),
            other => Err(Error::invalid(format!("unknown bin mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// NaN for empty bins.
    pub mean_confidence: f64,
    pub mean_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub pearson_r: f64,
    /// Set when either variable has zero variance; `pearson_r` is then 0.
    pub degenerate: bool,
    pub samples: usize,
}

/// Pearson correlation, accumulated in one pass with running co-moments.
/// Returns `(r, degenerate)`.
pub fn pearson(pairs: &[(f64, f64)]) -> (f64, bool) {
    let (mut mx, mut my, mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, &(x, y)) in pairs.iter().enumerate() {
        let n = (k + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        cxx += dx * (x - mx);
        cyy += dy * (y - my);
        cxy += dx * (y - my);
    }
    if cxx <= 0.0 || cyy <= 0.0 {
        return (0.0, true);
    }
    ((cxy / (cxx.sqrt() * cyy.sqrt())).clamp(-1.0, 1.0), false)
}

pub fn calibration_report(pairs: &[(f64, f64)], mode: BinMode) -> Result<CalibrationReport> {
    if pairs.len() < BINS {
        return Err(Error::invalid(format!(
            "calibration needs at least {BINS} pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(c, m)| !c.is_finite() || !m.is_finite()) {
        return Err(Error::invalid("calibration pairs must be finite"));
    }
    let groups: Vec<Vec<(f64, f64)>> = match mode {
        BinMode::FixedInterval => {
            let mut groups = vec![Vec::new(); BINS];
            for &(c, m) in pairs {
                let idx = ((c * BINS as f64).floor().max(0.0) as usize).min(BINS - 1);
                groups[idx].push((c, m));
            }
            groups
        }
        BinMode::Quantile => {
            let mut sorted = pairs.to_vec();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let n = sorted.len();
            (0..BINS)
                .map(|b| sorted[b * n / BINS..(b + 1) * n / BINS].to_vec())
                .collect()
        }
    };
    let bins = groups
        .iter()
        .enumerate()
        .map(|(b, g)| {
            let count = g.len();
            let mean = |f: fn(&(f64, f64)) -> f64| {
                if count == 0 {
                    f64::NAN
                } else {
                    g.iter().map(f).sum::<f64>() / count as f64
                }
            };
            let (low, high) = match mode {
                BinMode::FixedInterval => (b as f64 / BINS as f64, (b + 1) as f64 / BINS as f64),
                BinMode::Quantile => (
                    g.first().map_or(f64::NAN, |p| p.0),
                    g.last().map_or(f64::NAN, |p| p.0),
                ),
            };
            CalibrationBin {
                low,
                high,
                count,
                mean_confidence: mean(|p| p.0),
                mean_metric: mean(|p| p.1),
            }
        })
        .collect();
    let (pearson_r, degenerate) = pearson(pairs);
    Ok(CalibrationReport {
        bins,
        pearson_r,
        degenerate,
        samples: pairs.len(),
    })
}

impl CalibrationReport {
    /// `bin_low,bin_high,count,mean_confidence,mean_metric` rows and a
    /// trailing summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,mean_confidence,mean_metric\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.low, b.high, b.count, b.mean_confidence, b.mean_metric
            ));
        }
        out.push_str(&format!(
            "# pearson_r={},degenerate={},samples={}\n",
            self.pearson_r, self.degenerate, self.samples
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn confidence_boundaries() {
        let c = |s| confidence(&SegmentScores::from_doc_scores::<&str>(s, [])).value();
        assert_eq!(c(1.0), 0.0);
        assert_eq!(c(0.0), 1.0);
        assert_abs_diff_eq!(c(0.37), 0.63, epsilon = 1e-12);
        assert!(c(0.2) > c(0.3));
    }

    #[test]
    fn perfect_correlation() {
        let pairs: Vec<_> = (0..50).map(|i| (i as f64 / 50.0, i as f64 / 50.0)).collect();
        let r = calibration_report(&pairs, BinMode::FixedInterval).unwrap();
        assert_abs_diff_eq!(r.pearson_r, 1.0, epsilon = 1e-12);
        for b in &r.bins {
            assert_abs_diff_eq!(b.mean_confidence, b.mean_metric, epsilon = 1e-12);
        }
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 50);
    }

    #[test]
    fn constant_outcome_is_degenerate() {
        let pairs: Vec<_> = (0..20).map(|i| (i as f64 / 20.0, 0.5)).collect();
        let r = calibration_report(&pairs, BinMode::FixedInterval).unwrap();
        assert_eq!(r.pearson_r, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn too_few_pairs() {
        assert!(calibration_report(&[(0.5, 0.5); 9], BinMode::FixedInterval).is_err());
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut g = GaussianStream::new(17);
        let pairs: Vec<(f64, f64)> = (0..1000)
            .map(|_| {
                let c = g.uniform();
                (c, 0.6 * c + 0.2 * g.normal())
            })
            .collect();
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
        let oracle = sxy / (sxx * syy).sqrt();
        let r = calibration_report(&pairs, BinMode::FixedInterval).unwrap();
        assert_abs_diff_eq!(r.pearson_r, oracle, epsilon = 1e-10);
    }

    #[test]
    fn bins_exhaustive_and_exclusive() {
        let mut g = GaussianStream::new(2);
        let mut pairs: Vec<(f64, f64)> = (0..333).map(|_| (g.uniform(), g.uniform())).collect();
        pairs.push((1.0, 1.0));
        pairs.push((0.0, 0.0));
        pairs.push((0.1, 0.0));
        for mode in [BinMode::FixedInterval, BinMode::Quantile] {
            let r = calibration_report(&pairs, mode).unwrap();
            assert_eq!(r.bins.len(), BINS);
            assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), pairs.len());
        }
        let fixed = calibration_report(&pairs, BinMode::FixedInterval).unwrap();
        let expected_last = pairs.iter().filter(|p| p.0 >= 0.9).count();
        assert_eq!(fixed.bins[9].count, expected_last);
        assert_eq!(fixed.bins[1].count, pairs.iter().filter(|p| p.0 >= 0.1 && p.0 < 0.2).count());
    }

    #[test]
    fn csv_shape() {
        let pairs: Vec<_> = (0..10).map(|i| (i as f64 / 10.0, 1.0)).collect();
        let csv = calibration_report(&pairs, BinMode::FixedInterval).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "bin_low,bin_high,count,mean_confidence,mean_metric");
        assert_eq!(lines.len(), 12);
        assert!(lines[11].starts_with("# pearson_r=0,degenerate=true"));
    }
}
