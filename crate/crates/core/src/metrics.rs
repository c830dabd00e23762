//! Depth evaluation metrics.
//!
//! All statistics are pooled over every valid pixel fed to a
//! [`MetricAccumulator`], so a dataset-level report weights pixels equally
//! rather than averaging per-image values.

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::objective::{DepthRaster, DepthSpace};

pub const DEFAULT_CUTOFFS: [f64; 3] = [10.0, 20.0, 30.0];

/// Which depth decides whether a pixel falls within a cutoff distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoffMode {
    #[default]
    GroundTruth,
    Prediction,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffError {
    pub cutoff: f64,
    pub mean_abs: f64,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMetrics {
    pub cutoff_errors: Vec<CutoffError>,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub si_log: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_3: f64,
    pub pixels: usize,
}

/// `avg_abs_error_10` for a cutoff of 10 m, `avg_abs_error_12.5` for 12.5 m.
pub fn cutoff_key(cutoff: f64) -> String {
    if cutoff.fract() == 0.0 {
        format!("avg_abs_error_{}", cutoff as i64)
    } else {
        format!("avg_abs_error_{cutoff}")
    }
}

impl DepthMetrics {
    pub fn avg_abs_error(&self, cutoff: f64) -> Option<f64> {
        self.cutoff_errors.iter().find(|c| c.cutoff == cutoff).map(|c| c.mean_abs)
    }

    /// `(key, value)` pairs in report order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .cutoff_errors
            .iter()
            .map(|c| (cutoff_key(c.cutoff), c.mean_abs))
            .collect();
        out.extend([
            ("abs_rel".to_string(), self.abs_rel),
            ("sq_rel".to_string(), self.sq_rel),
            ("rmse".to_string(), self.rmse),
            ("rmse_log".to_string(), self.rmse_log),
            ("si_log".to_string(), self.si_log),
            ("delta_1".to_string(), self.delta_1),
            ("delta_2".to_string(), self.delta_2),
            ("delta_3".to_string(), self.delta_3),
        ]);
        out
    }

    /// Flat JSON object. Undefined values (no pixels) become `null`.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in self.entries() {
            map.insert(k, serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number));
        }
        map.insert("pixels".into(), Value::from(self.pixels));
        Value::Object(map)
    }
}

#[derive(Clone, Debug)]
struct CutoffSum {
    cutoff: f64,
    abs: f64,
    n: usize,
}

/// Running sums for pooled metrics.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    mode: CutoffMode,
    cutoffs: Vec<CutoffSum>,
    n: usize,
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    log_sq: f64,
    log_sum: f64,
    delta: [usize; 3],
}

impl MetricAccumulator {
    pub fn new(cutoffs: &[f64], mode: CutoffMode) -> Self {
        Self {
            mode,
            cutoffs: cutoffs
                .iter()
                .map(|&cutoff| CutoffSum { cutoff, abs: 0.0, n: 0 })
                .collect(),
            n: 0,
            abs_rel: 0.0,
            sq_rel: 0.0,
            sq: 0.0,
            log_sq: 0.0,
            log_sum: 0.0,
            delta: [0; 3],
        }
    }

    /// Add one pixel pair in metres.
    pub fn push(&mut self, pred: f64, gt: f64) -> Result<()> {
        if !(pred > 0.0 && pred.is_finite()) {
            return Err(Error::Data(format!("prediction must be positive and finite, got {pred}")));
        }
        if !(gt > 0.0 && gt.is_finite()) {
            return Err(Error::Data(format!("ground truth must be positive and finite, got {gt}")));
        }
        let diff = pred - gt;
        self.n += 1;
        self.abs_rel += diff.abs() / gt;
        self.sq_rel += diff * diff / gt;
        self.sq += diff * diff;
        let d = pred.ln() - gt.ln();
        self.log_sq += d * d;
        self.log_sum += d;
        let ratio = (pred / gt).max(gt / pred);
        for (i, count) in self.delta.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *count += 1;
            }
        }
        let key = match self.mode {
            CutoffMode::GroundTruth => gt,
            CutoffMode::Prediction => pred,
        };
        for c in &mut self.cutoffs {
            if key <= c.cutoff {
                c.abs += diff.abs();
                c.n += 1;
            }
        }
        Ok(())
    }

    /// Add all pixels valid in `gt` (and, if given, in `pred`).
    pub fn push_raster(&mut self, pred: &DepthRaster, gt: &DepthRaster) -> Result<()> {
        if pred.space != DepthSpace::Meters || gt.space != DepthSpace::Meters {
            return Err(Error::Data("metrics are computed on metres rasters".into()));
        }
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Data(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for i in 0..gt.data.len() {
            if gt.valid[i] && pred.valid[i] {
                self.push(pred.data[i], gt.data[i])?;
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> DepthMetrics {
        let n = self.n as f64;
        let mean = |s: f64| if self.n == 0 { f64::NAN } else { s / n };
        let log_mean = mean(self.log_sum);
        DepthMetrics {
            cutoff_errors: self
                .cutoffs
                .iter()
                .map(|c| CutoffError {
                    cutoff: c.cutoff,
                    mean_abs: if c.n == 0 { f64::NAN } else { c.abs / c.n as f64 },
                    pixels: c.n,
                })
                .collect(),
            abs_rel: mean(self.abs_rel),
            sq_rel: mean(self.sq_rel),
            rmse: mean(self.sq).sqrt(),
            rmse_log: mean(self.log_sq).sqrt(),
            si_log: mean(self.log_sq) - log_mean * log_mean,
            delta_1: mean(self.delta[0] as f64),
            delta_2: mean(self.delta[1] as f64),
            delta_3: mean(self.delta[2] as f64),
            pixels: self.n,
        }
    }
}

/// Metrics over one raster pair in metres.
pub fn depth_metrics(pred: &DepthRaster, gt: &DepthRaster, cutoffs: &[f64], mode: CutoffMode) -> Result<DepthMetrics> {
    let mut acc = MetricAccumulator::new(cutoffs, mode);
    acc.push_raster(pred, gt)?;
    Ok(acc.finish())
}

/// Aligned text table, one row per labelled record.
pub fn format_table(rows: &[(String, DepthMetrics)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let keys: Vec<String> = first.entries().into_iter().map(|(k, _)| k).collect();
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("run".to_string()).chain(keys.iter().cloned()).collect()];
    for (label, m) in rows {
        let mut row = vec![label.clone()];
        row.extend(m.entries().into_iter().map(|(_, v)| format!("{v:.4}")));
        cells.push(row);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r.get(c).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 { format!("{s:<w$}", w = widths[i]) } else { format!("{s:>w$}", w = widths[i]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::LogDepthParams;

    fn raster(data: Vec<f64>) -> DepthRaster {
        DepthRaster::dense(1, data.len(), data, DepthSpace::Meters, LogDepthParams::MVSEC)
    }

    #[test]
    fn perfect_prediction() {
        let gt = raster(vec![3.0, 8.0, 15.0, 40.0]);
        let m = depth_metrics(&gt, &gt, &DEFAULT_CUTOFFS, CutoffMode::GroundTruth).unwrap();
        for (k, v) in m.entries() {
            if k.starts_with("delta") {
                assert_eq!(v, 1.0, "{k}");
            } else {
                assert_eq!(v, 0.0, "{k}");
            }
        }
    }

    #[test]
    fn ten_percent_overestimate() {
        let gt = raster(vec![3.0, 8.0, 15.0, 40.0]);
        let pred = raster(gt.data.iter().map(|d| d * 1.1).collect());
        let m = depth_metrics(&pred, &gt, &DEFAULT_CUTOFFS, CutoffMode::GroundTruth).unwrap();
        assert!((m.abs_rel - 0.1).abs() < 1e-12);
        assert_eq!(m.delta_1, 1.0);
        assert!(m.si_log.abs() < 1e-12);
    }

    #[test]
    fn cutoffs_nest() {
        let gt = raster(vec![5.0, 12.0, 25.0, 50.0]);
        let pred = raster(vec![6.0, 10.0, 30.0, 45.0]);
        let m = depth_metrics(&pred, &gt, &DEFAULT_CUTOFFS, CutoffMode::GroundTruth).unwrap();
        let counts: Vec<usize> = m.cutoff_errors.iter().map(|c| c.pixels).collect();
        assert_eq!(counts, vec![1, 2, 3]);
        assert_eq!(m.avg_abs_error(10.0), Some(1.0));
        assert_eq!(m.avg_abs_error(20.0), Some(1.5));
        let m = depth_metrics(&pred, &gt, &DEFAULT_CUTOFFS, CutoffMode::Prediction).unwrap();
        assert_eq!(m.cutoff_errors[0].pixels, 2);
    }

    #[test]
    fn json_has_all_nine_keys() {
        let gt = raster(vec![3.0, 8.0]);
        let v = depth_metrics(&gt, &gt, &DEFAULT_CUTOFFS, CutoffMode::GroundTruth).unwrap().to_json();
        for k in [
            "avg_abs_error_10",
            "avg_abs_error_20",
            "avg_abs_error_30",
            "abs_rel",
            "sq_rel",
            "rmse",
            "rmse_log",
            "si_log",
            "delta_1",
            "delta_2",
            "delta_3",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn invalid_pixels_are_skipped() {
        let mut gt = raster(vec![3.0, 8.0]);
        gt.valid[1] = false;
        let pred = raster(vec![3.0, 80.0]);
        let m = depth_metrics(&pred, &gt, &DEFAULT_CUTOFFS, CutoffMode::GroundTruth).unwrap();
        assert_eq!(m.pixels, 1);
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn nonpositive_prediction_is_an_error() {
        let gt = raster(vec![3.0]);
        assert!(depth_metrics(&raster(vec![0.0]), &gt, &DEFAULT_CUTOFFS, CutoffMode::GroundTruth).is_err());
    }

    #[test]
    fn table_columns_align() {
        let gt = raster(vec![3.0, 8.0]);
        let m = depth_metrics(&gt, &gt, &DEFAULT_CUTOFFS, CutoffMode::GroundTruth).unwrap();
        let t = format_table(&[("full".into(), m.clone()), ("frame_only".into(), m)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }
}
