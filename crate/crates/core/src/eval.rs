//! Evaluation: prediction over assembled samples, pooled metrics and
//! depth-map dumps.

use std::io::Write;
use std::path::Path;

use crate::dataset::{save_depth, SequenceSample};
use crate::error::{Error, Result};
use crate::metrics::{format_table, CutoffMode, DepthMetrics, MetricAccumulator};
use crate::model::SrfNet;
use crate::objective::{log_denormalize, log_normalize, DepthRaster, DepthSpace, LogDepthParams};
use crate::params::ParamStore;
use crate::train::{make_batch, Augment};

/// Predicted and ground-truth depth (metres) for one sample.
#[derive(Clone, Debug)]
pub struct SamplePrediction {
    pub sequence: String,
    pub start: usize,
    pub predictions: Vec<DepthRaster>,
    pub ground_truth: Vec<DepthRaster>,
}

impl SamplePrediction {
    pub fn label(&self) -> String {
        format!("{}_{:06}", self.sequence, self.start)
    }
}

/// Run the network over `samples` and return metres predictions.
pub fn predict_samples(
    net: &SrfNet,
    params: &ParamStore,
    samples: &[SequenceSample],
    depth_params: LogDepthParams,
    batch_size: usize,
) -> Result<Vec<SamplePrediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SequenceSample> = chunk.iter().collect();
        let augs: Vec<Augment> = chunk.iter().map(|s| Augment::none(s.height(), s.width())).collect();
        let batch = make_batch(&refs, &augs, depth_params)?;
        let preds = net.predict(params, &batch.inputs)?;
        for (i, s) in chunk.iter().enumerate() {
            let predictions = preds
                .iter()
                .map(|p| {
                    let t = p.batch_item(i);
                    let log01 = DepthRaster::dense(t.height(), t.width(), t.into_data(), DepthSpace::Log01, depth_params);
                    log_denormalize(&log01)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(SamplePrediction {
                sequence: s.sequence.clone(),
                start: s.start,
                predictions,
                ground_truth: s.depths.clone(),
            });
        }
    }
    Ok(out)
}

/// Ground truth passed through as the prediction.
pub fn bypass_predictions(samples: &[SequenceSample]) -> Vec<SamplePrediction> {
    samples
        .iter()
        .map(|s| SamplePrediction {
            sequence: s.sequence.clone(),
            start: s.start,
            predictions: s.depths.clone(),
            ground_truth: s.depths.clone(),
        })
        .collect()
}

/// Metrics pooled over every valid pixel of every step. Ground truth below
/// the representable floor does not count.
pub fn pooled_metrics(preds: &[SamplePrediction], cutoffs: &[f64], mode: CutoffMode) -> Result<DepthMetrics> {
    let mut acc = MetricAccumulator::new(cutoffs, mode);
    for s in preds {
        for (p, g) in s.predictions.iter().zip(&s.ground_truth) {
            acc.push_raster(p, &g.with_floor_invalid())?;
        }
    }
    if acc.pixels() == 0 {
        return Err(Error::Data("no valid ground-truth pixels to evaluate".into()));
    }
    Ok(acc.finish())
}

const COLORMAP: [[f64; 3]; 6] = [
    [68.0, 1.0, 84.0],
    [65.0, 68.0, 135.0],
    [42.0, 120.0, 142.0],
    [34.0, 168.0, 132.0],
    [122.0, 209.0, 81.0],
    [253.0, 231.0, 37.0],
];

/// Colour for a value in `[0, 1]`; near is bright, far is dark.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = (1.0 - v.clamp(0.0, 1.0)) * (COLORMAP.len() - 1) as f64;
    let i = (v.floor() as usize).min(COLORMAP.len() - 2);
    let f = v - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (COLORMAP[i][c] * (1.0 - f) + COLORMAP[i + 1][c] * f).round() as u8;
    }
    rgb
}

/// Binary PPM of a metres raster. Colours are taken over the dataset's fixed
/// log01 range; invalid pixels are black.
pub fn write_depth_ppm<W: Write>(depth: &DepthRaster, mut w: W) -> Result<()> {
    let norm = log_normalize(depth, depth.params)?.raster;
    write!(w, "P6\n{} {}\n255\n", depth.width, depth.height)?;
    let mut buf = Vec::with_capacity(3 * depth.data.len());
    for (&v, &ok) in norm.data.iter().zip(&norm.valid) {
        buf.extend_from_slice(&if ok { colormap(v) } else { [0, 0, 0] });
    }
    w.write_all(&buf)?;
    Ok(())
}

fn save_ppm(path: &Path, depth: &DepthRaster) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_depth_ppm(depth, &mut w).map_err(|e| e.in_file(path))?;
    w.flush().map_err(|e| Error::io_at(path, e))
}

/// `<dir>/<label>/pred/%06d.{f32,json,ppm}` and the same under `gt/`.
pub fn dump_predictions(dir: &Path, preds: &[SamplePrediction]) -> Result<()> {
    for s in preds {
        for (kind, maps) in [("pred", &s.predictions), ("gt", &s.ground_truth)] {
            let d = dir.join(s.label()).join(kind);
            std::fs::create_dir_all(&d).map_err(|e| Error::io_at(&d, e))?;
            for (k, m) in maps.iter().enumerate() {
                save_depth(&d, k, m)?;
                save_ppm(&d.join(format!("{k:06}.ppm")), m)?;
            }
        }
    }
    Ok(())
}

/// Writes `metrics.json` and `metrics.txt` into `dir`.
pub fn write_report(dir: &Path, label: &str, metrics: &DepthMetrics) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let json = serde_json::to_string_pretty(&metrics.to_json())?;
    let path = dir.join("metrics.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io_at(&path, e))?;
    let table = format_table(&[(label.to_string(), metrics.clone())]);
    let path = dir.join("metrics.txt");
    std::fs::write(&path, &table).map_err(|e| Error::io_at(&path, e))?;
    Ok(table)
}
