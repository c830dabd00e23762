//! On-disk dataset layout and sequence assembly.
//!
//! ```text
//! <root>/<seq>/meta.json          {resolution, frame_period_us, alpha, d_max, threshold_C}
//! <root>/<seq>/frames/%06d.pgm    8-bit grayscale frames
//! <root>/<seq>/events.csv         t,x,y,p (microseconds, polarity 1/-1)
//! <root>/<seq>/depth/%06d.f32     little-endian f32 metres, row-major
//! <root>/<seq>/depth/%06d.json    {width, height, space, alpha, d_max}
//! ```
//!
//! Frame `k` is taken at `k * frame_period_us`. Depth values that are not
//! finite and positive mark invalid pixels.
//!
//! Real recordings are brought in by writing this layout: frames as PGM,
//! events as CSV, and for every frame the depth map with the nearest
//! timestamp, resampled to the frame resolution. A frame without a depth map
//! within half a frame period is left out; its index stays empty and every
//! sample touching it is dropped during assembly.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{build_voxel_grid, normalize_voxel_grid, EventStream, EventWindow, VoxelGrid};
use crate::frame::GrayFrame;
use crate::mask::{density_stack, sobel_edges};
use crate::objective::{DepthRaster, DepthSpace, LogDepthParams};
use crate::synth::SyntheticSequence;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub frame_period_us: u64,
    pub alpha: f64,
    pub d_max: f64,
    #[serde(rename = "threshold_C")]
    pub threshold_c: f64,
}

impl SequenceMeta {
    pub fn params(&self) -> LogDepthParams {
        LogDepthParams {
            alpha: self.alpha,
            d_max: self.d_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthHeader {
    pub width: usize,
    pub height: usize,
    pub space: DepthSpace,
    pub alpha: f64,
    pub d_max: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io_at(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io_at(path, e))
}

pub fn save_depth(dir: &Path, index: usize, depth: &DepthRaster) -> Result<()> {
    let bin = dir.join(format!("{index:06}.f32"));
    let mut bytes = Vec::with_capacity(depth.data.len() * 4);
    for (&d, &ok) in depth.data.iter().zip(&depth.valid) {
        let v = if ok { d as f32 } else { 0.0 };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(&bin).map_err(|e| Error::io_at(&bin, e))?;
    f.write_all(&bytes).map_err(|e| Error::io_at(&bin, e))?;
    let header = DepthHeader {
        width: depth.width,
        height: depth.height,
        space: depth.space,
        alpha: depth.params.alpha,
        d_max: depth.params.d_max,
    };
    write_json(&dir.join(format!("{index:06}.json")), &header)
}

pub fn load_depth(dir: &Path, index: usize) -> Result<DepthRaster> {
    let json = dir.join(format!("{index:06}.json"));
    let header: DepthHeader = read_json(&json)?;
    let bin = dir.join(format!("{index:06}.f32"));
    let mut bytes = Vec::new();
    std::fs::File::open(&bin)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io_at(&bin, e))?;
    let n = header.width * header.height;
    if bytes.len() != 4 * n {
        return Err(Error::Data(format!(
            "expected {} bytes for a {}x{} map, found {}",
            4 * n,
            header.height,
            header.width,
            bytes.len()
        ))
        .in_file(&bin));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let valid = data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
    let params = LogDepthParams {
        alpha: header.alpha,
        d_max: header.d_max,
    };
    Ok(DepthRaster::new(header.height, header.width, data, valid, header.space, params))
}

/// Write one sequence in the dataset layout.
pub fn write_sequence(dir: &Path, seq: &SyntheticSequence, meta: &SequenceMeta) -> Result<()> {
    let frames_dir = dir.join("frames");
    let depth_dir = dir.join("depth");
    create_dir(&frames_dir)?;
    create_dir(&depth_dir)?;
    for (k, f) in seq.frames.iter().enumerate() {
        f.save_pgm(&frames_dir.join(format!("{k:06}.pgm")))?;
    }
    for (k, d) in seq.depths.iter().enumerate() {
        save_depth(&depth_dir, k, d)?;
    }
    seq.events.save_csv(&dir.join("events.csv"))?;
    write_json(&dir.join("meta.json"), meta)
}

/// A sequence as read from disk. Index `k` is `None` where the file for
/// frame `k` is absent.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub name: String,
    pub meta: SequenceMeta,
    pub frames: Vec<Option<GrayFrame>>,
    pub depths: Vec<Option<DepthRaster>>,
    pub events: EventStream,
}

impl LoadedSequence {
    pub fn timestamps(&self) -> Vec<u64> {
        (0..self.frames.len() as u64).map(|k| k * self.meta.frame_period_us).collect()
    }
}

fn indices(dir: &Path, ext: &str) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io_at(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io_at(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let k = stem
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("file name is not a frame index")).in_file(&path))?;
        out.insert(k);
    }
    Ok(out)
}

pub fn load_sequence(dir: &Path) -> Result<LoadedSequence> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
    let [h, w] = meta.resolution;
    let frame_dir = dir.join("frames");
    let depth_dir = dir.join("depth");
    let frame_ids = indices(&frame_dir, "pgm")?;
    let depth_ids = indices(&depth_dir, "f32")?;
    let count = frame_ids.iter().chain(&depth_ids).max().map_or(0, |m| m + 1);
    let mut frames = Vec::with_capacity(count);
    let mut depths = Vec::with_capacity(count);
    for k in 0..count {
        frames.push(if frame_ids.contains(&k) {
            let path = frame_dir.join(format!("{k:06}.pgm"));
            let f = GrayFrame::load_pgm(&path)?;
            if (f.height, f.width) != (h, w) {
                return Err(Error::Data(format!("frame is {}x{}, meta says {h}x{w}", f.height, f.width)).in_file(&path));
            }
            Some(f)
        } else {
            None
        });
        depths.push(if depth_ids.contains(&k) {
            let d = load_depth(&depth_dir, k)?;
            if (d.height, d.width) != (h, w) || d.space != DepthSpace::Meters {
                return Err(Error::Data(format!("depth must be a {h}x{w} metres map"))
                    .in_file(&depth_dir.join(format!("{k:06}.json"))));
            }
            Some(d)
        } else {
            None
        });
    }
    let events = EventStream::load_csv(&dir.join("events.csv"))?;
    let events_path = dir.join("events.csv");
    if let Some(e) = events.events().iter().find(|e| e.x as usize >= w || e.y as usize >= h) {
        return Err(Error::OutOfBounds {
            x: e.x,
            y: e.y,
            width: w,
            height: h,
        }
        .in_file(&events_path));
    }
    Ok(LoadedSequence {
        name,
        meta,
        frames,
        depths,
        events,
    })
}

/// Sequence directories (those holding `meta.json`) under `root`, sorted.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io_at(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io_at(root, e))?.path();
        if path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no sequence directories with meta.json under {}", root.display())));
    }
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<LoadedSequence>> {
    list_sequences(root)?.iter().map(|d| load_sequence(d)).collect()
}

/// `L` time-aligned steps ready for the network.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub sequence: String,
    /// Index of the first frame in the source sequence.
    pub start: usize,
    pub timestamps: Vec<u64>,
    /// Half-open `[start, end)` microsecond range of each event window.
    pub windows: Vec<(u64, u64)>,
    pub frames: Vec<GrayFrame>,
    /// Standardised voxel grids.
    pub voxel_grids: Vec<VoxelGrid>,
    /// Multi-scale event density, `[1, S, H, W]`; the event mask head's input.
    pub event_priors: Vec<Tensor>,
    /// Sobel magnitude, `[1, 1, H, W]`; the frame mask head's input.
    pub frame_priors: Vec<Tensor>,
    /// Ground truth in metres.
    pub depths: Vec<DepthRaster>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    pub sequence_length: usize,
    pub bins: usize,
    /// Event window length ending at each frame timestamp.
    pub delta_t: u64,
    pub patch_scales: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssemblyReport {
    pub samples: usize,
    /// Samples left out because a frame or depth map was missing.
    pub dropped: usize,
    /// Frames past the last whole sample.
    pub leftover_frames: usize,
}

/// Event window of frame `k`: `(t_k - delta_t, t_k]`, stored half-open.
pub fn frame_window(events: &EventStream, index: usize, t_frame: u64, delta_t: u64) -> EventWindow {
    let start = (t_frame + 1).saturating_sub(delta_t);
    let end = t_frame + 1;
    EventWindow::new(index, start, end, events.slice_time(start, end).to_vec())
}

/// Cut a sequence into non-overlapping runs of `L` frames. Each step gets the
/// events of the window ending at its frame, its voxel grid and both mask
/// priors. Runs with a missing frame or depth map are dropped and counted.
pub fn assemble_sequences(
    name: &str,
    frames: &[Option<GrayFrame>],
    events: &EventStream,
    depths: &[Option<DepthRaster>],
    timestamps: &[u64],
    cfg: &AssemblyConfig,
) -> Result<(Vec<SequenceSample>, AssemblyReport)> {
    let l = cfg.sequence_length;
    if l == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    if cfg.delta_t == 0 {
        return Err(Error::Config("event window length must be positive".into()));
    }
    if frames.len() != depths.len() || frames.len() != timestamps.len() {
        return Err(Error::Data(format!(
            "{} frames, {} depth maps and {} timestamps do not pair up",
            frames.len(),
            depths.len(),
            timestamps.len()
        )));
    }
    let mut report = AssemblyReport {
        leftover_frames: frames.len() % l,
        ..AssemblyReport::default()
    };
    let mut samples = Vec::new();
    for chunk in 0..frames.len() / l {
        let range = chunk * l..(chunk + 1) * l;
        if range.clone().any(|k| frames[k].is_none() || depths[k].is_none()) {
            report.dropped += 1;
            continue;
        }
        let mut sample = SequenceSample {
            sequence: name.to_string(),
            start: range.start,
            timestamps: Vec::with_capacity(l),
            windows: Vec::with_capacity(l),
            frames: Vec::with_capacity(l),
            voxel_grids: Vec::with_capacity(l),
            event_priors: Vec::with_capacity(l),
            frame_priors: Vec::with_capacity(l),
            depths: Vec::with_capacity(l),
        };
        for k in range {
            let frame = frames[k].clone().unwrap();
            let depth = depths[k].clone().unwrap();
            let (h, w) = (frame.height, frame.width);
            if (depth.height, depth.width) != (h, w) {
                return Err(Error::Data(format!("frame {k} of {name} and its depth map differ in size")));
            }
            let window = frame_window(events, k, timestamps[k], cfg.delta_t);
            let grid = build_voxel_grid(&window, cfg.bins, h, w)?;
            sample.event_priors.push(density_stack(&grid, &cfg.patch_scales)?.data);
            sample.frame_priors.push(sobel_edges(&frame).to_tensor());
            sample.voxel_grids.push(normalize_voxel_grid(&grid));
            sample.windows.push((window.t_start, window.t_end));
            sample.timestamps.push(timestamps[k]);
            sample.frames.push(frame);
            sample.depths.push(depth);
        }
        samples.push(sample);
    }
    report.samples = samples.len();
    Ok((samples, report))
}

/// Assemble every loaded sequence.
pub fn assemble_dataset(seqs: &[LoadedSequence], cfg: &AssemblyConfig) -> Result<(Vec<SequenceSample>, AssemblyReport)> {
    let mut all = Vec::new();
    let mut total = AssemblyReport::default();
    for s in seqs {
        let (samples, report) = assemble_sequences(&s.name, &s.frames, &s.events, &s.depths, &s.timestamps(), cfg)?;
        all.extend(samples);
        total.samples += report.samples;
        total.dropped += report.dropped;
        total.leftover_frames += report.leftover_frames;
    }
    Ok((all, total))
}

/// Assemble an in-memory synthetic sequence.
pub fn assemble_synthetic(name: &str, seq: &SyntheticSequence, cfg: &AssemblyConfig) -> Result<(Vec<SequenceSample>, AssemblyReport)> {
    let frames: Vec<_> = seq.frames.iter().cloned().map(Some).collect();
    let depths: Vec<_> = seq.depths.iter().cloned().map(Some).collect();
    assemble_sequences(name, &frames, &seq.events, &depths, &seq.timestamps, cfg)
}
