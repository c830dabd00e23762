//! Event streams, fixed-stride windowing and voxel-grid encoding.
//!
//! Events are bucketed into non-overlapping windows of a fixed wall-clock
//! stride and each window is encoded as a `B x H x W` grid. An event's
//! polarity is split between the two temporally adjacent bins with linear
//! weights, so the grid sum equals the polarity sum of the window.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Event polarity: brightness increase or decrease.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }

    pub fn from_i64(p: i64) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Polarity::Positive => write!(f, "1"),
            Polarity::Negative => write!(f, "-1"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    /// Timestamp in microseconds.
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u32, y: u32, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// Time-ordered sequence of events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
}

impl EventStream {
    /// Wraps `events`, rejecting streams that are not sorted by timestamp.
    pub fn new(events: Vec<Event>) -> Result<Self> {
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Ordering {
                index: i + 1,
                t: events[i + 1].t,
                prev: events[i].t,
            });
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn polarity_sum(&self) -> f64 {
        self.events.iter().map(|e| e.p.sign()).sum()
    }

    /// Events with `t_start <= t < t_end`, found by binary search.
    pub fn slice_time(&self, t_start: u64, t_end: u64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < t_start);
        let hi = self.events.partition_point(|e| e.t < t_end);
        &self.events[lo..hi.max(lo)]
    }

    /// Parse the `t,x,y,p` text format. Blank lines and lines starting with
    /// `#` are skipped; any violation is reported with its 1-based line
    /// number.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut events = Vec::new();
        let mut last_t: Option<u64> = None;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::parse(lineno, format!("expected 4 fields t,x,y,p, found {}", fields.len())));
            }
            let t: u64 = fields[0]
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad timestamp {:?}", fields[0])))?;
            let x: u32 = fields[1]
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad x {:?}", fields[1])))?;
            let y: u32 = fields[2]
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad y {:?}", fields[2])))?;
            let p = fields[3]
                .parse::<i64>()
                .ok()
                .and_then(Polarity::from_i64)
                .ok_or_else(|| Error::parse(lineno, format!("polarity must be -1 or 1, found {:?}", fields[3])))?;
            if let Some(prev) = last_t {
                if t < prev {
                    return Err(Error::parse(lineno, format!("timestamp {t} precedes previous {prev}")));
                }
            }
            last_t = Some(t);
            events.push(Event::new(x, y, t, p));
        }
        Ok(Self { events })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read_csv(std::io::BufReader::new(file)).map_err(|e| e.in_file(path))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# t,x,y,p")?;
        for e in &self.events {
            writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventWindow {
    pub index: usize,
    pub t_start: u64,
    pub t_end: u64,
    pub events: Vec<Event>,
    /// Set on a trailing window that ends past the last event of the stream.
    pub partial: bool,
}

impl EventWindow {
    pub fn new(index: usize, t_start: u64, t_end: u64, events: Vec<Event>) -> Self {
        Self {
            index,
            t_start,
            t_end,
            events,
            partial: false,
        }
    }

    pub fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }
}

/// Split a sorted stream into contiguous windows `[t0 + k dt, t0 + (k+1) dt)`
/// starting at the first event. The last window is flagged `partial` when
/// the stream ends before its end time.
pub fn accumulate_windows(stream: &EventStream, delta_t: u64) -> Result<Vec<EventWindow>> {
    if delta_t == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let events = stream.events();
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return Ok(Vec::new());
    };
    let t0 = first.t;
    let count = ((last.t - t0) / delta_t + 1) as usize;
    let mut windows: Vec<EventWindow> = (0..count)
        .map(|k| {
            let start = t0 + k as u64 * delta_t;
            EventWindow::new(k, start, start + delta_t, Vec::new())
        })
        .collect();
    for e in events {
        let k = ((e.t - t0) / delta_t) as usize;
        windows[k].events.push(*e);
    }
    if let Some(tail) = windows.last_mut() {
        tail.partial = last.t + 1 < tail.t_end;
    }
    Ok(windows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    bins: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        Self {
            bins,
            height,
            width,
            data: vec![0.0; bins * height * width],
            normalized: false,
        }
    }

    pub fn from_data(bins: usize, height: usize, width: usize, data: Vec<f64>, normalized: bool) -> Self {
        assert_eq!(data.len(), bins * height * width);
        Self {
            bins,
            height,
            width,
            data,
            normalized,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, b: usize, y: usize, x: usize) -> f64 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn bin(&self, b: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[b * hw..(b + 1) * hw]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Grid as a `[1, bins, h, w]` tensor.
    pub fn to_tensor(&self) -> crate::tensor::Tensor {
        crate::tensor::Tensor::new([1, self.bins, self.height, self.width], self.data.clone())
    }
}

/// Per-event deposit: `(bin, weight)` pairs for the two nearest bin centres.
/// Bin centres sit at `tau = 0, 1, ..., bins - 1` where
/// `tau = (bins - 1) * (t - t_start) / (t_end - t_start)`.
pub fn temporal_weights(t: u64, t_start: u64, t_end: u64, bins: usize) -> [(usize, f64); 2] {
    let span = (t_end - t_start) as f64;
    let tau = (bins - 1) as f64 * (t.saturating_sub(t_start)) as f64 / span;
    let tau = tau.clamp(0.0, (bins - 1) as f64);
    let lo = (tau.floor() as usize).min(bins - 1);
    let frac = tau - lo as f64;
    let hi = (lo + 1).min(bins - 1);
    [(lo, 1.0 - frac), (hi, frac)]
}

pub fn build_voxel_grid(window: &EventWindow, bins: usize, height: usize, width: usize) -> Result<VoxelGrid> {
    if window.t_end <= window.t_start {
        return Err(Error::Config(format!(
            "degenerate window [{}, {})",
            window.t_start, window.t_end
        )));
    }
    if bins == 0 {
        return Err(Error::Config("voxel grid needs at least one bin".into()));
    }
    let mut grid = VoxelGrid::zeros(bins, height, width);
    let hw = height * width;
    for e in &window.events {
        if e.x as usize >= width || e.y as usize >= height {
            return Err(Error::OutOfBounds {
                x: e.x,
                y: e.y,
                width,
                height,
            });
        }
        let pix = e.y as usize * width + e.x as usize;
        for (b, w) in temporal_weights(e.t, window.t_start, window.t_end, bins) {
            if w != 0.0 {
                grid.data[b * hw + pix] += e.p.sign() * w;
            }
        }
    }
    Ok(grid)
}

/// Standardise the nonzero cells to zero mean and unit (population) standard
/// deviation. Zero cells stay zero. An all-zero grid is returned unchanged
/// (flagged as normalised); a grid whose nonzero cells are all equal is only
/// mean-shifted.
pub fn normalize_voxel_grid(grid: &VoxelGrid) -> VoxelGrid {
    let mut out = grid.clone();
    out.normalized = true;
    let nonzero: Vec<f64> = grid.data.iter().copied().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return out;
    }
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let inv = if std > 0.0 { 1.0 / std } else { 1.0 };
    for v in out.data.iter_mut() {
        if *v != 0.0 {
            *v = (*v - mean) * inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(t: u64, x: u32, y: u32, p: i64) -> Event {
        Event::new(x, y, t, Polarity::from_i64(p).unwrap())
    }

    #[test]
    fn windows_bucket_by_stride() {
        let s = EventStream::new(vec![ev(0, 0, 0, 1), ev(10, 0, 0, 1), ev(25, 0, 0, -1)]).unwrap();
        let w = accumulate_windows(&s, 20).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!((w[0].t_start, w[0].t_end, w[0].events.len()), (0, 20, 2));
        assert_eq!((w[1].t_start, w[1].t_end, w[1].events.len()), (20, 40, 1));
        assert!(!w[0].partial);
        assert!(w[1].partial);
    }

    #[test]
    fn empty_stream_gives_no_windows() {
        assert!(accumulate_windows(&EventStream::default(), 5).unwrap().is_empty());
    }

    #[test]
    fn unsorted_stream_rejected() {
        let err = EventStream::new(vec![ev(5, 0, 0, 1), ev(3, 0, 0, 1)]).unwrap_err();
        assert!(matches!(err, Error::Ordering { index: 1, .. }));
    }

    #[test]
    fn event_at_window_start_fills_bin_zero() {
        let w = EventWindow::new(0, 100, 200, vec![ev(100, 1, 0, 1)]);
        let g = build_voxel_grid(&w, 5, 1, 2).unwrap();
        assert_eq!(g.at(0, 0, 1), 1.0);
        assert_eq!(g.sum(), 1.0);
        assert_eq!(g.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn midway_event_splits_evenly() {
        // tau = 4 * 150 / 400 = 1.5, halfway between bin centres 1 and 2.
        let w = EventWindow::new(0, 0, 400, vec![ev(150, 0, 0, -1)]);
        let g = build_voxel_grid(&w, 5, 1, 1).unwrap();
        assert_eq!(g.data(), &[0.0, -0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn out_of_bounds_event_rejected() {
        let w = EventWindow::new(0, 0, 10, vec![ev(1, 4, 0, 1)]);
        assert!(matches!(
            build_voxel_grid(&w, 5, 4, 4),
            Err(Error::OutOfBounds { x: 4, .. })
        ));
    }

    #[test]
    fn degenerate_window_rejected() {
        let w = EventWindow::new(0, 10, 10, vec![]);
        assert!(build_voxel_grid(&w, 5, 4, 4).is_err());
    }

    #[test]
    fn normalization_examples() {
        let zero = VoxelGrid::zeros(2, 2, 2);
        let n = normalize_voxel_grid(&zero);
        assert!(n.is_normalized());
        assert!(n.data().iter().all(|&v| v == 0.0));

        let g = VoxelGrid::from_data(1, 1, 3, vec![2.0, 0.0, 4.0], false);
        assert_eq!(normalize_voxel_grid(&g).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let s = EventStream::new(vec![ev(1, 2, 3, 1), ev(4, 5, 6, -1)]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(EventStream::read_csv(&buf[..]).unwrap(), s);

        let bad = "# header\n1,0,0,1\n\n0,0,0,1\n";
        match EventStream::read_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let bad_p = "1,0,0,0\n";
        assert!(matches!(EventStream::read_csv(bad_p.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    fn arb_events(max: usize) -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec((0u64..10_000, 0u32..8, 0u32..6, prop::bool::ANY), 0..max).prop_map(|mut v| {
            v.sort_by_key(|e| e.0);
            v.into_iter()
                .map(|(t, x, y, p)| Event::new(x, y, t, if p { Polarity::Positive } else { Polarity::Negative }))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn windows_partition_the_stream(events in arb_events(200), dt in 1u64..3000) {
            let s = EventStream::new(events.clone()).unwrap();
            let w = accumulate_windows(&s, dt).unwrap();
            let joined: Vec<Event> = w.iter().flat_map(|w| w.events.iter().copied()).collect();
            prop_assert_eq!(joined, events);
            for pair in w.windows(2) {
                prop_assert_eq!(pair[0].t_end, pair[1].t_start);
            }
            for win in &w {
                prop_assert_eq!(win.duration(), dt);
                prop_assert!(win.events.iter().all(|e| win.t_start <= e.t && e.t < win.t_end));
            }
        }

        #[test]
        fn voxel_mass_is_conserved(events in arb_events(100)) {
            let w = EventWindow::new(0, 0, 10_000, events.clone());
            let g = build_voxel_grid(&w, 5, 6, 8).unwrap();
            let expected: f64 = events.iter().map(|e| e.p.sign()).sum();
            prop_assert!((g.sum() - expected).abs() <= 1e-6 * events.len().max(1) as f64);
            prop_assert_eq!(build_voxel_grid(&w, 5, 6, 8).unwrap(), g);
        }

        #[test]
        fn temporal_weights_form_a_simplex(t in 0u64..1000, bins in 1usize..9) {
            let w = temporal_weights(t, 0, 1000, bins);
            prop_assert!(w.iter().all(|&(b, v)| v >= 0.0 && b < bins));
            prop_assert!((w[0].1 + w[1].1 - 1.0).abs() < 1e-15);
        }

        #[test]
        fn normalized_nonzero_cells_are_standardized(vals in prop::collection::vec(-5.0f64..5.0, 2..60)) {
            let g = VoxelGrid::from_data(1, 1, vals.len(), vals, false);
            let n = normalize_voxel_grid(&g);
            let nz: Vec<f64> = n.data().iter().copied().filter(|&v| v != 0.0).collect();
            let src_nz: Vec<f64> = g.data().iter().copied().filter(|&v| v != 0.0).collect();
            let distinct = src_nz.iter().any(|&v| v != src_nz[0]);
            prop_assume!(src_nz.len() >= 2 && distinct);
            let m = nz.iter().sum::<f64>() / nz.len() as f64;
            let s = (nz.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nz.len() as f64).sqrt();
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
