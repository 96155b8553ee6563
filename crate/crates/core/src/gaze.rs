//! Gaze log ingestion and gaze-to-frame alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GAZE_CSV_HEADER: &str = "timestamp_ms,x,y";
pub const DEFAULT_RATE_HZ: f64 = 30.0;
pub const DEFAULT_DELTA_MS: i64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub timestamp_ms: i64,
    pub x: f64,
    pub y: f64,
}

impl GazeSample {
    pub fn new(timestamp_ms: i64, x: f64, y: f64) -> Self {
        GazeSample { timestamp_ms, x, y }
    }

    /// Out-of-bounds samples stay in the track and are skipped at heatmap time.
    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeTrack {
    pub samples: Vec<GazeSample>,
    pub rate_hz: f64,
    /// Rows dropped because a later row reused their timestamp.
    #[serde(default)]
    pub duplicates_collapsed: usize,
}

impl Default for GazeTrack {
    fn default() -> Self {
        GazeTrack { samples: Vec::new(), rate_hz: DEFAULT_RATE_HZ, duplicates_collapsed: 0 }
    }
}

impl GazeTrack {
    pub fn new(samples: Vec<GazeSample>) -> Result<Self> {
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].timestamp_ms <= w[0].timestamp_ms {
                return Err(Error::Ordering {
                    line: i + 2,
                    prev: w[0].timestamp_ms,
                    next: w[1].timestamp_ms,
                });
            }
        }
        Ok(GazeTrack { samples, ..Default::default() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(GAZE_CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{},{},{}\n", s.timestamp_ms, s.x, s.y));
        }
        out
    }
}

/// Parses the `timestamp_ms,x,y` gaze log. Line numbers in errors are 1-based
/// and count the header.
pub fn parse_gaze_csv(bytes: &[u8]) -> Result<GazeTrack> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Parse { line: 0, msg: format!("not UTF-8: {e}") })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == GAZE_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `{GAZE_CSV_HEADER}`, found `{h}`"),
            })
        }
        None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
    }

    let mut track = GazeTrack::default();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let ts: i64 = fields[0].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad timestamp `{}`", fields[0]),
        })?;
        let coord = |s: &str, name: &str| -> Result<f64> {
            match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse { line: line_no, msg: format!("bad {name} `{s}`") }),
            }
        };
        let sample = GazeSample::new(ts, coord(fields[1], "x")?, coord(fields[2], "y")?);

        match track.samples.last_mut() {
            Some(last) if last.timestamp_ms == ts => {
                *last = sample;
                track.duplicates_collapsed += 1;
            }
            Some(last) if last.timestamp_ms > ts => {
                return Err(Error::Ordering { line: line_no, prev: last.timestamp_ms, next: ts });
            }
            _ => track.samples.push(sample),
        }
    }
    Ok(track)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub frame_id: i64,
    pub timestamp_ms: i64,
    pub image_path: String,
    pub width: usize,
    pub height: usize,
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<FrameRef>> {
    Ok(serde_json::from_slice(bytes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Singular,
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentWindow {
    pub frame_id: i64,
    pub mode: AlignMode,
    pub delta_ms: i64,
    pub selected: Vec<GazeSample>,
}

impl AlignmentWindow {
    pub fn empty(frame_id: i64, mode: AlignMode, delta_ms: i64) -> Self {
        AlignmentWindow { frame_id, mode, delta_ms, selected: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Selects the gaze samples feeding the heatmap of `frame`.
///
/// Singular mode takes the latest sample at or before the frame time.
/// Aggregated mode takes every sample in the closed interval `[t - delta, t]`.
/// Returns `Error::EmptyWindow` when nothing qualifies.
pub fn align_window(
    track: &GazeTrack,
    frame: &FrameRef,
    mode: AlignMode,
    delta_ms: i64,
) -> std::result::Result<AlignmentWindow, EmptyWindow> {
    let t = frame.timestamp_ms;
    let samples = &track.samples;
    // first index with timestamp > t
    let end = samples.partition_point(|s| s.timestamp_ms <= t);
    let selected = match mode {
        AlignMode::Singular => {
            if end == 0 {
                Vec::new()
            } else {
                vec![samples[end - 1]]
            }
        }
        AlignMode::Aggregated => {
            let start = samples.partition_point(|s| s.timestamp_ms < t - delta_ms.max(0));
            samples[start..end].to_vec()
        }
    };
    if selected.is_empty() {
        return Err(EmptyWindow { frame_id: frame.frame_id, timestamp_ms: t });
    }
    Ok(AlignmentWindow { frame_id: frame.frame_id, mode, delta_ms, selected })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no gaze samples for frame {frame_id} at {timestamp_ms} ms")]
pub struct EmptyWindow {
    pub frame_id: i64,
    pub timestamp_ms: i64,
}

/// Upper bound on aggregated window size at a given rate.
pub fn max_window_samples(delta_ms: i64, rate_hz: f64) -> usize {
    (delta_ms as f64 * rate_hz / 1000.0).floor() as usize + 1
}
