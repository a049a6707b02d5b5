//! Clip directories, IMU streams and frame-rate alignment.
//!
//! A clip directory holds a `meta` file of `key=value` lines, one lossless
//! frame file per frame (`frame_00000.rgb8` raw row-major RGB8, or
//! `frame_00000.png`), and optionally an `imu.csv` with the raw inertial
//! samples (`t,ax,ay,az,wx,wy,wz`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::MetricsReport;
use crate::NUM_AXES;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing meta file in {0}")]
    MissingMeta(PathBuf),
    #[error("unparseable meta: {0}")]
    Meta(String),
    #[error("missing frame {index} in {dir}")]
    MissingFrame { dir: PathBuf, index: usize },
    #[error("frame {index}: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    Dimension {
        index: usize,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("clip needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid imu stream: {0}")]
    InvalidImu(String),
    #[error("imu.csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("imu stream covers [{have_lo:.4}, {have_hi:.4}] s but [{need_lo:.4}, {need_hi:.4}] s is required")]
    Coverage {
        have_lo: f64,
        have_hi: f64,
        need_lo: f64,
        need_hi: f64,
    },
    #[error("invalid action sequence: {0}")]
    InvalidActions(String),
    #[error("report validation failed: {0}")]
    Validation(String),
    #[error("report schema error: {0}")]
    Schema(String),
    #[error("image decode error in {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A short RGB8 video clip.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    width: usize,
    height: usize,
    num_frames: usize,
    fps: f64,
    t0: f64,
    pixels: Vec<u8>,
}

impl VideoClip {
    /// Build a clip from concatenated row-major `H×W×3` frames.
    pub fn new(
        width: usize,
        height: usize,
        fps: f64,
        t0: f64,
        pixels: Vec<u8>,
    ) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::InvalidClip("zero-sized frames".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(DataError::InvalidClip(format!("fps must be positive, got {fps}")));
        }
        if !t0.is_finite() {
            return Err(DataError::InvalidClip("t0 must be finite".into()));
        }
        let frame_len = width * height * 3;
        if pixels.len() % frame_len != 0 {
            return Err(DataError::InvalidClip(format!(
                "pixel buffer of {} bytes is not a whole number of {width}x{height} frames",
                pixels.len()
            )));
        }
        let num_frames = pixels.len() / frame_len;
        if num_frames < 2 {
            return Err(DataError::TooFewFrames(num_frames));
        }
        Ok(Self {
            width,
            height,
            num_frames,
            fps,
            t0,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame_len(&self) -> usize {
        self.width * self.height * 3
    }

    /// Raw RGB8 bytes of frame `i`.
    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Luma of frame `i` in `[0, 1]`, row-major.
    pub fn gray_frame(&self, i: usize) -> Vec<f32> {
        self.frame(i)
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect()
    }

    /// A new clip with the frames reordered by `order`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self, DataError> {
        let mut pixels = Vec::with_capacity(order.len() * self.frame_len());
        for &i in order {
            if i >= self.num_frames {
                return Err(DataError::InvalidClip(format!("frame index {i} out of range")));
            }
            pixels.extend_from_slice(self.frame(i));
        }
        Self::new(self.width, self.height, self.fps, self.t0, pixels)
    }
}

/// One raw inertial sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Translational acceleration, m/s².
    pub accel: [f64; 3],
    /// Angular velocity, rad/s.
    pub gyro: [f64; 3],
}

impl ImuSample {
    pub fn as_row(&self) -> [f64; NUM_AXES] {
        [
            self.accel[0],
            self.accel[1],
            self.accel[2],
            self.gyro[0],
            self.gyro[1],
            self.gyro[2],
        ]
    }
}

/// Raw IMU stream with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuStream {
    samples: Vec<ImuSample>,
    rate_hz: f64,
}

impl ImuStream {
    pub fn new(samples: Vec<ImuSample>, rate_hz: f64) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::InvalidImu("empty stream".into()));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(DataError::InvalidImu(format!("rate must be positive, got {rate_hz}")));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.t.is_finite() || s.as_row().iter().any(|v| !v.is_finite()) {
                return Err(DataError::InvalidImu(format!("non-finite value in sample {i}")));
            }
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(DataError::InvalidImu(format!(
                    "timestamps not strictly increasing at sample {i}"
                )));
            }
        }
        Ok(Self { samples, rate_hz })
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    /// Build a stream by sampling `f` on a uniform grid covering `[start, end]`.
    pub fn sample_uniform(
        start: f64,
        end: f64,
        rate_hz: f64,
        mut f: impl FnMut(f64) -> [f64; NUM_AXES],
    ) -> Result<Self, DataError> {
        let n = ((end - start) * rate_hz).ceil() as usize + 1;
        let samples = (0..n)
            .map(|k| {
                let t = start + k as f64 / rate_hz;
                let r = f(t);
                ImuSample {
                    t,
                    accel: [r[0], r[1], r[2]],
                    gyro: [r[3], r[4], r[5]],
                }
            })
            .collect();
        Self::new(samples, rate_hz)
    }
}

/// Per-frame 6-DoF inertial commands, columns `ax ay az wx wy wz`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence {
    rows: Vec<[f64; NUM_AXES]>,
    fps: f64,
}

impl ActionSequence {
    pub fn new(rows: Vec<[f64; NUM_AXES]>, fps: f64) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::InvalidActions("no rows".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(DataError::InvalidActions(format!("fps must be positive, got {fps}")));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidActions("non-finite entry".into()));
        }
        Ok(Self { rows, fps })
    }

    pub fn rows(&self) -> &[[f64; NUM_AXES]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn axis(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r[j])
    }
}

/// Parsed `meta` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipMeta {
    pub fps: f64,
    pub t0: f64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub gravity_compensated: Option<bool>,
    /// Any further keys, preserved verbatim.
    pub extra: BTreeMap<String, String>,
}

impl ClipMeta {
    pub fn for_clip(clip: &VideoClip) -> Self {
        Self {
            fps: clip.fps(),
            t0: clip.t0(),
            width: clip.width(),
            height: clip.height(),
            frames: clip.num_frames(),
            gravity_compensated: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DataError::Meta(format!("line {}: expected key=value", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn take<T: std::str::FromStr>(
            map: &mut BTreeMap<String, String>,
            key: &str,
        ) -> Result<T, DataError> {
            let raw = map
                .remove(key)
                .ok_or_else(|| DataError::Meta(format!("missing key `{key}`")))?;
            raw.parse()
                .map_err(|_| DataError::Meta(format!("bad value for `{key}`: {raw}")))
        }
        let fps: f64 = take(&mut map, "fps")?;
        let t0: f64 = take(&mut map, "t0")?;
        let width: usize = take(&mut map, "width")?;
        let height: usize = take(&mut map, "height")?;
        let frames: usize = take(&mut map, "frames")?;
        let gravity_compensated = match map.remove("gravity_compensated") {
            None => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| DataError::Meta(format!("bad gravity_compensated: {v}")))?,
            ),
        };
        if !(fps.is_finite() && fps > 0.0) || !t0.is_finite() {
            return Err(DataError::Meta("fps must be positive and t0 finite".into()));
        }
        Ok(Self {
            fps,
            t0,
            width,
            height,
            frames,
            gravity_compensated,
            extra: map,
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fps={}", self.fps);
        let _ = writeln!(s, "t0={}", self.t0);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "frames={}", self.frames);
        if let Some(g) = self.gravity_compensated {
            let _ = writeln!(s, "gravity_compensated={g}");
        }
        for (k, v) in &self.extra {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Everything found in one clip directory.
#[derive(Debug, Clone)]
pub struct ClipRecord {
    /// Directory name, used as a stable sort key.
    pub id: String,
    pub meta: ClipMeta,
    pub clip: VideoClip,
    pub imu: Option<ImuStream>,
}

impl ClipRecord {
    /// Per-frame actions from the raw IMU stream.
    pub fn actions(&self) -> Result<ActionSequence, DataError> {
        let imu = self
            .imu
            .as_ref()
            .ok_or_else(|| DataError::InvalidImu(format!("clip {} has no imu.csv", self.id)))?;
        resample_imu(imu, self.clip.fps(), self.clip.num_frames(), self.clip.t0())
    }
}

fn frame_path(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("frame_{i:05}.{ext}"))
}

fn read_frame(dir: &Path, i: usize, meta: &ClipMeta) -> Result<Vec<u8>, DataError> {
    let raw = frame_path(dir, i, "rgb8");
    if raw.exists() {
        let bytes = fs::read(&raw).map_err(io_err(&raw))?;
        let expected = meta.width * meta.height * 3;
        if bytes.len() != expected {
            // Infer the side lengths only for the error message.
            let found_h = bytes.len() / (meta.width * 3).max(1);
            return Err(DataError::Dimension {
                index: i,
                expected_w: meta.width,
                expected_h: meta.height,
                found_w: meta.width,
                found_h,
            });
        }
        return Ok(bytes);
    }
    let png = frame_path(dir, i, "png");
    if png.exists() {
        let img = image::open(&png).map_err(|e| DataError::Image {
            path: png.clone(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        if w != meta.width || h != meta.height {
            return Err(DataError::Dimension {
                index: i,
                expected_w: meta.width,
                expected_h: meta.height,
                found_w: w,
                found_h: h,
            });
        }
        return Ok(rgb.into_raw());
    }
    Err(DataError::MissingFrame {
        dir: dir.to_path_buf(),
        index: i,
    })
}

/// Load the frames of a clip directory.
pub fn load_clip(dir: &Path) -> Result<VideoClip, DataError> {
    let meta = load_meta(dir)?;
    load_frames(dir, &meta)
}

fn load_meta(dir: &Path) -> Result<ClipMeta, DataError> {
    let meta_path = dir.join("meta");
    if !meta_path.exists() {
        return Err(DataError::MissingMeta(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    ClipMeta::parse(&text)
}

fn load_frames(dir: &Path, meta: &ClipMeta) -> Result<VideoClip, DataError> {
    if meta.frames < 2 {
        return Err(DataError::TooFewFrames(meta.frames));
    }
    let mut pixels = Vec::with_capacity(meta.frames * meta.width * meta.height * 3);
    for i in 0..meta.frames {
        pixels.extend(read_frame(dir, i, meta)?);
    }
    VideoClip::new(meta.width, meta.height, meta.fps, meta.t0, pixels)
}

/// Load frames, meta and (when present) `imu.csv`.
pub fn load_record(dir: &Path) -> Result<ClipRecord, DataError> {
    let meta = load_meta(dir)?;
    let clip = load_frames(dir, &meta)?;
    let imu_path = dir.join("imu.csv");
    let imu = if imu_path.exists() {
        Some(read_imu_csv(&imu_path)?)
    } else {
        None
    };
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ClipRecord {
        id,
        meta,
        clip,
        imu,
    })
}

/// Sorted list of clip directories (those containing a `meta` file) under `root`.
pub fn list_clip_dirs(root: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let p = entry.path();
        if p.is_dir() && p.join("meta").exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Load every clip under `root`, sorted by directory name.
pub fn load_dataset(root: &Path) -> Result<Vec<ClipRecord>, DataError> {
    let dirs = list_clip_dirs(root)?;
    let loaded = crate::par::map_slice(&dirs, |d| load_record(d));
    loaded.into_iter().collect()
}

/// Write a clip directory: `meta`, raw `.rgb8` frames and optionally `imu.csv`.
pub fn write_clip(
    dir: &Path,
    clip: &VideoClip,
    meta: &ClipMeta,
    imu: Option<&ImuStream>,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join("meta");
    fs::write(&meta_path, meta.render()).map_err(io_err(&meta_path))?;
    for i in 0..clip.num_frames() {
        let p = frame_path(dir, i, "rgb8");
        fs::write(&p, clip.frame(i)).map_err(io_err(&p))?;
    }
    if let Some(imu) = imu {
        write_imu_csv(&dir.join("imu.csv"), imu)?;
    }
    Ok(())
}

pub const IMU_HEADER: &str = "t,ax,ay,az,wx,wy,wz";

pub fn write_imu_csv(path: &Path, imu: &ImuStream) -> Result<(), DataError> {
    let mut s = String::with_capacity(imu.samples.len() * 96);
    s.push_str(IMU_HEADER);
    s.push('\n');
    for smp in &imu.samples {
        let _ = write!(s, "{}", smp.t);
        for v in smp.as_row() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Parse `imu.csv`. The nominal rate is estimated from the median sample spacing.
pub fn read_imu_csv(path: &Path) -> Result<ImuStream, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_imu_csv(&text)
}

pub fn parse_imu_csv(text: &str) -> Result<ImuStream, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == IMU_HEADER => {}
        _ => {
            return Err(DataError::Csv {
                line: 1,
                msg: format!("expected header `{IMU_HEADER}`"),
            })
        }
    }
    let mut samples = Vec::new();
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| DataError::Csv {
            line: n + 1,
            msg: e.to_string(),
        })?;
        if vals.len() != 7 {
            return Err(DataError::Csv {
                line: n + 1,
                msg: format!("expected 7 fields, found {}", vals.len()),
            });
        }
        samples.push(ImuSample {
            t: vals[0],
            accel: [vals[1], vals[2], vals[3]],
            gyro: [vals[4], vals[5], vals[6]],
        });
    }
    let rate = estimate_rate(&samples);
    ImuStream::new(samples, rate)
}

fn estimate_rate(samples: &[ImuSample]) -> f64 {
    let mut dts: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    if dts.is_empty() {
        return 1.0;
    }
    dts.sort_by(f64::total_cmp);
    let med = dts[dts.len() / 2];
    if med > 0.0 {
        1.0 / med
    } else {
        1.0
    }
}

/// Align a raw IMU stream to video frames.
///
/// Row `t` is the mean of the raw samples in the half-open window
/// `[t0 + (t - 1/2)/fps, t0 + (t + 1/2)/fps)`. Windows with no samples fall
/// back to linear interpolation at the window centre. The stream must cover
/// the union of all windows up to one raw sample period.
pub fn resample_imu(
    stream: &ImuStream,
    fps: f64,
    num_frames: usize,
    t0: f64,
) -> Result<ActionSequence, DataError> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(DataError::InvalidActions(format!("fps must be positive, got {fps}")));
    }
    if num_frames == 0 {
        return Err(DataError::InvalidActions("zero frames requested".into()));
    }
    let s = &stream.samples;
    let need_lo = t0 - 0.5 / fps;
    let need_hi = t0 + (num_frames as f64 - 0.5) / fps;
    let tol = 1.0 / stream.rate_hz;
    let have_lo = s[0].t;
    let have_hi = s[s.len() - 1].t;
    if have_lo > need_lo + tol || have_hi < need_hi - tol {
        return Err(DataError::Coverage {
            have_lo,
            have_hi,
            need_lo,
            need_hi,
        });
    }
    let rows = (0..num_frames)
        .map(|t| {
            let lo = t0 + (t as f64 - 0.5) / fps;
            let hi = t0 + (t as f64 + 0.5) / fps;
            let a = s.partition_point(|x| x.t < lo);
            let b = s.partition_point(|x| x.t < hi);
            if b > a {
                let mut acc = [0.0; NUM_AXES];
                for smp in &s[a..b] {
                    for (o, v) in acc.iter_mut().zip(smp.as_row()) {
                        *o += v;
                    }
                }
                let n = (b - a) as f64;
                acc.map(|v| v / n)
            } else {
                interpolate(s, t0 + t as f64 / fps)
            }
        })
        .collect();
    ActionSequence::new(rows, fps)
}

fn interpolate(s: &[ImuSample], t: f64) -> [f64; NUM_AXES] {
    let i = s.partition_point(|x| x.t < t);
    if i == 0 {
        return s[0].as_row();
    }
    if i == s.len() {
        return s[s.len() - 1].as_row();
    }
    let (p, q) = (&s[i - 1], &s[i]);
    let w = (t - p.t) / (q.t - p.t);
    let (rp, rq) = (p.as_row(), q.as_row());
    std::array::from_fn(|k| rp[k] + w * (rq[k] - rp[k]))
}

/// Serialize a validated report as pretty JSON.
pub fn write_report(report: &MetricsReport, path: &Path) -> Result<(), DataError> {
    report.validate().map_err(DataError::Validation)?;
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| DataError::Validation(e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<MetricsReport, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_report(&text)
}

pub fn parse_report(text: &str) -> Result<MetricsReport, DataError> {
    let report: MetricsReport =
        serde_json::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
    report.validate().map_err(DataError::Validation)?;
    Ok(report)
}
