//! Online tracking: fused two-branch response, bicubic upsampling, cosine
//! window, scale pyramid and template management.

mod upsample;

pub use upsample::{bicubic_upsample, cubic_weight};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use image::GrayImage;

use crate::dataio::{crop_patch, crop_square, exemplar_side, BBox, SequenceRecord};
use crate::error::{Error, Result};
use crate::evalkit::TrackerRunner;
use crate::network::{search_responses, template_features, template_filters, Model, TemplateFeatures, TemplateFilters};
use crate::tensor::Tensor;

/// Context margin around the target used for exemplar and search crops.
pub const CONTEXT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateMode {
    /// Keep the first-frame template.
    First,
    /// Replace the template with the last prediction's crop.
    Previous,
    /// Exponential moving average of pre-CF features.
    Ema,
}

impl FromStr for TemplateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "previous" => Ok(Self::Previous),
            "ema" => Ok(Self::Ema),
            _ => Err(Error::Config(format!("unknown template mode {s:?} (first, previous, ema)"))),
        }
    }
}

impl fmt::Display for TemplateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::First => "first",
            Self::Previous => "previous",
            Self::Ema => "ema",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub scales: usize,
    pub scale_step: f64,
    pub scale_penalty: f64,
    pub scale_damping: f64,
    pub window_weight: f64,
    pub response_upsample: usize,
    pub template_mode: TemplateMode,
    pub ema_rate: f64,
    /// β: weight of the discriminative response; the fine-grained one gets 1 − β.
    pub branch_mix: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            scale_step: 1.0375,
            scale_penalty: 0.9745,
            scale_damping: 0.59,
            window_weight: 0.176,
            response_upsample: 16,
            template_mode: TemplateMode::First,
            ema_rate: 0.01,
            branch_mix: 0.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales % 2 == 0 {
            return Err(Error::Config(format!("scales must be odd, got {}", self.scales)));
        }
        if !(self.scale_step >= 1.0) || !self.scale_step.is_finite() {
            return Err(Error::Config(format!("scale_step {} must be >= 1", self.scale_step)));
        }
        if self.response_upsample == 0 {
            return Err(Error::Config("response_upsample must be at least 1".into()));
        }
        for (name, v) in [
            ("scale_penalty", self.scale_penalty),
            ("scale_damping", self.scale_damping),
            ("window_weight", self.window_weight),
            ("ema_rate", self.ema_rate),
            ("branch_mix", self.branch_mix),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Pyramid factors `step^(i − (n−1)/2)`, smallest first.
    pub fn scale_factors(&self) -> Vec<f64> {
        let mid = (self.scales / 2) as i32;
        (0..self.scales as i32).map(|i| self.scale_step.powi(i - mid)).collect()
    }
}

/// `β·dis + (1 − β)·fin`, elementwise.
pub fn fuse_responses(dis: &Tensor<f32>, fin: &Tensor<f32>, beta: f64) -> Result<Tensor<f32>> {
    let (b, r) = (beta as f32, (1.0 - beta) as f32);
    dis.zip_with(fin, "fuse_responses", |d, f| b * d + r * f)
}

/// Symmetric Hann window of side `n` normalized to unit sum, row-major.
pub fn cosine_window(n: usize) -> Vec<f64> {
    let h: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * (i as f64 + 0.5) / n as f64).cos())
        .collect();
    let mut w: Vec<f64> = h.iter().flat_map(|&a| h.iter().map(move |&b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Output of one tracked frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    pub bbox: BBox,
    /// Maximum of the fused 17×17-style response at the chosen scale.
    pub score: f64,
    pub scale_index: usize,
}

/// Per-sequence tracking state. Weights are read-only for the whole session.
#[derive(Clone, Debug)]
pub struct TrackerSession {
    model: Model<f32>,
    cfg: TrackerConfig,
    center: (f64, f64),
    size: (f64, f64),
    features: TemplateFeatures<f32>,
    filters: TemplateFilters<f32>,
    window: Vec<f64>,
}

/// Starts tracking `box0` in `frame0`. The classifier is dropped from the
/// session's weights.
pub fn init_session(model: &Model<f32>, frame0: &GrayImage, box0: BBox, cfg: &TrackerConfig) -> Result<TrackerSession> {
    cfg.validate()?;
    let model = model.pruned();
    let b = clip_box(box0, frame0.width(), frame0.height());
    if b.is_degenerate() {
        return Err(Error::Input(format!("initial box {box0} is empty inside the frame")));
    }
    let ex = crop_patch(frame0, &b, CONTEXT, model.config.backbone.exemplar_size)?;
    let features = template_features(&model, &ex)?;
    let filters = template_filters(&model, &features)?;
    let m = model.config.response_size()?;
    let window = cosine_window(m * cfg.response_upsample);
    Ok(TrackerSession {
        model,
        cfg: cfg.clone(),
        center: b.center(),
        size: (b.w, b.h),
        features,
        filters,
        window,
    })
}

fn clip_box(b: BBox, w: u32, h: u32) -> BBox {
    let x0 = b.x.clamp(0.0, w as f64);
    let y0 = b.y.clamp(0.0, h as f64);
    let x1 = (b.x + b.w).clamp(0.0, w as f64);
    let y1 = (b.y + b.h).clamp(0.0, h as f64);
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

impl TrackerSession {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.center.0, self.center.1, self.size.0, self.size.1)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Pre-CF template features currently in use.
    pub fn features(&self) -> &TemplateFeatures<f32> {
        &self.features
    }

    pub fn filters(&self) -> &TemplateFilters<f32> {
        &self.filters
    }

    fn search_side(&self) -> f64 {
        let bb = &self.model.config.backbone;
        let z = exemplar_side(&self.bbox(), CONTEXT);
        z * bb.search_size as f64 / bb.exemplar_size as f64
    }

    /// Raw (dis, fin) responses for the search crop at pyramid factor `s`.
    pub fn responses_at(&self, frame: &GrayImage, s: f64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let side = self.search_side() * s;
        let x = crop_square(frame, self.center, side, self.model.config.backbone.search_size, None)?;
        search_responses(&self.model, &self.filters, &x)
    }

    /// Predicts the target in `frame`, updates the state and, per the
    /// template mode, the template.
    pub fn track_frame(&mut self, frame: &GrayImage) -> Result<FrameResult> {
        let cfg = self.cfg.clone();
        let m = self.model.config.response_size()?;
        let u = cfg.response_upsample;
        let big = m * u;
        let factors = cfg.scale_factors();
        let mid = cfg.scales / 2;

        // each scale runs on its own so results do not depend on the pyramid size
        let mut best: Option<(f64, usize, Vec<f64>, f64)> = None;
        for (i, &s) in factors.iter().enumerate() {
            let (dis, fin) = self.responses_at(frame, s)?;
            let fused = fuse_responses(&dis, &fin, cfg.branch_mix)?;
            if !fused.is_finite() {
                return Err(Error::NonFinite(format!("response at scale {s}")));
            }
            let raw: Vec<f64> = fused.data().iter().map(|&v| v as f64).collect();
            let score = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut up = bicubic_upsample(&raw, m, u);
            if i != mid {
                up.iter_mut().for_each(|v| *v *= cfg.scale_penalty);
            }
            let peak = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if best.as_ref().is_none_or(|b| peak > b.0) {
                best = Some((peak, i, up, score));
            }
        }
        let (_, si, mut resp, score) = best.expect("at least one scale");

        // normalize to a distribution before blending with the window
        let lo = resp.iter().copied().fold(f64::INFINITY, f64::min);
        resp.iter_mut().for_each(|v| *v -= lo);
        let sum: f64 = resp.iter().sum();
        if sum > 0.0 {
            resp.iter_mut().for_each(|v| *v /= sum);
        }
        let w = cfg.window_weight;
        let (mut arg, mut top) = (0, f64::NEG_INFINITY);
        for (k, (r, win)) in resp.iter().zip(&self.window).enumerate() {
            let v = (1.0 - w) * r + w * win;
            if v > top {
                top = v;
                arg = k;
            }
        }
        // upsampled pixel p samples response coordinate (p + 0.5)/u − 0.5
        let half = (m as f64 - 1.0) / 2.0;
        let cell = |p: usize| (p as f64 + 0.5) / u as f64 - 0.5 - half;
        let (dy, dx) = (cell(arg / big), cell(arg % big));

        let s = factors[si];
        let bb = &self.model.config.backbone;
        let px = self.search_side() * s / bb.search_size as f64;
        let stride = bb.total_stride() as f64;
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        self.center = (
            (self.center.0 + dx * stride * px).clamp(0.0, fw),
            (self.center.1 + dy * stride * px).clamp(0.0, fh),
        );
        let k = (1.0 - cfg.scale_damping) + cfg.scale_damping * s;
        self.size = (
            (self.size.0 * k).clamp(4.0, fw.max(4.0)),
            (self.size.1 * k).clamp(4.0, fh.max(4.0)),
        );

        if cfg.template_mode != TemplateMode::First {
            let ex = crop_patch(frame, &self.bbox(), CONTEXT, bb.exemplar_size)?;
            let new = template_features(&self.model, &ex)?;
            self.update_template(&new)?;
        }
        Ok(FrameResult {
            bbox: self.bbox(),
            score,
            scale_index: si,
        })
    }

    /// Replaces (previous mode) or blends into (ema mode) the pre-CF
    /// template, then recomputes the filters. A no-op in first mode.
    pub fn update_template(&mut self, new: &TemplateFeatures<f32>) -> Result<()> {
        match self.cfg.template_mode {
            TemplateMode::First => {
                log::warn!("update_template ignored: template mode is \"first\"");
                return Ok(());
            }
            TemplateMode::Previous => self.features = new.clone(),
            TemplateMode::Ema => self.features = self.features.blend(new, self.cfg.ema_rate as f32),
        }
        self.filters = template_filters(&self.model, &self.features)?;
        Ok(())
    }
}

/// A tracked sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub name: String,
    pub boxes: Vec<BBox>,
    /// Fused peak response per frame; the initialization frame scores 0.
    pub scores: Vec<f64>,
}

pub const TRAJECTORY_HEADER: &str = "frame_index,x,y,w,h,score";

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAJECTORY_HEADER}\n");
        for (i, (b, sc)) in self.boxes.iter().zip(&self.scores).enumerate() {
            s.push_str(&format!("{i},{},{},{},{},{sc}\n", b.x, b.y, b.w, b.h));
        }
        s
    }

    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRAJECTORY_HEADER) {
            return Err(Error::Input(format!("{name}: trajectory must start with {TRAJECTORY_HEADER:?}")));
        }
        let (mut boxes, mut scores) = (Vec::new(), Vec::new());
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let num = |k: usize| -> Result<f64> {
                f.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Input(format!("{name}: bad field {} on line {}", k + 1, ln + 2)))
            };
            if f.len() != 6 || num(0)? as usize != boxes.len() {
                return Err(Error::Input(format!("{name}: malformed row on line {}", ln + 2)));
            }
            boxes.push(BBox::new(num(1)?, num(2)?, num(3)?, num(4)?));
            scores.push(num(5)?);
        }
        Ok(Self {
            name: name.to_string(),
            boxes,
            scores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataio::write_file(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
        Self::from_csv(name, &text)
    }
}

/// Result of [`track_sequence`].
#[derive(Clone, Debug)]
pub struct TrackRun {
    pub trajectory: Trajectory,
    /// Frames per second over the tracked (non-initial) frames.
    pub fps: f64,
}

/// Tracks a whole sequence from its first ground-truth box.
pub fn track_sequence(model: &Model<f32>, seq: &SequenceRecord, cfg: &TrackerConfig) -> Result<TrackRun> {
    let first = *seq
        .boxes
        .first()
        .ok_or_else(|| Error::Input(format!("{}: no ground-truth boxes", seq.name)))?;
    let frame0 = seq
        .frames
        .first()
        .ok_or_else(|| Error::Input(format!("{}: no frames", seq.name)))?;
    let mut session = init_session(model, frame0, first, cfg)?;
    let mut boxes = vec![session.bbox()];
    let mut scores = vec![0.0];
    let t0 = Instant::now();
    for frame in &seq.frames[1..] {
        let r = session.track_frame(frame)?;
        boxes.push(r.bbox);
        scores.push(r.score);
    }
    let secs = t0.elapsed().as_secs_f64();
    let n = seq.frames.len().saturating_sub(1);
    Ok(TrackRun {
        trajectory: Trajectory {
            name: seq.name.clone(),
            boxes,
            scores,
        },
        fps: if secs > 0.0 { n as f64 / secs } else { f64::INFINITY },
    })
}

/// Adapter for reset-based evaluation.
pub struct SessionRunner<'a> {
    pub model: &'a Model<f32>,
    pub cfg: TrackerConfig,
    session: Option<TrackerSession>,
}

impl<'a> SessionRunner<'a> {
    pub fn new(model: &'a Model<f32>, cfg: TrackerConfig) -> Self {
        Self {
            model,
            cfg,
            session: None,
        }
    }
}

impl TrackerRunner for SessionRunner<'_> {
    fn init(&mut self, frame: &GrayImage, bbox: BBox) -> Result<()> {
        self.session = Some(init_session(self.model, frame, bbox, &self.cfg)?);
        Ok(())
    }

    fn track(&mut self, frame: &GrayImage) -> Result<BBox> {
        let s = self
            .session
            .as_mut()
            .ok_or_else(|| Error::Input("track called before init".into()))?;
        Ok(s.track_frame(frame)?.bbox)
    }
}

#[cfg(test)]
mod tests;
