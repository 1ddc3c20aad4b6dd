//! Sequences on disk, patch cropping, training pairs and synthetic data.
//!
//! A sequence directory holds
//!
//! ```text
//! <seq>/frames/00000001.pgm   binary 8-bit PGM (PNG also read)
//! <seq>/groundtruth.txt       one "x,y,w,h" line per frame
//! <seq>/meta.txt              "class_id=<int>" and "domain=<grayscale|tir>"
//! ```

mod crop;
mod sampler;
mod synth;

pub use crop::{crop_patch, crop_square, exemplar_side, frame_mean};
pub use sampler::{make_pair, sample_pair, MixedSampler, PairQueue, PairSampler, SamplePair, SamplerConfig};
pub use synth::{synth_sequence, Motion, SynthSequence, SynthSpec};

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};

use crate::error::{Error, Result};

/// Axis-aligned box, top-left origin, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        // widths taken from corner differences throughout, so a box overlaps itself exactly
        let (ax1, ay1) = (self.x + self.w, self.y + self.h);
        let (bx1, by1) = (other.x + other.w, other.y + other.h);
        let iw = (ax1.min(bx1) - self.x.max(other.x)).max(0.0);
        let ih = (ay1.min(by1) - self.y.max(other.y)).max(0.0);
        let inter = iw * ih;
        let union = (ax1 - self.x) * (ay1 - self.y) + (bx1 - other.x) * (by1 - other.y) - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || !self.x.is_finite() || !self.y.is_finite()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for BBox {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.trim().split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(format!("expected 4 comma-separated values, got {}", parts.len()));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse::<f64>().map_err(|e| format!("{p:?}: {e}"))?;
            if !slot.is_finite() {
                return Err(format!("{p:?} is not finite"));
            }
        }
        Ok(BBox::new(v[0], v[1], v[2], v[3]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Grayscale,
    Tir,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Grayscale => "grayscale",
            Domain::Tir => "tir",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grayscale" => Ok(Domain::Grayscale),
            "tir" => Ok(Domain::Tir),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }
}

/// One annotated single-channel sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<GrayImage>,
    pub boxes: Vec<BBox>,
    pub class_id: usize,
    pub domain: Domain,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn frame_index(path: &Path) -> Option<u64> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if ext != "pgm" && ext != "png" {
        return None;
    }
    path.file_stem()?.to_str()?.parse().ok()
}

/// Reads a sequence directory. Frame files must carry consecutive numeric
/// names; color frames are converted to luminance.
pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let frames_dir = dir.join("frames");
    let entries = fs::read_dir(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut indexed = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&frames_dir, e))?.path();
        if let Some(i) = frame_index(&path) {
            indexed.push((i, path));
        }
    }
    if indexed.is_empty() {
        return Err(Error::format(&frames_dir, "no .pgm or .png frames"));
    }
    indexed.sort();
    for pair in indexed.windows(2) {
        if pair[1].0 != pair[0].0 + 1 {
            return Err(Error::format(
                &pair[1].1,
                format!("frame numbering jumps from {} to {}", pair[0].0, pair[1].0),
            ));
        }
    }
    let mut frames = Vec::with_capacity(indexed.len());
    for (_, path) in &indexed {
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        frames.push(img.to_luma8());
    }

    let gt_path = dir.join("groundtruth.txt");
    let gt = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let lines: Vec<&str> = gt.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut boxes = Vec::with_capacity(frames.len());
    for (i, line) in lines.iter().enumerate() {
        let b: BBox = line
            .parse()
            .map_err(|e| Error::format(&gt_path, format!("line {}: {e}", i + 1)))?;
        boxes.push(b);
    }
    if boxes.len() < frames.len() {
        return Err(Error::format(
            &gt_path,
            format!(
                "line {}: missing box ({} frames, {} boxes)",
                boxes.len() + 1,
                frames.len(),
                boxes.len()
            ),
        ));
    }
    if boxes.len() > frames.len() {
        return Err(Error::format(
            &gt_path,
            format!("{} boxes for {} frames", boxes.len(), frames.len()),
        ));
    }

    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let (mut class_id, mut domain) = (None, None);
    for (i, line) in meta.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |d: String| Error::format(&meta_path, format!("line {}: {d}", i + 1));
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        match k.trim() {
            "class_id" => class_id = Some(v.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "domain" => domain = Some(v.trim().parse::<Domain>().map_err(|e| bad(e.to_string()))?),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SequenceRecord {
        name,
        frames,
        boxes,
        class_id: class_id.ok_or_else(|| Error::format(&meta_path, "missing class_id"))?,
        domain: domain.ok_or_else(|| Error::format(&meta_path, "missing domain"))?,
    })
}

/// Writes a sequence directory; frames are numbered from 1.
pub fn save_sequence(seq: &SequenceRecord, dir: &Path) -> Result<()> {
    if seq.frames.len() != seq.boxes.len() {
        return Err(Error::Input(format!(
            "{} frames but {} boxes",
            seq.frames.len(),
            seq.boxes.len()
        )));
    }
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let path = frames_dir.join(format!("{:08}.pgm", i + 1));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(frame.as_raw(), frame.width(), frame.height(), ExtendedColorType::L8)
            .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    let mut gt = String::new();
    for b in &seq.boxes {
        gt.push_str(&format!("{b}\n"));
    }
    write_file(&dir.join("groundtruth.txt"), gt.as_bytes())?;
    let meta = format!("class_id={}\ndomain={}\n", seq.class_id, seq.domain);
    write_file(&dir.join("meta.txt"), meta.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn tiny(n: usize) -> SequenceRecord {
        SequenceRecord {
            name: "tiny".into(),
            frames: (0..n)
                .map(|i| GrayImage::from_fn(5, 4, |x, y| Luma([(x * 40 + y * 7 + i as u32) as u8])))
                .collect(),
            boxes: (0..n).map(|i| BBox::new(1.0 + i as f64, 0.5, 2.25, 3.0)).collect(),
            class_id: 3,
            domain: Domain::Tir,
        }
    }

    #[test]
    fn parse_box() {
        let b: BBox = "10,20,30,40".parse().unwrap();
        assert_eq!(b, BBox::new(10.0, 20.0, 30.0, 40.0));
        assert!("1,2,3".parse::<BBox>().is_err());
        assert!("1,2,x,4".parse::<BBox>().is_err());
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny(3);
        save_sequence(&seq, dir.path()).unwrap();
        let mut back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        back.name = seq.name.clone();
        assert_eq!(back, seq);
    }

    #[test]
    fn missing_box_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&tiny(3), dir.path()).unwrap();
        write_file(&dir.path().join("groundtruth.txt"), b"1,2,3,4\n1,2,3,4\n").unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn numbering_gap_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&tiny(3), dir.path()).unwrap();
        fs::rename(
            dir.path().join("frames/00000003.pgm"),
            dir.path().join("frames/00000007.pgm"),
        )
        .unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn color_png_becomes_luminance() {
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&tiny(1), dir.path()).unwrap();
        fs::remove_file(dir.path().join("frames/00000001.pgm")).unwrap();
        let rgb = image::RgbImage::from_pixel(5, 4, image::Rgb([200, 200, 200]));
        rgb.save(dir.path().join("frames/00000001.png")).unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        assert!(seq.frames[0].pixels().all(|p| p.0[0] == 200));
    }
}
