use image::{GrayImage, Luma};
use rand_distr::{Distribution, StandardNormal};

use super::{BBox, Domain, SequenceRecord};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;

const BACKGROUND: f64 = 40.0;
const TARGET: f64 = 220.0;
const MAX_TRIES: usize = 100;

/// Smooth path: a linear drift plus a sinusoid.
/// `p(t) = start + velocity·t + amplitude·sin(omega·t + phase)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub amplitude: (f64, f64),
    pub omega: f64,
    pub phase: f64,
}

impl Motion {
    pub fn linear(start: (f64, f64), velocity: (f64, f64)) -> Self {
        Self {
            start,
            velocity,
            amplitude: (0.0, 0.0),
            omega: 0.0,
            phase: 0.0,
        }
    }

    /// Center (x, y) at frame `t`.
    pub fn position(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        let s = (self.omega * t + self.phase).sin();
        (
            self.start.0 + self.velocity.0 * t + self.amplitude.0 * s,
            self.start.1 + self.velocity.1 * t + self.amplitude.1 * s,
        )
    }

    fn random(rng: &mut Xoshiro256, spec: &SynthSpec) -> Self {
        let (lo, hi) = spec.center_range();
        let dir = rng.uniform(0.0, std::f64::consts::TAU);
        let speed = rng.uniform(0.0, spec.max_speed);
        Self {
            start: (rng.uniform(lo, hi), rng.uniform(lo, hi)),
            velocity: (speed * dir.cos(), speed * dir.sin()),
            amplitude: (
                rng.uniform(-spec.max_amplitude, spec.max_amplitude),
                rng.uniform(-spec.max_amplitude, spec.max_amplitude),
            ),
            omega: std::f64::consts::TAU / rng.uniform(30.0, 90.0),
            phase: rng.uniform(0.0, std::f64::consts::TAU),
        }
    }

    fn fits(&self, spec: &SynthSpec) -> bool {
        let (lo, hi) = spec.center_range();
        (0..spec.frames).all(|t| {
            let (x, y) = self.position(t);
            (lo..=hi).contains(&x) && (lo..=hi).contains(&y)
        })
    }
}

/// Parameters of a white-hot synthetic sequence: bright squares on a dark
/// noisy background.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub frames: usize,
    /// Frame side in pixels.
    pub size: usize,
    pub target_size: f64,
    pub n_distractors: usize,
    /// Noise standard deviation on the 0..=255 scale.
    pub noise_std: f64,
    pub max_speed: f64,
    pub max_amplitude: f64,
    /// Fixed target path; drawn at random when absent.
    pub target_motion: Option<Motion>,
    pub class_id: usize,
    pub domain: Domain,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frames: 100,
            size: 256,
            target_size: 24.0,
            n_distractors: 0,
            noise_std: 6.0,
            max_speed: 1.5,
            max_amplitude: 20.0,
            target_motion: None,
            class_id: 0,
            domain: Domain::Tir,
        }
    }
}

impl SynthSpec {
    /// Allowed center coordinates: the box stays one target side away from
    /// every border.
    fn center_range(&self) -> (f64, f64) {
        let m = 1.5 * self.target_size;
        (m, self.size as f64 - m)
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.size < 64 {
            return Err(Error::Config(format!("frame size {} below 64", self.size)));
        }
        if !(self.target_size >= 2.0) || 3.0 * self.target_size >= self.size as f64 {
            return Err(Error::Config(format!(
                "target size {} does not fit a {} frame",
                self.target_size, self.size
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise std must be >= 0".into()));
        }
        Ok(())
    }
}

/// A generated sequence plus the paths that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSequence {
    pub record: SequenceRecord,
    pub target: Motion,
    pub distractors: Vec<Motion>,
}

/// Fraction of the unit pixel at (px, py) covered by `b`.
fn coverage(b: &BBox, px: f64, py: f64) -> f64 {
    let ox = ((px + 1.0).min(b.x + b.w) - px.max(b.x)).max(0.0);
    let oy = ((py + 1.0).min(b.y + b.h) - py.max(b.y)).max(0.0);
    ox * oy
}

pub fn synth_sequence(spec: &SynthSpec, seed: u64) -> Result<SynthSequence> {
    spec.validate()?;
    let mut rng = Xoshiro256::seed_from(seed);
    let target = match spec.target_motion {
        Some(m) => m,
        None => (0..MAX_TRIES)
            .map(|_| Motion::random(&mut rng, spec))
            .find(|m| m.fits(spec))
            .ok_or_else(|| Error::Generation("no target path stays inside the frame".into()))?,
    };
    let ts = spec.target_size;
    let boxes: Vec<BBox> = (0..spec.frames)
        .map(|t| {
            let (x, y) = target.position(t);
            BBox::from_center(x, y, ts, ts)
        })
        .collect();

    let mut distractors = Vec::with_capacity(spec.n_distractors);
    for k in 0..spec.n_distractors {
        let m = (0..MAX_TRIES)
            .map(|_| Motion::random(&mut rng, spec))
            .find(|m| {
                m.fits(spec)
                    && boxes.iter().enumerate().all(|(t, b)| {
                        let (x, y) = m.position(t);
                        BBox::from_center(x, y, ts, ts).iou(b) <= 0.2
                    })
            })
            .ok_or_else(|| {
                Error::Generation(format!(
                    "distractor {} cannot avoid the target after {MAX_TRIES} tries",
                    k + 1
                ))
            })?;
        distractors.push(m);
    }

    let n = spec.size;
    let mut frames = Vec::with_capacity(spec.frames);
    for (t, tb) in boxes.iter().enumerate() {
        let mut objects = vec![*tb];
        objects.extend(distractors.iter().map(|m| {
            let (x, y) = m.position(t);
            BBox::from_center(x, y, ts, ts)
        }));
        let mut img = GrayImage::new(n as u32, n as u32);
        for py in 0..n {
            for px in 0..n {
                let cov = objects
                    .iter()
                    .map(|b| coverage(b, px as f64, py as f64))
                    .fold(0.0, f64::max);
                let noise: f64 = if spec.noise_std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.noise_std * z
                } else {
                    0.0
                };
                let v = BACKGROUND + cov * (TARGET - BACKGROUND) + noise;
                img.put_pixel(px as u32, py as u32, Luma([v.round().clamp(0.0, 255.0) as u8]));
            }
        }
        frames.push(img);
    }
    Ok(SynthSequence {
        record: SequenceRecord {
            name: format!("synth-{seed}"),
            frames,
            boxes,
            class_id: spec.class_id,
            domain: spec.domain,
        },
        target,
        distractors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_boxes_follow_path() {
        let spec = SynthSpec {
            noise_std: 0.0,
            frames: 20,
            ..Default::default()
        };
        let s = synth_sequence(&spec, 1).unwrap();
        for (t, b) in s.record.boxes.iter().enumerate() {
            assert_eq!(b.center(), s.target.position(t));
        }
        // interior of the target is at the target level
        let (cx, cy) = s.target.position(0);
        let px = s.record.frames[0].get_pixel(cx as u32, cy as u32).0[0];
        assert_eq!(px, 220);
        assert_eq!(s.record.frames[0].get_pixel(0, 0).0[0], 40);
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec {
            frames: 5,
            n_distractors: 2,
            ..Default::default()
        };
        assert_eq!(synth_sequence(&spec, 4).unwrap(), synth_sequence(&spec, 4).unwrap());
        assert_ne!(synth_sequence(&spec, 4).unwrap().record, synth_sequence(&spec, 5).unwrap().record);
    }

    #[test]
    fn distractors_avoid_target() {
        let spec = SynthSpec {
            n_distractors: 2,
            ..Default::default()
        };
        let s = synth_sequence(&spec, 8).unwrap();
        for m in &s.distractors {
            for (t, b) in s.record.boxes.iter().enumerate() {
                let (x, y) = m.position(t);
                assert!(BBox::from_center(x, y, 24.0, 24.0).iou(b) <= 0.2);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let one = SynthSpec {
            frames: 1,
            ..Default::default()
        };
        assert!(matches!(synth_sequence(&one, 0), Err(Error::Config(_))));
        let crowded = SynthSpec {
            size: 64,
            target_size: 20.0,
            n_distractors: 6,
            ..Default::default()
        };
        assert!(matches!(synth_sequence(&crowded, 0), Err(Error::Generation(_))));
    }
}
