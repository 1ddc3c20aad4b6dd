use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::{crop_patch, crop_square, exemplar_side, Domain, SequenceRecord};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::tensor::Tensor;

/// Crop geometry and pair-selection limits.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub exemplar_size: usize,
    pub search_size: usize,
    pub context: f64,
    /// Response-map stride in search-patch pixels.
    pub stride: usize,
    /// Largest target offset from the search center, in patch pixels.
    pub max_jitter: usize,
    pub max_gap: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            exemplar_size: 127,
            search_size: 255,
            context: 0.5,
            stride: 8,
            max_jitter: 8,
            max_gap: 100,
        }
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub exemplar: Tensor<f32>,
    pub search: Tensor<f32>,
    pub class_id: usize,
    pub domain: Domain,
    /// Target offset from the search center in response cells (dy, dx).
    pub displacement: (f64, f64),
}

const MAX_RETRIES: usize = 100;

/// Draws one pair: a uniform sequence, then a uniform frame pair at most
/// `max_gap` apart. Sequences with fewer than two frames or a degenerate box
/// are skipped by redrawing.
pub fn sample_pair(data: &[SequenceRecord], rng: &mut Xoshiro256, cfg: &SamplerConfig) -> Result<SamplePair> {
    if data.is_empty() {
        return Err(Error::Input("cannot sample pairs from an empty dataset".into()));
    }
    for _ in 0..MAX_RETRIES {
        let seq = &data[rng.below(data.len() as u64) as usize];
        let n = seq.len().min(seq.boxes.len());
        if n < 2 {
            continue;
        }
        let i = rng.below(n as u64) as usize;
        let lo = i.saturating_sub(cfg.max_gap);
        let hi = (i + cfg.max_gap).min(n - 1);
        // uniform over [lo, hi] without i
        let mut j = lo + rng.below((hi - lo) as u64) as usize;
        if j >= i {
            j += 1;
        }
        let (bz, bx) = (seq.boxes[i], seq.boxes[j]);
        if bz.is_degenerate() || bx.is_degenerate() {
            continue;
        }
        let jit = cfg.max_jitter as u64;
        let mut offset = || rng.below(2 * jit + 1) as f64 - jit as f64;
        let (oy, ox) = (offset(), offset());
        return make_pair(seq, i, j, (oy, ox), cfg);
    }
    Err(Error::Input(format!(
        "no usable pair after {MAX_RETRIES} draws (need a sequence with 2+ frames and valid boxes)"
    )))
}

/// Builds the pair (exemplar from frame `i`, search from frame `j`) with the
/// target placed `offset` = (dy, dx) search-patch pixels from the search
/// center.
pub fn make_pair(
    seq: &SequenceRecord,
    i: usize,
    j: usize,
    offset: (f64, f64),
    cfg: &SamplerConfig,
) -> Result<SamplePair> {
    let (Some(bz), Some(bx)) = (seq.boxes.get(i), seq.boxes.get(j)) else {
        return Err(Error::Input(format!("{}: no box for frame {i} or {j}", seq.name)));
    };
    let (Some(fz), Some(fx)) = (seq.frames.get(i), seq.frames.get(j)) else {
        return Err(Error::Input(format!("{}: no frame {i} or {j}", seq.name)));
    };
    let (oy, ox) = offset;
    let exemplar = crop_patch(fz, bz, cfg.context, cfg.exemplar_size)?;
    // search crop at the exemplar's scale, taken from the search frame's box
    let side = exemplar_side(bx, cfg.context) * cfg.search_size as f64 / cfg.exemplar_size as f64;
    let px = side / cfg.search_size as f64;
    let (cx, cy) = bx.center();
    let search = crop_square(fx, (cx - ox * px, cy - oy * px), side, cfg.search_size, None)?;
    let s = cfg.stride as f64;
    Ok(SamplePair {
        exemplar,
        search,
        class_id: seq.class_id,
        domain: seq.domain,
        displacement: (oy / s, ox / s),
    })
}

/// Endless seeded pair stream over one dataset.
#[derive(Clone, Debug)]
pub struct PairSampler {
    data: Arc<Vec<SequenceRecord>>,
    rng: Xoshiro256,
    cfg: SamplerConfig,
}

impl PairSampler {
    pub fn new(data: Arc<Vec<SequenceRecord>>, seed: u64, cfg: SamplerConfig) -> Self {
        Self {
            data,
            rng: Xoshiro256::seed_from(seed),
            cfg,
        }
    }
}

impl Iterator for PairSampler {
    type Item = Result<SamplePair>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(sample_pair(&self.data, &mut self.rng, &self.cfg))
    }
}

/// Draws from dataset `a` with probability `wa / (wa + wb)`, else `b`. An
/// empty side falls back to the other.
#[derive(Clone, Debug)]
pub struct MixedSampler {
    sides: [Arc<Vec<SequenceRecord>>; 2],
    weights: (f64, f64),
    rng: Xoshiro256,
    cfg: SamplerConfig,
}

impl MixedSampler {
    pub fn new(
        a: Arc<Vec<SequenceRecord>>,
        b: Arc<Vec<SequenceRecord>>,
        weights: (f64, f64),
        seed: u64,
        cfg: SamplerConfig,
    ) -> Result<Self> {
        let (wa, wb) = weights;
        if !(wa >= 0.0 && wb >= 0.0) || wa + wb <= 0.0 {
            return Err(Error::Config(format!(
                "mixing weights must be nonnegative and not both zero, got ({wa}, {wb})"
            )));
        }
        if a.is_empty() && b.is_empty() {
            return Err(Error::Input("both datasets are empty".into()));
        }
        Ok(Self {
            sides: [a, b],
            weights,
            rng: Xoshiro256::seed_from(seed),
            cfg,
        })
    }

    /// Picks the dataset of the next draw: 0 for `a`, 1 for `b`.
    pub fn pick(&mut self) -> usize {
        let (wa, wb) = self.weights;
        let side = usize::from(self.rng.unit() * (wa + wb) >= wa);
        if self.sides[side].is_empty() {
            1 - side
        } else {
            side
        }
    }
}

impl Iterator for MixedSampler {
    type Item = Result<SamplePair>;

    fn next(&mut self) -> Option<Self::Item> {
        let side = self.pick();
        Some(sample_pair(&self.sides[side], &mut self.rng, &self.cfg))
    }
}

/// Bounded prefetch: a producer thread fills a queue of `2 × batch` pairs
/// and blocks while it is full. Order is the producer's order, so the
/// stream is as deterministic as the wrapped sampler.
pub struct PairQueue {
    rx: Option<Receiver<Result<SamplePair>>>,
    handle: Option<JoinHandle<()>>,
}

impl PairQueue {
    pub fn spawn<I>(source: I, batch: usize) -> Self
    where
        I: Iterator<Item = Result<SamplePair>> + Send + 'static,
    {
        let (tx, rx) = sync_channel(2 * batch.max(1));
        let handle = thread::spawn(move || {
            for item in source {
                let stop = item.is_err();
                if tx.send(item).is_err() || stop {
                    break;
                }
            }
        });
        Self {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl Iterator for PairQueue {
    type Item = Result<SamplePair>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for PairQueue {
    fn drop(&mut self) {
        // closing the receiver unblocks the producer
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_sequence, BBox, SynthSpec};
    use image::GrayImage;

    fn dataset(n_frames: usize, seed: u64) -> Arc<Vec<SequenceRecord>> {
        let spec = SynthSpec {
            frames: n_frames,
            size: 96,
            target_size: 16.0,
            ..Default::default()
        };
        Arc::new(vec![synth_sequence(&spec, seed).unwrap().record])
    }

    #[test]
    fn two_frames_always_both_used() {
        // frames are marked by a constant value so the crops reveal them
        let mut seq = dataset(2, 1)[0].clone();
        seq.frames = vec![GrayImage::from_pixel(96, 96, image::Luma([10])), GrayImage::from_pixel(96, 96, image::Luma([200]))];
        let mut rng = Xoshiro256::seed_from(3);
        for _ in 0..20 {
            let p = sample_pair(std::slice::from_ref(&seq), &mut rng, &SamplerConfig::default()).unwrap();
            assert_ne!(p.exemplar.at(0, 0, 60, 60), p.search.at(0, 0, 120, 120));
        }
    }

    #[test]
    fn deterministic_stream() {
        let data = dataset(30, 2);
        let a: Vec<_> = PairSampler::new(data.clone(), 9, SamplerConfig::default()).take(4).map(Result::unwrap).collect();
        let b: Vec<_> = PairSampler::new(data, 9, SamplerConfig::default()).take(4).map(Result::unwrap).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_jitter_zero_displacement() {
        let cfg = SamplerConfig {
            max_jitter: 0,
            ..Default::default()
        };
        let mut rng = Xoshiro256::seed_from(4);
        let p = sample_pair(&dataset(10, 3), &mut rng, &cfg).unwrap();
        assert_eq!(p.displacement, (0.0, 0.0));
        assert_eq!(p.exemplar.dims(), [1, 1, 127, 127]);
        assert_eq!(p.search.dims(), [1, 1, 255, 255]);
    }

    #[test]
    fn jitter_moves_target_in_search() {
        // a single bright pixel block at the box; the search crop shows it offset
        let mut frame = GrayImage::from_pixel(200, 200, image::Luma([0]));
        for y in 96..104 {
            for x in 96..104 {
                frame.put_pixel(x, y, image::Luma([255]));
            }
        }
        let seq = SequenceRecord {
            name: "s".into(),
            frames: vec![frame.clone(), frame],
            boxes: vec![BBox::new(96.0, 96.0, 8.0, 8.0); 2],
            class_id: 0,
            domain: Domain::Tir,
        };
        let mut rng = Xoshiro256::seed_from(5);
        let p = sample_pair(&[seq], &mut rng, &SamplerConfig::default()).unwrap();
        let (dy, dx) = p.displacement;
        // brightness centroid of the search patch, relative to its center
        let (mut sy, mut sx, mut m) = (0.0, 0.0, 0.0);
        for r in 0..255 {
            for c in 0..255 {
                let v = p.search.at(0, 0, r, c) as f64;
                sy += v * r as f64;
                sx += v * c as f64;
                m += v;
            }
        }
        assert!((sy / m - 127.0 - dy * 8.0).abs() < 0.5);
        assert!((sx / m - 127.0 - dx * 8.0).abs() < 0.5);
    }

    #[test]
    fn mixing_fractions() {
        let a = dataset(5, 6);
        let empty = Arc::new(Vec::new());
        let mut only_a = MixedSampler::new(a.clone(), a.clone(), (1.0, 0.0), 1, SamplerConfig::default()).unwrap();
        assert!((0..1000).all(|_| only_a.pick() == 0));
        let mut even = MixedSampler::new(a.clone(), a.clone(), (1.0, 1.0), 2, SamplerConfig::default()).unwrap();
        let frac = (0..10_000).filter(|_| even.pick() == 0).count() as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
        let mut fallback = MixedSampler::new(empty.clone(), a, (1.0, 1.0), 3, SamplerConfig::default()).unwrap();
        assert!((0..100).all(|_| fallback.pick() == 1));
        assert!(MixedSampler::new(empty.clone(), empty, (1.0, 1.0), 4, SamplerConfig::default()).is_err());
    }

    #[test]
    fn queue_preserves_order() {
        let data = dataset(12, 7);
        let direct: Vec<_> = PairSampler::new(data.clone(), 11, SamplerConfig::default()).take(5).map(Result::unwrap).collect();
        let queued: Vec<_> = PairQueue::spawn(PairSampler::new(data, 11, SamplerConfig::default()), 1)
            .take(5)
            .map(Result::unwrap)
            .collect();
        assert_eq!(direct, queued);
    }
}
