//! Object latents `[pres, where, depth, what]` and the frozen encoders/decoder.
//!
//! `where` is stored as `bbox = (h, w, x, y)`, every component in `[0, 1]`.
//! The first five `what` entries are a color one-hot; an optional sixth entry
//! marks a tagged ball (used by the readout task).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::render::{nearest_palette, Disc, Frame};
use crate::scalar::Scalar;
use crate::binio::ByteReader;
use crate::sim::{BallState, Episode, NUM_COLORS};

pub const DEFAULT_SLOTS: usize = 16;
pub const COLOR_DIMS: usize = NUM_COLORS as usize;
/// `what` index of the tag channel, when `d_what > COLOR_DIMS`.
pub const TAG_DIM: usize = COLOR_DIMS;
/// pres + bbox(4) + depth
pub const FIXED_FEATURES: usize = 6;

const LATENT_MAGIC: &[u8; 7] = b"OCVTLZ1";

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectLatent<S> {
    pub pres: S,
    /// `(h, w, x, y)`
    pub bbox: [S; 4],
    pub depth: S,
    pub what: Vec<S>,
}

impl<S: Scalar> ObjectLatent<S> {
    pub fn empty(d_what: usize) -> Self {
        let half = S::of(0.5);
        ObjectLatent {
            pres: S::zero(),
            bbox: [S::zero(), S::zero(), half, half],
            depth: S::zero(),
            what: vec![S::zero(); d_what],
        }
    }

    pub fn is_present(&self) -> bool {
        self.pres > S::of(0.5)
    }

    pub fn center(&self) -> [f64; 2] {
        [self.bbox[2].f64(), self.bbox[3].f64()]
    }

    /// Argmax over the color entries of `what`.
    pub fn color(&self) -> u8 {
        let mut best = 0;
        for c in 1..COLOR_DIMS.min(self.what.len()) {
            if self.what[c] > self.what[best] {
                best = c;
            }
        }
        best as u8
    }

    pub fn feature_len(d_what: usize) -> usize {
        FIXED_FEATURES + d_what
    }

    /// Append `[pres, h, w, x, y, depth, what..]`.
    pub fn write_features(&self, out: &mut Vec<S>) {
        out.push(self.pres);
        out.extend_from_slice(&self.bbox);
        out.push(self.depth);
        out.extend_from_slice(&self.what);
    }

    pub fn from_features(f: &[S]) -> Self {
        ObjectLatent {
            pres: f[0],
            bbox: [f[1], f[2], f[3], f[4]],
            depth: f[5],
            what: f[FIXED_FEATURES..].to_vec(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ObjectLatent<T> {
        let c = |v: S| T::of(v.f64());
        ObjectLatent {
            pres: c(self.pres),
            bbox: self.bbox.map(c),
            depth: c(self.depth),
            what: self.what.iter().map(|&v| c(v)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrame<S> {
    pub slots: Vec<ObjectLatent<S>>,
}

impl<S: Scalar> LatentFrame<S> {
    pub fn empty(k: usize, d_what: usize) -> Self {
        LatentFrame {
            slots: vec![ObjectLatent::empty(d_what); k],
        }
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn d_what(&self) -> usize {
        self.slots.first().map_or(0, |s| s.what.len())
    }

    pub fn present(&self) -> impl Iterator<Item = &ObjectLatent<S>> {
        self.slots.iter().filter(|s| s.is_present())
    }

    pub fn cast<T: Scalar>(&self) -> LatentFrame<T> {
        LatentFrame {
            slots: self.slots.iter().map(ObjectLatent::cast).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<S> {
    pub frames: Vec<LatentFrame<S>>,
}

impl<S: Scalar> LatentSequence<S> {
    pub fn new(frames: Vec<LatentFrame<S>>) -> Result<Self> {
        let seq = LatentSequence { frames };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Ok(());
        };
        let (k, d) = (first.k(), first.d_what());
        for (t, f) in self.frames.iter().enumerate() {
            if f.k() != k || f.slots.iter().any(|s| s.what.len() != d) {
                return Err(Error::Shape {
                    op: "latent sequence",
                    lhs: vec![k, d],
                    rhs: vec![t, f.k(), f.d_what()],
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn k(&self) -> usize {
        self.frames.first().map_or(0, LatentFrame::k)
    }

    pub fn d_what(&self) -> usize {
        self.frames.first().map_or(0, LatentFrame::d_what)
    }

    /// Frames `range` as a new sequence.
    pub fn window(&self, range: std::ops::Range<usize>) -> Self {
        LatentSequence {
            frames: self.frames[range].to_vec(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> LatentSequence<T> {
        LatentSequence {
            frames: self.frames.iter().map(LatentFrame::cast).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LATENT_MAGIC);
        for v in [self.len(), self.k(), self.d_what()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mut feats = Vec::new();
        for f in &self.frames {
            for s in &f.slots {
                feats.clear();
                s.write_features(&mut feats);
                for v in &feats {
                    out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "latent file");
        if r.take(7)? != LATENT_MAGIC {
            return Err(Error::malformed("latent file", "bad magic"));
        }
        let (t, k, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let width = ObjectLatent::<S>::feature_len(d);
        let mut frames = Vec::with_capacity(t);
        let mut feats = vec![S::zero(); width];
        for _ in 0..t {
            let mut slots = Vec::with_capacity(k);
            for _ in 0..k {
                for f in feats.iter_mut() {
                    *f = S::of(f64::from(r.f32()?));
                }
                slots.push(ObjectLatent::from_features(&feats));
            }
            frames.push(LatentFrame { slots });
        }
        if !r.is_empty() {
            return Err(Error::malformed("latent file", "trailing bytes"));
        }
        Ok(LatentSequence { frames })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Ground-truth encoder: one slot per ball, then empty slots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleEncoder {
    pub k: usize,
    pub d_what: usize,
    /// Ball whose tag channel is set (requires `d_what > COLOR_DIMS`).
    pub tagged_ball: Option<usize>,
}

impl OracleEncoder {
    pub fn new(k: usize, d_what: usize) -> Self {
        OracleEncoder {
            k,
            d_what,
            tagged_ball: None,
        }
    }

    pub fn encode<S: Scalar>(
        &self,
        states: &[BallState],
        shuffle_seed: Option<u64>,
    ) -> Result<LatentFrame<S>> {
        if states.len() > self.k {
            return Err(Error::Domain(format!(
                "{} balls do not fit in {} slots",
                states.len(),
                self.k
            )));
        }
        if self.d_what < COLOR_DIMS || (self.tagged_ball.is_some() && self.d_what <= TAG_DIM) {
            return Err(Error::Config(format!(
                "d_what {} too small for the color one-hot{}",
                self.d_what,
                if self.tagged_ball.is_some() { " and tag" } else { "" }
            )));
        }
        let mut slots: Vec<ObjectLatent<S>> = states
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let d = S::of(2.0 * b.radius);
                let mut what = vec![S::zero(); self.d_what];
                what[b.color as usize] = S::one();
                if self.tagged_ball == Some(o) {
                    what[TAG_DIM] = S::one();
                }
                ObjectLatent {
                    pres: S::one(),
                    bbox: [d, d, S::of(b.position[0]), S::of(b.position[1])],
                    depth: S::zero(),
                    what,
                }
            })
            .collect();
        slots.resize(self.k, ObjectLatent::empty(self.d_what));
        if let Some(seed) = shuffle_seed {
            slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(LatentFrame { slots })
    }

    /// Encode every frame; frame `t` is shuffled with `seed + t` when a seed is given.
    pub fn encode_episode<S: Scalar>(
        &self,
        episode: &Episode,
        shuffle_seed: Option<u64>,
    ) -> Result<LatentSequence<S>> {
        let frames = episode
            .states
            .iter()
            .enumerate()
            .map(|(t, s)| self.encode(s, shuffle_seed.map(|seed| seed.wrapping_add(t as u64))))
            .collect::<Result<_>>()?;
        Ok(LatentSequence { frames })
    }
}

/// Oracle encoding with the color-only `what` (`d_what = 5`).
pub fn oracle_encode<S: Scalar>(
    states: &[BallState],
    k: usize,
    shuffle_seed: Option<u64>,
) -> Result<LatentFrame<S>> {
    OracleEncoder::new(k, COLOR_DIMS).encode(states, shuffle_seed)
}

/// Pixel-space encoder: one slot per 4-connected non-black component.
///
/// Keeps the `k` largest components (in scan order), pads with empty slots.
/// Touching balls merge into a single slot.
pub fn blob_encode<S: Scalar>(frame: &Frame, k: usize, d_what: usize) -> LatentFrame<S> {
    let (w, h) = (frame.width, frame.height);
    let mut label = vec![usize::MAX; w * h];
    let nonblack = |i: usize| frame.pixels[i * 3..i * 3 + 3] != [0, 0, 0];
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if label[start] != usize::MAX || !nonblack(start) {
            continue;
        }
        let id = components.len();
        let mut members = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if label[j] == usize::MAX && nonblack(j) {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        components.push(members);
    }

    let mut order: Vec<usize> = (0..components.len()).collect();
    // stable: equal sizes keep scan order
    order.sort_by(|&a, &b| components[b].len().cmp(&components[a].len()));
    order.truncate(k);
    order.sort_unstable();

    let mut slots: Vec<ObjectLatent<S>> = order
        .iter()
        .map(|&c| {
            let px = &components[c];
            let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
            let (mut sx, mut sy) = (0.0, 0.0);
            let mut rgb = [0.0f64; 3];
            for &i in px {
                let (x, y) = (i % w, i / w);
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                for ch in 0..3 {
                    rgb[ch] += f64::from(frame.pixels[i * 3 + ch]);
                }
            }
            let n = px.len() as f64;
            let mut what = vec![S::zero(); d_what];
            what[nearest_palette(rgb.map(|v| v / n)) as usize] = S::one();
            ObjectLatent {
                pres: S::one(),
                bbox: [
                    S::of((y1 - y0 + 1) as f64 / h as f64),
                    S::of((x1 - x0 + 1) as f64 / w as f64),
                    S::of(sx / n / w as f64),
                    S::of(sy / n / h as f64),
                ],
                depth: S::zero(),
                what,
            }
        })
        .collect();
    slots.resize(k, ObjectLatent::empty(d_what));
    LatentFrame { slots }
}

/// Discs for the slots that render (`pres > 0.5`), back to front.
pub fn decode_discs<S: Scalar>(frame: &LatentFrame<S>) -> Vec<Disc> {
    let mut visible: Vec<&ObjectLatent<S>> = frame.present().collect();
    // deeper slots first so that lower depth ends up on top
    visible.sort_by(|a, b| b.depth.f64().total_cmp(&a.depth.f64()));
    visible
        .into_iter()
        .map(|s| Disc {
            center: s.center(),
            radius: s.bbox[0].f64() / 2.0,
            color: s.color(),
        })
        .collect()
}

pub fn analytic_decode<S: Scalar>(frame: &LatentFrame<S>, resolution: usize) -> Frame {
    crate::render::rasterize(&decode_discs(frame), resolution, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{classify_patch, rasterize_states};

    fn ball(x: f64, y: f64, color: u8) -> BallState {
        BallState {
            position: [x, y],
            velocity: [0.0, 0.0],
            radius: 0.08,
            color,
        }
    }

    fn sorted_features(f: &LatentFrame<f64>) -> Vec<Vec<u64>> {
        let mut v: Vec<Vec<u64>> = f
            .slots
            .iter()
            .map(|s| {
                let mut out = Vec::new();
                s.write_features(&mut out);
                out.iter().map(|x| x.to_bits()).collect()
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn oracle_single_ball() {
        let f: LatentFrame<f64> = oracle_encode(&[ball(0.25, 0.75, 0)], 4, None).unwrap();
        assert_eq!(f.k(), 4);
        let s = &f.slots[0];
        assert_eq!(s.pres, 1.0);
        assert_eq!(s.bbox, [0.16, 0.16, 0.25, 0.75]);
        assert_eq!(s.depth, 0.0);
        assert_eq!(s.what, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        for e in &f.slots[1..] {
            assert_eq!(*e, ObjectLatent::empty(5));
        }
    }

    #[test]
    fn oracle_empty_and_overflow() {
        let f: LatentFrame<f32> = oracle_encode(&[], 3, None).unwrap();
        assert!(f.slots.iter().all(|s| *s == ObjectLatent::empty(5)));
        let many: Vec<_> = (0..3).map(|i| ball(0.2 + 0.3 * i as f64, 0.5, 1)).collect();
        assert!(oracle_encode::<f32>(&many, 2, None).is_err());
    }

    #[test]
    fn shuffle_preserves_multiset() {
        let balls = [ball(0.2, 0.2, 1), ball(0.5, 0.5, 2), ball(0.8, 0.3, 4)];
        let plain: LatentFrame<f64> = oracle_encode(&balls, 8, None).unwrap();
        for seed in 0..10 {
            let shuffled: LatentFrame<f64> = oracle_encode(&balls, 8, Some(seed)).unwrap();
            assert_eq!(sorted_features(&plain), sorted_features(&shuffled));
        }
    }

    #[test]
    fn tagged_ball_sets_tag_channel() {
        let enc = OracleEncoder {
            k: 4,
            d_what: 6,
            tagged_ball: Some(1),
        };
        let f: LatentFrame<f32> = enc.encode(&[ball(0.2, 0.2, 1), ball(0.6, 0.6, 3)], None).unwrap();
        assert_eq!(f.slots[0].what[TAG_DIM], 0.0);
        assert_eq!(f.slots[1].what[TAG_DIM], 1.0);
        assert_eq!(f.slots[1].color(), 3);
        let small = OracleEncoder { d_what: 5, ..enc };
        assert!(small.encode::<f32>(&[ball(0.2, 0.2, 1)], None).is_err());
    }

    #[test]
    fn decode_matches_rasterize() {
        let balls = [ball(0.2, 0.3, 0), ball(0.6, 0.6, 3), ball(0.85, 0.15, 2)];
        let f: LatentFrame<f32> = oracle_encode(&balls, 8, Some(3)).unwrap();
        assert_eq!(analytic_decode(&f, 64), rasterize_states(&balls, 64));
        for b in &balls {
            assert_eq!(
                classify_patch(&analytic_decode(&f, 64), b.position, b.radius),
                Some(b.color)
            );
        }
    }

    #[test]
    fn decode_presence_threshold() {
        let mut f: LatentFrame<f64> = oracle_encode(&[ball(0.5, 0.5, 1)], 2, None).unwrap();
        f.slots[0].pres = 0.49;
        assert!(analytic_decode(&f, 64).pixels.iter().all(|&p| p == 0));
        f.slots[0].pres = 0.51;
        assert!(analytic_decode(&f, 64).pixels.iter().any(|&p| p != 0));
        let empty = LatentFrame::<f64>::empty(4, 5);
        assert!(analytic_decode(&empty, 64).pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn lower_depth_occludes() {
        let mut f: LatentFrame<f64> =
            oracle_encode(&[ball(0.5, 0.5, 1), ball(0.52, 0.5, 2)], 2, None).unwrap();
        f.slots[0].depth = -1.0;
        let img = analytic_decode(&f, 64);
        assert_eq!(classify_patch(&img, [0.5, 0.5], 0.01), Some(1));
    }

    #[test]
    fn blob_encoder_recovers_balls() {
        let balls = [ball(0.2, 0.3, 0), ball(0.6, 0.6, 3), ball(0.85, 0.15, 2), ball(0.3, 0.8, 4)];
        let f: LatentFrame<f64> = blob_encode(&rasterize_states(&balls, 64), 8, 5);
        assert_eq!(f.present().count(), 4);
        for b in &balls {
            let s = f
                .present()
                .find(|s| s.color() == b.color)
                .expect("every color found");
            let c = s.center();
            assert!((c[0] - b.position[0]).abs() < 1.0 / 64.0);
            assert!((c[1] - b.position[1]).abs() < 1.0 / 64.0);
        }
        let blank: LatentFrame<f64> = blob_encode(&Frame::black(64, 64), 8, 5);
        assert_eq!(blank, LatentFrame::empty(8, 5));
    }

    #[test]
    fn overlapping_balls_form_one_blob() {
        let img = rasterize_states(&[ball(0.5, 0.5, 0), ball(0.58, 0.5, 1)], 64);
        let f: LatentFrame<f32> = blob_encode(&img, 4, 5);
        assert_eq!(f.present().count(), 1);
    }

    #[test]
    fn blob_keeps_largest_components() {
        let mut small = ball(0.2, 0.2, 1);
        small.radius = 0.03;
        let img = rasterize_states(&[small, ball(0.6, 0.6, 2), ball(0.3, 0.75, 4)], 64);
        let f: LatentFrame<f64> = blob_encode(&img, 2, 5);
        let mut colors: Vec<u8> = f.present().map(|s| s.color()).collect();
        colors.sort();
        assert_eq!(colors, vec![2, 4]);
    }

    #[test]
    fn latent_file_roundtrip() {
        let balls = [ball(0.25, 0.5, 2), ball(0.75, 0.5, 1)];
        let frames: Vec<LatentFrame<f32>> = (0..3)
            .map(|t| oracle_encode(&balls, 4, Some(t)).unwrap())
            .collect();
        let seq = LatentSequence::new(frames).unwrap();
        let bytes = seq.to_bytes();
        assert_eq!(&bytes[..7], b"OCVTLZ1");
        assert_eq!(bytes.len(), 7 + 12 + 3 * 4 * 11 * 4);
        assert_eq!(LatentSequence::<f32>::from_bytes(&bytes).unwrap(), seq);
        assert!(LatentSequence::<f32>::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
