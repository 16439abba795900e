//! Disc rasterizer, nearest-palette color classifier and binary PPM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::{BallState, NUM_COLORS};

/// RGB for blue, red, yellow, violet, cyan, indexed by color ordinal.
pub const PALETTE: [[u8; 3]; NUM_COLORS as usize] = [
    [0, 0, 255],
    [255, 0, 0],
    [255, 255, 0],
    [238, 130, 238],
    [0, 255, 255],
];

pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major `height × width × 3`.
    pub pixels: Vec<u8>,
}

/// A filled disc in arena coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
    pub color: u8,
}

impl From<&BallState> for Disc {
    fn from(b: &BallState) -> Self {
        Disc {
            center: b.position,
            radius: b.radius,
            color: b.color,
        }
    }
}

impl Frame {
    pub fn black(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn paint_disc(&mut self, disc: &Disc) {
        let rgb = PALETTE[disc.color as usize];
        for (x, y) in disc_pixels(self.width, self.height, disc.center, disc.radius) {
            self.set(x, y, rgb);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::malformed("PPM image", d);
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary PPM (P6)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates header and payload
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(bad("truncated header"));
        }
        pos += 1;
        let payload = &bytes[pos..];
        let expected = width * height * 3;
        if payload.len() != expected {
            return Err(bad(&format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            pixels: payload.to_vec(),
        })
    }
}

/// Pixel radius of a disc of arena radius `radius`.
pub fn pixel_radius(radius: f64, width: usize) -> f64 {
    (radius * width as f64).round()
}

/// Pixels whose centers fall inside the scaled disc.
pub fn disc_pixels(
    width: usize,
    height: usize,
    center: [f64; 2],
    radius: f64,
) -> impl Iterator<Item = (usize, usize)> {
    let cx = center[0] * width as f64;
    let cy = center[1] * height as f64;
    let r = pixel_radius(radius, width);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil().max(0.0) as usize).min(width);
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil().max(0.0) as usize).min(height);
    (y0..y1).flat_map(move |y| {
        (x0..x1).filter_map(move |x| {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            (dx * dx + dy * dy <= r * r).then_some((x, y))
        })
    })
}

/// Paint discs in order; later discs cover earlier ones.
pub fn rasterize<'a>(discs: impl IntoIterator<Item = &'a Disc>, width: usize, height: usize) -> Frame {
    let mut frame = Frame::black(width, height);
    for d in discs {
        frame.paint_disc(d);
    }
    frame
}

pub fn rasterize_states(states: &[BallState], resolution: usize) -> Frame {
    let discs: Vec<Disc> = states.iter().map(Disc::from).collect();
    rasterize(&discs, resolution, resolution)
}

pub fn nearest_palette(rgb: [f64; 3]) -> u8 {
    let dist = |c: &[u8; 3]| -> f64 {
        (0..3)
            .map(|k| (rgb[k] - f64::from(c[k])).powi(2))
            .sum()
    };
    PALETTE
        .iter()
        .enumerate()
        .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
        .map(|(i, _)| i as u8)
        .expect("palette is non-empty")
}

/// Color ordinal seen inside the disc at `center`, or `None` if the disc is blank.
pub fn classify_patch(frame: &Frame, center: [f64; 2], radius: f64) -> Option<u8> {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for (x, y) in disc_pixels(frame.width, frame.height, center, radius) {
        let p = frame.pixel(x, y);
        if p != [0, 0, 0] {
            for k in 0..3 {
                sum[k] += f64::from(p[k]);
            }
            count += 1;
        }
    }
    (count > 0).then(|| nearest_palette(sum.map(|s| s / count as f64)))
}

/// Mean squared error over channels scaled to `[0, 1]`.
pub fn pixel_mse(a: &Frame, b: &Frame) -> f64 {
    assert_eq!(
        (a.width, a.height),
        (b.width, b.height),
        "frames must share a resolution"
    );
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = (f64::from(x) - f64::from(y)) / 255.0;
            d * d
        })
        .sum();
    sum / a.pixels.len() as f64
}

pub fn write_image(frame: &Frame, path: &Path) -> Result<()> {
    fs::write(path, frame.to_ppm()).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Frame::from_ppm(&bytes)
}

/// Write `frames` as `<dir>/ep<id>/frame<t>.ppm`.
pub fn write_sequence(dir: &Path, id: usize, frames: &[Frame]) -> Result<()> {
    let ep_dir = dir.join(format!("ep{id}"));
    fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
    for (t, f) in frames.iter().enumerate() {
        write_image(f, &ep_dir.join(format!("frame{t}.ppm")))?;
    }
    Ok(())
}
