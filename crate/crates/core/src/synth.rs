//! Deterministic fundus-like images for desk-scale localization experiments.
//!
//! Each image is a grayscale vignette (bright disk on a dark frame) with a
//! bright Gaussian "optic disc" and a dark Gaussian "fovea". The fovea is
//! centred on a pixel centre and blended so that, before noise, its pixel is
//! the strict global intensity minimum:
//!
//! `I = (1 - G) * B + G * B_f * (1 - FOVEA_DEPTH)`
//!
//! where `B` is vignette plus disc, `B_f` is `B` at the fovea and `G` the
//! fovea Gaussian. Since `B >= VIGNETTE_FLOOR > B_f * (1 - FOVEA_DEPTH)`
//! everywhere, every other pixel is strictly brighter.
//!
//! # Container format
//!
//! All integers and floats little-endian:
//!
//! | field            | bytes                                  |
//! |------------------|----------------------------------------|
//! | magic            | `b"MSCE1"`                             |
//! | size `S`         | u32                                    |
//! | count `N`        | u32                                    |
//! | spec length `L`  | u32                                    |
//! | spec             | `L` bytes of JSON ([`SynthSpec`])      |
//! | `N` samples      | `S*S` f64 pixels (row-major), f64 x, f64 y |

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MSCE1";

const VIGNETTE_INNER: f64 = 0.65;
const VIGNETTE_FLOOR: f64 = 0.15;
const VIGNETTE_FLAT_RADIUS: f64 = 0.35;
const VIGNETTE_EDGE_RADIUS: f64 = 0.5;
const DISC_AMPLITUDE: f64 = 0.35;
const FOVEA_DEPTH: f64 = 0.9;
const MIN_SEPARATION: f64 = 0.2;
const HARD_BAND: f64 = 0.1;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    /// Fovea Gaussian radius range, as fractions of the image size.
    pub fovea_radius: [f64; 2],
    /// Optic disc Gaussian radius range, as fractions of the image size.
    pub disc_radius: [f64; 2],
    pub noise_sigma: f64,
    /// Minimum normalized distance of the fovea centre from the border.
    pub margin: f64,
    /// Keep the fovea within a thin band along the margin.
    #[serde(default)]
    pub hard: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            count: 100,
            seed: 0,
            fovea_radius: [0.04, 0.08],
            disc_radius: [0.08, 0.12],
            noise_sigma: 0.05,
            margin: 0.1,
            hard: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.size < 4 {
            return bad(format!("image size {} is too small", self.size));
        }
        if self.count == 0 {
            return bad("sample count must be at least 1".into());
        }
        let open = |v: f64| v > 0.0 && v < 0.5;
        for (name, [lo, hi]) in [("fovea", self.fovea_radius), ("disc", self.disc_radius)] {
            if !(open(lo) && open(hi) && lo <= hi) {
                return bad(format!(
                    "{name} radius range [{lo}, {hi}] must lie in (0, 0.5)"
                ));
            }
        }
        if !open(self.margin) {
            return bad(format!("margin {} must lie in (0, 0.5)", self.margin));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise sigma {} must be non-negative",
                self.noise_sigma
            ));
        }
        let (lo, hi) = self.fovea_pixel_range();
        if lo > hi {
            return bad(format!(
                "margin {} leaves no valid fovea pixel",
                self.margin
            ));
        }
        Ok(())
    }

    /// Pixel indices whose centres lie inside `[margin, 1 - margin]`.
    fn fovea_pixel_range(&self) -> (usize, usize) {
        let s = self.size as f64;
        let lo = (self.margin * s - 0.5).ceil().max(0.0) as usize;
        let hi = ((1.0 - self.margin) * s - 0.5).floor().max(0.0) as usize;
        (lo, hi.min(self.size - 1))
    }
}

/// Discretizes a normalized coordinate onto `classes` bins.
pub fn class_of(g: f64, classes: usize) -> usize {
    ((g * classes as f64).floor().max(0.0) as usize).min(classes - 1)
}

/// Normalized ground-truth fovea centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordLabel {
    pub x: f64,
    pub y: f64,
}

impl CoordLabel {
    pub fn class_x(&self, classes: usize) -> usize {
        class_of(self.x, classes)
    }

    pub fn class_y(&self, classes: usize) -> usize {
        class_of(self.y, classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: CoordLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.spec.size
    }
}

fn vignette(x: f64, y: f64) -> f64 {
    let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
    if r <= VIGNETTE_FLAT_RADIUS {
        VIGNETTE_INNER
    } else if r >= VIGNETTE_EDGE_RADIUS {
        VIGNETTE_FLOOR
    } else {
        let t = (r - VIGNETTE_FLAT_RADIUS) / (VIGNETTE_EDGE_RADIUS - VIGNETTE_FLAT_RADIUS);
        VIGNETTE_FLOOR + (VIGNETTE_INNER - VIGNETTE_FLOOR) * 0.5 * (1.0 + (PI * t).cos())
    }
}

fn gaussian(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

fn uniform(rng: &mut SplitMix64, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// One sample plus the normalized optic disc centre.
fn generate_one(spec: &SynthSpec, index: usize) -> Result<(Sample, CoordLabel)> {
    let mut rng = SplitMix64::seed_from_u64(derive_seed(spec.seed, index as u64));
    let n = spec.size;
    let s = n as f64;
    let (lo, hi) = spec.fovea_pixel_range();

    let pick = |rng: &mut SplitMix64, lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (fi, fj) = if spec.hard {
        let band = ((spec.margin + HARD_BAND) * s - 0.5).floor() as usize;
        let band_hi = band.clamp(lo, hi);
        let near = pick(&mut rng, lo, band_hi);
        let coord = if rng.random_bool(0.5) {
            near
        } else {
            n - 1 - near
        };
        let other = pick(&mut rng, lo, hi);
        if rng.random_bool(0.5) {
            (coord, other)
        } else {
            (other, coord)
        }
    } else {
        (pick(&mut rng, lo, hi), pick(&mut rng, lo, hi))
    };
    let label = CoordLabel {
        x: (fj as f64 + 0.5) / s,
        y: (fi as f64 + 0.5) / s,
    };

    let mut disc = None;
    for _ in 0..MAX_ATTEMPTS {
        let dx = rng.random_range(spec.margin..1.0 - spec.margin);
        let dy = rng.random_range(spec.margin..1.0 - spec.margin);
        if ((dx - label.x).powi(2) + (dy - label.y).powi(2)).sqrt() >= MIN_SEPARATION {
            disc = Some(CoordLabel { x: dx, y: dy });
            break;
        }
    }
    let disc = disc.ok_or(Error::Placement {
        sample: index,
        attempts: MAX_ATTEMPTS,
    })?;
    let fovea_sigma = uniform(&mut rng, spec.fovea_radius);
    let disc_sigma = uniform(&mut rng, spec.disc_radius);

    let background = |x: f64, y: f64| {
        vignette(x, y) + DISC_AMPLITUDE * gaussian(x - disc.x, y - disc.y, disc_sigma)
    };
    let floor = background(label.x, label.y) * (1.0 - FOVEA_DEPTH);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut pixels = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = ((j as f64 + 0.5) / s, (i as f64 + 0.5) / s);
            let g = gaussian(x - label.x, y - label.y, fovea_sigma);
            let mut v = (1.0 - g) * background(x, y) + g * floor;
            if spec.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    let sample = Sample {
        image: Tensor::new(vec![1, n, n], pixels)?,
        label,
    };
    Ok((sample, disc))
}

/// Generates `spec.count` samples; sample `i` draws from its own stream
/// derived from `(spec.seed, i)`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.count)
        .map(|i| generate_one(spec, i).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

pub fn write_dataset<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    let s = data.spec.size;
    let spec_json = serde_json::to_vec(&data.spec).map_err(|e| Error::Format(e.to_string()))?;
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::SizeMismatch(format!("{what} {v} exceeds u32")))
    };
    out.write_all(MAGIC)?;
    out.write_all(&u32_of(s, "size")?.to_le_bytes())?;
    out.write_all(&u32_of(data.len(), "count")?.to_le_bytes())?;
    out.write_all(&u32_of(spec_json.len(), "spec length")?.to_le_bytes())?;
    out.write_all(&spec_json)?;
    for sample in &data.samples {
        if sample.image.shape() != [1, s, s] {
            return Err(Error::SizeMismatch(format!(
                "sample image {:?} does not match size {s}",
                sample.image.shape()
            )));
        }
        for v in sample.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&sample.label.x.to_le_bytes())?;
        out.write_all(&sample.label.y.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<Dataset> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r
        .take(MAGIC.len(), "magic")
        .map_err(|_| Error::BadMagic { expected: "MSCE1" })?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: "MSCE1" });
    }
    let s = r.u32("size")? as usize;
    let n = r.u32("count")? as usize;
    let len = r.u32("spec length")? as usize;
    let spec: SynthSpec = serde_json::from_slice(r.take(len, "spec")?)
        .map_err(|e| Error::Format(format!("spec: {e}")))?;
    if spec.size != s || spec.count != n {
        return Err(Error::SizeMismatch(format!(
            "header says {s}px x {n} samples, spec says {}px x {}",
            spec.size, spec.count
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let block = r.take(8 * s * s, &format!("pixels of sample {i}"))?;
        let pixels = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let x = r.f64(&format!("label of sample {i}"))?;
        let y = r.f64(&format!("label of sample {i}"))?;
        samples.push(Sample {
            image: Tensor::new(vec![1, s, s], pixels)?,
            label: CoordLabel { x, y },
        });
    }
    if r.pos != buf.len() {
        return Err(Error::SizeMismatch(format!(
            "{} trailing bytes after {n} samples",
            buf.len() - r.pos
        )));
    }
    Ok(Dataset { spec, samples })
}

pub fn save(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_dataset(data, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(fs::File::open(path)?)
}
