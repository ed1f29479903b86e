//! Synthetic microaneurysm phantoms: a frame stack whose perfused regions
//! flicker over time, and the ground-truth mask of the MA with its feeding
//! and draining vessels.
//!
//! Geometry is built from a few primitives (disks, ellipses, wobbly blobs and
//! constant-width, flat-ended tubes along gently curving paths). Background
//! vessels are drawn across the raster but kept at least
//! [`BACKGROUND_CLEARANCE`] pixels away from the mask so they never touch it.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, FrameStack, RngStream};
use crate::morph::squared_distance_to;

pub const BACKGROUND_CLEARANCE: f64 = 6.0;

const BACKGROUND_LEVEL: f64 = 0.45;
const MA_LEVEL: f64 = 0.25;
const VESSEL_LEVEL: f64 = 0.28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Focal,
    Saccular,
    Fusiform,
    Pedunculated,
    Irregular,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Focal,
        ShapeClass::Saccular,
        ShapeClass::Fusiform,
        ShapeClass::Pedunculated,
        ShapeClass::Irregular,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape_class: ShapeClass,
    /// Side of the square raster.
    pub size: usize,
    pub body_radius: f64,
    pub vessel_width: f64,
    /// Length of each attached vessel beyond the body.
    pub vessel_length: f64,
    pub n_background_vessels: usize,
    pub noise_sigma: f64,
    pub flicker_amp: f64,
    pub frames: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape_class: ShapeClass::Saccular,
            size: 128,
            body_radius: 20.0,
            vessel_width: 4.0,
            vessel_length: 25.0,
            n_background_vessels: 2,
            noise_sigma: 0.03,
            flicker_amp: 0.3,
            frames: 75,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid(format!(
                "need >=2 frames, got {}",
                self.frames
            )));
        }
        if self.size < 16 {
            return Err(Error::invalid(format!(
                "phantom size {} too small",
                self.size
            )));
        }
        let finite = [
            self.body_radius,
            self.vessel_width,
            self.vessel_length,
            self.noise_sigma,
            self.flicker_amp,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("phantom spec".into()));
        }
        if !(self.vessel_width > 0.0) || !(self.body_radius > self.vessel_width / 2.0) {
            return Err(Error::invalid(format!(
                "body_radius {} must exceed vessel_width/2 ({}) and vessel_width must be > 0",
                self.body_radius,
                self.vessel_width / 2.0
            )));
        }
        if self.vessel_length < 0.0 || self.noise_sigma < 0.0 || self.flicker_amp < 0.0 {
            return Err(Error::invalid(
                "vessel_length, noise_sigma and flicker_amp must be >= 0",
            ));
        }
        Ok(())
    }
}

/// Relative weights of the shape classes in a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassMix {
    pub focal: f64,
    pub saccular: f64,
    pub fusiform: f64,
    pub pedunculated: f64,
    pub irregular: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        ClassMix {
            focal: 1.0,
            saccular: 1.0,
            fusiform: 1.0,
            pedunculated: 1.0,
            irregular: 1.0,
        }
    }
}

impl ClassMix {
    pub fn only(class: ShapeClass) -> Self {
        let mut m = ClassMix {
            focal: 0.0,
            saccular: 0.0,
            fusiform: 0.0,
            pedunculated: 0.0,
            irregular: 0.0,
        };
        *m.weight_mut(class) = 1.0;
        m
    }

    fn weight_mut(&mut self, class: ShapeClass) -> &mut f64 {
        match class {
            ShapeClass::Focal => &mut self.focal,
            ShapeClass::Saccular => &mut self.saccular,
            ShapeClass::Fusiform => &mut self.fusiform,
            ShapeClass::Pedunculated => &mut self.pedunculated,
            ShapeClass::Irregular => &mut self.irregular,
        }
    }

    fn weights(&self) -> [f64; 5] {
        [
            self.focal,
            self.saccular,
            self.fusiform,
            self.pedunculated,
            self.irregular,
        ]
    }

    fn pick(&self, rng: &mut RngStream) -> ShapeClass {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        let mut u = rng.uniform() * total;
        for (class, wi) in ShapeClass::ALL.iter().zip(w) {
            if u < wi {
                return *class;
            }
            u -= wi;
        }
        // Rounding left u at the very top; fall back to the last weighted class.
        let last = w.iter().rposition(|&x| x > 0.0).unwrap_or(0);
        ShapeClass::ALL[last]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(
                "class_mix weights must be >= 0 with a positive sum",
            ));
        }
        Ok(())
    }
}

type Pt = (f64, f64);

fn dir(a: f64) -> Pt {
    (a.cos(), a.sin())
}

/// Path starting at `start`, stepping 1 px while the heading turns by
/// `curvature` radians per px.
fn curve(start: Pt, heading: f64, curvature: f64, length: f64) -> Vec<Pt> {
    let steps = length.ceil().max(1.0) as usize;
    let step = length / steps as f64;
    let mut pts = Vec::with_capacity(steps + 1);
    let (mut p, mut a) = (start, heading);
    pts.push(p);
    for _ in 0..steps {
        p = (p.0 + step * a.cos(), p.1 + step * a.sin());
        a += curvature * step;
        pts.push(p);
    }
    pts
}

enum Shape {
    Disk {
        c: Pt,
        r: f64,
    },
    Ellipse {
        c: Pt,
        a: f64,
        b: f64,
        angle: f64,
    },
    /// Radius `r (1 + sum a_k cos(k theta + phase_k))`.
    Blob {
        c: Pt,
        r: f64,
        harmonics: Vec<(f64, f64, f64)>,
    },
    Tube {
        path: Vec<Pt>,
        half_width: f64,
    },
}

/// Squared distance from `p` to segment `ab`. An open end (`open_a` /
/// `open_b`) cuts the segment flat there: points projecting past it are
/// infinitely far.
fn seg_dist2(p: Pt, a: Pt, b: Pt, open_a: bool, open_b: bool) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let mut t = if len2 == 0.0 {
        0.0
    } else {
        ((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2
    };
    if (open_a && t < 0.0) || (open_b && t > 1.0) {
        return f64::INFINITY;
    }
    t = t.clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

impl Shape {
    fn contains(&self, p: Pt) -> bool {
        match self {
            Shape::Disk { c, r } => (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r,
            Shape::Ellipse { c, a, b, angle } => {
                let (dx, dy) = (p.0 - c.0, p.1 - c.1);
                let (u, v) = (
                    dx * angle.cos() + dy * angle.sin(),
                    -dx * angle.sin() + dy * angle.cos(),
                );
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Blob { c, r, harmonics } => {
                let (dx, dy) = (p.0 - c.0, p.1 - c.1);
                let theta = dy.atan2(dx);
                let rr = r
                    * (1.0
                        + harmonics
                            .iter()
                            .map(|(k, a, ph)| a * (k * theta + ph).cos())
                            .sum::<f64>());
                dx * dx + dy * dy <= rr * rr
            }
            Shape::Tube { path, half_width } => {
                let hw2 = half_width * half_width;
                let last = path.len().saturating_sub(2);
                path.windows(2)
                    .enumerate()
                    .any(|(i, s)| seg_dist2(p, s[0], s[1], i == 0, i == last) <= hw2)
            }
        }
    }

    /// Inclusive bounding box (x0, y0, x1, y1).
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Disk { c, r } => (c.0 - r, c.1 - r, c.0 + r, c.1 + r),
            Shape::Ellipse { c, a, .. } => (c.0 - a, c.1 - a, c.0 + a, c.1 + a),
            Shape::Blob { c, r, harmonics } => {
                let rr = r * (1.0 + harmonics.iter().map(|h| h.1.abs()).sum::<f64>());
                (c.0 - rr, c.1 - rr, c.0 + rr, c.1 + rr)
            }
            Shape::Tube { path, half_width } => {
                let mut b = (
                    f64::INFINITY,
                    f64::INFINITY,
                    f64::NEG_INFINITY,
                    f64::NEG_INFINITY,
                );
                for p in path {
                    b = (b.0.min(p.0), b.1.min(p.1), b.2.max(p.0), b.3.max(p.1));
                }
                (
                    b.0 - half_width,
                    b.1 - half_width,
                    b.2 + half_width,
                    b.3 + half_width,
                )
            }
        }
    }

    fn paint(&self, out: &mut [bool], size: usize) {
        let (x0, y0, x1, y1) = self.bounds();
        let lo = |v: f64| (v.floor().max(0.0) as usize).min(size);
        let hi = |v: f64| ((v.ceil() + 1.0).max(0.0) as usize).min(size);
        for y in lo(y0)..hi(y1) {
            for x in lo(x0)..hi(x1) {
                if !out[y * size + x] && self.contains((x as f64, y as f64)) {
                    out[y * size + x] = true;
                }
            }
        }
    }
}

/// MA body plus its two attached vessels for the spec's class.
fn ma_geometry(spec: &PhantomSpec, rng: &mut RngStream) -> Vec<Shape> {
    let half = (spec.size as f64 - 1.0) / 2.0;
    let c = (
        half + rng.uniform_range(-3.0, 3.0),
        half + rng.uniform_range(-3.0, 3.0),
    );
    let r = spec.body_radius;
    let hw = spec.vessel_width / 2.0;
    let phi = rng.uniform_range(0.0, TAU);
    let mut bend = || rng.uniform_range(-0.012, 0.012);
    let (k1, k2) = (bend(), bend());
    let len = spec.vessel_length;
    let normal = dir(phi + PI / 2.0);
    let offset = |d: f64| (c.0 + d * normal.0, c.1 + d * normal.1);
    let tube = |start: Pt, heading: f64, k: f64, l: f64| Shape::Tube {
        path: curve(start, heading, k, l),
        half_width: hw,
    };
    let mut shapes = Vec::new();
    match spec.shape_class {
        ShapeClass::Focal => {
            let turn = rng.uniform_range(-0.4, 0.4);
            shapes.push(Shape::Disk { c, r });
            shapes.push(tube(c, phi, k1, r + len));
            shapes.push(tube(c, phi + PI + turn, k2, r + len));
        }
        ShapeClass::Saccular => {
            // The parent vessel runs past the body off its centre line.
            let q = offset(0.75 * r);
            shapes.push(Shape::Disk { c, r });
            shapes.push(tube(q, phi, k1, r + len));
            shapes.push(tube(q, phi + PI, k2, r + len));
        }
        ShapeClass::Fusiform => {
            let a = 1.35 * r;
            shapes.push(Shape::Ellipse {
                c,
                a,
                b: 0.7 * r,
                angle: phi,
            });
            shapes.push(tube(c, phi, k1, a + len));
            shapes.push(tube(c, phi + PI, k2, a + len));
        }
        ShapeClass::Pedunculated => {
            let neck = rng.uniform_range(5.0, 8.0);
            let q = offset(r + neck);
            shapes.push(Shape::Disk { c, r });
            shapes.push(Shape::Tube {
                path: vec![c, q],
                half_width: hw,
            });
            shapes.push(tube(q, phi, k1, len + 0.5 * r));
            shapes.push(tube(q, phi + PI, k2, len + 0.5 * r));
        }
        ShapeClass::Irregular => {
            let harmonics = (2..=4)
                .map(|k| {
                    (
                        k as f64,
                        rng.uniform_range(0.0, 0.1),
                        rng.uniform_range(0.0, TAU),
                    )
                })
                .collect();
            let turn = rng.uniform_range(-0.4, 0.4);
            shapes.push(Shape::Blob { c, r, harmonics });
            shapes.push(tube(c, phi, k1, 1.3 * r + len));
            shapes.push(tube(c, phi + PI + turn, k2, 1.3 * r + len));
        }
    }
    shapes
}

/// Background vessels entering from a random border point and crossing the
/// raster.
fn background_geometry(spec: &PhantomSpec, rng: &mut RngStream) -> Vec<Shape> {
    let s = spec.size as f64 - 1.0;
    (0..spec.n_background_vessels)
        .map(|_| {
            let t = rng.uniform_range(0.0, s);
            let (start, inward) = match rng.below(4) {
                0 => ((t, 0.0), PI / 2.0),
                1 => ((s, t), PI),
                2 => ((t, s), -PI / 2.0),
                _ => ((0.0, t), 0.0),
            };
            let heading = inward + rng.uniform_range(-0.6, 0.6);
            let k = rng.uniform_range(-0.01, 0.01);
            Shape::Tube {
                path: curve(start, heading, k, 1.5 * s),
                half_width: rng.uniform_range(1.25, 2.0),
            }
        })
        .collect()
}

/// Smooth low-amplitude illumination pattern of the static background.
fn background_texture(size: usize, rng: &mut RngStream) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let a = rng.uniform_range(0.0, TAU);
            let f = rng.uniform_range(0.01, 0.04) * TAU;
            (f * a.cos(), f * a.sin(), rng.uniform_range(0.0, TAU))
        })
        .collect();
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            BACKGROUND_LEVEL
                + 0.02
                    * waves
                        .iter()
                        .map(|(fx, fy, ph)| (fx * x + fy * y + ph).sin())
                        .sum::<f64>()
        })
        .collect()
}

/// Renders one phantom. Geometry, background and frames draw from separate
/// streams of `spec.seed`.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(FrameStack, BinaryMask)> {
    spec.validate()?;
    let n = spec.size;
    let mut geo_rng = RngStream::new(spec.seed, 0);
    let ma = ma_geometry(spec, &mut geo_rng);
    for shape in &ma {
        let (x0, y0, x1, y1) = shape.bounds();
        let max = n as f64 - 1.0;
        if x0 < 0.0 || y0 < 0.0 || x1 > max || y1 > max {
            return Err(Error::invalid(format!(
                "phantom geometry exceeds the {n}x{n} raster (body_radius {}, vessel_length {})",
                spec.body_radius, spec.vessel_length
            )));
        }
    }
    let mut in_mask = vec![false; n * n];
    for shape in &ma {
        shape.paint(&mut in_mask, n);
    }

    let mut bg_rng = RngStream::new(spec.seed, 1);
    let mut in_vessel = vec![false; n * n];
    for shape in background_geometry(spec, &mut bg_rng) {
        shape.paint(&mut in_vessel, n);
    }
    let to_mask = squared_distance_to(&in_mask, n, n);
    let clear2 = BACKGROUND_CLEARANCE * BACKGROUND_CLEARANCE;
    for (v, d2) in in_vessel.iter_mut().zip(&to_mask) {
        *v = *v && *d2 >= clear2;
    }
    let mut stat = background_texture(n, &mut bg_rng);
    for i in 0..n * n {
        if in_mask[i] {
            stat[i] = MA_LEVEL;
        } else if in_vessel[i] {
            stat[i] = VESSEL_LEVEL;
        }
    }

    let mut frame_rng = RngStream::new(spec.seed, 2);
    let mut data = Vec::with_capacity(n * n * spec.frames);
    for _ in 0..spec.frames {
        for i in 0..n * n {
            let mut v = stat[i];
            if in_mask[i] || in_vessel[i] {
                v += spec.flicker_amp * (frame_rng.uniform() - 0.5);
            }
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * frame_rng.normal();
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let stack = FrameStack::new(n, n, spec.frames, data)?;
    let mask = BinaryMask::new(n, n, in_mask.into_iter().map(u8::from).collect())?;
    Ok((stack, mask))
}

/// Randomized spec for `class`; the ranges keep every MA at or above 1024 px
/// and inside a 128 px raster.
pub fn sample_spec(class: ShapeClass, rng: &mut RngStream) -> PhantomSpec {
    PhantomSpec {
        shape_class: class,
        body_radius: rng.uniform_range(18.0, 24.0),
        vessel_width: rng.uniform_range(4.5, 8.0),
        vessel_length: rng.uniform_range(18.0, 28.0),
        n_background_vessels: 1 + rng.below(3) as usize,
        seed: rng.next_u64(),
        ..PhantomSpec::default()
    }
}

/// Specs for `n` phantoms; phantom `i` draws from stream `i` of `seed`, so a
/// prefix of a larger dataset is the smaller dataset.
pub fn dataset_specs(n: usize, mix: &ClassMix, seed: u64) -> Result<Vec<PhantomSpec>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    mix.validate()?;
    Ok((0..n as u64)
        .map(|i| {
            let mut rng = RngStream::new(seed, i);
            let class = mix.pick(&mut rng);
            sample_spec(class, &mut rng)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub stack: FrameStack,
    pub mask: BinaryMask,
}

pub fn gen_dataset(n: usize, mix: &ClassMix, seed: u64) -> Result<Vec<Phantom>> {
    dataset_specs(n, mix, seed)?
        .into_iter()
        .map(|spec| {
            let (stack, mask) = gen_phantom(&spec)?;
            Ok(Phantom { spec, stack, mask })
        })
        .collect()
}
