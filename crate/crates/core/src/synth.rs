//! Synthetic industrial scenes with a long-tailed label distribution.
//!
//! Head classes are long continuous structures (pipes, ducts, beams). Most
//! tail classes are mounted on a host pipe: flanges and valves sit inline,
//! tees branch off, reducers and elbows continue from a pipe end. A reducer
//! is a gently tapered cylinder whose mid-body is locally almost identical to
//! a straight pipe, while its narrow end is not; [`measure_ambiguity`] checks
//! that profile for every generated scene.
//!
//! Point budgets per class are exact: each class receives
//! `round(fraction * N)` points, spread over its instances in proportion to
//! surface area times the regional sampling density.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::features::eigen_features;
use crate::par::{self, Exec};
use crate::pointcloud::{LabeledPointCloud, Point};
use crate::spatial::SpatialIndex;

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    StraightCylinder,
    Box,
    BigCylinder,
    TaperedCylinder,
    BentCylinder,
    CompositeAssembly,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 6] = [
        PrimitiveKind::StraightCylinder,
        PrimitiveKind::Box,
        PrimitiveKind::BigCylinder,
        PrimitiveKind::TaperedCylinder,
        PrimitiveKind::BentCylinder,
        PrimitiveKind::CompositeAssembly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PrimitiveKind::StraightCylinder => "straight_cylinder",
            PrimitiveKind::Box => "box",
            PrimitiveKind::BigCylinder => "big_cylinder",
            PrimitiveKind::TaperedCylinder => "tapered_cylinder",
            PrimitiveKind::BentCylinder => "bent_cylinder",
            PrimitiveKind::CompositeAssembly => "composite_assembly",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PrimitiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::domain(format!("unknown primitive kind '{s}'")))
    }
}

/// Where an instance is placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mount {
    /// Anywhere in the scene footprint.
    Free,
    /// Coaxial around a host pipe, away from its ends.
    Inline,
    /// Perpendicular stub leaving a host pipe's side.
    Branch,
    /// Continuing from one end of a host pipe.
    End,
}

impl Mount {
    pub const ALL: [Mount; 4] = [Mount::Free, Mount::Inline, Mount::Branch, Mount::End];

    pub fn as_str(self) -> &'static str {
        match self {
            Mount::Free => "free",
            Mount::Inline => "inline",
            Mount::Branch => "branch",
            Mount::End => "end",
        }
    }
}

impl fmt::Display for Mount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mount::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::domain(format!("unknown mount '{s}'")))
    }
}

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn is_positive(&self) -> bool {
        self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite()
    }
}

/// One semantic class of the scene.
///
/// Sizes are in metres. For mounted classes `radius` is a multiple of the
/// host pipe radius. Boxes use `radius` as the half-width of their cross
/// section; bent cylinders use `length` as the arc length of a quarter bend.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub kind: PrimitiveKind,
    pub mount: Mount,
    pub fraction: f64,
    /// Minimum and maximum instance count.
    pub instances: (usize, usize),
    pub length: Range,
    pub radius: Range,
    /// Axis height of horizontal free instances; vertical ones stand on the
    /// ground.
    pub elevation: Range,
    /// Probability that a free instance stands vertically.
    pub vertical_share: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    pub total_points: usize,
    /// Desired max/min class fraction ratio; fractions are reshaped by a
    /// power law to hit it exactly.
    pub imbalance_ratio: Option<f64>,
    pub seed: u64,
    /// Surface sampling density (points per square metre) in the near region.
    pub density: f64,
    /// Near-to-far sampling density ratio.
    pub density_contrast: f64,
    /// Points per square metre of ground footprint; fixes the scene extent.
    pub ground_density: f64,
}

pub const DEFAULT_NOISE: f64 = 0.005;
const MAX_CERTIFY_ATTEMPTS: u64 = 32;
pub const AMBIGUITY_MID_MAX: f64 = 0.15;
pub const AMBIGUITY_END_MIN: f64 = 0.15;

#[allow(clippy::too_many_arguments)]
fn class(
    name: &str,
    kind: PrimitiveKind,
    mount: Mount,
    fraction: f64,
    instances: (usize, usize),
    length: Range,
    radius: Range,
    elevation: Range,
    vertical_share: f64,
) -> ClassSpec {
    ClassSpec {
        name: name.to_string(),
        kind,
        mount,
        fraction,
        instances,
        length,
        radius,
        elevation,
        vertical_share,
        noise: DEFAULT_NOISE,
    }
}

/// Twelve classes shaped like an industrial plant: three head classes with
/// 77% of the points, two common classes and seven tail classes of under 3%
/// each. The largest-to-smallest fraction ratio is 40.
pub fn default_industrial_spec() -> SceneSpec {
    use Mount::*;
    use PrimitiveKind::*;
    let many = (1, 10_000);
    let classes = vec![
        class(
            "duct",
            Box,
            Free,
            0.25,
            many,
            Range::new(3.0, 8.0),
            Range::new(0.25, 0.45),
            Range::new(5.0, 7.0),
            0.0,
        ),
        class(
            "pipe",
            StraightCylinder,
            Free,
            0.32,
            many,
            Range::new(3.0, 8.0),
            Range::new(0.05, 0.12),
            Range::new(1.0, 4.0),
            0.15,
        ),
        class(
            "rectangular_beam",
            Box,
            Free,
            0.20,
            many,
            Range::new(3.0, 6.0),
            Range::new(0.12, 0.2),
            Range::new(2.5, 4.5),
            0.6,
        ),
        class(
            "ibeam",
            Box,
            Free,
            0.07,
            many,
            Range::new(2.0, 5.0),
            Range::new(0.15, 0.25),
            Range::new(0.2, 1.0),
            0.0,
        ),
        class(
            "tank",
            BigCylinder,
            Free,
            0.05,
            many,
            Range::new(2.0, 4.0),
            Range::new(1.0, 1.8),
            Range::new(0.0, 0.0),
            1.0,
        ),
        class(
            "flange",
            StraightCylinder,
            Inline,
            0.023,
            many,
            Range::new(0.04, 0.1),
            Range::new(1.6, 2.0),
            Range::new(0.0, 0.0),
            0.0,
        ),
        class(
            "valve",
            CompositeAssembly,
            Inline,
            0.022,
            many,
            Range::new(0.3, 0.5),
            Range::new(1.4, 1.7),
            Range::new(0.0, 0.0),
            0.0,
        ),
        class(
            "pump",
            CompositeAssembly,
            Free,
            0.012,
            many,
            Range::new(0.3, 0.5),
            Range::new(0.12, 0.2),
            Range::new(0.4, 0.6),
            0.0,
        ),
        class(
            "strainer",
            CompositeAssembly,
            Inline,
            0.010,
            many,
            Range::new(0.25, 0.4),
            Range::new(2.0, 2.4),
            Range::new(0.0, 0.0),
            0.0,
        ),
        class(
            "elbow",
            BentCylinder,
            End,
            0.020,
            many,
            Range::new(0.3, 0.6),
            Range::new(1.0, 1.0),
            Range::new(0.0, 0.0),
            0.0,
        ),
        class(
            "tee",
            StraightCylinder,
            Branch,
            0.015,
            many,
            Range::new(0.3, 0.6),
            Range::new(0.8, 1.0),
            Range::new(0.0, 0.0),
            0.0,
        ),
        class(
            "reducer",
            TaperedCylinder,
            End,
            0.008,
            many,
            Range::new(0.5, 0.8),
            Range::new(0.45, 0.6),
            Range::new(0.0, 0.0),
            0.0,
        ),
    ];
    SceneSpec {
        classes,
        total_points: 100_000,
        imbalance_ratio: None,
        seed: 0,
        density: 800.0,
        density_contrast: 4.0,
        ground_density: 150.0,
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() > u16::MAX as usize {
            return Err(Error::domain("a scene needs between 1 and 65535 classes"));
        }
        let sum: f64 = self.classes.iter().map(|c| c.fraction).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!(
                "class fractions sum to {sum}, expected 1"
            )));
        }
        for c in &self.classes {
            if !(c.fraction > 0.0) {
                return Err(Error::domain(format!(
                    "class '{}' needs a positive fraction",
                    c.name
                )));
            }
            if !c.length.is_positive() || !c.radius.is_positive() {
                return Err(Error::domain(format!(
                    "class '{}' has a non-positive size range",
                    c.name
                )));
            }
            if !(c.elevation.lo >= 0.0 && c.elevation.hi >= c.elevation.lo) {
                return Err(Error::domain(format!(
                    "class '{}' has an invalid elevation range",
                    c.name
                )));
            }
            if c.instances.0 == 0 || c.instances.1 < c.instances.0 {
                return Err(Error::domain(format!(
                    "class '{}' has an invalid instance range",
                    c.name
                )));
            }
            if !(0.0..=1.0).contains(&c.vertical_share) || !(c.noise >= 0.0) {
                return Err(Error::domain(format!(
                    "class '{}' has invalid noise or orientation",
                    c.name
                )));
            }
            if c.mount != Mount::Free && self.host_class().is_none() {
                return Err(Error::domain(format!(
                    "class '{}' is mounted but no free straight-cylinder class exists",
                    c.name
                )));
            }
            if c.kind == PrimitiveKind::BentCylinder && c.mount != Mount::End {
                return Err(Error::domain(
                    "bent cylinders must be mounted at a pipe end",
                ));
            }
        }
        if let Some(r) = self.imbalance_ratio {
            if !(r >= 1.0 && r.is_finite()) {
                return Err(Error::domain("imbalance ratio must be finite and >= 1"));
            }
        }
        if !(self.density > 0.0 && self.density_contrast >= 1.0 && self.ground_density > 0.0) {
            return Err(Error::domain(
                "densities must be positive and the contrast >= 1",
            ));
        }
        if self.total_points == 0 {
            return Err(Error::domain("a scene needs at least one point"));
        }
        Ok(())
    }

    /// The first free straight-cylinder class; mounted classes attach to it.
    pub fn host_class(&self) -> Option<usize> {
        self.classes
            .iter()
            .position(|c| c.kind == PrimitiveKind::StraightCylinder && c.mount == Mount::Free)
    }

    /// Target fractions after applying the imbalance ratio.
    pub fn target_fractions(&self) -> Vec<f64> {
        let base: Vec<f64> = self.classes.iter().map(|c| c.fraction).collect();
        let Some(target) = self.imbalance_ratio else {
            return base;
        };
        let max = base.iter().cloned().fold(f64::MIN, f64::max);
        let min = base.iter().cloned().fold(f64::MAX, f64::min);
        let p = if max > min {
            target.ln() / (max / min).ln()
        } else {
            1.0
        };
        let shaped: Vec<f64> = base.iter().map(|f| f.powf(p)).collect();
        let sum: f64 = shaped.iter().sum();
        shaped.iter().map(|f| f / sum).collect()
    }

    /// Exact per-class point counts summing to `total_points`.
    pub fn point_budgets(&self) -> Result<Vec<usize>> {
        let fractions = self.target_fractions();
        for (c, f) in self.classes.iter().zip(&fractions) {
            if f * (self.total_points as f64) < 1.0 {
                return Err(Error::domain(format!(
                    "class '{}' would receive {:.3} points; raise the point count",
                    c.name,
                    f * self.total_points as f64
                )));
            }
        }
        Ok(largest_remainder(&fractions, self.total_points))
    }

    /// Side of the square scene footprint in metres.
    pub fn extent(&self) -> f64 {
        (self.total_points as f64 / self.ground_density).sqrt()
    }
}

/// Splits `total` into integer parts proportional to `weights`.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        if let Some(first) = out.first_mut() {
            *first = total;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}

/// Orthonormal frame with `a` as the main axis.
#[derive(Clone, Copy, Debug)]
struct Frame {
    o: V3,
    a: V3,
    u: V3,
    v: V3,
}

impl Frame {
    fn new(o: V3, axis: V3) -> Frame {
        let a = axis.normalize();
        let helper = if a.z.abs() < 0.9 { V3::z() } else { V3::x() };
        let u = a.cross(&helper).normalize();
        let v = a.cross(&u);
        Frame { o, a, u, v }
    }

    fn with_up(o: V3, axis: V3) -> Frame {
        let a = axis.normalize();
        let helper = if a.z.abs() < 0.9 { V3::z() } else { V3::x() };
        let v = (helper - a * a.dot(&helper)).normalize();
        let u = v.cross(&a);
        Frame { o, a, u, v }
    }
}

/// A sampled surface patch.
#[derive(Clone, Debug)]
enum Surface {
    /// Lateral surface of a (possibly tapered) cylinder along `f.a`.
    Tube {
        f: Frame,
        r0: f64,
        r1: f64,
        len: f64,
    },
    /// Annulus in the plane through `f.o` normal to `f.a`.
    Disk { f: Frame, r_in: f64, r_out: f64 },
    /// Rectangle `c + s e1 + t e2`, `s, t` in `[-1, 1]`.
    Rect { c: V3, e1: V3, e2: V3 },
    /// Quarter-torus starting at `f.o` heading along `f.a`, bending towards `f.u`.
    Bend {
        f: Frame,
        bend: f64,
        r: f64,
        angle: f64,
    },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Tube { r0, r1, len, .. } => {
                PI * (r0 + r1) * (len * len + (r1 - r0).powi(2)).sqrt()
            }
            Surface::Disk { r_in, r_out, .. } => PI * (r_out * r_out - r_in * r_in),
            Surface::Rect { e1, e2, .. } => 4.0 * e1.norm() * e2.norm(),
            Surface::Bend { bend, r, angle, .. } => 2.0 * PI * r * bend * angle,
        }
    }

    /// Area-uniform point with its unit normal.
    fn sample<R: Rng>(&self, rng: &mut R) -> (V3, V3) {
        match *self {
            Surface::Tube { f, r0, r1, len } => {
                let u: f64 = rng.random();
                let t = if (r1 - r0).abs() < 1e-12 {
                    u * len
                } else {
                    len * (-r0 + (r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt()) / (r1 - r0)
                };
                let theta = rng.random_range(0.0..2.0 * PI);
                let radial = f.u * theta.cos() + f.v * theta.sin();
                let r = r0 + (r1 - r0) * t / len;
                let normal = (radial - f.a * ((r1 - r0) / len)).normalize();
                (f.o + f.a * t + radial * r, normal)
            }
            Surface::Disk { f, r_in, r_out } => {
                let r = (r_in * r_in + rng.random::<f64>() * (r_out * r_out - r_in * r_in)).sqrt();
                let theta = rng.random_range(0.0..2.0 * PI);
                (f.o + (f.u * theta.cos() + f.v * theta.sin()) * r, f.a)
            }
            Surface::Rect { c, e1, e2 } => {
                let s = rng.random_range(-1.0..=1.0);
                let t = rng.random_range(-1.0..=1.0);
                (c + e1 * s + e2 * t, e1.cross(&e2).normalize())
            }
            Surface::Bend { f, bend, r, angle } => {
                let psi = loop {
                    let psi = rng.random_range(0.0..2.0 * PI);
                    let accept = (bend + r * psi.cos()) / (bend + r);
                    if rng.random::<f64>() <= accept {
                        break psi;
                    }
                };
                let phi = rng.random_range(0.0..=angle);
                let centre = f.o + f.u * bend;
                let outward = -f.u * phi.cos() + f.a * phi.sin();
                let binormal = f.a.cross(&f.u);
                let normal = outward * psi.cos() + binormal * psi.sin();
                (centre + outward * bend + normal * r, normal)
            }
        }
    }
}

fn box_surfaces(f: &Frame, half: [f64; 3]) -> Vec<Surface> {
    let (ea, eu, ev) = (f.a * half[0], f.u * half[1], f.v * half[2]);
    vec![
        Surface::Rect {
            c: f.o + ea,
            e1: eu,
            e2: ev,
        },
        Surface::Rect {
            c: f.o - ea,
            e1: ev,
            e2: eu,
        },
        Surface::Rect {
            c: f.o + eu,
            e1: ev,
            e2: ea,
        },
        Surface::Rect {
            c: f.o - eu,
            e1: ea,
            e2: ev,
        },
        Surface::Rect {
            c: f.o + ev,
            e1: ea,
            e2: eu,
        },
        Surface::Rect {
            c: f.o - ev,
            e1: eu,
            e2: ea,
        },
    ]
}

#[derive(Clone, Debug)]
struct Instance {
    class: usize,
    surfaces: Vec<Surface>,
    density_factor: f64,
    noise: f64,
}

impl Instance {
    fn area(&self) -> f64 {
        self.surfaces.iter().map(Surface::area).sum()
    }

    fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
        let areas: Vec<f64> = self.surfaces.iter().map(Surface::area).collect();
        let per_surface = largest_remainder(&areas, count);
        let normal = Normal::new(0.0, self.noise.max(0.0)).expect("finite noise");
        let mut out = Vec::with_capacity(count);
        for (s, &n) in self.surfaces.iter().zip(&per_surface) {
            for _ in 0..n {
                let (p, nrm) = s.sample(rng);
                let q = if self.noise > 0.0 {
                    p + nrm * normal.sample(rng)
                } else {
                    p
                };
                out.push([q.x as f32, q.y as f32, q.z as f32]);
            }
        }
        out
    }
}

/// A pipe that mounted instances can attach to.
#[derive(Clone, Copy, Debug)]
struct Host {
    f: Frame,
    r: f64,
    len: f64,
}

fn horizontal_axis<R: Rng>(rng: &mut R) -> V3 {
    if rng.random_bool(0.5) {
        V3::x()
    } else {
        V3::y()
    }
}

/// Geometry of one tapered instance, kept for the ambiguity check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaperGeometry {
    pub r_wide: f64,
    pub r_narrow: f64,
    pub length: f64,
}

fn build_instance<R: Rng>(
    spec: &SceneSpec,
    class: usize,
    hosts: &[Host],
    rng: &mut R,
    tapers: &mut Vec<TaperGeometry>,
) -> (Instance, Option<Host>) {
    let c = &spec.classes[class];
    let extent = spec.extent();
    let len = c.length.sample(rng);
    let radius = c.radius.sample(rng);
    let mut surfaces = Vec::new();
    let mut new_host = None;
    let anchor: V3;
    match c.mount {
        Mount::Free => {
            let x = rng.random_range(0.0..extent);
            let y = rng.random_range(0.0..extent);
            let z = c.elevation.sample(rng);
            let vertical = rng.random_bool(c.vertical_share);
            let axis = if vertical {
                V3::z()
            } else {
                horizontal_axis(rng)
            };
            let start = if vertical {
                V3::new(x, y, 0.0)
            } else {
                V3::new(x, y, z) - axis * (len / 2.0)
            };
            let f = Frame::with_up(start, axis);
            anchor = start + axis * (len / 2.0);
            match c.kind {
                PrimitiveKind::StraightCylinder => {
                    surfaces.push(Surface::Tube {
                        f,
                        r0: radius,
                        r1: radius,
                        len,
                    });
                    new_host = Some(Host { f, r: radius, len });
                }
                PrimitiveKind::TaperedCylinder => {
                    let r1 = radius * 0.5;
                    surfaces.push(Surface::Tube {
                        f,
                        r0: radius,
                        r1,
                        len,
                    });
                    tapers.push(TaperGeometry {
                        r_wide: radius,
                        r_narrow: r1,
                        length: len,
                    });
                }
                PrimitiveKind::Box => {
                    let centre = Frame::with_up(anchor, axis);
                    let half_h = radius * rng.random_range(0.5..=1.0);
                    surfaces.extend(box_surfaces(&centre, [len / 2.0, radius, half_h]));
                }
                PrimitiveKind::BigCylinder => {
                    let f = Frame::with_up(V3::new(x, y, z), V3::z());
                    surfaces.push(Surface::Tube {
                        f,
                        r0: radius,
                        r1: radius,
                        len,
                    });
                    let top = Frame::new(V3::new(x, y, z + len), V3::z());
                    surfaces.push(Surface::Disk {
                        f: top,
                        r_in: 0.0,
                        r_out: radius,
                    });
                }
                PrimitiveKind::CompositeAssembly => {
                    surfaces.extend(assembly(&f, radius, radius, len, rng));
                }
                PrimitiveKind::BentCylinder => unreachable!("validated"),
            }
        }
        mount => {
            let host = hosts[rng.random_range(0..hosts.len())];
            let hf = host.f;
            match mount {
                Mount::Inline => {
                    let t = rng.random_range(0.15..=0.85) * host.len;
                    let outer = host.r * radius;
                    let f = Frame {
                        o: hf.o + hf.a * (t - len / 2.0),
                        ..hf
                    };
                    anchor = hf.o + hf.a * t;
                    match c.kind {
                        PrimitiveKind::CompositeAssembly => {
                            surfaces.extend(assembly(&f, host.r, outer, len, rng));
                        }
                        _ => {
                            surfaces.push(Surface::Tube {
                                f,
                                r0: outer,
                                r1: outer,
                                len,
                            });
                            surfaces.push(Surface::Disk {
                                f,
                                r_in: host.r,
                                r_out: outer,
                            });
                            let far = Frame {
                                o: f.o + f.a * len,
                                ..f
                            };
                            surfaces.push(Surface::Disk {
                                f: far,
                                r_in: host.r,
                                r_out: outer,
                            });
                        }
                    }
                }
                Mount::Branch => {
                    let t = rng.random_range(0.15..=0.85) * host.len;
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let dir = hf.u * theta.cos() + hf.v * theta.sin();
                    let start = hf.o + hf.a * t + dir * host.r;
                    let f = Frame::new(start, dir);
                    anchor = start;
                    let r = host.r * radius;
                    surfaces.push(Surface::Tube {
                        f,
                        r0: r,
                        r1: r,
                        len,
                    });
                }
                Mount::End => {
                    let (o, a) = if rng.random_bool(0.5) {
                        (hf.o + hf.a * host.len, hf.a)
                    } else {
                        (hf.o, -hf.a)
                    };
                    anchor = o;
                    match c.kind {
                        PrimitiveKind::BentCylinder => {
                            let bend = (len / (PI / 2.0)).max(host.r * 1.5);
                            let mut f = Frame::new(o, a);
                            let theta = rng.random_range(0.0..2.0 * PI);
                            let u = f.u * theta.cos() + f.v * theta.sin();
                            f.v = a.cross(&u);
                            f.u = u;
                            surfaces.push(Surface::Bend {
                                f,
                                bend,
                                r: host.r,
                                angle: PI / 2.0,
                            });
                        }
                        _ => {
                            let f = Frame::new(o, a);
                            let r1 = host.r * radius;
                            surfaces.push(Surface::Tube {
                                f,
                                r0: host.r,
                                r1,
                                len,
                            });
                            if c.kind == PrimitiveKind::TaperedCylinder {
                                tapers.push(TaperGeometry {
                                    r_wide: host.r,
                                    r_narrow: r1,
                                    length: len,
                                });
                            }
                        }
                    }
                }
                Mount::Free => unreachable!(),
            }
        }
    }
    let density_factor = if anchor.x < extent / 2.0 {
        1.0
    } else {
        1.0 / spec.density_contrast
    };
    (
        Instance {
            class,
            surfaces,
            density_factor,
            noise: c.noise,
        },
        new_host,
    )
}

/// Cylinder body around an axis, a perpendicular box and a closing end disk.
fn assembly<R: Rng>(f: &Frame, inner: f64, body: f64, len: f64, rng: &mut R) -> Vec<Surface> {
    let mut out = vec![
        Surface::Tube {
            f: *f,
            r0: body,
            r1: body,
            len,
        },
        Surface::Disk {
            f: *f,
            r_in: inner.min(body * 0.999),
            r_out: body,
        },
    ];
    let side = if rng.random_bool(0.5) { f.v } else { -f.v };
    let stem_len = body * rng.random_range(1.0..=1.6);
    let half = body * 0.35;
    let centre = f.o + f.a * (len / 2.0) + side * (body + stem_len / 2.0);
    let stem = Frame::with_up(centre, side);
    out.extend(box_surfaces(&stem, [stem_len / 2.0, half, half]));
    out
}

/// A generated scene with the facts needed to describe it.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: LabeledPointCloud,
    pub instances_per_class: Vec<usize>,
    pub ambiguity: Option<AmbiguityProfile>,
    /// Seed of the attempt that produced the scene.
    pub attempt_seed: u64,
}

impl Scene {
    pub fn realized_fractions(&self) -> Vec<f64> {
        let n = self.cloud.len() as f64;
        crate::stats::class_counts(&self.cloud)
            .iter()
            .map(|&c| c as f64 / n)
            .collect()
    }
}

/// Eigen-feature distances between a tapered cylinder and a straight one of
/// its mid-body radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmbiguityProfile {
    /// Distance of mean (linearity, planarity, sphericity) over mid-body
    /// neighbourhoods.
    pub mid_distance: f64,
    /// The same at the narrow end.
    pub end_distance: f64,
}

impl AmbiguityProfile {
    pub fn certified(&self) -> bool {
        self.mid_distance < AMBIGUITY_MID_MAX && self.end_distance > AMBIGUITY_END_MIN
    }
}

const AMBIGUITY_K: usize = 16;

fn mean_shape(points: &[Point], along: &[f64], band: (f64, f64)) -> Result<[f64; 3]> {
    let index = SpatialIndex::from_positions(points)?;
    let ids: Vec<usize> = (0..points.len())
        .filter(|&i| along[i] >= band.0 && along[i] <= band.1)
        .collect();
    if ids.is_empty() {
        return Err(Error::domain("no points in the ambiguity band"));
    }
    let k = AMBIGUITY_K.min(points.len());
    let mut acc = [0.0; 3];
    for &i in &ids {
        let nb: Vec<[f64; 3]> = index.knn(i, k)?.iter().map(|&j| index.point(j)).collect();
        let s = eigen_features(&nb).shape();
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    Ok(acc.map(|a| a / ids.len() as f64))
}

fn sample_tube(
    r0: f64,
    r1: f64,
    len: f64,
    density: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Point>, Vec<f64>) {
    let f = Frame::new(V3::zeros(), V3::x());
    let s = Surface::Tube { f, r0, r1, len };
    let n = ((s.area() * density).round() as usize).max(4 * AMBIGUITY_K);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut pts = Vec::with_capacity(n);
    let mut along = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, nrm) = s.sample(rng);
        let q = if noise > 0.0 {
            p + nrm * normal.sample(rng)
        } else {
            p
        };
        pts.push([q.x as f32, q.y as f32, q.z as f32]);
        along.push(p.x / len);
    }
    (pts, along)
}

/// Compares a tapered instance with a straight cylinder of its mid-body
/// radius, both sampled at `density` with 16-point neighbourhoods.
pub fn measure_ambiguity(
    taper: TaperGeometry,
    density: f64,
    noise: f64,
    seed: u64,
) -> Result<AmbiguityProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mid_r = 0.5 * (taper.r_wide + taper.r_narrow);
    let (tp, ta) = sample_tube(
        taper.r_wide,
        taper.r_narrow,
        taper.length,
        density,
        noise,
        &mut rng,
    );
    let (sp, sa) = sample_tube(mid_r, mid_r, taper.length, density, noise, &mut rng);
    let mid = (0.4, 0.6);
    let end = (0.8, 0.95);
    let dist = |a: [f64; 3], b: [f64; 3]| {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    let straight_mid = mean_shape(&sp, &sa, mid)?;
    Ok(AmbiguityProfile {
        mid_distance: dist(mean_shape(&tp, &ta, mid)?, straight_mid),
        end_distance: dist(mean_shape(&tp, &ta, end)?, mean_shape(&sp, &sa, end)?),
    })
}

fn generate_attempt(
    spec: &SceneSpec,
    seed: u64,
    exec: Exec,
) -> Result<(Scene, Vec<TaperGeometry>)> {
    let budgets = spec.point_budgets()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let host_class = spec.host_class();
    let mut hosts: Vec<Host> = Vec::new();
    let mut instances: Vec<Instance> = Vec::new();
    let mut tapers = Vec::new();
    let mut per_class = vec![0usize; spec.num_classes()];
    let mut counts: Vec<usize> = Vec::new();

    // Free classes first so that hosts exist before anything mounts on them.
    let mut order: Vec<usize> = (0..spec.num_classes())
        .filter(|&c| spec.classes[c].mount == Mount::Free)
        .collect();
    order.extend((0..spec.num_classes()).filter(|&c| spec.classes[c].mount != Mount::Free));

    for &c in &order {
        let cs = &spec.classes[c];
        let mut capacity = 0.0;
        let first = instances.len();
        while per_class[c] < cs.instances.0
            || (capacity < budgets[c] as f64 && per_class[c] < cs.instances.1)
        {
            let (inst, host) = build_instance(spec, c, &hosts, &mut rng, &mut tapers);
            capacity += inst.area() * inst.density_factor * spec.density;
            if let (Some(h), Some(hc)) = (host, host_class) {
                if hc == c {
                    hosts.push(h);
                }
            }
            instances.push(inst);
            per_class[c] += 1;
        }
        let weights: Vec<f64> = instances[first..]
            .iter()
            .map(|i| i.area() * i.density_factor)
            .collect();
        counts.extend(largest_remainder(&weights, budgets[c]));
    }

    let seeds: Vec<u64> = (0..instances.len()).map(|_| rng.random()).collect();
    let jobs: Vec<(&Instance, usize, u64)> = instances
        .iter()
        .zip(counts)
        .zip(seeds)
        .map(|((i, n), s)| (i, n, s))
        .collect();
    let sampled = par::map_slice(exec, &jobs, |&(inst, n, s)| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        inst.sample(n, &mut r)
    });
    let mut positions = Vec::with_capacity(spec.total_points);
    let mut labels = Vec::with_capacity(spec.total_points);
    for (inst, pts) in instances.iter().zip(sampled) {
        labels.extend(std::iter::repeat_n(inst.class as u16, pts.len()));
        positions.extend(pts);
    }
    let cloud = LabeledPointCloud::new(positions, labels, spec.num_classes())?;
    Ok((
        Scene {
            cloud,
            instances_per_class: per_class,
            ambiguity: None,
            attempt_seed: seed,
        },
        tapers,
    ))
}

/// Generates the scene of `spec`. When the spec contains tapered cylinders
/// the straight/tapered ambiguity profile is certified; failing scenes are
/// regenerated from the next derived seed.
pub fn generate_scene(spec: &SceneSpec, exec: Exec) -> Result<Scene> {
    spec.validate()?;
    let noise = spec
        .classes
        .iter()
        .find(|c| c.kind == PrimitiveKind::TaperedCylinder)
        .map(|c| c.noise);
    let mut last = None;
    for attempt in 0..MAX_CERTIFY_ATTEMPTS {
        let seed = spec
            .seed
            .wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (mut scene, tapers) = generate_attempt(spec, seed, exec)?;
        let (Some(noise), Some(&taper)) = (noise, tapers.first()) else {
            return Ok(scene);
        };
        let profile = measure_ambiguity(taper, spec.density, noise, seed)?;
        scene.ambiguity = Some(profile);
        if profile.certified() {
            return Ok(scene);
        }
        last = Some(profile);
    }
    Err(Error::domain(format!(
        "could not certify the tapered/straight ambiguity profile in {MAX_CERTIFY_ATTEMPTS} attempts (last {last:?})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_shape() {
        let spec = default_industrial_spec();
        spec.validate().unwrap();
        assert_eq!(spec.num_classes(), 12);
        let head: f64 = spec.classes[..3].iter().map(|c| c.fraction).sum();
        assert!((0.74..=0.80).contains(&head), "{head}");
        let tail: Vec<&ClassSpec> = spec.classes[5..].iter().collect();
        assert_eq!(tail.len(), 7);
        assert!(tail.iter().all(|c| c.fraction < 0.03));
    }

    #[test]
    fn largest_remainder_is_exact() {
        let parts = largest_remainder(&[0.5, 0.25, 0.25], 7);
        assert_eq!(parts.iter().sum::<usize>(), 7);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
    }

    #[test]
    fn surfaces_report_consistent_areas() {
        let f = Frame::new(V3::zeros(), V3::x());
        let tube = Surface::Tube {
            f,
            r0: 1.0,
            r1: 1.0,
            len: 2.0,
        };
        assert!((tube.area() - 4.0 * PI).abs() < 1e-12);
        let bend = Surface::Bend {
            f,
            bend: 2.0,
            r: 0.5,
            angle: PI / 2.0,
        };
        assert!((bend.area() - 2.0 * PI * 0.5 * 2.0 * PI / 2.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (p, n) = tube.sample(&mut rng);
            assert!(((p.y * p.y + p.z * p.z).sqrt() - 1.0).abs() < 1e-9);
            assert!((n.norm() - 1.0).abs() < 1e-9);
            let (q, _) = bend.sample(&mut rng);
            let centre = f.o + f.u * 2.0;
            let d = q - centre;
            let in_plane = (d - f.v * d.dot(&f.v)).norm();
            let off = ((in_plane - 2.0).powi(2) + d.dot(&f.v).powi(2)).sqrt();
            assert!((off - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        let mut spec = default_industrial_spec();
        spec.total_points = 100;
        assert!(spec.point_budgets().is_err());
    }
}
