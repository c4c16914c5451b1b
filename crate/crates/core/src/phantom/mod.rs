//! Procedural five-part heart phantoms and the dataset file format.
//!
//! Parts are built in a normalized frame (the heart fits `[-1, 1]³`) and
//! scaled by `scale / 2`, so with `scale = 100` the phantom lives in a
//! 100 mm box.

mod dataset;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::vec3::{self, Mat3, Point};
use crate::geometry::{contact_regions, AnalyticPart, CapPlane, PartKind};
use crate::rng;

pub use dataset::{generate_dataset, load_dataset, make_splits, save_dataset, split_sizes, DatasetManifest, DatasetRecord, Split, DATASET_MAGIC, DATASET_VERSION};

pub const NUM_PARTS: usize = 5;
pub const PART_NAMES: [&str; NUM_PARTS] = ["Myo", "LV", "RV", "LA", "RA"];
pub const DEFAULT_SCALE: f64 = 100.0;
/// Contact tolerance in mm.
pub const CONTACT_TAU_MM: f64 = 1.0;
/// Relative jitter applied to template radii and center offsets.
pub const JITTER: f64 = 0.2;
pub const MAX_REJECTIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartId {
    Myo = 0,
    Lv = 1,
    Rv = 2,
    La = 3,
    Ra = 4,
}

impl PartId {
    pub const ALL: [PartId; NUM_PARTS] = [PartId::Myo, PartId::Lv, PartId::Rv, PartId::La, PartId::Ra];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        PART_NAMES[self.index()]
    }

    pub fn from_name(s: &str) -> Option<Self> {
        PART_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(s))
            .map(|i| Self::ALL[i])
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid scale {0}")]
    InvalidScale(f64),
    #[error("no valid phantom after {0} attempts")]
    Rejected(usize),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Edge length of the bounding box in mm.
    pub scale: f64,
    /// Myo, LV, RV, LA, RA, all in mm.
    pub parts: [AnalyticPart; NUM_PARTS],
}

impl PhantomSpec {
    pub fn part(&self, id: PartId) -> &AnalyticPart {
        &self.parts[id.index()]
    }

    /// mm per normalized unit.
    pub fn half_extent(&self) -> f64 {
        self.scale * 0.5
    }

    pub fn to_normalized(&self, p: Point) -> Point {
        vec3::scale(p, 1.0 / self.half_extent())
    }

    pub fn to_mm(&self, p: Point) -> Point {
        vec3::scale(p, self.half_extent())
    }

    /// Signed distance of every part at `p` (mm in, mm out).
    pub fn sdf_all(&self, p: Point) -> [f64; NUM_PARTS] {
        std::array::from_fn(|i| self.parts[i].sdf(p))
    }

    /// Uniformly scale the whole phantom about `pivot` by `s`.
    pub fn scaled_about(&self, pivot: Point, s: f64) -> Self {
        let mut out = self.clone();
        for p in out.parts.iter_mut() {
            *p = scale_part(p, pivot, s);
        }
        out
    }

    /// Check every structural invariant (see module docs).
    pub fn validate(&self) -> Result<(), PhantomError> {
        let h = self.half_extent();
        for (i, p) in self.parts.iter().enumerate() {
            p.validate()
                .map_err(|e| PhantomError::Invariant(format!("{}: {e}", PART_NAMES[i])))?;
            let (lo, hi) = p.bounding_box();
            if lo.iter().chain(&hi).any(|v| v.abs() > h) {
                return Err(PhantomError::Invariant(format!("{} leaves the box", PART_NAMES[i])));
            }
        }
        let expect = [
            matches!(self.parts[0].kind, PartKind::Shell { .. }),
            matches!(self.parts[1].kind, PartKind::Ellipsoid),
            matches!(self.parts[2].kind, PartKind::CappedEllipsoid { .. }),
            matches!(self.parts[3].kind, PartKind::Ellipsoid),
            matches!(self.parts[4].kind, PartKind::Ellipsoid),
        ];
        if expect.contains(&false) {
            return Err(PhantomError::Invariant("part kinds out of canonical order".into()));
        }
        let (myo, lv) = (&self.parts[0], &self.parts[1]);
        if !(lv.sdf(lv.center) < 0.0 && myo.sdf(lv.center) > 0.0 && myo.outer_sdf(lv.center) < 0.0) {
            return Err(PhantomError::Invariant("LV is not inside the Myo cavity".into()));
        }
        let tau = CONTACT_TAU_MM * self.scale / DEFAULT_SCALE;
        let mut r = rng::stream(self.seed, "phantom-validate", 0);
        let mut samples = Vec::new();
        let mut per_part = Vec::new();
        for p in &self.parts {
            let s = p.sample_surface(1500, &mut r);
            per_part.push(s.clone());
            samples.extend(s);
        }
        let contacts = contact_regions(&self.parts, &samples, tau)
            .map_err(|e| PhantomError::Invariant(e.to_string()))?;
        for other in [PartId::Lv, PartId::Rv, PartId::La, PartId::Ra] {
            if contacts.between(0, other.index()) == 0 {
                return Err(PhantomError::Invariant(format!("no Myo-{} contact", other.name())));
            }
        }
        // Parts may touch but not interpenetrate by more than τ.
        for (i, pts) in per_part.iter().enumerate() {
            for (j, other) in self.parts.iter().enumerate() {
                if i == j {
                    continue;
                }
                if let Some(q) = pts.iter().find(|q| other.sdf(**q) < -tau) {
                    return Err(PhantomError::Invariant(format!(
                        "{} surface point {q:?} is inside {}",
                        PART_NAMES[i], PART_NAMES[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

fn scale_part(p: &AnalyticPart, pivot: Point, s: f64) -> AnalyticPart {
    let map = |c: Point| vec3::add(pivot, vec3::scale(vec3::sub(c, pivot), s));
    let mut out = *p;
    out.center = map(p.center);
    out.radii = vec3::scale(p.radii, s);
    out.kind = match p.kind {
        PartKind::Ellipsoid => PartKind::Ellipsoid,
        PartKind::Shell {
            inner_center,
            inner_radii,
        } => PartKind::Shell {
            inner_center: map(inner_center),
            inner_radii: vec3::scale(inner_radii, s),
        },
        PartKind::CappedEllipsoid { cap } => {
            // n·p ≤ o  ⇔  n·map(p) ≤ n·pivot + s(o - n·pivot)
            let np = vec3::dot(cap.normal, pivot);
            PartKind::CappedEllipsoid {
                cap: CapPlane {
                    normal: cap.normal,
                    offset: np + s * (cap.offset - np),
                },
            }
        }
    };
    out
}

fn rotate_part(p: &AnalyticPart, rot: &Mat3) -> AnalyticPart {
    let mut out = *p;
    out.center = vec3::mat_vec(rot, p.center);
    out.rotation = vec3::mat_mul(rot, &p.rotation);
    if let PartKind::Shell {
        inner_center,
        inner_radii,
    } = p.kind
    {
        out.kind = PartKind::Shell {
            inner_center: vec3::mat_vec(rot, inner_center),
            inner_radii,
        };
    }
    if let PartKind::CappedEllipsoid { cap } = p.kind {
        out.kind = PartKind::CappedEllipsoid {
            cap: CapPlane {
                normal: vec3::mat_vec(rot, cap.normal),
                offset: cap.offset,
            },
        };
    }
    out
}

/// Template numbers in normalized units.
mod template {
    pub const MYO_CENTER: [f64; 3] = [0.0, 0.0, -0.3];
    pub const MYO_RADII: [f64; 3] = [0.42, 0.42, 0.6];
    pub const MYO_WALL: [f64; 3] = [0.16, 0.16, 0.12];
    pub const RV_RADII: [f64; 3] = [0.3, 0.35, 0.5];
    /// How far the RV center sits beyond the Myo support plane.
    pub const RV_STANDOFF: f64 = 0.13;
    pub const LA_CENTER: [f64; 3] = [-0.2, 0.0, 0.55];
    pub const LA_RADII: [f64; 3] = [0.24, 0.24, 0.2];
    pub const RA_CENTER: [f64; 3] = [0.34, 0.0, 0.5];
    pub const RA_RADII: [f64; 3] = [0.22, 0.26, 0.2];
    /// Largest whole-heart tilt, radians.
    pub const MAX_TILT: f64 = 0.25;
}

/// Distance from the center of an ellipsoid to its support plane along `n`.
fn support(p: &AnalyticPart, n: Point) -> f64 {
    let l = vec3::mat_t_vec(&p.rotation, n);
    (0..3).map(|j| (p.radii[j] * l[j]).powi(2)).sum::<f64>().sqrt()
}

/// Slide `part` along the line to `target.center` until it just touches the
/// outer surface of `target`.
fn snap_tangent(part: &mut AnalyticPart, target: &AnalyticPart) {
    let dir = vec3::normalize(vec3::sub(target.center, part.center));
    let probe = fibonacci_sphere(4000);
    let gap = |s: f64, part: &AnalyticPart| -> f64 {
        let c = vec3::add(part.center, vec3::scale(dir, s));
        probe
            .iter()
            .map(|u| {
                let q = vec3::add(c, vec3::mat_vec(&part.rotation, [u[0] * part.radii[0], u[1] * part.radii[1], u[2] * part.radii[2]]));
                target.outer_sdf(q)
            })
            .fold(f64::INFINITY, f64::min)
    };
    // Positive when backed off, negative once the centers coincide.
    let (mut lo, mut hi) = (-1.0, vec3::norm(vec3::sub(target.center, part.center)));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if gap(mid, part) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    part.center = vec3::add(part.center, vec3::scale(dir, lo));
}

fn fibonacci_sphere(n: usize) -> Vec<Point> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), r * t.sin(), z]
        })
        .collect()
}

/// Build one normalized candidate; `jitter = 0` gives the template.
fn build_candidate(rng: &mut impl Rng, jitter: f64) -> [AnalyticPart; NUM_PARTS] {
    use template::*;
    let mut j = |v: f64| if jitter > 0.0 { v * (1.0 + rng.gen_range(-jitter..jitter)) } else { v };
    let myo_r = [j(MYO_RADII[0]), j(MYO_RADII[1]), j(MYO_RADII[2])];
    let wall = [j(MYO_WALL[0]), j(MYO_WALL[1]), j(MYO_WALL[2])];
    let inner_r = [myo_r[0] - wall[0], myo_r[1] - wall[1], myo_r[2] - wall[2]];
    let myo_c = [
        MYO_CENTER[0] + (j(1.0) - 1.0) * myo_r[0] * 0.5,
        MYO_CENTER[1] + (j(1.0) - 1.0) * myo_r[1] * 0.5,
        MYO_CENTER[2] + (j(1.0) - 1.0) * myo_r[2] * 0.5,
    ];
    let myo = AnalyticPart::shell(myo_c, myo_r, myo_c, inner_r, vec3::IDENTITY);
    let lv = AnalyticPart::ellipsoid(myo_c, inner_r, vec3::IDENTITY);

    let theta = (j(1.0) - 1.0) * 1.0;
    let n = [theta.cos(), theta.sin(), 0.0];
    let h = support(&myo, n);
    let rv_r = [j(RV_RADII[0]), j(RV_RADII[1]), j(RV_RADII[2])];
    let rv_c = vec3::add(myo_c, vec3::scale(n, h + j(RV_STANDOFF)));
    let rv_c = [rv_c[0], rv_c[1], myo_c[2] + (j(1.0) - 1.0) * 0.2];
    let rv_rot = vec3::axis_angle([0.0, 0.0, 1.0], theta);
    // Keep n·p ≥ n·myo_c + h, i.e. (-n)·p ≤ -(n·myo_c + h).
    let cap = CapPlane {
        normal: vec3::scale(n, -1.0),
        offset: -(vec3::dot(n, myo_c) + h),
    };
    let rv = AnalyticPart::capped(rv_c, rv_r, rv_rot, cap);

    let atrium = |c: Point, r: Point, j: &mut dyn FnMut(f64) -> f64| {
        let c = [c[0] + (j(1.0) - 1.0) * r[0], c[1] + (j(1.0) - 1.0) * r[1], c[2] + (j(1.0) - 1.0) * r[2] * 0.5];
        let r = [j(r[0]), j(r[1]), j(r[2])];
        let mut a = AnalyticPart::ellipsoid(c, r, vec3::IDENTITY);
        snap_tangent(&mut a, &myo);
        a
    };
    let la = atrium(LA_CENTER, LA_RADII, &mut j);
    let ra = atrium(RA_CENTER, RA_RADII, &mut j);

    let mut parts = [myo, lv, rv, la, ra];
    if jitter > 0.0 {
        let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let angle = rng.gen_range(-MAX_TILT..MAX_TILT) * jitter / JITTER;
        if vec3::norm(axis) > 1e-6 {
            let rot = vec3::axis_angle(axis, angle);
            for p in parts.iter_mut() {
                *p = rotate_part(p, &rot);
            }
        }
    }
    parts
}

fn finish(seed: u64, scale: f64, parts: [AnalyticPart; NUM_PARTS]) -> PhantomSpec {
    let s = scale * 0.5;
    PhantomSpec {
        seed,
        scale,
        parts: parts.map(|p| scale_part(&p, [0.0; 3], s)),
    }
}

/// The zero-jitter phantom.
pub fn canonical_phantom(scale: f64) -> Result<PhantomSpec, PhantomError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(PhantomError::InvalidScale(scale));
    }
    let mut r = rng::stream(0, "phantom", 0);
    Ok(finish(0, scale, build_candidate(&mut r, 0.0)))
}

/// Jittered phantom, resampled until [`PhantomSpec::validate`] passes.
pub fn generate_phantom(seed: u64, scale: f64) -> Result<PhantomSpec, PhantomError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(PhantomError::InvalidScale(scale));
    }
    for attempt in 0..MAX_REJECTIONS {
        let mut r = rng::stream(seed, "phantom", attempt as u64);
        let spec = finish(seed, scale, build_candidate(&mut r, JITTER));
        match spec.validate() {
            Ok(()) => return Ok(spec),
            Err(e) => log::debug!("phantom {seed} attempt {attempt} rejected: {e}"),
        }
    }
    Err(PhantomError::Rejected(MAX_REJECTIONS))
}
